// tgd: command-line driver for data generation, teacher pretraining, transfer
// and evaluation. Exit codes: 0 success, 1 runtime failure, 2 usage or
// configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tgd/checkpoint.hpp"
#include "tgd/config.hpp"
#include "tgd/evaluation.hpp"
#include "tgd/self_training.hpp"
#include "tgd/simd/kernels.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

tgd::RunConfig base_config(const std::string& path) {
  return path.empty() ? tgd::RunConfig{} : tgd::load_run_config(path);
}

void write_json(const fs::path& file, const json& j) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw tgd::IoError("cannot write " + file.string());
  out << j.dump(2) << "\n";
}

std::vector<std::size_t> eval_indices(const tgd::StoredDataset& d, const std::string& what,
                                      std::vector<std::string>& warnings) {
  auto idx = d.manifest.indices(tgd::Split::test);
  if (!idx.empty()) return idx;
  idx = d.manifest.indices(tgd::Split::val);
  if (!idx.empty()) {
    warnings.push_back(what + ": no test split, using val");
    return idx;
  }
  warnings.push_back(what + ": no test or val split, using every sample");
  idx.resize(d.dataset.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

void check_input_shape(const tgd::ModelSpec& spec, const tgd::Dataset& data) {
  const tgd::ImageShape want{spec.channels, spec.height, spec.width};
  if (!(data.shape == want)) {
    throw tgd::ConfigError("dataset images are " + std::to_string(data.shape.channels) + "x" +
                           std::to_string(data.shape.height) + "x" +
                           std::to_string(data.shape.width) + " but the model expects " +
                           std::to_string(want.channels) + "x" + std::to_string(want.height) +
                           "x" + std::to_string(want.width));
  }
}

struct GendataArgs {
  std::string config, out;
  std::optional<double> strength;
  std::optional<std::string> artifact;
  std::optional<std::size_t> n_per_class;
  std::optional<std::uint64_t> seed;
};

int cmd_gendata(const GendataArgs& a) {
  tgd::RunConfig cfg = base_config(a.config);
  if (a.strength) cfg.data.synthetic.artifact_strength = *a.strength;
  if (a.artifact) cfg.data.synthetic.artifact = tgd::parse_artifact(*a.artifact);
  if (a.n_per_class) cfg.data.synthetic.n_per_class = *a.n_per_class;
  if (a.seed) cfg.seed = *a.seed;
  const fs::path out = tgd::resolve_output(a.out);
  cfg.output_dir = out.generic_string();
  cfg.validate();

  tgd::Dataset data;
  if (cfg.data.kind == "synthetic") {
    tgd::SyntheticSpec spec = cfg.data.synthetic;
    data = tgd::generate_synthetic(spec);
  } else {
    std::vector<std::string> warnings;
    data = tgd::load_image_folder(cfg.data.folder, cfg.data.label_map,
                                  {cfg.model.channels, cfg.model.height, cfg.model.width},
                                  &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  }
  const tgd::DatasetManifest manifest = tgd::split_dataset(data, cfg.data.split, cfg.seed);
  tgd::save_dataset(data, manifest, out);
  tgd::write_frozen_config(cfg, out);
  json counts;
  for (tgd::Split s : {tgd::Split::train, tgd::Split::val, tgd::Split::test,
                       tgd::Split::transfer, tgd::Split::unused}) {
    counts[std::string(tgd::split_name(s))] = manifest.indices(s).size();
  }
  const json digests = {{"dataset_digest", manifest.dataset_digest},
                        {"manifest_digest", manifest.digest()},
                        {"config_digest", tgd::config_digest(cfg)},
                        {"splits", counts}};
  write_json(out / "digests.json", digests);
  std::cout << digests.dump() << "\n";
  return kOk;
}

struct PretrainArgs {
  std::string config, data, out;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
};

int cmd_pretrain(const PretrainArgs& a) {
  tgd::RunConfig cfg = base_config(a.config);
  if (a.epochs) {
    cfg.pretrain.epochs = *a.epochs;
    cfg.pretrain.warmup_epochs = std::min(cfg.pretrain.warmup_epochs, *a.epochs);
  }
  if (a.seed) cfg.seed = *a.seed;
  const fs::path out = tgd::resolve_output(a.out);
  cfg.output_dir = out.generic_string();
  cfg.validate();

  const tgd::StoredDataset stored = tgd::load_dataset(a.data);
  check_input_shape(cfg.model, stored.dataset);
  const auto train = stored.manifest.indices(tgd::Split::train);
  if (train.empty()) throw tgd::ConfigError("dataset has no training split");

  tgd::PretrainConfig pc = cfg.pretrain;
  pc.rng_seed = cfg.seed;
  fs::create_directories(out);
  tgd::write_frozen_config(cfg, out);
  tgd::PretrainOptions options;
  options.metrics_path = out / "metrics.ndjson";
  options.observer = [&](const tgd::EpochMetrics& m) {
    std::fprintf(stderr, "epoch %d/%d loss %.5f lr %.5f\n", m.epoch + 1, pc.epochs,
                 m.mean_loss, m.learning_rate);
  };
  const tgd::PretrainResult result =
      tgd::run_pretrain(cfg.model, stored.dataset, train, pc, cfg.augment_pretrain, options);

  const tgd::Provenance prov{"pretrain", stored.manifest.digest(), cfg.seed,
                             tgd::config_digest(cfg)};
  tgd::save_checkpoint(result.params, cfg.model, prov, out / "checkpoint");
  json summary = {{"checkpoint_digest", tgd::checkpoint_digest(out / "checkpoint")},
                  {"config_digest", prov.config_digest},
                  {"dataset_id", prov.dataset_id},
                  {"epochs", pc.epochs}};
  const auto test = stored.manifest.indices(tgd::Split::test);
  if (!test.empty()) {
    const tgd::Checkpoint ckpt{cfg.model, result.params, prov};
    summary["test_auroc"] = tgd::evaluate_checkpoint(ckpt, stored.dataset, test).auroc;
  }
  write_json(out / "digests.json", summary);
  std::cout << summary.dump() << "\n";
  return kOk;
}

struct TransferArgs {
  std::string config, teacher, data, out, mode;
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
};

int cmd_transfer(const TransferArgs& a) {
  tgd::RunConfig cfg = base_config(a.config);
  if (!a.mode.empty()) cfg.transfer.mode = tgd::parse_mode(a.mode);
  if (a.iterations) cfg.transfer.iterations = *a.iterations;
  if (a.seed) cfg.seed = *a.seed;
  const fs::path out = tgd::resolve_output(a.out);
  cfg.output_dir = out.generic_string();
  cfg.validate();

  const tgd::Checkpoint teacher = tgd::load_checkpoint(a.teacher, cfg.model);
  const tgd::StoredDataset stored = tgd::load_dataset(a.data);
  check_input_shape(cfg.model, stored.dataset);
  auto subset = stored.manifest.indices(tgd::Split::transfer);
  if (subset.empty()) {
    std::cerr << "warning: no transfer split, training on the train split\n";
    subset = stored.manifest.indices(tgd::Split::train);
  }
  if (subset.empty()) throw tgd::ConfigError("target dataset has no transfer or train samples");

  tgd::TransferConfig tc = cfg.transfer;
  tc.rng_seed = cfg.seed;
  fs::create_directories(out);
  tgd::write_frozen_config(cfg, out);
  tgd::TransferOptions options;
  options.metrics_path = out / "metrics.ndjson";
  if (tc.validation_interval > 0) {
    options.validation_data = &stored.dataset;
    options.validation_indices = stored.manifest.indices(tgd::Split::val);
    if (options.validation_indices.empty()) {
      std::cerr << "warning: validation requested but the dataset has no val split\n";
    }
  }
  const int total = tc.effective_iterations(subset.size());
  options.observer = [&](const tgd::SelfTrainState& st, const tgd::StepMetrics& m) {
    if (st.iteration % 50 == 0 || st.iteration == total) {
      std::fprintf(stderr, "iteration %lld/%d loss %.5f gamma %s\n",
                   static_cast<long long>(st.iteration), total, m.student_loss,
                   m.gamma ? std::to_string(*m.gamma).c_str() : "-");
    }
  };
  const tgd::TransferResult result = tgd::run_transfer(
      teacher.params, cfg.model, stored.dataset, subset, tc, cfg.augment_transfer, options);

  const tgd::Provenance prov{"transfer:" + std::string(tgd::mode_name(tc.mode)),
                             stored.manifest.digest(), cfg.seed, tgd::config_digest(cfg)};
  tgd::save_checkpoint(result.student, cfg.model, prov, out / "checkpoint");

  json fragment = {{"mode", tgd::mode_name(tc.mode)},
                   {"iterations", total},
                   {"teacher_checkpoint_digest", tgd::checkpoint_digest(a.teacher)},
                   {"checkpoint_digest", tgd::checkpoint_digest(out / "checkpoint")},
                   {"config_digest", prov.config_digest},
                   {"dataset_id", prov.dataset_id},
                   {"metrics", "metrics.ndjson"}};
  if (!result.gamma_trace.empty()) {
    const auto g = tgd::summarize_gamma(result.gamma_trace);
    fragment["gamma"] = {{"min", g.min}, {"max", g.max}, {"mean", g.mean}, {"count", g.count}};
  }
  if (!result.steps.empty()) fragment["final_student_loss"] = result.steps.back().student_loss;
  write_json(out / "digests.json", fragment);
  std::cout << fragment.dump() << "\n";
  return kOk;
}

struct EvaluateArgs {
  std::string ckpt, ckpt_before, source_data, target_data, out, gamma_trace;
};

std::optional<tgd::StoredDataset> load_optional(const std::string& path, const char* what,
                                                std::vector<std::string>& warnings) {
  if (path.empty()) {
    warnings.push_back(std::string("no ") + what + " data given: " + what + " cells are null");
    return std::nullopt;
  }
  if (!fs::exists(fs::path(path) / "manifest.json")) {
    warnings.push_back(std::string(what) + " data not found at " + path + ": " + what +
                       " cells are null");
    return std::nullopt;
  }
  return tgd::load_dataset(path);
}

int cmd_evaluate(const EvaluateArgs& a) {
  const fs::path out = tgd::resolve_output(a.out);
  std::vector<std::string> warnings;
  const tgd::Checkpoint after = tgd::load_checkpoint(a.ckpt);
  const bool have_before = !a.ckpt_before.empty();
  const tgd::Checkpoint before = have_before ? tgd::load_checkpoint(a.ckpt_before, after.spec)
                                             : after;
  if (!have_before) warnings.push_back("no --ckpt-before: before cells are null");

  const auto source = load_optional(a.source_data, "source", warnings);
  const auto target = load_optional(a.target_data, "target", warnings);
  std::optional<tgd::EvalSplit> source_split, target_split;
  if (source) {
    check_input_shape(after.spec, source->dataset);
    source_split = tgd::EvalSplit{&source->dataset, eval_indices(*source, "source", warnings)};
  }
  if (target) {
    check_input_shape(after.spec, target->dataset);
    target_split = tgd::EvalSplit{&target->dataset, eval_indices(*target, "target", warnings)};
  }

  std::optional<fs::path> trace;
  if (!a.gamma_trace.empty()) {
    trace = a.gamma_trace;
  } else {
    const fs::path guess = fs::path(a.ckpt).parent_path() / "metrics.ndjson";
    if (fs::exists(guess) && !tgd::read_gamma_trace(guess).empty()) trace = guess;
  }

  tgd::ForgettingOutputs res =
      tgd::forgetting_report(before, after, source_split, target_split, trace);
  tgd::EvalReport& report = res.report;
  // forgetting_report adds its own notes for missing splits; keep ours instead.
  report.warnings = warnings;
  if (!have_before) {
    report.source_before.reset();
    report.target_before.reset();
    report.forgetting_delta.reset();
    res.dumps.erase("source_before");
    res.dumps.erase("target_before");
  }

  fs::create_directories(out);
  for (const auto& [key, dump] : res.dumps) {
    tgd::write_score_dump(out / ("scores_" + key + ".tsv"), dump);
  }
  const std::string text = tgd::report_to_json(report);
  std::ofstream(out / "report.json", std::ios::trunc) << text;
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::cout << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"T-GD transfer toolkit: gendata, pretrain, transfer, evaluate"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "tgd 1.0");
  std::string isa;
  app.add_option("--isa", isa, "Kernel set: scalar or avx2 (default: best available)")
      ->check(CLI::IsMember({"scalar", "avx2"}));

  GendataArgs g;
  auto* gen = app.add_subcommand("gendata", "Generate or import a dataset with its split manifest");
  gen->add_option("--config", g.config, "Run config (JSON)");
  gen->add_option("--out", g.out, "Output dataset directory")->required();
  gen->add_option("--strength", g.strength, "Override data.synthetic.artifact_strength");
  gen->add_option("--artifact", g.artifact, "Override data.synthetic.artifact");
  gen->add_option("--n-per-class", g.n_per_class, "Override data.synthetic.n_per_class");
  gen->add_option("--seed", g.seed, "Override the run seed");

  PretrainArgs p;
  auto* pre = app.add_subcommand("pretrain", "Pretrain the teacher on the source dataset");
  pre->add_option("--config", p.config, "Run config (JSON)");
  pre->add_option("--data", p.data, "Source dataset directory")->required();
  pre->add_option("--out", p.out, "Output run directory")->required();
  pre->add_option("--epochs", p.epochs, "Override pretrain.epochs");
  pre->add_option("--seed", p.seed, "Override the run seed");

  TransferArgs t;
  auto* tra = app.add_subcommand("transfer", "Transfer a teacher checkpoint to the target dataset");
  tra->add_option("--config", t.config, "Run config (JSON)");
  tra->add_option("--teacher", t.teacher, "Teacher checkpoint directory")->required();
  tra->add_option("--data", t.data, "Target dataset directory")->required();
  tra->add_option("--out", t.out, "Output run directory")->required();
  tra->add_option("--mode", t.mode, "tgd | naive | legacy-sp | no-aug | inter-cutmix");
  tra->add_option("--iterations", t.iterations, "Override transfer.iterations");
  tra->add_option("--seed", t.seed, "Override the run seed");

  EvaluateArgs e;
  auto* eva = app.add_subcommand("evaluate", "AUROC before/after transfer and forgetting");
  eva->add_option("--ckpt", e.ckpt, "Checkpoint after transfer")->required();
  eva->add_option("--ckpt-before", e.ckpt_before, "Checkpoint before transfer");
  eva->add_option("--source-data", e.source_data, "Source dataset directory");
  eva->add_option("--target-data", e.target_data, "Target dataset directory");
  eva->add_option("--out", e.out, "Report directory")->required();
  eva->add_option("--gamma-trace", e.gamma_trace, "Metrics stream holding the gamma trace");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsageError;
  }

  try {
    if (!isa.empty()) {
      if (isa == "scalar") {
        tgd::simd::set_isa(tgd::simd::Isa::scalar);
      } else if (isa == "avx2") {
        tgd::simd::set_isa(tgd::simd::Isa::avx2);
      } else {
        throw tgd::ConfigError("--isa must be scalar or avx2");
      }
    }
    if (gen->parsed()) return cmd_gendata(g);
    if (pre->parsed()) return cmd_pretrain(p);
    if (tra->parsed()) return cmd_transfer(t);
    if (eva->parsed()) return cmd_evaluate(e);
  } catch (const tgd::ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsageError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
