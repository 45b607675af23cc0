// Acceptance runner: one PASS/FAIL line per criterion. Criteria 7-9 drive the
// command-line tool as separate processes; the rest call the library.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tgd/checkpoint.hpp"
#include "tgd/config.hpp"
#include "tgd/evaluation.hpp"

using namespace tgd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------------------
// Library-level criteria

Outcome gamma_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (double s : {0.1, 1.0, 2.0}) {
    for (double loss : {0.0, std::log(2.0), 5.0, 100.0}) {
      const double want = s / (1.0 + std::exp(loss));
      worst = std::max(worst, std::abs(compute_gamma(loss, s) - want));
    }
  }
  Rng rng(2024);
  std::size_t violations = 0;
  for (int i = 0; i < 1000000; ++i) {
    // wide loss range, both tiny and huge
    const double loss = rng.bernoulli(0.5) ? rng.uniform(0.0, 2.0) : std::exp(rng.uniform(-10.0, 6.0));
    const double s = rng.uniform(0.1, 2.0);
    const double g = compute_gamma(loss, s);
    if (!(g > 0.0 && g <= 0.5 * s)) ++violations;
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = worst <= 1e-12 && violations == 0 && t < 5.0;
  o.detail = "max closed-form error " + fmt("%.2e", worst) + ", bound violations " +
             std::to_string(violations) + "/1000000, " + fmt("%.1fs", t);
  return o;
}

ModelSpec toy_spec() {
  ModelSpec s;
  s.channels = 2;
  s.height = s.width = 8;
  s.stem_width = 4;
  s.stage_widths = {4, 4};
  s.stage_blocks = {1, 1};
  s.gn_groups = 2;
  s.noise = {0.0, 0.0};
  return s;
}

Outcome loss_and_gradient() {
  const auto t0 = Clock::now();
  const ModelSpec spec = toy_spec();
  const BasicNetwork<double> net(spec);
  const std::size_t m = 3;
  double worst_decomp = 0.0, worst_grad = 0.0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    auto params = net.init_params(700 + trial);
    Rng rng(900 + trial);
    for (auto& [name, e] : params) {
      for (std::size_t i = 0; i < e.tensor.size(); ++i) e.tensor[i] += 0.3 * rng.normal();
    }
    auto anchor = params;
    for (auto& [name, e] : anchor) {
      for (std::size_t i = 0; i < e.tensor.size(); ++i) e.tensor[i] += 0.1 * rng.normal();
    }
    std::vector<double> images(m * net.image_size());
    for (double& x : images) x = rng.uniform();
    const std::vector<double> labels{1.0, 0.0, 1.0};
    const double gamma = rng.uniform(0.0, 0.5);

    // component-wise: BCE, SP over feature weights, squared head norm
    const auto f0 = net.forward(params, images, m, ForwardMode::eval_clean, nullptr);
    double bce = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double p = std::clamp(f0.predictions[i], 1e-7, 1.0 - 1e-7);
      bce -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    bce /= static_cast<double>(m);
    double sp = 0.0, head = 0.0;
    for (const auto& [name, e] : params) {
      const auto& a = anchor.at(name);
      for (std::size_t i = 0; i < e.tensor.size(); ++i) {
        if (e.role == Role::feature) sp += (e.tensor[i] - a[i]) * (e.tensor[i] - a[i]);
        else head += e.tensor[i] * e.tensor[i];
      }
    }
    const double want = bce + gamma * sp + gamma * head;
    const double got = transfer_loss(f0.predictions, labels, params, anchor, gamma);
    worst_decomp = std::max(worst_decomp, std::abs(got - want) / std::abs(want));

    std::function<double(const BasicParameterSet<double>&)> loss =
        [&](const BasicParameterSet<double>& w) {
          const auto f = net.forward(w, images, m, ForwardMode::eval_clean, nullptr);
          return transfer_loss(f.predictions, labels, w, anchor, gamma);
        };
    Tape<double> tape;
    const auto f = net.forward(params, images, m, ForwardMode::eval_clean, nullptr, &tape);
    auto grad = net.backward(params, tape, binary_cross_entropy_logit_grad(f.predictions, labels));
    add_regularizer_grad(params, &anchor, {0.0, gamma, gamma}, grad);
    const auto num = numeric_gradient(loss, params, 1e-4);
    for (const auto& [name, e] : grad) {
      const auto& n = num.at(name);
      double scale = 0.0;
      for (std::size_t i = 0; i < n.size(); ++i) scale = std::max(scale, std::abs(n[i]));
      for (std::size_t i = 0; i < n.size(); ++i) {
        // relative, with a floor for entries far below the tensor's largest
        const double err = std::abs(e.tensor[i] - n[i]) / std::max(std::abs(n[i]), 1e-3 * scale + 1e-8);
        worst_grad = std::max(worst_grad, err);
      }
    }
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = worst_decomp <= 1e-9 && worst_grad <= 1e-3 && t < 120.0;
  o.detail = "decomposition rel err " + fmt("%.2e", worst_decomp) + ", gradient rel err " +
             fmt("%.2e", worst_grad) + " over 20 trials, " + fmt("%.1fs", t);
  return o;
}

LabeledBatch random_batch(std::size_t m, ImageShape shape, Rng& rng) {
  LabeledBatch b;
  b.shape = shape;
  b.pixels.resize(m * shape.size());
  for (float& p : b.pixels) p = static_cast<float>(rng.uniform());
  for (std::size_t i = 0; i < m; ++i) b.labels.push_back(rng.bernoulli(0.5) ? 1.0 : 0.0);
  return b;
}

Outcome cutmix_oracle() {
  const auto t0 = Clock::now();
  Rng rng(31);
  std::size_t label_mismatch = 0, pixel_mismatch = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 2 + static_cast<std::size_t>(rng.uniform_int(0, 30));
    const ImageShape shape{3, static_cast<int>(rng.uniform_int(4, 32)),
                           static_cast<int>(rng.uniform_int(4, 32))};
    const LabeledBatch in = random_batch(m, shape, rng);
    const CutmixResult r = intra_class_cutmix(in, 1.0, rng);
    if (std::memcmp(r.batch.labels.data(), in.labels.data(), m * sizeof(double)) != 0) ++label_mismatch;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t d = r.donors[i];
      const bool same = in.labels[d] == in.labels[i];
      for (int c = 0; c < shape.channels; ++c) {
        for (int y = 0; y < shape.height; ++y) {
          for (int x = 0; x < shape.width; ++x) {
            const bool inside = x >= r.box.x1 && x < r.box.x2 && y >= r.box.y1 && y < r.box.y2;
            const std::size_t off = (c * shape.height + y) * shape.width + x;
            const float want = (same && inside) ? in.image(d)[off] : in.image(i)[off];
            if (r.batch.image(i)[off] != want) ++pixel_mismatch;
          }
        }
      }
    }
  }
  const LabeledBatch small = random_batch(4, {1, 4, 4}, rng);
  const double p = 0.5;
  const int n = 10000;
  std::size_t fired = 0;
  for (int i = 0; i < n; ++i) fired += intra_class_cutmix(small, p, rng).fired;
  const double z = (static_cast<double>(fired) - n * p) / std::sqrt(n * p * (1 - p));
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = label_mismatch == 0 && pixel_mismatch == 0 && std::abs(z) <= 3.0 && t < 60.0;
  o.detail = "label mismatches " + std::to_string(label_mismatch) + ", pixel mismatches " +
             std::to_string(pixel_mismatch) + " over 200 batches, gate z=" + fmt("%.2f", z) +
             ", " + fmt("%.1fs", t);
  return o;
}

Outcome normalization_suites() {
  const auto t0 = Clock::now();
  Rng rng(77);
  double ws_mean = 0.0, ws_std = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t cout = 1 + trial % 16, fan = 9 * (1 + trial % 8);
    Tensor k({cout, fan});
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<float>(0.5 * rng.normal() + 0.1);
    const Tensor s = weight_standardize(k, 1e-5);
    for (std::int64_t c = 0; c < cout; ++c) {
      double mean = 0.0, var = 0.0;
      for (std::int64_t j = 0; j < fan; ++j) mean += s[c * fan + j];
      mean /= static_cast<double>(fan);
      for (std::int64_t j = 0; j < fan; ++j) var += (s[c * fan + j] - mean) * (s[c * fan + j] - mean);
      ws_mean = std::max(ws_mean, std::abs(mean));
      ws_std = std::max(ws_std, std::abs(std::sqrt(var / static_cast<double>(fan)) - 1.0));
    }
  }
  double gn_mean = 0.0, gn_var = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int groups = 1 + trial % 8, c = groups * (1 + trial % 4);
    Tensor x({4, c, 6, 6});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(3.0 * rng.normal() - 1.0);
    std::vector<float> scale(c), shift(c);
    for (int i = 0; i < c; ++i) {
      scale[i] = static_cast<float>(rng.uniform(0.5, 2.0));
      shift[i] = static_cast<float>(rng.normal());
    }
    Tensor pre;
    group_normalize(x, groups, 1e-5, scale, shift, &pre);
    const int per = c / groups, n = per * 36;
    for (int b = 0; b < 4; ++b) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t base = static_cast<std::size_t>(b * c + g * per) * 36;
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < n; ++i) mean += pre[base + i];
        mean /= n;
        for (int i = 0; i < n; ++i) var += (pre[base + i] - mean) * (pre[base + i] - mean);
        gn_mean = std::max(gn_mean, std::abs(mean));
        gn_var = std::max(gn_var, std::abs(var / n - 1.0));
      }
    }
  }
  const ModelSpec spec;  // default desk architecture
  const Network net(spec);
  const ParameterSet params = net.init_params(5);
  const std::size_t size = net.image_size();
  std::vector<float> images(64 * size);
  for (float& v : images) v = static_cast<float>(rng.uniform());
  const auto full = net.forward(params, images, 64, ForwardMode::eval_clean, nullptr).predictions;
  double batch_diff = 0.0;
  for (std::size_t bs : {1, 7}) {
    for (std::size_t lo = 0; lo < 64; lo += bs) {
      const std::size_t cnt = std::min(bs, 64 - lo);
      const auto part = net.forward(params, std::span<const float>(images).subspan(lo * size, cnt * size),
                                    cnt, ForwardMode::eval_clean, nullptr).predictions;
      for (std::size_t i = 0; i < cnt; ++i) batch_diff = std::max(batch_diff, std::abs(part[i] - full[lo + i]));
    }
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = ws_mean <= 1e-6 && ws_std <= 1e-4 && gn_mean <= 1e-5 && gn_var <= 1e-4 &&
           batch_diff <= 1e-6 && t < 60.0;
  o.detail = "WS |mean| " + fmt("%.1e", ws_mean) + " |std-1| " + fmt("%.1e", ws_std) +
             "; GN |mean| " + fmt("%.1e", gn_mean) + " |var-1| " + fmt("%.1e", gn_var) +
             "; batch {1,7,64} max diff " + fmt("%.1e", batch_diff) + ", " + fmt("%.1fs", t);
  return o;
}

double pairwise_auroc(const std::vector<double>& s, const std::vector<double>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1.0) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0.0) continue;
      pairs += 1.0;
      good += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return good / pairs;
}

Outcome auroc_oracle() {
  const auto t0 = Clock::now();
  Rng rng(4);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 198));
    const double grid = static_cast<double>(rng.uniform_int(2, 50));
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(rng.uniform() * grid) / grid;
      y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    y[0] = 0.0;
    y[1] = 1.0;
    if (auroc(s, y) != pairwise_auroc(s, y)) ++mismatches;
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = mismatches == 0 && t < 60.0;
  o.detail = std::to_string(mismatches) + "/1000 instances differ from the pairwise oracle, " +
             fmt("%.1fs", t);
  return o;
}

Outcome self_training_mechanics(const fs::path& work) {
  const auto t0 = Clock::now();
  ModelSpec spec;
  spec.height = spec.width = 16;
  spec.stage_widths = {8, 16};
  spec.stage_blocks = {1, 1};
  SyntheticSpec ss;
  ss.n_per_class = 24;
  ss.shape = {3, 16, 16};
  ss.artifact = ArtifactKind::blur_residual;
  ss.artifact_strength = 1.0;
  ss.seed = 8;
  const Dataset data = generate_synthetic(ss);
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  TransferConfig cfg;
  cfg.iterations = 600;
  cfg.batch_size = 8;
  cfg.rng_seed = 17;
  const ParameterSet init = Network(spec).init_params(3);

  std::size_t frozen_violations = 0, sync_violations = 0, syncs = 0;
  ParameterSet frozen = init;
  TransferOptions opt;
  opt.observer = [&](const SelfTrainState& st, const StepMetrics&) {
    if (st.iteration % cfg.feedback_cycle == 0) {
      ++syncs;
      if (!(st.teacher == st.student)) ++sync_violations;
      frozen = st.teacher;
    } else if (!(st.teacher == frozen)) {
      ++frozen_violations;
    }
  };
  const auto a = run_transfer(init, spec, data, idx, cfg, AugmentationConfig::transfer(), opt);
  const auto b = run_transfer(init, spec, data, idx, cfg, AugmentationConfig::transfer());
  save_checkpoint(a.student, spec, {"transfer:tgd", "synthetic", 17, "acceptance"}, work / "c6a");
  save_checkpoint(b.student, spec, {"transfer:tgd", "synthetic", 17, "acceptance"}, work / "c6b");
  const bool same_trace = a.gamma_trace == b.gamma_trace && a.gamma_trace.size() == 600;
  const bool same_digest = checkpoint_digest(work / "c6a") == checkpoint_digest(work / "c6b");
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = frozen_violations == 0 && sync_violations == 0 && syncs == 3 && same_trace &&
           same_digest && t < 300.0;
  o.detail = "teacher changes between syncs " + std::to_string(frozen_violations) +
             ", syncs " + std::to_string(syncs) + " (mismatched " + std::to_string(sync_violations) +
             "), replay trace " + (same_trace ? "identical" : "differs") + ", digest " +
             (same_digest ? "identical" : "differs") + ", " + fmt("%.1fs", t);
  return o;
}

// ---------------------------------------------------------------------------
// Command-line criteria

class Cli {
 public:
  Cli(std::string exe, fs::path work) : exe_(std::move(exe)), work_(std::move(work)) {}

  // Runs the tool; stdout goes to a file whose contents are returned.
  json run(const std::string& args, int* code = nullptr) const {
    const fs::path o = work_ / "last_stdout.txt", e = work_ / "last_stderr.txt";
    const std::string cmd = "'" + exe_ + "' " + args + " >'" + o.string() + "' 2>'" + e.string() + "'";
    const int status = std::system(cmd.c_str());
    const int rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    if (code) *code = rc;
    if (rc != 0) {
      if (code) return json();
      throw std::runtime_error("command failed (" + std::to_string(rc) + "): " + args + "\n" + slurp(e));
    }
    const std::string text = slurp(o);
    try {
      return text.empty() ? json() : json::parse(text);
    } catch (const std::exception&) {
      return json(text);
    }
  }

  const fs::path& work() const { return work_; }

 private:
  std::string exe_;
  fs::path work_;
};

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Desk-scale configuration shared by criteria 7 and 8.
json desk_common() {
  return {{"model", {{"height", 32}, {"width", 32}, {"stem_width", 16}}},
          {"pretrain", {{"epochs", 12}, {"batch_size", 64}, {"learning_rate", 0.02}, {"warmup_epochs", 1}}},
          {"transfer",
           {{"iterations", 400}, {"batch_size", 64}, {"learning_rate", 0.02}, {"s", 0.1},
            {"naive_epoch_scale", 0.0256}}},
          {"seed", 1}};
}

json desk_source() {
  json j = desk_common();
  j["data"] = {{"kind", "synthetic"},
               {"synthetic", {{"n_per_class", 2500}, {"height", 32}, {"width", 32},
                              {"artifact", "checkerboard_upsample"}, {"artifact_strength", 0.8},
                              {"seed", 11}}},
               {"split", {{"train", 0.8}, {"val", 0.0}, {"test", 0.2}, {"transfer_size", 0}}}};
  return j;
}

json desk_target(int validation_interval) {
  json j = desk_common();
  j["transfer"]["validation_interval"] = validation_interval;
  j["data"] = {{"kind", "synthetic"},
               {"synthetic", {{"n_per_class", 1600}, {"height", 32}, {"width", 32},
                              {"artifact", "blur_residual"}, {"artifact_strength", 1.0},
                              {"seed", 22}}},
               {"split", {{"train", 0.625}, {"val", 0.0625}, {"test", 0.3125}, {"transfer_size", 2000}}}};
  return j;
}

fs::path write_json_file(const fs::path& p, const json& j) {
  std::ofstream(p) << j.dump(2) << "\n";
  return p;
}

struct Desk {
  bool prepared = false;
  double prepare_seconds = 0.0;
  double source_auroc = 0.0;
  std::map<std::string, json> reports;  // mode -> evaluation report
  std::map<std::string, double> seconds;
};

void prepare_desk(const Cli& cli, Desk& desk) {
  if (desk.prepared) return;
  const auto t0 = Clock::now();
  const fs::path w = cli.work();
  write_json_file(w / "source.json", desk_source());
  write_json_file(w / "target.json", desk_target(0));
  write_json_file(w / "target_val.json", desk_target(5));
  cli.run("gendata --config " + q(w / "source.json") + " --out " + q(w / "src"));
  cli.run("gendata --config " + q(w / "target.json") + " --out " + q(w / "tgt"));
  const json pre = cli.run("pretrain --config " + q(w / "source.json") + " --data " + q(w / "src") +
                           " --out " + q(w / "teacher"));
  desk.source_auroc = pre.value("test_auroc", 0.0);
  desk.prepared = true;
  desk.prepare_seconds = seconds_since(t0);
}

void run_mode(const Cli& cli, Desk& desk, const std::string& mode, bool with_validation) {
  if (desk.reports.count(mode)) return;
  const auto t0 = Clock::now();
  const fs::path w = cli.work();
  const fs::path cfg = w / (with_validation ? "target_val.json" : "target.json");
  cli.run("transfer --config " + q(cfg) + " --teacher " + q(w / "teacher" / "checkpoint") +
          " --data " + q(w / "tgt") + " --out " + q(w / ("tr_" + mode)) + " --mode " + mode);
  cli.run("evaluate --ckpt " + q(w / ("tr_" + mode) / "checkpoint") + " --ckpt-before " +
          q(w / "teacher" / "checkpoint") + " --source-data " + q(w / "src") + " --target-data " +
          q(w / "tgt") + " --out " + q(w / ("ev_" + mode)));
  desk.reports[mode] = json::parse(slurp(w / ("ev_" + mode) / "report.json"));
  desk.seconds[mode] = seconds_since(t0);
}

double cell(const Desk& desk, const std::string& mode, const char* key) {
  const json& v = desk.reports.at(mode)["auroc"][key];
  return v.is_number() ? v.get<double>() : std::nan("");
}

Outcome directional_ablation(const Cli& cli, Desk& desk) {
  const auto t0 = Clock::now();
  prepare_desk(cli, desk);
  for (const char* mode : {"tgd", "naive", "legacy-sp", "no-aug"}) {
    run_mode(cli, desk, mode, std::string(mode) == "tgd");
  }
  const double total = seconds_since(t0);
  const double tgd_src = cell(desk, "tgd", "source_after"), tgd_tgt = cell(desk, "tgd", "target_after");
  const double naive_src = cell(desk, "naive", "source_after");
  const double noaug_src = cell(desk, "no-aug", "source_after");
  const double legacy_tgt = cell(desk, "legacy-sp", "target_after");
  const bool pre = desk.source_auroc >= 0.95;
  const bool a = tgd_tgt >= 0.90;
  const bool b = tgd_src >= naive_src + 0.05;
  const bool c = tgd_src >= noaug_src;
  const bool d = tgd_tgt >= legacy_tgt - 0.02;
  const bool time_ok = total <= 900.0;
  std::ostringstream os;
  auto mark = [](bool ok) { return ok ? "ok" : "NO"; };
  os << "source pretrain " << fmt("%.4f", desk.source_auroc) << " [" << mark(pre) << "]"
     << "; (a) tgd target " << fmt("%.4f", tgd_tgt) << " [" << mark(a) << "]"
     << "; (b) tgd source " << fmt("%.4f", tgd_src) << " vs naive " << fmt("%.4f", naive_src)
     << "+0.05 [" << mark(b) << "]"
     << "; (c) vs no-aug " << fmt("%.4f", noaug_src) << " [" << mark(c) << "]"
     << "; (d) vs legacy-sp target " << fmt("%.4f", legacy_tgt) << "-0.02 [" << mark(d) << "]"
     << "; " << fmt("%.0fs", total) << " [" << mark(time_ok) << "]";
  return {pre && a && b && c && d && time_ok, os.str()};
}

std::vector<std::pair<std::int64_t, double>> val_curve(const fs::path& metrics) {
  std::vector<std::pair<std::int64_t, double>> out;
  std::ifstream in(metrics);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    if (j.contains("val_loss")) out.emplace_back(j["iteration"].get<std::int64_t>(), j["val_loss"].get<double>());
  }
  return out;
}

double tail_variance(const std::vector<std::pair<std::int64_t, double>>& curve, std::int64_t from,
                     std::size_t* points = nullptr) {
  std::vector<double> v;
  for (const auto& [it, loss] : curve) {
    if (it > from) v.push_back(loss);
  }
  if (points) *points = v.size();
  if (v.size() < 2) return std::nan("");
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return var / static_cast<double>(v.size() - 1);
}

Outcome cutmix_instability(const Cli& cli, Desk& desk) {
  const auto t0 = Clock::now();
  prepare_desk(cli, desk);
  run_mode(cli, desk, "tgd", true);
  run_mode(cli, desk, "inter-cutmix", true);
  const double t = seconds_since(t0);
  const json cfg = desk_target(5);
  const std::int64_t iters = cfg["transfer"]["iterations"].get<std::int64_t>();
  const auto intra = val_curve(cli.work() / "tr_tgd" / "metrics.ndjson");
  const auto inter = val_curve(cli.work() / "tr_inter-cutmix" / "metrics.ndjson");
  std::size_t points = 0;
  const double vi = tail_variance(intra, iters - 200), vx = tail_variance(inter, iters - 200, &points);
  Outcome o;
  o.pass = vx > vi && t <= 600.0;
  o.detail = "val-loss variance over the last 200 iterations: inter-class " + fmt("%.3e", vx) +
             " vs intra-class " + fmt("%.3e", vi) + " (" + std::to_string(points) +
             " points each), " + fmt("%.0fs", t);
  return o;
}

json small_cfg(const std::string& artifact, int seed) {
  return {{"model", {{"height", 16}, {"width", 16}, {"stage_widths", {8, 16}}, {"stage_blocks", {1, 1}}}},
          {"pretrain", {{"epochs", 2}, {"batch_size", 8}, {"warmup_epochs", 1}}},
          {"transfer", {{"iterations", 12}, {"batch_size", 4}, {"feedback_cycle", 5}, {"validation_interval", 4}}},
          {"data",
           {{"kind", "synthetic"},
            {"synthetic", {{"n_per_class", 16}, {"height", 16}, {"width", 16}, {"artifact", artifact},
                           {"artifact_strength", 1.0}, {"seed", seed}}},
            {"split", {{"train", 0.5}, {"val", 0.125}, {"test", 0.375}, {"transfer_size", 12}}}}},
          {"seed", 5}};
}

Outcome round_trips(const Cli& cli) {
  const auto t0 = Clock::now();
  const fs::path w = cli.work() / "c9";
  fs::create_directories(w);
  std::vector<std::string> problems;

  // checkpoint: bitwise lossless and stable under save(load(x))
  ModelSpec spec;
  spec.height = spec.width = 16;
  spec.stage_widths = {8, 16};
  spec.stage_blocks = {1, 1};
  ParameterSet p = Network(spec).init_params(11);
  Rng rng(6);
  for (auto& [name, e] : p) {
    for (std::size_t i = 0; i < e.tensor.size(); ++i) e.tensor[i] += static_cast<float>(rng.normal() * 1e-3);
  }
  const Provenance prov{"pretrain", "ds", 11, "cfg"};
  save_checkpoint(p, spec, prov, w / "ck1");
  const Checkpoint back = load_checkpoint(w / "ck1");
  if (!(back.params == p) || !(back.spec == spec) || !(back.provenance == prov)) problems.push_back("checkpoint load");
  save_checkpoint(back.params, back.spec, back.provenance, w / "ck2");
  if (checkpoint_digest(w / "ck1") != checkpoint_digest(w / "ck2")) problems.push_back("checkpoint resave");

  // runs: gendata, pretrain, transfer (two modes), evaluate; each rerun from its frozen config
  write_json_file(w / "src.json", small_cfg("checkerboard_upsample", 1));
  write_json_file(w / "tgt.json", small_cfg("blur_residual", 2));
  cli.run("gendata --config " + q(w / "src.json") + " --out " + q(w / "src"));
  cli.run("gendata --config " + q(w / "tgt.json") + " --out " + q(w / "tgt"));
  for (const char* d : {"src", "tgt"}) {
    cli.run("gendata --config " + q(w / d / "config.json") + " --out " + q(w / (std::string(d) + "_rerun")));
    if (slurp(w / d / "digests.json") != slurp(w / (std::string(d) + "_rerun") / "digests.json")) {
      problems.push_back(std::string(d) + " dataset digests");
    }
  }
  cli.run("pretrain --config " + q(w / "src.json") + " --data " + q(w / "src") + " --out " + q(w / "pre"));
  cli.run("pretrain --config " + q(w / "pre" / "config.json") + " --data " + q(w / "src") + " --out " +
          q(w / "pre_rerun"));
  if (slurp(w / "pre" / "digests.json") != slurp(w / "pre_rerun" / "digests.json")) {
    problems.push_back("pretrain digests");
  }
  for (const std::string mode : {"tgd", "naive"}) {
    const fs::path run = w / ("tr_" + mode);
    cli.run("transfer --config " + q(w / "tgt.json") + " --teacher " + q(w / "pre" / "checkpoint") +
            " --data " + q(w / "tgt") + " --out " + q(run) + " --mode " + mode);
    cli.run("transfer --config " + q(run / "config.json") + " --teacher " + q(w / "pre" / "checkpoint") +
            " --data " + q(w / "tgt") + " --out " + q(w / ("tr_" + mode + "_rerun")));
    if (slurp(run / "digests.json") != slurp(w / ("tr_" + mode + "_rerun") / "digests.json") ||
        slurp(run / "metrics.ndjson") != slurp(w / ("tr_" + mode + "_rerun") / "metrics.ndjson")) {
      problems.push_back("transfer " + mode + " digests");
    }
  }
  const std::string eval = "evaluate --ckpt " + q(w / "tr_tgd" / "checkpoint") + " --ckpt-before " +
                           q(w / "pre" / "checkpoint") + " --source-data " + q(w / "src") +
                           " --target-data " + q(w / "tgt") + " --out ";
  cli.run(eval + q(w / "ev1"));
  cli.run(eval + q(w / "ev2"));
  const std::string report = slurp(w / "ev1" / "report.json");
  if (report != slurp(w / "ev2" / "report.json")) problems.push_back("evaluation report rerun");
  for (const char* f : {"scores_source_after.tsv", "scores_target_after.tsv"}) {
    if (slurp(w / "ev1" / f) != slurp(w / "ev2" / f)) problems.push_back(std::string("evaluation ") + f);
  }
  // report: parse and re-serialize reproduces the bytes
  if (report_to_json(report_from_json(report)) != report) problems.push_back("report round trip");

  const double t = seconds_since(t0);
  Outcome o;
  o.pass = problems.empty();
  if (problems.empty()) {
    o.detail = "checkpoint and report round trips lossless; gendata, pretrain, transfer (tgd, naive) "
               "and evaluate reproduce their digests from frozen configs, " + fmt("%.1fs", t);
  } else {
    o.detail = "mismatch:";
    for (const auto& s : problems) o.detail += " " + s + ";";
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only;
  std::string work;
  std::string exe = TGD_CLI_PATH;
  bool keep = false;
  app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--work", work, "Scratch directory (default: a fresh temp dir)");
  app.add_option("--cli", exe, "Path to the tgd executable");
  app.add_flag("--keep", keep, "Keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9}
                                              : std::set<int>(only.begin(), only.end());
  fs::path dir = work.empty() ? fs::temp_directory_path() /
                                    ("tgd-acceptance-" + std::to_string(std::random_device{}()))
                              : fs::path(work);
  fs::create_directories(dir);
  dir = fs::canonical(dir);
  const Cli cli(exe, dir);
  Desk desk;

  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"gamma formula", gamma_suite}},
      {2, {"loss decomposition and gradient", loss_and_gradient}},
      {3, {"intra-class cutmix oracle", cutmix_oracle}},
      {4, {"normalization suites", normalization_suites}},
      {5, {"auroc oracle equivalence", auroc_oracle}},
      {6, {"self-training mechanics", [&] { return self_training_mechanics(dir); }}},
      {7, {"desk-scale directional ablation", [&] { return directional_ablation(cli, desk); }}},
      {8, {"inter-class cutmix instability", [&] { return cutmix_instability(cli, desk); }}},
      {9, {"round trips and reruns", [&] { return round_trips(cli); }}},
  };

  int failed = 0;
  for (const auto& [id, entry] : criteria) {
    if (!selected.count(id)) continue;
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s  (%s)\n", id, entry.first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  if (!keep && work.empty()) fs::remove_all(dir);
  return failed == 0 ? 0 : 1;
}
