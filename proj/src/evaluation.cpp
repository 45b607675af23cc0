#include "tgd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "raw_io.hpp"
#include "tgd/errors.hpp"

namespace tgd {

namespace fs = std::filesystem;
using nlohmann::json;

double auroc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) {
    throw ContractViolation("auroc: scores and labels differ in length");
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0) throw ContractViolation("auroc: labels must be 0 or 1");
    if (std::isnan(scores[i])) throw ContractViolation("auroc: NaN score");
    pos += labels[i] == 1.0;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) {
    throw UndefinedMetric("AUROC needs both classes (got " + std::to_string(pos) +
                          " positive, " + std::to_string(neg) + " negative)");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of positive ranks with ties sharing their midrank (ranks from 1).
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1.0) rank_sum += midrank;
    }
    i = j;
  }
  const double u = rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

std::vector<double> predict(const Network& network, const ParameterSet& params,
                            const Dataset& data, std::span<const std::size_t> indices) {
  constexpr std::size_t kChunk = 64;
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t lo = 0; lo < indices.size(); lo += kChunk) {
    const auto part = indices.subspan(lo, std::min(kChunk, indices.size() - lo));
    const LabeledBatch batch = data.gather(part);
    const auto fwd = network.forward(params, batch.pixels, batch.count(),
                                     ForwardMode::eval_clean, nullptr);
    out.insert(out.end(), fwd.predictions.begin(), fwd.predictions.end());
  }
  return out;
}

void write_score_dump(const fs::path& file, const ScoreDump& dump) {
  std::string text = "id\tscore\n";
  char buf[64];
  for (std::size_t i = 0; i < dump.ids.size(); ++i) {
    std::snprintf(buf, sizeof buf, "\t%.17g\n", dump.scores[i]);
    text += dump.ids[i];
    text += buf;
  }
  detail::write_text_file(file, text);
}

SplitEvaluation evaluate_checkpoint(const Checkpoint& checkpoint, const Dataset& data,
                                    std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractViolation("evaluation split is empty");
  const Network network(checkpoint.spec);
  network.check_params(checkpoint.params);
  SplitEvaluation ev;
  ev.dump.scores = predict(network, checkpoint.params, data, indices);
  std::vector<double> labels;
  for (std::size_t i : indices) {
    labels.push_back(data.labels[i]);
    ev.dump.ids.push_back(data.ids[i]);
  }
  ev.auroc = auroc(ev.dump.scores, labels);
  return ev;
}

GammaSummary summarize_gamma(std::span<const GammaRecord> trace) {
  GammaSummary s;
  if (trace.empty()) return s;
  s.min = s.max = trace[0].gamma;
  double sum = 0.0;
  for (const auto& r : trace) {
    s.min = std::min(s.min, r.gamma);
    s.max = std::max(s.max, r.gamma);
    sum += r.gamma;
  }
  s.count = trace.size();
  s.mean = sum / static_cast<double>(trace.size());
  return s;
}

std::vector<GammaRecord> read_gamma_trace(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read metrics stream " + file.string());
  std::vector<GammaRecord> trace;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw IoError("malformed metrics record in " + file.string() + ": " + e.what());
    }
    if (!j.contains("gamma") || j["gamma"].is_null()) continue;
    trace.push_back({j.at("iteration").get<std::int64_t>(), j.at("teacher_loss").get<double>(),
                     j.at("gamma").get<double>()});
  }
  return trace;
}

namespace {

json optional_number(const std::optional<double>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<double> number_or_null(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  json j;
  j["auroc"] = {{"source_before", optional_number(r.source_before)},
                {"source_after", optional_number(r.source_after)},
                {"target_before", optional_number(r.target_before)},
                {"target_after", optional_number(r.target_after)}};
  j["forgetting_delta"] = optional_number(r.forgetting_delta);
  if (r.gamma) {
    j["gamma"] = {{"min", r.gamma->min},
                  {"max", r.gamma->max},
                  {"mean", r.gamma->mean},
                  {"count", r.gamma->count},
                  {"trace_path", r.gamma->trace_path}};
  } else {
    j["gamma"] = nullptr;
  }
  j["config_digests"] = r.config_digests;
  j["seeds"] = r.seeds;
  j["stages"] = r.stages;
  j["warnings"] = r.warnings;
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    const json& a = j.at("auroc");
    r.source_before = number_or_null(a, "source_before");
    r.source_after = number_or_null(a, "source_after");
    r.target_before = number_or_null(a, "target_before");
    r.target_after = number_or_null(a, "target_after");
    r.forgetting_delta = number_or_null(j, "forgetting_delta");
    if (!j.at("gamma").is_null()) {
      const json& g = j.at("gamma");
      r.gamma = GammaSummary{g.at("min"), g.at("max"), g.at("mean"), g.at("count"),
                             g.at("trace_path")};
    }
    r.config_digests = j.at("config_digests").get<std::map<std::string, std::string>>();
    r.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    r.stages = j.at("stages").get<std::map<std::string, std::string>>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const std::exception& e) {
    throw IoError(std::string("malformed evaluation report: ") + e.what());
  }
  return r;
}

ForgettingOutputs forgetting_report(const Checkpoint& before, const Checkpoint& after,
                                    const std::optional<EvalSplit>& source,
                                    const std::optional<EvalSplit>& target,
                                    const std::optional<fs::path>& gamma_trace) {
  if (architecture_hash(before.spec) != architecture_hash(after.spec)) {
    throw SpecHashMismatch("before/after checkpoints have different architectures");
  }
  ForgettingOutputs out;
  EvalReport& r = out.report;
  auto cell = [&](const Checkpoint& ckpt, const std::optional<EvalSplit>& split,
                  const std::string& key) -> std::optional<double> {
    if (!split) return std::nullopt;
    SplitEvaluation ev = evaluate_checkpoint(ckpt, *split->data, split->indices);
    out.dumps[key] = std::move(ev.dump);
    return ev.auroc;
  };
  r.source_before = cell(before, source, "source_before");
  r.source_after = cell(after, source, "source_after");
  r.target_before = cell(before, target, "target_before");
  r.target_after = cell(after, target, "target_after");
  if (r.source_before && r.source_after) {
    r.forgetting_delta = *r.source_before - *r.source_after;
  }
  if (!source) r.warnings.push_back("no source data: source cells are null");
  if (!target) r.warnings.push_back("no target data: target cells are null");
  if (gamma_trace) {
    const auto trace = read_gamma_trace(*gamma_trace);
    GammaSummary g = summarize_gamma(trace);
    g.trace_path = gamma_trace->generic_string();
    r.gamma = g;
  }
  r.config_digests = {{"before", before.provenance.config_digest},
                      {"after", after.provenance.config_digest}};
  r.seeds = {{"before", before.provenance.seed}, {"after", after.provenance.seed}};
  r.stages = {{"before", before.provenance.stage}, {"after", after.provenance.stage}};
  return out;
}

template <class T>
BasicParameterSet<T> numeric_gradient(
    const std::function<double(const BasicParameterSet<T>&)>& loss,
    const BasicParameterSet<T>& params, double step) {
  if (!(step > 0.0)) throw ContractViolation("numeric_gradient: step must be positive");
  BasicParameterSet<T> work = params;
  BasicParameterSet<T> grad = params.zeros_like();
  for (auto& [name, entry] : work) {
    auto& g = grad.at(name);
    for (std::size_t i = 0; i < entry.tensor.size(); ++i) {
      const T saved = entry.tensor[i];
      entry.tensor[i] = static_cast<T>(saved + step);
      const double up = loss(work);
      entry.tensor[i] = static_cast<T>(saved - step);
      const double down = loss(work);
      entry.tensor[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw DivergenceError("numeric_gradient: non-finite loss perturbing '" + name +
                              "'[" + std::to_string(i) + "]");
      }
      g[i] = static_cast<T>((up - down) / (2.0 * step));
    }
  }
  return grad;
}

template BasicParameterSet<float> numeric_gradient(
    const std::function<double(const BasicParameterSet<float>&)>&,
    const BasicParameterSet<float>&, double);
template BasicParameterSet<double> numeric_gradient(
    const std::function<double(const BasicParameterSet<double>&)>&,
    const BasicParameterSet<double>&, double);

}  // namespace tgd
