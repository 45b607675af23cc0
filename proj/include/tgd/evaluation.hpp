#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tgd/checkpoint.hpp"
#include "tgd/data.hpp"
#include "tgd/self_training.hpp"

namespace tgd {

/// Mann-Whitney AUROC with midranks for ties. Labels must be 0 or 1
/// (ContractViolation otherwise); a single class raises UndefinedMetric.
double auroc(std::span<const double> scores, std::span<const double> labels);

/// Clean-model probabilities for the given samples, evaluated in chunks.
std::vector<double> predict(const Network& network, const ParameterSet& params,
                            const Dataset& data, std::span<const std::size_t> indices);

struct ScoreDump {
  std::vector<std::string> ids;
  std::vector<double> scores;
};

/// Two tab-separated columns: id, score (17 significant digits).
void write_score_dump(const std::filesystem::path& file, const ScoreDump& dump);

struct SplitEvaluation {
  double auroc = 0.0;
  ScoreDump dump;
};

SplitEvaluation evaluate_checkpoint(const Checkpoint& checkpoint, const Dataset& data,
                                    std::span<const std::size_t> indices);

struct GammaSummary {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  std::size_t count = 0;
  std::string trace_path;
  friend bool operator==(const GammaSummary&, const GammaSummary&) = default;
};

GammaSummary summarize_gamma(std::span<const GammaRecord> trace);

/// Reads records that carry a gamma from an NDJSON metrics stream.
std::vector<GammaRecord> read_gamma_trace(const std::filesystem::path& file);

struct EvalReport {
  std::optional<double> source_before;
  std::optional<double> source_after;
  std::optional<double> target_before;
  std::optional<double> target_after;
  std::optional<double> forgetting_delta;  // source_before - source_after
  std::optional<GammaSummary> gamma;
  std::map<std::string, std::string> config_digests;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> stages;  // "before"/"after" -> provenance stage
  std::vector<std::string> warnings;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

/// One evaluation split: samples `indices` of `data`.
struct EvalSplit {
  const Dataset* data = nullptr;
  std::vector<std::size_t> indices;
};

struct ForgettingOutputs {
  EvalReport report;
  /// Keyed "source_before", "target_after", ...
  std::map<std::string, ScoreDump> dumps;
};

/// Fills the four AUROC cells (cells whose split is missing stay empty) and
/// the forgetting delta. Both checkpoints must share an architecture.
ForgettingOutputs forgetting_report(const Checkpoint& before, const Checkpoint& after,
                                    const std::optional<EvalSplit>& source,
                                    const std::optional<EvalSplit>& target,
                                    const std::optional<std::filesystem::path>&
                                        gamma_trace = std::nullopt);

/// Central differences of `loss` with respect to every scalar of `params`.
/// Throws DivergenceError when an evaluation is not finite.
template <class T>
BasicParameterSet<T> numeric_gradient(
    const std::function<double(const BasicParameterSet<T>&)>& loss,
    const BasicParameterSet<T>& params, double step = 1e-4);

}  // namespace tgd
