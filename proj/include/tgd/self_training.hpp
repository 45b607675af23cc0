#pragma once

// Teacher-student transfer. Each step: augment the raw batch, let the teacher
// (noised model) grade it, turn its mean loss into gamma = s * sigmoid(-loss),
// take one SGD-with-momentum step of the student on
// BCE + gamma * ||w_feat - w'_feat||^2 + gamma * ||w_head||^2, and copy the
// student into the teacher every `feedback_cycle` iterations.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tgd/augmentation.hpp"
#include "tgd/core_math.hpp"
#include "tgd/data.hpp"
#include "tgd/model.hpp"

namespace tgd {

enum class TransferMode { tgd, naive, legacy_sp, no_aug, inter_cutmix };

std::string_view mode_name(TransferMode mode);
/// Accepts "tgd", "naive", "legacy-sp", "no-aug", "inter-cutmix"; throws
/// ConfigError otherwise.
TransferMode parse_mode(std::string_view name);

struct TransferConfig {
  int iterations = 1000;
  int batch_size = 200;
  double learning_rate = 0.01;
  double momentum = 0.1;
  int feedback_cycle = 200;
  double s = 1.0;
  bool allow_s_out_of_range = false;
  std::uint64_t rng_seed = 0;
  TransferMode mode = TransferMode::tgd;
  NoiseRates model_noise;  // teacher and student noise during transfer

  // legacy-sp: fixed coefficients of the SP and head terms.
  double legacy_alpha = 0.1;
  double legacy_beta = 0.01;

  // naive: frozen-feature fine-tuning of the top stage and head with weight
  // decay. Its epoch budget is naive_epochs * naive_epoch_scale over the
  // transfer subset.
  double naive_learning_rate = 0.001;
  double naive_momentum = 0.1;
  double naive_weight_decay = 1e-4;
  int naive_epochs = 500;
  double naive_epoch_scale = 1.0;

  // Clean validation loss of the student every `validation_interval`
  // iterations (0 disables).
  int validation_interval = 0;

  void validate() const;
  /// Number of optimizer steps for a transfer subset of `n` samples.
  int effective_iterations(std::size_t n) const;

  friend bool operator==(const TransferConfig&, const TransferConfig&) = default;
};

struct PretrainConfig {
  int epochs = 300;
  int batch_size = 512;
  double learning_rate = 0.04;
  double momentum = 0.9;
  double warmup_multiplier = 4.0;
  int warmup_epochs = 20;
  bool cosine_annealing = true;
  double lambda_pretrain = 1e-4;
  std::uint64_t rng_seed = 0;

  void validate() const;

  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

/// Learning rate at fractional epoch `epoch`: linear from lr/multiplier to lr
/// over the warm-up, then cosine annealing to 0 at `epochs` (constant lr when
/// annealing is off).
double learning_rate_at(const PretrainConfig& config, double epoch);

struct GammaRecord {
  std::int64_t iteration = 0;
  double teacher_loss = 0.0;
  double gamma = 0.0;
  friend bool operator==(const GammaRecord&, const GammaRecord&) = default;
};

struct SelfTrainState {
  ParameterSet teacher;   // anchor w'
  ParameterSet student;   // w
  ParameterSet velocity;  // student momentum buffers
  std::int64_t iteration = 0;
  int feedback_cycle = 200;
  double s = 1.0;
  std::vector<GammaRecord> gamma_trace;

  /// Teacher and student both start from `initial`; zero momentum.
  static SelfTrainState start(const ParameterSet& initial, int feedback_cycle,
                              double s);
};

struct StepMetrics {
  std::int64_t iteration = 0;  // value after the step
  std::optional<double> teacher_loss;
  std::optional<double> gamma;
  double student_loss = 0.0;  // full objective at the pre-update weights
  double bce = 0.0;
  PipelineStats augmentation;
};

/// gamma = s * sigmoid(-teacher_mean_loss).
double compute_gamma(double teacher_mean_loss, double s);

/// Mean BCE of the noised teacher on `noised_batch`.
double teacher_evaluate(const Network& network, const ParameterSet& teacher,
                        const LabeledBatch& noised_batch, Rng& noise_rng);

/// Everything a step needs besides the mutable state.
struct StepContext {
  const Network* network = nullptr;  // built with the transfer-stage noise rates
  const TransferConfig* config = nullptr;
  const AugmentationConfig* augmentation = nullptr;  // null: no data noise
  /// naive mode: names that receive updates (others stay frozen).
  const std::vector<std::string>* trainable = nullptr;
};

/// One step as described at the top of this file. Throws DivergenceError with
/// the tail of the gamma trace when the teacher or student loss is not finite.
StepMetrics transfer_step(SelfTrainState& state, const StepContext& context,
                          const LabeledBatch& raw_batch,
                          std::span<const std::uint64_t> sample_ids);

/// Copies the student into the teacher when iteration % feedback_cycle == 0.
/// Returns whether a copy happened.
bool feedback_sync(SelfTrainState& state);

struct ValidationPoint {
  std::int64_t iteration = 0;
  double loss = 0.0;
};

struct TransferResult {
  ParameterSet student;
  ParameterSet teacher;
  std::vector<GammaRecord> gamma_trace;
  std::vector<StepMetrics> steps;
  std::vector<ValidationPoint> validation;
};

struct TransferOptions {
  std::optional<std::filesystem::path> metrics_path;  // NDJSON per step
  /// Optional validation samples for the clean validation-loss curve.
  const Dataset* validation_data = nullptr;
  std::vector<std::size_t> validation_indices;
  /// Called after every step (e.g. for monitoring); may be empty.
  std::function<void(const SelfTrainState&, const StepMetrics&)> observer;
};

/// Runs the configured mode over `indices` of `data`, cycling shuffled
/// mini-batches epoch by epoch.
TransferResult run_transfer(const ParameterSet& teacher_params, const ModelSpec& spec,
                            const Dataset& data, std::span<const std::size_t> indices,
                            const TransferConfig& config,
                            const AugmentationConfig& augmentation,
                            const TransferOptions& options = {});

struct EpochMetrics {
  int epoch = 0;
  double mean_loss = 0.0;
  double learning_rate = 0.0;  // at the start of the epoch
};

struct PretrainResult {
  ParameterSet params;
  std::vector<EpochMetrics> epochs;
};

struct PretrainOptions {
  std::optional<std::filesystem::path> metrics_path;
  std::function<void(const EpochMetrics&)> observer;
};

/// Trains from a seeded initialization with pretrain_loss; model noise comes
/// from spec.noise. Throws ConfigError when the selected samples contain a
/// single class.
PretrainResult run_pretrain(const ModelSpec& spec, const Dataset& data,
                            std::span<const std::size_t> indices,
                            const PretrainConfig& config,
                            const AugmentationConfig& augmentation,
                            const PretrainOptions& options = {});

/// Cycles through indices in per-epoch shuffled order.
class EpochSampler {
 public:
  EpochSampler(std::span<const std::size_t> indices, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t count);

 private:
  void reshuffle();
  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t position_ = 0;
  std::uint64_t epoch_ = 0;
  std::uint64_t seed_;
};

}  // namespace tgd
