#include "tgd/self_training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tgd/errors.hpp"
#include "tgd/evaluation.hpp"
#include "tgd/simd/kernels.hpp"

namespace tgd {

using nlohmann::json;

std::string_view mode_name(TransferMode mode) {
  switch (mode) {
    case TransferMode::tgd: return "tgd";
    case TransferMode::naive: return "naive";
    case TransferMode::legacy_sp: return "legacy-sp";
    case TransferMode::no_aug: return "no-aug";
    case TransferMode::inter_cutmix: return "inter-cutmix";
  }
  return "tgd";
}

TransferMode parse_mode(std::string_view name) {
  for (TransferMode m : {TransferMode::tgd, TransferMode::naive, TransferMode::legacy_sp,
                         TransferMode::no_aug, TransferMode::inter_cutmix}) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown transfer mode '" + std::string(name) +
                    "' (expected tgd, naive, legacy-sp, no-aug or inter-cutmix)");
}

namespace {

bool uses_teacher(TransferMode mode) {
  return mode == TransferMode::tgd || mode == TransferMode::no_aug ||
         mode == TransferMode::inter_cutmix;
}

void check_rates(const NoiseRates& noise) {
  for (double r : {noise.dropout, noise.stochastic_depth}) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("model noise rates must lie in [0,1)");
  }
}

}  // namespace

void TransferConfig::validate() const {
  if (iterations < 0) throw ConfigError("transfer iterations must be nonnegative");
  if (batch_size < 1) throw ConfigError("transfer batch_size must be positive");
  if (!(learning_rate >= 0.0) || !(naive_learning_rate >= 0.0)) {
    throw ConfigError("learning rates must be nonnegative");
  }
  if (!(momentum >= 0.0 && momentum < 1.0) || !(naive_momentum >= 0.0 && naive_momentum < 1.0)) {
    throw ConfigError("momentum must lie in [0,1)");
  }
  if (feedback_cycle < 1) throw ConfigError("feedback_cycle must be positive");
  if (allow_s_out_of_range ? !(s > 0.0) : !(s >= 0.1 && s <= 2.0)) {
    throw ConfigError("s must lie in [0.1, 2.0] (set allow_s_out_of_range to override)");
  }
  if (!(legacy_alpha >= 0.0) || !(legacy_beta >= 0.0) || !(naive_weight_decay >= 0.0)) {
    throw ConfigError("regularizer weights must be nonnegative");
  }
  if (naive_epochs < 0 || !(naive_epoch_scale >= 0.0)) {
    throw ConfigError("naive epoch budget must be nonnegative");
  }
  if (validation_interval < 0) throw ConfigError("validation_interval must be nonnegative");
  check_rates(model_noise);
}

int TransferConfig::effective_iterations(std::size_t n) const {
  if (mode != TransferMode::naive) return iterations;
  const double steps = std::ceil(naive_epochs * naive_epoch_scale * static_cast<double>(n) /
                                 batch_size - 1e-9);
  return static_cast<int>(std::max(0.0, steps));
}

void PretrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("pretrain epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("pretrain batch_size must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be nonnegative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(warmup_multiplier >= 1.0)) throw ConfigError("warmup_multiplier must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > epochs) {
    throw ConfigError("warmup_epochs must lie in [0, epochs]");
  }
  if (!(lambda_pretrain >= 0.0)) throw ConfigError("lambda_pretrain must be nonnegative");
}

double learning_rate_at(const PretrainConfig& config, double epoch) {
  const double base = config.learning_rate;
  const double warm = config.warmup_epochs;
  if (warm > 0 && epoch < warm) {
    const double start = base / config.warmup_multiplier;
    return start + (base - start) * std::max(epoch, 0.0) / warm;
  }
  if (!config.cosine_annealing || config.epochs <= config.warmup_epochs) return base;
  const double t = std::clamp((epoch - warm) / (config.epochs - warm), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

SelfTrainState SelfTrainState::start(const ParameterSet& initial, int feedback_cycle,
                                     double s) {
  SelfTrainState st;
  st.teacher = initial;
  st.student = initial;
  st.velocity = initial.zeros_like();
  st.feedback_cycle = feedback_cycle;
  st.s = s;
  return st;
}

double compute_gamma(double teacher_mean_loss, double s) {
  if (!(teacher_mean_loss >= 0.0) || !(s > 0.0)) {
    throw ContractViolation("compute_gamma: need loss >= 0 and s > 0");
  }
  return s / (1.0 + std::exp(teacher_mean_loss));
}

double teacher_evaluate(const Network& network, const ParameterSet& teacher,
                        const LabeledBatch& noised_batch, Rng& noise_rng) {
  network.check_params(teacher);
  const auto fwd = network.forward(teacher, noised_batch.pixels, noised_batch.count(),
                                   ForwardMode::train_noised, &noise_rng);
  return binary_cross_entropy(fwd.predictions, noised_batch.labels);
}

namespace {

std::string trace_tail(const std::vector<GammaRecord>& trace) {
  std::ostringstream os;
  os.precision(6);
  const std::size_t from = trace.size() > 5 ? trace.size() - 5 : 0;
  os << "gamma trace tail:";
  if (from == trace.size()) os << " (empty)";
  for (std::size_t i = from; i < trace.size(); ++i) {
    os << " [it " << trace[i].iteration << " loss " << trace[i].teacher_loss << " gamma "
       << trace[i].gamma << "]";
  }
  return os.str();
}

void sgd_update(ParameterSet& params, const ParameterSet& grad, ParameterSet& velocity,
                double lr, double momentum, const std::set<std::string>* trainable) {
  const auto& k = simd::kernels();
  auto ig = grad.begin();
  auto iv = velocity.begin();
  for (auto& [name, entry] : params) {
    if (!trainable || trainable->count(name)) {
      k.sgd_momentum(entry.tensor.data(), ig->second.tensor.data(), iv->second.tensor.data(),
                     entry.tensor.size(), static_cast<float>(lr),
                     static_cast<float>(momentum));
    }
    ++ig;
    ++iv;
  }
}

}  // namespace

StepMetrics transfer_step(SelfTrainState& state, const StepContext& context,
                          const LabeledBatch& raw_batch,
                          std::span<const std::uint64_t> sample_ids) {
  const TransferConfig& cfg = *context.config;
  const Network& net = *context.network;
  raw_batch.validate(true);
  require_aligned(state.teacher, state.student);

  StepMetrics out;
  const auto it = static_cast<std::uint64_t>(state.iteration);
  LabeledBatch noised;
  if (context.augmentation) {
    auto r = apply_pipeline(raw_batch, *context.augmentation, it, sample_ids);
    noised = std::move(r.batch);
    out.augmentation = r.stats;
  } else {
    noised = raw_batch;
  }

  RegularizerCoefficients coeffs;
  const ParameterSet* anchor = &state.teacher;
  double lr = cfg.learning_rate, momentum = cfg.momentum;
  double gamma = 0.0, teacher_loss = 0.0;
  if (uses_teacher(cfg.mode)) {
    Rng teacher_rng(derive_seed(cfg.rng_seed, {stream::kTeacherNoise, it}));
    teacher_loss = teacher_evaluate(net, state.teacher, noised, teacher_rng);
    if (!std::isfinite(teacher_loss)) {
      throw DivergenceError("teacher loss is not finite at iteration " +
                            std::to_string(it + 1) + "; " + trace_tail(state.gamma_trace));
    }
    gamma = compute_gamma(teacher_loss, state.s);
    coeffs.sp = coeffs.l2_head = gamma;
    out.teacher_loss = teacher_loss;
    out.gamma = gamma;
  } else if (cfg.mode == TransferMode::legacy_sp) {
    coeffs.sp = cfg.legacy_alpha;
    coeffs.l2_head = cfg.legacy_beta;
  } else {
    coeffs.l2_all = cfg.naive_weight_decay;
    anchor = nullptr;
    lr = cfg.naive_learning_rate;
    momentum = cfg.naive_momentum;
  }

  std::set<std::string> trainable;
  if (context.trainable) trainable.insert(context.trainable->begin(), context.trainable->end());

  Rng student_rng(derive_seed(cfg.rng_seed, {stream::kStudentNoise, it}));
  Tape<float> tape;
  const auto fwd = net.forward(state.student, noised.pixels, noised.count(),
                               ForwardMode::train_noised, &student_rng, &tape);
  out.bce = binary_cross_entropy(fwd.predictions, noised.labels);
  if (uses_teacher(cfg.mode)) {
    out.student_loss = transfer_loss(fwd.predictions, noised.labels, state.student,
                                     state.teacher, gamma);
  } else if (cfg.mode == TransferMode::legacy_sp) {
    out.student_loss = legacy_transfer_loss(fwd.predictions, noised.labels, state.student,
                                            state.teacher, cfg.legacy_alpha, cfg.legacy_beta);
  } else {
    double l2 = 0.0;
    for (const auto& [name, e] : state.student) {
      if (trainable.empty() || trainable.count(name)) {
        for (float v : e.tensor.values()) l2 += double(v) * v;
      }
    }
    out.student_loss = out.bce + cfg.naive_weight_decay * l2;
  }
  if (!std::isfinite(out.student_loss)) {
    throw DivergenceError("student loss is not finite at iteration " +
                          std::to_string(it + 1) + "; " + trace_tail(state.gamma_trace));
  }

  const auto dlogits = binary_cross_entropy_logit_grad(fwd.predictions, noised.labels);
  ParameterSet grad = net.backward(state.student, tape, dlogits);
  add_regularizer_grad(state.student, anchor, coeffs, grad);
  sgd_update(state.student, grad, state.velocity, lr, momentum,
             trainable.empty() ? nullptr : &trainable);

  ++state.iteration;
  out.iteration = state.iteration;
  if (uses_teacher(cfg.mode)) {
    state.gamma_trace.push_back({state.iteration, teacher_loss, gamma});
  }
  return out;
}

bool feedback_sync(SelfTrainState& state) {
  if (state.iteration > 0 && state.iteration % state.feedback_cycle == 0) {
    state.teacher = state.student;
    return true;
  }
  return false;
}

EpochSampler::EpochSampler(std::span<const std::size_t> indices, std::uint64_t seed)
    : pool_(indices.begin(), indices.end()), seed_(seed) {
  if (pool_.empty()) throw ContractViolation("sampler needs at least one index");
  reshuffle();
}

void EpochSampler::reshuffle() {
  Rng rng(derive_seed(seed_, {epoch_}));
  const auto perm = rng.permutation(pool_.size());
  order_.resize(pool_.size());
  for (std::size_t i = 0; i < perm.size(); ++i) order_[i] = pool_[perm[i]];
  position_ = 0;
}

std::vector<std::size_t> EpochSampler::next(std::size_t count) {
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    if (position_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[position_++]);
  }
  return out;
}

namespace {

std::ofstream open_metrics(const std::optional<std::filesystem::path>& path) {
  std::ofstream out;
  if (path) {
    if (path->has_parent_path()) std::filesystem::create_directories(path->parent_path());
    out.open(*path, std::ios::trunc);
    if (!out) throw IoError("cannot write metrics stream " + path->string());
  }
  return out;
}

double clean_loss(const Network& net, const ParameterSet& params, const Dataset& data,
                  std::span<const std::size_t> indices) {
  const auto scores = predict(net, params, data, indices);
  std::vector<double> labels;
  labels.reserve(indices.size());
  for (std::size_t i : indices) labels.push_back(data.labels[i]);
  return binary_cross_entropy(scores, labels);
}

}  // namespace

TransferResult run_transfer(const ParameterSet& teacher_params, const ModelSpec& spec,
                            const Dataset& data, std::span<const std::size_t> indices,
                            const TransferConfig& config,
                            const AugmentationConfig& augmentation,
                            const TransferOptions& options) {
  config.validate();
  augmentation.validate();
  if (indices.empty()) throw ConfigError("transfer set is empty");
  ModelSpec noised_spec = spec;
  noised_spec.noise = config.model_noise;
  const Network net(noised_spec);
  net.check_params(teacher_params);

  SelfTrainState state = SelfTrainState::start(teacher_params, config.feedback_cycle, config.s);
  AugmentationConfig aug = augmentation;
  aug.rng_seed = derive_seed(config.rng_seed, {stream::kAugmentSample, augmentation.rng_seed});
  if (config.mode == TransferMode::inter_cutmix) aug.cutmix = CutmixKind::inter_class;
  const std::vector<std::string> top = top_block_params(spec);

  StepContext ctx;
  ctx.network = &net;
  ctx.config = &config;
  ctx.augmentation = config.mode == TransferMode::no_aug ? nullptr : &aug;
  ctx.trainable = config.mode == TransferMode::naive ? &top : nullptr;

  TransferResult result;
  std::ofstream metrics = open_metrics(options.metrics_path);
  const int iterations = config.effective_iterations(indices.size());
  EpochSampler sampler(indices, derive_seed(config.rng_seed, {stream::kSampler}));
  const bool validate_run = config.validation_interval > 0 && options.validation_data &&
                            !options.validation_indices.empty();
  for (int k = 0; k < iterations; ++k) {
    const auto ids = sampler.next(static_cast<std::size_t>(config.batch_size));
    const LabeledBatch batch = data.gather(ids);
    const std::vector<std::uint64_t> sample_ids(ids.begin(), ids.end());
    StepMetrics m = transfer_step(state, ctx, batch, sample_ids);
    if (uses_teacher(config.mode)) feedback_sync(state);

    json line = {{"iteration", m.iteration},
                 {"student_loss", m.student_loss},
                 {"bce", m.bce},
                 {"teacher_loss", m.teacher_loss ? json(*m.teacher_loss) : json(nullptr)},
                 {"gamma", m.gamma ? json(*m.gamma) : json(nullptr)},
                 {"cutmix_fired", m.augmentation.cutmix_fired},
                 {"cutmix_skipped", m.augmentation.cutmix_skipped}};
    if (validate_run && state.iteration % config.validation_interval == 0) {
      const double v = clean_loss(net, state.student, *options.validation_data,
                                  options.validation_indices);
      result.validation.push_back({state.iteration, v});
      line["val_loss"] = v;
    }
    if (metrics.is_open()) metrics << line.dump() << "\n";
    if (options.observer) options.observer(state, m);
    result.steps.push_back(std::move(m));
  }
  result.student = std::move(state.student);
  result.teacher = std::move(state.teacher);
  result.gamma_trace = std::move(state.gamma_trace);
  return result;
}

PretrainResult run_pretrain(const ModelSpec& spec, const Dataset& data,
                            std::span<const std::size_t> indices,
                            const PretrainConfig& config,
                            const AugmentationConfig& augmentation,
                            const PretrainOptions& options) {
  config.validate();
  augmentation.validate();
  bool has_real = false, has_fake = false;
  for (std::size_t i : indices) (data.labels.at(i) ? has_fake : has_real) = true;
  if (!has_real || !has_fake) {
    throw ConfigError("pretraining data must contain both classes");
  }
  const Network net(spec);

  PretrainResult result;
  result.params = net.init_params(derive_seed(config.rng_seed, {stream::kInit}));
  ParameterSet velocity = result.params.zeros_like();
  AugmentationConfig aug = augmentation;
  aug.rng_seed = derive_seed(config.rng_seed, {stream::kAugmentSample, augmentation.rng_seed});
  std::ofstream metrics = open_metrics(options.metrics_path);

  const std::size_t n = indices.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  RegularizerCoefficients coeffs;
  coeffs.l2_all = config.lambda_pretrain;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng order_rng(derive_seed(config.rng_seed, {stream::kSampler, std::uint64_t(epoch)}));
    const auto perm = order_rng.permutation(n);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    EpochMetrics em;
    em.epoch = epoch;
    em.learning_rate = learning_rate_at(config, epoch);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(n, lo + config.batch_size);
      std::vector<std::size_t> ids(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) ids[i - lo] = indices[perm[i]];
      const std::uint64_t step = static_cast<std::uint64_t>(epoch) * per_epoch + b;
      const std::vector<std::uint64_t> sample_ids(ids.begin(), ids.end());
      const LabeledBatch batch =
          apply_pipeline(data.gather(ids), aug, step, sample_ids).batch;

      Rng noise_rng(derive_seed(config.rng_seed, {stream::kStudentNoise, step}));
      Tape<float> tape;
      const auto fwd = net.forward(result.params, batch.pixels, batch.count(),
                                   ForwardMode::train_noised, &noise_rng, &tape);
      const double loss =
          pretrain_loss(fwd.predictions, batch.labels, result.params, config.lambda_pretrain);
      if (!std::isfinite(loss)) {
        throw DivergenceError("pretraining loss is not finite at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      const auto dlogits = binary_cross_entropy_logit_grad(fwd.predictions, batch.labels);
      ParameterSet grad = net.backward(result.params, tape, dlogits);
      add_regularizer_grad(result.params, static_cast<const ParameterSet*>(nullptr), coeffs, grad);
      const double lr = learning_rate_at(config, epoch + static_cast<double>(b) / per_epoch);
      sgd_update(result.params, grad, velocity, lr, config.momentum, nullptr);
      loss_sum += loss * batch.count();
      seen += batch.count();
    }
    em.mean_loss = loss_sum / static_cast<double>(seen);
    if (metrics.is_open()) {
      metrics << json{{"epoch", em.epoch},
                      {"mean_loss", em.mean_loss},
                      {"learning_rate", em.learning_rate}}
                     .dump()
              << "\n";
    }
    if (options.observer) options.observer(em);
    result.epochs.push_back(em);
  }
  return result;
}

}  // namespace tgd
