#include "tgd/config.hpp"

#include <cstdlib>
#include <set>

#include "raw_io.hpp"
#include "tgd/digest.hpp"
#include "tgd/errors.hpp"

namespace tgd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("section '" + name_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("bad value for '" + name_ + "." + key + "': " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) {
        throw ConfigError("unknown key '" + key + "' in section '" + name_ + "'");
      }
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

json noise_json(const NoiseRates& n) {
  return {{"dropout_rate", n.dropout}, {"stochastic_depth_rate", n.stochastic_depth}};
}

json pretrain_json(const PretrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"warmup_multiplier", c.warmup_multiplier},
          {"warmup_epochs", c.warmup_epochs},
          {"cosine_annealing", c.cosine_annealing},
          {"lambda_pretrain", c.lambda_pretrain}};
}

PretrainConfig pretrain_from(const json& j) {
  PretrainConfig c;
  Section s(j, "pretrain");
  s.read("epochs", c.epochs);
  s.read("batch_size", c.batch_size);
  s.read("learning_rate", c.learning_rate);
  s.read("momentum", c.momentum);
  s.read("warmup_multiplier", c.warmup_multiplier);
  s.read("warmup_epochs", c.warmup_epochs);
  s.read("cosine_annealing", c.cosine_annealing);
  s.read("lambda_pretrain", c.lambda_pretrain);
  s.finish();
  return c;
}

json transfer_json(const TransferConfig& c) {
  json j = {{"iterations", c.iterations},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"momentum", c.momentum},
            {"feedback_cycle", c.feedback_cycle},
            {"s", c.s},
            {"allow_s_out_of_range", c.allow_s_out_of_range},
            {"mode", mode_name(c.mode)},
            {"legacy_alpha", c.legacy_alpha},
            {"legacy_beta", c.legacy_beta},
            {"naive_learning_rate", c.naive_learning_rate},
            {"naive_momentum", c.naive_momentum},
            {"naive_weight_decay", c.naive_weight_decay},
            {"naive_epochs", c.naive_epochs},
            {"naive_epoch_scale", c.naive_epoch_scale},
            {"validation_interval", c.validation_interval}};
  j.update(noise_json(c.model_noise));
  return j;
}

TransferConfig transfer_from(const json& j) {
  TransferConfig c;
  Section s(j, "transfer");
  s.read("iterations", c.iterations);
  s.read("batch_size", c.batch_size);
  s.read("learning_rate", c.learning_rate);
  s.read("momentum", c.momentum);
  s.read("feedback_cycle", c.feedback_cycle);
  s.read("s", c.s);
  s.read("allow_s_out_of_range", c.allow_s_out_of_range);
  std::string mode(mode_name(c.mode));
  s.read("mode", mode);
  c.mode = parse_mode(mode);
  s.read("legacy_alpha", c.legacy_alpha);
  s.read("legacy_beta", c.legacy_beta);
  s.read("naive_learning_rate", c.naive_learning_rate);
  s.read("naive_momentum", c.naive_momentum);
  s.read("naive_weight_decay", c.naive_weight_decay);
  s.read("naive_epochs", c.naive_epochs);
  s.read("naive_epoch_scale", c.naive_epoch_scale);
  s.read("validation_interval", c.validation_interval);
  s.read("dropout_rate", c.model_noise.dropout);
  s.read("stochastic_depth_rate", c.model_noise.stochastic_depth);
  s.finish();
  return c;
}

json augmentation_json(const AugmentationConfig& c) {
  return {{"p_cutmix", c.p_cutmix},
          {"p_jpeg", c.p_jpeg},
          {"p_blur", c.p_blur},
          {"p_flip", c.p_flip},
          {"jpeg_quality_range", {c.jpeg_quality_min, c.jpeg_quality_max}},
          {"blur_sigma_range", {c.blur_sigma_min, c.blur_sigma_max}},
          {"cutmix", c.cutmix == CutmixKind::intra_class ? "intra_class" : "inter_class"},
          {"rng_seed", c.rng_seed}};
}

AugmentationConfig augmentation_from(const json& j, AugmentationConfig c,
                                     const std::string& name) {
  Section s(j, name);
  s.read("p_cutmix", c.p_cutmix);
  s.read("p_jpeg", c.p_jpeg);
  s.read("p_blur", c.p_blur);
  s.read("p_flip", c.p_flip);
  std::array<int, 2> q{c.jpeg_quality_min, c.jpeg_quality_max};
  s.read("jpeg_quality_range", q);
  c.jpeg_quality_min = q[0];
  c.jpeg_quality_max = q[1];
  std::array<double, 2> sigma{c.blur_sigma_min, c.blur_sigma_max};
  s.read("blur_sigma_range", sigma);
  c.blur_sigma_min = sigma[0];
  c.blur_sigma_max = sigma[1];
  std::string kind = c.cutmix == CutmixKind::intra_class ? "intra_class" : "inter_class";
  s.read("cutmix", kind);
  if (kind == "intra_class") {
    c.cutmix = CutmixKind::intra_class;
  } else if (kind == "inter_class") {
    c.cutmix = CutmixKind::inter_class;
  } else {
    throw ConfigError("cutmix must be 'intra_class' or 'inter_class'");
  }
  s.read("rng_seed", c.rng_seed);
  s.finish();
  return c;
}

json data_json(const DataConfig& d) {
  const SyntheticSpec& sy = d.synthetic;
  return {{"kind", d.kind},
          {"synthetic",
           {{"n_per_class", sy.n_per_class},
            {"channels", sy.shape.channels},
            {"height", sy.shape.height},
            {"width", sy.shape.width},
            {"artifact", artifact_name(sy.artifact)},
            {"artifact_strength", sy.artifact_strength},
            {"seed", sy.seed}}},
          {"folder", d.folder},
          {"label_map", d.label_map},
          {"split",
           {{"train", d.split.train},
            {"val", d.split.val},
            {"test", d.split.test},
            {"transfer_size", d.split.transfer_size}}}};
}

DataConfig data_from(const json& j) {
  DataConfig d;
  Section s(j, "data");
  s.read("kind", d.kind);
  if (d.kind != "synthetic" && d.kind != "folder") {
    throw ConfigError("data.kind must be 'synthetic' or 'folder'");
  }
  if (const json* sj = s.child("synthetic")) {
    Section ss(*sj, "data.synthetic");
    SyntheticSpec& sy = d.synthetic;
    ss.read("n_per_class", sy.n_per_class);
    ss.read("channels", sy.shape.channels);
    ss.read("height", sy.shape.height);
    ss.read("width", sy.shape.width);
    std::string artifact(artifact_name(sy.artifact));
    ss.read("artifact", artifact);
    sy.artifact = parse_artifact(artifact);
    ss.read("artifact_strength", sy.artifact_strength);
    ss.read("seed", sy.seed);
    ss.finish();
  }
  s.read("folder", d.folder);
  s.read("label_map", d.label_map);
  if (const json* sp = s.child("split")) {
    Section ss(*sp, "data.split");
    ss.read("train", d.split.train);
    ss.read("val", d.split.val);
    ss.read("test", d.split.test);
    ss.read("transfer_size", d.split.transfer_size);
    ss.finish();
  }
  s.finish();
  return d;
}

}  // namespace

json to_json_value(const ModelSpec& spec) {
  json j = {{"channels", spec.channels},
            {"height", spec.height},
            {"width", spec.width},
            {"stem_width", spec.stem_width},
            {"stem_stride", spec.stem_stride},
            {"stage_widths", spec.stage_widths},
            {"stage_blocks", spec.stage_blocks},
            {"gn_groups", spec.gn_groups},
            {"ws_epsilon", spec.ws_epsilon},
            {"gn_epsilon", spec.gn_epsilon}};
  j.update(noise_json(spec.noise));
  return j;
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec m;
  Section s(j, "model");
  s.read("channels", m.channels);
  s.read("height", m.height);
  s.read("width", m.width);
  s.read("stem_width", m.stem_width);
  s.read("stem_stride", m.stem_stride);
  s.read("stage_widths", m.stage_widths);
  s.read("stage_blocks", m.stage_blocks);
  s.read("gn_groups", m.gn_groups);
  s.read("ws_epsilon", m.ws_epsilon);
  s.read("gn_epsilon", m.gn_epsilon);
  s.read("dropout_rate", m.noise.dropout);
  s.read("stochastic_depth_rate", m.noise.stochastic_depth);
  s.finish();
  return m;
}

void RunConfig::validate() const {
  model.validate();
  pretrain.validate();
  transfer.validate();
  augment_pretrain.validate();
  augment_transfer.validate();
  if (data.kind == "synthetic") {
    data.synthetic.validate();
  } else if (data.folder.empty()) {
    throw ConfigError("data.folder is required when data.kind is 'folder'");
  }
}

json to_json_value(const RunConfig& c) {
  return {{"model", to_json_value(c.model)},
          {"pretrain", pretrain_json(c.pretrain)},
          {"transfer", transfer_json(c.transfer)},
          {"augmentation",
           {{"pretrain", augmentation_json(c.augment_pretrain)},
            {"transfer", augmentation_json(c.augment_transfer)}}},
          {"data", data_json(c.data)},
          {"output_dir", c.output_dir},
          {"seed", c.seed}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section s(j, "config");
  if (const json* m = s.child("model")) c.model = model_spec_from_json(*m);
  if (const json* p = s.child("pretrain")) c.pretrain = pretrain_from(*p);
  if (const json* t = s.child("transfer")) c.transfer = transfer_from(*t);
  if (const json* a = s.child("augmentation")) {
    Section as(*a, "augmentation");
    if (const json* p = as.child("pretrain")) {
      c.augment_pretrain = augmentation_from(*p, c.augment_pretrain, "augmentation.pretrain");
    }
    if (const json* t = as.child("transfer")) {
      c.augment_transfer = augmentation_from(*t, c.augment_transfer, "augmentation.transfer");
    }
    as.finish();
  }
  if (const json* d = s.child("data")) c.data = data_from(*d);
  s.read("output_dir", c.output_dir);
  s.read("seed", c.seed);
  s.finish();
  return c;
}

RunConfig load_run_config(const fs::path& file) {
  if (!fs::exists(file)) throw ConfigError("config file not found: " + file.string());
  json j;
  try {
    j = json::parse(detail::read_text_file(file));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + file.string() + ": " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

std::string canonical_config(const RunConfig& config) {
  return to_json_value(config).dump();
}

std::string config_digest(const RunConfig& config) {
  RunConfig c = config;
  c.output_dir.clear();
  return sha256_hex(canonical_config(c));
}

fs::path write_frozen_config(const RunConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path file = dir / "config.json";
  detail::write_text_file(file, to_json_value(config).dump(2) + "\n");
  return file;
}

fs::path resolve_output(const fs::path& out) {
  const char* root = std::getenv("TGD_OUTPUT_ROOT");
  if (out.is_absolute() || root == nullptr || *root == '\0') return out;
  return fs::path(root) / out;
}

}  // namespace tgd
