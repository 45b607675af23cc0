#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "tgd/evaluation.hpp"
#include "tgd/model.hpp"

using namespace tgd;

namespace {

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

std::vector<float> random_images(std::size_t count, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(count * size);
  for (float& x : v) x = static_cast<float>(rng.uniform());
  return v;
}

}  // namespace

TEST_CASE("weight standardization: examples") {
  const Tensor flat({2, 3}, std::vector<float>(6, 0.7f));
  const Tensor z = weight_standardize(flat, 1e-5);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0f);

  const Tensor k({1, 2}, {1.0f, 3.0f});
  const Tensor s = weight_standardize(k, 1e-5);
  CHECK(s[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(1.0).epsilon(1e-4));

  const Tensor twice = weight_standardize(s, 1e-5);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(twice[i] - s[i]) <= 1e-5);
}

TEST_CASE("weight standardization: per-channel moments on random kernels") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t cout = 1 + trial % 9, fan = 9 * (1 + trial % 5);
    Tensor k({cout, fan});
    const double scale = std::exp(rng.uniform(-3, 3));
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<float>(scale * rng.normal() + 0.3);
    const Tensor s = weight_standardize(k, 1e-5);
    for (std::int64_t o = 0; o < cout; ++o) {
      double m = 0, v = 0;
      for (std::int64_t j = 0; j < fan; ++j) m += s[o * fan + j];
      m /= fan;
      for (std::int64_t j = 0; j < fan; ++j) v += (s[o * fan + j] - m) * (s[o * fan + j] - m);
      const double sd = std::sqrt(v / fan);
      CHECK(std::abs(m) <= 1e-6);
      // The epsilon in the denominator shrinks std by ~eps/sigma.
      CHECK(std::abs(sd - 1.0) <= 1e-4 + 2e-5 / scale);
    }
  }
}

TEST_CASE("group normalization: constant input and per-channel oracle") {
  const std::vector<float> unit(4, 1.0f), zero(4, 0.0f);
  Tensor c({1, 4, 3, 3}, 2.5f);
  const Tensor out = group_normalize(c, 2, 1e-5, unit, zero);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0f);

  Rng rng(3);
  Tensor x({2, 4, 3, 5});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal() * 2 + 1);
  const Tensor y = group_normalize(x, 4, 1e-5, unit, zero);
  for (int b = 0; b < 2; ++b) {
    for (int ch = 0; ch < 4; ++ch) {
      const std::size_t base = (b * 4 + ch) * 15;
      double m = 0, v = 0;
      for (int i = 0; i < 15; ++i) m += x[base + i];
      m /= 15;
      for (int i = 0; i < 15; ++i) v += (x[base + i] - m) * (x[base + i] - m);
      v /= 15;
      for (int i = 0; i < 15; ++i) {
        CHECK(y[base + i] == doctest::Approx((x[base + i] - m) / std::sqrt(v + 1e-5)).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("group normalization: per-group moments before the affine") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int groups = 1 + trial % 4, c = groups * (1 + trial % 3), hw = 16;
    Tensor x({3, c, 4, 4});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal() * 5 - 2);
    std::vector<float> scale(c), shift(c);
    for (int i = 0; i < c; ++i) {
      scale[i] = static_cast<float>(rng.uniform(0.5, 2));
      shift[i] = static_cast<float>(rng.normal());
    }
    Tensor pre;
    const Tensor y = group_normalize(x, groups, 1e-5, scale, shift, &pre);
    const int per = c / groups;
    for (int b = 0; b < 3; ++b) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t base = (b * c + g * per) * hw;
        double m = 0, v = 0;
        const int n = per * hw;
        for (int i = 0; i < n; ++i) m += pre[base + i];
        m /= n;
        for (int i = 0; i < n; ++i) v += (pre[base + i] - m) * (pre[base + i] - m);
        v /= n;
        CHECK(std::abs(m) <= 1e-5);
        CHECK(std::abs(v - 1.0) <= 1e-4);
      }
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t i = (b * c + ch) * hw + 3;
        CHECK(y[i] == doctest::Approx(pre[i] * scale[ch] + shift[ch]).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("drop_path_add") {
  const std::vector<float> id{1, 2}, br{4, 8};
  std::vector<float> out(2);
  drop_path_add<float>(id, br, true, 0.5, out);
  CHECK(out[0] == 9.0f);
  CHECK(out[1] == 18.0f);
  drop_path_add<float>(id, br, false, 0.5, out);
  CHECK(out[0] == 1.0f);
  CHECK(out[1] == 2.0f);
  drop_path_add<float>(id, br, true, 0.0, out);
  CHECK(out[0] == 5.0f);
}

TEST_CASE("eval_clean is deterministic and batch-size invariant") {
  ModelSpec spec;
  spec.height = spec.width = 32;
  const Network net(spec);
  const auto params = net.init_params(21);
  const auto images = random_images(64, net.image_size(), 4);
  const auto full = net.forward(params, images, 64, ForwardMode::eval_clean, nullptr);
  const auto again = net.forward(params, images, 64, ForwardMode::eval_clean, nullptr);
  CHECK(full.logits == again.logits);
  for (std::size_t bs : {1, 7}) {
    for (std::size_t lo = 0; lo + bs <= 64; lo += bs) {
      const std::span<const float> part(images.data() + lo * net.image_size(), bs * net.image_size());
      const auto r = net.forward(params, part, bs, ForwardMode::eval_clean, nullptr);
      for (std::size_t i = 0; i < bs; ++i) {
        REQUIRE(std::abs(r.predictions[i] - full.predictions[lo + i]) <= 1e-6);
      }
    }
  }
}

TEST_CASE("train_noised equals eval_clean when all noise rates are zero") {
  ModelSpec spec = toy_spec();
  const Network net(spec);
  const auto params = net.init_params(2);
  const auto images = random_images(5, net.image_size(), 6);
  Rng rng(1);
  const auto a = net.forward(params, images, 5, ForwardMode::train_noised, &rng);
  const auto b = net.forward(params, images, 5, ForwardMode::eval_clean, nullptr);
  CHECK(a.logits == b.logits);
}

TEST_CASE("train_noised: stochastic depth draws and seeded replay") {
  ModelSpec spec = toy_spec();
  spec.noise = {0.3, 0.5};
  const Network net(spec);
  const auto params = net.init_params(2);
  const auto images = random_images(16, net.image_size(), 6);
  Rng r1(77), r2(77);
  const auto a = net.forward(params, images, 16, ForwardMode::train_noised, &r1);
  const auto b = net.forward(params, images, 16, ForwardMode::train_noised, &r2);
  CHECK(a.logits == b.logits);
  CHECK(a.block_draws == 16 * 2);
  CHECK(a.blocks_dropped > 0);
  CHECK(a.blocks_dropped < a.block_draws);
  CHECK_THROWS_AS(net.forward(params, images, 16, ForwardMode::train_noised, nullptr),
                  ContractViolation);
}

TEST_CASE("analytic gradient of the transfer objective matches central differences") {
  const ModelSpec spec = toy_spec();
  const BasicNetwork<double> net(spec);
  const std::size_t m = 3;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    auto params = net.init_params(100 + trial);
    Rng rng(500 + trial);
    // random (not init-shaped) weights so GN scales and biases are exercised
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

    std::function<double(const BasicParameterSet<double>&)> loss =
        [&](const BasicParameterSet<double>& w) {
          const auto f = net.forward(w, images, m, ForwardMode::eval_clean, nullptr);
          return transfer_loss(f.predictions, labels, w, anchor, gamma);
        };

    Tape<double> tape;
    const auto f = net.forward(params, images, m, ForwardMode::eval_clean, nullptr, &tape);
    const auto dl = binary_cross_entropy_logit_grad(f.predictions, labels);
    auto grad = net.backward(params, tape, dl);
    add_regularizer_grad(params, &anchor, {0.0, gamma, gamma}, grad);
    const auto num = numeric_gradient(loss, params, 1e-4);

    double worst = 0.0;
    std::string where;
    for (const auto& [name, e] : grad) {
      const auto& n = num.at(name);
      double scale = 0.0;
      for (std::size_t i = 0; i < n.size(); ++i) scale = std::max(scale, std::abs(n[i]));
      for (std::size_t i = 0; i < n.size(); ++i) {
        const double err = std::abs(e.tensor[i] - n[i]) / std::max(std::abs(n[i]), 1e-3 * scale + 1e-8);
        if (err > worst) {
          worst = err;
          where = name;
        }
      }
    }
    INFO("trial " << trial << " worst at " << where);
    CHECK(worst <= 1e-3);
  }
}

TEST_CASE("layout, roles and validation") {
  const ModelSpec spec;
  const Network net(spec);
  const auto roles = partition_params(spec);
  std::size_t heads = 0;
  for (const auto& info : net.layout()) {
    CHECK(roles.at(info.name) == info.role);
    if (info.role == Role::head) {
      ++heads;
      CHECK(info.name.starts_with("head.fc."));
    }
  }
  CHECK(heads == 2);
  const auto top = top_block_params(spec);
  CHECK(std::find(top.begin(), top.end(), "head.fc.weight") != top.end());
  for (const auto& n : top) CHECK((n.starts_with("stage4.") || n.starts_with("head.")));

  ModelSpec bad = spec;
  bad.gn_groups = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = spec;
  bad.noise.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  ModelSpec noisy = spec;
  noisy.noise = {0.5, 0.1};
  CHECK(architecture_hash(noisy) == architecture_hash(spec));
  ModelSpec wider = spec;
  wider.stem_width = 16;
  CHECK(architecture_hash(wider) != architecture_hash(spec));

  auto params = net.init_params(1);
  CHECK(params == net.init_params(1));
  CHECK_FALSE(params == net.init_params(2));
  net.check_params(params);
  ParameterSet wrong = Network(wider).init_params(1);
  CHECK_THROWS_AS(net.check_params(wrong), AlignmentError);
}

TEST_CASE("forward rejects malformed input") {
  const Network net(toy_spec());
  const auto params = net.init_params(1);
  std::vector<float> images(net.image_size() * 2);
  CHECK_THROWS_AS(net.forward(params, images, 3, ForwardMode::eval_clean, nullptr), ContractViolation);
  CHECK_THROWS_AS(net.forward(params, {}, 0, ForwardMode::eval_clean, nullptr), ContractViolation);
}

TEST_CASE("untrained model scores near chance on random labels") {
  ModelSpec spec;
  spec.height = spec.width = 32;
  const Network net(spec);
  const auto params = net.init_params(31);
  const auto images = random_images(200, net.image_size(), 32);
  const auto f = net.forward(params, images, 200, ForwardMode::eval_clean, nullptr);
  std::vector<double> labels(200);
  for (std::size_t i = 0; i < 200; ++i) labels[i] = static_cast<double>(i % 2);
  const double a = auroc(f.predictions, labels);
  CHECK(a >= 0.3);
  CHECK(a <= 0.7);
}
