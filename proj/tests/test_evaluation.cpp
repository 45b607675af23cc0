#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "oracles.hpp"
#include "tgd/evaluation.hpp"

using namespace tgd;
namespace fs = std::filesystem;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.height = s.width = 16;
  s.stage_widths = {8, 16};
  s.stage_blocks = {1, 1};
  return s;
}

Dataset tiny_data(ArtifactKind kind, std::uint64_t seed) {
  SyntheticSpec ss;
  ss.n_per_class = 10;
  ss.shape = {3, 16, 16};
  ss.artifact = kind;
  ss.artifact_strength = 1.0;
  ss.seed = seed;
  return generate_synthetic(ss);
}

std::vector<std::size_t> all_indices(const Dataset& d) {
  std::vector<std::size_t> v(d.size());
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

TEST_CASE("auroc: worked examples") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<double> y{0, 0, 1, 1};
  CHECK(auroc(s, y) == doctest::Approx(0.75).epsilon(1e-12));

  const std::vector<double> perfect{0.1, 0.2, 0.8, 0.9};
  CHECK(auroc(perfect, y) == 1.0);

  const std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
  CHECK(auroc(flat, y) == doctest::Approx(0.5).epsilon(1e-12));

  // one tie across classes counts half
  const std::vector<double> tie{0.1, 0.6, 0.6, 0.9};
  CHECK(auroc(tie, y) == doctest::Approx(0.875).epsilon(1e-12));
}

TEST_CASE("auroc: undefined inputs") {
  const std::vector<double> s{0.1, 0.2, 0.3};
  CHECK_THROWS_AS(auroc(s, std::vector<double>{1, 1, 1}), UndefinedMetric);
  CHECK_THROWS_AS(auroc(s, std::vector<double>{0, 0, 0}), UndefinedMetric);
  CHECK_THROWS_AS(auroc(s, std::vector<double>{0, 1}), ContractViolation);
  CHECK_THROWS_AS(auroc(s, std::vector<double>{0, 0.5, 1}), ContractViolation);
}

TEST_CASE("auroc: matches the pairwise oracle on random inputs with ties") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 59));
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // coarse grid so that ties are common
      s[i] = std::round(rng.uniform(0.0, 1.0) * 8.0) / 8.0;
      y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    y[0] = 0.0;
    y[1] = 1.0;
    const double got = auroc(s, y);
    REQUIRE(got == doctest::Approx(oracle::pairwise_auroc(s, y)).epsilon(1e-12));

    // flipping labels mirrors the score
    std::vector<double> flipped(y);
    for (double& v : flipped) v = 1.0 - v;
    CHECK(auroc(s, flipped) == doctest::Approx(1.0 - got).epsilon(1e-12));

    // invariant under a strictly increasing transform
    std::vector<double> warped(s);
    for (double& v : warped) v = std::exp(3.0 * v) - 2.0;
    CHECK(auroc(warped, y) == doctest::Approx(got).epsilon(1e-12));
  }
}

TEST_CASE("numeric gradient of a known function") {
  BasicParameterSet<double> p;
  BasicTensor<double> w(Shape{2, 4});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.25 * static_cast<double>(i) - 1.0;
  p.add("w", w, Role::feature);
  BasicTensor<double> b(Shape{1});
  b[0] = 0.5;
  p.add("b", b, Role::head);

  // f = sum w^3 + 7 b
  const std::function<double(const BasicParameterSet<double>&)> f =
      [](const BasicParameterSet<double>& q) {
        double acc = 7.0 * q.at("b")[0];
        for (double v : q.at("w").values()) acc += v * v * v;
        return acc;
      };
  const auto g = numeric_gradient(f, p, 1e-5);
  REQUIRE(g.at("w").shape() == Shape{2, 4});
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(g.at("w")[i] == doctest::Approx(3.0 * w[i] * w[i]).epsilon(1e-7));
  }
  CHECK(g.at("b")[0] == doctest::Approx(7.0).epsilon(1e-9));

  const std::function<double(const BasicParameterSet<double>&)> bad =
      [](const BasicParameterSet<double>& q) { return q.at("b")[0] > 0.5 ? NAN : 0.0; };
  CHECK_THROWS_AS(numeric_gradient(bad, p, 1e-5), DivergenceError);
  CHECK_THROWS_AS(numeric_gradient(f, p, 0.0), ContractViolation);
}

TEST_CASE("report JSON round trip, including null cells") {
  EvalReport r;
  r.source_before = 0.97;
  r.source_after = 0.9125;
  r.target_after = 0.5 + 1e-12;
  r.forgetting_delta = *r.source_before - *r.source_after;
  r.gamma = GammaSummary{0.1, 0.4, 0.25, 12, "runs/x/metrics.ndjson"};
  r.config_digests = {{"before", "aa"}, {"after", "bb"}};
  r.seeds = {{"before", 1}, {"after", 18446744073709551615ull}};
  r.stages = {{"before", "pretrain"}, {"after", "transfer"}};
  r.warnings = {"no target data: target cells are null"};
  const std::string text = report_to_json(r);
  CHECK(report_from_json(text) == r);
  CHECK(text.find("\"target_before\": null") != std::string::npos);

  EvalReport empty;
  CHECK(report_from_json(report_to_json(empty)) == empty);
  CHECK_THROWS_AS(report_from_json("{\"auroc\": 3}"), IoError);
  CHECK_THROWS_AS(report_from_json("nope"), IoError);
}

TEST_CASE("gamma trace reading and summary") {
  const fs::path dir = oracle::scratch_dir("gamma");
  {
    std::ofstream out(dir / "m.ndjson");
    out << R"({"iteration":1,"teacher_loss":0.7,"gamma":0.2})" << "\n";
    out << R"({"iteration":2,"teacher_loss":null,"gamma":null})" << "\n";
    out << "\n";
    out << R"({"iteration":3,"teacher_loss":0.1,"gamma":0.45})" << "\n";
  }
  const auto trace = read_gamma_trace(dir / "m.ndjson");
  REQUIRE(trace.size() == 2);
  CHECK(trace[1] == GammaRecord{3, 0.1, 0.45});
  const GammaSummary s = summarize_gamma(trace);
  CHECK(s.count == 2);
  CHECK(s.min == 0.2);
  CHECK(s.max == 0.45);
  CHECK(s.mean == doctest::Approx(0.325));
  CHECK(summarize_gamma({}).count == 0);

  std::ofstream(dir / "bad.ndjson") << "{broken\n";
  CHECK_THROWS_AS(read_gamma_trace(dir / "bad.ndjson"), IoError);
  CHECK_THROWS_AS(read_gamma_trace(dir / "missing.ndjson"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("forgetting report: identical checkpoints have zero delta") {
  const ModelSpec spec = tiny_spec();
  const Checkpoint ck{spec, Network(spec).init_params(3), {"pretrain", "m", 3, "c"}};
  const Dataset src = tiny_data(ArtifactKind::checkerboard_upsample, 1);
  const Dataset tgt = tiny_data(ArtifactKind::blur_residual, 2);
  const auto out = forgetting_report(ck, ck, EvalSplit{&src, all_indices(src)},
                                     EvalSplit{&tgt, all_indices(tgt)});
  const EvalReport& r = out.report;
  REQUIRE(r.forgetting_delta.has_value());
  CHECK(*r.forgetting_delta == 0.0);
  CHECK(*r.source_before == *r.source_after);
  CHECK(*r.target_before == *r.target_after);
  CHECK(r.warnings.empty());
  CHECK(out.dumps.size() == 4);
  CHECK(out.dumps.at("source_after").ids.size() == src.size());
  CHECK(out.dumps.at("source_after").ids[0] == src.ids[0]);

  // the AUROC cell agrees with the dumped scores
  std::vector<double> y(src.labels.begin(), src.labels.end());
  CHECK(*r.source_before ==
        doctest::Approx(oracle::pairwise_auroc(out.dumps.at("source_before").scores, y)));
}

TEST_CASE("forgetting report: missing target leaves null cells with a warning") {
  const ModelSpec spec = tiny_spec();
  const Checkpoint before{spec, Network(spec).init_params(4), {"pretrain", "m", 4, "c0"}};
  const Checkpoint after{spec, Network(spec).init_params(5), {"transfer", "m", 5, "c1"}};
  const Dataset src = tiny_data(ArtifactKind::checkerboard_upsample, 1);
  const auto out = forgetting_report(before, after, EvalSplit{&src, all_indices(src)}, std::nullopt);
  const EvalReport& r = out.report;
  CHECK_FALSE(r.target_before.has_value());
  CHECK_FALSE(r.target_after.has_value());
  REQUIRE(r.forgetting_delta.has_value());
  CHECK(*r.forgetting_delta == doctest::Approx(*r.source_before - *r.source_after));
  CHECK(r.warnings.size() == 1);
  CHECK(r.stages.at("after") == "transfer");
  CHECK(r.seeds.at("before") == 4);

  ModelSpec other = spec;
  other.stem_width = 16;
  const Checkpoint alien{other, Network(other).init_params(1), {}};
  CHECK_THROWS_AS(forgetting_report(before, alien, std::nullopt, std::nullopt), SpecHashMismatch);
}

TEST_CASE("score dump format") {
  const fs::path dir = oracle::scratch_dir("dump");
  write_score_dump(dir / "s.tsv", {{"a", "b"}, {0.25, 1.0 / 3.0}});
  std::ifstream in(dir / "s.tsv");
  std::string header, l1, l2;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(header == "id\tscore");
  CHECK(l1 == "a\t0.25");
  CHECK(std::stod(l2.substr(2)) == 1.0 / 3.0);
  fs::remove_all(dir);
}

TEST_CASE("predict is independent of evaluation order and chunking") {
  const ModelSpec spec = tiny_spec();
  const Network net(spec);
  const ParameterSet p = net.init_params(6);
  const Dataset d = tiny_data(ArtifactKind::blur_residual, 3);
  const auto idx = all_indices(d);
  const auto all = predict(net, p, d, idx);
  std::vector<std::size_t> rev(idx.rbegin(), idx.rend());
  const auto back = predict(net, p, d, rev);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    CHECK(back[idx.size() - 1 - i] == doctest::Approx(all[i]).epsilon(1e-6));
    CHECK((all[i] > 0.0 && all[i] < 1.0));
  }
}
