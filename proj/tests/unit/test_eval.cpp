#include <atomic>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"

#include "rhmlab/errors.hpp"
#include "rhmlab/eval.hpp"

using namespace rhmlab;
using namespace rhmlab::eval;

namespace {

rhm::RhmParams maximal(int L, int v, std::uint64_t seed = 0) {
  rhm::RhmParams p;
  p.L = L;
  p.v = p.m = p.n_c = v;
  p.seed = seed;
  return p;
}

Eigen::MatrixXd one_hot_labels(const std::vector<int>& y, int classes) {
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(classes, static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) r(y[i], static_cast<Eigen::Index>(i)) = 1.0;
  return r;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("test error counting") {
    LinearProbe p;
    p.weight = Eigen::MatrixXd::Identity(3, 3);
    p.bias = Eigen::VectorXd::Zero(3);
    const std::vector<int> y = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
    Eigen::MatrixXd reps = one_hot_labels(y, 3);
    CHECK(test_error(p, reps, y) == 0.0);
    // Hand-made confusion: samples 1, 4 and 8 predicted as class 0.
    for (int i : {1, 4, 8}) reps.col(i) = Eigen::Vector3d(1, 0, 0);
    CHECK(test_error(p, reps, y) == doctest::Approx(0.3));

    LinearProbe constant;
    constant.weight = Eigen::MatrixXd::Zero(4, 2);
    constant.bias = Eigen::Vector4d(1, 0, 0, 0);
    std::vector<int> bal;
    for (int i = 0; i < 40; ++i) bal.push_back(i % 4);
    CHECK(test_error(constant, Eigen::MatrixXd::Zero(2, 40), bal) == doctest::Approx(0.75));
    CHECK_THROWS_AS(test_error(constant, Eigen::MatrixXd::Zero(2, 0), std::vector<int>{}), ParameterError);
  }

  TEST_CASE("probe on separable representations") {
    std::vector<int> y;
    for (int i = 0; i < 64; ++i) y.push_back(i % 4);
    const Eigen::MatrixXd reps = one_hot_labels(y, 4);
    ProbeConfig cfg;
    cfg.lr = 5e-2;
    const auto r = train_linear_probe(reps, y, 4, cfg, 3);
    CHECK(r.converged);
    CHECK(r.window_loss < 1e-3);
    CHECK(test_error(r.probe, reps, y) == 0.0);
    CHECK_THROWS_AS(train_linear_probe(reps, std::vector<int>(64, 1), 4, cfg, 3), ParameterError);
  }

  TEST_CASE("probe on random features overfits but does not generalize") {
    Rng rng(4);
    const int P = 40;
    std::vector<int> y, yt;
    for (int i = 0; i < P; ++i) y.push_back(static_cast<int>(rng.below(4)));
    for (int i = 0; i < 2000; ++i) yt.push_back(static_cast<int>(rng.below(4)));
    const Eigen::MatrixXd train = testutil::random_matrix(60, P, rng);
    const Eigen::MatrixXd test = testutil::random_matrix(60, 2000, rng);
    ProbeConfig cfg;
    cfg.lr = 1e-2;
    cfg.max_epochs = 2000;
    const auto r = train_linear_probe(train, y, 4, cfg, 5);
    CHECK(test_error(r.probe, train, y) == 0.0);
    CHECK(std::abs(test_error(r.probe, test, yt) - 0.75) < 0.05);
  }

  TEST_CASE("untrained network probed at small P is near chance") {
    const auto params = maximal(3, 4, 2);
    auto rb = std::make_shared<const rhm::RuleBook>(rhm::build_rulebook(params));
    double mean = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      Rng rng(seed);
      const auto data = rhm::sample_training_set(rb, 64, rng, 2000);
      net::NetworkConfig c;
      c.input_channels = 4;
      c.input_length = 8;
      c.depth = 3;
      c.width = 16;
      net::Network n(c);
      net::init_weights(n, rng);
      const auto tr = net::representation(n, rhm::encode_inputs(data.samples, 4), 3);
      const auto te = net::representation(n, rhm::encode_inputs(data.holdout, 4), 3);
      ProbeConfig cfg;
      cfg.max_epochs = 300;
      const auto r = train_linear_probe(tr, data.labels(), 4, cfg, seed);
      mean += test_error(r.probe, te, data.holdout_labels()) / 3.0;
    }
    CHECK(std::abs(mean - 0.75) < 0.05);
  }

  TEST_CASE("sweep grid clipping") {
    CHECK(sweep_grid(maximal(2, 6), kDefaultMultipliers) == std::vector<std::size_t>{432, 864, 1036, 1036, 1036});
    CHECK(sweep_grid(maximal(3, 4), kDefaultMultipliers) == std::vector<std::size_t>{512, 1024, 2048, 2560, 5120});
  }

  TEST_CASE("sweep bookkeeping, deduplication and thread independence") {
    const auto params = maximal(2, 6);
    std::atomic<int> calls{0};
    SweepJob job = [&](std::size_t P, std::uint64_t seed) {
      ++calls;
      // Error falls with P; seed adds a small offset.
      return SweepJobResult{300.0 / static_cast<double>(P) * 0.1 + 0.001 * static_cast<double>(seed), true};
    };
    const auto r1 = pstar_sweep(params, kDefaultMultipliers, {1, 2, 3}, job, 1);
    CHECK(calls.load() == 3 * 3);  // three distinct P values after clipping
    CHECK(r1.rows.size() == 15);
    CHECK(r1.random_error == doctest::Approx(5.0 / 6.0));
    CHECK(r1.threshold == doctest::Approx(0.5 / 6.0));
    REQUIRE(r1.p_star.has_value());
    // Mean error 30 / P + 0.002 <= 0.0833 first at P = 432.
    CHECK(*r1.p_star == 432);
    const auto r4 = pstar_sweep(params, kDefaultMultipliers, {1, 2, 3}, job, 4);
    CHECK(sweep_csv(r4) == sweep_csv(r1));
    CHECK(sweep_csv(r1).rfind("L,v,m,n_c,multiplier,P,seed,test_error,probe_converged\n", 0) == 0);

    SweepJob never = [](std::size_t, std::uint64_t) { return SweepJobResult{0.5, false}; };
    const auto none = pstar_sweep(params, kDefaultMultipliers, {1}, never, 1);
    CHECK_FALSE(none.p_star.has_value());
    CHECK(sweep_summary(none)["p_star"] == "not_reached");
  }

  TEST_CASE("sensitivity degenerate and random-network baselines") {
    const auto params = maximal(3, 4, 6);
    const auto rb = rhm::build_rulebook(params);
    Rng rng(7);
    RepresentationFn constant = [](const Eigen::MatrixXd& x) {
      return std::vector<Eigen::MatrixXd>{Eigen::MatrixXd::Ones(3, x.cols() / 8)};
    };
    const auto s = sensitivity(constant, rb, 1, 100, rng);
    CHECK(std::isnan(s[0]));

    net::NetworkConfig c;
    c.input_channels = 4;
    c.input_length = 8;
    c.depth = 3;
    c.width = 16;
    net::Network n(c);
    net::init_weights(n, rng);
    const auto top = sensitivity(network_representations(n, nullptr), rb, 3, 4000, rng);
    CHECK(top.size() == 3);
    for (double x : top) CHECK(std::abs(x - 1.0) < 0.1);

    // Raw inputs: level-1 synonym exchange changes about half the positions.
    RepresentationFn raw = [](const Eigen::MatrixXd& x) {
      return std::vector<Eigen::MatrixXd>{Eigen::Map<const Eigen::MatrixXd>(x.data(), x.rows() * 8, x.cols() / 8)};
    };
    CHECK(sensitivity(raw, rb, 1, 4000, rng)[0] < 1.0);

    const auto report = sensitivity_report(network_representations(n, nullptr), rb, {"1", "2", "3"}, 200, rng);
    CHECK(report.S.size() == 3);
    CHECK(report.S[0].size() == 3);
    const auto csv = sensitivity_csv(report);
    CHECK(csv.rfind("layer,level,S,n_pairs\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 9);
    CHECK_THROWS_AS(sensitivity_report(network_representations(n, nullptr), rb, {"1"}, 10, rng), ShapeError);
  }

  TEST_CASE("sensitivity estimate is stable under doubling n_pairs") {
    const auto params = maximal(3, 4, 8);
    const auto rb = rhm::build_rulebook(params);
    net::NetworkConfig c;
    c.input_channels = 4;
    c.input_length = 8;
    c.depth = 3;
    c.width = 16;
    net::Network n(c);
    Rng init(9);
    net::init_weights(n, init);
    const auto fn = network_representations(n, nullptr);
    Rng r1(10), r2(11);
    const auto a = sensitivity_report(fn, rb, {"1", "2", "3"}, kDefaultSensitivityPairs, r1);
    const auto b = sensitivity_report(fn, rb, {"1", "2", "3"}, 2 * kDefaultSensitivityPairs, r2);
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t l = 0; l < 3; ++l) CHECK(std::abs(a.S[k][l] - b.S[k][l]) < 0.05);
  }
}
