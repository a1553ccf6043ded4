#include <cmath>

#include "doctest.h"
#include "helpers.hpp"

#include "rhmlab/checkpoint.hpp"
#include "rhmlab/errors.hpp"
#include "rhmlab/ssl.hpp"

using namespace rhmlab;
using namespace rhmlab::ssl;
using testutil::max_abs_diff;
using testutil::rel_err;

namespace {

rhm::ObjectGroup group(std::size_t begin, std::size_t end, int object, std::vector<std::size_t> negatives) {
  rhm::ObjectGroup g;
  g.begin = begin;
  g.end = end;
  g.object = object;
  for (std::size_t i = begin; i < end; ++i) g.positives.push_back(i);
  g.negatives = std::move(negatives);
  return g;
}

// Two groups of 4 over 8 columns, each using the other as negatives.
std::vector<rhm::ObjectGroup> two_groups() {
  return {group(0, 4, 0, {4, 5, 6, 7}), group(4, 8, 1, {0, 1, 2, 3})};
}

rhm::Dataset small_dataset(int L, int v, std::size_t P, std::uint64_t seed) {
  rhm::RhmParams p;
  p.L = L;
  p.v = p.m = p.n_c = v;
  p.seed = seed;
  auto rb = std::make_shared<const rhm::RuleBook>(rhm::build_rulebook(p));
  Rng rng(seed + 1);
  return rhm::sample_training_set(rb, P, rng, 200);
}

net::Network ssl_net(int depth, int v, int width, std::uint64_t seed) {
  net::NetworkConfig c;
  c.input_channels = v;
  c.input_length = 1 << depth;
  c.depth = depth;
  c.width = width;
  net::Network n(c);
  Rng rng(seed);
  net::init_weights(n, rng);
  for (auto& layer : n.layers()) layer.bias = testutil::random_matrix(layer.bias.size(), 1, rng, 0.1);
  return n;
}

}  // namespace

TEST_SUITE("ssl") {
  TEST_CASE("simclr closed forms") {
    const std::vector<int> ids = {0, 0, 1, 1};
    const Eigen::MatrixXd z = Eigen::MatrixXd::Identity(4, 4);
    CHECK(simclr_loss(z, ids).loss == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    Eigen::MatrixXd peaked = Eigen::MatrixXd::Zero(4, 4);
    peaked.col(0) = Eigen::Vector4d(30, 0, 0, 0);
    peaked.col(1) = Eigen::Vector4d(30, 0, 0, 0);
    peaked.col(2) = Eigen::Vector4d(0, 30, 0, 0);
    peaked.col(3) = Eigen::Vector4d(0, 30, 0, 0);
    CHECK(simclr_loss(peaked, ids).loss < 1e-12);

    const std::vector<int> distinct = {0, 1, 2, 3};
    CHECK_THROWS_AS(simclr_loss(z, distinct), ParameterError);
  }

  TEST_CASE("simclr gradient") {
    Rng rng(1);
    Eigen::MatrixXd z = testutil::random_matrix(5, 8, rng, 0.7);
    const std::vector<int> ids = {0, 1, 0, 2, 1, 0, 3, 2};
    const auto out = simclr_loss(z, ids);
    const auto num = testutil::numeric_grad([&] { return simclr_loss(z, ids).loss; }, z);
    CHECK(rel_err(out.grad, num) < 1e-5);
  }

  TEST_CASE("clapp closed forms") {
    const auto groups = two_groups();
    const int D = 3;
    ClappGates all_pos(2, std::vector<std::vector<char>>(1, std::vector<char>(4, 1)));

    // Every positive comparison scores 2: inactive hinges.
    Eigen::MatrixXd z(D, 8);
    for (int i = 0; i < 8; ++i) z.col(i) = Eigen::Vector3d(1, 1, 0);
    const Eigen::MatrixXd w = Eigen::MatrixXd::Identity(D, D);
    const auto inactive = clapp_loss(z, groups, w, all_pos, 1);
    CHECK(inactive.loss == 0.0);
    CHECK(inactive.grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(inactive.grad_pred.cwiseAbs().maxCoeff() == 0.0);

    // W^pred = 0: every active term is exactly one; each (group, offset)
    // branch is normalised by its count, so the loss counts the branches.
    Rng rng(2);
    const Eigen::MatrixXd zr = testutil::random_matrix(D, 8, rng);
    const auto gates = draw_clapp_gates(groups, 3, rng);
    const auto zero = clapp_loss(zr, groups, Eigen::MatrixXd::Zero(D, D), gates, 3);
    double branches = 0.0;
    for (std::size_t g = 0; g < 2; ++g)
      for (int k = 1; k <= 3; ++k) {
        int pos = 0, neg = 0;
        for (std::size_t i = static_cast<std::size_t>(k); i < 4; ++i) (gates[g][k - 1][i] ? pos : neg)++;
        branches += (pos > 0) + (neg > 0);
      }
    CHECK(zero.loss == doctest::Approx(branches).epsilon(1e-14));
  }

  TEST_CASE("clapp gradients") {
    Rng rng(3);
    const auto groups = two_groups();
    Eigen::MatrixXd z = testutil::random_matrix(4, 8, rng, 0.6);
    Eigen::MatrixXd w = testutil::random_matrix(4, 4, rng, 0.5);
    const auto gates = draw_clapp_gates(groups, 3, rng);
    const auto out = clapp_loss(z, groups, w, gates, 3);
    CHECK(out.loss > 0.0);
    const auto gz = testutil::numeric_grad([&] { return clapp_loss(z, groups, w, gates, 3).loss; }, z);
    const auto gw = testutil::numeric_grad([&] { return clapp_loss(z, groups, w, gates, 3).loss; }, w);
    CHECK(rel_err(out.grad, gz) < 1e-5);
    CHECK(rel_err(out.grad_pred, gw) < 1e-5);
  }

  TEST_CASE("clapp predictor update signs") {
    const auto groups = std::vector<rhm::ObjectGroup>{group(0, 2, 0, {2, 3})};
    Eigen::MatrixXd z(2, 4);
    z << 1, 0, 0.5, 0.2,
         0, 1, 0.1, 0.3;
    const Eigen::MatrixXd w0 = Eigen::MatrixXd::Zero(2, 2);
    ClappGates pos(1, {std::vector<char>{0, 1}});
    auto out = clapp_loss(z, groups, w0, pos, 1);
    Eigen::MatrixXd w = w0;
    update_pred_weights(w, out.grad_pred, 0.1);
    CHECK(max_abs_diff(w, 0.1 * z.col(1) * z.col(0).transpose()) < 1e-15);

    ClappGates neg(1, {std::vector<char>{0, 0}});
    out = clapp_loss(z, groups, w0, neg, 1);
    w = w0;
    update_pred_weights(w, out.grad_pred, 0.1);
    CHECK(max_abs_diff(w, -0.1 * z.col(1) * z.col(2).transpose()) < 1e-15);

    // No active hinge: the predictor stays put.
    Eigen::MatrixXd big = 3.0 * Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd za(2, 4);
    za << 1, 1, 0, 0,
          0, 0, 0, 0;
    out = clapp_loss(za, groups, big, pos, 1);
    Eigen::MatrixXd wb = big;
    update_pred_weights(wb, out.grad_pred, 0.1);
    CHECK(wb == big);
  }

  TEST_CASE("lpl closed forms") {
    const Eigen::MatrixXd z = Eigen::MatrixXd::Constant(3, 6, 0.7);
    const std::vector<std::size_t> partners = {1, 0, 3, 2, 5, 4};
    const auto out = lpl_loss(z, partners, 1.0, 10.0, 1e-4);
    CHECK(out.parts[0] == 0.0);
    CHECK(out.parts[1] == doctest::Approx(-std::log(1e-4)).epsilon(1e-12));
    CHECK(out.parts[2] < 1e-30);

    // Two neurons carrying the same feature: Cov = var for the only pair.
    Eigen::MatrixXd zz(2, 4);
    zz << 1, -1, 2, 0,
          1, -1, 2, 0;
    const double mean = 0.5;
    double var = 0.0;
    for (double x : {1.0, -1.0, 2.0, 0.0}) var += (x - mean) * (x - mean);
    var /= 3.0;
    const auto d = lpl_loss(zz, std::vector<std::size_t>{1, 0, 3, 2}, 1.0, 10.0, 1e-4);
    CHECK(d.parts[2] == doctest::Approx(var * var).epsilon(1e-12));
  }

  TEST_CASE("lpl gradient with stop-gradient mean") {
    Rng rng(4);
    Eigen::MatrixXd z = testutil::random_matrix(4, 8, rng);
    const std::vector<std::size_t> partners = {3, 2, 1, 0, 7, 6, 5, 4};
    const auto out = lpl_loss(z, partners, 1.0, 10.0, 1e-4);
    // The batch mean is held fixed while z moves.
    const Eigen::VectorXd mean = z.rowwise().mean();
    auto stop_grad_loss = [&] {
      const double b = 8.0, m = 4.0;
      double pred = 0.0;
      for (int i = 0; i < 8; ++i) pred += (z.col(i) - z.col(static_cast<Eigen::Index>(partners[i]))).squaredNorm();
      pred /= b;
      const Eigen::MatrixXd zc = z.colwise() - mean;
      const Eigen::MatrixXd cov = zc * zc.transpose() / (b - 1);
      double var = 0.0, dec = 0.0;
      for (int f = 0; f < 4; ++f) var -= std::log(cov(f, f) + 1e-4);
      for (int f = 0; f < 4; ++f)
        for (int g = 0; g < 4; ++g)
          if (f != g) dec += cov(f, g) * cov(f, g);
      return pred + var / m + 10.0 * dec / (m * (m - 1));
    };
    CHECK(stop_grad_loss() == doctest::Approx(out.loss).epsilon(1e-12));
    const auto num = testutil::numeric_grad(stop_grad_loss, z);
    CHECK(rel_err(out.grad, num) < 1e-5);
  }

  TEST_CASE("per-location loss averages over positions") {
    const auto data = small_dataset(2, 3, 60, 5);
    Rng rng(6);
    const auto batch = rhm::make_pair_batch(data, 16, rhm::NegativePolicy::cross_object, rng);
    Eigen::MatrixXd out = testutil::random_matrix(4, 16 * 2, rng);
    auto cfg = SslConfig::defaults(SslKind::lpl);
    const auto lo = layer_loss(cfg, out, batch, Eigen::MatrixXd(), {});
    double mean = 0.0;
    for (int p = 0; p < 2; ++p) {
      Eigen::MatrixXd zp(4, 16);
      for (int s = 0; s < 16; ++s) zp.col(s) = out.col(2 * s + p);
      mean += lpl_loss(zp, positive_partners(batch), 1.0, 10.0, 1e-4).loss / 2.0;
    }
    CHECK(lo.loss == doctest::Approx(mean).epsilon(1e-12));
    const auto num = testutil::numeric_grad([&] { return layer_loss(cfg, out, batch, Eigen::MatrixXd(), {}).loss; }, out);
    CHECK(rel_err(lo.grad, num) < 1e-5);
  }

  TEST_CASE("layerwise gradients are local and exact per layer") {
    const auto data = small_dataset(3, 3, 120, 7);
    Rng rng(8);
    for (auto kind : {SslKind::clapp, SslKind::lpl, SslKind::simclr}) {
      auto cfg = SslConfig::defaults(kind);
      cfg.batch_size = 24;
      net::Network n = ssl_net(3, 3, 4, 9);
      const auto batch = rhm::make_pair_batch(data, cfg.batch_size, cfg.negative_policy, rng);
      auto pred = PredWeights::identity_init(n);
      const auto gates = draw_clapp_gates(batch.groups, cfg.k_max, rng);
      const auto cache = net::forward(n, batch.inputs);
      std::vector<Eigen::MatrixXd> pg;
      const auto g = layerwise_gradients(n, cache, batch, cfg, pred, gates, &pg, nullptr);
      auto loss_at = [&](int l) {
        const auto c = net::forward(n, batch.inputs);
        const Eigen::MatrixXd w = kind == SslKind::clapp ? pred.w[l - 1] : Eigen::MatrixXd();
        return layer_loss(cfg, c.post[l], batch, w, gates).loss;
      };
      for (int l = 1; l <= 3; ++l) {
        const auto num = testutil::numeric_grad([&] { return loss_at(l); }, n.layer(l).weight);
        CHECK(rel_err(g.weight[l - 1], num) < 1e-4);
        for (int k = l + 1; k <= 3; ++k) {
          const auto upper = testutil::numeric_grad([&] { return loss_at(l); }, n.layer(k).weight);
          CHECK(upper.cwiseAbs().maxCoeff() == 0.0);
        }
        if (kind == SslKind::clapp) {
          const auto numw = testutil::numeric_grad([&] { return loss_at(l); }, pred.w[l - 1]);
          CHECK(rel_err(pg[l - 1], numw) < 1e-5);
        }
      }
    }
  }

  TEST_CASE("end-to-end gradients") {
    const auto data = small_dataset(2, 3, 60, 10);
    Rng rng(11);
    auto cfg = SslConfig::defaults(SslKind::clapp);
    cfg.batch_size = 16;
    cfg.scope = SslScope::end_to_end;
    net::Network n = ssl_net(2, 3, 4, 12);
    const auto batch = rhm::make_pair_batch(data, 16, cfg.negative_policy, rng);
    const auto pred = PredWeights::identity_init(n);
    const auto gates = draw_clapp_gates(batch.groups, cfg.k_max, rng);
    const auto g = end_to_end_gradients(n, net::forward(n, batch.inputs), batch, cfg, pred, gates, nullptr, nullptr);
    for (int l = 1; l <= 2; ++l) {
      const auto num = testutil::numeric_grad(
          [&] { return layer_loss(cfg, net::forward(n, batch.inputs).output(), batch, pred.w[1], gates).loss; },
          n.layer(l).weight);
      CHECK(rel_err(g.weight[l - 1], num) < 1e-4);
    }

    // A single layer: end to end and layerwise are the same step.
    net::Network one = ssl_net(1, 4, 4, 13);
    const auto d1 = small_dataset(1, 4, 12, 14);
    const auto b1 = rhm::make_pair_batch(d1, 16, cfg.negative_policy, rng);
    net::Network a = one, b = one;
    net::AdamState sa, sb;
    sa.lr = sb.lr = cfg.lr;
    auto pa = PredWeights::identity_init(one), pb = pa;
    Rng ra(3), rb(3);
    const auto r1 = layerwise_train_step(a, sa, pa, b1, cfg, ra);
    const auto r2 = end_to_end_train_step(b, sb, pb, b1, cfg, rb);
    CHECK(r1.loss == r2.loss);
    CHECK(a.layer(1).weight == b.layer(1).weight);
    CHECK(pa.w[0] == pb.w[0]);
  }

  TEST_CASE("config serialization") {
    auto c = SslConfig::defaults(SslKind::lpl);
    CHECK(c.lr == 5e-4);
    CHECK(c.batch_size == 512);
    CHECK(SslConfig::defaults(SslKind::clapp).lr == 2e-4);
    CHECK(SslConfig::defaults(SslKind::simclr).batch_size == 128);
    c.k_max = 3;
    c.scope = SslScope::end_to_end;
    const nlohmann::json j = c;
    CHECK(j.get<SslConfig>() == c);
    nlohmann::json bad = j;
    bad["batch_size"] = 1;
    CHECK_THROWS_AS(bad.get<SslConfig>(), ConfigError);
  }

  TEST_CASE("trainer logs per-layer columns and resumes identically") {
    const auto data = small_dataset(2, 3, 60, 15);
    auto cfg = SslConfig::defaults(SslKind::clapp);
    cfg.batch_size = 16;
    SslTrainer t(ssl_net(2, 3, 9, 16), cfg, 17);
    t.run_epoch(data);
    CHECK(t.log().size() == 2);
    CHECK(t.log()[0].layer == 1);
    CHECK(t.log()[1].layer == 2);
    const auto csv = loss_log_csv(SslKind::clapp, t.log());
    CHECK(csv.rfind("epoch,layer,loss_pos,loss_neg\n", 0) == 0);

    Checkpoint ck;
    t.save(ck);
    SslTrainer r = SslTrainer::load(ck);
    t.run_epoch(data);
    r.run_epoch(data);
    CHECK(loss_log_csv(SslKind::clapp, t.log()) == loss_log_csv(SslKind::clapp, r.log()));
    CHECK(t.network().layer(2).weight == r.network().layer(2).weight);
    CHECK(t.pred().w[1] == r.pred().w[1]);
  }

  TEST_CASE("early stop breaks at the crossing step") {
    const auto data = small_dataset(1, 2, 4, 18);
    auto cfg = SslConfig::defaults(SslKind::clapp);
    cfg.batch_size = 4;
    cfg.window = 3;
    cfg.stop_loss = 1e9;  // crossed as soon as the window is full
    SslTrainer t(ssl_net(1, 2, 4, 19), cfg, 20);
    const auto s = t.train(data, 100);
    CHECK(s.stopped_early);
    CHECK(s.epochs == 3);
  }
}
