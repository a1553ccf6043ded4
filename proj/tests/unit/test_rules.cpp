#include "doctest.h"
#include "helpers.hpp"
#include "../common/reference.hpp"

#include "rhmlab/checkpoint.hpp"
#include "rhmlab/errors.hpp"
#include "rhmlab/rules.hpp"

using namespace rhmlab;
using namespace rhmlab::rules;
using net::Network;
using net::NetworkConfig;
using testutil::max_abs_diff;

namespace {

Network make_net(int depth, int v, int width, int classes, std::uint64_t seed,
                 net::Activation act = net::Activation::relu) {
  NetworkConfig c;
  c.input_channels = v;
  c.input_length = 1 << depth;
  c.depth = depth;
  c.width = width;
  c.head_classes = classes;
  c.activation = act;
  Network n(c);
  Rng rng(seed);
  net::init_weights(n, rng);
  for (auto& layer : n.layers()) layer.bias = testutil::random_matrix(layer.bias.size(), 1, rng, 0.1);
  return n;
}

FeedbackConfig random_feedback(const Network& n, RuleKind kind, Rng& rng) {
  FeedbackConfig fb;
  fb.kind = kind;
  fb.feedback.resize(static_cast<std::size_t>(n.num_layers()));
  for (int l = 2; l <= n.num_layers(); ++l) {
    fb.feedback[l - 1] = testutil::random_matrix(n.layer(l).weight.cols(), n.layer(l).weight.rows(), rng, 0.5);
  }
  if (kind == RuleKind::dfa || kind == RuleKind::lga) fb.direct = direct_products(n, fb.feedback);
  return fb;
}

double grads_diff(const net::Gradients& a, const net::Gradients& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.weight.size(); ++i) {
    d = std::max(d, max_abs_diff(a.weight[i], b.weight[i]));
    d = std::max(d, max_abs_diff(a.bias[i], b.bias[i]));
  }
  return d;
}

double grads_diff(const net::Gradients& a, const ref::Grads& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.weight.size(); ++i) {
    d = std::max(d, max_abs_diff(a.weight[i], b.w[i]));
    d = std::max(d, max_abs_diff(a.bias[i], b.b[i]));
  }
  return d;
}

struct Batch {
  Eigen::MatrixXd x;
  std::vector<int> y;
};

Batch random_batch(int v, int len, int batch, int classes, Rng& rng) {
  Batch b;
  b.x = testutil::random_one_hot(v, len, batch, rng);
  for (int i = 0; i < batch; ++i) b.y.push_back(static_cast<int>(rng.below(static_cast<std::size_t>(classes))));
  return b;
}

}  // namespace

TEST_SUITE("rules") {
  TEST_CASE("rule names") {
    std::vector<std::string> names;
    for (auto k : all_rules()) names.push_back(to_string(k));
    CHECK(names == std::vector<std::string>{"bp", "input_specific", "no_mask", "batch_mean", "lga"});
    CHECK(rule_from_string("fa") == RuleKind::fa);
    CHECK(rule_from_string("dfa") == RuleKind::dfa);
    CHECK_THROWS_AS(rule_from_string("sgd"), ConfigError);
  }

  TEST_CASE("single-layer bp is mask times error times input") {
    Network n = make_net(1, 3, 4, 0, 1);
    Rng rng(2);
    const Eigen::MatrixXd x = testutil::random_one_hot(3, 2, 5, rng);
    const auto cache = net::forward(n, x);
    const Eigen::MatrixXd e = testutil::random_matrix(4, 5, rng);
    const auto g = bp_grads(n, cache, e);
    const Eigen::MatrixXd delta = net::activation_derivative(net::Activation::relu, cache.pre[0]).cwiseProduct(e);
    Eigen::MatrixXd z0(6, 5);
    for (int s = 0; s < 5; ++s) z0.col(s) << x.col(2 * s), x.col(2 * s + 1);
    CHECK(max_abs_diff(g.weight[0], delta * z0.transpose()) < 1e-14);
  }

  TEST_CASE("bp matches finite differences and the loop reference") {
    Network n = make_net(3, 3, 5, 3, 4);
    Rng rng(5);
    const auto b = random_batch(3, 8, 6, 3, rng);
    const auto cache = net::forward(n, b.x);
    const auto e = net::cross_entropy(cache.output(), b.y).error;
    const auto g = bp_grads(n, cache, e);
    CHECK(grads_diff(g, ref::rule_grads(n, b.x, e, ref::Rule::bp, {})) < 1e-12);
    for (int l = 1; l <= n.num_layers(); ++l) {
      const auto num = testutil::numeric_grad(
          [&] { return net::cross_entropy(net::forward(n, b.x).output(), b.y).loss; }, n.layer(l).weight);
      CHECK(testutil::rel_err(g.weight[l - 1], num) < 1e-6);
    }
  }

  TEST_CASE("linear network bp equals the explicit product of transposes") {
    Network n = make_net(2, 2, 3, 2, 6, net::Activation::identity);
    for (auto& layer : n.layers()) layer.bias.setZero();
    Rng rng(1);
    const Eigen::MatrixXd x = testutil::random_matrix(2, 4, rng);
    const auto cache = net::forward(n, x);
    const Eigen::MatrixXd e = testutil::random_matrix(2, 1, rng);
    const auto g = bp_grads(n, cache, e);
    // Lengths 4 -> 2 -> 1, then a kernel-1 head.
    const Eigen::MatrixXd w2 = n.layer(2).weight, w3 = n.layer(3).weight;
    const Eigen::VectorXd d2 = w3.transpose() * e;
    const Eigen::VectorXd d1 = w2.transpose() * d2;  // taps 0, 1 = layer-1 positions 0, 1
    Eigen::MatrixXd expect = Eigen::MatrixXd::Zero(3, 4);
    for (int p = 0; p < 2; ++p) {
      Eigen::VectorXd z0(4);
      z0 << x.col(2 * p), x.col(2 * p + 1);
      expect += d1.segment(3 * p, 3) * z0.transpose();
    }
    CHECK(max_abs_diff(g.weight[0], expect) < 1e-13);
  }

  TEST_CASE("feedback alignment") {
    Network n = make_net(3, 3, 5, 3, 7);
    Rng rng(8);
    const auto b = random_batch(3, 8, 4, 3, rng);
    const auto cache = net::forward(n, b.x);
    const auto e = net::cross_entropy(cache.output(), b.y).error;
    CHECK(grads_diff(fa_grads(n, cache, e, freeze_transpose(n, RuleKind::fa)), bp_grads(n, cache, e)) < 1e-10);

    const auto fb = random_feedback(n, RuleKind::fa, rng);
    std::vector<Eigen::MatrixXd> B = fb.feedback;
    CHECK(grads_diff(fa_grads(n, cache, e, fb), ref::rule_grads(n, b.x, e, ref::Rule::fa, B)) < 1e-12);

    FeedbackConfig zero = fb;
    for (auto& m : zero.feedback) m.setZero();
    const auto gz = fa_grads(n, cache, e, zero);
    for (int l = 1; l < n.num_layers(); ++l) CHECK(gz.weight[l - 1].cwiseAbs().maxCoeff() == 0.0);
    CHECK(gz.weight.back().cwiseAbs().maxCoeff() > 0.0);
  }

  TEST_CASE("direct feedback") {
    Network n = make_net(3, 3, 4, 3, 9);
    Rng rng(10);
    const auto b = random_batch(3, 8, 4, 3, rng);
    const auto cache = net::forward(n, b.x);
    const auto e = net::cross_entropy(cache.output(), b.y).error;
    const auto fb = random_feedback(n, RuleKind::dfa, rng);
    CHECK(grads_diff(dfa_grads(n, cache, e, fb), ref::rule_grads(n, b.x, e, ref::Rule::dfa, fb.feedback)) < 1e-12);

    // Last hidden layer: only its own mask exists, so DFA with W^T is exact there.
    const auto fbt = freeze_transpose(n, RuleKind::dfa);
    const auto gd = dfa_grads(n, cache, e, fbt);
    const auto gb = bp_grads(n, cache, e);
    for (int l = n.num_layers() - 1; l <= n.num_layers(); ++l) CHECK(max_abs_diff(gd.weight[l - 1], gb.weight[l - 1]) < 1e-12);

    Network lin = make_net(3, 3, 4, 3, 11, net::Activation::identity);
    const auto lc = net::forward(lin, b.x);
    const auto le = net::cross_entropy(lc.output(), b.y).error;
    const auto lfb = random_feedback(lin, RuleKind::dfa, rng);
    FeedbackConfig as_fa = lfb;
    as_fa.kind = RuleKind::fa;
    CHECK(grads_diff(dfa_grads(lin, lc, le, lfb), fa_grads(lin, lc, le, as_fa)) < 1e-12);
  }

  TEST_CASE("dead units block feedback alignment but not direct feedback") {
    Network n = make_net(3, 3, 4, 3, 12);
    n.layer(2).bias.setConstant(-100.0);  // every layer-2 unit is dead
    Rng rng(13);
    const auto b = random_batch(3, 8, 3, 3, rng);
    const auto cache = net::forward(n, b.x);
    const auto e = net::cross_entropy(cache.output(), b.y).error;
    auto fb = random_feedback(n, RuleKind::dfa, rng);
    const auto gd = dfa_grads(n, cache, e, fb);
    fb.kind = RuleKind::fa;
    const auto gf = fa_grads(n, cache, e, fb);
    CHECK(gf.weight[0].cwiseAbs().maxCoeff() == 0.0);
    CHECK(gd.weight[0].cwiseAbs().maxCoeff() > 1e-6);
  }

  TEST_CASE("batch-mean masks") {
    Network n = make_net(3, 3, 4, 3, 14);
    Rng rng(15);
    const auto fb = random_feedback(n, RuleKind::batch_mean, rng);
    FeedbackConfig as_fa = fb;
    as_fa.kind = RuleKind::fa;

    const auto one = random_batch(3, 8, 1, 3, rng);
    const auto c1 = net::forward(n, one.x);
    const auto e1 = net::cross_entropy(c1.output(), one.y).error;
    CHECK(grads_diff(batchmean_grads(n, c1, e1, fb), fa_grads(n, c1, e1, as_fa)) < 1e-14);

    // Identical inputs give identical masks.
    Eigen::MatrixXd twin(3, 16);
    twin << one.x, one.x;
    const auto ct = net::forward(n, twin);
    const Eigen::MatrixXd et = testutil::random_matrix(3, 2, rng);
    CHECK(grads_diff(batchmean_grads(n, ct, et, fb), fa_grads(n, ct, et, as_fa)) < 1e-13);

    // Mixed masks: compare against the loop evaluation.
    const auto two = random_batch(3, 8, 2, 3, rng);
    const auto c2 = net::forward(n, two.x);
    const auto e2 = net::cross_entropy(c2.output(), two.y).error;
    CHECK(grads_diff(batchmean_grads(n, c2, e2, fb), ref::rule_grads(n, two.x, e2, ref::Rule::batch_mean, fb.feedback)) < 1e-12);
    CHECK(grads_diff(batchmean_grads(n, c2, e2, fb), fa_grads(n, c2, e2, as_fa)) > 1e-8);
  }

  TEST_CASE("linear gradient approximation") {
    Network lin = make_net(3, 3, 4, 3, 16, net::Activation::identity);
    Rng rng(17);
    const auto b = random_batch(3, 8, 40, 3, rng);
    const auto cache = net::forward(lin, b.x);
    // Generic errors; cross-entropy errors sum to zero over classes, which
    // leaves the map undetermined along the all-ones direction.
    const Eigen::MatrixXd e = testutil::random_matrix(3, 40, rng);
    const auto exact = direct_products(lin, freeze_transpose(lin, RuleKind::fa).feedback);
    FeedbackConfig fb;
    fb.kind = RuleKind::lga;
    fb.feedback.resize(4);
    fb.direct.resize(3);
    for (int l = 1; l <= 3; ++l) {
      const auto fit = fit_lga(lin, cache, e, l, 0.0);
      CHECK(max_abs_diff(fit.map, exact[l - 1]) < 1e-8);
      CHECK(fit.residual < 1e-18);
      fb.direct[l - 1] = fit.map;
    }
    CHECK(grads_diff(lga_grads(lin, cache, e, fb), bp_grads(lin, cache, e)) < 1e-10);

    // lga and dfa apply the same formula to the same direct maps.
    FeedbackConfig as_dfa = fb;
    as_dfa.kind = RuleKind::dfa;
    Network relu = make_net(3, 3, 4, 3, 18);
    const auto rc = net::forward(relu, b.x);
    const auto re = net::cross_entropy(rc.output(), b.y).error;
    const auto rfb = random_feedback(relu, RuleKind::lga, rng);
    FeedbackConfig rdfa = rfb;
    rdfa.kind = RuleKind::dfa;
    CHECK(grads_diff(lga_grads(relu, rc, re, rfb), dfa_grads(relu, rc, re, rdfa)) == 0.0);

    const Eigen::MatrixXd ez = Eigen::MatrixXd::Zero(3, 40);
    const auto gz = lga_grads(relu, rc, ez, rfb);
    for (const auto& w : gz.weight) CHECK(w.cwiseAbs().maxCoeff() == 0.0);

    // One sample: exact rank-one fit.
    const auto s1 = random_batch(3, 8, 1, 3, rng);
    const auto c1 = net::forward(relu, s1.x);
    const auto e1 = net::cross_entropy(c1.output(), s1.y).error;
    CHECK(fit_lga(relu, c1, e1, 2, 1e-12).residual < 1e-12);
    // Large ridge shrinks the map towards zero.
    CHECK(fit_lga(relu, rc, re, 2, 1e12).map.cwiseAbs().maxCoeff() < 1e-9);
    // Too few samples, or zero-sum errors, leave sum e e^T singular.
    CHECK_THROWS_AS(fit_lga(relu, c1, e1, 2, 0.0), ParameterError);
    CHECK_THROWS_AS(fit_lga(relu, rc, re, 2, 0.0), ParameterError);
  }

  TEST_CASE("feedback checksum") {
    Network n = make_net(2, 3, 4, 3, 19);
    const auto fb = freeze_transpose(n, RuleKind::fa);
    const auto h = feedback_checksum(fb);
    CHECK(feedback_checksum(freeze_transpose(n, RuleKind::fa)) == h);
    auto changed = fb;
    changed.feedback[1](0, 0) += 1e-12;
    CHECK(feedback_checksum(changed) != h);
  }

  TEST_CASE("first continuation step of frozen-transpose FA equals a BP step") {
    Network n = make_net(2, 3, 4, 3, 20);
    Rng rng(21);
    const auto b = random_batch(3, 4, 8, 3, rng);
    SupervisedConfig sc;
    SupervisedTrainer bp(n, sc, 5), fa(n, sc, 5);
    fa.set_feedback(freeze_transpose(n, RuleKind::fa));
    bp.step(b.x, b.y);
    fa.step(b.x, b.y);
    for (int l = 1; l <= n.num_layers(); ++l) {
      CHECK(max_abs_diff(bp.network().layer(l).weight, fa.network().layer(l).weight) < 1e-12);
    }
  }

  TEST_CASE("trainer checkpoint resumes identically") {
    Network n = make_net(2, 3, 4, 3, 22);
    Rng rng(23);
    const auto b = random_batch(3, 4, 64, 3, rng);
    SupervisedTrainer a(n, SupervisedConfig{}, 9);
    a.run_epoch(b.x, b.y);
    Checkpoint ck;
    a.save(ck);
    auto c = SupervisedTrainer::load(ck);
    const auto sa = a.run_epoch(b.x, b.y);
    const auto sc = c.run_epoch(b.x, b.y);
    CHECK(sa.mean_loss == sc.mean_loss);
    CHECK(a.network().layer(1).weight == c.network().layer(1).weight);
  }

  TEST_CASE("masking protocol freezes feedback and logs both phases") {
    rhm::RhmParams p;
    p.L = 2;
    p.v = p.m = p.n_c = 3;
    p.seed = 4;
    auto rb = std::make_shared<const rhm::RuleBook>(rhm::build_rulebook(p));
    Rng rng(1);
    const auto data = rhm::sample_training_set(rb, 60, rng);
    NetworkConfig nc;
    nc.input_channels = 3;
    nc.input_length = 4;
    nc.depth = 2;
    nc.width = 9;
    nc.head_classes = 3;
    MaskingConfig mc;
    mc.continue_epochs = 3;
    const auto pre = pretrain(data, nc, mc, 3);
    CHECK(pre.t_stop > 0);
    for (auto kind : all_rules()) {
      const auto r = continue_training(pre, data, mc, kind);
      CHECK(r.checksum_at_freeze == r.checksum_final);
      CHECK(r.t_stop == pre.t_stop);
      CHECK(r.log.back().phase == "continue");
      CHECK(r.log.back().rule == to_string(kind));
    }
    const auto csv = training_log_csv(continue_training(pre, data, mc, RuleKind::fa).log);
    CHECK(csv.rfind("epoch,phase,rule,train_loss,train_acc_window,test_acc\n", 0) == 0);
    const auto again = run_masking_protocol(data, nc, mc, RuleKind::fa, 3);
    CHECK(training_log_csv(again.log) == csv);
  }
}
