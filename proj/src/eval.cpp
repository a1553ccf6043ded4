#include "rhmlab/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include "rhmlab/errors.hpp"

namespace rhmlab::eval {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"stop_loss", c.stop_loss},
                     {"max_epochs", c.max_epochs},
                     {"batch_size", c.batch_size},
                     {"window", c.window}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  c = ProbeConfig{};
  c.lr = j.value("lr", c.lr);
  c.stop_loss = j.value("stop_loss", c.stop_loss);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.window = j.value("window", c.window);
  if (c.lr <= 0 || c.max_epochs < 1 || c.batch_size < 1) throw ConfigError("probe: invalid settings");
}

MatrixXd LinearProbe::logits(const MatrixXd& reps) const {
  MatrixXd out = weight * reps;
  out.colwise() += bias;
  return out;
}

ProbeResult train_linear_probe(const MatrixXd& reps, std::span<const int> labels, int classes,
                               const ProbeConfig& config, std::uint64_t seed) {
  const auto P = static_cast<std::size_t>(reps.cols());
  if (labels.size() != P) throw ShapeError("probe: label count does not match representations");
  if (P == 0 || std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels[0]; })) {
    throw ParameterError("probe: training set has a single class");
  }

  ProbeResult result;
  LinearProbe& probe = result.probe;
  probe.weight = MatrixXd::Zero(classes, reps.rows());
  probe.bias = VectorXd::Zero(classes);
  net::AdamState adam;
  adam.lr = config.lr;
  Rng rng(seed);
  std::deque<double> window;
  MatrixXd gw(classes, reps.rows());
  VectorXd gb(classes);
  std::vector<int> batch_labels;

  for (int epoch = 1; epoch <= config.max_epochs && !result.converged; ++epoch) {
    const auto order = rng.permutation(P);
    double sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < P; start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, P - start);
      MatrixXd x(reps.rows(), static_cast<Eigen::Index>(count));
      batch_labels.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        x.col(static_cast<Eigen::Index>(i)) = reps.col(static_cast<Eigen::Index>(order[start + i]));
        batch_labels[i] = labels[order[start + i]];
      }
      const auto ce = net::cross_entropy(probe.logits(x), batch_labels);
      gw.noalias() = ce.error * x.transpose();
      gb = ce.error.rowwise().sum();
      net::adam_step(adam, {std::span<double>(probe.weight.data(), probe.weight.size()),
                            std::span<double>(probe.bias.data(), probe.bias.size())},
                     {std::span<const double>(gw.data(), gw.size()),
                      std::span<const double>(gb.data(), gb.size())});
      sum += ce.loss;
      ++steps;
      window.push_back(ce.loss);
      if (window.size() > config.window) window.pop_front();
      if (window.size() == config.window &&
          std::accumulate(window.begin(), window.end(), 0.0) / static_cast<double>(window.size()) <
              config.stop_loss) {
        result.converged = true;
        break;
      }
    }
    result.epochs = epoch;
    result.epoch_loss.push_back(sum / static_cast<double>(steps));
  }
  result.window_loss = window.empty() ? 0.0
                                      : std::accumulate(window.begin(), window.end(), 0.0) /
                                            static_cast<double>(window.size());
  return result;
}

double test_error(const LinearProbe& probe, const MatrixXd& reps, std::span<const int> labels) {
  if (labels.empty()) throw ParameterError("test_error: empty evaluation set");
  if (static_cast<Eigen::Index>(labels.size()) != reps.cols()) throw ShapeError("test_error: label count");
  return 1.0 - net::accuracy(probe.logits(reps), labels);
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> sweep_grid(const rhm::RhmParams& params, const std::vector<double>& multipliers,
                                    double max_fraction) {
  const double d_star = static_cast<double>(params.d_star());
  const auto cap = static_cast<std::size_t>(std::floor(max_fraction * static_cast<double>(params.p_max())));
  std::vector<std::size_t> out;
  for (double m : multipliers) {
    if (m <= 0) throw ConfigError("sweep: multipliers must be positive");
    out.push_back(std::min(static_cast<std::size_t>(std::llround(m * d_star)), cap));
  }
  return out;
}

SweepResult pstar_sweep(const rhm::RhmParams& params, const std::vector<double>& multipliers,
                        const std::vector<std::uint64_t>& seeds, const SweepJob& job, int threads,
                        double max_fraction) {
  if (seeds.empty()) throw ConfigError("sweep: at least one seed is required");
  SweepResult r;
  r.params = params;
  r.d_star = params.d_star();
  r.p_max = params.p_max();
  r.random_error = 1.0 - 1.0 / static_cast<double>(params.n_c);
  r.threshold = 0.1 * r.random_error;
  r.multipliers = multipliers;
  r.p_values = sweep_grid(params, multipliers, max_fraction);

  // Distinct (P, seed) jobs in first-seen order.
  std::map<std::pair<std::size_t, std::uint64_t>, std::size_t> index;
  std::vector<std::pair<std::size_t, std::uint64_t>> jobs;
  for (std::size_t P : r.p_values) {
    for (auto s : seeds) {
      if (index.emplace(std::make_pair(P, s), jobs.size()).second) jobs.emplace_back(P, s);
    }
  }
  std::vector<SweepJobResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        results[i] = job(jobs[i].first, jobs[i].second);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t m = 0; m < multipliers.size(); ++m) {
    double sum = 0.0;
    for (auto s : seeds) {
      const auto& res = results[index.at({r.p_values[m], s})];
      r.rows.push_back({multipliers[m], r.p_values[m], s, res.test_error, res.probe_converged});
      sum += res.test_error;
    }
    r.mean_error.push_back(sum / static_cast<double>(seeds.size()));
  }
  for (std::size_t m = 0; m < multipliers.size(); ++m) {
    if (r.mean_error[m] <= r.threshold && (!r.p_star || r.p_values[m] < *r.p_star)) r.p_star = r.p_values[m];
  }
  return r;
}

std::string sweep_csv(const SweepResult& r) {
  std::string out = "L,v,m,n_c,multiplier,P,seed,test_error,probe_converged\n";
  char buf[256];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%d,%d,%g,%zu,%llu,%.10g,%d\n", r.params.L, r.params.v,
                  r.params.m, r.params.n_c, row.multiplier, row.P,
                  static_cast<unsigned long long>(row.seed), row.test_error, row.probe_converged ? 1 : 0);
    out += buf;
  }
  return out;
}

nlohmann::json sweep_summary(const SweepResult& r) {
  nlohmann::json j;
  j["params"] = r.params;
  j["d_star"] = r.d_star;
  j["p_max"] = r.p_max;
  j["random_error"] = r.random_error;
  j["threshold"] = r.threshold;
  j["multipliers"] = r.multipliers;
  j["p_values"] = r.p_values;
  j["mean_error"] = r.mean_error;
  j["p_star"] = r.p_star ? nlohmann::json(*r.p_star) : nlohmann::json("not_reached");
  return j;
}

// ---------------------------------------------------------------------------

RepresentationFn network_representations(const net::Network& net, const LinearProbe* probe) {
  return [&net, probe](const MatrixXd& inputs) {
    const net::ForwardCache cache = net::forward(net, inputs);
    std::vector<MatrixXd> reps;
    for (int k = 1; k <= net.depth(); ++k) reps.push_back(net::flatten_layer_representation(cache, k));
    if (probe) reps.push_back(probe->logits(reps.back()));
    return reps;
  };
}

std::vector<double> sensitivity(const RepresentationFn& fn, const rhm::RuleBook& rb, int level,
                                std::size_t n_pairs, Rng& rng) {
  const int L = rb.params.L;
  if (level < 1 || level > L) throw ParameterError("sensitivity: level must be in 1..L");
  if (n_pairs == 0) throw ParameterError("sensitivity: n_pairs must be positive");
  const int v = rb.params.v;

  std::vector<rhm::Derivation> syn_a, syn_b, rnd_a, rnd_b;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    auto [a, b] = rhm::sample_synonym_pair(rb, level, rng);
    syn_a.push_back(std::move(a));
    syn_b.push_back(std::move(b));
  }
  for (std::size_t i = 0; i < n_pairs; ++i) {
    // Uniform object and uniform rule choices give a uniform codeword.
    rnd_a.push_back(rhm::encode(rb, static_cast<int>(rng.below(static_cast<std::size_t>(rb.params.n_c))), rng));
    rnd_b.push_back(rhm::encode(rb, static_cast<int>(rng.below(static_cast<std::size_t>(rb.params.n_c))), rng));
  }

  auto mean_sq = [&](const std::vector<rhm::Derivation>& a, const std::vector<rhm::Derivation>& b) {
    const auto ra = fn(rhm::encode_inputs(a, v));
    const auto rb_ = fn(rhm::encode_inputs(b, v));
    std::vector<double> out;
    for (std::size_t k = 0; k < ra.size(); ++k) {
      out.push_back((ra[k] - rb_[k]).colwise().squaredNorm().mean());
    }
    return out;
  };
  const auto num = mean_sq(syn_a, syn_b);
  const auto den = mean_sq(rnd_a, rnd_b);
  std::vector<double> S(num.size());
  for (std::size_t k = 0; k < num.size(); ++k) {
    S[k] = den[k] > 0.0 ? num[k] / den[k] : std::numeric_limits<double>::quiet_NaN();
  }
  return S;
}

SensitivityReport sensitivity_report(const RepresentationFn& fn, const rhm::RuleBook& rb,
                                     std::vector<std::string> row_names, std::size_t n_pairs, Rng& rng) {
  SensitivityReport r;
  r.levels = rb.params.L;
  r.n_pairs = n_pairs;
  r.row_names = std::move(row_names);
  r.S.assign(r.row_names.size(), std::vector<double>(static_cast<std::size_t>(r.levels), 0.0));
  r.degenerate.assign(r.row_names.size(), std::vector<char>(static_cast<std::size_t>(r.levels), 0));
  for (int l = 1; l <= r.levels; ++l) {
    const auto col = sensitivity(fn, rb, l, n_pairs, rng);
    if (col.size() != r.row_names.size()) throw ShapeError("sensitivity: row names do not match representations");
    for (std::size_t k = 0; k < col.size(); ++k) {
      r.S[k][static_cast<std::size_t>(l - 1)] = col[k];
      r.degenerate[k][static_cast<std::size_t>(l - 1)] = std::isnan(col[k]) ? 1 : 0;
    }
  }
  return r;
}

std::string sensitivity_csv(const SensitivityReport& r) {
  std::string out = "layer,level,S,n_pairs\n";
  char buf[128];
  for (std::size_t k = 0; k < r.row_names.size(); ++k) {
    for (int l = 1; l <= r.levels; ++l) {
      const auto li = static_cast<std::size_t>(l - 1);
      if (r.degenerate[k][li]) {
        std::snprintf(buf, sizeof(buf), "%s,%d,degenerate,%zu\n", r.row_names[k].c_str(), l, r.n_pairs);
      } else {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%zu\n", r.row_names[k].c_str(), l, r.S[k][li], r.n_pairs);
      }
      out += buf;
    }
  }
  return out;
}

nlohmann::json sensitivity_summary(const SensitivityReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t k = 0; k < r.row_names.size(); ++k) {
    nlohmann::json vals = nlohmann::json::array();
    for (std::size_t l = 0; l < r.S[k].size(); ++l) {
      vals.push_back(r.degenerate[k][l] ? nlohmann::json("degenerate") : nlohmann::json(r.S[k][l]));
    }
    rows.push_back({{"layer", r.row_names[k]}, {"S", std::move(vals)}});
  }
  return {{"levels", r.levels}, {"n_pairs", r.n_pairs}, {"rows", std::move(rows)}};
}

}  // namespace rhmlab::eval
