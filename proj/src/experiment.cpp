#include "rhmlab/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "rhmlab/errors.hpp"

namespace rhmlab::exp {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using nlohmann::json;

namespace {

bool is_masking_rule(const std::string& r) {
  return r == "input_specific" || r == "no_mask" || r == "batch_mean" || r == "lga" || r == "fa" ||
         r == "dfa";
}

bool is_ssl_rule(const std::string& r) { return r == "clapp" || r == "lpl" || r == "simclr"; }

std::string family_name(AlgorithmFamily f) {
  switch (f) {
    case AlgorithmFamily::supervised: return "supervised";
    case AlgorithmFamily::masking: return "masking";
    case AlgorithmFamily::ssl: return "ssl";
    case AlgorithmFamily::ica: return "ica";
  }
  return "supervised";
}

AlgorithmFamily family_from_name(const std::string& s) {
  if (s == "supervised") return AlgorithmFamily::supervised;
  if (s == "masking") return AlgorithmFamily::masking;
  if (s == "ssl") return AlgorithmFamily::ssl;
  if (s == "ica") return AlgorithmFamily::ica;
  throw std::runtime_error("checkpoint: unknown model family '" + s + "'");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json log_rows_to_json(const std::vector<rules::TrainLogRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({r.epoch, r.phase, r.rule, r.train_loss, r.train_acc_window, r.test_acc});
  }
  return out;
}

std::vector<rules::TrainLogRow> log_rows_from_json(const json& j) {
  std::vector<rules::TrainLogRow> rows;
  for (const auto& r : j) {
    rows.push_back({r.at(0).get<int>(), r.at(1).get<std::string>(), r.at(2).get<std::string>(),
                    r.at(3).get<double>(), r.at(4).get<double>(), r.at(5).get<double>()});
  }
  return rows;
}

}  // namespace

// ---------------------------------------------------------------------------

AlgorithmFamily ExperimentConfig::family() const {
  if (rule == "bp") return AlgorithmFamily::supervised;
  if (is_masking_rule(rule)) return AlgorithmFamily::masking;
  if (is_ssl_rule(rule)) return AlgorithmFamily::ssl;
  if (rule == "ica") return AlgorithmFamily::ica;
  throw ConfigError("unknown rule '" + rule + "'");
}

std::size_t ExperimentConfig::train_size() const {
  return P > 0 ? P : static_cast<std::size_t>(4 * rhm.d_star());
}

net::NetworkConfig ExperimentConfig::network_config() const {
  net::NetworkConfig nc;
  nc.input_channels = rhm.v;
  nc.input_length = rhm.length();
  nc.depth = network_depth();
  nc.width = width();
  nc.bias = bias;
  nc.activation = net::Activation::relu;
  const auto f = family();
  nc.head_classes = (f == AlgorithmFamily::supervised || f == AlgorithmFamily::masking) ? rhm.n_c : 0;
  return nc;
}

std::vector<int> ExperimentConfig::ica_layer_widths() const {
  const int w0 = ica_w0 > 0 ? ica_w0 : width();
  if (ica_widths == "increasing") return ica::increasing_widths(network_depth(), w0);
  return ica::constant_widths(network_depth(), w0);
}

int ExperimentConfig::epoch_budget() const {
  if (epochs > 0) return epochs;
  return family() == AlgorithmFamily::ssl ? ssl.max_epochs : 50;
}

void ExperimentConfig::validate() const {
  rhm.validate();
  (void)family();
  if (network_depth() > rhm.L) throw ConfigError("network depth exceeds L");
  if (c_h < 1) throw ConfigError("c_h must be positive");
  if (train_size() < 2) throw ConfigError("training set needs at least two samples");
  if (static_cast<std::uint64_t>(train_size()) >= rhm.p_max()) {
    throw ConfigError("training set size must be below P_max = " + std::to_string(rhm.p_max()));
  }
  if (ica_widths != "constant" && ica_widths != "increasing") {
    throw ConfigError("ica widths must be 'constant' or 'increasing'");
  }
  if (threads < 1) throw ConfigError("threads must be positive");
  if (max_fraction <= 0.0 || max_fraction >= 1.0) throw ConfigError("max_fraction must be in (0, 1)");
  if (n_pairs < 1) throw ConfigError("n_pairs must be positive");
  if (supervised.batch_size < 1 || supervised.lr <= 0) throw ConfigError("invalid supervised optimizer");
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{
      {"name", c.name},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"rhm", {{"L", c.rhm.L}, {"v", c.rhm.v}, {"m", c.rhm.m}, {"n_c", c.rhm.n_c}}},
      {"data", {{"P", c.P}, {"holdout", c.holdout}}},
      {"network", {{"depth", c.depth}, {"c_h", c.c_h}, {"bias", c.bias}}},
      {"algorithm",
       {{"rule", c.rule},
        {"ssl", c.ssl},
        {"masking",
         {{"threshold", c.masking.threshold},
          {"max_pretrain_epochs", c.masking.max_pretrain_epochs},
          {"continue_epochs", c.masking.continue_epochs},
          {"ridge", c.masking.ridge}}},
        {"ica", {{"widths", c.ica_widths}, {"w0", c.ica_w0}}}}},
      {"training",
       {{"epochs", c.epochs},
        {"batch_size", c.supervised.batch_size},
        {"lr", c.supervised.lr},
        {"window", c.supervised.window},
        {"checkpoint_every", c.checkpoint_every}}},
      {"evaluation",
       {{"probe", c.probe},
        {"sweep",
         {{"multipliers", c.multipliers},
          {"seeds", c.sweep_seeds},
          {"max_fraction", c.max_fraction},
          {"threads", c.threads}}},
        {"sensitivity", {{"n_pairs", c.n_pairs}}}}}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  try {
    c.name = j.value("name", c.name);
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    const auto& r = j.at("rhm");
    r.at("L").get_to(c.rhm.L);
    r.at("v").get_to(c.rhm.v);
    c.rhm.m = r.value("m", c.rhm.v);
    c.rhm.n_c = r.value("n_c", c.rhm.v);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.P = d.value("P", c.P);
      c.holdout = d.value("holdout", c.holdout);
    }
    if (j.contains("network")) {
      const auto& n = j.at("network");
      c.depth = n.value("depth", c.depth);
      c.c_h = n.value("c_h", c.c_h);
      c.bias = n.value("bias", c.bias);
    }
    if (j.contains("algorithm")) {
      const auto& a = j.at("algorithm");
      c.rule = a.value("rule", c.rule);
      if (is_ssl_rule(c.rule)) {
        json s = a.value("ssl", json::object());
        s["kind"] = c.rule;
        c.ssl = s.get<ssl::SslConfig>();
      } else if (a.contains("ssl")) {
        c.ssl = a.at("ssl").get<ssl::SslConfig>();
      }
      if (a.contains("masking")) {
        const auto& m = a.at("masking");
        c.masking.threshold = m.value("threshold", c.masking.threshold);
        c.masking.max_pretrain_epochs = m.value("max_pretrain_epochs", c.masking.max_pretrain_epochs);
        c.masking.continue_epochs = m.value("continue_epochs", c.masking.continue_epochs);
        c.masking.ridge = m.value("ridge", c.masking.ridge);
      }
      if (a.contains("ica")) {
        c.ica_widths = a.at("ica").value("widths", c.ica_widths);
        c.ica_w0 = a.at("ica").value("w0", c.ica_w0);
      }
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      c.epochs = t.value("epochs", c.epochs);
      c.supervised.batch_size = t.value("batch_size", c.supervised.batch_size);
      c.supervised.lr = t.value("lr", c.supervised.lr);
      c.supervised.window = t.value("window", c.supervised.window);
      c.checkpoint_every = t.value("checkpoint_every", c.checkpoint_every);
    }
    c.masking.optimizer = c.supervised;
    if (j.contains("evaluation")) {
      const auto& e = j.at("evaluation");
      if (e.contains("probe")) c.probe = e.at("probe").get<eval::ProbeConfig>();
      if (e.contains("sweep")) {
        const auto& s = e.at("sweep");
        c.multipliers = s.value("multipliers", c.multipliers);
        c.sweep_seeds = s.value("seeds", c.sweep_seeds);
        c.max_fraction = s.value("max_fraction", c.max_fraction);
        c.threads = s.value("threads", c.threads);
      }
      if (e.contains("sensitivity")) c.n_pairs = e.at("sensitivity").value("n_pairs", c.n_pairs);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return j.get<ExperimentConfig>();
}

std::string canonical_config(const ExperimentConfig& c) { return json(c).dump(); }

std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canonical_config(c)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

rhm::Dataset make_dataset(const ExperimentConfig& c, std::size_t P, std::uint64_t master) {
  rhm::RhmParams params = c.rhm;
  params.seed = derive_seed(master, kRulebookStream);
  auto rb = std::make_shared<const rhm::RuleBook>(rhm::build_rulebook(params));
  Rng rng = Rng::stream(master, kDataStream);
  return rhm::sample_training_set(rb, P, rng, c.holdout);
}

// ---------------------------------------------------------------------------

MatrixXd Model::representation(const MatrixXd& inputs, int k) const {
  if (network) return net::representation(*network, inputs, k);
  if (ica) return ica::ica_forward(*ica, inputs, k);
  throw std::runtime_error("model has no trained network");
}

int Model::depth() const {
  if (network) return network->depth();
  if (ica) return ica->depth();
  return 0;
}

namespace {

Checkpoint run_checkpoint(const ExperimentConfig& c, AlgorithmFamily f, int epoch) {
  Checkpoint ck;
  ck.put_text("run/config", canonical_config(c));
  ck.put_text("run/family", family_name(f));
  ck.put_text("run/rule", c.rule);
  ck.put_int("run/epoch", epoch);
  return ck;
}

void check_resume(const Checkpoint& ck, const ExperimentConfig& c) {
  if (ck.text("run/rule") != c.rule) {
    throw ConfigError("resume: checkpoint was trained with rule '" + ck.text("run/rule") + "'");
  }
}

Model train_supervised(const ExperimentConfig& c, const rhm::Dataset& data, std::uint64_t master,
                       const TrainHooks& hooks) {
  Model model;
  model.family = AlgorithmFamily::supervised;
  const int v = c.rhm.v;
  const MatrixXd train_x = rhm::encode_inputs(data.samples, v);
  const MatrixXd test_x = rhm::encode_inputs(data.holdout, v);
  const auto train_y = data.labels();
  const auto test_y = data.holdout_labels();

  std::optional<rules::SupervisedTrainer> trainer;
  int epoch = 0;
  if (hooks.resume) {
    check_resume(*hooks.resume, c);
    trainer.emplace(rules::SupervisedTrainer::load(*hooks.resume));
    epoch = static_cast<int>(hooks.resume->integer("run/epoch"));
    model.train_log = log_rows_from_json(json::parse(hooks.resume->text("run/log")));
  } else {
    net::Network net(c.network_config());
    Rng init = Rng::stream(master, kInitStream);
    net::init_weights(net, init);
    trainer.emplace(std::move(net), c.supervised, derive_seed(master, kTrainerStream));
  }

  auto emit = [&] {
    if (!hooks.on_checkpoint) return;
    Checkpoint ck = run_checkpoint(c, model.family, epoch);
    trainer->save(ck);
    ck.put_text("run/log", log_rows_to_json(model.train_log).dump());
    hooks.on_checkpoint(ck);
  };

  const int budget = c.epoch_budget();
  while (epoch < budget) {
    const auto stats = trainer->run_epoch(train_x, train_y);
    ++epoch;
    const double test_acc = test_y.empty() ? 0.0 : rules::evaluate_accuracy(trainer->network(), test_x, test_y);
    model.train_log.push_back({epoch, "train", "bp", stats.mean_loss, stats.window_accuracy, test_acc});
    if (hooks.every > 0 && epoch % hooks.every == 0 && epoch < budget) emit();
  }
  emit();
  model.epochs = epoch;
  model.network = trainer->network();
  return model;
}

Model train_masking(const ExperimentConfig& c, const rhm::Dataset& data, std::uint64_t master,
                    const TrainHooks& hooks) {
  if (hooks.resume) throw ConfigError("resume is supported for bp and self-supervised rules only");
  Model model;
  model.family = AlgorithmFamily::masking;
  rules::MaskingConfig mc = c.masking;
  mc.optimizer = c.supervised;
  auto res = rules::run_masking_protocol(data, c.network_config(), mc, rules::rule_from_string(c.rule), master);
  if (res.checksum_at_freeze != res.checksum_final) {
    model.warnings.push_back("feedback matrices changed during the continuation phase");
  }
  model.train_log = std::move(res.log);
  model.epochs = model.train_log.empty() ? 0 : model.train_log.back().epoch;
  model.network = std::move(res.network);
  if (hooks.on_checkpoint) {
    Checkpoint ck = run_checkpoint(c, model.family, model.epochs);
    net::save_network(ck, "net", *model.network);
    ck.put_text("run/log", log_rows_to_json(model.train_log).dump());
    ck.put_int("run/t_stop", res.t_stop);
    hooks.on_checkpoint(ck);
  }
  return model;
}

Model train_ssl(const ExperimentConfig& c, const rhm::Dataset& data, std::uint64_t master,
                const TrainHooks& hooks) {
  Model model;
  model.family = AlgorithmFamily::ssl;
  std::optional<ssl::SslTrainer> trainer;
  if (hooks.resume) {
    check_resume(*hooks.resume, c);
    trainer.emplace(ssl::SslTrainer::load(*hooks.resume));
  } else {
    net::Network net(c.network_config());
    Rng init = Rng::stream(master, kInitStream);
    net::init_weights(net, init);
    trainer.emplace(std::move(net), c.ssl, derive_seed(master, kTrainerStream));
  }
  auto emit = [&] {
    if (!hooks.on_checkpoint) return;
    Checkpoint ck = run_checkpoint(c, model.family, trainer->epoch());
    trainer->save(ck);
    hooks.on_checkpoint(ck);
  };
  const int budget = c.epoch_budget();
  while (trainer->epoch() < budget && !trainer->stopped()) {
    trainer->run_epoch(data);
    if (hooks.every > 0 && trainer->epoch() % hooks.every == 0 && trainer->epoch() < budget) emit();
  }
  emit();
  if (!trainer->stopped() && c.ssl.early_stop && c.ssl.kind != ssl::SslKind::lpl) {
    model.warnings.push_back("early-stop loss not reached within " + std::to_string(budget) + " epochs");
  }
  model.epochs = trainer->epoch();
  model.loss_log = trainer->log();
  model.network = trainer->network();
  return model;
}

Model train_ica(const ExperimentConfig& c, const rhm::Dataset& data, std::uint64_t master,
                const TrainHooks& hooks) {
  if (hooks.resume) throw ConfigError("resume is supported for bp and self-supervised rules only");
  Model model;
  model.family = AlgorithmFamily::ica;
  const MatrixXd x = rhm::encode_inputs(data.samples, c.rhm.v);
  model.ica = ica::fit_ica_net(x, c.rhm.length(), c.ica_layer_widths(), derive_seed(master, kTrainerStream));
  for (int l = 0; l < model.ica->depth(); ++l) {
    const auto& layer = model.ica->layers[static_cast<std::size_t>(l)];
    if (!layer.converged()) model.warnings.push_back("FastICA did not converge in layer " + std::to_string(l + 1));
    for (const auto& b : layer.blocks) {
      if (b.reduced) {
        model.warnings.push_back("FastICA components reduced to the data rank in layer " + std::to_string(l + 1));
        break;
      }
    }
  }
  if (hooks.on_checkpoint) {
    Checkpoint ck = run_checkpoint(c, model.family, 0);
    ica::save_ica(ck, "ica", *model.ica);
    hooks.on_checkpoint(ck);
  }
  return model;
}

}  // namespace

Model train_model(const ExperimentConfig& c, const rhm::Dataset& data, std::uint64_t master,
                  const TrainHooks& hooks) {
  switch (c.family()) {
    case AlgorithmFamily::supervised: return train_supervised(c, data, master, hooks);
    case AlgorithmFamily::masking: return train_masking(c, data, master, hooks);
    case AlgorithmFamily::ssl: return train_ssl(c, data, master, hooks);
    case AlgorithmFamily::ica: return train_ica(c, data, master, hooks);
  }
  throw std::logic_error("train_model: unhandled family");
}

Model load_model(const Checkpoint& ck) {
  Model model;
  model.family = family_from_name(ck.text("run/family"));
  model.epochs = static_cast<int>(ck.integer("run/epoch"));
  if (model.family == AlgorithmFamily::ica) {
    model.ica = ica::load_ica(ck, "ica");
    return model;
  }
  model.network = net::load_network(ck, "net");
  if (ck.has("run/log")) model.train_log = log_rows_from_json(json::parse(ck.text("run/log")));
  if (ck.has("ssl/log")) {
    for (const auto& r : json::parse(ck.text("ssl/log"))) {
      model.loss_log.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<std::vector<double>>()});
    }
  }
  return model;
}

ProbeOutcome probe_model(const ExperimentConfig& c, const Model& model, const rhm::Dataset& data,
                         std::uint64_t master) {
  const int v = c.rhm.v;
  const int k = model.depth();
  const MatrixXd train_r = model.representation(rhm::encode_inputs(data.samples, v), k);
  const MatrixXd test_r = model.representation(rhm::encode_inputs(data.holdout, v), k);
  const auto train_y = data.labels();
  const auto test_y = data.holdout_labels();
  auto res = eval::train_linear_probe(train_r, train_y, c.rhm.n_c, c.probe, derive_seed(master, kProbeStream));
  ProbeOutcome out;
  out.test_error = eval::test_error(res.probe, test_r, test_y);
  out.train_error = eval::test_error(res.probe, train_r, train_y);
  out.converged = res.converged;
  out.epochs = res.epochs;
  out.curve = std::move(res.epoch_loss);
  out.probe = std::move(res.probe);
  return out;
}

eval::SweepJobResult run_sweep_job(const ExperimentConfig& c, std::size_t P, std::uint64_t seed) {
  const rhm::Dataset data = make_dataset(c, P, seed);
  const Model model = train_model(c, data, seed);
  const ProbeOutcome p = probe_model(c, model, data, seed);
  return {p.test_error, p.converged};
}

eval::SensitivityReport model_sensitivity(const ExperimentConfig& c, const Model& model,
                                          const eval::LinearProbe* probe, const rhm::RuleBook& rb,
                                          std::uint64_t master) {
  std::vector<std::string> names;
  for (int k = 1; k <= model.depth(); ++k) names.push_back(std::to_string(k));
  if (probe) names.push_back("probe");
  const int depth = model.depth();
  eval::RepresentationFn fn = [&model, probe, depth](const MatrixXd& inputs) {
    std::vector<MatrixXd> reps;
    for (int k = 1; k <= depth; ++k) reps.push_back(model.representation(inputs, k));
    if (probe) reps.push_back(probe->logits(reps.back()));
    return reps;
  };
  Rng rng = Rng::stream(master, kSensitivityStream);
  return eval::sensitivity_report(fn, rb, std::move(names), c.n_pairs, rng);
}

std::vector<AblationResult> mask_ablation(const ExperimentConfig& c,
                                          const std::vector<rules::RuleKind>& rule_kinds) {
  rules::MaskingConfig mc = c.masking;
  mc.optimizer = c.supervised;
  net::NetworkConfig nc = c.network_config();
  nc.head_classes = c.rhm.n_c;
  std::vector<AblationResult> out;
  for (auto seed : c.sweep_seeds) {
    const rhm::Dataset data = make_dataset(c, c.train_size(), seed);
    const rules::PretrainResult pre = rules::pretrain(data, nc, mc, seed);
    AblationResult r;
    r.seed = seed;
    for (auto kind : rule_kinds) r.by_rule[rules::to_string(kind)] = rules::continue_training(pre, data, mc, kind);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << content;
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

RunManifest::RunManifest(const ExperimentConfig& c, std::string command)
    : hash_(config_hash(c)), command_(std::move(command)), config_(c) {}

void RunManifest::file(const fs::path& p) {
  files_.emplace_back(p.filename().string(), fs::exists(p) ? fs::file_size(p) : 0);
}

json RunManifest::to_json() const {
  json files = json::array();
  for (const auto& [name, size] : files_) files.push_back({{"path", name}, {"bytes", size}});
  return {{"command", command_},    {"version", kVersion}, {"config_hash", hash_},
          {"config", config_},      {"phases", phases_},   {"files", files},
          {"warnings", warnings_},  {"status", status_}};
}

void RunManifest::write(const fs::path& dir) const { write_file(dir / "manifest.json", to_json().dump(2) + "\n"); }

fs::path resolve_output_dir(const ExperimentConfig& c, const CommandOptions& o) {
  fs::path dir = o.output_dir ? fs::path(*o.output_dir) : fs::path(c.output_dir);
  if (dir.is_relative()) {
    if (const char* root = std::getenv("RHMLAB_OUTPUT_ROOT"); root && *root) dir = fs::path(root) / dir;
  }
  return dir;
}

namespace {

using Clock = std::chrono::steady_clock;

/// Shared error handling: config errors exit 2 before anything is written,
/// runtime failures exit 3 with a failed manifest when the directory exists.
template <class F>
int run_command(ExperimentConfig& c, const CommandOptions& o, const std::string& name, F&& body) {
  if (o.seed) c.seed = *o.seed;
  fs::path dir;
  std::optional<RunManifest> manifest;
  try {
    c.validate();
    dir = resolve_output_dir(c, o);
    manifest.emplace(c, name);
    body(dir, *manifest);
    manifest->set_status("completed");
    manifest->write(dir);
    if (!o.quiet) std::cout << name << ": completed, outputs in " << dir.string() << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "rhmctl " << name << ": configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "rhmctl " << name << ": " << e.what() << "\n";
    if (manifest && fs::exists(dir)) {
      manifest->set_status("failed");
      manifest->warn(e.what());
      try {
        manifest->write(dir);
      } catch (...) {
      }
    }
    return 3;
  }
}

void emit(const fs::path& path, const std::string& content, RunManifest& m) {
  write_file(path, content);
  m.file(path);
}

std::string samples_text(const rhm::RhmParams& params, const std::vector<rhm::Derivation>& samples) {
  std::ostringstream os;
  rhm::write_samples(os, params, samples);
  return os.str();
}

Model obtain_model(ExperimentConfig& c, const CommandOptions& o, const fs::path& dir,
                   const rhm::Dataset& data, RunManifest& m) {
  const fs::path ck_path = o.checkpoint ? fs::path(*o.checkpoint) : dir / "checkpoint.bin";
  if (fs::exists(ck_path)) {
    const Checkpoint ck = Checkpoint::load(ck_path);
    if (ck.text("run/rule") != c.rule) {
      throw ConfigError("checkpoint rule '" + ck.text("run/rule") + "' does not match config rule '" + c.rule + "'");
    }
    return load_model(ck);
  }
  if (!o.pipeline) {
    throw std::runtime_error("missing checkpoint " + ck_path.string() + " (run train first or pass --pipeline)");
  }
  const auto t0 = Clock::now();
  Model model = train_model(c, data, c.seed);
  m.phase("train", seconds_since(t0));
  for (const auto& w : model.warnings) m.warn(w);
  return model;
}

}  // namespace

int cmd_gen(ExperimentConfig c, const CommandOptions& o) {
  return run_command(c, o, "gen", [&](const fs::path& dir, RunManifest& m) {
    const auto t0 = Clock::now();
    const rhm::Dataset data = make_dataset(c, c.train_size(), c.seed);
    std::optional<rhm::Dataset> full;
    if (o.full_enumeration) full = rhm::enumerate_dataset(data.rulebook, std::uint64_t{1} << 24);
    m.phase("generate", seconds_since(t0));
    const auto& params = data.rulebook->params;
    emit(dir / "rulebook.json", rhm::rulebook_to_json(*data.rulebook).dump(2) + "\n", m);
    emit(dir / "train.txt", samples_text(params, data.samples), m);
    emit(dir / "holdout.txt", samples_text(params, data.holdout), m);
    if (full) emit(dir / "all.txt", samples_text(params, full->samples), m);
  });
}

int cmd_train(ExperimentConfig c, const CommandOptions& o) {
  return run_command(c, o, "train", [&](const fs::path& dir, RunManifest& m) {
    const rhm::Dataset data = make_dataset(c, c.train_size(), c.seed);
    std::optional<Checkpoint> resume;
    if (o.resume) resume = Checkpoint::load(*o.resume);
    TrainHooks hooks;
    hooks.resume = resume ? &*resume : nullptr;
    hooks.every = c.checkpoint_every;
    hooks.on_checkpoint = [&](const Checkpoint& ck) { ck.save(dir / "checkpoint.bin"); };
    const auto t0 = Clock::now();
    const Model model = train_model(c, data, c.seed, hooks);
    m.phase("train", seconds_since(t0));
    m.file(dir / "checkpoint.bin");
    for (const auto& w : model.warnings) m.warn(w);
    if (model.family == AlgorithmFamily::ssl) {
      emit(dir / "loss_log.csv", ssl::loss_log_csv(c.ssl.kind, model.loss_log), m);
    } else if (model.family != AlgorithmFamily::ica) {
      emit(dir / "train_log.csv", rules::training_log_csv(model.train_log), m);
    }
  });
}

int cmd_eval(ExperimentConfig c, const CommandOptions& o) {
  return run_command(c, o, "eval", [&](const fs::path& dir, RunManifest& m) {
    const rhm::Dataset data = make_dataset(c, c.train_size(), c.seed);
    const Model model = obtain_model(c, o, dir, data, m);
    const auto t0 = Clock::now();
    const ProbeOutcome p = probe_model(c, model, data, c.seed);
    m.phase("probe", seconds_since(t0));
    if (!p.converged) m.warn("probe did not reach the stop loss within max_epochs");
    json summary = {{"params", data.rulebook->params},
                    {"P", data.size()},
                    {"holdout", data.holdout.size()},
                    {"test_error", p.test_error},
                    {"train_error", p.train_error},
                    {"random_error", 1.0 - 1.0 / c.rhm.n_c},
                    {"probe_converged", p.converged},
                    {"probe_epochs", p.epochs}};
    if (model.network && model.network->has_head()) {
      summary["head_test_accuracy"] = rules::evaluate_accuracy(
          *model.network, rhm::encode_inputs(data.holdout, c.rhm.v), data.holdout_labels());
    }
    std::string curve = "epoch,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < p.curve.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", i + 1, p.curve[i]);
      curve += buf;
    }
    emit(dir / "probe_curve.csv", curve, m);
    emit(dir / "eval.json", summary.dump(2) + "\n", m);
  });
}

int cmd_sweep(ExperimentConfig c, const CommandOptions& o) {
  return run_command(c, o, "sweep", [&](const fs::path& dir, RunManifest& m) {
    const auto t0 = Clock::now();
    const auto result = eval::pstar_sweep(
        c.rhm, c.multipliers, c.sweep_seeds,
        [&c](std::size_t P, std::uint64_t seed) { return run_sweep_job(c, P, seed); }, c.threads,
        c.max_fraction);
    m.phase("sweep", seconds_since(t0));
    for (const auto& row : result.rows) {
      if (!row.probe_converged) {
        m.warn("probe did not converge at P=" + std::to_string(row.P) + " seed=" + std::to_string(row.seed));
      }
    }
    emit(dir / "sweep.csv", eval::sweep_csv(result), m);
    emit(dir / "sweep.json", eval::sweep_summary(result).dump(2) + "\n", m);
  });
}

int cmd_sensitivity(ExperimentConfig c, const CommandOptions& o) {
  return run_command(c, o, "sensitivity", [&](const fs::path& dir, RunManifest& m) {
    const rhm::Dataset data = make_dataset(c, c.train_size(), c.seed);
    const Model model = obtain_model(c, o, dir, data, m);
    auto t0 = Clock::now();
    const ProbeOutcome p = probe_model(c, model, data, c.seed);
    m.phase("probe", seconds_since(t0));
    t0 = Clock::now();
    const auto report = model_sensitivity(c, model, &p.probe, *data.rulebook, c.seed);
    m.phase("sensitivity", seconds_since(t0));
    emit(dir / "sensitivity.csv", eval::sensitivity_csv(report), m);
    emit(dir / "sensitivity.json", eval::sensitivity_summary(report).dump(2) + "\n", m);
  });
}

int cmd_mask_ablation(ExperimentConfig c, const CommandOptions& o) {
  return run_command(c, o, "mask-ablation", [&](const fs::path& dir, RunManifest& m) {
    const auto t0 = Clock::now();
    const auto kinds = rules::all_rules();
    const auto results = mask_ablation(c, kinds);
    m.phase("ablation", seconds_since(t0));
    std::string table = "rule,seed,t_stop,final_test_acc,feedback_frozen\n";
    json summary = json::object();
    char buf[256];
    for (auto kind : kinds) {
      const std::string name = rules::to_string(kind);
      double sum = 0.0;
      for (const auto& r : results) {
        const auto& res = r.by_rule.at(name);
        emit(dir / ("curve_" + name + "_seed" + std::to_string(r.seed) + ".csv"),
             rules::training_log_csv(res.log), m);
        const bool frozen = res.checksum_at_freeze == res.checksum_final;
        std::snprintf(buf, sizeof(buf), "%s,%llu,%lld,%.10g,%d\n", name.c_str(),
                      static_cast<unsigned long long>(r.seed), static_cast<long long>(res.t_stop),
                      res.final_test_acc, frozen ? 1 : 0);
        table += buf;
        sum += res.final_test_acc;
      }
      summary[name] = {{"mean_final_test_acc", sum / static_cast<double>(results.size())}};
    }
    emit(dir / "comparison.csv", table, m);
    emit(dir / "ablation.json", json{{"rules", summary}, {"seeds", c.sweep_seeds}}.dump(2) + "\n", m);
  });
}

}  // namespace rhmlab::exp
