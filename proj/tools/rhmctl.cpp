#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "rhmlab/errors.hpp"
#include "rhmlab/experiment.hpp"

using namespace rhmlab;

namespace {

struct Args {
  std::string config;
  exp::CommandOptions opts;
  std::uint64_t seed = 0;
  std::string out, resume, checkpoint;
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& help, Args& a) {
  auto* sub = app.add_subcommand(name, help);
  sub->add_option("-c,--config", a.config, "experiment config (JSON)")->required();
  sub->add_option("-o,--out", a.out, "output directory (overrides the config)");
  sub->add_option("-s,--seed", a.seed, "master seed (overrides the config)");
  sub->add_flag("-q,--quiet", a.opts.quiet, "suppress the completion message");
  return sub;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rhmctl: Random Hierarchy Model experiments"};
  app.set_version_flag("--version", exp::kVersion);
  app.require_subcommand(1);
  Args a;

  auto* gen = add_command(app, "gen", "generate the rulebook and train/holdout codewords", a);
  gen->add_flag("--full", a.opts.full_enumeration, "also write the full enumeration (all.txt)");
  auto* train = add_command(app, "train", "train a model with the configured rule", a);
  train->add_option("--resume", a.resume, "checkpoint to continue from");
  auto* eval = add_command(app, "eval", "linear probe on a trained model", a);
  auto* sweep = add_command(app, "sweep", "P* sweep over the training-set grid", a);
  auto* sens = add_command(app, "sensitivity", "synonymic sensitivity matrix", a);
  for (auto* sub : {eval, sens}) {
    sub->add_option("--checkpoint", a.checkpoint, "checkpoint to analyse (default: <out>/checkpoint.bin)");
    sub->add_flag("--pipeline", a.opts.pipeline, "train first when no checkpoint exists");
  }
  auto* ablation = add_command(app, "mask-ablation", "masking protocol across all rules", a);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  exp::ExperimentConfig config;
  try {
    config = exp::load_config(a.config);
  } catch (const std::exception& e) {
    std::cerr << "rhmctl: configuration error: " << e.what() << "\n";
    return 2;
  }
  if (!a.out.empty()) a.opts.output_dir = a.out;
  if (app.get_subcommands().front()->count("--seed") > 0) a.opts.seed = a.seed;
  if (!a.resume.empty()) a.opts.resume = a.resume;
  if (!a.checkpoint.empty()) a.opts.checkpoint = a.checkpoint;

  auto* chosen = app.get_subcommands().front();
  if (chosen == gen) return exp::cmd_gen(config, a.opts);
  if (chosen == train) return exp::cmd_train(config, a.opts);
  if (chosen == eval) return exp::cmd_eval(config, a.opts);
  if (chosen == sweep) return exp::cmd_sweep(config, a.opts);
  if (chosen == sens) return exp::cmd_sensitivity(config, a.opts);
  if (chosen == ablation) return exp::cmd_mask_ablation(config, a.opts);
  return 2;
}
