// mcsad: leave-one-domain-out federated training runs on synthetic or
// ingested image domains.
//
//   mcsad run [--config F] [--mode M] [--seed S]... [--out DIR] [--deterministic]
//   mcsad gen-data [--config F] --out DIR
//   mcsad eval-checkpoint --checkpoint F [--config F] [--target I]

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>

#include "mcsad/evaluate.hpp"
#include "mcsad/harness.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", flags.sets, "override one config key, KEY=VALUE (repeatable)");
}

mcsad::ExperimentConfig resolve(const CommonFlags& flags) {
  auto cfg = flags.config_path.empty() ? mcsad::ExperimentConfig::defaults() : mcsad::load_config(flags.config_path);
  mcsad::apply_env_overrides(cfg, mcsad::current_environment());
  for (const auto& kv : flags.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw mcsad::ContractError("--set expects KEY=VALUE, got '" + kv + "'");
    mcsad::set_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw mcsad::IoError("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Geometry is recovered from the stored shapes; image size and class count
// must agree with the data.
mcsad::BackboneConfig backbone_of(const mcsad::Checkpoint& ckpt, const mcsad::DomainDataset& data) {
  auto dim = [&](const char* name, std::size_t axis) {
    const auto* p = ckpt.find(name);
    if (!p || p->shape.size() <= axis) {
      throw mcsad::CheckpointError(mcsad::CheckpointError::Kind::UnknownParameter, std::string("missing ") + name);
    }
    return static_cast<int>(p->shape[axis]);
  };
  mcsad::BackboneConfig b;
  b.in_channels = dim("stem.weight", 1);
  b.block_channels = {dim("block1.conv2.weight", 0), dim("block2.conv2.weight", 0), dim("block3.conv2.weight", 0)};
  b.embedding_dim = b.block_channels[2];
  b.num_classes = dim("head.weight", 0);
  b.image_size = data.image_size();
  return b;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated domain generalization with collaborative style augmentation"};
  app.require_subcommand(1);
  app.footer("Every config key may also be set via the environment as MCSAD_<KEY>\n"
             "(upper case, dots as underscores). Flags win over the environment,\n"
             "which wins over the config file.");

  CommonFlags run_flags, gen_flags, eval_flags;
  std::string mode, out_dir, checkpoint_path;
  std::vector<std::uint64_t> seeds;
  bool deterministic = false;
  int jobs = 0;
  std::vector<int> targets;

  auto* run = app.add_subcommand("run", "run every (cell, target, seed) of a mode and write CSV reports");
  add_common(run, run_flags);
  run->add_option("--mode", mode, "mcsad | fedavg | ablation-grid | augmenter-grid | split-grid")
      ->check(CLI::IsMember(mcsad::experiment_modes()));
  run->add_option("--seed", seeds, "seed (repeatable; replaces the configured list)");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--target", targets, "target domain index (repeatable; default all)");
  run->add_option("--jobs", jobs, "concurrent cells when not deterministic")->check(CLI::PositiveNumber);
  run->add_flag("--deterministic", deterministic, "sequential clients and cells; byte-stable outputs");

  auto* gen = app.add_subcommand("gen-data", "export the configured synthetic domains as PPM folders");
  add_common(gen, gen_flags);
  gen->add_option("--out", out_dir, "output root")->required();

  auto* eval = app.add_subcommand("eval-checkpoint", "score a saved global model on each domain");
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", checkpoint_path, "global.ckpt file")->required()->check(CLI::ExistingFile);
  eval->add_option("--target", targets, "domain index (repeatable; default all)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      auto cfg = resolve(run_flags);
      if (!mode.empty()) cfg.mode = mode;
      if (!seeds.empty()) cfg.seeds = seeds;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (!targets.empty()) cfg.targets = targets;
      if (jobs > 0) cfg.jobs = jobs;
      if (deterministic) cfg.deterministic = true;
      const auto report = mcsad::run_experiment(cfg, std::cout);
      if (!report.all_ok()) {
        std::cerr << "one or more cells failed; see " << cfg.out_dir << "/cells.csv\n";
        return 1;
      }
      return 0;
    }

    if (gen->parsed()) {
      const auto cfg = resolve(gen_flags);
      for (const auto& d : mcsad::load_domains(cfg)) {
        mcsad::export_folder(d, out_dir);
        std::cout << d.name << ": " << d.size() << " images\n";
      }
      return 0;
    }

    const auto cfg = resolve(eval_flags);
    const auto domains = mcsad::load_domains(cfg);
    const auto ckpt = mcsad::Checkpoint::deserialize(read_bytes(checkpoint_path));
    const auto model = mcsad::Model<float>::from_checkpoint(backbone_of(ckpt, domains.front()), ckpt);
    if (targets.empty()) {
      for (std::size_t i = 0; i < domains.size(); ++i) targets.push_back(static_cast<int>(i));
    }
    for (int t : targets) {
      if (t < 0 || t >= static_cast<int>(domains.size())) throw mcsad::ContractError("no domain " + std::to_string(t));
      const auto& d = domains[static_cast<std::size_t>(t)];
      std::cout << d.name << ',' << mcsad::format_percent(mcsad::evaluate(model, d, d.all_indices())) << '\n';
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
