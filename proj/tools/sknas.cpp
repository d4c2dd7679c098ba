// Command-line front end: synthesize data, search, distill, finetune,
// evaluate, and compare variants. Progress goes to stderr; results are files.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "sknas/arch_spec.hpp"
#include "sknas/blocks.hpp"
#include "sknas/checkpoint.hpp"
#include "sknas/config.hpp"
#include "sknas/data.hpp"
#include "sknas/metrics.hpp"
#include "sknas/training.hpp"

namespace fs = std::filesystem;
using namespace sknas;

namespace {

void ensure_absent(const fs::path& path, bool force) {
  if (fs::exists(path) && !force)
    throw std::runtime_error("output '" + path.string() +
                             "' already exists; pass --force to overwrite");
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

// Options shared by every training-shaped subcommand. Each flag only
// overrides the config when it was actually given on the command line.
struct TrainFlags {
  double lr = 0.0;
  int patch = 0, batch = 0, eval_interval = 0, patience = 0, steps = 0;
  std::uint64_t seed = 0;
  std::string loss;
  CLI::Option *o_lr = nullptr, *o_patch = nullptr, *o_batch = nullptr, *o_eval = nullptr,
              *o_patience = nullptr, *o_steps = nullptr, *o_seed = nullptr, *o_loss = nullptr;

  void attach(CLI::App* sub) {
    o_lr = sub->add_option("--lr", lr, "learning rate");
    o_patch = sub->add_option("--patch", patch, "training patch size");
    o_batch = sub->add_option("--batch", batch, "patches per step");
    o_eval = sub->add_option("--eval-interval", eval_interval, "steps between validations");
    o_patience = sub->add_option("--patience", patience, "validations without improvement");
    o_steps = sub->add_option("--steps", steps, "maximum training steps");
    o_seed = sub->add_option("--seed", seed, "rng seed for sampling and noise");
    o_loss = sub->add_option("--loss", loss, "training loss")
                 ->check(CLI::IsMember({"l1", "l2"}));
  }

  void apply(TrainConfig& cfg) const {
    if (o_lr->count()) cfg.lr = lr;
    if (o_patch->count()) cfg.patch_size = patch;
    if (o_batch->count()) cfg.batch_size = batch;
    if (o_eval->count()) cfg.eval_interval = eval_interval;
    if (o_patience->count()) cfg.patience = patience;
    if (o_steps->count()) cfg.max_steps = steps;
    if (o_seed->count()) cfg.seed = seed;
    if (o_loss->count()) cfg.loss = loss_from_name(loss);
  }
};

struct ModelFlags {
  std::string variant, mode, channel_rule;
  double tau = 0.0;
  int depth = 0, base_channels = 0, blocks = 0, subnetworks = 0;
  bool skip_init = false;
  std::vector<int> kernels;
  std::vector<double> growth;
  CLI::Option *o_variant = nullptr, *o_mode = nullptr, *o_rule = nullptr, *o_tau = nullptr,
              *o_depth = nullptr, *o_base = nullptr, *o_blocks = nullptr, *o_subnets = nullptr,
              *o_skip = nullptr, *o_kernels = nullptr, *o_growth = nullptr;

  void attach(CLI::App* sub) {
    o_variant = sub->add_option("--variant", variant, "search space parameterization")
                    ->check(CLI::IsMember({"none", "joint", "factorized", "filterwise",
                                           "filterwise-attention"}));
    o_mode = sub->add_option("--mode", mode, "masked-sum or per-slice forward")
                 ->check(CLI::IsMember({"full", "separate"}));
    o_rule = sub->add_option("--channel-rule", channel_rule, "width growth per level")
                 ->check(CLI::IsMember({"double", "arithmetic"}));
    o_tau = sub->add_option("--tau", tau, "sampling temperature");
    o_depth = sub->add_option("--depth", depth, "number of downsamplings");
    o_base = sub->add_option("--base-channels", base_channels, "width at full resolution");
    o_blocks = sub->add_option("--blocks", blocks, "DCR blocks per level");
    o_subnets = sub->add_option("--subnetworks", subnetworks, "parallel U-Nets");
    o_skip = sub->add_flag("--skip-init", skip_init, "zero-init residual branch scales");
    o_kernels = sub->add_option("--kernel-candidates", kernels, "candidate kernel sizes")
                    ->delimiter(',');
    o_growth = sub->add_option("--growth-rates", growth, "candidate filter growth rates")
                   ->delimiter(',');
  }

  void apply(ModelSpec& spec) const {
    if (o_variant->count()) spec.variant = variant_from_name(variant);
    if (o_mode->count()) spec.mode = conv_mode_from_name(mode);
    if (o_rule->count()) spec.channel_rule = channel_rule_from_name(channel_rule);
    if (o_tau->count()) spec.tau = tau;
    if (o_depth->count()) spec.depth = depth;
    if (o_base->count()) spec.base_channels = base_channels;
    if (o_blocks->count()) spec.blocks_per_level = blocks;
    if (o_subnets->count()) spec.subnetworks = subnetworks;
    if (o_skip->count()) spec.skip_init = true;
    if (o_kernels->count()) spec.kernel_candidates = kernels;
    if (o_growth->count()) spec.growth_rates = growth;
  }
};

RunConfig load_base_config(const std::string& config_path) {
  if (config_path.empty()) return RunConfig{};
  return parse_run_config(detail::read_file(config_path));
}

std::string eval_report_text(const std::string& checkpoint, const EvalResult& r,
                             bool ensemble) {
  std::string out = "# evaluation report v1\n";
  out += "checkpoint " + checkpoint + "\n";
  out += "images " + std::to_string(r.count) + "\n";
  out += std::string("self_ensemble ") + (ensemble ? "1" : "0") + "\n";
  out += "psnr " + fmt("%.17g", r.psnr) + "\n";
  out += "ssim " + fmt("%.17g", r.ssim) + "\n";
  return out;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  DataConfig cfg;
  int size = 0;
  bool force = false;
  CLI::Option* o_size = nullptr;
};

int cmd_gen_data(const GenDataArgs& a) {
  DataConfig cfg = a.cfg;
  if (a.o_size->count()) cfg.height = cfg.width = a.size;
  cfg.validate();
  ensure_absent(fs::path(a.out) / "manifest.txt", a.force);
  const auto items = generate_synthetic_set(cfg);
  save_dataset(a.out, items);
  std::cerr << "wrote " << items.size() << " image pairs to " << a.out << "\n";
  return 0;
}

struct SearchArgs {
  std::string data, out, config;
  double val_fraction = 0.1;
  bool force = false;
  TrainFlags train;
  ModelFlags model;
};

int cmd_search(const SearchArgs& a) {
  RunConfig cfg = load_base_config(a.config);
  a.model.apply(cfg.model);
  a.train.apply(cfg.train);

  const auto items = load_dataset(a.data);
  if (items.empty()) throw std::runtime_error("dataset '" + a.data + "' is empty");
  cfg.model.in_channels = items[0].clean.dim(0);
  cfg.model.validate();
  cfg.train.validate(cfg.model.depth);

  fs::create_directories(a.out);
  const fs::path ckpt_path = fs::path(a.out) / "search_checkpoint.skcp";
  const fs::path report_path = fs::path(a.out) / "search_report.txt";
  const fs::path config_path = fs::path(a.out) / "config.json";
  ensure_absent(ckpt_path, a.force);
  ensure_absent(report_path, a.force);

  Rng root(cfg.train.seed);
  Rng split_rng = root.derive(100);
  const SplitResult split = split_dataset(items, a.val_fraction, split_rng);
  std::cerr << "training on " << split.train.size() << " images, validating on "
            << split.val.size() << " (variant " << variant_name(cfg.model.variant) << ")\n";

  Rng init_rng = root.derive(101);
  Model model(cfg.model, init_rng);
  const TrainReport report = train(model, split.train, split.val, cfg.train, &std::cerr);

  save_checkpoint(ckpt_path.string(), model);
  detail::write_file(report_path.string(), report.to_text());
  detail::write_file(config_path.string(), serialize_run_config(cfg));
  std::cerr << "best val_psnr " << fmt("%.3f", report.best_psnr) << " dB at step "
            << report.best_step << "; checkpoint: " << ckpt_path.string() << "\n";
  return 0;
}

struct DistillArgs {
  std::string checkpoint, out;
  double threshold = 0.0;
  bool force = false;
  CLI::Option* o_threshold = nullptr;
};

int cmd_distill(const DistillArgs& a) {
  LoadedCheckpoint loaded = load_checkpoint(a.checkpoint);
  if (loaded.distilled())
    throw std::runtime_error("checkpoint '" + a.checkpoint + "' is already distilled");
  if (!loaded.model.has_superkernels())
    std::cerr << "note: model has no superkernels; emitting an identical checkpoint\n";

  fs::create_directories(a.out);
  const fs::path ckpt_path = fs::path(a.out) / "distilled_checkpoint.skcp";
  const fs::path arch_path = fs::path(a.out) / "architecture.txt";
  ensure_absent(ckpt_path, a.force);
  ensure_absent(arch_path, a.force);

  const long long before = parameter_count(loaded.model);
  if (a.o_threshold->count()) loaded.model.set_distill_logit_threshold(a.threshold);
  const ArchitectureSpec arch = loaded.model.distill();
  const long long after = parameter_count(loaded.model);

  save_checkpoint(ckpt_path.string(), loaded.model, arch);
  detail::write_file(arch_path.string(), arch.to_text());
  std::cerr << "distilled " << arch.entries.size() << " superkernels; parameters " << before
            << " -> " << after << "\n";
  return 0;
}

struct FinetuneArgs {
  std::string checkpoint, data, out;
  double val_fraction = 0.1;
  bool force = false;
  TrainFlags train;
};

int cmd_finetune(const FinetuneArgs& a) {
  LoadedCheckpoint loaded = load_checkpoint(a.checkpoint);
  TrainConfig cfg;
  a.train.apply(cfg);
  cfg.validate(loaded.model.spec().depth);

  const auto items = load_dataset(a.data);
  Rng root(cfg.seed);
  Rng split_rng = root.derive(100);
  const SplitResult split = split_dataset(items, a.val_fraction, split_rng);

  fs::create_directories(a.out);
  const fs::path ckpt_path = fs::path(a.out) / "finetuned_checkpoint.skcp";
  const fs::path report_path = fs::path(a.out) / "finetune_report.txt";
  ensure_absent(ckpt_path, a.force);
  ensure_absent(report_path, a.force);

  const TrainReport report = train(loaded.model, split.train, split.val, cfg, &std::cerr);
  save_checkpoint(ckpt_path.string(), loaded.model, loaded.arch);
  detail::write_file(report_path.string(), report.to_text());
  std::cerr << "best val_psnr " << fmt("%.3f", report.best_psnr) << " dB; checkpoint: "
            << ckpt_path.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, out = "eval_report.txt";
  bool ensemble = false;
  bool force = false;
};

int cmd_eval(const EvalArgs& a) {
  LoadedCheckpoint loaded = load_checkpoint(a.checkpoint);
  const auto items = load_dataset(a.data);
  ensure_absent(a.out, a.force);
  const auto fn = [&](const Tensor& x) {
    return loaded.model.forward(x, nullptr, SampleMode::expected);
  };
  const EvalResult r = evaluate(fn, items, a.ensemble);
  detail::write_file(a.out, eval_report_text(a.checkpoint, r, a.ensemble));
  std::cerr << "psnr " << fmt("%.3f", r.psnr) << " dB, ssim " << fmt("%.4f", r.ssim)
            << " over " << r.count << " images -> " << a.out << "\n";
  return 0;
}

struct CompareArgs {
  std::string data, out, config;
  std::vector<std::string> variants = {"none", "joint", "factorized", "filterwise",
                                       "filterwise-attention"};
  double val_fraction = 0.1;
  int finetune_steps = 0;
  bool force = false;
  TrainFlags train;
  ModelFlags model;
  CLI::Option* o_finetune_steps = nullptr;
};

int cmd_compare(const CompareArgs& a) {
  RunConfig base = load_base_config(a.config);
  a.model.apply(base.model);
  a.train.apply(base.train);

  const auto items = load_dataset(a.data);
  if (items.empty()) throw std::runtime_error("dataset '" + a.data + "' is empty");
  base.model.in_channels = items[0].clean.dim(0);

  fs::create_directories(a.out);
  const fs::path table_path = fs::path(a.out) / "compare_report.txt";
  ensure_absent(table_path, a.force);

  std::string table = "# comparison report v1\n";
  table += "# columns: variant params psnr ssim psnr_ens ssim_ens\n";

  for (const std::string& vname : a.variants) {
    RunConfig cfg = base;
    cfg.model.variant = variant_from_name(vname);
    cfg.model.validate();
    cfg.train.validate(cfg.model.depth);
    std::cerr << "=== variant " << vname << " ===\n";

    Rng root(cfg.train.seed);
    Rng split_rng = root.derive(100);
    const SplitResult split = split_dataset(items, a.val_fraction, split_rng);
    Rng init_rng = root.derive(101);
    Model model(cfg.model, init_rng);
    train(model, split.train, split.val, cfg.train, &std::cerr);

    const ArchitectureSpec arch = model.distill();
    TrainConfig ft = cfg.train;
    if (a.o_finetune_steps->count()) ft.max_steps = a.finetune_steps;
    ft.seed = cfg.train.seed + 1;
    train(model, split.train, split.val, ft, &std::cerr);

    const fs::path vdir = fs::path(a.out) / vname;
    fs::create_directories(vdir);
    save_checkpoint((vdir / "finetuned_checkpoint.skcp").string(), model, arch);
    if (!arch.empty())
      detail::write_file((vdir / "architecture.txt").string(), arch.to_text());

    const auto fn = [&](const Tensor& x) {
      return model.forward(x, nullptr, SampleMode::expected);
    };
    const EvalResult single = evaluate(fn, split.val, false);
    const EvalResult ens = evaluate(fn, split.val, true);
    table += vname + " " + std::to_string(parameter_count(model)) + " " +
             fmt("%.17g", single.psnr) + " " + fmt("%.17g", single.ssim) + " " +
             fmt("%.17g", ens.psnr) + " " + fmt("%.17g", ens.ssim) + "\n";
  }
  detail::write_file(table_path.string(), table);
  std::cerr << "comparison table: " << table_path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentiable kernel and filter search for small denoising U-Nets"};
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "synthesize a clean/noisy dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--count", gen.cfg.count, "number of image pairs");
  gen.o_size = gen_cmd->add_option("--size", gen.size, "square image size");
  gen_cmd->add_option("--channels", gen.cfg.channels, "image channels");
  gen_cmd->add_option("--sigma", gen.cfg.sigma, "noise standard deviation");
  gen_cmd->add_option("--seed", gen.cfg.seed, "generator seed");
  gen_cmd->add_flag("--force", gen.force, "overwrite existing outputs");

  SearchArgs search;
  CLI::App* search_cmd = app.add_subcommand("search", "train a supernet on a dataset");
  search_cmd->add_option("--data", search.data, "dataset manifest")->required();
  search_cmd->add_option("--out", search.out, "output directory")->required();
  search_cmd->add_option("--config", search.config, "JSON config file");
  search_cmd->add_option("--val-fraction", search.val_fraction, "validation share");
  search_cmd->add_flag("--force", search.force, "overwrite existing outputs");
  search.model.attach(search_cmd);
  search.train.attach(search_cmd);

  DistillArgs distill;
  CLI::App* distill_cmd =
      app.add_subcommand("distill", "freeze the strongest slice of every superkernel");
  distill_cmd->add_option("--checkpoint", distill.checkpoint, "supernet checkpoint")
      ->required();
  distill_cmd->add_option("--out", distill.out, "output directory")->required();
  distill.o_threshold = distill_cmd->add_option("--distill-logit-threshold",
                                                distill.threshold,
                                                "keep filters whose logit exceeds this");
  distill_cmd->add_flag("--force", distill.force, "overwrite existing outputs");

  FinetuneArgs finetune;
  CLI::App* finetune_cmd =
      app.add_subcommand("finetune", "continue training a checkpointed model");
  finetune_cmd->add_option("--checkpoint", finetune.checkpoint, "model checkpoint")
      ->required();
  finetune_cmd->add_option("--data", finetune.data, "dataset manifest")->required();
  finetune_cmd->add_option("--out", finetune.out, "output directory")->required();
  finetune_cmd->add_option("--val-fraction", finetune.val_fraction, "validation share");
  finetune_cmd->add_flag("--force", finetune.force, "overwrite existing outputs");
  finetune.train.attach(finetune_cmd);

  EvalArgs eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--data", eval.data, "dataset manifest")->required();
  eval_cmd->add_option("--out", eval.out, "report file");
  eval_cmd->add_flag("--self-ensemble", eval.ensemble, "average the eight dihedral passes");
  eval_cmd->add_flag("--force", eval.force, "overwrite existing outputs");

  CompareArgs compare;
  CLI::App* compare_cmd =
      app.add_subcommand("compare", "search+distill+finetune every variant, tabulate");
  compare_cmd->add_option("--data", compare.data, "dataset manifest")->required();
  compare_cmd->add_option("--out", compare.out, "output directory")->required();
  compare_cmd->add_option("--config", compare.config, "JSON config file");
  compare_cmd->add_option("--variants", compare.variants, "variants to run")->delimiter(',');
  compare_cmd->add_option("--val-fraction", compare.val_fraction, "validation share");
  compare.o_finetune_steps = compare_cmd->add_option("--finetune-steps",
                                                     compare.finetune_steps,
                                                     "steps after distillation");
  compare_cmd->add_flag("--force", compare.force, "overwrite existing outputs");
  compare.model.attach(compare_cmd);
  compare.train.attach(compare_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen);
    if (search_cmd->parsed()) return cmd_search(search);
    if (distill_cmd->parsed()) return cmd_distill(distill);
    if (finetune_cmd->parsed()) return cmd_finetune(finetune);
    if (eval_cmd->parsed()) return cmd_eval(eval);
    if (compare_cmd->parsed()) return cmd_compare(compare);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
