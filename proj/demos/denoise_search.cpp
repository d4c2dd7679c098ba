// Walkthrough of the whole toolkit on a small problem: synthesize noisy
// images, train a searchable denoiser, collapse it to a discrete
// architecture, finetune the result, and score both against the noisy
// input. Finishes in about a minute on one CPU core.

#include <cstdio>
#include <iostream>

#include "sknas/blocks.hpp"
#include "sknas/data.hpp"
#include "sknas/metrics.hpp"
#include "sknas/training.hpp"

using namespace sknas;

int main() {
  DataConfig data_cfg;
  data_cfg.count = 48;
  data_cfg.height = data_cfg.width = 32;
  data_cfg.sigma = 25.0 / 255.0;
  data_cfg.seed = 7;
  const auto items = generate_synthetic_set(data_cfg);

  Rng root(21);
  Rng split_rng = root.derive(1);
  const SplitResult split = split_dataset(items, 0.15, split_rng);
  std::printf("%zu training images, %zu held out\n", split.train.size(), split.val.size());

  ModelSpec spec;
  spec.in_channels = 3;
  spec.depth = 1;
  spec.base_channels = 8;
  spec.blocks_per_level = 1;
  spec.kernel_candidates = {3, 5};
  spec.growth_rates = {0.25, 0.5, 1.0};
  spec.skip_init = true;
  spec.variant = Variant::factorized;

  Rng init_rng = root.derive(2);
  Model model(spec, init_rng);
  std::printf("supernet has %lld parameters\n", parameter_count(model));

  TrainConfig train_cfg;
  train_cfg.lr = 1e-3;
  train_cfg.patch_size = 16;
  train_cfg.batch_size = 4;
  train_cfg.eval_interval = 100;
  train_cfg.patience = 20;
  train_cfg.max_steps = 500;
  train_cfg.seed = 33;
  train(model, split.train, split.val, train_cfg, &std::cerr);

  const ArchitectureSpec arch = model.distill();
  std::printf("\ndistilled to %lld parameters; chosen slices:\n", parameter_count(model));
  std::printf("%s\n", arch.to_text().c_str());

  train_cfg.max_steps = 250;
  train_cfg.seed = 34;
  train(model, split.train, split.val, train_cfg, &std::cerr);

  const auto denoise = [&](const Tensor& x) {
    return model.forward(x, nullptr, SampleMode::expected);
  };
  const double noisy = evaluate([](const Tensor& x) { return x; }, split.val).psnr;
  const EvalResult plain = evaluate(denoise, split.val, false);
  const EvalResult ensembled = evaluate(denoise, split.val, true);
  std::printf("held-out PSNR: noisy input %.2f dB, denoised %.2f dB, self-ensembled %.2f dB\n",
              noisy, plain.psnr, ensembled.psnr);
  std::printf("held-out SSIM: denoised %.4f, self-ensembled %.4f\n", plain.ssim,
              ensembled.ssim);
  return 0;
}
