#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sknas/blocks.hpp"
#include "sknas/data.hpp"
#include "sknas/metrics.hpp"
#include "sknas/rng.hpp"
#include "sknas/tensor.hpp"

namespace sknas {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class LossKind { l1, l2 };

inline const char* loss_name(LossKind k) { return k == LossKind::l1 ? "l1" : "l2"; }

inline LossKind loss_from_name(const std::string& s) {
  if (s == "l1") return LossKind::l1;
  if (s == "l2") return LossKind::l2;
  throw std::invalid_argument("unknown loss '" + s + "' (expected l1|l2)");
}

struct TrainConfig {
  double lr = 2e-5;
  int patch_size = 32;
  int batch_size = 4;
  int eval_interval = 100;
  int patience = 10;
  int max_steps = 3000;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::l1;

  void validate(int model_depth) const {
    if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
    if (patch_size < 1) throw std::invalid_argument("patch size must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
    if (eval_interval < 1) throw std::invalid_argument("eval interval must be positive");
    if (patience < 1) throw std::invalid_argument("patience must be positive");
    if (max_steps < 1) throw std::invalid_argument("max steps must be positive");
    const int div = 1 << model_depth;
    if (patch_size % div != 0)
      throw std::invalid_argument("patch size " + std::to_string(patch_size) +
                                  " is not divisible by 2^depth = " + std::to_string(div));
  }
};

// Adam over a fixed parameter list. Structural logits and convolution weights
// ride in the same list, so one step advances the whole search state.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Tensor& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      const bool has = p.has_grad();
      for (int j = 0; j < p.size(); ++j) {
        const double g = has ? p.grad()[j] : 0.0;
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
        p.data()[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  long long t_ = 0;
  double lr_, beta1_, beta2_, eps_;
};

inline Tensor compute_loss(const Tensor& pred, const Tensor& target, LossKind kind) {
  const Tensor d = sub(pred, target);
  return kind == LossKind::l1 ? mean_all(abs(d)) : mean_all(mul(d, d));
}

struct EvalPoint {
  int step = 0;
  double train_loss = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
};

struct TrainReport {
  std::vector<EvalPoint> history;
  int best_step = 0;
  double best_psnr = 0.0;
  double best_ssim = 0.0;
  int steps_run = 0;
  bool early_stopped = false;

  // One line per evaluation plus a summary block; values carry full binary64
  // precision so identical runs serialize to identical bytes.
  std::string to_text() const {
    std::string out = "# training report v1\n";
    char buf[160];
    for (const auto& p : history) {
      std::snprintf(buf, sizeof(buf), "eval step=%d train_loss=%.17g val_psnr=%.17g val_ssim=%.17g\n",
                    p.step, p.train_loss, p.val_psnr, p.val_ssim);
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "best_step %d\nbest_psnr %.17g\nbest_ssim %.17g\n",
                  best_step, best_psnr, best_ssim);
    out += buf;
    std::snprintf(buf, sizeof(buf), "steps_run %d\nearly_stopped %d\n", steps_run,
                  early_stopped ? 1 : 0);
    out += buf;
    return out;
  }
};

// Patch-based training with periodic validation and early stopping. The model
// ends up holding the best-scoring weights seen, never a later worse state.
// Supernets train on stochastic structural samples; models without
// superkernels (baselines, distilled) train deterministically.
inline TrainReport train(Model& model, const std::vector<ImagePair>& train_items,
                         const std::vector<ImagePair>& val_items, const TrainConfig& cfg,
                         std::ostream* progress = nullptr) {
  cfg.validate(model.spec().depth);
  if (train_items.empty()) throw std::invalid_argument("training set is empty");
  if (val_items.empty()) throw std::invalid_argument("validation set is empty");

  std::vector<Tensor> params = model.parameters();
  Adam adam(params, cfg.lr);
  Rng root(cfg.seed);
  PatchSampler sampler(&train_items, cfg.patch_size, root.derive(1).seed());
  Rng noise = root.derive(2);
  const bool stochastic = model.has_superkernels();

  const auto eval_fn = [&](const Tensor& x) {
    return model.forward(x, nullptr, SampleMode::expected);
  };

  std::vector<std::vector<double>> best_state;
  const auto snapshot = [&] {
    best_state.clear();
    for (const Tensor& p : params) best_state.push_back(p.data());
  };
  const auto restore = [&] {
    for (size_t i = 0; i < params.size(); ++i) params[i].data() = best_state[i];
  };

  TrainReport report;
  double running = 0.0;
  int running_n = 0;
  int since_best = 0;
  bool have_best = false;

  for (int step = 1; step <= cfg.max_steps; ++step) {
    const auto [clean, noisy] = sampler.next_batch(cfg.batch_size);
    const Tensor pred = model.forward(noisy, stochastic ? &noise : nullptr,
                                      stochastic ? SampleMode::stochastic
                                                 : SampleMode::expected);
    Tensor loss = compute_loss(pred, clean, cfg.loss);
    const double lval = loss.item();
    if (!std::isfinite(lval))
      throw TrainError("loss became non-finite at step " + std::to_string(step) +
                       "; lower the learning rate or check the data");
    running += lval;
    ++running_n;

    adam.zero_grad();
    loss.backward();
    adam.step();
    report.steps_run = step;

    if (step % cfg.eval_interval != 0) continue;
    const EvalResult er = evaluate(eval_fn, val_items);
    report.history.push_back({step, running / running_n, er.psnr, er.ssim});
    running = 0.0;
    running_n = 0;
    if (progress) {
      char line[160];
      std::snprintf(line, sizeof(line), "step %d/%d loss %.5f val_psnr %.3f val_ssim %.4f\n",
                    step, cfg.max_steps, report.history.back().train_loss, er.psnr, er.ssim);
      *progress << line << std::flush;
    }
    if (!have_best || er.psnr > report.best_psnr) {
      have_best = true;
      report.best_psnr = er.psnr;
      report.best_ssim = er.ssim;
      report.best_step = step;
      since_best = 0;
      snapshot();
    } else if (++since_best >= cfg.patience) {
      report.early_stopped = true;
      break;
    }
  }
  if (have_best) restore();
  return report;
}

}  // namespace sknas
