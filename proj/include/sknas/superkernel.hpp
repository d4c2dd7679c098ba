#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sknas/rng.hpp"
#include "sknas/tensor.hpp"

namespace sknas {

// Which trainable distribution governs the slice choice of a searchable
// convolution. `none` is the plain-convolution baseline and never reaches
// SuperKernel itself.
enum class Variant { none, joint, factorized, filterwise, filterwise_attention };

// full: one convolution with the expectation-masked kernel, activation
// applied afterwards. separate: explicit weighted sum over slice
// convolutions with the activation inside each term.
enum class ConvMode { full, separate };

// stochastic: fresh Gumbel sample (training). expected: noise-free
// softmax/sigmoid of the logits (deterministic evaluation). discrete: exact
// one-hot/binary weights of the distilled choice.
enum class SampleMode { stochastic, expected, discrete };

struct UnsupportedModeError : std::logic_error {
  using std::logic_error::logic_error;
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::none: return "none";
    case Variant::joint: return "joint";
    case Variant::factorized: return "factorized";
    case Variant::filterwise: return "filterwise";
    case Variant::filterwise_attention: return "filterwise-attention";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& name) {
  for (Variant v : {Variant::none, Variant::joint, Variant::factorized, Variant::filterwise,
                    Variant::filterwise_attention})
    if (name == variant_name(v)) return v;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

inline const char* conv_mode_name(ConvMode m) {
  return m == ConvMode::full ? "full" : "separate";
}

inline ConvMode conv_mode_from_name(const std::string& name) {
  if (name == "full") return ConvMode::full;
  if (name == "separate") return ConvMode::separate;
  throw std::invalid_argument("unknown mode '" + name + "' (expected full or separate)");
}

// True for the variants whose filter choice is a per-filter Bernoulli mask
// rather than a categorical count.
inline bool uses_filter_mask(Variant v) {
  return v == Variant::filterwise || v == Variant::filterwise_attention;
}

// The slice lattice of one searchable convolution: candidate kernel sizes,
// and either candidate filter counts (joint/factorized) or an independent
// on/off choice over max_filters output channels (filterwise variants).
struct SliceGrid {
  std::vector<int> kernel_candidates;
  std::vector<int> filter_candidates;  // joint / factorized only
  int max_filters = 0;                 // output-channel extent of the shared weight

  int max_kernel() const { return kernel_candidates.back(); }
  int n_kernels() const { return static_cast<int>(kernel_candidates.size()); }
  int n_filters() const { return static_cast<int>(filter_candidates.size()); }

  int kernel_index(int k) const {
    for (int i = 0; i < n_kernels(); ++i)
      if (kernel_candidates[i] == k) return i;
    throw std::invalid_argument("kernel size " + std::to_string(k) + " is not a candidate");
  }
  int filter_index(int f) const {
    for (int i = 0; i < n_filters(); ++i)
      if (filter_candidates[i] == f) return i;
    throw std::invalid_argument("filter count " + std::to_string(f) + " is not a candidate");
  }
};

inline void validate_grid(const SliceGrid& grid, Variant variant) {
  if (variant == Variant::none)
    throw std::invalid_argument("superkernel grid is meaningless for variant none");
  const auto& ks = grid.kernel_candidates;
  if (ks.empty()) throw std::invalid_argument("no kernel candidates");
  for (size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] <= 0 || ks[i] % 2 == 0)
      throw std::invalid_argument("kernel candidate " + std::to_string(ks[i]) +
                                  " must be positive and odd");
    if (i > 0 && ks[i] <= ks[i - 1])
      throw std::invalid_argument("kernel candidates must be strictly increasing");
  }
  if (uses_filter_mask(variant)) {
    if (grid.max_filters < 1) throw std::invalid_argument("max_filters must be positive");
  } else {
    const auto& fs = grid.filter_candidates;
    if (fs.empty()) throw std::invalid_argument("no filter candidates");
    for (size_t i = 0; i < fs.size(); ++i) {
      if (fs[i] <= 0) throw std::invalid_argument("filter candidates must be positive");
      if (i > 0 && fs[i] <= fs[i - 1])
        throw std::invalid_argument("filter candidates must be strictly increasing");
    }
    if (grid.max_filters != fs.back())
      throw std::invalid_argument("max_filters must equal the largest filter candidate");
  }
}

// The discrete outcome of distillation for one superkernel: a kernel size
// plus either a filter count (prefix selection) or explicit filter indices.
struct KernelChoice {
  int kernel_size = 0;
  int filter_count = 0;             // joint / factorized
  std::vector<int> filter_indices;  // filterwise variants, ascending
  bool uses_indices = false;

  std::vector<int> selected_channels() const {
    if (uses_indices) return filter_indices;
    std::vector<int> idx(filter_count);
    for (int i = 0; i < filter_count; ++i) idx[i] = i;
    return idx;
  }
};

inline void validate_choice(const SliceGrid& grid, Variant variant, const KernelChoice& c) {
  grid.kernel_index(c.kernel_size);
  if (uses_filter_mask(variant)) {
    if (!c.uses_indices || c.filter_indices.empty())
      throw std::invalid_argument("filterwise choice needs at least one filter index");
    int prev = -1;
    for (int idx : c.filter_indices) {
      if (idx < 0 || idx >= grid.max_filters)
        throw std::invalid_argument("filter index " + std::to_string(idx) +
                                    " out of range for F=" + std::to_string(grid.max_filters));
      if (idx <= prev) throw std::invalid_argument("filter indices must be strictly increasing");
      prev = idx;
    }
  } else {
    if (c.uses_indices)
      throw std::invalid_argument("categorical choice must use a filter count, not indices");
    grid.filter_index(c.filter_count);
  }
}

// Trainable structural parameters. Which tensors exist depends on `variant`:
//   joint                -> theta_joint (n_k x n_f)
//   factorized           -> theta_kernel (n_k), theta_filter (n_f)
//   filterwise           -> theta_kernel (n_k), theta_filter (F)
//   filterwise-attention -> theta_kernel (n_k), theta_filter (F base logits),
//                           keys (F x l)
struct StructuralDistribution {
  Variant variant = Variant::none;
  Tensor theta_joint;
  Tensor theta_kernel;
  Tensor theta_filter;
  Tensor keys;
};

// Categorical logits start at 0 (uniform over slices). Bernoulli logits
// start at 1 so filters begin mostly on; attention keys start small so the
// attention matrix begins near uniform.
inline StructuralDistribution make_distribution(Variant variant, const SliceGrid& grid,
                                                Rng& rng, int key_dim = 8) {
  validate_grid(grid, variant);
  StructuralDistribution d;
  d.variant = variant;
  switch (variant) {
    case Variant::joint:
      d.theta_joint = Tensor::zeros({grid.n_kernels(), grid.n_filters()}, true);
      break;
    case Variant::factorized:
      d.theta_kernel = Tensor::zeros({grid.n_kernels()}, true);
      d.theta_filter = Tensor::zeros({grid.n_filters()}, true);
      break;
    case Variant::filterwise:
      d.theta_kernel = Tensor::zeros({grid.n_kernels()}, true);
      d.theta_filter = Tensor::full({grid.max_filters}, 1.0, true);
      break;
    case Variant::filterwise_attention:
      d.theta_kernel = Tensor::zeros({grid.n_kernels()}, true);
      d.theta_filter = Tensor::full({grid.max_filters}, 1.0, true);
      d.keys = Tensor::randn(rng, {grid.max_filters, key_dim}, 0.1, true);
      break;
    case Variant::none:
      break;  // unreachable, validate_grid rejected it
  }
  return d;
}

// For the attention variant the per-filter logits that actually parametrize
// the Bernoulli draws are an attention-mixed view of the base logits:
// row-softmax(V V^T) applied to theta^b. Differentiable in both keys and
// base logits. Other Bernoulli variants pass their logits through.
inline Tensor effective_filter_logits(const StructuralDistribution& d) {
  if (d.variant == Variant::filterwise) return d.theta_filter;
  if (d.variant != Variant::filterwise_attention)
    throw std::logic_error("effective_filter_logits: variant has no filter logits");
  const int f = d.theta_filter.dim(0);
  Tensor attn = softmax(matmul(d.keys, transpose2d(d.keys)), 1);
  return reshape(matmul(attn, reshape(d.theta_filter, {f, 1})), {f});
}

// One structural sample. joint holds a flat simplex over n_k*n_f slices
// (kernel-major order); otherwise kernel holds a simplex over kernel
// candidates and filter holds either a simplex over filter counts or
// per-filter Bernoulli weights in (0,1).
struct StructuralSample {
  Tensor joint;
  Tensor kernel;
  Tensor filter;
};

namespace detail {

inline Tensor gumbel_softmax(const Tensor& logits, double tau, Rng& rng, bool hard) {
  Tensor noisy = scale(add(logits, gumbel_noise(rng, logits.shape())), 1.0 / tau);
  Tensor soft = softmax(noisy, 0);
  if (!hard) return soft;
  std::vector<double> onehot(soft.size(), 0.0);
  onehot[argmax(soft.data())] = 1.0;
  return straight_through(Tensor::from_data(soft.shape(), std::move(onehot)), soft);
}

// Relaxed Bernoulli via the difference of two Gumbel draws (logistic noise):
// sigmoid((theta + g1 - g0)/tau). A hard sample thresholds at 1/2, which
// happens with probability sigmoid(theta) exactly.
inline Tensor relaxed_bernoulli(const Tensor& logits, double tau, Rng& rng, bool hard) {
  Tensor g1 = gumbel_noise(rng, logits.shape());
  Tensor g0 = gumbel_noise(rng, logits.shape());
  Tensor soft = sigmoid(scale(add(logits, sub(g1, g0)), 1.0 / tau));
  if (!hard) return soft;
  std::vector<double> bits(soft.size());
  for (size_t i = 0; i < bits.size(); ++i) bits[i] = soft.data()[i] > 0.5 ? 1.0 : 0.0;
  return straight_through(Tensor::from_data(soft.shape(), std::move(bits)), soft);
}

}  // namespace detail

// Draws one set of structural weights. Noise consumption order is fixed
// (joint: one block; otherwise kernel part, then filter part) so a seeded
// run is reproducible. hard=true returns one-hot/binary forward values with
// the soft sample's gradients (straight-through).
inline StructuralSample sample_structural_weights(const StructuralDistribution& d, double tau,
                                                  Rng& rng, bool hard) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  StructuralSample s;
  switch (d.variant) {
    case Variant::joint: {
      const int n = static_cast<int>(d.theta_joint.size());
      s.joint = detail::gumbel_softmax(reshape(d.theta_joint, {n}), tau, rng, hard);
      break;
    }
    case Variant::factorized:
      s.kernel = detail::gumbel_softmax(d.theta_kernel, tau, rng, hard);
      s.filter = detail::gumbel_softmax(d.theta_filter, tau, rng, hard);
      break;
    case Variant::filterwise:
    case Variant::filterwise_attention:
      s.kernel = detail::gumbel_softmax(d.theta_kernel, tau, rng, hard);
      s.filter = detail::relaxed_bernoulli(effective_filter_logits(d), tau, rng, hard);
      break;
    case Variant::none:
      throw std::logic_error("cannot sample variant none");
  }
  return s;
}

// Noise-free weights: softmax / sigmoid of the logits. Used for
// deterministic evaluation of an undistilled supernetwork.
inline StructuralSample expected_structural_weights(const StructuralDistribution& d) {
  StructuralSample s;
  switch (d.variant) {
    case Variant::joint: {
      const int n = static_cast<int>(d.theta_joint.size());
      s.joint = softmax(reshape(d.theta_joint, {n}), 0);
      break;
    }
    case Variant::factorized:
      s.kernel = softmax(d.theta_kernel, 0);
      s.filter = softmax(d.theta_filter, 0);
      break;
    case Variant::filterwise:
    case Variant::filterwise_attention:
      s.kernel = softmax(d.theta_kernel, 0);
      s.filter = sigmoid(effective_filter_logits(d));
      break;
    case Variant::none:
      throw std::logic_error("variant none has no structural weights");
  }
  return s;
}

// Exact 0/1 weights realizing a discrete choice.
inline StructuralSample choice_weights(const SliceGrid& grid, Variant variant,
                                       const KernelChoice& choice) {
  validate_choice(grid, variant, choice);
  StructuralSample s;
  const int ki = grid.kernel_index(choice.kernel_size);
  if (variant == Variant::joint) {
    std::vector<double> w(static_cast<size_t>(grid.n_kernels()) * grid.n_filters(), 0.0);
    w[ki * grid.n_filters() + grid.filter_index(choice.filter_count)] = 1.0;
    s.joint = Tensor::from_data({grid.n_kernels() * grid.n_filters()}, std::move(w));
    return s;
  }
  std::vector<double> wk(grid.n_kernels(), 0.0);
  wk[ki] = 1.0;
  s.kernel = Tensor::from_data({grid.n_kernels()}, std::move(wk));
  if (uses_filter_mask(variant)) {
    std::vector<double> wf(grid.max_filters, 0.0);
    for (int idx : choice.filter_indices) wf[idx] = 1.0;
    s.filter = Tensor::from_data({grid.max_filters}, std::move(wf));
  } else {
    std::vector<double> wf(grid.n_filters(), 0.0);
    wf[grid.filter_index(choice.filter_count)] = 1.0;
    s.filter = Tensor::from_data({grid.n_filters()}, std::move(wf));
  }
  return s;
}

namespace detail {
// Flattened K_max*K_max spatial window with ones on the centered k x k.
inline std::vector<double> centered_window(int k_max, int k) {
  std::vector<double> m(static_cast<size_t>(k_max) * k_max, 0.0);
  const int off = (k_max - k) / 2;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) m[(off + y) * k_max + off + x] = 1.0;
  return m;
}
}  // namespace detail

// Binary mask of one slice: 1 on the centered k x k window of the selected
// output channels, 0 elsewhere. Shape O_max x 1 x K_max x K_max.
inline Tensor slice_mask(const SliceGrid& grid, Variant variant, const KernelChoice& choice) {
  validate_choice(grid, variant, choice);
  const int K = grid.max_kernel();
  const int O = grid.max_filters;
  const auto window = detail::centered_window(K, choice.kernel_size);
  std::vector<double> m(static_cast<size_t>(O) * K * K, 0.0);
  for (int o : choice.selected_channels())
    std::copy(window.begin(), window.end(), m.begin() + static_cast<size_t>(o) * K * K);
  return Tensor::from_data({O, 1, K, K}, std::move(m));
}

// Per-output-channel mean of a kernel mask over everything but the filter
// dimension; the factor by which a channel's bias participates.
inline Tensor bias_mask(const Tensor& kernel_mask) {
  check_shape(kernel_mask.ndim() == 4, "bias_mask: expected O x 1 x K x K mask, got " +
                                           shape_str(kernel_mask.shape()));
  return mean(kernel_mask, {1, 2, 3});
}

// One searchable convolution: a shared maximal weight plus the structural
// distribution that softly selects a slice of it. Always stride 1 with
// same-size padding; the surrounding architecture handles resampling.
class SuperKernel {
 public:
  SuperKernel(Variant variant, SliceGrid grid, int in_channels, double tau, ConvMode mode,
              Rng& init_rng, bool with_bias = true, int key_dim = 8)
      : variant_(variant), grid_(std::move(grid)), in_channels_(in_channels), tau_(tau) {
    if (!uses_filter_mask(variant_) && grid_.max_filters == 0 &&
        !grid_.filter_candidates.empty())
      grid_.max_filters = grid_.filter_candidates.back();
    validate_grid(grid_, variant_);
    if (in_channels <= 0) throw std::invalid_argument("in_channels must be positive");
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
    set_mode(mode);
    const int K = grid_.max_kernel();
    const int O = grid_.max_filters;
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_channels) * K * K));
    weight_ = Tensor::randn(init_rng, {O, in_channels, K, K}, stddev, true);
    if (with_bias) bias_ = Tensor::zeros({O}, true);
    dist_ = make_distribution(variant_, grid_, init_rng, key_dim);
    build_mask_bases();
  }

  Variant variant() const { return variant_; }
  const SliceGrid& grid() const { return grid_; }
  int in_channels() const { return in_channels_; }
  int out_channels() const { return grid_.max_filters; }
  int padding() const { return (grid_.max_kernel() - 1) / 2; }
  double tau() const { return tau_; }
  void set_tau(double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
    tau_ = tau;
  }
  ConvMode mode() const { return mode_; }
  void set_mode(ConvMode mode) {
    if (mode == ConvMode::separate && uses_filter_mask(variant_))
      throw UnsupportedModeError(
          "separate mode enumerates every slice, which is intractable for filterwise "
          "variants (2^F terms); use mode full");
    mode_ = mode;
  }
  double distill_logit_threshold() const { return distill_logit_threshold_; }
  void set_distill_logit_threshold(double t) { distill_logit_threshold_ = t; }

  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& bias() const { return bias_; }
  StructuralDistribution& dist() { return dist_; }
  const StructuralDistribution& dist() const { return dist_; }

  // Constant slice-mask bases used by expected_mask. joint: one row per
  // (k, f) slice. Otherwise: spatial rows per kernel candidate and, for
  // categorical filters, channel rows per filter count.
  const Tensor& joint_mask_rows() const { return joint_mask_rows_; }
  const Tensor& spatial_rows() const { return spatial_rows_; }
  const Tensor& channel_rows() const { return channel_rows_; }

  void collect_parameters(std::vector<Tensor>& out) const {
    out.push_back(weight_);
    if (bias_.defined()) out.push_back(bias_);
    collect_structural_parameters(out);
  }

  void collect_structural_parameters(std::vector<Tensor>& out) const {
    if (dist_.theta_joint.defined()) out.push_back(dist_.theta_joint);
    if (dist_.theta_kernel.defined()) out.push_back(dist_.theta_kernel);
    if (dist_.theta_filter.defined()) out.push_back(dist_.theta_filter);
    if (dist_.keys.defined()) out.push_back(dist_.keys);
  }

  void collect_named_parameters(const std::string& prefix,
                                std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".weight", weight_);
    if (bias_.defined()) out.emplace_back(prefix + ".bias", bias_);
    if (dist_.theta_joint.defined()) out.emplace_back(prefix + ".theta_joint", dist_.theta_joint);
    if (dist_.theta_kernel.defined())
      out.emplace_back(prefix + ".theta_kernel", dist_.theta_kernel);
    if (dist_.theta_filter.defined())
      out.emplace_back(prefix + ".theta_filter", dist_.theta_filter);
    if (dist_.keys.defined()) out.emplace_back(prefix + ".keys", dist_.keys);
  }

  // Full forward pass honoring this superkernel's mode. The activation is
  // applied after the masked convolution in full mode and inside each slice
  // term in separate mode; pass nullptr for a linear layer. rng may be null
  // for the noise-free sample modes.
  Tensor forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& activation,
                 Rng* rng, SampleMode sample_mode) const;

 private:
  void build_mask_bases();

  Variant variant_;
  SliceGrid grid_;
  int in_channels_;
  double tau_;
  ConvMode mode_ = ConvMode::full;
  double distill_logit_threshold_ = 0.0;
  bool hard_samples_ = false;
  Tensor weight_;
  Tensor bias_;
  StructuralDistribution dist_;
  Tensor joint_mask_rows_;  // {n_k*n_f, O*K*K}
  Tensor spatial_rows_;     // {n_k, K*K}
  Tensor channel_rows_;     // {n_f, O}
};

inline void SuperKernel::build_mask_bases() {
  const int K = grid_.max_kernel();
  const int O = grid_.max_filters;
  {
    std::vector<double> rows(static_cast<size_t>(grid_.n_kernels()) * K * K);
    for (int i = 0; i < grid_.n_kernels(); ++i) {
      const auto w = detail::centered_window(K, grid_.kernel_candidates[i]);
      std::copy(w.begin(), w.end(), rows.begin() + static_cast<size_t>(i) * K * K);
    }
    spatial_rows_ = Tensor::from_data({grid_.n_kernels(), K * K}, std::move(rows));
  }
  if (!uses_filter_mask(variant_)) {
    std::vector<double> rows(static_cast<size_t>(grid_.n_filters()) * O, 0.0);
    for (int j = 0; j < grid_.n_filters(); ++j)
      for (int o = 0; o < grid_.filter_candidates[j]; ++o)
        rows[static_cast<size_t>(j) * O + o] = 1.0;
    channel_rows_ = Tensor::from_data({grid_.n_filters(), O}, std::move(rows));
  }
  if (variant_ == Variant::joint) {
    const int S = grid_.n_kernels() * grid_.n_filters();
    std::vector<double> rows(static_cast<size_t>(S) * O * K * K);
    for (int i = 0; i < grid_.n_kernels(); ++i)
      for (int j = 0; j < grid_.n_filters(); ++j) {
        KernelChoice c;
        c.kernel_size = grid_.kernel_candidates[i];
        c.filter_count = grid_.filter_candidates[j];
        const Tensor m = slice_mask(grid_, variant_, c);
        std::copy(m.data().begin(), m.data().end(),
                  rows.begin() + static_cast<size_t>(i * grid_.n_filters() + j) * O * K * K);
      }
    joint_mask_rows_ = Tensor::from_data({S, O * K * K}, std::move(rows));
  }
}

// Convex combination of slice masks under the given structural weights,
// shape O_max x 1 x K_max x K_max. Joint sums explicit per-slice masks;
// the factorized/filterwise variants exploit that each slice mask is a
// spatial window times a channel indicator, so the sum separates into a
// spatial mixture broadcast against per-channel filter weights.
inline Tensor expected_mask(const SuperKernel& sk, const StructuralSample& w) {
  const int K = sk.grid().max_kernel();
  const int O = sk.out_channels();
  if (sk.variant() == Variant::joint) {
    const int S = sk.grid().n_kernels() * sk.grid().n_filters();
    Tensor flat = matmul(reshape(w.joint, {1, S}), sk.joint_mask_rows());
    return reshape(flat, {O, 1, K, K});
  }
  Tensor spatial = reshape(matmul(reshape(w.kernel, {1, sk.grid().n_kernels()}),
                                  sk.spatial_rows()),
                           {1, 1, K, K});
  Tensor channel;
  if (uses_filter_mask(sk.variant())) {
    channel = reshape(w.filter, {O, 1, 1, 1});
  } else {
    channel = reshape(matmul(reshape(w.filter, {1, sk.grid().n_filters()}),
                             sk.channel_rows()),
                      {O, 1, 1, 1});
  }
  return mul(channel, spatial);
}

// Single masked convolution: conv(weight * expected_mask, x) with the bias
// damped by its per-channel mask average. This one convolution equals the
// full weighted sum over slice convolutions whenever no activation
// intervenes, which is what makes the search affordable.
inline Tensor forward_full(const SuperKernel& sk, const Tensor& x, const StructuralSample& w) {
  Tensor m = expected_mask(sk, w);
  Tensor masked_w = mul(sk.weight(), m);
  Tensor masked_b;
  if (sk.bias().defined()) masked_b = mul(sk.bias(), bias_mask(m));
  return conv2d(x, masked_w, masked_b, 1, sk.padding());
}

inline Tensor forward_full(const SuperKernel& sk, const Tensor& x, Rng& rng,
                           bool hard = false) {
  return forward_full(sk, x, sample_structural_weights(sk.dist(), sk.tau(), rng, hard));
}

// Explicit weighted sum over every slice convolution with the activation
// applied inside each term. Exact for any activation but costs n_k * n_f
// convolutions; only the categorical variants keep that tractable.
inline Tensor forward_separate(const SuperKernel& sk, const Tensor& x,
                               const std::function<Tensor(const Tensor&)>& activation,
                               const StructuralSample& w) {
  if (uses_filter_mask(sk.variant()))
    throw UnsupportedModeError(
        "separate mode enumerates every slice, which is intractable for filterwise "
        "variants (2^F terms); use mode full");
  const auto& grid = sk.grid();
  Tensor acc;
  for (int i = 0; i < grid.n_kernels(); ++i)
    for (int j = 0; j < grid.n_filters(); ++j) {
      KernelChoice c;
      c.kernel_size = grid.kernel_candidates[i];
      c.filter_count = grid.filter_candidates[j];
      const Tensor m = slice_mask(grid, sk.variant(), c);
      Tensor b;
      if (sk.bias().defined()) b = mul(sk.bias(), bias_mask(m));
      Tensor term = conv2d(x, mul(sk.weight(), m), b, 1, sk.padding());
      if (activation) term = activation(term);
      Tensor coeff;
      if (sk.variant() == Variant::joint) {
        const int s = i * grid.n_filters() + j;
        coeff = slice(w.joint, 0, s, s + 1);
      } else {
        coeff = mul(slice(w.kernel, 0, i, i + 1), slice(w.filter, 0, j, j + 1));
      }
      Tensor weighted = mul(term, coeff);
      acc = acc.defined() ? add(acc, weighted) : weighted;
    }
  return acc;
}

inline Tensor forward_separate(const SuperKernel& sk, const Tensor& x,
                               const std::function<Tensor(const Tensor&)>& activation,
                               Rng& rng, bool hard = false) {
  return forward_separate(sk, x, activation,
                          sample_structural_weights(sk.dist(), sk.tau(), rng, hard));
}

// Collapses the structural distribution to its most likely discrete choice.
// Categorical parts take the argmax (first maximum wins, so ties fall to
// the smaller kernel and then the smaller filter count); Bernoulli parts
// keep filters whose effective logit exceeds the threshold, with an empty
// result falling back to the single strongest filter.
inline KernelChoice distill(const SuperKernel& sk) {
  const auto& grid = sk.grid();
  const auto& d = sk.dist();
  KernelChoice c;
  if (sk.variant() == Variant::joint) {
    const int64_t s = argmax(d.theta_joint.data());
    c.kernel_size = grid.kernel_candidates[s / grid.n_filters()];
    c.filter_count = grid.filter_candidates[s % grid.n_filters()];
    return c;
  }
  c.kernel_size = grid.kernel_candidates[argmax(d.theta_kernel.data())];
  if (!uses_filter_mask(sk.variant())) {
    c.filter_count = grid.filter_candidates[argmax(d.theta_filter.data())];
    return c;
  }
  c.uses_indices = true;
  const Tensor eff = effective_filter_logits(d);
  for (int i = 0; i < grid.max_filters; ++i)
    if (eff.data()[i] > sk.distill_logit_threshold()) c.filter_indices.push_back(i);
  if (c.filter_indices.empty())
    c.filter_indices.push_back(static_cast<int>(argmax(eff.data())));
  return c;
}

// A plain convolution extracted for one choice: the centered k x k window
// of the selected output channels. The bias keeps the k^2/K_max^2 damping
// the masked supernetwork applied, so outputs match it exactly rather than
// the choice's "ideal" standalone convolution.
struct MaterializedConv {
  Tensor weight;                 // O' x I x k x k
  Tensor bias;                   // O' (undefined if the superkernel had none)
  std::vector<int> out_indices;  // surviving channels, ascending
  int padding = 0;
};

inline MaterializedConv materialize(const SuperKernel& sk, const KernelChoice& choice) {
  validate_choice(sk.grid(), sk.variant(), choice);
  const int K = sk.grid().max_kernel();
  const int k = choice.kernel_size;
  const int off = (K - k) / 2;
  const auto channels = choice.selected_channels();
  const int I = sk.in_channels();
  MaterializedConv out;
  out.out_indices = channels;
  out.padding = (k - 1) / 2;
  std::vector<double> w(static_cast<size_t>(channels.size()) * I * k * k);
  const auto& src = sk.weight().data();
  for (size_t oi = 0; oi < channels.size(); ++oi)
    for (int ci = 0; ci < I; ++ci)
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x)
          w[((oi * I + ci) * k + y) * k + x] =
              src[((static_cast<size_t>(channels[oi]) * I + ci) * K + off + y) * K + off + x];
  out.weight = Tensor::from_data({static_cast<int>(channels.size()), I, k, k}, std::move(w), true);
  if (sk.bias().defined()) {
    // Reuse the mask -> bias-mask path so the damping factor is computed
    // bit-identically to what forward_full applies.
    const Tensor bm = bias_mask(slice_mask(sk.grid(), sk.variant(), choice));
    std::vector<double> b(channels.size());
    for (size_t oi = 0; oi < channels.size(); ++oi)
      b[oi] = sk.bias().data()[channels[oi]] * bm.data()[channels[oi]];
    out.bias = Tensor::from_data({static_cast<int>(channels.size())}, std::move(b), true);
  }
  return out;
}

// Re-embeds a discrete choice as a one-candidate superkernel over the
// materialized weights: the "distill, then wrap the result back up" step.
// Distilling the restriction selects everything it contains, which is what
// makes distillation idempotent.
inline SuperKernel restrict_to_choice(const SuperKernel& sk, const KernelChoice& choice,
                                      Rng& rng) {
  validate_choice(sk.grid(), sk.variant(), choice);
  SliceGrid grid;
  grid.kernel_candidates = {choice.kernel_size};
  if (uses_filter_mask(sk.variant())) {
    grid.max_filters = static_cast<int>(choice.filter_indices.size());
  } else {
    grid.filter_candidates = {choice.filter_count};
    grid.max_filters = choice.filter_count;
  }
  SuperKernel restricted(sk.variant(), grid, sk.in_channels(), sk.tau(), ConvMode::full, rng,
                         sk.bias().defined());
  const MaterializedConv mat = materialize(sk, choice);
  restricted.weight() = mat.weight;
  if (mat.bias.defined()) restricted.bias() = mat.bias;
  return restricted;
}

inline Tensor SuperKernel::forward(const Tensor& x,
                                   const std::function<Tensor(const Tensor&)>& activation,
                                   Rng* rng, SampleMode sample_mode) const {
  StructuralSample s;
  switch (sample_mode) {
    case SampleMode::stochastic:
      if (!rng) throw std::invalid_argument("stochastic forward needs an rng");
      s = sample_structural_weights(dist_, tau_, *rng, hard_samples_);
      break;
    case SampleMode::expected:
      s = expected_structural_weights(dist_);
      break;
    case SampleMode::discrete:
      s = choice_weights(grid_, variant_, distill(*this));
      break;
  }
  if (mode_ == ConvMode::separate) return forward_separate(*this, x, activation, s);
  Tensor y = forward_full(*this, x, s);
  return activation ? activation(y) : y;
}

}  // namespace sknas
