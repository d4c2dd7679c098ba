#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sknas/arch_spec.hpp"
#include "sknas/superkernel.hpp"
#include "sknas/tensor.hpp"

namespace sknas {

// How encoder widths grow with depth: either double per level or add
// base_channels per level.
enum class ChannelRule { doubled, arithmetic };

inline const char* channel_rule_name(ChannelRule r) {
  return r == ChannelRule::doubled ? "double" : "arithmetic";
}

inline ChannelRule channel_rule_from_name(const std::string& s) {
  if (s == "double") return ChannelRule::doubled;
  if (s == "arithmetic") return ChannelRule::arithmetic;
  throw std::invalid_argument("unknown channel rule '" + s + "' (expected double|arithmetic)");
}

// Declarative description of a denoising model: an ensemble of `subnetworks`
// U-Nets whose DCR blocks carry searchable convolutions. Everything a model
// needs to be rebuilt is here, so it doubles as the checkpoint header.
struct ModelSpec {
  int in_channels = 3;
  int depth = 2;             // number of downsamplings
  int base_channels = 8;     // width at full resolution
  int blocks_per_level = 2;  // DCR blocks per U-Net level
  int subnetworks = 1;
  std::vector<int> kernel_candidates = {3, 5};
  std::vector<double> growth_rates = {0.2, 0.4, 0.6};
  ChannelRule channel_rule = ChannelRule::doubled;
  bool skip_init = false;  // scale each DCR residual branch by a learned scalar, init 0
  int cab_reduction = 4;
  Variant variant = Variant::joint;
  ConvMode mode = ConvMode::full;
  double tau = 1.0;

  int level_channels(int d) const {
    return channel_rule == ChannelRule::doubled ? base_channels << d
                                                : base_channels * (d + 1);
  }

  void validate() const {
    if (in_channels < 1) throw std::invalid_argument("in_channels must be positive");
    if (depth < 1) throw std::invalid_argument("depth must be at least 1");
    if (base_channels < 1) throw std::invalid_argument("base_channels must be positive");
    if (blocks_per_level < 1) throw std::invalid_argument("blocks_per_level must be positive");
    if (subnetworks < 1) throw std::invalid_argument("subnetworks must be positive");
    if (cab_reduction < 1) throw std::invalid_argument("cab_reduction must be positive");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
    if (kernel_candidates.empty()) throw std::invalid_argument("no kernel candidates");
    for (size_t i = 0; i < kernel_candidates.size(); ++i) {
      const int k = kernel_candidates[i];
      if (k <= 0 || k % 2 == 0)
        throw std::invalid_argument("kernel candidates must be odd and positive");
      if (i > 0 && k <= kernel_candidates[i - 1])
        throw std::invalid_argument("kernel candidates must be strictly increasing");
    }
    if (growth_rates.empty()) throw std::invalid_argument("no growth rates");
    for (double r : growth_rates)
      if (!(r > 0.0)) throw std::invalid_argument("growth rates must be positive");
    if (mode == ConvMode::separate && uses_filter_mask(variant))
      throw UnsupportedModeError(
          "separate mode enumerates every slice, which is intractable for filterwise "
          "variants (2^F terms); use mode full");
  }

  // Candidate output widths of a searchable conv inside a block of the given
  // width, one per growth rate, deduplicated and ascending.
  std::vector<int> filter_candidates_for(int width) const {
    std::vector<int> fc;
    for (double r : growth_rates)
      fc.push_back(std::max(1, static_cast<int>(std::lround(r * width))));
    std::sort(fc.begin(), fc.end());
    fc.erase(std::unique(fc.begin(), fc.end()), fc.end());
    return fc;
  }

  SliceGrid grid_for(int width) const {
    SliceGrid grid;
    grid.kernel_candidates = kernel_candidates;
    const auto fc = filter_candidates_for(width);
    grid.max_filters = fc.back();
    if (!uses_filter_mask(variant)) grid.filter_candidates = fc;
    return grid;
  }
};

// Plain convolution layer, stride and same-padding baked in at construction.
class Conv2dLayer {
 public:
  Conv2dLayer(int in_ch, int out_ch, int kernel, int stride, Rng& rng, bool zero_init = false)
      : stride_(stride), padding_((kernel - 1) / 2) {
    if (zero_init) {
      weight_ = Tensor::zeros({out_ch, in_ch, kernel, kernel}, true);
    } else {
      const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * kernel * kernel));
      weight_ = Tensor::randn(rng, {out_ch, in_ch, kernel, kernel}, stddev, true);
    }
    bias_ = Tensor::zeros({out_ch}, true);
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

  int in_channels() const { return weight_.dim(1); }
  int out_channels() const { return weight_.dim(0); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  // Drops input channels not listed in keep (ascending); used after upstream
  // filters were pruned away by distillation.
  void slice_input_channels(const std::vector<int>& keep) {
    const int O = weight_.dim(0), I = weight_.dim(1), K = weight_.dim(2);
    const int In = static_cast<int>(keep.size());
    std::vector<double> w(static_cast<size_t>(O) * In * K * K);
    const auto& src = weight_.data();
    for (int o = 0; o < O; ++o)
      for (int j = 0; j < In; ++j) {
        const int i = keep[j];
        if (i < 0 || i >= I) throw std::invalid_argument("input channel index out of range");
        std::copy(src.begin() + (static_cast<size_t>(o) * I + i) * K * K,
                  src.begin() + (static_cast<size_t>(o) * I + i + 1) * K * K,
                  w.begin() + (static_cast<size_t>(o) * In + j) * K * K);
      }
    weight_ = Tensor::from_data({O, In, K, K}, std::move(w), true);
  }

  void collect(std::vector<Tensor>& out) const {
    out.push_back(weight_);
    out.push_back(bias_);
  }
  void collect_named(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back(prefix + ".weight", weight_);
    out.emplace_back(prefix + ".bias", bias_);
  }

 private:
  Tensor weight_, bias_;
  int stride_;
  int padding_;
};

// Channel attention: squeeze to per-channel statistics, gate each channel by
// a sigmoid. The expand conv starts at zero so the gate opens at exactly 0.5.
class CabBlock {
 public:
  CabBlock(int channels, int reduction, Rng& rng)
      : reduce_(channels, std::max(1, channels / reduction), 1, 1, rng),
        expand_(std::max(1, channels / reduction), channels, 1, 1, rng, /*zero_init=*/true) {}

  Tensor forward(const Tensor& x) const {
    Tensor g = global_avg_pool2d(x);
    g = relu(reduce_.forward(g));
    g = sigmoid(expand_.forward(g));
    return mul(x, g);
  }

  void collect(std::vector<Tensor>& out) const {
    reduce_.collect(out);
    expand_.collect(out);
  }
  void collect_named(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
    reduce_.collect_named(prefix + ".reduce", out);
    expand_.collect_named(prefix + ".expand", out);
  }

 private:
  Conv2dLayer reduce_, expand_;
};

// A convolution that is either a superkernel (searchable) or an ordinary conv:
// the latter both for baseline models (maximal slice) and after distillation.
class SearchConv {
 public:
  SearchConv(const ModelSpec& spec, const SliceGrid& grid, int in_ch, Rng& rng) {
    if (spec.variant == Variant::none) {
      const int K = grid.max_kernel();
      const int O = grid.max_filters;
      const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * K * K));
      weight_ = Tensor::randn(rng, {O, in_ch, K, K}, stddev, true);
      bias_ = Tensor::zeros({O}, true);
      padding_ = (K - 1) / 2;
      out_channels_ = O;
    } else {
      sk_.emplace(spec.variant, grid, in_ch, spec.tau, spec.mode, rng);
      padding_ = sk_->padding();
      out_channels_ = sk_->out_channels();
    }
  }

  bool searchable() const { return sk_.has_value(); }
  int out_channels() const { return out_channels_; }
  SuperKernel& superkernel() { return *sk_; }
  const SuperKernel& superkernel() const { return *sk_; }

  Tensor forward(const Tensor& x, const std::function<Tensor(const Tensor&)>& act, Rng* rng,
                 SampleMode mode) const {
    if (sk_) return sk_->forward(x, act, rng, mode);
    Tensor y = conv2d(x, weight_, bias_, 1, padding_);
    return act ? act(y) : y;
  }

  KernelChoice distill_choice() const { return distill(*sk_); }

  // Freezes the given slice in place: the superkernel becomes an ordinary
  // conv over the surviving output channels. Returns those channel indices.
  std::vector<int> apply_choice(const KernelChoice& choice) {
    MaterializedConv m = materialize(*sk_, choice);
    weight_ = m.weight;
    bias_ = m.bias;
    padding_ = m.padding;
    out_channels_ = static_cast<int>(m.out_indices.size());
    sk_.reset();
    return m.out_indices;
  }

  void slice_input_channels(const std::vector<int>& keep) {
    if (sk_) throw std::logic_error("slice_input_channels needs a materialized conv");
    const int O = weight_.dim(0), I = weight_.dim(1), K = weight_.dim(2);
    const int In = static_cast<int>(keep.size());
    std::vector<double> w(static_cast<size_t>(O) * In * K * K);
    const auto& src = weight_.data();
    for (int o = 0; o < O; ++o)
      for (int j = 0; j < In; ++j) {
        const int i = keep[j];
        if (i < 0 || i >= I) throw std::invalid_argument("input channel index out of range");
        std::copy(src.begin() + (static_cast<size_t>(o) * I + i) * K * K,
                  src.begin() + (static_cast<size_t>(o) * I + i + 1) * K * K,
                  w.begin() + (static_cast<size_t>(o) * In + j) * K * K);
      }
    weight_ = Tensor::from_data({O, In, K, K}, std::move(w), true);
  }

  void collect(std::vector<Tensor>& out) const {
    if (sk_) {
      sk_->collect_parameters(out);
    } else {
      out.push_back(weight_);
      out.push_back(bias_);
    }
  }
  void collect_structural(std::vector<Tensor>& out) const {
    if (sk_) sk_->collect_structural_parameters(out);
  }
  void collect_named(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
    if (sk_) {
      sk_->collect_named_parameters(prefix, out);
    } else {
      out.emplace_back(prefix + ".weight", weight_);
      out.emplace_back(prefix + ".bias", bias_);
    }
  }

 private:
  std::optional<SuperKernel> sk_;
  Tensor weight_, bias_;  // the ordinary-conv path
  int padding_ = 0;
  int out_channels_ = 0;
};

// Densely connected residual block: two searchable convs growing the feature
// stack, one ordinary conv folding it back to the block width, all ReLU, plus
// the identity. With skip_init the residual branch is scaled by a learned
// scalar starting at zero, so a fresh block is exactly the identity map.
class DcrBlock {
 public:
  DcrBlock(int width, const ModelSpec& spec, Rng& rng)
      : width_(width),
        conv1_(spec, spec.grid_for(width), width, rng),
        conv2_(spec, spec.grid_for(width), width + conv1_.out_channels(), rng),
        conv3_(width + conv1_.out_channels() + conv2_.out_channels(), width, 3, 1, rng),
        skip_init_(spec.skip_init) {
    if (skip_init_) alpha_ = Tensor::zeros({1}, true);
  }

  Tensor forward(const Tensor& x, Rng* rng, SampleMode mode) const {
    const auto act = [](const Tensor& t) { return relu(t); };
    Tensor y1 = conv1_.forward(x, act, rng, mode);
    Tensor y2 = conv2_.forward(concat({x, y1}, 1), act, rng, mode);
    Tensor branch = relu(conv3_.forward(concat({x, y1, y2}, 1)));
    if (skip_init_) branch = mul(branch, alpha_);
    return add(x, branch);
  }

  // Distills both searchable convs. With `given` the recorded choices are
  // applied verbatim; otherwise choices come from the structural logits and
  // are appended to `out`.
  void distill(const std::string& prefix, const ArchitectureSpec* given,
               ArchitectureSpec& out) {
    if (!conv1_.searchable()) return;
    const auto pick = [&](const SearchConv& c, const std::string& path) {
      if (!given) return c.distill_choice();
      const ArchEntry* e = given->find(path);
      if (!e) throw ArchParseError("architecture spec has no entry for " + path);
      if (e->variant != c.superkernel().variant())
        throw ArchParseError("variant mismatch for " + path + ": spec says " +
                             variant_name(e->variant) + ", model has " +
                             variant_name(c.superkernel().variant()));
      return e->choice;
    };
    const Variant v = conv1_.superkernel().variant();
    const int o1_full = conv1_.out_channels();

    const KernelChoice c1 = pick(conv1_, prefix + ".conv1");
    const KernelChoice c2 = pick(conv2_, prefix + ".conv2");
    out.entries.push_back({prefix + ".conv1", v, c1});
    out.entries.push_back({prefix + ".conv2", v, c2});

    const std::vector<int> sel1 = conv1_.apply_choice(c1);
    const std::vector<int> sel2 = conv2_.apply_choice(c2);

    std::vector<int> keep2;
    for (int i = 0; i < width_; ++i) keep2.push_back(i);
    for (int i : sel1) keep2.push_back(width_ + i);
    conv2_.slice_input_channels(keep2);

    std::vector<int> keep3 = keep2;
    for (int i : sel2) keep3.push_back(width_ + o1_full + i);
    conv3_.slice_input_channels(keep3);
  }

  void for_each_superkernel(const std::function<void(SuperKernel&)>& fn) {
    if (conv1_.searchable()) fn(conv1_.superkernel());
    if (conv2_.searchable()) fn(conv2_.superkernel());
  }

  void collect(std::vector<Tensor>& out) const {
    conv1_.collect(out);
    conv2_.collect(out);
    conv3_.collect(out);
    if (alpha_.defined()) out.push_back(alpha_);
  }
  void collect_structural(std::vector<Tensor>& out) const {
    conv1_.collect_structural(out);
    conv2_.collect_structural(out);
  }
  void collect_named(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
    conv1_.collect_named(prefix + ".conv1", out);
    conv2_.collect_named(prefix + ".conv2", out);
    conv3_.collect_named(prefix + ".conv3", out);
    if (alpha_.defined()) out.emplace_back(prefix + ".alpha", alpha_);
  }

 private:
  int width_;
  SearchConv conv1_, conv2_;
  Conv2dLayer conv3_;
  bool skip_init_;
  Tensor alpha_;
};

// One U-Net subnetwork. Encoder level d holds features at 1/2^d resolution:
// a strided conv enters the level (stride 1 at d=0), then DCR blocks. The
// decoder mirrors it with pixel-shuffle upsampling, concatenation with the
// encoder skip, channel attention over the concatenated stack, a conv back
// to the level width, and DCR blocks.
class UNet {
 public:
  UNet(const ModelSpec& spec, Rng& rng) : depth_(spec.depth) {
    for (int d = 0; d <= depth_; ++d) {
      const int in_ch = d == 0 ? spec.in_channels : spec.level_channels(d - 1);
      const int out_ch = spec.level_channels(d);
      enc_convs_.emplace_back(in_ch, out_ch, 3, d == 0 ? 1 : 2, rng);
      auto& blocks = enc_blocks_.emplace_back();
      for (int b = 0; b < spec.blocks_per_level; ++b) blocks.emplace_back(out_ch, spec, rng);
    }
    for (int d = depth_ - 1; d >= 0; --d) {
      const int c = spec.level_channels(d);
      up_convs_.emplace_back(spec.level_channels(d + 1), 4 * c, 3, 1, rng);
      cabs_.emplace_back(2 * c, spec.cab_reduction, rng);
      dec_convs_.emplace_back(2 * c, c, 3, 1, rng);
      auto& blocks = dec_blocks_.emplace_back();
      for (int b = 0; b < spec.blocks_per_level; ++b) blocks.emplace_back(c, spec, rng);
    }
  }

  Tensor forward(const Tensor& x, Rng* rng, SampleMode mode) const {
    std::vector<Tensor> skips;
    Tensor h = x;
    for (int d = 0; d <= depth_; ++d) {
      h = relu(enc_convs_[d].forward(h));
      for (const auto& b : enc_blocks_[d]) h = b.forward(h, rng, mode);
      if (d < depth_) skips.push_back(h);
    }
    for (int i = 0; i < depth_; ++i) {
      const int d = depth_ - 1 - i;  // decoder stage i produces level-d features
      Tensor up = pixel_shuffle(up_convs_[i].forward(h), 2);
      Tensor cat = concat({skips[d], up}, 1);
      h = relu(dec_convs_[i].forward(cabs_[i].forward(cat)));
      for (const auto& b : dec_blocks_[i]) h = b.forward(h, rng, mode);
    }
    return h;
  }

  void distill(const std::string& prefix, const ArchitectureSpec* given,
               ArchitectureSpec& out) {
    for (int d = 0; d <= depth_; ++d)
      for (size_t b = 0; b < enc_blocks_[d].size(); ++b)
        enc_blocks_[d][b].distill(
            prefix + ".enc" + std::to_string(d) + ".block" + std::to_string(b), given, out);
    for (int i = 0; i < depth_; ++i) {
      const int d = depth_ - 1 - i;
      for (size_t b = 0; b < dec_blocks_[i].size(); ++b)
        dec_blocks_[i][b].distill(
            prefix + ".dec" + std::to_string(d) + ".block" + std::to_string(b), given, out);
    }
  }

  void for_each_superkernel(const std::function<void(SuperKernel&)>& fn) {
    for (auto& level : enc_blocks_)
      for (auto& b : level) b.for_each_superkernel(fn);
    for (auto& level : dec_blocks_)
      for (auto& b : level) b.for_each_superkernel(fn);
  }

  void collect(std::vector<Tensor>& out) const {
    for (int d = 0; d <= depth_; ++d) {
      enc_convs_[d].collect(out);
      for (const auto& b : enc_blocks_[d]) b.collect(out);
    }
    for (int i = 0; i < depth_; ++i) {
      up_convs_[i].collect(out);
      cabs_[i].collect(out);
      dec_convs_[i].collect(out);
      for (const auto& b : dec_blocks_[i]) b.collect(out);
    }
  }
  void collect_structural(std::vector<Tensor>& out) const {
    for (const auto& level : enc_blocks_)
      for (const auto& b : level) b.collect_structural(out);
    for (const auto& level : dec_blocks_)
      for (const auto& b : level) b.collect_structural(out);
  }
  void collect_named(const std::string& prefix,
                     std::vector<std::pair<std::string, Tensor>>& out) const {
    for (int d = 0; d <= depth_; ++d) {
      const std::string lvl = prefix + ".enc" + std::to_string(d);
      enc_convs_[d].collect_named(lvl + ".conv", out);
      for (size_t b = 0; b < enc_blocks_[d].size(); ++b)
        enc_blocks_[d][b].collect_named(lvl + ".block" + std::to_string(b), out);
    }
    for (int i = 0; i < depth_; ++i) {
      const int d = depth_ - 1 - i;
      const std::string lvl = prefix + ".dec" + std::to_string(d);
      up_convs_[i].collect_named(lvl + ".up", out);
      cabs_[i].collect_named(lvl + ".cab", out);
      dec_convs_[i].collect_named(lvl + ".conv", out);
      for (size_t b = 0; b < dec_blocks_[i].size(); ++b)
        dec_blocks_[i][b].collect_named(lvl + ".block" + std::to_string(b), out);
    }
  }

 private:
  int depth_;
  std::vector<Conv2dLayer> enc_convs_;
  std::vector<std::vector<DcrBlock>> enc_blocks_;
  std::vector<Conv2dLayer> up_convs_;  // indexed by decoder stage (innermost first)
  std::vector<CabBlock> cabs_;
  std::vector<Conv2dLayer> dec_convs_;
  std::vector<std::vector<DcrBlock>> dec_blocks_;
};

// The full denoising model: subnetwork U-Nets run in parallel on the input,
// their feature stacks are concatenated, gated by channel attention, folded
// to image channels by a zero-initialized head conv, and added to the input.
// A fresh model is therefore exactly the identity map.
class Model {
 public:
  Model(const ModelSpec& spec, Rng& rng)
      : spec_(validated(spec)),
        fusion_(spec.subnetworks * spec.base_channels, spec.cab_reduction, rng),
        head_(spec.subnetworks * spec.base_channels, spec.in_channels, 3, 1, rng,
              /*zero_init=*/true) {
    for (int i = 0; i < spec_.subnetworks; ++i) nets_.emplace_back(spec_, rng);
  }

  const ModelSpec& spec() const { return spec_; }

  Tensor forward(const Tensor& x, Rng* rng, SampleMode mode) const {
    if (x.ndim() != 4 || x.dim(1) != spec_.in_channels)
      throw ShapeError("model expects NCHW input with " + std::to_string(spec_.in_channels) +
                       " channels, got " + shape_str(x.shape()));
    const int div = 1 << spec_.depth;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
      throw ShapeError("input " + shape_str(x.shape()) + " is not divisible by 2^depth = " +
                       std::to_string(div));
    std::vector<Tensor> feats;
    for (const auto& net : nets_) feats.push_back(net.forward(x, rng, mode));
    Tensor cat = feats.size() == 1 ? feats[0] : concat(feats, 1);
    return add(x, head_.forward(fusion_.forward(cat)));
  }

  // Picks the strongest slice of every superkernel and freezes it in place.
  // Returns the choices; a model without superkernels is left untouched and
  // yields an empty spec.
  ArchitectureSpec distill() {
    ArchitectureSpec spec;
    for (size_t i = 0; i < nets_.size(); ++i)
      nets_[i].distill("net" + std::to_string(i), nullptr, spec);
    return spec;
  }

  // Applies previously recorded choices (e.g. from a checkpoint) instead of
  // consulting the structural logits.
  void apply_architecture(const ArchitectureSpec& arch) {
    ArchitectureSpec applied;
    for (size_t i = 0; i < nets_.size(); ++i)
      nets_[i].distill("net" + std::to_string(i), &arch, applied);
    if (applied.entries.size() != arch.entries.size())
      throw ArchParseError("architecture spec has " + std::to_string(arch.entries.size()) +
                           " entries but the model used " +
                           std::to_string(applied.entries.size()));
  }

  // Every superkernel owns at least one structural tensor, so this is exact.
  bool has_superkernels() const { return !structural_parameters().empty(); }

  void set_tau(double tau) {
    spec_.tau = tau;
    for_each_superkernel([&](SuperKernel& sk) { sk.set_tau(tau); });
  }

  void set_distill_logit_threshold(double t) {
    for_each_superkernel([&](SuperKernel& sk) { sk.set_distill_logit_threshold(t); });
  }

  void for_each_superkernel(const std::function<void(SuperKernel&)>& fn) {
    for (auto& net : nets_) net.for_each_superkernel(fn);
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& net : nets_) net.collect(out);
    fusion_.collect(out);
    head_.collect(out);
    return out;
  }

  std::vector<Tensor> structural_parameters() const {
    std::vector<Tensor> out;
    for (const auto& net : nets_) net.collect_structural(out);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < nets_.size(); ++i)
      nets_[i].collect_named("net" + std::to_string(i), out);
    fusion_.collect_named("fusion", out);
    head_.collect_named("head", out);
    return out;
  }

 private:
  static ModelSpec validated(ModelSpec spec) {
    spec.validate();
    return spec;
  }

  ModelSpec spec_;
  std::vector<UNet> nets_;
  CabBlock fusion_;
  Conv2dLayer head_;
};

inline long long parameter_count(const Model& model) {
  long long n = 0;
  for (const auto& t : model.parameters()) n += t.size();
  return n;
}

}  // namespace sknas
