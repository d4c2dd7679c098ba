#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sknas/data.hpp"
#include "sknas/tensor.hpp"

namespace sknas {

inline double mse(const Tensor& a, const Tensor& b) {
  check_shape(a.shape() == b.shape(), "mse needs matching shapes, got " +
                                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double acc = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return acc / a.size();
}

// Peak signal-to-noise ratio in dB. Computed as 20*log10(peak) - 10*log10(mse)
// so that round decades of mse map to round dB values. Noise floors below
// 1e-12 report the 100 dB cap instead of drifting toward infinity.
inline double psnr_from_mse(double m, double peak = 1.0) {
  if (!(peak > 0.0)) throw std::invalid_argument("peak must be positive");
  if (m < 1e-12) return 100.0;
  return 20.0 * std::log10(peak) - 10.0 * std::log10(m);
}

inline double psnr(const Tensor& a, const Tensor& b, double peak = 1.0) {
  return psnr_from_mse(mse(a, b), peak);
}

namespace detail {

// 11-tap Gaussian, sigma 1.5, normalized to sum exactly 1.
inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(11);
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
      const double d = i - 5.0;
      v[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += v[i];
    }
    for (auto& x : v) x /= sum;
    return v;
  }();
  return w;
}

// Valid-region separable Gaussian blur of one H x W plane.
inline std::vector<double> blur_valid(const double* img, int h, int w) {
  const auto& win = ssim_window();
  const int oh = h - 10, ow = w - 10;
  std::vector<double> rows(static_cast<size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int t = 0; t < 11; ++t) acc += win[t] * img[y * w + x + t];
      rows[static_cast<size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int t = 0; t < 11; ++t) acc += win[t] * rows[static_cast<size_t>(y + t) * ow + x];
      out[static_cast<size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace detail

// Mean structural similarity over valid 11x11 Gaussian windows, averaged over
// channels (and batch entries for 4-d inputs). Identical inputs score exactly
// 1.0 because numerator and denominator are the same expressions bit for bit.
inline double ssim(const Tensor& a, const Tensor& b, double peak = 1.0) {
  check_shape(a.shape() == b.shape(), "ssim needs matching shapes, got " +
                                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  check_shape(a.ndim() == 3 || a.ndim() == 4,
              "ssim expects {C,H,W} or {N,C,H,W}, got " + shape_str(a.shape()));
  const int h = a.dim(a.ndim() - 2), w = a.dim(a.ndim() - 1);
  if (h < 11 || w < 11)
    throw std::invalid_argument("ssim needs at least 11x11 images, got " +
                                shape_str(a.shape()));
  const int planes = a.size() / (h * w);
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);

  double total = 0.0;
  const int oh = h - 10, ow = w - 10;
  std::vector<double> xx(static_cast<size_t>(h) * w), yy(xx.size()), xy(xx.size());
  for (int p = 0; p < planes; ++p) {
    const double* x = a.data().data() + static_cast<size_t>(p) * h * w;
    const double* y = b.data().data() + static_cast<size_t>(p) * h * w;
    for (size_t i = 0; i < xx.size(); ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mu_x = detail::blur_valid(x, h, w);
    const auto mu_y = detail::blur_valid(y, h, w);
    const auto m_xx = detail::blur_valid(xx.data(), h, w);
    const auto m_yy = detail::blur_valid(yy.data(), h, w);
    const auto m_xy = detail::blur_valid(xy.data(), h, w);
    double acc = 0.0;
    for (size_t i = 0; i < mu_x.size(); ++i) {
      const double var_x = m_xx[i] - mu_x[i] * mu_x[i];
      const double var_y = m_yy[i] - mu_y[i] * mu_y[i];
      const double cov = m_xy[i] - mu_x[i] * mu_y[i];
      const double num = (2.0 * mu_x[i] * mu_y[i] + c1) * (2.0 * cov + c2);
      const double den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (var_x + var_y + c2);
      acc += num / den;
    }
    total += acc / (static_cast<double>(oh) * ow);
  }
  return total / planes;
}

// ---------------------------------------------------------------------------
// Geometric self-ensembling: run the model on all eight dihedral transforms
// of the input, undo each transform on the output, average.

namespace detail {

// Counter-clockwise quarter turns of an NCHW tensor, k in [0,4).
inline Tensor rot90(const Tensor& t, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return t;
  const int n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  const int oh = (k % 2 == 0) ? h : w;
  const int ow = (k % 2 == 0) ? w : h;
  std::vector<double> out(t.data().size());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = t.data().data() + (static_cast<size_t>(b) * c + ch) * h * w;
      double* dst = out.data() + (static_cast<size_t>(b) * c + ch) * oh * ow;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int oy = 0, ox = 0;
          switch (k) {
            case 1: oy = w - 1 - x; ox = y; break;
            case 2: oy = h - 1 - y; ox = w - 1 - x; break;
            default: oy = x; ox = h - 1 - y; break;
          }
          dst[oy * ow + ox] = src[y * w + x];
        }
    }
  return Tensor::from_data({n, c, oh, ow}, std::move(out));
}

inline Tensor hflip(const Tensor& t) {
  const int n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  std::vector<double> out(t.data().size());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = t.data().data() + (static_cast<size_t>(b) * c + ch) * h * w;
      double* dst = out.data() + (static_cast<size_t>(b) * c + ch) * h * w;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) dst[y * w + x] = src[y * w + w - 1 - x];
    }
  return Tensor::from_data(t.shape(), std::move(out));
}

}  // namespace detail

inline Tensor self_ensemble(const std::function<Tensor(const Tensor&)>& model,
                            const Tensor& x) {
  check_shape(x.ndim() == 4, "self_ensemble expects NCHW input");
  Tensor acc;
  for (int flip = 0; flip < 2; ++flip)
    for (int k = 0; k < 4; ++k) {
      const Tensor in = detail::rot90(flip ? detail::hflip(x) : x, k);
      Tensor y = detail::rot90(model(in), 4 - k);
      if (flip) y = detail::hflip(y);
      acc = acc.defined() ? add(acc, y) : y;
    }
  return scale(acc, 1.0 / 8.0);
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation.

struct EvalResult {
  double psnr = 0.0;
  double ssim = 0.0;
  int count = 0;
};

// Mean PSNR/SSIM of model outputs against the clean references. Outputs are
// clamped to [0, peak] first, matching how a denoised image would be saved.
inline EvalResult evaluate(const std::function<Tensor(const Tensor&)>& model,
                           const std::vector<ImagePair>& items, bool use_ensemble = false,
                           double peak = 1.0) {
  if (items.empty()) throw std::invalid_argument("cannot evaluate on an empty dataset");
  EvalResult res;
  for (const auto& item : items) {
    const Shape s = item.noisy.shape();
    const Tensor x = reshape(item.noisy, {1, s[0], s[1], s[2]});
    Tensor y = use_ensemble ? self_ensemble(model, x) : model(x);
    check_shape(y.shape() == x.shape(), "model changed the image shape");
    std::vector<double> clamped(y.data());
    for (auto& v : clamped)
      v = v < 0.0 ? 0.0 : (v > peak ? peak : v);
    const Tensor out = Tensor::from_data(s, std::move(clamped));
    res.psnr += psnr(out, item.clean, peak);
    res.ssim += ssim(out, item.clean, peak);
    ++res.count;
  }
  res.psnr /= res.count;
  res.ssim /= res.count;
  return res;
}

}  // namespace sknas
