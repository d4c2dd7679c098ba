#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sknas/rng.hpp"
#include "sknas/tensor.hpp"

namespace sknas {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// The file is not an image container at all, or its header is inconsistent.
struct FormatError : DataError {
  using DataError::DataError;
};
// The header parsed fine but the payload ends early.
struct TruncatedError : DataError {
  using DataError::DataError;
};

// One clean/noisy training pair, pixels in [0,1], tensors shaped {C,H,W}.
struct ImagePair {
  std::string name;
  std::string group;
  double sigma = 0.0;
  Tensor clean, noisy;
};

struct DataConfig {
  int count = 64;
  int height = 32;
  int width = 32;
  int channels = 3;
  double sigma = 25.0 / 255.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (count < 1) throw std::invalid_argument("image count must be positive");
    if (height < 1 || width < 1 || channels < 1)
      throw std::invalid_argument("image dimensions must be positive");
    if (sigma < 0.0) throw std::invalid_argument("noise sigma must be non-negative");
  }
};

namespace detail {

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

inline void fill_gradient(std::vector<double>& px, int c, int h, int w, Rng& rng) {
  for (int ch = 0; ch < c; ++ch) {
    const double base = rng.uniform(0.1, 0.9);
    const double gx = rng.uniform(-0.8, 0.8);
    const double gy = rng.uniform(-0.8, 0.8);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double fx = w > 1 ? static_cast<double>(x) / (w - 1) : 0.0;
        const double fy = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
        px[(static_cast<size_t>(ch) * h + y) * w + x] = clamp01(base + gx * fx + gy * fy);
      }
  }
}

inline void fill_rectangles(std::vector<double>& px, int c, int h, int w, Rng& rng) {
  for (int ch = 0; ch < c; ++ch) {
    const double bg = rng.uniform(0.0, 1.0);
    std::fill(px.begin() + static_cast<size_t>(ch) * h * w,
              px.begin() + static_cast<size_t>(ch + 1) * h * w, bg);
  }
  const int n = 3 + rng.uniform_int(4);
  for (int r = 0; r < n; ++r) {
    const int x0 = rng.uniform_int(w);
    const int y0 = rng.uniform_int(h);
    const int x1 = x0 + 1 + rng.uniform_int(std::max(1, w - x0));
    const int y1 = y0 + 1 + rng.uniform_int(std::max(1, h - y0));
    for (int ch = 0; ch < c; ++ch) {
      const double v = rng.uniform(0.0, 1.0);
      for (int y = y0; y < std::min(y1, h); ++y)
        for (int x = x0; x < std::min(x1, w); ++x)
          px[(static_cast<size_t>(ch) * h + y) * w + x] = v;
    }
  }
}

inline void fill_sinusoid(std::vector<double>& px, int c, int h, int w, Rng& rng) {
  constexpr double kTau = 6.283185307179586;
  const double fx = rng.uniform(0.5, 3.0);
  const double fy = rng.uniform(0.5, 3.0);
  const double amp = rng.uniform(0.2, 0.45);
  for (int ch = 0; ch < c; ++ch) {
    const double phase = rng.uniform(0.0, kTau);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double arg = kTau * (fx * x / w + fy * y / h) + phase;
        px[(static_cast<size_t>(ch) * h + y) * w + x] =
            clamp01(0.5 + amp * std::sin(arg));
      }
  }
}

}  // namespace detail

// Deterministic toy corpus: piecewise-smooth content in three groups, plus
// clipped additive Gaussian noise. Every image draws from its own derived
// stream, so the set is stable under reordering and the same seed always
// produces the same bytes.
inline std::vector<ImagePair> generate_synthetic_set(const DataConfig& cfg) {
  cfg.validate();
  static const char* kGroups[] = {"gradients", "rectangles", "sinusoids"};
  Rng master(cfg.seed);
  std::vector<ImagePair> out;
  out.reserve(cfg.count);
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng = master.derive(static_cast<std::uint64_t>(i));
    const int g = i % 3;
    std::vector<double> clean(static_cast<size_t>(cfg.channels) * cfg.height * cfg.width);
    switch (g) {
      case 0: detail::fill_gradient(clean, cfg.channels, cfg.height, cfg.width, rng); break;
      case 1: detail::fill_rectangles(clean, cfg.channels, cfg.height, cfg.width, rng); break;
      default: detail::fill_sinusoid(clean, cfg.channels, cfg.height, cfg.width, rng); break;
    }
    std::vector<double> noisy(clean.size());
    for (size_t j = 0; j < clean.size(); ++j)
      noisy[j] = cfg.sigma == 0.0 ? clean[j]
                                  : detail::clamp01(clean[j] + cfg.sigma * rng.normal());
    ImagePair pair;
    char name[32];
    std::snprintf(name, sizeof(name), "%s_%03d", kGroups[g], i);
    pair.name = name;
    pair.group = kGroups[g];
    pair.sigma = cfg.sigma;
    pair.clean = Tensor::from_data({cfg.channels, cfg.height, cfg.width}, std::move(clean));
    pair.noisy = Tensor::from_data({cfg.channels, cfg.height, cfg.width}, std::move(noisy));
    out.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// SKNI image container: "SKNI", u32 version, u32 height/width/channels, then
// height*width*channels float32 values, channel-major, all little endian.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, size_t& pos, const char* what) {
  if (pos + 4 > in.size()) throw TruncatedError(std::string("file ends inside ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path + "'");
}

}  // namespace detail

inline constexpr std::uint32_t kImageFormatVersion = 1;

inline void write_image(const std::string& path, const Tensor& chw) {
  if (chw.ndim() != 3) throw ShapeError("write_image expects {C,H,W}, got " +
                                        shape_str(chw.shape()));
  std::string out;
  out += "SKNI";
  detail::put_u32(out, kImageFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(chw.dim(1)));
  detail::put_u32(out, static_cast<std::uint32_t>(chw.dim(2)));
  detail::put_u32(out, static_cast<std::uint32_t>(chw.dim(0)));
  for (int i = 0; i < chw.size(); ++i) {
    const float f = static_cast<float>(chw.data()[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::put_u32(out, bits);
  }
  detail::write_file(path, out);
}

inline Tensor read_image(const std::string& path) {
  const std::string in = detail::read_file(path);
  if (in.size() < 4 || in.compare(0, 4, "SKNI") != 0)
    throw FormatError("'" + path + "' is not an SKNI image (bad magic)");
  size_t pos = 4;
  const std::uint32_t version = detail::get_u32(in, pos, "header");
  if (version != kImageFormatVersion)
    throw FormatError("unsupported SKNI version " + std::to_string(version));
  const std::uint32_t h = detail::get_u32(in, pos, "header");
  const std::uint32_t w = detail::get_u32(in, pos, "header");
  const std::uint32_t c = detail::get_u32(in, pos, "header");
  constexpr std::uint32_t kDimCap = 1u << 20;
  if (h == 0 || w == 0 || c == 0 || h > kDimCap || w > kDimCap || c > kDimCap)
    throw FormatError("implausible SKNI dimensions " + std::to_string(h) + "x" +
                      std::to_string(w) + "x" + std::to_string(c));
  const size_t n = static_cast<size_t>(h) * w * c;
  std::vector<double> px(n);
  for (size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = detail::get_u32(in, pos, "pixel data");
    float f;
    std::memcpy(&f, &bits, 4);
    px[i] = f;
  }
  if (pos != in.size())
    throw FormatError("'" + path + "' has " + std::to_string(in.size() - pos) +
                      " trailing bytes");
  return Tensor::from_data({static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)},
                           std::move(px));
}

// ---------------------------------------------------------------------------
// Dataset on disk: one SKNI pair per image plus a line-oriented manifest.

inline void save_dataset(const std::string& dir, const std::vector<ImagePair>& items) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::string manifest = "# dataset manifest v1\n";
  for (const auto& item : items) {
    const std::string clean_rel = item.name + "_clean.skni";
    const std::string noisy_rel = item.name + "_noisy.skni";
    write_image((fs::path(dir) / clean_rel).string(), item.clean);
    write_image((fs::path(dir) / noisy_rel).string(), item.noisy);
    char sigma[32];
    std::snprintf(sigma, sizeof(sigma), "%.17g", item.sigma);
    manifest += "image " + clean_rel + " " + noisy_rel + " group=" + item.group +
                " sigma=" + sigma + "\n";
  }
  detail::write_file((fs::path(dir) / "manifest.txt").string(), manifest);
}

inline std::vector<ImagePair> load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(manifest_path).parent_path();
  std::istringstream is(detail::read_file(manifest_path));
  std::vector<ImagePair> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag, clean_rel, noisy_rel, group_kv, sigma_kv;
    if (!(ls >> tag >> clean_rel >> noisy_rel >> group_kv >> sigma_kv) || tag != "image" ||
        group_kv.rfind("group=", 0) != 0 || sigma_kv.rfind("sigma=", 0) != 0)
      throw FormatError("manifest line " + std::to_string(lineno) +
                        ": expected 'image <clean> <noisy> group=<g> sigma=<s>'");
    ImagePair pair;
    pair.name = clean_rel.substr(0, clean_rel.find("_clean"));
    pair.group = group_kv.substr(6);
    pair.sigma = std::stod(sigma_kv.substr(6));
    pair.clean = read_image((dir / clean_rel).string());
    pair.noisy = read_image((dir / noisy_rel).string());
    if (pair.clean.shape() != pair.noisy.shape())
      throw FormatError("manifest line " + std::to_string(lineno) +
                        ": clean and noisy shapes differ");
    out.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train/validation split, proportional per content group.

struct SplitResult {
  std::vector<ImagePair> train, val;
};

// Shuffles each group with the given rng and sends about val_fraction of it
// to the validation side (at least one image per group). Items keep their
// identity; the two sides are disjoint and cover the input.
inline SplitResult split_dataset(const std::vector<ImagePair>& items, double val_fraction,
                                 Rng& rng) {
  if (items.empty()) throw std::invalid_argument("cannot split an empty dataset");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("val_fraction must be inside (0,1)");
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < items.size(); ++i) groups[items[i].group].push_back(i);

  SplitResult out;
  std::vector<char> to_val(items.size(), 0);
  for (auto& [name, idx] : groups) {
    const int n = static_cast<int>(idx.size());
    int n_val = static_cast<int>(std::lround(val_fraction * n));
    n_val = std::max(1, std::min(n_val, n - 1));
    if (n < 2)
      throw std::invalid_argument("group '" + name + "' has a single image; cannot split");
    // Fisher-Yates with the shared rng keeps the split deterministic.
    for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.uniform_int(i + 1)]);
    for (int i = 0; i < n_val; ++i) to_val[idx[i]] = 1;
  }
  for (size_t i = 0; i < items.size(); ++i)
    (to_val[i] ? out.val : out.train).push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Random co-located patches for training.

class PatchSampler {
 public:
  PatchSampler(const std::vector<ImagePair>* items, int patch, std::uint64_t seed)
      : items_(items), patch_(patch), rng_(seed) {
    if (!items_ || items_->empty())
      throw std::invalid_argument("patch sampler needs at least one image");
    if (patch_ < 1) throw std::invalid_argument("patch size must be positive");
    for (const auto& item : *items_)
      if (item.clean.dim(1) < patch_ || item.clean.dim(2) < patch_)
        throw std::invalid_argument("image " + item.name + " is smaller than the patch size");
  }

  struct Patch {
    Tensor clean, noisy;  // {C,patch,patch}
  };

  Patch next() {
    const auto& item = (*items_)[static_cast<size_t>(rng_.uniform_int(
        static_cast<int>(items_->size())))];
    const int h = item.clean.dim(1), w = item.clean.dim(2);
    const int y0 = rng_.uniform_int(h - patch_ + 1);
    const int x0 = rng_.uniform_int(w - patch_ + 1);
    return {crop(item.clean, y0, x0), crop(item.noisy, y0, x0)};
  }

  // {N,C,patch,patch} pair of stacked draws.
  std::pair<Tensor, Tensor> next_batch(int n) {
    if (n < 1) throw std::invalid_argument("batch size must be positive");
    const int c = (*items_)[0].clean.dim(0);
    std::vector<double> clean(static_cast<size_t>(n) * c * patch_ * patch_);
    std::vector<double> noisy(clean.size());
    const size_t stride = static_cast<size_t>(c) * patch_ * patch_;
    for (int i = 0; i < n; ++i) {
      const Patch p = next();
      std::copy(p.clean.data().begin(), p.clean.data().end(), clean.begin() + i * stride);
      std::copy(p.noisy.data().begin(), p.noisy.data().end(), noisy.begin() + i * stride);
    }
    return {Tensor::from_data({n, c, patch_, patch_}, std::move(clean)),
            Tensor::from_data({n, c, patch_, patch_}, std::move(noisy))};
  }

 private:
  Tensor crop(const Tensor& img, int y0, int x0) const {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::vector<double> out(static_cast<size_t>(c) * patch_ * patch_);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < patch_; ++y)
        for (int x = 0; x < patch_; ++x)
          out[(static_cast<size_t>(ch) * patch_ + y) * patch_ + x] =
              img.data()[(static_cast<size_t>(ch) * h + y0 + y) * w + x0 + x];
    return Tensor::from_data({c, patch_, patch_}, std::move(out));
  }

  const std::vector<ImagePair>* items_;
  int patch_;
  Rng rng_;
};

}  // namespace sknas
