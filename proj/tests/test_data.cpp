#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "sknas/data.hpp"
#include "sknas/rng.hpp"

using namespace sknas;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("sknas_data_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Synthetic, DeterministicAndWellFormed) {
  DataConfig cfg;
  cfg.count = 7;
  cfg.seed = 5;
  const auto a = generate_synthetic_set(cfg);
  const auto b = generate_synthetic_set(cfg);
  ASSERT_EQ(a.size(), 7u);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].clean.data(), b[i].clean.data());
    EXPECT_EQ(a[i].noisy.data(), b[i].noisy.data());
    EXPECT_EQ(a[i].clean.shape(), (Shape{3, 32, 32}));
    for (double v : a[i].clean.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (double v : a[i].noisy.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  // Groups cycle through the three content families.
  EXPECT_EQ(a[0].group, "gradients");
  EXPECT_EQ(a[1].group, "rectangles");
  EXPECT_EQ(a[2].group, "sinusoids");
  EXPECT_EQ(a[3].group, "gradients");

  DataConfig other = cfg;
  other.seed = 6;
  const auto c = generate_synthetic_set(other);
  EXPECT_NE(a[0].clean.data(), c[0].clean.data());
}

TEST(Synthetic, SigmaZeroMeansNoisyIsClean) {
  DataConfig cfg;
  cfg.count = 6;
  cfg.sigma = 0.0;
  for (const auto& item : generate_synthetic_set(cfg))
    EXPECT_EQ(item.clean.data(), item.noisy.data());
}

TEST(Synthetic, EmpiricalNoiseMatchesSigma) {
  DataConfig cfg;
  cfg.count = 30;
  cfg.height = cfg.width = 64;
  cfg.sigma = 25.0 / 255.0;
  cfg.seed = 11;
  double sum = 0.0, sum2 = 0.0;
  long long n = 0;
  for (const auto& item : generate_synthetic_set(cfg))
    for (int i = 0; i < item.clean.size(); ++i) {
      const double c = item.clean.data()[i];
      if (c < 0.3 || c > 0.7) continue;  // keep pixels the clipping cannot touch
      const double d = item.noisy.data()[i] - c;
      sum += d;
      sum2 += d * d;
      ++n;
    }
  ASSERT_GT(n, 10000);
  const double mean = sum / n;
  const double stddev = std::sqrt(sum2 / n - mean * mean);
  EXPECT_NEAR(stddev, cfg.sigma, 0.05 * cfg.sigma);
  EXPECT_NEAR(mean, 0.0, 0.01);
}

TEST(ImageFile, RoundTripQuantizesToFloat32) {
  const auto dir = temp_dir("roundtrip");
  Rng rng(3);
  std::vector<double> px(3 * 9 * 7);
  for (auto& v : px) v = rng.uniform(-2.0, 2.0);
  const Tensor img = Tensor::from_data({3, 9, 7}, std::move(px));
  const std::string path = (dir / "img.skni").string();
  write_image(path, img);
  const Tensor back = read_image(path);
  ASSERT_EQ(back.shape(), img.shape());
  for (int i = 0; i < img.size(); ++i)
    EXPECT_EQ(back.data()[i], static_cast<double>(static_cast<float>(img.data()[i])));
  // Identical content writes identical bytes.
  const std::string path2 = (dir / "img2.skni").string();
  write_image(path2, img);
  EXPECT_EQ(detail::read_file(path), detail::read_file(path2));
  fs::remove_all(dir);
}

TEST(ImageFile, ErrorsAreDistinguished) {
  const auto dir = temp_dir("errors");
  EXPECT_THROW(read_image((dir / "missing.skni").string()), DataError);

  const std::string junk = (dir / "junk.skni").string();
  detail::write_file(junk, "JUNKxxxxxxxxxxxxxxxxxxx");
  EXPECT_THROW(read_image(junk), FormatError);
  try {
    read_image(junk);
  } catch (const DataError& e) {
    EXPECT_EQ(dynamic_cast<const TruncatedError*>(&e), nullptr);
  }

  const Tensor img = Tensor::full({1, 4, 4}, 0.5);
  const std::string good = (dir / "good.skni").string();
  write_image(good, img);
  const std::string bytes = detail::read_file(good);

  const std::string cut = (dir / "cut.skni").string();
  detail::write_file(cut, bytes.substr(0, bytes.size() - 6));
  EXPECT_THROW(read_image(cut), TruncatedError);

  const std::string padded = (dir / "padded.skni").string();
  detail::write_file(padded, bytes + "zz");
  EXPECT_THROW(read_image(padded), FormatError);

  std::string vbytes = bytes;
  vbytes[4] = 9;  // unsupported version
  const std::string vfile = (dir / "version.skni").string();
  detail::write_file(vfile, vbytes);
  EXPECT_THROW(read_image(vfile), FormatError);

  std::string zdim = bytes;
  zdim[8] = zdim[9] = zdim[10] = zdim[11] = 0;  // height 0
  const std::string zfile = (dir / "zdim.skni").string();
  detail::write_file(zfile, zdim);
  EXPECT_THROW(read_image(zfile), FormatError);
  fs::remove_all(dir);
}

TEST(Dataset, SaveAndLoadAgree) {
  const auto dir = temp_dir("dataset");
  DataConfig cfg;
  cfg.count = 6;
  cfg.seed = 9;
  const auto items = generate_synthetic_set(cfg);
  save_dataset(dir.string(), items);
  const auto back = load_dataset((dir / "manifest.txt").string());
  ASSERT_EQ(back.size(), items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(back[i].name, items[i].name);
    EXPECT_EQ(back[i].group, items[i].group);
    EXPECT_DOUBLE_EQ(back[i].sigma, items[i].sigma);
    ASSERT_EQ(back[i].clean.shape(), items[i].clean.shape());
    for (int j = 0; j < items[i].clean.size(); ++j) {
      EXPECT_EQ(back[i].clean.data()[j],
                static_cast<double>(static_cast<float>(items[i].clean.data()[j])));
      EXPECT_EQ(back[i].noisy.data()[j],
                static_cast<double>(static_cast<float>(items[i].noisy.data()[j])));
    }
  }
  // Manifest is a plain text index.
  std::ifstream mf(dir / "manifest.txt");
  std::string line;
  std::getline(mf, line);
  EXPECT_EQ(line, "# dataset manifest v1");
  std::getline(mf, line);
  EXPECT_EQ(line.rfind("image gradients_000_clean.skni gradients_000_noisy.skni group=", 0),
            0u);
  fs::remove_all(dir);
}

TEST(Dataset, ManifestErrors) {
  const auto dir = temp_dir("manifest");
  detail::write_file((dir / "manifest.txt").string(), "image only_two_fields\n");
  EXPECT_THROW(load_dataset((dir / "manifest.txt").string()), FormatError);
  EXPECT_THROW(load_dataset((dir / "absent.txt").string()), DataError);
  fs::remove_all(dir);
}

TEST(Split, ProportionalDisjointComplete) {
  DataConfig cfg;
  cfg.count = 60;  // 20 per group
  cfg.seed = 2;
  const auto items = generate_synthetic_set(cfg);
  Rng rng(77);
  const SplitResult s = split_dataset(items, 0.1, rng);
  EXPECT_EQ(s.val.size(), 6u);  // two per group
  EXPECT_EQ(s.train.size() + s.val.size(), items.size());

  std::set<std::string> train_names, val_names;
  for (const auto& i : s.train) train_names.insert(i.name);
  for (const auto& i : s.val) val_names.insert(i.name);
  EXPECT_EQ(train_names.size(), s.train.size());
  for (const auto& n : val_names) EXPECT_EQ(train_names.count(n), 0u);

  std::map<std::string, int> val_by_group;
  for (const auto& i : s.val) ++val_by_group[i.group];
  for (const auto& [g, n] : val_by_group) EXPECT_EQ(n, 2) << g;

  // Deterministic in the rng seed.
  Rng rng2(77);
  const SplitResult s2 = split_dataset(items, 0.1, rng2);
  std::set<std::string> val2;
  for (const auto& i : s2.val) val2.insert(i.name);
  EXPECT_EQ(val_names, val2);

  // Tiny fractions still hold out at least one image per group.
  Rng rng3(1);
  const SplitResult s3 = split_dataset(items, 0.001, rng3);
  EXPECT_EQ(s3.val.size(), 3u);
}

TEST(Split, RejectsDegenerateInputs) {
  Rng rng(1);
  EXPECT_THROW(split_dataset({}, 0.1, rng), std::invalid_argument);
  DataConfig cfg;
  cfg.count = 1;  // a single image means a single-element group
  const auto one = generate_synthetic_set(cfg);
  EXPECT_THROW(split_dataset(one, 0.1, rng), std::invalid_argument);
  cfg.count = 12;
  const auto items = generate_synthetic_set(cfg);
  EXPECT_THROW(split_dataset(items, 0.0, rng), std::invalid_argument);
  EXPECT_THROW(split_dataset(items, 1.0, rng), std::invalid_argument);
}

TEST(Patches, ColocatedInsideAndDeterministic) {
  DataConfig cfg;
  cfg.count = 4;
  cfg.height = cfg.width = 12;
  cfg.seed = 21;
  const auto items = generate_synthetic_set(cfg);
  PatchSampler sampler(&items, 6, 99);
  for (int draw = 0; draw < 20; ++draw) {
    const auto p = sampler.next();
    ASSERT_EQ(p.clean.shape(), (Shape{3, 6, 6}));
    // The clean patch must be an exact crop of some image, and the noisy
    // patch the crop of the same image at the same offset.
    bool found = false;
    for (const auto& item : items) {
      for (int y0 = 0; y0 + 6 <= 12 && !found; ++y0)
        for (int x0 = 0; x0 + 6 <= 12 && !found; ++x0) {
          bool match = true;
          for (int c = 0; c < 3 && match; ++c)
            for (int y = 0; y < 6 && match; ++y)
              for (int x = 0; x < 6 && match; ++x) {
                const size_t src = (static_cast<size_t>(c) * 12 + y0 + y) * 12 + x0 + x;
                const size_t dst = (static_cast<size_t>(c) * 6 + y) * 6 + x;
                if (p.clean.data()[dst] != item.clean.data()[src] ||
                    p.noisy.data()[dst] != item.noisy.data()[src])
                  match = false;
              }
          found = match;
        }
      if (found) break;
    }
    EXPECT_TRUE(found) << "draw " << draw;
  }

  // Identical seeds replay the same sequence.
  PatchSampler a(&items, 6, 5), b(&items, 6, 5);
  for (int i = 0; i < 5; ++i) {
    const auto pa = a.next(), pb = b.next();
    EXPECT_EQ(pa.clean.data(), pb.clean.data());
    EXPECT_EQ(pa.noisy.data(), pb.noisy.data());
  }

  // Batches stack draws in order.
  PatchSampler c(&items, 6, 5);
  const auto [bc, bn] = c.next_batch(3);
  EXPECT_EQ(bc.shape(), (Shape{3, 3, 6, 6}));
  PatchSampler d(&items, 6, 5);
  for (int i = 0; i < 3; ++i) {
    const auto p = d.next();
    for (int j = 0; j < p.clean.size(); ++j)
      EXPECT_EQ(bc.data()[i * p.clean.size() + j], p.clean.data()[j]);
  }

  EXPECT_THROW(PatchSampler(&items, 13, 0), std::invalid_argument);
  const std::vector<ImagePair> empty;
  EXPECT_THROW(PatchSampler(&empty, 4, 0), std::invalid_argument);
}
