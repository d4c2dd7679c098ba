#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sknas/arch_spec.hpp"
#include "sknas/blocks.hpp"
#include "sknas/config.hpp"
#include "sknas/data.hpp"

namespace sknas {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, size_t& pos, const char* what) {
  if (pos + 8 > in.size())
    throw CheckpointError(std::string("checkpoint ends inside ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

inline std::uint32_t ckpt_u32(const std::string& in, size_t& pos, const char* what) {
  if (pos + 4 > in.size())
    throw CheckpointError(std::string("checkpoint ends inside ") + what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

inline std::string ckpt_blob(const std::string& in, size_t& pos, size_t n, const char* what) {
  if (pos + n > in.size())
    throw CheckpointError(std::string("checkpoint ends inside ") + what);
  std::string s = in.substr(pos, n);
  pos += n;
  return s;
}

}  // namespace detail

// Binary container: "SKCP", version, model spec JSON, architecture document
// (empty for supernets), then named float64 tensors. Payloads are raw IEEE
// bits, so save -> load -> save reproduces the file byte for byte.
inline void save_checkpoint(const std::string& path, const Model& model,
                            const ArchitectureSpec& arch = {}) {
  std::string out;
  out += "SKCP";
  detail::put_u32(out, kCheckpointVersion);
  const std::string spec_json = model_spec_to_json(model.spec()).dump(2);
  detail::put_u32(out, static_cast<std::uint32_t>(spec_json.size()));
  out += spec_json;
  const std::string arch_text = arch.empty() ? std::string() : arch.to_text();
  detail::put_u32(out, static_cast<std::uint32_t>(arch_text.size()));
  out += arch_text;

  const auto named = model.named_parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    out.push_back(0);  // dtype tag: float64
    out.push_back(static_cast<char>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d)
      detail::put_u32(out, static_cast<std::uint32_t>(t.dim(d)));
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      detail::put_u64(out, bits);
    }
  }
  detail::write_file(path, out);
}

struct LoadedCheckpoint {
  Model model;
  ArchitectureSpec arch;  // empty for supernets

  bool distilled() const { return !arch.empty(); }
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::string in = detail::read_file(path);
  if (in.size() < 8 || in.compare(0, 4, "SKCP") != 0)
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  size_t pos = 4;
  const std::uint32_t version = detail::ckpt_u32(in, pos, "header");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  const std::uint32_t spec_len = detail::ckpt_u32(in, pos, "header");
  const std::string spec_json = detail::ckpt_blob(in, pos, spec_len, "model spec");
  ModelSpec spec;
  try {
    spec = model_spec_from_json(nlohmann::json::parse(spec_json));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad model spec in checkpoint: ") + e.what());
  }

  const std::uint32_t arch_len = detail::ckpt_u32(in, pos, "header");
  const std::string arch_text = detail::ckpt_blob(in, pos, arch_len, "architecture");

  // Parameter values all come from the file; the construction seed only
  // shapes the tensors before they are overwritten.
  Rng build_rng(0);
  LoadedCheckpoint out{Model(spec, build_rng), ArchitectureSpec{}};
  if (!arch_text.empty()) {
    out.arch = ArchitectureSpec::from_text(arch_text);
    out.model.apply_architecture(out.arch);
  }

  const std::uint32_t n_tensors = detail::ckpt_u32(in, pos, "tensor table");
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, t] : out.model.named_parameters()) by_name.emplace(name, t);
  if (n_tensors != by_name.size())
    throw CheckpointError("checkpoint has " + std::to_string(n_tensors) +
                          " tensors, model expects " + std::to_string(by_name.size()));

  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::uint32_t name_len = detail::ckpt_u32(in, pos, "tensor name");
    const std::string name = detail::ckpt_blob(in, pos, name_len, "tensor name");
    const std::string head = detail::ckpt_blob(in, pos, 2, "tensor header");
    if (head[0] != 0)
      throw CheckpointError("tensor '" + name + "' has unsupported dtype tag " +
                            std::to_string(static_cast<int>(head[0])));
    const int ndim = static_cast<unsigned char>(head[1]);
    Shape shape(ndim);
    for (int d = 0; d < ndim; ++d)
      shape[d] = static_cast<int>(detail::ckpt_u32(in, pos, "tensor shape"));
    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw CheckpointError("checkpoint tensor '" + name + "' does not exist in the model");
    if (it->second.shape() != shape)
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) +
                            " in the checkpoint but " + shape_str(it->second.shape()) +
                            " in the model");
    Tensor dst = it->second;
    for (int j = 0; j < dst.size(); ++j) {
      const std::uint64_t bits = detail::get_u64(in, pos, "tensor payload");
      double v;
      std::memcpy(&v, &bits, 8);
      dst.data()[j] = v;
    }
  }
  if (pos != in.size())
    throw CheckpointError("checkpoint has " + std::to_string(in.size() - pos) +
                          " trailing bytes");
  return out;
}

}  // namespace sknas
