#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "mz/optim.hpp"
#include "mz/tensor.hpp"

namespace mz::nn {

class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'Z', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void ck_put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t ck_get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw CheckpointError("checkpoint truncated");
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

}  // namespace detail

/// Writes named tensors in the MZCK container (f32 payload). Records are
/// written in map order, so the byte stream is deterministic.
inline void write_checkpoint(std::ostream& out, const std::map<std::string, Tensor>& records) {
  out.write(kCheckpointMagic, 4);
  detail::ck_put_u32(out, kCheckpointVersion);
  detail::ck_put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    if (name.size() > 0xffff) throw CheckpointError("record name too long: " + name);
    unsigned char len[2] = {static_cast<unsigned char>(name.size()),
                            static_cast<unsigned char>(name.size() >> 8)};
    out.write(reinterpret_cast<const char*>(len), 2);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const unsigned char rank = static_cast<unsigned char>(t.shape.size());
    out.write(reinterpret_cast<const char*>(&rank), 1);
    for (int d : t.shape) detail::ck_put_u32(out, static_cast<std::uint32_t>(d));
    for (double x : t.v) {
      float f = static_cast<float>(x);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::ck_put_u32(out, bits);
    }
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

inline std::map<std::string, Tensor> read_checkpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic: expected \"MZCK\"");
  if (detail::ck_get_u32(in) != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version");
  const std::uint32_t count = detail::ck_get_u32(in);
  std::map<std::string, Tensor> records;
  for (std::uint32_t r = 0; r < count; ++r) {
    unsigned char len[2];
    in.read(reinterpret_cast<char*>(len), 2);
    if (in.gcount() != 2) throw CheckpointError("checkpoint truncated");
    const std::size_t name_len = std::size_t{len[0]} | (std::size_t{len[1]} << 8);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (static_cast<std::size_t>(in.gcount()) != name_len)
      throw CheckpointError("checkpoint truncated");
    unsigned char rank;
    in.read(reinterpret_cast<char*>(&rank), 1);
    if (in.gcount() != 1) throw CheckpointError("checkpoint truncated");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<int>(detail::ck_get_u32(in));
      n *= static_cast<std::size_t>(d);
    }
    Tensor t = Tensor::zeros(shape);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = detail::ck_get_u32(in);
      float f;
      std::memcpy(&f, &bits, 4);
      t.v[i] = static_cast<double>(f);
    }
    records.emplace(std::move(name), std::move(t));
  }
  return records;
}

/// Atomic file write: stream to "<path>.tmp" then rename over the target.
template <typename WriteFn>
void write_file_atomic(const std::filesystem::path& path, WriteFn&& fn) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    fn(out);
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_checkpoint_file(const std::filesystem::path& path,
                                 const std::map<std::string, Tensor>& records) {
  write_file_atomic(path, [&](std::ostream& out) { write_checkpoint(out, records); });
}

inline std::map<std::string, Tensor> load_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

/// Bundles parameters, optimizer moments ("opt/" prefix) and schedule clocks
/// ("clk/" prefix) into one record map.
inline std::map<std::string, Tensor> checkpoint_records(
    const ParamStore& params, const OptState* opt = nullptr,
    const std::map<std::string, double>& clocks = {}) {
  std::map<std::string, Tensor> records(params.values.begin(), params.values.end());
  if (opt) {
    for (const auto& [name, t] : opt->m) records["opt/m/" + name] = t;
    for (const auto& [name, t] : opt->v) records["opt/v/" + name] = t;
    records["opt/t"] = Tensor::scalar(static_cast<double>(opt->t));
  }
  for (const auto& [name, value] : clocks) records["clk/" + name] = Tensor::scalar(value);
  return records;
}

/// Extracts the plain parameters (records without the opt/, clk/ and emb/
/// prefixes) out of a checkpoint record map.
inline ParamStore params_from_records(const std::map<std::string, Tensor>& records) {
  ParamStore store;
  for (const auto& [name, t] : records) {
    if (name.rfind("opt/", 0) == 0 || name.rfind("clk/", 0) == 0 || name.rfind("emb/", 0) == 0)
      continue;
    store.values.emplace(name, t);
  }
  return store;
}

}  // namespace mz::nn
