#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hft/graph.hpp"
#include "hft/rng.hpp"
#include "hft/tensor.hpp"

namespace hft {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swaps");

// Single-file checkpoint, magic "HFTC", version 1, little-endian throughout.
// Layout: header | config JSON | counters | named RNG states | named tensor
// records (value + AdamW moments per parameter) | crc32 trailer.
inline constexpr char kCheckpointMagic[4] = {'H', 'F', 'T', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct RngStateRecord {
  std::string name;
  std::uint64_t state[4];
};

struct CheckpointData {
  std::string config_json;
  std::uint32_t epoch = 0;
  std::uint64_t global_step = 0;
  double best_val_miou = -1.0;
  std::uint64_t optimizer_step = 0;
  std::vector<RngStateRecord> rng_states;
  // dtype: 0 = f32, 1 = f64
  std::uint8_t dtype = 0;
  struct TensorRecord {
    std::string name;
    std::vector<int> shape;
    std::vector<std::uint8_t> value, m, v;  // raw little-endian scalars
  };
  std::vector<TensorRecord> tensors;
};

namespace ckptdetail {

inline void put_bytes(std::vector<std::uint8_t>& out, const void* p, size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <class U>
void put_scalar(std::vector<std::uint8_t>& out, U v) {
  put_bytes(out, &v, sizeof(U));
}

inline void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  if (s.size() > 0xFFFFFFFFu) throw ContractError("checkpoint: string too long");
  put_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw DataError("checkpoint: truncated file");
  }
  template <class U>
  U scalar() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
  }
  std::string string() {
    const auto n = scalar<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::vector<std::uint8_t> bytes(size_t n) {
    need(n);
    std::vector<std::uint8_t> v(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                                buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return v;
  }
};

inline std::uint32_t crc_of(const std::vector<std::uint8_t>& buf, size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(n)));
}

}  // namespace ckptdetail

inline void save_checkpoint(const std::string& path, const CheckpointData& d) {
  std::vector<std::uint8_t> out;
  ckptdetail::put_bytes(out, kCheckpointMagic, 4);
  ckptdetail::put_scalar<std::uint16_t>(out, kCheckpointVersion);
  ckptdetail::put_string(out, d.config_json);
  ckptdetail::put_scalar<std::uint32_t>(out, d.epoch);
  ckptdetail::put_scalar<std::uint64_t>(out, d.global_step);
  ckptdetail::put_scalar<double>(out, d.best_val_miou);
  ckptdetail::put_scalar<std::uint64_t>(out, d.optimizer_step);
  ckptdetail::put_scalar<std::uint16_t>(out, static_cast<std::uint16_t>(d.rng_states.size()));
  for (const auto& r : d.rng_states) {
    ckptdetail::put_string(out, r.name);
    for (int i = 0; i < 4; ++i) ckptdetail::put_scalar<std::uint64_t>(out, r.state[i]);
  }
  ckptdetail::put_scalar<std::uint8_t>(out, d.dtype);
  ckptdetail::put_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(d.tensors.size()));
  for (const auto& t : d.tensors) {
    ckptdetail::put_string(out, t.name);
    ckptdetail::put_scalar<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (int dim : t.shape) ckptdetail::put_scalar<std::int32_t>(out, dim);
    for (const auto* blob : {&t.value, &t.m, &t.v}) {
      ckptdetail::put_scalar<std::uint64_t>(out, blob->size());
      ckptdetail::put_bytes(out, blob->data(), blob->size());
    }
  }
  const std::uint32_t crc = ckptdetail::crc_of(out, out.size());
  ckptdetail::put_scalar<std::uint32_t>(out, crc);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("checkpoint: cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("checkpoint: write failed for " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 10) throw DataError("checkpoint: truncated file " + path);

  ckptdetail::Reader r{buf};
  char magic[4];
  std::memcpy(magic, buf.data(), 4);
  r.pos = 4;
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  const auto version = r.scalar<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));

  CheckpointData d;
  d.config_json = r.string();
  d.epoch = r.scalar<std::uint32_t>();
  d.global_step = r.scalar<std::uint64_t>();
  d.best_val_miou = r.scalar<double>();
  d.optimizer_step = r.scalar<std::uint64_t>();
  const auto n_rng = r.scalar<std::uint16_t>();
  for (int i = 0; i < n_rng; ++i) {
    RngStateRecord rec;
    rec.name = r.string();
    for (int k = 0; k < 4; ++k) rec.state[k] = r.scalar<std::uint64_t>();
    d.rng_states.push_back(std::move(rec));
  }
  d.dtype = r.scalar<std::uint8_t>();
  const auto n_tensors = r.scalar<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    CheckpointData::TensorRecord t;
    t.name = r.string();
    const auto ndim = r.scalar<std::uint8_t>();
    for (int k = 0; k < ndim; ++k) t.shape.push_back(r.scalar<std::int32_t>());
    for (auto* blob : {&t.value, &t.m, &t.v}) {
      const auto n = r.scalar<std::uint64_t>();
      *blob = r.bytes(static_cast<size_t>(n));
    }
    d.tensors.push_back(std::move(t));
  }
  const auto stored_crc = r.scalar<std::uint32_t>();
  if (stored_crc != ckptdetail::crc_of(buf, buf.size() - 4))
    throw DataError("checkpoint: crc mismatch in " + path);
  if (r.pos != buf.size()) throw DataError("checkpoint: trailing bytes in " + path);
  return d;
}

// Bridge between parameter stores and tensor records.
template <class T>
void pack_params(const ParamStore<T>& store, CheckpointData& d) {
  d.dtype = std::is_same_v<T, float> ? 0 : 1;
  for (const auto* p : store.all()) {
    CheckpointData::TensorRecord t;
    t.name = p->name;
    t.shape = p->value.shape;
    const size_t bytes = static_cast<size_t>(p->numel()) * sizeof(T);
    t.value.resize(bytes);
    t.m.resize(bytes);
    t.v.resize(bytes);
    std::memcpy(t.value.data(), p->value.ptr(), bytes);
    std::memcpy(t.m.data(), p->m.ptr(), bytes);
    std::memcpy(t.v.data(), p->v.ptr(), bytes);
    d.tensors.push_back(std::move(t));
  }
}

template <class T>
void unpack_params(const CheckpointData& d, ParamStore<T>& store) {
  const std::uint8_t want = std::is_same_v<T, float> ? 0 : 1;
  if (d.dtype != want) throw DataError("checkpoint: element type does not match run precision");
  auto params = store.all();
  if (params.size() != d.tensors.size())
    throw DataError("checkpoint: parameter count mismatch (config/model drift)");
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& t = d.tensors[i];
    Param<T>* p = params[i];
    if (p->name != t.name || p->value.shape != t.shape)
      throw DataError("checkpoint: tensor record mismatch at " + t.name);
    const size_t bytes = static_cast<size_t>(p->numel()) * sizeof(T);
    if (t.value.size() != bytes || t.m.size() != bytes || t.v.size() != bytes)
      throw DataError("checkpoint: tensor payload size mismatch at " + t.name);
    std::memcpy(p->value.ptr(), t.value.data(), bytes);
    std::memcpy(p->m.ptr(), t.m.data(), bytes);
    std::memcpy(p->v.ptr(), t.v.data(), bytes);
  }
}

}  // namespace hft
