#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "hsinet/nn.hpp"

namespace hsinet::io {

// Layout, little-endian throughout:
//   "HSIW" | u32 version | u32 count |
//   count x (u16 name_len | name | u8 dtype | u8 rank | rank x u32 dim | values)
inline constexpr char kWeightMagic[4] = {'H', 'S', 'I', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;
inline constexpr std::size_t kWeightHeaderBytes = 12;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "weights are f32 or f64");
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

namespace detail {

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : b_(bytes) {}

  std::uint64_t uint(std::size_t width, const char* what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) {
      throw FormatError("weights: truncated while reading " + std::string(what) + " at byte " + std::to_string(pos_) +
                        " (need " + std::to_string(n) + ", have " + std::to_string(b_.size() - pos_) + ")");
    }
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct WeightRecord {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

template <class T>
std::vector<std::uint8_t> serialize_weights(const ParamStore<T>& store) {
  std::vector<std::uint8_t> out(std::begin(kWeightMagic), std::end(kWeightMagic));
  detail::put_u32(out, kWeightVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    if (e.name.size() > 0xFFFF) throw ValueError("weights: parameter name too long: " + e.name);
    detail::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::put_u8(out, static_cast<std::uint8_t>(dtype_of<T>()));
    // Trailing unit dimensions are dropped; the loader pads them back.
    const Shape s = e.var->value.shape();
    const std::int64_t dims[4] = {s.n, s.c, s.h, s.w};
    int rank = 4;
    while (rank > 1 && dims[rank - 1] == 1) --rank;
    detail::put_u8(out, static_cast<std::uint8_t>(rank));
    for (int i = 0; i < rank; ++i) detail::put_u32(out, static_cast<std::uint32_t>(dims[i]));
    for (T v : e.var->value.data()) {
      if constexpr (std::is_same_v<T, float>) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_u32(out, bits);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        detail::put_u64(out, bits);
      }
    }
  }
  return out;
}

// Structural parse without reference to any model.
inline std::vector<WeightRecord> parse_weights(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (magic != std::string(kWeightMagic, 4)) throw FormatError("weights: bad magic (not an HSIW container)");
  const auto version = r.uint(4, "version");
  if (version != kWeightVersion) {
    throw FormatError("weights: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kWeightVersion) + ")");
  }
  const auto count = r.uint(4, "tensor count");
  std::vector<WeightRecord> recs;
  std::unordered_set<std::string> seen;
  for (std::uint64_t t = 0; t < count; ++t) {
    WeightRecord rec;
    const auto len = r.uint(2, "name length");
    rec.name = r.str(len, "name");
    if (!seen.insert(rec.name).second) throw FormatError("weights: duplicate tensor name '" + rec.name + "'");
    const auto dt = r.uint(1, "dtype");
    if (dt > 1) throw FormatError("weights: unknown dtype code " + std::to_string(dt) + " for '" + rec.name + "'");
    rec.dtype = static_cast<DType>(dt);
    const auto rank = r.uint(1, "rank");
    if (rank < 1 || rank > 4) throw FormatError("weights: rank " + std::to_string(rank) + " out of range for '" + rec.name + "'");
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const auto dim = static_cast<std::uint32_t>(r.uint(4, "dims"));
      if (dim == 0) throw FormatError("weights: zero dimension in '" + rec.name + "'");
      rec.dims.push_back(dim);
      numel *= dim;
      if (numel > (std::uint64_t{1} << 40)) throw FormatError("weights: implausible size for '" + rec.name + "'");
    }
    const std::size_t width = dtype_size(rec.dtype);
    r.need(static_cast<std::size_t>(numel) * width, "values");
    rec.values.resize(static_cast<std::size_t>(numel));
    for (auto& v : rec.values) {
      const auto bits = r.uint(width, "values");
      if (rec.dtype == DType::F32) {
        const auto b32 = static_cast<std::uint32_t>(bits);
        float f;
        std::memcpy(&f, &b32, 4);
        v = f;
      } else {
        std::memcpy(&v, &bits, 8);
      }
    }
    recs.push_back(std::move(rec));
  }
  if (r.remaining() != 0) {
    throw FormatError("weights: " + std::to_string(r.remaining()) + " trailing bytes after the last tensor");
  }
  return recs;
}

/// Loads every parameter of `store` from a container. The container must name
/// exactly the store's parameters with matching shapes; nothing is modified
/// unless the whole container checks out.
template <class T>
void deserialize_weights(ParamStore<T>& store, std::span<const std::uint8_t> bytes) {
  const auto recs = parse_weights(bytes);
  for (const auto& rec : recs) {
    const auto* e = store.find(rec.name);
    if (!e) throw FormatError("weights: unknown tensor name '" + rec.name + "'");
    std::int64_t dims[4] = {1, 1, 1, 1};
    for (std::size_t i = 0; i < rec.dims.size(); ++i) dims[i] = rec.dims[i];
    const Shape s{dims[0], dims[1], dims[2], dims[3]};
    if (!(s == e->var->value.shape())) {
      throw FormatError("weights: shape mismatch for '" + rec.name + "': file " + s.str() + ", model " +
                        e->var->value.shape().str());
    }
    if (rec.dtype == DType::F64 && std::is_same_v<T, float>) {
      throw FormatError("weights: '" + rec.name + "' is f64 but the model is f32");
    }
  }
  if (recs.size() != store.size()) {
    for (const auto& e : store.entries()) {
      bool found = false;
      for (const auto& rec : recs) found = found || rec.name == e.name;
      if (!found) throw FormatError("weights: missing tensor '" + e.name + "'");
    }
  }
  for (const auto& rec : recs) {
    auto& dst = store.find(rec.name)->var->value;
    for (std::size_t i = 0; i < rec.values.size(); ++i) dst[i] = static_cast<T>(rec.values[i]);
  }
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

template <class T>
void save_weights(const ParamStore<T>& store, const std::string& path) {
  write_file(path, serialize_weights(store));
}

template <class T>
void load_weights(ParamStore<T>& store, const std::string& path) {
  deserialize_weights(store, read_file(path));
}

}  // namespace hsinet::io
