#ifndef TRILEVEL_CHECKPOINT_HPP
#define TRILEVEL_CHECKPOINT_HPP

// Checkpoint container, all integers little-endian:
//
//   magic        8 bytes  "TRLVCKPT"
//   version      u32      1
//   text_len     u32      length of the config text
//   text         bytes    "key=value\n" lines
//   tensor_count u32
//   per tensor:
//     name_len   u32, name bytes
//     elem_size  u8       4 (IEEE float32) or 8 (IEEE float64)
//     ndim       u32, then ndim x u64 extents
//     data       product(extents) x elem_size bytes, little-endian

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "trilevel/config.hpp"
#include "trilevel/errors.hpp"
#include "trilevel/vit.hpp"

namespace trilevel {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct CheckpointTensor {
  std::string name;
  std::uint8_t elem_size = 4;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointTensor> tensors;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'T', 'R', 'L', 'V', 'C', 'K', 'P', 'T'};

template <typename I>
void put(std::vector<std::uint8_t>& out, I v) {
  for (std::size_t b = 0; b < sizeof(I); ++b) out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}
  template <typename I>
  I get(const char* what) {
    need(sizeof(I), what);
    I v = 0;
    for (std::size_t b = 0; b < sizeof(I); ++b) v |= static_cast<I>(buf_[pos_ + b]) << (8 * b);
    pos_ += sizeof(I);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> v(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > buf_.size()) throw FormatError(std::string("checkpoint truncated reading ") + what, pos_);
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(std::begin(detail::kCheckpointMagic), std::end(detail::kCheckpointMagic));
  detail::put<std::uint32_t>(out, 1);
  std::string text;
  for (const auto& [k, v] : ck.meta) text += k + "=" + v + "\n";
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(t.elem_size);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) detail::put<std::uint64_t>(out, e);
    out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& buf) {
  detail::Reader r(buf);
  if (r.str(8, "magic") != std::string(detail::kCheckpointMagic, 8)) throw FormatError("bad checkpoint magic", 0);
  if (auto v = r.get<std::uint32_t>("version"); v != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), 8);
  Checkpoint ck;
  const auto text_len = r.get<std::uint32_t>("text length");
  std::istringstream text(r.str(text_len, "config text"));
  for (std::string line; std::getline(text, line);) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line without '='", r.pos());
    ck.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.str(r.get<std::uint32_t>("name length"), "name");
    t.elem_size = r.get<std::uint8_t>("element size");
    if (t.elem_size != 4 && t.elem_size != 8) throw FormatError("bad element size for " + t.name, r.pos() - 1);
    const auto ndim = r.get<std::uint32_t>("rank");
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      t.shape.push_back(r.get<std::uint64_t>("extent"));
      n *= t.shape.back();
    }
    t.bytes = r.bytes(n * t.elem_size, "tensor data");
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint", r.pos());
  return ck;
}

/// Flattened "model.x" / "sparsity.x" / run-level keys, values rendered from JSON.
/// out_dir is left out so a checkpoint does not depend on where it was written.
inline std::map<std::string, std::string> config_meta(const RunConfig& cfg) {
  std::map<std::string, std::string> meta;
  auto j = to_json(cfg);
  j.erase("out_dir");
  for (const auto& [k, v] : j.items()) {
    if (v.is_object()) {
      for (const auto& [k2, v2] : v.items()) meta[k + "." + k2] = v2.dump();
    } else {
      meta[k] = v.dump();
    }
  }
  return meta;
}

/// Rebuilds model and sparsity settings from checkpoint metadata.
inline RunConfig config_from_meta(const std::map<std::string, std::string>& meta) {
  nlohmann::json j = nlohmann::json::object();
  try {
    for (const auto& [k, v] : meta) {
      auto dot = k.find('.');
      if (dot == std::string::npos)
        j[k] = nlohmann::json::parse(v);
      else
        j[k.substr(0, dot)][k.substr(dot + 1)] = nlohmann::json::parse(v);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint metadata: ") + e.what(), 0);
  }
  return run_config_from_json(j);
}

template <typename T>
Checkpoint make_checkpoint(const ViT<T>& model, const RunConfig& cfg) {
  Checkpoint ck;
  ck.meta = config_meta(cfg);
  for (const auto& p : model.parameters()) {
    CheckpointTensor t;
    t.name = p.name;
    t.elem_size = sizeof(T);
    for (auto e : p.value.shape()) t.shape.push_back(e);
    t.bytes.resize(p.value.numel() * sizeof(T));
    std::memcpy(t.bytes.data(), p.value.data().data(), t.bytes.size());
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

/// Copies checkpoint tensors into `model`, converting element width if needed.
template <typename T>
void load_parameters(ViT<T>& model, const Checkpoint& ck) {
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  auto params = model.parameters();
  if (params.size() != ck.tensors.size())
    throw IncompatibilityError("checkpoint has " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                               std::to_string(params.size()));
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IncompatibilityError("checkpoint lacks tensor '" + p.name + "'");
    const CheckpointTensor& t = *it->second;
    std::vector<std::uint64_t> want(p.value.shape().begin(), p.value.shape().end());
    if (t.shape != want)
      throw IncompatibilityError("tensor '" + p.name + "' has shape " + shape_str({t.shape.begin(), t.shape.end()}) +
                                 ", model expects " + shape_str(p.value.shape()));
    auto dst = p.value.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (t.elem_size == 4) {
        float f;
        std::memcpy(&f, t.bytes.data() + 4 * i, 4);
        dst[i] = static_cast<T>(f);
      } else {
        double d;
        std::memcpy(&d, t.bytes.data() + 8 * i, 8);
        dst[i] = static_cast<T>(d);
      }
    }
  }
}

inline void write_checkpoint_file(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string(), 0);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

}  // namespace trilevel

#endif  // TRILEVEL_CHECKPOINT_HPP
