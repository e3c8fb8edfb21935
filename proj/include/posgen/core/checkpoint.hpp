#pragma once

// Checkpoint container.
//
//   bytes 0..7     magic "POSGENCK"
//   u32            format version
//   u64            header length L
//   L bytes        JSON header: {"kind", "dtype", "meta", "tensors": [{name, rows, cols}]}
//   ...            tensor payloads, column-major, little-endian, in header order
//   u64            FNV-1a 64 of every preceding byte
//
// The trailer hash doubles as the checkpoint id.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "posgen/core/autograd.hpp"
#include "posgen/core/error.hpp"
#include "posgen/core/layers.hpp"

namespace posgen {

inline constexpr char kCheckpointMagic[8] = {'P', 'O', 'S', 'G', 'E', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);
  return std::is_same_v<T, double> ? "f64" : "f32";
}

template <class T>
struct Checkpoint {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, ag::Matrix<T>>> tensors;

  const ag::Matrix<T>& tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return m;
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

template <class V>
void put(std::string& buf, V v) {
  static_assert(std::is_trivially_copyable_v<V>);
  char bytes[sizeof(V)];
  std::memcpy(bytes, &v, sizeof(V));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(V));
  buf.append(bytes, sizeof(V));
}

template <class V>
V take(const std::string& buf, std::size_t& at) {
  if (at + sizeof(V) > buf.size()) throw CheckpointError("checkpoint truncated");
  char bytes[sizeof(V)];
  std::memcpy(bytes, buf.data() + at, sizeof(V));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(V));
  at += sizeof(V);
  V v;
  std::memcpy(&v, bytes, sizeof(V));
  return v;
}

}  // namespace detail

template <class T>
std::string serialize_checkpoint(const Checkpoint<T>& ck) {
  nlohmann::json header;
  header["kind"] = ck.kind;
  header["dtype"] = dtype_name<T>();
  header["meta"] = ck.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : ck.tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  const std::string head = header.dump();
  std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(buf, kCheckpointVersion);
  detail::put<std::uint64_t>(buf, head.size());
  buf += head;
  for (const auto& [name, m] : ck.tensors)
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put<T>(buf, m.data()[i]);
  detail::put<std::uint64_t>(buf, fnv1a64(buf.data(), buf.size()));
  return buf;
}

template <class T>
Checkpoint<T> deserialize_checkpoint(const std::string& buf) {
  if (buf.size() < sizeof(kCheckpointMagic) + 4 + 8 + 8 ||
      std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic or truncated)");
  }
  const std::size_t body = buf.size() - 8;
  std::size_t tail_at = body;
  const auto stored = detail::take<std::uint64_t>(buf, tail_at);
  if (stored != fnv1a64(buf.data(), body)) throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated)");

  std::size_t at = sizeof(kCheckpointMagic);
  const auto version = detail::take<std::uint32_t>(buf, at);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto head_len = detail::take<std::uint64_t>(buf, at);
  if (at + head_len > body) throw CheckpointError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(at, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header unreadable: ") + e.what());
  }
  at += head_len;
  if (header.value("dtype", "") != dtype_name<T>()) {
    throw CheckpointError("checkpoint dtype " + header.value("dtype", "?") + " does not match " + dtype_name<T>());
  }
  Checkpoint<T> ck;
  ck.kind = header.at("kind").get<std::string>();
  ck.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0 || at + static_cast<std::size_t>(rows * cols) * sizeof(T) > body) {
      throw CheckpointError("checkpoint tensor payload truncated");
    }
    ag::Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::take<T>(buf, at);
    ck.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  if (at != body) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

/// Id of a serialized checkpoint: hex of its trailer hash.
inline std::string checkpoint_id_of(const std::string& bytes) {
  if (bytes.size() < 8) throw CheckpointError("checkpoint truncated");
  std::size_t at = bytes.size() - 8;
  return hex64(detail::take<std::uint64_t>(bytes, at));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Writes to a sibling temp file and renames, so readers never see a
/// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Saves and returns the checkpoint id.
template <class T>
std::string save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  write_file_atomic(path, bytes);
  return checkpoint_id_of(bytes);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, std::string* id = nullptr) {
  const std::string bytes = read_file(path);
  Checkpoint<T> ck = deserialize_checkpoint<T>(bytes);
  if (id) *id = checkpoint_id_of(bytes);
  return ck;
}

/// Copies every parameter of `model` into `ck` under its visit name.
template <class T, class Model>
void store_parameters(Checkpoint<T>& ck, const Model& model) {
  nn::for_each_param(model, "", [&](const std::string& name, const ag::Parameter<T>& p) {
    ck.tensors.emplace_back(name, p.value);
  });
}

/// Fills every parameter of `model` from `ck`; names and shapes must match
/// exactly and no tensor may be left over.
template <class T, class Model>
void restore_parameters(const Checkpoint<T>& ck, Model& model) {
  std::size_t used = 0;
  nn::for_each_param(model, "", [&](const std::string& name, ag::Parameter<T>& p) {
    const auto& m = ck.tensor(name);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw CheckpointError("tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()) + ", model expects " + std::to_string(p.value.rows()) +
                            "x" + std::to_string(p.value.cols()));
    }
    p.value = m;
    ++used;
  });
  if (used != ck.tensors.size()) throw CheckpointError("checkpoint carries tensors the model does not use");
}

}  // namespace posgen
