#pragma once

// Binary checkpoint container.
//
// Layout: 8-byte magic "TRAPBIN1", u64 little-endian header length, a UTF-8
// JSON header, then the tensor payload as row-major little-endian float32.
// The header records schema_version, free-form metadata and one entry per
// tensor with its shape and byte offset into the payload.

#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "trap/autodiff.hpp"
#include "trap/common.hpp"
#include "trap/geometry.hpp"

namespace trap {

constexpr int kCheckpointSchemaVersion = 1;
inline constexpr char kCheckpointMagic[] = "TRAPBIN1";

struct Checkpoint {
  nlohmann::json meta;  // must carry a "kind" string
  std::vector<std::pair<std::string, ad::Matrix>> tensors;

  void add(const std::string& name, const ad::Matrix& m) { tensors.emplace_back(name, m); }

  bool has(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return true;
    return false;
  }

  const ad::Matrix& tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return m;
    throw io_error("checkpoint: missing tensor '" + name + "'");
  }
};

namespace detail {

inline void put_u64le(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64le(const std::string& buf, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[off + i])) << (8 * i);
  return v;
}

inline void put_f32le(std::string& buf, float f) {
  uint32_t b;
  std::memcpy(&b, &f, 4);
  for (int i = 0; i < 4; ++i) buf.push_back(char((b >> (8 * i)) & 0xff));
}

inline float get_f32le(const std::string& buf, size_t off) {
  uint32_t b = 0;
  for (int i = 0; i < 4; ++i) b |= uint32_t(uint8_t(buf[off + i])) << (8 * i);
  float f;
  std::memcpy(&f, &b, 4);
  return f;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  if (!ck.meta.contains("kind")) throw io_error("checkpoint: meta lacks 'kind'");

  nlohmann::json header;
  header["schema_version"] = kCheckpointSchemaVersion;
  header["meta"] = ck.meta;
  header["tensors"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, m] : ck.tensors) {
    header["tensors"].push_back({{"name", name},
                                 {"rows", m.rows()},
                                 {"cols", m.cols()},
                                 {"offset", offset},
                                 {"dtype", "f32le"}});
    offset += uint64_t(m.size()) * 4;
  }
  std::string hs = header.dump();

  std::string buf;
  buf.reserve(16 + hs.size() + offset);
  buf.append(kCheckpointMagic, 8);
  detail::put_u64le(buf, hs.size());
  buf += hs;
  for (const auto& [name, m] : ck.tensors)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_f32le(buf, float(m(i, j)));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("checkpoint: cannot open for write: " + path);
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out) throw io_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("checkpoint: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 16 || buf.compare(0, 8, kCheckpointMagic, 8) != 0)
    throw io_error("checkpoint: bad magic: " + path);
  uint64_t hlen = detail::get_u64le(buf, 8);
  if (16 + hlen > buf.size()) throw io_error("checkpoint: truncated header: " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw io_error("checkpoint: header parse failure: " + std::string(e.what()));
  }
  if (!header.contains("schema_version") ||
      header["schema_version"].get<int>() != kCheckpointSchemaVersion)
    throw io_error("checkpoint: unsupported schema version");

  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  size_t payload = 16 + hlen;
  for (const auto& t : header.value("tensors", nlohmann::json::array())) {
    auto name = t.at("name").get<std::string>();
    auto r = t.at("rows").get<Eigen::Index>();
    auto c = t.at("cols").get<Eigen::Index>();
    auto off = t.at("offset").get<uint64_t>();
    if (r < 0 || c < 0) throw io_error("checkpoint: negative tensor shape");
    size_t need = payload + off + size_t(r) * size_t(c) * 4;
    if (need > buf.size()) throw io_error("checkpoint: truncated payload: " + path);
    ad::Matrix m(r, c);
    size_t p = payload + off;
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j, p += 4) m(i, j) = detail::get_f32le(buf, p);
    ck.tensors.emplace_back(std::move(name), std::move(m));
  }
  return ck;
}

// ---- trigger convenience wrappers ---------------------------------------------

inline void save_trigger(const std::string& path, const TriggerPatch& t) {
  Checkpoint ck;
  ck.meta = {{"kind", "trigger"},
             {"height", t.height},
             {"width", t.width},
             {"squash", "sigmoid"}};
  ck.add("base", t.base.value);
  save_checkpoint(path, ck);
}

inline TriggerPatch load_trigger(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "trigger")
    throw io_error("not a trigger checkpoint: " + path);
  if (ck.meta.value("squash", "") != "sigmoid")
    throw io_error("unsupported trigger squash: " + path);
  TriggerPatch t;
  t.height = ck.meta.at("height").get<int>();
  t.width = ck.meta.at("width").get<int>();
  const ad::Matrix& base = ck.tensor("base");
  if (base.rows() != Eigen::Index(t.height) * t.width || base.cols() != 3)
    throw io_error("trigger tensor shape mismatch: " + path);
  t.base = ad::Param(base, "trigger");
  return t;
}

}  // namespace trap
