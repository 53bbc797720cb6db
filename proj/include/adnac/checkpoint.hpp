#pragma once

// Binary checkpoint container:
//   "ADNC" | u32 version | u64 header length | JSON header | f32 payloads
// Payloads are little-endian and start on 64-byte boundaries; the header
// records each tensor's shape and absolute byte offset plus arbitrary
// non-tensor state.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "adnac/error.hpp"
#include "adnac/tensor.hpp"
#include "json.hpp"

namespace adnac {

inline constexpr char kCheckpointMagic[4] = {'A', 'D', 'N', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kPayloadAlign = 64;

struct CheckpointData {
  nlohmann::ordered_json state = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  void put(const std::string& name, Tensor<float> t) {
    for (auto& [n, v] : tensors)
      if (n == name) {
        v = std::move(t);
        return;
      }
    tensors.emplace_back(name, std::move(t));
  }
  bool has(const std::string& name) const {
    for (const auto& [n, v] : tensors)
      if (n == name) return true;
    return false;
  }
  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, v] : tensors)
      if (n == name) return v;
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put_le(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

template <typename U>
U get_le(const std::string& in, std::size_t pos) {
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  return v;
}

inline std::size_t align_up(std::size_t n) { return (n + kPayloadAlign - 1) / kPayloadAlign * kPayloadAlign; }

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointData& ck) {
  // Offsets depend on the header length, which depends on the offsets; lay
  // out payloads relative to a guessed start and grow it until it fits.
  std::size_t payload_start = 0;
  nlohmann::ordered_json header;
  std::string header_text;
  for (int iter = 0; iter < 8; ++iter) {
    header = nlohmann::ordered_json::object();
    header["format_version"] = kCheckpointVersion;
    auto& tj = header["tensors"] = nlohmann::ordered_json::object();
    std::size_t off = payload_start;
    for (const auto& [name, t] : ck.tensors) {
      if (t.data.size() != numel(t.shape)) throw ShapeError("checkpoint tensor '" + name + "' has inconsistent shape");
      tj[name] = {{"shape", t.shape}, {"dtype", "f32"}, {"offset", off}, {"nbytes", t.size() * sizeof(float)}};
      off = detail::align_up(off + t.size() * sizeof(float));
    }
    header["state"] = ck.state;
    header_text = header.dump();
    const std::size_t needed = detail::align_up(4 + 4 + 8 + header_text.size());
    if (needed == payload_start) break;
    payload_start = std::max(payload_start, needed);
  }
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  for (const auto& [name, t] : ck.tensors) {
    const std::size_t off = header["tensors"][name]["offset"].get<std::size_t>();
    if (out.size() > off) throw FormatError("checkpoint layout error");
    out.resize(off, '\0');
    out.append(reinterpret_cast<const char*>(t.data.data()), t.size() * sizeof(float));
  }
  return out;
}

inline CheckpointData decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError(what + ": not an ADNC checkpoint");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion)
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(bytes, 8);
  if (hlen > bytes.size() - 16) throw FormatError(what + ": truncated header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  }
  CheckpointData ck;
  try {
    if (header.at("format_version").get<std::uint32_t>() != version)
      throw FormatError(what + ": header version disagrees with preamble");
    ck.state = header.at("state");
    for (const auto& [name, tj] : header.at("tensors").items()) {
      if (tj.at("dtype").get<std::string>() != "f32") throw FormatError(what + ": tensor '" + name + "' is not f32");
      Shape shape = tj.at("shape").get<Shape>();
      const auto off = tj.at("offset").get<std::size_t>();
      const auto nbytes = tj.at("nbytes").get<std::size_t>();
      if (nbytes != numel(shape) * sizeof(float)) throw FormatError(what + ": tensor '" + name + "' size mismatch");
      if (off < 16 + hlen || off > bytes.size() || nbytes > bytes.size() - off)
        throw FormatError(what + ": tensor '" + name + "' lies outside the file (truncated?)");
      Tensor<float> t(std::move(shape));
      std::memcpy(t.data.data(), bytes.data() + off, nbytes);
      ck.tensors.emplace_back(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& ck) {
  const std::string bytes = encode_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // write-then-rename so a crash never leaves a half-written checkpoint behind
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

// Parameter stores map one-to-one onto named tensors.
inline void put_params(CheckpointData& ck, const ParamStore<float>& ps, const std::string& prefix = "") {
  for (std::size_t i = 0; i < ps.size(); ++i) ck.put(prefix + ps[i].name, ps[i].value);
}

inline void load_params(const CheckpointData& ck, ParamStore<float>& ps, const std::string& prefix = "") {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& t = ck.tensor(prefix + ps[i].name);
    if (t.shape != ps[i].value.shape)
      throw FormatError("checkpoint tensor '" + prefix + ps[i].name + "' has shape " + shape_str(t.shape) +
                        ", expected " + shape_str(ps[i].value.shape));
    ps[i].value = t;
  }
}

}  // namespace adnac
