#pragma once

// Portable binary tensor container, used for checkpoints and for frame
// storage. Layout:
//
//   bytes 0..3   magic "VTEN"
//   bytes 4..7   u32 version (1), little-endian
//   bytes 8..15  u64 header length in bytes, little-endian
//   header       UTF-8 JSON: {"tensors":[{"name","shape","dtype","byte_offset"},...]}
//   payload      raw little-endian value buffers, offsets relative to payload start
//
// dtype is "f32" or "f64". Round-trips are bit-exact.

#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

#include "vistr/tensor.hpp"

namespace vistr {

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> tensor;
};

namespace detail {

template <typename S>
constexpr const char* dtype_name() {
  if constexpr (sizeof(S) == 4)
    return "f32";
  else
    return "f64";
}

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

template <typename S>
void save_tensors(const std::string& path, const std::vector<NamedTensor<S>>& tensors) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  nlohmann::json header;
  header["tensors"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& nt : tensors) {
    nlohmann::json e;
    e["name"] = nt.name;
    e["shape"] = nt.tensor.shape();
    e["dtype"] = detail::dtype_name<S>();
    e["byte_offset"] = offset;
    header["tensors"].push_back(e);
    offset += static_cast<uint64_t>(nt.tensor.numel()) * sizeof(S);
  }
  std::string hs = header.dump();
  std::string tmp = path + ".tmp";
  std::ofstream os(tmp, std::ios::binary);
  if (!os) throw format_error("cannot open for writing: " + path);
  os.write("VTEN", 4);
  detail::write_u32(os, 1);
  detail::write_u64(os, hs.size());
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& nt : tensors) {
    // host is little-endian; raw IEEE bytes preserve values exactly
    os.write(reinterpret_cast<const char*>(nt.tensor.data()),
             static_cast<std::streamsize>(nt.tensor.numel() * sizeof(S)));
  }
  os.close();
  if (!os) throw format_error("write failed: " + path);
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw format_error("cannot move into place: " + path);
}

template <typename S>
std::vector<NamedTensor<S>> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "VTEN")
    throw format_error("not a tensor file (bad magic): " + path);
  uint32_t version = detail::read_u32(is);
  if (version != 1) throw format_error("unsupported tensor file version");
  uint64_t hlen = detail::read_u64(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw format_error("truncated header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("bad tensor header JSON: ") + e.what());
  }
  if (!header.contains("tensors"))
    throw format_error("tensor header missing key: tensors");
  std::streampos payload = is.tellg();
  std::vector<NamedTensor<S>> out;
  for (const auto& e : header["tensors"]) {
    std::string dtype = e.at("dtype").get<std::string>();
    if (dtype != detail::dtype_name<S>())
      throw format_error("dtype mismatch for '" + e.at("name").get<std::string>() +
                         "': file has " + dtype);
    Shape shape = e.at("shape").get<Shape>();
    uint64_t off = e.at("byte_offset").get<uint64_t>();
    std::vector<S> data(static_cast<size_t>(numel_of(shape)));
    is.seekg(payload + static_cast<std::streamoff>(off));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(S)));
    if (!is) throw format_error("truncated payload in: " + path);
    out.push_back({e.at("name").get<std::string>(),
                   Tensor<S>::from_data(std::move(shape), std::move(data))});
  }
  return out;
}

template <typename S>
std::map<std::string, Tensor<S>> load_tensor_map(const std::string& path) {
  std::map<std::string, Tensor<S>> m;
  for (auto& nt : load_tensors<S>(path)) {
    if (m.count(nt.name)) throw format_error("duplicate tensor name: " + nt.name);
    m.emplace(nt.name, nt.tensor);
  }
  return m;
}

}  // namespace vistr
