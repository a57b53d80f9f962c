#pragma once

// Checkpoint layout (all integers little-endian):
//
//   "BGML" | u32 version | u32 header_len | header JSON (header_len bytes) | blobs
//
// The header holds the ModelConfig and a manifest of {name, shape, offset};
// offsets are byte offsets into the blob section, which stores every
// parameter as raw f32 in manifest order.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "bagnet/model.hpp"

namespace bagnet {

inline constexpr std::string_view kCheckpointMagic = "BGML";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"in_channels", c.in_channels}, {"channels", c.channels}, {"n3", c.n3},
          {"n1", c.n1}, {"classes", c.classes}};
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const ToyBagNet<float>& model) {
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, p] : model.parameters()) {
    manifest.push_back({{"name", name}, {"shape", p->shape()}, {"offset", offset}});
    offset += p->size() * sizeof(float);
  }
  const nlohmann::json header = {{"config", to_json(model.config)}, {"params", manifest}};
  const std::string text = header.dump();

  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, p] : model.parameters())
    for (float v : p->data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline ToyBagNet<float> decode_checkpoint(std::string_view bytes, const std::string& origin = "<memory>") {
  auto fail = [&](std::size_t at, const std::string& why) {
    return IoError(origin + ": malformed checkpoint at byte " + std::to_string(at) + ": " + why);
  };
  if (bytes.size() < 12 || bytes.substr(0, 4) != kCheckpointMagic) throw fail(0, "bad magic");
  const std::uint32_t version = detail::get_u32(bytes, 4);
  if (version != kCheckpointVersion) throw fail(4, "unsupported version " + std::to_string(version));
  const std::uint32_t hlen = detail::get_u32(bytes, 8);
  if (bytes.size() < 12 + std::size_t{hlen}) throw fail(8, "header length exceeds file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw fail(12, std::string("header JSON: ") + e.what());
  }
  const std::size_t blob = 12 + hlen;
  ModelConfig cfg;
  try {
    const auto& c = header.at("config");
    cfg.in_channels = c.at("in_channels");
    cfg.channels = c.at("channels");
    cfg.n3 = c.at("n3");
    cfg.n1 = c.at("n1");
    cfg.classes = c.at("classes");
  } catch (const nlohmann::json::exception& e) {
    throw fail(12, std::string("config: ") + e.what());
  }
  auto model = ToyBagNet<float>::zeros(cfg);
  auto params = model.parameters();
  const auto& manifest = header.at("params");
  if (manifest.size() != params.size())
    throw fail(12, "manifest lists " + std::to_string(manifest.size()) + " tensors, config implies " +
                       std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    auto& [name, tensor] = params[i];
    if (entry.at("name") != name) throw fail(12, "expected tensor " + name);
    if (entry.at("shape").get<Shape>() != tensor->shape()) throw fail(12, "shape mismatch for " + name);
    const std::size_t at = blob + entry.at("offset").get<std::size_t>();
    if (at + tensor->size() * 4 > bytes.size()) throw fail(at, "truncated data for " + name);
    for (std::size_t j = 0; j < tensor->size(); ++j)
      (*tensor)[j] = std::bit_cast<float>(detail::get_u32(bytes, at + 4 * j));
  }
  return model;
}

inline void save_checkpoint(const ToyBagNet<float>& model, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline ToyBagNet<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

}  // namespace bagnet
