#pragma once

// Binary checkpoint:
//   8 bytes   magic "UNIMEEC1"
//   8 bytes   header length n, little-endian uint64
//   n bytes   JSON header {"config", "vocab", "tensors": [{name, rows, cols}]}
//   payload   every tensor's values as little-endian float64, row-major, in
//             header order
// Values round-trip bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "json.hpp"
#include "unimeec/model.hpp"

namespace unimeec {

inline constexpr char kCheckpointMagic[8] = {'U', 'N', 'I', 'M', 'E', 'E', 'C', '1'};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void write_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.write(b, 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  char b[8];
  if (!in.read(b, 8)) throw ParseError("checkpoint: truncated header");
  std::uint64_t v;
  std::memcpy(&v, b, 8);
  return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Model& model) {
  const ParameterStore& store = model.params();
  nlohmann::json header;
  header["config"] = to_json(model.config());
  header["vocab"] = model.vocab().to_json();
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < store.size(); ++i)
    tensors.push_back({{"name", store[i].name}, {"rows", store[i].value.rows()}, {"cols", store[i].value.cols()}});
  header["tensors"] = tensors;
  const std::string text = header.dump();
  out.write(kCheckpointMagic, 8);
  detail::write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Matrix& m = store[i].value;
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw Error("checkpoint: write failed");
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path);
  write_checkpoint(out, model);
}

// Rebuilds the model from the stored config, then overwrites every tensor.
inline Model read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError("checkpoint: bad magic");
  const std::uint64_t n = detail::read_u64(in);
  if (n > (std::uint64_t{1} << 32)) throw ParseError("checkpoint: implausible header length");
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw ParseError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  Model model(model_from_json(header.at("config")));
  if (header.at("vocab") != model.vocab().to_json()) throw SchemaError("checkpoint: vocabulary differs from config");
  ParameterStore& store = model.params();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != store.size())
    throw SchemaError("checkpoint: tensor count " + std::to_string(tensors.size()) + " differs from model " +
                      std::to_string(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& t = tensors[i];
    Parameter& p = store[i];
    if (t.at("name").get<std::string>() != p.name)
      throw SchemaError("checkpoint: tensor " + std::to_string(i) + " is " + t.at("name").get<std::string>() +
                        ", expected " + p.name);
    if (t.at("rows").get<Eigen::Index>() != p.value.rows() || t.at("cols").get<Eigen::Index>() != p.value.cols())
      throw ShapeError("checkpoint: shape mismatch for " + p.name);
    if (!in.read(reinterpret_cast<char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * 8)))
      throw ParseError("checkpoint: truncated payload at " + p.name);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint: trailing bytes");
  return model;
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  return read_checkpoint(in);
}

}  // namespace unimeec
