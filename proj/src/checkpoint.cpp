// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>

namespace vilt::checkpoint {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void Checkpoint::put(const std::string& name, const Matrix& value) { tensors_[name] = value; }

const Matrix& Checkpoint::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw UserError(fmt::format("checkpoint has no tensor '{}'", name));
  return it->second;
}

void Checkpoint::put_parameters(std::span<ad::Parameter* const> params, const std::string& prefix) {
  for (const ad::Parameter* p : params) put(prefix + p->name, p->value);
}

void Checkpoint::get_parameters(std::span<ad::Parameter* const> params, const std::string& prefix) const {
  for (ad::Parameter* p : params) {
    const Matrix& m = get(prefix + p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw UserError(fmt::format("checkpoint tensor '{}' has shape {}x{}, model expects {}x{}", prefix + p->name,
                                  m.rows(), m.cols(), p->value.rows(), p->value.cols()));
    }
    p->value = m;
  }
}

std::string Checkpoint::serialize() const {
  json header;
  header["format_version"] = kFormatVersion;
  header["config"] = config;
  header["metadata"] = metadata;
  json entries = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors_) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(m.size()) * sizeof(double);
    entries[name] = {{"dtype", "f64"}, {"shape", {m.rows(), m.cols()}}, {"offset", {offset, offset + bytes}}};
    offset += bytes;
  }
  header["tensors"] = entries;
  const std::string head = header.dump();
  std::string out;
  out.reserve(8 + head.size() + offset);
  const std::uint64_t len = head.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += head;
  for (const auto& [name, m] : tensors_) {
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return out;
}

Checkpoint Checkpoint::deserialize(std::string_view bytes, const std::string& origin) {
  auto fail = [&origin](const std::string& what) { return UserError(fmt::format("checkpoint '{}': {}", origin, what)); };
  if (bytes.size() < 8) throw fail("truncated header length");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), sizeof(len));
  if (len > bytes.size() - 8) throw fail("header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.substr(8, len));
  } catch (const json::exception& e) {
    throw fail(fmt::format("malformed header: {}", e.what()));
  }
  if (!header.is_object()) throw fail("header is not a JSON object");
  const auto vit = header.find("format_version");
  const int version = (vit != header.end() && vit->is_number_integer()) ? vit->get<int>() : -1;
  if (version != kFormatVersion) throw fail(fmt::format("unsupported format version {}", version));
  Checkpoint ck;
  ck.config = header.value("config", json::object());
  ck.metadata = header.value("metadata", json::object());
  const std::string_view data = bytes.substr(8 + len);
  if (!header.contains("tensors") || !header.at("tensors").is_object()) throw fail("missing tensor table");
  for (const auto& [name, entry] : header.at("tensors").items()) {
    std::string dtype;
    std::vector<std::int64_t> shape;
    std::vector<std::uint64_t> offs;
    try {
      dtype = entry.at("dtype").get<std::string>();
      shape = entry.at("shape").get<std::vector<std::int64_t>>();
      offs = entry.at("offset").get<std::vector<std::uint64_t>>();
    } catch (const json::exception&) {
      throw fail(fmt::format("bad entry for '{}'", name));
    }
    if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0 || offs.size() != 2 || offs[1] < offs[0] ||
        offs[1] > data.size()) {
      throw fail(fmt::format("bad entry for '{}'", name));
    }
    const std::size_t elem = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
    if (elem == 0) throw fail(fmt::format("unsupported dtype '{}' for '{}'", dtype, name));
    const auto count = static_cast<std::uint64_t>(shape[0] * shape[1]);
    if (offs[1] - offs[0] != count * elem) throw fail(fmt::format("byte range of '{}' does not match its shape", name));
    Matrix m(shape[0], shape[1]);
    const char* src = data.data() + offs[0];
    if (elem == 8) {
      std::memcpy(m.data(), src, count * 8);
    } else {
      for (std::uint64_t i = 0; i < count; ++i) {
        float f = 0.0f;
        std::memcpy(&f, src + 4 * i, 4);
        m.data()[i] = f;
      }
    }
    ck.tensors_.emplace(name, std::move(m));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write checkpoint '{}'", path.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(fmt::format("short write to checkpoint '{}'", path.string()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError(fmt::format("cannot open checkpoint '{}'", path.string()));
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError(fmt::format("cannot open '{}'", path.string()));
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes));
}

}  // namespace vilt::checkpoint
