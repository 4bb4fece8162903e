// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Single-file named-tensor container.
//
//   [u64 LE header_len][header_len bytes of JSON][raw tensor data]
//
// The JSON header is
//   {"format_version": 1, "config": {...}, "metadata": {...},
//    "tensors": {name: {"dtype": "f64", "shape": [r, c], "offset": [begin, end]}}}
// with offsets relative to the start of the data section. Tensor data is
// little-endian; "f64" and "f32" are readable, "f64" is written.

#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vilt/autodiff.hpp"
#include "vilt/common.hpp"

namespace vilt::checkpoint {

inline constexpr int kFormatVersion = 1;

class Checkpoint {
 public:
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json metadata = nlohmann::json::object();

  void put(const std::string& name, const Matrix& value);
  [[nodiscard]] bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  /// Throws UserError when missing.
  [[nodiscard]] const Matrix& get(const std::string& name) const;
  [[nodiscard]] const std::map<std::string, Matrix>& tensors() const { return tensors_; }

  /// Stores every parameter value under `prefix + name`.
  void put_parameters(std::span<ad::Parameter* const> params, const std::string& prefix = "");
  /// Loads `prefix + name` into each parameter; shapes must match exactly.
  void get_parameters(std::span<ad::Parameter* const> params, const std::string& prefix = "") const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  /// Serialized byte image (what `save` writes).
  [[nodiscard]] std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes, const std::string& origin = "<memory>");

 private:
  std::map<std::string, Matrix> tensors_;
};

/// FNV-1a fingerprint of a file's bytes, hex encoded.
std::string file_hash(const std::filesystem::path& path);

}  // namespace vilt::checkpoint
