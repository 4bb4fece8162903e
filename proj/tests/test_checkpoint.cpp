// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "helpers.hpp"
#include "vilt/checkpoint.hpp"

namespace vilt::checkpoint {
namespace {

using testing::TempDir;

std::string with_header(const std::string& header, const std::string& data = "") {
  std::string out(8, '\0');
  const std::uint64_t len = header.size();
  std::memcpy(out.data(), &len, sizeof(len));
  return out + header + data;
}

TEST(Checkpoint, SaveLoadRoundTripIsBitwise) {
  TempDir dir("ckpt");
  Checkpoint ck;
  ck.config = {{"seed", 3}};
  ck.metadata = {{"kind", "pretrain"}};
  Matrix a(2, 3);
  a << 1.0, -2.5, 3.25, 1e-300, -0.0, 7.0;
  ck.put("a", a);
  ck.put("empty", Matrix(0, 4));
  ck.save(dir.path / "x.ckpt");
  EXPECT_FALSE(std::filesystem::exists(dir.path / "x.ckpt.tmp"));

  const auto back = Checkpoint::load(dir.path / "x.ckpt");
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.metadata, ck.metadata);
  EXPECT_EQ(back.get("a"), a);
  EXPECT_EQ(back.get("empty").cols(), 4);
  EXPECT_TRUE(std::signbit(back.get("a")(1, 1)));
  EXPECT_EQ(back.serialize(), ck.serialize());
  EXPECT_THROW(back.get("missing"), UserError);
  EXPECT_THROW(Checkpoint::load(dir.path / "none.ckpt"), UserError);
}

TEST(Checkpoint, HeaderLayout) {
  Checkpoint ck;
  ck.put("w", Matrix::Constant(1, 2, 0.5));
  const auto bytes = ck.serialize();
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), sizeof(len));
  const auto header = nlohmann::json::parse(bytes.substr(8, len));
  EXPECT_EQ(header.at("format_version"), kFormatVersion);
  EXPECT_EQ(header.at("tensors").at("w").at("dtype"), "f64");
  EXPECT_EQ(header.at("tensors").at("w").at("offset"), nlohmann::json({0, 16}));
  EXPECT_EQ(bytes.size(), 8 + len + 16);
}

TEST(Checkpoint, ReadsFloat32Tensors) {
  const float vals[3] = {1.5f, -2.0f, 0.25f};
  std::string data(reinterpret_cast<const char*>(vals), sizeof(vals));
  const auto bytes = with_header(
      R"({"format_version":1,"tensors":{"f":{"dtype":"f32","shape":[1,3],"offset":[0,12]}}})", data);
  const auto ck = Checkpoint::deserialize(bytes);
  EXPECT_DOUBLE_EQ(ck.get("f")(0, 1), -2.0);
  EXPECT_DOUBLE_EQ(ck.get("f")(0, 2), 0.25);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  EXPECT_THROW(Checkpoint::deserialize("abc"), UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header("{not json")), UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header("[1, 2]")), UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header(R"({"format_version":2,"tensors":{}})")), UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header(R"({"format_version":"1","tensors":{}})")), UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header(R"({"format_version":1})")), UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header(
                   R"({"format_version":1,"tensors":{"a":{"dtype":"f64","shape":[1,1],"offset":[0,8]}}})", "1234")),
               UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header(
                   R"({"format_version":1,"tensors":{"a":{"dtype":"i8","shape":[1,1],"offset":[0,1]}}})", "x")),
               UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header(
                   R"({"format_version":1,"tensors":{"a":{"dtype":"f64","shape":[-1,-1],"offset":[0,8]}}})",
                   std::string(8, '\0'))),
               UserError);
  EXPECT_THROW(Checkpoint::deserialize(with_header(R"({"format_version":1,"tensors":{"a":{"shape":[1,1]}}})")),
               UserError);
  // Header length past the end.
  std::string huge(8, '\xff');
  EXPECT_THROW(Checkpoint::deserialize(huge + "{}"), UserError);
}

TEST(Checkpoint, ParametersRoundTripAndShapeCheck) {
  ad::Parameter a{"enc.a", Matrix::Constant(2, 2, 1.0), Matrix(), true};
  ad::Parameter b{"enc.b", Matrix::Constant(1, 3, 2.0), Matrix(), false};
  std::vector<ad::Parameter*> params = {&a, &b};
  Checkpoint ck;
  ck.put_parameters(params, "model.");
  EXPECT_TRUE(ck.contains("model.enc.a"));
  a.value.setZero();
  b.value.setZero();
  ck.get_parameters(params, "model.");
  EXPECT_EQ(a.value, Matrix::Constant(2, 2, 1.0));
  EXPECT_EQ(b.value, Matrix::Constant(1, 3, 2.0));

  ad::Parameter wrong{"enc.a", Matrix::Zero(3, 2), Matrix(), true};
  std::vector<ad::Parameter*> bad = {&wrong};
  EXPECT_THROW(ck.get_parameters(bad, "model."), UserError);
  EXPECT_THROW(ck.get_parameters(params), UserError);
}

TEST(FileHash, StableAndContentSensitive) {
  TempDir dir("hash");
  const auto p = dir.path / "f.txt";
  {
    std::ofstream(p) << "hello";
  }
  const auto h = file_hash(p);
  EXPECT_EQ(h.size(), 16U);
  EXPECT_EQ(h, file_hash(p));
  // FNV-1a 64 of "hello".
  EXPECT_EQ(h, "a430d84680aabd0b");
  {
    std::ofstream(p) << "hellp";
  }
  EXPECT_NE(file_hash(p), h);
  EXPECT_THROW(file_hash(dir.path / "none"), UserError);
}

}  // namespace
}  // namespace vilt::checkpoint
