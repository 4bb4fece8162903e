// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

// Deterministic synthetic image–caption corpus: filled shapes on a white
// canvas, placed in grid cells, described by templated captions.

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vilt/common.hpp"
#include "vilt/image.hpp"
#include "vilt/text.hpp"

namespace vilt::synth {

enum class Shape { kCircle, kSquare, kTriangle };
enum class Color { kRed, kGreen, kBlue, kYellow };

inline constexpr std::array<Shape, 3> kShapes = {Shape::kCircle, Shape::kSquare, Shape::kTriangle};
inline constexpr std::array<Color, 4> kColors = {Color::kRed, Color::kGreen, Color::kBlue, Color::kYellow};

std::string_view shape_name(Shape s);
std::string_view color_name(Color c);
std::array<double, 3> color_rgb(Color c);

struct SceneObject {
  Shape shape = Shape::kCircle;
  Color color = Color::kRed;
  int row = 0;
  int col = 0;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  int canvas = 64;
  int grid = 2;
  std::uint64_t seed = 0;

  /// Throws UserError on more than 4 objects, out-of-grid or shared cells.
  void validate() const;
  [[nodiscard]] int cell_size() const { return canvas / grid; }
  [[nodiscard]] nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

/// Random scene with 1..max_objects objects in distinct cells.
SceneSpec random_scene(Rng& rng, int canvas = 64, int grid = 2, int max_objects = 3);

/// Filled shapes on white; the seed jitters each shape's offset inside its
/// cell by at most two pixels.
image::ImageTensor render(const SceneSpec& spec);

/// "a {color} {shape}" for one object; with more, the first two listed are
/// joined by a spatial relation and the rest appended with "and".
std::string caption(const SceneSpec& spec, Rng& rng);

/// Checks that a caption names exactly the scene's (color, shape) pairs and
/// that its relation matches the grid geometry.
bool audit_caption(const SceneSpec& spec, std::string_view caption);

/// Closed vocabulary covering every emitted word, with a few words split
/// into WordPiece continuations.
text::Vocabulary toy_vocabulary();

struct CorpusFiles {
  std::filesystem::path manifest;
  std::filesystem::path scenes;
  std::filesystem::path vocab;
  std::vector<text::CorpusEntry> entries;
  std::vector<SceneSpec> specs;
};

/// Writes images/NNNNN.png, manifest.jsonl {image, caption, split},
/// scenes.jsonl and vocab.txt (+ sidecar) under `dir`. Every 8th sample
/// goes to the "val" split. Throws UserError when n < 2.
CorpusFiles generate_corpus(std::size_t n, std::uint64_t seed, const std::filesystem::path& dir, int canvas = 64,
                            int grid = 2);

/// Reads scenes.jsonl written by generate_corpus.
std::vector<SceneSpec> read_scenes(const std::filesystem::path& path);

/// Answer inventory for the toy classification task: colors then shapes.
std::vector<std::string> answer_classes();

struct QuestionExample {
  std::string question;
  int answer = 0;
};

/// Questions answerable from the scene: the color of a uniquely-shaped
/// object or the shape of a uniquely-colored object.
std::vector<QuestionExample> questions_for(const SceneSpec& spec);

/// "both images contain a {color} {shape} ." with label true iff the
/// second scene also holds that object.
struct PairStatement {
  std::string statement;
  bool label = false;
};
PairStatement pair_statement(const SceneSpec& first, const SceneSpec& second, Rng& rng);

}  // namespace vilt::synth
