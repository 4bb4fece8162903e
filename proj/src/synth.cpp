// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>

namespace vilt::synth {

using nlohmann::json;

std::string_view shape_name(Shape s) {
  switch (s) {
    case Shape::kCircle: return "circle";
    case Shape::kSquare: return "square";
    case Shape::kTriangle: return "triangle";
  }
  return "?";
}

std::string_view color_name(Color c) {
  switch (c) {
    case Color::kRed: return "red";
    case Color::kGreen: return "green";
    case Color::kBlue: return "blue";
    case Color::kYellow: return "yellow";
  }
  return "?";
}

std::array<double, 3> color_rgb(Color c) {
  switch (c) {
    case Color::kRed: return {0.90, 0.10, 0.10};
    case Color::kGreen: return {0.10, 0.70, 0.20};
    case Color::kBlue: return {0.10, 0.20, 0.90};
    case Color::kYellow: return {0.95, 0.85, 0.10};
  }
  return {0, 0, 0};
}

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view name, const std::array<E, N>& all, std::string_view (*to_name)(E)) {
  for (E e : all) {
    if (to_name(e) == name) return e;
  }
  throw UserError(fmt::format("unknown scene attribute '{}'", name));
}

}  // namespace

void SceneSpec::validate() const {
  if (objects.size() > 4) throw UserError("a scene holds at most 4 objects");
  if (grid < 1 || canvas < grid) throw UserError("scene grid does not fit the canvas");
  std::set<std::pair<int, int>> cells;
  for (const auto& o : objects) {
    if (o.row < 0 || o.row >= grid || o.col < 0 || o.col >= grid) throw UserError("scene object outside the grid");
    if (!cells.emplace(o.row, o.col).second) {
      throw UserError(fmt::format("scene objects overlap at cell ({}, {})", o.row, o.col));
    }
  }
}

json SceneSpec::to_json() const {
  json objs = json::array();
  for (const auto& o : objects) {
    objs.push_back({{"shape", shape_name(o.shape)}, {"color", color_name(o.color)}, {"row", o.row}, {"col", o.col}});
  }
  return {{"objects", objs}, {"canvas", canvas}, {"grid", grid}, {"seed", seed}};
}

SceneSpec SceneSpec::from_json(const json& j) {
  SceneSpec s;
  s.canvas = j.value("canvas", 64);
  s.grid = j.value("grid", 2);
  s.seed = j.value("seed", std::uint64_t{0});
  for (const auto& o : j.at("objects")) {
    s.objects.push_back({parse_enum(o.at("shape").get<std::string>(), kShapes, shape_name),
                         parse_enum(o.at("color").get<std::string>(), kColors, color_name), o.at("row").get<int>(),
                         o.at("col").get<int>()});
  }
  s.validate();
  return s;
}

SceneSpec random_scene(Rng& rng, int canvas, int grid, int max_objects) {
  SceneSpec spec;
  spec.canvas = canvas;
  spec.grid = grid;
  spec.seed = rng();
  const int cells = grid * grid;
  const int count = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(std::min(max_objects, std::min(cells, 4)))));
  std::vector<int> order(static_cast<std::size_t>(cells));
  for (int i = 0; i < cells; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < count; ++i) {
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i) + uniform_index(rng, order.size() - static_cast<std::size_t>(i))]);
    SceneObject o;
    o.shape = kShapes[uniform_index(rng, kShapes.size())];
    o.color = kColors[uniform_index(rng, kColors.size())];
    o.row = order[static_cast<std::size_t>(i)] / grid;
    o.col = order[static_cast<std::size_t>(i)] % grid;
    spec.objects.push_back(o);
  }
  return spec;
}

image::ImageTensor render(const SceneSpec& spec) {
  spec.validate();
  image::ImageTensor img(spec.canvas, spec.canvas, 1.0);
  Rng jitter = derive_rng(spec.seed, {0x5eedULL});
  const int cell = spec.cell_size();
  for (const auto& o : spec.objects) {
    const double dy = static_cast<double>(uniform_index(jitter, 5)) - 2.0;
    const double dx = static_cast<double>(uniform_index(jitter, 5)) - 2.0;
    const double cy = o.row * cell + cell / 2.0 + dy;
    const double cx = o.col * cell + cell / 2.0 + dx;
    const double half = 0.36 * cell;
    const auto rgb = color_rgb(o.color);
    for (int y = o.row * cell; y < (o.row + 1) * cell; ++y) {
      for (int x = o.col * cell; x < (o.col + 1) * cell; ++x) {
        const double py = y + 0.5 - cy;
        const double px = x + 0.5 - cx;
        bool inside = false;
        switch (o.shape) {
          case Shape::kCircle:
            inside = px * px + py * py <= half * half;
            break;
          case Shape::kSquare:
            inside = std::abs(px) <= 0.85 * half && std::abs(py) <= 0.85 * half;
            break;
          case Shape::kTriangle:
            // Apex up; base at +half.
            inside = py <= half && py >= -half && std::abs(px) <= (py + half) / 2.0;
            break;
        }
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

namespace {

std::string describe(const SceneObject& o) { return fmt::format("a {} {}", color_name(o.color), shape_name(o.shape)); }

// Relation of `a` with respect to `b`, or empty when the cells coincide.
std::string relation(const SceneObject& a, const SceneObject& b) {
  if (a.row < b.row) return "above";
  if (a.row > b.row) return "below";
  if (a.col < b.col) return "to the left of";
  if (a.col > b.col) return "to the right of";
  return {};
}

}  // namespace

std::string caption(const SceneSpec& spec, Rng& rng) {
  if (spec.objects.empty()) throw UserError("cannot caption an empty scene");
  std::vector<std::size_t> order(spec.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i + 1 < order.size(); ++i) std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);
  const auto& first = spec.objects[order[0]];
  if (order.size() == 1) return describe(first);
  const auto& second = spec.objects[order[1]];
  std::string out = fmt::format("{} {} {}", describe(first), relation(first, second), describe(second));
  for (std::size_t i = 2; i < order.size(); ++i) out += " and " + describe(spec.objects[order[i]]);
  return out;
}

bool audit_caption(const SceneSpec& spec, std::string_view text) {
  const auto words = text::basic_split(text);
  std::multiset<std::pair<std::string, std::string>> named;
  std::vector<std::pair<std::string, std::string>> sequence;
  for (std::size_t i = 0; i + 1 < words.size(); ++i) {
    const bool is_color = std::any_of(kColors.begin(), kColors.end(), [&](Color c) { return color_name(c) == words[i]; });
    const bool is_shape =
        std::any_of(kShapes.begin(), kShapes.end(), [&](Shape s) { return shape_name(s) == words[i + 1]; });
    if (is_color && is_shape) {
      named.emplace(words[i], words[i + 1]);
      sequence.emplace_back(words[i], words[i + 1]);
    }
  }
  std::multiset<std::pair<std::string, std::string>> actual;
  for (const auto& o : spec.objects) actual.emplace(std::string(color_name(o.color)), std::string(shape_name(o.shape)));
  if (named != actual) return false;
  if (sequence.size() < 2) return true;
  auto find = [&](const std::pair<std::string, std::string>& cs) -> const SceneObject* {
    for (const auto& o : spec.objects) {
      if (color_name(o.color) == cs.first && shape_name(o.shape) == cs.second) return &o;
    }
    return nullptr;
  };
  const SceneObject* a = find(sequence[0]);
  const SceneObject* b = find(sequence[1]);
  // Duplicate (color, shape) pairs make the referent ambiguous; accept any
  // consistent assignment.
  std::string rel;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == "above" || words[i] == "below") {
      rel = words[i];
      break;
    }
    if (words[i] == "left" || words[i] == "right") {
      rel = "to the " + words[i] + " of";
      break;
    }
  }
  if (rel.empty()) return false;
  for (const auto& oa : spec.objects) {
    for (const auto& ob : spec.objects) {
      if (&oa == &ob) continue;
      if (color_name(oa.color) == color_name(a->color) && shape_name(oa.shape) == shape_name(a->shape) &&
          color_name(ob.color) == color_name(b->color) && shape_name(ob.shape) == shape_name(b->shape) &&
          relation(oa, ob) == rel) {
        return true;
      }
    }
  }
  return false;
}

text::Vocabulary toy_vocabulary() {
  std::vector<std::string> tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  const std::vector<std::string> words = {
      "a",       "an",    "the",    "and",     "of",      "to",     "is",     "are",   "in",     "on",
      "with",    "what",  "color",  "shape",   "there",   "both",   "images", "image", "contain", "contains",
      "above",   "below", "left",   "right",   "next",    "near",   "top",    "bottom", "corner", "red",
      "green",   "blue",  "yel",    "##low",   "circle",  "squ",    "##are",  "tri",    "##angle", "object",
      "objects", "one",   "two",    "three",   "four",    "how",    "many",   "yes",    "no",     "white",
      "background", "scene", "picture", "shows", "small", "big",  "gi",     "##raf",  "##fe",   "##s",
      "?",       ".",     ","};
  tokens.insert(tokens.end(), words.begin(), words.end());
  return text::Vocabulary(std::move(tokens), text::Vocabulary::Specials{0, 1, 2, 3, 4});
}

CorpusFiles generate_corpus(std::size_t n, std::uint64_t seed, const std::filesystem::path& dir, int canvas, int grid) {
  if (n < 2) throw UserError("a corpus needs at least 2 image-caption pairs");
  std::filesystem::create_directories(dir / "images");
  CorpusFiles files;
  files.manifest = dir / "manifest.jsonl";
  files.scenes = dir / "scenes.jsonl";
  files.vocab = dir / "vocab.txt";
  std::ofstream scenes(files.scenes);
  if (!scenes) throw Error(fmt::format("cannot write '{}'", files.scenes.string()));
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = derive_rng(seed, {i});
    SceneSpec spec = random_scene(rng, canvas, grid);
    const std::string rel = fmt::format("images/{:05d}.png", i);
    image::save_png(render(spec), dir / rel);
    files.entries.push_back({rel, caption(spec, rng), i % 8 == 7 ? "val" : "train"});
    scenes << spec.to_json().dump() << '\n';
    files.specs.push_back(std::move(spec));
  }
  text::write_manifest(files.manifest, files.entries);
  toy_vocabulary().save(files.vocab);
  return files;
}

std::vector<SceneSpec> read_scenes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UserError(fmt::format("cannot open scene list '{}'", path.string()));
  std::vector<SceneSpec> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(SceneSpec::from_json(json::parse(line)));
  }
  return out;
}

std::vector<std::string> answer_classes() {
  std::vector<std::string> out;
  for (Color c : kColors) out.emplace_back(color_name(c));
  for (Shape s : kShapes) out.emplace_back(shape_name(s));
  return out;
}

std::vector<QuestionExample> questions_for(const SceneSpec& spec) {
  std::vector<QuestionExample> out;
  for (const auto& o : spec.objects) {
    const auto same_shape = std::count_if(spec.objects.begin(), spec.objects.end(),
                                          [&](const SceneObject& x) { return x.shape == o.shape; });
    if (same_shape == 1) {
      out.push_back({fmt::format("what color is the {} ?", shape_name(o.shape)), static_cast<int>(o.color)});
    }
    const auto same_color = std::count_if(spec.objects.begin(), spec.objects.end(),
                                          [&](const SceneObject& x) { return x.color == o.color; });
    if (same_color == 1) {
      out.push_back({fmt::format("what shape is the {} object ?", color_name(o.color)),
                     static_cast<int>(kColors.size()) + static_cast<int>(o.shape)});
    }
  }
  return out;
}

PairStatement pair_statement(const SceneSpec& first, const SceneSpec& second, Rng& rng) {
  if (first.objects.empty()) throw UserError("pair statement needs a non-empty first scene");
  const auto& o = first.objects[uniform_index(rng, first.objects.size())];
  const bool label = std::any_of(second.objects.begin(), second.objects.end(), [&](const SceneObject& x) {
    return x.color == o.color && x.shape == o.shape;
  });
  return {fmt::format("both images contain {} .", describe(o)), label};
}

}  // namespace vilt::synth
