// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vilt/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <fmt/format.h>
#include <png.h>

namespace vilt::image {

ImageTensor::ImageTensor(int height, int width, double fill)
    : height_(height),
      width_(width),
      data_(static_cast<std::size_t>(kChannels) * static_cast<std::size_t>(std::max(height, 0)) *
                static_cast<std::size_t>(std::max(width, 0)),
            fill) {
  if (height < 0 || width < 0) throw UserError("negative image size");
}

// ---- I/O -----------------------------------------------------------------------

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

ImageTensor load_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw UserError(fmt::format("cannot decode PNG '{}': {}", path.string(), png.message));
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&png);
    throw UserError(fmt::format("cannot decode PNG '{}': {}", path.string(), png.message));
  }
  ImageTensor img(static_cast<int>(png.height), static_cast<int>(png.width));
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = buf[(static_cast<std::size_t>(y) * img.width() + x) * 3 + c] / 255.0;
      }
    }
  }
  return img;
}

ImageTensor load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw UserError(fmt::format("'{}' is not a binary PPM", path.string()));
  auto next_int = [&in, &path] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    int v = 0;
    if (!(in >> v)) throw UserError(fmt::format("malformed PPM header in '{}'", path.string()));
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
    throw UserError(fmt::format("unsupported PPM geometry in '{}'", path.string()));
  }
  in.get();
  const int bytes = maxval < 256 ? 1 : 2;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3 * bytes);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw UserError(fmt::format("truncated PPM '{}'", path.string()));
  }
  ImageTensor img(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const std::size_t i = (static_cast<std::size_t>(y) * w + x) * 3 + c;
        const int v = bytes == 1 ? buf[i] : (buf[2 * i] << 8) | buf[2 * i + 1];
        img.at(c, y, x) = static_cast<double>(v) / maxval;
      }
    }
  }
  return img;
}

}  // namespace

ImageTensor load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError(fmt::format("cannot open image '{}'", path.string()));
  char sig[8] = {};
  in.read(sig, 8);
  if (in.gcount() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(sig), 0, 8) == 0) return load_png(path);
  if (in.gcount() >= 2 && sig[0] == 'P' && sig[1] == '6') return load_ppm(path);
  throw UserError(fmt::format("'{}': only PNG and PPM images are supported", path.string()));
}

void save_png(const ImageTensor& img, const std::filesystem::path& path) {
  if (img.empty()) throw UserError("cannot save an empty image");
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(img.height()) * img.width() * 3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) buf[(static_cast<std::size_t>(y) * img.width() + x) * 3 + c] = to_byte(img.at(c, y, x));
    }
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw Error(fmt::format("cannot write PNG '{}': {}", path.string(), png.message));
  }
}

void save_ppm(const ImageTensor& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot write PPM '{}'", path.string()));
  out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.put(static_cast<char>(to_byte(img.at(c, y, x))));
    }
  }
}

// ---- geometry ------------------------------------------------------------------

namespace {

// Bilinear sample at continuous pixel coordinates (pixel centers at
// integers); coordinates are clamped to the border.
double sample_clamped(const ImageTensor& img, int c, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(img.height() - 1));
  x = std::clamp(x, 0.0, static_cast<double>(img.width() - 1));
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const double fy = y - y0;
  const double fx = x - x0;
  return (1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
         fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
}

// Bilinear sample where points outside the image take `fill`.
double sample_fill(const ImageTensor& img, int c, double y, double x, double fill) {
  if (y < -0.5 || x < -0.5 || y > img.height() - 0.5 || x > img.width() - 0.5) return fill;
  return sample_clamped(img, c, y, x);
}

}  // namespace

ImageTensor resize_bilinear(const ImageTensor& img, int height, int width) {
  if (img.empty()) throw UserError("cannot resize an empty image");
  if (height <= 0 || width <= 0) throw UserError("resize target must be positive");
  if (height == img.height() && width == img.width()) return img;
  ImageTensor out(height, width);
  const double sy = static_cast<double>(img.height()) / height;
  const double sx = static_cast<double>(img.width()) / width;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < height; ++y) {
      const double src_y = (y + 0.5) * sy - 0.5;
      for (int x = 0; x < width; ++x) {
        out.at(c, y, x) = sample_clamped(img, c, src_y, (x + 0.5) * sx - 0.5);
      }
    }
  }
  return out;
}

std::pair<int, int> keep_aspect_size(int height, int width, int short_edge, int long_cap) {
  if (height <= 0 || width <= 0) throw UserError("zero-sized image");
  const int shorter = std::min(height, width);
  const int longer = std::max(height, width);
  double scale = static_cast<double>(short_edge) / shorter;
  if (longer * scale > long_cap) scale = static_cast<double>(long_cap) / longer;
  const int h = std::max(1, static_cast<int>(std::lround(height * scale)));
  const int w = std::max(1, static_cast<int>(std::lround(width * scale)));
  return {h, w};
}

ImageTensor resize_keep_aspect(const ImageTensor& img, int short_edge, int long_cap) {
  if (img.empty()) throw UserError("zero-sized image");
  const auto [h, w] = keep_aspect_size(img.height(), img.width(), short_edge, long_cap);
  return resize_bilinear(img, h, w);
}

// ---- augmentation ----------------------------------------------------------------

std::string_view augment_name(AugmentOp op) {
  switch (op) {
    case AugmentOp::kIdentity: return "identity";
    case AugmentOp::kAutoContrast: return "autocontrast";
    case AugmentOp::kEqualize: return "equalize";
    case AugmentOp::kRotate: return "rotate";
    case AugmentOp::kSolarize: return "solarize";
    case AugmentOp::kPosterize: return "posterize";
    case AugmentOp::kColor: return "color";
    case AugmentOp::kContrast: return "contrast";
    case AugmentOp::kBrightness: return "brightness";
    case AugmentOp::kSharpness: return "sharpness";
    case AugmentOp::kShearX: return "shear_x";
    case AugmentOp::kShearY: return "shear_y";
    case AugmentOp::kTranslateX: return "translate_x";
    case AugmentOp::kTranslateY: return "translate_y";
  }
  return "unknown";
}

double augment_parameter(AugmentOp op, int magnitude) {
  if (magnitude < 0 || magnitude > kMaxMagnitude) {
    throw UserError(fmt::format("augmentation magnitude {} outside [0, {}]", magnitude, kMaxMagnitude));
  }
  const double level = static_cast<double>(magnitude) / kMaxMagnitude;
  switch (op) {
    case AugmentOp::kRotate: return 30.0 * level;
    case AugmentOp::kShearX:
    case AugmentOp::kShearY: return 0.3 * level;
    case AugmentOp::kTranslateX:
    case AugmentOp::kTranslateY: return 0.45 * level;
    case AugmentOp::kSolarize: return 1.0 - level;
    case AugmentOp::kPosterize: return 8.0 - std::floor(4.0 * level);
    case AugmentOp::kColor:
    case AugmentOp::kContrast:
    case AugmentOp::kBrightness:
    case AugmentOp::kSharpness: return 0.9 * level;
    default: return 0.0;
  }
}

namespace {

constexpr double kFill = 0.5;

double luma(const ImageTensor& img, int y, int x) {
  return 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
}

ImageTensor blend(const ImageTensor& degenerate, const ImageTensor& img, double factor) {
  ImageTensor out = img;
  auto d = degenerate.data();
  auto s = img.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = d[i] + factor * (s[i] - d[i]);
  return out;
}

// Inverse-maps every output pixel through `src(y, x)`.
template <typename Map>
ImageTensor warp(const ImageTensor& img, Map src) {
  ImageTensor out(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const auto [sy, sx] = src(static_cast<double>(y), static_cast<double>(x));
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = sample_fill(img, c, sy, sx, kFill);
    }
  }
  return out;
}

ImageTensor equalize(const ImageTensor& img) {
  ImageTensor out = img;
  const std::size_t total = static_cast<std::size_t>(img.height()) * img.width();
  for (int c = 0; c < 3; ++c) {
    std::array<std::size_t, 256> hist{};
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) ++hist[to_byte(img.at(c, y, x))];
    }
    std::array<std::size_t, 256> cdf{};
    std::size_t run = 0;
    for (std::size_t b = 0; b < 256; ++b) cdf[b] = (run += hist[b]);
    const auto first = std::find_if(hist.begin(), hist.end(), [](std::size_t n) { return n > 0; });
    const std::size_t cdf_min = first == hist.end() ? 0 : cdf[static_cast<std::size_t>(first - hist.begin())];
    if (total == cdf_min) continue;
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        const std::size_t b = to_byte(img.at(c, y, x));
        out.at(c, y, x) = static_cast<double>(cdf[b] - cdf_min) / static_cast<double>(total - cdf_min);
      }
    }
  }
  return out;
}

ImageTensor smooth(const ImageTensor& img) {
  ImageTensor out = img;
  for (int c = 0; c < 3; ++c) {
    for (int y = 1; y + 1 < img.height(); ++y) {
      for (int x = 1; x + 1 < img.width(); ++x) {
        double acc = 4.0 * img.at(c, y, x);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) acc += img.at(c, y + dy, x + dx);
        }
        out.at(c, y, x) = acc / 13.0;
      }
    }
  }
  return out;
}

void clamp01(ImageTensor& img) {
  for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
}

bool is_signed(AugmentOp op) {
  switch (op) {
    case AugmentOp::kRotate:
    case AugmentOp::kShearX:
    case AugmentOp::kShearY:
    case AugmentOp::kTranslateX:
    case AugmentOp::kTranslateY:
    case AugmentOp::kColor:
    case AugmentOp::kContrast:
    case AugmentOp::kBrightness:
    case AugmentOp::kSharpness: return true;
    default: return false;
  }
}

bool is_enhancement(AugmentOp op) {
  return op == AugmentOp::kColor || op == AugmentOp::kContrast || op == AugmentOp::kBrightness ||
         op == AugmentOp::kSharpness;
}

}  // namespace

ImageTensor apply_augment(const ImageTensor& img, AugmentOp op, double parameter) {
  const double cy = (img.height() - 1) / 2.0;
  const double cx = (img.width() - 1) / 2.0;
  ImageTensor out;
  switch (op) {
    case AugmentOp::kIdentity:
      out = img;
      break;
    case AugmentOp::kAutoContrast: {
      out = img;
      for (int c = 0; c < 3; ++c) {
        double lo = 1.0, hi = 0.0;
        for (int y = 0; y < img.height(); ++y) {
          for (int x = 0; x < img.width(); ++x) {
            lo = std::min(lo, img.at(c, y, x));
            hi = std::max(hi, img.at(c, y, x));
          }
        }
        if (hi <= lo) continue;
        for (int y = 0; y < img.height(); ++y) {
          for (int x = 0; x < img.width(); ++x) out.at(c, y, x) = (img.at(c, y, x) - lo) / (hi - lo);
        }
      }
      break;
    }
    case AugmentOp::kEqualize:
      out = equalize(img);
      break;
    case AugmentOp::kRotate: {
      const double rad = parameter * std::numbers::pi / 180.0;
      const double cs = std::cos(rad), sn = std::sin(rad);
      out = warp(img, [&](double y, double x) {
        const double dy = y - cy, dx = x - cx;
        return std::pair{cy + sn * dx + cs * dy, cx + cs * dx - sn * dy};
      });
      break;
    }
    case AugmentOp::kSolarize:
      out = img;
      for (double& v : out.data()) {
        if (v > parameter) v = 1.0 - v;
      }
      break;
    case AugmentOp::kPosterize: {
      out = img;
      const int bits = std::clamp(static_cast<int>(parameter), 1, 8);
      const int mask = (0xff << (8 - bits)) & 0xff;
      for (double& v : out.data()) v = (to_byte(v) & mask) / 255.0;
      break;
    }
    case AugmentOp::kColor: {
      ImageTensor gray(img.height(), img.width());
      for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
          const double l = luma(img, y, x);
          for (int c = 0; c < 3; ++c) gray.at(c, y, x) = l;
        }
      }
      out = blend(gray, img, parameter);
      break;
    }
    case AugmentOp::kContrast: {
      double mean = 0.0;
      for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) mean += luma(img, y, x);
      }
      mean /= static_cast<double>(img.height()) * img.width();
      out = blend(ImageTensor(img.height(), img.width(), mean), img, parameter);
      break;
    }
    case AugmentOp::kBrightness:
      out = blend(ImageTensor(img.height(), img.width(), 0.0), img, parameter);
      break;
    case AugmentOp::kSharpness:
      out = blend(smooth(img), img, parameter);
      break;
    case AugmentOp::kShearX:
      out = warp(img, [&](double y, double x) { return std::pair{y, x + parameter * (y - cy)}; });
      break;
    case AugmentOp::kShearY:
      out = warp(img, [&](double y, double x) { return std::pair{y + parameter * (x - cx), x}; });
      break;
    case AugmentOp::kTranslateX: {
      const double shift = parameter * img.width();
      out = warp(img, [&](double y, double x) { return std::pair{y, x - shift}; });
      break;
    }
    case AugmentOp::kTranslateY: {
      const double shift = parameter * img.height();
      out = warp(img, [&](double y, double x) { return std::pair{y - shift, x}; });
      break;
    }
  }
  clamp01(out);
  return out;
}

ImageTensor rand_augment(const ImageTensor& img, int n_ops, int magnitude, Rng& rng,
                         std::vector<AppliedAugment>* log) {
  if (magnitude < 0 || magnitude > kMaxMagnitude) {
    throw UserError(fmt::format("augmentation magnitude {} outside [0, {}]", magnitude, kMaxMagnitude));
  }
  ImageTensor out = img;
  for (int i = 0; i < n_ops; ++i) {
    const AugmentOp op = kAugmentPool[uniform_index(rng, kAugmentPool.size())];
    double param = augment_parameter(op, magnitude);
    if (is_signed(op) && uniform01(rng) < 0.5) param = -param;
    if (is_enhancement(op)) param = 1.0 + param;
    out = apply_augment(out, op, param);
    if (log) log->push_back({op, param});
  }
  return out;
}

// ---- patches -------------------------------------------------------------------

std::size_t PatchBatch::kept() const {
  return static_cast<std::size_t>(std::count(keep_mask.begin(), keep_mask.end(), true));
}

std::vector<int> PatchBatch::kept_indices() const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < keep_mask.size(); ++i) {
    if (keep_mask[i]) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

PatchBatch patchify(const ImageTensor& img, int patch) {
  if (patch <= 0) throw UserError("patch size must be positive");
  if (img.empty()) throw UserError("cannot patchify an empty image");
  PatchBatch pb;
  pb.patch_size = patch;
  pb.grid_rows = (img.height() + patch - 1) / patch;
  pb.grid_cols = (img.width() + patch - 1) / patch;
  const int n = pb.grid_rows * pb.grid_cols;
  const int width = patch * patch * 3;
  pb.patches = Matrix::Zero(n, width);
  pb.keep_mask.assign(static_cast<std::size_t>(n), true);
  for (int r = 0; r < pb.grid_rows; ++r) {
    for (int c = 0; c < pb.grid_cols; ++c) {
      const int row = r * pb.grid_cols + c;
      pb.grid_pos.push_back({r, c});
      for (int ch = 0; ch < 3; ++ch) {
        for (int py = 0; py < patch; ++py) {
          const int y = r * patch + py;
          if (y >= img.height()) break;
          for (int px = 0; px < patch; ++px) {
            const int x = c * patch + px;
            if (x >= img.width()) break;
            pb.patches(row, (ch * patch + py) * patch + px) = img.at(ch, y, x);
          }
        }
      }
    }
  }
  return pb;
}

ImageTensor unpatchify(const PatchBatch& pb) {
  const int p = pb.patch_size;
  ImageTensor img(pb.grid_rows * p, pb.grid_cols * p);
  for (std::size_t i = 0; i < pb.size(); ++i) {
    const auto [r, c] = pb.grid_pos[i];
    for (int ch = 0; ch < 3; ++ch) {
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          img.at(ch, r * p + py, c * p + px) = pb.patches(static_cast<Eigen::Index>(i), (ch * p + py) * p + px);
        }
      }
    }
  }
  return img;
}

PatchBatch sample_patches(const PatchBatch& pb, std::size_t max_keep, Rng& rng) {
  if (max_keep < 1) throw UserError("max_keep must be at least 1");
  PatchBatch out = pb;
  auto kept = pb.kept_indices();
  if (kept.size() <= max_keep) return out;
  // Partial Fisher-Yates: the first max_keep entries form a uniform subset.
  for (std::size_t i = 0; i < max_keep; ++i) {
    const std::size_t j = i + uniform_index(rng, kept.size() - i);
    std::swap(kept[i], kept[j]);
  }
  std::fill(out.keep_mask.begin(), out.keep_mask.end(), false);
  for (std::size_t i = 0; i < max_keep; ++i) out.keep_mask[static_cast<std::size_t>(kept[i])] = true;
  return out;
}

std::array<double, 3> patch_mean_rgb(const PatchBatch& pb, std::size_t index) {
  const Eigen::Index area = static_cast<Eigen::Index>(pb.patch_size) * pb.patch_size;
  const auto row = pb.patches.row(static_cast<Eigen::Index>(index));
  return {row.segment(0, area).mean(), row.segment(area, area).mean(), row.segment(2 * area, area).mean()};
}

// ---- position grid interpolation ---------------------------------------------------

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;
};

Tap align_corners_tap(int src, int dst, int i) {
  if (src == 1 || dst == 1) return {0, 0, 0.0};
  const double pos = static_cast<double>(i) * (src - 1) / (dst - 1);
  const int lo = std::min(static_cast<int>(std::floor(pos)), src - 1);
  const int hi = std::min(lo + 1, src - 1);
  return {lo, hi, pos - lo};
}

}  // namespace

Eigen::RowVectorXd interpolation_row(int src_rows, int src_cols, int dst_rows, int dst_cols, int r, int c) {
  const Tap ty = align_corners_tap(src_rows, dst_rows, r);
  const Tap tx = align_corners_tap(src_cols, dst_cols, c);
  Eigen::RowVectorXd w = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(src_rows) * src_cols);
  w(ty.lo * src_cols + tx.lo) += (1 - ty.frac) * (1 - tx.frac);
  w(ty.lo * src_cols + tx.hi) += (1 - ty.frac) * tx.frac;
  w(ty.hi * src_cols + tx.lo) += ty.frac * (1 - tx.frac);
  w(ty.hi * src_cols + tx.hi) += ty.frac * tx.frac;
  return w;
}

Matrix interpolate_pos_grid(const Matrix& grid, int src_rows, int src_cols, int dst_rows, int dst_cols) {
  if (src_rows < 1 || src_cols < 1) throw UserError("source position grid must be non-empty");
  if (dst_rows < 1 || dst_cols < 1) throw UserError("target position grid has a zero dimension");
  if (grid.rows() != static_cast<Eigen::Index>(src_rows) * src_cols) throw UserError("position grid shape mismatch");
  if (src_rows == dst_rows && src_cols == dst_cols) return grid;
  Matrix out(static_cast<Eigen::Index>(dst_rows) * dst_cols, grid.cols());
  for (int r = 0; r < dst_rows; ++r) {
    for (int c = 0; c < dst_cols; ++c) {
      out.row(r * dst_cols + c) = interpolation_row(src_rows, src_cols, dst_rows, dst_cols, r, c) * grid;
    }
  }
  return out;
}

}  // namespace vilt::image
