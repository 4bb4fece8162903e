// Copyright 2026 The vilt-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vilt/common.hpp"

namespace vilt::image {

/// Planar RGB image with values in [0, 1], stored channel-major.
class ImageTensor {
 public:
  static constexpr int kChannels = 3;

  ImageTensor() = default;
  ImageTensor(int height, int width, double fill = 0.0);

  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] bool empty() const { return height_ == 0 || width_ == 0; }

  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  [[nodiscard]] double at(int c, int y, int x) const { return data_[index(c, y, x)]; }
  [[nodiscard]] std::span<const double> data() const { return data_; }
  [[nodiscard]] std::span<double> data() { return data_; }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  [[nodiscard]] std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(height_) + static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

// ---- I/O -------------------------------------------------------------------

/// Decodes PNG (8/16-bit, gray/RGB/alpha) or binary PPM (P6), chosen by
/// file signature.
ImageTensor load_image(const std::filesystem::path& path);
void save_png(const ImageTensor& img, const std::filesystem::path& path);
void save_ppm(const ImageTensor& img, const std::filesystem::path& path);

// ---- geometry ----------------------------------------------------------------

/// Bilinear resampling with half-pixel centers.
ImageTensor resize_bilinear(const ImageTensor& img, int height, int width);

/// Output size of the shorter-edge/longer-edge-cap rule.
std::pair<int, int> keep_aspect_size(int height, int width, int short_edge, int long_cap);

/// Scales so the shorter edge becomes `short_edge`, unless that would push
/// the longer edge past `long_cap`, in which case the longer edge becomes
/// `long_cap`. Throws UserError on empty input.
ImageTensor resize_keep_aspect(const ImageTensor& img, int short_edge = 384, int long_cap = 640);

// ---- augmentation ------------------------------------------------------------

enum class AugmentOp {
  kIdentity,
  kAutoContrast,
  kEqualize,
  kRotate,
  kSolarize,
  kPosterize,
  kColor,
  kContrast,
  kBrightness,
  kSharpness,
  kShearX,
  kShearY,
  kTranslateX,
  kTranslateY,
};

/// The policy pool (no color inversion, no cutout).
inline constexpr std::array<AugmentOp, 14> kAugmentPool = {
    AugmentOp::kIdentity,   AugmentOp::kAutoContrast, AugmentOp::kEqualize,   AugmentOp::kRotate,
    AugmentOp::kSolarize,   AugmentOp::kPosterize,    AugmentOp::kColor,      AugmentOp::kContrast,
    AugmentOp::kBrightness, AugmentOp::kSharpness,    AugmentOp::kShearX,     AugmentOp::kShearY,
    AugmentOp::kTranslateX, AugmentOp::kTranslateY};

inline constexpr int kMaxMagnitude = 30;

std::string_view augment_name(AugmentOp op);

/// Unsigned magnitude-to-parameter map: rotate degrees, shear factor,
/// translate fraction of the edge, solarize threshold, posterize bits,
/// or enhancement delta (factor = 1 ± delta).
double augment_parameter(AugmentOp op, int magnitude);

struct AppliedAugment {
  AugmentOp op;
  /// Signed parameter actually used.
  double parameter;
};

/// Applies one op with the given signed parameter. Output clamped to [0, 1].
ImageTensor apply_augment(const ImageTensor& img, AugmentOp op, double parameter);

/// Draws `n_ops` policies uniformly from kAugmentPool, signs geometric and
/// enhancement parameters at random, and applies them in order. When
/// `log` is non-null the applied policy list is appended to it.
ImageTensor rand_augment(const ImageTensor& img, int n_ops, int magnitude, Rng& rng,
                         std::vector<AppliedAugment>* log = nullptr);

// ---- patches -----------------------------------------------------------------

struct GridPos {
  int row = 0;
  int col = 0;
  friend bool operator==(const GridPos&, const GridPos&) = default;
};

/// Flattened patches of one image.
struct PatchBatch {
  Matrix patches;  // [N, P²·C], each row channel-major
  std::vector<GridPos> grid_pos;
  std::vector<bool> keep_mask;
  int grid_rows = 0;
  int grid_cols = 0;
  int patch_size = 0;

  [[nodiscard]] std::size_t size() const { return grid_pos.size(); }
  [[nodiscard]] std::size_t kept() const;
  /// Row indices of kept patches in ascending order.
  [[nodiscard]] std::vector<int> kept_indices() const;
};

/// Row-major patch grid; the image is zero-padded on the bottom and right
/// to a multiple of `patch`.
PatchBatch patchify(const ImageTensor& img, int patch = 32);

/// Reassembles the padded image from all patches.
ImageTensor unpatchify(const PatchBatch& pb);

/// Keeps all patches when N ≤ max_keep, otherwise a uniform subset of
/// max_keep without replacement. Grid positions are preserved.
PatchBatch sample_patches(const PatchBatch& pb, std::size_t max_keep, Rng& rng);

/// Mean RGB of one patch row.
std::array<double, 3> patch_mean_rgb(const PatchBatch& pb, std::size_t index);

// ---- position grid interpolation -----------------------------------------------

/// Align-corners bilinear weights of target cell (r, c) over a source grid
/// of (src_rows, src_cols) cells; returns dense [src_rows · src_cols] weights.
Eigen::RowVectorXd interpolation_row(int src_rows, int src_cols, int dst_rows, int dst_cols, int r, int c);

/// Channel-wise bilinear interpolation of a [h0·w0, H] grid (row-major
/// cells) to [h·w, H].
Matrix interpolate_pos_grid(const Matrix& grid, int src_rows, int src_cols, int dst_rows, int dst_cols);

}  // namespace vilt::image
