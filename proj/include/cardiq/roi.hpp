#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>

#include "cardiq/types.hpp"

namespace cardiq::net {
struct NetworkParams;
}

namespace cardiq::roi {

using Image = Eigen::MatrixXd;  // (row, col)
using LabelImage = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// 90 mm x 90 mm box resampled to a 128 x 128 grid (0.703125 mm pitch).
struct RoIBox {
    double center_row = 0.0;  // native pixel coordinates, real-valued
    double center_col = 0.0;
    static constexpr double kExtentMm = 90.0;
    static constexpr int kGrid = 128;
    static constexpr double kPitchMm = kExtentMm / kGrid;  // 0.703125
};

/// A square physical resampling grid; RoI crops and the stage-1
/// full-field-of-view downsample are both instances of it.
struct SquareGrid {
    double center_row = 0.0;  // native pixel coordinates
    double center_col = 0.0;
    double pitch_mm = RoIBox::kPitchMm;
    int grid = RoIBox::kGrid;
};

/// Grid covering the whole native field of view at 128 x 128.
SquareGrid full_fov_grid(const CineStudy& study);
SquareGrid roi_grid(const RoIBox& box);

Image resample_image(const Image& frame, const VoxelSpacing& spacing,
                     const SquareGrid& grid);
LabelImage resample_labels(const LabelImage& slice, const VoxelSpacing& spacing,
                           const SquareGrid& grid);

enum class LocateMode { kHeuristic, kLearned };

struct LocateResult {
    RoIBox box;
    bool degenerate_input = false;   // variance map was all zero
    bool used_fallback = false;      // learned mode fell back to heuristic
};

/// One box per study. Heuristic mode: center of mass of the thresholded
/// across-frame intensity variance map (threshold 25% of its maximum),
/// averaged over slices. Learned mode: stage-1 network on a 128 x 128
/// downsample of the full field of view; empty predicted foreground falls
/// back to the heuristic and flags the case.
LocateResult locate_heart(const CineStudy& study, LocateMode mode,
                          const net::NetworkParams* params = nullptr);

/// Bilinear resample of a 90 mm crop around the box center onto the
/// 128 x 128 grid; samples outside the native grid are 0.
Image crop_resample(const Image& frame, const VoxelSpacing& spacing, const RoIBox& box);

/// Nearest-neighbor counterpart for label slices (training targets).
LabelImage crop_labels(const LabelImage& slice, const VoxelSpacing& spacing,
                       const RoIBox& box);

/// Nearest-neighbor mapping of a predicted 128 x 128 label slice back onto
/// the native grid; voxels outside the box get class 0.
LabelImage paste_back(const LabelImage& predicted, const VoxelSpacing& spacing,
                      const RoIBox& box, int native_rows, int native_cols);

/// Slice views between CineStudy/LabelMap buffers and Eigen images.
Image extract_slice(const CineStudy& study, int frame, int slice);
LabelImage extract_label_slice(const LabelMap& map, int slice);
void insert_label_slice(LabelMap& map, int slice, const LabelImage& img);

}  // namespace cardiq::roi
