#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cardiq/errors.hpp"

namespace cardiq {

/// Voxel classes shared across the whole pipeline (ACDC convention).
enum ClassId : std::uint8_t {
    kBackground = 0,
    kRvCavity = 1,
    kMyocardium = 2,
    kLvCavity = 3,
};
inline constexpr int kNumClasses = 4;

/// Physical size of one voxel. dz includes the inter-slice gap.
struct VoxelSpacing {
    double dx = 1.0;  // mm per column
    double dy = 1.0;  // mm per row
    double dz = 1.0;  // mm per slice
    double dt = 0.0;  // ms per frame, 0 when unknown

    void validate() const {
        if (!(dx > 0.0) || !(dy > 0.0) || !(dz > 0.0))
            throw ValidationError("voxel spacing must be positive");
        if (dt < 0.0) throw ValidationError("frame duration must be >= 0");
    }

    bool operator==(const VoxelSpacing&) const = default;
};

/// One short-axis cine study: intensities indexed [frame][slice][row][col],
/// column fastest in memory.
struct CineStudy {
    int frames = 0;
    int slices = 0;
    int rows = 0;
    int cols = 0;
    std::vector<double> intensities;
    VoxelSpacing spacing;
    std::string case_id;
    std::optional<double> height_m;
    std::optional<double> weight_kg;
    std::optional<int> ed_frame;
    std::optional<int> es_frame;

    std::size_t frame_size() const {
        return static_cast<std::size_t>(slices) * rows * cols;
    }
    double& at(int f, int s, int r, int c) {
        return intensities[((static_cast<std::size_t>(f) * slices + s) * rows + r) * cols + c];
    }
    double at(int f, int s, int r, int c) const {
        return intensities[((static_cast<std::size_t>(f) * slices + s) * rows + r) * cols + c];
    }

    void validate() const;
};

/// Per-voxel class map for one frame, indexed [slice][row][col].
struct LabelMap {
    int slices = 0;
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> labels;
    VoxelSpacing spacing;
    int frame_index = 0;

    std::uint8_t& at(int s, int r, int c) {
        return labels[(static_cast<std::size_t>(s) * rows + r) * cols + c];
    }
    std::uint8_t at(int s, int r, int c) const {
        return labels[(static_cast<std::size_t>(s) * rows + r) * cols + c];
    }
    std::size_t size() const { return labels.size(); }

    void validate() const;
};

/// Clinical quantities for one study. Volumes in mL, mass in g, EF in percent.
/// EF is absent (not zero) when the corresponding EDV is zero; BMI-indexed
/// values are present only when height and weight are known.
struct ClinicalMetrics {
    std::string case_id;
    double lv_edv = 0.0;
    double lv_esv = 0.0;
    double rv_edv = 0.0;
    double rv_esv = 0.0;
    std::optional<double> lvef;
    std::optional<double> rvef;
    double lv_mass = 0.0;
    std::optional<double> bmi;
    std::optional<double> lv_edv_indexed;
    std::optional<double> lv_esv_indexed;
    std::optional<double> rv_edv_indexed;
    std::optional<double> rv_esv_indexed;
    std::optional<double> lv_mass_indexed;
    int ed_frame = 0;
    int es_frame = 0;
};

/// One metric's manual-vs-automatic agreement row (Table 1 shape).
/// Inferential cells are absent when their statistic is degenerate.
struct ConcordanceRow {
    std::string metric_name;
    double manual_mean = 0.0;
    double manual_sd = 0.0;
    double auto_mean = 0.0;
    double auto_sd = 0.0;
    std::optional<double> p;
    std::optional<double> r;
    double bias = 0.0;
    double loa_low = 0.0;
    double loa_high = 0.0;
};

}  // namespace cardiq
