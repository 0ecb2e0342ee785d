#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "cardiq/types.hpp"

namespace cardiq::quant {

/// Standard CMR convention; the paper reports LV mass without stating density.
inline constexpr double kMyocardiumDensityGPerMl = 1.05;

/// Voxel-summation volume in mL for one foreground class (1, 2 or 3).
double label_volume(const LabelMap& map, int class_id);

/// Voxel count for any class including background (used by invariants).
std::size_t voxel_count(const LabelMap& map, int class_id);

/// Pick (ed, es) frames: provided indices win; otherwise ED = argmax and
/// ES = argmin of the LV cavity volume curve, ties to the lowest index.
std::pair<int, int> select_ed_es(const std::vector<double>& per_frame_lv_volumes,
                                 std::optional<std::pair<int, int>> provided);

/// EDV/ESV/EF per ventricle, LV mass at ED, and BMI-indexed variants when
/// height and weight are available.
ClinicalMetrics compute_metrics(const LabelMap& ed_map, const LabelMap& es_map,
                                std::optional<double> height_m,
                                std::optional<double> weight_kg);

/// Dice overlap for one class; 1.0 when both sets are empty.
double dice_score(const LabelMap& pred, const LabelMap& truth, int class_id);

}  // namespace cardiq::quant
