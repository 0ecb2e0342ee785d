#include "cardiq/quant.hpp"

#include <algorithm>
#include <cmath>

#include "cardiq/errors.hpp"

namespace cardiq::quant {

std::size_t voxel_count(const LabelMap& map, int class_id) {
    if (class_id < 0 || class_id > 3)
        throw ValidationError("voxel_count: class id outside {0,1,2,3}");
    return static_cast<std::size_t>(
        std::count(map.labels.begin(), map.labels.end(),
                   static_cast<std::uint8_t>(class_id)));
}

double label_volume(const LabelMap& map, int class_id) {
    if (class_id < 1 || class_id > 3)
        throw ValidationError("label_volume: class id must be 1, 2 or 3");
    const double voxel_mm3 = map.spacing.dx * map.spacing.dy * map.spacing.dz;
    return static_cast<double>(voxel_count(map, class_id)) * voxel_mm3 / 1000.0;
}

std::pair<int, int> select_ed_es(const std::vector<double>& per_frame_lv_volumes,
                                 std::optional<std::pair<int, int>> provided) {
    if (provided) return *provided;
    if (per_frame_lv_volumes.size() < 2)
        throw ValidationError("select_ed_es: need at least 2 frames");
    bool all_zero = std::all_of(per_frame_lv_volumes.begin(), per_frame_lv_volumes.end(),
                                [](double v) { return v == 0.0; });
    if (all_zero)
        throw DegenerateError("select_ed_es: all-zero LV volume curve");
    int ed = 0, es = 0;
    for (int i = 1; i < static_cast<int>(per_frame_lv_volumes.size()); ++i) {
        if (per_frame_lv_volumes[i] > per_frame_lv_volumes[ed]) ed = i;
        if (per_frame_lv_volumes[i] < per_frame_lv_volumes[es]) es = i;
    }
    return {ed, es};
}

ClinicalMetrics compute_metrics(const LabelMap& ed_map, const LabelMap& es_map,
                                std::optional<double> height_m,
                                std::optional<double> weight_kg) {
    if (ed_map.slices != es_map.slices || ed_map.rows != es_map.rows ||
        ed_map.cols != es_map.cols)
        throw ConsistencyError("compute_metrics: ED/ES dims differ");
    if (!(ed_map.spacing == es_map.spacing))
        throw ConsistencyError("compute_metrics: ED/ES spacing differs");

    ClinicalMetrics m;
    m.ed_frame = ed_map.frame_index;
    m.es_frame = es_map.frame_index;
    m.lv_edv = label_volume(ed_map, kLvCavity);
    m.lv_esv = label_volume(es_map, kLvCavity);
    m.rv_edv = label_volume(ed_map, kRvCavity);
    m.rv_esv = label_volume(es_map, kRvCavity);
    if (m.lv_edv > 0.0) m.lvef = 100.0 * (m.lv_edv - m.lv_esv) / m.lv_edv;
    if (m.rv_edv > 0.0) m.rvef = 100.0 * (m.rv_edv - m.rv_esv) / m.rv_edv;
    m.lv_mass = label_volume(ed_map, kMyocardium) * kMyocardiumDensityGPerMl;

    if (height_m && weight_kg) {
        if (*height_m <= 0.0 || *weight_kg <= 0.0)
            throw ValidationError("compute_metrics: height and weight must be positive");
        const double bmi = *weight_kg / (*height_m * *height_m);
        m.bmi = bmi;
        m.lv_edv_indexed = m.lv_edv / bmi;
        m.lv_esv_indexed = m.lv_esv / bmi;
        m.rv_edv_indexed = m.rv_edv / bmi;
        m.rv_esv_indexed = m.rv_esv / bmi;
        m.lv_mass_indexed = m.lv_mass / bmi;
    }
    return m;
}

double dice_score(const LabelMap& pred, const LabelMap& truth, int class_id) {
    if (pred.slices != truth.slices || pred.rows != truth.rows || pred.cols != truth.cols)
        throw ConsistencyError("dice_score: dims differ");
    if (class_id < 0 || class_id > 3)
        throw ValidationError("dice_score: class id outside {0,1,2,3}");
    const std::uint8_t c = static_cast<std::uint8_t>(class_id);
    std::size_t inter = 0, p = 0, t = 0;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const bool in_p = pred.labels[i] == c;
        const bool in_t = truth.labels[i] == c;
        inter += in_p && in_t;
        p += in_p;
        t += in_t;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

}  // namespace cardiq::quant
