#include "cardiq/pipeline.hpp"

#include <algorithm>

#include "cardiq/errors.hpp"

namespace cardiq::pipeline {

std::vector<net::TrainSample> build_samples(const acdc::LoadedCase& c, TrainTarget target) {
    if (c.ground_truth.empty())
        throw ValidationError("training requires ground-truth frames: " + c.study.case_id);

    std::vector<net::TrainSample> samples;
    const roi::SquareGrid grid =
        target == TrainTarget::kRoi
            ? roi::full_fov_grid(c.study)
            : roi::roi_grid(roi::locate_heart(c.study, roi::LocateMode::kHeuristic).box);

    for (const auto& [frame, gt] : c.ground_truth) {
        for (int s = 0; s < c.study.slices; ++s) {
            net::TrainSample sample;
            sample.image = roi::resample_image(roi::extract_slice(c.study, frame, s),
                                               c.study.spacing, grid);
            net::standardize(sample.image);
            sample.labels =
                roi::resample_labels(roi::extract_label_slice(gt, s), c.study.spacing, grid);
            samples.push_back(std::move(sample));
        }
    }
    return samples;
}

net::TrainResult train_on_directory(const std::filesystem::path& root,
                                    const net::Hyperparams& arch,
                                    const net::TrainConfig& cfg, TrainTarget target) {
    std::vector<net::TrainSample> dataset;
    for (const auto& dir : acdc::list_cases(root)) {
        auto c = acdc::load_case(dir);
        auto samples = build_samples(c, target);
        std::move(samples.begin(), samples.end(), std::back_inserter(dataset));
    }
    return net::train(dataset, arch, cfg);
}

std::vector<LabelMap> segment_study(const net::NetworkParamsF& params,
                                    const CineStudy& study, const roi::RoIBox& box) {
    study.validate();
    std::vector<LabelMap> out;
    out.reserve(study.frames);
    for (int f = 0; f < study.frames; ++f) {
        LabelMap map;
        map.slices = study.slices;
        map.rows = study.rows;
        map.cols = study.cols;
        map.spacing = study.spacing;
        map.frame_index = f;
        map.labels.resize(map.slices * static_cast<std::size_t>(map.rows) * map.cols);
        for (int s = 0; s < study.slices; ++s) {
            Image crop = roi::crop_resample(roi::extract_slice(study, f, s), study.spacing, box);
            net::standardize(crop);
            LabelImage pred = net::predict_labels(params, crop);
            roi::insert_label_slice(
                map, s, roi::paste_back(pred, study.spacing, box, study.rows, study.cols));
        }
        out.push_back(std::move(map));
    }
    return out;
}

ClinicalMetrics quantify_study(const std::vector<LabelMap>& frames, const CineStudy& study) {
    if (frames.empty()) throw ValidationError("quantify_study: no frames");
    std::vector<double> lv_volumes(frames.size());
    std::transform(frames.begin(), frames.end(), lv_volumes.begin(),
                   [](const LabelMap& m) { return quant::label_volume(m, kLvCavity); });

    std::optional<std::pair<int, int>> provided;
    if (study.ed_frame && study.es_frame) provided = {{*study.ed_frame, *study.es_frame}};
    auto [ed, es] = quant::select_ed_es(lv_volumes, provided);
    if (ed < 0 || ed >= static_cast<int>(frames.size()) || es < 0 ||
        es >= static_cast<int>(frames.size()))
        throw ValidationError("quantify_study: ED/ES frame out of range");

    ClinicalMetrics m =
        quant::compute_metrics(frames[ed], frames[es], study.height_m, study.weight_kg);
    m.case_id = study.case_id;
    m.ed_frame = ed;
    m.es_frame = es;
    return m;
}

ClinicalMetrics quantify_ground_truth(const acdc::LoadedCase& c) {
    const LabelMap* ed = nullptr;
    const LabelMap* es = nullptr;
    if (c.study.ed_frame && c.study.es_frame) {
        for (const auto& [frame, map] : c.ground_truth) {
            if (frame == *c.study.ed_frame) ed = &map;
            if (frame == *c.study.es_frame) es = &map;
        }
    } else if (c.ground_truth.size() >= 2) {
        // Without Info.cfg indices fall back to the LV volume curve over the
        // ground-truth frames.
        const LabelMap* maxv = &c.ground_truth.front().second;
        const LabelMap* minv = maxv;
        for (const auto& [frame, map] : c.ground_truth) {
            if (quant::label_volume(map, kLvCavity) > quant::label_volume(*maxv, kLvCavity))
                maxv = &map;
            if (quant::label_volume(map, kLvCavity) < quant::label_volume(*minv, kLvCavity))
                minv = &map;
        }
        ed = maxv;
        es = minv;
    }
    if (!ed || !es)
        throw NotFoundError("ground truth for ED/ES frames missing: " + c.study.case_id);
    ClinicalMetrics m = quant::compute_metrics(*ed, *es, c.study.height_m, c.study.weight_kg);
    m.case_id = c.study.case_id;
    m.ed_frame = ed->frame_index;
    m.es_frame = es->frame_index;
    return m;
}

}  // namespace cardiq::pipeline
