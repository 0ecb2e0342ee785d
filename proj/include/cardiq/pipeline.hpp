#pragma once

#include <filesystem>
#include <vector>

#include "cardiq/acdc.hpp"
#include "cardiq/net.hpp"
#include "cardiq/quant.hpp"
#include "cardiq/roi.hpp"

namespace cardiq::pipeline {

enum class TrainTarget {
    kSegmentation,  // stage 2: RoI crops of ground-truth frames
    kRoi,           // stage 1: full-field-of-view downsamples
};

/// RoI-crop training samples (standardized image + label crop) from a loaded
/// case for the requested stage.
std::vector<net::TrainSample> build_samples(const acdc::LoadedCase& c,
                                            TrainTarget target);

/// Load every case under `root` and train; cases without ground truth are
/// rejected.
net::TrainResult train_on_directory(const std::filesystem::path& root,
                                    const net::Hyperparams& arch,
                                    const net::TrainConfig& cfg, TrainTarget target);

/// The latency-budgeted inference path: crop, forward, argmax, paste back,
/// one LabelMap per frame. Single precision, sequential over frames/slices.
std::vector<LabelMap> segment_study(const net::NetworkParamsF& params,
                                    const CineStudy& study, const roi::RoIBox& box);

/// LV volume curve, ED/ES selection (Info.cfg indices win) and metrics.
ClinicalMetrics quantify_study(const std::vector<LabelMap>& frames,
                               const CineStudy& study);

/// Metrics directly from ground-truth label maps (the manual arm).
ClinicalMetrics quantify_ground_truth(const acdc::LoadedCase& c);

}  // namespace cardiq::pipeline
