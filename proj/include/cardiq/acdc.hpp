#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cardiq/nifti.hpp"
#include "cardiq/types.hpp"

namespace cardiq::acdc {

/// Info.cfg content: "Key: value" lines (ED, ES, Height, Weight, Group, NbFrame).
struct CaseInfo {
    std::optional<int> ed_frame;
    std::optional<int> es_frame;
    std::optional<double> height_m;   // stored in cm in the file
    std::optional<double> weight_kg;
    std::optional<int> nb_frame;
    std::optional<std::string> group;
};

CaseInfo parse_info_cfg(const std::string& text);
CaseInfo read_info_cfg(const std::filesystem::path& path);

struct LoadedCase {
    CineStudy study;
    std::vector<std::pair<int, LabelMap>> ground_truth;  // (frame_index, labels)
};

/// Load one ACDC-style case directory:
///   <case>/<case>_4d.nii[.gz], optional <case>_frameNN_gt.nii[.gz],
///   optional Info.cfg. The case id is the directory name.
LoadedCase load_case(const std::filesystem::path& directory);

/// List case subdirectories of a dataset root, sorted by name.
std::vector<std::filesystem::path> list_cases(const std::filesystem::path& root);

/// Writers used by the phantom emitter and the segment command so that
/// everything downstream is format-agnostic.
void write_case(const std::filesystem::path& directory, const CineStudy& study,
                const std::vector<std::pair<int, LabelMap>>& ground_truth);
void write_label_nifti(const std::filesystem::path& path, const LabelMap& map);
LabelMap read_label_nifti(const std::filesystem::path& path);

/// Convert a parsed 4-D NIfTI volume into a CineStudy.
CineStudy study_from_volume(const nifti::Volume& vol, const std::string& case_id);

/// Convert a parsed 3-D NIfTI volume into a LabelMap, validating class ids.
LabelMap labels_from_volume(const nifti::Volume& vol, int frame_index);

}  // namespace cardiq::acdc
