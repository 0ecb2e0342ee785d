#include "cardiq/acdc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cardiq/errors.hpp"

namespace fs = std::filesystem;

namespace cardiq {

void CineStudy::validate() const {
    if (frames < 1 || slices < 1 || rows < 1 || cols < 1)
        throw ValidationError("study: all four dimensions must be >= 1");
    if (intensities.size() != static_cast<std::size_t>(frames) * frame_size())
        throw ValidationError("study: intensity buffer does not match dims");
    for (double v : intensities)
        if (!std::isfinite(v)) throw ValidationError("study: non-finite intensity");
    spacing.validate();
    if (ed_frame && (*ed_frame < 0 || *ed_frame >= frames))
        throw ValidationError("study: ed_frame out of range");
    if (es_frame && (*es_frame < 0 || *es_frame >= frames))
        throw ValidationError("study: es_frame out of range");
}

void LabelMap::validate() const {
    if (slices < 1 || rows < 1 || cols < 1)
        throw ValidationError("labels: dimensions must be >= 1");
    if (labels.size() != static_cast<std::size_t>(slices) * rows * cols)
        throw ValidationError("labels: buffer does not match dims");
    for (std::uint8_t v : labels)
        if (v > 3) throw ValidationError("labels: class id outside {0,1,2,3}");
    spacing.validate();
}

}  // namespace cardiq

namespace cardiq::acdc {

namespace {

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    auto e = s.find_last_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, e - b + 1);
}

fs::path find_nifti(const fs::path& dir, const std::string& stem) {
    for (const char* ext : {".nii.gz", ".nii"}) {
        fs::path p = dir / (stem + ext);
        if (fs::exists(p)) return p;
    }
    return {};
}

}  // namespace

CaseInfo parse_info_cfg(const std::string& text) {
    CaseInfo info;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto colon = t.find(':');
        if (colon == std::string::npos)
            throw ParseError("Info.cfg line " + std::to_string(lineno) +
                             ": expected \"Key: value\", got \"" + t + "\"");
        std::string key = trim(t.substr(0, colon));
        std::string value = trim(t.substr(colon + 1));
        try {
            if (key == "ED") info.ed_frame = std::stoi(value);
            else if (key == "ES") info.es_frame = std::stoi(value);
            else if (key == "Height") info.height_m = std::stod(value) / 100.0;  // cm -> m
            else if (key == "Weight") info.weight_kg = std::stod(value);
            else if (key == "NbFrame") info.nb_frame = std::stoi(value);
            else if (key == "Group") info.group = value;
            // Unknown keys pass through silently.
        } catch (const std::exception&) {
            throw ParseError("Info.cfg line " + std::to_string(lineno) +
                             ": cannot parse value for key \"" + key + "\"");
        }
    }
    return info;
}

CaseInfo read_info_cfg(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("Info.cfg missing: " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_info_cfg(buf.str());
}

CineStudy study_from_volume(const nifti::Volume& vol, const std::string& case_id) {
    if (vol.rank() != 4)
        throw ConsistencyError("study: expected a 4-D cine volume, got rank " +
                               std::to_string(vol.rank()));
    CineStudy s;
    s.cols = vol.nx();
    s.rows = vol.ny();
    s.slices = vol.nz();
    s.frames = vol.nt();
    s.spacing = vol.spacing;
    s.case_id = case_id;
    s.intensities = vol.data;  // both are column-fastest [t][z][y][x]
    s.validate();
    return s;
}

LabelMap labels_from_volume(const nifti::Volume& vol, int frame_index) {
    if (vol.rank() != 3 && !(vol.rank() == 4 && vol.nt() == 1))
        throw ConsistencyError("labels: expected a 3-D volume");
    LabelMap m;
    m.cols = vol.nx();
    m.rows = vol.ny();
    m.slices = vol.nz();
    m.spacing = vol.spacing;
    m.frame_index = frame_index;
    m.labels.resize(vol.data.size());
    for (std::size_t i = 0; i < vol.data.size(); ++i) {
        double v = std::nearbyint(vol.data[i]);
        if (v < 0 || v > 3 || std::abs(vol.data[i] - v) > 1e-6)
            throw ValidationError("labels: voxel value " + std::to_string(vol.data[i]) +
                                  " is not a class id in {0,1,2,3}");
        m.labels[i] = static_cast<std::uint8_t>(v);
    }
    m.validate();
    return m;
}

LoadedCase load_case(const fs::path& directory) {
    if (!fs::is_directory(directory))
        throw NotFoundError("case directory missing: " + directory.string());
    const std::string case_id = directory.filename().string();

    fs::path cine = find_nifti(directory, case_id + "_4d");
    if (cine.empty())
        throw NotFoundError("cine file missing: " + (directory / (case_id + "_4d.nii.gz")).string());

    LoadedCase out;
    out.study = study_from_volume(nifti::read_file(cine), case_id);

    fs::path info_path = directory / "Info.cfg";
    if (fs::exists(info_path)) {
        CaseInfo info = read_info_cfg(info_path);
        out.study.ed_frame = info.ed_frame;
        out.study.es_frame = info.es_frame;
        out.study.height_m = info.height_m;
        out.study.weight_kg = info.weight_kg;
        if (out.study.ed_frame && *out.study.ed_frame >= out.study.frames)
            throw ConsistencyError("Info.cfg ED frame out of range for " + case_id);
        if (out.study.es_frame && *out.study.es_frame >= out.study.frames)
            throw ConsistencyError("Info.cfg ES frame out of range for " + case_id);
    }

    // Ground truth files: <case>_frameNN_gt.nii[.gz], NN = 0-based frame index.
    std::vector<fs::path> gt_files;
    for (const auto& entry : fs::directory_iterator(directory)) {
        std::string name = entry.path().filename().string();
        if (name.rfind(case_id + "_frame", 0) == 0 && name.find("_gt.nii") != std::string::npos)
            gt_files.push_back(entry.path());
    }
    std::sort(gt_files.begin(), gt_files.end());
    for (const auto& p : gt_files) {
        std::string name = p.filename().string();
        std::size_t pos = (case_id + "_frame").size();
        int frame = std::stoi(name.substr(pos, name.find("_gt") - pos));
        if (frame < 0 || frame >= out.study.frames)
            throw ConsistencyError("ground truth frame index out of range: " + name);
        LabelMap m = labels_from_volume(nifti::read_file(p), frame);
        if (m.slices != out.study.slices || m.rows != out.study.rows ||
            m.cols != out.study.cols)
            throw ConsistencyError("ground truth dims do not match cine: " + name);
        out.ground_truth.emplace_back(frame, std::move(m));
    }
    return out;
}

std::vector<fs::path> list_cases(const fs::path& root) {
    if (!fs::is_directory(root))
        throw NotFoundError("dataset root missing: " + root.string());
    std::vector<fs::path> cases;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) cases.push_back(entry.path());
    std::sort(cases.begin(), cases.end());
    return cases;
}

void write_label_nifti(const fs::path& path, const LabelMap& map) {
    nifti::Volume vol;
    vol.dim[0] = 3;
    vol.dim[1] = static_cast<std::int16_t>(map.cols);
    vol.dim[2] = static_cast<std::int16_t>(map.rows);
    vol.dim[3] = static_cast<std::int16_t>(map.slices);
    vol.spacing = map.spacing;
    vol.spacing.dt = 0.0;
    vol.data.assign(map.labels.begin(), map.labels.end());
    nifti::WriteOptions opts;
    opts.datatype = nifti::kDtUint8;
    opts.gzip = path.string().ends_with(".gz");
    nifti::write_file(path, vol, opts);
}

LabelMap read_label_nifti(const fs::path& path) {
    return labels_from_volume(nifti::read_file(path), 0);
}

void write_case(const fs::path& directory, const CineStudy& study,
                const std::vector<std::pair<int, LabelMap>>& ground_truth) {
    fs::create_directories(directory);
    const std::string& id = study.case_id;

    nifti::Volume cine;
    cine.dim[0] = 4;
    cine.dim[1] = static_cast<std::int16_t>(study.cols);
    cine.dim[2] = static_cast<std::int16_t>(study.rows);
    cine.dim[3] = static_cast<std::int16_t>(study.slices);
    cine.dim[4] = static_cast<std::int16_t>(study.frames);
    cine.spacing = study.spacing;
    cine.data = study.intensities;
    nifti::WriteOptions opts;
    opts.datatype = nifti::kDtFloat32;
    opts.gzip = true;
    nifti::write_file(directory / (id + "_4d.nii.gz"), cine, opts);

    for (const auto& [frame, map] : ground_truth) {
        char name[64];
        std::snprintf(name, sizeof(name), "_frame%02d_gt.nii.gz", frame);
        write_label_nifti(directory / (id + name), map);

        // Per-frame intensity image alongside the ground truth, ACDC style.
        nifti::Volume fv;
        fv.dim[0] = 3;
        fv.dim[1] = cine.dim[1];
        fv.dim[2] = cine.dim[2];
        fv.dim[3] = cine.dim[3];
        fv.spacing = study.spacing;
        fv.spacing.dt = 0.0;
        const std::size_t fsz = study.frame_size();
        fv.data.assign(study.intensities.begin() + frame * fsz,
                       study.intensities.begin() + (frame + 1) * fsz);
        std::snprintf(name, sizeof(name), "_frame%02d.nii.gz", frame);
        nifti::write_file(directory / (id + name), fv, opts);
    }

    std::ofstream info(directory / "Info.cfg");
    if (!info) throw IoError("cannot write Info.cfg in " + directory.string());
    if (study.ed_frame) info << "ED: " << *study.ed_frame << "\n";
    if (study.es_frame) info << "ES: " << *study.es_frame << "\n";
    if (study.height_m) info << "Height: " << *study.height_m * 100.0 << "\n";
    if (study.weight_kg) info << "Weight: " << *study.weight_kg << "\n";
    info << "Group: PHANTOM\n";
    info << "NbFrame: " << study.frames << "\n";
}

}  // namespace cardiq::acdc
