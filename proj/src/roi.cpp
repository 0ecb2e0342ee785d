#include "cardiq/roi.hpp"

#include <cmath>

#include "cardiq/errors.hpp"
#include "cardiq/net.hpp"

namespace cardiq::roi {

SquareGrid full_fov_grid(const CineStudy& study) {
    SquareGrid g;
    g.center_row = (study.rows - 1) / 2.0;
    g.center_col = (study.cols - 1) / 2.0;
    g.pitch_mm = std::max(study.rows * study.spacing.dy, study.cols * study.spacing.dx) /
                 RoIBox::kGrid;
    return g;
}

SquareGrid roi_grid(const RoIBox& box) {
    return {box.center_row, box.center_col, RoIBox::kPitchMm, RoIBox::kGrid};
}

Image resample_image(const Image& frame, const VoxelSpacing& spacing,
                     const SquareGrid& grid) {
    spacing.validate();
    Image out(grid.grid, grid.grid);
    const double half = (grid.grid - 1) / 2.0;
    for (int i = 0; i < grid.grid; ++i) {
        const double r = grid.center_row + (i - half) * grid.pitch_mm / spacing.dy;
        const int r0 = static_cast<int>(std::floor(r));
        const double fr = r - r0;
        for (int j = 0; j < grid.grid; ++j) {
            const double c = grid.center_col + (j - half) * grid.pitch_mm / spacing.dx;
            const int c0 = static_cast<int>(std::floor(c));
            const double fc = c - c0;
            auto sample = [&](int rr, int cc) -> double {
                if (rr < 0 || rr >= frame.rows() || cc < 0 || cc >= frame.cols()) return 0.0;
                return frame(rr, cc);
            };
            out(i, j) = (1 - fr) * ((1 - fc) * sample(r0, c0) + fc * sample(r0, c0 + 1)) +
                        fr * ((1 - fc) * sample(r0 + 1, c0) + fc * sample(r0 + 1, c0 + 1));
        }
    }
    return out;
}

LabelImage resample_labels(const LabelImage& slice, const VoxelSpacing& spacing,
                           const SquareGrid& grid) {
    spacing.validate();
    LabelImage out(grid.grid, grid.grid);
    const double half = (grid.grid - 1) / 2.0;
    for (int i = 0; i < grid.grid; ++i) {
        const long r = std::lround(grid.center_row + (i - half) * grid.pitch_mm / spacing.dy);
        for (int j = 0; j < grid.grid; ++j) {
            const long c =
                std::lround(grid.center_col + (j - half) * grid.pitch_mm / spacing.dx);
            out(i, j) = (r < 0 || r >= slice.rows() || c < 0 || c >= slice.cols())
                            ? kBackground
                            : slice(r, c);
        }
    }
    return out;
}

namespace {

LocateResult heuristic_locate(const CineStudy& study) {
    if (study.frames < 2)
        throw ValidationError("locate_heart: heuristic mode needs at least 2 frames");

    // Across-frame variance per voxel, averaged over slices.
    Eigen::MatrixXd var = Eigen::MatrixXd::Zero(study.rows, study.cols);
    const double nf = study.frames;
    for (int s = 0; s < study.slices; ++s) {
        for (int r = 0; r < study.rows; ++r) {
            for (int c = 0; c < study.cols; ++c) {
                double sum = 0.0, sumsq = 0.0;
                for (int f = 0; f < study.frames; ++f) {
                    const double v = study.at(f, s, r, c);
                    sum += v;
                    sumsq += v * v;
                }
                const double mean = sum / nf;
                var(r, c) += std::max(sumsq / nf - mean * mean, 0.0);
            }
        }
    }
    var /= study.slices;

    LocateResult res;
    const double vmax = var.maxCoeff();
    if (vmax <= 0.0) {
        res.box.center_row = (study.rows - 1) / 2.0;
        res.box.center_col = (study.cols - 1) / 2.0;
        res.degenerate_input = true;
        return res;
    }
    // Threshold at 25% of the peak so background noise variance carries no
    // weight, then take the center of mass.
    const double tau = 0.25 * vmax;
    double w = 0.0, wr = 0.0, wc = 0.0;
    for (int r = 0; r < study.rows; ++r) {
        for (int c = 0; c < study.cols; ++c) {
            const double v = var(r, c) - tau;
            if (v > 0.0) {
                w += v;
                wr += v * r;
                wc += v * c;
            }
        }
    }
    res.box.center_row = wr / w;
    res.box.center_col = wc / w;
    return res;
}

}  // namespace

LocateResult locate_heart(const CineStudy& study, LocateMode mode,
                          const net::NetworkParams* params) {
    study.validate();
    if (mode == LocateMode::kHeuristic) return heuristic_locate(study);

    if (params == nullptr)
        throw ValidationError("locate_heart: learned mode requires network params");

    // Stage-1 network on the middle slice of the first frame, downsampled to
    // cover the full field of view.
    const SquareGrid g = full_fov_grid(study);
    const int mid = study.slices / 2;
    Image frame = extract_slice(study, 0, mid);
    Image input = resample_image(frame, study.spacing, g);
    net::standardize(input);
    LabelImage pred = net::predict_labels(*params, input);

    double n = 0.0, sr = 0.0, sc = 0.0;
    for (int i = 0; i < pred.rows(); ++i)
        for (int j = 0; j < pred.cols(); ++j)
            if (pred(i, j) != kBackground) {
                n += 1.0;
                sr += i;
                sc += j;
            }
    if (n == 0.0) {
        LocateResult res = heuristic_locate(study);
        res.used_fallback = true;
        return res;
    }
    const double half = (RoIBox::kGrid - 1) / 2.0;
    LocateResult res;
    res.box.center_row = g.center_row + (sr / n - half) * g.pitch_mm / study.spacing.dy;
    res.box.center_col = g.center_col + (sc / n - half) * g.pitch_mm / study.spacing.dx;
    return res;
}

Image crop_resample(const Image& frame, const VoxelSpacing& spacing, const RoIBox& box) {
    return resample_image(frame, spacing, roi_grid(box));
}

LabelImage crop_labels(const LabelImage& slice, const VoxelSpacing& spacing,
                       const RoIBox& box) {
    return resample_labels(slice, spacing, roi_grid(box));
}

LabelImage paste_back(const LabelImage& predicted, const VoxelSpacing& spacing,
                      const RoIBox& box, int native_rows, int native_cols) {
    if (predicted.rows() != RoIBox::kGrid || predicted.cols() != RoIBox::kGrid)
        throw ValidationError("paste_back: predicted slice must be 128x128");
    LabelImage out = LabelImage::Constant(native_rows, native_cols, kBackground);
    const double half = (RoIBox::kGrid - 1) / 2.0;
    for (int r = 0; r < native_rows; ++r) {
        const long i = std::lround((r - box.center_row) * spacing.dy / RoIBox::kPitchMm + half);
        if (i < 0 || i >= RoIBox::kGrid) continue;
        for (int c = 0; c < native_cols; ++c) {
            const long j =
                std::lround((c - box.center_col) * spacing.dx / RoIBox::kPitchMm + half);
            if (j < 0 || j >= RoIBox::kGrid) continue;
            out(r, c) = predicted(i, j);
        }
    }
    return out;
}

Image extract_slice(const CineStudy& study, int frame, int slice) {
    Image out(study.rows, study.cols);
    for (int r = 0; r < study.rows; ++r)
        for (int c = 0; c < study.cols; ++c) out(r, c) = study.at(frame, slice, r, c);
    return out;
}

LabelImage extract_label_slice(const LabelMap& map, int slice) {
    LabelImage out(map.rows, map.cols);
    for (int r = 0; r < map.rows; ++r)
        for (int c = 0; c < map.cols; ++c) out(r, c) = map.at(slice, r, c);
    return out;
}

void insert_label_slice(LabelMap& map, int slice, const LabelImage& img) {
    if (img.rows() != map.rows || img.cols() != map.cols)
        throw ConsistencyError("insert_label_slice: dims differ");
    for (int r = 0; r < map.rows; ++r)
        for (int c = 0; c < map.cols; ++c) map.at(slice, r, c) = img(r, c);
}

}  // namespace cardiq::roi
