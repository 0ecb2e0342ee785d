#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cardiq/types.hpp"

namespace cardiq::phantom {

/// Synthetic cine study description. The left ventricle cavity is a
/// half-ellipsoid (apex down), the myocardium the region between it and the
/// half-ellipsoid grown by wall_thickness, and the right ventricle a
/// crescent: per slice, a disk hugging the septum minus the circle
/// circumscribing the epicardium. Semi-axes scale sinusoidally over the
/// cycle by contraction_fraction (frame 0 = ED, scale 1).
struct PhantomSpec {
    std::array<double, 3> lv_endo_radii{24.0, 24.0, 55.0};  // mm at ED
    double wall_thickness = 6.0;                            // mm
    double rv_outer_radius = 27.5;   // RV disk radius at the base, mm
    double rv_angular_extent = 2.2;  // septal attachment angle, rad
    double rv_offset = 18.0;         // RV stops this short of the outer apex, mm
    double contraction_fraction = 0.2;  // ES scale = 1 - this
    int frames = 16;
    int slices = 10;
    double in_plane_resolution = 1.0;  // mm
    double slice_thickness = 8.0;      // mm
    double noise_sd = 10.0;            // intensity units
    std::array<double, 2> center_offset{0.0, 0.0};  // (row mm, col mm)

    // Defaults keep the whole heart inside the 90 mm crop the pipeline uses.
    void validate() const;
};

/// Class-dependent intensity means, fixed for reproducibility.
inline constexpr std::array<double, 4> kClassMeans{40.0, 120.0, 90.0, 200.0};
// index:                               bg     RV     myo    LV cavity

/// Step count of the composite Simpson rule used for the RV crescent volume.
inline constexpr int kRvQuadratureIntervals = 4096;

struct PhantomCase {
    std::string case_id;
    PhantomSpec spec;
    CineStudy study;
    std::vector<LabelMap> labels;  // one per frame
    ClinicalMetrics analytic;      // ground truth from the continuous geometry
};

/// Semi-axis scale at a frame: 1 at ED (frame 0), 1 - contraction_fraction
/// at mid-cycle.
double lv_scale(const PhantomSpec& spec, int frame);

/// Closed-form half-ellipsoid volume 2*pi*a*b*c/3, returned in mL.
double half_ellipsoid_volume_ml(double a, double b, double c);

/// Analytic volumes (mL) at a given scale.
double lv_cavity_volume_ml(const PhantomSpec& spec, double scale);
double myocardium_volume_ml(const PhantomSpec& spec, double scale);
double rv_volume_ml(const PhantomSpec& spec, double scale);

/// Area of disk(r1) minus its intersection with disk(r2) at center distance d.
double lune_area(double r1, double r2, double d);

/// Deterministic generation; identical (spec, seed) gives bit-identical output.
PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed,
                             const std::string& case_id = "phantom");

/// Ground-truth labels for a single frame, no intensity synthesis. The
/// volume oracles only need ED/ES label maps, and full studies at fine
/// resolution would be needlessly slow to build.
LabelMap phantom_labels(const PhantomSpec& spec, int frame);

/// n cases with geometry, EF in [30, 70]%, height/weight drawn from
/// documented uniform ranges. The same seed with a different resolution
/// redraws identical geometry on a finer grid.
std::vector<PhantomCase> phantom_suite(int n, std::uint64_t seed,
                                       double in_plane_resolution = 1.0);

/// Draw only the specs (cheap; used when voxel data is not needed).
std::vector<std::pair<std::string, PhantomSpec>> phantom_suite_specs(
    int n, std::uint64_t seed, double in_plane_resolution = 1.0);

/// Suite-level patient metadata attached to study and analytic metrics.
void apply_body_metrics(PhantomCase& pc, double height_m, double weight_kg);

/// Write cases in the ACDC directory layout (plus analytic.json per case).
void emit_suite(const std::filesystem::path& out_dir, int n, std::uint64_t seed,
                double in_plane_resolution = 1.0);

}  // namespace cardiq::phantom
