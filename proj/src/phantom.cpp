#include "cardiq/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cardiq/acdc.hpp"
#include "cardiq/errors.hpp"
#include "cardiq/report.hpp"
#include "cardiq/rng.hpp"

namespace cardiq::phantom {

namespace {

constexpr double kPi = std::numbers::pi;

/// Frozen geometry for one frame of one phantom.
struct FrameGeometry {
    double scale;          // LV semi-axis scale
    double cx, cy;         // LV axis position, mm
    double z_base;         // base plane, mm
    double a, b, c;        // cavity semi-axes at this frame
    double ao, bo, co;     // epicardial semi-axes (cavity + wall)
    double sep_base;       // septal circle radius at the base
    double rv_len;         // RV longitudinal extent below the base
    double theta_half;     // half attachment angle
    double rv_r0;          // RV disk radius at the base

    // Septal exclusion radius at depth zeta below the base.
    double sep_radius(double zeta) const {
        const double q = 1.0 - (zeta / co) * (zeta / co);
        return q <= 0.0 ? 0.0 : sep_base * std::sqrt(q);
    }
    double rv_radius(double zeta) const {
        if (rv_len <= 0.0) return 0.0;
        const double q = 1.0 - (zeta / rv_len) * (zeta / rv_len);
        return q <= 0.0 ? 0.0 : rv_r0 * std::sqrt(q);
    }
    // RV disk center distance keeping the attachment angle where feasible.
    double rv_center_dist(double zeta) const {
        const double rs = sep_radius(zeta);
        const double r = rv_radius(zeta);
        const double disc = r * r - rs * rs * std::sin(theta_half) * std::sin(theta_half);
        return rs * std::cos(theta_half) + std::sqrt(std::max(disc, 0.0));
    }
};

FrameGeometry geometry_at_scale(const PhantomSpec& spec, double scale) {
    FrameGeometry g;
    g.scale = scale;
    const auto [a, b, c] = spec.lv_endo_radii;
    const double t = spec.wall_thickness;
    g.a = a * scale;
    g.b = b * scale;
    g.c = c * scale;
    g.ao = g.a + t;
    g.bo = g.b + t;
    g.co = g.c + t;
    g.sep_base = std::max(g.a, g.b) + t;
    g.rv_len = g.co - spec.rv_offset;
    g.theta_half = spec.rv_angular_extent / 2.0;
    g.rv_r0 = spec.rv_outer_radius * scale;
    // Base plane near the slab center, snapped to a slice boundary: the
    // base is the maximal cross-section, and a mid-cell cut would bias the
    // voxel-counted volume by a systematic partial slab.
    const double slab = spec.slices * spec.slice_thickness;
    g.z_base = spec.slice_thickness *
               std::floor((slab - (c + t)) / (2.0 * spec.slice_thickness));
    g.cx = 0.0;  // filled by the caller (needs grid size)
    g.cy = 0.0;
    return g;
}

FrameGeometry frame_geometry(const PhantomSpec& spec, int frame) {
    return geometry_at_scale(spec, lv_scale(spec, frame));
}

int label_at(const FrameGeometry& g, double x, double y, double z) {
    const double zeta = z - g.z_base;
    if (zeta < 0.0) return kBackground;
    const double dx = x - g.cx;
    const double dy = y - g.cy;

    if (zeta <= g.c) {
        const double e = (dx / g.a) * (dx / g.a) + (dy / g.b) * (dy / g.b) +
                         (zeta / g.c) * (zeta / g.c);
        if (e <= 1.0) return kLvCavity;
    }
    if (zeta <= g.co) {
        const double e = (dx / g.ao) * (dx / g.ao) + (dy / g.bo) * (dy / g.bo) +
                         (zeta / g.co) * (zeta / g.co);
        if (e <= 1.0) return kMyocardium;
    }
    if (zeta <= g.rv_len) {
        const double r = g.rv_radius(zeta);
        const double d = g.rv_center_dist(zeta);
        const double rs = g.sep_radius(zeta);
        const double ex = dx + d;  // RV disk center sits at (cx - d, cy)
        if (ex * ex + dy * dy <= r * r && dx * dx + dy * dy > rs * rs)
            return kRvCavity;
    }
    return kBackground;
}

}  // namespace

void PhantomSpec::validate() const {
    const auto [a, b, c] = lv_endo_radii;
    if (!(wall_thickness > 0.0))
        throw ValidationError("phantom: wall thickness must be positive");
    if (!(std::min({a, b, c}) > wall_thickness))
        throw ValidationError("phantom: every semi-axis must exceed the wall thickness");
    if (!(contraction_fraction > 0.0 && contraction_fraction < 1.0))
        throw ValidationError("phantom: contraction fraction must be in (0,1)");
    if (frames < 2) throw ValidationError("phantom: need at least 2 frames");
    if (slices < 3) throw ValidationError("phantom: need at least 3 slices");
    if (!(in_plane_resolution > 0.0) || !(slice_thickness > 0.0))
        throw ValidationError("phantom: resolutions must be positive");
    if (noise_sd < 0.0) throw ValidationError("phantom: noise sd must be >= 0");
    if (!(rv_outer_radius > 0.0))
        throw ValidationError("phantom: RV outer radius must be positive");
    if (!(rv_angular_extent > 0.0 && rv_angular_extent < kPi))
        throw ValidationError("phantom: RV angular extent must be in (0, pi)");
    if (rv_offset < 0.0) throw ValidationError("phantom: RV offset must be >= 0");
    const double es_scale = 1.0 - contraction_fraction;
    if (c * es_scale + wall_thickness - rv_offset <= 0.0)
        throw ValidationError("phantom: RV offset leaves no RV extent at ES");
    if (slices * slice_thickness < c + wall_thickness + 2.0)
        throw ValidationError("phantom: slab too short for the ventricle");
}

double lv_scale(const PhantomSpec& spec, int frame) {
    const double phase = 2.0 * kPi * frame / spec.frames;
    return 1.0 - spec.contraction_fraction * (1.0 - std::cos(phase)) / 2.0;
}

double half_ellipsoid_volume_ml(double a, double b, double c) {
    return 2.0 * kPi * a * b * c / 3.0 / 1000.0;
}

double lv_cavity_volume_ml(const PhantomSpec& spec, double scale) {
    const auto [a, b, c] = spec.lv_endo_radii;
    return half_ellipsoid_volume_ml(a * scale, b * scale, c * scale);
}

double myocardium_volume_ml(const PhantomSpec& spec, double scale) {
    const auto [a, b, c] = spec.lv_endo_radii;
    const double t = spec.wall_thickness;
    return half_ellipsoid_volume_ml(a * scale + t, b * scale + t, c * scale + t) -
           lv_cavity_volume_ml(spec, scale);
}

double lune_area(double r1, double r2, double d) {
    if (r1 <= 0.0) return 0.0;
    const double full = kPi * r1 * r1;
    if (r2 <= 0.0) return full;
    if (d >= r1 + r2) return full;                       // disjoint
    if (d + r1 <= r2) return 0.0;                        // disk inside exclusion
    if (d + r2 <= r1) return full - kPi * r2 * r2;       // exclusion inside disk
    const double d1 = (d * d + r1 * r1 - r2 * r2) / (2.0 * d);
    const double d2 = d - d1;
    const double seg1 = r1 * r1 * std::acos(std::clamp(d1 / r1, -1.0, 1.0)) -
                        d1 * std::sqrt(std::max(r1 * r1 - d1 * d1, 0.0));
    const double seg2 = r2 * r2 * std::acos(std::clamp(d2 / r2, -1.0, 1.0)) -
                        d2 * std::sqrt(std::max(r2 * r2 - d2 * d2, 0.0));
    return full - (seg1 + seg2);
}

double rv_volume_ml(const PhantomSpec& spec, double scale) {
    FrameGeometry g = geometry_at_scale(spec, scale);
    if (g.rv_len <= 0.0) return 0.0;

    // Composite Simpson over depth, kRvQuadratureIntervals subintervals.
    const int n = kRvQuadratureIntervals;
    const double h = g.rv_len / n;
    auto area = [&](double zeta) {
        return lune_area(g.rv_radius(zeta), g.sep_radius(zeta), g.rv_center_dist(zeta));
    };
    double sum = area(0.0) + area(g.rv_len);
    for (int i = 1; i < n; ++i) sum += area(i * h) * (i % 2 ? 4.0 : 2.0);
    return sum * h / 3.0 / 1000.0;
}

namespace {

// Grid sized to cover epicardium and crescent plus margin.
std::pair<int, int> grid_dims(const PhantomSpec& spec) {
    const auto [a, b, c] = spec.lv_endo_radii;
    const double t = spec.wall_thickness;
    const FrameGeometry g_ed = geometry_at_scale(spec, 1.0);
    const double crescent_reach = g_ed.rv_center_dist(0.0) + g_ed.rv_r0;
    const double extent = std::max(std::max(a, b) + t, crescent_reach) + 12.0 +
                          std::max(std::abs(spec.center_offset[0]),
                                   std::abs(spec.center_offset[1]));
    const int half_px = static_cast<int>(std::ceil(extent / spec.in_plane_resolution));
    return {2 * half_px, 2 * half_px};
}

}  // namespace

LabelMap phantom_labels(const PhantomSpec& spec, int frame) {
    spec.validate();
    if (frame < 0 || frame >= spec.frames)
        throw ValidationError("phantom_labels: frame out of range");
    const auto [rows, cols] = grid_dims(spec);
    const double res = spec.in_plane_resolution;
    const double cx = cols * res / 2.0 + spec.center_offset[1];
    const double cy = rows * res / 2.0 + spec.center_offset[0];

    FrameGeometry g = frame_geometry(spec, frame);
    g.cx = cx;
    g.cy = cy;

    LabelMap map;
    map.slices = spec.slices;
    map.rows = rows;
    map.cols = cols;
    map.spacing = {res, res, spec.slice_thickness, 30.0};
    map.frame_index = frame;
    map.labels.resize(static_cast<std::size_t>(spec.slices) * rows * cols);
    std::size_t idx = 0;
    for (int k = 0; k < spec.slices; ++k) {
        const double z = (k + 0.5) * spec.slice_thickness;
        for (int i = 0; i < rows; ++i) {
            const double y = (i + 0.5) * res;
            for (int j = 0; j < cols; ++j, ++idx) {
                const double x = (j + 0.5) * res;
                map.labels[idx] = static_cast<std::uint8_t>(label_at(g, x, y, z));
            }
        }
    }
    return map;
}

PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed,
                             const std::string& case_id) {
    spec.validate();

    const double res = spec.in_plane_resolution;
    const auto [rows, cols] = grid_dims(spec);

    PhantomCase pc;
    pc.case_id = case_id;
    pc.spec = spec;

    CineStudy& study = pc.study;
    study.frames = spec.frames;
    study.slices = spec.slices;
    study.rows = rows;
    study.cols = cols;
    study.spacing = {res, res, spec.slice_thickness, 30.0};
    study.case_id = case_id;
    study.ed_frame = 0;
    study.intensities.resize(static_cast<std::size_t>(spec.frames) * study.frame_size());

    int es = 0;
    for (int f = 1; f < spec.frames; ++f)
        if (lv_scale(spec, f) < lv_scale(spec, es)) es = f;
    study.es_frame = es;

    Rng noise = Rng(seed).fork(1);
    pc.labels.reserve(spec.frames);
    for (int f = 0; f < spec.frames; ++f) {
        LabelMap map = phantom_labels(spec, f);
        std::size_t idx = static_cast<std::size_t>(f) * study.frame_size();
        for (std::size_t v = 0; v < map.labels.size(); ++v, ++idx)
            study.intensities[idx] =
                kClassMeans[map.labels[v]] + spec.noise_sd * noise.normal();
        pc.labels.push_back(std::move(map));
    }

    const double s_ed = lv_scale(spec, 0);
    const double s_es = lv_scale(spec, es);
    ClinicalMetrics& m = pc.analytic;
    m.case_id = case_id;
    m.ed_frame = 0;
    m.es_frame = es;
    m.lv_edv = lv_cavity_volume_ml(spec, s_ed);
    m.lv_esv = lv_cavity_volume_ml(spec, s_es);
    m.rv_edv = rv_volume_ml(spec, s_ed);
    m.rv_esv = rv_volume_ml(spec, s_es);
    m.lvef = 100.0 * (m.lv_edv - m.lv_esv) / m.lv_edv;
    if (m.rv_edv > 0.0) m.rvef = 100.0 * (m.rv_edv - m.rv_esv) / m.rv_edv;
    m.lv_mass = myocardium_volume_ml(spec, s_ed) * 1.05;
    return pc;
}

void apply_body_metrics(PhantomCase& pc, double height_m, double weight_kg) {
    pc.study.height_m = height_m;
    pc.study.weight_kg = weight_kg;
    ClinicalMetrics& m = pc.analytic;
    const double bmi = weight_kg / (height_m * height_m);
    m.bmi = bmi;
    m.lv_edv_indexed = m.lv_edv / bmi;
    m.lv_esv_indexed = m.lv_esv / bmi;
    m.rv_edv_indexed = m.rv_edv / bmi;
    m.rv_esv_indexed = m.rv_esv / bmi;
    m.lv_mass_indexed = m.lv_mass / bmi;
}

namespace {

struct SuiteDraw {
    PhantomSpec spec;
    double height_m;
    double weight_kg;
};

// Documented uniform ranges. The RV radius is drawn just above the chord
// minimum sep*sin(theta/2) so the crescent realizes the drawn attachment
// angle; the geometry bounds keep the whole heart inside the 90 mm crop.
SuiteDraw draw_case(Rng& rng, double res) {
    SuiteDraw d;
    PhantomSpec& s = d.spec;
    const double ab = rng.uniform(21.0, 26.0);
    s.lv_endo_radii = {ab, ab, rng.uniform(48.0, 60.0)};
    s.wall_thickness = rng.uniform(5.5, 7.0);

    const double target_ef = rng.uniform(30.0, 70.0);
    s.contraction_fraction = 1.0 - std::cbrt(1.0 - target_ef / 100.0);

    const double sep = ab + s.wall_thickness;
    const double theta = rng.uniform(1.8, 2.6);
    s.rv_outer_radius = sep * std::sin(theta / 2.0) * rng.uniform(1.005, 1.03);
    s.rv_angular_extent = theta;
    s.rv_offset = rng.uniform(12.0, 18.0);

    s.frames = 12 + 2 * static_cast<int>(rng.uniform_index(5));  // 12..20 even
    // Slice thickness tied to the in-plane resolution so the whole grid
    // refines together and voxel-counted volumes converge monotonically.
    s.slice_thickness = 4.0 * res;
    s.slices = static_cast<int>(
        std::ceil((s.lv_endo_radii[2] + s.wall_thickness + 8.0) / s.slice_thickness));
    s.in_plane_resolution = res;
    s.noise_sd = 10.0;
    s.center_offset = {rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0)};

    d.height_m = rng.uniform(1.55, 1.90);
    d.weight_kg = rng.uniform(55.0, 95.0);
    return d;
}

std::string suite_case_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "phantom%03d", index);
    return buf;
}

}  // namespace

std::vector<std::pair<std::string, PhantomSpec>> phantom_suite_specs(
    int n, std::uint64_t seed, double in_plane_resolution) {
    if (n < 1) throw ValidationError("phantom_suite: n must be >= 1");
    Rng rng(seed);
    std::vector<std::pair<std::string, PhantomSpec>> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng case_rng = rng.fork(i);
        out.emplace_back(suite_case_id(i), draw_case(case_rng, in_plane_resolution).spec);
    }
    return out;
}

std::vector<PhantomCase> phantom_suite(int n, std::uint64_t seed,
                                       double in_plane_resolution) {
    if (n < 1) throw ValidationError("phantom_suite: n must be >= 1");
    Rng rng(seed);
    std::vector<PhantomCase> cases;
    cases.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng case_rng = rng.fork(i);
        SuiteDraw d = draw_case(case_rng, in_plane_resolution);
        PhantomCase pc = generate_phantom(d.spec, case_rng.next_u64(), suite_case_id(i));
        apply_body_metrics(pc, d.height_m, d.weight_kg);
        cases.push_back(std::move(pc));
    }
    return cases;
}

void emit_suite(const std::filesystem::path& out_dir, int n, std::uint64_t seed,
                double in_plane_resolution) {
    auto cases = phantom_suite(n, seed, in_plane_resolution);
    for (const auto& pc : cases) {
        const auto dir = out_dir / pc.case_id;
        std::vector<std::pair<int, LabelMap>> gt;
        gt.emplace_back(*pc.study.ed_frame, pc.labels[*pc.study.ed_frame]);
        gt.emplace_back(*pc.study.es_frame, pc.labels[*pc.study.es_frame]);
        acdc::write_case(dir, pc.study, gt);
        report::write_metrics_json(dir / "analytic.json", {pc.analytic});
    }
}

}  // namespace cardiq::phantom
