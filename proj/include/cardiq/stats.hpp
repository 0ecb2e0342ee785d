#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cardiq/types.hpp"

namespace cardiq::stats {

/// One metric's per-case (manual, automatic) measurements.
struct PairedSeries {
    std::string metric_name;
    std::vector<std::pair<double, double>> pairs;  // (manual, auto)

    std::vector<double> manual_values() const;
    std::vector<double> auto_values() const;
    std::vector<double> differences() const;  // auto - manual
};

struct TTestResult {
    double t = 0.0;
    int df = 0;
    double p_two_sided = 1.0;
};

struct BlandAltman {
    double bias = 0.0;
    double loa_low = 0.0;
    double loa_high = 0.0;
};

/// Limits-of-agreement multiplier; the paper's own tables confirm 1.96.
inline constexpr double kLoaZ = 1.96;

/// Mean and sample (n-1) standard deviation. Throws InsufficientDataError
/// for n < 2.
std::pair<double, double> mean_sd(const std::vector<double>& values);

/// Pearson correlation. Throws DegenerateError when either side is constant
/// (tables report the cell as absent, never as 0).
double pearson_r(const PairedSeries& series);

/// bias = mean(auto - manual); limits = bias +/- 1.96 * sample sd.
BlandAltman bland_altman(const PairedSeries& series);

/// Paired two-sided Student t-test on auto - manual.
/// Throws DegenerateError when the differences have zero variance.
TTestResult paired_t_test(const PairedSeries& series);

/// Two-sided p-value for |T| >= |t| with the given degrees of freedom,
/// computed through the regularized incomplete beta function
/// (continued fraction, absolute error <= 1e-10 over the tested range).
double student_t_p_two_sided(double t, int df);

/// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);

/// Mean paired difference a - b with a z-based confidence interval.
/// level 0.95 uses the documented 1.96 constant; other levels use the
/// normal quantile.
struct MeanDiffCi {
    double mean_diff = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};
MeanDiffCi mean_difference_ci(const std::vector<double>& a,
                              const std::vector<double>& b,
                              double level = 0.95);

/// Standard normal quantile for upper tail probability (1-level)/2.
double normal_two_sided_z(double level);

/// Fixed Table-1 metric order.
extern const std::vector<std::string> kTableMetricOrder;

/// One row per series; degenerate statistics become absent cells rather than
/// aborting the table.
std::vector<ConcordanceRow> concordance_table(const std::vector<PairedSeries>& series);

/// Build the seven Table-1 series from per-case metric pairs (manual, auto),
/// joined by case id. Cases missing on either side are dropped; metrics with
/// an absent value (e.g. EF without EDV) are dropped per-case.
std::vector<PairedSeries> pair_metrics(const std::vector<ClinicalMetrics>& manual,
                                       const std::vector<ClinicalMetrics>& automatic);

/// Parse the standalone long-format CSV: case_id,metric,manual,auto.
std::vector<PairedSeries> parse_paired_csv(const std::string& text);

}  // namespace cardiq::stats
