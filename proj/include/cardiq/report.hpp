#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cardiq/types.hpp"

namespace cardiq::report {

enum class Format { kCsv, kJson };

/// Spec'd entry point: metrics block and/or concordance block, CSV or JSON.
/// Numeric cells are rendered with 2 decimals (p with 3, clamped to "<0.001");
/// volumes are milliliters even though the source tables label them "[mm]".
void write_report(const std::vector<ClinicalMetrics>& metrics,
                  const std::vector<ConcordanceRow>& table,
                  const std::filesystem::path& destination, Format format);

std::string render_metrics_csv(const std::vector<ClinicalMetrics>& metrics);
std::string render_concordance_csv(const std::vector<ConcordanceRow>& table);

/// Bland-Altman cell in the paper's shape: "-0.60 (-9.94 to 8.75)".
std::string bland_altman_cell(double bias, double loa_low, double loa_high);
std::string mean_sd_cell(double mean, double sd);
std::string p_cell(double p);

std::vector<ClinicalMetrics> parse_metrics_csv(const std::string& text);
std::vector<ConcordanceRow> parse_concordance_csv(const std::string& text);

std::vector<ClinicalMetrics> read_metrics_csv(const std::filesystem::path& path);
std::vector<ConcordanceRow> read_concordance_csv(const std::filesystem::path& path);

/// JSON mirrors (also used for phantom analytic ground truth files).
void write_metrics_json(const std::filesystem::path& path,
                        const std::vector<ClinicalMetrics>& metrics);
std::vector<ClinicalMetrics> read_metrics_json(const std::filesystem::path& path);
void write_concordance_json(const std::filesystem::path& path,
                            const std::vector<ConcordanceRow>& table);

}  // namespace cardiq::report
