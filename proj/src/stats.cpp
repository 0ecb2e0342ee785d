#include "cardiq/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "cardiq/errors.hpp"

namespace cardiq::stats {

const std::vector<std::string> kTableMetricOrder = {
    "LV EDV", "LV ESV", "RV EDV", "RV ESV", "LVEF", "RVEF", "LV Mass",
};

std::vector<double> PairedSeries::manual_values() const {
    std::vector<double> v(pairs.size());
    std::transform(pairs.begin(), pairs.end(), v.begin(), [](auto& p) { return p.first; });
    return v;
}

std::vector<double> PairedSeries::auto_values() const {
    std::vector<double> v(pairs.size());
    std::transform(pairs.begin(), pairs.end(), v.begin(), [](auto& p) { return p.second; });
    return v;
}

std::vector<double> PairedSeries::differences() const {
    std::vector<double> v(pairs.size());
    std::transform(pairs.begin(), pairs.end(), v.begin(),
                   [](auto& p) { return p.second - p.first; });
    return v;
}

std::pair<double, double> mean_sd(const std::vector<double>& values) {
    if (values.size() < 2)
        throw InsufficientDataError("mean_sd: need at least 2 values for sd");
    for (double v : values)
        if (!std::isfinite(v)) throw ValidationError("mean_sd: non-finite value");
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / (n - 1.0))};
}

double pearson_r(const PairedSeries& series) {
    const auto& pairs = series.pairs;
    if (pairs.size() < 2)
        throw InsufficientDataError("pearson_r: need at least 2 pairs");
    const double n = static_cast<double>(pairs.size());
    double mx = 0.0, my = 0.0;
    for (auto& [x, y] : pairs) {
        mx += x;
        my += y;
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (auto& [x, y] : pairs) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if (sxx == 0.0 || syy == 0.0)
        throw DegenerateError("pearson_r: undefined for a constant series");
    return sxy / std::sqrt(sxx * syy);
}

BlandAltman bland_altman(const PairedSeries& series) {
    auto d = series.differences();
    auto [bias, sd] = mean_sd(d);
    return {bias, bias - kLoaZ * sd, bias + kLoaZ * sd};
}

namespace {

// Continued fraction for the incomplete beta function, modified Lentz.
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;

    const double qab = a + b;
    const double qap = a + 1.0;
    const double qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    return h;  // converged to working precision for all df in range
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0))
        return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_p_two_sided(double t, int df) {
    if (df < 1) throw ValidationError("t-test: df must be >= 1");
    if (!std::isfinite(t)) throw ValidationError("t-test: non-finite t");
    const double x = df / (df + t * t);
    return incomplete_beta(df / 2.0, 0.5, x);
}

TTestResult paired_t_test(const PairedSeries& series) {
    auto d = series.differences();
    auto [mean, sd] = mean_sd(d);
    if (sd == 0.0)
        throw DegenerateError("paired_t_test: zero-variance differences");
    TTestResult r;
    r.t = mean * std::sqrt(static_cast<double>(d.size())) / sd;
    r.df = static_cast<int>(d.size()) - 1;
    r.p_two_sided = student_t_p_two_sided(r.t, r.df);
    return r;
}

double normal_two_sided_z(double level) {
    if (!(level > 0.0 && level < 1.0))
        throw ValidationError("confidence level must be in (0, 1)");
    // The paper's convention for 95% is the constant 1.96, not 1.95996.
    if (std::abs(level - 0.95) < 1e-12) return kLoaZ;
    // Invert Phi by bisection on erfc; plenty for report rendering.
    const double target = (1.0 + level) / 2.0;
    double lo = 0.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        double mid = 0.5 * (lo + hi);
        double phi = 0.5 * std::erfc(-mid / std::sqrt(2.0));
        (phi < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

MeanDiffCi mean_difference_ci(const std::vector<double>& a, const std::vector<double>& b,
                              double level) {
    if (a.size() != b.size())
        throw ValidationError("mean_difference_ci: paired lists must have equal length");
    if (a.size() < 2)
        throw InsufficientDataError("mean_difference_ci: need at least 2 pairs");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    auto [mean, sd] = mean_sd(d);
    const double z = normal_two_sided_z(level);
    const double half = z * sd / std::sqrt(static_cast<double>(d.size()));
    return {mean, mean - half, mean + half};
}

std::vector<ConcordanceRow> concordance_table(const std::vector<PairedSeries>& series) {
    std::vector<ConcordanceRow> rows;
    rows.reserve(series.size());
    for (const auto& s : series) {
        ConcordanceRow row;
        row.metric_name = s.metric_name;
        auto [mm, ms] = mean_sd(s.manual_values());
        auto [am, as] = mean_sd(s.auto_values());
        row.manual_mean = mm;
        row.manual_sd = ms;
        row.auto_mean = am;
        row.auto_sd = as;
        auto ba = bland_altman(s);
        row.bias = ba.bias;
        row.loa_low = ba.loa_low;
        row.loa_high = ba.loa_high;
        try {
            row.p = paired_t_test(s).p_two_sided;
        } catch (const DegenerateError&) {
            row.p.reset();
        }
        try {
            row.r = pearson_r(s);
        } catch (const DegenerateError&) {
            row.r.reset();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<PairedSeries> pair_metrics(const std::vector<ClinicalMetrics>& manual,
                                       const std::vector<ClinicalMetrics>& automatic) {
    std::map<std::string, const ClinicalMetrics*> by_id;
    for (const auto& m : automatic) by_id[m.case_id] = &m;

    std::vector<PairedSeries> series(kTableMetricOrder.size());
    for (std::size_t i = 0; i < series.size(); ++i)
        series[i].metric_name = kTableMetricOrder[i];

    for (const auto& m : manual) {
        auto it = by_id.find(m.case_id);
        if (it == by_id.end()) continue;
        const ClinicalMetrics& a = *it->second;
        series[0].pairs.emplace_back(m.lv_edv, a.lv_edv);
        series[1].pairs.emplace_back(m.lv_esv, a.lv_esv);
        series[2].pairs.emplace_back(m.rv_edv, a.rv_edv);
        series[3].pairs.emplace_back(m.rv_esv, a.rv_esv);
        if (m.lvef && a.lvef) series[4].pairs.emplace_back(*m.lvef, *a.lvef);
        if (m.rvef && a.rvef) series[5].pairs.emplace_back(*m.rvef, *a.rvef);
        series[6].pairs.emplace_back(m.lv_mass, a.lv_mass);
    }
    return series;
}

std::vector<PairedSeries> parse_paired_csv(const std::string& text) {
    std::map<std::string, PairedSeries> by_metric;
    std::vector<std::string> order;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string case_id, metric, manual_s, auto_s;
        if (!std::getline(ls, case_id, ',') || !std::getline(ls, metric, ',') ||
            !std::getline(ls, manual_s, ',') || !std::getline(ls, auto_s, ','))
            throw ParseError("paired CSV line " + std::to_string(lineno) +
                             ": expected case_id,metric,manual,auto");
        if (lineno == 1 && case_id == "case_id") continue;  // header
        PairedSeries& s = by_metric[metric];
        if (s.metric_name.empty()) {
            s.metric_name = metric;
            order.push_back(metric);
        }
        try {
            s.pairs.emplace_back(std::stod(manual_s), std::stod(auto_s));
        } catch (const std::exception&) {
            throw ParseError("paired CSV line " + std::to_string(lineno) +
                             ": non-numeric value");
        }
    }
    std::vector<PairedSeries> out;
    out.reserve(order.size());
    for (const auto& name : order) out.push_back(std::move(by_metric[name]));
    return out;
}

}  // namespace cardiq::stats
