#include "cardiq/report.hpp"

#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cardiq/errors.hpp"

namespace cardiq::report {

namespace {

using nlohmann::json;

std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string opt2(const std::optional<double>& v) {
    return v ? fixed2(*v) : std::string();
}

double round2(double v) {
    return std::nearbyint(v * 100.0) / 100.0;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') {
            quoted = !quoted;
        } else if (ch == ',' && !quoted) {
            cells.push_back(cell);
            cell.clear();
        } else {
            cell.push_back(ch);
        }
    }
    cells.push_back(cell);
    return cells;
}

std::optional<double> parse_opt(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
}

std::string timestamp_utc() {
    std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

const char* kMetricsHeader =
    "case_id,ed_frame,es_frame,lv_edv_ml,lv_esv_ml,lvef_pct,rv_edv_ml,rv_esv_ml,"
    "rvef_pct,lv_mass_g,bmi,lv_edv_indexed,lv_esv_indexed,rv_edv_indexed,"
    "rv_esv_indexed,lv_mass_indexed";

json metrics_to_json(const ClinicalMetrics& m) {
    json j;
    j["case_id"] = m.case_id;
    j["ed_frame"] = m.ed_frame;
    j["es_frame"] = m.es_frame;
    j["lv_edv_ml"] = round2(m.lv_edv);
    j["lv_esv_ml"] = round2(m.lv_esv);
    j["rv_edv_ml"] = round2(m.rv_edv);
    j["rv_esv_ml"] = round2(m.rv_esv);
    j["lv_mass_g"] = round2(m.lv_mass);
    if (m.lvef) j["lvef_pct"] = round2(*m.lvef);
    if (m.rvef) j["rvef_pct"] = round2(*m.rvef);
    if (m.bmi) j["bmi"] = round2(*m.bmi);
    if (m.lv_edv_indexed) j["lv_edv_indexed"] = round2(*m.lv_edv_indexed);
    if (m.lv_esv_indexed) j["lv_esv_indexed"] = round2(*m.lv_esv_indexed);
    if (m.rv_edv_indexed) j["rv_edv_indexed"] = round2(*m.rv_edv_indexed);
    if (m.rv_esv_indexed) j["rv_esv_indexed"] = round2(*m.rv_esv_indexed);
    if (m.lv_mass_indexed) j["lv_mass_indexed"] = round2(*m.lv_mass_indexed);
    return j;
}

ClinicalMetrics metrics_from_json(const json& j) {
    ClinicalMetrics m;
    m.case_id = j.at("case_id").get<std::string>();
    m.ed_frame = j.at("ed_frame").get<int>();
    m.es_frame = j.at("es_frame").get<int>();
    m.lv_edv = j.at("lv_edv_ml").get<double>();
    m.lv_esv = j.at("lv_esv_ml").get<double>();
    m.rv_edv = j.at("rv_edv_ml").get<double>();
    m.rv_esv = j.at("rv_esv_ml").get<double>();
    m.lv_mass = j.at("lv_mass_g").get<double>();
    if (j.contains("lvef_pct")) m.lvef = j["lvef_pct"].get<double>();
    if (j.contains("rvef_pct")) m.rvef = j["rvef_pct"].get<double>();
    if (j.contains("bmi")) m.bmi = j["bmi"].get<double>();
    if (j.contains("lv_edv_indexed")) m.lv_edv_indexed = j["lv_edv_indexed"].get<double>();
    if (j.contains("lv_esv_indexed")) m.lv_esv_indexed = j["lv_esv_indexed"].get<double>();
    if (j.contains("rv_edv_indexed")) m.rv_edv_indexed = j["rv_edv_indexed"].get<double>();
    if (j.contains("rv_esv_indexed")) m.rv_esv_indexed = j["rv_esv_indexed"].get<double>();
    if (j.contains("lv_mass_indexed")) m.lv_mass_indexed = j["lv_mass_indexed"].get<double>();
    return m;
}

}  // namespace

std::string mean_sd_cell(double mean, double sd) {
    return fixed2(mean) + " \xC2\xB1 " + fixed2(sd);  // UTF-8 plus-minus
}

std::string p_cell(double p) {
    if (p < 0.001) return "<0.001";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", p);
    return buf;
}

std::string bland_altman_cell(double bias, double loa_low, double loa_high) {
    return fixed2(bias) + " (" + fixed2(loa_low) + " to " + fixed2(loa_high) + ")";
}

std::string render_metrics_csv(const std::vector<ClinicalMetrics>& metrics) {
    std::ostringstream out;
    out << kMetricsHeader << "\n";
    for (const auto& m : metrics) {
        out << m.case_id << ',' << m.ed_frame << ',' << m.es_frame << ','
            << fixed2(m.lv_edv) << ',' << fixed2(m.lv_esv) << ',' << opt2(m.lvef) << ','
            << fixed2(m.rv_edv) << ',' << fixed2(m.rv_esv) << ',' << opt2(m.rvef) << ','
            << fixed2(m.lv_mass) << ',' << opt2(m.bmi) << ',' << opt2(m.lv_edv_indexed)
            << ',' << opt2(m.lv_esv_indexed) << ',' << opt2(m.rv_edv_indexed) << ','
            << opt2(m.rv_esv_indexed) << ',' << opt2(m.lv_mass_indexed) << "\n";
    }
    return out.str();
}

std::string render_concordance_csv(const std::vector<ConcordanceRow>& table) {
    std::ostringstream out;
    out << "metric,manual,ai,p,r,bland_altman\n";
    for (const auto& row : table) {
        out << row.metric_name << ',' << '"' << mean_sd_cell(row.manual_mean, row.manual_sd)
            << '"' << ',' << '"' << mean_sd_cell(row.auto_mean, row.auto_sd) << '"' << ','
            << (row.p ? p_cell(*row.p) : std::string()) << ','
            << (row.r ? fixed2(*row.r) : std::string()) << ',' << '"'
            << bland_altman_cell(row.bias, row.loa_low, row.loa_high) << '"' << "\n";
    }
    return out.str();
}

std::vector<ClinicalMetrics> parse_metrics_csv(const std::string& text) {
    std::vector<ClinicalMetrics> out;
    std::istringstream in(text);
    std::string line;
    bool saw_header = false;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (!saw_header) {
            if (line.rfind("case_id,", 0) != 0)
                throw ParseError("metrics CSV: missing header line");
            saw_header = true;
            continue;
        }
        auto cells = split_csv_line(line);
        if (cells.size() != 16)
            throw ParseError("metrics CSV line " + std::to_string(lineno) +
                             ": expected 16 cells, got " + std::to_string(cells.size()));
        try {
            ClinicalMetrics m;
            m.case_id = cells[0];
            m.ed_frame = std::stoi(cells[1]);
            m.es_frame = std::stoi(cells[2]);
            m.lv_edv = std::stod(cells[3]);
            m.lv_esv = std::stod(cells[4]);
            m.lvef = parse_opt(cells[5]);
            m.rv_edv = std::stod(cells[6]);
            m.rv_esv = std::stod(cells[7]);
            m.rvef = parse_opt(cells[8]);
            m.lv_mass = std::stod(cells[9]);
            m.bmi = parse_opt(cells[10]);
            m.lv_edv_indexed = parse_opt(cells[11]);
            m.lv_esv_indexed = parse_opt(cells[12]);
            m.rv_edv_indexed = parse_opt(cells[13]);
            m.rv_esv_indexed = parse_opt(cells[14]);
            m.lv_mass_indexed = parse_opt(cells[15]);
            out.push_back(std::move(m));
        } catch (const std::invalid_argument&) {
            throw ParseError("metrics CSV line " + std::to_string(lineno) +
                             ": non-numeric cell");
        }
    }
    if (!saw_header) throw ParseError("metrics CSV: empty input");
    return out;
}

std::vector<ConcordanceRow> parse_concordance_csv(const std::string& text) {
    std::vector<ConcordanceRow> out;
    std::istringstream in(text);
    std::string line;
    bool saw_header = false;
    int lineno = 0;
    auto parse_mean_sd = [](const std::string& cell, double& mean, double& sd) {
        auto pm = cell.find("\xC2\xB1");
        if (pm == std::string::npos) throw ParseError("concordance CSV: bad mean cell");
        mean = std::stod(cell.substr(0, pm));
        sd = std::stod(cell.substr(pm + 2));
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (!saw_header) {
            if (line.rfind("metric,", 0) != 0)
                throw ParseError("concordance CSV: missing header line");
            saw_header = true;
            continue;
        }
        auto cells = split_csv_line(line);
        if (cells.size() != 6)
            throw ParseError("concordance CSV line " + std::to_string(lineno) +
                             ": expected 6 cells");
        ConcordanceRow row;
        row.metric_name = cells[0];
        parse_mean_sd(cells[1], row.manual_mean, row.manual_sd);
        parse_mean_sd(cells[2], row.auto_mean, row.auto_sd);
        if (!cells[3].empty())
            row.p = cells[3] == "<0.001" ? 0.0005 : std::stod(cells[3]);
        if (!cells[4].empty()) row.r = std::stod(cells[4]);
        const std::string& ba = cells[5];
        auto lp = ba.find('(');
        auto to = ba.find(" to ");
        auto rp = ba.find(')');
        if (lp == std::string::npos || to == std::string::npos || rp == std::string::npos)
            throw ParseError("concordance CSV line " + std::to_string(lineno) +
                             ": bad Bland-Altman cell");
        row.bias = std::stod(ba.substr(0, lp));
        row.loa_low = std::stod(ba.substr(lp + 1, to - lp - 1));
        row.loa_high = std::stod(ba.substr(to + 4, rp - to - 4));
        out.push_back(std::move(row));
    }
    if (!saw_header) throw ParseError("concordance CSV: empty input");
    return out;
}

void write_report(const std::vector<ClinicalMetrics>& metrics,
                  const std::vector<ConcordanceRow>& table,
                  const std::filesystem::path& destination, Format format) {
    std::ofstream out(destination);
    if (!out) throw IoError("report: cannot open " + destination.string() + " for writing");
    if (format == Format::kCsv) {
        out << "# generated: " << timestamp_utc() << "\n";
        if (!metrics.empty() || table.empty()) out << render_metrics_csv(metrics);
        if (!table.empty()) {
            if (!metrics.empty()) out << "\n";
            out << render_concordance_csv(table);
        }
    } else {
        json j;
        j["generated"] = timestamp_utc();
        j["metrics"] = json::array();
        for (const auto& m : metrics) j["metrics"].push_back(metrics_to_json(m));
        j["concordance"] = json::array();
        for (const auto& row : table) {
            json r;
            r["metric"] = row.metric_name;
            r["manual_mean"] = round2(row.manual_mean);
            r["manual_sd"] = round2(row.manual_sd);
            r["auto_mean"] = round2(row.auto_mean);
            r["auto_sd"] = round2(row.auto_sd);
            if (row.p) r["p"] = *row.p;
            if (row.r) r["r"] = round2(*row.r);
            r["bias"] = round2(row.bias);
            r["loa_low"] = round2(row.loa_low);
            r["loa_high"] = round2(row.loa_high);
            r["bland_altman"] = bland_altman_cell(row.bias, row.loa_low, row.loa_high);
            j["concordance"].push_back(std::move(r));
        }
        out << j.dump(2) << "\n";
    }
    if (!out) throw IoError("report: short write to " + destination.string());
}

std::vector<ClinicalMetrics> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("report: cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_metrics_csv(buf.str());
}

std::vector<ConcordanceRow> read_concordance_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("report: cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_concordance_csv(buf.str());
}

void write_metrics_json(const std::filesystem::path& path,
                        const std::vector<ClinicalMetrics>& metrics) {
    json j = json::array();
    for (const auto& m : metrics) j.push_back(metrics_to_json(m));
    std::ofstream out(path);
    if (!out) throw IoError("report: cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
}

std::vector<ClinicalMetrics> read_metrics_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("report: cannot open " + path.string());
    json j = json::parse(in);
    std::vector<ClinicalMetrics> out;
    for (const auto& item : j) out.push_back(metrics_from_json(item));
    return out;
}

void write_concordance_json(const std::filesystem::path& path,
                            const std::vector<ConcordanceRow>& table) {
    write_report({}, table, path, Format::kJson);
}

}  // namespace cardiq::report
