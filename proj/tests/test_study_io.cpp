#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cardiq/acdc.hpp"
#include "cardiq/errors.hpp"
#include "cardiq/phantom.hpp"
#include "cardiq/report.hpp"

using namespace cardiq;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("cardiq_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("Info.cfg parsing") {
    auto info = acdc::parse_info_cfg(
        "ED: 0\nES: 9\nGroup: DCM\nHeight: 184.0\nNbFrame: 20\nWeight: 95.0\n");
    REQUIRE(info.ed_frame.has_value());
    CHECK(*info.ed_frame == 0);
    CHECK(*info.es_frame == 9);
    CHECK(*info.height_m == doctest::Approx(1.84));
    CHECK(*info.weight_kg == doctest::Approx(95.0));
    CHECK(*info.nb_frame == 20);
    CHECK(*info.group == "DCM");

    CHECK_THROWS_AS(acdc::parse_info_cfg("ED: 0\nbogus line\n"), ParseError);
    CHECK_THROWS_AS(acdc::parse_info_cfg("ED: zero\n"), ParseError);
    try {
        acdc::parse_info_cfg("ED: 0\nES; 9\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("case directory roundtrip through the ACDC layout") {
    auto dir = temp_dir("case");
    phantom::PhantomSpec spec;
    spec.frames = 6;
    spec.slices = 4;
    spec.slice_thickness = 20.0;
    auto pc = phantom::generate_phantom(spec, 11, "case01");
    pc.study.height_m = 1.7;
    pc.study.weight_kg = 70.0;

    std::vector<std::pair<int, LabelMap>> gt;
    gt.emplace_back(0, pc.labels[0]);
    gt.emplace_back(*pc.study.es_frame, pc.labels[*pc.study.es_frame]);
    acdc::write_case(dir / "case01", pc.study, gt);

    auto loaded = acdc::load_case(dir / "case01");
    CHECK(loaded.study.case_id == "case01");
    CHECK(loaded.study.frames == 6);
    CHECK(loaded.study.slices == 4);
    CHECK(loaded.study.rows == pc.study.rows);
    REQUIRE(loaded.study.ed_frame.has_value());
    CHECK(*loaded.study.ed_frame == 0);
    CHECK(*loaded.study.es_frame == *pc.study.es_frame);
    CHECK(*loaded.study.height_m == doctest::Approx(1.7));
    CHECK(*loaded.study.weight_kg == doctest::Approx(70.0));
    REQUIRE(loaded.ground_truth.size() == 2);  // only ED and ES carried GT
    CHECK(loaded.ground_truth[0].first == 0);
    CHECK(loaded.ground_truth[0].second.labels == pc.labels[0].labels);
    CHECK(loaded.ground_truth[1].second.labels == pc.labels[*pc.study.es_frame].labels);

    // Intensities quantize through float32; spot-check agreement.
    CHECK(loaded.study.at(0, 0, 0, 0) ==
          doctest::Approx(pc.study.at(0, 0, 0, 0)).epsilon(1e-5));

    CHECK_THROWS_AS(acdc::load_case(dir / "missing_case"), NotFoundError);
}

TEST_CASE("missing cine file is a not-found error") {
    auto dir = temp_dir("nocine");
    fs::create_directories(dir / "caseX");
    std::ofstream(dir / "caseX" / "Info.cfg") << "ED: 0\nES: 1\n";
    CHECK_THROWS_AS(acdc::load_case(dir / "caseX"), NotFoundError);
}

TEST_CASE("metrics report CSV roundtrip at 2 decimals") {
    ClinicalMetrics m;
    m.case_id = "c1";
    m.ed_frame = 0;
    m.es_frame = 7;
    m.lv_edv = 164.614;
    m.lv_esv = 99.057;
    m.lvef = 46.38;
    m.rv_edv = 152.99;
    m.rv_esv = 85.88;
    m.rvef = 46.73;
    m.lv_mass = 129.96;
    m.bmi = 27.18;
    m.lv_edv_indexed = 164.614 / 27.18;

    const std::string text = report::render_metrics_csv({m});
    auto parsed = report::parse_metrics_csv(text);
    REQUIRE(parsed.size() == 1);
    CHECK(parsed[0].case_id == "c1");
    CHECK(parsed[0].lv_edv == doctest::Approx(164.61));
    CHECK(parsed[0].lv_esv == doctest::Approx(99.06));
    CHECK(*parsed[0].lvef == doctest::Approx(46.38));
    CHECK(*parsed[0].bmi == doctest::Approx(27.18));
    REQUIRE(parsed[0].lv_edv_indexed.has_value());
    CHECK_FALSE(parsed[0].lv_esv_indexed.has_value());

    // Re-render: stable at 2 decimals.
    CHECK(report::render_metrics_csv(parsed) == text);
}

TEST_CASE("concordance CSV cells match the published format") {
    ConcordanceRow row;
    row.metric_name = "LVEF";
    row.manual_mean = 46.38;
    row.manual_sd = 19.82;
    row.auto_mean = 45.79;
    row.auto_sd = 19.69;
    row.p = 0.217;
    row.r = 0.97;
    row.bias = -0.60;
    row.loa_low = -9.94;
    row.loa_high = 8.75;

    CHECK(report::bland_altman_cell(row.bias, row.loa_low, row.loa_high) ==
          "-0.60 (-9.94 to 8.75)");
    CHECK(report::p_cell(0.0004) == "<0.001");
    CHECK(report::p_cell(0.217) == "0.217");

    const std::string text = report::render_concordance_csv({row});
    CHECK(text.find("metric,manual,ai,p,r,bland_altman") == 0);
    auto parsed = report::parse_concordance_csv(text);
    REQUIRE(parsed.size() == 1);
    CHECK(parsed[0].manual_mean == doctest::Approx(46.38));
    CHECK(parsed[0].auto_sd == doctest::Approx(19.69));
    CHECK(*parsed[0].p == doctest::Approx(0.217));
    CHECK(*parsed[0].r == doctest::Approx(0.97));
    CHECK(parsed[0].bias == doctest::Approx(-0.60));
    CHECK(parsed[0].loa_low == doctest::Approx(-9.94));
    CHECK(parsed[0].loa_high == doctest::Approx(8.75));
}

TEST_CASE("write_report: empty metrics give header-only CSV") {
    auto dir = temp_dir("report");
    report::write_report({}, {}, dir / "empty.csv", report::Format::kCsv);
    std::ifstream in(dir / "empty.csv");
    std::string line1, line2, rest;
    std::getline(in, line1);  // timestamp comment
    std::getline(in, line2);
    CHECK(line1.rfind("# generated:", 0) == 0);
    CHECK(line2.rfind("case_id,", 0) == 0);
    CHECK_FALSE(std::getline(in, rest));
}

TEST_CASE("write_report JSON carries metrics and concordance") {
    auto dir = temp_dir("reportjson");
    ClinicalMetrics m;
    m.case_id = "c1";
    m.lv_edv = 100.0;
    ConcordanceRow row;
    row.metric_name = "LV EDV";
    row.manual_mean = 1;
    row.manual_sd = 1;
    row.auto_mean = 1;
    row.auto_sd = 1;
    report::write_report({m}, {row}, dir / "r.json", report::Format::kJson);
    std::ifstream in(dir / "r.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text.find("\"metrics\"") != std::string::npos);
    CHECK(text.find("\"concordance\"") != std::string::npos);
    CHECK(text.find("\"LV EDV\"") != std::string::npos);
}

TEST_CASE("unwritable destination raises IoError") {
    CHECK_THROWS_AS(
        report::write_report({}, {}, "/nonexistent_dir_zz/x.csv", report::Format::kCsv),
        IoError);
}

TEST_CASE("metrics JSON roundtrip") {
    auto dir = temp_dir("mjson");
    ClinicalMetrics m;
    m.case_id = "p0";
    m.lv_edv = 113.1;
    m.lv_esv = 57.91;
    m.lvef = 48.8;
    m.lv_mass = 120.0;
    report::write_metrics_json(dir / "analytic.json", {m});
    auto back = report::read_metrics_json(dir / "analytic.json");
    REQUIRE(back.size() == 1);
    CHECK(back[0].case_id == "p0");
    CHECK(back[0].lv_edv == doctest::Approx(113.1));
    CHECK(*back[0].lvef == doctest::Approx(48.8));
    CHECK_FALSE(back[0].rvef.has_value());
}
