#include "cardiq/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "cardiq/errors.hpp"
#include "cardiq/phantom.hpp"
#include "cardiq/pipeline.hpp"
#include "cardiq/report.hpp"
#include "cardiq/stats.hpp"

namespace fs = std::filesystem;

namespace cardiq::cli {

namespace {

/// One run's resolved options; every subcommand reads from here.
struct RunConfig {
    std::string command;
    fs::path cases;
    fs::path out;
    fs::path model;
    fs::path roi_model;
    fs::path masks;
    fs::path pred;
    fs::path truth;
    fs::path paired;
    fs::path manual_times;
    std::string format = "csv";
    std::string source = "masks";
    std::string roi_mode = "heuristic";
    std::string target = "seg";
    std::uint64_t seed = kDefaultSeed;
    int n = 10;
    int reps = 1;
    double resolution = 1.0;
    net::Hyperparams arch;
    net::TrainConfig train;
};

report::Format parse_format(const std::string& f) {
    if (f == "csv") return report::Format::kCsv;
    if (f == "json") return report::Format::kJson;
    throw ValidationError("format must be csv or json");
}

roi::LocateResult locate_for(const RunConfig& rc, const CineStudy& study,
                             const net::NetworkParams* roi_params) {
    if (rc.roi_mode == "heuristic")
        return roi::locate_heart(study, roi::LocateMode::kHeuristic);
    if (rc.roi_mode == "learned")
        return roi::locate_heart(study, roi::LocateMode::kLearned, roi_params);
    throw ValidationError("roi mode must be heuristic or learned");
}

std::optional<net::NetworkParams> load_roi_model(const RunConfig& rc) {
    if (rc.roi_mode != "learned") return std::nullopt;
    if (rc.roi_model.empty())
        throw ValidationError("--roi-model is required with --roi-mode learned");
    return net::load_params(rc.roi_model);
}

int cmd_phantom(const RunConfig& rc) {
    phantom::emit_suite(rc.out, rc.n, rc.seed, rc.resolution);
    std::cout << "wrote " << rc.n << " phantom cases to " << rc.out.string() << "\n";
    return 0;
}

int cmd_train(const RunConfig& rc) {
    const auto target = rc.target == "roi" ? pipeline::TrainTarget::kRoi
                                           : pipeline::TrainTarget::kSegmentation;
    if (rc.target != "roi" && rc.target != "seg")
        throw ValidationError("train target must be seg or roi");
    net::TrainConfig cfg = rc.train;
    cfg.seed = rc.seed;
    if (target == pipeline::TrainTarget::kRoi) cfg.lambda_prior = 0.0;
    auto result = pipeline::train_on_directory(rc.cases, rc.arch, cfg, target);
    net::save_params(rc.out, result.params);
    std::cout << "trained " << rc.arch.depth << "-level net, final loss "
              << result.loss_history.back() << ", params -> " << rc.out.string() << "\n";
    return 0;
}

int cmd_segment(const RunConfig& rc) {
    const net::NetworkParams params = net::load_params(rc.model);
    const net::NetworkParamsF fast = net::to_float(params);
    const auto roi_params = load_roi_model(rc);
    for (const auto& dir : acdc::list_cases(rc.cases)) {
        auto c = acdc::load_case(dir);
        auto located = locate_for(rc, c.study, roi_params ? &*roi_params : nullptr);
        if (located.used_fallback)
            std::cerr << "note: " << c.study.case_id
                      << ": learned RoI empty, heuristic fallback used\n";
        auto masks = pipeline::segment_study(fast, c.study, located.box);
        const fs::path case_out = rc.out / c.study.case_id;
        fs::create_directories(case_out);
        for (const auto& m : masks) {
            char name[64];
            std::snprintf(name, sizeof(name), "_frame%02d_pred.nii.gz", m.frame_index);
            acdc::write_label_nifti(case_out / (c.study.case_id + name), m);
        }
    }
    std::cout << "predicted masks -> " << rc.out.string() << "\n";
    return 0;
}

std::vector<LabelMap> read_predicted_masks(const fs::path& masks_root,
                                           const CineStudy& study) {
    std::vector<LabelMap> out;
    const fs::path dir = masks_root / study.case_id;
    for (int f = 0; f < study.frames; ++f) {
        char name[64];
        std::snprintf(name, sizeof(name), "_frame%02d_pred.nii.gz", f);
        const fs::path p = dir / (study.case_id + name);
        if (!fs::exists(p))
            throw NotFoundError("predicted mask missing: " + p.string());
        LabelMap m = acdc::read_label_nifti(p);
        m.frame_index = f;
        if (m.slices != study.slices || m.rows != study.rows || m.cols != study.cols)
            throw ConsistencyError("predicted mask dims do not match study: " + p.string());
        out.push_back(std::move(m));
    }
    return out;
}

int cmd_quantify(const RunConfig& rc) {
    std::vector<ClinicalMetrics> metrics;
    for (const auto& dir : acdc::list_cases(rc.cases)) {
        if (rc.source == "analytic") {
            const fs::path p = dir / "analytic.json";
            if (!fs::exists(p))
                throw NotFoundError("analytic ground truth missing: " + p.string());
            auto m = report::read_metrics_json(p);
            metrics.insert(metrics.end(), m.begin(), m.end());
            continue;
        }
        auto c = acdc::load_case(dir);
        if (rc.source == "gt") {
            metrics.push_back(pipeline::quantify_ground_truth(c));
        } else if (rc.source == "masks") {
            if (rc.masks.empty())
                throw ValidationError("--masks is required with --source masks");
            auto maps = read_predicted_masks(rc.masks, c.study);
            metrics.push_back(pipeline::quantify_study(maps, c.study));
        } else {
            throw ValidationError("source must be masks, gt or analytic");
        }
    }
    report::write_report(metrics, {}, rc.out, parse_format(rc.format));
    std::cout << "quantified " << metrics.size() << " studies -> " << rc.out.string() << "\n";
    return 0;
}

int cmd_evaluate(const RunConfig& rc) {
    std::vector<stats::PairedSeries> series;
    if (!rc.paired.empty()) {
        std::ifstream in(rc.paired);
        if (!in) throw NotFoundError("paired CSV missing: " + rc.paired.string());
        std::stringstream buf;
        buf << in.rdbuf();
        series = stats::parse_paired_csv(buf.str());
    } else {
        auto truth = report::read_metrics_csv(rc.truth);
        auto pred = report::read_metrics_csv(rc.pred);
        series = stats::pair_metrics(truth, pred);
    }
    auto table = stats::concordance_table(series);
    report::write_report({}, table, rc.out, parse_format(rc.format));
    std::cout << "concordance table (" << table.size() << " rows) -> " << rc.out.string()
              << "\n";
    return 0;
}

int cmd_bench(const RunConfig& rc) {
    const net::NetworkParams params = net::load_params(rc.model);
    const net::NetworkParamsF fast = net::to_float(params);
    const auto roi_params = load_roi_model(rc);

    std::map<std::string, double> manual;
    if (!rc.manual_times.empty()) {
        std::ifstream in(rc.manual_times);
        if (!in) throw NotFoundError("manual times CSV missing: " + rc.manual_times.string());
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty() || line[0] == '#' || line.rfind("case_id", 0) == 0) continue;
            auto comma = line.find(',');
            if (comma == std::string::npos)
                throw ParseError("manual times line " + std::to_string(lineno) +
                                 ": expected case_id,seconds");
            manual[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
        }
    }

    std::vector<std::string> ids;
    std::vector<double> auto_times;
    for (const auto& dir : acdc::list_cases(rc.cases)) {
        auto c = acdc::load_case(dir);
        auto located = locate_for(rc, c.study, roi_params ? &*roi_params : nullptr);
        double total = 0.0;
        for (int rep = 0; rep < rc.reps; ++rep) {
            const auto t0 = std::chrono::steady_clock::now();
            auto masks = pipeline::segment_study(fast, c.study, located.box);
            auto metrics = pipeline::quantify_study(masks, c.study);
            const auto t1 = std::chrono::steady_clock::now();
            (void)metrics;
            total += std::chrono::duration<double>(t1 - t0).count();
        }
        ids.push_back(c.study.case_id);
        auto_times.push_back(total / rc.reps);
    }
    if (ids.empty()) throw NotFoundError("bench: no cases under " + rc.cases.string());

    nlohmann::json j;
    if (auto_times.size() >= 2) {
        auto [am, as] = stats::mean_sd(auto_times);
        j["auto_mean_s"] = am;
        j["auto_sd_s"] = as;
        std::cout << "automatic: " << am << " +/- " << as << " s/study\n";
    } else {
        j["auto_mean_s"] = auto_times[0];
        std::cout << "automatic: " << auto_times[0] << " s/study\n";
    }
    j["per_case"] = nlohmann::json::array();
    for (std::size_t i = 0; i < ids.size(); ++i)
        j["per_case"].push_back({{"case_id", ids[i]}, {"seconds", auto_times[i]}});

    if (!manual.empty()) {
        std::vector<double> m_paired, a_paired;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            auto it = manual.find(ids[i]);
            if (it == manual.end()) continue;
            m_paired.push_back(it->second);
            a_paired.push_back(auto_times[i]);
        }
        if (m_paired.size() >= 2) {
            auto [mm, ms] = stats::mean_sd(m_paired);
            auto ci = stats::mean_difference_ci(m_paired, a_paired, 0.95);
            j["manual_mean_s"] = mm;
            j["manual_sd_s"] = ms;
            j["diff_mean_s"] = ci.mean_diff;
            j["diff_ci_low_s"] = ci.ci_low;
            j["diff_ci_high_s"] = ci.ci_high;
            std::cout << "manual: " << mm << " +/- " << ms << " s/study\n"
                      << "manual - automatic: " << ci.mean_diff << " s (95% CI "
                      << ci.ci_low << " - " << ci.ci_high << ")\n";
        }
    }
    if (!rc.out.empty()) {
        std::ofstream out(rc.out);
        if (!out) throw IoError("bench: cannot open " + rc.out.string() + " for writing");
        out << j.dump(2) << "\n";
    }
    return 0;
}

// Expands "--config FILE" into long-form flags for any key the command line
// does not already set, so the file supplies defaults and flags override.
std::vector<std::string> apply_config_file(const std::vector<std::string>& args) {
    std::vector<std::string> out;
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size())
                throw ValidationError("--config requires a file path");
            config_path = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
        } else {
            out.push_back(args[i]);
        }
    }
    if (config_path.empty()) return out;

    std::ifstream in(config_path);
    if (!in) throw NotFoundError("config file missing: " + config_path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("config line " + std::to_string(lineno) +
                             ": expected key = value");
        auto strip = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        if (key.empty())
            throw ParseError("config line " + std::to_string(lineno) + ": empty key");
        const std::string flag = "--" + key;
        bool already = false;
        for (const auto& a : out)
            if (a == flag || a.rfind(flag + "=", 0) == 0) already = true;
        if (already) continue;
        if (value == "true") {
            out.push_back(flag);
        } else if (value != "false") {
            out.push_back(flag);
            out.push_back(value);
        }
    }
    return out;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"Cardiac cine MR segmentation and quantification pipeline"};
    app.require_subcommand(1);

    RunConfig rc;

    std::string config_dummy;
    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", rc.seed, "Seed for all randomness")->capture_default_str();
        cmd->add_option("--config", config_dummy, "key = value defaults file");
    };

    CLI::App* ph = app.add_subcommand("phantom", "Generate synthetic cases in ACDC layout");
    ph->add_option("--n", rc.n, "Number of cases")->capture_default_str();
    ph->add_option("--out", rc.out, "Output dataset directory")->required();
    ph->add_option("--resolution", rc.resolution, "In-plane resolution, mm")
        ->capture_default_str();
    add_seed(ph);

    CLI::App* tr = app.add_subcommand("train", "Train the segmentation (or RoI) network");
    tr->add_option("--cases", rc.cases, "Dataset directory")->required();
    tr->add_option("--out", rc.out, "Output params file")->required();
    tr->add_option("--target", rc.target, "seg or roi")->capture_default_str();
    tr->add_option("--epochs", rc.train.epochs)->capture_default_str();
    tr->add_option("--batch-size", rc.train.batch_size)->capture_default_str();
    tr->add_option("--lr", rc.train.learning_rate)->capture_default_str();
    tr->add_option("--lambda-prior", rc.train.lambda_prior)->capture_default_str();
    tr->add_option("--prior-warmup", rc.train.prior_warmup_epochs)->capture_default_str();
    tr->add_option("--w-ce", rc.train.w_ce)->capture_default_str();
    tr->add_option("--w-dice", rc.train.w_dice)->capture_default_str();
    tr->add_option("--width", rc.arch.width)->capture_default_str();
    tr->add_option("--depth", rc.arch.depth)->capture_default_str();
    tr->add_option("--latent", rc.arch.latent)->capture_default_str();
    tr->add_option("--vae-depth", rc.arch.vae_depth)->capture_default_str();
    tr->add_option("--vae-width", rc.arch.vae_width)->capture_default_str();
    tr->add_flag("--augment", rc.train.augment, "Seeded flips/translations");
    add_seed(tr);

    CLI::App* se = app.add_subcommand("segment", "Write predicted masks per frame");
    se->add_option("--model", rc.model, "Params file")->required();
    se->add_option("--cases", rc.cases, "Dataset directory")->required();
    se->add_option("--out", rc.out, "Output directory")->required();
    se->add_option("--roi-mode", rc.roi_mode, "heuristic or learned")->capture_default_str();
    se->add_option("--roi-model", rc.roi_model, "Stage-1 params (learned mode)");
    add_seed(se);

    CLI::App* qu = app.add_subcommand("quantify", "Compute clinical metrics per study");
    qu->add_option("--cases", rc.cases, "Dataset directory")->required();
    qu->add_option("--out", rc.out, "Report file")->required();
    qu->add_option("--masks", rc.masks, "Predicted masks directory");
    qu->add_option("--source", rc.source, "masks, gt or analytic")->capture_default_str();
    qu->add_option("--format", rc.format, "csv or json")->capture_default_str();
    add_seed(qu);

    CLI::App* ev = app.add_subcommand("evaluate", "Manual-vs-automatic concordance table");
    ev->add_option("--pred", rc.pred, "Automatic metrics CSV");
    ev->add_option("--truth", rc.truth, "Manual metrics CSV");
    ev->add_option("--paired", rc.paired, "Long-format paired CSV (case_id,metric,manual,auto)");
    ev->add_option("--out", rc.out, "Report file")->required();
    ev->add_option("--format", rc.format, "csv or json")->capture_default_str();
    add_seed(ev);

    CLI::App* be = app.add_subcommand("bench", "Time segment+quantify per study");
    be->add_option("--model", rc.model, "Params file")->required();
    be->add_option("--cases", rc.cases, "Dataset directory")->required();
    be->add_option("--manual-times", rc.manual_times, "Manual times CSV (case_id,seconds)");
    be->add_option("--reps", rc.reps, "Repetitions per study")->capture_default_str();
    be->add_option("--out", rc.out, "Report JSON");
    be->add_option("--roi-mode", rc.roi_mode)->capture_default_str();
    be->add_option("--roi-model", rc.roi_model);
    add_seed(be);

    std::vector<std::string> expanded;
    try {
        expanded = apply_config_file(args);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    std::vector<std::string> argv(expanded.rbegin(), expanded.rend());
    try {
        app.parse(argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help() << "\n";
            return 0;
        }
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (ph->parsed()) return cmd_phantom(rc);
        if (tr->parsed()) return cmd_train(rc);
        if (se->parsed()) return cmd_segment(rc);
        if (qu->parsed()) return cmd_quantify(rc);
        if (ev->parsed()) {
            if (rc.paired.empty() && (rc.pred.empty() || rc.truth.empty()))
                throw ValidationError("evaluate needs --pred and --truth, or --paired");
            return cmd_evaluate(rc);
        }
        if (be->parsed()) return cmd_bench(rc);
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace cardiq::cli
