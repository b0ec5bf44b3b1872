#pragma once

// Batch experiment front-end: strict key-value configuration files, seeded
// (mode x seed) runs writing per-epoch metric CSVs and best checkpoints, a
// summary.json aggregating mean and standard deviation across seeds, and a
// plain-text report. Reruns with an identical spec produce byte-identical
// CSVs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "iomatch/config.hpp"
#include "iomatch/data.hpp"
#include "iomatch/errors.hpp"
#include "iomatch/trainer.hpp"

namespace iomatch {

struct ExperimentSpec {
    TrainConfig train;
    SyntheticTaskSpec synthetic;
    bool use_csv = false;
    std::string labeled_csv, unlabeled_csv, test_csv;
    std::vector<std::uint64_t> seeds = {1};
    std::vector<TrainMode> modes = {TrainMode::iomatch};
    std::string out_dir = "runs";
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        const std::string item = trim(s.substr(pos, comma - pos));
        if (!item.empty()) out.push_back(item);
        pos = comma + 1;
        if (comma == s.size()) break;
    }
    return out;
}

inline int parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + value + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on") return true;
    if (value == "false" || value == "0" || value == "off") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + value + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    for (const auto& item : split_list(value)) out.push_back(parse_int(key, item));
    return out;
}

} // namespace detail

inline std::vector<std::uint64_t> parse_seed_list(const std::string& value) {
    std::vector<std::uint64_t> seeds;
    for (const auto& item : detail::split_list(value)) {
        seeds.push_back(static_cast<std::uint64_t>(detail::parse_int("seeds", item)));
    }
    if (seeds.empty()) throw ConfigError("key 'seeds': list is empty");
    return seeds;
}

// Strict parsing: `key = value` lines, '#' comments, unknown or duplicate
// keys rejected by name, missing keys filled from defaults.
inline ExperimentSpec parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path);
    ExperimentSpec spec;
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(line_no) +
                              ": expected 'key = value', got '" + t + "'");
        }
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
        }
        if (!kv.emplace(key, value).second) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
        }
    }

    auto take = [&kv](const std::string& key) -> const std::string* {
        const auto it = kv.find(key);
        return it == kv.end() ? nullptr : &it->second;
    };
    std::vector<std::string> known;
    auto handled = [&known](const std::string& key) { known.push_back(key); };

    auto get_int = [&](const std::string& key, int& dst) {
        handled(key);
        if (const auto* v = take(key)) dst = detail::parse_int(key, *v);
    };
    auto get_double = [&](const std::string& key, double& dst) {
        handled(key);
        if (const auto* v = take(key)) dst = detail::parse_double(key, *v);
    };
    auto get_bool = [&](const std::string& key, bool& dst) {
        handled(key);
        if (const auto* v = take(key)) dst = detail::parse_bool(key, *v);
    };
    auto get_string = [&](const std::string& key, std::string& dst) {
        handled(key);
        if (const auto* v = take(key)) dst = *v;
    };

    handled("modes");
    if (const auto* v = take("modes")) {
        spec.modes.clear();
        for (const auto& name : detail::split_list(*v)) spec.modes.push_back(parse_mode(name));
        if (spec.modes.empty()) throw ConfigError("key 'modes': list is empty");
    }
    handled("seeds");
    if (const auto* v = take("seeds")) spec.seeds = parse_seed_list(*v);
    get_string("out_dir", spec.out_dir);

    handled("dataset");
    if (const auto* v = take("dataset")) {
        if (*v == "csv") {
            spec.use_csv = true;
        } else if (*v != "synthetic") {
            throw ConfigError("key 'dataset': expected synthetic or csv, got '" + *v + "'");
        }
    }
    get_string("labeled_csv", spec.labeled_csv);
    get_string("unlabeled_csv", spec.unlabeled_csv);
    get_string("test_csv", spec.test_csv);
    get_int("k_seen", spec.synthetic.k_seen);
    get_int("k_unseen", spec.synthetic.k_unseen);
    get_int("input_dim", spec.synthetic.input_dim);
    get_int("n_per_class", spec.synthetic.n_per_class);
    get_int("n_labeled", spec.synthetic.n_labeled);
    get_double("class_sep", spec.synthetic.class_sep);

    get_int("batch_size", spec.train.batch_size);
    get_int("mu", spec.train.mu);
    get_double("tau_p", spec.train.tau_p);
    get_double("tau_q", spec.train.tau_q);
    get_double("lambda_mb", spec.train.lambda_mb);
    get_double("lambda_ui", spec.train.lambda_ui);
    get_double("lambda_op", spec.train.lambda_op);
    get_int("epochs", spec.train.epochs);
    get_int("iters_per_epoch", spec.train.iters_per_epoch);
    get_double("lr", spec.train.lr);
    get_double("momentum", spec.train.momentum);
    get_bool("cosine_decay", spec.train.cosine_decay);
    get_bool("da_enabled", spec.train.da_enabled);
    get_bool("hard_labels", spec.train.hard_labels);
    get_bool("eval_closed_with_open_head", spec.train.eval_closed_with_open_head);
    get_double("weak_sigma", spec.train.augment.weak_sigma);
    get_double("strong_sigma", spec.train.augment.strong_sigma);
    get_double("strong_mask_frac", spec.train.augment.strong_mask_frac);

    handled("encoder_hidden");
    if (const auto* v = take("encoder_hidden")) {
        spec.train.dims.encoder_hidden = detail::parse_int_list("encoder_hidden", *v);
    }
    get_int("feature_dim", spec.train.dims.feature_dim);
    handled("projector_hidden");
    if (const auto* v = take("projector_hidden")) {
        spec.train.dims.projector_hidden = detail::parse_int_list("projector_hidden", *v);
    }
    get_int("projection_dim", spec.train.dims.projection_dim);

    for (const auto& [key, value] : kv) {
        (void)value;
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown key '" + key + "' in " + path);
        }
    }

    spec.train.validate();
    if (spec.use_csv && (spec.labeled_csv.empty() || spec.unlabeled_csv.empty() ||
                         spec.test_csv.empty())) {
        throw ConfigError("dataset=csv requires labeled_csv, unlabeled_csv, and test_csv");
    }
    return spec;
}

namespace detail {

inline nlohmann::json config_json(const ExperimentSpec& spec) {
    nlohmann::json j;
    std::vector<std::string> mode_names;
    for (auto m : spec.modes) mode_names.push_back(to_string(m));
    j["modes"] = mode_names;
    j["seeds"] = spec.seeds;
    j["out_dir"] = spec.out_dir;
    j["dataset"] = spec.use_csv ? "csv" : "synthetic";
    if (spec.use_csv) {
        j["labeled_csv"] = spec.labeled_csv;
        j["unlabeled_csv"] = spec.unlabeled_csv;
        j["test_csv"] = spec.test_csv;
    } else {
        j["k_seen"] = spec.synthetic.k_seen;
        j["k_unseen"] = spec.synthetic.k_unseen;
        j["input_dim"] = spec.synthetic.input_dim;
        j["n_per_class"] = spec.synthetic.n_per_class;
        j["n_labeled"] = spec.synthetic.n_labeled;
        j["class_sep"] = spec.synthetic.class_sep;
    }
    const TrainConfig& t = spec.train;
    j["batch_size"] = t.batch_size;
    j["mu"] = t.mu;
    j["tau_p"] = t.tau_p;
    j["tau_q"] = t.tau_q;
    j["lambda_mb"] = t.lambda_mb;
    j["lambda_ui"] = t.lambda_ui;
    j["lambda_op"] = t.lambda_op;
    j["epochs"] = t.epochs;
    j["iters_per_epoch"] = t.iters_per_epoch;
    j["lr"] = t.lr;
    j["momentum"] = t.momentum;
    j["cosine_decay"] = t.cosine_decay;
    j["da_enabled"] = t.da_enabled;
    j["hard_labels"] = t.hard_labels;
    j["eval_closed_with_open_head"] = t.eval_closed_with_open_head;
    j["weak_sigma"] = t.augment.weak_sigma;
    j["strong_sigma"] = t.augment.strong_sigma;
    j["strong_mask_frac"] = t.augment.strong_mask_frac;
    j["encoder_hidden"] = t.dims.encoder_hidden;
    j["feature_dim"] = t.dims.feature_dim;
    j["projector_hidden"] = t.dims.projector_hidden;
    j["projection_dim"] = t.dims.projection_dim;
    return j;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRecord>& history) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "epoch,l_s,l_mb,l_ui,l_op,l_overall,closed_acc,open_ba,util_rate,"
           "n_selected_inliers,n_selected_open\n";
    for (const auto& r : history) {
        out << r.epoch << ',' << format_double(r.l_s) << ',' << format_double(r.l_mb) << ','
            << format_double(r.l_ui) << ',' << format_double(r.l_op) << ','
            << format_double(r.l_overall) << ',' << format_double(r.closed_acc) << ','
            << format_double(r.open_ba) << ',' << format_double(r.util_rate) << ','
            << format_double(r.n_selected_inliers) << ',' << format_double(r.n_selected_open)
            << '\n';
    }
}

struct Aggregate {
    std::vector<double> values;
    double mean() const {
        double s = 0.0;
        for (double v : values) s += v;
        return values.empty() ? 0.0 : s / values.size();
    }
    double stddev() const { // sample standard deviation
        if (values.size() < 2) return 0.0;
        const double m = mean();
        double s = 0.0;
        for (double v : values) s += (v - m) * (v - m);
        return std::sqrt(s / (values.size() - 1));
    }
    nlohmann::json to_json() const {
        return {{"mean", mean()}, {"std", stddev()}, {"values", values}};
    }
};

} // namespace detail

// Runs every (mode, seed) pair: builds the dataset, trains, writes
// `<out>/<mode>_seed<k>.csv` and the best checkpoint, then aggregates
// summary.json. Returns a process exit status (0 ok, 2 training abort; an
// aborted run leaves completed files in place plus a .FAILED marker).
inline int run_experiment(const ExperimentSpec& spec, std::ostream& log = std::cout) {
    namespace fs = std::filesystem;
    fs::create_directories(spec.out_dir);
    OpenSetDataset csv_dataset;
    if (spec.use_csv) {
        csv_dataset = load_feature_csv(spec.labeled_csv, spec.unlabeled_csv, spec.test_csv);
    }
    std::map<std::string, std::map<std::string, detail::Aggregate>> agg;
    for (const std::uint64_t seed : spec.seeds) {
        OpenSetDataset synthetic;
        if (!spec.use_csv) {
            SyntheticTaskSpec task = spec.synthetic;
            task.seed = seed;
            synthetic = make_gaussian_mixture_task(task);
        }
        const OpenSetDataset& ds = spec.use_csv ? csv_dataset : synthetic;
        for (const TrainMode mode : spec.modes) {
            TrainConfig cfg = spec.train;
            cfg.mode = mode;
            cfg.seed = seed;
            const std::string stem =
                spec.out_dir + "/" + to_string(mode) + "_seed" + std::to_string(seed);
            log << "running " << to_string(mode) << " seed " << seed << " ..." << std::endl;
            RunState state = [&]() {
                try {
                    return train_run(ds, cfg);
                } catch (const TrainingAbort& e) {
                    std::ofstream marker(stem + ".FAILED");
                    marker << e.what() << '\n';
                    throw;
                }
            }();
            detail::write_metrics_csv(stem + ".csv", state.history);
            const BestCheckpoint best = select_best_checkpoint(state);
            best.params.save(stem + "_best.json");
            auto& rows = agg[to_string(mode)];
            rows["best_closed_acc"].values.push_back(best.closed_acc);
            rows["open_ba"].values.push_back(state.history[best.epoch].open_ba);
            rows["final_util_rate"].values.push_back(state.history.back().util_rate);
            log << "  best closed_acc " << best.closed_acc << " (epoch " << best.epoch
                << "), open_ba " << state.history[best.epoch].open_ba << ", final util_rate "
                << state.history.back().util_rate << std::endl;
        }
    }
    nlohmann::json summary;
    summary["config"] = detail::config_json(spec);
    std::vector<std::string> mode_order;
    for (auto m : spec.modes) mode_order.push_back(to_string(m));
    summary["mode_order"] = mode_order;
    summary["seeds"] = spec.seeds;
    nlohmann::json modes_json;
    for (const auto& [mode, rows] : agg) {
        nlohmann::json m;
        for (const auto& [metric, a] : rows) m[metric] = a.to_json();
        modes_json[mode] = std::move(m);
    }
    summary["modes"] = std::move(modes_json);
    std::ofstream out(spec.out_dir + "/summary.json");
    if (!out) throw DataError("cannot write " + spec.out_dir + "/summary.json");
    out << summary.dump(2) << '\n';
    return 0;
}

// Prints a mode x metric table from summary.json; the best mode per metric is
// flagged with '*'.
inline int emit_report(const std::string& out_dir, std::ostream& os = std::cout) {
    const std::string path = out_dir + "/summary.json";
    std::ifstream in(path);
    if (!in) throw DataError("no summary found at " + path + "; run an experiment first");
    nlohmann::json summary;
    try {
        in >> summary;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    std::vector<std::string> modes;
    for (const auto& m : summary.at("mode_order")) modes.push_back(m.get<std::string>());
    const std::vector<std::string> metrics = {"best_closed_acc", "open_ba", "final_util_rate"};

    os << std::left << std::setw(18) << "metric";
    for (const auto& m : modes) os << std::setw(22) << m;
    os << '\n';
    for (const auto& metric : metrics) {
        os << std::left << std::setw(18) << metric;
        double best_mean = -1.0;
        std::string best_mode;
        for (const auto& mode : modes) {
            const double mean = summary.at("modes").at(mode).at(metric).at("mean").get<double>();
            if (!std::isfinite(mean)) throw DataError("non-finite mean in " + path);
            if (mean > best_mean) {
                best_mean = mean;
                best_mode = mode;
            }
        }
        for (const auto& mode : modes) {
            const auto& cell = summary.at("modes").at(mode).at(metric);
            std::ostringstream text;
            text << std::fixed << std::setprecision(4) << cell.at("mean").get<double>() << " +/- "
                 << cell.at("std").get<double>() << (mode == best_mode ? " *" : "");
            os << std::setw(22) << text.str();
        }
        os << '\n';
    }
    return 0;
}

} // namespace iomatch
