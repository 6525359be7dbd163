#include "usn/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "usn/checkpoint.hpp"
#include "usn/errors.hpp"

namespace usn {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

/// Object reader that rejects keys nobody asked for.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        used_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type (" + it->dump() + ")");
        }
    }

    const json* child(const char* key) {
        used_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string path(const char* key) const { return path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

PerturbationSpec spec_from_json(const json& j, const std::string& path) {
    Section s(j, path);
    PerturbationSpec p;
    std::string kind = "brightness";
    s.get("kind", kind);
    s.get("epsilon", p.epsilon);
    s.finish();
    try {
        p.kind = perturbation_kind_from_string(kind);
    } catch (const std::exception& e) {
        throw ConfigError(path + ".kind: " + e.what());
    }
    return p;
}

std::vector<PerturbationSpec> specs_from_json(const json* j, const std::string& path,
                                              std::vector<PerturbationSpec> fallback) {
    if (j == nullptr) return fallback;
    if (!j->is_array()) throw ConfigError(path + ": expected an array");
    std::vector<PerturbationSpec> out;
    for (std::size_t i = 0; i < j->size(); ++i) out.push_back(spec_from_json((*j)[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

ordered_json specs_to_json(const std::vector<PerturbationSpec>& specs) {
    ordered_json a = ordered_json::array();
    for (const auto& s : specs) a.push_back({{"kind", to_string(s.kind)}, {"epsilon", s.epsilon}});
    return a;
}

PruningRule rule_from(const std::string& name, const std::string& path) {
    try {
        return pruning_rule_from_string(name);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string short_fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, sep)) out.push_back(field);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

RunSpec read_run_spec(const json& j) {
    RunSpec r;
    r.rule = pruning_rule_from_string(j.at("rule").get<std::string>());
    r.rho = j.at("rho").get<double>();
    r.lambda_w = j.at("lambda_w").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

std::vector<LabeledImage> test_subset(const ExperimentConfig& c, const Dataset& data) {
    std::vector<LabeledImage> test = data.test;
    if (c.certify.max_images > 0 && test.size() > c.certify.max_images) test.resize(c.certify.max_images);
    return test;
}

}  // namespace

ExperimentConfig config_from_json(const json& root) {
    ExperimentConfig c;
    Section top(root, "config");
    if (const json* d = top.child("dataset")) {
        Section s(*d, "config.dataset");
        s.get("n_train", c.dataset.n_train);
        s.get("n_val", c.dataset.n_val);
        s.get("n_test", c.dataset.n_test);
        s.get("seed", c.dataset.seed);
        SceneParams& p = c.dataset.scene;
        s.get("height", p.height);
        s.get("width", p.width);
        s.get("keypoints", p.keypoints);
        s.get("blob_sigma", p.blob_sigma);
        s.get("amplitude", p.amplitude);
        s.get("background", p.background);
        s.get("gradient", p.gradient);
        s.get("margin", p.margin);
        s.finish();
    }
    if (const json* m = top.child("model")) {
        Section s(*m, "config.model");
        s.get("width_multiplier", c.model.width_multiplier);
        s.get("temperature", c.model.temperature);
        s.finish();
    }
    if (const json* t = top.child("train")) {
        Section s(*t, "config.train");
        TrainConfig& tc = c.train;
        s.get("epochs", tc.epochs);
        s.get("batch_size", tc.batch_size);
        s.get("learning_rate", tc.learning_rate);
        std::string opt = to_string(tc.optimizer);
        s.get("optimizer", opt);
        tc.optimizer = optimizer_kind_from_string(opt);
        s.get("samples", tc.samples);
        s.get("lambda_u", tc.weights.lambda_u);
        s.get("lambda_s", tc.weights.lambda_s);
        s.get("lambda_w", tc.weights.lambda_w);
        s.get("prune_layers", tc.weights.prune_layers);
        s.get("eps_usn", tc.eps_usn);
        tc.specs = specs_from_json(s.child("perturbations"), s.path("perturbations"), tc.specs);
        if (const json* sch = s.child("schedule")) {
            Section ss(*sch, "config.train.schedule");
            ss.get("rho", tc.schedule.rho_final);
            ss.get("n_steps", tc.schedule.n_steps);
            ss.get("t_start", tc.schedule.t_start);
            ss.get("t_end", tc.schedule.t_end);
            ss.get("t_interval", tc.schedule.t_interval);
            ss.finish();
        }
        std::string rule = to_string(tc.rule);
        s.get("rule", rule);
        tc.rule = rule_from(rule, s.path("rule"));
        std::string order = to_string(tc.prune_order);
        s.get("prune_order", order);
        try {
            tc.prune_order = prune_order_from_string(order);
        } catch (const ConfigError& e) {
            throw ConfigError(s.path("prune_order") + ": " + e.what());
        }
        s.get("seed", tc.seed);
        s.finish();
    }
    if (const json* ce = top.child("certify")) {
        Section s(*ce, "config.certify");
        CertifyConfig& cc = c.certify;
        s.get("delta", cc.criterion.delta);
        if (const json* q = s.child("q")) {
            if (q->is_string() && q->get<std::string>() == "inf")
                cc.criterion.q = std::numeric_limits<double>::infinity();
            else if (q->is_number())
                cc.criterion.q = q->get<double>();
            else
                throw ConfigError("config.certify.q: expected a number or \"inf\"");
        }
        s.get("n_cells", cc.grid.n_cells);
        s.get("max_cells", cc.grid.max_cells);
        s.get("lipschitz_slack", cc.grid.lipschitz_slack);
        s.get("correct_tolerance", cc.correct_tolerance);
        s.get("falsify_samples", cc.falsify_samples);
        s.get("probabilistic", cc.probabilistic);
        s.get("alpha", cc.alpha);
        s.get("probabilistic_samples", cc.probabilistic_samples);
        s.get("max_images", cc.max_images);
        s.get("usn_samples", cc.usn_samples);
        s.get("usn_layer", cc.usn_layer);
        cc.specs = specs_from_json(s.child("perturbations"), s.path("perturbations"), cc.specs);
        s.finish();
    }
    if (const json* sw = top.child("sweep")) {
        Section s(*sw, "config.sweep");
        s.get("seeds", c.sweep.seeds);
        if (const json* arms = s.child("arms")) {
            if (!arms->is_array()) throw ConfigError("config.sweep.arms: expected an array");
            c.sweep.arms.clear();
            for (std::size_t i = 0; i < arms->size(); ++i) {
                const std::string path = "config.sweep.arms[" + std::to_string(i) + "]";
                Section a((*arms)[i], path);
                SweepArm arm;
                std::string rule = "usn";
                a.get("rule", rule);
                arm.rule = rule_from(rule, path + ".rule");
                a.get("rho", arm.rho);
                a.get("lambda_w", arm.lambda_w);
                a.finish();
                c.sweep.arms.push_back(arm);
            }
        }
        s.finish();
    }
    top.finish();
    validate(c);
    return c;
}

ordered_json config_to_json(const ExperimentConfig& c) {
    const SceneParams& p = c.dataset.scene;
    const TrainConfig& t = c.train;
    const CertifyConfig& ce = c.certify;
    ordered_json arms = ordered_json::array();
    for (const SweepArm& a : c.sweep.arms)
        arms.push_back({{"rule", to_string(a.rule)}, {"rho", a.rho}, {"lambda_w", a.lambda_w}});
    return {
        {"dataset",
         {{"n_train", c.dataset.n_train},
          {"n_val", c.dataset.n_val},
          {"n_test", c.dataset.n_test},
          {"seed", c.dataset.seed},
          {"height", p.height},
          {"width", p.width},
          {"keypoints", p.keypoints},
          {"blob_sigma", p.blob_sigma},
          {"amplitude", p.amplitude},
          {"background", p.background},
          {"gradient", p.gradient},
          {"margin", p.margin}}},
        {"model", {{"width_multiplier", c.model.width_multiplier}, {"temperature", c.model.temperature}}},
        {"train",
         {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"optimizer", to_string(t.optimizer)},
          {"samples", t.samples},
          {"lambda_u", t.weights.lambda_u},
          {"lambda_s", t.weights.lambda_s},
          {"lambda_w", t.weights.lambda_w},
          {"prune_layers", t.weights.prune_layers},
          {"eps_usn", t.eps_usn},
          {"perturbations", specs_to_json(t.specs)},
          {"schedule",
           {{"rho", t.schedule.rho_final},
            {"n_steps", t.schedule.n_steps},
            {"t_start", t.schedule.t_start},
            {"t_end", t.schedule.t_end},
            {"t_interval", t.schedule.t_interval}}},
          {"rule", to_string(t.rule)},
          {"prune_order", to_string(t.prune_order)},
          {"seed", t.seed}}},
        {"certify",
         {{"delta", ce.criterion.delta},
          {"q", std::isinf(ce.criterion.q) ? ordered_json("inf") : ordered_json(ce.criterion.q)},
          {"n_cells", ce.grid.n_cells},
          {"max_cells", ce.grid.max_cells},
          {"lipschitz_slack", ce.grid.lipschitz_slack},
          {"correct_tolerance", ce.correct_tolerance},
          {"falsify_samples", ce.falsify_samples},
          {"probabilistic", ce.probabilistic},
          {"alpha", ce.alpha},
          {"probabilistic_samples", ce.probabilistic_samples},
          {"max_images", ce.max_images},
          {"usn_samples", ce.usn_samples},
          {"usn_layer", ce.usn_layer},
          {"perturbations", specs_to_json(ce.specs)}}},
        {"sweep", {{"seeds", c.sweep.seeds}, {"arms", arms}}},
    };
}

ExperimentConfig load_config(const fs::path& path) { return config_from_json(read_json(path)); }

void validate(const ExperimentConfig& c) {
    const auto check = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    try {
        validate(c.dataset.scene);
        validate(c.train);
        validate(c.certify.criterion);
        for (const auto& s : c.certify.specs) validate(s);
    } catch (const ContractError& e) {
        throw ConfigError(e.what());
    }
    check(c.dataset.n_train >= 1 && c.dataset.n_val >= 1 && c.dataset.n_test >= 1, "every split needs a scene");
    check(c.dataset.scene.height % 8 == 0 && c.dataset.scene.width % 8 == 0,
          "image sides must be multiples of 8 for the CNN");
    check(c.model.width_multiplier >= 1, "width_multiplier must be positive");
    check(c.model.temperature > 0.0, "temperature must be positive");
    check(c.train.weights.lambda_u >= 0 && c.train.weights.lambda_s >= 0 && c.train.weights.lambda_w >= 0,
          "loss weights must be non-negative");
    for (std::size_t k : c.train.weights.prune_layers) check(k < 5, "prune layer out of range");
    check(c.certify.grid.n_cells >= 1 && c.certify.grid.max_cells >= c.certify.grid.n_cells,
          "need 1 <= n_cells <= max_cells");
    check(c.certify.alpha > 0.0 && c.certify.alpha < 1.0, "alpha must lie in (0, 1)");
    check(c.certify.usn_samples >= 2, "usn_samples must be at least 2");
    check(c.certify.usn_layer < 4, "usn_layer must name a conv layer (0..3)");
    check(!c.certify.specs.empty(), "need at least one certification perturbation");
    check(!c.sweep.seeds.empty(), "sweep needs at least one seed");
    for (const SweepArm& a : c.sweep.arms) {
        check(!a.rho.empty() && !a.lambda_w.empty(), "sweep arms need rho and lambda_w values");
        for (double r : a.rho) check(r >= 0.0 && r < 1.0, "sweep rho must lie in [0, 1)");
        for (double l : a.lambda_w) check(l >= 0.0, "sweep lambda_w must be non-negative");
    }
}

std::string RunSpec::id() const {
    return std::string(to_string(rule)) + "_rho" + short_fmt(rho) + "_lw" + short_fmt(lambda_w) + "_s" +
           std::to_string(seed);
}

std::vector<RunSpec> sweep_runs(const SweepConfig& s) {
    std::vector<RunSpec> out;
    std::set<std::string> seen;
    for (const SweepArm& arm : s.arms)
        for (double rho : arm.rho)
            for (double lw : arm.lambda_w)
                for (std::uint64_t seed : s.seeds) {
                    RunSpec r{arm.rule, rho, lw, seed};
                    if (r.rule == PruningRule::None || r.rho == 0.0) {
                        r.rule = PruningRule::None;
                        r.rho = 0.0;
                    }
                    // The Wasserstein term vanishes without pruning, so lambda_w does not matter here.
                    const std::string key = r.rule == PruningRule::None ? "none_s" + std::to_string(seed) : r.id();
                    if (seen.insert(key).second) out.push_back(r);
                }
    return out;
}

TrainConfig run_train_config(const ExperimentConfig& c, const RunSpec& run) {
    TrainConfig t = c.train;
    t.rule = run.rule;
    t.seed = run.seed;
    t.schedule.rho_final = run.rule == PruningRule::None ? 0.0 : run.rho;
    t.weights.lambda_w = run.lambda_w;
    return t;
}

Dataset build_dataset(const ExperimentConfig& c) {
    return generate_dataset(c.dataset.n_train, c.dataset.n_val, c.dataset.n_test, c.dataset.scene, c.dataset.seed);
}

Dataset ensure_dataset(const ExperimentConfig& c, const fs::path& dir) {
    Dataset d = build_dataset(c);
    const fs::path meta = dir / "dataset.json";
    if (fs::exists(meta)) {
        const json j = read_json(meta);
        if (j.value("checksum", std::string()) == std::to_string(dataset_checksum(d))) return d;
    }
    save_dataset(d, dir);
    return d;
}

RunArtifacts train_run(const ExperimentConfig& c, const RunSpec& run, const Dataset& data, const fs::path& runs_dir) {
    const SceneParams& p = c.dataset.scene;
    Network net = make_cnn_small(p.height, p.width, p.keypoints, c.model.width_multiplier, c.model.temperature);
    initialize_he(net, run.seed);
    const TrainConfig tc = run_train_config(c, run);
    const fs::path dir = runs_dir / run.id();
    fs::create_directories(dir);
    RunArtifacts a{run, dir, dir / "model.json", train(std::move(net), tc, data.train, data.val)};
    save_checkpoint(a.result.best, a.checkpoint);
    std::ostringstream log;
    write_log_csv(log, a.result.log);
    write_text(a.dir / "log.csv", log.str());

    const Network compacted = compact(a.result.best);
    std::vector<std::size_t> channels;
    for (std::size_t k = 0; k < a.result.best.num_linear(); ++k) channels.push_back(a.result.best.linear(k).active_channels());
    ordered_json j = {
        {"id", run.id()},
        {"rule", to_string(run.rule)},
        {"rho", run.rho},
        {"lambda_w", run.lambda_w},
        {"seed", run.seed},
        {"best_epoch", a.result.best_epoch},
        {"best_val_task", a.result.best_val_task},
        {"diverged", a.result.diverged},
        {"parameters", compacted.parameter_count()},
        {"active_channels", channels},
        {"checkpoint", "model.json"},
        {"log", "log.csv"},
        {"config", config_to_json(c)},
    };
    write_text(a.dir / "run.json", j.dump(2) + "\n");
    return a;
}

CampaignReport certify_run(const ExperimentConfig& c, const fs::path& run_dir, const Dataset& data,
                           std::size_t jobs) {
    const json meta = read_json(run_dir / "run.json");
    const std::string id = meta.at("id").get<std::string>();
    const Network net = compact(load_checkpoint(run_dir / "model.json"));
    CampaignConfig cc;
    cc.criterion = c.certify.criterion;
    cc.grid = c.certify.grid;
    cc.correct_tolerance = c.certify.correct_tolerance;
    cc.falsify_samples = c.certify.falsify_samples;
    cc.run_probabilistic = c.certify.probabilistic;
    cc.alpha = c.certify.alpha;
    cc.probabilistic_samples = c.certify.probabilistic_samples;
    cc.seed = meta.at("seed").get<std::uint64_t>();
    cc.jobs = std::max<std::size_t>(1, jobs);
    const std::vector<CampaignNet> nets = {{id, &net}};
    const std::vector<LabeledImage> test = test_subset(c, data);
    CampaignReport report = campaign(nets, test, c.certify.specs, cc);
    std::ostringstream csv;
    write_verdicts_csv(csv, report);
    write_text(run_dir / "verdicts.csv", csv.str());
    write_text(run_dir / "summary.json", summary_json(report) + "\n");
    return report;
}

std::vector<UsnStats> visualize_run(const ExperimentConfig& c, const fs::path& run_dir, const Dataset& data) {
    const json meta = read_json(run_dir / "run.json");
    const Network net = load_checkpoint(run_dir / "model.json");
    const std::vector<std::size_t> layers = conv_layers(net);
    const std::vector<LabeledImage> test = test_subset(c, data);
    std::vector<UsnStats> stats = dataset_usn_stats(net, test, c.train.specs, c.certify.usn_samples, layers,
                                                    meta.at("seed").get<std::uint64_t>(), c.train.eps_usn);
    std::vector<std::vector<int>> maps;
    for (std::size_t k : layers) maps.push_back(channel_map(net, k));
    std::ostringstream csv;
    write_stats_csv(csv, stats, maps);
    write_text(run_dir / "usn.csv", csv.str());
    return stats;
}

std::vector<ReportRow> collect_report(const fs::path& in_dir) {
    using Key = std::tuple<std::string, double, double, std::string>;
    struct Acc {
        ReportRow row;
        std::vector<double> accuracies;
        double time_sum = 0.0;
        double parameter_sum = 0.0;
    };
    std::map<Key, Acc> groups;
    if (!fs::exists(in_dir)) return {};
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::recursive_directory_iterator(in_dir))
        if (entry.is_regular_file() && entry.path().filename() == "verdicts.csv" &&
            fs::exists(entry.path().parent_path() / "run.json"))
            dirs.push_back(entry.path().parent_path());
    std::sort(dirs.begin(), dirs.end());
    for (const fs::path& dir : dirs) {
        const json meta = read_json(dir / "run.json");
        const RunSpec run = read_run_spec(meta);
        const double parameters = meta.value("parameters", 0.0);
        std::ifstream in(dir / "verdicts.csv");
        std::string line;
        std::getline(in, line);
        const std::vector<std::string> header = split(line, ',');
        const auto col = [&](const char* name) {
            const auto it = std::find(header.begin(), header.end(), name);
            if (it == header.end()) throw ConfigError((dir / "verdicts.csv").string() + ": missing column " + name);
            return static_cast<std::size_t>(it - header.begin());
        };
        const std::size_t c_spec = col("spec"), c_verdict = col("verdict"), c_time = col("time"),
                          c_kc = col("keypoints_correct"), c_kcv = col("keypoints_correct_and_verified");
        std::map<std::string, ReportRow> per_spec;
        std::map<std::string, double> time_sum;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const std::vector<std::string> f = split(line, ',');
            if (f.size() != header.size()) throw ConfigError((dir / "verdicts.csv").string() + ": ragged row");
            ReportRow& r = per_spec[f[c_spec]];
            ++r.images;
            if (f[c_verdict] == "Holds") ++r.holds;
            else if (f[c_verdict] == "Violated") ++r.violated;
            else ++r.unknown;
            r.keypoints_correct += std::stoul(f[c_kc]);
            r.keypoints_correct_and_verified += std::stoul(f[c_kcv]);
            time_sum[f[c_spec]] += std::stod(f[c_time]);
        }
        const std::size_t keypoints = static_cast<std::size_t>(meta.at("config").at("dataset").at("keypoints").get<int>());
        for (auto& [spec, r] : per_spec) {
            Acc& acc = groups[Key{to_string(run.rule), run.rho, run.lambda_w, spec}];
            ReportRow& g = acc.row;
            g.rule = to_string(run.rule);
            g.rho = run.rho;
            g.lambda_w = run.lambda_w;
            g.spec = spec;
            ++g.runs;
            g.images += r.images;
            g.holds += r.holds;
            g.violated += r.violated;
            g.unknown += r.unknown;
            g.keypoints_total += r.images * keypoints;
            g.keypoints_correct += r.keypoints_correct;
            g.keypoints_correct_and_verified += r.keypoints_correct_and_verified;
            acc.accuracies.push_back(static_cast<double>(r.holds) / static_cast<double>(r.images));
            acc.time_sum += time_sum[spec];
            acc.parameter_sum += parameters;
        }
    }
    std::vector<ReportRow> rows;
    for (auto& [key, acc] : groups) {
        ReportRow r = acc.row;
        double s = 0.0;
        for (double a : acc.accuracies) s += a;
        r.accuracy = s / static_cast<double>(acc.accuracies.size());
        r.accuracy_min = *std::min_element(acc.accuracies.begin(), acc.accuracies.end());
        r.accuracy_max = *std::max_element(acc.accuracies.begin(), acc.accuracies.end());
        r.mean_time = acc.time_sum / static_cast<double>(r.images);
        r.parameters = acc.parameter_sum / static_cast<double>(r.runs);
        rows.push_back(r);
    }
    return rows;
}

namespace {

std::vector<std::string> spec_columns(const std::vector<ReportRow>& rows) {
    // Brightness before contrast, then by radius.
    std::vector<std::pair<std::string, double>> specs;
    for (const ReportRow& r : rows) {
        const auto at = r.spec.find('@');
        const double eps = at == std::string::npos ? 0.0 : std::stod(r.spec.substr(at + 1));
        if (std::none_of(specs.begin(), specs.end(), [&](const auto& s) { return s.first == r.spec; }))
            specs.push_back({r.spec, eps});
    }
    std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) {
        const std::string ka = a.first.substr(0, a.first.find('@'));
        const std::string kb = b.first.substr(0, b.first.find('@'));
        if (ka != kb) return ka < kb;
        return a.second < b.second;
    });
    std::vector<std::string> out;
    for (const auto& s : specs) out.push_back(s.first);
    return out;
}

using RowFilter = bool (*)(const ReportRow&);

/// One row per (rule, rho, lambda_w) passing `keep`, one accuracy column per spec.
std::string pivot(const std::vector<ReportRow>& rows, RowFilter keep) {
    const std::vector<std::string> specs = spec_columns(rows);
    std::string out = "rule,rho,lambda_w";
    for (const std::string& s : specs) out += "," + s;
    out += '\n';
    std::map<std::tuple<std::string, double, double>, std::map<std::string, double>> table;
    for (const ReportRow& r : rows)
        if (keep(r)) table[{r.rule, r.rho, r.lambda_w}][r.spec] = r.accuracy;
    for (const auto& [key, cells] : table) {
        out += std::get<0>(key) + "," + short_fmt(std::get<1>(key)) + "," + short_fmt(std::get<2>(key));
        for (const std::string& s : specs) {
            const auto it = cells.find(s);
            out += "," + (it == cells.end() ? std::string() : fmt(it->second));
        }
        out += '\n';
    }
    return out;
}

}  // namespace

void write_report(const std::vector<ReportRow>& rows, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::string csv =
        "rule,rho,lambda_w,spec,runs,images,holds,violated,unknown,verification_accuracy,accuracy_min,accuracy_max,"
        "keypoints_total,keypoints_correct,keypoints_correct_and_verified,mean_time,parameters\n";
    for (const ReportRow& r : rows) {
        csv += r.rule + "," + short_fmt(r.rho) + "," + short_fmt(r.lambda_w) + "," + r.spec + "," +
               std::to_string(r.runs) + "," + std::to_string(r.images) + "," + std::to_string(r.holds) + "," +
               std::to_string(r.violated) + "," + std::to_string(r.unknown) + "," + fmt(r.accuracy) + "," +
               fmt(r.accuracy_min) + "," + fmt(r.accuracy_max) + "," + std::to_string(r.keypoints_total) + "," +
               std::to_string(r.keypoints_correct) + "," + std::to_string(r.keypoints_correct_and_verified) + "," +
               fmt(r.mean_time) + "," + fmt(r.parameters) + "\n";
    }
    write_text(out_dir / "report.csv", csv);
    // Pruning rules at matched ratio, the unpruned baseline included.
    write_text(out_dir / "table1_pruning.csv", pivot(rows, [](const ReportRow&) { return true; }));
    // Ratio ablation of the USN-guided rule; the unpruned run is the rho = 0 row.
    write_text(out_dir / "table2_ratio.csv",
               pivot(rows, [](const ReportRow& r) { return r.rule == "usn" || r.rule == "none"; }));
    // Wasserstein weight ablation of the USN-guided rule.
    write_text(out_dir / "table3_lambda.csv", pivot(rows, [](const ReportRow& r) { return r.rule == "usn"; }));
}

SweepResult run_sweep(const ExperimentConfig& c, const fs::path& out_dir, std::size_t jobs) {
    validate(c);
    jobs = std::max<std::size_t>(1, jobs);
    fs::create_directories(out_dir);
    write_text(out_dir / "config.json", config_to_json(c).dump(2) + "\n");
    const Dataset data = ensure_dataset(c, out_dir / "dataset");
    const std::vector<RunSpec> runs = sweep_runs(c.sweep);

    std::vector<std::optional<RunArtifacts>> trained(runs.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto worker = [&] {
        for (std::size_t i = next++; i < runs.size(); i = next++) {
            try {
                trained[i].emplace(train_run(c, runs[i], data, out_dir / "runs"));
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::min(jobs, runs.size()); ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    SweepResult result;
    for (std::optional<RunArtifacts>& t : trained) {
        CampaignReport report = certify_run(c, t->dir, data, jobs);
        std::vector<UsnStats> usn = visualize_run(c, t->dir, data);
        result.runs.push_back({std::move(*t), std::move(report), std::move(usn)});
    }
    result.report = collect_report(out_dir / "runs");
    write_report(result.report, out_dir / "report");

    ordered_json manifest = {{"config", "config.json"}, {"dataset", "dataset"}, {"report", "report"}};
    ordered_json list = ordered_json::array();
    for (const SweepRun& r : result.runs) {
        const std::string dir = "runs/" + r.artifacts.run.id();
        list.push_back({{"id", r.artifacts.run.id()},
                        {"rule", to_string(r.artifacts.run.rule)},
                        {"rho", r.artifacts.run.rho},
                        {"lambda_w", r.artifacts.run.lambda_w},
                        {"seed", r.artifacts.run.seed},
                        {"checkpoint", dir + "/model.json"},
                        {"log", dir + "/log.csv"},
                        {"verdicts", dir + "/verdicts.csv"},
                        {"summary", dir + "/summary.json"},
                        {"usn", dir + "/usn.csv"}});
    }
    manifest["runs"] = list;
    write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
    return result;
}

}  // namespace usn
