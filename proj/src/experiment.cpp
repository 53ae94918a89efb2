// SPDX-License-Identifier: Apache-2.0

#include "uqloc/experiment.hpp"

#include "uqloc/keyvalue.hpp"
#include "uqloc/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>

namespace uqloc {

namespace fs = std::filesystem;

namespace {

// Marks a directory as incomplete until the command finishes.
class OutputGuard
{
public:
    OutputGuard(const fs::path &dir, const std::string &command) : marker_(dir / (".incomplete-" + command))
    {
        fs::create_directories(dir);
        write_text_file(marker_, "command did not finish; outputs in this directory are partial\n");
    }
    void commit() { fs::remove(marker_); }

private:
    fs::path marker_;
};

std::optional<double> clip_from(const KeyValueFile &kv, const std::string &key, std::optional<double> fallback)
{
    if (!kv.has(key))
        return fallback;
    const std::string &t = kv.text(key);
    if (t == "none" || t == "off")
        return std::nullopt;
    const double v = kv.number(key);
    if (v <= 0)
        return std::nullopt;
    return v;
}

std::string member_history_name(std::size_t m)
{
    char buf[48];
    std::snprintf(buf, sizeof buf, "history_member_%03zu.csv", m);
    return buf;
}

std::string lower(Method m)
{
    return m == Method::MCD ? "mcd" : "den";
}

net::MlpConfig model_config_for(const ExperimentConfig &cfg, const PreparedData &data)
{
    net::MlpConfig mc = cfg.model;
    mc.input_dim = data.train.inputs.rows();
    mc.output_units = mdn::raw_size(cfg.mixtures);
    return mc;
}

const net::LossFn &mdn_loss()
{
    static const net::LossFn loss = [](const Eigen::MatrixXd &raw, const Eigen::MatrixXd &y, Eigen::MatrixXd *g) {
        return mdn::batch_nll(raw, y, g);
    };
    return loss;
}

} // namespace

void ExperimentConfig::validate() const
{
    if (s_values.empty())
        throw ConfigError("s_values", "s_values must be nonempty");
    for (int s : s_values)
        if (s < 1)
            throw ConfigError("s_values", "every entry of s_values must be at least 1");
    if (mixtures < 1)
        throw ConfigError("mixtures", "mixtures must be at least 1");
    if (!(heatmap_cell > 0))
        throw ConfigError("heatmap_cell", "heatmap_cell must be positive");
    if (parallel < 1)
        throw ConfigError("parallel", "parallel must be at least 1");
    split.validate();
    mcd_train.validate();
    den_train.validate();
}

int ExperimentConfig::max_s() const
{
    return *std::max_element(s_values.begin(), s_values.end());
}

ExperimentConfig default_experiment()
{
    ExperimentConfig cfg;
    cfg.model.dropout_rate = 0.1;
    cfg.mcd_train.max_epochs = 600;
    cfg.mcd_train.patience = 80;
    cfg.den_train.max_epochs = 300;
    cfg.den_train.patience = 30;
    cfg.den_train.clip_value = 1.0;
    return cfg;
}

ExperimentConfig parse_experiment(const KeyValueFile &kv)
{
    ExperimentConfig cfg = default_experiment();
    if (kv.has("dataset"))
        cfg.dataset_file = kv.path("dataset");
    if (kv.has("scene"))
        cfg.scene_file = kv.path("scene");
    else if (!cfg.dataset_file)
        kv.text("scene"); // throws naming the missing key

    cfg.method = method_from_string(kv.text_or("method", "DEN"));
    if (kv.has("s_values")) {
        cfg.s_values.clear();
        for (auto s : kv.integers("s_values"))
            cfg.s_values.push_back(static_cast<int>(s));
    }
    cfg.seed = static_cast<std::uint64_t>(kv.integer_or("seed", 0));

    cfg.split.train_fraction = kv.number_or("train_fraction", cfg.split.train_fraction);
    cfg.split.val_fraction = kv.number_or("val_fraction", cfg.split.val_fraction);
    cfg.split.test_fraction = kv.number_or("test_fraction", cfg.split.test_fraction);
    if (kv.has("oos_region")) {
        const auto r = kv.numbers("oos_region");
        if (r.size() != 4)
            throw ConfigError("oos_region", kv.source() + ": key 'oos_region': expected (x0, y0, x1, y1)");
        cfg.split.out_of_set_region =
            Rect{Eigen::Vector2d(std::min(r[0], r[2]), std::min(r[1], r[3])),
                 Eigen::Vector2d(std::max(r[0], r[2]), std::max(r[1], r[3]))};
    }

    if (kv.has("hidden_widths")) {
        cfg.model.hidden_widths.clear();
        for (auto w : kv.integers("hidden_widths"))
            cfg.model.hidden_widths.push_back(w);
    }
    cfg.mixtures = static_cast<int>(kv.integer_or("mixtures", cfg.mixtures));
    cfg.model.dropout_rate = kv.number_or("dropout_rate", cfg.model.dropout_rate);
    if (kv.has("dropout_layers")) {
        cfg.model.dropout_layers.clear();
        for (auto l : kv.integers("dropout_layers"))
            cfg.model.dropout_layers.push_back(static_cast<int>(l));
    } else {
        // Default layers that a shallower net does not have are dropped.
        const int depth = static_cast<int>(cfg.model.hidden_widths.size());
        std::erase_if(cfg.model.dropout_layers, [depth](int l) { return l > depth; });
    }
    cfg.model.init_std = kv.number_or("init_std", cfg.model.init_std);

    for (auto *tc : {&cfg.mcd_train, &cfg.den_train}) {
        tc->learning_rate = kv.number_or("learning_rate", tc->learning_rate);
        tc->batch_size = kv.integer_or("batch_size", tc->batch_size);
        tc->adam_beta1 = kv.number_or("adam_beta1", tc->adam_beta1);
        tc->adam_beta2 = kv.number_or("adam_beta2", tc->adam_beta2);
        tc->adam_eps = kv.number_or("adam_eps", tc->adam_eps);
    }
    cfg.mcd_train.max_epochs = static_cast<int>(kv.integer_or("mcd_epochs", cfg.mcd_train.max_epochs));
    cfg.mcd_train.patience = static_cast<int>(kv.integer_or("mcd_patience", cfg.mcd_train.patience));
    cfg.mcd_train.clip_value = clip_from(kv, "mcd_clip", cfg.mcd_train.clip_value);
    cfg.den_train.max_epochs = static_cast<int>(kv.integer_or("den_epochs", cfg.den_train.max_epochs));
    cfg.den_train.patience = static_cast<int>(kv.integer_or("den_patience", cfg.den_train.patience));
    cfg.den_train.clip_value = clip_from(kv, "den_clip", cfg.den_train.clip_value);

    cfg.heatmap_cell = kv.number_or("heatmap_cell", cfg.heatmap_cell);
    cfg.b_max = kv.number_or("sparsification_b_max", cfg.b_max);
    cfg.b_steps = static_cast<int>(kv.integer_or("sparsification_steps", cfg.b_steps));
    cfg.parallel = static_cast<int>(kv.integer_or("parallel", cfg.parallel));
    try {
        cfg.validate();
    } catch (const std::invalid_argument &e) {
        throw ConfigError("", kv.source() + ": " + e.what());
    }
    return cfg;
}

ExperimentConfig load_experiment(const fs::path &path)
{
    return parse_experiment(KeyValueFile::load(path));
}

std::vector<CsiSample> load_samples(const ExperimentConfig &cfg, DatasetStats *stats)
{
    if (cfg.dataset_file)
        return read_dataset(*cfg.dataset_file);
    return generate_dataset(load_scene(cfg.scene_file), 1, stats);
}

PreparedData prepare_data(const ExperimentConfig &cfg)
{
    PreparedData d;
    d.samples = load_samples(cfg);
    SplitSpec spec = cfg.split;
    spec.shuffle_seed = cfg.seed;
    d.split = split(d.samples, spec);
    if (d.split.val.empty() || d.split.test.empty())
        throw std::runtime_error("prepare_data: validation and test splits must be nonempty");
    d.normalization = fit_normalizer(d.split.train);
    d.train = make_tensors(d.split.train, d.normalization);
    d.val = make_tensors(d.split.val, d.normalization);
    d.test = make_tensors(d.split.test, d.normalization);
    return d;
}

GenerateSummary cmd_generate(const fs::path &input, const fs::path &out_dir)
{
    const auto kv = KeyValueFile::load(input);
    const SceneSpec scene = kv.has("scene") ? load_scene(kv.path("scene")) : parse_scene(kv);

    OutputGuard guard(out_dir, "generate");
    DatasetStats stats;
    const auto samples = generate_dataset(scene, 1, &stats);
    GenerateSummary s;
    s.samples = samples.size();
    s.los = stats.los_users;
    s.nlos = samples.size() - stats.los_users;
    s.dropped = stats.dropped_users;
    s.dataset_file = out_dir / "dataset.csv";
    write_dataset(s.dataset_file, samples);
    guard.commit();
    return s;
}

TrainSummary train_method(const ExperimentConfig &cfg, Method method, const PreparedData &data, const fs::path &out_dir)
{
    const net::MlpConfig mc = model_config_for(cfg, data);
    TrainSummary summary;
    summary.method = method;
    fs::create_directories(out_dir);
    save_normalization(out_dir / "normalization.txt", data.normalization);

    if (method == Method::MCD) {
        const fs::path dir = out_dir / "mcd";
        fs::create_directories(dir);
        net::MlpConfig m = mc;
        m.seed = derive_seed(cfg.seed, "mcd-model");
        net::TrainConfig tc = cfg.mcd_train;
        tc.seed = m.seed;
        const auto r = net::train(m, tc, data.train, data.val, mdn_loss());
        net::save_checkpoint(dir / "model.manifest", r.params, data.normalization);
        write_text_file(dir / "history.csv", net::history_to_csv(r.history));
        summary.models = 1;
        summary.epochs_run.push_back(static_cast<int>(r.history.size()));
        summary.best_epochs.push_back(r.best_epoch);
    } else {
        const fs::path dir = out_dir / "den";
        const auto r = train_ensemble(mc, cfg.den_train, data.train, data.val, data.normalization, cfg.max_s(),
                                      derive_seed(cfg.seed, "den"), cfg.parallel);
        save_ensemble(dir, r.handle);
        for (std::size_t m = 0; m < r.histories.size(); ++m) {
            write_text_file(dir / member_history_name(m), net::history_to_csv(r.histories[m]));
            summary.epochs_run.push_back(static_cast<int>(r.histories[m].size()));
            int best = 0;
            double best_val = std::numeric_limits<double>::infinity();
            for (const auto &h : r.histories[m])
                if (h.val_loss < best_val) {
                    best_val = h.val_loss;
                    best = h.epoch;
                }
            summary.best_epochs.push_back(best);
        }
        summary.models = static_cast<int>(r.handle.members.size());
    }
    return summary;
}

TrainSummary cmd_train(const ExperimentConfig &cfg, const fs::path &out_dir)
{
    cfg.validate();
    OutputGuard guard(out_dir, "train");
    const PreparedData data = prepare_data(cfg);
    auto summary = train_method(cfg, cfg.method, data, out_dir);
    guard.commit();
    return summary;
}

const SubsetMetrics *SEvaluation::find(const std::string &subset) const
{
    for (const auto &m : subsets)
        if (m.subset == subset)
            return &m;
    return nullptr;
}

const SEvaluation &EvalReport::at(int s) const
{
    for (const auto &e : per_s)
        if (e.s == s)
            return e;
    throw std::out_of_range("EvalReport: no evaluation for S=" + std::to_string(s));
}

namespace {

SubsetMetrics subset_metrics(const std::string &name, const std::vector<EvalRecord> &records,
                             const ExperimentConfig &cfg)
{
    SubsetMetrics m;
    m.subset = name;
    m.count = records.size();
    m.rmse = rmse(records);
    m.curve = sparsification(records, cfg.b_max, cfg.b_steps);
    for (const auto &r : records) {
        m.mean_data_variance += r.estimate.data_variance;
        m.mean_model_variance += r.estimate.model_variance;
    }
    m.mean_data_variance /= static_cast<double>(records.size());
    m.mean_model_variance /= static_cast<double>(records.size());
    return m;
}

std::vector<std::pair<std::string, std::vector<EvalRecord>>> subsets_of(const std::vector<EvalRecord> &records)
{
    std::vector<std::pair<std::string, std::vector<EvalRecord>>> out{
        {"all", records}, {"los", {}}, {"nlos", {}}, {"out_of_set", {}}};
    for (const auto &r : records) {
        (r.los ? out[1] : out[2]).second.push_back(r);
        if (r.out_of_set)
            out[3].second.push_back(r);
    }
    return out;
}

} // namespace

EvalReport evaluate_method(const ExperimentConfig &cfg, Method method, const PreparedData &data,
                           const net::ModelParams *mcd_model, const EnsembleHandle *ensemble)
{
    const int max_s = cfg.max_s();
    const auto &test = data.split.test;
    std::vector<std::int64_t> ids;
    for (const auto &s : test)
        ids.push_back(s.location_id);

    std::vector<std::vector<Prediction>> passes;
    if (method == Method::MCD) {
        if (!mcd_model)
            throw std::invalid_argument("evaluate: MC-dropout model missing");
        passes = mc_dropout_passes(*mcd_model, data.test.inputs, ids, max_s, derive_seed(cfg.seed, "mcd-eval"));
    } else {
        if (!ensemble)
            throw std::invalid_argument("evaluate: ensemble missing");
        if (static_cast<int>(ensemble->members.size()) < max_s)
            throw std::runtime_error("evaluate: ensemble has " + std::to_string(ensemble->members.size()) +
                                     " members but S=" + std::to_string(max_s) + " requested");
        EnsembleHandle used = *ensemble;
        used.members.resize(static_cast<std::size_t>(max_s));
        passes = ensemble_passes(used, data.test.inputs, cfg.parallel);
    }

    EvalReport report;
    report.method = method;
    for (int s : cfg.s_values) {
        SEvaluation ev;
        ev.s = s;
        std::size_t switched = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
            const std::span<const Prediction> prefix(passes[i].data(), static_cast<std::size_t>(s));
            const auto est = aggregate(prefix, data.normalization, method);
            switched += est.mixture_switched;
            ev.records.push_back(make_record(test[i].location_id, test[i].position, est, test[i].los,
                                             data.split.test_out_of_set[i]));
        }
        ev.switch_rate = static_cast<double>(switched) / static_cast<double>(test.size());
        for (const auto &[name, recs] : subsets_of(ev.records))
            if (!recs.empty())
                ev.subsets.push_back(subset_metrics(name, recs, cfg));
        report.per_s.push_back(std::move(ev));
    }
    return report;
}

void write_evaluation(const ExperimentConfig &cfg, const EvalReport &report, const fs::path &dir)
{
    fs::create_directories(dir / "curves");
    fs::create_directories(dir / "heatmaps");
    const std::vector<std::string> names{"all", "los", "nlos", "out_of_set"};
    const double nan = std::numeric_limits<double>::quiet_NaN();

    std::string rmse_table = "s,rmse_all,rmse_los,rmse_nlos,rmse_out_of_set,mean_var_data,mean_var_model,switch_rate\n";
    std::string auco_table = "s,auco_all,auco_los,auco_nlos,auco_out_of_set\n";
    for (const auto &ev : report.per_s) {
        const std::string s = std::to_string(ev.s);
        write_text_file(dir / ("predictions_S" + s + ".csv"), predictions_to_csv(ev.records));
        rmse_table += s;
        auco_table += s;
        for (const auto &name : names) {
            const auto *m = ev.find(name);
            rmse_table += "," + format_double(m ? m->rmse : nan);
            auco_table += "," + format_double(m ? m->curve.auco : nan);
            if (!m)
                continue;
            write_text_file(dir / "curves" / ("curve_S" + s + "_" + name + ".csv"), curve_to_csv(m->curve));
            std::vector<EvalRecord> recs;
            for (const auto &r : ev.records)
                if (name == "all" || (name == "los" && r.los) || (name == "nlos" && !r.los) ||
                    (name == "out_of_set" && r.out_of_set))
                    recs.push_back(r);
            for (auto field : {HeatmapField::rmse, HeatmapField::data_var, HeatmapField::model_var,
                               HeatmapField::total_var})
                write_text_file(dir / "heatmaps" / ("heatmap_S" + s + "_" + name + "_" + to_string(field) + ".csv"),
                                heatmap_to_csv(heatmap(recs, cfg.heatmap_cell, field)));
        }
        const auto *all = ev.find("all");
        rmse_table += "," + format_double(all->mean_data_variance.sum()) + "," +
                      format_double(all->mean_model_variance.sum()) + "," + format_double(ev.switch_rate) + "\n";
        auco_table += "\n";
    }
    write_text_file(dir / "rmse_vs_s.csv", rmse_table);
    write_text_file(dir / "auco_vs_s.csv", auco_table);
}

EvalReport cmd_evaluate(const ExperimentConfig &cfg, const fs::path &out_dir)
{
    cfg.validate();
    const fs::path ckpt = cfg.method == Method::MCD ? out_dir / "mcd" / "model.manifest"
                                                    : out_dir / "den" / "ensemble.manifest";
    if (!fs::exists(ckpt))
        throw std::runtime_error("evaluate: missing checkpoint '" + ckpt.string() + "' (run `train` first)");

    const fs::path eval_dir = out_dir / ("eval_" + lower(cfg.method));
    OutputGuard guard(eval_dir, "evaluate");
    PreparedData data = prepare_data(cfg);
    EvalReport report;
    if (cfg.method == Method::MCD) {
        const auto ck = net::load_checkpoint(ckpt);
        data.normalization = ck.normalization;
        data.test = make_tensors(data.split.test, data.normalization);
        report = evaluate_method(cfg, Method::MCD, data, &ck.params, nullptr);
    } else {
        const auto handle = load_ensemble(ckpt, cfg.max_s());
        data.normalization = handle.normalization;
        data.test = make_tensors(data.split.test, data.normalization);
        report = evaluate_method(cfg, Method::DEN, data, nullptr, &handle);
    }
    write_evaluation(cfg, report, eval_dir);
    guard.commit();
    return report;
}

std::string oos_to_csv(const std::vector<OosRow> &rows)
{
    std::string out = "region,method,component,baseline,holdout\n";
    for (const auto &r : rows)
        out += r.region + "," + to_string(r.method) + "," + r.component + "," + format_double(r.baseline) + "," +
               format_double(r.holdout) + "\n";
    return out;
}

namespace {

// Mean (x + y) variance of the S = max records inside / outside the region.
std::array<double, 3> mean_components(const EvalReport &report, int s, const Rect &region, bool inside)
{
    std::array<double, 3> sum{0, 0, 0};
    std::size_t n = 0;
    for (const auto &r : report.at(s).records) {
        if (region.contains(r.true_position) != inside)
            continue;
        sum[0] += r.estimate.data_variance.sum();
        sum[1] += r.estimate.model_variance.sum();
        sum[2] += r.estimate.total_variance.sum();
        ++n;
    }
    for (auto &v : sum)
        v = n ? v / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
    return sum;
}

struct MethodReports
{
    EvalReport mcd;
    EvalReport den;
};

MethodReports run_both(const ExperimentConfig &cfg, const PreparedData &data, const fs::path &dir)
{
    MethodReports out;
    train_method(cfg, Method::MCD, data, dir);
    train_method(cfg, Method::DEN, data, dir);
    const auto mcd = net::load_checkpoint(dir / "mcd" / "model.manifest");
    const auto den = load_ensemble(dir / "den" / "ensemble.manifest", cfg.max_s());
    out.mcd = evaluate_method(cfg, Method::MCD, data, &mcd.params, nullptr);
    out.den = evaluate_method(cfg, Method::DEN, data, nullptr, &den);
    write_evaluation(cfg, out.mcd, dir / "eval_mcd");
    write_evaluation(cfg, out.den, dir / "eval_den");
    return out;
}

} // namespace

OosReport cmd_oos(const ExperimentConfig &cfg, const fs::path &out_dir)
{
    cfg.validate();
    if (!cfg.split.out_of_set_region)
        throw ConfigError("oos_region", "oos: configuration has no 'oos_region'");
    const Rect region = *cfg.split.out_of_set_region;

    ExperimentConfig baseline_cfg = cfg;
    baseline_cfg.split.out_of_set_region.reset();
    const PreparedData holdout_data = prepare_data(cfg);
    if (std::none_of(holdout_data.split.test_out_of_set.begin(), holdout_data.split.test_out_of_set.end(),
                     [](bool b) { return b; }))
        throw std::runtime_error("oos: the out-of-set region contains no samples");
    const PreparedData baseline_data = prepare_data(baseline_cfg);

    OutputGuard guard(out_dir, "oos");
    OosReport report;
    auto base = run_both(baseline_cfg, baseline_data, out_dir / "baseline");
    auto hold = run_both(cfg, holdout_data, out_dir / "holdout");

    const int s = cfg.max_s();
    const char *components[] = {"data", "model", "total"};
    for (bool inside : {true, false}) {
        for (Method m : {Method::MCD, Method::DEN}) {
            const auto b = mean_components(m == Method::MCD ? base.mcd : base.den, s, region, inside);
            const auto h = mean_components(m == Method::MCD ? hold.mcd : hold.den, s, region, inside);
            for (int c = 0; c < 3; ++c)
                report.rows.push_back({inside ? "in-region" : "out-region", m, components[c], b[c], h[c]});
        }
    }
    write_text_file(out_dir / "oos_comparison.csv", oos_to_csv(report.rows));
    report.baseline_mcd = std::move(base.mcd);
    report.baseline_den = std::move(base.den);
    report.holdout_mcd = std::move(hold.mcd);
    report.holdout_den = std::move(hold.den);
    guard.commit();
    return report;
}

} // namespace uqloc
