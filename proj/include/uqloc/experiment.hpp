// SPDX-License-Identifier: Apache-2.0
//
// End-to-end experiment drivers behind the `uqloc` command line tool.
//
// Every random consumer derives its stream from the single master `seed`:
//
//   split shuffle      derive_seed(seed, "split")
//   MCD network        derive_seed(seed, "mcd-model")   (init, shuffling, masks)
//   DEN members        derive_seed(seed, "den") + member index
//   MC-dropout passes  derive_seed(seed, "mcd-eval")     per (location id, pass)

#ifndef UQLOC_EXPERIMENT_HPP
#define UQLOC_EXPERIMENT_HPP

#include "uqloc/dataset.hpp"
#include "uqloc/metrics.hpp"
#include "uqloc/net.hpp"
#include "uqloc/scene.hpp"
#include "uqloc/uncertainty.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace uqloc {

class KeyValueFile;

struct ExperimentConfig
{
    std::filesystem::path scene_file;
    std::optional<std::filesystem::path> dataset_file;
    SplitSpec split;
    net::MlpConfig model; // input_dim and output_units are filled from the data
    int mixtures = 3;
    net::TrainConfig mcd_train;
    net::TrainConfig den_train;
    Method method = Method::DEN;
    std::vector<int> s_values{1, 2, 4, 8, 16, 32};
    std::uint64_t seed = 0;
    double heatmap_cell = 1.0;
    double b_max = 0.99;
    int b_steps = 100;
    int parallel = 1;

    void validate() const;
    int max_s() const;
};

ExperimentConfig default_experiment();
ExperimentConfig parse_experiment(const KeyValueFile &kv);
ExperimentConfig load_experiment(const std::filesystem::path &path);

struct PreparedData
{
    std::vector<CsiSample> samples;
    DataSplit split;
    NormalizationState normalization;
    TensorSet train;
    TensorSet val;
    TensorSet test;
};

std::vector<CsiSample> load_samples(const ExperimentConfig &cfg, DatasetStats *stats = nullptr);
PreparedData prepare_data(const ExperimentConfig &cfg);

struct GenerateSummary
{
    std::size_t samples = 0;
    std::size_t los = 0;
    std::size_t nlos = 0;
    std::size_t dropped = 0;
    std::filesystem::path dataset_file;
};

// `input` may be a scene file or an experiment config with a `scene` key.
GenerateSummary cmd_generate(const std::filesystem::path &input, const std::filesystem::path &out_dir);

struct TrainSummary
{
    Method method = Method::DEN;
    int models = 0;
    std::vector<int> epochs_run;
    std::vector<int> best_epochs;
};

TrainSummary cmd_train(const ExperimentConfig &cfg, const std::filesystem::path &out_dir);
TrainSummary train_method(const ExperimentConfig &cfg, Method method, const PreparedData &data,
                          const std::filesystem::path &out_dir);

struct SubsetMetrics
{
    std::string subset; // all, los, nlos, out_of_set
    std::size_t count = 0;
    double rmse = 0.0;
    SparsificationCurve curve;
    Eigen::Vector2d mean_data_variance = Eigen::Vector2d::Zero();
    Eigen::Vector2d mean_model_variance = Eigen::Vector2d::Zero();
};

struct SEvaluation
{
    int s = 1;
    std::vector<EvalRecord> records;
    std::vector<SubsetMetrics> subsets; // nonempty subsets only
    double switch_rate = 0.0;

    const SubsetMetrics *find(const std::string &subset) const;
};

struct EvalReport
{
    Method method = Method::DEN;
    std::vector<SEvaluation> per_s;

    const SEvaluation &at(int s) const;
};

// Estimates for the test split at every S, computed from max(S) passes/members
// by prefix. Does not touch the file system.
EvalReport evaluate_method(const ExperimentConfig &cfg, Method method, const PreparedData &data,
                           const net::ModelParams *mcd_model, const EnsembleHandle *ensemble);

void write_evaluation(const ExperimentConfig &cfg, const EvalReport &report, const std::filesystem::path &dir);

EvalReport cmd_evaluate(const ExperimentConfig &cfg, const std::filesystem::path &out_dir);

struct OosRow
{
    std::string region; // in-region, out-region
    Method method = Method::DEN;
    std::string component; // data, model, total
    double baseline = 0.0;
    double holdout = 0.0;
};

struct OosReport
{
    std::vector<OosRow> rows;
    EvalReport baseline_mcd, baseline_den, holdout_mcd, holdout_den;
};

OosReport cmd_oos(const ExperimentConfig &cfg, const std::filesystem::path &out_dir);

std::string oos_to_csv(const std::vector<OosRow> &rows);

} // namespace uqloc

#endif
