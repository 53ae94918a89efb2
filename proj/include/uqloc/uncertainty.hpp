// SPDX-License-Identifier: Apache-2.0
//
// Model-uncertainty estimators on top of the mixture head: MC-dropout passes
// of a single network and eval-mode passes of a deep ensemble. Both aggregate
// per-pass highest-weight-mixture predictions into a mean, an averaged data
// variance and the (biased, 1/S) spread of the means.

#ifndef UQLOC_UNCERTAINTY_HPP
#define UQLOC_UNCERTAINTY_HPP

#include "uqloc/dataset.hpp"
#include "uqloc/mdn.hpp"
#include "uqloc/net.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace uqloc {

enum class Method { MCD, DEN };

std::string to_string(Method m);
Method method_from_string(const std::string &s);

using Prediction = mdn::MdnPrediction<double>;

struct PositionEstimate
{
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();            // meters
    Eigen::Vector2d data_variance = Eigen::Vector2d::Zero();   // meters^2
    Eigen::Vector2d model_variance = Eigen::Vector2d::Zero();  // meters^2
    Eigen::Vector2d total_variance = Eigen::Vector2d::Zero();  // meters^2
    int s_used = 0;
    Method method = Method::MCD;
    double uncertainty_scalar = 0.0; // trace of total_variance
    bool mixture_switched = false;   // passes disagreed on the chosen mixture
};

// Aggregates scaled-space pass predictions and converts them to meters.
PositionEstimate aggregate(std::span<const Prediction> passes, const NormalizationState &normalization,
                           Method method);

// Highest-weight-mixture prediction for every column of raw outputs.
std::vector<Prediction> predict_columns(const Eigen::MatrixXd &raw);

std::uint64_t mask_seed_for(std::uint64_t mask_seed, std::int64_t location_id, int pass);

// passes[i][p]: prediction of pass p for sample i. `inputs` are scaled
// features (2M x N); masks depend only on (mask_seed, location id, pass).
std::vector<std::vector<Prediction>> mc_dropout_passes(const net::ModelParams &params, const Eigen::MatrixXd &inputs,
                                                       std::span<const std::int64_t> location_ids, int s,
                                                       std::uint64_t mask_seed);

PositionEstimate mc_dropout_estimate(const net::ModelParams &params, const CsiSample &sample, int s,
                                     std::uint64_t mask_seed, const NormalizationState &normalization);

struct EnsembleHandle
{
    std::vector<net::ModelParams> members;
    NormalizationState normalization;

    // Throws when empty or when members disagree on architecture.
    void validate() const;
};

// passes[i][m]: eval-mode prediction of member m for sample i.
std::vector<std::vector<Prediction>> ensemble_passes(const EnsembleHandle &handle, const Eigen::MatrixXd &inputs,
                                                     int parallel = 1);

PositionEstimate ensemble_estimate(const EnsembleHandle &handle, const CsiSample &sample);

struct EnsembleTraining
{
    EnsembleHandle handle;
    std::vector<std::vector<net::EpochRecord>> histories;
};

// S independent runs with seeds base_seed + member index and dropout off.
// `parallel` workers train members concurrently; results do not depend on it.
EnsembleTraining train_ensemble(const net::MlpConfig &model_cfg, const net::TrainConfig &train_cfg,
                                const TensorSet &train_set, const TensorSet &val_set,
                                const NormalizationState &normalization, int s, std::uint64_t base_seed,
                                int parallel = 1);

// Manifest listing member checkpoints and the shared normalization file.
void save_ensemble(const std::filesystem::path &dir, const EnsembleHandle &handle);
EnsembleHandle load_ensemble(const std::filesystem::path &manifest, int max_members = -1);

// Runs `count` jobs on `workers` threads; rethrows the lowest-index failure.
void parallel_for(int count, int workers, const std::function<void(int)> &job);

} // namespace uqloc

#endif
