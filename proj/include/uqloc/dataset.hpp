// SPDX-License-Identifier: Apache-2.0
//
// Input/target scaling, deterministic splits and the out-of-set holdout.

#ifndef UQLOC_DATASET_HPP
#define UQLOC_DATASET_HPP

#include "uqloc/scene.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace uqloc {

class KeyValueFile;

struct NormalizationState
{
    double delta_norm = 1.0;
    Eigen::Vector2d target_min = Eigen::Vector2d::Zero();
    Eigen::Vector2d target_max = Eigen::Vector2d::Ones();

    // Meters per scaled unit, per coordinate.
    Eigen::Vector2d slope() const { return target_max - target_min; }
};

NormalizationState fit_normalizer(std::span<const CsiSample> train);

Eigen::Vector2d normalize_position(const Eigen::Vector2d &position, const NormalizationState &state);
Eigen::Vector2d denormalize_position(const Eigen::Vector2d &scaled, const NormalizationState &state);
// Scaled units^2 to meters^2.
Eigen::Vector2d denormalize_variance(const Eigen::Vector2d &scaled_var, const NormalizationState &state);

CsiSample normalize(const CsiSample &sample, const NormalizationState &state);

std::string normalization_to_text(const NormalizationState &state);
NormalizationState parse_normalization(const KeyValueFile &kv);
void save_normalization(const std::filesystem::path &path, const NormalizationState &state);
NormalizationState load_normalization(const std::filesystem::path &path);

struct Rect
{
    Eigen::Vector2d lower;
    Eigen::Vector2d upper;

    bool contains(const Eigen::Vector2d &p) const
    {
        return (p.array() >= lower.array()).all() && (p.array() <= upper.array()).all();
    }
};

struct SplitSpec
{
    double train_fraction = 0.7;
    double val_fraction = 0.15;
    double test_fraction = 0.15;
    std::uint64_t shuffle_seed = 0;
    std::optional<Rect> out_of_set_region;

    void validate() const;
};

struct DataSplit
{
    std::vector<CsiSample> train;
    std::vector<CsiSample> val;
    std::vector<CsiSample> test;
    // Parallel to `test`: sample lies in the held-out region.
    std::vector<bool> test_out_of_set;
};

DataSplit split(std::span<const CsiSample> data, const SplitSpec &spec);

// Column-per-sample matrices in scaled units, ready for the network.
struct TensorSet
{
    Eigen::MatrixXd inputs;  // 2M x N
    Eigen::MatrixXd targets; // 2 x N
};

TensorSet make_tensors(std::span<const CsiSample> samples, const NormalizationState &state);

} // namespace uqloc

#endif
