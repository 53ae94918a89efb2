// SPDX-License-Identifier: Apache-2.0
//
// Localization accuracy and uncertainty-quality metrics: RMSE, sparsification
// (confidence vs oracle) curves with their area, and spatial heatmaps.

#ifndef UQLOC_METRICS_HPP
#define UQLOC_METRICS_HPP

#include "uqloc/uncertainty.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace uqloc {

struct EvalRecord
{
    std::int64_t location_id = 0;
    Eigen::Vector2d true_position = Eigen::Vector2d::Zero();
    PositionEstimate estimate;
    double squared_error = 0.0;
    bool los = false;
    bool out_of_set = false;
};

EvalRecord make_record(std::int64_t location_id, const Eigen::Vector2d &true_position,
                       const PositionEstimate &estimate, bool los, bool out_of_set);

double rmse(std::span<const EvalRecord> records);

struct SparsificationCurve
{
    std::vector<double> fractions;
    std::vector<double> rmse_conf; // most uncertain removed first
    std::vector<double> rmse_orac; // largest error removed first
    std::vector<double> alpha;     // rmse_orac - rmse_conf
    double auco = 0.0;             // trapezoidal area of |alpha|
};

// Uniform grid of n_steps + 1 fractions on [0, b_max]; at fraction b the
// first floor(b N) records of each ordering are removed and the RMSE of the
// remainder is reported. Ties break by location id.
SparsificationCurve sparsification(std::span<const EvalRecord> records, double b_max = 0.99, int n_steps = 100);

enum class HeatmapField { rmse, data_var, model_var, total_var };

std::string to_string(HeatmapField f);

struct HeatmapCell
{
    int ix = 0;
    int iy = 0;
    Eigen::Vector2d center = Eigen::Vector2d::Zero();
    double value = 0.0;
    std::size_t count = 0;
};

struct Heatmap
{
    Eigen::Vector2d origin = Eigen::Vector2d::Zero();
    double cell_size = 1.0;
    int nx = 0;
    int ny = 0;
    std::vector<HeatmapCell> cells; // occupied cells only, row-major by (iy, ix)
};

// Variance fields aggregate the per-record trace (x + y) by cell mean.
Heatmap heatmap(std::span<const EvalRecord> records, double cell_size, HeatmapField field);

std::string predictions_to_csv(std::span<const EvalRecord> records);
std::string curve_to_csv(const SparsificationCurve &curve);
std::string heatmap_to_csv(const Heatmap &map);

} // namespace uqloc

#endif
