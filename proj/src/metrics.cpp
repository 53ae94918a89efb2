// SPDX-License-Identifier: Apache-2.0

#include "uqloc/metrics.hpp"

#include "uqloc/keyvalue.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace uqloc {

EvalRecord make_record(std::int64_t location_id, const Eigen::Vector2d &true_position,
                       const PositionEstimate &estimate, bool los, bool out_of_set)
{
    EvalRecord r;
    r.location_id = location_id;
    r.true_position = true_position;
    r.estimate = estimate;
    r.squared_error = (true_position - estimate.mean).squaredNorm();
    r.los = los;
    r.out_of_set = out_of_set;
    return r;
}

double rmse(std::span<const EvalRecord> records)
{
    if (records.empty())
        throw std::invalid_argument("rmse: no records");
    double sum = 0.0;
    for (const auto &r : records)
        sum += r.squared_error;
    return std::sqrt(sum / static_cast<double>(records.size()));
}

namespace {

// RMSE of the records left after dropping order[0..removed). The remainder is
// summed in ascending order so equal sets give bit-identical results.
double remaining_rmse(std::span<const EvalRecord> records, const std::vector<std::size_t> &order, std::size_t removed,
                      std::vector<double> &scratch)
{
    scratch.clear();
    for (std::size_t i = removed; i < order.size(); ++i)
        scratch.push_back(records[order[i]].squared_error);
    std::sort(scratch.begin(), scratch.end());
    double sum = 0.0;
    for (double v : scratch)
        sum += v;
    return std::sqrt(sum / static_cast<double>(scratch.size()));
}

} // namespace

SparsificationCurve sparsification(std::span<const EvalRecord> records, double b_max, int n_steps)
{
    if (records.empty())
        throw std::invalid_argument("sparsification: no records");
    if (!(b_max >= 0 && b_max < 1) || n_steps < 1)
        throw std::invalid_argument("sparsification: need 0 <= b_max < 1 and n_steps >= 1");

    const std::size_t n = records.size();
    std::vector<std::size_t> conf(n), orac(n);
    std::iota(conf.begin(), conf.end(), std::size_t{0});
    std::iota(orac.begin(), orac.end(), std::size_t{0});
    std::sort(conf.begin(), conf.end(), [&](std::size_t a, std::size_t b) {
        const auto ua = records[a].estimate.uncertainty_scalar;
        const auto ub = records[b].estimate.uncertainty_scalar;
        return ua != ub ? ua > ub : records[a].location_id < records[b].location_id;
    });
    std::sort(orac.begin(), orac.end(), [&](std::size_t a, std::size_t b) {
        const auto ea = records[a].squared_error;
        const auto eb = records[b].squared_error;
        return ea != eb ? ea > eb : records[a].location_id < records[b].location_id;
    });

    SparsificationCurve c;
    std::vector<double> scratch;
    scratch.reserve(n);
    for (int i = 0; i <= n_steps; ++i) {
        const double b = b_max * static_cast<double>(i) / static_cast<double>(n_steps);
        // The small guard keeps exact products such as (1/3) * 3 from flooring to 0.
        auto removed = static_cast<std::size_t>(std::floor(b * static_cast<double>(n) + 1e-9));
        removed = std::min(removed, n - 1);
        c.fractions.push_back(b);
        c.rmse_conf.push_back(remaining_rmse(records, conf, removed, scratch));
        c.rmse_orac.push_back(remaining_rmse(records, orac, removed, scratch));
        c.alpha.push_back(c.rmse_orac.back() - c.rmse_conf.back());
    }
    for (std::size_t i = 1; i < c.fractions.size(); ++i)
        c.auco += 0.5 * (std::abs(c.alpha[i]) + std::abs(c.alpha[i - 1])) * (c.fractions[i] - c.fractions[i - 1]);
    return c;
}

std::string to_string(HeatmapField f)
{
    switch (f) {
    case HeatmapField::rmse:
        return "rmse";
    case HeatmapField::data_var:
        return "data_var";
    case HeatmapField::model_var:
        return "model_var";
    case HeatmapField::total_var:
        return "total_var";
    }
    return "unknown";
}

Heatmap heatmap(std::span<const EvalRecord> records, double cell_size, HeatmapField field)
{
    if (records.empty())
        throw std::invalid_argument("heatmap: no records");
    if (!(cell_size > 0))
        throw std::invalid_argument("heatmap: cell_size must be positive");

    Eigen::Vector2d lo = records.front().true_position;
    Eigen::Vector2d hi = lo;
    for (const auto &r : records) {
        lo = lo.cwiseMin(r.true_position);
        hi = hi.cwiseMax(r.true_position);
    }
    Heatmap map;
    map.origin = lo;
    map.cell_size = cell_size;
    map.nx = static_cast<int>(std::floor((hi.x() - lo.x()) / cell_size)) + 1;
    map.ny = static_cast<int>(std::floor((hi.y() - lo.y()) / cell_size)) + 1;

    struct Acc
    {
        double sum = 0.0;
        std::size_t count = 0;
    };
    std::map<std::pair<int, int>, Acc> acc; // keyed (iy, ix)
    for (const auto &r : records) {
        const int ix = std::clamp(static_cast<int>(std::floor((r.true_position.x() - lo.x()) / cell_size)), 0, map.nx - 1);
        const int iy = std::clamp(static_cast<int>(std::floor((r.true_position.y() - lo.y()) / cell_size)), 0, map.ny - 1);
        double v = 0.0;
        switch (field) {
        case HeatmapField::rmse:
            v = r.squared_error;
            break;
        case HeatmapField::data_var:
            v = r.estimate.data_variance.sum();
            break;
        case HeatmapField::model_var:
            v = r.estimate.model_variance.sum();
            break;
        case HeatmapField::total_var:
            v = r.estimate.total_variance.sum();
            break;
        }
        auto &a = acc[{iy, ix}];
        a.sum += v;
        ++a.count;
    }
    for (const auto &[key, a] : acc) {
        HeatmapCell cell;
        cell.iy = key.first;
        cell.ix = key.second;
        cell.center = lo + cell_size * Eigen::Vector2d(cell.ix + 0.5, cell.iy + 0.5);
        cell.count = a.count;
        const double mean = a.sum / static_cast<double>(a.count);
        cell.value = field == HeatmapField::rmse ? std::sqrt(mean) : mean;
        map.cells.push_back(cell);
    }
    return map;
}

std::string predictions_to_csv(std::span<const EvalRecord> records)
{
    std::string out = "location_id,x_true,y_true,x_est,y_est,var_data_x,var_data_y,var_model_x,var_model_y,"
                      "los_flag,out_of_set_flag\n";
    for (const auto &r : records) {
        const auto &e = r.estimate;
        out += std::to_string(r.location_id);
        for (double v : {r.true_position.x(), r.true_position.y(), e.mean.x(), e.mean.y(), e.data_variance.x(),
                         e.data_variance.y(), e.model_variance.x(), e.model_variance.y()}) {
            out += ',';
            out += format_double(v);
        }
        out += r.los ? ",1" : ",0";
        out += r.out_of_set ? ",1\n" : ",0\n";
    }
    return out;
}

std::string curve_to_csv(const SparsificationCurve &curve)
{
    std::string out = "fraction,rmse_conf,rmse_orac,alpha,rmse_conf_normalized,rmse_orac_normalized\n";
    const double base = curve.rmse_conf.empty() ? 1.0 : curve.rmse_conf.front();
    const double scale = base > 0 ? 1.0 / base : 0.0;
    for (std::size_t i = 0; i < curve.fractions.size(); ++i) {
        out += format_double(curve.fractions[i]) + "," + format_double(curve.rmse_conf[i]) + "," +
               format_double(curve.rmse_orac[i]) + "," + format_double(curve.alpha[i]) + "," +
               format_double(curve.rmse_conf[i] * scale) + "," + format_double(curve.rmse_orac[i] * scale) + "\n";
    }
    return out;
}

std::string heatmap_to_csv(const Heatmap &map)
{
    std::string out = "cell_x,cell_y,value,count\n";
    for (const auto &c : map.cells)
        out += format_double(c.center.x()) + "," + format_double(c.center.y()) + "," + format_double(c.value) + "," +
               std::to_string(c.count) + "\n";
    return out;
}

} // namespace uqloc
