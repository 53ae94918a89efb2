// SPDX-License-Identifier: Apache-2.0

#include "uqloc/uncertainty.hpp"

#include "uqloc/keyvalue.hpp"
#include "uqloc/random.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <thread>

namespace uqloc {

std::string to_string(Method m)
{
    return m == Method::MCD ? "MCD" : "DEN";
}

Method method_from_string(const std::string &s)
{
    if (s == "MCD" || s == "mcd")
        return Method::MCD;
    if (s == "DEN" || s == "den")
        return Method::DEN;
    throw std::invalid_argument("unknown method '" + s + "' (expected MCD or DEN)");
}

PositionEstimate aggregate(std::span<const Prediction> passes, const NormalizationState &normalization,
                           Method method)
{
    if (passes.empty())
        throw std::invalid_argument("aggregate: need at least one pass");
    const double inv_s = 1.0 / static_cast<double>(passes.size());
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    Eigen::Vector2d data = Eigen::Vector2d::Zero();
    bool switched = false;
    for (const auto &p : passes) {
        mean += p.mean;
        data += p.data_variance;
        switched |= p.mixture != passes.front().mixture;
    }
    mean *= inv_s;
    data *= inv_s;
    Eigen::Vector2d model = Eigen::Vector2d::Zero();
    for (const auto &p : passes)
        model += (p.mean - mean).cwiseAbs2();
    model *= inv_s;

    PositionEstimate e;
    e.mean = denormalize_position(mean, normalization);
    e.data_variance = denormalize_variance(data, normalization);
    e.model_variance = denormalize_variance(model, normalization);
    e.total_variance = e.data_variance + e.model_variance;
    e.uncertainty_scalar = e.total_variance.sum();
    e.s_used = static_cast<int>(passes.size());
    e.method = method;
    e.mixture_switched = switched;
    return e;
}

std::vector<Prediction> predict_columns(const Eigen::MatrixXd &raw)
{
    std::vector<Prediction> out;
    out.reserve(static_cast<std::size_t>(raw.cols()));
    for (Eigen::Index c = 0; c < raw.cols(); ++c)
        out.push_back(mdn::predict(mdn::constrain(raw.col(c))));
    return out;
}

std::uint64_t mask_seed_for(std::uint64_t mask_seed, std::int64_t location_id, int pass)
{
    return derive_seed(mask_seed, "mcd", {static_cast<std::uint64_t>(location_id), static_cast<std::uint64_t>(pass)});
}

std::vector<std::vector<Prediction>> mc_dropout_passes(const net::ModelParams &params, const Eigen::MatrixXd &inputs,
                                                       std::span<const std::int64_t> location_ids, int s,
                                                       std::uint64_t mask_seed)
{
    if (s < 1)
        throw std::invalid_argument("mc_dropout: number of passes must be at least 1");
    if (static_cast<Eigen::Index>(location_ids.size()) != inputs.cols())
        throw std::invalid_argument("mc_dropout: one location id per input column required");
    const auto n = static_cast<std::size_t>(inputs.cols());
    std::vector<std::vector<Prediction>> out(n);
    std::vector<std::uint64_t> seeds(n);
    for (int pass = 0; pass < s; ++pass) {
        for (std::size_t i = 0; i < n; ++i)
            seeds[i] = mask_seed_for(mask_seed, location_ids[i], pass);
        const auto preds = predict_columns(net::forward(params, inputs, net::Mode::mc_dropout, seeds));
        for (std::size_t i = 0; i < n; ++i)
            out[i].push_back(preds[i]);
    }
    return out;
}

PositionEstimate mc_dropout_estimate(const net::ModelParams &params, const CsiSample &sample, int s,
                                     std::uint64_t mask_seed, const NormalizationState &normalization)
{
    const Eigen::MatrixXd x = sample.features / normalization.delta_norm;
    const std::int64_t id = sample.location_id;
    const auto passes = mc_dropout_passes(params, x, std::span<const std::int64_t>(&id, 1), s, mask_seed);
    return aggregate(passes.front(), normalization, Method::MCD);
}

void EnsembleHandle::validate() const
{
    if (members.empty())
        throw std::invalid_argument("ensemble: no members");
    const auto &ref = members.front();
    for (std::size_t m = 1; m < members.size(); ++m) {
        const auto &p = members[m];
        bool same = p.layers.size() == ref.layers.size();
        for (std::size_t l = 0; same && l < p.layers.size(); ++l)
            same = p.layers[l].weight.rows() == ref.layers[l].weight.rows() &&
                   p.layers[l].weight.cols() == ref.layers[l].weight.cols();
        if (!same)
            throw std::invalid_argument("ensemble: member " + std::to_string(m) +
                                        " has a different architecture than member 0");
    }
}

std::vector<std::vector<Prediction>> ensemble_passes(const EnsembleHandle &handle, const Eigen::MatrixXd &inputs,
                                                     int parallel)
{
    handle.validate();
    const auto n = static_cast<std::size_t>(inputs.cols());
    const int s = static_cast<int>(handle.members.size());
    std::vector<std::vector<Prediction>> per_member(static_cast<std::size_t>(s));
    parallel_for(s, parallel, [&](int m) {
        per_member[static_cast<std::size_t>(m)] =
            predict_columns(net::forward(handle.members[static_cast<std::size_t>(m)], inputs, net::Mode::eval));
    });
    std::vector<std::vector<Prediction>> out(n);
    for (std::size_t i = 0; i < n; ++i)
        for (int m = 0; m < s; ++m)
            out[i].push_back(per_member[static_cast<std::size_t>(m)][i]);
    return out;
}

PositionEstimate ensemble_estimate(const EnsembleHandle &handle, const CsiSample &sample)
{
    const Eigen::MatrixXd x = sample.features / handle.normalization.delta_norm;
    const auto passes = ensemble_passes(handle, x);
    return aggregate(passes.front(), handle.normalization, Method::DEN);
}

EnsembleTraining train_ensemble(const net::MlpConfig &model_cfg, const net::TrainConfig &train_cfg,
                                const TensorSet &train_set, const TensorSet &val_set,
                                const NormalizationState &normalization, int s, std::uint64_t base_seed,
                                int parallel)
{
    if (s < 1)
        throw std::invalid_argument("train_ensemble: ensemble size must be at least 1");
    EnsembleTraining out;
    out.handle.normalization = normalization;
    out.handle.members.resize(static_cast<std::size_t>(s));
    out.histories.resize(static_cast<std::size_t>(s));

    const net::LossFn loss = [](const Eigen::MatrixXd &raw, const Eigen::MatrixXd &y, Eigen::MatrixXd *g) {
        return mdn::batch_nll(raw, y, g);
    };
    parallel_for(s, parallel, [&](int m) {
        net::MlpConfig mc = model_cfg;
        mc.dropout_rate = 0.0;
        mc.seed = base_seed + static_cast<std::uint64_t>(m);
        net::TrainConfig tc = train_cfg;
        tc.seed = base_seed + static_cast<std::uint64_t>(m);
        try {
            auto r = net::train(mc, tc, train_set, val_set, loss);
            out.handle.members[static_cast<std::size_t>(m)] = std::move(r.params);
            out.histories[static_cast<std::size_t>(m)] = std::move(r.history);
        } catch (const std::exception &e) {
            throw net::TrainingError("ensemble member " + std::to_string(m) + ": " + e.what());
        }
    });
    return out;
}

namespace {

std::string member_name(std::size_t m)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "member_%03zu.manifest", m);
    return buf;
}

} // namespace

void save_ensemble(const std::filesystem::path &dir, const EnsembleHandle &handle)
{
    handle.validate();
    std::filesystem::create_directories(dir);
    std::string members;
    for (std::size_t m = 0; m < handle.members.size(); ++m) {
        net::save_checkpoint(dir / member_name(m), handle.members[m], handle.normalization);
        if (m)
            members += ", ";
        members += member_name(m);
    }
    save_normalization(dir / "normalization.txt", handle.normalization);
    KeyValueWriter w;
    w.put("format", "uqloc-ensemble v1")
        .put("size", static_cast<std::int64_t>(handle.members.size()))
        .put("members", std::string_view(members))
        .put("normalization", "normalization.txt");
    w.save(dir / "ensemble.manifest");
}

EnsembleHandle load_ensemble(const std::filesystem::path &manifest, int max_members)
{
    const auto kv = KeyValueFile::load(manifest);
    if (kv.text("format") != "uqloc-ensemble v1")
        throw ConfigError("format", kv.source() + ": unsupported ensemble format");
    EnsembleHandle h;
    h.normalization = load_normalization(kv.path("normalization"));
    std::string list = kv.text("members");
    std::size_t start = 0;
    while (start <= list.size()) {
        if (max_members >= 0 && static_cast<int>(h.members.size()) >= max_members)
            break;
        auto end = list.find(',', start);
        if (end == std::string::npos)
            end = list.size();
        std::string name = list.substr(start, end - start);
        name.erase(0, name.find_first_not_of(' '));
        name.erase(name.find_last_not_of(' ') + 1);
        if (!name.empty())
            h.members.push_back(net::load_checkpoint(kv.base_dir() / name).params);
        start = end + 1;
    }
    if (max_members >= 0 && static_cast<int>(h.members.size()) < max_members)
        throw std::runtime_error(manifest.string() + ": ensemble has " + std::to_string(h.members.size()) +
                                 " members, " + std::to_string(max_members) + " requested");
    h.validate();
    return h;
}

void parallel_for(int count, int workers, const std::function<void(int)> &job)
{
    workers = std::max(1, std::min(workers, count));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(count, 0)));
    if (workers == 1) {
        for (int i = 0; i < count; ++i) {
            try {
                job(i);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
                break;
            }
        }
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (int i = next++; i < count; i = next++) {
                    try {
                        job(i);
                    } catch (...) {
                        errors[static_cast<std::size_t>(i)] = std::current_exception();
                    }
                }
            });
        for (auto &t : pool)
            t.join();
    }
    for (auto &e : errors)
        if (e)
            std::rethrow_exception(e);
}

} // namespace uqloc
