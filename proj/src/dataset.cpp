// SPDX-License-Identifier: Apache-2.0

#include "uqloc/dataset.hpp"

#include "uqloc/keyvalue.hpp"
#include "uqloc/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace uqloc {

NormalizationState fit_normalizer(std::span<const CsiSample> train)
{
    if (train.empty())
        throw std::invalid_argument("fit_normalizer: empty training set");
    NormalizationState st;
    st.delta_norm = 0.0;
    st.target_min = train.front().position;
    st.target_max = train.front().position;
    for (const auto &s : train) {
        if (s.features.size() > 0)
            st.delta_norm = std::max(st.delta_norm, s.features.cwiseAbs().maxCoeff());
        st.target_min = st.target_min.cwiseMin(s.position);
        st.target_max = st.target_max.cwiseMax(s.position);
    }
    if (!(st.delta_norm > 0) || !std::isfinite(st.delta_norm))
        throw std::invalid_argument("fit_normalizer: all training features are zero");
    // A degenerate coordinate (single row or column of users) keeps a unit slope.
    for (int c = 0; c < 2; ++c)
        if (!(st.target_max(c) > st.target_min(c)))
            st.target_max(c) = st.target_min(c) + 1.0;
    return st;
}

Eigen::Vector2d normalize_position(const Eigen::Vector2d &position, const NormalizationState &state)
{
    return (position - state.target_min).cwiseQuotient(state.slope());
}

Eigen::Vector2d denormalize_position(const Eigen::Vector2d &scaled, const NormalizationState &state)
{
    return state.target_min + scaled.cwiseProduct(state.slope());
}

Eigen::Vector2d denormalize_variance(const Eigen::Vector2d &scaled_var, const NormalizationState &state)
{
    return scaled_var.cwiseProduct(state.slope().cwiseAbs2());
}

CsiSample normalize(const CsiSample &sample, const NormalizationState &state)
{
    CsiSample out = sample;
    out.features /= state.delta_norm;
    out.position = normalize_position(sample.position, state);
    return out;
}

std::string normalization_to_text(const NormalizationState &state)
{
    KeyValueWriter w;
    w.comment("uqloc normalization v1")
        .put("delta_norm", state.delta_norm)
        .put("target_min", std::vector<double>{state.target_min.x(), state.target_min.y()})
        .put("target_max", std::vector<double>{state.target_max.x(), state.target_max.y()});
    return w.str();
}

NormalizationState parse_normalization(const KeyValueFile &kv)
{
    NormalizationState st;
    st.delta_norm = kv.number("delta_norm");
    const auto lo = kv.numbers("target_min");
    const auto hi = kv.numbers("target_max");
    if (lo.size() != 2 || hi.size() != 2)
        throw ConfigError("target_min", kv.source() + ": target_min/target_max need two entries");
    st.target_min = Eigen::Vector2d(lo[0], lo[1]);
    st.target_max = Eigen::Vector2d(hi[0], hi[1]);
    if (!(st.delta_norm > 0) || !(st.target_max.array() > st.target_min.array()).all())
        throw ConfigError("delta_norm", kv.source() + ": invalid normalization state");
    return st;
}

void save_normalization(const std::filesystem::path &path, const NormalizationState &state)
{
    write_text_file(path, normalization_to_text(state));
}

NormalizationState load_normalization(const std::filesystem::path &path)
{
    return parse_normalization(KeyValueFile::load(path));
}

void SplitSpec::validate() const
{
    for (double f : {train_fraction, val_fraction, test_fraction})
        if (!(f > 0 && f < 1))
            throw std::invalid_argument("SplitSpec: fractions must lie in (0, 1)");
    if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
        throw std::invalid_argument("SplitSpec: fractions must sum to 1");
    if (out_of_set_region && !(out_of_set_region->upper.array() >= out_of_set_region->lower.array()).all())
        throw std::invalid_argument("SplitSpec: out-of-set region has upper < lower");
}

DataSplit split(std::span<const CsiSample> data, const SplitSpec &spec)
{
    spec.validate();
    if (data.empty())
        throw std::invalid_argument("split: empty dataset");

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(spec.shuffle_seed, "split"));
    // Fisher-Yates with our own index draw so the permutation does not depend
    // on the standard library's shuffle implementation.
    for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }

    const auto n = static_cast<double>(data.size());
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * n));
    const auto n_val = std::min(data.size() - n_train, static_cast<std::size_t>(std::llround(spec.val_fraction * n)));

    DataSplit out;
    std::vector<CsiSample> held_out;
    auto in_region = [&](const CsiSample &s) {
        return spec.out_of_set_region && spec.out_of_set_region->contains(s.position);
    };
    for (std::size_t k = 0; k < order.size(); ++k) {
        const CsiSample &s = data[order[k]];
        if (k < n_train + n_val && in_region(s)) {
            held_out.push_back(s);
            continue;
        }
        if (k < n_train)
            out.train.push_back(s);
        else if (k < n_train + n_val)
            out.val.push_back(s);
        else
            out.test.push_back(s);
    }
    for (auto &s : held_out)
        out.test.push_back(std::move(s));
    if (out.train.empty())
        throw std::runtime_error("split: training split is empty after the out-of-set holdout");

    out.test_out_of_set.reserve(out.test.size());
    for (const auto &s : out.test)
        out.test_out_of_set.push_back(in_region(s));
    return out;
}

TensorSet make_tensors(std::span<const CsiSample> samples, const NormalizationState &state)
{
    TensorSet t;
    if (samples.empty())
        return t;
    const Eigen::Index width = samples.front().features.size();
    t.inputs.resize(width, static_cast<Eigen::Index>(samples.size()));
    t.targets.resize(2, static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].features.size() != width)
            throw std::invalid_argument("make_tensors: inconsistent feature width");
        const auto col = static_cast<Eigen::Index>(i);
        t.inputs.col(col) = samples[i].features / state.delta_norm;
        t.targets.col(col) = normalize_position(samples[i].position, state);
    }
    return t;
}

} // namespace uqloc
