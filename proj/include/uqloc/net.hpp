// SPDX-License-Identifier: Apache-2.0
//
// Feedforward network with ReLU hidden layers, inverted dropout and a linear
// output layer, trained by reverse-mode backpropagation and Adam.
//
// Batches are column-per-sample matrices. Dropout masks are drawn from a
// per-column seed so that a given (sample, pass) always sees the same mask,
// whatever batch or thread it is evaluated in.

#ifndef UQLOC_NET_HPP
#define UQLOC_NET_HPP

#include "uqloc/dataset.hpp"
#include "uqloc/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace uqloc::net {

enum class Mode { train, eval, mc_dropout };

struct MlpConfig
{
    Eigen::Index input_dim = 256;
    std::vector<Eigen::Index> hidden_widths{512, 256, 128, 64};
    Eigen::Index output_units = 15;
    double dropout_rate = 0.0;
    std::vector<int> dropout_layers{1, 2, 3}; // 1-based hidden layer indices
    double init_std = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
    bool dropout_after(int hidden_layer) const;
};

struct TrainConfig
{
    double learning_rate = 1e-3;
    Eigen::Index batch_size = 512;
    int max_epochs = 600;
    int patience = 80;
    std::optional<double> clip_value;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    void validate() const;
};

template <typename Scalar>
struct DenseLayer
{
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> weight; // out x in
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> bias;
};

template <typename Scalar>
struct BasicModelParams
{
    MlpConfig config;
    std::vector<DenseLayer<Scalar>> layers; // hidden layers, then output

    Eigen::Index parameter_count() const
    {
        Eigen::Index n = 0;
        for (const auto &l : layers)
            n += l.weight.size() + l.bias.size();
        return n;
    }

    // Same shapes, all zero.
    BasicModelParams zeros_like() const
    {
        BasicModelParams z;
        z.config = config;
        for (const auto &l : layers)
            z.layers.push_back({decltype(l.weight)::Zero(l.weight.rows(), l.weight.cols()),
                                decltype(l.bias)::Zero(l.bias.size())});
        return z;
    }
};

using ModelParams = BasicModelParams<double>;
using Gradients = BasicModelParams<double>;

ModelParams init_params(const MlpConfig &cfg);

// Per-column dropout masks for one forward pass, already scaled by 1/(1 - rate).
template <typename Scalar>
std::vector<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>
draw_masks(const MlpConfig &cfg, std::span<const std::uint64_t> column_seeds)
{
    const auto hidden = static_cast<int>(cfg.hidden_widths.size());
    const auto cols = static_cast<Eigen::Index>(column_seeds.size());
    std::vector<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> masks(hidden);
    for (int l = 0; l < hidden; ++l)
        if (cfg.dropout_after(l + 1))
            masks[l].resize(cfg.hidden_widths[l], cols);
    const Scalar keep_scale = Scalar(1) / Scalar(1 - cfg.dropout_rate);
    for (Eigen::Index c = 0; c < cols; ++c) {
        Rng rng(column_seeds[static_cast<std::size_t>(c)]);
        for (int l = 0; l < hidden; ++l) {
            if (masks[l].size() == 0)
                continue;
            for (Eigen::Index r = 0; r < masks[l].rows(); ++r)
                masks[l](r, c) = uniform01(rng) >= cfg.dropout_rate ? keep_scale : Scalar(0);
        }
    }
    return masks;
}

template <typename Scalar>
struct ForwardCache
{
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    std::vector<Matrix> inputs; // input of each layer, after dropout
    std::vector<Matrix> relu;   // post-ReLU hidden activations, before dropout
    std::vector<Matrix> masks;  // empty entries where no dropout applied
    Matrix output;
};

template <typename Scalar>
bool uses_dropout(const BasicModelParams<Scalar> &params, Mode mode)
{
    return mode != Mode::eval && params.config.dropout_rate > 0.0;
}

template <typename Scalar>
ForwardCache<Scalar> forward_cached(const BasicModelParams<Scalar> &params,
                                    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &batch, Mode mode,
                                    std::span<const std::uint64_t> column_seeds = {})
{
    const auto &cfg = params.config;
    if (batch.rows() != cfg.input_dim)
        throw std::invalid_argument("net::forward: feature width " + std::to_string(batch.rows()) +
                                    " does not match input_dim " + std::to_string(cfg.input_dim));
    if (params.layers.size() != cfg.hidden_widths.size() + 1)
        throw std::invalid_argument("net::forward: parameter layers do not match config");
    const bool dropout = uses_dropout(params, mode);
    if (dropout && static_cast<Eigen::Index>(column_seeds.size()) != batch.cols())
        throw std::invalid_argument("net::forward: dropout needs one mask seed per column");

    ForwardCache<Scalar> cache;
    if (dropout)
        cache.masks = draw_masks<Scalar>(cfg, column_seeds);
    else
        cache.masks.resize(cfg.hidden_widths.size());

    cache.inputs.push_back(batch);
    const std::size_t hidden = cfg.hidden_widths.size();
    for (std::size_t l = 0; l < hidden; ++l) {
        const auto &layer = params.layers[l];
        typename ForwardCache<Scalar>::Matrix z = layer.weight * cache.inputs.back();
        z.colwise() += layer.bias;
        cache.relu.push_back(z.cwiseMax(Scalar(0)));
        if (cache.masks[l].size() != 0)
            cache.inputs.push_back(cache.relu.back().cwiseProduct(cache.masks[l]));
        else
            cache.inputs.push_back(cache.relu.back());
    }
    const auto &out = params.layers.back();
    cache.output = out.weight * cache.inputs.back();
    cache.output.colwise() += out.bias;
    return cache;
}

// Raw (unconstrained) outputs, output_units x batch.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>
forward(const BasicModelParams<Scalar> &params, const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &batch,
        Mode mode, std::span<const std::uint64_t> column_seeds = {})
{
    return std::move(forward_cached(params, batch, mode, column_seeds).output);
}

// Backpropagates d(loss)/d(output) through a cached forward pass.
template <typename Scalar>
BasicModelParams<Scalar> backward_from(const BasicModelParams<Scalar> &params, const ForwardCache<Scalar> &cache,
                                       const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &grad_output)
{
    using Matrix = typename ForwardCache<Scalar>::Matrix;
    BasicModelParams<Scalar> grads;
    grads.config = params.config;
    grads.layers.resize(params.layers.size());

    Matrix delta = grad_output;
    for (std::size_t l = params.layers.size(); l-- > 0;) {
        grads.layers[l].weight = delta * cache.inputs[l].transpose();
        grads.layers[l].bias = delta.rowwise().sum();
        if (l == 0)
            break;
        Matrix upstream = params.layers[l].weight.transpose() * delta;
        const std::size_t h = l - 1; // hidden layer feeding layer l
        if (cache.masks[h].size() != 0)
            upstream = upstream.cwiseProduct(cache.masks[h]);
        delta = (cache.relu[h].array() > Scalar(0)).select(upstream, Scalar(0));
    }
    return grads;
}

// Loss on raw outputs: returns the mean loss and writes d(mean loss)/d(raw).
using LossFn = std::function<double(const Eigen::MatrixXd &raw, const Eigen::MatrixXd &targets,
                                    Eigen::MatrixXd *grad_raw)>;

struct LossAndGradients
{
    double loss = 0.0;
    Gradients grads;
};

LossAndGradients backward(const ModelParams &params, const Eigen::MatrixXd &batch, const Eigen::MatrixXd &targets,
                          const LossFn &loss_fn, Mode mode = Mode::train,
                          std::span<const std::uint64_t> column_seeds = {});

void clip_gradients(Gradients &grads, double clip_value);

struct AdamState
{
    Gradients first_moment;
    Gradients second_moment;

    static AdamState for_params(const ModelParams &params);
};

// step_index is 1-based and drives the bias correction.
void adam_step(ModelParams &params, const Gradients &grads, const TrainConfig &cfg, AdamState &state,
               long step_index);

struct EpochRecord
{
    int epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult
{
    ModelParams params; // best validation loss
    std::vector<EpochRecord> history;
    int best_epoch = 0;
};

class TrainingError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

TrainResult train(const MlpConfig &model_cfg, const TrainConfig &train_cfg, const TensorSet &train_set,
                  const TensorSet &val_set, const LossFn &loss_fn);

// Mean loss in eval mode, evaluated in chunks.
double evaluate_loss(const ModelParams &params, const TensorSet &data, const LossFn &loss_fn,
                     Eigen::Index chunk = 1024);

std::string history_to_csv(const std::vector<EpochRecord> &history);

// Keeps large training buffers on the heap instead of fresh mappings per batch.
// Call once at startup; no-op outside glibc.
void tune_allocator();

// Checkpoint = text manifest + little-endian float64 parameter file.
struct Checkpoint
{
    ModelParams params;
    NormalizationState normalization;
};

void save_checkpoint(const std::filesystem::path &manifest, const ModelParams &params,
                     const NormalizationState &normalization);
Checkpoint load_checkpoint(const std::filesystem::path &manifest);

} // namespace uqloc::net

#endif
