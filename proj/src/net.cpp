// SPDX-License-Identifier: Apache-2.0

#include "uqloc/net.hpp"

#include "uqloc/keyvalue.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace uqloc::net {

void MlpConfig::validate() const
{
    if (input_dim < 1 || output_units < 1)
        throw std::invalid_argument("MlpConfig: input_dim and output_units must be positive");
    if (output_units % 5 != 0)
        throw std::invalid_argument("MlpConfig: output_units must be 5K for a K-mixture head");
    for (auto w : hidden_widths)
        if (w < 1)
            throw std::invalid_argument("MlpConfig: hidden widths must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw std::invalid_argument("MlpConfig: dropout_rate must lie in [0, 1)");
    for (int l : dropout_layers)
        if (l < 1 || l > static_cast<int>(hidden_widths.size()))
            throw std::invalid_argument("MlpConfig: dropout layer index out of range");
    if (!(init_std > 0))
        throw std::invalid_argument("MlpConfig: init_std must be positive");
}

bool MlpConfig::dropout_after(int hidden_layer) const
{
    return dropout_rate > 0.0 &&
           std::find(dropout_layers.begin(), dropout_layers.end(), hidden_layer) != dropout_layers.end();
}

void TrainConfig::validate() const
{
    if (!(learning_rate > 0))
        throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    if (batch_size < 1)
        throw std::invalid_argument("TrainConfig: batch_size must be at least 1");
    if (max_epochs < 1 || patience < 0 || patience > max_epochs)
        throw std::invalid_argument("TrainConfig: need max_epochs >= 1 and 0 <= patience <= max_epochs");
    if (clip_value && !(*clip_value > 0))
        throw std::invalid_argument("TrainConfig: clip_value must be positive");
}

ModelParams init_params(const MlpConfig &cfg)
{
    cfg.validate();
    ModelParams params;
    params.config = cfg;
    Rng rng(derive_seed(cfg.seed, "init"));
    std::normal_distribution<double> normal(0.0, cfg.init_std);

    Eigen::Index fan_in = cfg.input_dim;
    std::vector<Eigen::Index> widths = cfg.hidden_widths;
    widths.push_back(cfg.output_units);
    for (auto fan_out : widths) {
        DenseLayer<double> layer;
        layer.weight.resize(fan_out, fan_in);
        for (Eigen::Index r = 0; r < fan_out; ++r)
            for (Eigen::Index c = 0; c < fan_in; ++c)
                layer.weight(r, c) = normal(rng);
        layer.bias = Eigen::VectorXd::Zero(fan_out);
        params.layers.push_back(std::move(layer));
        fan_in = fan_out;
    }
    return params;
}

LossAndGradients backward(const ModelParams &params, const Eigen::MatrixXd &batch, const Eigen::MatrixXd &targets,
                          const LossFn &loss_fn, Mode mode, std::span<const std::uint64_t> column_seeds)
{
    const auto cache = forward_cached(params, batch, mode, column_seeds);
    Eigen::MatrixXd grad_out;
    LossAndGradients out;
    out.loss = loss_fn(cache.output, targets, &grad_out);
    if (!std::isfinite(out.loss))
        throw TrainingError("non-finite loss");
    out.grads = backward_from(params, cache, grad_out);
    return out;
}

void clip_gradients(Gradients &grads, double clip_value)
{
    if (!(clip_value > 0))
        throw std::invalid_argument("clip_gradients: clip_value must be positive");
    for (auto &l : grads.layers) {
        l.weight = l.weight.cwiseMax(-clip_value).cwiseMin(clip_value);
        l.bias = l.bias.cwiseMax(-clip_value).cwiseMin(clip_value);
    }
}

AdamState AdamState::for_params(const ModelParams &params)
{
    return {params.zeros_like(), params.zeros_like()};
}

namespace {

template <typename Derived, typename GradDerived, typename MomentDerived>
void adam_update(Eigen::MatrixBase<Derived> &param, const Eigen::MatrixBase<GradDerived> &grad,
                 Eigen::MatrixBase<MomentDerived> &m, Eigen::MatrixBase<MomentDerived> &v, const TrainConfig &cfg,
                 double correction1, double correction2)
{
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad;
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad.cwiseAbs2();
    param -= (cfg.learning_rate * (m.array() / correction1) /
              ((v.array() / correction2).sqrt() + cfg.adam_eps))
                 .matrix();
}

} // namespace

void adam_step(ModelParams &params, const Gradients &grads, const TrainConfig &cfg, AdamState &state,
               long step_index)
{
    if (step_index < 1)
        throw std::invalid_argument("adam_step: step_index must be >= 1");
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step_index));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step_index));
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        adam_update(params.layers[l].weight, grads.layers[l].weight, state.first_moment.layers[l].weight,
                    state.second_moment.layers[l].weight, cfg, c1, c2);
        adam_update(params.layers[l].bias, grads.layers[l].bias, state.first_moment.layers[l].bias,
                    state.second_moment.layers[l].bias, cfg, c1, c2);
    }
}

double evaluate_loss(const ModelParams &params, const TensorSet &data, const LossFn &loss_fn, Eigen::Index chunk)
{
    const Eigen::Index n = data.inputs.cols();
    if (n == 0)
        throw std::invalid_argument("evaluate_loss: empty data");
    double total = 0.0;
    for (Eigen::Index start = 0; start < n; start += chunk) {
        const Eigen::Index len = std::min(chunk, n - start);
        const Eigen::MatrixXd raw = forward(params, Eigen::MatrixXd(data.inputs.middleCols(start, len)), Mode::eval);
        total += loss_fn(raw, data.targets.middleCols(start, len), nullptr) * static_cast<double>(len);
    }
    return total / static_cast<double>(n);
}

TrainResult train(const MlpConfig &model_cfg, const TrainConfig &train_cfg, const TensorSet &train_set,
                  const TensorSet &val_set, const LossFn &loss_fn)
{
    model_cfg.validate();
    train_cfg.validate();
    const Eigen::Index n = train_set.inputs.cols();
    if (n == 0 || val_set.inputs.cols() == 0)
        throw std::invalid_argument("train: training and validation sets must be nonempty");
    if (train_set.inputs.rows() != model_cfg.input_dim || val_set.inputs.rows() != model_cfg.input_dim)
        throw std::invalid_argument("train: feature width does not match input_dim");

    TrainResult result;
    ModelParams params = init_params(model_cfg);
    AdamState adam = AdamState::for_params(params);
    result.params = params;

    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;
    long step = 0;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::vector<std::uint64_t> seeds;

    for (int epoch = 1; epoch <= train_cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        Rng shuffle_rng(derive_seed(train_cfg.seed, "shuffle", {static_cast<std::uint64_t>(epoch)}));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng() % i)]);

        double epoch_loss = 0.0;
        int batch_no = 0;
        for (Eigen::Index start = 0; start < n; start += train_cfg.batch_size, ++batch_no) {
            const Eigen::Index len = std::min(train_cfg.batch_size, n - start);
            const std::vector<Eigen::Index> idx(order.begin() + start, order.begin() + start + len);
            const Eigen::MatrixXd xb = train_set.inputs(Eigen::all, idx);
            const Eigen::MatrixXd yb = train_set.targets(Eigen::all, idx);
            seeds.resize(static_cast<std::size_t>(len));
            for (Eigen::Index c = 0; c < len; ++c)
                seeds[static_cast<std::size_t>(c)] =
                    derive_seed(train_cfg.seed, "dropout",
                                {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(start + c)});

            LossAndGradients lg;
            try {
                lg = backward(params, xb, yb, loss_fn, Mode::train, seeds);
            } catch (const std::exception &e) {
                throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_no) + ": " + e.what());
            }
            if (train_cfg.clip_value)
                clip_gradients(lg.grads, *train_cfg.clip_value);
            adam_step(params, lg.grads, train_cfg, adam, ++step);
            epoch_loss += lg.loss * static_cast<double>(len);
        }

        double val_loss = 0.0;
        try {
            val_loss = evaluate_loss(params, val_set, loss_fn);
        } catch (const std::exception &e) {
            throw TrainingError("validation loss diverged at epoch " + std::to_string(epoch) + ": " + e.what());
        }
        result.history.push_back({epoch, epoch_loss / static_cast<double>(n), val_loss});

        if (val_loss < best_val) {
            best_val = val_loss;
            result.params = params;
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= train_cfg.patience) {
            break;
        }
    }
    return result;
}

void tune_allocator()
{
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 128 << 20);
#endif
}

std::string history_to_csv(const std::vector<EpochRecord> &history)
{
    std::string out = "epoch,train_loss,val_loss\n";
    for (const auto &h : history)
        out += std::to_string(h.epoch) + "," + format_double(h.train_loss) + "," + format_double(h.val_loss) + "\n";
    return out;
}

namespace {

void put_le(std::string &out, double v)
{
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>(bits & 0xff));
        bits >>= 8;
    }
}

double get_le(const unsigned char *p)
{
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i)
        bits = (bits << 8) | p[i];
    return std::bit_cast<double>(bits);
}

} // namespace

void save_checkpoint(const std::filesystem::path &manifest, const ModelParams &params,
                     const NormalizationState &normalization)
{
    const auto &cfg = params.config;
    std::filesystem::path bin = manifest;
    bin.replace_extension(".bin");

    std::string blob;
    blob.reserve(static_cast<std::size_t>(params.parameter_count()) * 8);
    for (const auto &l : params.layers) {
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
                put_le(blob, l.weight(r, c));
        for (Eigen::Index r = 0; r < l.bias.size(); ++r)
            put_le(blob, l.bias(r));
    }
    write_text_file(bin, blob);

    std::vector<std::int64_t> widths(cfg.hidden_widths.begin(), cfg.hidden_widths.end());
    std::vector<std::int64_t> dropout_layers(cfg.dropout_layers.begin(), cfg.dropout_layers.end());
    KeyValueWriter w;
    w.comment("parameters: little-endian float64; per layer the weight (out x in, row-major) then the bias")
        .put("format", "uqloc-checkpoint v1")
        .put("input_dim", std::int64_t{cfg.input_dim})
        .put("hidden_widths", widths)
        .put("output_units", std::int64_t{cfg.output_units})
        .put("dropout_rate", cfg.dropout_rate)
        .put("dropout_layers", dropout_layers)
        .put("init_std", cfg.init_std)
        .put("seed", static_cast<std::int64_t>(cfg.seed))
        .put("param_file", bin.filename().string())
        .put("param_count", std::int64_t{params.parameter_count()})
        .put("delta_norm", normalization.delta_norm)
        .put("target_min", std::vector<double>{normalization.target_min.x(), normalization.target_min.y()})
        .put("target_max", std::vector<double>{normalization.target_max.x(), normalization.target_max.y()});
    w.save(manifest);
}

Checkpoint load_checkpoint(const std::filesystem::path &manifest)
{
    const auto kv = KeyValueFile::load(manifest);
    if (kv.text("format") != "uqloc-checkpoint v1")
        throw ConfigError("format", kv.source() + ": unsupported checkpoint format '" + kv.text("format") + "'");
    MlpConfig cfg;
    cfg.input_dim = kv.integer("input_dim");
    cfg.hidden_widths.clear();
    for (auto w : kv.integers("hidden_widths"))
        cfg.hidden_widths.push_back(w);
    cfg.output_units = kv.integer("output_units");
    cfg.dropout_rate = kv.number("dropout_rate");
    cfg.dropout_layers.clear();
    for (auto l : kv.integers("dropout_layers"))
        cfg.dropout_layers.push_back(static_cast<int>(l));
    cfg.init_std = kv.number("init_std");
    cfg.seed = static_cast<std::uint64_t>(kv.integer("seed"));
    cfg.validate();

    Checkpoint ck;
    ck.normalization = parse_normalization(kv);
    ck.params = init_params(cfg).zeros_like();
    const std::string blob = read_text_file(kv.path("param_file"));
    const auto count = ck.params.parameter_count();
    if (kv.integer("param_count") != count || static_cast<Eigen::Index>(blob.size()) != count * 8)
        throw std::runtime_error(manifest.string() + ": parameter file size does not match the manifest");

    const auto *p = reinterpret_cast<const unsigned char *>(blob.data());
    for (auto &l : ck.params.layers) {
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < l.weight.cols(); ++c, p += 8)
                l.weight(r, c) = get_le(p);
        for (Eigen::Index r = 0; r < l.bias.size(); ++r, p += 8)
            l.bias(r) = get_le(p);
    }
    return ck;
}

} // namespace uqloc::net
