// SPDX-License-Identifier: Apache-2.0
//
// Gaussian-mixture output head over 2-D positions with diagonal covariance.
//
// Raw network outputs for K mixtures are laid out as
//
//   [ K weight logits | 2K means (mu_k,x, mu_k,y) | 2K variance pre-activations ]
//
// Weights go through a softmax, means are identity, variances through
// softplus plus a small floor.

#ifndef UQLOC_MDN_HPP
#define UQLOC_MDN_HPP

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace uqloc::mdn {

inline constexpr double kVarianceFloor = 1e-6;

constexpr Eigen::Index raw_size(Eigen::Index mixtures) { return 5 * mixtures; }

template <typename Scalar>
struct MdnOutput
{
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> weights; // K, on the simplex
    Eigen::Matrix<Scalar, 2, Eigen::Dynamic> means;     // 2 x K
    Eigen::Matrix<Scalar, 2, Eigen::Dynamic> variances; // 2 x K

    Eigen::Index mixtures() const { return weights.size(); }
};

template <typename Scalar>
struct MdnPrediction
{
    Eigen::Matrix<Scalar, 2, 1> mean;
    Eigen::Matrix<Scalar, 2, 1> data_variance;
    Eigen::Index mixture = 0;
    Scalar weight = 0;
};

template <typename Scalar>
Scalar softplus(Scalar z)
{
    using std::exp;
    using std::log1p;
    return z > Scalar(0) ? z + log1p(exp(-z)) : log1p(exp(z));
}

template <typename Scalar>
Scalar sigmoid(Scalar z)
{
    using std::exp;
    if (z >= Scalar(0))
        return Scalar(1) / (Scalar(1) + exp(-z));
    const Scalar e = exp(z);
    return e / (Scalar(1) + e);
}

template <typename Derived>
MdnOutput<typename Derived::Scalar> constrain(const Eigen::MatrixBase<Derived> &raw,
                                              typename Derived::Scalar floor = kVarianceFloor)
{
    using Scalar = typename Derived::Scalar;
    using std::exp;
    using std::isfinite;
    if (raw.cols() != 1 || raw.size() % 5 != 0 || raw.size() == 0)
        throw std::invalid_argument("mdn::constrain: raw output must be a 5K vector");
    if (!raw.allFinite())
        throw std::domain_error("mdn::constrain: non-finite raw output");
    const Eigen::Index k = raw.size() / 5;

    MdnOutput<Scalar> out;
    const auto logits = raw.head(k);
    const Scalar top = logits.maxCoeff();
    out.weights = (logits.array() - top).exp().matrix();
    out.weights /= out.weights.sum();
    out.means.resize(2, k);
    out.variances.resize(2, k);
    for (Eigen::Index m = 0; m < k; ++m) {
        for (int c = 0; c < 2; ++c) {
            out.means(c, m) = raw(k + 2 * m + c);
            out.variances(c, m) = softplus(raw(3 * k + 2 * m + c)) + floor;
        }
    }
    return out;
}

// log N(x; mu, diag(var)) in two dimensions.
template <typename Scalar>
Scalar log_gaussian(const Eigen::Matrix<Scalar, 2, 1> &x, const Eigen::Matrix<Scalar, 2, 1> &mu,
                    const Eigen::Matrix<Scalar, 2, 1> &var)
{
    using std::log;
    const Scalar two_pi = Scalar(2) * std::numbers::pi_v<Scalar>;
    Scalar s = 0;
    for (int c = 0; c < 2; ++c) {
        const Scalar d = x(c) - mu(c);
        s -= log(two_pi * var(c)) / Scalar(2) + d * d / (Scalar(2) * var(c));
    }
    return s;
}

template <typename Scalar>
Scalar nll_loss(const MdnOutput<Scalar> &out, const Eigen::Matrix<Scalar, 2, 1> &target)
{
    using std::exp;
    using std::log;
    const Eigen::Index k = out.mixtures();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> log_terms(k);
    for (Eigen::Index m = 0; m < k; ++m)
        log_terms(m) = log(out.weights(m)) +
                       log_gaussian<Scalar>(target, out.means.col(m), out.variances.col(m));
    const Scalar top = log_terms.maxCoeff();
    if (top == -std::numeric_limits<Scalar>::infinity())
        return std::numeric_limits<Scalar>::infinity();
    return -(top + log((log_terms.array() - top).exp().sum()));
}

// Highest-weight mixture; ties go to the lowest index.
template <typename Scalar>
MdnPrediction<Scalar> predict(const MdnOutput<Scalar> &out)
{
    Eigen::Index best = 0;
    for (Eigen::Index m = 1; m < out.mixtures(); ++m)
        if (out.weights(m) > out.weights(best))
            best = m;
    MdnPrediction<Scalar> p;
    p.mixture = best;
    p.weight = out.weights(best);
    p.mean = out.means.col(best);
    p.data_variance = out.variances.col(best);
    return p;
}

// Mean NLL over the columns of `raw` (5K x B) against `targets` (2 x B).
// When `grad` is non-null it receives d(mean NLL)/d(raw), same shape as raw.
double batch_nll(const Eigen::MatrixXd &raw, const Eigen::MatrixXd &targets, Eigen::MatrixXd *grad,
                 double floor = kVarianceFloor);

} // namespace uqloc::mdn

#endif
