// SPDX-License-Identifier: Apache-2.0

#include "uqloc/mdn.hpp"

#include <string>
#include <vector>

namespace uqloc::mdn {

double batch_nll(const Eigen::MatrixXd &raw, const Eigen::MatrixXd &targets, Eigen::MatrixXd *grad, double floor)
{
    if (raw.rows() % 5 != 0 || raw.rows() == 0)
        throw std::invalid_argument("mdn::batch_nll: raw rows must be 5K");
    if (targets.rows() != 2 || targets.cols() != raw.cols() || raw.cols() == 0)
        throw std::invalid_argument("mdn::batch_nll: targets must be 2 x B matching raw");
    if (!raw.allFinite())
        throw std::domain_error("mdn::batch_nll: non-finite network output");

    const Eigen::Index k = raw.rows() / 5;
    const Eigen::Index batch = raw.cols();
    const double inv_batch = 1.0 / static_cast<double>(batch);
    const double log_two_pi = std::log(2.0 * std::numbers::pi);
    if (grad)
        grad->resize(raw.rows(), batch);

    std::vector<double> log_w(k), log_p(k), var(2 * k), resid(2 * k);
    double total = 0.0;
    for (Eigen::Index b = 0; b < batch; ++b) {
        const auto z = raw.col(b);
        double top = z(0);
        for (Eigen::Index m = 1; m < k; ++m)
            top = std::max(top, z(m));
        double denom = 0.0;
        for (Eigen::Index m = 0; m < k; ++m)
            denom += std::exp(z(m) - top);
        const double log_denom = std::log(denom);

        double best = -std::numeric_limits<double>::infinity();
        for (Eigen::Index m = 0; m < k; ++m) {
            log_w[m] = z(m) - top - log_denom;
            double lp = log_w[m];
            for (int c = 0; c < 2; ++c) {
                const Eigen::Index i = 2 * m + c;
                var[i] = softplus(z(3 * k + i)) + floor;
                resid[i] = targets(c, b) - z(k + i);
                lp -= 0.5 * (log_two_pi + std::log(var[i])) + resid[i] * resid[i] / (2.0 * var[i]);
            }
            log_p[m] = lp;
            best = std::max(best, lp);
        }
        double sum = 0.0;
        for (Eigen::Index m = 0; m < k; ++m)
            sum += std::exp(log_p[m] - best);
        const double log_lik = best + std::log(sum);
        total -= log_lik;

        if (!grad)
            continue;
        auto g = grad->col(b);
        for (Eigen::Index m = 0; m < k; ++m) {
            const double resp = std::exp(log_p[m] - log_lik);
            g(m) = (std::exp(log_w[m]) - resp) * inv_batch;
            for (int c = 0; c < 2; ++c) {
                const Eigen::Index i = 2 * m + c;
                g(k + i) = -resp * resid[i] / var[i] * inv_batch;
                const double d_var = resp * (0.5 / var[i] - resid[i] * resid[i] / (2.0 * var[i] * var[i]));
                g(3 * k + i) = d_var * sigmoid(z(3 * k + i)) * inv_batch;
            }
        }
    }
    const double mean = total * inv_batch;
    if (!std::isfinite(mean))
        throw std::domain_error("mdn::batch_nll: non-finite loss");
    return mean;
}

} // namespace uqloc::mdn
