#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "eqse/tensor.hpp"

namespace eqse {

/// Exact O(N^2) t-SNE. Per-point bandwidths are found by binary search so
/// each conditional distribution hits the requested perplexity; the joint P
/// is symmetrized and amplified 12x for the first 250 iterations. Gradient
/// descent uses per-coordinate adaptive gains with momentum 0.5 switching
/// to 0.8 when exaggeration ends.
struct TsneResult {
    Tensor<double> coords;        // (N, 2)
    std::vector<double> kl_trace; // true (unexaggerated) KL every 100 iters
    double kl_end_exaggeration = 0;
    double kl_final = 0;
};

inline TsneResult tsne(const Tensor<double>& points, double perplexity = 30.0, int iters = 1000,
                       uint64_t seed = 1) {
    if (points.shape.size() != 2) throw ConfigError("tsne: points must be (N, d)");
    const int64_t n = points.shape[0], d = points.shape[1];
    if (n > 5000) throw ConfigError("tsne: exact implementation limited to 5000 points, got " + std::to_string(n));
    if (perplexity < 5.0 || perplexity > static_cast<double>(n - 1) / 3.0)
        throw ConfigError("tsne: perplexity " + std::to_string(perplexity) + " outside [5, (N-1)/3] for N=" +
                          std::to_string(n));
    if (iters < 300) throw ConfigError("tsne: need at least 300 iterations");

    // pairwise squared distances in the input space
    std::vector<double> d2(static_cast<size_t>(n * n), 0.0);
    double max_d2 = 0.0;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            double acc = 0;
            for (int64_t k = 0; k < d; ++k) {
                const double diff = points.data[size_t(i * d + k)] - points.data[size_t(j * d + k)];
                acc += diff * diff;
            }
            d2[size_t(i * n + j)] = d2[size_t(j * n + i)] = acc;
            max_d2 = std::max(max_d2, acc);
        }
    if (max_d2 == 0.0) throw DataError("tsne: all points are identical");

    // conditional affinities at the requested perplexity (entropy in nats)
    const double target_entropy = std::log(perplexity);
    std::vector<double> p(static_cast<size_t>(n * n), 0.0);
    std::vector<double> row(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        double beta = 1.0, beta_lo = 0.0, beta_hi = std::numeric_limits<double>::infinity();
        for (int attempt = 0; attempt < 50; ++attempt) {
            double sum = 0.0, weighted = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                if (j == i) {
                    row[size_t(j)] = 0.0;
                    continue;
                }
                const double w = std::exp(-beta * d2[size_t(i * n + j)]);
                row[size_t(j)] = w;
                sum += w;
                weighted += w * d2[size_t(i * n + j)];
            }
            // H = log(sum) + beta * E[d2]
            const double entropy = std::log(sum) + beta * weighted / sum;
            const double diff = entropy - target_entropy;
            if (std::abs(diff) < 1e-5) break;
            if (diff > 0) {
                beta_lo = beta;
                beta = std::isinf(beta_hi) ? beta * 2.0 : (beta + beta_hi) / 2.0;
            } else {
                beta_hi = beta;
                beta = (beta + beta_lo) / 2.0;
            }
        }
        double sum = 0.0;
        for (int64_t j = 0; j < n; ++j) sum += row[size_t(j)];
        for (int64_t j = 0; j < n; ++j) p[size_t(i * n + j)] = row[size_t(j)] / sum;
    }
    // symmetrize to the joint distribution
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            const double v = (p[size_t(i * n + j)] + p[size_t(j * n + i)]) / (2.0 * static_cast<double>(n));
            p[size_t(i * n + j)] = p[size_t(j * n + i)] = std::max(v, 1e-12);
        }

    Rng rng = Rng::seeded(seed, "tsne:init");
    Tensor<double> y = Tensor<double>::randn({n, 2}, rng, 1e-4);
    std::vector<double> vel(static_cast<size_t>(n * 2), 0.0);
    std::vector<double> gains(static_cast<size_t>(n * 2), 1.0);
    std::vector<double> q(static_cast<size_t>(n * n), 0.0);
    std::vector<double> grad(static_cast<size_t>(n * 2), 0.0);
    const int exaggeration_end = 250;
    // scaling the step with N keeps small embeddings from exploding during
    // exaggeration while large ones still move
    const double lr = std::max(static_cast<double>(n) / 48.0, 50.0);

    auto true_kl = [&]() {
        double kl = 0.0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double pij = p[size_t(i * n + j)];
                kl += pij * std::log(pij / std::max(q[size_t(i * n + j)], 1e-12));
            }
        return kl;
    };

    TsneResult result;
    for (int iter = 0; iter < iters; ++iter) {
        const double exaggeration = iter < exaggeration_end ? 12.0 : 1.0;
        const double momentum = iter < exaggeration_end ? 0.5 : 0.8;
        // student-t affinities
        double qsum = 0.0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) {
                const double dy0 = y.at(i, 0) - y.at(j, 0), dy1 = y.at(i, 1) - y.at(j, 1);
                const double w = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                q[size_t(i * n + j)] = q[size_t(j * n + i)] = w;
                qsum += 2.0 * w;
            }
        std::fill(grad.begin(), grad.end(), 0.0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double w = q[size_t(i * n + j)];
                const double coeff = 4.0 * (exaggeration * p[size_t(i * n + j)] - w / qsum) * w;
                grad[size_t(i * 2)] += coeff * (y.at(i, 0) - y.at(j, 0));
                grad[size_t(i * 2 + 1)] += coeff * (y.at(i, 1) - y.at(j, 1));
            }
        for (size_t k = 0; k < grad.size(); ++k) {
            const bool same_sign = (grad[k] > 0) == (vel[k] > 0);
            gains[k] = same_sign ? std::max(0.01, gains[k] * 0.8) : gains[k] + 0.2;
            vel[k] = momentum * vel[k] - lr * gains[k] * grad[k];
            y.data[k] += vel[k];
        }
        double c0 = 0, c1 = 0;
        for (int64_t i = 0; i < n; ++i) {
            c0 += y.at(i, 0);
            c1 += y.at(i, 1);
        }
        c0 /= static_cast<double>(n);
        c1 /= static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            y.at(i, 0) -= c0;
            y.at(i, 1) -= c1;
        }
        // q still matches the pre-update coordinates; recompute lazily only
        // where the trace needs it
        if (iter + 1 == exaggeration_end || (iter + 1) % 100 == 0 || iter + 1 == iters) {
            double qs = 0.0;
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = i + 1; j < n; ++j) {
                    const double dy0 = y.at(i, 0) - y.at(j, 0), dy1 = y.at(i, 1) - y.at(j, 1);
                    const double w = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                    q[size_t(i * n + j)] = q[size_t(j * n + i)] = w;
                    qs += 2.0 * w;
                }
            for (auto& v : q) v /= qs;
            const double kl = true_kl();
            if (iter + 1 == exaggeration_end) result.kl_end_exaggeration = kl;
            if ((iter + 1) % 100 == 0) result.kl_trace.push_back(kl);
            if (iter + 1 == iters) result.kl_final = kl;
        }
    }
    result.coords = std::move(y);
    return result;
}

} // namespace eqse
