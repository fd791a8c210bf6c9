#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "eqse/autodiff.hpp"
#include "eqse/optim.hpp"

namespace eqse {
namespace nn {

/// Creates named parameters with seed-derived initialization. Each parameter's
/// values depend only on (seed, name), so two models sharing a backbone start
/// from identical backbone weights regardless of creation order.
template <typename Real>
class ParamFactory {
public:
    ParamFactory(ParamStore<Real>& store, uint64_t seed) : store_(store), seed_(seed) {}

    void normal(const std::string& name, Shape shape, double stddev) {
        Rng rng = Rng::seeded(seed_, "init:" + name);
        store_.add(name, Tensor<Real>::randn(std::move(shape), rng, stddev));
    }

    /// Fan-scaled init for rank-2 projections (in, out); keeps activation
    /// variance near 1 so deep stacks neither vanish nor explode.
    void glorot(const std::string& name, Shape shape) {
        if (shape.size() != 2) throw ConfigError("glorot init expects a rank-2 shape for " + name);
        const double stddev = std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]));
        normal(name, std::move(shape), stddev);
    }
    void zeros(const std::string& name, Shape shape) {
        store_.add(name, Tensor<Real>::zeros(std::move(shape)));
    }
    void constant(const std::string& name, Shape shape, Real value) {
        store_.add(name, Tensor<Real>::full(std::move(shape), value));
    }

private:
    ParamStore<Real>& store_;
    uint64_t seed_;
};

/// Binds store parameters to tape leaves, one leaf per name per tape.
/// After backward, collect_grads returns gradients in store order with
/// zero tensors for parameters the loss never touched.
template <typename Real>
class ParamBinder {
public:
    ParamBinder(Tape<Real>& tape, const ParamStore<Real>& store) : tape_(tape), store_(store) {}

    Var<Real> operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return Var<Real>{&tape_, it->second};
        Var<Real> v = tape_.leaf(store_.get(name), true);
        bound_.emplace(name, v.id);
        return v;
    }

    std::vector<Tensor<Real>> collect_grads() const {
        std::vector<Tensor<Real>> grads;
        grads.reserve(store_.size());
        for (size_t i = 0; i < store_.size(); ++i) {
            auto it = bound_.find(store_.names[i]);
            if (it == bound_.end()) {
                grads.push_back(Tensor<Real>::zeros(store_.values[i].shape));
                continue;
            }
            const Tensor<Real>& g = Var<Real>{&tape_, it->second}.grad();
            grads.push_back(g.data.empty() ? Tensor<Real>::zeros(store_.values[i].shape) : g);
        }
        return grads;
    }

private:
    Tape<Real>& tape_;
    const ParamStore<Real>& store_;
    std::unordered_map<std::string, int32_t> bound_;
};

/// y = x W + b with W (in, out) and b (1, out) broadcast over rows.
template <typename Real>
Var<Real> linear(Tape<Real>& t, Var<Real> x, Var<Real> w, Var<Real> b) {
    return t.add(t.matmul(x, w), b);
}

/// Layer norm over the last axis followed by a learned affine map.
template <typename Real>
Var<Real> layer_norm_affine(Tape<Real>& t, Var<Real> x, Var<Real> gamma, Var<Real> beta) {
    return t.add(t.mul(t.layer_norm(x), gamma), beta);
}

/// Inverted-dropout mask drawn from rng; pass rng == nullptr for inference.
template <typename Real>
Var<Real> dropout(Tape<Real>& t, Var<Real> x, double p, Rng* rng) {
    if (rng == nullptr || p <= 0.0) return x;
    Tensor<Real> mask(x.shape());
    const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
    for (auto& m : mask.data) m = rng->uniform() < p ? Real(0) : keep_scale;
    return t.mul(x, t.constant(std::move(mask)));
}

struct AttentionWeights {
    std::string wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Full self-attention over a token matrix x (N, C) split into `heads` heads.
template <typename Real>
Var<Real> multihead_self_attention(Tape<Real>& t, ParamBinder<Real>& p, Var<Real> x, int heads,
                                   const AttentionWeights& w) {
    const int64_t channels = x.shape()[1];
    if (channels % heads != 0)
        throw ConfigError("attention channels " + std::to_string(channels) + " not divisible by " +
                          std::to_string(heads) + " heads");
    const int64_t head_dim = channels / heads;
    const int64_t n = x.shape()[0];
    Var<Real> q = linear(t, x, p(w.wq), p(w.bq));
    Var<Real> k = linear(t, x, p(w.wk), p(w.bk));
    Var<Real> v = linear(t, x, p(w.wv), p(w.bv));
    Var<Real> scale = t.constant(Tensor<Real>::scalar(static_cast<Real>(1.0 / std::sqrt(static_cast<double>(head_dim)))));
    std::vector<Var<Real>> contexts;
    contexts.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const int64_t lo = h * head_dim, hi = (h + 1) * head_dim;
        Var<Real> qh = t.slice(q, {0, lo}, {n, hi});
        Var<Real> kh = t.slice(k, {0, lo}, {n, hi});
        Var<Real> vh = t.slice(v, {0, lo}, {n, hi});
        Var<Real> scores = t.mul(t.matmul(qh, kh, false, true), scale);
        Var<Real> attn = t.softmax(scores, 1);
        contexts.push_back(t.matmul(attn, vh));
    }
    Var<Real> ctx = heads == 1 ? contexts[0] : t.concat(contexts, 1);
    return linear(t, ctx, p(w.wo), p(w.bo));
}

struct BlockWeights {
    std::string ln1_g, ln1_b, ln2_g, ln2_b;
    AttentionWeights attn;
    std::string mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

/// Pre-norm transformer encoder block: attention and MLP residual branches.
template <typename Real>
Var<Real> transformer_block(Tape<Real>& t, ParamBinder<Real>& p, Var<Real> x, int heads,
                            const BlockWeights& w, double drop_p, Rng* drop_rng) {
    Var<Real> a = multihead_self_attention(t, p, layer_norm_affine(t, x, p(w.ln1_g), p(w.ln1_b)), heads, w.attn);
    x = t.add(x, dropout(t, a, drop_p, drop_rng));
    Var<Real> m = layer_norm_affine(t, x, p(w.ln2_g), p(w.ln2_b));
    m = linear(t, t.relu(linear(t, m, p(w.mlp_w1), p(w.mlp_b1))), p(w.mlp_w2), p(w.mlp_b2));
    return t.add(x, dropout(t, m, drop_p, drop_rng));
}

/// Negative log-likelihood of `label` under softmax(logits); logits (1, K).
template <typename Real>
Var<Real> nll_loss(Tape<Real>& t, Var<Real> logits, int label) {
    const int64_t k = logits.shape()[1];
    if (label < 0 || label >= k)
        throw ConfigError("label " + std::to_string(label) + " out of range for " + std::to_string(k) + " classes");
    Var<Real> lp = t.slice(t.log_softmax(logits, 1), {0, label}, {1, label + 1});
    return t.sub(t.constant(Tensor<Real>::scalar(0)), t.sum_all(lp));
}

/// Runs fn(i) for i in [0, n); with threads > 1 the range is strided across
/// workers. Output placement must be index-addressed so results are
/// independent of the thread count.
inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = static_cast<int>(std::min<int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::exception_ptr first_error;
    std::mutex error_mu;
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([t, n, workers, &fn, &first_error, &error_mu] {
            try {
                for (int64_t i = t; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace nn
} // namespace eqse
