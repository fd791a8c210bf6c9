#pragma once

// Adam and a finite-difference gradient checker.
//
// Parameters live outside any tape as named tensors; each training step
// builds a fresh tape over them, runs backward, and feeds the gradients
// to the optimizer.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "eqse/autodiff.hpp"
#include "eqse/tensor.hpp"

namespace eqse {

/// Named parameter registry. Insertion order is preserved so checkpoints
/// and optimizer state stay aligned across runs.
template <typename Real>
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor<Real>> values;

    Tensor<Real>& add(const std::string& name, Tensor<Real> init) {
        for (const auto& n : names)
            if (n == name) throw ConfigError("duplicate parameter name: " + name);
        names.push_back(name);
        values.push_back(std::move(init));
        return values.back();
    }

    Tensor<Real>& get(const std::string& name) {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return values[i];
        throw ConfigError("unknown parameter: " + name);
    }

    const Tensor<Real>& get(const std::string& name) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return values[i];
        throw ConfigError("unknown parameter: " + name);
    }

    size_t size() const { return names.size(); }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& v : values) n += v.numel();
        return n;
    }
};

template <typename Real>
class Adam {
public:
    Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// One update over all params; `grads[i]` pairs with `params.values[i]`.
    void step(ParamStore<Real>& params, const std::vector<Tensor<Real>>& grads) {
        if (grads.size() != params.values.size())
            throw NumericError("adam: gradient count " + std::to_string(grads.size()) + " != parameter count " + std::to_string(params.values.size()));
        if (m_.empty()) {
            for (const auto& v : params.values) {
                m_.push_back(Tensor<Real>::zeros(v.shape));
                v_.push_back(Tensor<Real>::zeros(v.shape));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t p = 0; p < params.values.size(); ++p) {
            Tensor<Real>& w = params.values[p];
            const Tensor<Real>& g = grads[p];
            if (g.shape != w.shape)
                throw NumericError("adam: gradient shape " + shape_str(g.shape) + " != parameter shape " + shape_str(w.shape) + " for " + params.names[p]);
            Tensor<Real>& m = m_[p];
            Tensor<Real>& v = v_[p];
            for (int64_t i = 0; i < w.numel(); ++i) {
                const double gi = g[i];
                const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
                const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<Real>(mi);
                v[i] = static_cast<Real>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                w[i] = static_cast<Real>(w[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t step_count() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<Tensor<Real>> m_;
    std::vector<Tensor<Real>> v_;
};

/// One parameter entry that failed (or was checked by) grad_check.
struct GradCheckEntry {
    std::string name;
    int64_t flat_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
    bool ok = true;
};

struct GradCheckReport {
    bool ok = true;
    bool deterministic = true;
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = 0;
    std::vector<GradCheckEntry> failures;

    std::string message() const {
        if (!deterministic) return "grad_check: loss function is non-deterministic (two identical forwards disagree)";
        if (ok) return "grad_check: ok, max rel err " + std::to_string(max_rel_err);
        std::string msg = "grad_check: FAIL at parameter '" + worst_param + "'[" + std::to_string(worst_index) + "]";
        for (const auto& f : failures) {
            if (f.name != worst_param || f.flat_index != worst_index) continue;
            msg += ": analytic " + std::to_string(f.analytic) + " vs numeric " + std::to_string(f.numeric) + " (rel err " + std::to_string(f.rel_err) + ")";
            break;
        }
        return msg;
    }
};

/// Central-difference check of d(loss)/d(params) against analytic grads.
///
/// `loss_fn` must evaluate the scalar loss from the current parameter
/// values without observable side effects; `grads` are the analytic
/// gradients in ParamStore order (typically from Tape::backward). For
/// testability the comparison is staged: analytic values come in as data,
/// so a test can corrupt one entry and assert the report names it.
template <typename Real>
GradCheckReport grad_check(ParamStore<Real>& params, const std::vector<Tensor<Real>>& grads, const std::function<double()>& loss_fn, double tol = 1e-4, double fd_eps = 1e-5, int64_t max_checks_per_param = 0) {
    static_assert(std::is_same_v<Real, double>, "grad_check requires 64-bit parameters");
    GradCheckReport rep;
    const double l1 = loss_fn();
    const double l2 = loss_fn();
    if (l1 != l2) { // bitwise comparison, any RNG or state leak trips this
        rep.deterministic = false;
        rep.ok = false;
        return rep;
    }
    for (size_t p = 0; p < params.values.size(); ++p) {
        Tensor<Real>& w = params.values[p];
        const Tensor<Real>& g = grads[p];
        const int64_t n = w.numel();
        const int64_t checks = max_checks_per_param > 0 ? std::min(max_checks_per_param, n) : n;
        const int64_t stride = std::max<int64_t>(1, n / std::max<int64_t>(checks, 1));
        for (int64_t i = 0; i < n; i += stride) {
            const Real orig = w[i];
            w[i] = orig + static_cast<Real>(fd_eps);
            const double lp = loss_fn();
            w[i] = orig - static_cast<Real>(fd_eps);
            const double lm = loss_fn();
            w[i] = orig;
            const double numeric = (lp - lm) / (2.0 * fd_eps);
            const double analytic = g[i];
            const double rel = std::abs(analytic - numeric) / (std::max(std::abs(analytic), std::abs(numeric)) + 1e-8);
            const bool entry_ok = rel < tol || std::abs(analytic - numeric) < 1e-8;
            const double effective = entry_ok ? std::min(rel, tol) : rel;
            if (effective > rep.max_rel_err) {
                rep.max_rel_err = effective;
                if (!entry_ok) {
                    rep.worst_param = params.names[p];
                    rep.worst_index = i;
                }
            }
            if (!entry_ok) {
                rep.ok = false;
                if (rep.failures.size() < 16)
                    rep.failures.push_back({params.names[p], i, analytic, numeric, rel, false});
            }
        }
    }
    return rep;
}

} // namespace eqse
