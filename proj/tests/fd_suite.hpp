#pragma once

// Finite-difference coverage of every differentiable primitive plus a few
// composite graphs. Shared between the unit tests and the acceptance
// runner, which sweeps it over many seeds.
//
// Each case declares parameters and a graph builder; the loss is a fixed
// random weighting of the op output so every output element contributes.
// Numeric gradients are central differences in double precision.

#include <functional>
#include <string>
#include <vector>

#include "eqse/autodiff.hpp"
#include "eqse/optim.hpp"

namespace fdsuite {

using eqse::ParamStore;
using eqse::Rng;
using eqse::Tape;
using eqse::Tensor;
using eqse::Var;

using D = double;
using Builder = std::function<Var<D>(Tape<D>&, std::vector<Var<D>>&)>;

struct CaseResult {
    std::string name;
    eqse::GradCheckReport report;
};

/// Gradient-check one graph. Exposed (rather than folded into run_suite)
/// so tests can drive single cases and corrupt gradients deliberately.
inline eqse::GradCheckReport check_case(ParamStore<D>& params, const Builder& build, uint64_t weight_seed, double tol = 1e-4) {
    auto make_vars = [&](Tape<D>& tape, std::vector<Var<D>>& vars) {
        vars.clear();
        for (auto& v : params.values) vars.push_back(tape.leaf(v));
    };
    Tensor<D> w;
    {
        Tape<D> tape;
        std::vector<Var<D>> vars;
        make_vars(tape, vars);
        Var<D> out = build(tape, vars);
        Rng wr(eqse::splitmix64(weight_seed ^ 0x5eedULL));
        w = Tensor<D>::randn(out.shape(), wr);
    }
    auto loss_fn = [&]() {
        Tape<D> tape;
        std::vector<Var<D>> vars;
        make_vars(tape, vars);
        Var<D> out = build(tape, vars);
        return tape.sum_all(tape.mul(out, tape.constant(w))).val()[0];
    };
    std::vector<Tensor<D>> grads;
    {
        Tape<D> tape;
        std::vector<Var<D>> vars;
        make_vars(tape, vars);
        Var<D> out = build(tape, vars);
        Var<D> loss = tape.sum_all(tape.mul(out, tape.constant(w)));
        tape.backward(loss);
        for (auto& v : vars) grads.push_back(v.grad());
    }
    return eqse::grad_check(params, grads, loss_fn, tol);
}

namespace detail {

inline Tensor<D> randn(Rng& rng, eqse::Shape s, double scale = 1.0) { return Tensor<D>::randn(std::move(s), rng, scale); }

/// Values bounded away from zero, for kinked ops (relu, abs) and
/// denominators. Sign is preserved.
inline Tensor<D> randn_offset(Rng& rng, eqse::Shape s, double margin) {
    Tensor<D> t = Tensor<D>::randn(std::move(s), rng);
    for (auto& v : t.data) v += v >= 0 ? margin : -margin;
    return t;
}

inline Tensor<D> rand_pos(Rng& rng, eqse::Shape s, double lo = 0.5, double hi = 2.0) { return Tensor<D>::uniform(std::move(s), rng, lo, hi); }

} // namespace detail

inline std::vector<CaseResult> run_suite(uint64_t seed, double tol = 1e-4) {
    using namespace detail;
    std::vector<CaseResult> results;
    auto run = [&](const std::string& name, ParamStore<D>& params, const Builder& build) {
        results.push_back({name, check_case(params, build, seed, tol)});
    };
    Rng rng(eqse::splitmix64(seed));

    { // matmul, all transpose combinations
        for (int ta = 0; ta < 2; ++ta) {
            for (int tb = 0; tb < 2; ++tb) {
                ParamStore<D> ps;
                ps.add("a", randn(rng, ta ? eqse::Shape{4, 3} : eqse::Shape{3, 4}));
                ps.add("b", randn(rng, tb ? eqse::Shape{5, 4} : eqse::Shape{4, 5}));
                const bool bta = ta, btb = tb;
                run("matmul_t" + std::to_string(ta) + std::to_string(tb), ps, [bta, btb](Tape<D>& t, std::vector<Var<D>>& v) { return t.matmul(v[0], v[1], bta, btb); });
            }
        }
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 5, 6}));
        ps.add("w", randn(rng, {3, 2, 3, 3}, 0.5));
        run("conv2d_s1_p1", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.conv2d(v[0], v[1], 1, 1, 1, 1); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 6, 9}));
        ps.add("w", randn(rng, {3, 2, 3, 3}, 0.5));
        run("conv2d_s12_p1", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.conv2d(v[0], v[1], 1, 2, 1, 1); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {3, 4, 10}));
        ps.add("w", randn(rng, {2, 3, 1, 1}, 0.5));
        run("conv2d_1x1", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.conv2d(v[0], v[1], 1, 1, 0, 0); });
    }
    {
        ParamStore<D> ps;
        ps.add("a", randn(rng, {2, 3, 4}));
        ps.add("b", randn(rng, {3, 1}));
        run("add_broadcast", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.add(v[0], v[1]); });
    }
    {
        ParamStore<D> ps;
        ps.add("a", randn(rng, {2, 3}));
        ps.add("b", randn(rng, {1, 3}));
        run("sub_broadcast", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.sub(v[0], v[1]); });
    }
    {
        ParamStore<D> ps;
        ps.add("a", randn(rng, {3, 2, 4}));
        ps.add("b", randn(rng, {3, 1, 1}));
        run("mul_channelwise", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.mul(v[0], v[1]); });
    }
    {
        ParamStore<D> ps;
        ps.add("a", randn(rng, {3, 4}));
        ps.add("b", rand_pos(rng, {3, 4}));
        run("div", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.div(v[0], v[1]); });
    }
    {
        ParamStore<D> ps;
        ps.add("a", randn(rng, {2, 5}));
        ps.add("b", rand_pos(rng, {1}));
        run("div_by_scalar", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.div(v[0], v[1]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {4, 5}));
        run("tanh", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.tanh(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {4, 5}));
        run("sigmoid", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.sigmoid(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn_offset(rng, {4, 5}, 0.05));
        run("relu", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.relu(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", rand_pos(rng, {4, 5}));
        run("log", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.log(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {4, 5}, 0.7));
        run("exp", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.exp(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {4, 5}));
        run("square", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.square(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", rand_pos(rng, {4, 5}));
        run("sqrt", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.sqrt(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn_offset(rng, {4, 5}, 0.05));
        run("abs", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.abs(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {3, 6}));
        run("softmax_axis1", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.softmax(v[0], 1); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {3, 6}));
        run("softmax_axis0", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.softmax(v[0], 0); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {4, 6}));
        run("log_softmax", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.log_softmax(v[0], -1); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 3, 4}));
        run("mean_axes02_keep", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.mean(v[0], {0, 2}, true); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 3, 4}));
        run("sum_axis1", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.sum(v[0], {1}, false); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {3, 5}));
        run("mean_all", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.mean_all(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {4, 7}));
        run("layer_norm", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.layer_norm(v[0]); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 3, 4}));
        run("reshape", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.tanh(t.reshape(v[0], {4, 6})); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 3, 4}));
        run("transpose_201", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.tanh(t.transpose(v[0], {2, 0, 1})); });
    }
    {
        ParamStore<D> ps;
        ps.add("a", randn(rng, {2, 3}));
        ps.add("b", randn(rng, {2, 5}));
        run("concat_axis1", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.tanh(t.concat({v[0], v[1]}, 1)); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {4, 6}));
        run("slice", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.tanh(t.slice(v[0], {1, 2}, {3, 5})); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 3, 4}));
        run("upsample_f2", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.upsample_f2(v[0], 8); });
    }
    {
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 3, 4}));
        run("upsample_f2_crop", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.upsample_f2(v[0], 7); });
    }
    {
        ParamStore<D> ps;
        ps.add("re", randn(rng, {4, 9}));
        ps.add("im", randn(rng, {4, 9}));
        run("istft", ps, [](Tape<D>& t, std::vector<Var<D>>& v) { return t.istft(v[0], v[1], 16, 8, 30, 8); });
    }
    { // masked synthesis path: const spectra, learned mask, shared fan-out
        ParamStore<D> ps;
        ps.add("logits", randn(rng, {4, 9}));
        Tensor<D> nre = randn(rng, {4, 9});
        Tensor<D> nim = randn(rng, {4, 9});
        run("masked_istft", ps, [nre, nim](Tape<D>& t, std::vector<Var<D>>& v) {
            Var<D> mask = t.sigmoid(v[0]);
            Var<D> re = t.mul(mask, t.constant(nre));
            Var<D> im = t.mul(mask, t.constant(nim));
            return t.istft(re, im, 16, 8, 30, 8);
        });
    }
    { // two-layer net: matmul + broadcast bias + tanh + softmax
        ParamStore<D> ps;
        ps.add("x", randn(rng, {2, 8}));
        ps.add("w1", randn(rng, {8, 6}, 0.5));
        ps.add("b1", randn(rng, {1, 6}, 0.1));
        ps.add("w2", randn(rng, {6, 4}, 0.5));
        run("mlp", ps, [](Tape<D>& t, std::vector<Var<D>>& v) {
            Var<D> h = t.tanh(t.add(t.matmul(v[0], v[1]), v[2]));
            return t.softmax(t.matmul(h, v[3]), 1);
        });
    }
    { // additive attention scorer over a candidate set
        ParamStore<D> ps;
        ps.add("key", randn(rng, {1, 6}));
        ps.add("q", randn(rng, {5, 6}));
        ps.add("w1", randn(rng, {6, 8}, 0.5));
        ps.add("w2", randn(rng, {6, 8}, 0.5));
        ps.add("v", randn(rng, {8, 1}, 0.5));
        run("additive_attention", ps, [](Tape<D>& t, std::vector<Var<D>>& v) {
            Var<D> h = t.tanh(t.add(t.matmul(v[0], v[2]), t.matmul(v[1], v[3])));
            return t.softmax(t.matmul(h, v[4]), 0);
        });
    }
    { // shared subexpression: gradients must accumulate across fan-out
        ParamStore<D> ps;
        ps.add("x", randn(rng, {3, 3}));
        run("fanout_reuse", ps, [](Tape<D>& t, std::vector<Var<D>>& v) {
            Var<D> y = t.tanh(v[0]);
            return t.add(t.mul(y, y), t.matmul(y, y));
        });
    }
    return results;
}

} // namespace fdsuite
