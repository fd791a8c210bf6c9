#pragma once

// Tape-based reverse-mode automatic differentiation over Tensor<Real>.
//
// The tape records primitive ops in topological order; backward() replays
// them in exact reverse order, accumulating gradients additively at fan-out.
// Dense matmul and bulk pointwise math map onto Eigen; shape/broadcast
// semantics and every backward rule live here.

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eqse/fft.hpp"
#include "eqse/tensor.hpp"

namespace eqse {

enum class Op {
    Leaf,
    Matmul,
    Conv2d,
    UpsampleF2,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Relu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Mean,
    Sum,
    LayerNorm,
    Log,
    Exp,
    Square,
    Sqrt,
    Abs,
    Istft,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Matmul: return "matmul";
        case Op::Conv2d: return "conv2d";
        case Op::UpsampleF2: return "upsample_f2";
        case Op::Transpose: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Tanh: return "tanh";
        case Op::Relu: return "relu";
        case Op::Sigmoid: return "sigmoid";
        case Op::Softmax: return "softmax";
        case Op::LogSoftmax: return "log_softmax";
        case Op::Mean: return "mean";
        case Op::Sum: return "sum";
        case Op::LayerNorm: return "layer_norm";
        case Op::Log: return "log";
        case Op::Exp: return "exp";
        case Op::Square: return "square";
        case Op::Sqrt: return "sqrt";
        case Op::Abs: return "abs";
        case Op::Istft: return "istft";
    }
    return "?";
}

struct OpAttrs {
    bool trans_a = false, trans_b = false;              // matmul
    int64_t stride_h = 1, stride_w = 1;                 // conv2d
    int64_t pad_h = 0, pad_w = 0;                       // conv2d
    int64_t out_w = 0;                                  // upsample_f2
    int axis = -1;                                      // softmax / concat
    std::vector<int> axes;                              // reductions, transpose perm
    bool keepdims = false;                              // reductions
    double eps = 0.0;                                   // layer_norm
    std::vector<int64_t> starts, stops;                 // slice
    int64_t fft_size = 0, hop = 0, orig_len = 0, pad_front = 0; // istft
};

template <typename Real>
struct TapeNode {
    Op op = Op::Leaf;
    std::vector<int32_t> in;
    OpAttrs attrs;
    Tensor<Real> val;
    Tensor<Real> grad; // lazily allocated during backward
    std::vector<Tensor<Real>> saved;
    bool needs_grad = true;
};

template <typename Real>
class Tape;

template <typename Real>
struct Var {
    Tape<Real>* tape = nullptr;
    int32_t id = -1;

    const Tensor<Real>& val() const { return tape->node(id).val; }
    const Tensor<Real>& grad() const { return tape->grad_of(id); }
    const Shape& shape() const { return tape->node(id).val.shape; }
    int64_t numel() const { return tape->node(id).val.numel(); }
};

namespace detail {

template <typename Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapM = Eigen::Map<EMat<Real>>;
template <typename Real>
using CMapM = Eigen::Map<const EMat<Real>>;
template <typename Real>
using MapA = Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>>;
template <typename Real>
using CMapA = Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>;

/// Iterate an output shape once, producing linear offsets into two
/// broadcast operands. fn(out_i, a_i, b_i).
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb, Fn&& fn) {
    const size_t r = out.size();
    if (r == 0) {
        fn(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(r, 0);
    int64_t ai = 0, bi = 0, oi = 0;
    const int64_t n = shape_numel(out);
    const int64_t inner = out[r - 1];
    const int64_t sa_in = sa[r - 1], sb_in = sb[r - 1];
    for (int64_t base = 0; base < n; base += inner) {
        int64_t a = ai, b = bi;
        for (int64_t k = 0; k < inner; ++k) {
            fn(oi++, a, b);
            a += sa_in;
            b += sb_in;
        }
        // odometer over the outer dims
        for (int i = static_cast<int>(r) - 2; i >= 0; --i) {
            ai += sa[static_cast<size_t>(i)];
            bi += sb[static_cast<size_t>(i)];
            if (++idx[static_cast<size_t>(i)] < out[static_cast<size_t>(i)]) break;
            ai -= sa[static_cast<size_t>(i)] * out[static_cast<size_t>(i)];
            bi -= sb[static_cast<size_t>(i)] * out[static_cast<size_t>(i)];
            idx[static_cast<size_t>(i)] = 0;
        }
    }
}

/// Sum `src` (shaped `src_shape`) down to `dst_shape` (right-aligned
/// broadcast inverse). Accumulates into dst.
template <typename Real>
void reduce_into(const Tensor<Real>& src, Tensor<Real>& dst) {
    if (src.shape == dst.shape) {
        CMapA<Real> s(src.data.data(), static_cast<Eigen::Index>(src.data.size()));
        MapA<Real> d(dst.data.data(), static_cast<Eigen::Index>(dst.data.size()));
        d += s;
        return;
    }
    const auto sd = broadcast_strides(dst.shape, src.shape);
    const auto ss = row_strides(src.shape);
    std::vector<int64_t> ss64(ss.begin(), ss.end());
    for_each_broadcast(src.shape, ss64, sd, [&](int64_t, int64_t si, int64_t di) { dst.data[static_cast<size_t>(di)] += src.data[static_cast<size_t>(si)]; });
}

} // namespace detail

template <typename Real>
class Tape {
public:
    using Node = TapeNode<Real>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }
    Node& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }

    const Tensor<Real>& grad_of(int32_t id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor<Real>::zeros(n.val.shape);
        return n.grad;
    }

    /// Record an input. `needs_grad=false` prunes backward work for
    /// constants (data tensors, frozen queries).
    Var<Real> leaf(Tensor<Real> value, bool needs_grad = true) {
        Node n;
        n.op = Op::Leaf;
        n.val = std::move(value);
        n.needs_grad = needs_grad;
        return push(std::move(n));
    }

    Var<Real> constant(Tensor<Real> value) { return leaf(std::move(value), false); }
    Var<Real> scalar(Real v) { return leaf(Tensor<Real>::scalar(v), false); }

    // -- primitives ---------------------------------------------------------

    Var<Real> matmul(Var<Real> a, Var<Real> b, bool trans_a = false, bool trans_b = false) {
        const Tensor<Real>& A = a.val();
        const Tensor<Real>& B = b.val();
        if (A.rank() != 2 || B.rank() != 2)
            throw NumericError(std::string("matmul: expected rank-2 operands, got ") + shape_str(A.shape) + " and " + shape_str(B.shape));
        const int64_t M = trans_a ? A.shape[1] : A.shape[0];
        const int64_t K = trans_a ? A.shape[0] : A.shape[1];
        const int64_t Kb = trans_b ? B.shape[1] : B.shape[0];
        const int64_t N = trans_b ? B.shape[0] : B.shape[1];
        if (K != Kb)
            throw NumericError("matmul: inner dimensions disagree, " + shape_str(A.shape) + (trans_a ? "^T" : "") + " vs " + shape_str(B.shape) + (trans_b ? "^T" : ""));
        Node n;
        n.op = Op::Matmul;
        n.in = {a.id, b.id};
        n.attrs.trans_a = trans_a;
        n.attrs.trans_b = trans_b;
        n.val = Tensor<Real>({M, N});
        detail::CMapM<Real> mA(A.data.data(), A.shape[0], A.shape[1]);
        detail::CMapM<Real> mB(B.data.data(), B.shape[0], B.shape[1]);
        detail::MapM<Real> mC(n.val.data.data(), M, N);
        if (!trans_a && !trans_b) mC.noalias() = mA * mB;
        else if (trans_a && !trans_b) mC.noalias() = mA.transpose() * mB;
        else if (!trans_a && trans_b) mC.noalias() = mA * mB.transpose();
        else mC.noalias() = mA.transpose() * mB.transpose();
        return push(std::move(n));
    }

    /// 2-D convolution, input (C,H,W), weight (Co,C,kh,kw), zero padding.
    Var<Real> conv2d(Var<Real> x, Var<Real> w, int64_t stride_h, int64_t stride_w, int64_t pad_h, int64_t pad_w) {
        const Tensor<Real>& X = x.val();
        const Tensor<Real>& W = w.val();
        if (X.rank() != 3 || W.rank() != 4)
            throw NumericError("conv2d: expected input (C,H,W) and weight (Co,C,kh,kw), got " + shape_str(X.shape) + " and " + shape_str(W.shape));
        if (X.shape[0] != W.shape[1])
            throw NumericError("conv2d: channel mismatch, input " + shape_str(X.shape) + " vs weight " + shape_str(W.shape));
        const int64_t C = X.shape[0], H = X.shape[1], Wd = X.shape[2];
        const int64_t Co = W.shape[0], kh = W.shape[2], kw = W.shape[3];
        const int64_t Ho = (H + 2 * pad_h - kh) / stride_h + 1;
        const int64_t Wo = (Wd + 2 * pad_w - kw) / stride_w + 1;
        if (Ho <= 0 || Wo <= 0)
            throw NumericError("conv2d: empty output for input " + shape_str(X.shape) + " kernel " + shape_str(W.shape));
        Node n;
        n.op = Op::Conv2d;
        n.in = {x.id, w.id};
        n.attrs.stride_h = stride_h;
        n.attrs.stride_w = stride_w;
        n.attrs.pad_h = pad_h;
        n.attrs.pad_w = pad_w;
        n.val = Tensor<Real>({Co, Ho, Wo});
        std::vector<Real> col;
        im2col(X, kh, kw, stride_h, stride_w, pad_h, pad_w, Ho, Wo, col);
        detail::CMapM<Real> mW(W.data.data(), Co, C * kh * kw);
        detail::CMapM<Real> mCol(col.data(), C * kh * kw, Ho * Wo);
        detail::MapM<Real> mOut(n.val.data.data(), Co, Ho * Wo);
        mOut.noalias() = mW * mCol;
        return push(std::move(n));
    }

    /// Nearest-neighbour x2 upsampling along the last (frequency) axis of
    /// a (C,T,F) tensor, cropped to out_w columns.
    Var<Real> upsample_f2(Var<Real> x, int64_t out_w) {
        const Tensor<Real>& X = x.val();
        if (X.rank() != 3) throw NumericError("upsample_f2: expected (C,T,F), got " + shape_str(X.shape));
        if (out_w < X.shape[2] || out_w > 2 * X.shape[2])
            throw NumericError("upsample_f2: out_w " + std::to_string(out_w) + " incompatible with input " + shape_str(X.shape));
        Node n;
        n.op = Op::UpsampleF2;
        n.in = {x.id};
        n.attrs.out_w = out_w;
        n.val = Tensor<Real>({X.shape[0], X.shape[1], out_w});
        const int64_t F = X.shape[2];
        const int64_t rows = X.shape[0] * X.shape[1];
        for (int64_t r = 0; r < rows; ++r) {
            const Real* src = X.data.data() + r * F;
            Real* dst = n.val.data.data() + r * out_w;
            for (int64_t f = 0; f < out_w; ++f) dst[f] = src[f / 2];
        }
        return push(std::move(n));
    }

    Var<Real> transpose(Var<Real> x, std::vector<int> perm) {
        const Tensor<Real>& X = x.val();
        if (static_cast<int>(perm.size()) != X.rank())
            throw NumericError("transpose: perm rank mismatch for " + shape_str(X.shape));
        Shape out_shape(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = X.shape[static_cast<size_t>(perm[i])];
        Node n;
        n.op = Op::Transpose;
        n.in = {x.id};
        n.attrs.axes = perm;
        n.val = Tensor<Real>(out_shape);
        permute_copy(X, n.val, perm);
        return push(std::move(n));
    }

    Var<Real> reshape(Var<Real> x, Shape new_shape) {
        const Tensor<Real>& X = x.val();
        if (shape_numel(new_shape) != X.numel())
            throw NumericError("reshape: cannot reshape " + shape_str(X.shape) + " to " + shape_str(new_shape));
        Node n;
        n.op = Op::Reshape;
        n.in = {x.id};
        n.val = Tensor<Real>(new_shape, X.data);
        return push(std::move(n));
    }

    Var<Real> concat(const std::vector<Var<Real>>& xs, int axis) {
        if (xs.empty()) throw NumericError("concat: no inputs");
        const int r = xs[0].val().rank();
        if (axis < 0 || axis >= r) throw NumericError("concat: bad axis");
        Shape out_shape = xs[0].val().shape;
        int64_t total = 0;
        for (const auto& v : xs) {
            const Shape& s = v.val().shape;
            if (static_cast<int>(s.size()) != r) throw NumericError("concat: rank mismatch");
            for (int i = 0; i < r; ++i)
                if (i != axis && s[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)])
                    throw NumericError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(out_shape));
            total += s[static_cast<size_t>(axis)];
        }
        out_shape[static_cast<size_t>(axis)] = total;
        Node n;
        n.op = Op::Concat;
        n.attrs.axis = axis;
        for (const auto& v : xs) n.in.push_back(v.id);
        n.val = Tensor<Real>(out_shape);
        // outer = product of dims before axis, inner = product after
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
        for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];
        int64_t off = 0;
        for (const auto& v : xs) {
            const Tensor<Real>& X = v.val();
            const int64_t ax = X.shape[static_cast<size_t>(axis)];
            for (int64_t o = 0; o < outer; ++o)
                std::copy_n(X.data.data() + o * ax * inner, ax * inner, n.val.data.data() + (o * total + off) * inner);
            off += ax;
        }
        return push(std::move(n));
    }

    Var<Real> slice(Var<Real> x, std::vector<int64_t> starts, std::vector<int64_t> stops) {
        const Tensor<Real>& X = x.val();
        const int r = X.rank();
        if (static_cast<int>(starts.size()) != r || static_cast<int>(stops.size()) != r)
            throw NumericError("slice: bounds rank mismatch for " + shape_str(X.shape));
        Shape out_shape(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) {
            if (starts[static_cast<size_t>(i)] < 0 || stops[static_cast<size_t>(i)] > X.shape[static_cast<size_t>(i)] || starts[static_cast<size_t>(i)] >= stops[static_cast<size_t>(i)])
                throw NumericError("slice: bad bounds on axis " + std::to_string(i) + " for " + shape_str(X.shape));
            out_shape[static_cast<size_t>(i)] = stops[static_cast<size_t>(i)] - starts[static_cast<size_t>(i)];
        }
        Node n;
        n.op = Op::Slice;
        n.in = {x.id};
        n.attrs.starts = starts;
        n.attrs.stops = stops;
        n.val = Tensor<Real>(out_shape);
        copy_region(X, n.val, starts, /*scatter=*/false);
        return push(std::move(n));
    }

    Var<Real> add(Var<Real> a, Var<Real> b) { return binary(Op::Add, a, b); }
    Var<Real> sub(Var<Real> a, Var<Real> b) { return binary(Op::Sub, a, b); }
    Var<Real> mul(Var<Real> a, Var<Real> b) { return binary(Op::Mul, a, b); }
    Var<Real> div(Var<Real> a, Var<Real> b) { return binary(Op::Div, a, b); }

    Var<Real> tanh(Var<Real> x) { return unary(Op::Tanh, x, [](Real v) { return std::tanh(v); }); }
    Var<Real> relu(Var<Real> x) { return unary(Op::Relu, x, [](Real v) { return v > Real(0) ? v : Real(0); }); }
    Var<Real> sigmoid(Var<Real> x) {
        return unary(Op::Sigmoid, x, [](Real v) { return v >= Real(0) ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v)); });
    }
    Var<Real> log(Var<Real> x) { return unary(Op::Log, x, [](Real v) { return std::log(v); }); }
    Var<Real> exp(Var<Real> x) { return unary(Op::Exp, x, [](Real v) { return std::exp(v); }); }
    Var<Real> square(Var<Real> x) { return unary(Op::Square, x, [](Real v) { return v * v; }); }
    Var<Real> sqrt(Var<Real> x) { return unary(Op::Sqrt, x, [](Real v) { return std::sqrt(v); }); }
    Var<Real> abs(Var<Real> x) { return unary(Op::Abs, x, [](Real v) { return std::abs(v); }); }

    Var<Real> softmax(Var<Real> x, int axis) { return softmax_like(Op::Softmax, x, axis); }
    Var<Real> log_softmax(Var<Real> x, int axis) { return softmax_like(Op::LogSoftmax, x, axis); }

    Var<Real> sum(Var<Real> x, std::vector<int> axes, bool keepdims = false) { return reduce(Op::Sum, x, std::move(axes), keepdims); }
    Var<Real> mean(Var<Real> x, std::vector<int> axes, bool keepdims = false) { return reduce(Op::Mean, x, std::move(axes), keepdims); }
    Var<Real> sum_all(Var<Real> x) { return reduce(Op::Sum, x, all_axes(x), false); }
    Var<Real> mean_all(Var<Real> x) { return reduce(Op::Mean, x, all_axes(x), false); }

    /// Normalizes over the last axis: (x - mu) / sqrt(var + eps). Affine
    /// scale/shift, when wanted, is composed from mul/add outside.
    Var<Real> layer_norm(Var<Real> x, double eps = 1e-5) {
        const Tensor<Real>& X = x.val();
        if (X.rank() < 1) throw NumericError("layer_norm: rank-0 input");
        const int64_t inner = X.shape.back();
        const int64_t outer = X.numel() / inner;
        Node n;
        n.op = Op::LayerNorm;
        n.in = {x.id};
        n.attrs.eps = eps;
        n.val = Tensor<Real>(X.shape);
        Tensor<Real> invstd({std::max<int64_t>(outer, 1)});
        for (int64_t o = 0; o < outer; ++o) {
            const Real* src = X.data.data() + o * inner;
            Real* dst = n.val.data.data() + o * inner;
            double mu = 0;
            for (int64_t i = 0; i < inner; ++i) mu += src[i];
            mu /= static_cast<double>(inner);
            double var = 0;
            for (int64_t i = 0; i < inner; ++i) {
                const double d = src[i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(inner);
            const double is = 1.0 / std::sqrt(var + eps);
            invstd[o] = static_cast<Real>(is);
            for (int64_t i = 0; i < inner; ++i) dst[i] = static_cast<Real>((src[i] - mu) * is);
        }
        n.saved.push_back(std::move(invstd));
        return push(std::move(n));
    }

    /// WOLA synthesis of a masked STFT: inputs re,im of shape (T,F) with
    /// F = fft/2+1; emits the time signal trimmed to orig_len samples.
    Var<Real> istft(Var<Real> re, Var<Real> im, int64_t fft_size, int64_t hop, int64_t orig_len, int64_t pad_front) {
        const Tensor<Real>& R = re.val();
        const Tensor<Real>& I = im.val();
        if (R.shape != I.shape || R.rank() != 2)
            throw NumericError("istft: re/im must be equal rank-2 shapes, got " + shape_str(R.shape) + " and " + shape_str(I.shape));
        if (R.shape[1] != fft_size / 2 + 1)
            throw NumericError("istft: bins " + std::to_string(R.shape[1]) + " != fft/2+1 for fft " + std::to_string(fft_size));
        const int64_t T = R.shape[0], F = R.shape[1];
        const int64_t buf_len = (T - 1) * hop + fft_size;
        if (pad_front + orig_len > buf_len) throw NumericError("istft: orig_len does not fit synthesis buffer");
        Node n;
        n.op = Op::Istft;
        n.in = {re.id, im.id};
        n.attrs.fft_size = fft_size;
        n.attrs.hop = hop;
        n.attrs.orig_len = orig_len;
        n.attrs.pad_front = pad_front;
        n.val = Tensor<Real>({orig_len});
        const std::vector<Real> win = sqrt_hann<Real>(fft_size);
        std::vector<Real> buf(static_cast<size_t>(buf_len), Real(0));
        std::vector<Real> frame(static_cast<size_t>(fft_size));
        for (int64_t t = 0; t < T; ++t) {
            irfft(R.data.data() + t * F, I.data.data() + t * F, fft_size, frame.data());
            Real* dst = buf.data() + t * hop;
            for (int64_t i = 0; i < fft_size; ++i) dst[i] += frame[static_cast<size_t>(i)] * win[static_cast<size_t>(i)];
        }
        std::copy_n(buf.data() + pad_front, orig_len, n.val.data.data());
        return push(std::move(n));
    }

    // -- engine --------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Within a sweep, gradients
    /// accumulate additively at fan-out; across sweeps only leaf gradients
    /// are retained (interior gradients are consumed and released as the
    /// sweep passes them).
    void backward(Var<Real> loss) {
        if (nodes_.empty()) throw NumericError("backward: tape is empty");
        Node& ln = node(loss.id);
        if (ln.val.numel() != 1) throw NumericError("backward: loss must be scalar, got " + shape_str(ln.val.shape));
        if (ln.grad.data.empty()) ln.grad = Tensor<Real>::zeros(ln.val.shape);
        ln.grad[0] += Real(1);
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.grad.data.empty() || n.op == Op::Leaf) continue;
            backward_node(i);
            n.grad = Tensor<Real>();
        }
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad.data.clear();
    }

    bool check_finite = true;

private:
    std::vector<Node> nodes_;

    static std::vector<int> all_axes(Var<Real> x) {
        std::vector<int> ax(static_cast<size_t>(x.val().rank()));
        for (size_t i = 0; i < ax.size(); ++i) ax[i] = static_cast<int>(i);
        return ax;
    }

    Var<Real> push(Node&& n) {
        if (n.op != Op::Leaf) {
            n.needs_grad = false;
            for (int32_t id : n.in) n.needs_grad = n.needs_grad || nodes_[static_cast<size_t>(id)].needs_grad;
        }
        if (check_finite && !n.val.all_finite())
            throw NumericError(std::string("non-finite output of ") + op_name(n.op) + " at node " + std::to_string(nodes_.size()));
        nodes_.push_back(std::move(n));
        return Var<Real>{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    template <typename Fn>
    Var<Real> unary(Op op, Var<Real> x, Fn&& fn) {
        const Tensor<Real>& X = x.val();
        Node n;
        n.op = op;
        n.in = {x.id};
        n.val = Tensor<Real>(X.shape);
        for (int64_t i = 0; i < X.numel(); ++i) n.val[i] = fn(X[i]);
        return push(std::move(n));
    }

    Var<Real> binary(Op op, Var<Real> a, Var<Real> b) {
        const Tensor<Real>& A = a.val();
        const Tensor<Real>& B = b.val();
        Shape out = broadcast_shape(A.shape, B.shape, op_name(op));
        Node n;
        n.op = op;
        n.in = {a.id, b.id};
        n.val = Tensor<Real>(out);
        if (A.shape == B.shape) {
            detail::CMapA<Real> ma(A.data.data(), static_cast<Eigen::Index>(A.data.size()));
            detail::CMapA<Real> mb(B.data.data(), static_cast<Eigen::Index>(B.data.size()));
            detail::MapA<Real> mo(n.val.data.data(), static_cast<Eigen::Index>(n.val.data.size()));
            switch (op) {
                case Op::Add: mo = ma + mb; break;
                case Op::Sub: mo = ma - mb; break;
                case Op::Mul: mo = ma * mb; break;
                case Op::Div: mo = ma / mb; break;
                default: break;
            }
        } else {
            const auto sa = broadcast_strides(A.shape, out);
            const auto sb = broadcast_strides(B.shape, out);
            Real* o = n.val.data.data();
            const Real* pa = A.data.data();
            const Real* pb = B.data.data();
            switch (op) {
                case Op::Add: detail::for_each_broadcast(out, sa, sb, [&](int64_t oi, int64_t ai, int64_t bi) { o[oi] = pa[ai] + pb[bi]; }); break;
                case Op::Sub: detail::for_each_broadcast(out, sa, sb, [&](int64_t oi, int64_t ai, int64_t bi) { o[oi] = pa[ai] - pb[bi]; }); break;
                case Op::Mul: detail::for_each_broadcast(out, sa, sb, [&](int64_t oi, int64_t ai, int64_t bi) { o[oi] = pa[ai] * pb[bi]; }); break;
                case Op::Div: detail::for_each_broadcast(out, sa, sb, [&](int64_t oi, int64_t ai, int64_t bi) { o[oi] = pa[ai] / pb[bi]; }); break;
                default: break;
            }
        }
        return push(std::move(n));
    }

    Var<Real> softmax_like(Op op, Var<Real> x, int axis) {
        const Tensor<Real>& X = x.val();
        if (axis < 0) axis += X.rank();
        if (axis < 0 || axis >= X.rank()) throw NumericError("softmax: bad axis for " + shape_str(X.shape));
        Node n;
        n.op = op;
        n.in = {x.id};
        n.attrs.axis = axis;
        n.val = Tensor<Real>(X.shape);
        int64_t outer = 1, inner = 1;
        const int64_t ax = X.shape[static_cast<size_t>(axis)];
        for (int i = 0; i < axis; ++i) outer *= X.shape[static_cast<size_t>(i)];
        for (int i = axis + 1; i < X.rank(); ++i) inner *= X.shape[static_cast<size_t>(i)];
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * ax * inner + in;
                Real mx = X[base];
                for (int64_t k = 1; k < ax; ++k) mx = std::max(mx, X[base + k * inner]);
                double denom = 0;
                for (int64_t k = 0; k < ax; ++k) denom += std::exp(static_cast<double>(X[base + k * inner] - mx));
                if (op == Op::Softmax) {
                    for (int64_t k = 0; k < ax; ++k)
                        n.val[base + k * inner] = static_cast<Real>(std::exp(static_cast<double>(X[base + k * inner] - mx)) / denom);
                } else {
                    const double lse = std::log(denom);
                    for (int64_t k = 0; k < ax; ++k)
                        n.val[base + k * inner] = static_cast<Real>(static_cast<double>(X[base + k * inner] - mx) - lse);
                }
            }
        }
        return push(std::move(n));
    }

    Var<Real> reduce(Op op, Var<Real> x, std::vector<int> axes, bool keepdims) {
        const Tensor<Real>& X = x.val();
        std::vector<bool> is_red(static_cast<size_t>(X.rank()), false);
        for (int a : axes) {
            if (a < 0) a += X.rank();
            if (a < 0 || a >= X.rank()) throw NumericError("reduce: bad axis for " + shape_str(X.shape));
            is_red[static_cast<size_t>(a)] = true;
        }
        Shape out_shape;
        int64_t count = 1;
        for (int i = 0; i < X.rank(); ++i) {
            if (is_red[static_cast<size_t>(i)]) {
                count *= X.shape[static_cast<size_t>(i)];
                if (keepdims) out_shape.push_back(1);
            } else {
                out_shape.push_back(X.shape[static_cast<size_t>(i)]);
            }
        }
        if (out_shape.empty()) out_shape.push_back(1);
        Node n;
        n.op = op;
        n.in = {x.id};
        n.attrs.keepdims = keepdims;
        n.attrs.axes.clear();
        for (size_t i = 0; i < is_red.size(); ++i)
            if (is_red[i]) n.attrs.axes.push_back(static_cast<int>(i));
        n.val = Tensor<Real>(out_shape);
        // accumulate in double for stability
        std::vector<double> acc(static_cast<size_t>(n.val.numel()), 0.0);
        const auto st = row_strides(X.shape);
        std::vector<int64_t> idx(static_cast<size_t>(X.rank()), 0);
        const auto ost = row_strides(out_shape);
        for (int64_t lin = 0; lin < X.numel(); ++lin) {
            int64_t oi = 0;
            size_t od = 0;
            for (int d = 0; d < X.rank(); ++d) {
                if (is_red[static_cast<size_t>(d)]) {
                    if (keepdims) ++od;
                    continue;
                }
                oi += idx[static_cast<size_t>(d)] * ost[od];
                ++od;
            }
            acc[static_cast<size_t>(oi)] += static_cast<double>(X[lin]);
            for (int d = X.rank() - 1; d >= 0; --d) {
                if (++idx[static_cast<size_t>(d)] < X.shape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
            }
        }
        const double inv = op == Op::Mean ? 1.0 / static_cast<double>(count) : 1.0;
        for (int64_t i = 0; i < n.val.numel(); ++i) n.val[i] = static_cast<Real>(acc[static_cast<size_t>(i)] * inv);
        return push(std::move(n));
    }

    // -- backward ------------------------------------------------------------

    Tensor<Real>* grad_sink(int32_t id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad) return nullptr;
        if (n.grad.data.empty()) n.grad = Tensor<Real>::zeros(n.val.shape);
        return &n.grad;
    }

    void backward_node(int32_t i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        const Tensor<Real>& gy = n.grad;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Matmul: {
                const Tensor<Real>& A = nodes_[static_cast<size_t>(n.in[0])].val;
                const Tensor<Real>& B = nodes_[static_cast<size_t>(n.in[1])].val;
                detail::CMapM<Real> mA(A.data.data(), A.shape[0], A.shape[1]);
                detail::CMapM<Real> mB(B.data.data(), B.shape[0], B.shape[1]);
                detail::CMapM<Real> mG(gy.data.data(), gy.shape[0], gy.shape[1]);
                const bool ta = n.attrs.trans_a, tb = n.attrs.trans_b;
                if (Tensor<Real>* ga = grad_sink(n.in[0])) {
                    detail::MapM<Real> mGA(ga->data.data(), A.shape[0], A.shape[1]);
                    if (!ta && !tb) mGA.noalias() += mG * mB.transpose();
                    else if (ta && !tb) mGA.noalias() += mB * mG.transpose();
                    else if (!ta && tb) mGA.noalias() += mG * mB;
                    else mGA.noalias() += mB.transpose() * mG.transpose();
                }
                if (Tensor<Real>* gb = grad_sink(n.in[1])) {
                    detail::MapM<Real> mGB(gb->data.data(), B.shape[0], B.shape[1]);
                    if (!ta && !tb) mGB.noalias() += mA.transpose() * mG;
                    else if (ta && !tb) mGB.noalias() += mA * mG;
                    else if (!ta && tb) mGB.noalias() += mG.transpose() * mA;
                    else mGB.noalias() += mG.transpose() * mA.transpose();
                }
                break;
            }
            case Op::Conv2d: {
                const Tensor<Real>& X = nodes_[static_cast<size_t>(n.in[0])].val;
                const Tensor<Real>& W = nodes_[static_cast<size_t>(n.in[1])].val;
                const int64_t C = X.shape[0];
                const int64_t Co = W.shape[0], kh = W.shape[2], kw = W.shape[3];
                const int64_t Ho = n.val.shape[1], Wo = n.val.shape[2];
                detail::CMapM<Real> mG(gy.data.data(), Co, Ho * Wo);
                Tensor<Real>* gx = grad_sink(n.in[0]);
                Tensor<Real>* gw = grad_sink(n.in[1]);
                if (gw) {
                    std::vector<Real> col;
                    im2col(X, kh, kw, n.attrs.stride_h, n.attrs.stride_w, n.attrs.pad_h, n.attrs.pad_w, Ho, Wo, col);
                    detail::CMapM<Real> mCol(col.data(), C * kh * kw, Ho * Wo);
                    detail::MapM<Real> mGW(gw->data.data(), Co, C * kh * kw);
                    mGW.noalias() += mG * mCol.transpose();
                }
                if (gx) {
                    std::vector<Real> dcol(static_cast<size_t>(C * kh * kw * Ho * Wo));
                    detail::CMapM<Real> mW(W.data.data(), Co, C * kh * kw);
                    detail::MapM<Real> mDcol(dcol.data(), C * kh * kw, Ho * Wo);
                    mDcol.noalias() = mW.transpose() * mG;
                    col2im_add(dcol, *gx, kh, kw, n.attrs.stride_h, n.attrs.stride_w, n.attrs.pad_h, n.attrs.pad_w, Ho, Wo);
                }
                break;
            }
            case Op::UpsampleF2: {
                if (Tensor<Real>* gx = grad_sink(n.in[0])) {
                    const int64_t F = gx->shape[2];
                    const int64_t out_w = n.attrs.out_w;
                    const int64_t rows = gx->shape[0] * gx->shape[1];
                    for (int64_t r = 0; r < rows; ++r) {
                        const Real* g = gy.data.data() + r * out_w;
                        Real* dst = gx->data.data() + r * F;
                        for (int64_t f = 0; f < out_w; ++f) dst[f / 2] += g[f];
                    }
                }
                break;
            }
            case Op::Transpose: {
                if (Tensor<Real>* gx = grad_sink(n.in[0])) {
                    std::vector<int> inv(n.attrs.axes.size());
                    for (size_t k = 0; k < n.attrs.axes.size(); ++k) inv[static_cast<size_t>(n.attrs.axes[k])] = static_cast<int>(k);
                    Tensor<Real> tmp(gx->shape);
                    permute_copy(gy, tmp, inv);
                    detail::reduce_into(tmp, *gx);
                }
                break;
            }
            case Op::Reshape: {
                if (Tensor<Real>* gx = grad_sink(n.in[0])) {
                    detail::MapA<Real> d(gx->data.data(), static_cast<Eigen::Index>(gx->data.size()));
                    detail::CMapA<Real> s(gy.data.data(), static_cast<Eigen::Index>(gy.data.size()));
                    d += s;
                }
                break;
            }
            case Op::Concat: {
                const int axis = n.attrs.axis;
                const int r = n.val.rank();
                int64_t outer = 1, inner = 1;
                for (int d = 0; d < axis; ++d) outer *= n.val.shape[static_cast<size_t>(d)];
                for (int d = axis + 1; d < r; ++d) inner *= n.val.shape[static_cast<size_t>(d)];
                const int64_t total = n.val.shape[static_cast<size_t>(axis)];
                int64_t off = 0;
                for (int32_t id : n.in) {
                    const int64_t ax = nodes_[static_cast<size_t>(id)].val.shape[static_cast<size_t>(axis)];
                    if (Tensor<Real>* gx = grad_sink(id)) {
                        for (int64_t o = 0; o < outer; ++o) {
                            const Real* src = gy.data.data() + (o * total + off) * inner;
                            Real* dst = gx->data.data() + o * ax * inner;
                            for (int64_t k = 0; k < ax * inner; ++k) dst[k] += src[k];
                        }
                    }
                    off += ax;
                }
                break;
            }
            case Op::Slice: {
                if (Tensor<Real>* gx = grad_sink(n.in[0])) copy_region(gy, *gx, n.attrs.starts, /*scatter=*/true);
                break;
            }
            case Op::Add:
            case Op::Sub: {
                if (Tensor<Real>* ga = grad_sink(n.in[0])) detail::reduce_into(gy, *ga);
                if (Tensor<Real>* gb = grad_sink(n.in[1])) {
                    if (n.op == Op::Add) {
                        detail::reduce_into(gy, *gb);
                    } else {
                        Tensor<Real> neg(gy.shape);
                        for (int64_t k = 0; k < gy.numel(); ++k) neg[k] = -gy[k];
                        detail::reduce_into(neg, *gb);
                    }
                }
                break;
            }
            case Op::Mul:
            case Op::Div: {
                const Tensor<Real>& A = nodes_[static_cast<size_t>(n.in[0])].val;
                const Tensor<Real>& B = nodes_[static_cast<size_t>(n.in[1])].val;
                const Shape& out = n.val.shape;
                const auto sa = broadcast_strides(A.shape, out);
                const auto sb = broadcast_strides(B.shape, out);
                Tensor<Real>* ga = grad_sink(n.in[0]);
                Tensor<Real>* gb = grad_sink(n.in[1]);
                if (ga || gb) {
                    Tensor<Real> ta_full = ga ? Tensor<Real>(out) : Tensor<Real>();
                    Tensor<Real> tb_full = gb ? Tensor<Real>(out) : Tensor<Real>();
                    const Real* pa = A.data.data();
                    const Real* pb = B.data.data();
                    const Real* pg = gy.data.data();
                    Real* da = ga ? ta_full.data.data() : nullptr;
                    Real* db = gb ? tb_full.data.data() : nullptr;
                    if (n.op == Op::Mul) {
                        detail::for_each_broadcast(out, sa, sb, [&](int64_t oi, int64_t ai, int64_t bi) {
                            if (da) da[oi] = pg[oi] * pb[bi];
                            if (db) db[oi] = pg[oi] * pa[ai];
                        });
                    } else {
                        detail::for_each_broadcast(out, sa, sb, [&](int64_t oi, int64_t ai, int64_t bi) {
                            const Real ib = Real(1) / pb[bi];
                            if (da) da[oi] = pg[oi] * ib;
                            if (db) db[oi] = -pg[oi] * pa[ai] * ib * ib;
                        });
                    }
                    if (ga) detail::reduce_into(ta_full, *ga);
                    if (gb) detail::reduce_into(tb_full, *gb);
                }
                break;
            }
            case Op::Tanh: {
                if (Tensor<Real>* gx = grad_sink(n.in[0]))
                    for (int64_t k = 0; k < gy.numel(); ++k) (*gx)[k] += gy[k] * (Real(1) - n.val[k] * n.val[k]);
                break;
            }
            case Op::Relu: {
                const Tensor<Real>& X = nodes_[static_cast<size_t>(n.in[0])].val;
                if (Tensor<Real>* gx = grad_sink(n.in[0]))
                    for (int64_t k = 0; k < gy.numel(); ++k) (*gx)[k] += X[k] > Real(0) ? gy[k] : Real(0);
                break;
            }
            case Op::Sigmoid: {
                if (Tensor<Real>* gx = grad_sink(n.in[0]))
                    for (int64_t k = 0; k < gy.numel(); ++k) (*gx)[k] += gy[k] * n.val[k] * (Real(1) - n.val[k]);
                break;
            }
            case Op::Log: {
                const Tensor<Real>& X = nodes_[static_cast<size_t>(n.in[0])].val;
                if (Tensor<Real>* gx = grad_sink(n.in[0]))
                    for (int64_t k = 0; k < gy.numel(); ++k) (*gx)[k] += gy[k] / X[k];
                break;
            }
            case Op::Exp: {
                if (Tensor<Real>* gx = grad_sink(n.in[0]))
                    for (int64_t k = 0; k < gy.numel(); ++k) (*gx)[k] += gy[k] * n.val[k];
                break;
            }
            case Op::Square: {
                const Tensor<Real>& X = nodes_[static_cast<size_t>(n.in[0])].val;
                if (Tensor<Real>* gx = grad_sink(n.in[0]))
                    for (int64_t k = 0; k < gy.numel(); ++k) (*gx)[k] += Real(2) * gy[k] * X[k];
                break;
            }
            case Op::Sqrt: {
                if (Tensor<Real>* gx = grad_sink(n.in[0]))
                    for (int64_t k = 0; k < gy.numel(); ++k) (*gx)[k] += gy[k] / (Real(2) * n.val[k]);
                break;
            }
            case Op::Abs: {
                const Tensor<Real>& X = nodes_[static_cast<size_t>(n.in[0])].val;
                if (Tensor<Real>* gx = grad_sink(n.in[0]))
                    for (int64_t k = 0; k < gy.numel(); ++k) (*gx)[k] += X[k] > Real(0) ? gy[k] : (X[k] < Real(0) ? -gy[k] : Real(0));
                break;
            }
            case Op::Softmax:
            case Op::LogSoftmax: {
                Tensor<Real>* gx = grad_sink(n.in[0]);
                if (!gx) break;
                const int axis = n.attrs.axis;
                int64_t outer = 1, inner = 1;
                const int64_t ax = n.val.shape[static_cast<size_t>(axis)];
                for (int d = 0; d < axis; ++d) outer *= n.val.shape[static_cast<size_t>(d)];
                for (int d = axis + 1; d < n.val.rank(); ++d) inner *= n.val.shape[static_cast<size_t>(d)];
                for (int64_t o = 0; o < outer; ++o) {
                    for (int64_t in = 0; in < inner; ++in) {
                        const int64_t base = o * ax * inner + in;
                        if (n.op == Op::Softmax) {
                            double dot = 0;
                            for (int64_t k = 0; k < ax; ++k) dot += static_cast<double>(gy[base + k * inner]) * static_cast<double>(n.val[base + k * inner]);
                            for (int64_t k = 0; k < ax; ++k)
                                (*gx)[base + k * inner] += n.val[base + k * inner] * (gy[base + k * inner] - static_cast<Real>(dot));
                        } else {
                            double gsum = 0;
                            for (int64_t k = 0; k < ax; ++k) gsum += static_cast<double>(gy[base + k * inner]);
                            for (int64_t k = 0; k < ax; ++k)
                                (*gx)[base + k * inner] += gy[base + k * inner] - static_cast<Real>(std::exp(static_cast<double>(n.val[base + k * inner])) * gsum);
                        }
                    }
                }
                break;
            }
            case Op::Mean:
            case Op::Sum: {
                Tensor<Real>* gx = grad_sink(n.in[0]);
                if (!gx) break;
                const Tensor<Real>& X = nodes_[static_cast<size_t>(n.in[0])].val;
                std::vector<bool> is_red(static_cast<size_t>(X.rank()), false);
                int64_t count = 1;
                for (int a : n.attrs.axes) {
                    is_red[static_cast<size_t>(a)] = true;
                    count *= X.shape[static_cast<size_t>(a)];
                }
                const Real scale = n.op == Op::Mean ? Real(1) / static_cast<Real>(count) : Real(1);
                const auto ost = row_strides(n.val.shape);
                std::vector<int64_t> idx(static_cast<size_t>(X.rank()), 0);
                for (int64_t lin = 0; lin < X.numel(); ++lin) {
                    int64_t oi = 0;
                    size_t od = 0;
                    for (int d = 0; d < X.rank(); ++d) {
                        if (is_red[static_cast<size_t>(d)]) {
                            if (n.attrs.keepdims) ++od;
                            continue;
                        }
                        oi += idx[static_cast<size_t>(d)] * ost[od];
                        ++od;
                    }
                    (*gx)[lin] += gy[oi] * scale;
                    for (int d = X.rank() - 1; d >= 0; --d) {
                        if (++idx[static_cast<size_t>(d)] < X.shape[static_cast<size_t>(d)]) break;
                        idx[static_cast<size_t>(d)] = 0;
                    }
                }
                break;
            }
            case Op::LayerNorm: {
                Tensor<Real>* gx = grad_sink(n.in[0]);
                if (!gx) break;
                const Tensor<Real>& invstd = n.saved[0];
                const int64_t inner = n.val.shape.back();
                const int64_t outer = n.val.numel() / inner;
                for (int64_t o = 0; o < outer; ++o) {
                    const Real* y = n.val.data.data() + o * inner;
                    const Real* g = gy.data.data() + o * inner;
                    Real* dx = gx->data.data() + o * inner;
                    double gm = 0, gym = 0;
                    for (int64_t k = 0; k < inner; ++k) {
                        gm += g[k];
                        gym += static_cast<double>(g[k]) * static_cast<double>(y[k]);
                    }
                    gm /= static_cast<double>(inner);
                    gym /= static_cast<double>(inner);
                    const double is = invstd[o];
                    for (int64_t k = 0; k < inner; ++k)
                        dx[k] += static_cast<Real>(is * (static_cast<double>(g[k]) - gm - static_cast<double>(y[k]) * gym));
                }
                break;
            }
            case Op::Istft: {
                const int64_t fft = n.attrs.fft_size, hop = n.attrs.hop;
                const int64_t pad_front = n.attrs.pad_front, orig_len = n.attrs.orig_len;
                const Tensor<Real>& R = nodes_[static_cast<size_t>(n.in[0])].val;
                const int64_t T = R.shape[0], F = R.shape[1];
                const int64_t buf_len = (T - 1) * hop + fft;
                Tensor<Real>* gre = grad_sink(n.in[0]);
                Tensor<Real>* gim = grad_sink(n.in[1]);
                if (!gre && !gim) break;
                const std::vector<Real> win = sqrt_hann<Real>(fft);
                std::vector<Real> buf(static_cast<size_t>(buf_len), Real(0));
                std::copy_n(gy.data.data(), orig_len, buf.data() + pad_front);
                std::vector<Real> fgrad(static_cast<size_t>(fft));
                std::vector<Real> dre(static_cast<size_t>(F)), dim(static_cast<size_t>(F));
                for (int64_t t = 0; t < T; ++t) {
                    const Real* src = buf.data() + t * hop;
                    for (int64_t k = 0; k < fft; ++k) fgrad[static_cast<size_t>(k)] = src[k] * win[static_cast<size_t>(k)];
                    irfft_adjoint(fgrad.data(), fft, dre.data(), dim.data());
                    if (gre)
                        for (int64_t k = 0; k < F; ++k) (*gre)[t * F + k] += dre[static_cast<size_t>(k)];
                    if (gim)
                        for (int64_t k = 0; k < F; ++k) (*gim)[t * F + k] += dim[static_cast<size_t>(k)];
                }
                break;
            }
        }
    }

    // -- conv helpers ----------------------------------------------------------

    static void im2col(const Tensor<Real>& X, int64_t kh, int64_t kw, int64_t sh, int64_t sw, int64_t ph, int64_t pw, int64_t Ho, int64_t Wo, std::vector<Real>& col) {
        const int64_t C = X.shape[0], H = X.shape[1], W = X.shape[2];
        col.assign(static_cast<size_t>(C * kh * kw * Ho * Wo), Real(0));
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t ki = 0; ki < kh; ++ki) {
                for (int64_t kj = 0; kj < kw; ++kj) {
                    Real* dst = col.data() + ((c * kh + ki) * kw + kj) * Ho * Wo;
                    const Real* src_c = X.data.data() + c * H * W;
                    for (int64_t oh = 0; oh < Ho; ++oh) {
                        const int64_t ih = oh * sh - ph + ki;
                        Real* drow = dst + oh * Wo;
                        if (ih < 0 || ih >= H) continue; // stays zero
                        const Real* srow = src_c + ih * W;
                        for (int64_t ow = 0; ow < Wo; ++ow) {
                            const int64_t iw = ow * sw - pw + kj;
                            if (iw >= 0 && iw < W) drow[ow] = srow[iw];
                        }
                    }
                }
            }
        }
    }

    static void col2im_add(const std::vector<Real>& col, Tensor<Real>& gx, int64_t kh, int64_t kw, int64_t sh, int64_t sw, int64_t ph, int64_t pw, int64_t Ho, int64_t Wo) {
        const int64_t C = gx.shape[0], H = gx.shape[1], W = gx.shape[2];
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t ki = 0; ki < kh; ++ki) {
                for (int64_t kj = 0; kj < kw; ++kj) {
                    const Real* src = col.data() + ((c * kh + ki) * kw + kj) * Ho * Wo;
                    Real* dst_c = gx.data.data() + c * H * W;
                    for (int64_t oh = 0; oh < Ho; ++oh) {
                        const int64_t ih = oh * sh - ph + ki;
                        if (ih < 0 || ih >= H) continue;
                        const Real* srow = src + oh * Wo;
                        Real* drow = dst_c + ih * W;
                        for (int64_t ow = 0; ow < Wo; ++ow) {
                            const int64_t iw = ow * sw - pw + kj;
                            if (iw >= 0 && iw < W) drow[iw] += srow[ow];
                        }
                    }
                }
            }
        }
    }

    static void permute_copy(const Tensor<Real>& src, Tensor<Real>& dst, const std::vector<int>& perm) {
        const int r = src.rank();
        const auto sst = row_strides(src.shape);
        std::vector<int64_t> stp(static_cast<size_t>(r));
        for (int i = 0; i < r; ++i) stp[static_cast<size_t>(i)] = sst[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        int64_t si = 0;
        const int64_t n = dst.numel();
        for (int64_t lin = 0; lin < n; ++lin) {
            dst[lin] = src[si];
            for (int d = r - 1; d >= 0; --d) {
                si += stp[static_cast<size_t>(d)];
                if (++idx[static_cast<size_t>(d)] < dst.shape[static_cast<size_t>(d)]) break;
                si -= stp[static_cast<size_t>(d)] * dst.shape[static_cast<size_t>(d)];
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }

    /// scatter=false: dst = src[starts...]; scatter=true: dst[starts...] += src.
    static void copy_region(const Tensor<Real>& src, Tensor<Real>& dst, const std::vector<int64_t>& starts, bool scatter) {
        const Tensor<Real>& big = scatter ? dst : src;
        const Tensor<Real>& small = scatter ? src : dst;
        const int r = big.rank();
        const auto bst = row_strides(big.shape);
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        int64_t bi = 0;
        for (int d = 0; d < r; ++d) bi += starts[static_cast<size_t>(d)] * bst[static_cast<size_t>(d)];
        const int64_t n = small.numel();
        Tensor<Real>& dmut = dst;
        for (int64_t lin = 0; lin < n; ++lin) {
            if (scatter) dmut[bi] += src[lin];
            else dmut[lin] = src[bi];
            for (int d = r - 1; d >= 0; --d) {
                bi += bst[static_cast<size_t>(d)];
                if (++idx[static_cast<size_t>(d)] < small.shape[static_cast<size_t>(d)]) break;
                bi -= bst[static_cast<size_t>(d)] * small.shape[static_cast<size_t>(d)];
                idx[static_cast<size_t>(d)] = 0;
            }
        }
    }
};

// Convenience overloads; the tape is taken from the left operand.
template <typename Real>
Var<Real> operator+(Var<Real> a, Var<Real> b) { return a.tape->add(a, b); }
template <typename Real>
Var<Real> operator-(Var<Real> a, Var<Real> b) { return a.tape->sub(a, b); }
template <typename Real>
Var<Real> operator*(Var<Real> a, Var<Real> b) { return a.tape->mul(a, b); }
template <typename Real>
Var<Real> operator/(Var<Real> a, Var<Real> b) { return a.tape->div(a, b); }

} // namespace eqse
