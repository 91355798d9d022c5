#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uvga/kernels.hpp"
#include "uvga/params.hpp"
#include "uvga/tensor.hpp"

namespace uvga {

enum class Op : int {
    Input, Const, Param,
    Add, Sub, Mul, Div,
    Exp, Log, Sqrt, Abs, Sigmoid, Softplus, Tanh,
    AddScalar, MulScalar,
    Matmul, BatchMatmul,
    Softmax, LayerNorm,
    Conv2d, UpsampleNearest,
    Concat, Slice, Reshape, Permute,
    ReduceSum, ReduceMean, ReduceMax,
    Gather, StopGrad, Custom,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Const: return "const";
        case Op::Param: return "param";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Abs: return "abs";
        case Op::Sigmoid: return "sigmoid";
        case Op::Softplus: return "softplus";
        case Op::Tanh: return "tanh";
        case Op::AddScalar: return "add_scalar";
        case Op::MulScalar: return "mul_scalar";
        case Op::Matmul: return "matmul";
        case Op::BatchMatmul: return "batch_matmul";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layer_norm";
        case Op::Conv2d: return "conv2d";
        case Op::UpsampleNearest: return "upsample_nearest";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Reshape: return "reshape";
        case Op::Permute: return "permute";
        case Op::ReduceSum: return "reduce_sum";
        case Op::ReduceMean: return "reduce_mean";
        case Op::ReduceMax: return "reduce_max";
        case Op::Gather: return "gather";
        case Op::StopGrad: return "stop_gradient";
        case Op::Custom: return "custom";
    }
    return "?";
}

/// Reverse-mode tape over the fixed operation catalog. Construction is
/// evaluation: every op computes its value eagerly, so a fully built graph
/// is a completed forward pass; backward() then walks the tape in reverse.
/// Rebuilding the same graph from identical inputs reproduces bit-identical
/// values. Tensors held by nodes are immutable once produced.
template <class T>
class Graph {
public:
    using Id = int;

    struct Node {
        Op op;
        std::vector<Id> args;
        std::vector<int> iattrs;
        std::vector<double> fattrs;
        Tensor<T> val;
        Tensor<T> grad;
        bool has_grad = false;
        bool needs_grad = false;
        std::string label;
        ParamStore<T>* store = nullptr;
        std::string pname;
        std::function<void(Graph&, Id)> custom_backward;
        std::shared_ptr<void> aux;
    };

    /// Scan every produced value for NaN/Inf and name the offending op.
    bool check_finite = true;

    // ---- leaves -----------------------------------------------------------

    Id input(const std::string& name, Tensor<T> v) {
        Id id = push(Op::Input, {}, std::move(v), name);
        nodes_[id].needs_grad = true;
        return id;
    }

    Id constant(Tensor<T> v, const std::string& label = "") {
        return push(Op::Const, {}, std::move(v), label);
    }

    Id scalar_const(T x) { return constant(Tensor<T>::scalar(x)); }

    Id param(ParamStore<T>& store, const std::string& name) {
        Tensor<T> v = store.value(name);  // snapshot of the current value
        Id id = push(Op::Param, {}, std::move(v), name);
        nodes_[id].needs_grad = true;
        nodes_[id].store = &store;
        nodes_[id].pname = name;
        return id;
    }

    // ---- elementwise ------------------------------------------------------
    // Binary ops accept equal shapes, a scalar rhs, or an rhs whose shape is
    // a trailing suffix of the lhs (broadcast over leading dims).

    Id add(Id a, Id b) { return binary(Op::Add, a, b); }
    Id sub(Id a, Id b) { return binary(Op::Sub, a, b); }
    Id mul(Id a, Id b) { return binary(Op::Mul, a, b); }
    Id div(Id a, Id b) { return binary(Op::Div, a, b); }

    Id exp(Id a) { return unary(Op::Exp, a, [](T x) { return std::exp(x); }); }
    Id log(Id a) { return unary(Op::Log, a, [](T x) { return std::log(x); }); }
    Id sqrt(Id a) { return unary(Op::Sqrt, a, [](T x) { return std::sqrt(x); }); }
    Id abs(Id a) { return unary(Op::Abs, a, [](T x) { return std::abs(x); }); }
    Id sigmoid(Id a) {
        return unary(Op::Sigmoid, a, [](T x) {
            return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        });
    }
    Id softplus(Id a) {
        return unary(Op::Softplus, a, [](T x) {
            if (x > T(30)) return x;
            if (x < T(-30)) return std::exp(x);
            return std::log1p(std::exp(x));
        });
    }
    Id tanh(Id a) { return unary(Op::Tanh, a, [](T x) { return std::tanh(x); }); }

    Id add_scalar(Id a, T c) {
        Tensor<T> out = val(a);
        for (auto& x : out.v) x += c;
        Id id = push(Op::AddScalar, {a}, std::move(out));
        nodes_[id].fattrs = {static_cast<double>(c)};
        return id;
    }

    Id mul_scalar(Id a, T c) {
        Tensor<T> out = val(a);
        for (auto& x : out.v) x *= c;
        Id id = push(Op::MulScalar, {a}, std::move(out));
        nodes_[id].fattrs = {static_cast<double>(c)};
        return id;
    }

    // ---- linear algebra ---------------------------------------------------

    Id matmul(Id a, Id b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
            fail("matmul shape mismatch " + shape_str(A.shape) + " x " + shape_str(B.shape));
        Tensor<T> out({A.dim(0), B.dim(1)});
        gemm_nn(A.v.data(), B.v.data(), out.v.data(), A.dim(0), A.dim(1), B.dim(1));
        return push(Op::Matmul, {a, b}, std::move(out));
    }

    Id batch_matmul(Id a, Id b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(1))
            fail("batch_matmul shape mismatch " + shape_str(A.shape) + " x " + shape_str(B.shape));
        const int Bt = A.dim(0), M = A.dim(1), K = A.dim(2), N = B.dim(2);
        Tensor<T> out({Bt, M, N});
        gemm_batched_nn(A.v.data(), B.v.data(), out.v.data(), Bt, M, K, N);
        return push(Op::BatchMatmul, {a, b}, std::move(out));
    }

    /// Softmax over the last axis.
    Id softmax(Id a) {
        const Tensor<T>& A = val(a);
        if (A.rank() < 1) fail("softmax needs rank >= 1");
        const int n = A.dim(A.rank() - 1);
        const std::int64_t rows = A.size() / n;
        Tensor<T> out(A.shape);
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* x = A.v.data() + r * n;
            T* y = out.v.data() + r * n;
            T mx = x[0];
            for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
            T sum = T(0);
            for (int i = 0; i < n; ++i) {
                y[i] = std::exp(x[i] - mx);
                sum += y[i];
            }
            for (int i = 0; i < n; ++i) y[i] /= sum;
        }
        return push(Op::Softmax, {a}, std::move(out));
    }

    /// Layer normalization over the last axis with affine gain/bias.
    Id layer_norm(Id x, Id gamma, Id beta, T eps = T(1e-5)) {
        const Tensor<T>& X = val(x);
        const int D = X.dim(X.rank() - 1);
        if (val(gamma).shape != Shape{D} || val(beta).shape != Shape{D})
            fail("layer_norm gain/bias must have shape [" + std::to_string(D) + "]");
        const std::int64_t rows = X.size() / D;
        Tensor<T> out(X.shape);
        const T* gm = val(gamma).v.data();
        const T* bt = val(beta).v.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xi = X.v.data() + r * D;
            T* yi = out.v.data() + r * D;
            T mu = T(0);
            for (int i = 0; i < D; ++i) mu += xi[i];
            mu /= T(D);
            T var = T(0);
            for (int i = 0; i < D; ++i) var += (xi[i] - mu) * (xi[i] - mu);
            var /= T(D);
            const T inv = T(1) / std::sqrt(var + eps);
            for (int i = 0; i < D; ++i) yi[i] = gm[i] * ((xi[i] - mu) * inv) + bt[i];
        }
        Id id = push(Op::LayerNorm, {x, gamma, beta}, std::move(out));
        nodes_[id].fattrs = {static_cast<double>(eps)};
        return id;
    }

    // ---- convolution ------------------------------------------------------

    /// x [Cin,H,W], w [Cout, Cin/groups, kh, kw], optional bias [Cout].
    Id conv2d(Id x, Id w, Id bias, int stride, int pad, int groups = 1) {
        const Tensor<T>&X = val(x), &W = val(w);
        if (X.rank() != 3 || W.rank() != 4) fail("conv2d expects x[C,H,W], w[Co,Ci/g,kh,kw]");
        const int Cin = X.dim(0), H = X.dim(1), Wd = X.dim(2);
        const int Cout = W.dim(0), Cg = W.dim(1), kh = W.dim(2), kw = W.dim(3);
        if (groups < 1 || Cin % groups != 0 || Cout % groups != 0 || Cg != Cin / groups)
            fail("conv2d group layout mismatch: Cin=" + std::to_string(Cin) + " groups=" + std::to_string(groups));
        if (bias >= 0 && val(bias).shape != Shape{Cout}) fail("conv2d bias must be [Cout]");
        const int Ho = conv_out_extent(H, kh, stride, pad);
        const int Wo = conv_out_extent(Wd, kw, stride, pad);
        if (Ho <= 0 || Wo <= 0) fail("conv2d output would be empty");
        Tensor<T> out({Cout, Ho, Wo}, T(0));
        const int K = Cg * kh * kw;
        const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
        std::vector<T> col(static_cast<size_t>(K) * P);
        const int Cog = Cout / groups;
        for (int g = 0; g < groups; ++g) {
            im2col(X.v.data() + static_cast<std::int64_t>(g) * Cg * H * Wd, Cg, H, Wd, kh, kw, stride, pad,
                   col.data());
            gemm_nn(W.v.data() + static_cast<std::int64_t>(g) * Cog * K, col.data(),
                    out.v.data() + static_cast<std::int64_t>(g) * Cog * P, Cog, K, static_cast<int>(P));
        }
        if (bias >= 0) {
            const T* b = val(bias).v.data();
            for (int c = 0; c < Cout; ++c) {
                T* o = out.v.data() + static_cast<std::int64_t>(c) * P;
                for (std::int64_t p = 0; p < P; ++p) o[p] += b[c];
            }
        }
        Id id = push(Op::Conv2d, bias >= 0 ? std::vector<Id>{x, w, bias} : std::vector<Id>{x, w}, std::move(out));
        nodes_[id].iattrs = {stride, pad, groups};
        return id;
    }

    /// Nearest-neighbour upsampling by an integer factor (the catalog's
    /// up-path primitive; pair with conv2d instead of transposed conv).
    Id upsample_nearest(Id x, int factor) {
        const Tensor<T>& X = val(x);
        if (X.rank() != 3 || factor < 1) fail("upsample_nearest expects x[C,H,W], factor >= 1");
        const int C = X.dim(0), H = X.dim(1), W = X.dim(2);
        Tensor<T> out({C, H * factor, W * factor});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H * factor; ++i) {
                const T* src = X.v.data() + (static_cast<std::int64_t>(c) * H + i / factor) * W;
                T* dst = out.v.data() + (static_cast<std::int64_t>(c) * H * factor + i) * (W * factor);
                for (int j = 0; j < W * factor; ++j) dst[j] = src[j / factor];
            }
        Id id = push(Op::UpsampleNearest, {x}, std::move(out));
        nodes_[id].iattrs = {factor};
        return id;
    }

    // ---- structure --------------------------------------------------------

    Id concat(const std::vector<Id>& parts, int axis) {
        if (parts.empty()) fail("concat of zero tensors");
        Shape s = val(parts[0]).shape;
        if (axis < 0 || axis >= static_cast<int>(s.size())) fail("concat axis out of range");
        int total = 0;
        for (Id p : parts) {
            const Shape& ps = val(p).shape;
            if (ps.size() != s.size()) fail("concat rank mismatch");
            for (size_t d = 0; d < s.size(); ++d)
                if (static_cast<int>(d) != axis && ps[d] != s[d]) fail("concat extent mismatch on axis " + std::to_string(d));
            total += ps[static_cast<size_t>(axis)];
        }
        Shape os = s;
        os[static_cast<size_t>(axis)] = total;
        Tensor<T> out(os);
        std::int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
        for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d) inner *= s[d];
        std::int64_t off = 0;
        for (Id p : parts) {
            const Tensor<T>& Pt = val(p);
            const std::int64_t ext = Pt.dim(axis) * inner;
            for (std::int64_t o = 0; o < outer; ++o)
                std::copy(Pt.v.begin() + o * ext, Pt.v.begin() + (o + 1) * ext,
                          out.v.begin() + o * (static_cast<std::int64_t>(total) * inner) + off);
            off += ext;
        }
        Id id = push(Op::Concat, parts, std::move(out));
        nodes_[id].iattrs = {axis};
        return id;
    }

    Id slice(Id x, int axis, int start, int stop) {
        const Tensor<T>& X = val(x);
        if (axis < 0 || axis >= X.rank()) fail("slice axis out of range");
        if (start < 0 || stop > X.dim(axis) || start >= stop) fail("slice range invalid");
        Shape os = X.shape;
        os[static_cast<size_t>(axis)] = stop - start;
        Tensor<T> out(os);
        std::int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= X.dim(d);
        for (int d = axis + 1; d < X.rank(); ++d) inner *= X.dim(d);
        const std::int64_t in_ext = static_cast<std::int64_t>(X.dim(axis)) * inner;
        const std::int64_t out_ext = static_cast<std::int64_t>(stop - start) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(X.v.begin() + o * in_ext + start * inner, X.v.begin() + o * in_ext + stop * inner,
                      out.v.begin() + o * out_ext);
        Id id = push(Op::Slice, {x}, std::move(out));
        nodes_[id].iattrs = {axis, start, stop};
        return id;
    }

    Id reshape(Id x, Shape s) {
        Tensor<T> out = val(x).reshaped(std::move(s));
        return push(Op::Reshape, {x}, std::move(out));
    }

    Id permute(Id x, const std::vector<int>& perm) {
        const Tensor<T>& X = val(x);
        if (static_cast<int>(perm.size()) != X.rank()) fail("permute rank mismatch");
        Shape os(perm.size());
        for (size_t d = 0; d < perm.size(); ++d) os[d] = X.dim(perm[d]);
        Tensor<T> out(os);
        permute_copy(X, perm, out);
        Id id = push(Op::Permute, {x}, std::move(out));
        nodes_[id].iattrs = perm;
        return id;
    }

    // ---- reductions -------------------------------------------------------

    Id reduce_sum(Id x) {
        T s = T(0);
        for (const T& v : val(x).v) s += v;
        return push(Op::ReduceSum, {x}, Tensor<T>::scalar(s));
    }

    Id reduce_mean(Id x) {
        T s = T(0);
        for (const T& v : val(x).v) s += v;
        return push(Op::ReduceMean, {x}, Tensor<T>::scalar(s / static_cast<T>(val(x).size())));
    }

    /// Max over all elements; subgradient routes to the first maximum.
    Id reduce_max(Id x) {
        const Tensor<T>& X = val(x);
        std::int64_t arg = 0;
        T m = X[0];
        for (std::int64_t i = 1; i < X.size(); ++i)
            if (X[i] > m) { m = X[i]; arg = i; }
        Id id = push(Op::ReduceMax, {x}, Tensor<T>::scalar(m));
        nodes_[id].iattrs = {static_cast<int>(arg)};
        return id;
    }

    /// Gather rows along axis 0 by an integer index map (repeats allowed).
    Id gather_rows(Id x, const std::vector<int>& idx) {
        const Tensor<T>& X = val(x);
        if (X.rank() < 1) fail("gather needs rank >= 1");
        std::int64_t row = X.size() / X.dim(0);
        Shape os = X.shape;
        os[0] = static_cast<int>(idx.size());
        Tensor<T> out(os);
        for (size_t m = 0; m < idx.size(); ++m) {
            if (idx[m] < 0 || idx[m] >= X.dim(0)) fail("gather index out of range");
            std::copy(X.v.begin() + idx[m] * row, X.v.begin() + (idx[m] + 1) * row,
                      out.v.begin() + static_cast<std::int64_t>(m) * row);
        }
        Id id = push(Op::Gather, {x}, std::move(out));
        nodes_[id].iattrs = idx;
        return id;
    }

    /// Identity value, but gradients do not flow past this node.
    Id stop_gradient(Id x) {
        Id id = push(Op::StopGrad, {x}, Tensor<T>(val(x)));
        nodes_[id].needs_grad = false;
        return id;
    }

    /// Escape hatch for ops with hand-written derivatives (the splat
    /// renderer). `backward_fn(graph, id)` must accumulate into the args'
    /// grads via accum_grad().
    Id custom(std::vector<Id> args, Tensor<T> value, std::function<void(Graph&, Id)> backward_fn,
              const std::string& label = "", std::shared_ptr<void> aux = nullptr) {
        Id id = push(Op::Custom, std::move(args), std::move(value), label);
        nodes_[id].custom_backward = std::move(backward_fn);
        nodes_[id].aux = std::move(aux);
        return id;
    }

    // ---- evaluation access ------------------------------------------------

    const Tensor<T>& value(Id id) const { return node(id).val; }

    /// Gradient of the last backward() at this node; exact zeros if the
    /// sweep never touched it (e.g. an unused input).
    Tensor<T> grad(Id id) const {
        const Node& n = node(id);
        if (!n.has_grad) return Tensor<T>::zeros(n.val.shape);
        return n.grad;
    }

    Node& node_mut(Id id) { return nodes_.at(static_cast<size_t>(id)); }
    const Node& node(Id id) const {
        if (id < 0 || id >= static_cast<Id>(nodes_.size()))
            throw std::out_of_range("graph node id " + std::to_string(id) + " does not exist (backward before forward?)");
        return nodes_[static_cast<size_t>(id)];
    }

    std::size_t size() const { return nodes_.size(); }

    void accum_grad(Id id, const Tensor<T>& g) {
        Node& n = node_mut(id);
        if (!n.needs_grad) return;
        if (!n.has_grad) {
            n.grad = Tensor<T>::zeros(n.val.shape);
            n.has_grad = true;
        }
        if (g.shape != n.grad.shape) fail("gradient shape mismatch at '" + n.label + "'");
        for (std::int64_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    /// Reverse sweep from `root`. Without a seed the root must be scalar and
    /// is seeded with 1. Param gradients accumulate into their stores (call
    /// store.zero_grads() between steps); node gradients reset per call.
    void backward(Id root) {
        if (node(root).val.size() != 1)
            fail("backward without a seed requires a scalar root, got " + shape_str(node(root).val.shape));
        backward(root, Tensor<T>::scalar(T(1)));
    }

    void backward(Id root, const Tensor<T>& seed) {
        const Node& r = node(root);
        if (seed.shape != r.val.shape) fail("backward seed shape mismatch");
        for (Node& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor<T>();
        }
        node_mut(root).grad = seed;
        node_mut(root).has_grad = true;
        for (Id id = root; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.has_grad || !n.needs_grad) continue;
            dispatch_backward(id);
        }
        if (check_finite) {
            for (Id id = root; id >= 0; --id) {
                const Node& n = nodes_[static_cast<size_t>(id)];
                if (n.has_grad && !n.grad.all_finite())
                    throw std::runtime_error("non-finite gradient at op '" + n.label + "'");
            }
        }
    }

    /// RAII label scope; node labels become "<scope>/<op>#<id>".
    class Scope {
    public:
        Scope(Graph& g, const std::string& name) : g_(g), saved_(g.scope_) {
            g_.scope_ = saved_.empty() ? name : saved_ + "/" + name;
        }
        ~Scope() { g_.scope_ = saved_; }

    private:
        Graph& g_;
        std::string saved_;
    };

private:
    std::vector<Node> nodes_;
    std::string scope_;

    [[noreturn]] void fail(const std::string& msg) const {
        throw std::invalid_argument("graph" + (scope_.empty() ? "" : " [" + scope_ + "]") + ": " + msg);
    }

    const Tensor<T>& val(Id id) const { return node(id).val; }

    Id push(Op op, std::vector<Id> args, Tensor<T> value, const std::string& label_hint = "") {
        Node n;
        n.op = op;
        n.args = std::move(args);
        n.val = std::move(value);
        for (Id a : n.args) n.needs_grad = n.needs_grad || node(a).needs_grad;
        const Id id = static_cast<Id>(nodes_.size());
        std::string base = label_hint.empty() ? std::string(op_name(op)) : label_hint;
        n.label = (scope_.empty() ? base : scope_ + "/" + base) + "#" + std::to_string(id);
        if (check_finite && !n.val.all_finite())
            throw std::runtime_error("non-finite output in op '" + n.label + "'");
        nodes_.push_back(std::move(n));
        return id;
    }

    template <class F>
    Id unary(Op op, Id a, F f) {
        Tensor<T> out(val(a).shape);
        const Tensor<T>& A = val(a);
        const std::int64_t n = A.size();
        if (n > 32768) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::int64_t i = 0; i < n; ++i) out[i] = f(A[i]);
        } else {
            for (std::int64_t i = 0; i < n; ++i) out[i] = f(A[i]);
        }
        return push(op, {a}, std::move(out));
    }

    // Broadcast layout: rhs is scalar, equal-shape, or a trailing suffix.
    // Returns the number of lhs elements covered by one rhs sweep.
    std::int64_t broadcast_extent(const Shape& a, const Shape& b) const {
        if (b == Shape{1}) return 1;
        if (a == b) return shape_numel(a);
        if (b.size() > a.size()) fail("broadcast: rhs rank exceeds lhs");
        for (size_t i = 0; i < b.size(); ++i)
            if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) fail("broadcast: rhs is not a trailing suffix of lhs");
        return shape_numel(b);
    }

    Id binary(Op op, Id a, Id b) {
        const Tensor<T>&A = val(a), &B = val(b);
        const std::int64_t ext = broadcast_extent(A.shape, B.shape);
        Tensor<T> out(A.shape);
        for (std::int64_t i = 0; i < A.size(); ++i) {
            const T rb = B[i % ext];
            switch (op) {
                case Op::Add: out[i] = A[i] + rb; break;
                case Op::Sub: out[i] = A[i] - rb; break;
                case Op::Mul: out[i] = A[i] * rb; break;
                case Op::Div: out[i] = A[i] / rb; break;
                default: fail("not a binary op");
            }
        }
        return push(op, {a, b}, std::move(out));
    }

    void reduce_into_rhs(const Tensor<T>& g, Tensor<T>& acc) const {
        const std::int64_t ext = acc.size();
        for (std::int64_t i = 0; i < g.size(); ++i) acc[i % ext] += g[i];
    }

    void permute_copy(const Tensor<T>& X, const std::vector<int>& perm, Tensor<T>& out) const {
        const int r = X.rank();
        std::vector<std::int64_t> xstride(r, 1), ostride(r, 1);
        for (int d = r - 2; d >= 0; --d) xstride[d] = xstride[d + 1] * X.dim(d + 1);
        for (int d = r - 2; d >= 0; --d) ostride[d] = ostride[d + 1] * out.dim(d + 1);
        std::vector<int> oidx(r, 0);
        for (std::int64_t o = 0; o < out.size(); ++o) {
            std::int64_t xi = 0;
            for (int d = 0; d < r; ++d) xi += static_cast<std::int64_t>(oidx[d]) * xstride[perm[d]];
            out[o] = X[xi];
            for (int d = r - 1; d >= 0; --d) {
                if (++oidx[d] < out.dim(d)) break;
                oidx[d] = 0;
            }
        }
    }

    void scatter_permute(const Tensor<T>& g, const std::vector<int>& perm, Tensor<T>& acc) const {
        std::vector<int> inv(perm.size());
        for (size_t d = 0; d < perm.size(); ++d) inv[static_cast<size_t>(perm[d])] = static_cast<int>(d);
        const int r = static_cast<int>(perm.size());
        std::vector<std::int64_t> gstride(r, 1), astride(r, 1);
        for (int d = r - 2; d >= 0; --d) gstride[d] = gstride[d + 1] * g.dim(d + 1);
        for (int d = r - 2; d >= 0; --d) astride[d] = astride[d + 1] * acc.dim(d + 1);
        std::vector<int> ai(r, 0);
        for (std::int64_t a = 0; a < acc.size(); ++a) {
            std::int64_t gi = 0;
            for (int d = 0; d < r; ++d) gi += static_cast<std::int64_t>(ai[d]) * gstride[inv[d]];
            acc[a] += g[gi];
            for (int d = r - 1; d >= 0; --d) {
                if (++ai[d] < acc.dim(d)) break;
                ai[d] = 0;
            }
        }
    }

    void dispatch_backward(Id id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        const Tensor<T>& g = n.grad;
        auto arg_val = [&](int i) -> const Tensor<T>& { return val(n.args[static_cast<size_t>(i)]); };
        auto arg_needs = [&](int i) { return node(n.args[static_cast<size_t>(i)]).needs_grad; };
        auto give = [&](int i, Tensor<T>&& t) { accum_grad(n.args[static_cast<size_t>(i)], t); };

        switch (n.op) {
            case Op::Input:
            case Op::Const:
                break;
            case Op::Param:
                n.store->grad(n.pname) += g;
                break;
            case Op::Add:
            case Op::Sub: {
                const T sgn = n.op == Op::Add ? T(1) : T(-1);
                if (arg_needs(0)) give(0, Tensor<T>(g));
                if (arg_needs(1)) {
                    Tensor<T> gb = Tensor<T>::zeros(arg_val(1).shape);
                    for (std::int64_t i = 0; i < g.size(); ++i) gb[i % gb.size()] += sgn * g[i];
                    give(1, std::move(gb));
                }
                break;
            }
            case Op::Mul: {
                const Tensor<T>&A = arg_val(0), &B = arg_val(1);
                const std::int64_t ext = B.size();
                if (arg_needs(0)) {
                    Tensor<T> ga(A.shape);
                    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] = g[i] * B[i % ext];
                    give(0, std::move(ga));
                }
                if (arg_needs(1)) {
                    Tensor<T> gb = Tensor<T>::zeros(B.shape);
                    for (std::int64_t i = 0; i < g.size(); ++i) gb[i % ext] += g[i] * A[i];
                    give(1, std::move(gb));
                }
                break;
            }
            case Op::Div: {
                const Tensor<T>&A = arg_val(0), &B = arg_val(1);
                const std::int64_t ext = B.size();
                if (arg_needs(0)) {
                    Tensor<T> ga(A.shape);
                    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] = g[i] / B[i % ext];
                    give(0, std::move(ga));
                }
                if (arg_needs(1)) {
                    Tensor<T> gb = Tensor<T>::zeros(B.shape);
                    for (std::int64_t i = 0; i < g.size(); ++i) {
                        const T b = B[i % ext];
                        gb[i % ext] -= g[i] * A[i] / (b * b);
                    }
                    give(1, std::move(gb));
                }
                break;
            }
            case Op::Exp: elementwise_bw(n, [&](std::int64_t i, T gi) { return gi * n.val[i]; }); break;
            case Op::Log: elementwise_bw(n, [&](std::int64_t i, T gi) { return gi / arg_val(0)[i]; }); break;
            case Op::Sqrt: elementwise_bw(n, [&](std::int64_t i, T gi) { return gi / (T(2) * n.val[i]); }); break;
            case Op::Abs:
                // subgradient at 0 defined as 0
                elementwise_bw(n, [&](std::int64_t i, T gi) {
                    const T x = arg_val(0)[i];
                    return x > T(0) ? gi : x < T(0) ? -gi : T(0);
                });
                break;
            case Op::Sigmoid:
                elementwise_bw(n, [&](std::int64_t i, T gi) { return gi * n.val[i] * (T(1) - n.val[i]); });
                break;
            case Op::Softplus:
                elementwise_bw(n, [&](std::int64_t i, T gi) {
                    const T x = arg_val(0)[i];
                    const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
                    return gi * s;
                });
                break;
            case Op::Tanh:
                elementwise_bw(n, [&](std::int64_t i, T gi) { return gi * (T(1) - n.val[i] * n.val[i]); });
                break;
            case Op::AddScalar: give(0, Tensor<T>(g)); break;
            case Op::MulScalar: {
                const T c = static_cast<T>(n.fattrs[0]);
                Tensor<T> ga(g.shape);
                for (std::int64_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
                give(0, std::move(ga));
                break;
            }
            case Op::Matmul: {
                const Tensor<T>&A = arg_val(0), &B = arg_val(1);
                const int M = A.dim(0), K = A.dim(1), N = B.dim(1);
                if (arg_needs(0)) {
                    Tensor<T> ga = Tensor<T>::zeros(A.shape);
                    gemm_nt(g.v.data(), B.v.data(), ga.v.data(), M, N, K);
                    give(0, std::move(ga));
                }
                if (arg_needs(1)) {
                    Tensor<T> gb = Tensor<T>::zeros(B.shape);
                    gemm_tn(A.v.data(), g.v.data(), gb.v.data(), K, M, N);
                    give(1, std::move(gb));
                }
                break;
            }
            case Op::BatchMatmul: {
                const Tensor<T>&A = arg_val(0), &B = arg_val(1);
                const int Bt = A.dim(0), M = A.dim(1), K = A.dim(2), N = B.dim(2);
                if (arg_needs(0)) {
                    Tensor<T> ga = Tensor<T>::zeros(A.shape);
                    gemm_batched_nt(g.v.data(), B.v.data(), ga.v.data(), Bt, M, N, K);
                    give(0, std::move(ga));
                }
                if (arg_needs(1)) {
                    Tensor<T> gb = Tensor<T>::zeros(B.shape);
                    gemm_batched_tn(A.v.data(), g.v.data(), gb.v.data(), Bt, K, M, N);
                    give(1, std::move(gb));
                }
                break;
            }
            case Op::Softmax: {
                const Tensor<T>& Y = n.val;
                const int d = Y.dim(Y.rank() - 1);
                const std::int64_t rows = Y.size() / d;
                Tensor<T> gx(Y.shape);
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* y = Y.v.data() + r * d;
                    const T* gr = g.v.data() + r * d;
                    T dot = T(0);
                    for (int i = 0; i < d; ++i) dot += gr[i] * y[i];
                    T* o = gx.v.data() + r * d;
                    for (int i = 0; i < d; ++i) o[i] = y[i] * (gr[i] - dot);
                }
                give(0, std::move(gx));
                break;
            }
            case Op::LayerNorm: layer_norm_bw(n); break;
            case Op::Conv2d: conv2d_bw(n); break;
            case Op::UpsampleNearest: {
                const Tensor<T>& X = arg_val(0);
                const int f = n.iattrs[0], C = X.dim(0), H = X.dim(1), W = X.dim(2);
                Tensor<T> gx = Tensor<T>::zeros(X.shape);
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < H * f; ++i) {
                        const T* gr = g.v.data() + (static_cast<std::int64_t>(c) * H * f + i) * (W * f);
                        T* o = gx.v.data() + (static_cast<std::int64_t>(c) * H + i / f) * W;
                        for (int j = 0; j < W * f; ++j) o[j / f] += gr[j];
                    }
                give(0, std::move(gx));
                break;
            }
            case Op::Concat: {
                const int axis = n.iattrs[0];
                std::int64_t outer = 1, inner = 1;
                const Shape& os = n.val.shape;
                for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
                for (size_t d = static_cast<size_t>(axis) + 1; d < os.size(); ++d) inner *= os[d];
                const std::int64_t total_ext = static_cast<std::int64_t>(os[static_cast<size_t>(axis)]) * inner;
                std::int64_t off = 0;
                for (size_t p = 0; p < n.args.size(); ++p) {
                    const Tensor<T>& Pt = arg_val(static_cast<int>(p));
                    const std::int64_t ext = Pt.dim(axis) * inner;
                    if (node(n.args[p]).needs_grad) {
                        Tensor<T> gp(Pt.shape);
                        for (std::int64_t o = 0; o < outer; ++o)
                            std::copy(g.v.begin() + o * total_ext + off, g.v.begin() + o * total_ext + off + ext,
                                      gp.v.begin() + o * ext);
                        accum_grad(n.args[p], gp);
                    }
                    off += ext;
                }
                break;
            }
            case Op::Slice: {
                const int axis = n.iattrs[0], start = n.iattrs[1], stop = n.iattrs[2];
                const Tensor<T>& X = arg_val(0);
                Tensor<T> gx = Tensor<T>::zeros(X.shape);
                std::int64_t outer = 1, inner = 1;
                for (int d = 0; d < axis; ++d) outer *= X.dim(d);
                for (int d = axis + 1; d < X.rank(); ++d) inner *= X.dim(d);
                const std::int64_t in_ext = static_cast<std::int64_t>(X.dim(axis)) * inner;
                const std::int64_t out_ext = static_cast<std::int64_t>(stop - start) * inner;
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < out_ext; ++i) gx[o * in_ext + start * inner + i] += g[o * out_ext + i];
                give(0, std::move(gx));
                break;
            }
            case Op::Reshape: give(0, g.reshaped(arg_val(0).shape)); break;
            case Op::Permute: {
                Tensor<T> gx = Tensor<T>::zeros(arg_val(0).shape);
                scatter_permute(g, n.iattrs, gx);
                give(0, std::move(gx));
                break;
            }
            case Op::ReduceSum: {
                Tensor<T> gx(arg_val(0).shape, g[0]);
                give(0, std::move(gx));
                break;
            }
            case Op::ReduceMean: {
                Tensor<T> gx(arg_val(0).shape, g[0] / static_cast<T>(arg_val(0).size()));
                give(0, std::move(gx));
                break;
            }
            case Op::ReduceMax: {
                Tensor<T> gx = Tensor<T>::zeros(arg_val(0).shape);
                gx[n.iattrs[0]] = g[0];
                give(0, std::move(gx));
                break;
            }
            case Op::Gather: {
                const Tensor<T>& X = arg_val(0);
                const std::int64_t row = X.size() / X.dim(0);
                Tensor<T> gx = Tensor<T>::zeros(X.shape);
                for (size_t m = 0; m < n.iattrs.size(); ++m)
                    for (std::int64_t i = 0; i < row; ++i)
                        gx[n.iattrs[m] * row + i] += g[static_cast<std::int64_t>(m) * row + i];
                give(0, std::move(gx));
                break;
            }
            case Op::StopGrad:
                break;
            case Op::Custom:
                if (n.custom_backward) n.custom_backward(*this, id);
                break;
        }
    }

    template <class F>
    void elementwise_bw(Node& n, F df) {
        Tensor<T> gx(n.val.shape);
        const std::int64_t cnt = n.grad.size();
        if (cnt > 32768) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] = df(i, n.grad[i]);
        } else {
            for (std::int64_t i = 0; i < cnt; ++i) gx[i] = df(i, n.grad[i]);
        }
        accum_grad(n.args[0], gx);
    }

    void layer_norm_bw(Node& n) {
        const Tensor<T>& X = val(n.args[0]);
        const Tensor<T>& Gm = val(n.args[1]);
        const Tensor<T>& g = n.grad;
        const T eps = static_cast<T>(n.fattrs[0]);
        const int D = X.dim(X.rank() - 1);
        const std::int64_t rows = X.size() / D;
        Tensor<T> gx = Tensor<T>::zeros(X.shape);
        Tensor<T> ggamma = Tensor<T>::zeros({D});
        Tensor<T> gbeta = Tensor<T>::zeros({D});
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xi = X.v.data() + r * D;
            const T* gi = g.v.data() + r * D;
            T mu = T(0);
            for (int i = 0; i < D; ++i) mu += xi[i];
            mu /= T(D);
            T var = T(0);
            for (int i = 0; i < D; ++i) var += (xi[i] - mu) * (xi[i] - mu);
            var /= T(D);
            const T inv = T(1) / std::sqrt(var + eps);
            T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
            for (int i = 0; i < D; ++i) {
                const T xhat = (xi[i] - mu) * inv;
                const T dxhat = gi[i] * Gm[i];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                ggamma[i] += gi[i] * xhat;
                gbeta[i] += gi[i];
            }
            T* go = gx.v.data() + r * D;
            for (int i = 0; i < D; ++i) {
                const T xhat = (xi[i] - mu) * inv;
                const T dxhat = gi[i] * Gm[i];
                go[i] = inv * (dxhat - sum_dxhat / T(D) - xhat * sum_dxhat_xhat / T(D));
            }
        }
        if (node(n.args[0]).needs_grad) accum_grad(n.args[0], gx);
        if (node(n.args[1]).needs_grad) accum_grad(n.args[1], ggamma);
        if (node(n.args[2]).needs_grad) accum_grad(n.args[2], gbeta);
    }

    void conv2d_bw(Node& n) {
        const Tensor<T>& X = val(n.args[0]);
        const Tensor<T>& W = val(n.args[1]);
        const Tensor<T>& g = n.grad;
        const int stride = n.iattrs[0], pad = n.iattrs[1], groups = n.iattrs[2];
        const int Cin = X.dim(0), H = X.dim(1), Wd = X.dim(2);
        const int Cout = W.dim(0), Cg = W.dim(1), kh = W.dim(2), kw = W.dim(3);
        const int Ho = n.val.dim(1), Wo = n.val.dim(2);
        const int K = Cg * kh * kw;
        const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
        const int Cog = Cout / groups;
        const bool need_x = node(n.args[0]).needs_grad;
        const bool need_w = node(n.args[1]).needs_grad;
        Tensor<T> gx = need_x ? Tensor<T>::zeros(X.shape) : Tensor<T>();
        Tensor<T> gw = need_w ? Tensor<T>::zeros(W.shape) : Tensor<T>();
        std::vector<T> col(static_cast<size_t>(K) * P);
        std::vector<T> gcol(static_cast<size_t>(K) * P);
        for (int grp = 0; grp < groups; ++grp) {
            const T* gy = g.v.data() + static_cast<std::int64_t>(grp) * Cog * P;
            if (need_w) {
                im2col(X.v.data() + static_cast<std::int64_t>(grp) * Cg * H * Wd, Cg, H, Wd, kh, kw, stride,
                       pad, col.data());
                gemm_nt(gy, col.data(), gw.v.data() + static_cast<std::int64_t>(grp) * Cog * K, Cog,
                        static_cast<int>(P), K);
            }
            if (need_x) {
                std::fill(gcol.begin(), gcol.end(), T(0));
                gemm_tn(W.v.data() + static_cast<std::int64_t>(grp) * Cog * K, gy, gcol.data(), K, Cog,
                        static_cast<int>(P));
                col2im(gcol.data(), Cg, H, Wd, kh, kw, stride, pad,
                       gx.v.data() + static_cast<std::int64_t>(grp) * Cg * H * Wd);
            }
        }
        if (need_x) accum_grad(n.args[0], gx);
        if (need_w) accum_grad(n.args[1], gw);
        if (n.args.size() == 3 && node(n.args[2]).needs_grad) {
            Tensor<T> gb = Tensor<T>::zeros({Cout});
            for (int c = 0; c < Cout; ++c) {
                const T* gr = g.v.data() + static_cast<std::int64_t>(c) * P;
                T acc = T(0);
                for (std::int64_t p = 0; p < P; ++p) acc += gr[p];
                gb[c] = acc;
            }
            accum_grad(n.args[2], gb);
        }
    }
};

template <class T>
Tensor<T>& operator+=(Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape) throw std::invalid_argument("tensor += shape mismatch");
    for (std::int64_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

}  // namespace uvga
