#pragma once

#include <cmath>
#include <string>

#include "uvga/graph.hpp"
#include "uvga/params.hpp"
#include "uvga/rng.hpp"

namespace uvga::nn {

// Parameter-backed layers. init_* creates parameters (deterministic given
// the rng state and call order); the matching builder references them by
// name inside a graph. Linear weights use Xavier-normal, convs He-normal.

template <class T>
void init_linear(ParamStore<T>& ps, Rng& rng, const std::string& name, int in, int out) {
    ps.create(name + "/w", rng.normal_tensor<T>({in, out}, 0.0, std::sqrt(2.0 / (in + out))));
    ps.create(name + "/b", Tensor<T>::zeros({out}));
}

template <class T>
typename Graph<T>::Id linear(Graph<T>& g, ParamStore<T>& ps, const std::string& name,
                             typename Graph<T>::Id x) {
    return g.add(g.matmul(x, g.param(ps, name + "/w")), g.param(ps, name + "/b"));
}

template <class T>
void init_layer_norm(ParamStore<T>& ps, const std::string& name, int dim) {
    ps.create(name + "/gamma", Tensor<T>::full({dim}, T(1)));
    ps.create(name + "/beta", Tensor<T>::zeros({dim}));
}

template <class T>
typename Graph<T>::Id layer_norm(Graph<T>& g, ParamStore<T>& ps, const std::string& name,
                                 typename Graph<T>::Id x) {
    return g.layer_norm(x, g.param(ps, name + "/gamma"), g.param(ps, name + "/beta"));
}

template <class T>
void init_conv(ParamStore<T>& ps, Rng& rng, const std::string& name, int cout, int cin, int k,
               bool zero_init = false) {
    if (zero_init) {
        ps.create(name + "/w", Tensor<T>::zeros({cout, cin, k, k}));
    } else {
        ps.create(name + "/w", rng.normal_tensor<T>({cout, cin, k, k}, 0.0, std::sqrt(2.0 / (cin * k * k))));
    }
    ps.create(name + "/b", Tensor<T>::zeros({cout}));
}

template <class T>
typename Graph<T>::Id conv(Graph<T>& g, ParamStore<T>& ps, const std::string& name, typename Graph<T>::Id x,
                           int stride, int pad, int groups = 1) {
    return g.conv2d(x, g.param(ps, name + "/w"), g.param(ps, name + "/b"), stride, pad, groups);
}

// ---------------------------------------------------------------------------
// Multi-head attention and pre-LN transformer blocks.
// ---------------------------------------------------------------------------

template <class T>
void init_attention(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim) {
    init_linear(ps, rng, name + "/q", dim, dim);
    init_linear(ps, rng, name + "/k", dim, dim);
    init_linear(ps, rng, name + "/v", dim, dim);
    init_linear(ps, rng, name + "/o", dim, dim);
}

/// q_in [Tq,D] attends over kv_in [Tkv,D]; heads must divide D. Softmax over
/// keys makes the result invariant to key/value row permutations.
template <class T>
typename Graph<T>::Id attention(Graph<T>& g, ParamStore<T>& ps, const std::string& name,
                                typename Graph<T>::Id q_in, typename Graph<T>::Id kv_in, int heads) {
    const int Tq = g.value(q_in).dim(0);
    const int Tk = g.value(kv_in).dim(0);
    const int D = g.value(q_in).dim(1);
    if (D % heads != 0) throw std::invalid_argument("attention: heads must divide token dim");
    const int dh = D / heads;
    auto split = [&](typename Graph<T>::Id x, int tokens) {
        // [T,D] -> [heads, T, dh]
        return g.permute(g.reshape(x, {tokens, heads, dh}), {1, 0, 2});
    };
    const auto q = split(linear(g, ps, name + "/q", q_in), Tq);
    const auto k = split(linear(g, ps, name + "/k", kv_in), Tk);
    const auto v = split(linear(g, ps, name + "/v", kv_in), Tk);
    const auto scores = g.mul_scalar(g.batch_matmul(q, g.permute(k, {0, 2, 1})),
                                     static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    const auto att = g.batch_matmul(g.softmax(scores), v);  // [heads, Tq, dh]
    const auto merged = g.reshape(g.permute(att, {1, 0, 2}), {Tq, D});
    return linear(g, ps, name + "/o", merged);
}

template <class T>
void init_mlp(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim, int hidden) {
    init_linear(ps, rng, name + "/fc0", dim, hidden);
    init_linear(ps, rng, name + "/fc1", hidden, dim);
}

template <class T>
typename Graph<T>::Id mlp(Graph<T>& g, ParamStore<T>& ps, const std::string& name, typename Graph<T>::Id x) {
    return linear(g, ps, name + "/fc1", g.softplus(linear(g, ps, name + "/fc0", x)));
}

template <class T>
void init_self_block(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim, int mlp_ratio) {
    init_layer_norm(ps, name + "/ln1", dim);
    init_attention(ps, rng, name + "/attn", dim);
    init_layer_norm(ps, name + "/ln2", dim);
    init_mlp(ps, rng, name + "/mlp", dim, dim * mlp_ratio);
}

template <class T>
typename Graph<T>::Id self_block(Graph<T>& g, ParamStore<T>& ps, const std::string& name,
                                 typename Graph<T>::Id x, int heads) {
    const auto n1 = layer_norm(g, ps, name + "/ln1", x);
    x = g.add(x, attention(g, ps, name + "/attn", n1, n1, heads));
    x = g.add(x, mlp(g, ps, name + "/mlp", layer_norm(g, ps, name + "/ln2", x)));
    return x;
}

template <class T>
void init_cross_block(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim, int mlp_ratio) {
    init_layer_norm(ps, name + "/lnq", dim);
    init_layer_norm(ps, name + "/lnkv", dim);
    init_attention(ps, rng, name + "/attn", dim);
    init_layer_norm(ps, name + "/ln2", dim);
    init_mlp(ps, rng, name + "/mlp", dim, dim * mlp_ratio);
}

template <class T>
typename Graph<T>::Id cross_block(Graph<T>& g, ParamStore<T>& ps, const std::string& name,
                                  typename Graph<T>::Id q, typename Graph<T>::Id kv, int heads) {
    const auto nq = layer_norm(g, ps, name + "/lnq", q);
    const auto nkv = layer_norm(g, ps, name + "/lnkv", kv);
    q = g.add(q, attention(g, ps, name + "/attn", nq, nkv, heads));
    q = g.add(q, mlp(g, ps, name + "/mlp", layer_norm(g, ps, name + "/ln2", q)));
    return q;
}

}  // namespace uvga::nn
