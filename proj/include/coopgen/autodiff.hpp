#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "coopgen/graph.hpp"
#include "coopgen/tensor.hpp"

namespace coopgen {

template <typename T>
using NamedTensors = std::map<std::string, TensorT<T>>;

struct EvalOptions {
    bool check_finite = false;  // checked mode: NaN/Inf raises NumericError
};

// Forward pass record: values of every node for one set of bindings.
// backprop() consumes it; a tape is single-threaded, distinct tapes are
// independent.
template <typename T>
struct Tape {
    const Graph* graph = nullptr;
    std::int64_t batch = 0;
    std::vector<TensorT<T>> val;
    std::vector<TensorT<T>> aux;  // batchnorm saves [mean, inv_std] per channel

    const TensorT<T>& value(NodeId id) const { return val[static_cast<std::size_t>(id)]; }
    const TensorT<T>& output(const std::string& name) const { return val[static_cast<std::size_t>(graph->output_id(name))]; }
};

namespace detail {

// floor/ceil division for possibly negative numerators (divisor > 0)
inline std::int64_t floordiv(std::int64_t a, std::int64_t b) {
    return a >= 0 ? a / b : -((-a + b - 1) / b);
}
inline std::int64_t ceildiv(std::int64_t a, std::int64_t b) {
    return a > 0 ? (a + b - 1) / b : -((-a) / b);
}

inline Shape with_batch(std::int64_t n, const Shape& ps) {
    Shape s;
    s.reserve(ps.size() + 1);
    s.push_back(n);
    s.insert(s.end(), ps.begin(), ps.end());
    return s;
}

// Splits a node value into (batch, per-sample stride) regardless of whether
// the node is batched; params broadcast across the batch with stride 0.
template <typename T>
struct Rows {
    const T* base;
    std::int64_t stride;
    const T* row(std::int64_t i) const { return base + stride * i; }
};

template <typename T>
Rows<T> rows_of(const TensorT<T>& t, bool batched) {
    if (batched) return {t.data(), t.numel() / t.dim(0)};
    return {t.data(), 0};
}

// ---- conv2d kernels ------------------------------------------------------
//
// x:[n,ic,h,w]  w:[oc,ic,k,k]  y:[n,oc,oh,ow]
// y[n,oc,i,j] = b[oc] + sum_{ic,u,v} x[n,ic, i*s-p+u, j*s-p+v] * w[oc,ic,u,v]

template <typename T>
void conv2d_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* b,
                    int s, int p, TensorT<T>& y) {
    const std::int64_t n = x.dim(0), ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t oc = w.dim(0), k = w.dim(2);
    const std::int64_t oh = y.dim(2), ow = y.dim(3);
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t oci = 0; oci < oc; ++oci) {
            T* yplane = &y.at4(ni, oci, 0, 0);
            const T bias = b ? (*b)[oci] : T(0);
            std::fill(yplane, yplane + oh * ow, bias);
            for (std::int64_t ici = 0; ici < ic; ++ici) {
                const T* xplane = &x.at4(ni, ici, 0, 0);
                const T* wplane = w.data() + ((oci * ic + ici) * k) * k;
                for (std::int64_t u = 0; u < k; ++u) {
                    for (std::int64_t v = 0; v < k; ++v) {
                        const T wv = wplane[u * k + v];
                        if (wv == T(0)) continue;
                        // valid output rows/cols for this kernel offset
                        std::int64_t i0 = std::max<std::int64_t>(0, ceildiv(p - u, s));
                        std::int64_t i1 = std::min(oh - 1, floordiv(h - 1 + p - u, s));
                        std::int64_t j0 = std::max<std::int64_t>(0, ceildiv(p - v, s));
                        std::int64_t j1 = std::min(ow - 1, floordiv(wd - 1 + p - v, s));
                        for (std::int64_t i = i0; i <= i1; ++i) {
                            const T* xrow = xplane + (i * s - p + u) * wd;
                            T* yrow = yplane + i * ow;
                            for (std::int64_t j = j0; j <= j1; ++j)
                                yrow[j] += wv * xrow[j * s - p + v];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy,
                     int s, int p, TensorT<T>* dx, TensorT<T>* dw, TensorT<T>* db) {
    const std::int64_t n = x.dim(0), ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t oc = w.dim(0), k = w.dim(2);
    const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
    if (db) {
        for (std::int64_t ni = 0; ni < n; ++ni)
            for (std::int64_t oci = 0; oci < oc; ++oci) {
                const T* dyp = &dy.at4(ni, oci, 0, 0);
                T acc = 0;
                for (std::int64_t t = 0; t < oh * ow; ++t) acc += dyp[t];
                (*db)[oci] += acc;
            }
    }
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t oci = 0; oci < oc; ++oci) {
            const T* dyplane = &dy.at4(ni, oci, 0, 0);
            for (std::int64_t ici = 0; ici < ic; ++ici) {
                const T* xplane = &x.at4(ni, ici, 0, 0);
                T* dxplane = dx ? &dx->at4(ni, ici, 0, 0) : nullptr;
                for (std::int64_t u = 0; u < k; ++u) {
                    for (std::int64_t v = 0; v < k; ++v) {
                        std::int64_t i0 = std::max<std::int64_t>(0, ceildiv(p - u, s));
                        std::int64_t i1 = std::min(oh - 1, floordiv(h - 1 + p - u, s));
                        std::int64_t j0 = std::max<std::int64_t>(0, ceildiv(p - v, s));
                        std::int64_t j1 = std::min(ow - 1, floordiv(wd - 1 + p - v, s));
                        const T wv = w.data()[((oci * ic + ici) * k + u) * k + v];
                        T wacc = 0;
                        for (std::int64_t i = i0; i <= i1; ++i) {
                            const T* xrow = xplane + (i * s - p + u) * wd;
                            T* dxrow = dxplane ? dxplane + (i * s - p + u) * wd : nullptr;
                            const T* dyrow = dyplane + i * ow;
                            for (std::int64_t j = j0; j <= j1; ++j) {
                                const T g = dyrow[j];
                                wacc += g * xrow[j * s - p + v];
                                if (dxrow) dxrow[j * s - p + v] += g * wv;
                            }
                        }
                        if (dw) dw->data()[((oci * ic + ici) * k + u) * k + v] += wacc;
                    }
                }
            }
        }
    }
}

// ---- deconv2d (transposed conv) kernels -----------------------------------
//
// x:[n,ic,h,w]  w:[ic,oc,k,k]  y:[n,oc,OH,OW],  OH=(h-1)*s-2p+k+op
// y[n,oc, i*s-p+u, j*s-p+v] += x[n,ic,i,j] * w[ic,oc,u,v]
// This is the exact linear adjoint of conv2d with the same (k,s,p).

template <typename T>
void deconv2d_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* b,
                      int s, int p, TensorT<T>& y) {
    const std::int64_t n = x.dim(0), ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t oc = w.dim(1), k = w.dim(2);
    const std::int64_t oh = y.dim(2), ow = y.dim(3);
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t oci = 0; oci < oc; ++oci) {
            T* yplane = &y.at4(ni, oci, 0, 0);
            const T bias = b ? (*b)[oci] : T(0);
            std::fill(yplane, yplane + oh * ow, bias);
            for (std::int64_t ici = 0; ici < ic; ++ici) {
                const T* xplane = &x.at4(ni, ici, 0, 0);
                const T* wplane = w.data() + ((ici * oc + oci) * k) * k;
                for (std::int64_t u = 0; u < k; ++u) {
                    for (std::int64_t v = 0; v < k; ++v) {
                        const T wv = wplane[u * k + v];
                        if (wv == T(0)) continue;
                        std::int64_t i0 = std::max<std::int64_t>(0, ceildiv(p - u, s));
                        std::int64_t i1 = std::min(h - 1, floordiv(oh - 1 + p - u, s));
                        std::int64_t j0 = std::max<std::int64_t>(0, ceildiv(p - v, s));
                        std::int64_t j1 = std::min(wd - 1, floordiv(ow - 1 + p - v, s));
                        for (std::int64_t i = i0; i <= i1; ++i) {
                            const T* xrow = xplane + i * wd;
                            T* yrow = yplane + (i * s - p + u) * ow;
                            for (std::int64_t j = j0; j <= j1; ++j)
                                yrow[j * s - p + v] += wv * xrow[j];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void deconv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy,
                       int s, int p, TensorT<T>* dx, TensorT<T>* dw, TensorT<T>* db) {
    const std::int64_t n = x.dim(0), ic = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t oc = w.dim(1), k = w.dim(2);
    const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
    if (db) {
        for (std::int64_t ni = 0; ni < n; ++ni)
            for (std::int64_t oci = 0; oci < oc; ++oci) {
                const T* dyp = &dy.at4(ni, oci, 0, 0);
                T acc = 0;
                for (std::int64_t t = 0; t < oh * ow; ++t) acc += dyp[t];
                (*db)[oci] += acc;
            }
    }
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t ici = 0; ici < ic; ++ici) {
            const T* xplane = &x.at4(ni, ici, 0, 0);
            T* dxplane = dx ? &dx->at4(ni, ici, 0, 0) : nullptr;
            for (std::int64_t oci = 0; oci < oc; ++oci) {
                const T* dyplane = &dy.at4(ni, oci, 0, 0);
                for (std::int64_t u = 0; u < k; ++u) {
                    for (std::int64_t v = 0; v < k; ++v) {
                        std::int64_t i0 = std::max<std::int64_t>(0, ceildiv(p - u, s));
                        std::int64_t i1 = std::min(h - 1, floordiv(oh - 1 + p - u, s));
                        std::int64_t j0 = std::max<std::int64_t>(0, ceildiv(p - v, s));
                        std::int64_t j1 = std::min(wd - 1, floordiv(ow - 1 + p - v, s));
                        const T wv = w.data()[((ici * oc + oci) * k + u) * k + v];
                        T wacc = 0;
                        for (std::int64_t i = i0; i <= i1; ++i) {
                            const T* xrow = xplane + i * wd;
                            T* dxrow = dxplane ? dxplane + i * wd : nullptr;
                            const T* dyrow = dyplane + (i * s - p + u) * ow;
                            for (std::int64_t j = j0; j <= j1; ++j) {
                                const T g = dyrow[j * s - p + v];
                                wacc += g * xrow[j];
                                if (dxrow) dxrow[j] += g * wv;
                            }
                        }
                        if (dw) dw->data()[((ici * oc + oci) * k + u) * k + v] += wacc;
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Evaluates the graph on named bindings. Inputs carry a leading batch dim
// (per-sample scalar outputs come back as [n]); params are bound with their
// exact shape. Deterministic given bindings: dropout masks are ordinary
// inputs, there is no hidden RNG state.
template <typename T>
Tape<T> evaluate(const Graph& g, const NamedTensors<T>& bindings, const EvalOptions& opt = {}) {
    using detail::with_batch;
    Tape<T> tape;
    tape.graph = &g;
    tape.val.resize(g.size());
    tape.aux.resize(g.size());

    for (const auto& [name, t] : bindings) {
        if (!g.has_named(name)) throw ShapeError("evaluate: binding '" + name + "' does not name an input or param");
        (void)t;
    }

    // batch size from the first bound input
    std::int64_t batch = -1;
    for (const auto& n : g.nodes()) {
        if (n.kind != OpKind::input) continue;
        auto it = bindings.find(n.name);
        if (it == bindings.end()) throw ShapeError("evaluate: unbound input '" + n.name + "'");
        const Shape& s = it->second.shape();
        Shape want = n.ps_shape;
        if (s.size() != want.size() + 1 || !std::equal(want.begin(), want.end(), s.begin() + 1))
            throw ShapeError("evaluate: input '" + n.name + "' expects [n]+" + shape_str(want) + ", got " + shape_str(s));
        if (batch < 0) batch = s[0];
        if (s[0] != batch) throw ShapeError("evaluate: inconsistent batch sizes among inputs");
    }
    if (batch < 0) batch = 1;  // graph with no inputs (params only)
    tape.batch = batch;

    for (std::size_t idx = 0; idx < g.size(); ++idx) {
        const Node& n = g.nodes()[idx];
        TensorT<T>& out = tape.val[idx];
        switch (n.kind) {
            case OpKind::input:
                out = bindings.at(n.name);
                break;
            case OpKind::param: {
                auto it = bindings.find(n.name);
                if (it == bindings.end()) throw ShapeError("evaluate: unbound param '" + n.name + "'");
                if (it->second.shape() != n.ps_shape)
                    throw ShapeError("evaluate: param '" + n.name + "' expects " + shape_str(n.ps_shape) + ", got " +
                                     shape_str(it->second.shape()));
                out = it->second;
                break;
            }
            case OpKind::dense: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& w = tape.val[n.in[1]];
                const TensorT<T>* b = n.in.size() > 2 ? &tape.val[n.in[2]] : nullptr;
                const std::int64_t in = w.dim(1), on = w.dim(0);
                out = TensorT<T>(with_batch(batch, n.ps_shape));
                for (std::int64_t ni = 0; ni < batch; ++ni) {
                    const T* xr = x.data() + ni * in;
                    T* yr = out.data() + ni * on;
                    for (std::int64_t o = 0; o < on; ++o) {
                        T acc = b ? (*b)[o] : T(0);
                        const T* wr = w.data() + o * in;
                        for (std::int64_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
                        yr[o] = acc;
                    }
                }
                break;
            }
            case OpKind::conv2d: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& w = tape.val[n.in[1]];
                const TensorT<T>* b = n.in.size() > 2 ? &tape.val[n.in[2]] : nullptr;
                out = TensorT<T>(with_batch(batch, n.ps_shape));
                detail::conv2d_forward(x, w, b, n.attrs.stride, n.attrs.pad, out);
                break;
            }
            case OpKind::deconv2d: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& w = tape.val[n.in[1]];
                const TensorT<T>* b = n.in.size() > 2 ? &tape.val[n.in[2]] : nullptr;
                out = TensorT<T>(with_batch(batch, n.ps_shape));
                detail::deconv2d_forward(x, w, b, n.attrs.stride, n.attrs.pad, out);
                break;
            }
            case OpKind::relu: {
                const TensorT<T>& x = tape.val[n.in[0]];
                out = x;
                for (std::int64_t i = 0; i < out.numel(); ++i)
                    if (out[i] < T(0)) out[i] = T(0);
                break;
            }
            case OpKind::leaky_relu: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const T sl = static_cast<T>(n.attrs.slope);
                out = x;
                for (std::int64_t i = 0; i < out.numel(); ++i)
                    if (out[i] < T(0)) out[i] *= sl;
                break;
            }
            case OpKind::tanh: {
                const TensorT<T>& x = tape.val[n.in[0]];
                out = x;
                for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
                break;
            }
            case OpKind::concat_channels: {
                out = TensorT<T>(with_batch(batch, n.ps_shape));
                const std::int64_t row = shape_numel(n.ps_shape);
                std::int64_t tail = 1;
                for (std::size_t d = 1; d < n.ps_shape.size(); ++d) tail *= n.ps_shape[d];
                std::int64_t off = 0;
                for (NodeId src : n.in) {
                    const TensorT<T>& x = tape.val[src];
                    const std::int64_t c = g.node(src).ps_shape[0];
                    const std::int64_t block = c * tail;
                    for (std::int64_t ni = 0; ni < batch; ++ni)
                        std::copy_n(x.data() + ni * block, block, out.data() + ni * row + off);
                    off += block;
                }
                break;
            }
            case OpKind::dropout: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& m = tape.val[n.in[1]];
                if (!x.same_shape(m)) throw ShapeError("dropout: mask/input shape mismatch at evaluate");
                const T keep_inv = T(1) / static_cast<T>(1.0 - n.attrs.rate);
                out = x;
                for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= m[i] * keep_inv;
                break;
            }
            case OpKind::spatial_replicate: {
                const TensorT<T>& x = tape.val[n.in[0]];
                out = TensorT<T>(with_batch(batch, n.ps_shape));
                const std::int64_t k = n.ps_shape[0], hw = n.attrs.rep_h * static_cast<std::int64_t>(n.attrs.rep_w);
                for (std::int64_t ni = 0; ni < batch; ++ni)
                    for (std::int64_t c = 0; c < k; ++c) {
                        T* dst = out.data() + (ni * k + c) * hw;
                        std::fill(dst, dst + hw, x[ni * k + c]);
                    }
                break;
            }
            case OpKind::add: {
                const TensorT<T>& a = tape.val[n.in[0]];
                const TensorT<T>& b = tape.val[n.in[1]];
                const bool ab = g.node(n.in[0]).batched, bb = g.node(n.in[1]).batched;
                if (!n.batched) {  // param + param
                    out = a;
                    out.add_scaled(b, T(1));
                    break;
                }
                out = TensorT<T>(with_batch(batch, n.ps_shape));
                auto ra = detail::rows_of(a, ab);
                auto rb = detail::rows_of(b, bb);
                const std::int64_t row = shape_numel(n.ps_shape);
                for (std::int64_t ni = 0; ni < batch; ++ni) {
                    T* o = out.data() + ni * row;
                    const T* pa = ab ? ra.row(ni) : a.data();
                    const T* pb = bb ? rb.row(ni) : b.data();
                    for (std::int64_t i = 0; i < row; ++i) o[i] = pa[i] + pb[i];
                }
                break;
            }
            case OpKind::scale: {
                out = tape.val[n.in[0]];
                out.scale_inplace(static_cast<T>(n.attrs.factor));
                break;
            }
            case OpKind::reduce_sum:
            case OpKind::reduce_mean: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const std::int64_t row = x.numel() / batch;
                out = TensorT<T>({batch});
                const T inv = n.kind == OpKind::reduce_mean ? T(1) / static_cast<T>(row) : T(1);
                for (std::int64_t ni = 0; ni < batch; ++ni) {
                    const T* xr = x.data() + ni * row;
                    T acc = 0;
                    for (std::int64_t i = 0; i < row; ++i) acc += xr[i];
                    out[ni] = acc * inv;
                }
                break;
            }
            case OpKind::batchnorm: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& gamma = tape.val[n.in[1]];
                const TensorT<T>& beta = tape.val[n.in[2]];
                const std::int64_t c = n.ps_shape[0];
                std::int64_t sp = 1;
                for (std::size_t d = 1; d < n.ps_shape.size(); ++d) sp *= n.ps_shape[d];
                const std::int64_t m = batch * sp;
                TensorT<T> stats({2, c});  // rows: mean, inv_std
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    double mean = 0;
                    for (std::int64_t ni = 0; ni < batch; ++ni) {
                        const T* xr = x.data() + (ni * c + ci) * sp;
                        for (std::int64_t t = 0; t < sp; ++t) mean += xr[t];
                    }
                    mean /= static_cast<double>(m);
                    double var = 0;
                    for (std::int64_t ni = 0; ni < batch; ++ni) {
                        const T* xr = x.data() + (ni * c + ci) * sp;
                        for (std::int64_t t = 0; t < sp; ++t) {
                            double d = xr[t] - mean;
                            var += d * d;
                        }
                    }
                    var /= static_cast<double>(m);
                    stats.at2(0, ci) = static_cast<T>(mean);
                    stats.at2(1, ci) = static_cast<T>(1.0 / std::sqrt(var + n.attrs.bn_eps));
                }
                out = TensorT<T>(with_batch(batch, n.ps_shape));
                for (std::int64_t ni = 0; ni < batch; ++ni)
                    for (std::int64_t ci = 0; ci < c; ++ci) {
                        const T mu = stats.at2(0, ci), is = stats.at2(1, ci);
                        const T ga = gamma[ci], be = beta[ci];
                        const T* xr = x.data() + (ni * c + ci) * sp;
                        T* yr = out.data() + (ni * c + ci) * sp;
                        for (std::int64_t t = 0; t < sp; ++t) yr[t] = ga * (xr[t] - mu) * is + be;
                    }
                tape.aux[idx] = std::move(stats);
                break;
            }
        }
        if (opt.check_finite) out.check_finite(std::string("node ") + std::to_string(idx) + " (" + op_kind_name(n.kind) + ")");
    }
    return tape;
}

template <typename T>
NamedTensors<T> outputs_of(const Tape<T>& tape) {
    NamedTensors<T> out;
    for (auto& [name, id] : tape.graph->outputs()) out.emplace(name, tape.val[static_cast<std::size_t>(id)]);
    return out;
}

// Reverse-mode gradients of seed . output with respect to the named inputs
// and params in `wrt`. Param gradients are accumulated over the batch.
template <typename T>
NamedTensors<T> backprop(const Tape<T>& tape, const std::string& output_name, const TensorT<T>& seed,
                         const std::vector<std::string>& wrt) {
    const Graph& g = *tape.graph;
    const NodeId out_id = g.output_id(output_name);
    if (!seed.same_shape(tape.val[out_id]))
        throw ShapeError("backprop: seed shape " + shape_str(seed.shape()) + " does not match output " +
                         shape_str(tape.val[out_id].shape()));
    for (const auto& name : wrt) g.named_id(name);  // node-not-on-tape check

    const std::int64_t batch = tape.batch;
    std::vector<TensorT<T>> grad(g.size());
    std::vector<char> live(g.size(), 0);

    auto ensure = [&](NodeId id) -> TensorT<T>& {
        auto& t = grad[static_cast<std::size_t>(id)];
        if (!live[static_cast<std::size_t>(id)]) {
            t = TensorT<T>(tape.val[static_cast<std::size_t>(id)].shape());
            live[static_cast<std::size_t>(id)] = 1;
        }
        return t;
    };

    ensure(out_id) = seed;

    for (std::int64_t idx = static_cast<std::int64_t>(g.size()) - 1; idx >= 0; --idx) {
        if (!live[static_cast<std::size_t>(idx)]) continue;
        const Node& n = g.nodes()[static_cast<std::size_t>(idx)];
        const TensorT<T>& dy = grad[static_cast<std::size_t>(idx)];
        switch (n.kind) {
            case OpKind::input:
            case OpKind::param:
                break;
            case OpKind::dense: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& w = tape.val[n.in[1]];
                const std::int64_t in = w.dim(1), on = w.dim(0);
                TensorT<T>& dx = ensure(n.in[0]);
                TensorT<T>& dw = ensure(n.in[1]);
                for (std::int64_t ni = 0; ni < batch; ++ni) {
                    const T* dyr = dy.data() + ni * on;
                    const T* xr = x.data() + ni * in;
                    T* dxr = dx.data() + ni * in;
                    for (std::int64_t o = 0; o < on; ++o) {
                        const T gy = dyr[o];
                        if (gy == T(0)) continue;
                        const T* wr = w.data() + o * in;
                        T* dwr = dw.data() + o * in;
                        for (std::int64_t i = 0; i < in; ++i) {
                            dxr[i] += gy * wr[i];
                            dwr[i] += gy * xr[i];
                        }
                    }
                }
                if (n.in.size() > 2) {
                    TensorT<T>& db = ensure(n.in[2]);
                    for (std::int64_t ni = 0; ni < batch; ++ni)
                        for (std::int64_t o = 0; o < on; ++o) db[o] += dy[ni * on + o];
                }
                break;
            }
            case OpKind::conv2d: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& w = tape.val[n.in[1]];
                TensorT<T>* dxp = &ensure(n.in[0]);
                TensorT<T>* dwp = &ensure(n.in[1]);
                TensorT<T>* dbp = n.in.size() > 2 ? &ensure(n.in[2]) : nullptr;
                detail::conv2d_backward(x, w, dy, n.attrs.stride, n.attrs.pad, dxp, dwp, dbp);
                break;
            }
            case OpKind::deconv2d: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& w = tape.val[n.in[1]];
                TensorT<T>* dxp = &ensure(n.in[0]);
                TensorT<T>* dwp = &ensure(n.in[1]);
                TensorT<T>* dbp = n.in.size() > 2 ? &ensure(n.in[2]) : nullptr;
                detail::deconv2d_backward(x, w, dy, n.attrs.stride, n.attrs.pad, dxp, dwp, dbp);
                break;
            }
            case OpKind::relu: {
                const TensorT<T>& x = tape.val[n.in[0]];
                TensorT<T>& dx = ensure(n.in[0]);
                for (std::int64_t i = 0; i < dy.numel(); ++i)
                    if (x[i] > T(0)) dx[i] += dy[i];
                break;
            }
            case OpKind::leaky_relu: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const T sl = static_cast<T>(n.attrs.slope);
                TensorT<T>& dx = ensure(n.in[0]);
                for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * (x[i] > T(0) ? T(1) : sl);
                break;
            }
            case OpKind::tanh: {
                const TensorT<T>& y = tape.val[static_cast<std::size_t>(idx)];
                TensorT<T>& dx = ensure(n.in[0]);
                for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * (T(1) - y[i] * y[i]);
                break;
            }
            case OpKind::concat_channels: {
                std::int64_t tail = 1;
                for (std::size_t d = 1; d < n.ps_shape.size(); ++d) tail *= n.ps_shape[d];
                const std::int64_t row = shape_numel(n.ps_shape);
                std::int64_t off = 0;
                for (NodeId src : n.in) {
                    const std::int64_t block = g.node(src).ps_shape[0] * tail;
                    TensorT<T>& dx = ensure(src);
                    for (std::int64_t ni = 0; ni < batch; ++ni) {
                        const T* s = dy.data() + ni * row + off;
                        T* d = dx.data() + ni * block;
                        for (std::int64_t i = 0; i < block; ++i) d[i] += s[i];
                    }
                    off += block;
                }
                break;
            }
            case OpKind::dropout: {
                const TensorT<T>& m = tape.val[n.in[1]];
                const T keep_inv = T(1) / static_cast<T>(1.0 - n.attrs.rate);
                TensorT<T>& dx = ensure(n.in[0]);
                for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * m[i] * keep_inv;
                break;
            }
            case OpKind::spatial_replicate: {
                const std::int64_t k = n.ps_shape[0], hw = n.attrs.rep_h * static_cast<std::int64_t>(n.attrs.rep_w);
                TensorT<T>& dx = ensure(n.in[0]);
                for (std::int64_t ni = 0; ni < batch; ++ni)
                    for (std::int64_t c = 0; c < k; ++c) {
                        const T* s = dy.data() + (ni * k + c) * hw;
                        T acc = 0;
                        for (std::int64_t t = 0; t < hw; ++t) acc += s[t];
                        dx[ni * k + c] += acc;
                    }
                break;
            }
            case OpKind::add: {
                for (int side = 0; side < 2; ++side) {
                    const NodeId src = n.in[side];
                    TensorT<T>& dx = ensure(src);
                    if (g.node(src).batched || !n.batched) {
                        dx.add_scaled(dy, T(1));
                    } else {  // param broadcast across batch: sum over batch
                        const std::int64_t row = dx.numel();
                        for (std::int64_t ni = 0; ni < batch; ++ni) {
                            const T* s = dy.data() + ni * row;
                            for (std::int64_t i = 0; i < row; ++i) dx[i] += s[i];
                        }
                    }
                }
                break;
            }
            case OpKind::scale: {
                TensorT<T>& dx = ensure(n.in[0]);
                dx.add_scaled(dy, static_cast<T>(n.attrs.factor));
                break;
            }
            case OpKind::reduce_sum:
            case OpKind::reduce_mean: {
                TensorT<T>& dx = ensure(n.in[0]);
                const std::int64_t row = dx.numel() / batch;
                const T inv = n.kind == OpKind::reduce_mean ? T(1) / static_cast<T>(row) : T(1);
                for (std::int64_t ni = 0; ni < batch; ++ni) {
                    const T gy = dy[ni] * inv;
                    T* d = dx.data() + ni * row;
                    for (std::int64_t i = 0; i < row; ++i) d[i] += gy;
                }
                break;
            }
            case OpKind::batchnorm: {
                const TensorT<T>& x = tape.val[n.in[0]];
                const TensorT<T>& gamma = tape.val[n.in[1]];
                const TensorT<T>& stats = tape.aux[static_cast<std::size_t>(idx)];
                const std::int64_t c = n.ps_shape[0];
                std::int64_t sp = 1;
                for (std::size_t d = 1; d < n.ps_shape.size(); ++d) sp *= n.ps_shape[d];
                const std::int64_t m = batch * sp;
                TensorT<T>& dx = ensure(n.in[0]);
                TensorT<T>& dgamma = ensure(n.in[1]);
                TensorT<T>& dbeta = ensure(n.in[2]);
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    const T mu = stats.at2(0, ci), is = stats.at2(1, ci);
                    double sum_dy = 0, sum_dy_xhat = 0;
                    for (std::int64_t ni = 0; ni < batch; ++ni) {
                        const T* xr = x.data() + (ni * c + ci) * sp;
                        const T* gr = dy.data() + (ni * c + ci) * sp;
                        for (std::int64_t t = 0; t < sp; ++t) {
                            sum_dy += gr[t];
                            sum_dy_xhat += gr[t] * (xr[t] - mu) * is;
                        }
                    }
                    dgamma[ci] += static_cast<T>(sum_dy_xhat);
                    dbeta[ci] += static_cast<T>(sum_dy);
                    const T a1 = static_cast<T>(sum_dy / m);
                    const T a2 = static_cast<T>(sum_dy_xhat / m);
                    const T gis = gamma[ci] * is;
                    for (std::int64_t ni = 0; ni < batch; ++ni) {
                        const T* xr = x.data() + (ni * c + ci) * sp;
                        const T* gr = dy.data() + (ni * c + ci) * sp;
                        T* dr = dx.data() + (ni * c + ci) * sp;
                        for (std::int64_t t = 0; t < sp; ++t) {
                            const T xhat = (xr[t] - mu) * is;
                            dr[t] += gis * (gr[t] - a1 - xhat * a2);
                        }
                    }
                }
                break;
            }
        }
    }

    NamedTensors<T> result;
    for (const auto& name : wrt) {
        NodeId id = g.named_id(name);
        if (live[static_cast<std::size_t>(id)])
            result.emplace(name, std::move(grad[static_cast<std::size_t>(id)]));
        else
            result.emplace(name, TensorT<T>(tape.val[static_cast<std::size_t>(id)].shape()));
    }
    return result;
}

// ---- finite-difference gradient check -------------------------------------

struct FdEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = true;
};

struct FdReport {
    std::vector<FdEntry> entries;
    double tolerance = 0.0;
    bool pass = true;
};

// Compares reverse-mode gradients of a randomly weighted sum of all outputs
// against central finite differences. Run at 64-bit; float graphs are too
// noisy for the default tolerance.
inline FdReport finite_diff_check(const Graph& g, const NamedTensors<double>& bindings, double tolerance,
                                  double step = 1e-5, std::vector<std::string> wrt = {},
                                  double abs_floor = 1e-8) {
    FdReport report;
    report.tolerance = tolerance;
    if (wrt.empty()) wrt = g.param_names();
    if (wrt.empty()) return report;  // zero-parameter graph: vacuous pass

    RngStream wr(0x5eedULL);
    std::vector<TensorT<double>> weights;
    {
        auto tape = evaluate(g, bindings);
        for (auto& [name, id] : g.outputs()) {
            (void)name;
            weights.push_back(TensorT<double>::randn(tape.val[static_cast<std::size_t>(id)].shape(), wr));
        }
    }

    auto objective = [&](const NamedTensors<double>& b) {
        auto tape = evaluate(g, b);
        double s = 0;
        std::size_t oi = 0;
        for (auto& [name, id] : g.outputs()) {
            (void)name;
            const auto& v = tape.val[static_cast<std::size_t>(id)];
            const auto& w = weights[oi++];
            for (std::int64_t i = 0; i < v.numel(); ++i) s += v[i] * w[i];
        }
        return s;
    };

    // analytic gradient, accumulated across outputs
    NamedTensors<double> analytic;
    {
        auto tape = evaluate(g, bindings);
        std::size_t oi = 0;
        for (auto& [name, id] : g.outputs()) {
            (void)id;
            auto part = backprop(tape, name, weights[oi++], wrt);
            for (auto& [pn, pg] : part) {
                auto it = analytic.find(pn);
                if (it == analytic.end())
                    analytic.emplace(pn, std::move(pg));
                else
                    it->second.add_scaled(pg, 1.0);
            }
        }
    }

    NamedTensors<double> work = bindings;
    for (const auto& name : wrt) {
        FdEntry entry;
        entry.name = name;
        TensorT<double>& t = work.at(name);
        const TensorT<double>& an = analytic.at(name);
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double keep = t[i];
            t[i] = keep + step;
            const double fp = objective(work);
            t[i] = keep - step;
            const double fm = objective(work);
            t[i] = keep;
            const double fd = (fp - fm) / (2.0 * step);
            const double diff = std::abs(an[i] - fd);
            if (diff <= abs_floor) continue;
            const double rel = diff / std::max({std::abs(an[i]), std::abs(fd), abs_floor});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        entry.pass = entry.max_rel_err < tolerance;
        report.pass = report.pass && entry.pass;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace coopgen
