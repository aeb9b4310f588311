#pragma once

#include <string>
#include <vector>

#include "coopgen/arch.hpp"
#include "coopgen/autodiff.hpp"
#include "coopgen/graph.hpp"
#include "coopgen/rng.hpp"

namespace coopgen {

namespace detail {

// Applies one LayerSpec: linear map, then batchnorm, then dropout, then the
// activation. Params are registered as <prefix>.w/.b/.gamma/.beta and dropout
// masks as <prefix>.mask inputs so they can be drawn and replayed explicitly.
inline NodeId apply_layer(Graph& g, NodeId x, const LayerSpec& l, const std::string& prefix) {
    const Shape& in = g.node(x).ps_shape;
    NodeId y;
    if (l.kind == "dense") {
        auto w = g.param(prefix + ".w", {l.units, shape_numel(in)});
        auto b = g.param(prefix + ".b", {l.units});
        y = g.dense(x, w, b);
    } else if (l.kind == "conv") {
        if (in.size() != 3) throw ConfigError(prefix + ": conv layer on non-image input " + shape_str(in));
        auto w = g.param(prefix + ".w", {l.channels, in[0], l.kernel, l.kernel});
        auto b = g.param(prefix + ".b", {l.channels});
        y = g.conv2d(x, w, b, l.stride, l.pad);
    } else if (l.kind == "deconv") {
        if (in.size() != 3) throw ConfigError(prefix + ": deconv layer on non-image input " + shape_str(in));
        auto w = g.param(prefix + ".w", {in[0], l.channels, l.kernel, l.kernel});
        auto b = g.param(prefix + ".b", {l.channels});
        if (l.pad >= 0) {
            int op = 0;
            if (l.out_size >= 0) {
                op = static_cast<int>(l.out_size - deconv_out_extent(in[1], l.kernel, l.stride, l.pad, 0));
                if (op < 0) throw ConfigError(prefix + ": out_size unreachable with the given pad");
            }
            y = g.deconv2d(x, w, b, l.stride, l.pad, op);
        } else {
            y = g.deconv2d_to(x, w, b, l.stride, l.out_size);
        }
    } else {
        throw ConfigError(prefix + ": unknown layer kind '" + l.kind + "'");
    }
    if (l.batchnorm) {
        auto gm = g.param(prefix + ".gamma", {g.node(y).ps_shape[0]});
        auto bt = g.param(prefix + ".beta", {g.node(y).ps_shape[0]});
        y = g.batchnorm(y, gm, bt);
    }
    if (l.dropout > 0) {
        auto m = g.input(prefix + ".mask", g.node(y).ps_shape);
        y = g.dropout(y, m, l.dropout);
    }
    if (l.activation == "relu")
        y = g.relu(y);
    else if (l.activation == "leaky_relu")
        y = g.leaky_relu(y, l.leaky_slope);
    else if (l.activation == "tanh")
        y = g.tanh(y);
    return y;
}

inline NodeId apply_stack(Graph& g, NodeId x, const std::vector<LayerSpec>& stack, const std::string& prefix) {
    for (std::size_t i = 0; i < stack.size(); ++i) x = apply_layer(g, x, stack[i], prefix + std::to_string(i));
    return x;
}

inline NodeId as_image(Graph& g, NodeId x) {
    // 1x1 spatial view of a feature vector
    return g.spatial_replicate(x, 1, 1);
}

}  // namespace detail

// ---- generator graph -------------------------------------------------------
//
// Inputs: "X" [latent_dim] (vector-latent variants), "C" [cond], and one
// <layer>.mask input per dropout layer. Output "Y" with the target shape.
inline Graph build_generator_graph(const ArchDescriptor& a) {
    Graph g;
    const bool image_target = a.target_shape.size() == 3;
    if (!image_target && a.target_shape.size() != 1)
        throw ConfigError("generator: target_shape must be rank 1 or 3");
    NodeId out;

    if (a.variant == "cat2img_early") {
        if (a.latent_dim <= 0) throw ConfigError("cat2img_early generator needs latent_dim");
        auto x = g.input("X", {a.latent_dim});
        auto c = g.input("C", a.cond_shape);
        if (a.cond_shape.size() != 1) throw ConfigError("cat2img_early: condition must be a vector");
        auto j = g.concat_channels({x, c});
        out = image_target ? detail::apply_stack(g, detail::as_image(g, j), a.post, "g.post")
                           : detail::apply_stack(g, j, a.post, "g.post");
    } else if (a.variant == "cat2img_late") {
        if (a.latent_dim <= 0) throw ConfigError("cat2img_late generator needs latent_dim");
        if (a.cond_shape.size() != 1) throw ConfigError("cat2img_late: condition must be a vector");
        auto x = g.input("X", {a.latent_dim});
        auto c = g.input("C", a.cond_shape);
        if (image_target) {
            auto mid = detail::apply_stack(g, detail::as_image(g, x), a.pre, "g.pre");
            const Shape& ms = g.node(mid).ps_shape;
            if (a.concat_spatial > 0 && (ms[1] != a.concat_spatial || ms[2] != a.concat_spatial))
                throw ConfigError("cat2img_late: pre stack produced " + shape_str(ms) + ", expected spatial extent " +
                                  std::to_string(a.concat_spatial));
            auto crep = g.spatial_replicate(c, static_cast<int>(ms[1]), static_cast<int>(ms[2]));
            out = detail::apply_stack(g, g.concat_channels({mid, crep}), a.post, "g.post");
        } else {
            auto mid = detail::apply_stack(g, x, a.pre, "g.pre");
            out = detail::apply_stack(g, g.concat_channels({mid, c}), a.post, "g.post");
        }
    } else if (a.variant == "img2img_naive") {
        if (a.latent_dim <= 0) throw ConfigError("img2img_naive generator needs latent_dim");
        if (a.cond_shape.size() != 3) throw ConfigError("img2img_naive: condition must be an image");
        auto x = g.input("X", {a.latent_dim});
        auto c = g.input("C", a.cond_shape);
        auto z = detail::apply_stack(g, c, a.pre, "g.pre");
        if (g.node(z).ps_shape.size() != 1)
            throw ConfigError("img2img_naive: pre stack must end in a dense layer (vector embedding)");
        auto j = g.concat_channels({x, z});
        out = detail::apply_stack(g, detail::as_image(g, j), a.post, "g.post");
    } else if (a.variant == "img2img_unet") {
        if (a.cond_shape.size() != 3 || !image_target) throw ConfigError("img2img_unet: image condition and target required");
        if (a.unet_channels.empty()) throw ConfigError("img2img_unet: unet_channels required");
        const int depth = static_cast<int>(a.unet_channels.size());
        auto c = g.input("C", a.cond_shape);
        std::vector<NodeId> enc;
        NodeId cur = c;
        for (int i = 0; i < depth; ++i) {
            LayerSpec l;
            l.kind = "conv";
            l.channels = a.unet_channels[static_cast<std::size_t>(i)];
            l.kernel = a.unet_kernel;
            l.stride = 2;
            l.batchnorm = a.unet_batchnorm && i > 0;
            l.activation = "leaky_relu";
            l.leaky_slope = a.unet_leaky_slope;
            cur = detail::apply_layer(g, cur, l, "g.enc" + std::to_string(i));
            if (g.node(cur).ps_shape[1] < 1) throw ConfigError("img2img_unet: too deep for the target extent");
            enc.push_back(cur);
        }
        // decoder layer i mirrors encoder layer depth-1-i and joins its skip
        for (int i = 0; i < depth; ++i) {
            const bool last = i == depth - 1;
            LayerSpec l;
            l.kind = "deconv";
            l.channels = last ? static_cast<int>(a.target_shape[0]) : a.unet_channels[static_cast<std::size_t>(depth - 2 - i)];
            l.kernel = a.unet_kernel;
            l.stride = 2;
            l.batchnorm = a.unet_batchnorm && !last;
            l.dropout = last ? 0.0 : a.unet_dropout;
            l.activation = last ? "none" : "relu";
            cur = detail::apply_layer(g, cur, l, "g.dec" + std::to_string(i));
            if (!last) cur = g.concat_channels({cur, enc[static_cast<std::size_t>(depth - 2 - i)]});
        }
        out = cur;
    } else {
        throw ConfigError("unknown generator variant '" + a.variant + "'");
    }

    if (a.head == "tanh") out = g.tanh(out);
    if (g.node(out).ps_shape != a.target_shape)
        throw ConfigError("generator produces " + shape_str(g.node(out).ps_shape) + ", target is " +
                          shape_str(a.target_shape));
    g.mark_output("Y", out);
    return g;
}

// ---- energy graph ----------------------------------------------------------
//
// Inputs "Y" and "C"; output "f", one scalar per batch element: the last
// dense layer has `energy_units` filters whose sum is the (negative) energy.
inline Graph build_energy_graph(const ArchDescriptor& a) {
    Graph g;
    if (a.energy_units <= 0) throw ConfigError("energy model needs positive energy_units");
    const bool image_target = a.target_shape.size() == 3;
    auto y = g.input("Y", a.target_shape);
    auto c = g.input("C", a.cond_shape);
    NodeId feat;

    if (a.variant == "cat2img_early") {
        if (a.cond_shape.size() != 1) throw ConfigError("cat2img_early energy: condition must be a vector");
        if (image_target) {
            auto crep = g.spatial_replicate(c, static_cast<int>(a.target_shape[1]), static_cast<int>(a.target_shape[2]));
            feat = detail::apply_stack(g, g.concat_channels({y, crep}), a.post, "f.post");
        } else {
            feat = detail::apply_stack(g, g.concat_channels({y, c}), a.post, "f.post");
        }
    } else if (a.variant == "cat2img_late") {
        if (a.cond_shape.size() != 1) throw ConfigError("cat2img_late energy: condition must be a vector");
        auto mid = detail::apply_stack(g, y, a.pre, "f.pre");
        const Shape& ms = g.node(mid).ps_shape;
        if (ms.size() == 3) {
            if (a.concat_spatial > 0 && (ms[1] != a.concat_spatial || ms[2] != a.concat_spatial))
                throw ConfigError("cat2img_late energy: pre stack produced " + shape_str(ms) +
                                  ", expected spatial extent " + std::to_string(a.concat_spatial));
            auto crep = g.spatial_replicate(c, static_cast<int>(ms[1]), static_cast<int>(ms[2]));
            feat = detail::apply_stack(g, g.concat_channels({mid, crep}), a.post, "f.post");
        } else {
            feat = detail::apply_stack(g, g.concat_channels({mid, c}), a.post, "f.post");
        }
    } else if (a.variant == "solver_channel_concat") {
        if (a.cond_shape.size() != 3 || !image_target)
            throw ConfigError("solver_channel_concat: image condition and target required");
        if (a.cond_shape[1] != a.target_shape[1] || a.cond_shape[2] != a.target_shape[2])
            throw ConfigError("solver_channel_concat: condition and target spatial extents must match");
        feat = detail::apply_stack(g, g.concat_channels({y, c}), a.post, "f.post");
    } else {
        throw ConfigError("unknown energy variant '" + a.variant + "'");
    }

    auto hw = g.param("f.head.w", {a.energy_units, shape_numel(g.node(feat).ps_shape)});
    g.mark_output("f", g.reduce_sum(g.dense(feat, hw)));
    return g;
}

// Conventional initialization: Gaussian weights (std 0.02), zero biases,
// unit batchnorm scale.
template <typename T>
NamedTensors<T> init_params(const Graph& g, RngStream& rng, double weight_std = 0.02) {
    NamedTensors<T> out;
    for (const auto& n : g.nodes()) {
        if (n.kind != OpKind::param) continue;
        if (n.name.ends_with(".w"))
            out.emplace(n.name, TensorT<T>::randn(n.ps_shape, rng, static_cast<T>(weight_std)));
        else if (n.name.ends_with(".gamma"))
            out.emplace(n.name, TensorT<T>::full(n.ps_shape, T(1)));
        else
            out.emplace(n.name, TensorT<T>(n.ps_shape));
    }
    return out;
}

// Latent variability of the initializer: an explicit noise vector, or the
// recorded per-layer dropout masks when the architecture uses dropout.
template <typename T>
struct Latent {
    TensorT<T> x;           // [n, d]
    NamedTensors<T> masks;  // name -> [n, ...] binary
    bool has_x = false;

    std::int64_t batch() const {
        if (has_x) return x.dim(0);
        if (!masks.empty()) return masks.begin()->second.dim(0);
        throw Error("empty latent");
    }
};

template <typename T>
class GeneratorModel {
public:
    ArchDescriptor arch;
    Graph graph;
    NamedTensors<T> params;
    T residual_std = T(0);

    static GeneratorModel make(const ArchDescriptor& a, RngStream& rng, double sigma, double weight_std = 0.02) {
        GeneratorModel m;
        m.arch = a;
        m.graph = build_generator_graph(a);
        m.params = init_params<T>(m.graph, rng, weight_std);
        m.residual_std = static_cast<T>(sigma);
        return m;
    }

    bool uses_dropout_latent() const { return !mask_info().empty(); }

    // (name, per-sample shape, keep probability) per dropout mask input
    std::vector<std::tuple<std::string, Shape, double>> mask_info() const {
        std::vector<std::tuple<std::string, Shape, double>> out;
        for (const auto& n : graph.nodes()) {
            if (n.kind != OpKind::dropout) continue;
            const Node& mask = graph.node(n.in[1]);
            out.emplace_back(mask.name, mask.ps_shape, 1.0 - n.attrs.rate);
        }
        return out;
    }

    Latent<T> sample_latent(std::int64_t batch, RngStream& rng) const {
        if (batch < 1) throw Error("sample_latent: batch must be >= 1");
        Latent<T> z;
        if (arch.latent_dim > 0) {
            z.x = TensorT<T>::randn({batch, arch.latent_dim}, rng);
            z.has_x = true;
        }
        for (const auto& [name, shape, keep] : mask_info()) {
            TensorT<T> m(detail::with_batch(batch, shape));
            for (std::int64_t i = 0; i < m.numel(); ++i) m[i] = rng.bernoulli(keep) ? T(1) : T(0);
            z.masks.emplace(name, std::move(m));
        }
        if (!z.has_x && z.masks.empty()) throw ConfigError("generator has neither a latent vector nor dropout masks");
        return z;
    }

    NamedTensors<T> bindings(const Latent<T>& z, const TensorT<T>& C) const {
        NamedTensors<T> b = params;
        if (z.has_x) b.emplace("X", z.x);
        for (const auto& [k, v] : z.masks) b.emplace(k, v);
        b.emplace("C", C);
        return b;
    }

    Tape<T> forward(const Latent<T>& z, const TensorT<T>& C, const EvalOptions& opt = {}) const {
        return evaluate(graph, bindings(z, C), opt);
    }

    // g(X, C): the deterministic mean map
    TensorT<T> mean_map(const Latent<T>& z, const TensorT<T>& C) const { return forward(z, C).output("Y"); }

    // g(X, C) + eps, eps ~ N(0, sigma^2 I); sigma = 0 is the mean map
    TensorT<T> generate(const Latent<T>& z, const TensorT<T>& C, RngStream& rng) const {
        TensorT<T> y = mean_map(z, C);
        if (residual_std > T(0))
            for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += static_cast<T>(rng.normal()) * residual_std;
        return y;
    }
};

template <typename T>
class EnergyModel {
public:
    ArchDescriptor arch;
    Graph graph;
    NamedTensors<T> params;
    T reference_std = T(0.016);

    static EnergyModel make(const ArchDescriptor& a, RngStream& rng, double ref_std, double weight_std = 0.02) {
        EnergyModel m;
        m.arch = a;
        m.graph = build_energy_graph(a);
        m.params = init_params<T>(m.graph, rng, weight_std);
        m.reference_std = static_cast<T>(ref_std);
        return m;
    }

    NamedTensors<T> bindings(const TensorT<T>& Y, const TensorT<T>& C) const {
        NamedTensors<T> b = params;
        b.emplace("Y", Y);
        b.emplace("C", C);
        return b;
    }

    Tape<T> forward(const TensorT<T>& Y, const TensorT<T>& C, const EvalOptions& opt = {}) const {
        return evaluate(graph, bindings(Y, C), opt);
    }

    // f(Y,C;theta), optionally plus the Gaussian reference term
    // -|Y|^2 / (2 s^2). The reference term is theta-free: it belongs in the
    // sampling objective but cancels from the parameter gradient.
    // reference_std == 0 disables the reference term entirely.
    TensorT<T> energy(const TensorT<T>& Y, const TensorT<T>& C, bool include_reference) const {
        TensorT<T> f = forward(Y, C).output("f");
        if (include_reference && reference_std > T(0)) {
            const std::int64_t n = Y.dim(0), row = Y.numel() / n;
            const T inv = T(1) / (T(2) * reference_std * reference_std);
            for (std::int64_t i = 0; i < n; ++i) {
                T ss = 0;
                const T* yr = Y.data() + i * row;
                for (std::int64_t j = 0; j < row; ++j) ss += yr[j] * yr[j];
                f[i] -= ss * inv;
            }
        }
        return f;
    }

    // d/dY of the total energy; shape of Y
    TensorT<T> energy_grad_y(const TensorT<T>& Y, const TensorT<T>& C, bool include_reference) const {
        Tape<T> tape = forward(Y, C);
        TensorT<T> seed = TensorT<T>::full({Y.dim(0)}, T(1));
        TensorT<T> grad = backprop(tape, "f", seed, {"Y"}).at("Y");
        if (include_reference && reference_std > T(0)) grad.add_scaled(Y, -T(1) / (reference_std * reference_std));
        return grad;
    }
};

// ---- paper-scale presets ----------------------------------------------------

// Category-to-image initializer for 28x28 grayscale targets: the 110-vector
// [X;C] enters at 1x1 and four stride-{1,2,2,2} deconvolutions grow it
// through 4, 7, 14 to 28 pixels.
inline ArchDescriptor arch_cat2img28_generator(int latent_dim = 100, int num_classes = 10) {
    ArchDescriptor a;
    a.variant = "cat2img_early";
    a.target_shape = {1, 28, 28};
    a.cond_shape = {num_classes};
    a.latent_dim = latent_dim;
    const int chans[4] = {256, 128, 64, 1};
    const int strides[4] = {1, 2, 2, 2};
    const std::int64_t sizes[4] = {4, 7, 14, 28};
    for (int i = 0; i < 4; ++i) {
        LayerSpec l;
        l.kind = "deconv";
        l.kernel = 5;
        l.stride = strides[i];
        l.channels = chans[i];
        l.out_size = sizes[i];
        if (i < 3) {
            l.batchnorm = true;
            l.activation = "relu";
        }
        a.post.push_back(l);
    }
    a.head = "tanh";
    return a;
}

// Category-to-image solver for 28x28 targets with late concatenation: two
// convolutions bring Y to 7x7x128, the one-hot condition joins there
// (7x7x138 for ten classes), one more convolution and a 100-filter dense
// head produce the energy.
inline ArchDescriptor arch_cat2img28_energy(int num_classes = 10) {
    ArchDescriptor a;
    a.variant = "cat2img_late";
    a.target_shape = {1, 28, 28};
    a.cond_shape = {num_classes};
    a.concat_spatial = 7;
    LayerSpec c1;
    c1.kind = "conv";
    c1.kernel = 5;
    c1.stride = 2;
    c1.channels = 64;
    c1.activation = "relu";
    LayerSpec c2 = c1;
    c2.kernel = 3;
    c2.channels = 128;
    a.pre = {c1, c2};
    LayerSpec c3;
    c3.kind = "conv";
    c3.kernel = 3;
    c3.stride = 1;
    c3.channels = 256;
    c3.activation = "relu";
    a.post = {c3};
    a.energy_units = 100;
    a.head = "none";
    return a;
}

}  // namespace coopgen
