#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "coopgen/tensor.hpp"

namespace coopgen {

using NodeId = std::int32_t;

enum class OpKind {
    input,
    param,
    dense,
    conv2d,
    deconv2d,
    relu,
    leaky_relu,
    tanh,
    concat_channels,
    dropout,
    spatial_replicate,
    add,
    scale,
    reduce_sum,
    reduce_mean,
    batchnorm,
};

const char* op_kind_name(OpKind k);

struct OpAttrs {
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    int out_pad = 0;       // deconv2d only
    double slope = 0.2;    // leaky_relu
    double rate = 0.5;     // dropout
    double factor = 1.0;   // scale
    int rep_h = 0, rep_w = 0;  // spatial_replicate
    bool train_mode = true;    // batchnorm; statistics always come from the
                               // current batch, the flag is kept for the
                               // descriptor schema
    double bn_eps = 1e-5;
};

struct Node {
    OpKind kind;
    std::string name;          // nonempty for input/param nodes
    std::vector<NodeId> in;
    OpAttrs attrs;
    Shape ps_shape;            // per-sample shape; full shape for params
    bool batched = true;       // params are the only batchless nodes
};

// Conv output extent under the standard strided arithmetic.
inline std::int64_t conv_out_extent(std::int64_t in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

inline std::int64_t deconv_out_extent(std::int64_t in, int kernel, int stride, int pad, int out_pad) {
    return (in - 1) * stride - 2 * pad + kernel + out_pad;
}

// Default padding: "same"-style for stride 1 (odd kernels), otherwise the
// symmetric padding whose floor arithmetic matches ceil(h/stride) outputs.
inline int default_conv_pad(int kernel, int stride) {
    int p = (kernel - stride + 1) / 2;
    return p < 0 ? 0 : p;
}

// A static operator graph. Nodes are appended in topological order by
// construction; shapes are inferred per sample (batch dim excluded) as the
// graph is built, so configuration mistakes surface before any evaluation.
class Graph {
public:
    NodeId input(const std::string& name, Shape per_sample_shape);
    NodeId param(const std::string& name, Shape shape);

    NodeId dense(NodeId x, NodeId w, NodeId b = -1);
    NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad = -1);
    NodeId deconv2d(NodeId x, NodeId w, NodeId b, int stride, int pad, int out_pad);
    // Picks (pad, out_pad) so the output extent equals `out_size`
    // (or in*stride when out_size < 0).
    NodeId deconv2d_to(NodeId x, NodeId w, NodeId b, int stride, std::int64_t out_size = -1);

    NodeId relu(NodeId x);
    NodeId leaky_relu(NodeId x, double slope = 0.2);
    NodeId tanh(NodeId x);
    NodeId concat_channels(const std::vector<NodeId>& xs);
    NodeId dropout(NodeId x, NodeId mask, double rate);
    NodeId spatial_replicate(NodeId x, int h, int w);
    NodeId add(NodeId a, NodeId b);
    NodeId scale(NodeId x, double factor);
    NodeId reduce_sum(NodeId x);
    NodeId reduce_mean(NodeId x);
    NodeId batchnorm(NodeId x, NodeId gamma, NodeId beta, bool train_mode = true);

    void mark_output(const std::string& name, NodeId id);

    const std::vector<Node>& nodes() const { return nodes_; }
    const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return nodes_.size(); }

    const std::vector<std::pair<std::string, NodeId>>& outputs() const { return outputs_; }
    NodeId output_id(const std::string& name) const;

    // Named nodes (inputs and params).
    bool has_named(const std::string& name) const { return named_.count(name) != 0; }
    NodeId named_id(const std::string& name) const;
    std::vector<std::string> param_names() const;
    std::vector<std::string> input_names() const;

private:
    NodeId push(Node n);
    NodeId check_id(NodeId id) const;
    const Shape& ps(NodeId id) const { return node(id).ps_shape; }

    std::vector<Node> nodes_;
    std::vector<std::pair<std::string, NodeId>> outputs_;
    std::map<std::string, NodeId> named_;
};

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::input: return "input";
        case OpKind::param: return "param";
        case OpKind::dense: return "dense";
        case OpKind::conv2d: return "conv2d";
        case OpKind::deconv2d: return "deconv2d";
        case OpKind::relu: return "relu";
        case OpKind::leaky_relu: return "leaky_relu";
        case OpKind::tanh: return "tanh";
        case OpKind::concat_channels: return "concat_channels";
        case OpKind::dropout: return "dropout";
        case OpKind::spatial_replicate: return "spatial_replicate";
        case OpKind::add: return "add";
        case OpKind::scale: return "scale";
        case OpKind::reduce_sum: return "reduce_sum";
        case OpKind::reduce_mean: return "reduce_mean";
        case OpKind::batchnorm: return "batchnorm";
    }
    return "?";
}

inline NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

inline NodeId Graph::check_id(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
        throw Error("graph: bad node id " + std::to_string(id));
    return id;
}

inline NodeId Graph::input(const std::string& name, Shape per_sample_shape) {
    if (name.empty() || named_.count(name)) throw Error("graph: duplicate or empty input name '" + name + "'");
    for (auto d : per_sample_shape)
        if (d <= 0) throw ShapeError("input '" + name + "': extents must be positive");
    NodeId id = push({OpKind::input, name, {}, {}, std::move(per_sample_shape), true});
    named_[name] = id;
    return id;
}

inline NodeId Graph::param(const std::string& name, Shape shape) {
    if (name.empty() || named_.count(name)) throw Error("graph: duplicate or empty param name '" + name + "'");
    if (shape.empty()) throw ShapeError("param '" + name + "': shape must be nonempty");
    for (auto d : shape)
        if (d <= 0) throw ShapeError("param '" + name + "': extents must be positive");
    NodeId id = push({OpKind::param, name, {}, {}, std::move(shape), false});
    named_[name] = id;
    return id;
}

inline NodeId Graph::dense(NodeId x, NodeId w, NodeId b) {
    check_id(x);
    check_id(w);
    if (!node(x).batched) throw ShapeError("dense: input must be batched");
    const Shape& ws = ps(w);
    if (ws.size() != 2) throw ShapeError("dense: weight must be rank 2 [out,in]");
    std::int64_t in = shape_numel(ps(x));
    if (ws[1] != in)
        throw ShapeError("dense: weight expects input size " + std::to_string(ws[1]) + ", got " + std::to_string(in));
    Node n{OpKind::dense, {}, {x, w}, {}, {ws[0]}, node(x).batched};
    if (b >= 0) {
        check_id(b);
        if (ps(b) != Shape{ws[0]}) throw ShapeError("dense: bias shape must be [out]");
        n.in.push_back(b);
    }
    return push(std::move(n));
}

inline NodeId Graph::conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
    check_id(x);
    check_id(w);
    const Shape& xs = ps(x);
    const Shape& ws = ps(w);
    if (xs.size() != 3) throw ShapeError("conv2d: input must be [c,h,w] per sample, got " + shape_str(xs));
    if (!node(x).batched) throw ShapeError("conv2d: input must be batched");
    if (ws.size() != 4) throw ShapeError("conv2d: weight must be [oc,ic,kh,kw]");
    if (ws[1] != xs[0])
        throw ShapeError("conv2d: weight expects " + std::to_string(ws[1]) + " input channels, got " + std::to_string(xs[0]));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const int k = static_cast<int>(ws[2]);
    if (ws[2] != ws[3]) throw ShapeError("conv2d: only square kernels are supported");
    if (pad < 0) pad = default_conv_pad(k, stride);
    std::int64_t oh = conv_out_extent(xs[1], k, stride, pad);
    std::int64_t ow = conv_out_extent(xs[2], k, stride, pad);
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: output extent would be empty");
    OpAttrs a;
    a.kernel = k;
    a.stride = stride;
    a.pad = pad;
    Node n{OpKind::conv2d, {}, {x, w}, a, {ws[0], oh, ow}, node(x).batched};
    if (b >= 0) {
        check_id(b);
        if (ps(b) != Shape{ws[0]}) throw ShapeError("conv2d: bias shape must be [oc]");
        n.in.push_back(b);
    }
    return push(std::move(n));
}

inline NodeId Graph::deconv2d(NodeId x, NodeId w, NodeId b, int stride, int pad, int out_pad) {
    check_id(x);
    check_id(w);
    const Shape& xs = ps(x);
    const Shape& ws = ps(w);
    if (xs.size() != 3) throw ShapeError("deconv2d: input must be [c,h,w] per sample, got " + shape_str(xs));
    if (!node(x).batched) throw ShapeError("deconv2d: input must be batched");
    if (ws.size() != 4) throw ShapeError("deconv2d: weight must be [ic,oc,kh,kw]");
    if (ws[0] != xs[0])
        throw ShapeError("deconv2d: weight expects " + std::to_string(ws[0]) + " input channels, got " + std::to_string(xs[0]));
    if (ws[2] != ws[3]) throw ShapeError("deconv2d: only square kernels are supported");
    if (stride < 1 || pad < 0 || out_pad < 0) throw ShapeError("deconv2d: bad stride/pad/out_pad");
    const int k = static_cast<int>(ws[2]);
    std::int64_t oh = deconv_out_extent(xs[1], k, stride, pad, out_pad);
    std::int64_t ow = deconv_out_extent(xs[2], k, stride, pad, out_pad);
    if (oh < 1 || ow < 1) throw ShapeError("deconv2d: output extent would be empty");
    OpAttrs a;
    a.kernel = k;
    a.stride = stride;
    a.pad = pad;
    a.out_pad = out_pad;
    Node n{OpKind::deconv2d, {}, {x, w}, a, {ws[1], oh, ow}, node(x).batched};
    if (b >= 0) {
        check_id(b);
        if (ps(b) != Shape{ws[1]}) throw ShapeError("deconv2d: bias shape must be [oc]");
        n.in.push_back(b);
    }
    return push(std::move(n));
}

inline NodeId Graph::deconv2d_to(NodeId x, NodeId w, NodeId b, int stride, std::int64_t out_size) {
    check_id(x);
    check_id(w);
    const Shape& xs = ps(x);
    const Shape& ws = ps(w);
    if (xs.size() != 3 || ws.size() != 4) throw ShapeError("deconv2d_to: bad input/weight rank");
    const int k = static_cast<int>(ws[2]);
    const std::int64_t h = xs[1];
    if (out_size < 0) out_size = h * stride;
    int pad = default_conv_pad(k, stride);
    std::int64_t op = out_size - deconv_out_extent(h, k, stride, pad, 0);
    while (op < 0) {
        ++pad;
        op += 2;
    }
    while (op >= 2 && pad > 0) {
        --pad;
        op -= 2;
    }
    if (op < 0) throw ShapeError("deconv2d_to: cannot reach output size " + std::to_string(out_size));
    return deconv2d(x, w, b, stride, pad, static_cast<int>(op));
}

inline NodeId Graph::relu(NodeId x) {
    check_id(x);
    return push({OpKind::relu, {}, {x}, {}, ps(x), node(x).batched});
}

inline NodeId Graph::leaky_relu(NodeId x, double slope) {
    check_id(x);
    OpAttrs a;
    a.slope = slope;
    return push({OpKind::leaky_relu, {}, {x}, a, ps(x), node(x).batched});
}

inline NodeId Graph::tanh(NodeId x) {
    check_id(x);
    return push({OpKind::tanh, {}, {x}, {}, ps(x), node(x).batched});
}

inline NodeId Graph::concat_channels(const std::vector<NodeId>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: need at least one input");
    std::int64_t c = 0;
    Shape first = ps(check_id(xs[0]));
    if (first.empty()) throw ShapeError("concat_channels: inputs must have a channel dim");
    for (NodeId id : xs) {
        const Shape& s = ps(check_id(id));
        if (s.size() != first.size()) throw ShapeError("concat_channels: rank mismatch");
        for (std::size_t d = 1; d < s.size(); ++d)
            if (s[d] != first[d]) throw ShapeError("concat_channels: trailing extents differ");
        if (!node(id).batched) throw ShapeError("concat_channels: params not supported as inputs");
        c += s[0];
    }
    Shape out = first;
    out[0] = c;
    return push({OpKind::concat_channels, {}, xs, {}, std::move(out), true});
}

inline NodeId Graph::dropout(NodeId x, NodeId mask, double rate) {
    check_id(x);
    check_id(mask);
    if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout: rate must be in [0,1)");
    if (ps(mask) != ps(x)) throw ShapeError("dropout: mask shape must match input");
    if (!node(x).batched) throw ShapeError("dropout: input must be batched");
    if (!node(mask).batched) throw ShapeError("dropout: mask must be a batched input");
    OpAttrs a;
    a.rate = rate;
    return push({OpKind::dropout, {}, {x, mask}, a, ps(x), node(x).batched});
}

inline NodeId Graph::spatial_replicate(NodeId x, int h, int w) {
    check_id(x);
    const Shape& xs = ps(x);
    if (xs.size() != 1) throw ShapeError("spatial_replicate: input must be a vector per sample");
    if (!node(x).batched) throw ShapeError("spatial_replicate: input must be batched");
    if (h < 1 || w < 1) throw ShapeError("spatial_replicate: target extents must be positive");
    OpAttrs a;
    a.rep_h = h;
    a.rep_w = w;
    return push({OpKind::spatial_replicate, {}, {x}, a, {xs[0], h, w}, node(x).batched});
}

inline NodeId Graph::add(NodeId a, NodeId b) {
    check_id(a);
    check_id(b);
    if (ps(a) != ps(b)) throw ShapeError("add: shape mismatch " + shape_str(ps(a)) + " vs " + shape_str(ps(b)));
    bool batched = node(a).batched || node(b).batched;
    return push({OpKind::add, {}, {a, b}, {}, ps(a), batched});
}

inline NodeId Graph::scale(NodeId x, double factor) {
    check_id(x);
    OpAttrs a;
    a.factor = factor;
    return push({OpKind::scale, {}, {x}, a, ps(x), node(x).batched});
}

inline NodeId Graph::reduce_sum(NodeId x) {
    check_id(x);
    if (!node(x).batched) throw ShapeError("reduce_sum: input must be batched");
    return push({OpKind::reduce_sum, {}, {x}, {}, {}, true});
}

inline NodeId Graph::reduce_mean(NodeId x) {
    check_id(x);
    if (!node(x).batched) throw ShapeError("reduce_mean: input must be batched");
    return push({OpKind::reduce_mean, {}, {x}, {}, {}, true});
}

inline NodeId Graph::batchnorm(NodeId x, NodeId gamma, NodeId beta, bool train_mode) {
    check_id(x);
    check_id(gamma);
    check_id(beta);
    const Shape& xs = ps(x);
    if (xs.empty()) throw ShapeError("batchnorm: input needs a channel dim");
    Shape want{xs[0]};
    if (ps(gamma) != want || ps(beta) != want) throw ShapeError("batchnorm: gamma/beta must be [channels]");
    if (!node(x).batched) throw ShapeError("batchnorm: input must be batched");
    OpAttrs a;
    a.train_mode = train_mode;
    return push({OpKind::batchnorm, {}, {x, gamma, beta}, a, xs, true});
}

inline void Graph::mark_output(const std::string& name, NodeId id) {
    check_id(id);
    for (auto& [n, _] : outputs_)
        if (n == name) throw Error("graph: duplicate output name '" + name + "'");
    outputs_.emplace_back(name, id);
}

inline NodeId Graph::output_id(const std::string& name) const {
    for (auto& [n, id] : outputs_)
        if (n == name) return id;
    throw Error("graph: no output named '" + name + "'");
}

inline NodeId Graph::named_id(const std::string& name) const {
    auto it = named_.find(name);
    if (it == named_.end()) throw Error("graph: no input/param named '" + name + "'");
    return it->second;
}

inline std::vector<std::string> Graph::param_names() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
        if (n.kind == OpKind::param) out.push_back(n.name);
    return out;
}

inline std::vector<std::string> Graph::input_names() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
        if (n.kind == OpKind::input) out.push_back(n.name);
    return out;
}

}  // namespace coopgen
