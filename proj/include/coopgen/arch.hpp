#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "coopgen/errors.hpp"
#include "coopgen/tensor.hpp"

namespace coopgen {

// One layer of a model stack. Dense layers carry `units`; conv/deconv carry
// kernel/stride/channels. pad < 0 selects the default padding rule and
// out_size < 0 the default (stride-multiple) deconv output extent.
struct LayerSpec {
    std::string kind = "dense";  // dense | conv | deconv
    int units = 0;
    int channels = 0;
    int kernel = 0;
    int stride = 1;
    int pad = -1;
    std::int64_t out_size = -1;
    bool batchnorm = false;
    std::string activation = "none";  // none | relu | leaky_relu | tanh
    double leaky_slope = 0.2;
    double dropout = 0.0;
};

// Architecture of one model (initializer or solver). The variant selects how
// the condition is fused:
//   cat2img_early        one-hot condition joined at the input
//   cat2img_late         condition replicated and joined at an intermediate
//                        feature map of extent `concat_spatial`
//   img2img_naive        condition image encoded to a vector, joined with X
//   img2img_unet         encoder-decoder with skip connections and dropout
//   solver_channel_concat  target and condition images stacked channel-wise
struct ArchDescriptor {
    std::string variant;
    Shape target_shape;  // [dim] or [c,h,w]
    Shape cond_shape;    // [K] one-hot or [c,h,w]
    bool cond_onehot = true;

    int latent_dim = 0;      // generator variants with an explicit X
    int concat_spatial = 0;  // cat2img_late
    std::vector<LayerSpec> pre;   // encoder/decoder stage before the join
    std::vector<LayerSpec> post;  // stack after the join
    std::string head = "tanh";    // generator output nonlinearity: tanh | none

    // img2img_unet
    std::vector<int> unet_channels;  // encoder widths, outermost first
    int unet_kernel = 4;
    double unet_dropout = 0.5;
    double unet_leaky_slope = 0.2;
    bool unet_batchnorm = false;

    // energy models: width of the final dense layer feeding the scalar sum
    int energy_units = 0;
};

namespace archjson {

using nlohmann::json;

inline void reject_unknown(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

inline json layer_to_json(const LayerSpec& l) {
    json j;
    j["kind"] = l.kind;
    if (l.kind == "dense") {
        j["units"] = l.units;
    } else {
        j["channels"] = l.channels;
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        if (l.pad >= 0) j["pad"] = l.pad;
        if (l.out_size >= 0) j["out_size"] = l.out_size;
    }
    if (l.batchnorm) j["batchnorm"] = true;
    if (l.activation != "none") j["activation"] = l.activation;
    if (l.activation == "leaky_relu") j["leaky_slope"] = l.leaky_slope;
    if (l.dropout > 0) j["dropout"] = l.dropout;
    return j;
}

inline LayerSpec layer_from_json(const json& j, const std::string& where) {
    reject_unknown(j, {"kind", "units", "channels", "kernel", "stride", "pad", "out_size", "batchnorm", "activation",
                       "leaky_slope", "dropout"},
                   where);
    LayerSpec l;
    l.kind = j.value("kind", "dense");
    if (l.kind != "dense" && l.kind != "conv" && l.kind != "deconv")
        throw ConfigError(where + ": bad layer kind '" + l.kind + "'");
    l.units = j.value("units", 0);
    l.channels = j.value("channels", 0);
    l.kernel = j.value("kernel", 0);
    l.stride = j.value("stride", 1);
    l.pad = j.value("pad", -1);
    l.out_size = j.value("out_size", std::int64_t(-1));
    l.batchnorm = j.value("batchnorm", false);
    l.activation = j.value("activation", "none");
    if (l.activation != "none" && l.activation != "relu" && l.activation != "leaky_relu" && l.activation != "tanh")
        throw ConfigError(where + ": bad activation '" + l.activation + "'");
    l.leaky_slope = j.value("leaky_slope", 0.2);
    l.dropout = j.value("dropout", 0.0);
    if (l.kind == "dense" && l.units <= 0) throw ConfigError(where + ": dense layer needs positive units");
    if (l.kind != "dense" && (l.channels <= 0 || l.kernel <= 0 || l.stride <= 0))
        throw ConfigError(where + ": conv/deconv layer needs positive channels/kernel/stride");
    if (l.dropout < 0 || l.dropout >= 1) throw ConfigError(where + ": dropout must be in [0,1)");
    return l;
}

inline json arch_to_json(const ArchDescriptor& a) {
    json j;
    j["variant"] = a.variant;
    j["target_shape"] = a.target_shape;
    j["cond_shape"] = a.cond_shape;
    j["cond_onehot"] = a.cond_onehot;
    if (a.latent_dim > 0) j["latent_dim"] = a.latent_dim;
    if (a.concat_spatial > 0) j["concat_spatial"] = a.concat_spatial;
    if (!a.pre.empty()) {
        json arr = json::array();
        for (const auto& l : a.pre) arr.push_back(layer_to_json(l));
        j["pre"] = arr;
    }
    if (!a.post.empty()) {
        json arr = json::array();
        for (const auto& l : a.post) arr.push_back(layer_to_json(l));
        j["post"] = arr;
    }
    j["head"] = a.head;
    if (!a.unet_channels.empty()) {
        j["unet_channels"] = a.unet_channels;
        j["unet_kernel"] = a.unet_kernel;
        j["unet_dropout"] = a.unet_dropout;
        j["unet_leaky_slope"] = a.unet_leaky_slope;
        j["unet_batchnorm"] = a.unet_batchnorm;
    }
    if (a.energy_units > 0) j["energy_units"] = a.energy_units;
    return j;
}

inline ArchDescriptor arch_from_json(const json& j, const std::string& where) {
    reject_unknown(j,
                   {"variant", "target_shape", "cond_shape", "cond_onehot", "latent_dim", "concat_spatial", "pre",
                    "post", "head", "unet_channels", "unet_kernel", "unet_dropout", "unet_leaky_slope",
                    "unet_batchnorm", "energy_units"},
                   where);
    ArchDescriptor a;
    if (!j.contains("variant")) throw ConfigError(where + ": missing 'variant'");
    a.variant = j.at("variant").get<std::string>();
    a.target_shape = j.at("target_shape").get<Shape>();
    a.cond_shape = j.at("cond_shape").get<Shape>();
    a.cond_onehot = j.value("cond_onehot", true);
    a.latent_dim = j.value("latent_dim", 0);
    a.concat_spatial = j.value("concat_spatial", 0);
    if (j.contains("pre"))
        for (const auto& lj : j.at("pre")) a.pre.push_back(layer_from_json(lj, where + ".pre"));
    if (j.contains("post"))
        for (const auto& lj : j.at("post")) a.post.push_back(layer_from_json(lj, where + ".post"));
    a.head = j.value("head", "tanh");
    if (a.head != "tanh" && a.head != "none") throw ConfigError(where + ": head must be 'tanh' or 'none'");
    if (j.contains("unet_channels")) a.unet_channels = j.at("unet_channels").get<std::vector<int>>();
    a.unet_kernel = j.value("unet_kernel", 4);
    a.unet_dropout = j.value("unet_dropout", 0.5);
    a.unet_leaky_slope = j.value("unet_leaky_slope", 0.2);
    a.unet_batchnorm = j.value("unet_batchnorm", false);
    a.energy_units = j.value("energy_units", 0);
    return a;
}

}  // namespace archjson

inline std::string arch_to_string(const ArchDescriptor& a) { return archjson::arch_to_json(a).dump(); }

inline ArchDescriptor arch_from_string(const std::string& s) {
    return archjson::arch_from_json(nlohmann::json::parse(s), "arch");
}

}  // namespace coopgen
