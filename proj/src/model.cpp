// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#include "voxfuse/model.hpp"

#include "voxfuse/layers.hpp"

#include <stdexcept>
#include <string>

namespace voxfuse {

int ModelConfig::downsample_factor() const {
    int f = 1;
    for (int s : encoder_strides) {
        f *= s;
    }
    return f;
}

void ModelConfig::validate() const {
    if (channels < 1 || direction_width < 1 || local_width < 1 || gate_width < 1 || decoder_width < 1) {
        throw std::invalid_argument("model: widths must be positive");
    }
    if (encoder_channels.empty() || encoder_channels.size() != encoder_strides.size()) {
        throw std::invalid_argument("model: encoder channels and strides must be non-empty and equally long");
    }
    const int f = downsample_factor();
    if (f < 1 || (f & (f - 1)) != 0) {
        throw std::invalid_argument("model: encoder downsample factor must be a power of two");
    }
    if (direction_layers < 1 || local_layers < 1 || gate_layers < 1 || decoder_trunk_layers < 1 ||
        decoder_color_layers < 1) {
        throw std::invalid_argument("model: every network needs at least one layer");
    }
    if (pe_frequencies < 1) {
        throw std::invalid_argument("model: positional encoding needs at least one frequency");
    }
    if (!(density_scale > 0.0)) {
        throw std::invalid_argument("model: density_scale must be positive");
    }
}

void to_json(nlohmann::json &j, const ModelConfig &c) {
    j = nlohmann::json{{"channels", c.channels},
                       {"encoder_channels", c.encoder_channels},
                       {"encoder_strides", c.encoder_strides},
                       {"encoder_kernel", c.encoder_kernel},
                       {"direction_layers", c.direction_layers},
                       {"direction_width", c.direction_width},
                       {"local_layers", c.local_layers},
                       {"local_width", c.local_width},
                       {"gate_layers", c.gate_layers},
                       {"gate_width", c.gate_width},
                       {"pe_frequencies", c.pe_frequencies},
                       {"decoder_width", c.decoder_width},
                       {"decoder_trunk_layers", c.decoder_trunk_layers},
                       {"decoder_color_layers", c.decoder_color_layers},
                       {"density_scale", c.density_scale}};
}

void from_json(const nlohmann::json &j, ModelConfig &c) {
    ModelConfig d;
    c.channels = j.value("channels", d.channels);
    c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
    c.encoder_strides = j.value("encoder_strides", d.encoder_strides);
    c.encoder_kernel = j.value("encoder_kernel", d.encoder_kernel);
    c.direction_layers = j.value("direction_layers", d.direction_layers);
    c.direction_width = j.value("direction_width", d.direction_width);
    c.local_layers = j.value("local_layers", d.local_layers);
    c.local_width = j.value("local_width", d.local_width);
    c.gate_layers = j.value("gate_layers", d.gate_layers);
    c.gate_width = j.value("gate_width", d.gate_width);
    c.pe_frequencies = j.value("pe_frequencies", d.pe_frequencies);
    c.decoder_width = j.value("decoder_width", d.decoder_width);
    c.decoder_trunk_layers = j.value("decoder_trunk_layers", d.decoder_trunk_layers);
    c.decoder_color_layers = j.value("decoder_color_layers", d.decoder_color_layers);
    c.density_scale = j.value("density_scale", d.density_scale);
}

namespace {

std::vector<int> widths(int in, int hidden, int out, int layers) {
    std::vector<int> w{in};
    for (int i = 0; i + 1 < layers; ++i) {
        w.push_back(hidden);
    }
    w.push_back(out);
    return w;
}

void add_sparse_stack(ParameterStore &store, const std::string &prefix, int in, int hidden, int out, int layers,
                      Rng &rng) {
    const std::vector<int> w = widths(in, hidden, out, layers);
    for (int i = 0; i < layers; ++i) {
        add_sparse_conv_params(store, prefix + "." + std::to_string(i), w[static_cast<std::size_t>(i)],
                               w[static_cast<std::size_t>(i) + 1], rng);
    }
}

} // namespace

ParameterStore init_model(const ModelConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    ParameterStore store;
    store.seed = seed;
    Rng rng(seed);

    int in = 3;
    for (std::size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
        add_conv2d_params(store, "encoder." + std::to_string(i), cfg.encoder_kernel, in, cfg.encoder_channels[i], rng);
        in = cfg.encoder_channels[i];
    }
    add_mlp_params(store, "G", widths(3, cfg.direction_width, cfg.direction_width, cfg.direction_layers), rng);
    add_sparse_stack(store, "J", cfg.aggregate_width(), cfg.local_width, cfg.channels, cfg.local_layers, rng);
    for (const char *gate : {"Mz", "Mr", "Mt"}) {
        add_sparse_stack(store, gate, 2 * cfg.channels, cfg.gate_width, cfg.channels, cfg.gate_layers, rng);
    }
    add_mlp_params(store, "R.trunk",
                   widths(cfg.encoded_width(), cfg.decoder_width, cfg.decoder_width, cfg.decoder_trunk_layers), rng);
    add_mlp_params(store, "R.density", {cfg.decoder_width, 1}, rng);
    add_mlp_params(store, "R.color", widths(cfg.decoder_width + 3, cfg.decoder_width, 3, cfg.decoder_color_layers),
                   rng);
    return store;
}

std::vector<std::string> reconstruction_prefixes() { return {"encoder.", "G.", "J.", "Mz.", "Mr.", "Mt."}; }

} // namespace voxfuse
