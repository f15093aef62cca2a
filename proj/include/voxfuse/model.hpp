// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "voxfuse/parameters.hpp"

#include <json.hpp>

#include <cstdint>
#include <vector>

namespace voxfuse {

/// Network widths and depths. Parameter prefixes: "encoder.<i>" (2D
/// encoder), "G" (direction MLP), "J" (local sparse conv stack), "Mz", "Mr",
/// "Mt" (fusion gates), "R.trunk", "R.density", "R.color" (radiance decoder).
struct ModelConfig {
    int channels = 16;
    std::vector<int> encoder_channels{16, 32, 64};
    std::vector<int> encoder_strides{2, 2, 1};
    int encoder_kernel = 3;
    int direction_layers = 5;
    int direction_width = 16;
    int local_layers = 5;
    int local_width = 16;
    int gate_layers = 3;
    int gate_width = 16;
    int pe_frequencies = 5;
    int decoder_width = 32;
    int decoder_trunk_layers = 2;
    int decoder_color_layers = 2;
    /// sigma = density_scale * softplus(.)
    double density_scale = 1.0;

    int feature_channels() const { return encoder_channels.back(); }
    int downsample_factor() const;
    int view_feature_width() const { return feature_channels() + direction_width; }
    int aggregate_width() const { return 2 * view_feature_width(); }
    int encoded_width() const { return channels * (2 * pe_frequencies + 1); }

    void validate() const;
    bool operator==(const ModelConfig &) const = default;
};

void to_json(nlohmann::json &j, const ModelConfig &c);
void from_json(const nlohmann::json &j, ModelConfig &c);

/// Fresh parameters: fan-in uniform weights, zero biases.
ParameterStore init_model(const ModelConfig &cfg, std::uint64_t seed);

/// Prefixes of everything except the radiance decoder.
std::vector<std::string> reconstruction_prefixes();

} // namespace voxfuse
