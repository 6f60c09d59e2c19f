#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cosync/conditioning.hpp"
#include "cosync/nn/autograd.hpp"
#include "cosync/nn/layers.hpp"

namespace cosync::backbone {

using nn::Matrix;
using nn::Var;

struct BackboneConfig {
    int n_layers = 22;
    int d = 1024;
    int n_heads = 16;
    int p1_end = 8;   // layers [0, p1_end): style only
    int p2_end = 15;  // layers [p1_end, p2_end): + lip; [p2_end, n): + cross-attention
    int in_channels = 712;
    int out_channels = 100;
    int conv_pos_kernel = 31;
    int conv_pos_groups = 16;
    int ff_mult = 2;
    int time_freq_dim = 256;
    int text_dim = 512;  // width of the cross-attention memory

    void validate() const;
};

/// Scale, shift and residual gate for one sub-block, produced from t only.
struct TimeModulation {
    Var gamma;
    Var beta;
    Var alpha;
};

struct LayerTaps {
    Var z_style;
    std::optional<Var> z_lip;
    std::optional<Var> z_out;
    std::optional<Var> z_ca;
};

struct HiddenStates {
    Var z0;                      // after projection + position encoding
    std::vector<LayerTaps> layers;
    Var z_final;                 // last layer output
    std::optional<Var> z_ca;     // cross-attention output of the last layer (if any)
};

struct ForwardResult {
    Var v;  // [out_channels x L]
    HiddenStates taps;
};

// Sinusoidal embedding of t * 1000, [dim x 1].
Matrix timestep_sinusoid(double t, int dim);

/// Gated self-attention + gated MLP, both time-adaptively normalised.
struct StyleBlock {
    nn::Linear modulation;  // silu(temb) -> 6d, zero-initialised
    nn::MultiHeadAttention attention;
    nn::Linear ff_up, ff_down;

    static StyleBlock create(nn::ParameterStore& store, const std::string& name, const BackboneConfig& cfg,
                             nn::Rng& rng);

    // [0]: attention sub-block, [1]: MLP sub-block.
    std::array<TimeModulation, 2> modulate(Var time_features) const;
    Var operator()(Var z, Var time_features) const;
};

struct LipGate {
    nn::Parameter* lambda = nullptr;  // [d x 1], zero-initialised

    static LipGate create(nn::ParameterStore& store, const std::string& name, int d);
};

Var lip_inject(Var z_style, Var x_lip, Var gate);

struct ContextAlignBlock {
    nn::Linear modulation;  // silu(temb) -> 3d, zero-initialised
    nn::MultiHeadAttention cross_attention;

    static ContextAlignBlock create(nn::ParameterStore& store, const std::string& name, const BackboneConfig& cfg,
                                    nn::Rng& rng);

    TimeModulation modulate(Var time_features) const;
    // Returns (z_out, z_ca).
    std::pair<Var, Var> operator()(Var z_lip, Var h_text, Var time_features) const;
};

class Backbone {
public:
    static Backbone create(nn::ParameterStore& store, const std::string& prefix, const BackboneConfig& cfg,
                           nn::Rng& rng);

    const BackboneConfig& config() const { return cfg_; }

    // Time MLP output passed through SiLU, shared by all modulations.
    Var time_features(nn::Tape& tape, double t) const;
    Var embed_time(nn::Tape& tape, double t) const;

    ForwardResult forward(Var x_t, const conditioning::ConditioningBundle& bundle, double t) const;

    /// Several inputs in one pass: frames are packed side by side so each
    /// weight matrix is read once. Attention and the position convolution
    /// still see one input at a time. Returns the field of each input.
    std::vector<Var> forward_batch(std::span<const Var> x_t, std::span<const conditioning::ConditioningBundle> bundles,
                                   std::span<const double> t) const;

    int layer_count() const { return static_cast<int>(layers_.size()); }
    const StyleBlock& style(int layer) const { return layers_[static_cast<std::size_t>(layer)].style; }
    const std::optional<LipGate>& lip_gate(int layer) const { return layers_[static_cast<std::size_t>(layer)].lip; }
    const std::optional<ContextAlignBlock>& context(int layer) const {
        return layers_[static_cast<std::size_t>(layer)].context;
    }
    const nn::Linear& output_projection() const { return out_proj_; }

private:
    struct Layer {
        StyleBlock style;
        std::optional<LipGate> lip;
        std::optional<ContextAlignBlock> context;
    };

    BackboneConfig cfg_;
    nn::Linear in_proj_;
    nn::Conv1d pos_conv1_, pos_conv2_;
    nn::Linear time_in_, time_out_;
    std::vector<Layer> layers_;
    nn::Linear final_modulation_;  // silu(temb) -> 2d (scale, shift)
    nn::Linear out_proj_;
};

}  // namespace cosync::backbone
