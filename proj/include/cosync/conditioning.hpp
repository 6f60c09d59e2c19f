#pragma once

#include <optional>
#include <span>
#include <string>

#include "cosync/data_io.hpp"
#include "cosync/nn/autograd.hpp"
#include "cosync/nn/layers.hpp"
#include "cosync/nn/rng.hpp"

namespace cosync::conditioning {

using nn::Matrix;
using nn::Var;
using nn::Vector;

/// Half-open target span [start, end) of frames to be generated. An empty
/// span (start == end) disables masking.
struct MaskSpec {
    Eigen::Index start = 0;
    Eigen::Index end = 0;

    static MaskSpec none() { return {}; }
    bool empty() const { return start == end; }
    Eigen::Index length() const { return end - start; }
    bool contains(Eigen::Index frame) const { return frame >= start && frame < end; }
    void check(Eigen::Index frames) const;  // throws std::out_of_range

    Vector region(Eigen::Index frames) const;  // 1 inside the span, 0 outside
    Vector keep(Eigen::Index frames) const;    // complement of region()

    bool operator==(const MaskSpec&) const = default;
};

inline constexpr double kMinSpanFraction = 0.70;
inline constexpr double kMaxSpanFraction = 1.00;

/// Span fraction ~ U[0.70, 1.00], span = ceil(fraction * L), start uniform
/// over the valid positions. `forced_fraction` pins the fraction.
MaskSpec sample_mask(Eigen::Index frames, nn::Rng& rng, std::optional<double> forced_fraction = std::nullopt);

// Inference target: everything after the reference prefix.
MaskSpec target_mask(const data::UtteranceRecord& record);

Matrix apply_mask(const Matrix& m_raw, const MaskSpec& mask);
Var apply_mask(Var m_raw, const MaskSpec& mask);

struct ConditioningConfig {
    int mel_bins = 100;
    int vocab_size = 8;
    int visual_dim = 64;
    int model_dim = 1024;
    int text_dim = 512;
    int text_blocks = 4;
    int text_kernel = 7;
    int text_ff_mult = 2;
    int pad_channels = 256;
    int ca_channels = 256;
    int position_dim = 64;
    int lip_kernel = 3;

    void validate() const;
};

/// Conditioning streams for one utterance, all sharing the frame count L.
struct ConditioningBundle {
    Var h_m;       // [F x L] masked acoustic features
    Var text_pad;  // [C_p x L]
    Var text_ca;   // [C_c x L]
    Var x_lip;     // [d x L]
    Var h_text;    // [C_t x T'] cross-attention memory
    MaskSpec mask;

    Eigen::Index frames() const { return h_m.cols(); }
    void check_lengths() const;
};

/// Text-side and visual-side encoders producing a ConditioningBundle.
class ConditioningNet {
public:
    static ConditioningNet create(nn::ParameterStore& store, const std::string& prefix, const ConditioningConfig& cfg,
                                  nn::Rng& rng);

    const ConditioningConfig& config() const { return cfg_; }

    // Token embedding followed by convolutional residual blocks: [C_t x T].
    Var encode_text(nn::Tape& tape, std::span<const int> ids) const;

    Var project_pad(Var h_text) const { return pad_proj_(h_text); }
    Var expand_pad(Var text_emb, Eigen::Index frames) const;

    // Frame queries from sinusoidal positions attend over text keys.
    // `attention` (optional) receives the [T x L] weights.
    Var expand_cross_attention(Var h_text, Eigen::Index frames, Matrix* attention = nullptr) const;

    // Nearest-neighbour repeat to L, residual conv smoothing, projection to d.
    Var upsample_lip(Var lip_raw, Eigen::Index frames) const;

    ConditioningBundle build(nn::Tape& tape, const data::UtteranceRecord& record, const MaskSpec& mask) const;

    // Exposed for tests that stub the learned pieces.
    nn::Parameter& pad_vector() const { return *pad_vector_; }
    const nn::Linear& lip_projection() const { return lip_proj_; }
    const nn::Linear& ca_query() const { return ca_query_; }

private:
    struct TextBlock {
        nn::Conv1d depthwise;
        nn::Parameter* norm_scale = nullptr;
        nn::Parameter* norm_shift = nullptr;
        nn::Linear up, down;
    };

    ConditioningConfig cfg_;
    nn::Parameter* embedding_ = nullptr;  // [C_t x V]
    std::vector<TextBlock> blocks_;
    nn::Linear pad_proj_;
    nn::Parameter* pad_vector_ = nullptr;  // [C_p x 1]
    nn::Linear ca_query_, ca_key_, ca_key_pos_, ca_value_;
    nn::Conv1d lip_conv1_, lip_conv2_;
    nn::Linear lip_proj_;
};

// Free-standing expansion used by ConditioningNet::expand_pad.
Var expand_text_pad(Var text_emb, Var pad_column, Eigen::Index frames);

// Places lip features on the target span only; the reference prefix (and
// anything after the span) receives zero vectors.
Var place_lip(Var x_lip, const MaskSpec& mask);

/// Channel-wise concatenation [x_t; h_m; text_pad; text_ca].
Var assemble_prior(Var h_m, Var text_pad, Var text_ca, Var x_t);

// Nearest-neighbour source frame for each of `frames` output frames.
std::vector<int> nearest_source_index(Eigen::Index source_frames, Eigen::Index frames);

}  // namespace cosync::conditioning
