#pragma once

#include <cstdint>
#include <memory>
#include <optional>

#include "cosync/backbone.hpp"
#include "cosync/conditioning.hpp"
#include "cosync/config.hpp"
#include "cosync/data_io.hpp"
#include "cosync/flow.hpp"
#include "cosync/jsar.hpp"

namespace cosync {

using nn::Matrix;
using nn::Var;

/// Architecture of the full generator. Defaults describe the full-size
/// model; toy runs override them from a key=value file.
struct ModelConfig {
    int mel_bins = 100;
    int vocab_size = 8;     // script tokens, without the CTC blank
    int visual_dim = 64;
    int align_dim = 32;
    int d = 1024;
    int n_layers = 22;
    int n_heads = 16;
    int p1_end = 8;
    int p2_end = 15;
    int text_dim = 512;
    int text_blocks = 4;
    int text_kernel = 7;
    int pad_channels = 256;
    int ca_channels = 256;
    int position_dim = 64;
    int conv_pos_kernel = 31;
    int conv_pos_groups = 16;
    int ff_mult = 2;
    int time_freq_dim = 256;
    int proj_dim = 32;
    double tau = 0.07;
    int ctc_hidden = 0;
    std::uint64_t init_seed = 0;

    conditioning::ConditioningConfig conditioning() const;
    backbone::BackboneConfig backbone() const;
    int in_channels() const { return 2 * mel_bins + pad_channels + ca_channels; }

    void validate() const;
    // Reads the keys it knows from `reader`, leaving the rest untouched.
    static ModelConfig read(KeyValueReader& reader);
    KeyValues to_key_values() const;
    bool operator==(const ModelConfig&) const = default;
};

// Conditioning stream values detached from any tape, reused across solver steps.
struct BundleValues {
    Matrix h_m, text_pad, text_ca, x_lip, h_text;
    conditioning::MaskSpec mask;

    static BundleValues from(const conditioning::ConditioningBundle& b);
    conditioning::ConditioningBundle on(nn::Tape& tape) const;
};

struct SampleLoss {
    Var l_fm;
    std::optional<Var> l_cl;
    std::optional<Var> l_ctc;
};

class CoSyncModel {
public:
    static std::unique_ptr<CoSyncModel> create(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    nn::ParameterStore& parameters() { return store_; }
    const nn::ParameterStore& parameters() const { return store_; }
    const conditioning::ConditioningNet& conditioning() const { return cond_; }
    const backbone::Backbone& backbone() const { return backbone_; }
    const jsar::ContrastiveHead& contrastive() const { return contrastive_; }
    const jsar::CtcHead& ctc() const { return ctc_; }

    /// Flow-matching loss for one sample, over `mask` (or the whole sequence
    /// when `region_loss` is false); the regularizers are added on the
    /// full-condition branch only.
    SampleLoss sample_loss(nn::Tape& tape, const data::UtteranceRecord& record, const conditioning::MaskSpec& mask,
                           flow::ConditionBranch branch, const flow::FlowBatch& batch,
                           bool region_loss = true) const;

    BundleValues condition(const data::UtteranceRecord& record, const conditioning::MaskSpec& mask) const;
    Matrix field(const BundleValues& bundle, const Matrix& x, double t, flow::ConditionBranch branch) const;
    flow::VectorField vector_field(const BundleValues& bundle) const;

    /// Samples the target span of `record` from x0 and returns the full
    /// sequence with the reference frames kept outside the span.
    flow::SampleResult infill(const data::UtteranceRecord& record, const conditioning::MaskSpec& mask, int nfe,
                              const flow::GuidanceSpec& guidance, const Matrix& x0) const;

private:
    ModelConfig cfg_;
    nn::ParameterStore store_;
    conditioning::ConditioningNet cond_;
    backbone::Backbone backbone_;
    jsar::ContrastiveHead contrastive_;
    jsar::CtcHead ctc_;
};

// CTC labels reserve 0 for the blank, so token k maps to k + 1.
std::vector<int> ctc_labels(const std::vector<int>& text_ids);

/// Why `record` cannot be used with a model of `cfg`, or "" if it can.
/// Training additionally needs the script to fit the CTC head output.
std::string record_mismatch(const ModelConfig& cfg, const data::UtteranceRecord& record, bool for_training);

}  // namespace cosync
