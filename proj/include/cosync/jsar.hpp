#pragma once

#include <span>
#include <string>

#include "cosync/nn/autograd.hpp"
#include "cosync/nn/layers.hpp"
#include "cosync/nn/rng.hpp"

namespace cosync::jsar {

using nn::Matrix;
using nn::Var;

struct ContrastiveConfig {
    double tau = 0.07;
    int proj_dim = 32;

    void validate() const;
};

struct CtcHeadConfig {
    int vocab_size = 2547;  // includes the blank symbol
    int blank_id = 0;
    int hidden = 0;         // 0: use the model width

    void validate() const;
};

/// Frame-level InfoNCE with in-sequence negatives. `z` and `f` are
/// [P x N] in a shared space; both are L2-normalised per frame here.
Var info_nce(Var z, Var f, double tau);
double info_nce(const Matrix& z, const Matrix& f, double tau);

/// Separate linear maps from the cross-attention width and the alignment
/// feature width into the shared contrastive space.
struct ContrastiveHead {
    nn::Linear z_proj;
    nn::Linear f_proj;
    double tau = 0.07;

    static ContrastiveHead create(nn::ParameterStore& store, const std::string& name, int d, int align_dim,
                                  const ContrastiveConfig& cfg, nn::Rng& rng);

    Var operator()(Var z_ca, Var f_av) const;
};

// Two stride-2 stages (kernel 3, padding 1) each halve the length, rounding up.
Eigen::Index ctc_output_length(Eigen::Index frames);

/// Two stride-2 convolution stages with Mish, then a linear map to the
/// vocabulary: [d x L] -> [V x ceil(L/4)].
struct CtcHead {
    nn::Conv1d down1, down2;
    nn::Linear out;

    static CtcHead create(nn::ParameterStore& store, const std::string& name, int d, const CtcHeadConfig& cfg,
                          nn::Rng& rng);

    Var operator()(Var z_out) const;
};

// Frames needed to emit `targets`: one per label plus one blank between repeats.
Eigen::Index ctc_min_frames(std::span<const int> targets);

/// CTC negative log-likelihood of `targets` under per-frame logits [V x F],
/// log-space forward-backward; gradient flows to `logits`.
Var ctc_loss(Var logits, std::span<const int> targets, int blank_id = 0);
double ctc_loss(const Matrix& logits, std::span<const int> targets, int blank_id = 0);

inline double jsar_total(double l_fm, double l_cl, double l_ctc, double w_cl, double w_ctc) {
    return l_fm + w_cl * l_cl + w_ctc * l_ctc;
}

}  // namespace cosync::jsar
