#pragma once

#include <string>

#include "cosync/nn/autograd.hpp"
#include "cosync/nn/rng.hpp"

namespace cosync::nn {

enum class Init { Default, Zero };

// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Matrix init_uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in);

struct Linear {
    Parameter* weight = nullptr;  // [out x in]
    Parameter* bias = nullptr;    // [out x 1], optional

    static Linear create(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
                         Rng& rng, Init init = Init::Default, bool with_bias = true);

    Var operator()(Var x) const;
    Eigen::Index in_features() const { return weight->value.cols(); }
    Eigen::Index out_features() const { return weight->value.rows(); }
};

struct Conv1d {
    Parameter* weight = nullptr;  // [out x (in/groups * kernel)]
    Parameter* bias = nullptr;
    int stride = 1;
    int padding = 0;
    int groups = 1;

    static Conv1d create(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
                         int kernel, int stride, int padding, int groups, Rng& rng, Init init = Init::Default);

    Var operator()(Var x) const;
};

/// Multi-head scaled dot-product attention without masking.
/// Queries come from `x` [d_model x Lq]; keys/values from `memory`
/// [d_mem x Lk]. Self-attention passes the same var for both.
struct MultiHeadAttention {
    Linear q, k, v, o;
    int heads = 1;

    static MultiHeadAttention create(ParameterStore& store, const std::string& name, Eigen::Index d_model,
                                     Eigen::Index d_memory, int heads, Rng& rng);

    Var operator()(Var x, Var memory) const;

    // Attention probabilities [Lk x Lq] of one head, for inspection.
    Matrix weights(Var x, Var memory, int head) const;
};

}  // namespace cosync::nn
