#include "cosync/nn/layers.hpp"

#include <cmath>
#include <vector>

namespace cosync::nn {

Matrix init_uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(fan_in, 1)));
    return rng.uniform_matrix(rows, cols, -bound, bound);
}

Linear Linear::create(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng,
                      Init init, bool with_bias) {
    Linear l;
    l.weight = &store.add(name + ".weight",
                          init == Init::Zero ? Matrix::Zero(out, in) : init_uniform(rng, out, in, in));
    if (with_bias) l.bias = &store.add(name + ".bias", Matrix::Zero(out, 1));
    return l;
}

Var Linear::operator()(Var x) const {
    Tape& t = x.tape();
    Var y = matmul(t.param(*weight), x);
    if (bias != nullptr) y = add_col(y, t.param(*bias));
    return y;
}

Conv1d Conv1d::create(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out, int kernel,
                      int stride, int padding, int groups, Rng& rng, Init init) {
    Conv1d c;
    const Eigen::Index fan_in = in / groups * kernel;
    c.weight = &store.add(name + ".weight",
                          init == Init::Zero ? Matrix::Zero(out, fan_in) : init_uniform(rng, out, fan_in, fan_in));
    c.bias = &store.add(name + ".bias", Matrix::Zero(out, 1));
    c.stride = stride;
    c.padding = padding;
    c.groups = groups;
    return c;
}

Var Conv1d::operator()(Var x) const {
    Tape& t = x.tape();
    return conv1d(x, t.param(*weight), t.param(*bias), stride, padding, groups);
}

MultiHeadAttention MultiHeadAttention::create(ParameterStore& store, const std::string& name, Eigen::Index d_model,
                                              Eigen::Index d_memory, int heads, Rng& rng) {
    if (heads <= 0 || d_model % heads != 0) {
        throw std::invalid_argument(name + ": model width must be divisible by head count");
    }
    MultiHeadAttention a;
    a.q = Linear::create(store, name + ".q", d_model, d_model, rng);
    a.k = Linear::create(store, name + ".k", d_memory, d_model, rng);
    a.v = Linear::create(store, name + ".v", d_memory, d_model, rng);
    a.o = Linear::create(store, name + ".o", d_model, d_model, rng);
    a.heads = heads;
    return a;
}

Var MultiHeadAttention::operator()(Var x, Var memory) const {
    if (memory.cols() == 0) throw std::invalid_argument("attention: empty key/value memory");
    Var q_all = q(x);
    Var k_all = k(memory);
    Var v_all = v(memory);
    const Eigen::Index head_dim = q_all.rows() / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var qh = slice_rows(q_all, h * head_dim, head_dim);
        Var kh = slice_rows(k_all, h * head_dim, head_dim);
        Var vh = slice_rows(v_all, h * head_dim, head_dim);
        Var scores = scale(matmul(transpose(kh), qh), inv_sqrt);  // [Lk x Lq]
        Var probs = softmax_cols(scores);
        outs.push_back(matmul(vh, probs));  // [head_dim x Lq]
    }
    Var merged = heads == 1 ? outs.front() : concat_rows(outs);
    return o(merged);
}

Matrix MultiHeadAttention::weights(Var x, Var memory, int head) const {
    Tape scratch(false);
    Var xs = scratch.constant(x.value());
    Var ms = scratch.constant(memory.value());
    Var q_all = q(xs);
    Var k_all = k(ms);
    const Eigen::Index head_dim = q_all.rows() / heads;
    Var qh = slice_rows(q_all, head * head_dim, head_dim);
    Var kh = slice_rows(k_all, head * head_dim, head_dim);
    return softmax_cols(scale(matmul(transpose(kh), qh), 1.0 / std::sqrt(static_cast<double>(head_dim)))).value();
}

}  // namespace cosync::nn
