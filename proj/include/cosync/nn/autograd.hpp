#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace cosync::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// A named trainable tensor. Gradients are allocated on first use so that
/// inference-only models do not pay for them.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    void zero_grad() {
        if (grad.size() != 0) grad.setZero();
    }
    Eigen::Index size() const { return value.size(); }
};

/// Owns parameters in registration order. Addresses stay stable for the
/// lifetime of the store.
class ParameterStore {
public:
    ParameterStore() = default;
    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    Parameter& add(const std::string& name, Matrix init);
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return params_.size(); }
    Parameter& operator[](std::size_t i) { return *params_[i]; }
    const Parameter& operator[](std::size_t i) const { return *params_[i]; }

    Eigen::Index scalar_count() const;
    void zero_grad();

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

    Tape& tape() const { return *tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Reverse-mode tape. Values are recorded in evaluation order and
/// backward() walks them in reverse, accumulating into parents and finally
/// into Parameter::grad.
class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var constant(Matrix value);
    Var param(Parameter& p);
    Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
    Var record(Matrix value, std::span<const Var> parents, Backward backward);

    const Matrix& value(int id) const;
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // Adds `g` into the gradient slot of node `id` (no-op for constants).
    void accumulate(int id, const Matrix& g);
    template <typename Expr>
    void accumulate_expr(int id, const Expr& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad) return;
        ensure_grad(n);
        n.grad += g;
    }

    // Seeds d(root)/d(root) = scale and propagates. Root must be 1x1.
    void backward(Var root, double scale = 1.0);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Parameter* param = nullptr;
        Matrix grad;
        bool needs_grad = false;
        bool has_grad = false;
        Backward backward;
    };

    void ensure_grad(Node& n);

    std::deque<Node> nodes_;
    bool record_;
};

// ---- elementary ops -------------------------------------------------------
// Layout convention: matrices are [channels x frames]; a "column vector"
// argument is [channels x 1] and broadcasts over frames.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_col(Var x, Var col);           // x + col (broadcast over columns)
Var mul_col(Var x, Var col);           // x ⊙ col (broadcast over columns)
Var add_scalar(Var x, double s);
Var transpose(Var a);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var mask_cols(Var x, const Vector& keep);   // column j scaled by keep(j)
Var gather_cols(Var table, std::span<const int> ids);
Var repeat_cols(Var x, std::span<const int> source_index);  // out(:,j) = x(:, source_index[j])

Var layer_norm_cols(Var x, double eps = 1e-6);
Var l2_normalize_cols(Var x, double min_norm = 1e-12);
Var softmax_cols(Var x);
Var log_softmax_cols(Var x);

Var gelu(Var x);
Var silu(Var x);
Var mish(Var x);

Var sum(Var x);
Var mean(Var x);
Var square(Var x);
Var mean_diagonal(Var x);

/// Grouped 1-D convolution over columns. weight is
/// [out x (in/groups * kernel)], column index = c_local * kernel + k.
Var conv1d(Var x, Var weight, Var bias, int stride, int padding, int groups);

Matrix sinusoidal_positions(Eigen::Index dim, std::span<const double> positions, double max_period = 10000.0);

}  // namespace cosync::nn
