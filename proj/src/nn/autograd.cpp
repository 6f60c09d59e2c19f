#include "cosync/nn/autograd.hpp"

#include <cmath>
#include <numbers>

namespace cosync::nn {

// ---- ParameterStore -------------------------------------------------------

Parameter& ParameterStore::add(const std::string& name, Matrix init) {
    if (index_.count(name) != 0) {
        throw std::invalid_argument("duplicate parameter name: " + name);
    }
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = std::move(init);
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return *params_.back();
}

Parameter& ParameterStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
}

const Parameter& ParameterStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
}

Eigen::Index ParameterStore::scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

// ---- Tape -----------------------------------------------------------------

const Matrix& Var::value() const { return tape_->value(id_); }

const Matrix& Tape::value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.param != nullptr ? n.param->value : n.value;
}

Var Tape::constant(Matrix value) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
    Node& n = nodes_.emplace_back();
    n.param = &p;
    n.needs_grad = record_;
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
    bool needs = false;
    if (record_) {
        for (const Var& p : parents) {
            if (&p.tape() != this) throw std::logic_error("mixing vars from different tapes");
            needs = needs || needs_grad(p.id());
        }
    }
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.needs_grad = needs;
    if (needs) n.backward = std::move(backward);
    return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::ensure_grad(Node& n) {
    if (!n.has_grad) {
        const Matrix& v = n.param != nullptr ? n.param->value : n.value;
        n.grad = Matrix::Zero(v.rows(), v.cols());
        n.has_grad = true;
    }
}

void Tape::accumulate(int id, const Matrix& g) { accumulate_expr(id, g); }

void Tape::backward(Var root, double scale) {
    if (&root.tape() != this) throw std::logic_error("backward: root from another tape");
    if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!needs_grad(root.id())) return;
    Node& r = nodes_[static_cast<std::size_t>(root.id())];
    ensure_grad(r);
    r.grad(0, 0) += scale;
    for (int i = root.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.has_grad) continue;
        if (n.backward) n.backward(*this, n.grad);
        if (n.param != nullptr) {
            if (n.param->grad.size() == 0) n.param->grad = Matrix::Zero(n.param->value.rows(), n.param->value.cols());
            n.param->grad += n.grad;
        }
        // Release intermediate gradient memory as soon as it is consumed.
        n.grad.resize(0, 0);
        n.has_grad = false;
    }
}

// ---- ops ------------------------------------------------------------------

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()) + ")");
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                                    std::to_string(b.rows()) + ")");
    }
    Matrix out = a.value() * b.value();
    return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.needs_grad(a.id())) t.accumulate_expr(a.id(), g * b.value().transpose());
        if (t.needs_grad(b.id())) t.accumulate_expr(b.id(), a.value().transpose() * g);
    });
}

Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    return a.tape().record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a.id(), g);
        t.accumulate(b.id(), g);
    });
}

Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    return a.tape().record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a.id(), g);
        t.accumulate_expr(b.id(), -g);
    });
}

Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (t.needs_grad(a.id())) t.accumulate_expr(a.id(), g.cwiseProduct(b.value()));
        if (t.needs_grad(b.id())) t.accumulate_expr(b.id(), g.cwiseProduct(a.value()));
    });
}

Var scale(Var a, double s) {
    return a.tape().record(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate_expr(a.id(), g * s); });
}

Var add_scalar(Var x, double s) {
    return x.tape().record(x.value().array() + s, {x}, [x](Tape& t, const Matrix& g) { t.accumulate(x.id(), g); });
}

Var add_col(Var x, Var col) {
    if (col.cols() != 1 || col.rows() != x.rows()) throw std::invalid_argument("add_col: expected [rows x 1] vector");
    Matrix out = x.value().colwise() + col.value().col(0);
    return x.tape().record(std::move(out), {x, col}, [x, col](Tape& t, const Matrix& g) {
        t.accumulate(x.id(), g);
        if (t.needs_grad(col.id())) t.accumulate_expr(col.id(), g.rowwise().sum());
    });
}

Var mul_col(Var x, Var col) {
    if (col.cols() != 1 || col.rows() != x.rows()) throw std::invalid_argument("mul_col: expected [rows x 1] vector");
    Matrix out = col.value().col(0).asDiagonal() * x.value();
    return x.tape().record(std::move(out), {x, col}, [x, col](Tape& t, const Matrix& g) {
        if (t.needs_grad(x.id())) t.accumulate_expr(x.id(), col.value().col(0).asDiagonal() * g);
        if (t.needs_grad(col.id())) t.accumulate_expr(col.id(), g.cwiseProduct(x.value()).rowwise().sum());
    });
}

Var transpose(Var a) {
    return a.tape().record(a.value().transpose(), {a},
                           [a](Tape& t, const Matrix& g) { t.accumulate_expr(a.id(), g.transpose()); });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const Eigen::Index cols = parts[0].cols();
    Eigen::Index rows = 0;
    for (const Var& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: column count mismatch");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    std::vector<Var> saved(parts.begin(), parts.end());
    return parts[0].tape().record(std::move(out), parts, [saved](Tape& t, const Matrix& g) {
        Eigen::Index offset = 0;
        for (const Var& p : saved) {
            if (t.needs_grad(p.id())) t.accumulate_expr(p.id(), g.middleRows(offset, p.rows()));
            offset += p.rows();
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const Eigen::Index rows = parts[0].rows();
    Eigen::Index cols = 0;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row count mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Eigen::Index c = 0;
    for (const Var& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    std::vector<Var> saved(parts.begin(), parts.end());
    return parts[0].tape().record(std::move(out), parts, [saved](Tape& t, const Matrix& g) {
        Eigen::Index offset = 0;
        for (const Var& p : saved) {
            if (t.needs_grad(p.id())) t.accumulate_expr(p.id(), g.middleCols(offset, p.cols()));
            offset += p.cols();
        }
    });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows: range out of bounds");
    return a.tape().record(a.value().middleRows(start, count), {a}, [a, start, count](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(a.rows(), a.cols());
        full.middleRows(start, count) = g;
        t.accumulate(a.id(), full);
    });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols: range out of bounds");
    return a.tape().record(a.value().middleCols(start, count), {a}, [a, start, count](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(a.rows(), a.cols());
        full.middleCols(start, count) = g;
        t.accumulate(a.id(), full);
    });
}

Var mask_cols(Var x, const Vector& keep) {
    if (keep.size() != x.cols()) throw std::invalid_argument("mask_cols: mask length mismatch");
    Matrix out = x.value() * keep.asDiagonal();
    return x.tape().record(std::move(out), {x},
                           [x, keep](Tape& t, const Matrix& g) { t.accumulate_expr(x.id(), g * keep.asDiagonal()); });
}

Var gather_cols(Var table, std::span<const int> ids) {
    Matrix out(table.rows(), static_cast<Eigen::Index>(ids.size()));
    for (std::size_t j = 0; j < ids.size(); ++j) {
        if (ids[j] < 0 || ids[j] >= table.cols()) throw std::out_of_range("gather_cols: id out of range");
        out.col(static_cast<Eigen::Index>(j)) = table.value().col(ids[j]);
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return table.tape().record(std::move(out), {table}, [table, saved](Tape& t, const Matrix& g) {
        Matrix full = Matrix::Zero(table.rows(), table.cols());
        for (std::size_t j = 0; j < saved.size(); ++j) full.col(saved[j]) += g.col(static_cast<Eigen::Index>(j));
        t.accumulate(table.id(), full);
    });
}

Var repeat_cols(Var x, std::span<const int> source_index) { return gather_cols(x, source_index); }

Var layer_norm_cols(Var x, double eps) {
    const Matrix& v = x.value();
    const Eigen::Index n = v.rows();
    Matrix xhat(v.rows(), v.cols());
    Vector inv_std(v.cols());
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
        const double mu = v.col(c).mean();
        const double var = (v.col(c).array() - mu).square().sum() / static_cast<double>(n);
        inv_std(c) = 1.0 / std::sqrt(var + eps);
        xhat.col(c) = (v.col(c).array() - mu) * inv_std(c);
    }
    Matrix out = xhat;
    return x.tape().record(std::move(out), {x}, [x, xhat, inv_std, n](Tape& t, const Matrix& g) {
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index c = 0; c < g.cols(); ++c) {
            const double mean_g = g.col(c).mean();
            const double mean_gx = g.col(c).dot(xhat.col(c)) / static_cast<double>(n);
            dx.col(c) = inv_std(c) * (g.col(c).array() - mean_g - xhat.col(c).array() * mean_gx);
        }
        t.accumulate(x.id(), dx);
    });
}

Var l2_normalize_cols(Var x, double min_norm) {
    const Matrix& v = x.value();
    Vector norms = v.colwise().norm().transpose();
    for (Eigen::Index c = 0; c < norms.size(); ++c) {
        if (!(norms(c) > min_norm)) {
            throw std::domain_error("l2_normalize_cols: zero-norm frame at column " + std::to_string(c));
        }
    }
    Matrix y = v * norms.cwiseInverse().asDiagonal();
    Matrix out = y;
    return x.tape().record(std::move(out), {x}, [x, y, norms](Tape& t, const Matrix& g) {
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index c = 0; c < g.cols(); ++c) {
            dx.col(c) = (g.col(c) - y.col(c) * y.col(c).dot(g.col(c))) / norms(c);
        }
        t.accumulate(x.id(), dx);
    });
}

Var softmax_cols(Var x) {
    const Matrix& v = x.value();
    Matrix y(v.rows(), v.cols());
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
        const double m = v.col(c).maxCoeff();
        y.col(c) = (v.col(c).array() - m).exp();
        y.col(c) /= y.col(c).sum();
    }
    Matrix out = y;
    return x.tape().record(std::move(out), {x}, [x, y](Tape& t, const Matrix& g) {
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index c = 0; c < g.cols(); ++c) {
            dx.col(c) = y.col(c).cwiseProduct((g.col(c).array() - g.col(c).dot(y.col(c))).matrix());
        }
        t.accumulate(x.id(), dx);
    });
}

Var log_softmax_cols(Var x) {
    const Matrix& v = x.value();
    Matrix y(v.rows(), v.cols());
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
        const double m = v.col(c).maxCoeff();
        const double lse = m + std::log((v.col(c).array() - m).exp().sum());
        y.col(c) = v.col(c).array() - lse;
    }
    Matrix out = y;
    return x.tape().record(std::move(out), {x}, [x, y](Tape& t, const Matrix& g) {
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index c = 0; c < g.cols(); ++c) {
            dx.col(c) = g.col(c) - y.col(c).array().exp().matrix() * g.col(c).sum();
        }
        t.accumulate(x.id(), dx);
    });
}

Var gelu(Var x) {
    static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double c = 0.044715;
    const Matrix& v = x.value();
    Matrix th = (k * (v.array() + c * v.array().cube())).tanh();
    Matrix out = 0.5 * v.array() * (1.0 + th.array());
    return x.tape().record(std::move(out), {x}, [x, th](Tape& t, const Matrix& g) {
        const auto& v = x.value().array();
        auto d = 0.5 * (1.0 + th.array()) +
                 0.5 * v * (1.0 - th.array().square()) * k * (1.0 + 3.0 * c * v.square());
        t.accumulate_expr(x.id(), (g.array() * d).matrix());
    });
}

Var silu(Var x) {
    Matrix s = x.value().unaryExpr([](double z) { return sigmoid(z); });
    Matrix out = x.value().cwiseProduct(s);
    return x.tape().record(std::move(out), {x}, [x, s](Tape& t, const Matrix& g) {
        auto d = s.array() * (1.0 + x.value().array() * (1.0 - s.array()));
        t.accumulate_expr(x.id(), (g.array() * d).matrix());
    });
}

Var mish(Var x) {
    Matrix tsp = x.value().unaryExpr([](double z) { return std::tanh(softplus(z)); });
    Matrix out = x.value().cwiseProduct(tsp);
    return x.tape().record(std::move(out), {x}, [x, tsp](Tape& t, const Matrix& g) {
        Matrix sig = x.value().unaryExpr([](double z) { return sigmoid(z); });
        auto d = tsp.array() + x.value().array() * (1.0 - tsp.array().square()) * sig.array();
        t.accumulate_expr(x.id(), (g.array() * d).matrix());
    });
}

Var sum(Var x) {
    Matrix out(1, 1);
    out(0, 0) = x.value().sum();
    return x.tape().record(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
        t.accumulate_expr(x.id(), Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
    });
}

Var mean(Var x) {
    const double n = static_cast<double>(x.value().size());
    if (n == 0) throw std::invalid_argument("mean: empty input");
    Matrix out(1, 1);
    out(0, 0) = x.value().sum() / n;
    return x.tape().record(std::move(out), {x}, [x, n](Tape& t, const Matrix& g) {
        t.accumulate_expr(x.id(), Matrix::Constant(x.rows(), x.cols(), g(0, 0) / n));
    });
}

Var square(Var x) {
    return x.tape().record(x.value().array().square().matrix(), {x}, [x](Tape& t, const Matrix& g) {
        t.accumulate_expr(x.id(), (2.0 * g.array() * x.value().array()).matrix());
    });
}

Var mean_diagonal(Var x) {
    if (x.rows() != x.cols()) throw std::invalid_argument("mean_diagonal: matrix must be square");
    const double n = static_cast<double>(x.rows());
    Matrix out(1, 1);
    out(0, 0) = x.value().diagonal().sum() / n;
    return x.tape().record(std::move(out), {x}, [x, n](Tape& t, const Matrix& g) {
        Matrix d = Matrix::Zero(x.rows(), x.cols());
        d.diagonal().setConstant(g(0, 0) / n);
        t.accumulate(x.id(), d);
    });
}

Var conv1d(Var x, Var weight, Var bias, int stride, int padding, int groups) {
    const Eigen::Index in_ch = x.rows();
    const Eigen::Index len = x.cols();
    const Eigen::Index out_ch = weight.rows();
    if (groups <= 0 || in_ch % groups != 0 || out_ch % groups != 0) {
        throw std::invalid_argument("conv1d: channels not divisible by groups");
    }
    const Eigen::Index in_per = in_ch / groups;
    const Eigen::Index out_per = out_ch / groups;
    if (weight.cols() % in_per != 0) throw std::invalid_argument("conv1d: weight shape inconsistent with groups");
    const Eigen::Index kernel = weight.cols() / in_per;
    const Eigen::Index out_len = (len + 2 * padding - kernel) / stride + 1;
    if (stride <= 0 || out_len <= 0) throw std::invalid_argument("conv1d: input shorter than kernel");
    if (bias.valid() && (bias.rows() != out_ch || bias.cols() != 1)) {
        throw std::invalid_argument("conv1d: bias shape mismatch");
    }

    // im2col per group: cols_g is [(in_per*kernel) x out_len].
    auto im2col = [=](const Matrix& src, Eigen::Index g) {
        Matrix cols = Matrix::Zero(in_per * kernel, out_len);
        for (Eigen::Index c = 0; c < in_per; ++c) {
            const Eigen::Index ch = g * in_per + c;
            for (Eigen::Index k = 0; k < kernel; ++k) {
                for (Eigen::Index o = 0; o < out_len; ++o) {
                    const Eigen::Index pos = o * stride + k - padding;
                    if (pos >= 0 && pos < len) cols(c * kernel + k, o) = src(ch, pos);
                }
            }
        }
        return cols;
    };

    Matrix out(out_ch, out_len);
    for (Eigen::Index g = 0; g < groups; ++g) {
        out.middleRows(g * out_per, out_per).noalias() = weight.value().middleRows(g * out_per, out_per) * im2col(x.value(), g);
    }
    if (bias.valid()) out.colwise() += bias.value().col(0);

    std::vector<Var> parents{x, weight};
    if (bias.valid()) parents.push_back(bias);
    return x.tape().record(
        std::move(out), parents,
        [=](Tape& t, const Matrix& grad) {
            Matrix dx = Matrix::Zero(in_ch, len);
            Matrix dw = Matrix::Zero(weight.rows(), weight.cols());
            for (Eigen::Index g = 0; g < groups; ++g) {
                const Matrix cols = im2col(x.value(), g);
                const auto gout = grad.middleRows(g * out_per, out_per);
                dw.middleRows(g * out_per, out_per).noalias() += gout * cols.transpose();
                if (t.needs_grad(x.id())) {
                    const Matrix dcols = weight.value().middleRows(g * out_per, out_per).transpose() * gout;
                    for (Eigen::Index c = 0; c < in_per; ++c) {
                        const Eigen::Index ch = g * in_per + c;
                        for (Eigen::Index k = 0; k < kernel; ++k) {
                            for (Eigen::Index o = 0; o < out_len; ++o) {
                                const Eigen::Index pos = o * stride + k - padding;
                                if (pos >= 0 && pos < len) dx(ch, pos) += dcols(c * kernel + k, o);
                            }
                        }
                    }
                }
            }
            t.accumulate(x.id(), dx);
            t.accumulate(weight.id(), dw);
            if (bias.valid()) t.accumulate_expr(bias.id(), grad.rowwise().sum());
        });
}

Matrix sinusoidal_positions(Eigen::Index dim, std::span<const double> positions, double max_period) {
    Matrix out = Matrix::Zero(dim, static_cast<Eigen::Index>(positions.size()));
    const Eigen::Index half = dim / 2;
    for (Eigen::Index k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(max_period) * static_cast<double>(k) / static_cast<double>(half));
        for (std::size_t j = 0; j < positions.size(); ++j) {
            out(k, static_cast<Eigen::Index>(j)) = std::sin(positions[j] * freq);
            out(half + k, static_cast<Eigen::Index>(j)) = std::cos(positions[j] * freq);
        }
    }
    return out;
}

}  // namespace cosync::nn
