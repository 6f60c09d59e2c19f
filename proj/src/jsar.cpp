#include "cosync/jsar.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace cosync::jsar {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

void ContrastiveConfig::validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw std::invalid_argument("contrastive: tau must be positive");
    if (proj_dim <= 0) throw std::invalid_argument("contrastive: proj_dim must be positive");
}

void CtcHeadConfig::validate() const {
    if (vocab_size < 2) throw std::invalid_argument("ctc head: vocab_size must be >= 2");
    if (blank_id < 0 || blank_id >= vocab_size) throw std::invalid_argument("ctc head: blank_id out of range");
    if (hidden < 0) throw std::invalid_argument("ctc head: hidden must be >= 0");
}

Var info_nce(Var z, Var f, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("info_nce: tau must be positive");
    if (z.cols() != f.cols()) throw std::invalid_argument("info_nce: frame counts differ");
    if (z.rows() != f.rows()) throw std::invalid_argument("info_nce: feature widths differ");
    if (z.cols() < 1) throw std::invalid_argument("info_nce: need at least one frame");
    Var zn = nn::l2_normalize_cols(z);
    Var fn = nn::l2_normalize_cols(f);
    // Column i holds the logits of query frame i against every candidate j.
    Var logits = nn::scale(nn::matmul(nn::transpose(fn), zn), 1.0 / tau);
    return nn::scale(nn::mean_diagonal(nn::log_softmax_cols(logits)), -1.0);
}

double info_nce(const Matrix& z, const Matrix& f, double tau) {
    nn::Tape tape(false);
    return info_nce(tape.constant(z), tape.constant(f), tau).scalar();
}

ContrastiveHead ContrastiveHead::create(nn::ParameterStore& store, const std::string& name, int d, int align_dim,
                                        const ContrastiveConfig& cfg, nn::Rng& rng) {
    cfg.validate();
    ContrastiveHead h;
    h.z_proj = nn::Linear::create(store, name + ".z_proj", d, cfg.proj_dim, rng, nn::Init::Default, false);
    h.f_proj = nn::Linear::create(store, name + ".f_proj", align_dim, cfg.proj_dim, rng, nn::Init::Default, false);
    h.tau = cfg.tau;
    return h;
}

Var ContrastiveHead::operator()(Var z_ca, Var f_av) const { return info_nce(z_proj(z_ca), f_proj(f_av), tau); }

Eigen::Index ctc_output_length(Eigen::Index frames) {
    const Eigen::Index half = (frames + 1) / 2;
    return (half + 1) / 2;
}

CtcHead CtcHead::create(nn::ParameterStore& store, const std::string& name, int d, const CtcHeadConfig& cfg,
                        nn::Rng& rng) {
    cfg.validate();
    const int hidden = cfg.hidden > 0 ? cfg.hidden : d;
    CtcHead h;
    h.down1 = nn::Conv1d::create(store, name + ".down1", d, hidden, 3, 2, 1, 1, rng);
    h.down2 = nn::Conv1d::create(store, name + ".down2", hidden, hidden, 3, 2, 1, 1, rng);
    h.out = nn::Linear::create(store, name + ".out", hidden, cfg.vocab_size, rng);
    return h;
}

Var CtcHead::operator()(Var z_out) const {
    if (z_out.cols() < 4) throw std::invalid_argument("ctc_head: need at least 4 frames");
    return out(nn::mish(down2(nn::mish(down1(z_out)))));
}

Eigen::Index ctc_min_frames(std::span<const int> targets) {
    Eigen::Index n = static_cast<Eigen::Index>(targets.size());
    for (std::size_t i = 1; i < targets.size(); ++i) {
        if (targets[i] == targets[i - 1]) ++n;
    }
    return n;
}

Var ctc_loss(Var logits, std::span<const int> targets, int blank_id) {
    const Eigen::Index vocab = logits.rows();
    const Eigen::Index frames = logits.cols();
    if (blank_id < 0 || blank_id >= vocab) throw std::invalid_argument("ctc_loss: blank id out of range");
    for (int label : targets) {
        if (label < 0 || label >= vocab || label == blank_id) {
            throw std::invalid_argument("ctc_loss: target label " + std::to_string(label) + " invalid");
        }
    }
    if (frames < 1 || ctc_min_frames(targets) > frames) {
        throw std::invalid_argument("ctc_loss: " + std::to_string(targets.size()) + " labels cannot be emitted in " +
                                    std::to_string(frames) + " frames");
    }

    Matrix logp(vocab, frames);
    for (Eigen::Index t = 0; t < frames; ++t) {
        const double m = logits.value().col(t).maxCoeff();
        const double lse = m + std::log((logits.value().col(t).array() - m).exp().sum());
        logp.col(t) = logits.value().col(t).array() - lse;
    }

    const Eigen::Index states = 2 * static_cast<Eigen::Index>(targets.size()) + 1;
    std::vector<int> ext(static_cast<std::size_t>(states), blank_id);
    for (std::size_t i = 0; i < targets.size(); ++i) ext[2 * i + 1] = targets[i];
    // skip[s]: state s may be entered directly from s - 2.
    std::vector<char> skip(static_cast<std::size_t>(states), 0);
    for (Eigen::Index s = 2; s < states; ++s) {
        const auto u = static_cast<std::size_t>(s);
        skip[u] = ext[u] != blank_id && ext[u] != ext[u - 2];
    }
    auto skip_allowed = [skip](Eigen::Index s) { return skip[static_cast<std::size_t>(s)] != 0; };

    Matrix alpha = Matrix::Constant(states, frames, kNegInf);
    alpha(0, 0) = logp(blank_id, 0);
    if (states > 1) alpha(1, 0) = logp(ext[1], 0);
    for (Eigen::Index t = 1; t < frames; ++t) {
        for (Eigen::Index s = 0; s < states; ++s) {
            double a = alpha(s, t - 1);
            if (s >= 1) a = log_add(a, alpha(s - 1, t - 1));
            if (skip_allowed(s)) a = log_add(a, alpha(s - 2, t - 1));
            if (a != kNegInf) alpha(s, t) = a + logp(ext[static_cast<std::size_t>(s)], t);
        }
    }
    double log_likelihood = alpha(states - 1, frames - 1);
    if (states > 1) log_likelihood = log_add(log_likelihood, alpha(states - 2, frames - 1));
    if (log_likelihood == kNegInf) throw std::domain_error("ctc_loss: target has zero probability");

    Matrix out(1, 1);
    out(0, 0) = -log_likelihood;
    return logits.tape().record(std::move(out), {logits}, [=](nn::Tape& tape, const Matrix& g) {
        // beta(s, t): log-probability of the remaining frames t+1.. given state s at t.
        Matrix beta = Matrix::Constant(states, frames, kNegInf);
        beta(states - 1, frames - 1) = 0.0;
        if (states > 1) beta(states - 2, frames - 1) = 0.0;
        for (Eigen::Index t = frames - 2; t >= 0; --t) {
            for (Eigen::Index s = 0; s < states; ++s) {
                double b = beta(s, t + 1) + logp(ext[static_cast<std::size_t>(s)], t + 1);
                if (s + 1 < states) b = log_add(b, beta(s + 1, t + 1) + logp(ext[static_cast<std::size_t>(s + 1)], t + 1));
                if (s + 2 < states && skip_allowed(s + 2)) {
                    b = log_add(b, beta(s + 2, t + 1) + logp(ext[static_cast<std::size_t>(s + 2)], t + 1));
                }
                beta(s, t) = b;
            }
        }
        Matrix grad = logp.array().exp().matrix();
        for (Eigen::Index t = 0; t < frames; ++t) {
            for (Eigen::Index s = 0; s < states; ++s) {
                const double occ = alpha(s, t) + beta(s, t);
                if (occ != kNegInf) grad(ext[static_cast<std::size_t>(s)], t) -= std::exp(occ - log_likelihood);
            }
        }
        tape.accumulate_expr(logits.id(), grad * g(0, 0));
    });
}

double ctc_loss(const Matrix& logits, std::span<const int> targets, int blank_id) {
    nn::Tape tape(false);
    return ctc_loss(tape.constant(logits), targets, blank_id).scalar();
}

}  // namespace cosync::jsar
