#include "cosync/flow.hpp"

#include <cmath>

namespace cosync::flow {

FlowBatch make_flow_batch(const Matrix& x1, const Matrix& x0, double t) {
    if (x1.rows() != x0.rows() || x1.cols() != x0.cols()) throw std::invalid_argument("flow batch: x0/x1 shape mismatch");
    if (!x1.allFinite()) throw std::invalid_argument("flow batch: x1 must be finite");
    FlowBatch b;
    b.x0 = x0;
    b.x1 = x1;
    b.t = t;
    b.xt = (1.0 - t) * x0 + t * x1;
    b.target = x1 - x0;
    return b;
}

FlowBatch make_flow_batch(const Matrix& x1, nn::Rng& rng) {
    const double t = rng.uniform();
    Matrix x0 = rng.normal_matrix(x1.rows(), x1.cols());
    return make_flow_batch(x1, x0, t);
}

Var cfm_loss(Var v_pred, const FlowBatch& batch, const MaskSpec& region) {
    if (v_pred.rows() != batch.target.rows() || v_pred.cols() != batch.target.cols()) {
        throw std::invalid_argument("cfm_loss: prediction and target shapes differ");
    }
    nn::Tape& tape = v_pred.tape();
    Var diff = nn::sub(v_pred, tape.constant(batch.target));
    if (region.empty()) return nn::mean(nn::square(diff));
    region.check(v_pred.cols());
    return nn::mean(nn::square(nn::slice_cols(diff, region.start, region.length())));
}

double cfm_loss(const Matrix& v_pred, const FlowBatch& batch, const MaskSpec& region) {
    nn::Tape tape(false);
    return cfm_loss(tape.constant(v_pred), batch, region).scalar();
}

const char* to_string(ConditionBranch b) {
    switch (b) {
        case ConditionBranch::Full: return "full";
        case ConditionBranch::AcousticOnly: return "acoustic";
        case ConditionBranch::Unconditional: return "uncond";
    }
    return "?";
}

namespace {

Var zeros_like(Var v) { return v.tape().constant(Matrix::Zero(v.rows(), v.cols())); }

}  // namespace

ConditioningBundle apply_branch(const ConditioningBundle& bundle, ConditionBranch branch) {
    ConditioningBundle out = bundle;
    if (branch == ConditionBranch::Full) return out;
    out.text_pad = zeros_like(bundle.text_pad);
    out.text_ca = zeros_like(bundle.text_ca);
    out.h_text = zeros_like(bundle.h_text);
    if (branch == ConditionBranch::Unconditional) {
        out.h_m = zeros_like(bundle.h_m);
        out.x_lip = zeros_like(bundle.x_lip);
    }
    return out;
}

void GuidanceSpec::validate() const {
    if (!std::isfinite(lambda_a) || lambda_a < 0.0) throw std::invalid_argument("guidance: lambda_a must be finite and >= 0");
    if (!std::isfinite(lambda_s) || lambda_s < 0.0) throw std::invalid_argument("guidance: lambda_s must be finite and >= 0");
}

Matrix cfg_field(const Matrix& v_full, const Matrix& v_ac, const Matrix& v_unc, const GuidanceSpec& g) {
    g.validate();
    if (v_full.rows() != v_ac.rows() || v_full.cols() != v_ac.cols() || v_full.rows() != v_unc.rows() ||
        v_full.cols() != v_unc.cols()) {
        throw std::invalid_argument("cfg_field: branch fields differ in shape");
    }
    if (!v_full.allFinite() || !v_ac.allFinite() || !v_unc.allFinite()) {
        throw std::invalid_argument("cfg_field: non-finite branch field");
    }
    if (!g.active()) return v_full;
    return v_full + g.lambda_a * (v_full - v_ac) + g.lambda_s * (v_ac - v_unc);
}

SampleResult euler_sample(const VectorField& field, const GuidanceSpec& g, int nfe, Matrix x0) {
    if (nfe < 1) throw std::invalid_argument("euler_sample: nfe must be >= 1");
    g.validate();
    SampleResult out;
    Matrix x = std::move(x0);
    const double dt = 1.0 / static_cast<double>(nfe);
    for (int k = 0; k < nfe; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(nfe);
        Matrix v;
        if (g.active()) {
            const Matrix v_full = field(x, t, ConditionBranch::Full);
            const Matrix v_ac = field(x, t, ConditionBranch::AcousticOnly);
            const Matrix v_unc = field(x, t, ConditionBranch::Unconditional);
            out.evaluations += 3;
            v = cfg_field(v_full, v_ac, v_unc, g);
        } else {
            v = field(x, t, ConditionBranch::Full);
            out.evaluations += 1;
        }
        if (v.rows() != x.rows() || v.cols() != x.cols()) throw SamplerError(k, "euler_sample: field shape mismatch");
        x += dt * v;
        if (!x.allFinite()) {
            throw SamplerError(k, "euler_sample: non-finite state at step " + std::to_string(k));
        }
    }
    out.mel = std::move(x);
    return out;
}

SampleResult euler_sample(const VectorField& field, const GuidanceSpec& g, int nfe, Eigen::Index rows,
                          Eigen::Index cols, nn::Rng& rng) {
    return euler_sample(field, g, nfe, rng.normal_matrix(rows, cols));
}

Matrix infill_extract(const Matrix& generated, const MaskSpec& mask) {
    mask.check(generated.cols());
    return generated.middleCols(mask.start, mask.length());
}

Matrix splice_reference(const Matrix& generated, const Matrix& reference, const MaskSpec& mask) {
    if (generated.rows() != reference.rows() || generated.cols() != reference.cols()) {
        throw std::invalid_argument("splice_reference: shape mismatch");
    }
    mask.check(generated.cols());
    Matrix out = reference;
    out.middleCols(mask.start, mask.length()) = generated.middleCols(mask.start, mask.length());
    return out;
}

}  // namespace cosync::flow
