#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>

#include "cosync/conditioning.hpp"
#include "cosync/nn/autograd.hpp"
#include "cosync/nn/rng.hpp"

namespace cosync::flow {

using conditioning::ConditioningBundle;
using conditioning::MaskSpec;
using nn::Matrix;
using nn::Var;

/// One optimal-transport path sample: x_t = (1 - t) x0 + t x1, target x1 - x0.
struct FlowBatch {
    Matrix x0;
    Matrix x1;
    double t = 0.0;
    Matrix xt;
    Matrix target;
};

FlowBatch make_flow_batch(const Matrix& x1, const Matrix& x0, double t);
// x0 ~ N(0, I), t ~ U[0, 1).
FlowBatch make_flow_batch(const Matrix& x1, nn::Rng& rng);

/// Mean squared error over the frames of `region` (all frames when empty).
Var cfm_loss(Var v_pred, const FlowBatch& batch, const MaskSpec& region);
double cfm_loss(const Matrix& v_pred, const FlowBatch& batch, const MaskSpec& region);

enum class ConditionBranch { Full, AcousticOnly, Unconditional };

const char* to_string(ConditionBranch b);

/// Full: unchanged. AcousticOnly: text streams and text memory zeroed.
/// Unconditional: additionally h_m and x_lip zeroed. Shapes never change.
ConditioningBundle apply_branch(const ConditioningBundle& bundle, ConditionBranch branch);

struct GuidanceSpec {
    double lambda_a = 0.0;
    double lambda_s = 0.0;

    void validate() const;
    bool active() const { return lambda_a != 0.0 || lambda_s != 0.0; }
};

/// v_full + λa (v_full - v_ac) + λs (v_ac - v_unc).
Matrix cfg_field(const Matrix& v_full, const Matrix& v_ac, const Matrix& v_unc, const GuidanceSpec& g);

using VectorField = std::function<Matrix(const Matrix& x, double t, ConditionBranch branch)>;

class SamplerError : public std::runtime_error {
public:
    SamplerError(int step, const std::string& msg) : std::runtime_error(msg), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

struct SampleResult {
    Matrix mel;
    int evaluations = 0;
};

/// Left-endpoint Euler on the uniform grid t_k = k / nfe.
SampleResult euler_sample(const VectorField& field, const GuidanceSpec& g, int nfe, Matrix x0);
SampleResult euler_sample(const VectorField& field, const GuidanceSpec& g, int nfe, Eigen::Index rows,
                          Eigen::Index cols, nn::Rng& rng);

// Columns of the target span.
Matrix infill_extract(const Matrix& generated, const MaskSpec& mask);
// Generated frames inside the span, reference frames elsewhere.
Matrix splice_reference(const Matrix& generated, const Matrix& reference, const MaskSpec& mask);

}  // namespace cosync::flow
