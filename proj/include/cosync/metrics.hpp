#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cosync/conditioning.hpp"

namespace cosync::metrics {

using Matrix = Eigen::MatrixXd;
using Segment = std::pair<Eigen::Index, Eigen::Index>;  // [start, end)

inline constexpr double kRelativeEnergyThreshold = 0.2;
inline constexpr int kDurationBins = 10;
inline constexpr double kSmoothingEps = 1e-6;

// Mean over mel bins, one value per frame.
Eigen::VectorXd frame_energy(const Matrix& mel);

/// Maximal runs of frames whose energy exceeds `threshold`.
std::vector<Segment> segment_speech(const Matrix& mel, double threshold);

/// Runs above `fraction` of the utterance's largest frame energy.
std::vector<Segment> segment_speech_relative(const Matrix& mel, double fraction = kRelativeEnergyThreshold);

/// Equal-width histogram of segment durations over [lo, hi] frames,
/// smoothed so that every bin has mass >= eps / bins.
struct DurationHistogram {
    std::vector<double> bin_edges;  // bins + 1 edges
    std::vector<double> probs;
    double smoothing_eps = kSmoothingEps;

    static DurationHistogram build(const std::vector<Segment>& segments, double lo, double hi,
                                   int bins = kDurationBins, double eps = kSmoothingEps);
    int bins() const { return static_cast<int>(probs.size()); }
};

// KL(p || q) over matching bins.
double kl_divergence(const DurationHistogram& p, const DurationHistogram& q);

/// KL(P_gt || P_gen) of voiced-segment duration histograms. Throws
/// std::domain_error when the ground truth has no voiced segment.
double sync_kl(const Matrix& gt_mel, const Matrix& gen_mel, int bins = kDurationBins);

/// Mean squared error over the columns of `mask` (all columns when empty).
double region_mse(const Matrix& gen, const Matrix& gt, const conditioning::MaskSpec& mask);

struct EvalRow {
    std::string utt_id;
    int nfe = 0;
    double region_mse = 0.0;
    double sync_kl = 0.0;
};

void write_eval_csv(std::ostream& out, const std::vector<EvalRow>& rows);

}  // namespace cosync::metrics
