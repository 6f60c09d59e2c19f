#include "cosync/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace cosync::metrics {

Eigen::VectorXd frame_energy(const Matrix& mel) {
    if (mel.rows() < 1 || mel.cols() < 1) throw std::invalid_argument("frame_energy: empty mel");
    return mel.colwise().mean().transpose();
}

std::vector<Segment> segment_speech(const Matrix& mel, double threshold) {
    const Eigen::VectorXd e = frame_energy(mel);
    std::vector<Segment> out;
    Eigen::Index start = -1;
    for (Eigen::Index i = 0; i < e.size(); ++i) {
        const bool voiced = e(i) > threshold;
        if (voiced && start < 0) start = i;
        if (!voiced && start >= 0) {
            out.emplace_back(start, i);
            start = -1;
        }
    }
    if (start >= 0) out.emplace_back(start, e.size());
    return out;
}

std::vector<Segment> segment_speech_relative(const Matrix& mel, double fraction) {
    const Eigen::VectorXd e = frame_energy(mel);
    const double peak = e.maxCoeff();
    if (!(peak > 0.0)) return {};
    return segment_speech(mel, fraction * peak);
}

DurationHistogram DurationHistogram::build(const std::vector<Segment>& segments, double lo, double hi, int bins,
                                           double eps) {
    if (bins < 1) throw std::invalid_argument("histogram: bins must be >= 1");
    if (!(hi >= lo)) throw std::invalid_argument("histogram: empty range");
    DurationHistogram h;
    h.smoothing_eps = eps;
    h.bin_edges.resize(static_cast<std::size_t>(bins) + 1);
    const double width = (hi - lo) / bins;
    for (int k = 0; k <= bins; ++k) h.bin_edges[static_cast<std::size_t>(k)] = lo + width * k;

    std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
    for (const auto& [s, e] : segments) {
        const double dur = static_cast<double>(e - s);
        int k = width > 0.0 ? static_cast<int>(std::floor((dur - lo) / width)) : 0;
        k = std::clamp(k, 0, bins - 1);
        counts[static_cast<std::size_t>(k)] += 1.0;
    }
    const double n = static_cast<double>(segments.size());
    h.probs.resize(static_cast<std::size_t>(bins));
    for (int k = 0; k < bins; ++k) {
        const double p = n > 0.0 ? counts[static_cast<std::size_t>(k)] / n : 1.0 / bins;
        h.probs[static_cast<std::size_t>(k)] = p * (1.0 - eps) + eps / bins;
    }
    return h;
}

double kl_divergence(const DurationHistogram& p, const DurationHistogram& q) {
    if (p.probs.size() != q.probs.size()) throw std::invalid_argument("kl: bin counts differ");
    double kl = 0.0;
    for (std::size_t k = 0; k < p.probs.size(); ++k) kl += p.probs[k] * std::log(p.probs[k] / q.probs[k]);
    return std::max(kl, 0.0);
}

double sync_kl(const Matrix& gt_mel, const Matrix& gen_mel, int bins) {
    const auto gt = segment_speech_relative(gt_mel);
    if (gt.empty()) throw std::domain_error("sync_kl: ground truth has no voiced segment");
    const auto gen = segment_speech_relative(gen_mel);
    Eigen::Index longest = 1;
    for (const auto& [s, e] : gt) longest = std::max(longest, e - s);
    for (const auto& [s, e] : gen) longest = std::max(longest, e - s);
    const double hi = static_cast<double>(longest);
    return kl_divergence(DurationHistogram::build(gt, 1.0, hi, bins), DurationHistogram::build(gen, 1.0, hi, bins));
}

double region_mse(const Matrix& gen, const Matrix& gt, const conditioning::MaskSpec& mask) {
    if (gen.rows() != gt.rows() || gen.cols() != gt.cols()) throw std::invalid_argument("region_mse: shape mismatch");
    if (mask.empty()) return (gen - gt).array().square().mean();
    mask.check(gen.cols());
    return (gen.middleCols(mask.start, mask.length()) - gt.middleCols(mask.start, mask.length()))
        .array()
        .square()
        .mean();
}

void write_eval_csv(std::ostream& out, const std::vector<EvalRow>& rows) {
    out << "utt_id,nfe,region_mse,sync_kl\n";
    char buf[64];
    for (const auto& r : rows) {
        out << r.utt_id << ',' << r.nfe << ',';
        std::snprintf(buf, sizeof buf, "%.17g", r.region_mse);
        out << buf << ',';
        std::snprintf(buf, sizeof buf, "%.17g", r.sync_kl);
        out << buf << '\n';
    }
}

}  // namespace cosync::metrics
