#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cosync/data_io.hpp"
#include "cosync/model.hpp"

namespace cosync::verify {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

enum class Fault { None, LipGate };

Fault parse_fault(const std::string& name);  // "", "none", "lip-gate"

// Small models used by the self-checks.
ModelConfig tiny_config();   // 3 layers, d = 16
ModelConfig small_config();  // 4 layers, d = 32

/// A record whose shapes match `cfg`, with `tokens` script tokens and
/// `frames_per_token` frames each.
data::UtteranceRecord random_record(const ModelConfig& cfg, int tokens, int frames_per_token, nn::Rng& rng);

// Overwrites every parameter with N(0, std^2) so no path is gated off.
void randomize_parameters(nn::ParameterStore& params, nn::Rng& rng, double std = 0.3);

// Sets every lip gate to a non-zero constant.
void corrupt_lip_gates(CoSyncModel& model, double value = 0.5);

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over
/// the checked parameter entries of L_fm + L_CL + L_ctc.
struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst;
    std::size_t checked = 0;
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckFloor = 1e-5;

// `max_per_param` = 0 checks every entry.
GradCheckReport gradient_check(std::uint64_t seed, std::size_t max_per_param = 0, double h = kGradCheckStep,
                               double floor = kGradCheckFloor);

/// Identity-at-init on the taps: every gated residual leaves its input
/// unchanged and the field is exactly zero.
bool gated_identity(const CoSyncModel& model, const data::UtteranceRecord& record, double t, const Matrix& x,
                    std::string* why = nullptr);

/// Reference CTC likelihood by enumerating every frame labelling.
double ctc_brute_force(const Matrix& logits, std::span<const int> targets, int blank_id = 0);

std::vector<CheckResult> run_all(Fault fault = Fault::None);
void print_table(std::ostream& out, const std::vector<CheckResult>& results);

}  // namespace cosync::verify
