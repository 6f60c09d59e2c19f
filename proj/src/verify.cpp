#include "cosync/verify.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "cosync/flow.hpp"
#include "cosync/jsar.hpp"
#include "cosync/metrics.hpp"

namespace cosync::verify {

using conditioning::MaskSpec;
using flow::ConditionBranch;

Fault parse_fault(const std::string& name) {
    if (name.empty() || name == "none") return Fault::None;
    if (name == "lip-gate") return Fault::LipGate;
    throw std::invalid_argument("unknown fault '" + name + "' (expected none or lip-gate)");
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.mel_bins = 6;
    c.vocab_size = 3;
    c.visual_dim = 4;
    c.align_dim = 5;
    c.d = 16;
    c.n_layers = 3;
    c.n_heads = 2;
    c.p1_end = 1;
    c.p2_end = 2;
    c.text_dim = 8;
    c.text_blocks = 1;
    c.text_kernel = 3;
    c.pad_channels = 4;
    c.ca_channels = 4;
    c.position_dim = 4;
    c.conv_pos_kernel = 3;
    c.conv_pos_groups = 2;
    c.time_freq_dim = 8;
    c.proj_dim = 4;
    c.ctc_hidden = 8;
    return c;
}

ModelConfig small_config() {
    ModelConfig c;
    c.mel_bins = 20;
    c.vocab_size = 5;
    c.visual_dim = 8;
    c.align_dim = 8;
    c.d = 32;
    c.n_layers = 4;
    c.n_heads = 4;
    c.p1_end = 1;
    c.p2_end = 2;
    c.text_dim = 16;
    c.text_blocks = 1;
    c.text_kernel = 3;
    c.pad_channels = 8;
    c.ca_channels = 8;
    c.position_dim = 8;
    c.conv_pos_kernel = 7;
    c.conv_pos_groups = 4;
    c.time_freq_dim = 16;
    c.proj_dim = 8;
    return c;
}

data::UtteranceRecord random_record(const ModelConfig& cfg, int tokens, int frames_per_token, nn::Rng& rng) {
    const Eigen::Index L = static_cast<Eigen::Index>(tokens) * frames_per_token;
    data::UtteranceRecord r;
    r.mel = rng.uniform_matrix(cfg.mel_bins, L, 0.0, 1.0);
    r.lip_raw = rng.normal_matrix(cfg.visual_dim, (L + 1) / 2);
    for (int k = 0; k < tokens; ++k) {
        int id = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size)));
        // Avoid adjacent repeats so any length >= tokens frames stays CTC-feasible.
        if (k > 0 && id == r.text_ids.back()) id = (id + 1) % cfg.vocab_size;
        r.text_ids.push_back(id);
    }
    r.align_feat = rng.normal_matrix(cfg.align_dim, L);
    r.ref_len = frames_per_token;
    r.utt_id = "random";
    r.sample_rate_hint = 24000.0;
    return r;
}

void randomize_parameters(nn::ParameterStore& params, nn::Rng& rng, double std) {
    for (auto& p : params) p->value = rng.normal_matrix(p->value.rows(), p->value.cols(), std);
}

void corrupt_lip_gates(CoSyncModel& model, double value) {
    for (auto& p : model.parameters()) {
        if (p->name.ends_with(".lambda")) p->value.setConstant(value);
    }
}

namespace {

double total_loss(const CoSyncModel& model, const data::UtteranceRecord& rec, const MaskSpec& mask,
                  const flow::FlowBatch& batch, nn::Tape& tape, Var* out = nullptr) {
    const SampleLoss l = model.sample_loss(tape, rec, mask, ConditionBranch::Full, batch);
    Var total = nn::add(nn::add(l.l_fm, *l.l_cl), *l.l_ctc);
    if (out) *out = total;
    return total.scalar();
}

}  // namespace

GradCheckReport gradient_check(std::uint64_t seed, std::size_t max_per_param, double h, double floor) {
    nn::Rng rng(seed);
    auto model = CoSyncModel::create(tiny_config());
    randomize_parameters(model->parameters(), rng);
    const auto rec = random_record(model->config(), 2, 6, rng);
    const MaskSpec mask{2, 10};
    const auto batch = flow::make_flow_batch(rec.mel, rng.normal_matrix(rec.mel.rows(), rec.mel.cols()), 0.37);

    auto& params = model->parameters();
    params.zero_grad();
    {
        nn::Tape tape;
        Var total;
        total_loss(*model, rec, mask, batch, tape, &total);
        tape.backward(total);
    }

    GradCheckReport report;
    for (auto& p : params) {
        const Eigen::Index n = p->value.size();
        std::vector<Eigen::Index> entries;
        if (max_per_param == 0 || static_cast<std::size_t>(n) <= max_per_param) {
            for (Eigen::Index i = 0; i < n; ++i) entries.push_back(i);
        } else {
            for (std::size_t k = 0; k < max_per_param; ++k) {
                entries.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
            }
        }
        for (Eigen::Index i : entries) {
            double& w = p->value.data()[i];
            const double saved = w;
            w = saved + h;
            nn::Tape tp(false);
            const double fp = total_loss(*model, rec, mask, batch, tp);
            w = saved - h;
            nn::Tape tm(false);
            const double fm = total_loss(*model, rec, mask, batch, tm);
            w = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = p->grad.size() ? p->grad.data()[i] : 0.0;
            const double rel =
                std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = p->name + "[" + std::to_string(i) + "] analytic=" + format_double(analytic) +
                               " numeric=" + format_double(numeric);
            }
        }
    }
    return report;
}

bool gated_identity(const CoSyncModel& model, const data::UtteranceRecord& record, double t, const Matrix& x,
                    std::string* why) {
    auto fail = [&](const std::string& msg) {
        if (why) *why = msg;
        return false;
    };
    nn::Tape tape(false);
    const auto bundle = model.conditioning().build(tape, record, conditioning::target_mask(record));
    const auto fwd = model.backbone().forward(tape.constant(x), bundle, t);
    Matrix prev = fwd.taps.z0.value();
    for (std::size_t l = 0; l < fwd.taps.layers.size(); ++l) {
        const auto& taps = fwd.taps.layers[l];
        const std::string where = "layer " + std::to_string(l);
        if (taps.z_style.value() != prev) return fail(where + ": style block is not the identity");
        prev = taps.z_style.value();
        if (taps.z_lip) {
            if (taps.z_lip->value() != prev) return fail(where + ": lip gate changes the hidden state");
            prev = taps.z_lip->value();
        }
        if (taps.z_out) {
            if (taps.z_out->value() != prev) return fail(where + ": context block is not the identity");
            prev = taps.z_out->value();
        }
    }
    if ((fwd.v.value().array() != 0.0).any()) return fail("output field is not exactly zero");
    return true;
}

double ctc_brute_force(const Matrix& logits, std::span<const int> targets, int blank_id) {
    const Eigen::Index V = logits.rows();
    const Eigen::Index F = logits.cols();
    Matrix logp(V, F);
    for (Eigen::Index t = 0; t < F; ++t) {
        const double m = logits.col(t).maxCoeff();
        logp.col(t) = logits.col(t).array() - (m + std::log((logits.col(t).array() - m).exp().sum()));
    }
    std::vector<int> path(static_cast<std::size_t>(F), 0);
    double prob = 0.0;
    while (true) {
        std::vector<int> collapsed;
        int prev = -1;
        for (int s : path) {
            if (s != prev && s != blank_id) collapsed.push_back(s);
            prev = s;
        }
        if (std::equal(collapsed.begin(), collapsed.end(), targets.begin(), targets.end())) {
            double lp = 0.0;
            for (Eigen::Index t = 0; t < F; ++t) lp += logp(path[static_cast<std::size_t>(t)], t);
            prob += std::exp(lp);
        }
        Eigen::Index k = 0;
        while (k < F && ++path[static_cast<std::size_t>(k)] == V) path[static_cast<std::size_t>(k++)] = 0;
        if (k == F) break;
    }
    return -std::log(prob);
}

namespace {

std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

using Check = std::function<CheckResult()>;

CheckResult guarded(const std::string& name, const Check& fn) {
    try {
        CheckResult r = fn();
        r.name = name;
        return r;
    } catch (const std::exception& e) {
        return {name, false, std::string("exception: ") + e.what()};
    }
}

std::unique_ptr<CoSyncModel> fresh_model(Fault fault) {
    auto m = CoSyncModel::create(small_config());
    if (fault == Fault::LipGate) corrupt_lip_gates(*m);
    return m;
}

CheckResult check_identity(Fault fault) {
    auto model = fresh_model(fault);
    nn::Rng rng(11);
    for (int i = 0; i < 5; ++i) {
        const auto rec = random_record(model->config(), 3, 4, rng);
        const Matrix x = rng.normal_matrix(rec.mel.rows(), rec.mel.cols());
        std::string why;
        if (!gated_identity(*model, rec, rng.uniform(), x, &why)) return {"", false, "input " + std::to_string(i) + ": " + why};
    }
    return {"", true, "5 inputs, all gated blocks exact identity, v == 0"};
}

CheckResult check_euler_identity(Fault fault) {
    auto model = fresh_model(fault);
    nn::Rng rng(12);
    const auto rec = random_record(model->config(), 3, 4, rng);
    const Matrix x0 = rng.normal_matrix(rec.mel.rows(), rec.mel.cols());
    const auto bundle = model->condition(rec, MaskSpec::none());
    for (int nfe : {1, 4, 8}) {
        const auto r = flow::euler_sample(model->vector_field(bundle), {}, nfe, x0);
        if (r.mel != x0) return {"", false, "nfe " + std::to_string(nfe) + " moved x0"};
    }
    return {"", true, "nfe 1/4/8 return x0 bitwise"};
}

CheckResult check_zero_gate(Fault fault) {
    auto model = fresh_model(fault);
    nn::Rng rng(13);
    for (int i = 0; i < 5; ++i) {
        const auto rec = random_record(model->config(), 3, 4, rng);
        const Matrix x = rng.normal_matrix(rec.mel.rows(), rec.mel.cols());
        const double t = rng.uniform();
        BundleValues b = model->condition(rec, MaskSpec::none());
        b.x_lip = rng.normal_matrix(b.x_lip.rows(), b.x_lip.cols());
        nn::Tape t1(false);
        const auto f1 = model->backbone().forward(t1.constant(x), b.on(t1), t);
        b.x_lip.setZero();
        nn::Tape t2(false);
        const auto f2 = model->backbone().forward(t2.constant(x), b.on(t2), t);
        if (f1.taps.z_final.value() != f2.taps.z_final.value() || f1.v.value() != f2.v.value()) {
            return {"", false, "bundle " + std::to_string(i) + ": x_lip changes the hidden state at init"};
        }
    }
    return {"", true, "5 bundles, random vs zero x_lip identical"};
}

CheckResult check_gradients() {
    const auto r = gradient_check(7, 3);
    const bool ok = r.max_rel_error < 1e-4;
    return {"", ok, "max rel err " + num(r.max_rel_error) + " over " + std::to_string(r.checked) + " entries" +
                        (ok ? "" : " (worst " + r.worst + ")")};
}

CheckResult check_constant_field() {
    nn::Rng rng(14);
    const Matrix c = rng.normal_matrix(3, 5);
    const Matrix x0 = rng.normal_matrix(3, 5);
    double worst = 0.0;
    for (int nfe : {1, 7, 32}) {
        const auto r = flow::euler_sample([&](const Matrix&, double, ConditionBranch) { return c; }, {}, nfe, x0);
        worst = std::max(worst, (r.mel - (x0 + c)).cwiseAbs().maxCoeff());
    }
    return {"", worst <= 1e-12, "max deviation " + num(worst)};
}

CheckResult check_exponential() {
    const Matrix x0 = Matrix::Ones(1, 1);
    const auto r = flow::euler_sample([](const Matrix& x, double, ConditionBranch) { return x; }, {}, 32, x0);
    const double expected = std::pow(1.0 + 1.0 / 32.0, 32);
    const double err = std::abs(r.mel(0, 0) - expected);
    const double rel_e = std::abs(r.mel(0, 0) - std::exp(1.0)) / std::exp(1.0);
    return {"", err <= 1e-9 && rel_e < 0.02, "x(1) = " + format_double(r.mel(0, 0)) + ", |err| " + num(err)};
}

CheckResult check_cfg_reduction() {
    nn::Rng rng(15);
    const Matrix a = rng.normal_matrix(4, 6), b = rng.normal_matrix(4, 6), c = rng.normal_matrix(4, 6);
    if (flow::cfg_field(a, b, c, {0.0, 0.0}) != a) return {"", false, "lambda = 0 does not return v_full"};
    const double s = flow::cfg_field(Matrix::Constant(1, 1, 3.0), Matrix::Constant(1, 1, 2.0),
                                     Matrix::Constant(1, 1, 1.0), {1.0, 1.0})(0, 0);
    return {"", s == 5.0, "scalar (3,2,1; 1,1) -> " + format_double(s)};
}

CheckResult check_cfg_linearity() {
    nn::Rng rng(16);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const flow::GuidanceSpec g{rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0)};
        Matrix u[3], w[3];
        for (auto& m : u) m = rng.normal_matrix(3, 4);
        for (auto& m : w) m = rng.normal_matrix(3, 4);
        const double p = rng.normal(), q = rng.normal();
        const Matrix lhs = flow::cfg_field(p * u[0] + q * w[0], p * u[1] + q * w[1], p * u[2] + q * w[2], g);
        const Matrix rhs = p * flow::cfg_field(u[0], u[1], u[2], g) + q * flow::cfg_field(w[0], w[1], w[2], g);
        worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
    }
    return {"", worst <= 1e-9, "50 triples, max deviation " + num(worst)};
}

CheckResult check_info_nce() {
    nn::Rng rng(17);
    const double one = jsar::info_nce(rng.normal_matrix(4, 1), rng.normal_matrix(4, 1), 0.07);
    const Matrix col = rng.normal_matrix(4, 1);
    const Matrix same = col.replicate(1, 6);
    const double uniform = jsar::info_nce(same, same, 0.07);
    const Matrix eye = Matrix::Identity(2, 2);
    const double ortho = jsar::info_nce(eye, eye, 1.0);
    const bool ok = std::abs(one) <= 1e-12 && std::abs(uniform - std::log(6.0)) <= 1e-9 &&
                    std::abs(ortho - std::log1p(std::exp(-1.0))) <= 1e-9;
    return {"", ok, "N=1 " + num(one) + ", identical " + num(uniform) + ", orthogonal " + format_double(ortho)};
}

CheckResult check_ctc() {
    const int target[] = {1};
    const double single = jsar::ctc_loss(Matrix::Zero(2, 1), target, 0);
    if (std::abs(single - std::log(2.0)) > 1e-9) return {"", false, "uniform single frame gives " + format_double(single)};
    nn::Rng rng(18);
    double worst = 0.0;
    int cases = 0;
    for (int V = 2; V <= 3; ++V) {
        for (int F = 1; F <= 5; ++F) {
            for (int T = 1; T <= 3; ++T) {
                std::vector<int> labels;
                for (int k = 0; k < T; ++k) labels.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(V - 1))));
                if (jsar::ctc_min_frames(labels) > F) continue;
                const Matrix logits = rng.normal_matrix(V, F);
                worst = std::max(worst, std::abs(jsar::ctc_loss(logits, labels, 0) - ctc_brute_force(logits, labels, 0)));
                ++cases;
            }
        }
    }
    return {"", worst <= 1e-9, std::to_string(cases) + " instances vs enumeration, max deviation " + num(worst)};
}

CheckResult check_ctc_head() {
    auto model = CoSyncModel::create(tiny_config());
    nn::Tape tape(false);
    nn::Rng rng(19);
    const auto a = model->ctc()(tape.constant(rng.normal_matrix(16, 8)));
    const auto b = model->ctc()(tape.constant(rng.normal_matrix(16, 10)));
    const bool ok = a.cols() == 2 && b.cols() == 3 && a.value().allFinite() && b.value().allFinite();
    return {"", ok, "L=8 -> " + std::to_string(a.cols()) + ", L=10 -> " + std::to_string(b.cols())};
}

CheckResult check_mask_statistics() {
    nn::Rng rng(20);
    double sum = 0.0, lo = 1.0, hi = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto m = conditioning::sample_mask(200, rng);
        const double f = static_cast<double>(m.length()) / 200.0;
        sum += f;
        lo = std::min(lo, f);
        hi = std::max(hi, f);
    }
    const double mean = sum / n;
    return {"", lo >= 0.70 && hi <= 1.0 && mean >= 0.84 && mean <= 0.86,
            "fraction range [" + num(lo) + ", " + num(hi) + "], mean " + num(mean)};
}

CheckResult check_metrics() {
    nn::Rng rng(21);
    const Matrix gt = rng.uniform_matrix(10, 40, 0.0, 1.0);
    const double self = metrics::sync_kl(gt, gt);
    Matrix other = gt;
    const MaskSpec mask{10, 30};
    other.middleCols(0, 10).setConstant(7.0);
    const double mse_outside = metrics::region_mse(other, gt, mask);
    other.middleCols(mask.start, mask.length()).array() += 2.0;
    const double mse_inside = metrics::region_mse(other, gt, mask);
    const bool ok = self == 0.0 && mse_outside == 0.0 && std::abs(mse_inside - 4.0) <= 1e-12;
    return {"", ok, "sync_kl(x,x) " + num(self) + ", region mse " + num(mse_outside) + " / " + num(mse_inside)};
}

}  // namespace

std::vector<CheckResult> run_all(Fault fault) {
    std::vector<CheckResult> out;
    out.push_back(guarded("identity_at_init", [&] { return check_identity(fault); }));
    out.push_back(guarded("euler_identity_at_init", [&] { return check_euler_identity(fault); }));
    out.push_back(guarded("zero_gate_neutrality", [&] { return check_zero_gate(fault); }));
    out.push_back(guarded("gradient_check", check_gradients));
    out.push_back(guarded("sampler_constant_field", check_constant_field));
    out.push_back(guarded("sampler_exponential", check_exponential));
    out.push_back(guarded("cfg_reduction", check_cfg_reduction));
    out.push_back(guarded("cfg_linearity", check_cfg_linearity));
    out.push_back(guarded("info_nce_unit_values", check_info_nce));
    out.push_back(guarded("ctc_unit_values", check_ctc));
    out.push_back(guarded("ctc_head_length", check_ctc_head));
    out.push_back(guarded("mask_span_statistics", check_mask_statistics));
    out.push_back(guarded("metric_identities", check_metrics));
    return out;
}

void print_table(std::ostream& out, const std::vector<CheckResult>& results) {
    char line[512];
    for (const auto& r : results) {
        std::snprintf(line, sizeof line, "%-26s %-4s %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.detail.c_str());
        out << line;
    }
}

}  // namespace cosync::verify
