// Acceptance suite: one PASS/FAIL line per criterion, exit 1 if any fails.
// Usage: acceptance [config_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cosync/config.hpp"
#include "cosync/data_io.hpp"
#include "cosync/flow.hpp"
#include "cosync/jsar.hpp"
#include "cosync/model.hpp"
#include "cosync/trainer.hpp"
#include "cosync/verify.hpp"

#ifndef COSYNC_CONFIG_DIR
#define COSYNC_CONFIG_DIR "configs"
#endif

using namespace cosync;
namespace fs = std::filesystem;
using flow::ConditionBranch;
using flow::MaskSpec;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Fails the criterion with `why` unless `ok`.
struct Checker {
    std::vector<std::string> failures;
    void operator()(bool ok, const std::string& why) {
        if (!ok) failures.push_back(why);
    }
    Outcome done(const std::string& detail) const {
        if (failures.empty()) return {true, detail};
        std::string all;
        for (const auto& f : failures) all += (all.empty() ? "" : "; ") + f;
        return {false, all};
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- 1 and 6: the default model at init -------------------------------------

Outcome identity_at_init(const CoSyncModel& model, Clock::time_point t0) {
    Checker check;
    const auto& cfg = model.config();
    nn::Rng rng(101);
    nn::Tape tape(false);
    std::vector<conditioning::ConditioningBundle> bundles;
    std::vector<nn::Var> xs;
    std::vector<double> ts;
    std::vector<Matrix> x0s;
    std::vector<BundleValues> values;
    for (int i = 0; i < 20; ++i) {
        const auto rec = verify::random_record(cfg, 2, 2 + i % 2, rng);
        const auto mask = conditioning::sample_mask(rec.frames(), rng);
        values.push_back(model.condition(rec, mask));
        bundles.push_back(values.back().on(tape));
        x0s.push_back(rng.normal_matrix(rec.mel.rows(), rec.mel.cols(), 1.0 + i));
        xs.push_back(tape.constant(x0s.back()));
        ts.push_back(i == 0 ? 0.0 : i == 1 ? 1.0 : rng.uniform());
    }
    const auto vs = model.backbone().forward_batch(xs, bundles, ts);
    int nonzero = 0;
    for (const auto& v : vs) nonzero += (v.value().array() != 0.0).count() > 0 ? 1 : 0;
    check(nonzero == 0, std::to_string(nonzero) + " of 20 fields not bitwise zero");

    const auto r = flow::euler_sample(model.vector_field(values[2]), {}, 2, x0s[2]);
    check(r.evaluations == 2 && r.mel == x0s[2], "euler nfe 2 moved x0");
    const double secs = seconds_since(t0);
    check(secs < 10.0, "took " + num(secs) + " s");
    return check.done("20 default-model fields bitwise zero, euler nfe 2 returns x0, " + num(secs) + " s");
}

Outcome zero_gate_neutrality(const CoSyncModel& model) {
    Checker check;
    nn::Rng rng(606);
    for (int i = 0; i < 10; ++i) {
        const auto rec = verify::random_record(model.config(), 2 + i % 3, 3, rng);
        BundleValues b = model.condition(rec, conditioning::sample_mask(rec.frames(), rng));
        const Matrix x = rng.normal_matrix(rec.mel.rows(), rec.mel.cols());
        const double t = rng.uniform();
        b.x_lip = rng.normal_matrix(b.x_lip.rows(), b.x_lip.cols(), 3.0);
        nn::Tape t1(false);
        const auto with_lip = model.backbone().forward(t1.constant(x), b.on(t1), t);
        b.x_lip.setZero();
        nn::Tape t2(false);
        const auto without = model.backbone().forward(t2.constant(x), b.on(t2), t);
        bool same = with_lip.v.value() == without.v.value() &&
                    with_lip.taps.z_final.value() == without.taps.z_final.value();
        auto eq = [](const std::optional<nn::Var>& a, const std::optional<nn::Var>& b) {
            return a.has_value() == b.has_value() && (!a || a->value() == b->value());
        };
        for (std::size_t l = 0; l < with_lip.taps.layers.size(); ++l) {
            const auto &p = with_lip.taps.layers[l], &q = without.taps.layers[l];
            same = same && p.z_style.value() == q.z_style.value() && eq(p.z_lip, q.z_lip) && eq(p.z_out, q.z_out) &&
                   eq(p.z_ca, q.z_ca);
        }
        check(same, "bundle " + std::to_string(i) + " differs");
    }
    return check.done("10 bundles, every layer output identical with random or zero x_lip");
}

// ---- 2 ----------------------------------------------------------------------

Outcome gradients() {
    const auto t0 = Clock::now();
    const auto r = verify::gradient_check(7, 0, 1e-5);
    const double secs = seconds_since(t0);
    Checker check;
    check(r.max_rel_error < 1e-4, "max rel err " + num(r.max_rel_error) + " at " + r.worst);
    check(secs < 120.0, "took " + num(secs) + " s");
    check(r.checked > 0, "no entries checked");
    return check.done("tiny config, all " + std::to_string(r.checked) + " entries, max rel err " +
                      num(r.max_rel_error) + ", " + num(secs) + " s");
}

// ---- 3 ----------------------------------------------------------------------

Outcome sampler_oracles() {
    const auto t0 = Clock::now();
    Checker check;
    nn::Rng rng(303);
    const Matrix x0 = rng.normal_matrix(5, 9), c = rng.normal_matrix(5, 9);
    double worst = 0.0;
    for (int nfe : {1, 3, 8, 32, 100}) {
        const auto r = flow::euler_sample([&](const Matrix&, double, ConditionBranch) { return c; }, {}, nfe, x0);
        worst = std::max(worst, (r.mel - (x0 + c)).cwiseAbs().maxCoeff());
    }
    check(worst <= 1e-12, "constant field deviation " + num(worst));

    const auto e = flow::euler_sample([](const Matrix& x, double, ConditionBranch) { return x; }, {}, 32,
                                      Matrix::Ones(1, 1));
    const double expected = std::pow(1.0 + 1.0 / 32.0, 32);
    const double x1 = e.mel(0, 0);
    check(std::abs(x1 - expected) < 1e-9, "v=x gives " + num(x1));
    check(std::abs(x1 - std::exp(1.0)) / std::exp(1.0) < 0.02, "v=x not within 2% of e");
    const double secs = seconds_since(t0);
    check(secs < 1.0, "took " + num(secs) + " s");
    return check.done("constant field dev " + num(worst) + ", x(1) = " + num(x1) + " vs (1+1/32)^32, " +
                      num(secs) + " s");
}

// ---- 4 ----------------------------------------------------------------------

Outcome cfg_reduction() {
    Checker check;
    nn::Rng rng(404);
    for (int i = 0; i < 20; ++i) {
        const Matrix a = rng.normal_matrix(4, 7), b = rng.normal_matrix(4, 7), c = rng.normal_matrix(4, 7);
        check(flow::cfg_field(a, b, c, {0.0, 0.0}) == a, "zero scales do not return the full field");
    }
    const double scalar = flow::cfg_field(Matrix::Constant(1, 1, 3.0), Matrix::Constant(1, 1, 2.0),
                                          Matrix::Constant(1, 1, 1.0), {1.0, 1.0})(0, 0);
    check(scalar == 5.0, "scalar case gives " + num(scalar));
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const flow::GuidanceSpec g{rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0)};
        const double p = rng.uniform(-3.0, 3.0), q = rng.uniform(-3.0, 3.0);
        const Matrix a1 = rng.normal_matrix(6, 11), b1 = rng.normal_matrix(6, 11), c1 = rng.normal_matrix(6, 11);
        const Matrix a2 = rng.normal_matrix(6, 11), b2 = rng.normal_matrix(6, 11), c2 = rng.normal_matrix(6, 11);
        const Matrix lhs = flow::cfg_field(p * a1 + q * a2, p * b1 + q * b2, p * c1 + q * c2, g);
        const Matrix rhs = p * flow::cfg_field(a1, b1, c1, g) + q * flow::cfg_field(a2, b2, c2, g);
        worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
    }
    check(worst < 1e-9, "linearity deviation " + num(worst));
    return check.done("zero scales exact, (3,2,1;1,1) -> 5, 50 triples linear to " + num(worst));
}

// ---- 5 ----------------------------------------------------------------------

void label_sequences(int T, int V, std::vector<int>& prefix, std::vector<std::vector<int>>& out) {
    if (static_cast<int>(prefix.size()) == T) {
        out.push_back(prefix);
        return;
    }
    for (int s = 1; s < V; ++s) {
        prefix.push_back(s);
        label_sequences(T, V, prefix, out);
        prefix.pop_back();
    }
}

Outcome loss_unit_values() {
    Checker check;
    nn::Rng rng(505);
    const double single = jsar::info_nce(rng.normal_matrix(8, 1), rng.normal_matrix(8, 1), 0.07);
    check(std::abs(single) < 1e-12, "N=1 gives " + num(single));
    for (int n : {2, 4, 9, 30}) {
        const Matrix z = rng.normal_matrix(8, 1).replicate(1, n);
        const Matrix f = rng.normal_matrix(8, 1).replicate(1, n);
        const double l = jsar::info_nce(z, f, 0.07);
        check(std::abs(l - std::log(static_cast<double>(n))) < 1e-9, "identical frames N=" + std::to_string(n));
    }
    const Matrix e = Matrix::Identity(3, 2);
    const double orth = jsar::info_nce(e, e, 1.0);
    check(std::abs(orth - std::log(1.0 + std::exp(-1.0))) < 1e-9, "orthogonal pair gives " + num(orth));

    for (int V : {2, 3, 5}) {
        const double one = jsar::ctc_loss(Matrix::Zero(V, 1), std::vector<int>{1}, 0);
        const double want = -std::log(1.0 / V);
        check(std::abs(one - want) < 1e-9, "uniform single frame V=" + std::to_string(V));
    }
    check(std::abs(jsar::ctc_loss(Matrix::Zero(2, 1), std::vector<int>{1}, 0) + std::log(0.5)) < 1e-9,
          "uniform single frame is not -log 0.5");

    int instances = 0;
    double worst = 0.0;
    for (int V = 2; V <= 3; ++V) {
        for (int T = 1; T <= 3; ++T) {
            std::vector<std::vector<int>> all;
            std::vector<int> prefix;
            label_sequences(T, V, prefix, all);
            for (const auto& labels : all) {
                for (Eigen::Index frames = 1; frames <= 5; ++frames) {
                    if (frames < jsar::ctc_min_frames(labels)) continue;
                    const Matrix logits = rng.normal_matrix(V, frames, 2.0);
                    const double dp = jsar::ctc_loss(logits, labels, 0);
                    const double brute = verify::ctc_brute_force(logits, labels, 0);
                    worst = std::max(worst, std::abs(dp - brute));
                    ++instances;
                }
            }
        }
    }
    check(worst < 1e-9, "ctc vs enumeration deviation " + num(worst));
    return check.done("InfoNCE N=1/identical/orthogonal exact, CTC single frame -log 0.5, " +
                      std::to_string(instances) + " instances vs enumeration, max dev " + num(worst));
}

// ---- 7 ----------------------------------------------------------------------

Outcome mask_statistics() {
    Checker check;
    nn::Rng rng(707);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    int outside = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto m = conditioning::sample_mask(200, rng);
        const double f = static_cast<double>(m.length()) / 200.0;
        if (f < 0.70 || f > 1.00 || m.start < 0 || m.end > 200) ++outside;
        lo = std::min(lo, f);
        hi = std::max(hi, f);
        sum += f;
    }
    const double mean = sum / n;
    check(outside == 0, std::to_string(outside) + " masks outside [0.70, 1.00]");
    check(mean >= 0.84 && mean <= 0.86, "mean fraction " + num(mean));
    return check.done("10000 masks at L=200, fraction in [" + num(lo) + ", " + num(hi) + "], mean " + num(mean));
}

// ---- 8 and 9 ----------------------------------------------------------------

struct ToySetup {
    ModelConfig model;
    train::TrainConfig train;
    std::vector<data::UtteranceRecord> corpus;
};

ToySetup load_toy(const fs::path& config_dir) {
    ToySetup s;
    KeyValueReader reader(read_key_values(config_dir / "toy.cfg"));
    s.model = ModelConfig::read(reader);
    s.train = train::TrainConfig::read(reader);
    reader.reject_unknown();
    auto spec = data::SyntheticTaskSpec::from_key_values(read_key_values(config_dir / "synthetic.spec"));
    spec.validate();
    s.corpus = data::generate_synthetic_corpus(spec);
    return s;
}

std::pair<Outcome, Outcome> overfit(const ToySetup& toy) {
    const auto probe = train::overfit_probe(toy.corpus, toy.model, toy.train, {8, 16, 32});
    using metrics::EvalRow;
    const double mse_before = train::mean_metric(probe.untrained, 32, &EvalRow::region_mse);
    const double mse8 = train::mean_metric(probe.trained, 8, &EvalRow::region_mse);
    const double mse16 = train::mean_metric(probe.trained, 16, &EvalRow::region_mse);
    const double mse32 = train::mean_metric(probe.trained, 32, &EvalRow::region_mse);
    const double kl_before = train::mean_metric(probe.untrained, 32, &EvalRow::sync_kl);
    const double kl_after = train::mean_metric(probe.trained, 32, &EvalRow::sync_kl);

    // The untrained field is zero, so its sample is the seeded noise itself.
    double x0_mse = 0.0;
    for (std::size_t i = 0; i < toy.corpus.size(); ++i) {
        const auto& rec = toy.corpus[i];
        const auto mask = conditioning::target_mask(rec);
        const Matrix x0 = train::eval_noise(rec, i, toy.train.seed + 1);
        x0_mse += (x0 - rec.mel).middleCols(mask.start, mask.length()).array().square().mean();
    }
    x0_mse /= static_cast<double>(toy.corpus.size());

    Checker c8;
    c8(probe.parameter_count <= 1000000, std::to_string(probe.parameter_count) + " parameters");
    c8(toy.corpus.size() == 16, std::to_string(toy.corpus.size()) + " utterances");
    c8(probe.history.size() <= 2000, std::to_string(probe.history.size()) + " steps");
    c8(probe.seconds < 900.0, "took " + num(probe.seconds) + " s");
    c8(probe.final_loss < 0.1 * probe.initial_loss,
       "loss " + num(probe.initial_loss) + " -> " + num(probe.final_loss));
    c8(std::abs(mse_before - x0_mse) < 1e-12, "untrained mse " + num(mse_before) + " != x0 mse " + num(x0_mse));
    c8(mse32 * 5.0 <= mse_before, "nfe32 mse " + num(mse32) + " vs untrained " + num(mse_before));
    c8(kl_after < kl_before, "sync-kl " + num(kl_after) + " vs untrained " + num(kl_before));
    const Outcome o8 = c8.done(std::to_string(probe.parameter_count) + " params, " +
                               std::to_string(probe.history.size()) + " steps in " + num(probe.seconds) +
                               " s, L_fm " + num(probe.initial_loss) + " -> " + num(probe.final_loss) +
                               ", mse@32 " + num(mse32) + " vs untrained " + num(mse_before) + ", sync-kl " +
                               num(kl_after) + " vs " + num(kl_before));

    Checker c9;
    c9(mse8 <= 2.0 * mse32, "nfe8 mse " + num(mse8) + " vs nfe32 " + num(mse32));
    c9(mse16 <= 2.0 * mse32, "nfe16 mse " + num(mse16) + " vs nfe32 " + num(mse32));
    c9(std::isfinite(mse8) && std::isfinite(mse16) && std::isfinite(mse32), "non-finite mse");
    const Outcome o9 = c9.done("mse nfe8 " + num(mse8) + ", nfe16 " + num(mse16) + ", nfe32 " + num(mse32));
    return {o8, o9};
}

// ---- 10 ---------------------------------------------------------------------

Outcome determinism_and_resume(const ToySetup& toy, const fs::path& work) {
    Checker check;
    auto cfg = toy.train;
    cfg.steps = 40;
    cfg.checkpoint_every = 20;
    auto run = [&](const fs::path& dir, const train::TrainConfig& c) {
        auto model = CoSyncModel::create(toy.model);
        auto state = train::TrainState::fresh(model->parameters(), c);
        train::run_training(*model, state, c, toy.corpus, {dir, {}});
    };
    run(work / "a", cfg);
    run(work / "b", cfg);
    check(slurp(work / "a" / "loss.csv") == slurp(work / "b" / "loss.csv"), "loss CSVs differ between runs");
    check(slurp(work / "a" / "final.ckpt") == slurp(work / "b" / "final.ckpt"), "final checkpoints differ");

    const auto ck = train::read_checkpoint(work / "a" / "ckpt_20.ckpt");
    auto model = train::model_from_checkpoint(ck);
    auto state = ck.state;
    fs::create_directories(work / "r");
    train::run_training(*model, state, cfg, toy.corpus, {work / "r", {}});
    check(slurp(work / "r" / "loss.csv") == slurp(work / "a" / "loss.csv"), "resumed loss CSV differs");
    check(slurp(work / "r" / "final.ckpt") == slurp(work / "a" / "final.ckpt"), "resumed final checkpoint differs");

    auto other = cfg;
    other.seed = cfg.seed + 1;
    run(work / "c", other);
    check(slurp(work / "c" / "loss.csv") != slurp(work / "a" / "loss.csv"), "a different seed gave the same log");
    return check.done("toy model, 40 steps: same-seed CSVs and checkpoints byte-identical, resume at step 20 "
                      "reproduces both");
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path config_dir = argc > 1 ? fs::path(argv[1]) : fs::path(COSYNC_CONFIG_DIR);
    const fs::path work = fs::temp_directory_path() / ("cosync_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(work);
    fs::create_directories(work);

    int failed = 0;
    auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failed;
        std::printf("%s %2d %-24s %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
        std::fflush(stdout);
    };

    {
        const auto t0 = Clock::now();
        std::unique_ptr<CoSyncModel> model;
        auto get = [&]() -> const CoSyncModel& {
            if (!model) model = CoSyncModel::create(ModelConfig{});
            return *model;
        };
        report(1, "identity_at_init", [&] { return identity_at_init(get(), t0); });
        report(6, "zero_gate_neutrality", [&] { return zero_gate_neutrality(get()); });
    }
    report(2, "gradient_check", gradients);
    report(3, "sampler_oracles", sampler_oracles);
    report(4, "cfg_reduction", cfg_reduction);
    report(5, "loss_unit_values", loss_unit_values);
    report(7, "mask_span_statistics", mask_statistics);

    ToySetup toy;
    try {
        toy = load_toy(config_dir);
    } catch (const std::exception& e) {
        std::printf("cannot load toy setup from %s: %s\n", config_dir.string().c_str(), e.what());
    }
    if (toy.corpus.empty()) {
        report(8, "overfit", [] { return Outcome{false, "no toy setup"}; });
        report(9, "nfe_robustness", [] { return Outcome{false, "no toy setup"}; });
        report(10, "determinism_resume", [] { return Outcome{false, "no toy setup"}; });
    } else {
        Outcome o8{false, "not run"}, o9{false, "not run"};
        report(8, "overfit", [&] {
            std::tie(o8, o9) = overfit(toy);
            return o8;
        });
        report(9, "nfe_robustness", [&] { return o9; });
        report(10, "determinism_resume", [&] { return determinism_and_resume(toy, work); });
    }

    std::error_code ec;
    fs::remove_all(work, ec);
    std::printf("%d/10 criteria passed\n", 10 - failed);
    return failed == 0 ? 0 : 1;
}
