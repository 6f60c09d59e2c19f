#include "cosync/trainer.hpp"

#include "cosync/array_file.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cosync::train {

using flow::ConditionBranch;

void TrainConfig::validate() const {
    auto prob = [](const char* key, double p) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(key, std::string(key) + " must lie in [0, 1]");
    };
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "lr must be finite and >= 0");
    prob("beta1", beta1);
    prob("beta2", beta2);
    if (beta1 >= 1.0) throw ConfigError("beta1", "beta1 must be < 1");
    if (beta2 >= 1.0) throw ConfigError("beta2", "beta2 must be < 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "weight_decay must be >= 0");
    if (!(eps > 0.0)) throw ConfigError("eps", "eps must be positive");
    if (steps < 0) throw ConfigError("steps", "steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size", "batch_size must be >= 1");
    prob("p_drop_text", p_drop_text);
    prob("p_drop_all", p_drop_all);
    if (p_drop_text + p_drop_all > 1.0) throw ConfigError("p_drop_text", "p_drop_text + p_drop_all must be <= 1");
    if (!std::isfinite(w_cl) || w_cl < 0.0) throw ConfigError("w_cl", "w_cl must be finite and >= 0");
    if (!std::isfinite(w_ctc) || w_ctc < 0.0) throw ConfigError("w_ctc", "w_ctc must be finite and >= 0");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every", "checkpoint_every must be >= 0");
    if (warmup_steps < 0) throw ConfigError("warmup_steps", "warmup_steps must be >= 0");
}

TrainConfig TrainConfig::read(KeyValueReader& r) {
    TrainConfig c;
    c.lr = r.get_double("lr", c.lr);
    c.beta1 = r.get_double("beta1", c.beta1);
    c.beta2 = r.get_double("beta2", c.beta2);
    c.weight_decay = r.get_double("weight_decay", c.weight_decay);
    c.eps = r.get_double("eps", c.eps);
    c.steps = r.get_int("steps", c.steps);
    c.batch_size = r.get_int("batch_size", c.batch_size);
    c.p_drop_text = r.get_double("p_drop_text", c.p_drop_text);
    c.p_drop_all = r.get_double("p_drop_all", c.p_drop_all);
    c.w_cl = r.get_double("w_cl", c.w_cl);
    c.w_ctc = r.get_double("w_ctc", c.w_ctc);
    c.seed = static_cast<std::uint64_t>(r.get_int64("seed", static_cast<long long>(c.seed)));
    c.checkpoint_every = r.get_int("checkpoint_every", c.checkpoint_every);
    c.warmup_steps = r.get_int("warmup_steps", c.warmup_steps);
    c.region_loss = r.get_bool("region_loss", c.region_loss);
    c.validate();
    return c;
}

KeyValues TrainConfig::to_key_values() const {
    return {
        {"lr", format_double(lr)},
        {"beta1", format_double(beta1)},
        {"beta2", format_double(beta2)},
        {"weight_decay", format_double(weight_decay)},
        {"eps", format_double(eps)},
        {"steps", std::to_string(steps)},
        {"batch_size", std::to_string(batch_size)},
        {"p_drop_text", format_double(p_drop_text)},
        {"p_drop_all", format_double(p_drop_all)},
        {"w_cl", format_double(w_cl)},
        {"w_ctc", format_double(w_ctc)},
        {"seed", std::to_string(seed)},
        {"checkpoint_every", std::to_string(checkpoint_every)},
        {"warmup_steps", std::to_string(warmup_steps)},
        {"region_loss", region_loss ? "true" : "false"},
    };
}

bool TrainConfig::same_trajectory(const TrainConfig& o) const {
    TrainConfig a = *this;
    a.steps = o.steps;
    a.checkpoint_every = o.checkpoint_every;
    return a == o;
}

TrainState TrainState::fresh(const nn::ParameterStore& params, const TrainConfig& cfg) {
    TrainState s;
    s.rng = nn::Rng(cfg.seed);
    for (const auto& p : params) {
        s.adam.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        s.adam.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
    return s;
}

ConditionBranch draw_branch(double u, double p_drop_text, double p_drop_all) {
    if (u < p_drop_all) return ConditionBranch::Unconditional;
    if (u < p_drop_all + p_drop_text) return ConditionBranch::AcousticOnly;
    return ConditionBranch::Full;
}

double learning_rate(const TrainConfig& cfg, int step) {
    if (cfg.warmup_steps <= 0 || step >= cfg.warmup_steps) return cfg.lr;
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

void adamw_update(nn::ParameterStore& params, AdamState& adam, const TrainConfig& cfg, int step) {
    if (adam.m.size() != params.size() || adam.v.size() != params.size()) {
        throw std::logic_error("adamw_update: optimizer state does not match parameters");
    }
    const double lr = learning_rate(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, step);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step);
    for (std::size_t i = 0; i < params.size(); ++i) {
        nn::Parameter& p = params[i];
        Matrix& m = adam.m[i];
        Matrix& v = adam.v[i];
        m *= cfg.beta1;
        v *= cfg.beta2;
        if (p.grad.size() != 0) {
            m += (1.0 - cfg.beta1) * p.grad;
            v += (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
        }
        p.value *= 1.0 - lr * cfg.weight_decay;
        p.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
    }
}

namespace {

struct Draw {
    std::size_t index = 0;
    conditioning::MaskSpec mask;
    ConditionBranch branch = ConditionBranch::Full;
    flow::FlowBatch flow;
};

std::string branch_summary(int full, int acoustic, int uncond) {
    return "full=" + std::to_string(full) + ";acoustic=" + std::to_string(acoustic) +
           ";uncond=" + std::to_string(uncond);
}

}  // namespace

LossReport train_step(CoSyncModel& model, TrainState& state, const TrainConfig& cfg,
                      const std::vector<data::UtteranceRecord>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("train_step: empty corpus");
    const int step = state.step + 1;

    // All randomness for the batch is drawn before any computation.
    std::vector<Draw> draws(static_cast<std::size_t>(cfg.batch_size));
    int counts[3] = {0, 0, 0};
    for (auto& d : draws) {
        d.index = static_cast<std::size_t>(state.rng.below(corpus.size()));
        const auto& rec = corpus[d.index];
        d.mask = conditioning::sample_mask(rec.frames(), state.rng);
        d.branch = draw_branch(state.rng.uniform(), cfg.p_drop_text, cfg.p_drop_all);
        const double t = state.rng.uniform();
        d.flow = flow::make_flow_batch(rec.mel, state.rng.normal_matrix(rec.mel.rows(), rec.mel.cols()), t);
        ++counts[static_cast<int>(d.branch)];
    }
    const int n_full = counts[static_cast<int>(ConditionBranch::Full)];
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);

    model.parameters().zero_grad();
    double sum_fm = 0.0, sum_cl = 0.0, sum_ctc = 0.0;
    for (const auto& d : draws) {
        const auto& rec = corpus[d.index];
        nn::Tape tape;
        const SampleLoss loss = model.sample_loss(tape, rec, d.mask, d.branch, d.flow, cfg.region_loss);
        auto check = [&](const char* name, double v) {
            if (!std::isfinite(v)) {
                throw NonFiniteLoss(rec.utt_id, std::string("non-finite ") + name + " at step " +
                                                    std::to_string(step) + " for utterance " + rec.utt_id +
                                                    " (branch " + flow::to_string(d.branch) +
                                                    ", t=" + format_double(d.flow.t) + ")");
            }
        };
        check("l_fm", loss.l_fm.scalar());
        Var objective = nn::scale(loss.l_fm, inv_b);
        sum_fm += loss.l_fm.scalar();
        if (loss.l_cl) {
            check("l_cl", loss.l_cl->scalar());
            sum_cl += loss.l_cl->scalar();
            objective = nn::add(objective, nn::scale(*loss.l_cl, cfg.w_cl / n_full));
        }
        if (loss.l_ctc) {
            check("l_ctc", loss.l_ctc->scalar());
            sum_ctc += loss.l_ctc->scalar();
            objective = nn::add(objective, nn::scale(*loss.l_ctc, cfg.w_ctc / n_full));
        }
        tape.backward(objective);
    }
    adamw_update(model.parameters(), state.adam, cfg, step);

    LossReport r;
    r.step = step;
    r.l_fm = sum_fm * inv_b;
    r.total = r.l_fm;
    if (n_full > 0) {
        r.l_cl = sum_cl / n_full;
        r.l_ctc = sum_ctc / n_full;
        r.total += cfg.w_cl * *r.l_cl + cfg.w_ctc * *r.l_ctc;
    }
    r.branch = branch_summary(counts[0], counts[1], counts[2]);
    state.step = step;
    state.history.push_back(r);
    return r;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'S', 'Y', 'N', 'C', 'K', 'P', '1'};

void put_optional(std::vector<std::uint8_t>& out, const std::optional<double>& v) {
    bytes::put_u8(out, v ? 1 : 0);
    bytes::put_f64(out, v.value_or(0.0));
}

std::optional<double> get_optional(bytes::Reader& r) {
    const std::uint8_t has = r.u8();
    const double v = r.f64();
    if (has > 1) throw CheckpointError(CheckpointError::Kind::Format, "checkpoint: bad optional flag");
    return has ? std::optional<double>(v) : std::nullopt;
}

const Matrix& as_matrix(const ArrayMap& arrays, const std::string& key) {
    auto it = arrays.find(key);
    if (it == arrays.end() || !std::holds_alternative<Matrix>(it->second)) {
        throw CheckpointError(CheckpointError::Kind::Format, "checkpoint: missing array " + key);
    }
    return std::get<Matrix>(it->second);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CoSyncModel& model, const TrainConfig& cfg,
                     const TrainState& state) {
    const auto& params = model.parameters();
    if (state.adam.m.size() != params.size()) throw std::logic_error("save_checkpoint: optimizer state mismatch");
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    bytes::put_u32(out, kCheckpointVersion);
    bytes::put_string(out, format_key_values(model.config().to_key_values()));
    bytes::put_string(out, format_key_values(cfg.to_key_values()));
    bytes::put_u64(out, static_cast<std::uint64_t>(state.step));
    bytes::put_string(out, state.rng.serialize());
    bytes::put_u32(out, static_cast<std::uint32_t>(state.history.size()));
    for (const auto& h : state.history) {
        bytes::put_u64(out, static_cast<std::uint64_t>(h.step));
        bytes::put_f64(out, h.l_fm);
        put_optional(out, h.l_cl);
        put_optional(out, h.l_ctc);
        bytes::put_f64(out, h.total);
        bytes::put_string(out, h.branch);
    }
    bytes::put_u32(out, static_cast<std::uint32_t>(params.size()));
    ArrayMap arrays;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        bytes::put_string(out, p.name);
        arrays["param/" + p.name] = p.value;
        arrays["adam_m/" + p.name] = state.adam.m[i];
        arrays["adam_v/" + p.name] = state.adam.v[i];
    }
    const auto blob = encode_arrays(arrays);
    bytes::put_u64(out, blob.size());
    out.insert(out.end(), blob.begin(), blob.end());
    bytes::put_u64(out, bytes::fnv1a(out.data(), out.size()));
    bytes::write_file_atomic(path, out);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::vector<std::uint8_t> data;
    try {
        data = bytes::read_file(path);
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: cannot read " + path.string() + ": " + e.what());
    }
    using Kind = CheckpointError::Kind;
    if (data.size() < sizeof kCheckpointMagic + 4 + 8 ||
        !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), data.begin())) {
        throw CheckpointError(Kind::Format, "checkpoint: " + path.string() + " is not a checkpoint file");
    }
    const std::size_t body = data.size() - 8;
    std::uint64_t stored = 0;
    for (int b = 7; b >= 0; --b) stored = (stored << 8) | data[body + static_cast<std::size_t>(b)];
    if (stored != bytes::fnv1a(data.data(), body)) throw CheckpointError(Kind::Format, "checkpoint: checksum mismatch");

    Checkpoint ck;
    try {
        bytes::Reader r(data, body);
        for (std::size_t i = 0; i < sizeof kCheckpointMagic; ++i) r.u8();
        const std::uint32_t version = r.u32();
        if (version != kCheckpointVersion) {
            throw CheckpointError(Kind::Version, "checkpoint: version " + std::to_string(version) +
                                                     " is not supported (expected " +
                                                     std::to_string(kCheckpointVersion) + ")");
        }
        KeyValueReader model_kv(parse_key_values(r.string(), "checkpoint model config"));
        ck.model = ModelConfig::read(model_kv);
        model_kv.reject_unknown();
        KeyValueReader train_kv(parse_key_values(r.string(), "checkpoint train config"));
        ck.train = TrainConfig::read(train_kv);
        train_kv.reject_unknown();
        ck.state.step = static_cast<int>(r.u64());
        ck.state.rng.deserialize(r.string());
        const std::uint32_t n_hist = r.u32();
        for (std::uint32_t i = 0; i < n_hist; ++i) {
            LossReport h;
            h.step = static_cast<int>(r.u64());
            h.l_fm = r.f64();
            h.l_cl = get_optional(r);
            h.l_ctc = get_optional(r);
            h.total = r.f64();
            h.branch = r.string();
            ck.state.history.push_back(std::move(h));
        }
        const std::uint32_t n_params = r.u32();
        std::vector<std::string> names(n_params);
        for (auto& n : names) n = r.string();
        const std::uint64_t blob_len = r.u64();
        if (blob_len != body - r.position()) throw CheckpointError(Kind::Format, "checkpoint: truncated array blob");
        const std::vector<std::uint8_t> blob(data.begin() + static_cast<std::ptrdiff_t>(r.position()),
                                             data.begin() + static_cast<std::ptrdiff_t>(body));
        const ArrayMap arrays = decode_arrays(blob);
        if (arrays.size() != 3 * names.size()) throw CheckpointError(Kind::Format, "checkpoint: unexpected arrays");
        for (const auto& n : names) {
            ck.params.emplace_back(n, as_matrix(arrays, "param/" + n));
            ck.state.adam.m.push_back(as_matrix(arrays, "adam_m/" + n));
            ck.state.adam.v.push_back(as_matrix(arrays, "adam_v/" + n));
        }
    } catch (const CheckpointError&) {
        throw;
    } catch (const ConfigError& e) {
        throw CheckpointError(Kind::Format, std::string("checkpoint: bad embedded config: ") + e.what());
    } catch (const std::exception& e) {
        throw CheckpointError(Kind::Format, std::string("checkpoint: ") + e.what());
    }
    return ck;
}

void restore_parameters(CoSyncModel& model, const Checkpoint& ckpt) {
    auto& params = model.parameters();
    using Kind = CheckpointError::Kind;
    if (!(model.config() == ckpt.model)) throw CheckpointError(Kind::Mismatch, "checkpoint: model config differs");
    if (params.size() != ckpt.params.size()) {
        throw CheckpointError(Kind::Mismatch, "checkpoint: parameter count " + std::to_string(ckpt.params.size()) +
                                                  " differs from model " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, value] = ckpt.params[i];
        if (params[i].name != name || params[i].value.rows() != value.rows() ||
            params[i].value.cols() != value.cols()) {
            throw CheckpointError(Kind::Mismatch, "checkpoint: parameter " + name + " does not match the model");
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value = ckpt.params[i].second;
}

std::unique_ptr<CoSyncModel> model_from_checkpoint(const Checkpoint& ckpt) {
    auto model = CoSyncModel::create(ckpt.model);
    restore_parameters(*model, ckpt);
    return model;
}

// ---- logging --------------------------------------------------------------

std::string format_loss_row(const LossReport& r) {
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::string row = std::to_string(r.step) + "," + num(r.l_fm) + ",";
    if (r.l_cl) row += num(*r.l_cl);
    row += ",";
    if (r.l_ctc) row += num(*r.l_ctc);
    row += "," + num(r.total) + "," + r.branch;
    return row;
}

void write_loss_csv(std::ostream& out, const std::vector<LossReport>& history) {
    out << kLossCsvHeader << '\n';
    for (const auto& r : history) out << format_loss_row(r) << '\n';
}

void run_training(CoSyncModel& model, TrainState& state, const TrainConfig& cfg,
                  const std::vector<data::UtteranceRecord>& corpus, const RunOptions& options) {
    std::filesystem::create_directories(options.out_dir);
    const auto csv_path = options.out_dir / "loss.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
    write_loss_csv(csv, state.history);
    csv.flush();
    while (state.step < cfg.steps) {
        const LossReport r = train_step(model, state, cfg, corpus);
        csv << format_loss_row(r) << '\n';
        csv.flush();
        if (options.on_step) options.on_step(r);
        if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0) {
            save_checkpoint(options.out_dir / ("ckpt_" + std::to_string(r.step) + ".ckpt"), model, cfg, state);
        }
    }
    save_checkpoint(options.out_dir / "final.ckpt", model, cfg, state);
}

// ---- evaluation -----------------------------------------------------------

double eval_flow_loss(const CoSyncModel& model, const std::vector<data::UtteranceRecord>& corpus,
                      std::uint64_t seed, int draws) {
    if (corpus.empty()) throw std::invalid_argument("eval_flow_loss: empty corpus");
    nn::Rng rng(seed);
    double total = 0.0;
    int n = 0;
    for (const auto& rec : corpus) {
        const auto mask = conditioning::target_mask(rec);
        const BundleValues bundle = model.condition(rec, mask);
        for (int k = 0; k < draws; ++k) {
            const double t = rng.uniform();
            const auto batch = flow::make_flow_batch(rec.mel, rng.normal_matrix(rec.mel.rows(), rec.mel.cols()), t);
            const Matrix v = model.field(bundle, batch.xt, t, ConditionBranch::Full);
            total += flow::cfm_loss(v, batch, mask);
            ++n;
        }
    }
    return total / n;
}

Matrix eval_noise(const data::UtteranceRecord& record, std::size_t index, std::uint64_t seed) {
    nn::Rng rng(seed + 0x9e3779b97f4a7c15ULL * (index + 1));
    return rng.normal_matrix(record.mel.rows(), record.mel.cols());
}

std::vector<metrics::EvalRow> evaluate(const CoSyncModel& model, const std::vector<data::UtteranceRecord>& corpus,
                                       const std::vector<int>& nfes, std::uint64_t seed,
                                       const flow::GuidanceSpec& guidance) {
    std::vector<metrics::EvalRow> rows;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& rec = corpus[i];
        const auto mask = conditioning::target_mask(rec);
        const Matrix x0 = eval_noise(rec, i, seed);
        const Matrix gt = flow::infill_extract(rec.mel, mask);
        for (int nfe : nfes) {
            const auto result = model.infill(rec, mask, nfe, guidance, x0);
            const Matrix gen = flow::infill_extract(result.mel, mask);
            rows.push_back({rec.utt_id, nfe, metrics::region_mse(result.mel, rec.mel, mask), metrics::sync_kl(gt, gen)});
        }
    }
    return rows;
}

double mean_metric(const std::vector<metrics::EvalRow>& rows, int nfe, double metrics::EvalRow::*field) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.nfe != nfe) continue;
        sum += r.*field;
        ++n;
    }
    if (n == 0) throw std::invalid_argument("mean_metric: no rows for nfe " + std::to_string(nfe));
    return sum / n;
}

ProbeReport overfit_probe(const std::vector<data::UtteranceRecord>& corpus, const ModelConfig& model_cfg,
                          const TrainConfig& train_cfg, const std::vector<int>& nfes) {
    if (corpus.empty() || corpus.size() > 64) throw std::invalid_argument("overfit_probe: corpus must hold 1..64 records");
    const auto start = std::chrono::steady_clock::now();
    auto model = CoSyncModel::create(model_cfg);
    ProbeReport report;
    report.parameter_count = model->parameters().scalar_count();
    const std::uint64_t eval_seed = train_cfg.seed + 1;
    report.initial_loss = eval_flow_loss(*model, corpus, eval_seed);
    report.untrained = evaluate(*model, corpus, nfes, eval_seed);
    TrainState state = TrainState::fresh(model->parameters(), train_cfg);
    while (state.step < train_cfg.steps) train_step(*model, state, train_cfg, corpus);
    report.final_loss = eval_flow_loss(*model, corpus, eval_seed);
    report.trained = evaluate(*model, corpus, nfes, eval_seed);
    report.history = std::move(state.history);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace cosync::train
