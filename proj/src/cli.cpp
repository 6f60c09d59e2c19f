#include "cosync/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>

#include "cosync/array_file.hpp"
#include "cosync/data_io.hpp"
#include "cosync/metrics.hpp"
#include "cosync/trainer.hpp"
#include "cosync/verify.hpp"

namespace cosync::cli {

namespace fs = std::filesystem;

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, const char* env_value, std::uint64_t config_value) {
    if (flag) return *flag;
    if (env_value != nullptr && *env_value != '\0') {
        const std::string s(env_value);
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != s.size() || s.front() == '-') {
            throw ConfigError(kSeedEnv, std::string(kSeedEnv) + " must be a non-negative integer, got '" + s + "'");
        }
        return v;
    }
    return config_value;
}

namespace {

class Artifact : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void echo(std::ostream& out, const std::string& title, const KeyValues& kv) {
    out << "# " << title << "\n" << format_key_values(kv);
}

std::uint64_t seed_for(const std::optional<std::uint64_t>& flag, std::uint64_t config_value) {
    return resolve_seed(flag, std::getenv(kSeedEnv), config_value);
}

void require_dir(const fs::path& dir, const char* flag) {
    if (!fs::is_directory(dir)) throw ConfigError(flag, std::string(flag) + ": not a directory: " + dir.string());
}

int cmd_gen_data(const fs::path& spec_path, const fs::path& out_dir, std::optional<std::uint64_t> seed_flag,
                 std::ostream& out) {
    KeyValues kv = read_key_values(spec_path);
    auto spec = data::SyntheticTaskSpec::from_key_values(kv);
    spec.seed = seed_for(seed_flag, spec.seed);
    spec.validate();
    echo(out, "gen-data", spec.to_key_values());
    fs::create_directories(out_dir);
    const auto corpus = data::generate_synthetic_corpus(spec);
    for (const auto& rec : corpus) data::save_record(rec, out_dir / (rec.utt_id + ".rec"));
    write_key_values(out_dir / "spec.resolved", spec.to_key_values());
    out << "wrote " << corpus.size() << " records to " << out_dir.string() << "\n";
    return kOk;
}

int cmd_train(const fs::path& config_path, const fs::path& data_dir, const fs::path& out_dir,
              const std::optional<fs::path>& resume, std::optional<std::uint64_t> seed_flag, std::ostream& out) {
    KeyValueReader reader(read_key_values(config_path));
    const ModelConfig model_cfg = ModelConfig::read(reader);
    train::TrainConfig cfg = train::TrainConfig::read(reader);
    reader.reject_unknown();
    cfg.seed = seed_for(seed_flag, cfg.seed);
    require_dir(data_dir, "--data");

    KeyValues resolved = model_cfg.to_key_values();
    for (const auto& [k, v] : cfg.to_key_values()) resolved[k] = v;
    echo(out, "train", resolved);
    out << "# data=" << data_dir.string() << " out=" << out_dir.string() << "\n";

    const auto corpus = data::load_corpus(data_dir);
    if (corpus.empty()) throw ConfigError("--data", "--data: no records in " + data_dir.string());
    for (const auto& rec : corpus) {
        if (const auto why = record_mismatch(model_cfg, rec, true); !why.empty()) throw Artifact(why);
    }

    std::unique_ptr<CoSyncModel> model;
    train::TrainState state;
    if (resume) {
        const auto ckpt = train::read_checkpoint(*resume);
        if (!(ckpt.model == model_cfg)) throw Artifact("checkpoint model config differs from " + config_path.string());
        if (!ckpt.train.same_trajectory(cfg)) {
            throw Artifact("checkpoint training config differs from " + config_path.string());
        }
        model = train::model_from_checkpoint(ckpt);
        state = ckpt.state;
        out << "# resumed from " << resume->string() << " at step " << state.step << "\n";
    } else {
        model = CoSyncModel::create(model_cfg);
        state = train::TrainState::fresh(model->parameters(), cfg);
    }
    out << "# parameters=" << model->parameters().scalar_count() << "\n";

    fs::create_directories(out_dir);
    write_key_values(out_dir / "config.resolved", resolved);
    train::RunOptions opts;
    opts.out_dir = out_dir;
    const int every = std::max(1, cfg.steps / 20);
    opts.on_step = [&](const train::LossReport& r) {
        if (r.step % every == 0 || r.step == cfg.steps) out << train::format_loss_row(r) << "\n";
    };
    train::run_training(*model, state, cfg, corpus, opts);
    out << "done: " << state.step << " steps, checkpoint " << (out_dir / "final.ckpt").string() << "\n";
    return kOk;
}

struct InferArgs {
    fs::path checkpoint, record, out;
    int nfe = 32;
    double lambda_a = 0.0, lambda_s = 0.0;
    std::optional<std::uint64_t> seed;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
    const std::uint64_t seed = seed_for(a.seed, 0);
    const flow::GuidanceSpec guidance{a.lambda_a, a.lambda_s};
    try {
        guidance.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("--lambda-a", e.what());
    }
    if (a.nfe < 1) throw ConfigError("--nfe", "--nfe must be >= 1");
    echo(out, "infer", {{"checkpoint", a.checkpoint.string()},
                        {"record", a.record.string()},
                        {"out", a.out.string()},
                        {"nfe", std::to_string(a.nfe)},
                        {"lambda_a", format_double(a.lambda_a)},
                        {"lambda_s", format_double(a.lambda_s)},
                        {"seed", std::to_string(seed)}});

    const auto ckpt = train::read_checkpoint(a.checkpoint);
    auto model = train::model_from_checkpoint(ckpt);
    data::UtteranceRecord rec = data::load_record(a.record);
    const auto& mc = model->config();
    if (const auto why = record_mismatch(mc, rec, false); !why.empty()) throw Artifact(why + " (" + a.record.string() + ")");

    const auto mask = conditioning::target_mask(rec);
    nn::Rng rng(seed);
    const Matrix x0 = rng.normal_matrix(rec.mel.rows(), rec.mel.cols());
    const auto result = model->infill(rec, mask, a.nfe, guidance, x0);

    data::UtteranceRecord gen = rec;
    gen.mel = result.mel;
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    data::save_record(gen, a.out);
    fs::path target_path = a.out;
    target_path += ".target";
    write_arrays(target_path, {{"mel_target", flow::infill_extract(result.mel, mask)},
                               {"mask", std::vector<std::int64_t>{mask.start, mask.end}}});
    out << "evaluations=" << result.evaluations << "\n";
    out << "wrote " << a.out.string() << " and " << target_path.string() << "\n";
    return kOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_csv, std::vector<int> nfes,
             double lambda_a, double lambda_s, std::optional<std::uint64_t> seed_flag, std::ostream& out) {
    const std::uint64_t seed = seed_for(seed_flag, 0);
    require_dir(data_dir, "--data");
    if (nfes.empty()) nfes = {8, 16, 32};
    for (int n : nfes) {
        if (n < 1) throw ConfigError("--nfe", "--nfe values must be >= 1");
    }
    const flow::GuidanceSpec guidance{lambda_a, lambda_s};
    try {
        guidance.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("--lambda-a", e.what());
    }
    std::string nfe_list;
    for (int n : nfes) nfe_list += (nfe_list.empty() ? "" : ",") + std::to_string(n);
    echo(out, "eval", {{"checkpoint", checkpoint.string()},
                       {"data", data_dir.string()},
                       {"out", out_csv.string()},
                       {"nfe", nfe_list},
                       {"lambda_a", format_double(lambda_a)},
                       {"lambda_s", format_double(lambda_s)},
                       {"seed", std::to_string(seed)}});
    const auto ckpt = train::read_checkpoint(checkpoint);
    auto model = train::model_from_checkpoint(ckpt);
    const auto corpus = data::load_corpus(data_dir);
    for (const auto& rec : corpus) {
        if (const auto why = record_mismatch(model->config(), rec, false); !why.empty()) throw Artifact(why);
    }
    const auto rows = train::evaluate(*model, corpus, nfes, seed, guidance);
    if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
    std::ofstream csv(out_csv, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + out_csv.string());
    metrics::write_eval_csv(csv, rows);
    for (int n : nfes) {
        out << "nfe=" << n << " region_mse=" << format_double(train::mean_metric(rows, n, &metrics::EvalRow::region_mse))
            << " sync_kl=" << format_double(train::mean_metric(rows, n, &metrics::EvalRow::sync_kl)) << "\n";
    }
    return kOk;
}

int cmd_verify(const std::string& fault, std::ostream& out, std::ostream& err) {
    const auto results = verify::run_all(verify::parse_fault(fault));
    verify::print_table(out, results);
    std::vector<std::string> failed;
    for (const auto& r : results) {
        if (!r.passed) failed.push_back(r.name);
    }
    out << results.size() - failed.size() << "/" << results.size() << " checks passed\n";
    if (failed.empty()) return kOk;
    err << "failed:";
    for (const auto& n : failed) err << " " << n;
    err << "\n";
    return kVerifyFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Flow-matching dubbing toolkit", "cosync"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    fs::path spec_path, out_path, config_path, data_dir, checkpoint, record;
    std::optional<fs::path> resume;
    InferArgs infer;
    std::vector<int> nfes;
    double lambda_a = 0.0, lambda_s = 0.0;
    std::string fault;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
    gen->add_option("--spec", spec_path, "Task spec (key=value)")->required();
    gen->add_option("--out", out_path, "Output directory")->required();
    gen->add_option("--seed", seed, "Corpus seed");

    auto* tr = app.add_subcommand("train", "Train a model");
    tr->add_option("--config", config_path, "Model and training config (key=value)")->required();
    tr->add_option("--data", data_dir, "Record directory")->required();
    tr->add_option("--out", out_path, "Output directory")->required();
    tr->add_option("--resume", resume, "Checkpoint to resume from");
    tr->add_option("--seed", seed, "Training seed");

    auto* inf = app.add_subcommand("infer", "Generate the target span of one record");
    inf->add_option("--checkpoint", infer.checkpoint)->required();
    inf->add_option("--record", infer.record)->required();
    inf->add_option("--nfe", infer.nfe, "Solver steps")->capture_default_str();
    inf->add_option("--lambda-a", infer.lambda_a, "Acoustic guidance scale")->capture_default_str();
    inf->add_option("--lambda-s", infer.lambda_s, "Semantic guidance scale")->capture_default_str();
    inf->add_option("--seed", infer.seed, "Noise seed");
    inf->add_option("--out", infer.out, "Output record path")->required();

    auto* ev = app.add_subcommand("eval", "Score sampled target spans of a corpus");
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--data", data_dir)->required();
    ev->add_option("--out", out_path, "CSV path")->required();
    ev->add_option("--nfe", nfes, "Solver steps (repeatable)")->delimiter(',');
    ev->add_option("--lambda-a", lambda_a)->capture_default_str();
    ev->add_option("--lambda-s", lambda_s)->capture_default_str();
    ev->add_option("--seed", seed, "Noise seed");

    auto* vf = app.add_subcommand("verify", "Run the embedded invariant suite");
    vf->add_option("--inject-fault", fault, "Test hook: none or lip-gate");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name());
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(spec_path, out_path, seed, out);
        if (tr->parsed()) return cmd_train(config_path, data_dir, out_path, resume, seed, out);
        if (inf->parsed()) {
            infer.seed = infer.seed ? infer.seed : seed;
            return cmd_infer(infer, out);
        }
        if (ev->parsed()) return cmd_eval(checkpoint, data_dir, out_path, nfes, lambda_a, lambda_s, seed, out);
        if (vf->parsed()) return cmd_verify(fault, out, err);
    } catch (const ConfigError& e) {
        err << "config error [" << e.key() << "]: " << e.what() << "\n";
        return kConfigError;
    } catch (const train::CheckpointError& e) {
        err << "artifact error: " << e.what() << "\n";
        return kArtifactMismatch;
    } catch (const data::RecordError& e) {
        err << "artifact error: " << e.what() << "\n";
        return kArtifactMismatch;
    } catch (const ArrayFileError& e) {
        err << "artifact error: " << e.what() << "\n";
        return kArtifactMismatch;
    } catch (const Artifact& e) {
        err << "artifact error: " << e.what() << "\n";
        return kArtifactMismatch;
    } catch (const train::NonFiniteLoss& e) {
        err << "abort: " << e.what() << " [utt_id=" << e.utt_id() << "]\n";
        return kRuntimeAbort;
    } catch (const std::invalid_argument& e) {
        if (vf->parsed()) {
            err << "config error [--inject-fault]: " << e.what() << "\n";
            return kConfigError;
        }
        err << "abort: " << e.what() << "\n";
        return kRuntimeAbort;
    } catch (const std::exception& e) {
        err << "abort: " << e.what() << "\n";
        return kRuntimeAbort;
    }
    return kConfigError;
}

}  // namespace cosync::cli
