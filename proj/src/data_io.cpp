#include "cosync/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "cosync/array_file.hpp"
#include "cosync/nn/rng.hpp"

namespace cosync::data {

const char* to_string(RecordErrorCode code) {
    switch (code) {
        case RecordErrorCode::Io: return "io";
        case RecordErrorCode::BadFormat: return "bad-format";
        case RecordErrorCode::MissingArray: return "missing-array";
        case RecordErrorCode::UnexpectedArray: return "unexpected-array";
        case RecordErrorCode::ShapeMismatch: return "shape-mismatch";
        case RecordErrorCode::NonFinite: return "non-finite";
        case RecordErrorCode::InvariantViolation: return "invariant-violation";
        case RecordErrorCode::BadMetadata: return "bad-metadata";
    }
    return "unknown";
}

bool UtteranceRecord::operator==(const UtteranceRecord& o) const {
    auto same = [](const Matrix& a, const Matrix& b) {
        return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
    };
    return same(mel, o.mel) && same(lip_raw, o.lip_raw) && text_ids == o.text_ids && same(align_feat, o.align_feat) &&
           ref_len == o.ref_len && utt_id == o.utt_id && sample_rate_hint == o.sample_rate_hint;
}

void validate(const UtteranceRecord& r) {
    using C = RecordErrorCode;
    const Eigen::Index frames = r.mel.cols();
    if (r.mel.rows() == 0 || frames < 1) throw RecordError(C::ShapeMismatch, "mel must be [F x L] with F, L >= 1");
    if (r.lip_raw.rows() == 0 || r.lip_raw.cols() < 1) throw RecordError(C::ShapeMismatch, "lip_raw must be non-empty");
    if (r.lip_raw.cols() > frames) {
        throw RecordError(C::ShapeMismatch, "lip_raw has more video frames than mel frames");
    }
    if (r.align_feat.rows() == 0 || r.align_feat.cols() != frames) {
        throw RecordError(C::ShapeMismatch, "align_feat must be [D_a x L] matching mel length");
    }
    if (!r.mel.allFinite()) throw RecordError(C::NonFinite, "mel contains non-finite values");
    if (!r.lip_raw.allFinite()) throw RecordError(C::NonFinite, "lip_raw contains non-finite values");
    if (!r.align_feat.allFinite()) throw RecordError(C::NonFinite, "align_feat contains non-finite values");
    if (r.text_ids.empty()) throw RecordError(C::InvariantViolation, "text_ids is empty");
    if (std::any_of(r.text_ids.begin(), r.text_ids.end(), [](int id) { return id < 0; })) {
        throw RecordError(C::InvariantViolation, "text_ids contains negative id");
    }
    if (r.ref_len < 0 || r.ref_len >= frames) {
        throw RecordError(C::InvariantViolation,
                          "ref_len " + std::to_string(r.ref_len) + " outside [0, " + std::to_string(frames) + ")");
    }
}

std::filesystem::path metadata_path(const std::filesystem::path& record_path) {
    std::filesystem::path p = record_path;
    p += ".meta";
    return p;
}

void save_record(const UtteranceRecord& record, const std::filesystem::path& path) {
    validate(record);
    ArrayMap arrays;
    arrays.emplace("mel", record.mel);
    arrays.emplace("lip_raw", record.lip_raw);
    arrays.emplace("align_feat", record.align_feat);
    arrays.emplace("text_ids", std::vector<std::int64_t>(record.text_ids.begin(), record.text_ids.end()));
    KeyValues meta{{"ref_len", std::to_string(record.ref_len)},
                   {"utt_id", record.utt_id},
                   {"sample_rate_hint", format_double(record.sample_rate_hint)}};
    try {
        write_arrays(path, arrays);
        write_key_values(metadata_path(path), meta);
    } catch (const std::exception& e) {
        throw RecordError(RecordErrorCode::Io, e.what());
    }
}

UtteranceRecord load_record(const std::filesystem::path& path) {
    using C = RecordErrorCode;
    ArrayMap arrays;
    try {
        arrays = read_arrays(path);
    } catch (const ArrayFileError& e) {
        throw RecordError(e.kind() == ArrayFileError::Kind::Io ? C::Io : C::BadFormat, e.what());
    }
    static const char* kRequired[] = {"mel", "lip_raw", "text_ids", "align_feat"};
    for (const char* name : kRequired) {
        if (arrays.count(name) == 0) throw RecordError(C::MissingArray, std::string("array '") + name + "' missing");
    }
    for (const auto& [name, v] : arrays) {
        if (std::find_if(std::begin(kRequired), std::end(kRequired), [&](const char* n) { return name == n; }) ==
            std::end(kRequired)) {
            throw RecordError(C::UnexpectedArray, "array '" + name + "' is not part of the record schema");
        }
    }
    auto matrix = [&](const char* name) -> Matrix {
        const auto* m = std::get_if<Matrix>(&arrays.at(name));
        if (m == nullptr) throw RecordError(C::ShapeMismatch, std::string("array '") + name + "' must be a 2-D float64");
        return *m;
    };
    UtteranceRecord r;
    r.mel = matrix("mel");
    r.lip_raw = matrix("lip_raw");
    r.align_feat = matrix("align_feat");
    const auto* ids = std::get_if<std::vector<std::int64_t>>(&arrays.at("text_ids"));
    if (ids == nullptr) throw RecordError(C::ShapeMismatch, "array 'text_ids' must be a 1-D int64");
    for (std::int64_t id : *ids) {
        if (id < 0 || id > INT32_MAX) throw RecordError(C::InvariantViolation, "text id out of range");
        r.text_ids.push_back(static_cast<int>(id));
    }

    KeyValues meta;
    try {
        meta = read_key_values(metadata_path(path));
    } catch (const ConfigError& e) {
        throw RecordError(C::BadMetadata, e.what());
    }
    try {
        KeyValueReader kv(meta);
        if (!kv.has("ref_len") || !kv.has("utt_id")) throw ConfigError("ref_len", "metadata requires ref_len and utt_id");
        r.ref_len = kv.get_int("ref_len", 0);
        r.utt_id = kv.get_string("utt_id", "");
        r.sample_rate_hint = kv.get_double("sample_rate_hint", 0.0);
        kv.reject_unknown();
    } catch (const ConfigError& e) {
        throw RecordError(C::BadMetadata, e.what());
    }
    validate(r);
    return r;
}

std::vector<std::filesystem::path> list_records(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw RecordError(RecordErrorCode::Io, "not a directory: " + dir.string());
    }
    std::vector<std::filesystem::path> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".rec") out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<UtteranceRecord> load_corpus(const std::filesystem::path& dir) {
    std::vector<UtteranceRecord> out;
    for (const auto& p : list_records(dir)) out.push_back(load_record(p));
    return out;
}

// ---- synthetic corpus -----------------------------------------------------

void SyntheticTaskSpec::validate() const {
    auto positive = [](const char* field, long long v) {
        if (v <= 0) throw ConfigError(field, std::string("SyntheticTaskSpec.") + field + " must be positive");
    };
    positive("vocab_size", vocab_size);
    positive("n_utterances", n_utterances);
    positive("frames_per_token", frames_per_token);
    positive("mel_bins", mel_bins);
    positive("visual_dim", visual_dim);
    positive("align_dim", align_dim);
    positive("min_tokens", min_tokens);
    positive("max_tokens", max_tokens);
    positive("video_stride", video_stride);
    if (max_tokens < min_tokens) throw ConfigError("max_tokens", "SyntheticTaskSpec.max_tokens must be >= min_tokens");
    if (frames_per_token % video_stride != 0) {
        throw ConfigError("video_stride", "SyntheticTaskSpec.video_stride must divide frames_per_token");
    }
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
        throw ConfigError("noise_std", "SyntheticTaskSpec.noise_std must be finite and >= 0");
    }
}

SyntheticTaskSpec SyntheticTaskSpec::from_key_values(const KeyValues& kv) {
    KeyValueReader r(kv);
    SyntheticTaskSpec s;
    s.vocab_size = r.get_int("vocab_size", s.vocab_size);
    s.n_utterances = r.get_int("n_utterances", s.n_utterances);
    s.frames_per_token = r.get_int("frames_per_token", s.frames_per_token);
    s.mel_bins = r.get_int("mel_bins", s.mel_bins);
    s.visual_dim = r.get_int("visual_dim", s.visual_dim);
    s.align_dim = r.get_int("align_dim", s.align_dim);
    const long long seed = r.get_int64("seed", 0);
    if (seed < 0) throw ConfigError("seed", "SyntheticTaskSpec.seed must be non-negative");
    s.seed = static_cast<std::uint64_t>(seed);
    s.min_tokens = r.get_int("min_tokens", s.min_tokens);
    s.max_tokens = r.get_int("max_tokens", s.max_tokens);
    s.video_stride = r.get_int("video_stride", s.video_stride);
    s.noise_std = r.get_double("noise_std", s.noise_std);
    r.reject_unknown();
    s.validate();
    return s;
}

KeyValues SyntheticTaskSpec::to_key_values() const {
    return {{"vocab_size", std::to_string(vocab_size)},
            {"n_utterances", std::to_string(n_utterances)},
            {"frames_per_token", std::to_string(frames_per_token)},
            {"mel_bins", std::to_string(mel_bins)},
            {"visual_dim", std::to_string(visual_dim)},
            {"align_dim", std::to_string(align_dim)},
            {"seed", std::to_string(seed)},
            {"min_tokens", std::to_string(min_tokens)},
            {"max_tokens", std::to_string(max_tokens)},
            {"video_stride", std::to_string(video_stride)},
            {"noise_std", format_double(noise_std)}};
}

TokenTemplates make_templates(const SyntheticTaskSpec& spec) {
    spec.validate();
    nn::Rng rng(spec.seed);
    TokenTemplates t;
    t.mel.resize(spec.mel_bins, spec.vocab_size);
    for (int k = 0; k < spec.vocab_size; ++k) {
        // Every third token is quiet so that utterances contain silences
        // for the duration statistics.
        const double loudness = (k % 3 == 0) ? rng.uniform(0.05, 0.15) : rng.uniform(0.5, 1.0);
        for (int f = 0; f < spec.mel_bins; ++f) t.mel(f, k) = loudness * rng.uniform();
    }
    t.lip = rng.normal_matrix(spec.visual_dim, spec.vocab_size);
    if (spec.vocab_size <= spec.align_dim) {
        t.align = Matrix::Zero(spec.align_dim, spec.vocab_size);
        for (int k = 0; k < spec.vocab_size; ++k) t.align(k, k) = 1.0;
    } else {
        t.align = rng.normal_matrix(spec.align_dim, spec.vocab_size);
        t.align.colwise().normalize();
    }
    return t;
}

std::vector<UtteranceRecord> generate_synthetic_corpus(const SyntheticTaskSpec& spec) {
    const TokenTemplates templates = make_templates(spec);
    // Utterance draws use a stream distinct from the template stream.
    nn::Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<UtteranceRecord> corpus;
    corpus.reserve(static_cast<std::size_t>(spec.n_utterances));
    for (int u = 0; u < spec.n_utterances; ++u) {
        UtteranceRecord r;
        const int n_tokens =
            spec.min_tokens + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_tokens - spec.min_tokens + 1)));
        for (int i = 0; i < n_tokens; ++i) {
            r.text_ids.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.vocab_size))));
        }
        const Eigen::Index frames = static_cast<Eigen::Index>(n_tokens) * spec.frames_per_token;
        r.mel.resize(spec.mel_bins, frames);
        r.align_feat.resize(spec.align_dim, frames);
        for (Eigen::Index i = 0; i < frames; ++i) {
            const int tok = r.text_ids[static_cast<std::size_t>(token_at_frame(i, spec.frames_per_token))];
            r.mel.col(i) = templates.mel.col(tok);
            r.align_feat.col(i) = templates.align.col(tok);
        }
        if (spec.noise_std > 0.0) r.mel += rng.normal_matrix(spec.mel_bins, frames, spec.noise_std);

        const Eigen::Index video_frames = frames / spec.video_stride;
        r.lip_raw.resize(spec.visual_dim, video_frames);
        for (Eigen::Index j = 0; j < video_frames; ++j) {
            const int tok = r.text_ids[static_cast<std::size_t>(token_at_frame(j * spec.video_stride, spec.frames_per_token))];
            r.lip_raw.col(j) = templates.lip.col(tok);
        }
        r.ref_len = spec.frames_per_token * (n_tokens / 4);
        char id[32];
        std::snprintf(id, sizeof(id), "utt_%04d", u);
        r.utt_id = id;
        r.sample_rate_hint = 24000.0;
        corpus.push_back(std::move(r));
    }
    return corpus;
}

}  // namespace cosync::data
