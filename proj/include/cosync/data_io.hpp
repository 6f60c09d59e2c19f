#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cosync/config.hpp"

namespace cosync::data {

using Matrix = Eigen::MatrixXd;

/// One utterance: target mel, raw lip features, script tokens and per-frame
/// alignment features (stand-in for a pretrained audio-visual encoder).
struct UtteranceRecord {
    Matrix mel;                 // [F x L]
    Matrix lip_raw;             // [D_v x L_v], L_v <= L
    std::vector<int> text_ids;  // [T], ids in [0, V)
    Matrix align_feat;          // [D_a x L]
    int ref_len = 0;            // frames of reference prefix, in [0, L)
    std::string utt_id;
    double sample_rate_hint = 0.0;

    Eigen::Index frames() const { return mel.cols(); }
    bool operator==(const UtteranceRecord&) const;
};

enum class RecordErrorCode {
    Io,
    BadFormat,
    MissingArray,
    UnexpectedArray,
    ShapeMismatch,
    NonFinite,
    InvariantViolation,
    BadMetadata,
};

const char* to_string(RecordErrorCode code);

class RecordError : public std::runtime_error {
public:
    RecordError(RecordErrorCode code, const std::string& msg)
        : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code) {}
    RecordErrorCode code() const { return code_; }

private:
    RecordErrorCode code_;
};

// Throws RecordError for any violated record invariant.
void validate(const UtteranceRecord& record);

/// Writes `path` (array container with mel, lip_raw, text_ids, align_feat)
/// plus the sidecar `path.meta` (ref_len, utt_id, sample_rate_hint).
void save_record(const UtteranceRecord& record, const std::filesystem::path& path);
UtteranceRecord load_record(const std::filesystem::path& path);

std::filesystem::path metadata_path(const std::filesystem::path& record_path);

// All `*.rec` files in `dir`, sorted by file name.
std::vector<std::filesystem::path> list_records(const std::filesystem::path& dir);
std::vector<UtteranceRecord> load_corpus(const std::filesystem::path& dir);

struct SyntheticTaskSpec {
    int vocab_size = 8;
    int n_utterances = 16;
    int frames_per_token = 8;
    int mel_bins = 100;
    int visual_dim = 64;
    int align_dim = 32;
    std::uint64_t seed = 0;
    int min_tokens = 4;
    int max_tokens = 6;
    int video_stride = 2;       // mel frames per video frame
    double noise_std = 0.01;    // additive mel noise

    void validate() const;     // throws ConfigError naming the field
    static SyntheticTaskSpec from_key_values(const KeyValues& kv);
    KeyValues to_key_values() const;
};

/// Per-token renderings shared by every utterance of a corpus.
struct TokenTemplates {
    Matrix mel;    // [F x V], entries in [0, 1]
    Matrix lip;    // [D_v x V]
    Matrix align;  // [D_a x V]
};

TokenTemplates make_templates(const SyntheticTaskSpec& spec);

std::vector<UtteranceRecord> generate_synthetic_corpus(const SyntheticTaskSpec& spec);

// Mel frame i -> token index under the synthetic rendering.
inline int token_at_frame(Eigen::Index frame, int frames_per_token) {
    return static_cast<int>(frame / frames_per_token);
}

}  // namespace cosync::data
