#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "cosync/array_file.hpp"
#include "cosync/data_io.hpp"
#include "test_util.hpp"

using namespace cosync;
using data::RecordError;
using data::Matrix;
using data::RecordErrorCode;

namespace {

data::SyntheticTaskSpec small_spec(std::uint64_t seed = 7) {
    data::SyntheticTaskSpec s;
    s.n_utterances = 4;
    s.mel_bins = 12;
    s.visual_dim = 6;
    s.align_dim = 10;
    s.seed = seed;
    return s;
}

RecordErrorCode load_error(const std::filesystem::path& p) {
    try {
        data::load_record(p);
    } catch (const RecordError& e) {
        return e.code();
    }
    FAIL("record was accepted");
    return RecordErrorCode::Io;
}

}  // namespace

TEST_CASE("synthetic corpus is a pure function of the spec") {
    const auto a = data::generate_synthetic_corpus(small_spec(7));
    const auto b = data::generate_synthetic_corpus(small_spec(7));
    REQUIRE(a.size() == 4);
    CHECK(a == b);

    testutil::TempDir dir;
    for (std::size_t i = 0; i < a.size(); ++i) {
        data::save_record(a[i], dir.path / "a.rec");
        data::save_record(b[i], dir.path / "b.rec");
        CHECK(bytes::read_file(dir.path / "a.rec") == bytes::read_file(dir.path / "b.rec"));
    }
    CHECK_FALSE(a == data::generate_synthetic_corpus(small_spec(8)));
}

TEST_CASE("three tokens of four frames give three constant segments") {
    data::SyntheticTaskSpec s = small_spec();
    s.vocab_size = 2;
    s.frames_per_token = 4;
    s.n_utterances = 1;
    s.min_tokens = s.max_tokens = 3;
    s.noise_std = 0.0;
    const auto rec = data::generate_synthetic_corpus(s).at(0);
    REQUIRE(rec.frames() == 12);
    for (int seg = 0; seg < 3; ++seg) {
        for (int i = 1; i < 4; ++i) CHECK(rec.mel.col(seg * 4 + i) == rec.mel.col(seg * 4));
    }
}

TEST_CASE("align_feat frames match exactly when their tokens match") {
    data::SyntheticTaskSpec s = small_spec(3);
    s.noise_std = 0.0;
    for (const auto& rec : data::generate_synthetic_corpus(s)) {
        for (Eigen::Index i = 0; i < rec.frames(); ++i) {
            for (Eigen::Index j = 0; j < rec.frames(); ++j) {
                const int ti = rec.text_ids[static_cast<std::size_t>(i / s.frames_per_token)];
                const int tj = rec.text_ids[static_cast<std::size_t>(j / s.frames_per_token)];
                CHECK((rec.align_feat.col(i) == rec.align_feat.col(j)) == (ti == tj));
            }
        }
    }
}

TEST_CASE("token sequence can be recovered from each modality") {
    data::SyntheticTaskSpec s = small_spec(11);
    s.noise_std = 0.0;
    const auto templates = data::make_templates(s);
    auto nearest = [](const Matrix& table, const Eigen::VectorXd& v) {
        Eigen::Index best = 0;
        (table.colwise() - v).colwise().squaredNorm().minCoeff(&best);
        return static_cast<int>(best);
    };
    for (const auto& rec : data::generate_synthetic_corpus(s)) {
        for (Eigen::Index i = 0; i < rec.frames(); ++i) {
            const int tok = rec.text_ids[static_cast<std::size_t>(i / s.frames_per_token)];
            CHECK(nearest(templates.mel, rec.mel.col(i)) == tok);
            CHECK(nearest(templates.align, rec.align_feat.col(i)) == tok);
        }
        CHECK(rec.lip_raw.cols() <= rec.frames());
        for (Eigen::Index j = 0; j < rec.lip_raw.cols(); ++j) {
            const int tok = rec.text_ids[static_cast<std::size_t>(j * s.video_stride / s.frames_per_token)];
            CHECK(nearest(templates.lip, rec.lip_raw.col(j)) == tok);
        }
    }
}

TEST_CASE("spec validation names the field") {
    auto s = small_spec();
    s.frames_per_token = 0;
    try {
        s.validate();
        FAIL("accepted");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "frames_per_token");
    }
    const auto kv = small_spec().to_key_values();
    CHECK(data::SyntheticTaskSpec::from_key_values(kv).to_key_values() == kv);
    auto bad = kv;
    bad["colour"] = "blue";
    CHECK_THROWS_AS(data::SyntheticTaskSpec::from_key_values(bad), ConfigError);
}

TEST_CASE("record round trip and rejection") {
    testutil::TempDir dir;
    auto rec = data::generate_synthetic_corpus(small_spec()).at(1);
    rec.ref_len = 3;
    const auto path = dir.path / "r.rec";
    data::save_record(rec, path);
    CHECK(data::load_record(path) == rec);

    SUBCASE("NaN in mel") {
        auto arrays = read_arrays(path);
        std::get<Matrix>(arrays["mel"])(0, 2) = std::numeric_limits<double>::quiet_NaN();
        write_arrays(path, arrays);
        CHECK(load_error(path) == RecordErrorCode::NonFinite);
    }
    SUBCASE("ref_len equal to L") {
        auto bad = rec;
        bad.ref_len = static_cast<int>(rec.frames());
        CHECK_THROWS_AS(data::validate(bad), RecordError);
        auto meta = read_key_values(data::metadata_path(path));
        meta["ref_len"] = std::to_string(rec.frames());
        write_key_values(data::metadata_path(path), meta);
        CHECK(load_error(path) == RecordErrorCode::InvariantViolation);
    }
    SUBCASE("missing array") {
        auto arrays = read_arrays(path);
        arrays.erase("align_feat");
        write_arrays(path, arrays);
        CHECK(load_error(path) == RecordErrorCode::MissingArray);
    }
    SUBCASE("extra array") {
        auto arrays = read_arrays(path);
        arrays["extra"] = Matrix::Zero(1, 1);
        write_arrays(path, arrays);
        CHECK(load_error(path) == RecordErrorCode::UnexpectedArray);
    }
    SUBCASE("shape mismatch") {
        auto arrays = read_arrays(path);
        arrays["align_feat"] = Matrix::Zero(10, rec.frames() + 1);
        write_arrays(path, arrays);
        CHECK(load_error(path) == RecordErrorCode::ShapeMismatch);
    }
    SUBCASE("video longer than audio") {
        auto bad = rec;
        bad.lip_raw = Matrix::Zero(6, rec.frames() + 1);
        CHECK_THROWS_AS(data::validate(bad), RecordError);
    }
    SUBCASE("empty script") {
        auto bad = rec;
        bad.text_ids.clear();
        CHECK_THROWS_AS(data::validate(bad), RecordError);
    }
    SUBCASE("truncated file") {
        auto raw = bytes::read_file(path);
        raw.resize(raw.size() / 2);
        bytes::write_file_atomic(path, raw);
        CHECK(load_error(path) == RecordErrorCode::BadFormat);
    }
    SUBCASE("missing file") {
        CHECK(load_error(dir.path / "absent.rec") == RecordErrorCode::Io);
    }
}

TEST_CASE("saving into a missing directory is an I/O error") {
    const auto rec = data::generate_synthetic_corpus(small_spec()).at(0);
    try {
        data::save_record(rec, "/nonexistent-dir/x/r.rec");
        FAIL("save succeeded");
    } catch (const RecordError& e) {
        CHECK(e.code() == RecordErrorCode::Io);
    }
}

TEST_CASE("array container is little-endian regardless of host") {
    ArrayMap m;
    m["a"] = Matrix::Constant(1, 1, 1.0);
    const auto raw = encode_arrays(m);
    // 1.0 as IEEE-754 little-endian ends with 0xf0 0x3f.
    bool found = false;
    for (std::size_t i = 0; i + 8 <= raw.size(); ++i) {
        if (raw[i] == 0 && raw[i + 5] == 0 && raw[i + 6] == 0xf0 && raw[i + 7] == 0x3f) found = true;
    }
    CHECK(found);
    CHECK(std::get<Matrix>(decode_arrays(raw).at("a"))(0, 0) == 1.0);
}

TEST_CASE("corpus loads in file-name order") {
    testutil::TempDir dir;
    const auto corpus = data::generate_synthetic_corpus(small_spec());
    for (auto it = corpus.rbegin(); it != corpus.rend(); ++it) data::save_record(*it, dir.path / (it->utt_id + ".rec"));
    CHECK(data::load_corpus(dir.path) == corpus);
}
