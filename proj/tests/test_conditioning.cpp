#include <doctest.h>

#include <cmath>

#include "cosync/conditioning.hpp"
#include "cosync/model.hpp"
#include "cosync/verify.hpp"

using namespace cosync;
using conditioning::MaskSpec;
using nn::Matrix;
using nn::Tape;

namespace {

conditioning::ConditioningConfig small_cfg() {
    conditioning::ConditioningConfig c;
    c.mel_bins = 6;
    c.vocab_size = 5;
    c.visual_dim = 4;
    c.model_dim = 8;
    c.text_dim = 8;
    c.text_blocks = 1;
    c.text_kernel = 3;
    c.pad_channels = 6;
    c.ca_channels = 6;
    c.position_dim = 4;
    return c;
}

struct Net {
    nn::ParameterStore store;
    conditioning::ConditioningNet net;

    explicit Net(const conditioning::ConditioningConfig& cfg = small_cfg(), std::uint64_t seed = 1) {
        nn::Rng rng(seed);
        net = conditioning::ConditioningNet::create(store, "cond", cfg, rng);
    }
};

data::UtteranceRecord record(int tokens, Eigen::Index frames, Eigen::Index video, nn::Rng& rng) {
    data::UtteranceRecord r;
    r.mel = rng.uniform_matrix(6, frames, 0.0, 1.0);
    r.lip_raw = rng.normal_matrix(4, video);
    for (int i = 0; i < tokens; ++i) r.text_ids.push_back(static_cast<int>(rng.below(5)));
    r.align_feat = rng.normal_matrix(3, frames);
    r.utt_id = "u";
    return r;
}

}  // namespace

TEST_CASE("sample_mask respects the span law") {
    nn::Rng rng(5);
    CHECK(conditioning::sample_mask(10, rng, 1.0) == MaskSpec{0, 10});
    CHECK_THROWS(conditioning::sample_mask(1, rng));
    CHECK_THROWS(conditioning::sample_mask(10, rng, 0.5));
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const auto m = conditioning::sample_mask(100, rng);
        REQUIRE(m.start >= 0);
        REQUIRE(m.start < m.end);
        REQUIRE(m.end <= 100);
        const double f = static_cast<double>(m.length()) / 100.0;
        lo = std::min(lo, f);
        hi = std::max(hi, f);
    }
    CHECK(lo >= 0.70);
    CHECK(hi <= 1.00);

    nn::Rng a(9), b(9);
    for (int i = 0; i < 50; ++i) CHECK(conditioning::sample_mask(37, a) == conditioning::sample_mask(37, b));
}

TEST_CASE("apply_mask zeroes the target span only") {
    Matrix m(1, 4);
    m << 1, 2, 3, 4;
    Matrix expected(1, 4);
    expected << 1, 0, 0, 4;
    CHECK(conditioning::apply_mask(m, {1, 3}) == expected);
    CHECK(conditioning::apply_mask(m, {0, 4}).isZero(0.0));
    CHECK(conditioning::apply_mask(m, MaskSpec::none()) == m);
    CHECK_THROWS(conditioning::apply_mask(m, {2, 5}));

    nn::Rng rng(2);
    for (int i = 0; i < 20; ++i) {
        const Matrix raw = rng.normal_matrix(5, 30);
        const MaskSpec s = conditioning::sample_mask(30, rng);
        const Matrix h = conditioning::apply_mask(raw, s);
        CHECK(conditioning::apply_mask(h, s) == h);
        Matrix inside = raw;
        for (Eigen::Index c = 0; c < 30; ++c) {
            if (!s.contains(c)) inside.col(c).setZero();
        }
        CHECK(h + inside == raw);

        Tape tape(false);
        CHECK(conditioning::apply_mask(tape.constant(raw), s).value() == h);
    }
}

TEST_CASE("text pad expansion") {
    Tape tape(false);
    nn::Rng rng(3);
    const auto emb = tape.constant(rng.normal_matrix(3, 4));
    const auto pad = tape.constant(rng.normal_matrix(3, 1));
    CHECK(conditioning::expand_text_pad(emb, pad, 4).value() == emb.value());
    const auto out = conditioning::expand_text_pad(emb, pad, 7).value();
    CHECK(out.leftCols(4) == emb.value());
    for (int c = 4; c < 7; ++c) CHECK(out.col(c) == pad.value().col(0));
    CHECK_THROWS(conditioning::expand_text_pad(emb, pad, 3));

    Net n;
    Tape t2(false);
    const auto padded = n.net.expand_pad(t2.constant(rng.normal_matrix(6, 2)), 5).value();
    CHECK(padded.rightCols(3).isZero(0.0));
}

TEST_CASE("cross-attention expansion") {
    Net n;
    nn::Rng rng(4);
    Tape tape(false);

    SUBCASE("attention columns are distributions and uniform at init") {
        const auto h = tape.constant(rng.normal_matrix(8, 3));
        Matrix att;
        const Matrix out = n.net.expand_cross_attention(h, 11, &att).value();
        REQUIRE(att.rows() == 3);
        REQUIRE(att.cols() == 11);
        CHECK((att.array() >= 0.0).all());
        for (Eigen::Index c = 0; c < 11; ++c) CHECK(std::abs(att.col(c).sum() - 1.0) < 1e-6);
        CHECK((att.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);

        // Mean of the value projections, computed from the raw weights.
        const auto& w = n.store.at("cond.ca.value.weight").value;
        const auto& b = n.store.at("cond.ca.value.bias").value;
        const Eigen::VectorXd mean = (w * h.value()).rowwise().mean() + b.col(0);
        for (Eigen::Index c = 0; c < 11; ++c) CHECK((out.col(c) - mean).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("one token after training-like perturbation") {
        auto& q = n.store.at("cond.ca.query.weight").value;
        q = rng.normal_matrix(q.rows(), q.cols());
        const auto h = tape.constant(rng.normal_matrix(8, 1));
        const Matrix out = n.net.expand_cross_attention(h, 5).value();
        const auto& w = n.store.at("cond.ca.value.weight").value;
        const auto& b = n.store.at("cond.ca.value.bias").value;
        const Eigen::VectorXd only = w * h.value().col(0) + b.col(0);
        for (Eigen::Index c = 0; c < 5; ++c) CHECK((out.col(c) - only).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("lip upsampling") {
    nn::Rng rng(6);
    SUBCASE("output length for random pairs") {
        Net n;
        for (int i = 0; i < 50; ++i) {
            const Eigen::Index L = 1 + static_cast<Eigen::Index>(rng.below(40));
            const Eigen::Index Lv = 1 + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(L)));
            Tape tape(false);
            const auto x = n.net.upsample_lip(tape.constant(rng.normal_matrix(4, Lv)), L);
            CHECK(x.rows() == 8);
            CHECK(x.cols() == L);
        }
    }
    SUBCASE("identity projection preserves frames") {
        auto cfg = small_cfg();
        cfg.model_dim = cfg.visual_dim;
        Net n(cfg);
        n.store.at("cond.lip.proj.weight").value = Matrix::Identity(4, 4);
        n.store.at("cond.lip.proj.bias").value.setZero();
        Tape tape(false);
        const Matrix raw = rng.normal_matrix(4, 6);
        CHECK(n.net.upsample_lip(tape.constant(raw), 6).value() == raw);
        const Matrix doubled = n.net.upsample_lip(tape.constant(raw), 12).value();
        for (Eigen::Index j = 0; j < 6; ++j) {
            CHECK(doubled.col(2 * j) == raw.col(j));
            CHECK(doubled.col(2 * j + 1) == raw.col(j));
        }
    }
    const auto idx = conditioning::nearest_source_index(3, 6);
    CHECK(idx == std::vector<int>{0, 0, 1, 1, 2, 2});
}

TEST_CASE("lip placement keeps the target span only") {
    Tape tape(false);
    nn::Rng rng(7);
    const Matrix x = rng.normal_matrix(3, 8);
    const Matrix placed = conditioning::place_lip(tape.constant(x), {2, 6}).value();
    for (Eigen::Index c = 0; c < 8; ++c) {
        if (c >= 2 && c < 6) {
            CHECK(placed.col(c) == x.col(c));
        } else {
            CHECK(placed.col(c).isZero(0.0));
        }
    }
    CHECK(conditioning::place_lip(tape.constant(x), MaskSpec::none()).value() == x);
}

TEST_CASE("prior concatenation") {
    Tape tape(false);
    nn::Rng rng(8);
    const Matrix xt = rng.normal_matrix(2, 5), hm = rng.normal_matrix(2, 5), tp = rng.normal_matrix(3, 5),
                 tc = rng.normal_matrix(4, 5);
    const Matrix out = conditioning::assemble_prior(tape.constant(hm), tape.constant(tp), tape.constant(tc),
                                                    tape.constant(xt))
                           .value();
    REQUIRE(out.rows() == 11);
    CHECK(out.middleRows(0, 2) == xt);
    CHECK(out.middleRows(2, 2) == hm);
    CHECK(out.middleRows(4, 3) == tp);
    CHECK(out.middleRows(7, 4) == tc);
    CHECK(conditioning::assemble_prior(tape.constant(Matrix::Zero(2, 5)), tape.constant(Matrix::Zero(3, 5)),
                                       tape.constant(Matrix::Zero(4, 5)), tape.constant(Matrix::Zero(2, 5)))
              .value()
              .isZero(0.0));
    CHECK_THROWS(conditioning::assemble_prior(tape.constant(hm), tape.constant(tp), tape.constant(tc),
                                              tape.constant(Matrix::Zero(2, 4))));
    CHECK(ModelConfig{}.in_channels() == 712);
}

TEST_CASE("bundle streams share the frame count") {
    Net n;
    nn::Rng rng(10);
    for (int i = 0; i < 10; ++i) {
        const Eigen::Index L = 6 + static_cast<Eigen::Index>(rng.below(20));
        const auto rec = record(1 + static_cast<int>(rng.below(5)), L, 1 + static_cast<Eigen::Index>(rng.below(
                                                                             static_cast<std::uint64_t>(L))), rng);
        const MaskSpec s = conditioning::sample_mask(L, rng);
        Tape tape(false);
        const auto b = n.net.build(tape, rec, s);
        CHECK(b.h_m.cols() == L);
        CHECK(b.text_pad.cols() == L);
        CHECK(b.text_ca.cols() == L);
        CHECK(b.x_lip.cols() == L);
        CHECK(b.x_lip.rows() == 8);
        CHECK(b.h_text.cols() == static_cast<Eigen::Index>(rec.text_ids.size()));
        for (Eigen::Index c = s.start; c < s.end; ++c) CHECK(b.h_m.value().col(c).isZero(0.0));
    }
}
