#include <doctest.h>

#include <cmath>

#include "cosync/backbone.hpp"
#include "cosync/model.hpp"
#include "cosync/verify.hpp"

using namespace cosync;
using conditioning::MaskSpec;
using nn::Matrix;
using nn::Tape;

namespace {

struct Fixture {
    std::unique_ptr<CoSyncModel> model;
    nn::Rng rng;

    explicit Fixture(const ModelConfig& cfg = verify::small_config(), bool randomize = false, std::uint64_t seed = 1)
        : model(CoSyncModel::create(cfg)), rng(seed) {
        if (randomize) verify::randomize_parameters(model->parameters(), rng);
    }

    data::UtteranceRecord rec(int tokens = 3, int fpt = 4) { return verify::random_record(model->config(), tokens, fpt, rng); }
    const backbone::Backbone& bb() const { return model->backbone(); }
};

double cosine(const Matrix& a, const Matrix& b) {
    return (a.array() * b.array()).sum() / (a.norm() * b.norm());
}

}  // namespace

TEST_CASE("fresh backbone returns a zero field and identity taps") {
    Fixture f;
    for (int i = 0; i < 5; ++i) {
        const auto r = f.rec(2 + i, 3);
        const Matrix x = f.rng.normal_matrix(r.mel.rows(), r.mel.cols());
        const double t = f.rng.uniform();
        std::string why;
        CHECK_MESSAGE(verify::gated_identity(*f.model, r, t, x, &why), why);
        const auto v = f.model->field(f.model->condition(r, MaskSpec::none()), x, t, flow::ConditionBranch::Full);
        CHECK(v.isZero(0.0));
    }
}

TEST_CASE("output keeps the frame count") {
    Fixture f(verify::small_config(), true);
    for (int L : {7, 32, 257}) {
        auto r = f.rec(1, 1);
        r.mel = f.rng.uniform_matrix(r.mel.rows(), L, 0, 1);
        r.align_feat = f.rng.normal_matrix(r.align_feat.rows(), L);
        r.lip_raw = f.rng.normal_matrix(r.lip_raw.rows(), (L + 1) / 2);
        Tape tape(false);
        const auto bundle = f.model->conditioning().build(tape, r, MaskSpec::none());
        const auto out = f.bb().forward(tape.constant(f.rng.normal_matrix(r.mel.rows(), L)), bundle, 0.3);
        CHECK(out.v.rows() == r.mel.rows());
        CHECK(out.v.cols() == L);
        CHECK(out.taps.z0.cols() == L);
        for (const auto& layer : out.taps.layers) CHECK(layer.z_style.cols() == L);
    }
}

TEST_CASE("packed batch matches one-at-a-time evaluation") {
    Fixture f(verify::small_config(), true, 4);
    Tape tape(false);
    std::vector<conditioning::ConditioningBundle> bundles;
    std::vector<nn::Var> xs;
    std::vector<double> ts;
    for (int i = 0; i < 4; ++i) {
        const auto r = f.rec(2 + i % 2, 3 + i);
        bundles.push_back(f.model->conditioning().build(tape, r, conditioning::sample_mask(r.frames(), f.rng)));
        xs.push_back(tape.constant(f.rng.normal_matrix(r.mel.rows(), r.frames())));
        ts.push_back(f.rng.uniform());
    }
    // Duplicate the first input.
    bundles.push_back(bundles.front());
    xs.push_back(xs.front());
    ts.push_back(ts.front());

    const auto packed = f.bb().forward_batch(xs, bundles, ts);
    REQUIRE(packed.size() == 5);
    for (std::size_t i = 0; i < 4; ++i) {
        const Matrix single = f.bb().forward(xs[i], bundles[i], ts[i]).v.value();
        CHECK((packed[i].value() - single).cwiseAbs().maxCoeff() < 1e-12);
    }
    // Packed columns may round differently; separate calls are bitwise equal.
    CHECK((packed[4].value() - packed[0].value()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(f.bb().forward(xs[4], bundles[4], ts[4]).v.value() == f.bb().forward(xs[0], bundles[0], ts[0]).v.value());

    // Reversed order gives the same per-input fields.
    std::vector<conditioning::ConditioningBundle> rb(bundles.rbegin(), bundles.rend());
    std::vector<nn::Var> rx(xs.rbegin(), xs.rend());
    std::vector<double> rt(ts.rbegin(), ts.rend());
    const auto reversed = f.bb().forward_batch(rx, rb, rt);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK((reversed[4 - i].value() - packed[i].value()).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("time embedding and modulations depend on t only") {
    Fixture f(verify::small_config(), true, 2);
    Tape tape(false);
    const Matrix e0 = f.bb().embed_time(tape, 0.0).value();
    CHECK(f.bb().embed_time(tape, 0.0).value() == e0);
    CHECK(cosine(e0, f.bb().embed_time(tape, 1.0).value()) < 1.0 - 1e-9);
    CHECK_THROWS(f.bb().embed_time(tape, -0.1));
    CHECK_THROWS(f.bb().embed_time(tape, 1.5));

    // Two different contents at the same t: modulation vectors are taken
    // from the time features each forward uses.
    const auto r1 = f.rec(3, 4), r2 = f.rec(4, 5);
    Tape t1(false), t2(false);
    const auto b1 = f.model->conditioning().build(t1, r1, MaskSpec::none());
    const auto b2 = f.model->conditioning().build(t2, r2, MaskSpec::none());
    f.bb().forward(t1.constant(f.rng.normal_matrix(r1.mel.rows(), r1.frames())), b1, 0.42);
    f.bb().forward(t2.constant(f.rng.normal_matrix(r2.mel.rows(), r2.frames())), b2, 0.42);
    for (int l = 0; l < f.bb().layer_count(); ++l) {
        const auto m1 = f.bb().style(l).modulate(f.bb().time_features(t1, 0.42));
        const auto m2 = f.bb().style(l).modulate(f.bb().time_features(t2, 0.42));
        for (int s = 0; s < 2; ++s) {
            CHECK(m1[static_cast<std::size_t>(s)].gamma.value() == m2[static_cast<std::size_t>(s)].gamma.value());
            CHECK(m1[static_cast<std::size_t>(s)].beta.value() == m2[static_cast<std::size_t>(s)].beta.value());
            CHECK(m1[static_cast<std::size_t>(s)].alpha.value() == m2[static_cast<std::size_t>(s)].alpha.value());
        }
    }
}

TEST_CASE("every residual gate starts at zero") {
    Fixture f(ModelConfig{.d = 32, .n_layers = 5, .n_heads = 4, .p1_end = 2, .p2_end = 3, .text_dim = 16,
                          .text_blocks = 1, .pad_channels = 8, .ca_channels = 8, .position_dim = 8,
                          .conv_pos_kernel = 5, .conv_pos_groups = 4, .time_freq_dim = 16, .proj_dim = 8});
    Tape tape(false);
    const auto tf = f.bb().time_features(tape, 0.7);
    for (int l = 0; l < f.bb().layer_count(); ++l) {
        for (const auto& m : f.bb().style(l).modulate(tf)) CHECK(m.alpha.value().isZero(0.0));
        CHECK(f.bb().lip_gate(l).has_value() == (l >= 2));
        CHECK(f.bb().context(l).has_value() == (l >= 3));
        if (f.bb().lip_gate(l)) CHECK(f.bb().lip_gate(l)->lambda->value.isZero(0.0));
        if (f.bb().context(l)) CHECK(f.bb().context(l)->modulate(tf).alpha.value().isZero(0.0));
    }
}

TEST_CASE("style block with unit gate and identity attention doubles a normalised input") {
    backbone::BackboneConfig cfg;
    cfg.d = 2;
    cfg.n_heads = 1;
    cfg.time_freq_dim = 4;
    nn::ParameterStore store;
    nn::Rng rng(3);
    auto block = backbone::StyleBlock::create(store, "s", cfg, rng);
    // alpha_1 = 1 through the bias; gamma = 1 and beta = 0 come from the zero weights.
    block.modulation.bias->value.setZero();
    block.modulation.bias->value.block(4, 0, 2, 1).setOnes();
    for (auto* lin : {&block.attention.v, &block.attention.o}) {
        lin->weight->value = Matrix::Identity(2, 2);
        lin->bias->value.setZero();
    }
    Tape tape(false);
    Matrix z(2, 1);
    z << 1.0, -1.0;  // zero mean and unit variance, so LN(z) = z / sqrt(1 + eps)
    const Matrix out = block(tape.constant(z), tape.constant(Matrix::Zero(2, 1))).value();
    CHECK((out - 2.0 * z).cwiseAbs().maxCoeff() < 1e-6);

    // Freshly created block is the identity.
    auto fresh = backbone::StyleBlock::create(store, "f", cfg, rng);
    const Matrix zz = rng.normal_matrix(2, 5);
    CHECK(fresh(tape.constant(zz), tape.constant(rng.normal_matrix(2, 1))).value() == zz);
}

TEST_CASE("lip injection") {
    Tape tape(false);
    nn::Rng rng(4);
    const auto z = tape.constant(rng.normal_matrix(3, 5));
    const auto x = tape.constant(rng.normal_matrix(3, 5));
    CHECK(backbone::lip_inject(z, x, tape.constant(Matrix::Zero(3, 1))).value() == z.value());
    CHECK(backbone::lip_inject(z, x, tape.constant(Matrix::Ones(3, 1))).value() == z.value() + x.value());
    CHECK(backbone::lip_inject(z, tape.constant(Matrix::Zero(3, 5)), tape.constant(rng.normal_matrix(3, 1))).value() ==
          z.value());
    CHECK_THROWS(backbone::lip_inject(z, tape.constant(Matrix::Zero(3, 4)), tape.constant(Matrix::Zero(3, 1))));
}

TEST_CASE("context block at init and with one text token") {
    backbone::BackboneConfig cfg;
    cfg.d = 4;
    cfg.n_heads = 2;
    cfg.text_dim = 3;
    cfg.time_freq_dim = 4;
    nn::ParameterStore store;
    nn::Rng rng(5);
    const auto block = backbone::ContextAlignBlock::create(store, "c", cfg, rng);
    Tape tape(false);
    const auto z = tape.constant(rng.normal_matrix(4, 6));
    const auto tf = tape.constant(rng.normal_matrix(4, 1));
    const auto h1 = tape.constant(rng.normal_matrix(3, 1));
    const auto [z_out, z_ca] = block(z, h1, tf);
    CHECK(z_out.value() == z.value());
    CHECK(z_ca.value().norm() > 0.0);
    // A single key: every frame receives o(v(h)).
    const auto& att = block.cross_attention;
    const Eigen::VectorXd vh = att.v.weight->value * h1.value().col(0) + att.v.bias->value.col(0);
    const Eigen::VectorXd expect = att.o.weight->value * vh + att.o.bias->value.col(0);
    for (Eigen::Index c = 0; c < 6; ++c) CHECK((z_ca.value().col(c) - expect).cwiseAbs().maxCoeff() < 1e-12);
    for (int h = 0; h < 2; ++h) {
        const Matrix w = att.weights(z, tape.constant(rng.normal_matrix(3, 4)), h);
        for (Eigen::Index c = 0; c < w.cols(); ++c) CHECK(std::abs(w.col(c).sum() - 1.0) < 1e-6);
    }
    CHECK_THROWS(block(z, tape.constant(Matrix::Zero(3, 0)), tf));
}

TEST_CASE("closed lip gates and silenced text values isolate the phases") {
    Fixture f(verify::small_config(), true, 6);
    for (int l = 0; l < f.bb().layer_count(); ++l) {
        if (f.bb().lip_gate(l)) f.bb().lip_gate(l)->lambda->value.setZero();
        if (f.bb().context(l)) {
            f.bb().context(l)->cross_attention.v.weight->value.setZero();
            f.bb().context(l)->cross_attention.v.bias->value.setZero();
        }
    }
    const auto r = f.rec(3, 4);
    const Matrix x = f.rng.normal_matrix(r.mel.rows(), r.frames());
    BundleValues b = f.model->condition(r, MaskSpec::none());
    const Matrix base = f.model->field(b, x, 0.6, flow::ConditionBranch::Full);
    b.x_lip = f.rng.normal_matrix(b.x_lip.rows(), b.x_lip.cols());
    b.h_text = f.rng.normal_matrix(b.h_text.rows(), b.h_text.cols() + 2);
    CHECK(f.model->field(b, x, 0.6, flow::ConditionBranch::Full) == base);
}

TEST_CASE("squared field norm has correct parameter gradients") {
    const ModelConfig cfg = verify::tiny_config();
    auto model = CoSyncModel::create(cfg);
    nn::Rng rng(11);
    verify::randomize_parameters(model->parameters(), rng);
    const auto r = verify::random_record(cfg, 2, 5, rng);
    const Matrix x = rng.normal_matrix(r.mel.rows(), r.frames());
    auto loss = [&](bool record) {
        Tape tape(record);
        const auto bundle = model->conditioning().build(tape, r, {2, 8});
        const auto v = model->backbone().forward(tape.constant(x), bundle, 0.55).v;
        const auto l = nn::sum(nn::square(v));
        if (record) tape.backward(l);
        return l.scalar();
    };
    model->parameters().zero_grad();
    loss(true);
    double worst = 0.0;
    const double h = 1e-5;
    for (auto& p : model->parameters()) {
        const Matrix grad = p->grad.size() ? p->grad : Matrix::Zero(p->value.rows(), p->value.cols());
        for (Eigen::Index i = 0; i < p->value.size(); i += std::max<Eigen::Index>(1, p->value.size() / 4)) {
            const double keep = p->value(i);
            p->value(i) = keep + h;
            const double up = loss(false);
            p->value(i) = keep - h;
            const double down = loss(false);
            p->value(i) = keep;
            const double num = (up - down) / (2 * h);
            const double rel = std::abs(num - grad(i)) / std::max({std::abs(num), std::abs(grad(i)), 1e-5});
            worst = std::max(worst, rel);
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("backbone config validation") {
    backbone::BackboneConfig c;
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS(c.validate());
    c = {};
    c.p1_end = 0;
    CHECK_THROWS(c.validate());
    c = {};
    c.p1_end = 16;
    CHECK_THROWS(c.validate());
    c = {};
    c.p2_end = 23;
    CHECK_THROWS(c.validate());
}
