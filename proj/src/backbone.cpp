#include "cosync/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace cosync::backbone {

void BackboneConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("backbone config: " + msg); };
    if (n_layers <= 0) fail("n_layers must be positive");
    if (d <= 0 || n_heads <= 0 || d % n_heads != 0) fail("d must be a positive multiple of n_heads");
    if (!(0 < p1_end && p1_end <= p2_end && p2_end <= n_layers)) fail("phase bounds must satisfy 0 < p1 <= p2 <= n");
    if (in_channels <= 0 || out_channels <= 0) fail("channel counts must be positive");
    if (conv_pos_kernel <= 0 || conv_pos_kernel % 2 == 0) fail("conv_pos_kernel must be odd");
    if (conv_pos_groups <= 0 || d % conv_pos_groups != 0) fail("d must be divisible by conv_pos_groups");
    if (ff_mult <= 0) fail("ff_mult must be positive");
    if (time_freq_dim <= 0 || time_freq_dim % 2 != 0) fail("time_freq_dim must be even");
    if (text_dim <= 0) fail("text_dim must be positive");
}

Matrix timestep_sinusoid(double t, int dim) {
    const double pos[] = {1000.0 * t};
    return nn::sinusoidal_positions(dim, pos);
}

namespace {

// LN(z) ⊙ γ + β, broadcast over frames.
Var adaptive_norm(Var z, const TimeModulation& m) {
    return nn::add_col(nn::mul_col(nn::layer_norm_cols(z), m.gamma), m.beta);
}

Var chunk(Var v, int index, int d) { return nn::slice_rows(v, static_cast<Eigen::Index>(index) * d, d); }

// Column layout of a packed batch: input b owns columns [offset[b], offset[b+1]).
struct Packing {
    std::vector<Eigen::Index> offset{0};
    std::vector<int> owner;

    void push(Eigen::Index cols) {
        owner.insert(owner.end(), static_cast<std::size_t>(cols), static_cast<int>(offset.size() - 1));
        offset.push_back(offset.back() + cols);
    }
    std::size_t size() const { return offset.size() - 1; }
    Var part(Var x, std::size_t b) const { return nn::slice_cols(x, offset[b], offset[b + 1] - offset[b]); }
};

// Per-input modulation [d x B] spread over the packed frames.
Var spread(Var m, const Packing& p) { return nn::repeat_cols(m, p.owner); }

Var packed_norm(Var z, Var gamma, Var beta, const Packing& p) {
    return nn::add(nn::mul(nn::layer_norm_cols(z), spread(gamma, p)), spread(beta, p));
}

Var packed_attention(const nn::MultiHeadAttention& att, Var x, const Packing& px, Var memory, const Packing& pm) {
    Var q_all = att.q(x);
    Var k_all = att.k(memory);
    Var v_all = att.v(memory);
    const Eigen::Index head_dim = q_all.rows() / att.heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Var> per_input;
    for (std::size_t b = 0; b < px.size(); ++b) {
        Var qb = px.part(q_all, b), kb = pm.part(k_all, b), vb = pm.part(v_all, b);
        std::vector<Var> heads;
        for (int h = 0; h < att.heads; ++h) {
            Var qh = nn::slice_rows(qb, h * head_dim, head_dim);
            Var kh = nn::slice_rows(kb, h * head_dim, head_dim);
            Var vh = nn::slice_rows(vb, h * head_dim, head_dim);
            heads.push_back(nn::matmul(vh, nn::softmax_cols(nn::scale(nn::matmul(nn::transpose(kh), qh), inv_sqrt))));
        }
        per_input.push_back(att.heads == 1 ? heads.front() : nn::concat_rows(heads));
    }
    return att.o(nn::concat_cols(per_input));
}

}  // namespace

StyleBlock StyleBlock::create(nn::ParameterStore& store, const std::string& name, const BackboneConfig& cfg,
                              nn::Rng& rng) {
    StyleBlock b;
    b.modulation = nn::Linear::create(store, name + ".modulation", cfg.d, 6 * cfg.d, rng, nn::Init::Zero);
    b.attention = nn::MultiHeadAttention::create(store, name + ".attn", cfg.d, cfg.d, cfg.n_heads, rng);
    b.ff_up = nn::Linear::create(store, name + ".ff.up", cfg.d, cfg.d * cfg.ff_mult, rng);
    b.ff_down = nn::Linear::create(store, name + ".ff.down", cfg.d * cfg.ff_mult, cfg.d, rng);
    return b;
}

std::array<TimeModulation, 2> StyleBlock::modulate(Var time_features) const {
    const int d = static_cast<int>(ff_up.in_features());
    Var m = modulation(time_features);
    return {TimeModulation{nn::add_scalar(chunk(m, 0, d), 1.0), chunk(m, 1, d), chunk(m, 2, d)},
            TimeModulation{nn::add_scalar(chunk(m, 3, d), 1.0), chunk(m, 4, d), chunk(m, 5, d)}};
}

Var StyleBlock::operator()(Var z, Var time_features) const {
    const auto mods = modulate(time_features);
    Var h = adaptive_norm(z, mods[0]);
    Var a = attention(h, h);
    z = nn::add(z, nn::mul_col(a, mods[0].alpha));
    Var f = ff_down(nn::gelu(ff_up(adaptive_norm(z, mods[1]))));
    return nn::add(z, nn::mul_col(f, mods[1].alpha));
}

LipGate LipGate::create(nn::ParameterStore& store, const std::string& name, int d) {
    return LipGate{&store.add(name + ".lambda", Matrix::Zero(d, 1))};
}

Var lip_inject(Var z_style, Var x_lip, Var gate) {
    if (z_style.rows() != x_lip.rows() || z_style.cols() != x_lip.cols()) {
        throw std::invalid_argument("lip_inject: hidden state and lip sequence shapes differ");
    }
    return nn::add(z_style, nn::mul_col(x_lip, gate));
}

ContextAlignBlock ContextAlignBlock::create(nn::ParameterStore& store, const std::string& name,
                                            const BackboneConfig& cfg, nn::Rng& rng) {
    ContextAlignBlock b;
    b.modulation = nn::Linear::create(store, name + ".modulation", cfg.d, 3 * cfg.d, rng, nn::Init::Zero);
    b.cross_attention = nn::MultiHeadAttention::create(store, name + ".xattn", cfg.d, cfg.text_dim, cfg.n_heads, rng);
    return b;
}

TimeModulation ContextAlignBlock::modulate(Var time_features) const {
    const int d = static_cast<int>(modulation.in_features());
    Var m = modulation(time_features);
    return {nn::add_scalar(chunk(m, 0, d), 1.0), chunk(m, 1, d), chunk(m, 2, d)};
}

std::pair<Var, Var> ContextAlignBlock::operator()(Var z_lip, Var h_text, Var time_features) const {
    if (h_text.cols() < 1) throw std::invalid_argument("context_align: empty text memory");
    const TimeModulation mod = modulate(time_features);
    Var z_ca = cross_attention(adaptive_norm(z_lip, mod), h_text);
    Var z_out = nn::add(z_lip, nn::mul_col(z_ca, mod.alpha));
    return {z_out, z_ca};
}

Backbone Backbone::create(nn::ParameterStore& store, const std::string& prefix, const BackboneConfig& cfg,
                          nn::Rng& rng) {
    cfg.validate();
    Backbone bb;
    bb.cfg_ = cfg;
    bb.in_proj_ = nn::Linear::create(store, prefix + ".in_proj", cfg.in_channels, cfg.d, rng);
    const int pad = cfg.conv_pos_kernel / 2;
    bb.pos_conv1_ = nn::Conv1d::create(store, prefix + ".conv_pos.conv1", cfg.d, cfg.d, cfg.conv_pos_kernel, 1, pad,
                                       cfg.conv_pos_groups, rng);
    bb.pos_conv2_ = nn::Conv1d::create(store, prefix + ".conv_pos.conv2", cfg.d, cfg.d, cfg.conv_pos_kernel, 1, pad,
                                       cfg.conv_pos_groups, rng);
    bb.time_in_ = nn::Linear::create(store, prefix + ".time.in", cfg.time_freq_dim, cfg.d, rng);
    bb.time_out_ = nn::Linear::create(store, prefix + ".time.out", cfg.d, cfg.d, rng);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string name = prefix + ".layer" + std::to_string(l);
        Layer layer{StyleBlock::create(store, name + ".style", cfg, rng), std::nullopt, std::nullopt};
        if (l >= cfg.p1_end) layer.lip = LipGate::create(store, name + ".lip_gate", cfg.d);
        if (l >= cfg.p2_end) layer.context = ContextAlignBlock::create(store, name + ".context", cfg, rng);
        bb.layers_.push_back(std::move(layer));
    }
    bb.final_modulation_ = nn::Linear::create(store, prefix + ".final.modulation", cfg.d, 2 * cfg.d, rng, nn::Init::Zero);
    bb.out_proj_ = nn::Linear::create(store, prefix + ".out_proj", cfg.d, cfg.out_channels, rng, nn::Init::Zero);
    return bb;
}

Var Backbone::embed_time(nn::Tape& tape, double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("embed_time: t must lie in [0, 1]");
    Var s = tape.constant(timestep_sinusoid(t, cfg_.time_freq_dim));
    return time_out_(nn::silu(time_in_(s)));
}

Var Backbone::time_features(nn::Tape& tape, double t) const { return nn::silu(embed_time(tape, t)); }

ForwardResult Backbone::forward(Var x_t, const conditioning::ConditioningBundle& bundle, double t) const {
    nn::Tape& tape = x_t.tape();
    bundle.check_lengths();
    if (x_t.cols() != bundle.frames()) throw std::invalid_argument("backbone: x_t length differs from conditioning");
    if (bundle.x_lip.rows() != cfg_.d) throw std::invalid_argument("backbone: lip width must equal model width");

    Var prior = conditioning::assemble_prior(bundle.h_m, bundle.text_pad, bundle.text_ca, x_t);
    if (prior.rows() != cfg_.in_channels) {
        throw std::invalid_argument("backbone: assembled prior has " + std::to_string(prior.rows()) +
                                    " channels, expected " + std::to_string(cfg_.in_channels));
    }
    Var z = in_proj_(prior);
    z = nn::add(z, nn::mish(pos_conv2_(nn::mish(pos_conv1_(z)))));

    ForwardResult out;
    out.taps.z0 = z;
    Var tf = time_features(tape, t);
    for (const Layer& layer : layers_) {
        LayerTaps taps;
        z = layer.style(z, tf);
        taps.z_style = z;
        if (layer.lip) {
            z = lip_inject(z, bundle.x_lip, tape.param(*layer.lip->lambda));
            taps.z_lip = z;
        }
        if (layer.context) {
            auto [z_out, z_ca] = (*layer.context)(z, bundle.h_text, tf);
            z = z_out;
            taps.z_out = z_out;
            taps.z_ca = z_ca;
            out.taps.z_ca = z_ca;
        }
        out.taps.layers.push_back(taps);
    }
    out.taps.z_final = z;

    Var fm = final_modulation_(tf);
    const TimeModulation final_mod{nn::add_scalar(chunk(fm, 0, cfg_.d), 1.0), chunk(fm, 1, cfg_.d), Var{}};
    out.v = out_proj_(adaptive_norm(z, final_mod));
    return out;
}

std::vector<Var> Backbone::forward_batch(std::span<const Var> x_t,
                                        std::span<const conditioning::ConditioningBundle> bundles,
                                        std::span<const double> t) const {
    if (x_t.empty() || x_t.size() != bundles.size() || x_t.size() != t.size()) {
        throw std::invalid_argument("forward_batch: inputs, bundles and times must be non-empty and equally many");
    }
    nn::Tape& tape = x_t.front().tape();
    Packing frames, text;
    std::vector<Var> priors, lips, memories, sinusoids;
    for (std::size_t b = 0; b < x_t.size(); ++b) {
        const auto& bundle = bundles[b];
        bundle.check_lengths();
        if (x_t[b].cols() != bundle.frames()) throw std::invalid_argument("backbone: x_t length differs from conditioning");
        if (bundle.x_lip.rows() != cfg_.d) throw std::invalid_argument("backbone: lip width must equal model width");
        if (!(t[b] >= 0.0 && t[b] <= 1.0)) throw std::invalid_argument("embed_time: t must lie in [0, 1]");
        if (cfg_.p2_end < cfg_.n_layers && bundle.h_text.cols() < 1) {
            throw std::invalid_argument("context_align: empty text memory");
        }
        priors.push_back(conditioning::assemble_prior(bundle.h_m, bundle.text_pad, bundle.text_ca, x_t[b]));
        if (priors.back().rows() != cfg_.in_channels) throw std::invalid_argument("backbone: assembled prior width");
        lips.push_back(bundle.x_lip);
        memories.push_back(bundle.h_text);
        sinusoids.push_back(tape.constant(timestep_sinusoid(t[b], cfg_.time_freq_dim)));
        frames.push(bundle.frames());
        text.push(bundle.h_text.cols());
    }

    Var z = in_proj_(nn::concat_cols(priors));
    std::vector<Var> positioned;
    for (std::size_t b = 0; b < frames.size(); ++b) {
        Var zb = frames.part(z, b);
        positioned.push_back(nn::add(zb, nn::mish(pos_conv2_(nn::mish(pos_conv1_(zb))))));
    }
    z = nn::concat_cols(positioned);
    const Var x_lip = nn::concat_cols(lips);
    const Var h_text = nn::concat_cols(memories);
    const Var tf = nn::silu(time_out_(nn::silu(time_in_(nn::concat_cols(sinusoids)))));
    const int d = cfg_.d;

    for (const Layer& layer : layers_) {
        const Var m = layer.style.modulation(tf);
        Var h = packed_norm(z, nn::add_scalar(chunk(m, 0, d), 1.0), chunk(m, 1, d), frames);
        z = nn::add(z, nn::mul(packed_attention(layer.style.attention, h, frames, h, frames), spread(chunk(m, 2, d), frames)));
        h = packed_norm(z, nn::add_scalar(chunk(m, 3, d), 1.0), chunk(m, 4, d), frames);
        Var f = layer.style.ff_down(nn::gelu(layer.style.ff_up(h)));
        z = nn::add(z, nn::mul(f, spread(chunk(m, 5, d), frames)));
        if (layer.lip) z = lip_inject(z, x_lip, tape.param(*layer.lip->lambda));
        if (layer.context) {
            const Var mc = layer.context->modulation(tf);
            Var q = packed_norm(z, nn::add_scalar(chunk(mc, 0, d), 1.0), chunk(mc, 1, d), frames);
            Var z_ca = packed_attention(layer.context->cross_attention, q, frames, h_text, text);
            z = nn::add(z, nn::mul(z_ca, spread(chunk(mc, 2, d), frames)));
        }
    }

    const Var fm = final_modulation_(tf);
    const Var v = out_proj_(packed_norm(z, nn::add_scalar(chunk(fm, 0, d), 1.0), chunk(fm, 1, d), frames));
    std::vector<Var> out;
    for (std::size_t b = 0; b < frames.size(); ++b) out.push_back(frames.part(v, b));
    return out;
}

}  // namespace cosync::backbone
