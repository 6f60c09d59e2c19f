#include "cosync/conditioning.hpp"

#include <cmath>
#include <stdexcept>

namespace cosync::conditioning {

void MaskSpec::check(Eigen::Index frames) const {
    if (start < 0 || end > frames || start > end) {
        throw std::out_of_range("mask [" + std::to_string(start) + ", " + std::to_string(end) +
                                ") out of bounds for " + std::to_string(frames) + " frames");
    }
}

Vector MaskSpec::region(Eigen::Index frames) const {
    check(frames);
    Vector r = Vector::Zero(frames);
    r.segment(start, end - start).setOnes();
    return r;
}

Vector MaskSpec::keep(Eigen::Index frames) const { return Vector::Ones(frames) - region(frames); }

MaskSpec sample_mask(Eigen::Index frames, nn::Rng& rng, std::optional<double> forced_fraction) {
    if (frames < 2) throw std::invalid_argument("sample_mask: need at least 2 frames");
    const double fraction = forced_fraction ? *forced_fraction : rng.uniform(kMinSpanFraction, kMaxSpanFraction);
    if (!(fraction >= kMinSpanFraction && fraction <= kMaxSpanFraction)) {
        throw std::invalid_argument("sample_mask: span fraction outside [0.70, 1.00]");
    }
    Eigen::Index span = static_cast<Eigen::Index>(std::ceil(fraction * static_cast<double>(frames)));
    span = std::clamp<Eigen::Index>(span, 1, frames);
    const Eigen::Index start = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(frames - span + 1)));
    return {start, start + span};
}

MaskSpec target_mask(const data::UtteranceRecord& record) { return {record.ref_len, record.frames()}; }

Matrix apply_mask(const Matrix& m_raw, const MaskSpec& mask) {
    mask.check(m_raw.cols());
    Matrix out = m_raw;
    out.middleCols(mask.start, mask.length()).setZero();
    return out;
}

Var apply_mask(Var m_raw, const MaskSpec& mask) {
    if (mask.empty()) return m_raw;
    return nn::mask_cols(m_raw, mask.keep(m_raw.cols()));
}

void ConditioningConfig::validate() const {
    auto positive = [](const char* name, int v) {
        if (v <= 0) throw std::invalid_argument(std::string("conditioning config: ") + name + " must be positive");
    };
    positive("mel_bins", mel_bins);
    positive("vocab_size", vocab_size);
    positive("visual_dim", visual_dim);
    positive("model_dim", model_dim);
    positive("text_dim", text_dim);
    positive("text_kernel", text_kernel);
    positive("text_ff_mult", text_ff_mult);
    positive("pad_channels", pad_channels);
    positive("ca_channels", ca_channels);
    positive("position_dim", position_dim);
    positive("lip_kernel", lip_kernel);
    if (text_blocks < 0) throw std::invalid_argument("conditioning config: text_blocks must be >= 0");
    if (text_kernel % 2 == 0 || lip_kernel % 2 == 0) {
        throw std::invalid_argument("conditioning config: kernels must be odd to preserve length");
    }
    if (position_dim % 2 != 0) throw std::invalid_argument("conditioning config: position_dim must be even");
}

void ConditioningBundle::check_lengths() const {
    const Eigen::Index L = h_m.cols();
    if (text_pad.cols() != L || text_ca.cols() != L || x_lip.cols() != L) {
        throw std::invalid_argument("conditioning bundle: streams disagree on frame count");
    }
    if (h_text.cols() < 1) throw std::invalid_argument("conditioning bundle: empty text memory");
    mask.check(L);
}

ConditioningNet ConditioningNet::create(nn::ParameterStore& store, const std::string& prefix,
                                        const ConditioningConfig& cfg, nn::Rng& rng) {
    cfg.validate();
    using nn::Init;
    ConditioningNet net;
    net.cfg_ = cfg;
    net.embedding_ = &store.add(prefix + ".text.embedding", rng.normal_matrix(cfg.text_dim, cfg.vocab_size));
    for (int b = 0; b < cfg.text_blocks; ++b) {
        const std::string p = prefix + ".text.block" + std::to_string(b);
        TextBlock blk;
        blk.depthwise = nn::Conv1d::create(store, p + ".dwconv", cfg.text_dim, cfg.text_dim, cfg.text_kernel, 1,
                                           cfg.text_kernel / 2, cfg.text_dim, rng);
        blk.norm_scale = &store.add(p + ".norm.scale", Matrix::Ones(cfg.text_dim, 1));
        blk.norm_shift = &store.add(p + ".norm.shift", Matrix::Zero(cfg.text_dim, 1));
        blk.up = nn::Linear::create(store, p + ".pw1", cfg.text_dim, cfg.text_dim * cfg.text_ff_mult, rng);
        blk.down = nn::Linear::create(store, p + ".pw2", cfg.text_dim * cfg.text_ff_mult, cfg.text_dim, rng);
        net.blocks_.push_back(blk);
    }
    net.pad_proj_ = nn::Linear::create(store, prefix + ".pad.proj", cfg.text_dim, cfg.pad_channels, rng);
    net.pad_vector_ = &store.add(prefix + ".pad.vector", Matrix::Zero(cfg.pad_channels, 1));
    net.ca_query_ = nn::Linear::create(store, prefix + ".ca.query", cfg.position_dim, cfg.ca_channels, rng, Init::Zero, false);
    net.ca_key_ = nn::Linear::create(store, prefix + ".ca.key", cfg.text_dim, cfg.ca_channels, rng, Init::Default, false);
    net.ca_key_pos_ =
        nn::Linear::create(store, prefix + ".ca.key_pos", cfg.position_dim, cfg.ca_channels, rng, Init::Default, false);
    net.ca_value_ = nn::Linear::create(store, prefix + ".ca.value", cfg.text_dim, cfg.ca_channels, rng);
    const int pad = cfg.lip_kernel / 2;
    net.lip_conv1_ = nn::Conv1d::create(store, prefix + ".lip.conv1", cfg.visual_dim, cfg.visual_dim, cfg.lip_kernel, 1,
                                        pad, 1, rng);
    net.lip_conv2_ = nn::Conv1d::create(store, prefix + ".lip.conv2", cfg.visual_dim, cfg.visual_dim, cfg.lip_kernel, 1,
                                        pad, 1, rng, Init::Zero);
    net.lip_proj_ = nn::Linear::create(store, prefix + ".lip.proj", cfg.visual_dim, cfg.model_dim, rng);
    return net;
}

Var ConditioningNet::encode_text(nn::Tape& tape, std::span<const int> ids) const {
    if (ids.empty()) throw std::invalid_argument("encode_text: empty token sequence");
    Var h = nn::gather_cols(tape.param(*embedding_), ids);
    for (const TextBlock& blk : blocks_) {
        Var y = blk.depthwise(h);
        y = nn::add_col(nn::mul_col(nn::layer_norm_cols(y), tape.param(*blk.norm_scale)), tape.param(*blk.norm_shift));
        y = blk.down(nn::gelu(blk.up(y)));
        h = nn::add(h, y);
    }
    return h;
}

Var expand_text_pad(Var text_emb, Var pad_column, Eigen::Index frames) {
    const Eigen::Index tokens = text_emb.cols();
    if (tokens > frames) {
        throw std::invalid_argument("expand_text_pad: text length " + std::to_string(tokens) + " exceeds " +
                                    std::to_string(frames) + " frames");
    }
    if (pad_column.rows() != text_emb.rows() || pad_column.cols() != 1) {
        throw std::invalid_argument("expand_text_pad: pad vector shape mismatch");
    }
    if (tokens == frames) return text_emb;
    std::vector<int> zeros(static_cast<std::size_t>(frames - tokens), 0);
    Var padding = nn::repeat_cols(pad_column, zeros);
    const Var parts[] = {text_emb, padding};
    return nn::concat_cols(parts);
}

Var ConditioningNet::expand_pad(Var text_emb, Eigen::Index frames) const {
    return expand_text_pad(text_emb, text_emb.tape().param(*pad_vector_), frames);
}

Var ConditioningNet::expand_cross_attention(Var h_text, Eigen::Index frames, Matrix* attention) const {
    nn::Tape& tape = h_text.tape();
    const Eigen::Index tokens = h_text.cols();
    if (tokens < 1) throw std::invalid_argument("expand_cross_attention: empty text");
    std::vector<double> frame_pos(static_cast<std::size_t>(frames));
    for (Eigen::Index i = 0; i < frames; ++i) frame_pos[static_cast<std::size_t>(i)] = static_cast<double>(i);
    // Token j is centred on the frame it would occupy under uniform durations.
    std::vector<double> token_pos(static_cast<std::size_t>(tokens));
    for (Eigen::Index j = 0; j < tokens; ++j) {
        token_pos[static_cast<std::size_t>(j)] =
            (static_cast<double>(j) + 0.5) * static_cast<double>(frames) / static_cast<double>(tokens);
    }
    Var q = ca_query_(tape.constant(nn::sinusoidal_positions(cfg_.position_dim, frame_pos)));
    Var k = nn::add(ca_key_(h_text), ca_key_pos_(tape.constant(nn::sinusoidal_positions(cfg_.position_dim, token_pos))));
    Var v = ca_value_(h_text);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.ca_channels));
    Var probs = nn::softmax_cols(nn::scale(nn::matmul(nn::transpose(k), q), inv_sqrt));  // [T x L]
    if (attention != nullptr) *attention = probs.value();
    return nn::matmul(v, probs);
}

std::vector<int> nearest_source_index(Eigen::Index source_frames, Eigen::Index frames) {
    if (source_frames < 1) throw std::invalid_argument("upsample: need at least one source frame");
    std::vector<int> idx(static_cast<std::size_t>(frames));
    for (Eigen::Index i = 0; i < frames; ++i) {
        idx[static_cast<std::size_t>(i)] = static_cast<int>(std::min(source_frames - 1, i * source_frames / frames));
    }
    return idx;
}

Var ConditioningNet::upsample_lip(Var lip_raw, Eigen::Index frames) const {
    if (lip_raw.rows() != cfg_.visual_dim) throw std::invalid_argument("upsample_lip: visual feature width mismatch");
    Var x = nn::repeat_cols(lip_raw, nearest_source_index(lip_raw.cols(), frames));
    x = nn::add(x, lip_conv2_(nn::mish(lip_conv1_(x))));
    return lip_proj_(x);
}

Var place_lip(Var x_lip, const MaskSpec& mask) {
    if (mask.empty()) return x_lip;
    return nn::mask_cols(x_lip, mask.region(x_lip.cols()));
}

ConditioningBundle ConditioningNet::build(nn::Tape& tape, const data::UtteranceRecord& record,
                                          const MaskSpec& mask) const {
    const Eigen::Index frames = record.frames();
    mask.check(frames);
    if (record.mel.rows() != cfg_.mel_bins) throw std::invalid_argument("conditioning: mel bin count mismatch");
    ConditioningBundle b;
    b.mask = mask;
    b.h_m = tape.constant(apply_mask(record.mel, mask));
    b.h_text = encode_text(tape, record.text_ids);
    b.text_pad = expand_pad(project_pad(b.h_text), frames);
    b.text_ca = expand_cross_attention(b.h_text, frames);
    b.x_lip = place_lip(upsample_lip(tape.constant(record.lip_raw), frames), mask);
    b.check_lengths();
    return b;
}

Var assemble_prior(Var h_m, Var text_pad, Var text_ca, Var x_t) {
    const Eigen::Index L = x_t.cols();
    if (h_m.cols() != L || text_pad.cols() != L || text_ca.cols() != L) {
        throw std::invalid_argument("assemble_prior: length mismatch between streams");
    }
    const Var parts[] = {x_t, h_m, text_pad, text_ca};
    return nn::concat_rows(parts);
}

}  // namespace cosync::conditioning
