#include "cosync/model.hpp"

#include <stdexcept>
#include <string>

namespace cosync {

conditioning::ConditioningConfig ModelConfig::conditioning() const {
    conditioning::ConditioningConfig c;
    c.mel_bins = mel_bins;
    c.vocab_size = vocab_size;
    c.visual_dim = visual_dim;
    c.model_dim = d;
    c.text_dim = text_dim;
    c.text_blocks = text_blocks;
    c.text_kernel = text_kernel;
    c.text_ff_mult = ff_mult;
    c.pad_channels = pad_channels;
    c.ca_channels = ca_channels;
    c.position_dim = position_dim;
    return c;
}

backbone::BackboneConfig ModelConfig::backbone() const {
    backbone::BackboneConfig b;
    b.n_layers = n_layers;
    b.d = d;
    b.n_heads = n_heads;
    b.p1_end = p1_end;
    b.p2_end = p2_end;
    b.in_channels = in_channels();
    b.out_channels = mel_bins;
    b.conv_pos_kernel = conv_pos_kernel;
    b.conv_pos_groups = conv_pos_groups;
    b.ff_mult = ff_mult;
    b.time_freq_dim = time_freq_dim;
    b.text_dim = text_dim;
    return b;
}

void ModelConfig::validate() const {
    auto check = [](const char* key, auto&& fn) {
        try {
            fn();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(key, e.what());
        }
    };
    check("d", [&] { conditioning().validate(); });
    check("n_layers", [&] { backbone().validate(); });
    if (align_dim <= 0) throw ConfigError("align_dim", "align_dim must be positive");
    if (p2_end >= n_layers) throw ConfigError("p2_end", "p2_end must leave at least one cross-attention layer");
    if (!(tau > 0.0)) throw ConfigError("tau", "tau must be positive");
    if (proj_dim <= 0) throw ConfigError("proj_dim", "proj_dim must be positive");
    if (ctc_hidden < 0) throw ConfigError("ctc_hidden", "ctc_hidden must be >= 0");
}

ModelConfig ModelConfig::read(KeyValueReader& r) {
    ModelConfig c;
    c.mel_bins = r.get_int("mel_bins", c.mel_bins);
    c.vocab_size = r.get_int("vocab_size", c.vocab_size);
    c.visual_dim = r.get_int("visual_dim", c.visual_dim);
    c.align_dim = r.get_int("align_dim", c.align_dim);
    c.d = r.get_int("d", c.d);
    c.n_layers = r.get_int("n_layers", c.n_layers);
    c.n_heads = r.get_int("n_heads", c.n_heads);
    c.p1_end = r.get_int("p1_end", c.p1_end);
    c.p2_end = r.get_int("p2_end", c.p2_end);
    c.text_dim = r.get_int("text_dim", c.text_dim);
    c.text_blocks = r.get_int("text_blocks", c.text_blocks);
    c.text_kernel = r.get_int("text_kernel", c.text_kernel);
    c.pad_channels = r.get_int("pad_channels", c.pad_channels);
    c.ca_channels = r.get_int("ca_channels", c.ca_channels);
    c.position_dim = r.get_int("position_dim", c.position_dim);
    c.conv_pos_kernel = r.get_int("conv_pos_kernel", c.conv_pos_kernel);
    c.conv_pos_groups = r.get_int("conv_pos_groups", c.conv_pos_groups);
    c.ff_mult = r.get_int("ff_mult", c.ff_mult);
    c.time_freq_dim = r.get_int("time_freq_dim", c.time_freq_dim);
    c.proj_dim = r.get_int("proj_dim", c.proj_dim);
    c.tau = r.get_double("tau", c.tau);
    c.ctc_hidden = r.get_int("ctc_hidden", c.ctc_hidden);
    c.init_seed = static_cast<std::uint64_t>(r.get_int64("init_seed", static_cast<long long>(c.init_seed)));
    c.validate();
    return c;
}

KeyValues ModelConfig::to_key_values() const {
    return {
        {"mel_bins", std::to_string(mel_bins)},
        {"vocab_size", std::to_string(vocab_size)},
        {"visual_dim", std::to_string(visual_dim)},
        {"align_dim", std::to_string(align_dim)},
        {"d", std::to_string(d)},
        {"n_layers", std::to_string(n_layers)},
        {"n_heads", std::to_string(n_heads)},
        {"p1_end", std::to_string(p1_end)},
        {"p2_end", std::to_string(p2_end)},
        {"text_dim", std::to_string(text_dim)},
        {"text_blocks", std::to_string(text_blocks)},
        {"text_kernel", std::to_string(text_kernel)},
        {"pad_channels", std::to_string(pad_channels)},
        {"ca_channels", std::to_string(ca_channels)},
        {"position_dim", std::to_string(position_dim)},
        {"conv_pos_kernel", std::to_string(conv_pos_kernel)},
        {"conv_pos_groups", std::to_string(conv_pos_groups)},
        {"ff_mult", std::to_string(ff_mult)},
        {"time_freq_dim", std::to_string(time_freq_dim)},
        {"proj_dim", std::to_string(proj_dim)},
        {"tau", format_double(tau)},
        {"ctc_hidden", std::to_string(ctc_hidden)},
        {"init_seed", std::to_string(init_seed)},
    };
}

BundleValues BundleValues::from(const conditioning::ConditioningBundle& b) {
    return {b.h_m.value(), b.text_pad.value(), b.text_ca.value(), b.x_lip.value(), b.h_text.value(), b.mask};
}

conditioning::ConditioningBundle BundleValues::on(nn::Tape& tape) const {
    conditioning::ConditioningBundle b;
    b.h_m = tape.constant(h_m);
    b.text_pad = tape.constant(text_pad);
    b.text_ca = tape.constant(text_ca);
    b.x_lip = tape.constant(x_lip);
    b.h_text = tape.constant(h_text);
    b.mask = mask;
    return b;
}

std::unique_ptr<CoSyncModel> CoSyncModel::create(const ModelConfig& cfg) {
    cfg.validate();
    auto m = std::unique_ptr<CoSyncModel>(new CoSyncModel());
    m->cfg_ = cfg;
    nn::Rng rng(cfg.init_seed);
    m->cond_ = conditioning::ConditioningNet::create(m->store_, "cond", cfg.conditioning(), rng);
    m->backbone_ = backbone::Backbone::create(m->store_, "backbone", cfg.backbone(), rng);
    jsar::ContrastiveConfig cc;
    cc.tau = cfg.tau;
    cc.proj_dim = cfg.proj_dim;
    m->contrastive_ = jsar::ContrastiveHead::create(m->store_, "jsar.cl", cfg.d, cfg.align_dim, cc, rng);
    jsar::CtcHeadConfig hc;
    hc.vocab_size = cfg.vocab_size + 1;
    hc.blank_id = 0;
    hc.hidden = cfg.ctc_hidden;
    m->ctc_ = jsar::CtcHead::create(m->store_, "jsar.ctc", cfg.d, hc, rng);
    return m;
}

std::vector<int> ctc_labels(const std::vector<int>& text_ids) {
    std::vector<int> out;
    out.reserve(text_ids.size());
    for (int id : text_ids) out.push_back(id + 1);
    return out;
}

std::string record_mismatch(const ModelConfig& cfg, const data::UtteranceRecord& record, bool for_training) {
    const std::string who = "record " + record.utt_id + ": ";
    auto rows = [&](const char* what, Eigen::Index got, int want) {
        return who + what + " has " + std::to_string(got) + " rows, model expects " + std::to_string(want);
    };
    if (record.mel.rows() != cfg.mel_bins) return rows("mel", record.mel.rows(), cfg.mel_bins);
    if (record.lip_raw.rows() != cfg.visual_dim) return rows("lip_raw", record.lip_raw.rows(), cfg.visual_dim);
    if (record.align_feat.rows() != cfg.align_dim) return rows("align_feat", record.align_feat.rows(), cfg.align_dim);
    for (int id : record.text_ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            return who + "token " + std::to_string(id) + " outside the model vocabulary of " +
                   std::to_string(cfg.vocab_size);
        }
    }
    if (!for_training) return "";
    const Eigen::Index L = record.frames();
    if (L < 4) return who + std::to_string(L) + " frames, the CTC head needs at least 4";
    const auto need = jsar::ctc_min_frames(ctc_labels(record.text_ids));
    const auto have = jsar::ctc_output_length(L);
    if (need > have) {
        return who + "script needs " + std::to_string(need) + " CTC frames but " + std::to_string(L) +
               " mel frames give " + std::to_string(have);
    }
    return "";
}

SampleLoss CoSyncModel::sample_loss(nn::Tape& tape, const data::UtteranceRecord& record,
                                    const conditioning::MaskSpec& mask, flow::ConditionBranch branch,
                                    const flow::FlowBatch& batch, bool region_loss) const {
    const auto bundle = flow::apply_branch(cond_.build(tape, record, mask), branch);
    const auto fwd = backbone_.forward(tape.constant(batch.xt), bundle, batch.t);
    SampleLoss out;
    out.l_fm = flow::cfm_loss(fwd.v, batch, region_loss ? mask : conditioning::MaskSpec::none());
    if (branch == flow::ConditionBranch::Full) {
        out.l_cl = contrastive_(*fwd.taps.z_ca, tape.constant(record.align_feat));
        const auto labels = ctc_labels(record.text_ids);
        out.l_ctc = jsar::ctc_loss(ctc_(fwd.taps.z_final), labels, 0);
    }
    return out;
}

BundleValues CoSyncModel::condition(const data::UtteranceRecord& record, const conditioning::MaskSpec& mask) const {
    nn::Tape tape(false);
    return BundleValues::from(cond_.build(tape, record, mask));
}

Matrix CoSyncModel::field(const BundleValues& bundle, const Matrix& x, double t, flow::ConditionBranch branch) const {
    nn::Tape tape(false);
    const auto b = flow::apply_branch(bundle.on(tape), branch);
    return backbone_.forward(tape.constant(x), b, t).v.value();
}

flow::VectorField CoSyncModel::vector_field(const BundleValues& bundle) const {
    return [this, bundle](const Matrix& x, double t, flow::ConditionBranch branch) {
        return field(bundle, x, t, branch);
    };
}

flow::SampleResult CoSyncModel::infill(const data::UtteranceRecord& record, const conditioning::MaskSpec& mask,
                                       int nfe, const flow::GuidanceSpec& guidance, const Matrix& x0) const {
    if (x0.rows() != record.mel.rows() || x0.cols() != record.mel.cols()) {
        throw std::invalid_argument("infill: x0 shape differs from the record mel");
    }
    auto result = flow::euler_sample(vector_field(condition(record, mask)), guidance, nfe, x0);
    if (!mask.empty()) result.mel = flow::splice_reference(result.mel, record.mel, mask);
    return result;
}

}  // namespace cosync
