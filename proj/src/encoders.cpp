#include "semprobe/encoders.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace semprobe {

namespace {

void fail_field(const std::string& field, const std::string& why) {
    throw std::runtime_error("encoder config: field `" + field + "` " + why);
}

double backbone_scale(std::size_t d) { return 1.0 / std::sqrt(double(d)); }

// Query/key weights start smaller than the rest of the backbone so initial
// attention logits are tight around zero (near-uniform rows). This keeps a
// moderate CLS self-bias able to dominate the row even at 32 patches.
double qk_scale(std::size_t d) { return 0.35 / std::sqrt(double(d)); }

TransformerLayer random_transformer_layer(std::size_t d, Rng& rng) {
    TransformerLayer l;
    const double s = backbone_scale(d);
    l.attn.w_q = Tensor::randn({d, d}, rng, qk_scale(d));
    l.attn.w_k = Tensor::randn({d, d}, rng, qk_scale(d));
    l.attn.w_v = Tensor::randn({d, d}, rng, s);
    l.ffn.w1 = Tensor::randn({d, 2 * d}, rng, s);
    l.ffn.w2 = Tensor::randn({2 * d, d}, rng, backbone_scale(2 * d));
    return l;
}

/// Visits every tensor in the model under a stable key, in a fixed order.
void for_each_tensor(DualEncoder& m,
                     const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("vision.patch_embed", m.vision.patch_embed);
    fn("vision.cls_token", m.vision.cls_token);
    fn("vision.pos_embed", m.vision.pos_embed);
    for (std::size_t j = 0; j < m.vision.layers.size(); ++j) {
        const std::string base = "vision.layer" + std::to_string(j + 1);
        fn(base + ".w_q", m.vision.layers[j].attn.w_q);
        fn(base + ".w_k", m.vision.layers[j].attn.w_k);
        fn(base + ".w_v", m.vision.layers[j].attn.w_v);
        fn(base + ".ffn.w1", m.vision.layers[j].ffn.w1);
        fn(base + ".ffn.w2", m.vision.layers[j].ffn.w2);
    }
    fn("vision.proj", m.vision.proj);
    fn("text.token_embed", m.text.token_embed);
    fn("text.pos_embed", m.text.pos_embed);
    for (std::size_t j = 0; j < m.text.layers.size(); ++j) {
        const std::string base = "text.layer" + std::to_string(j + 1);
        fn(base + ".w_q", m.text.layers[j].attn.w_q);
        fn(base + ".w_k", m.text.layers[j].attn.w_k);
        fn(base + ".w_v", m.text.layers[j].attn.w_v);
        fn(base + ".ffn.w1", m.text.layers[j].ffn.w1);
        fn(base + ".ffn.w2", m.text.layers[j].ffn.w2);
    }
    fn("text.proj", m.text.proj);
    auto lora_family = [&](const char* tag, std::vector<LoraPair>& q,
                           std::vector<LoraPair>& k, std::vector<LoraPair>& v) {
        for (std::size_t j = 0; j < q.size(); ++j) {
            const std::string base =
                std::string("adapter.") + tag + ".layer" + std::to_string(j + 1);
            fn(base + ".q.a", q[j].a);
            fn(base + ".q.b", q[j].b);
            fn(base + ".k.a", k[j].a);
            fn(base + ".k.b", k[j].b);
            fn(base + ".v.a", v[j].a);
            fn(base + ".v.b", v[j].b);
        }
    };
    lora_family("vision", m.v_lora_q, m.v_lora_k, m.v_lora_v);
    lora_family("text", m.t_lora_q, m.t_lora_k, m.t_lora_v);
    for (std::size_t j = 0; j < m.prompts.size(); ++j) {
        const std::string base = "prompt.layer" + std::to_string(j + 1);
        fn(base + ".tokens", m.prompts[j]);
        fn(base + ".coupling", m.couplings[j]);
    }
    for (std::size_t j = 0; j < m.eos_projections.size(); ++j) {
        fn("ear.projection" + std::to_string(j + 1), m.eos_projections[j]);
    }
}

/// The per-layer transformer block the current mode actually runs: LoRA
/// adapters fold in only in lora mode, so the other modes keep the plain
/// frozen weights (bitwise, not just numerically).
TransformerLayer mode_layer(const DualEncoder& m, bool vision_side,
                            std::size_t j) {
    TransformerLayer l =
        vision_side ? m.vision.layers[j] : m.text.layers[j];
    if (m.mode == TuneMode::lora) {
        l.attn.lora_q = vision_side ? m.v_lora_q[j] : m.t_lora_q[j];
        l.attn.lora_k = vision_side ? m.v_lora_k[j] : m.t_lora_k[j];
        l.attn.lora_v = vision_side ? m.v_lora_v[j] : m.t_lora_v[j];
    }
    return l;
}

void require_unit(const Tensor& v, const char* what) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v.at(i) * v.at(i);
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
        throw std::runtime_error(std::string(what) +
                                 ": expected unit-norm vectors, got norm " +
                                 std::to_string(std::sqrt(s)));
    }
}

} // namespace

std::string to_string(TuneMode m) {
    switch (m) {
    case TuneMode::frozen: return "frozen";
    case TuneMode::lora: return "lora";
    case TuneMode::prompt: return "prompt";
    }
    throw std::runtime_error("unknown tune mode");
}

TuneMode tune_mode_from_string(const std::string& s) {
    if (s == "frozen") return TuneMode::frozen;
    if (s == "lora") return TuneMode::lora;
    if (s == "prompt") return TuneMode::prompt;
    throw std::runtime_error("mode must be one of frozen|lora|prompt, got `" +
                             s + "`");
}

void EncoderConfig::validate() const {
    if (layers < 1) fail_field("layers", "must be >= 1");
    if (d_in < 1) fail_field("d_in", "must be >= 1");
    if (d_v < 2) fail_field("d_v", "must be >= 2");
    if (d_t < 2) fail_field("d_t", "must be >= 2");
    if (d_shared < 2) fail_field("d_shared", "must be >= 2");
    if (patches < 1) fail_field("patches", "must be >= 1");
    if (vocab < 2) fail_field("vocab", "must be >= 2 (EOS plus content)");
    if (max_text_len < 2) fail_field("max_text_len", "must be >= 2");
    if (prompt_len < 1) fail_field("prompt_len", "must be >= 1");
    if (lora_rank < 1) fail_field("lora_rank", "must be >= 1");
    if (ear_first < 1) fail_field("ear_first", "must be >= 1");
    if (ear_last < ear_first) fail_field("ear_last", "must be >= ear_first");
    if (ear_last > layers) {
        fail_field("ear_last",
                   "must be <= layers (" + std::to_string(layers) + ")");
    }
}

DualEncoder make_dual_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DualEncoder m;
    m.cfg = cfg;

    Rng vr(derive_seed(seed, 0));
    m.vision.patch_embed =
        Tensor::randn({cfg.d_in, cfg.d_v}, vr, backbone_scale(cfg.d_in));
    m.vision.cls_token = Tensor::randn({cfg.d_v}, vr, 0.02);
    m.vision.pos_embed =
        Tensor::randn({1 + cfg.patches, cfg.d_v}, vr, 0.02);
    for (std::size_t j = 0; j < cfg.layers; ++j)
        m.vision.layers.push_back(random_transformer_layer(cfg.d_v, vr));
    m.vision.proj =
        Tensor::randn({cfg.d_v, cfg.d_shared}, vr, backbone_scale(cfg.d_v));

    Rng tr(derive_seed(seed, 1));
    m.text.token_embed =
        Tensor::randn({cfg.vocab, cfg.d_t}, tr, backbone_scale(cfg.d_t));
    m.text.pos_embed = Tensor::randn({cfg.max_text_len, cfg.d_t}, tr, 0.02);
    for (std::size_t j = 0; j < cfg.layers; ++j)
        m.text.layers.push_back(random_transformer_layer(cfg.d_t, tr));
    m.text.proj =
        Tensor::randn({cfg.d_t, cfg.d_shared}, tr, backbone_scale(cfg.d_t));

    // Adapters: the input half starts random, the output half at zero, so
    // every adapter's contribution is exactly zero until it trains.
    auto make_lora = [&](std::size_t d, Rng& rng) {
        return LoraPair{Tensor::randn({d, cfg.lora_rank}, rng,
                                      backbone_scale(d)),
                        Tensor::zeros({cfg.lora_rank, d})};
    };
    Rng vlr(derive_seed(seed, 2));
    for (std::size_t j = 0; j < cfg.layers; ++j) {
        m.v_lora_q.push_back(make_lora(cfg.d_v, vlr));
        m.v_lora_k.push_back(make_lora(cfg.d_v, vlr));
        m.v_lora_v.push_back(make_lora(cfg.d_v, vlr));
    }
    Rng tlr(derive_seed(seed, 3));
    for (std::size_t j = 0; j < cfg.layers; ++j) {
        m.t_lora_q.push_back(make_lora(cfg.d_t, tlr));
        m.t_lora_k.push_back(make_lora(cfg.d_t, tlr));
        m.t_lora_v.push_back(make_lora(cfg.d_t, tlr));
    }
    Rng pr(derive_seed(seed, 4));
    for (std::size_t j = 0; j < cfg.layers; ++j) {
        m.prompts.push_back(Tensor::zeros({cfg.prompt_len, cfg.d_t}));
        m.couplings.push_back(
            Tensor::randn({cfg.d_t, cfg.d_v}, pr, backbone_scale(cfg.d_t)));
    }
    Rng er(derive_seed(seed, 5));
    const std::size_t n_proj =
        cfg.shared_eos_projection ? 1 : cfg.ear_last - cfg.ear_first + 1;
    for (std::size_t j = 0; j < n_proj; ++j) {
        m.eos_projections.push_back(
            Tensor::randn({cfg.d_t, cfg.d_v}, er, backbone_scale(cfg.d_t)));
    }
    return m;
}

EarContext make_ear_context(const DualEncoder& m,
                            const std::vector<Tensor>& per_layer_eos,
                            double alpha) {
    if (per_layer_eos.size() != m.cfg.layers) {
        throw std::runtime_error(
            "make_ear_context: need one EOS state per layer, got " +
            std::to_string(per_layer_eos.size()) + " for " +
            std::to_string(m.cfg.layers) + " layers");
    }
    EarContext ctx;
    ctx.alpha = alpha;
    for (std::size_t layer = m.cfg.ear_first; layer <= m.cfg.ear_last;
         ++layer) {
        EosQuery q;
        q.t_eos = per_layer_eos[layer - 1];
        q.e = m.eos_projections[m.cfg.shared_eos_projection
                                    ? 0
                                    : layer - m.cfg.ear_first];
        ctx.queries.emplace(layer, std::move(q));
    }
    return ctx;
}

VisionOut vision_forward(const DualEncoder& m, const Tensor& image,
                         const EarContext* ear) {
    const EncoderConfig& cfg = m.cfg;
    if (!image.defined() || image.rank() != 2 ||
        image.shape()[0] != cfg.patches || image.shape()[1] != cfg.d_in) {
        throw std::runtime_error(
            "vision_forward: image must be a " + std::to_string(cfg.patches) +
            " x " + std::to_string(cfg.d_in) + " patch matrix, got " +
            (image.defined() ? shape_str(image.shape()) : "undefined"));
    }
    if (ear) {
        for (const auto& [layer, q] : ear->queries) {
            (void)q;
            if (!cfg.in_ear_range(layer)) {
                throw std::runtime_error(
                    "vision_forward: rectification requested on layer " +
                    std::to_string(layer) + " outside the configured range " +
                    std::to_string(cfg.ear_first) + ".." +
                    std::to_string(cfg.ear_last));
            }
        }
    }

    Tensor seq = add(vstack({m.vision.cls_token,
                             matmul(image, m.vision.patch_embed)}),
                     m.vision.pos_embed);

    VisionOut out;
    for (std::size_t j = 0; j < cfg.layers; ++j) {
        TransformerLayer layer = mode_layer(m, true, j);
        std::optional<EarAttachment> attach;
        if (ear) {
            auto it = ear->queries.find(j + 1);
            if (it != ear->queries.end()) {
                attach = EarAttachment{it->second, ear->alpha};
            }
        }
        std::optional<Tensor> prompt_rows;
        if (m.mode == TuneMode::prompt) {
            prompt_rows = matmul(m.prompts[j], m.couplings[j]);
        }
        LayerTrace trace;
        seq = layer_forward(seq, layer, attach, prompt_rows, &trace);
        out.traces.push_back(std::move(trace));
    }
    out.feature =
        l2_normalize(matmul(layer_norm(row(seq, 0)), m.vision.proj));
    return out;
}

TextOut text_forward(const DualEncoder& m,
                     const std::vector<std::size_t>& token_ids) {
    const EncoderConfig& cfg = m.cfg;
    if (token_ids.size() < 2) {
        throw std::runtime_error("text_forward: sequence needs at least one "
                                 "content token before the EOS");
    }
    if (token_ids.size() > cfg.max_text_len) {
        throw std::runtime_error(
            "text_forward: sequence length " +
            std::to_string(token_ids.size()) + " exceeds max_text_len " +
            std::to_string(cfg.max_text_len));
    }
    if (token_ids.back() != kEosId) {
        throw std::runtime_error(
            "text_forward: sequence must end with the EOS token");
    }
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] >= cfg.vocab) {
            throw std::runtime_error("text_forward: token id " +
                                     std::to_string(token_ids[i]) +
                                     " outside vocabulary of size " +
                                     std::to_string(cfg.vocab));
        }
        if (i + 1 < token_ids.size() && token_ids[i] == kEosId) {
            throw std::runtime_error(
                "text_forward: EOS may appear only at the final position");
        }
    }

    const std::size_t len = token_ids.size();
    Tensor seq = add(gather_rows(m.text.token_embed, token_ids),
                     rows(m.text.pos_embed, 0, len));

    TextOut out;
    for (std::size_t j = 0; j < cfg.layers; ++j) {
        TransformerLayer layer = mode_layer(m, false, j);
        std::optional<Tensor> prompt_rows;
        if (m.mode == TuneMode::prompt) prompt_rows = m.prompts[j];
        seq = layer_forward(seq, layer, std::nullopt, prompt_rows);
        out.per_layer_eos.push_back(row(seq, len - 1));
    }
    out.feature =
        l2_normalize(matmul(layer_norm(row(seq, len - 1)), m.text.proj));
    return out;
}

Tensor class_text_weights(const std::vector<std::vector<Tensor>>& per_class) {
    if (per_class.empty()) {
        throw std::runtime_error("class_text_weights: no classes");
    }
    std::vector<Tensor> rows_out;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        const auto& feats = per_class[c];
        if (feats.empty()) {
            throw std::runtime_error(
                "class_text_weights: class " + std::to_string(c) +
                " has no text features");
        }
        for (const Tensor& f : feats) require_unit(f, "class_text_weights");
        Tensor mean_vec = mean_rows(vstack(feats));
        double s = 0.0;
        for (std::size_t i = 0; i < mean_vec.size(); ++i)
            s += mean_vec.at(i) * mean_vec.at(i);
        if (std::sqrt(s) <= 1e-12) {
            throw std::runtime_error(
                "class_text_weights: class " + std::to_string(c) +
                " has a degenerate (near-antipodal) prompt pool with "
                "near-zero mean");
        }
        rows_out.push_back(l2_normalize(mean_vec));
    }
    return vstack(rows_out);
}

std::vector<Tensor*> trainable_leaves(DualEncoder& m,
                                      bool include_eos_projection) {
    std::vector<Tensor*> out;
    switch (m.mode) {
    case TuneMode::frozen:
        return out; // nothing trains, rectification included
    case TuneMode::lora:
        for (std::size_t j = 0; j < m.cfg.layers; ++j) {
            for (auto* fam : {&m.v_lora_q, &m.v_lora_k, &m.v_lora_v,
                              &m.t_lora_q, &m.t_lora_k, &m.t_lora_v}) {
                out.push_back(&(*fam)[j].a);
                out.push_back(&(*fam)[j].b);
            }
        }
        break;
    case TuneMode::prompt:
        for (std::size_t j = 0; j < m.cfg.layers; ++j) {
            out.push_back(&m.prompts[j]);
            out.push_back(&m.couplings[j]);
        }
        break;
    }
    if (include_eos_projection) {
        for (Tensor& e : m.eos_projections) out.push_back(&e);
    }
    return out;
}

void mark_trainable(DualEncoder& m, bool include_eos_projection) {
    for (Tensor* t : trainable_leaves(m, include_eos_projection)) {
        *t = t->detached(true);
    }
}

DualEncoder detached_clone(const DualEncoder& m) {
    DualEncoder out = m;
    for_each_tensor(out, [](const std::string&, Tensor& t) {
        t = t.detached(false);
    });
    return out;
}

void save_params(const DualEncoder& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) {
        throw std::runtime_error("save_params: cannot open " + path);
    }
    f << "semprobe-params v1\n";
    const EncoderConfig& c = m.cfg;
    f << "config layers " << c.layers << "\n";
    f << "config d_in " << c.d_in << "\n";
    f << "config d_v " << c.d_v << "\n";
    f << "config d_t " << c.d_t << "\n";
    f << "config d_shared " << c.d_shared << "\n";
    f << "config patches " << c.patches << "\n";
    f << "config vocab " << c.vocab << "\n";
    f << "config max_text_len " << c.max_text_len << "\n";
    f << "config prompt_len " << c.prompt_len << "\n";
    f << "config lora_rank " << c.lora_rank << "\n";
    f << "config ear_first " << c.ear_first << "\n";
    f << "config ear_last " << c.ear_last << "\n";
    f << "config shared_eos_projection " << (c.shared_eos_projection ? 1 : 0)
      << "\n";
    f << "mode " << to_string(m.mode) << "\n";
    char buf[64];
    for (std::size_t j = 0; j < c.layers; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g",
                      m.vision.layers[j].attn.cls_self_bias);
        f << "bias vision.layer" << (j + 1) << " " << buf << "\n";
    }
    for_each_tensor(const_cast<DualEncoder&>(m),
                    [&](const std::string& key, Tensor& t) {
                        f << "tensor " << key << " " << t.rank();
                        for (std::size_t d : t.shape()) f << " " << d;
                        f << "\n";
                        for (std::size_t i = 0; i < t.size(); ++i) {
                            std::snprintf(buf, sizeof buf, "%.17g", t.at(i));
                            f << (i ? " " : "") << buf;
                        }
                        f << "\n";
                    });
    if (!f) {
        throw std::runtime_error("save_params: write failed for " + path);
    }
}

DualEncoder load_params(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("load_params: cannot open " + path);
    }
    std::string line;
    if (!std::getline(f, line) || line != "semprobe-params v1") {
        throw std::runtime_error("load_params: " + path +
                                 " is not a semprobe-params v1 file");
    }
    EncoderConfig cfg;
    TuneMode mode = TuneMode::frozen;
    std::map<std::string, double> biases;
    std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string kind;
        is >> kind;
        if (kind == "config") {
            std::string field;
            std::size_t value = 0;
            is >> field >> value;
            if (field == "layers") cfg.layers = value;
            else if (field == "d_in") cfg.d_in = value;
            else if (field == "d_v") cfg.d_v = value;
            else if (field == "d_t") cfg.d_t = value;
            else if (field == "d_shared") cfg.d_shared = value;
            else if (field == "patches") cfg.patches = value;
            else if (field == "vocab") cfg.vocab = value;
            else if (field == "max_text_len") cfg.max_text_len = value;
            else if (field == "prompt_len") cfg.prompt_len = value;
            else if (field == "lora_rank") cfg.lora_rank = value;
            else if (field == "ear_first") cfg.ear_first = value;
            else if (field == "ear_last") cfg.ear_last = value;
            else if (field == "shared_eos_projection")
                cfg.shared_eos_projection = value != 0;
            else
                throw std::runtime_error(
                    "load_params: unknown config field `" + field + "`");
        } else if (kind == "mode") {
            std::string s;
            is >> s;
            mode = tune_mode_from_string(s);
        } else if (kind == "bias") {
            std::string key;
            double v = 0.0;
            is >> key >> v;
            biases[key] = v;
        } else if (kind == "tensor") {
            std::string key;
            std::size_t rank = 0;
            is >> key >> rank;
            Shape shape(rank);
            for (std::size_t i = 0; i < rank; ++i) is >> shape[i];
            if (!is) {
                throw std::runtime_error(
                    "load_params: malformed tensor header for `" + key + "`");
            }
            std::string values_line;
            if (!std::getline(f, values_line)) {
                throw std::runtime_error(
                    "load_params: missing values for `" + key + "`");
            }
            std::istringstream vs(values_line);
            std::vector<double> data(shape_size(shape));
            for (double& x : data) {
                if (!(vs >> x)) {
                    throw std::runtime_error(
                        "load_params: truncated values for `" + key + "`");
                }
            }
            tensors[key] = {std::move(shape), std::move(data)};
        } else {
            throw std::runtime_error("load_params: unknown record `" + kind +
                                     "`");
        }
    }

    // Build the structure from the config, then overwrite every tensor.
    DualEncoder m = make_dual_encoder(cfg, 0);
    m.mode = mode;
    for (std::size_t j = 0; j < cfg.layers; ++j) {
        auto it = biases.find("vision.layer" + std::to_string(j + 1));
        if (it != biases.end()) {
            m.vision.layers[j].attn.cls_self_bias = it->second;
        }
    }
    std::size_t filled = 0;
    for_each_tensor(m, [&](const std::string& key, Tensor& t) {
        auto it = tensors.find(key);
        if (it == tensors.end()) {
            throw std::runtime_error("load_params: missing tensor `" + key +
                                     "`");
        }
        if (it->second.first != t.shape()) {
            throw std::runtime_error("load_params: tensor `" + key +
                                     "` has shape " +
                                     shape_str(it->second.first) +
                                     ", expected " + shape_str(t.shape()));
        }
        t = Tensor::from_data(it->second.first, it->second.second);
        ++filled;
    });
    if (filled != tensors.size()) {
        throw std::runtime_error(
            "load_params: file carries " + std::to_string(tensors.size()) +
            " tensors but the model has " + std::to_string(filled));
    }
    return m;
}

} // namespace semprobe
