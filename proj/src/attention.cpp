#include "semprobe/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace semprobe {

namespace {

void require_square(const Tensor& w, const char* name) {
    if (!w.defined() || w.rank() != 2 || w.shape()[0] != w.shape()[1]) {
        throw std::runtime_error(std::string(name) +
                                 ": expected a square matrix");
    }
}

/// tokens must be (1+n) x d_v with n >= 1.
void require_visual_tokens(const Tensor& tokens, const char* op) {
    if (!tokens.defined() || tokens.rank() != 2 || tokens.shape()[0] < 2) {
        throw std::runtime_error(
            std::string(op) +
            ": visual tokens must be a (1+n) x d_v matrix with n >= 1" +
            (tokens.defined() ? ", got " + shape_str(tokens.shape()) : ""));
    }
}

void require_normalized_row(const Tensor& row, const char* op) {
    if (!row.defined() || row.rank() != 1 || row.size() == 0) {
        throw std::runtime_error(std::string(op) +
                                 ": expected a non-empty attention row");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        const double x = row.at(i);
        if (x < 0.0 || x > 1.0) {
            throw std::runtime_error(std::string(op) +
                                     ": row entries must lie in [0,1]");
        }
        s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) {
        throw std::runtime_error(std::string(op) +
                                 ": row must sum to 1 within 1e-9, got " +
                                 std::to_string(s));
    }
}

} // namespace

Tensor effective_weight(const Tensor& base,
                        const std::optional<LoraPair>& lora) {
    require_square(base, "effective_weight");
    if (!lora) return base;
    const Tensor& a = lora->a;
    const Tensor& b = lora->b;
    if (!a.defined() || !b.defined() || a.rank() != 2 || b.rank() != 2) {
        throw std::runtime_error("effective_weight: adapter pair must be "
                                 "matrices");
    }
    const std::size_t d = base.shape()[0];
    const std::size_t r = a.shape()[1];
    if (r < 1) {
        throw std::runtime_error("effective_weight: adapter rank must be >= 1");
    }
    if (a.shape()[0] != d || b.shape()[0] != r || b.shape()[1] != d) {
        throw std::runtime_error(
            "effective_weight: adapter shapes " + shape_str(a.shape()) + " x " +
            shape_str(b.shape()) + " do not fit base " +
            shape_str(base.shape()));
    }
    return add(base, matmul(a, b));
}

AttentionLayerParams apply_lora(const AttentionLayerParams& p, char which,
                                const Tensor& a, const Tensor& b) {
    AttentionLayerParams out = p;
    LoraPair pair{a, b};
    switch (which) {
    case 'q':
        effective_weight(p.w_q, pair); // shape validation
        out.lora_q = pair;
        break;
    case 'k':
        effective_weight(p.w_k, pair);
        out.lora_k = pair;
        break;
    case 'v':
        effective_weight(p.w_v, pair);
        out.lora_v = pair;
        break;
    default:
        throw std::runtime_error(
            "apply_lora: target must be one of 'q', 'k', 'v'");
    }
    return out;
}

Tensor cls_attention(const Tensor& tokens, const AttentionLayerParams& p) {
    require_visual_tokens(tokens, "cls_attention");
    const std::size_t d_v = tokens.shape()[1];
    Tensor wq = effective_weight(p.w_q, p.lora_q);
    Tensor wk = effective_weight(p.w_k, p.lora_k);
    if (wq.shape()[0] != d_v || wk.shape()[0] != d_v) {
        throw std::runtime_error("cls_attention: weight width does not match "
                                 "token width " + std::to_string(d_v));
    }
    Tensor q = matmul(row(tokens, 0), wq);        // d_v
    Tensor k = matmul(tokens, wk);                // (1+n) x d_v
    Tensor logits = mul_scalar(matmul(k, q), 1.0 / std::sqrt(double(d_v)));
    if (p.cls_self_bias != 0.0) {
        logits = add(logits,
                     concat(Tensor::from_data({1}, {p.cls_self_bias}),
                            Tensor::zeros({tokens.shape()[0] - 1})));
    }
    return softmax(logits);
}

Tensor eos_cross_attention(const Tensor& tokens, const EosQuery& q,
                           const AttentionLayerParams& p) {
    require_visual_tokens(tokens, "eos_cross_attention");
    const std::size_t d_v = tokens.shape()[1];
    if (!q.t_eos.defined() || q.t_eos.rank() != 1) {
        throw std::runtime_error(
            "eos_cross_attention: t_eos must be a vector");
    }
    if (!q.e.defined() || q.e.rank() != 2 ||
        q.e.shape()[0] != q.t_eos.size() || q.e.shape()[1] != d_v) {
        throw std::runtime_error(
            "eos_cross_attention: projection must be d_t x d_v with d_t "
            "matching t_eos; got " +
            (q.e.defined() ? shape_str(q.e.shape()) : std::string("none")));
    }
    Tensor wq = q.w_q_cross ? *q.w_q_cross : effective_weight(p.w_q, p.lora_q);
    Tensor wk = q.w_k_cross ? *q.w_k_cross : effective_weight(p.w_k, p.lora_k);
    require_square(wq, "eos_cross_attention");
    if (wq.shape()[0] != d_v || wk.shape()[0] != d_v) {
        throw std::runtime_error("eos_cross_attention: weight width does not "
                                 "match token width " + std::to_string(d_v));
    }
    Tensor query = matmul(matmul(q.t_eos, q.e), wq);           // d_v
    Tensor patches = rows(tokens, 1, tokens.shape()[0]);       // n x d_v
    Tensor keys = matmul(patches, wk);                         // n x d_v
    Tensor logits =
        mul_scalar(matmul(keys, query), 1.0 / std::sqrt(double(d_v)));
    return softmax(logits);
}

Tensor rectify_attention(const Tensor& cls_row, const Tensor& eos_row,
                         double alpha) {
    require_normalized_row(cls_row, "rectify_attention");
    require_normalized_row(eos_row, "rectify_attention");
    if (cls_row.size() != eos_row.size() + 1) {
        throw std::runtime_error(
            "rectify_attention: cls row must be one entry longer than the "
            "eos row, got " + std::to_string(cls_row.size()) + " vs " +
            std::to_string(eos_row.size()));
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw std::runtime_error(
            "rectify_attention: alpha must lie in [0,1], got " +
            std::to_string(alpha));
    }
    // The leading zero pad keeps index 0 at exactly alpha*cls_row[0]:
    // (1-alpha)*0 contributes nothing, bit for bit.
    Tensor padded = concat(Tensor::zeros({1}), eos_row);
    return add(mul_scalar(cls_row, alpha), mul_scalar(padded, 1.0 - alpha));
}

Tensor rectified_cls_feature(const Tensor& attn, const Tensor& tokens,
                             const AttentionLayerParams& p) {
    require_visual_tokens(tokens, "rectified_cls_feature");
    require_normalized_row(attn, "rectified_cls_feature");
    if (attn.size() != tokens.shape()[0]) {
        throw std::runtime_error(
            "rectified_cls_feature: row length " +
            std::to_string(attn.size()) + " does not match token count " +
            std::to_string(tokens.shape()[0]));
    }
    Tensor wv = effective_weight(p.w_v, p.lora_v);
    if (wv.shape()[0] != tokens.shape()[1]) {
        throw std::runtime_error("rectified_cls_feature: value weight width "
                                 "does not match token width");
    }
    return matmul(attn, matmul(tokens, wv));
}

Tensor layer_forward(const Tensor& tokens, const TransformerLayer& layer,
                     const std::optional<EarAttachment>& ear,
                     const std::optional<Tensor>& prompt_rows,
                     LayerTrace* trace) {
    require_visual_tokens(tokens, "layer_forward");
    const std::size_t rows_n = tokens.shape()[0];
    const std::size_t d_v = tokens.shape()[1];
    const AttentionLayerParams& p = layer.attn;

    Tensor wq = effective_weight(p.w_q, p.lora_q);
    Tensor wk = effective_weight(p.w_k, p.lora_k);
    Tensor wv = effective_weight(p.w_v, p.lora_v);
    if (wq.shape()[0] != d_v) {
        throw std::runtime_error("layer_forward: weight width does not match "
                                 "token width " + std::to_string(d_v));
    }

    Tensor h = layer_norm(tokens);
    Tensor q = matmul(h, wq);
    Tensor k = matmul(h, wk);
    Tensor v = matmul(h, wv);

    Tensor logits =
        mul_scalar(matmul(q, transpose(k)), 1.0 / std::sqrt(double(d_v)));
    if (p.cls_self_bias != 0.0) {
        logits = add_entry_const(logits, 0, 0, p.cls_self_bias);
    }
    Tensor attn = softmax(logits); // (1+n) x (1+n), row r = token r's weights

    // Row 0 of this same softmax is reused verbatim by the rectified path,
    // so alpha = 1 reproduces the unrectified output bit for bit.
    Tensor cls_row = row(attn, 0);
    Tensor effective_row = cls_row;
    Tensor eos_row;
    if (ear) {
        eos_row = eos_cross_attention(h, ear->query, p);
        effective_row = rectify_attention(cls_row, eos_row, ear->alpha);
        attn = vstack({effective_row, rows(attn, 1, rows_n)});
    }
    if (trace) {
        trace->cls_row = cls_row;
        trace->effective_row = effective_row;
        trace->eos_row = eos_row;
    }

    Tensor attn_out = matmul(attn, v);

    if (prompt_rows) {
        const Tensor& pr = *prompt_rows;
        if (!pr.defined() || pr.rank() != 2 || pr.shape()[1] != d_v) {
            throw std::runtime_error(
                "layer_forward: prompt rows must be p x d_v");
        }
        // Additive side channel: each token reads sigmoid-gated value mass
        // from the prompt tokens. The gate never renormalizes the main
        // attention row, so zero-value prompts are an exact no-op and the
        // base weight matrices stay untouched by prompt tuning. Prompt rows
        // are used unnormalized: they are free parameters that carry their
        // own scale, and skipping the normalizer keeps gradients bounded at
        // the zero-initialized starting point.
        Tensor kp = matmul(pr, wk);
        Tensor vp = matmul(pr, wv);
        Tensor gate = sigmoid(mul_scalar(matmul(q, transpose(kp)),
                                         1.0 / std::sqrt(double(d_v))));
        attn_out = add(attn_out, matmul(gate, vp));
    }

    Tensor after_attn = add(tokens, attn_out);

    const FeedForwardParams& f = layer.ffn;
    if (!f.w1.defined() || !f.w2.defined() || f.w1.rank() != 2 ||
        f.w2.rank() != 2 || f.w1.shape()[0] != d_v ||
        f.w2.shape()[0] != f.w1.shape()[1] || f.w2.shape()[1] != d_v) {
        throw std::runtime_error(
            "layer_forward: feed-forward weights must be d x h and h x d");
    }
    Tensor ff = matmul(gelu(matmul(layer_norm(after_attn), f.w1)), f.w2);
    return add(after_attn, ff);
}

} // namespace semprobe
