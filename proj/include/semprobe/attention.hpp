#pragma once

#include <optional>

#include "semprobe/tensor.hpp"

namespace semprobe {

/// Low-rank adapter pair for one attention weight: a is d x r, b is r x d,
/// and the effective weight is W + a.b. The frozen base is never mutated.
struct LoraPair {
    Tensor a;
    Tensor b;
};

/// Single-head attention weights. The optional adapter pairs carry the
/// trainable low-rank deltas; cls_self_bias is a constant added to the CLS
/// token's self-attention logit (the attention-collapse induction knob,
/// 0 in normal operation).
struct AttentionLayerParams {
    Tensor w_q;
    Tensor w_k;
    Tensor w_v;
    std::optional<LoraPair> lora_q;
    std::optional<LoraPair> lora_k;
    std::optional<LoraPair> lora_v;
    double cls_self_bias = 0.0;
};

/// Cross-attention query material: the text-side EOS hidden state and the
/// projection that carries it into the visual token space. When the
/// optional override matrices are set, the cross path uses them instead of
/// the visual layer's own query/key weights (both behaviors are defensible
/// readings of the primed weights; reuse is the default).
struct EosQuery {
    Tensor t_eos; // width d_t
    Tensor e;     // d_t x d_v
    std::optional<Tensor> w_q_cross;
    std::optional<Tensor> w_k_cross;
};

/// Rectification attachment for one layer: the cross-attention query plus
/// the mixing coefficient.
struct EarAttachment {
    EosQuery query;
    double alpha = 0.8;
};

/// Two-layer position-wise feed-forward: d -> hidden -> d, smooth
/// nonlinearity in between, no biases.
struct FeedForwardParams {
    Tensor w1;
    Tensor w2;
};

struct TransformerLayer {
    AttentionLayerParams attn;
    FeedForwardParams ffn;
};

/// W + a.b when an adapter is present, W itself otherwise. Validates the
/// adapter shapes (a: d x r, b: r x d, r >= 1) against the base.
Tensor effective_weight(const Tensor& base, const std::optional<LoraPair>& lora);

/// Returns a copy of p with the adapter for one of {'q','k','v'} replaced.
AttentionLayerParams apply_lora(const AttentionLayerParams& p, char which,
                                const Tensor& a, const Tensor& b);

/// Attention row of the CLS token over all 1+n visual tokens:
/// softmax((v[0] Wq)(v Wk)^T / sqrt(d_v)), with cls_self_bias added to the
/// self logit. tokens is (1+n) x d_v with row 0 the CLS token; n >= 1.
Tensor cls_attention(const Tensor& tokens, const AttentionLayerParams& p);

/// Attention row of the projected EOS token over the n patch tokens only:
/// softmax(((t_eos E) Wq)(v[1:] Wk)^T / sqrt(d_v)).
Tensor eos_cross_attention(const Tensor& tokens, const EosQuery& q,
                           const AttentionLayerParams& p);

/// alpha-weighted mix of the CLS row with the zero-padded EOS row:
/// out = alpha*cls_row + (1-alpha)*[0; eos_row]. Both inputs must be
/// normalized rows (entries in [0,1], sum within 1e-9 of 1); the output
/// stays normalized and out[0] equals alpha*cls_row[0] exactly.
Tensor rectify_attention(const Tensor& cls_row, const Tensor& eos_row,
                         double alpha);

/// Attention-weighted value readout: attn . (tokens Wv), width d_v.
Tensor rectified_cls_feature(const Tensor& attn, const Tensor& tokens,
                             const AttentionLayerParams& p);

/// Intermediate attention products of one layer, exposed so encoders can
/// log diagnostic rows without recomputing the forward pass.
struct LayerTrace {
    Tensor cls_row;       // row 0 of the raw self-attention matrix, length 1+n
    Tensor effective_row; // the row actually used for the CLS output
    Tensor eos_row;       // cross-attention row over patches; undefined
                          // (default tensor) when no rectification ran
};

/// One pre-norm transformer block over (1+n) x d_v visual tokens:
/// self-attention (with the CLS row swapped for its rectified version when
/// ear is present), an optional additive prompt channel, then the
/// feed-forward block, with residual connections around both.
///
/// prompt_rows, when present, is a p x d_v matrix of injected prompt
/// tokens. They contribute sigmoid-gated cross-attention value mass to
/// every token's output and are not carried into the returned sequence,
/// so all-zero prompt rows leave the output bit-identical to no prompts.
Tensor layer_forward(const Tensor& tokens, const TransformerLayer& layer,
                     const std::optional<EarAttachment>& ear,
                     const std::optional<Tensor>& prompt_rows = std::nullopt,
                     LayerTrace* trace = nullptr);

} // namespace semprobe
