#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "semprobe/attention.hpp"
#include "semprobe/tensor.hpp"

namespace semprobe {

enum class TuneMode { frozen, lora, prompt };

std::string to_string(TuneMode m);
TuneMode tune_mode_from_string(const std::string& s);

/// Architecture of the miniature dual encoder. Layer indices are 1-based;
/// [ear_first, ear_last] is the contiguous range rectification may attach
/// to (default: the final layer only — deep placement works best, but any
/// contiguous range is accepted so placement itself can be swept).
struct EncoderConfig {
    std::size_t layers = 4;      // L
    std::size_t d_in = 8;        // raw patch width
    std::size_t d_v = 32;        // visual token width
    std::size_t d_t = 32;        // text token width
    std::size_t d_shared = 32;   // joint embedding width
    std::size_t patches = 16;    // n per image
    std::size_t vocab = 64;      // token ids [0, vocab), 0 is EOS
    std::size_t max_text_len = 16;
    std::size_t prompt_len = 4;  // p learnable prompt tokens per layer
    std::size_t lora_rank = 4;   // r
    std::size_t ear_first = 4;
    std::size_t ear_last = 4;
    bool shared_eos_projection = false; // one E for all EAR layers

    void validate() const; // throws naming the offending field
    bool in_ear_range(std::size_t layer_1based) const {
        return layer_1based >= ear_first && layer_1based <= ear_last;
    }
};

/// Token id of the end-of-sequence marker.
inline constexpr std::size_t kEosId = 0;

struct VisionParams {
    Tensor patch_embed; // d_in x d_v
    Tensor cls_token;   // d_v
    Tensor pos_embed;   // (1+n) x d_v
    std::vector<TransformerLayer> layers;
    Tensor proj;        // d_v x d_shared
};

struct TextParams {
    Tensor token_embed; // vocab x d_t
    Tensor pos_embed;   // max_text_len x d_t
    std::vector<TransformerLayer> layers;
    Tensor proj;        // d_t x d_shared
};

/// The full model: frozen backbones plus every adapter family, all
/// allocated at construction from one seed so the three tuning modes start
/// from bit-identical weights. Adapter output halves start at zero (LoRA
/// B, prompt tokens), so an untrained model computes the same features in
/// every mode; the mode field only selects which leaves later train and
/// whether the prompt channel is evaluated.
struct DualEncoder {
    EncoderConfig cfg;
    TuneMode mode = TuneMode::frozen;
    VisionParams vision;
    TextParams text;

    // Low-rank adapters, one triple per layer per encoder.
    std::vector<LoraPair> v_lora_q, v_lora_k, v_lora_v;
    std::vector<LoraPair> t_lora_q, t_lora_k, t_lora_v;

    // Deep prompts: per-layer textual prompt tokens and the text-to-vision
    // coupling maps that derive the visual prompts.
    std::vector<Tensor> prompts;   // L tensors, p x d_t, zero-initialized
    std::vector<Tensor> couplings; // L tensors, d_t x d_v

    // EOS-to-vision projections for the rectified layers. Indexed by
    // (layer - ear_first), or a single entry when shared.
    std::vector<Tensor> eos_projections; // d_t x d_v
};

DualEncoder make_dual_encoder(const EncoderConfig& cfg, std::uint64_t seed);

/// Rectification context for one forward pass: per-layer cross-attention
/// queries (1-based layer index) and the mixing coefficient.
struct EarContext {
    double alpha = 0.8;
    std::map<std::size_t, EosQuery> queries;
};

/// Builds the context from per-layer EOS hidden states (one vector of
/// width d_t per layer, e.g. a mean over a prompt pool), attaching a query
/// to every configured EAR layer.
EarContext make_ear_context(const DualEncoder& m,
                            const std::vector<Tensor>& per_layer_eos,
                            double alpha);

struct VisionOut {
    Tensor feature;                 // unit vector, d_shared
    std::vector<LayerTrace> traces; // one per layer: raw + effective CLS rows
};

/// Runs the visual tower over one image (n x d_in patch matrix). When ear
/// is non-null its queries attach to their layers; a query aimed at a
/// layer outside cfg's EAR range is an error.
VisionOut vision_forward(const DualEncoder& m, const Tensor& image,
                         const EarContext* ear = nullptr);

struct TextOut {
    Tensor feature;                    // unit vector, d_shared
    std::vector<Tensor> per_layer_eos; // EOS hidden state after each layer
};

/// Runs the text tower over one token id sequence. The sequence must be
/// non-empty, fit max_text_len, contain ids < vocab, and carry exactly one
/// EOS id at its final position.
TextOut text_forward(const DualEncoder& m,
                     const std::vector<std::size_t>& token_ids);

/// Normalized per-class means of unit text features: one row per class.
/// Errors on an empty class or a near-zero mean (antipodal pool).
Tensor class_text_weights(const std::vector<std::vector<Tensor>>& per_class);

/// Pointers to the leaves the current mode trains (adapters only; frozen
/// trains nothing). include_eos_projection adds the EAR projections, which
/// train alongside either adapter family when rectification is active.
std::vector<Tensor*> trainable_leaves(DualEncoder& m,
                                      bool include_eos_projection);

/// Re-creates every trainable leaf as a gradient-requiring tensor.
void mark_trainable(DualEncoder& m, bool include_eos_projection);

/// Deep copy with all graph history and gradient flags dropped.
DualEncoder detached_clone(const DualEncoder& m);

/// Text-format checkpoint ("semprobe-params v1"): every tensor under a
/// stable key path, values printed to full double precision so a
/// round-trip is bit-exact.
void save_params(const DualEncoder& m, const std::string& path);
DualEncoder load_params(const std::string& path);

} // namespace semprobe
