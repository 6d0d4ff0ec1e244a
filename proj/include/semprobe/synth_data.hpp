#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "semprobe/encoders.hpp"
#include "semprobe/tensor.hpp"

namespace semprobe {

/// Generator knobs for a synthetic cross-domain dataset. Images are n x
/// d_in patch matrices: the first k_disc patches carry class signal
/// (signal_scale * prototype + noise_scale * gaussian), the rest are
/// background noise translated `shift` along a fixed random direction —
/// discriminative content and domain shift are independent axes.
struct SynthDomainSpec {
    std::size_t num_classes = 5;
    std::size_t d_in = 8;
    std::size_t patches = 16;          // n
    std::size_t k_disc = 4;            // leading discriminative patches
    double signal_scale = 1.0;
    double noise_scale = 0.3;
    double shift = 0.0;
    std::size_t images_per_class = 40;
    std::size_t prompts_per_class = 30;
    std::size_t vocab = 64;            // shared with the text encoder
    std::size_t prompt_len = 8;        // tokens before the trailing EOS
    std::size_t signature_tokens = 3;  // class-identifying tokens per prompt
    std::uint64_t seed = 0;

    void validate() const; // throws naming the offending field
};

/// A generated dataset: images and prompt pools grouped by class, plus the
/// generator's ground truth (prototypes and shift direction) so oracle
/// classifiers in tests can check recoverability.
struct SynthDataset {
    SynthDomainSpec spec;
    std::vector<std::vector<Tensor>> images;  // [class][i]: n x d_in
    std::vector<std::vector<std::vector<std::size_t>>> prompts;
    Tensor prototypes;      // num_classes x d_in unit rows
    Tensor shift_direction; // d_in unit vector
};

/// Deterministic generation: equal seeds give bitwise-equal datasets.
/// Class c's signature tokens are {1 + c*signature_tokens, ...}; filler
/// tokens are drawn above the signature range so prompts of different
/// classes never share identity-bearing tokens.
SynthDataset generate_dataset(const SynthDomainSpec& spec);

/// Text archive ("semprobe-dataset v1") round-tripping a dataset exactly.
void save_dataset(const SynthDataset& ds, const std::string& path);
SynthDataset load_dataset(const std::string& path);

/// Hex digest of the generator configuration (including the seed), for
/// keying cached fixture files.
std::string dataset_key(const SynthDomainSpec& spec);

/// Attention-collapse induction: the constant added to every visual
/// layer's CLS self-attention logit.
struct CollapseInit {
    double bias = 8.0;
};

/// Returns a copy of the model whose visual layers all carry the bias. A
/// positive bias must actually collapse attention: the mean CLS
/// self-weight over 100 random inputs must exceed 0.9, or this throws.
/// bias == 0 is the documented no-op.
DualEncoder induce_collapse(const DualEncoder& m, const CollapseInit& init);

} // namespace semprobe
