#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "semprobe/diagnostics.hpp"
#include "semprobe/encoders.hpp"
#include "semprobe/losses.hpp"
#include "semprobe/synth_data.hpp"
#include "semprobe/tensor.hpp"

namespace semprobe {

/// One N-way K-shot task. Labels are episode-local (0..N-1); class_ids
/// maps them back to dataset classes. Support and query are disjoint by
/// construction and exactly balanced.
struct Episode {
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    std::size_t m_query = 0;
    std::size_t u_prompts = 0;
    std::vector<std::size_t> class_ids;
    std::vector<Tensor> support_images;
    std::vector<std::size_t> support_labels;
    std::vector<Tensor> query_images;
    std::vector<std::size_t> query_labels;
    std::vector<std::vector<std::vector<std::size_t>>> prompt_pool; // [N][U]
};

/// Deterministic episode draw: N distinct classes, K+M distinct images per
/// class split into support (first K) and query (the rest), U distinct
/// prompts per class. Errors when the dataset cannot supply the request.
Episode sample_episode(const SynthDataset& data, std::size_t n_way,
                       std::size_t k_shot, std::size_t m_query,
                       std::size_t u_prompts, std::uint64_t seed);

/// Training objective selector. i2t_only drops the text-to-image
/// direction; clip is the symmetric loss alone; bas adds the scheduled
/// separation term; fixed_beta adds it with a constant weight.
enum class LossKind { i2t_only, clip, bas, fixed_beta };

std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);

struct FinetuneOptions {
    bool ear_on = true;
    double alpha = 0.8;
    LossKind loss = LossKind::bas;
    BasConfig bas;            // schedule parameters for LossKind::bas
    double fixed_beta = 0.0;  // weight for LossKind::fixed_beta
    std::size_t epochs = 100;
    double lr = 0.1;
    double tau = 0.07;
    // Full-batch gradient descent draws nothing at random; the seed is
    // recorded so the interface stays stable if stochasticity is added.
    std::uint64_t seed = 0;

    void validate() const;
};

/// One logged epoch: the loss parts, the weight actually applied (0 for
/// i2t_only/clip, the constant for fixed_beta, the schedule value for
/// bas), and the full diagnostics row.
struct EpochRecord {
    std::size_t epoch = 0; // 0-based
    double l1 = 0.0;
    double l2 = 0.0;
    double beta = 0.0;
    DiagnosticsReport report;
};

/// Thrown when training hits a non-finite loss or parameter. Carries the
/// epoch records completed before the abort so callers can preserve the
/// trace-so-far.
struct FinetuneAbort : std::runtime_error {
    FinetuneAbort(const std::string& what_arg,
                  std::vector<EpochRecord> partial_trace)
        : std::runtime_error(what_arg), partial(std::move(partial_trace)) {}

    std::vector<EpochRecord> partial;
};

/// Fine-tunes the model in place on the episode's support set with plain
/// full-batch gradient descent over the mode's trainable leaves (plus the
/// EOS projections when rectification is on). Returns one record per
/// epoch, metrics evaluated on the pre-step forward pass. A non-finite
/// loss or parameter aborts with a diagnostic snapshot. With no trainable
/// leaves the constant trace row is computed once and replicated.
std::vector<EpochRecord> finetune(DualEncoder& model, const Episode& ep,
                                  const FinetuneOptions& opt);

/// Inference-time state derived from the (adapted) model: unit class text
/// weights and, when rectification is on, the cross-attention context
/// pooled over the episode's prompt pool.
struct AdaptedState {
    Tensor class_weights; // N x d_shared unit rows
    bool ear_on = false;
    EarContext ear;
};

AdaptedState adapt_state(const DualEncoder& model, const Episode& ep,
                         const FinetuneOptions& opt);

/// Nearest class by similarity score: argmax over weight rows of
/// dot(feature, row), ties broken toward the lowest class id. The feature
/// need not be normalized — positive scaling cannot change the argmax.
std::size_t classify(const Tensor& image_feature,
                     const Tensor& class_weights);

/// Full inference path: encode the image under the adapted state, then
/// classify against the class weights.
std::size_t infer(const DualEncoder& model, const Tensor& image,
                  const AdaptedState& state);

/// Aggregate outcome of an evaluation run.
struct RunResult {
    std::vector<double> accuracies; // one per episode, in [0,1]
    double mean_accuracy = 0.0;
    double ci_half_width = 0.0;     // 1.96 * stddev / sqrt(episodes)
    std::vector<EpochRecord> trace; // episode 0's per-epoch trace
};

struct EvalOptions {
    std::size_t n_way = 5;
    std::size_t k_shot = 5;
    std::size_t m_query = 15;
    std::size_t u_prompts = 30;
    std::size_t episodes_count = 50;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    FinetuneOptions tune;

    void validate() const;
};

/// Runs episodes_count independent sample -> finetune -> infer cycles from
/// the same base model (cloned per episode; episode e is seeded by
/// derive_seed(seed, e), so results do not depend on worker count) and
/// reports mean accuracy with a 95% normal-approximation interval.
RunResult evaluate(const SynthDataset& data, const DualEncoder& base,
                   const EvalOptions& opt);

} // namespace semprobe
