#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "semprobe/tensor.hpp"

namespace semprobe {

/// A batch of matched image/text unit features: row i of each matrix is
/// one positive pair. tau is the softmax temperature (0.07 by convention).
struct ContrastiveBatch {
    Tensor image_features; // B x d
    Tensor text_features;  // B x d
    double tau = 0.07;
};

/// Schedule parameters of the separation weight: beta(L2) =
/// w / (1 + exp(-k (L2 - T))). w = 0 disables the term; fixed_beta, when
/// set, bypasses the schedule with a constant weight (the ablation knob).
struct BasConfig {
    double w = 7.0;
    double k = 5.0;
    double T = 3.5;
    std::optional<double> fixed_beta;
    void validate() const;
};

/// Generalized positive-pair InfoNCE: -mean_i log softmax over targets of
/// (rows . targets^T) / tau at positives[i]. Both matrices must carry
/// unit rows; tau must be positive.
Tensor info_nce_to_targets(const Tensor& rows, const Tensor& targets,
                           const std::vector<std::size_t>& positives,
                           double tau);

/// Image-to-text InfoNCE over a square batch (positive = same row index).
Tensor info_nce_i2t(const ContrastiveBatch& b);

/// Text-to-image InfoNCE over a square batch.
Tensor info_nce_t2i(const ContrastiveBatch& b);

/// Symmetric contrastive loss: (i2t + t2i) / 2. The primary alignment term.
Tensor clip_loss(const ContrastiveBatch& b);

/// Harmonic-mean separation loss over the alignment score and the modality
/// gap: 2 (1-align) gap / ((1-align) + gap + 1e-12). Differentiable in
/// both inputs.
Tensor l2_alignment(const Tensor& align_score, const Tensor& modality_gap);

/// Sigmoid schedule for the separation weight; strictly increasing in the
/// (detached) separation-loss value, bounded in (0, w).
double beta_weight(double l2_value, const BasConfig& cfg);

struct BasParts {
    Tensor total; // l1 + beta * l2
    Tensor l1;    // symmetric contrastive loss
    Tensor l2;    // harmonic-mean separation loss
    double beta;  // the constant weight used this step
};

/// Combined loss: total = clip_loss(b) + beta * l2, where beta comes from
/// the schedule applied to l2's current value (or the fixed override) and
/// is treated as a constant — the gradient never flows through the
/// schedule.
BasParts bas_loss(const ContrastiveBatch& b, const Tensor& align_score,
                  const Tensor& modality_gap, const BasConfig& cfg);

} // namespace semprobe
