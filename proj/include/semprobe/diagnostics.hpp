#pragma once

#include <cstddef>
#include <vector>

#include "semprobe/tensor.hpp"

namespace semprobe {

/// Labeled unit features from both towers for one support set. Every class
/// in [0, num_classes) must appear with the same number of text rows (the
/// per-class prompt count U).
struct EmbeddingSet {
    Tensor image_features; // |S| x d unit rows
    std::vector<std::size_t> image_labels;
    Tensor text_features;  // N*U x d unit rows
    std::vector<std::size_t> text_labels;
    std::size_t num_classes = 0;
};

/// Entropy levels measured on a production-scale dual encoder across
/// cross-domain benchmarks (mean over datasets). Orientation points for
/// reading toy traces — NOT targets the desk-scale model is expected to
/// hit.
inline constexpr double kFullScaleClsEntropy = 0.7303;
inline constexpr double kFullScaleEosEntropy = 0.8557;
inline constexpr double kFullScaleRectifiedEntropy = 0.8024;

/// One row of the per-epoch metric trace. Entropy fields are normalized to
/// [0,1]; entropy_eos and entropy_rectified are meaningful only when
/// rectification ran (they mirror entropy_cls otherwise).
struct DiagnosticsReport {
    double align_score = 0.0;
    double modality_gap = 0.0;
    double ch_image = 0.0;
    double ch_text = 0.0;
    double entropy_cls = 0.0;
    double entropy_eos = 0.0;
    double entropy_rectified = 0.0;
};

/// Mean cosine similarity between each image feature and every text
/// feature of its true class: (1/(U*|S|)) sum_i sum_{t in class(i)} v_i.t.
/// Differentiable in both feature matrices.
Tensor align_score(const EmbeddingSet& e);

/// Variant sketched by the ambiguous summation: each image against its
/// class's renormalized mean text feature, averaged over images.
Tensor align_score_normalized_means(const EmbeddingSet& e);

/// Euclidean distance between the modality centroids:
/// || mean(image rows) - mean(text rows) ||. Differentiable.
Tensor modality_gap(const EmbeddingSet& e);

/// Calinski-Harabasz ratio of between- to within-cluster dispersion:
/// [B (m - k)] / [W (k - 1)] with B = sum_c m_c ||mu_c - mu||^2 and
/// W = sum_c sum_{x in c} ||x - mu_c||^2. Requires at least two distinct
/// labels, more samples than labels, and nonzero within-cluster scatter.
double ch_index(const Tensor& features, const std::vector<std::size_t>& labels);

/// Normalized Shannon entropy of an attention row over n >= 2 positions:
/// -sum p ln p / ln n with 0 ln 0 := 0. The row is renormalized first, so
/// any nonnegative mass profile with positive total is accepted.
double attention_entropy(const Tensor& attn_over_patches);

/// Entropy of a CLS attention row restricted to its patch entries: drops
/// index 0, renormalizes the remaining mass, and scores it. The row must
/// keep nonzero patch mass and at least two patches.
double cls_patch_entropy(const Tensor& cls_row);

} // namespace semprobe
