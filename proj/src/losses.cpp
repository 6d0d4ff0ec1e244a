#include "semprobe/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace semprobe {

namespace {

void require_unit_rows(const Tensor& m, const char* what) {
    if (!m.defined() || m.rank() != 2 || m.shape()[0] == 0) {
        throw std::runtime_error(std::string(what) +
                                 ": expected a non-empty feature matrix");
    }
    for (std::size_t r = 0; r < m.shape()[0]; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < m.shape()[1]; ++c)
            s += m.at(r, c) * m.at(r, c);
        if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
            throw std::runtime_error(
                std::string(what) + ": row " + std::to_string(r) +
                " is not unit-norm (norm " + std::to_string(std::sqrt(s)) +
                ")");
        }
    }
}

void require_batch(const ContrastiveBatch& b, const char* what) {
    require_unit_rows(b.image_features, what);
    require_unit_rows(b.text_features, what);
    if (b.image_features.shape() != b.text_features.shape()) {
        throw std::runtime_error(
            std::string(what) + ": image and text batches must match, got " +
            shape_str(b.image_features.shape()) + " vs " +
            shape_str(b.text_features.shape()));
    }
    if (b.tau <= 0.0) {
        throw std::runtime_error(std::string(what) +
                                 ": temperature must be positive");
    }
}

std::vector<std::size_t> identity_positives(std::size_t n) {
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
}

} // namespace

void BasConfig::validate() const {
    if (w < 0.0 || !std::isfinite(w)) {
        throw std::runtime_error(
            "bas config: field `w` must be finite and >= 0");
    }
    if (k <= 0.0 || !std::isfinite(k)) {
        throw std::runtime_error(
            "bas config: field `k` must be finite and > 0");
    }
    if (T < 0.0 || !std::isfinite(T)) {
        throw std::runtime_error(
            "bas config: field `T` must be finite and >= 0");
    }
    if (fixed_beta && (!std::isfinite(*fixed_beta) || *fixed_beta < 0.0)) {
        throw std::runtime_error(
            "bas config: field `fixed_beta` must be finite and >= 0");
    }
}

Tensor info_nce_to_targets(const Tensor& rows, const Tensor& targets,
                           const std::vector<std::size_t>& positives,
                           double tau) {
    require_unit_rows(rows, "info_nce");
    require_unit_rows(targets, "info_nce");
    if (rows.shape()[1] != targets.shape()[1]) {
        throw std::runtime_error("info_nce: feature widths differ");
    }
    if (positives.size() != rows.shape()[0]) {
        throw std::runtime_error(
            "info_nce: need one positive index per row");
    }
    for (std::size_t p : positives) {
        if (p >= targets.shape()[0]) {
            throw std::runtime_error("info_nce: positive index " +
                                     std::to_string(p) + " out of range");
        }
    }
    if (tau <= 0.0) {
        throw std::runtime_error("info_nce: temperature must be positive");
    }
    Tensor logits =
        mul_scalar(matmul(rows, transpose(targets)), 1.0 / tau);
    Tensor log_probs = log_softmax(logits);
    Tensor at_positive = select_positions(log_probs, positives);
    return neg(mean(at_positive));
}

Tensor info_nce_i2t(const ContrastiveBatch& b) {
    require_batch(b, "info_nce_i2t");
    return info_nce_to_targets(b.image_features, b.text_features,
                               identity_positives(b.image_features.shape()[0]),
                               b.tau);
}

Tensor info_nce_t2i(const ContrastiveBatch& b) {
    require_batch(b, "info_nce_t2i");
    return info_nce_to_targets(b.text_features, b.image_features,
                               identity_positives(b.text_features.shape()[0]),
                               b.tau);
}

Tensor clip_loss(const ContrastiveBatch& b) {
    return mul_scalar(add(info_nce_i2t(b), info_nce_t2i(b)), 0.5);
}

Tensor l2_alignment(const Tensor& align_score, const Tensor& modality_gap) {
    if (!align_score.defined() || align_score.size() != 1 ||
        !modality_gap.defined() || modality_gap.size() != 1) {
        throw std::runtime_error("l2_alignment: inputs must be scalars");
    }
    Tensor misalign = add_scalar(neg(align_score), 1.0); // 1 - align
    Tensor numer = mul_scalar(mul(misalign, modality_gap), 2.0);
    Tensor denom = add_scalar(add(misalign, modality_gap), 1e-12);
    return div(numer, denom);
}

double beta_weight(double l2_value, const BasConfig& cfg) {
    cfg.validate();
    if (!std::isfinite(l2_value)) {
        throw std::runtime_error("beta_weight: non-finite input");
    }
    return cfg.w / (1.0 + std::exp(-cfg.k * (l2_value - cfg.T)));
}

BasParts bas_loss(const ContrastiveBatch& b, const Tensor& align_score,
                  const Tensor& modality_gap, const BasConfig& cfg) {
    cfg.validate();
    BasParts out;
    out.l1 = clip_loss(b);
    out.l2 = l2_alignment(align_score, modality_gap);
    out.beta =
        cfg.fixed_beta ? *cfg.fixed_beta : beta_weight(out.l2.value(), cfg);
    // beta enters as a plain constant: the schedule is a weighting rule,
    // not a differentiable pathway.
    out.total = add(out.l1, mul_scalar(out.l2, out.beta));
    return out;
}

} // namespace semprobe
