#include "semprobe/diagnostics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace semprobe {

namespace {

// Checks shape/label consistency and that every class carries the same
// number of text rows. Returns that per-class prompt count U.
std::size_t require_embedding_set(const EmbeddingSet& e) {
    if (!e.image_features.defined() || e.image_features.rank() != 2 ||
        e.image_features.shape()[0] == 0) {
        throw std::runtime_error(
            "embedding set: image_features must be a non-empty matrix");
    }
    if (!e.text_features.defined() || e.text_features.rank() != 2 ||
        e.text_features.shape()[0] == 0) {
        throw std::runtime_error(
            "embedding set: text_features must be a non-empty matrix");
    }
    if (e.image_features.shape()[1] != e.text_features.shape()[1]) {
        throw std::runtime_error(
            "embedding set: feature widths differ (" +
            shape_str(e.image_features.shape()) + " vs " +
            shape_str(e.text_features.shape()) + ")");
    }
    if (e.image_labels.size() != e.image_features.shape()[0]) {
        throw std::runtime_error(
            "embedding set: need one image label per image row");
    }
    if (e.text_labels.size() != e.text_features.shape()[0]) {
        throw std::runtime_error(
            "embedding set: need one text label per text row");
    }
    if (e.num_classes == 0) {
        throw std::runtime_error("embedding set: num_classes must be >= 1");
    }
    for (std::size_t l : e.image_labels) {
        if (l >= e.num_classes) {
            throw std::runtime_error("embedding set: image label " +
                                     std::to_string(l) + " out of range");
        }
    }
    std::vector<std::size_t> per_class(e.num_classes, 0);
    for (std::size_t l : e.text_labels) {
        if (l >= e.num_classes) {
            throw std::runtime_error("embedding set: text label " +
                                     std::to_string(l) + " out of range");
        }
        ++per_class[l];
    }
    for (std::size_t c = 0; c < e.num_classes; ++c) {
        if (per_class[c] == 0) {
            throw std::runtime_error("embedding set: class " +
                                     std::to_string(c) +
                                     " has no text features");
        }
        if (per_class[c] != per_class[0]) {
            throw std::runtime_error(
                "embedding set: classes must have equal text counts, class " +
                std::to_string(c) + " has " + std::to_string(per_class[c]) +
                " vs " + std::to_string(per_class[0]));
        }
    }
    return per_class[0];
}

std::vector<std::vector<std::size_t>> rows_by_class(
    const std::vector<std::size_t>& labels, std::size_t num_classes) {
    std::vector<std::vector<std::size_t>> out(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i)
        out[labels[i]].push_back(i);
    return out;
}

// Differentiable sum of the selected rows, as a rank-1 tensor.
Tensor sum_of_rows(const Tensor& m, const std::vector<std::size_t>& which) {
    Tensor picked = gather_rows(m, which);
    return mul_scalar(mean_rows(picked),
                      static_cast<double>(which.size()));
}

double sq_dist(const std::vector<double>& a, std::size_t ra,
               const std::vector<double>& b, std::size_t rb, std::size_t d) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
        double diff = a[ra * d + c] - b[rb * d + c];
        s += diff * diff;
    }
    return s;
}

// Shared entropy core: renormalizes a nonnegative mass vector and returns
// -sum p ln p / ln n.
double normalized_entropy(const std::vector<double>& mass, const char* what) {
    double total = 0.0;
    for (double m : mass) {
        if (m < 0.0 || !std::isfinite(m)) {
            throw std::runtime_error(std::string(what) +
                                     ": attention mass must be finite and "
                                     ">= 0");
        }
        total += m;
    }
    if (total <= 0.0) {
        throw std::runtime_error(std::string(what) +
                                 ": zero attention mass");
    }
    double h = 0.0;
    for (double m : mass) {
        double p = m / total;
        if (p > 0.0) h -= p * std::log(p);
    }
    return h / std::log(static_cast<double>(mass.size()));
}

} // namespace

Tensor align_score(const EmbeddingSet& e) {
    std::size_t u = require_embedding_set(e);
    auto img_by_class = rows_by_class(e.image_labels, e.num_classes);
    auto txt_by_class = rows_by_class(e.text_labels, e.num_classes);

    // sum_i sum_{t in class(i)} v_i . t regrouped by class:
    // sum_c (sum of class-c image rows) . (sum of class-c text rows).
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t c = 0; c < e.num_classes; ++c) {
        if (img_by_class[c].empty()) continue;
        Tensor img_sum = sum_of_rows(e.image_features, img_by_class[c]);
        Tensor txt_sum = sum_of_rows(e.text_features, txt_by_class[c]);
        total = add(total, dot(img_sum, txt_sum));
    }
    double denom =
        static_cast<double>(u) * static_cast<double>(e.image_labels.size());
    return mul_scalar(total, 1.0 / denom);
}

Tensor align_score_normalized_means(const EmbeddingSet& e) {
    require_embedding_set(e);
    auto txt_by_class = rows_by_class(e.text_labels, e.num_classes);
    std::vector<Tensor> class_weights(e.num_classes);
    for (std::size_t c = 0; c < e.num_classes; ++c) {
        Tensor picked = gather_rows(e.text_features, txt_by_class[c]);
        class_weights[c] = l2_normalize(mean_rows(picked));
    }
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < e.image_labels.size(); ++i) {
        total = add(total, dot(row(e.image_features, i),
                               class_weights[e.image_labels[i]]));
    }
    return mul_scalar(total,
                      1.0 / static_cast<double>(e.image_labels.size()));
}

Tensor modality_gap(const EmbeddingSet& e) {
    require_embedding_set(e);
    return norm2(sub(mean_rows(e.image_features),
                     mean_rows(e.text_features)));
}

double ch_index(const Tensor& features,
                const std::vector<std::size_t>& labels) {
    if (!features.defined() || features.rank() != 2 ||
        features.shape()[0] == 0) {
        throw std::runtime_error(
            "ch_index: features must be a non-empty matrix");
    }
    std::size_t m = features.shape()[0];
    std::size_t d = features.shape()[1];
    if (labels.size() != m) {
        throw std::runtime_error("ch_index: need one label per row");
    }
    std::size_t max_label = 0;
    for (std::size_t l : labels) max_label = std::max(max_label, l);
    std::vector<std::size_t> counts(max_label + 1, 0);
    for (std::size_t l : labels) ++counts[l];
    std::size_t k = 0;
    for (std::size_t c : counts) k += (c > 0) ? 1 : 0;
    if (k < 2) {
        throw std::runtime_error(
            "ch_index: need at least two distinct labels");
    }
    if (m <= k) {
        throw std::runtime_error(
            "ch_index: need more samples than clusters");
    }

    const std::vector<double>& x = features.values();
    std::vector<double> mu(d, 0.0);
    std::vector<double> mu_c((max_label + 1) * d, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            mu[c] += x[r * d + c];
            mu_c[labels[r] * d + c] += x[r * d + c];
        }
    }
    for (std::size_t c = 0; c < d; ++c) mu[c] /= static_cast<double>(m);
    for (std::size_t l = 0; l <= max_label; ++l) {
        if (counts[l] == 0) continue;
        for (std::size_t c = 0; c < d; ++c)
            mu_c[l * d + c] /= static_cast<double>(counts[l]);
    }

    double between = 0.0;
    for (std::size_t l = 0; l <= max_label; ++l) {
        if (counts[l] == 0) continue;
        between += static_cast<double>(counts[l]) *
                   sq_dist(mu_c, l, mu, 0, d);
    }
    double within = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        within += sq_dist(x, r, mu_c, labels[r], d);
    }
    if (within <= 0.0) {
        throw std::runtime_error(
            "ch_index: zero within-cluster scatter makes the ratio "
            "undefined");
    }
    return (between * static_cast<double>(m - k)) /
           (within * static_cast<double>(k - 1));
}

double attention_entropy(const Tensor& attn_over_patches) {
    if (!attn_over_patches.defined() || attn_over_patches.rank() != 1) {
        throw std::runtime_error(
            "attention_entropy: expected a rank-1 attention row");
    }
    if (attn_over_patches.size() < 2) {
        throw std::runtime_error(
            "attention_entropy: need at least two positions");
    }
    return normalized_entropy(attn_over_patches.values(),
                              "attention_entropy");
}

double cls_patch_entropy(const Tensor& cls_row) {
    if (!cls_row.defined() || cls_row.rank() != 1) {
        throw std::runtime_error(
            "cls_patch_entropy: expected a rank-1 attention row");
    }
    if (cls_row.size() < 3) {
        throw std::runtime_error(
            "cls_patch_entropy: need the CLS entry plus at least two "
            "patches");
    }
    std::vector<double> patches(cls_row.values().begin() + 1,
                                cls_row.values().end());
    return normalized_entropy(patches, "cls_patch_entropy");
}

} // namespace semprobe
