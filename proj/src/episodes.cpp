#include "semprobe/episodes.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace semprobe {

namespace {

std::string fmt6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// Calinski-Harabasz value, or NaN where the ratio is undefined (fewer
// than two occupied classes, no surplus samples, or zero scatter — e.g.
// one-shot supports). The trace stays honest instead of inventing a 0.
double ch_or_nan(const Tensor& features,
                 const std::vector<std::size_t>& labels) {
    try {
        return ch_index(features, labels);
    } catch (const std::runtime_error&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

// Everything the text tower contributes to one epoch: per-class unit
// features, the stacked feature matrix with labels, the class weights,
// and (when requested) the per-layer EOS states averaged over the pool.
struct TextSide {
    std::vector<std::vector<Tensor>> per_class;
    Tensor all_features;
    std::vector<std::size_t> labels;
    Tensor class_weights;
    std::vector<Tensor> eos_means;
};

TextSide text_side(const DualEncoder& m, const Episode& ep, bool want_eos) {
    TextSide out;
    out.per_class.resize(ep.n_way);
    std::vector<Tensor> rows;
    rows.reserve(ep.n_way * ep.u_prompts);
    std::vector<Tensor> eos_sums(m.cfg.layers);
    for (std::size_t c = 0; c < ep.n_way; ++c) {
        for (std::size_t u = 0; u < ep.u_prompts; ++u) {
            TextOut t = text_forward(m, ep.prompt_pool[c][u]);
            out.per_class[c].push_back(t.feature);
            rows.push_back(t.feature);
            out.labels.push_back(c);
            if (want_eos) {
                for (std::size_t l = 0; l < m.cfg.layers; ++l) {
                    eos_sums[l] = eos_sums[l].defined()
                                      ? add(eos_sums[l], t.per_layer_eos[l])
                                      : t.per_layer_eos[l];
                }
            }
        }
    }
    out.all_features = vstack(rows);
    out.class_weights = class_text_weights(out.per_class);
    if (want_eos) {
        const double inv =
            1.0 / static_cast<double>(ep.n_way * ep.u_prompts);
        out.eos_means.reserve(eos_sums.size());
        for (Tensor& s : eos_sums)
            out.eos_means.push_back(mul_scalar(s, inv));
    }
    return out;
}

struct EpochEval {
    Tensor total;
    double l1 = 0.0;
    double l2 = 0.0;
    double beta = 0.0;
    DiagnosticsReport report;
};

EpochEval epoch_eval(const DualEncoder& model, const Episode& ep,
                     const FinetuneOptions& opt) {
    TextSide ts = text_side(model, ep, opt.ear_on);
    EarContext ctx;
    if (opt.ear_on) ctx = make_ear_context(model, ts.eos_means, opt.alpha);

    std::vector<Tensor> feats;
    std::vector<VisionOut> outs;
    feats.reserve(ep.support_images.size());
    outs.reserve(ep.support_images.size());
    for (const Tensor& img : ep.support_images) {
        outs.push_back(vision_forward(model, img, opt.ear_on ? &ctx : nullptr));
        feats.push_back(outs.back().feature);
    }
    Tensor image_features = vstack(feats);

    Tensor i2t = info_nce_to_targets(image_features, ts.class_weights,
                                     ep.support_labels, opt.tau);
    Tensor l1 = i2t;
    if (opt.loss != LossKind::i2t_only) {
        std::vector<Tensor> protos;
        protos.reserve(ep.n_way);
        for (std::size_t c = 0; c < ep.n_way; ++c) {
            std::vector<std::size_t> mine;
            for (std::size_t i = 0; i < ep.support_labels.size(); ++i)
                if (ep.support_labels[i] == c) mine.push_back(i);
            protos.push_back(l2_normalize(
                mean_rows(gather_rows(image_features, mine))));
        }
        std::vector<std::size_t> ident(ep.n_way);
        std::iota(ident.begin(), ident.end(), std::size_t{0});
        Tensor t2i = info_nce_to_targets(ts.class_weights, vstack(protos),
                                         ident, opt.tau);
        l1 = mul_scalar(add(i2t, t2i), 0.5);
    }

    EmbeddingSet es;
    es.image_features = image_features;
    es.image_labels = ep.support_labels;
    es.text_features = ts.all_features;
    es.text_labels = ts.labels;
    es.num_classes = ep.n_way;
    Tensor align = align_score(es);
    Tensor gap = modality_gap(es);
    Tensor l2 = l2_alignment(align, gap);

    EpochEval ev;
    ev.l1 = l1.value();
    ev.l2 = l2.value();
    switch (opt.loss) {
    case LossKind::i2t_only:
    case LossKind::clip:
        ev.beta = 0.0;
        ev.total = l1;
        break;
    case LossKind::bas: {
        BasConfig cfg = opt.bas;
        cfg.fixed_beta.reset(); // the schedule always decides here
        ev.beta = beta_weight(l2.value(), cfg);
        ev.total = add(l1, mul_scalar(l2, ev.beta));
        break;
    }
    case LossKind::fixed_beta:
        ev.beta = opt.fixed_beta;
        ev.total = add(l1, mul_scalar(l2, ev.beta));
        break;
    }

    DiagnosticsReport& r = ev.report;
    r.align_score = align.value();
    r.modality_gap = gap.value();
    r.ch_image = ch_or_nan(image_features, ep.support_labels);
    r.ch_text = ch_or_nan(ts.all_features, ts.labels);

    // Entropy over the configured rectification range, averaged across
    // layers and support images; without rectification the EOS and
    // rectified channels mirror the raw CLS value.
    double e_cls = 0.0, e_eos = 0.0, e_rect = 0.0;
    std::size_t count = 0;
    for (const VisionOut& vo : outs) {
        for (std::size_t layer = model.cfg.ear_first;
             layer <= model.cfg.ear_last; ++layer) {
            const LayerTrace& t = vo.traces[layer - 1];
            double cls_h = cls_patch_entropy(t.cls_row);
            e_cls += cls_h;
            e_rect += cls_patch_entropy(t.effective_row);
            e_eos += opt.ear_on ? attention_entropy(t.eos_row) : cls_h;
            ++count;
        }
    }
    r.entropy_cls = e_cls / static_cast<double>(count);
    r.entropy_eos = e_eos / static_cast<double>(count);
    r.entropy_rectified = e_rect / static_cast<double>(count);
    return ev;
}

EpochRecord to_record(std::size_t epoch, const EpochEval& ev) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.l1 = ev.l1;
    rec.l2 = ev.l2;
    rec.beta = ev.beta;
    rec.report = ev.report;
    return rec;
}

[[noreturn]] void abort_epoch(std::size_t epoch, const EpochEval* ev,
                              const std::string& reason,
                              std::vector<EpochRecord>&& sofar) {
    std::string msg =
        "finetune: aborted at epoch " + std::to_string(epoch) + ": " + reason;
    if (ev) {
        msg += " (L1=" + fmt6(ev->l1) + ", L2=" + fmt6(ev->l2) +
               ", beta=" + fmt6(ev->beta) +
               ", align=" + fmt6(ev->report.align_score) +
               ", gap=" + fmt6(ev->report.modality_gap) + ")";
    }
    throw FinetuneAbort(msg, std::move(sofar));
}

} // namespace

std::string to_string(LossKind k) {
    switch (k) {
    case LossKind::i2t_only: return "i2t_only";
    case LossKind::clip: return "clip";
    case LossKind::bas: return "bas";
    case LossKind::fixed_beta: return "fixed_beta";
    }
    throw std::runtime_error("loss kind: unknown enumerator");
}

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "i2t_only") return LossKind::i2t_only;
    if (s == "clip") return LossKind::clip;
    if (s == "bas") return LossKind::bas;
    if (s == "fixed_beta") return LossKind::fixed_beta;
    throw std::runtime_error(
        "loss kind: expected one of i2t_only|clip|bas|fixed_beta, got `" +
        s + "`");
}

void FinetuneOptions::validate() const {
    if (!std::isfinite(alpha) || alpha < 0.0 || alpha > 1.0) {
        throw std::runtime_error(
            "finetune options: field `alpha` must lie in [0, 1]");
    }
    if (epochs < 1) {
        throw std::runtime_error(
            "finetune options: field `epochs` must be >= 1");
    }
    if (!std::isfinite(lr) || lr <= 0.0) {
        throw std::runtime_error(
            "finetune options: field `lr` must be finite and > 0");
    }
    if (!std::isfinite(tau) || tau <= 0.0) {
        throw std::runtime_error(
            "finetune options: field `tau` must be finite and > 0");
    }
    if (!std::isfinite(fixed_beta) || fixed_beta < 0.0) {
        throw std::runtime_error(
            "finetune options: field `fixed_beta` must be finite and >= 0");
    }
    bas.validate();
}

Episode sample_episode(const SynthDataset& data, std::size_t n_way,
                       std::size_t k_shot, std::size_t m_query,
                       std::size_t u_prompts, std::uint64_t seed) {
    if (n_way < 1 || k_shot < 1 || m_query < 1 || u_prompts < 1) {
        throw std::runtime_error(
            "sample_episode: n_way, k_shot, m_query, u_prompts must all be "
            ">= 1");
    }
    const std::size_t classes = data.images.size();
    if (classes < n_way) {
        throw std::runtime_error(
            "sample_episode: dataset has " + std::to_string(classes) +
            " classes, episode needs " + std::to_string(n_way));
    }

    Rng rng(seed);
    std::vector<std::size_t> ids(classes);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    for (std::size_t i = 0; i < n_way; ++i) {
        std::size_t pick = i + rng.index(classes - i);
        std::swap(ids[i], ids[pick]);
    }

    Episode ep;
    ep.n_way = n_way;
    ep.k_shot = k_shot;
    ep.m_query = m_query;
    ep.u_prompts = u_prompts;
    ep.class_ids.assign(ids.begin(), ids.begin() + n_way);
    ep.prompt_pool.resize(n_way);

    for (std::size_t c = 0; c < n_way; ++c) {
        const std::size_t g = ep.class_ids[c];
        const std::size_t have = data.images[g].size();
        if (have < k_shot + m_query) {
            throw std::runtime_error(
                "sample_episode: class " + std::to_string(g) + " has " +
                std::to_string(have) + " images, episode needs " +
                std::to_string(k_shot + m_query));
        }
        if (data.prompts[g].size() < u_prompts) {
            throw std::runtime_error(
                "sample_episode: class " + std::to_string(g) + " has " +
                std::to_string(data.prompts[g].size()) +
                " prompts, episode needs " + std::to_string(u_prompts));
        }

        std::vector<std::size_t> order(have);
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = 0; i < k_shot + m_query; ++i) {
            std::size_t pick = i + rng.index(have - i);
            std::swap(order[i], order[pick]);
        }
        for (std::size_t i = 0; i < k_shot; ++i) {
            ep.support_images.push_back(data.images[g][order[i]]);
            ep.support_labels.push_back(c);
        }
        for (std::size_t i = k_shot; i < k_shot + m_query; ++i) {
            ep.query_images.push_back(data.images[g][order[i]]);
            ep.query_labels.push_back(c);
        }

        const std::size_t pool = data.prompts[g].size();
        std::vector<std::size_t> porder(pool);
        std::iota(porder.begin(), porder.end(), std::size_t{0});
        for (std::size_t i = 0; i < u_prompts; ++i) {
            std::size_t pick = i + rng.index(pool - i);
            std::swap(porder[i], porder[pick]);
        }
        for (std::size_t i = 0; i < u_prompts; ++i)
            ep.prompt_pool[c].push_back(data.prompts[g][porder[i]]);
    }
    return ep;
}

std::vector<EpochRecord> finetune(DualEncoder& model, const Episode& ep,
                                  const FinetuneOptions& opt) {
    opt.validate();
    mark_trainable(model, opt.ear_on);
    std::vector<Tensor*> leaves = trainable_leaves(model, opt.ear_on);
    std::vector<EpochRecord> trace;
    trace.reserve(opt.epochs);

    if (leaves.empty()) {
        // No step can change anything, so the trace row is a constant:
        // evaluate once and replicate (bitwise what the loop would log).
        EpochEval ev = epoch_eval(model, ep, opt);
        for (std::size_t e = 0; e < opt.epochs; ++e)
            trace.push_back(to_record(e, ev));
        return trace;
    }

    for (std::size_t e = 0; e < opt.epochs; ++e) {
        EpochEval ev;
        try {
            ev = epoch_eval(model, ep, opt);
        } catch (const std::runtime_error& err) {
            abort_epoch(e, nullptr, err.what(), std::move(trace));
        }
        if (!std::isfinite(ev.total.value())) {
            abort_epoch(e, &ev, "non-finite loss", std::move(trace));
        }
        trace.push_back(to_record(e, ev));

        GradMap grads = backward(ev.total);
        for (Tensor* leaf : leaves) {
            Tensor g = grads.at(*leaf);
            std::vector<double> next(leaf->size());
            for (std::size_t i = 0; i < next.size(); ++i) {
                next[i] = leaf->at(i) - opt.lr * g.at(i);
                if (!std::isfinite(next[i])) {
                    abort_epoch(e, &ev, "non-finite parameter update",
                                std::move(trace));
                }
            }
            *leaf = Tensor::from_data(leaf->shape(), std::move(next), true);
        }
    }
    return trace;
}

AdaptedState adapt_state(const DualEncoder& model, const Episode& ep,
                         const FinetuneOptions& opt) {
    opt.validate();
    TextSide ts = text_side(model, ep, opt.ear_on);
    AdaptedState st;
    st.class_weights = ts.class_weights.detached();
    st.ear_on = opt.ear_on;
    if (opt.ear_on) {
        std::vector<Tensor> means;
        means.reserve(ts.eos_means.size());
        for (const Tensor& m : ts.eos_means) means.push_back(m.detached());
        st.ear = make_ear_context(model, means, opt.alpha);
    }
    return st;
}

std::size_t classify(const Tensor& image_feature,
                     const Tensor& class_weights) {
    if (!image_feature.defined() || image_feature.rank() != 1) {
        throw std::runtime_error("classify: expected a rank-1 feature");
    }
    if (!class_weights.defined() || class_weights.rank() != 2 ||
        class_weights.shape()[0] == 0 ||
        class_weights.shape()[1] != image_feature.size()) {
        throw std::runtime_error(
            "classify: class weights must be a non-empty matrix matching "
            "the feature width");
    }
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < class_weights.shape()[0]; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < image_feature.size(); ++j)
            s += image_feature.at(j) * class_weights.at(c, j);
        if (s > best_score) {
            best_score = s;
            best = c;
        }
    }
    return best;
}

std::size_t infer(const DualEncoder& model, const Tensor& image,
                  const AdaptedState& state) {
    VisionOut vo =
        vision_forward(model, image, state.ear_on ? &state.ear : nullptr);
    return classify(vo.feature, state.class_weights);
}

void EvalOptions::validate() const {
    if (n_way < 1 || k_shot < 1 || m_query < 1 || u_prompts < 1) {
        throw std::runtime_error(
            "eval options: n_way, k_shot, m_query, u_prompts must all be "
            ">= 1");
    }
    if (episodes_count < 1) {
        throw std::runtime_error(
            "eval options: field `episodes_count` must be >= 1");
    }
    if (workers < 1) {
        throw std::runtime_error("eval options: field `workers` must be >= 1");
    }
    tune.validate();
}

RunResult evaluate(const SynthDataset& data, const DualEncoder& base,
                   const EvalOptions& opt) {
    opt.validate();
    RunResult out;
    out.accuracies.assign(opt.episodes_count, 0.0);

    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto run_episode = [&](std::size_t e) {
        Episode ep = sample_episode(data, opt.n_way, opt.k_shot, opt.m_query,
                                    opt.u_prompts, derive_seed(opt.seed, e));
        DualEncoder model = detached_clone(base);
        std::vector<EpochRecord> tr = finetune(model, ep, opt.tune);
        AdaptedState st = adapt_state(model, ep, opt.tune);
        std::size_t correct = 0;
        for (std::size_t q = 0; q < ep.query_images.size(); ++q) {
            if (infer(model, ep.query_images[q], st) == ep.query_labels[q])
                ++correct;
        }
        out.accuracies[e] = static_cast<double>(correct) /
                            static_cast<double>(ep.query_images.size());
        if (e == 0) out.trace = std::move(tr);
    };

    if (opt.workers == 1) {
        for (std::size_t e = 0; e < opt.episodes_count; ++e) run_episode(e);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < opt.workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t e = w; e < opt.episodes_count;
                     e += opt.workers) {
                    if (failed.load()) return;
                    try {
                        run_episode(e);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(error_mutex);
                        if (!first_error)
                            first_error = std::current_exception();
                        failed.store(true);
                        return;
                    }
                }
            });
        }
        for (std::thread& t : pool) t.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    const double n = static_cast<double>(opt.episodes_count);
    double mean = 0.0;
    for (double a : out.accuracies) mean += a;
    mean /= n;
    out.mean_accuracy = mean;
    if (opt.episodes_count >= 2) {
        double var = 0.0;
        for (double a : out.accuracies) var += (a - mean) * (a - mean);
        var /= (n - 1.0);
        out.ci_half_width = 1.96 * std::sqrt(var / n);
    }
    return out;
}

} // namespace semprobe
