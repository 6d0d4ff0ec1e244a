#include "semprobe/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace semprobe {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::runtime_error(std::string(what) +
                                     ": non-finite value encountered");
        }
    }
}

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad,
                  std::vector<NodePtr> parents,
                  std::function<void(const TensorNode&)> backward_fn) {
    if (shape_size(shape) != data.size()) {
        throw std::runtime_error("tensor: data size " +
                                 std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }
    check_finite(data, "tensor");
    auto n = std::make_shared<TensorNode>();
    n->id = g_next_id.fetch_add(1);
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
    return n;
}

bool any_grad(const std::vector<NodePtr>& parents) {
    for (const auto& p : parents) {
        if (p->requires_grad) return true;
    }
    return false;
}

/// Builds an interior node: requires_grad is inherited from the parents and
/// the backward_fn is dropped when no parent needs gradients.
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<NodePtr> parents,
               std::function<void(const TensorNode&)> backward_fn) {
    bool rg = any_grad(parents);
    if (!rg) {
        parents.clear();
        backward_fn = nullptr;
    }
    return Tensor(make_node(std::move(shape), std::move(data), rg,
                            std::move(parents), std::move(backward_fn)));
}

void ensure_grad(TensorNode& n) {
    if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) {
        throw std::runtime_error(std::string(op) + ": undefined tensor");
    }
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
    require_defined(t, op);
    if (t.rank() != r) {
        throw std::runtime_error(std::string(op) + ": expected rank " +
                                 std::to_string(r) + " tensor, got shape " +
                                 shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require_defined(a, op);
    require_defined(b, op);
    if (a.shape() != b.shape()) {
        throw std::runtime_error(std::string(op) + ": shape mismatch " +
                                 shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    }
}

} // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    // splitmix64 finalizer over the combined state; cheap, well mixed, and
    // stateless so callers can derive sub-seeds in any order.
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from_data({}, {v}, requires_grad);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(make_node(shape, std::vector<double>(shape_size(shape), 0.0),
                            requires_grad, {}, nullptr));
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    return from_data(shape, std::vector<double>(shape_size(shape), v),
                     requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data,
                         bool requires_grad) {
    return Tensor(
        make_node(shape, std::move(data), requires_grad, {}, nullptr));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev,
                     bool requires_grad) {
    std::vector<double> d(shape_size(shape));
    for (double& x : d) x = rng.normal(stddev);
    return from_data(shape, std::move(d), requires_grad);
}

std::size_t Tensor::rows() const {
    if (rank() != 2) {
        throw std::runtime_error("rows(): tensor has shape " +
                                 shape_str(shape()));
    }
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) {
        throw std::runtime_error("cols(): tensor has shape " +
                                 shape_str(shape()));
    }
    return shape()[1];
}

double Tensor::value() const {
    if (size() != 1) {
        throw std::runtime_error("value(): tensor has " +
                                 std::to_string(size()) +
                                 " elements, expected 1");
    }
    return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    if (rank() != 2) {
        throw std::runtime_error("at(r,c): tensor has shape " +
                                 shape_str(shape()));
    }
    if (r >= shape()[0] || c >= shape()[1]) {
        throw std::runtime_error("at(r,c): index out of range");
    }
    return node_->data[r * shape()[1] + c];
}

Tensor Tensor::detached(bool requires_grad) const {
    return from_data(shape(), node_->data, requires_grad);
}

Tensor GradMap::at(const Tensor& leaf) const {
    auto it = grads_.find(leaf.id());
    if (it != grads_.end()) return it->second;
    // Leaf never touched the loss: its gradient is identically zero.
    return Tensor::zeros(leaf.shape());
}

bool GradMap::contains(const Tensor& leaf) const {
    return grads_.count(leaf.id()) > 0;
}

void GradMap::put(std::uint64_t id, Tensor g) {
    grads_.emplace(id, std::move(g));
}

GradMap backward(const Tensor& loss) {
    require_defined(loss, "backward");
    if (loss.size() != 1) {
        throw std::runtime_error("backward: loss must be a scalar, got shape " +
                                 shape_str(loss.shape()));
    }

    // Depth-first topological order over the reachable graph.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorNode* n : order) n->grad.assign(n->data.size(), 0.0);
    loss.node()->grad[0] = 1.0;

    // `order` is children-after-parents reversed by construction of the DFS
    // postorder, so walk it back-to-front: each node's grad is complete
    // before it propagates to its parents.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }

    GradMap out;
    for (TensorNode* n : order) {
        if (n->requires_grad && n->parents.empty()) {
            out.put(n->id, Tensor::from_data(n->shape, n->grad));
        }
        n->grad.clear(); // release buffers; the map owns the results now
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb},
                   [pa, pb](const TensorNode& n) {
                       if (pa->requires_grad) {
                           ensure_grad(*pa);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pa->grad[i] += n.grad[i];
                       }
                       if (pb->requires_grad) {
                           ensure_grad(*pb);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pb->grad[i] += n.grad[i];
                       }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb},
                   [pa, pb](const TensorNode& n) {
                       if (pa->requires_grad) {
                           ensure_grad(*pa);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pa->grad[i] += n.grad[i];
                       }
                       if (pb->requires_grad) {
                           ensure_grad(*pb);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pb->grad[i] -= n.grad[i];
                       }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb},
                   [pa, pb](const TensorNode& n) {
                       if (pa->requires_grad) {
                           ensure_grad(*pa);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pa->grad[i] += n.grad[i] * pb->data[i];
                       }
                       if (pb->requires_grad) {
                           ensure_grad(*pb);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pb->grad[i] += n.grad[i] * pa->data[i];
                       }
                   });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b.at(i) == 0.0) throw std::runtime_error("div: division by zero");
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) / b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_op(a.shape(), std::move(out), {pa, pb},
                   [pa, pb](const TensorNode& n) {
                       if (pa->requires_grad) {
                           ensure_grad(*pa);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pa->grad[i] += n.grad[i] / pb->data[i];
                       }
                       if (pb->requires_grad) {
                           ensure_grad(*pb);
                           for (std::size_t i = 0; i < n.grad.size(); ++i)
                               pb->grad[i] -= n.grad[i] * pa->data[i] /
                                              (pb->data[i] * pb->data[i]);
                       }
                   });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double c) {
    require_defined(a, "add_scalar");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa},
                   [pa](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[i] += n.grad[i];
                   });
}

Tensor mul_scalar(const Tensor& a, double c) {
    require_defined(a, "mul_scalar");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa},
                   [pa, c](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[i] += n.grad[i] * c;
                   });
}

Tensor exp(const Tensor& a) {
    require_defined(a, "exp");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.at(i));
    auto pa = a.node();
    auto vals = out; // exp(x) reused by the backward pass
    return make_op(a.shape(), std::move(out), {pa},
                   [pa, vals](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[i] += n.grad[i] * vals[i];
                   });
}

Tensor log(const Tensor& a) {
    require_defined(a, "log");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a.at(i) <= 0.0) {
            throw std::runtime_error("log: non-positive input");
        }
        out[i] = std::log(a.at(i));
    }
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa},
                   [pa](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[i] += n.grad[i] / pa->data[i];
                   });
}

namespace {
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

double gelu_fwd(double x) {
    double u = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_bwd(double x) {
    double u = kGeluC * (x + 0.044715 * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}
} // namespace

Tensor gelu(const Tensor& a) {
    require_defined(a, "gelu");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_fwd(a.at(i));
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa},
                   [pa](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[i] += n.grad[i] * gelu_bwd(pa->data[i]);
                   });
}

Tensor sigmoid(const Tensor& a) {
    require_defined(a, "sigmoid");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = 1.0 / (1.0 + std::exp(-a.at(i)));
    auto pa = a.node();
    auto vals = out;
    return make_op(a.shape(), std::move(out), {pa},
                   [pa, vals](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[i] +=
                               n.grad[i] * vals[i] * (1.0 - vals[i]);
                   });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    const bool a_vec = a.rank() == 1;
    const bool b_vec = b.rank() == 1;
    if ((a.rank() != 1 && a.rank() != 2) || (b.rank() != 1 && b.rank() != 2) ||
        (a_vec && b_vec)) {
        throw std::runtime_error("matmul: unsupported ranks " +
                                 shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
    }
    const std::size_t m = a_vec ? 1 : a.shape()[0];
    const std::size_t k = a_vec ? a.shape()[0] : a.shape()[1];
    const std::size_t k2 = b_vec ? b.shape()[0] : b.shape()[0];
    const std::size_t n = b_vec ? 1 : b.shape()[1];
    if (k != k2) {
        throw std::runtime_error("matmul: inner dimensions disagree, " +
                                 shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j)
                out[i * n + j] += aip * bv[p * n + j];
        }
    }
    Shape out_shape;
    if (a_vec) out_shape = {n};
    else if (b_vec) out_shape = {m};
    else out_shape = {m, n};

    auto pa = a.node(), pb = b.node();
    return make_op(out_shape, std::move(out), {pa, pb},
                   [pa, pb, m, k, n](const TensorNode& nd) {
                       // dA = dC . B^T, dB = A^T . dC, with dC read as (m,n).
                       if (pa->requires_grad) {
                           ensure_grad(*pa);
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                   double s = 0.0;
                                   for (std::size_t j = 0; j < n; ++j)
                                       s += nd.grad[i * n + j] *
                                            pb->data[p * n + j];
                                   pa->grad[i * k + p] += s;
                               }
                       }
                       if (pb->requires_grad) {
                           ensure_grad(*pb);
                           for (std::size_t p = 0; p < k; ++p)
                               for (std::size_t j = 0; j < n; ++j) {
                                   double s = 0.0;
                                   for (std::size_t i = 0; i < m; ++i)
                                       s += pa->data[i * k + p] *
                                            nd.grad[i * n + j];
                                   pb->grad[p * n + j] += s;
                               }
                       }
                   });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
    auto pa = a.node();
    return make_op({c, r}, std::move(out), {pa},
                   [pa, r, c](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                               pa->grad[i * c + j] += n.grad[j * r + i];
                   });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    require_rank(a, 1, "dot");
    require_rank(b, 1, "dot");
    require_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i) * b.at(i);
    auto pa = a.node(), pb = b.node();
    return make_op({}, {s}, {pa, pb}, [pa, pb](const TensorNode& n) {
        const double g = n.grad[0];
        if (pa->requires_grad) {
            ensure_grad(*pa);
            for (std::size_t i = 0; i < pa->data.size(); ++i)
                pa->grad[i] += g * pb->data[i];
        }
        if (pb->requires_grad) {
            ensure_grad(*pb);
            for (std::size_t i = 0; i < pb->data.size(); ++i)
                pb->grad[i] += g * pa->data[i];
        }
    });
}

Tensor norm2(const Tensor& a) {
    require_rank(a, 1, "norm2");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i) * a.at(i);
    const double nrm = std::sqrt(s);
    auto pa = a.node();
    return make_op({}, {nrm}, {pa}, [pa, nrm](const TensorNode& n) {
        if (nrm == 0.0) {
            throw std::runtime_error("norm2: gradient undefined at zero");
        }
        ensure_grad(*pa);
        const double g = n.grad[0] / nrm;
        for (std::size_t i = 0; i < pa->data.size(); ++i)
            pa->grad[i] += g * pa->data[i];
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
    require_defined(a, "reshape");
    if (shape_size(shape) != a.size()) {
        throw std::runtime_error("reshape: cannot view " +
                                 shape_str(a.shape()) + " as " +
                                 shape_str(shape));
    }
    auto pa = a.node();
    return make_op(shape, a.values(), {pa}, [pa](const TensorNode& n) {
        ensure_grad(*pa);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            pa->grad[i] += n.grad[i];
    });
}

Tensor row(const Tensor& a, std::size_t r) {
    require_rank(a, 2, "row");
    if (r >= a.shape()[0]) {
        throw std::runtime_error("row: index " + std::to_string(r) +
                                 " out of range for " + shape_str(a.shape()));
    }
    const std::size_t c = a.shape()[1];
    std::vector<double> out(a.values().begin() + r * c,
                            a.values().begin() + (r + 1) * c);
    auto pa = a.node();
    return make_op({c}, std::move(out), {pa}, [pa, r, c](const TensorNode& n) {
        ensure_grad(*pa);
        for (std::size_t j = 0; j < c; ++j) pa->grad[r * c + j] += n.grad[j];
    });
}

Tensor rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    require_rank(a, 2, "rows");
    if (r0 >= r1 || r1 > a.shape()[0]) {
        throw std::runtime_error("rows: invalid range [" + std::to_string(r0) +
                                 "," + std::to_string(r1) + ") for " +
                                 shape_str(a.shape()));
    }
    const std::size_t c = a.shape()[1];
    std::vector<double> out(a.values().begin() + r0 * c,
                            a.values().begin() + r1 * c);
    auto pa = a.node();
    return make_op({r1 - r0, c}, std::move(out), {pa},
                   [pa, r0, c](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[r0 * c + i] += n.grad[i];
                   });
}

Tensor concat(const Tensor& a, const Tensor& b) {
    require_rank(a, 1, "concat");
    require_rank(b, 1, "concat");
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    auto pa = a.node(), pb = b.node();
    const std::size_t na = a.size();
    return make_op({a.size() + b.size()}, std::move(out), {pa, pb},
                   [pa, pb, na](const TensorNode& n) {
                       if (pa->requires_grad) {
                           ensure_grad(*pa);
                           for (std::size_t i = 0; i < na; ++i)
                               pa->grad[i] += n.grad[i];
                       }
                       if (pb->requires_grad) {
                           ensure_grad(*pb);
                           for (std::size_t i = na; i < n.grad.size(); ++i)
                               pb->grad[i - na] += n.grad[i];
                       }
                   });
}

Tensor vstack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::runtime_error("vstack: no inputs");
    std::size_t c = 0;
    for (const auto& p : parts) {
        require_defined(p, "vstack");
        if (p.rank() != 1 && p.rank() != 2) {
            throw std::runtime_error("vstack: parts must be rank 1 or 2");
        }
        std::size_t pc = p.rank() == 1 ? p.shape()[0] : p.shape()[1];
        if (c == 0) c = pc;
        if (pc != c) {
            throw std::runtime_error("vstack: column count mismatch");
        }
    }
    std::vector<double> out;
    std::vector<NodePtr> parents;
    std::vector<std::size_t> offsets; // flat offset of each part in the output
    std::size_t r = 0;
    for (const auto& p : parts) {
        offsets.push_back(out.size());
        out.insert(out.end(), p.values().begin(), p.values().end());
        r += p.rank() == 1 ? 1 : p.shape()[0];
        parents.push_back(p.node());
    }
    auto offs = offsets;
    return make_op({r, c}, std::move(out), parents,
                   [offs](const TensorNode& n) {
                       for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
                           auto& p = *n.parents[pi];
                           if (!p.requires_grad) continue;
                           ensure_grad(p);
                           for (std::size_t i = 0; i < p.data.size(); ++i)
                               p.grad[i] += n.grad[offs[pi] + i];
                       }
                   });
}

Tensor pick(const Tensor& a, std::size_t i) {
    require_rank(a, 1, "pick");
    if (i >= a.size()) {
        throw std::runtime_error("pick: index " + std::to_string(i) +
                                 " out of range for " + shape_str(a.shape()));
    }
    auto pa = a.node();
    return make_op({}, {a.at(i)}, {pa}, [pa, i](const TensorNode& n) {
        ensure_grad(*pa);
        pa->grad[i] += n.grad[0];
    });
}

Tensor select_positions(const Tensor& a, const std::vector<std::size_t>& cols) {
    require_rank(a, 2, "select_positions");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    if (cols.size() != r) {
        throw std::runtime_error(
            "select_positions: need one column index per row");
    }
    std::vector<double> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (cols[i] >= c) {
            throw std::runtime_error("select_positions: column out of range");
        }
        out[i] = a.at(i, cols[i]);
    }
    auto pa = a.node();
    auto idx = cols;
    return make_op({r}, std::move(out), {pa},
                   [pa, idx, c](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                           pa->grad[i * c + idx[i]] += n.grad[i];
                   });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
    require_rank(table, 2, "gather_rows");
    if (ids.empty()) throw std::runtime_error("gather_rows: empty index list");
    const std::size_t v = table.shape()[0], c = table.shape()[1];
    std::vector<double> out;
    out.reserve(ids.size() * c);
    for (std::size_t id : ids) {
        if (id >= v) {
            throw std::runtime_error("gather_rows: row " + std::to_string(id) +
                                     " out of range for " +
                                     shape_str(table.shape()));
        }
        out.insert(out.end(), table.values().begin() + id * c,
                   table.values().begin() + (id + 1) * c);
    }
    auto pt = table.node();
    auto idx = ids;
    return make_op({ids.size(), c}, std::move(out), {pt},
                   [pt, idx, c](const TensorNode& n) {
                       ensure_grad(*pt);
                       for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t j = 0; j < c; ++j)
                               pt->grad[idx[i] * c + j] += n.grad[i * c + j];
                   });
}

Tensor add_entry_const(const Tensor& a, std::size_t r, std::size_t c,
                       double v) {
    require_rank(a, 2, "add_entry_const");
    if (r >= a.shape()[0] || c >= a.shape()[1]) {
        throw std::runtime_error("add_entry_const: index out of range");
    }
    std::vector<double> out = a.values();
    out[r * a.shape()[1] + c] += v;
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa},
                   [pa](const TensorNode& n) {
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[i] += n.grad[i];
                   });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    require_defined(a, "sum");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i);
    auto pa = a.node();
    return make_op({}, {s}, {pa}, [pa](const TensorNode& n) {
        ensure_grad(*pa);
        for (std::size_t i = 0; i < pa->data.size(); ++i)
            pa->grad[i] += n.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    require_defined(a, "mean");
    if (a.size() == 0) throw std::runtime_error("mean: empty tensor");
    return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean_rows(const Tensor& a) {
    require_rank(a, 2, "mean_rows");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += a.at(i, j);
    for (double& x : out) x /= static_cast<double>(r);
    auto pa = a.node();
    return make_op({c}, std::move(out), {pa},
                   [pa, r, c](const TensorNode& n) {
                       ensure_grad(*pa);
                       const double inv = 1.0 / static_cast<double>(r);
                       for (std::size_t i = 0; i < r; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                               pa->grad[i * c + j] += n.grad[j] * inv;
                   });
}

// ---------------------------------------------------------------------------
// row-wise nonlinearities
// ---------------------------------------------------------------------------

namespace {

void softmax_row(const double* x, double* y, std::size_t n) {
    double mx = x[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        z += y[i];
    }
    for (std::size_t i = 0; i < n; ++i) y[i] /= z;
}

} // namespace

Tensor softmax(const Tensor& a) {
    require_defined(a, "softmax");
    if (a.rank() != 1 && a.rank() != 2) {
        throw std::runtime_error("softmax: expected rank 1 or 2, got " +
                                 shape_str(a.shape()));
    }
    const std::size_t r = a.rank() == 1 ? 1 : a.shape()[0];
    const std::size_t c = a.rank() == 1 ? a.shape()[0] : a.shape()[1];
    if (c == 0) throw std::runtime_error("softmax: empty row");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < r; ++i)
        softmax_row(a.values().data() + i * c, out.data() + i * c, c);
    auto pa = a.node();
    auto y = out;
    return make_op(a.shape(), std::move(out), {pa},
                   [pa, y, r, c](const TensorNode& n) {
                       // dx_j = y_j * (dy_j - sum_k dy_k y_k), per row.
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < r; ++i) {
                           const double* yi = y.data() + i * c;
                           const double* gi = n.grad.data() + i * c;
                           double s = 0.0;
                           for (std::size_t j = 0; j < c; ++j)
                               s += gi[j] * yi[j];
                           for (std::size_t j = 0; j < c; ++j)
                               pa->grad[i * c + j] += yi[j] * (gi[j] - s);
                       }
                   });
}

Tensor log_softmax(const Tensor& a) {
    require_defined(a, "log_softmax");
    if (a.rank() != 1 && a.rank() != 2) {
        throw std::runtime_error("log_softmax: expected rank 1 or 2, got " +
                                 shape_str(a.shape()));
    }
    const std::size_t r = a.rank() == 1 ? 1 : a.shape()[0];
    const std::size_t c = a.rank() == 1 ? a.shape()[0] : a.shape()[1];
    if (c == 0) throw std::runtime_error("log_softmax: empty row");
    std::vector<double> out(a.size());
    std::vector<double> soft(a.size());
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = a.values().data() + i * c;
        double mx = x[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
        const double lz = std::log(z);
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = x[j] - mx - lz;
            soft[i * c + j] = std::exp(out[i * c + j]);
        }
    }
    auto pa = a.node();
    return make_op(a.shape(), std::move(out), {pa},
                   [pa, soft, r, c](const TensorNode& n) {
                       // dx_j = dy_j - softmax_j * sum_k dy_k, per row.
                       ensure_grad(*pa);
                       for (std::size_t i = 0; i < r; ++i) {
                           const double* gi = n.grad.data() + i * c;
                           double s = 0.0;
                           for (std::size_t j = 0; j < c; ++j) s += gi[j];
                           for (std::size_t j = 0; j < c; ++j)
                               pa->grad[i * c + j] +=
                                   gi[j] - soft[i * c + j] * s;
                       }
                   });
}

Tensor l2_normalize(const Tensor& a) {
    require_rank(a, 1, "l2_normalize");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.at(i) * a.at(i);
    const double nrm = std::sqrt(s);
    if (nrm <= 1e-12) {
        throw std::runtime_error("l2_normalize: vector norm below 1e-12");
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a.at(i) / nrm;
    auto pa = a.node();
    auto y = out;
    return make_op(a.shape(), std::move(out), {pa},
                   [pa, y, nrm](const TensorNode& n) {
                       // dx = (dy - y * (dy . y)) / ||x||
                       ensure_grad(*pa);
                       double s = 0.0;
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           s += n.grad[i] * y[i];
                       for (std::size_t i = 0; i < n.grad.size(); ++i)
                           pa->grad[i] += (n.grad[i] - y[i] * s) / nrm;
                   });
}

Tensor layer_norm(const Tensor& a) {
    require_defined(a, "layer_norm");
    if (a.rank() != 1 && a.rank() != 2) {
        throw std::runtime_error("layer_norm: expected rank 1 or 2, got " +
                                 shape_str(a.shape()));
    }
    constexpr double kEps = 1e-5;
    const std::size_t r = a.rank() == 1 ? 1 : a.shape()[0];
    const std::size_t c = a.rank() == 1 ? a.shape()[0] : a.shape()[1];
    if (c == 0) throw std::runtime_error("layer_norm: empty row");
    std::vector<double> out(a.size());
    std::vector<double> inv_sd(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = a.values().data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += x[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(c);
        inv_sd[i] = 1.0 / std::sqrt(var + kEps);
        for (std::size_t j = 0; j < c; ++j)
            out[i * c + j] = (x[j] - mu) * inv_sd[i];
    }
    auto pa = a.node();
    auto y = out;
    return make_op(a.shape(), std::move(out), {pa},
                   [pa, y, inv_sd, r, c](const TensorNode& n) {
                       // dx = inv_sd * (dy - mean(dy) - y * mean(dy*y)),
                       // per row, the standard layer-norm VJP without affine.
                       ensure_grad(*pa);
                       const double invc = 1.0 / static_cast<double>(c);
                       for (std::size_t i = 0; i < r; ++i) {
                           const double* gi = n.grad.data() + i * c;
                           const double* yi = y.data() + i * c;
                           double gmean = 0.0, gymean = 0.0;
                           for (std::size_t j = 0; j < c; ++j) {
                               gmean += gi[j];
                               gymean += gi[j] * yi[j];
                           }
                           gmean *= invc;
                           gymean *= invc;
                           for (std::size_t j = 0; j < c; ++j)
                               pa->grad[i * c + j] +=
                                   inv_sd[i] *
                                   (gi[j] - gmean - yi[j] * gymean);
                       }
                   });
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h) {
    if (h < 1e-7 || h > 1e-3) {
        throw std::runtime_error(
            "finite_diff_check: step must lie in [1e-7, 1e-3]");
    }
    if (!x.defined()) {
        throw std::runtime_error("finite_diff_check: undefined input");
    }
    Tensor leaf = x.detached(true);
    GradMap grads = backward(f(leaf));
    Tensor g_ad = grads.at(leaf);

    std::vector<double> base = leaf.values();
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> plus = base, minus = base;
        plus[i] += h;
        minus[i] -= h;
        const double fp =
            f(Tensor::from_data(leaf.shape(), std::move(plus))).value();
        const double fm =
            f(Tensor::from_data(leaf.shape(), std::move(minus))).value();
        const double g_fd = (fp - fm) / (2.0 * h);
        const double rel =
            std::abs(g_ad.at(i) - g_fd) / (std::abs(g_fd) + 1e-8);
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace semprobe
