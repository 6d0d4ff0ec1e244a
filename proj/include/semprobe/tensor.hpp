#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace semprobe {

/// Deterministic RNG used everywhere in the library. All randomness flows
/// from explicit 64-bit seeds; there are no hidden entropy sources.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double normal(double stddev = 1.0) {
        std::normal_distribution<double> d(0.0, stddev);
        return d(gen_);
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }
    std::uint64_t next_u64() { return gen_(); }
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        std::uniform_int_distribution<std::size_t> d(0, n - 1);
        return d(gen_);
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

/// Stateless seed derivation (splitmix64 over a base seed and a stream id),
/// so independent components can draw reproducible sub-seeds.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::uint64_t id;
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // sized lazily during backward
    std::vector<NodePtr> parents;
    // Accumulates this node's grad into its parents' grad buffers.
    std::function<void(const TensorNode&)> backward_fn;
};

/// Dense row-major tensor of doubles with reverse-mode differentiation.
/// Rank 0 = scalar, rank 1 = row vector, rank 2 = matrix; no broadcasting
/// beyond matmul and row-wise ops. Tensors are immutable values once
/// created: ops return fresh tensors and never write through their inputs.
class Tensor {
public:
    Tensor() = default;

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    /// Validates that the entries are finite and match the shape.
    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    std::uint64_t id() const { return node_->id; }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& values() const { return node_->data; }
    /// Scalar value; throws unless size() == 1.
    double value() const;
    double at(std::size_t i) const { return node_->data.at(i); }
    double at(std::size_t r, std::size_t c) const;

    /// Copy of the values as a fresh leaf with no graph history.
    Tensor detached(bool requires_grad = false) const;

    const NodePtr& node() const { return node_; }

    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

private:
    NodePtr node_;
};

/// Gradients keyed by leaf tensor id. Leaves that never reached the loss
/// read back as zeros of their own shape.
class GradMap {
public:
    Tensor at(const Tensor& leaf) const;
    bool contains(const Tensor& leaf) const;
    void put(std::uint64_t id, Tensor g);
    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<std::uint64_t, Tensor> grads_;
};

/// Reverse-mode sweep from a scalar loss. Returns one gradient per
/// reachable leaf with requires_grad; throws if the loss is not a scalar.
GradMap backward(const Tensor& loss);

// ---- elementwise and arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---- linear algebra ----
/// (m,k)x(k,n) -> (m,n); (k)x(k,n) -> (n); (m,k)x(k) -> (m).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
/// Euclidean norm of a rank-1 tensor, as a scalar.
Tensor norm2(const Tensor& a);

// ---- shape ops ----
Tensor reshape(const Tensor& a, const Shape& shape);
/// Row r of a matrix as a rank-1 tensor.
Tensor row(const Tensor& a, std::size_t r);
/// Rows [r0, r1) of a matrix.
Tensor rows(const Tensor& a, std::size_t r0, std::size_t r1);
/// Concatenate two rank-1 tensors.
Tensor concat(const Tensor& a, const Tensor& b);
/// Stack rank-1 rows and/or matrices with equal column counts.
Tensor vstack(const std::vector<Tensor>& parts);
/// Element i of a rank-1 tensor, as a scalar.
Tensor pick(const Tensor& a, std::size_t i);
/// out[r] = a[r, cols[r]] for a rank-2 tensor.
Tensor select_positions(const Tensor& a, const std::vector<std::size_t>& cols);
/// Rows of `table` indexed by `ids` (embedding lookup).
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids);
/// Adds a compile-time constant to one entry of a matrix.
Tensor add_entry_const(const Tensor& a, std::size_t r, std::size_t c, double v);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Column means of a matrix, as a rank-1 tensor.
Tensor mean_rows(const Tensor& a);

// ---- row-wise nonlinearities ----
/// Numerically stable softmax; rank-1 acts on the row, rank-2 per row.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
/// x / ||x|| for a rank-1 tensor; errors on near-zero norm (eps 1e-12).
Tensor l2_normalize(const Tensor& a);
/// Row-wise (x - mean) / sqrt(var + 1e-5), no affine parameters.
Tensor layer_norm(const Tensor& a);

/// Max over coordinates of |g_ad - g_fd| / (|g_fd| + 1e-8), with central
/// differences of step h (h must lie in [1e-7, 1e-3]). `f` must map a leaf
/// tensor of x's shape to a scalar.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double h = 1e-5);

} // namespace semprobe
