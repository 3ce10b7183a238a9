#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bm/errors.hpp"

namespace bm {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    Eigen::ArrayXd data;   // flat row-major values
    Eigen::ArrayXd grad;   // same length as data once assigned
    bool has_grad = false;
    bool requires_grad = false;
    std::uint64_t tape_id = 0; // generation of the tape that produced this node
};

class Tensor make_tensor(std::shared_ptr<TensorNode> n);

} // namespace detail

class Tape;

// Dense 64-bit tensor with value semantics over a shared node. Ops executed
// while a Tape is active record backward rules; backward() then fills .grad
// for every requires_grad tensor the recorded graph touches.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor constant(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::span<const double> values,
                            bool requires_grad = false);
    static Tensor from_array(Shape shape, Eigen::ArrayXd values,
                             bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool valid() const { return n_ != nullptr; }
    const Shape& shape() const { return node().shape; }
    std::int64_t numel() const { return node().data.size(); }
    std::int64_t dim(std::size_t i) const { return node().shape.at(i); }
    std::size_t rank() const { return node().shape.size(); }

    const Eigen::ArrayXd& array() const { return node().data; }
    Eigen::ArrayXd& mutable_array() { return node().data; }
    double operator[](std::int64_t i) const { return node().data[i]; }
    double value() const; // scalar tensors only

    bool requires_grad() const { return node().requires_grad; }
    void set_requires_grad(bool on) { node().requires_grad = on; }

    bool has_grad() const { return node().has_grad; }
    const Eigen::ArrayXd& grad() const;
    void zero_grad();

    // Index of the largest entry (ties to the lowest index). Rank-1 only.
    std::int64_t argmax() const;

    bool all_finite() const { return node().data.allFinite(); }

    detail::TensorNode& node() const {
        if (!n_) throw ContractError("use of empty tensor");
        return *n_;
    }
    const std::shared_ptr<detail::TensorNode>& node_ptr() const { return n_; }

private:
    friend class Tape;
    friend Tensor detail::make_tensor(std::shared_ptr<detail::TensorNode> n);
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : n_(std::move(n)) {}
    std::shared_ptr<detail::TensorNode> n_;
};

namespace detail {
inline Tensor make_tensor(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }
} // namespace detail

// Ordered record of primitive ops. Ops append in execution order, so the
// record is topologically sorted by construction; backward() walks it once
// in reverse. Adjoints live in a per-traversal map, never in shared nodes,
// so read-only model evaluation stays safe across threads.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Adjoint buffers for one traversal, keyed by node.
    using AdjointMap =
        std::unordered_map<const detail::TensorNode*, Eigen::ArrayXd>;

    struct Op {
        std::vector<std::shared_ptr<detail::TensorNode>> nodes; // [out, ins...]
        std::function<void(AdjointMap&)> backprop;
    };

    // Seeds d(root)=1 and accumulates d(root)/d(t) into t.grad for every
    // requires_grad tensor on the tape. Repeated calls accumulate.
    void backward(const Tensor& root);

    // Same traversal, but grads are written only into the listed tensors.
    // Used by attacks so concurrent evaluations never touch shared params.
    void backward(const Tensor& root, std::span<const Tensor> only);

    std::size_t size() const { return ops_.size(); }
    void clear();

    std::uint64_t id() const { return id_; }
    static Tape* active();

    void record(Op op) { ops_.push_back(std::move(op)); }

private:
    void run_backward(const Tensor& root, const std::vector<Tensor>* only);

    std::vector<Op> ops_;
    std::uint64_t id_;
    Tape* prev_ = nullptr;
};

namespace ops {

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// a: [m x k], b: [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x: [m x n], bias: [n]; adds bias to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

// x: [N x C x H x W], bias: [C]; adds bias to every channel plane.
Tensor add_channelwise(const Tensor& x, const Tensor& bias);

// input: [N x C x H x W], kernel: [F x C x kh x kw]; cross-correlation.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride,
              std::int64_t padding);

enum class PoolKind { max, avg };

Tensor pool2d(const Tensor& input, PoolKind kind, std::int64_t window,
              std::int64_t stride);

enum class ActKind { tanh, relu, sigmoid };

Tensor activation(const Tensor& x, ActKind kind);

// Rank-1 [n] or rank-2 [B x n] (row-wise); numerically stabilized.
Tensor softmax(const Tensor& logits);

// -log(p[label]), p clamped at 1e-12. probabilities: rank-1.
Tensor cross_entropy(const Tensor& probabilities, std::int64_t label);

Tensor reshape(const Tensor& x, Shape shape);
Tensor row(const Tensor& x, std::int64_t i);      // [m x n] -> [n]
Tensor pick(const Tensor& x, std::int64_t flat);  // -> scalar
Tensor sum(const Tensor& x);                      // -> scalar
Tensor l2_norm(const Tensor& x);                  // -> scalar, sqrt(sum x^2)

} // namespace ops
} // namespace bm
