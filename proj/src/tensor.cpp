#include "bm/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace bm {

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) {
        if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_ids{1};

NodePtr make_node(Shape shape, Eigen::ArrayXd data, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    if (numel(shape) != data.size())
        throw DimensionError("shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

constexpr double kCeFloor = 1e-12;

Tensor wrap(Shape shape, Eigen::ArrayXd data) {
    return detail::make_tensor(make_node(std::move(shape), std::move(data), false));
}

Eigen::ArrayXd& adjoint_of(Tape::AdjointMap& adj, const TensorNode* n) {
    auto [it, inserted] = adj.try_emplace(n);
    if (inserted) it->second = Eigen::ArrayXd::Zero(n->data.size());
    return it->second;
}

const Eigen::ArrayXd* adjoint_if_any(const Tape::AdjointMap& adj, const TensorNode* n) {
    auto it = adj.find(n);
    return it == adj.end() ? nullptr : &it->second;
}

Tape* recording_tape(std::initializer_list<const Tensor*> ins) {
    Tape* t = g_active_tape;
    if (!t) return nullptr;
    for (const Tensor* in : ins)
        if (in->requires_grad() || in->node().tape_id == t->id()) return t;
    return nullptr;
}

void record_op(Tape* t, const Tensor& out, std::initializer_list<const Tensor*> ins,
               std::function<void(Tape::AdjointMap&)> backprop) {
    out.node().tape_id = t->id();
    Tape::Op op;
    op.nodes.reserve(1 + ins.size());
    op.nodes.push_back(out.node_ptr());
    for (const Tensor* in : ins) op.nodes.push_back(in->node_ptr());
    op.backprop = std::move(backprop);
    t->record(std::move(op));
}

void ensure_grad(TensorNode& n) {
    if (!n.has_grad) {
        n.grad = Eigen::ArrayXd::Zero(n.data.size());
        n.has_grad = true;
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

} // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = numel(shape);
    return Tensor(make_node(std::move(shape), Eigen::ArrayXd::Zero(n), requires_grad));
}

Tensor Tensor::constant(Shape shape, double value, bool requires_grad) {
    if (!std::isfinite(value)) throw ContractError("non-finite tensor fill value");
    auto n = numel(shape);
    return Tensor(make_node(std::move(shape), Eigen::ArrayXd::Constant(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::span<const double> values, bool requires_grad) {
    Eigen::ArrayXd d(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) d[static_cast<std::int64_t>(i)] = values[i];
    return from_array(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from_array(Shape shape, Eigen::ArrayXd values, bool requires_grad) {
    if (!values.allFinite()) throw ContractError("non-finite entries in tensor data");
    return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_array({1}, Eigen::ArrayXd::Constant(1, value), requires_grad);
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
    return node().data[0];
}

const Eigen::ArrayXd& Tensor::grad() const {
    if (!node().has_grad) throw ContractError("tensor has no gradient assigned");
    return node().grad;
}

void Tensor::zero_grad() {
    auto& n = node();
    n.grad = Eigen::ArrayXd::Zero(n.data.size());
    n.has_grad = true;
}

std::int64_t Tensor::argmax() const {
    if (rank() != 1) throw ContractError("argmax expects a rank-1 tensor");
    const auto& d = node().data;
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < d.size(); ++i)
        if (d[i] > d[best]) best = i;
    return best;
}

Tape::Tape() : id_(g_tape_ids.fetch_add(1)) {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::clear() {
    ops_.clear();
    id_ = g_tape_ids.fetch_add(1);
}

void Tape::backward(const Tensor& root) { run_backward(root, nullptr); }

void Tape::backward(const Tensor& root, std::span<const Tensor> only) {
    std::vector<Tensor> filter(only.begin(), only.end());
    run_backward(root, &filter);
}

void Tape::run_backward(const Tensor& root, const std::vector<Tensor>* only) {
    if (root.numel() != 1)
        throw ContractError("backward root must be scalar, got " + shape_str(root.shape()));
    if (ops_.empty()) throw ContractError("backward on empty tape");

    AdjointMap adj;
    adj.emplace(root.node_ptr().get(), Eigen::ArrayXd::Ones(1));
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backprop(adj);

    if (only) {
        for (const Tensor& t : *only) {
            auto& n = t.node();
            ensure_grad(n);
            if (const auto* a = adjoint_if_any(adj, &n)) n.grad += *a;
        }
        return;
    }
    std::unordered_set<const TensorNode*> flushed;
    for (const Op& op : ops_) {
        for (const auto& n : op.nodes) {
            if (!n->requires_grad || !flushed.insert(n.get()).second) continue;
            ensure_grad(*n);
            if (const auto* a = adjoint_if_any(adj, n.get())) n->grad += *a;
        }
    }
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = wrap(a.shape(), a.array() + b.array());
    if (Tape* t = recording_tape({&a, &b})) {
        auto po = out.node_ptr();
        auto pa = a.node_ptr();
        auto pb = b.node_ptr();
        record_op(t, out, {&a, &b}, [po, pa, pb](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, pa.get()) += *g;
            adjoint_of(adj, pb.get()) += *g;
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = wrap(a.shape(), a.array() - b.array());
    if (Tape* t = recording_tape({&a, &b})) {
        auto po = out.node_ptr();
        auto pa = a.node_ptr();
        auto pb = b.node_ptr();
        record_op(t, out, {&a, &b}, [po, pa, pb](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, pa.get()) += *g;
            adjoint_of(adj, pb.get()) -= *g;
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = wrap(a.shape(), a.array() * b.array());
    if (Tape* t = recording_tape({&a, &b})) {
        auto po = out.node_ptr();
        auto pa = a.node_ptr();
        auto pb = b.node_ptr();
        record_op(t, out, {&a, &b}, [po, pa, pb](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, pa.get()) += *g * pb->data;
            adjoint_of(adj, pb.get()) += *g * pa->data;
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = wrap(a.shape(), a.array() * c);
    if (Tape* t = recording_tape({&a})) {
        auto po = out.node_ptr();
        auto pa = a.node_ptr();
        record_op(t, out, {&a}, [po, pa, c](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, pa.get()) += *g * c;
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Eigen::ArrayXd data(m * n);
    MutMap(data.data(), m, n).noalias() =
        ConstMap(a.array().data(), m, k) * ConstMap(b.array().data(), k, n);
    Tensor out = wrap({m, n}, std::move(data));
    if (Tape* t = recording_tape({&a, &b})) {
        auto po = out.node_ptr();
        auto pa = a.node_ptr();
        auto pb = b.node_ptr();
        record_op(t, out, {&a, &b}, [po, pa, pb, m, k, n](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            ConstMap gout(g->data(), m, n);
            MutMap(adjoint_of(adj, pa.get()).data(), m, k).noalias() +=
                gout * ConstMap(pb->data.data(), k, n).transpose();
            MutMap(adjoint_of(adj, pb.get()).data(), k, n).noalias() +=
                ConstMap(pa->data.data(), m, k).transpose() * gout;
        });
    }
    return out;
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0))
        throw DimensionError("add_rowwise: incompatible shapes " + shape_str(x.shape()) +
                             " and " + shape_str(bias.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    Eigen::ArrayXd data = x.array();
    MutMap dm(data.data(), m, n);
    for (std::int64_t i = 0; i < m; ++i)
        dm.row(i) += Eigen::Map<const Eigen::RowVectorXd>(bias.array().data(), n);
    Tensor out = wrap(x.shape(), std::move(data));
    if (Tape* t = recording_tape({&x, &bias})) {
        auto po = out.node_ptr();
        auto px = x.node_ptr();
        auto pb = bias.node_ptr();
        record_op(t, out, {&x, &bias}, [po, px, pb, m, n](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, px.get()) += *g;
            auto& gb = adjoint_of(adj, pb.get());
            ConstMap gm(g->data(), m, n);
            for (std::int64_t j = 0; j < n; ++j) gb[j] += gm.col(j).sum();
        });
    }
    return out;
}

Tensor add_channelwise(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 4 || bias.rank() != 1 || x.dim(1) != bias.dim(0))
        throw DimensionError("add_channelwise: incompatible shapes " + shape_str(x.shape()) +
                             " and " + shape_str(bias.shape()));
    const std::int64_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    Eigen::ArrayXd data = x.array();
    for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t c = 0; c < C; ++c)
            data.segment((i * C + c) * plane, plane) += bias[c];
    Tensor out = wrap(x.shape(), std::move(data));
    if (Tape* t = recording_tape({&x, &bias})) {
        auto po = out.node_ptr();
        auto px = x.node_ptr();
        auto pb = bias.node_ptr();
        record_op(t, out, {&x, &bias}, [po, px, pb, N, C, plane](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, px.get()) += *g;
            auto& gb = adjoint_of(adj, pb.get());
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t c = 0; c < C; ++c)
                    gb[c] += g->segment((i * C + c) * plane, plane).sum();
        });
    }
    return out;
}

namespace {

// Gather conv patches: cols is [C*kh*kw] x [OH*OW] for one sample.
void im2col(const double* in, std::int64_t C, std::int64_t H, std::int64_t W,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t OH, std::int64_t OW, RowMat& cols) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const std::int64_t r = (c * kh + ki) * kw + kj;
                for (std::int64_t oh = 0; oh < OH; ++oh) {
                    const std::int64_t ih = oh * stride + ki - pad;
                    for (std::int64_t ow = 0; ow < OW; ++ow) {
                        const std::int64_t iw = ow * stride + kj - pad;
                        const bool inside = ih >= 0 && ih < H && iw >= 0 && iw < W;
                        cols(r, oh * OW + ow) = inside ? in[(c * H + ih) * W + iw] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const RowMat& cols, std::int64_t C, std::int64_t H, std::int64_t W,
                       std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                       std::int64_t OH, std::int64_t OW, double* out) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t ki = 0; ki < kh; ++ki) {
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const std::int64_t r = (c * kh + ki) * kw + kj;
                for (std::int64_t oh = 0; oh < OH; ++oh) {
                    const std::int64_t ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) continue;
                    for (std::int64_t ow = 0; ow < OW; ++ow) {
                        const std::int64_t iw = ow * stride + kj - pad;
                        if (iw < 0 || iw >= W) continue;
                        out[(c * H + ih) * W + iw] += cols(r, oh * OW + ow);
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride,
              std::int64_t padding) {
    if (input.rank() != 4 || kernel.rank() != 4)
        throw DimensionError("conv2d expects NCHW input and FCHW kernel");
    if (input.dim(1) != kernel.dim(1))
        throw DimensionError("conv2d: channel mismatch " + shape_str(input.shape()) + " vs " +
                             shape_str(kernel.shape()));
    if (stride < 1 || padding < 0) throw ContractError("conv2d: bad stride/padding");
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t F = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const std::int64_t OH = (H + 2 * padding - kh) / stride + 1;
    const std::int64_t OW = (W + 2 * padding - kw) / stride + 1;
    if (H + 2 * padding < kh || W + 2 * padding < kw || OH <= 0 || OW <= 0)
        throw DimensionError("conv2d: non-positive output extent");

    const std::int64_t K = C * kh * kw;
    Eigen::ArrayXd data(N * F * OH * OW);
    RowMat cols(K, OH * OW);
    ConstMap wmat(kernel.array().data(), F, K);
    for (std::int64_t i = 0; i < N; ++i) {
        im2col(input.array().data() + i * C * H * W, C, H, W, kh, kw, stride, padding, OH, OW,
               cols);
        MutMap(data.data() + i * F * OH * OW, F, OH * OW).noalias() = wmat * cols;
    }
    Tensor out = wrap({N, F, OH, OW}, std::move(data));
    if (Tape* t = recording_tape({&input, &kernel})) {
        auto po = out.node_ptr();
        auto pi = input.node_ptr();
        auto pk = kernel.node_ptr();
        record_op(t, out, {&input, &kernel},
                  [po, pi, pk, N, C, H, W, F, kh, kw, stride, padding, OH, OW,
                   K](Tape::AdjointMap& adj) {
                      const auto* g = adjoint_if_any(adj, po.get());
                      if (!g) return;
                      auto& gin = adjoint_of(adj, pi.get());
                      auto& gker = adjoint_of(adj, pk.get());
                      MutMap gw(gker.data(), F, K);
                      ConstMap wmat(pk->data.data(), F, K);
                      RowMat cols(K, OH * OW);
                      RowMat gcols(K, OH * OW);
                      for (std::int64_t i = 0; i < N; ++i) {
                          ConstMap gout(g->data() + i * F * OH * OW, F, OH * OW);
                          im2col(pi->data.data() + i * C * H * W, C, H, W, kh, kw, stride,
                                 padding, OH, OW, cols);
                          gw.noalias() += gout * cols.transpose();
                          gcols.noalias() = wmat.transpose() * gout;
                          col2im_accumulate(gcols, C, H, W, kh, kw, stride, padding, OH, OW,
                                            gin.data() + i * C * H * W);
                      }
                  });
    }
    return out;
}

Tensor pool2d(const Tensor& input, PoolKind kind, std::int64_t window, std::int64_t stride) {
    if (input.rank() != 4) throw DimensionError("pool2d expects NCHW input");
    if (window < 1 || stride < 1) throw ContractError("pool2d: bad window/stride");
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (window > H || window > W)
        throw DimensionError("pool2d: window " + std::to_string(window) +
                             " exceeds input extents " + shape_str(input.shape()));
    const std::int64_t OH = (H - window) / stride + 1;
    const std::int64_t OW = (W - window) / stride + 1;

    Eigen::ArrayXd data(N * C * OH * OW);
    std::vector<std::int64_t> argmax;
    if (kind == PoolKind::max) argmax.resize(static_cast<std::size_t>(N * C * OH * OW));
    const double* in = input.array().data();
    for (std::int64_t i = 0; i < N; ++i) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* plane = in + (i * C + c) * H * W;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    const std::int64_t cell = ((i * C + c) * OH + oh) * OW + ow;
                    if (kind == PoolKind::max) {
                        // Ties resolve to the lowest flat index.
                        std::int64_t best = (oh * stride) * W + (ow * stride);
                        double bestv = plane[best];
                        for (std::int64_t u = 0; u < window; ++u)
                            for (std::int64_t v = 0; v < window; ++v) {
                                const std::int64_t idx =
                                    (oh * stride + u) * W + (ow * stride + v);
                                if (plane[idx] > bestv) {
                                    bestv = plane[idx];
                                    best = idx;
                                }
                            }
                        data[cell] = bestv;
                        argmax[static_cast<std::size_t>(cell)] = (i * C + c) * H * W + best;
                    } else {
                        double acc = 0.0;
                        for (std::int64_t u = 0; u < window; ++u)
                            for (std::int64_t v = 0; v < window; ++v)
                                acc += plane[(oh * stride + u) * W + (ow * stride + v)];
                        data[cell] = acc / static_cast<double>(window * window);
                    }
                }
            }
        }
    }
    Tensor out = wrap({N, C, OH, OW}, std::move(data));
    if (Tape* t = recording_tape({&input})) {
        auto po = out.node_ptr();
        auto pi = input.node_ptr();
        record_op(t, out, {&input},
                  [po, pi, kind, window, stride, N, C, H, W, OH, OW,
                   argmax = std::move(argmax)](Tape::AdjointMap& adj) {
                      const auto* g = adjoint_if_any(adj, po.get());
                      if (!g) return;
                      auto& gin = adjoint_of(adj, pi.get());
                      if (kind == PoolKind::max) {
                          for (std::int64_t cell = 0; cell < g->size(); ++cell)
                              gin[argmax[static_cast<std::size_t>(cell)]] += (*g)[cell];
                      } else {
                          const double inv = 1.0 / static_cast<double>(window * window);
                          for (std::int64_t i = 0; i < N; ++i)
                              for (std::int64_t c = 0; c < C; ++c)
                                  for (std::int64_t oh = 0; oh < OH; ++oh)
                                      for (std::int64_t ow = 0; ow < OW; ++ow) {
                                          const double gv =
                                              (*g)[((i * C + c) * OH + oh) * OW + ow] * inv;
                                          double* plane = gin.data() + (i * C + c) * H * W;
                                          for (std::int64_t u = 0; u < window; ++u)
                                              for (std::int64_t v = 0; v < window; ++v)
                                                  plane[(oh * stride + u) * W +
                                                        (ow * stride + v)] += gv;
                                      }
                      }
                  });
    }
    return out;
}

Tensor activation(const Tensor& x, ActKind kind) {
    Eigen::ArrayXd data;
    switch (kind) {
        case ActKind::tanh: data = x.array().tanh(); break;
        case ActKind::relu: data = x.array().max(0.0); break;
        case ActKind::sigmoid: data = 1.0 / (1.0 + (-x.array()).exp()); break;
    }
    Tensor out = wrap(x.shape(), std::move(data));
    if (Tape* t = recording_tape({&x})) {
        auto po = out.node_ptr();
        auto px = x.node_ptr();
        record_op(t, out, {&x}, [po, px, kind](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            auto& gx = adjoint_of(adj, px.get());
            switch (kind) {
                case ActKind::tanh:
                    gx += *g * (1.0 - po->data.square());
                    break;
                case ActKind::relu:
                    // Zero subgradient at the kink.
                    gx += *g * (px->data > 0.0).cast<double>();
                    break;
                case ActKind::sigmoid:
                    gx += *g * po->data * (1.0 - po->data);
                    break;
            }
        });
    }
    return out;
}

Tensor softmax(const Tensor& logits) {
    std::int64_t rows, cols;
    if (logits.rank() == 1) {
        rows = 1;
        cols = logits.dim(0);
    } else if (logits.rank() == 2) {
        rows = logits.dim(0);
        cols = logits.dim(1);
    } else {
        throw DimensionError("softmax expects rank-1 or rank-2 input");
    }
    if (cols < 2) throw ContractError("softmax needs at least 2 classes");
    Eigen::ArrayXd data(rows * cols);
    for (std::int64_t r = 0; r < rows; ++r) {
        auto seg = logits.array().segment(r * cols, cols);
        const double m = seg.maxCoeff();
        Eigen::ArrayXd e = (seg - m).exp();
        data.segment(r * cols, cols) = e / e.sum();
    }
    Tensor out = wrap(logits.shape(), std::move(data));
    if (Tape* t = recording_tape({&logits})) {
        auto po = out.node_ptr();
        auto px = logits.node_ptr();
        record_op(t, out, {&logits}, [po, px, rows, cols](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            auto& gx = adjoint_of(adj, px.get());
            for (std::int64_t r = 0; r < rows; ++r) {
                auto y = po->data.segment(r * cols, cols);
                auto gy = g->segment(r * cols, cols);
                const double s = (gy * y).sum();
                gx.segment(r * cols, cols) += y * (gy - s);
            }
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& probabilities, std::int64_t label) {
    if (probabilities.rank() != 1)
        throw DimensionError("cross_entropy expects a rank-1 probability vector");
    const std::int64_t n = probabilities.dim(0);
    if (label < 0 || label >= n)
        throw ContractError("cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(n) + " classes");
    const double p = probabilities[label];
    Tensor out = wrap({1}, Eigen::ArrayXd::Constant(1, -std::log(std::max(p, kCeFloor))));
    if (Tape* t = recording_tape({&probabilities})) {
        auto po = out.node_ptr();
        auto pp = probabilities.node_ptr();
        record_op(t, out, {&probabilities}, [po, pp, label, p](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            if (p >= kCeFloor) adjoint_of(adj, pp.get())[label] += (*g)[0] * (-1.0 / p);
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    Tensor out = wrap(std::move(shape), x.array());
    if (Tape* t = recording_tape({&x})) {
        auto po = out.node_ptr();
        auto px = x.node_ptr();
        record_op(t, out, {&x}, [po, px](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, px.get()) += *g;
        });
    }
    return out;
}

Tensor row(const Tensor& x, std::int64_t i) {
    if (x.rank() != 2) throw DimensionError("row expects a rank-2 tensor");
    const std::int64_t m = x.dim(0), n = x.dim(1);
    if (i < 0 || i >= m) throw ContractError("row index out of range");
    Tensor out = wrap({n}, x.array().segment(i * n, n));
    if (Tape* t = recording_tape({&x})) {
        auto po = out.node_ptr();
        auto px = x.node_ptr();
        record_op(t, out, {&x}, [po, px, i, n](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, px.get()).segment(i * n, n) += *g;
        });
    }
    return out;
}

Tensor pick(const Tensor& x, std::int64_t flat) {
    if (flat < 0 || flat >= x.numel()) throw ContractError("pick index out of range");
    Tensor out = wrap({1}, Eigen::ArrayXd::Constant(1, x.array()[flat]));
    if (Tape* t = recording_tape({&x})) {
        auto po = out.node_ptr();
        auto px = x.node_ptr();
        record_op(t, out, {&x}, [po, px, flat](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, px.get())[flat] += (*g)[0];
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out = wrap({1}, Eigen::ArrayXd::Constant(1, x.array().sum()));
    if (Tape* t = recording_tape({&x})) {
        auto po = out.node_ptr();
        auto px = x.node_ptr();
        record_op(t, out, {&x}, [po, px](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            adjoint_of(adj, px.get()) += (*g)[0];
        });
    }
    return out;
}

Tensor l2_norm(const Tensor& x) {
    const double norm = std::sqrt(x.array().square().sum());
    Tensor out = wrap({1}, Eigen::ArrayXd::Constant(1, norm));
    if (Tape* t = recording_tape({&x})) {
        auto po = out.node_ptr();
        auto px = x.node_ptr();
        record_op(t, out, {&x}, [po, px, norm](Tape::AdjointMap& adj) {
            const auto* g = adjoint_if_any(adj, po.get());
            if (!g) return;
            // Zero subgradient at the origin.
            if (norm > 0.0) adjoint_of(adj, px.get()) += (*g)[0] / norm * px->data;
        });
    }
    return out;
}

} // namespace ops
} // namespace bm
