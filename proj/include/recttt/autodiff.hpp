#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recttt/nn_kernels.hpp"
#include "recttt/tensor.hpp"

namespace recttt {

// Reverse-mode autodiff over an append-only tape. Nodes are recorded in
// topological order (inputs always precede consumers); backward() walks the
// tape once in reverse insertion order, so gradient accumulation order is
// fixed and results are bitwise deterministic for a given graph.
//
// BasicGraph<float> is the production engine; BasicGraph<double> provides
// the 64-bit shadow forwards used by the finite-difference oracle.

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  Matmul,
  Conv2d,
  BatchNorm,
  Relu,
  AvgPool2d,
  Upsample2x,
  Linear,
  Reshape,
  Concat,
  Dot,
  Norm2,
  CosineSim,
  Log,
  Exp,
  Softmax,
  LogSoftmax,
  Nll,
  SumAll,
  ClampMin,
  StopGrad,
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

using VarId = int;

template <class T>
class BasicGradMap {
 public:
  explicit BasicGradMap(std::size_t n) : grads_(n) {}

  bool has(Var v) const {
    return v.id >= 0 && v.id < static_cast<int>(grads_.size()) && !grads_[v.id].empty();
  }

  const BasicTensor<T>& at(Var v) const {
    if (!has(v)) throw ShapeError("GradMap: no gradient recorded for var " + std::to_string(v.id));
    return grads_[v.id];
  }

  BasicTensor<T>& slot(VarId id) { return grads_[id]; }
  const BasicTensor<T>& slot(VarId id) const { return grads_[id]; }

 private:
  std::vector<BasicTensor<T>> grads_;
};

using GradMap = BasicGradMap<float>;

template <class T>
class BasicGraph {
 public:
  using TensorT = BasicTensor<T>;

  BasicGraph() { nodes_.reserve(128); }

  std::size_t size() const { return nodes_.size(); }

  const TensorT& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  Var leaf(TensorT value, bool requires_grad = false) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  // Mixed-precision convenience: float model tensors enter a double shadow
  // graph through a widening copy.
  template <class U>
  Var leaf(const BasicTensor<U>& value, bool requires_grad = false) {
    return leaf(tensor_cast<T>(value), requires_grad);
  }

  Var add(Var a, Var b) { return binary(Op::Add, a, b, recttt::add(value(a), value(b))); }
  Var sub(Var a, Var b) { return binary(Op::Sub, a, b, recttt::sub(value(a), value(b))); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b, recttt::mul(value(a), value(b))); }

  Var div(Var a, Var b) {
    require_same_shape(value(a), value(b), "div");
    TensorT out = TensorT::uninit(value(a).shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = value(a).data[i] / value(b).data[i];
    return binary(Op::Div, a, b, std::move(out));
  }

  Var scale(Var a, float s) {
    Node n = unary(Op::Scale, a, recttt::scale(value(a), static_cast<T>(s)));
    n.f0 = s;
    return push(std::move(n));
  }

  Var matmul(Var a, Var b) { return binary(Op::Matmul, a, b, recttt::matmul(value(a), value(b))); }

  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    Node n;
    n.op = Op::Conv2d;
    n.in = {x.id, w.id, b.id};
    n.value = conv2d_forward(value(x), value(w), value(b), stride, pad);
    n.requires_grad = requires_grad(x) || requires_grad(w) || requires_grad(b);
    n.i0 = stride;
    n.i1 = pad;
    return push(std::move(n));
  }

  // Train-mode forwards update running_mean / running_var in place at record
  // time; the tensors are not captured by the node.
  Var batchnorm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                float momentum, float eps, BnMode mode) {
    Node n;
    n.op = Op::BatchNorm;
    n.in = {x.id, gamma.id, beta.id};
    n.value = batchnorm_forward(value(x), value(gamma), value(beta), running_mean, running_var,
                                momentum, eps, mode, n.saved0, n.saved1);
    n.requires_grad = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    n.bn_mode = mode;
    return push(std::move(n));
  }

  Var relu(Var a) {
    TensorT out = TensorT::uninit(value(a).shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = value(a).data[i] > T(0) ? value(a).data[i] : T(0);
    return push(unary(Op::Relu, a, std::move(out)));
  }

  Var avgpool2d(Var a, int k, int s) {
    Node n = unary(Op::AvgPool2d, a, avgpool2d_forward(value(a), k, s));
    n.i0 = k;
    n.i1 = s;
    return push(std::move(n));
  }

  Var upsample2x(Var a) { return push(unary(Op::Upsample2x, a, upsample2x_forward(value(a)))); }

  // x:[N,in] w:[in,out] b:[out] -> [N,out]
  Var linear(Var x, Var w, Var b) {
    const TensorT& xv = value(x);
    const TensorT& wv = value(w);
    const TensorT& bv = value(b);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.shape[1] != wv.shape[0] || bv.numel() != wv.shape[1])
      throw ShapeError("linear: shape mismatch " + xv.shape_str() + " x " + wv.shape_str());
    TensorT out = recttt::matmul(xv, wv);
    for (int i = 0; i < out.shape[0]; ++i)
      for (int j = 0; j < out.shape[1]; ++j)
        out.data[static_cast<std::size_t>(i) * out.shape[1] + j] += bv.data[j];
    Node n;
    n.op = Op::Linear;
    n.in = {x.id, w.id, b.id};
    n.value = std::move(out);
    n.requires_grad = requires_grad(x) || requires_grad(w) || requires_grad(b);
    return push(std::move(n));
  }

  Var reshape(Var a, std::vector<int> shape) {
    if (TensorT::checked_numel(shape) != value(a).numel())
      throw ShapeError("reshape: element count mismatch");
    TensorT out(std::move(shape), value(a).data);
    Node n = unary(Op::Reshape, a, std::move(out));
    n.aux_shape = value(a).shape;
    return push(std::move(n));
  }

  Var flatten(Var a) { return reshape(a, {static_cast<int>(value(a).numel())}); }

  Var concat(Var a, Var b, int axis) {
    const TensorT& av = value(a);
    const TensorT& bv = value(b);
    if (av.rank() != bv.rank() || axis < 0 || axis >= av.rank())
      throw ShapeError("concat: rank/axis mismatch");
    for (int i = 0; i < av.rank(); ++i)
      if (i != axis && av.shape[i] != bv.shape[i])
        throw ShapeError("concat: shapes differ off-axis " + av.shape_str() + " vs " + bv.shape_str());
    std::vector<int> os = av.shape;
    os[axis] += bv.shape[axis];
    TensorT out = TensorT::uninit(os);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= av.shape[i];
    for (int i = axis + 1; i < av.rank(); ++i) inner *= av.shape[i];
    const std::int64_t ea = av.shape[axis], eb = bv.shape[axis];
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(av.data.data() + o * ea * inner, ea * inner,
                  out.data.data() + o * (ea + eb) * inner);
      std::copy_n(bv.data.data() + o * eb * inner, eb * inner,
                  out.data.data() + o * (ea + eb) * inner + ea * inner);
    }
    Node n;
    n.op = Op::Concat;
    n.in = {a.id, b.id, -1};
    n.value = std::move(out);
    n.requires_grad = requires_grad(a) || requires_grad(b);
    n.i0 = axis;
    return push(std::move(n));
  }

  Var dot(Var a, Var b) {
    return binary(Op::Dot, a, b,
                  scalar_tensor(static_cast<T>(recttt::dot(value(a), value(b)))));
  }

  Var norm2(Var a) {
    return push(unary(Op::Norm2, a, scalar_tensor(static_cast<T>(recttt::norm2(value(a))))));
  }

  // <a, b> / (||a|| ||b||), fused and evaluated in double so that identical
  // inputs give exactly 1. A norm product at or below denom_eps yields 0 and
  // blocks the gradient, mirroring a clamped denominator.
  Var cosine_sim(Var a, Var b, float denom_eps) {
    const TensorT& av = value(a);
    const TensorT& bv = value(b);
    if (av.numel() != bv.numel())
      throw ShapeError("cosine_sim: element count mismatch " + av.shape_str() + " vs " +
                       bv.shape_str());
    double aa = 0.0, bb = 0.0, ab = 0.0;
    for (std::size_t i = 0; i < av.data.size(); ++i) {
      const double x = av.data[i], y = bv.data[i];
      aa += x * x;
      bb += y * y;
      ab += x * y;
    }
    const double denom = std::sqrt(aa) * std::sqrt(bb);
    const double cos = denom <= static_cast<double>(denom_eps) ? 0.0 : ab / denom;
    Node n;
    n.op = Op::CosineSim;
    n.in = {a.id, b.id, -1};
    n.value = scalar_tensor(static_cast<T>(cos));
    n.requires_grad = requires_grad(a) || requires_grad(b);
    n.f0 = denom_eps;
    return push(std::move(n));
  }

  // log(max(x, eps)); eps > 0 keeps zero inputs finite (used by the KL term).
  Var log(Var a, float eps = 0.0f) {
    TensorT out = TensorT::uninit(value(a).shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = std::log(std::max(value(a).data[i], static_cast<T>(eps)));
    Node n = unary(Op::Log, a, std::move(out));
    n.f0 = eps;
    return push(std::move(n));
  }

  Var exp(Var a) {
    TensorT out = TensorT::uninit(value(a).shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::exp(value(a).data[i]);
    return push(unary(Op::Exp, a, std::move(out)));
  }

  Var softmax(Var a) { return push(unary(Op::Softmax, a, softmax_rows(value(a)))); }
  Var log_softmax(Var a) { return push(unary(Op::LogSoftmax, a, log_softmax_rows(value(a)))); }

  // Mean over the batch of -logp[i, label_i].
  Var nll(Var logp, std::vector<int> labels) {
    const TensorT& lp = value(logp);
    if (lp.rank() != 2) throw ShapeError("nll: expects [batch, classes] log-probabilities");
    const int n = lp.shape[0], c = lp.shape[1];
    if (static_cast<int>(labels.size()) != n) throw ShapeError("nll: label count mismatch");
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      if (labels[i] < 0 || labels[i] >= c)
        throw ShapeError("nll: label " + std::to_string(labels[i]) + " out of range [0," +
                         std::to_string(c) + ")");
      acc -= lp.data[static_cast<std::size_t>(i) * c + labels[i]];
    }
    Node nd = unary(Op::Nll, logp, scalar_tensor(static_cast<T>(acc / n)));
    nd.labels = std::move(labels);
    return push(std::move(nd));
  }

  Var sum_all(Var a) {
    return push(unary(Op::SumAll, a, scalar_tensor(static_cast<T>(recttt::sum(value(a))))));
  }

  Var clamp_min(Var a, float floor) {
    TensorT out = TensorT::uninit(value(a).shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = std::max(value(a).data[i], static_cast<T>(floor));
    Node n = unary(Op::ClampMin, a, std::move(out));
    n.f0 = floor;
    return push(std::move(n));
  }

  // Forward identity; backward propagates nothing into the wrapped subgraph.
  Var stop_gradient(Var a) {
    Node n;
    n.op = Op::StopGrad;
    n.in = {a.id, -1, -1};
    n.value = value(a);
    n.requires_grad = false;
    return push(std::move(n));
  }

  BasicGradMap<T> backward(Var loss) const;

 private:
  struct Node {
    Op op = Op::Leaf;
    std::array<int, 3> in{{-1, -1, -1}};
    bool requires_grad = false;
    TensorT value;
    float f0 = 0.0f;
    int i0 = 0, i1 = 0;
    std::vector<int> aux_shape;
    std::vector<int> labels;
    TensorT saved0, saved1;
    BnMode bn_mode = BnMode::Eval;
  };

  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw ShapeError("invalid var id " + std::to_string(v.id));
    return nodes_[v.id];
  }

  Node unary(Op op, Var a, TensorT value) {
    Node n;
    n.op = op;
    n.in = {a.id, -1, -1};
    n.value = std::move(value);
    n.requires_grad = requires_grad(a);
    return n;
  }

  Var binary(Op op, Var a, Var b, TensorT value) {
    Node n;
    n.op = op;
    n.in = {a.id, b.id, -1};
    n.value = std::move(value);
    n.requires_grad = requires_grad(a) || requires_grad(b);
    return push(std::move(n));
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  static void accumulate(TensorT& slot, TensorT&& contrib) {
    if (slot.empty()) {
      slot = std::move(contrib);
    } else {
      for (std::size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += contrib.data[i];
    }
  }

  std::vector<Node> nodes_;
};

using Graph = BasicGraph<float>;
using DGraph = BasicGraph<double>;

template <class T>
BasicGradMap<T> BasicGraph<T>::backward(Var loss) const {
  const Node& ln = node(loss);
  if (ln.value.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " + ln.value.shape_str());

  BasicGradMap<T> grads(nodes_.size());
  grads.slot(loss.id) = ones<T>(ln.value.shape);

  for (int id = loss.id; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || grads.slot(id).empty()) continue;
    const TensorT& g = grads.slot(id);
    const auto in_rg = [&](int slot_idx) {
      const int input = n.in[slot_idx];
      return input >= 0 && nodes_[input].requires_grad;
    };
    const auto vin = [&](int slot_idx) -> const TensorT& { return nodes_[n.in[slot_idx]].value; };

    switch (n.op) {
      case Op::Leaf:
      case Op::StopGrad:
        break;
      case Op::Add:
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), TensorT(g));
        if (in_rg(1)) accumulate(grads.slot(n.in[1]), TensorT(g));
        break;
      case Op::Sub:
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), TensorT(g));
        if (in_rg(1)) accumulate(grads.slot(n.in[1]), recttt::scale(g, T(-1)));
        break;
      case Op::Mul:
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), recttt::mul(g, vin(1)));
        if (in_rg(1)) accumulate(grads.slot(n.in[1]), recttt::mul(g, vin(0)));
        break;
      case Op::Div: {
        if (in_rg(0)) {
          TensorT t = TensorT::uninit(g.shape);
          for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = g.data[i] / vin(1).data[i];
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        if (in_rg(1)) {
          TensorT t = TensorT::uninit(g.shape);
          for (std::size_t i = 0; i < t.data.size(); ++i)
            t.data[i] = -g.data[i] * n.value.data[i] / vin(1).data[i];
          accumulate(grads.slot(n.in[1]), std::move(t));
        }
        break;
      }
      case Op::Scale:
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), recttt::scale(g, static_cast<T>(n.f0)));
        break;
      case Op::Matmul: {
        const TensorT& a = vin(0);
        const TensorT& b = vin(1);
        if (in_rg(0)) {
          TensorT da = TensorT::uninit({a.shape[0], a.shape[1]});
          gemm_abt(g.data.data(), b.data.data(), da.data.data(), a.shape[0], b.shape[1],
                   a.shape[1], false);
          accumulate(grads.slot(n.in[0]), std::move(da));
        }
        if (in_rg(1)) {
          TensorT at = transpose2d(a);
          accumulate(grads.slot(n.in[1]), recttt::matmul(at, g));
        }
        break;
      }
      case Op::Conv2d: {
        TensorT dx, dw, db;
        conv2d_backward(vin(0), vin(1), g, n.i0, n.i1, in_rg(0) ? &dx : nullptr,
                        in_rg(1) ? &dw : nullptr, in_rg(2) ? &db : nullptr);
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), std::move(dx));
        if (in_rg(1)) accumulate(grads.slot(n.in[1]), std::move(dw));
        if (in_rg(2)) accumulate(grads.slot(n.in[2]), std::move(db));
        break;
      }
      case Op::BatchNorm: {
        TensorT dx, dgamma, dbeta;
        batchnorm_backward(vin(0), vin(1), n.saved0, n.saved1, g, n.bn_mode,
                           in_rg(0) ? &dx : nullptr, in_rg(1) ? &dgamma : nullptr,
                           in_rg(2) ? &dbeta : nullptr);
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), std::move(dx));
        if (in_rg(1)) accumulate(grads.slot(n.in[1]), std::move(dgamma));
        if (in_rg(2)) accumulate(grads.slot(n.in[2]), std::move(dbeta));
        break;
      }
      case Op::Relu: {
        if (in_rg(0)) {
          const TensorT& x = vin(0);
          TensorT t = TensorT::uninit(g.shape);
          for (std::size_t i = 0; i < t.data.size(); ++i)
            t.data[i] = x.data[i] > T(0) ? g.data[i] : T(0);
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        break;
      }
      case Op::AvgPool2d:
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), avgpool2d_backward(vin(0), g, n.i0, n.i1));
        break;
      case Op::Upsample2x:
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), upsample2x_backward(vin(0), g));
        break;
      case Op::Linear: {
        const TensorT& x = vin(0);
        const TensorT& w = vin(1);
        if (in_rg(0)) {
          TensorT dx = TensorT::uninit({x.shape[0], x.shape[1]});
          gemm_abt(g.data.data(), w.data.data(), dx.data.data(), x.shape[0], w.shape[1],
                   x.shape[1], false);
          accumulate(grads.slot(n.in[0]), std::move(dx));
        }
        if (in_rg(1)) {
          TensorT xt = transpose2d(x);
          accumulate(grads.slot(n.in[1]), recttt::matmul(xt, g));
        }
        if (in_rg(2)) {
          TensorT db = reduce_sum(g, 0);
          db.shape = {w.shape[1]};
          accumulate(grads.slot(n.in[2]), std::move(db));
        }
        break;
      }
      case Op::Reshape: {
        if (in_rg(0)) {
          TensorT t(n.aux_shape, g.data);
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        break;
      }
      case Op::Concat: {
        const TensorT& a = vin(0);
        const TensorT& b = vin(1);
        const int axis = n.i0;
        std::int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= a.shape[i];
        for (int i = axis + 1; i < a.rank(); ++i) inner *= a.shape[i];
        const std::int64_t ea = a.shape[axis], eb = b.shape[axis];
        if (in_rg(0)) {
          TensorT da = TensorT::uninit(a.shape);
          for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(g.data.data() + o * (ea + eb) * inner, ea * inner,
                        da.data.data() + o * ea * inner);
          accumulate(grads.slot(n.in[0]), std::move(da));
        }
        if (in_rg(1)) {
          TensorT dbt = TensorT::uninit(b.shape);
          for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(g.data.data() + o * (ea + eb) * inner + ea * inner, eb * inner,
                        dbt.data.data() + o * eb * inner);
          accumulate(grads.slot(n.in[1]), std::move(dbt));
        }
        break;
      }
      case Op::Dot: {
        const T g0 = g.data[0];
        if (in_rg(0)) {
          TensorT t = recttt::scale(vin(1), g0);
          t.shape = vin(0).shape;
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        if (in_rg(1)) {
          TensorT t = recttt::scale(vin(0), g0);
          t.shape = vin(1).shape;
          accumulate(grads.slot(n.in[1]), std::move(t));
        }
        break;
      }
      case Op::Norm2: {
        if (in_rg(0)) {
          const T nrm = std::max(n.value.data[0], static_cast<T>(1e-12));
          accumulate(grads.slot(n.in[0]), recttt::scale(vin(0), g.data[0] / nrm));
        }
        break;
      }
      case Op::CosineSim: {
        const TensorT& a = vin(0);
        const TensorT& b = vin(1);
        double aa = 0.0, bb = 0.0, ab = 0.0;
        for (std::size_t i = 0; i < a.data.size(); ++i) {
          const double x = a.data[i], y = b.data[i];
          aa += x * x;
          bb += y * y;
          ab += x * y;
        }
        const double denom = std::sqrt(aa) * std::sqrt(bb);
        if (denom <= static_cast<double>(n.f0)) break;  // clamped: gradient blocked
        const double cos = ab / denom;
        const double g0 = g.data[0];
        if (in_rg(0)) {
          TensorT t = TensorT::uninit(a.shape);
          for (std::size_t i = 0; i < t.data.size(); ++i)
            t.data[i] = static_cast<T>(g0 * (b.data[i] / denom - cos * a.data[i] / aa));
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        if (in_rg(1)) {
          TensorT t = TensorT::uninit(b.shape);
          for (std::size_t i = 0; i < t.data.size(); ++i)
            t.data[i] = static_cast<T>(g0 * (a.data[i] / denom - cos * b.data[i] / bb));
          accumulate(grads.slot(n.in[1]), std::move(t));
        }
        break;
      }
      case Op::Log: {
        if (in_rg(0)) {
          const TensorT& x = vin(0);
          TensorT t = TensorT::uninit(g.shape);
          for (std::size_t i = 0; i < t.data.size(); ++i)
            t.data[i] = x.data[i] > static_cast<T>(n.f0) ? g.data[i] / x.data[i] : T(0);
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        break;
      }
      case Op::Exp:
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), recttt::mul(g, n.value));
        break;
      case Op::Softmax: {
        if (in_rg(0)) {
          const TensorT& s = n.value;
          const int rows = s.shape[0], cols = s.shape[1];
          TensorT t = TensorT::uninit(s.shape);
          for (int i = 0; i < rows; ++i) {
            const T* sr = s.data.data() + static_cast<std::size_t>(i) * cols;
            const T* gr = g.data.data() + static_cast<std::size_t>(i) * cols;
            T* tr = t.data.data() + static_cast<std::size_t>(i) * cols;
            double inner = 0.0;
            for (int j = 0; j < cols; ++j) inner += static_cast<double>(gr[j]) * sr[j];
            for (int j = 0; j < cols; ++j)
              tr[j] = static_cast<T>(sr[j] * (gr[j] - inner));
          }
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        break;
      }
      case Op::LogSoftmax: {
        if (in_rg(0)) {
          const TensorT& lsm = n.value;
          const int rows = lsm.shape[0], cols = lsm.shape[1];
          TensorT t = TensorT::uninit(lsm.shape);
          for (int i = 0; i < rows; ++i) {
            const T* lr = lsm.data.data() + static_cast<std::size_t>(i) * cols;
            const T* gr = g.data.data() + static_cast<std::size_t>(i) * cols;
            T* tr = t.data.data() + static_cast<std::size_t>(i) * cols;
            double gsum = 0.0;
            for (int j = 0; j < cols; ++j) gsum += gr[j];
            for (int j = 0; j < cols; ++j)
              tr[j] = static_cast<T>(gr[j] - std::exp(static_cast<double>(lr[j])) * gsum);
          }
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        break;
      }
      case Op::Nll: {
        if (in_rg(0)) {
          const TensorT& lp = vin(0);
          const int rows = lp.shape[0], cols = lp.shape[1];
          TensorT t(lp.shape);
          const T per = g.data[0] / static_cast<T>(rows);
          for (int i = 0; i < rows; ++i)
            t.data[static_cast<std::size_t>(i) * cols + n.labels[i]] = -per;
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        break;
      }
      case Op::SumAll:
        if (in_rg(0)) accumulate(grads.slot(n.in[0]), full(vin(0).shape, g.data[0]));
        break;
      case Op::ClampMin: {
        if (in_rg(0)) {
          const TensorT& x = vin(0);
          TensorT t = TensorT::uninit(g.shape);
          for (std::size_t i = 0; i < t.data.size(); ++i)
            t.data[i] = x.data[i] > static_cast<T>(n.f0) ? g.data[i] : T(0);
          accumulate(grads.slot(n.in[0]), std::move(t));
        }
        break;
      }
    }
  }

  // Requires-grad vars never reached by the sweep report zero gradients.
  for (std::size_t id = 0; id < nodes_.size(); ++id)
    if (nodes_[id].requires_grad && grads.slot(static_cast<int>(id)).empty())
      grads.slot(static_cast<int>(id)) = zeros<T>(nodes_[id].value.shape);
  return grads;
}

// ---------------------------------------------------------------------------
// Parameters and the optimizer (float32 model state).
// ---------------------------------------------------------------------------

struct Param {
  Tensor value;
  bool trainable = true;
};

// p <- p - lr * g for a trainable parameter; frozen parameters are untouched.
inline void sgd_step(Param& p, const Tensor& grad, float lr) {
  if (!p.trainable) return;
  require_same_shape(p.value, grad, "sgd_step");
  for (std::size_t i = 0; i < p.value.data.size(); ++i) p.value.data[i] -= lr * grad.data[i];
}

// Records which Param each tape leaf came from so the optimizer can route
// gradients back after backward().
struct TapeBindings {
  struct Entry {
    Param* param;
    Var var;
  };
  std::vector<Entry> items;

  Var bind(Graph& g, Param& p) {
    Var v = g.leaf(p.value, p.trainable);
    if (p.trainable) items.push_back({&p, v});
    return v;
  }
};

class Sgd {
 public:
  explicit Sgd(float lr, float momentum = 0.0f) : lr_(lr), momentum_(momentum) {}

  float lr() const { return lr_; }
  void set_lr(float lr) { lr_ = lr; }

  void step(const TapeBindings& binds, const GradMap& grads) {
    for (const auto& e : binds.items) {
      if (!e.param->trainable) continue;
      const Tensor& g = grads.at(e.var);
      if (momentum_ == 0.0f) {
        sgd_step(*e.param, g, lr_);
      } else {
        Tensor& v = velocity_[e.param];
        if (v.empty()) v = zeros(g.shape);
        for (std::size_t i = 0; i < v.data.size(); ++i) {
          v.data[i] = momentum_ * v.data[i] + g.data[i];
          e.param->value.data[i] -= lr_ * v.data[i];
        }
      }
    }
  }

 private:
  float lr_;
  float momentum_;
  std::unordered_map<Param*, Tensor> velocity_;
};

}  // namespace recttt
