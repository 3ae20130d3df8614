#pragma once

// Reverse-mode differentiation. A Tape records every operation in append
// order together with a closure that maps the output gradient to input
// gradients; backward() replays the closures in strict reverse order.

#include <array>
#include <cstddef>
#include <deque>
#include <functional>
#include <string_view>
#include <utility>
#include <vector>

#include "pafu/error.hpp"
#include "pafu/ops.hpp"
#include "pafu/tensor.hpp"

namespace pafu {

enum class OpTag {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  Relu,
  Abs,
  Sum,
  Mean,
  MatMul,
  Conv2d,
  AddBias,
  Im2Col,
  Col2Im,
  DepthToSpace,
  SpaceToDepth,
  L1Loss,
  L2Loss,
  GumbelSoftmax,
  SvConv2d,
  Decorrelation,
};

struct OpInfo {
  OpTag tag;
  std::string_view name;
};

/// Every differentiable operation. Grad-check cases and the CLI `grad-check`
/// subcommand are keyed by these names.
inline constexpr std::array<OpInfo, 20> kDifferentiableOps{{
    {OpTag::Add, "add"},
    {OpTag::Sub, "sub"},
    {OpTag::Mul, "mul"},
    {OpTag::Scale, "scale"},
    {OpTag::Relu, "relu"},
    {OpTag::Abs, "abs"},
    {OpTag::Sum, "sum"},
    {OpTag::Mean, "mean"},
    {OpTag::MatMul, "matmul"},
    {OpTag::Conv2d, "conv2d"},
    {OpTag::AddBias, "add_bias"},
    {OpTag::Im2Col, "im2col"},
    {OpTag::Col2Im, "col2im"},
    {OpTag::DepthToSpace, "depth_to_space"},
    {OpTag::SpaceToDepth, "space_to_depth"},
    {OpTag::L1Loss, "l1_loss"},
    {OpTag::L2Loss, "l2_loss"},
    {OpTag::GumbelSoftmax, "gumbel_softmax"},
    {OpTag::SvConv2d, "sv_conv2d"},
    {OpTag::Decorrelation, "decorrelation"},
}};

template <typename T>
class Tape;

/// Handle to a recorded value. Cheap to copy; valid while its tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Gradients {
 public:
  explicit Gradients(std::vector<BasicTensor<T>> g) : grads_(std::move(g)) {}

  const BasicTensor<T>& operator[](const Var<T>& v) const { return grads_.at(v.id()); }
  const BasicTensor<T>& at(std::size_t id) const { return grads_.at(id); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<BasicTensor<T>> grads_;
};

template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  // Maps the output gradient to one gradient per input (an empty tensor means
  // "no contribution").
  using BackwardFn = std::function<std::vector<TensorT>(const TensorT&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(TensorT value, bool requires_grad = true) {
    nodes_.push_back(Node{OpTag::Leaf, {}, std::move(value), requires_grad, {}});
    return Var<T>(this, nodes_.size() - 1);
  }
  Var<T> constant(TensorT value) { return leaf(std::move(value), false); }

  Var<T> record(OpTag tag, const std::vector<Var<T>>& inputs, TensorT value, BackwardFn backward) {
    Node node{tag, {}, std::move(value), false, {}};
    node.inputs.reserve(inputs.size());
    for (const auto& v : inputs) {
      if (&v.tape() != this) throw ContractError("record: input belongs to another tape");
      node.inputs.push_back(v.id());
      node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  OpTag tag(std::size_t id) const { return nodes_.at(id).tag; }
  std::size_t size() const { return nodes_.size(); }

  /// d loss / d v for every node. Nodes that require a gradient but do not
  /// influence the loss get zero tensors; nodes that do not require one stay
  /// empty. The tape is not modified, so repeated calls agree exactly.
  Gradients<T> backward(const Var<T>& loss) const {
    if (nodes_.empty()) throw ContractError("backward: empty tape");
    if (loss.value().size() != 1) {
      throw ContractError("backward: loss must be a single element, got " + loss.shape().str());
    }
    std::vector<TensorT> grads(nodes_.size());
    grads[loss.id()] = TensorT(loss.shape(), T{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (grads[i].empty() || !node.requires_grad || !node.backward) continue;
      std::vector<TensorT> in = node.backward(grads[i]);
      for (std::size_t j = 0; j < node.inputs.size() && j < in.size(); ++j) {
        const std::size_t src = node.inputs[j];
        if (in[j].empty() || !nodes_[src].requires_grad) continue;
        if (grads[src].empty()) {
          grads[src] = std::move(in[j]);
        } else {
          auto acc = grads[src].data();
          auto add_in = in[j].data();
          for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += add_in[e];
        }
      }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].requires_grad && grads[i].empty()) grads[i] = TensorT(nodes_[i].value.shape());
    }
    return Gradients<T>(std::move(grads));
  }

 private:
  struct Node {
    OpTag tag;
    std::vector<std::size_t> inputs;
    TensorT value;
    bool requires_grad;
    BackwardFn backward;
  };

  // deque keeps references returned by value() stable across appends.
  std::deque<Node> nodes_;
};

namespace ad {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto out = pafu::add(a.value(), b.value());
  return a.tape().record(OpTag::Add, {a, b}, std::move(out),
                         [](const BasicTensor<T>& g) { return std::vector<BasicTensor<T>>{g, g}; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto out = pafu::sub(a.value(), b.value());
  return a.tape().record(OpTag::Sub, {a, b}, std::move(out), [](const BasicTensor<T>& g) {
    return std::vector<BasicTensor<T>>{g, pafu::scale(g, T{-1})};
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto out = pafu::mul(a.value(), b.value());
  return a.tape().record(OpTag::Mul, {a, b}, std::move(out),
                         [av = a.value(), bv = b.value()](const BasicTensor<T>& g) {
                           return std::vector<BasicTensor<T>>{pafu::mul(g, bv), pafu::mul(g, av)};
                         });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  auto out = pafu::scale(a.value(), s);
  return a.tape().record(OpTag::Scale, {a}, std::move(out), [s](const BasicTensor<T>& g) {
    return std::vector<BasicTensor<T>>{pafu::scale(g, s)};
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  auto out = pafu::relu(a.value());
  return a.tape().record(OpTag::Relu, {a}, std::move(out), [av = a.value()](const BasicTensor<T>& g) {
    BasicTensor<T> gi(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] = av[i] > T{0} ? g[i] : T{0};
    return std::vector<BasicTensor<T>>{std::move(gi)};
  });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  auto out = pafu::abs(a.value());
  return a.tape().record(OpTag::Abs, {a}, std::move(out), [av = a.value()](const BasicTensor<T>& g) {
    BasicTensor<T> gi(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] = av[i] > T{0} ? g[i] : (av[i] < T{0} ? -g[i] : T{0});
    return std::vector<BasicTensor<T>>{std::move(gi)};
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  auto out = BasicTensor<T>::scalar(static_cast<T>(pafu::sum(a.value())));
  return a.tape().record(OpTag::Sum, {a}, std::move(out), [s = a.shape()](const BasicTensor<T>& g) {
    return std::vector<BasicTensor<T>>{BasicTensor<T>(s, g[0])};
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const auto n = static_cast<double>(a.value().size());
  auto out = BasicTensor<T>::scalar(static_cast<T>(pafu::sum(a.value()) / n));
  return a.tape().record(OpTag::Mean, {a}, std::move(out), [s = a.shape(), n](const BasicTensor<T>& g) {
    return std::vector<BasicTensor<T>>{BasicTensor<T>(s, static_cast<T>(g[0] / n))};
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto out = pafu::matmul(a.value(), b.value());
  return a.tape().record(OpTag::MatMul, {a, b}, std::move(out),
                         [av = a.value(), bv = b.value()](const BasicTensor<T>& g) {
                           return std::vector<BasicTensor<T>>{pafu::matmul(g, pafu::transpose(bv)),
                                                              pafu::matmul(pafu::transpose(av), g)};
                         });
}

namespace detail {

// Gradients of a patch-matrix product Y = cols * Wmat^T given dY as rows.
template <typename T>
void patch_product_grads(const BasicTensor<T>& dy_rows, const BasicTensor<T>& cols, const BasicTensor<T>& wmat,
                         BasicTensor<T>* dwmat, BasicTensor<T>* dcols) {
  const std::size_t rows = cols.h(), K = cols.w(), cout = wmat.h();
  if (dwmat) {
    *dwmat = BasicTensor<T>(wmat.shape());
    pafu::detail::gemm_tn_acc(dy_rows.ptr(), cols.ptr(), dwmat->ptr(), rows, cout, K);
  }
  if (dcols) {
    *dcols = BasicTensor<T>(cols.shape());
    pafu::detail::gemm_acc(dy_rows.ptr(), wmat.ptr(), dcols->ptr(), rows, cout, K);
  }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, Padding pad = Padding::Zero) {
  pafu::detail::check_conv_args(x.shape(), w.shape());
  const std::size_t k = w.value().h(), cout = w.value().n();
  const Shape xs = x.shape();
  BasicTensor<T> cols = im2col(x.value(), k, pad);
  BasicTensor<T> wmat = w.value().reshaped(Shape{cout, xs.c() * k * k});
  auto out = from_rows(pafu::matmul(cols, transpose(wmat)), xs.n(), xs.h(), xs.w());
  const bool need_dx = x.requires_grad();
  const bool need_dw = w.requires_grad();
  return x.tape().record(
      OpTag::Conv2d, {x, w}, std::move(out),
      [cols = std::move(cols), wmat = std::move(wmat), xs, ws = w.shape(), k, pad, need_dx,
       need_dw](const BasicTensor<T>& g) {
        const BasicTensor<T> dy = to_rows(g);
        BasicTensor<T> dw, dcols;
        detail::patch_product_grads(dy, cols, wmat, need_dw ? &dw : nullptr, need_dx ? &dcols : nullptr);
        std::vector<BasicTensor<T>> res(2);
        if (need_dx) res[0] = col2im(dcols, xs, k, pad);
        if (need_dw) res[1] = dw.reshaped(ws);
        return res;
      });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  auto out = add_channel_bias(x.value(), b.value());
  return x.tape().record(OpTag::AddBias, {x, b}, std::move(out), [bs = b.shape()](const BasicTensor<T>& g) {
    BasicTensor<T> gb(bs);
    const std::size_t HW = g.h() * g.w();
    for (std::size_t n = 0; n < g.n(); ++n)
      for (std::size_t c = 0; c < g.c(); ++c) {
        const T* p = g.ptr() + (n * g.c() + c) * HW;
        T acc{0};
        for (std::size_t i = 0; i < HW; ++i) acc += p[i];
        gb[c] += acc;
      }
    return std::vector<BasicTensor<T>>{g, std::move(gb)};
  });
}

template <typename T>
Var<T> im2col(const Var<T>& x, std::size_t k, Padding pad = Padding::Zero) {
  auto out = pafu::im2col(x.value(), k, pad);
  return x.tape().record(OpTag::Im2Col, {x}, std::move(out), [xs = x.shape(), k, pad](const BasicTensor<T>& g) {
    return std::vector<BasicTensor<T>>{pafu::col2im(g, xs, k, pad)};
  });
}

template <typename T>
Var<T> col2im(const Var<T>& cols, Shape out_shape, std::size_t k, Padding pad = Padding::Zero) {
  auto out = pafu::col2im(cols.value(), out_shape, k, pad);
  return cols.tape().record(OpTag::Col2Im, {cols}, std::move(out), [k, pad](const BasicTensor<T>& g) {
    return std::vector<BasicTensor<T>>{pafu::im2col(g, k, pad)};
  });
}

template <typename T>
Var<T> depth_to_space(const Var<T>& x, std::size_t r) {
  auto out = pafu::depth_to_space(x.value(), r);
  return x.tape().record(OpTag::DepthToSpace, {x}, std::move(out), [r](const BasicTensor<T>& g) {
    return std::vector<BasicTensor<T>>{pafu::space_to_depth(g, r)};
  });
}

template <typename T>
Var<T> space_to_depth(const Var<T>& x, std::size_t r) {
  auto out = pafu::space_to_depth(x.value(), r);
  return x.tape().record(OpTag::SpaceToDepth, {x}, std::move(out), [r](const BasicTensor<T>& g) {
    return std::vector<BasicTensor<T>>{pafu::depth_to_space(g, r)};
  });
}

}  // namespace ad
}  // namespace pafu
