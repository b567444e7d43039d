#pragma once

#include <canroll/common.hpp>

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

namespace canroll::ad {

// Reverse-mode tape over dense row-major Eigen matrices. Backward passes
// append ordinary nodes to the same tape, so a gradient is a differentiable
// value like any other: unrolled-optimizer lookahead (gradients of losses that
// themselves contain gradient steps) needs no extra machinery.

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const MatX<S>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const;
};

// parent accessors for vjp closures (the node records its parents)
template <class S>
Var<S> parent_a(Var<S> v);
template <class S>
Var<S> parent_b(Var<S> v);

template <class S>
class Tape {
 public:
  using M = MatX<S>;
  using V = Var<S>;
  // Emits gradient contributions for up to two parents given the upstream
  // gradient g of this node. Must build them with tape ops only.
  using Vjp = std::function<void(Tape&, V self, V g, V& ga, V& gb)>;

  V leaf(M v) { return push(std::move(v), -1, -1, nullptr); }
  V constant(M v) { return push(std::move(v), -1, -1, nullptr); }
  V constant(S v) { return constant(M::Constant(1, 1, v)); }

  V push(M value, int a, int b, Vjp vjp) {
    nodes_.push_back(Node{std::move(value), a, b, std::move(vjp)});
    return V{this, static_cast<int>(nodes_.size()) - 1};
  }

  const M& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  int parent_a_id(int id) const { return nodes_[static_cast<std::size_t>(id)].a; }
  int parent_b_id(int id) const { return nodes_[static_cast<std::size_t>(id)].b; }
  int size() const { return static_cast<int>(nodes_.size()); }

  void clear() { nodes_.clear(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  // Gradients of a 1x1 scalar node with respect to `wrt`. A leaf the loss does
  // not reach gets an explicit zero of its own shape. The returned Vars live on
  // this tape and can be differentiated again.
  std::vector<V> gradients(V loss, std::span<const V> wrt) {
    require(loss.valid() && loss.tape == this, Errc::ShapeMismatch, "gradients: loss not on this tape");
    require(loss.rows() == 1 && loss.cols() == 1, Errc::ShapeMismatch, "gradients: loss must be 1x1");
    const int n0 = loss.id + 1;
    std::vector<int> adjoint(static_cast<std::size_t>(n0), -1);
    adjoint[static_cast<std::size_t>(loss.id)] = constant(M::Ones(1, 1)).id;
    for (int i = loss.id; i >= 0; --i) {
      const int gid = adjoint[static_cast<std::size_t>(i)];
      if (gid < 0) continue;
      // copy out: push() during the vjp call may reallocate nodes_
      const Vjp vjp = nodes_[static_cast<std::size_t>(i)].vjp;
      const int pa = nodes_[static_cast<std::size_t>(i)].a;
      const int pb = nodes_[static_cast<std::size_t>(i)].b;
      if (!vjp) continue;
      V ga, gb;
      vjp(*this, V{this, i}, V{this, gid}, ga, gb);
      if (pa >= 0 && ga.valid()) accumulate(adjoint, pa, ga);
      if (pb >= 0 && gb.valid()) accumulate(adjoint, pb, gb);
    }
    std::vector<V> out;
    out.reserve(wrt.size());
    for (const V& w : wrt) {
      require(w.valid() && w.tape == this, Errc::ShapeMismatch, "gradients: wrt not on this tape");
      const int gid = w.id < n0 ? adjoint[static_cast<std::size_t>(w.id)] : -1;
      if (gid >= 0) {
        out.push_back(V{this, gid});
      } else {
        out.push_back(constant(M::Zero(w.rows(), w.cols())));
      }
    }
    return out;
  }

 private:
  struct Node {
    M value;
    int a;
    int b;
    Vjp vjp;
  };

  void accumulate(std::vector<int>& adjoint, int target, V g) {
    int& slot = adjoint[static_cast<std::size_t>(target)];
    if (slot < 0) {
      slot = g.id;
    } else {
      const M sum = value(slot) + g.value();
      slot = push(sum, slot, g.id, [](Tape&, V, V up, V& ga, V& gb) {
               ga = up;
               gb = up;
             }).id;
    }
  }

  std::vector<Node> nodes_;
};

template <class S>
const MatX<S>& Var<S>::value() const {
  return tape->value(id);
}

template <class S>
S Var<S>::scalar() const {
  const auto& v = value();
  require(v.rows() == 1 && v.cols() == 1, Errc::ShapeMismatch, "scalar() on non-1x1 var");
  return v(0, 0);
}

template <class S>
Var<S> parent_a(Var<S> v) {
  return Var<S>{v.tape, v.tape->parent_a_id(v.id)};
}

template <class S>
Var<S> parent_b(Var<S> v) {
  return Var<S>{v.tape, v.tape->parent_b_id(v.id)};
}

namespace detail {

template <class S>
void check_same_tape(Var<S> x, Var<S> y) {
  require(x.valid() && y.valid() && x.tape == y.tape, Errc::ShapeMismatch, "vars on different tapes");
}

template <class S>
void check_same_shape(Var<S> x, Var<S> y) {
  check_same_tape(x, y);
  require(x.rows() == y.rows() && x.cols() == y.cols(), Errc::ShapeMismatch, "shape mismatch in elementwise op");
}

}  // namespace detail

// ---- elementwise arithmetic ----

template <class S>
Var<S> add(Var<S> x, Var<S> y) {
  detail::check_same_shape(x, y);
  return x.tape->push(x.value() + y.value(), x.id, y.id, [](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>& gb) {
    ga = g;
    gb = g;
  });
}

template <class S>
Var<S> sub(Var<S> x, Var<S> y);

template <class S>
Var<S> neg(Var<S> x) {
  return x.tape->push(-x.value(), x.id, -1, [](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
    ga = neg(g);
  });
}

template <class S>
Var<S> sub(Var<S> x, Var<S> y) {
  detail::check_same_shape(x, y);
  return x.tape->push(x.value() - y.value(), x.id, y.id, [](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>& gb) {
    ga = g;
    gb = neg(g);
  });
}

template <class S>
Var<S> mul(Var<S> x, Var<S> y) {
  detail::check_same_shape(x, y);
  return x.tape->push(x.value().cwiseProduct(y.value()), x.id, y.id,
                      [](Tape<S>&, Var<S> self, Var<S> g, Var<S>& ga, Var<S>& gb) {
                        ga = mul(g, parent_b(self));
                        gb = mul(g, parent_a(self));
                      });
}

template <class S>
Var<S> divide(Var<S> x, Var<S> y) {
  detail::check_same_shape(x, y);
  return x.tape->push(x.value().cwiseQuotient(y.value()), x.id, y.id,
                      [](Tape<S>&, Var<S> self, Var<S> g, Var<S>& ga, Var<S>& gb) {
                        Var<S> b = parent_b(self);
                        ga = divide(g, b);
                        gb = neg(mul(g, divide(self, b)));
                      });
}

template <class S>
Var<S> scale(Var<S> x, S c) {
  return x.tape->push(MatX<S>(x.value() * c), x.id, -1, [c](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
    ga = scale(g, c);
  });
}

template <class S>
Var<S> add_scalar(Var<S> x, S c) {
  return x.tape->push(MatX<S>(x.value().array() + c), x.id, -1,
                      [](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) { ga = g; });
}

// ---- transcendental ----

template <class S>
Var<S> log_v(Var<S> x) {
  return x.tape->push(MatX<S>(x.value().array().log()), x.id, -1,
                      [](Tape<S>&, Var<S> self, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = divide(g, parent_a(self));
                      });
}

template <class S>
Var<S> exp_v(Var<S> x) {
  return x.tape->push(MatX<S>(x.value().array().exp()), x.id, -1,
                      [](Tape<S>&, Var<S> self, Var<S> g, Var<S>& ga, Var<S>&) { ga = mul(g, self); });
}

template <class S>
Var<S> sqrt_v(Var<S> x) {
  return x.tape->push(MatX<S>(x.value().array().sqrt()), x.id, -1,
                      [](Tape<S>&, Var<S> self, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = divide(g, scale(self, S(2)));
                      });
}

template <class S>
Var<S> tanh_v(Var<S> x) {
  return x.tape->push(MatX<S>(x.value().array().tanh()), x.id, -1,
                      [](Tape<S>& t, Var<S> self, Var<S> g, Var<S>& ga, Var<S>&) {
                        Var<S> one = t.constant(MatX<S>::Ones(self.rows(), self.cols()));
                        ga = mul(g, sub(one, mul(self, self)));
                      });
}

template <class S>
Var<S> sigmoid_v(Var<S> x) {
  MatX<S> y = (S(1) / (S(1) + (-x.value().array()).exp())).matrix();
  return x.tape->push(std::move(y), x.id, -1, [](Tape<S>& t, Var<S> self, Var<S> g, Var<S>& ga, Var<S>&) {
    Var<S> one = t.constant(MatX<S>::Ones(self.rows(), self.cols()));
    ga = mul(g, mul(self, sub(one, self)));
  });
}

// Piecewise-linear; the mask from the forward value is locally constant, so
// treating it as data keeps higher-order derivatives correct almost everywhere.
template <class S>
Var<S> leaky_relu(Var<S> x, S slope) {
  MatX<S> mask = (x.value().array() > S(0)).select(MatX<S>::Ones(x.rows(), x.cols()),
                                                   MatX<S>::Constant(x.rows(), x.cols(), slope));
  MatX<S> y = x.value().cwiseProduct(mask);
  return x.tape->push(std::move(y), x.id, -1,
                      [mask](Tape<S>& t, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = mul(g, t.constant(mask));
                      });
}

template <class S>
Var<S> relu(Var<S> x) {
  return leaky_relu(x, S(0));
}

template <class S>
Var<S> clamp(Var<S> x, S lo, S hi) {
  MatX<S> y = x.value().array().min(hi).max(lo).matrix();
  MatX<S> mask = ((x.value().array() > lo) && (x.value().array() < hi))
                     .select(MatX<S>::Ones(x.rows(), x.cols()), MatX<S>::Zero(x.rows(), x.cols()));
  return x.tape->push(std::move(y), x.id, -1,
                      [mask](Tape<S>& t, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = mul(g, t.constant(mask));
                      });
}

// ---- linear algebra ----

template <class S>
Var<S> matmul(Var<S> x, Var<S> y) {
  detail::check_same_tape(x, y);
  require(x.cols() == y.rows(), Errc::ShapeMismatch, "matmul inner dimensions");
  return x.tape->push(MatX<S>(x.value() * y.value()), x.id, y.id,
                      [](Tape<S>&, Var<S> self, Var<S> g, Var<S>& ga, Var<S>& gb) {
                        ga = matmul(g, transpose(parent_b(self)));
                        gb = matmul(transpose(parent_a(self)), g);
                      });
}

template <class S>
Var<S> transpose(Var<S> x) {
  return x.tape->push(MatX<S>(x.value().transpose()), x.id, -1,
                      [](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) { ga = transpose(g); });
}

// ---- reductions and broadcasts ----

template <class S>
Var<S> sum_all(Var<S> x) {
  return x.tape->push(MatX<S>::Constant(1, 1, x.value().sum()), x.id, -1,
                      [r = x.rows(), c = x.cols()](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = bcast_full(g, r, c);
                      });
}

template <class S>
Var<S> bcast_full(Var<S> x, Eigen::Index rows, Eigen::Index cols) {
  require(x.rows() == 1 && x.cols() == 1, Errc::ShapeMismatch, "bcast_full expects 1x1");
  return x.tape->push(MatX<S>::Constant(rows, cols, x.value()(0, 0)), x.id, -1,
                      [](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) { ga = sum_all(g); });
}

template <class S>
Var<S> colwise_sum(Var<S> x) {  // n x m -> 1 x m
  return x.tape->push(MatX<S>(x.value().colwise().sum()), x.id, -1,
                      [r = x.rows()](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = repeat_rows(g, r);
                      });
}

template <class S>
Var<S> repeat_rows(Var<S> x, Eigen::Index n) {  // 1 x m -> n x m
  require(x.rows() == 1, Errc::ShapeMismatch, "repeat_rows expects a row vector");
  return x.tape->push(MatX<S>(x.value().replicate(n, 1)), x.id, -1,
                      [](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) { ga = colwise_sum(g); });
}

template <class S>
Var<S> rowwise_sum(Var<S> x) {  // n x m -> n x 1
  return x.tape->push(MatX<S>(x.value().rowwise().sum()), x.id, -1,
                      [c = x.cols()](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = repeat_cols(g, c);
                      });
}

template <class S>
Var<S> repeat_cols(Var<S> x, Eigen::Index n) {  // m x 1 -> m x n
  require(x.cols() == 1, Errc::ShapeMismatch, "repeat_cols expects a column vector");
  return x.tape->push(MatX<S>(x.value().replicate(1, n)), x.id, -1,
                      [](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) { ga = rowwise_sum(g); });
}

// ---- shape ----

template <class S>
Var<S> reshape(Var<S> x, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == x.rows() * x.cols(), Errc::ShapeMismatch, "reshape element count");
  MatX<S> y(rows, cols);
  Eigen::Map<MatX<S>>(y.data(), rows, cols) =
      Eigen::Map<const MatX<S>>(x.value().data(), rows, cols);
  return x.tape->push(std::move(y), x.id, -1,
                      [r = x.rows(), c = x.cols()](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = reshape(g, r, c);
                      });
}

template <class S>
Var<S> block(Var<S> x, Eigen::Index i0, Eigen::Index j0, Eigen::Index rows, Eigen::Index cols) {
  require(i0 >= 0 && j0 >= 0 && i0 + rows <= x.rows() && j0 + cols <= x.cols(), Errc::ShapeMismatch,
          "block out of range");
  return x.tape->push(MatX<S>(x.value().block(i0, j0, rows, cols)), x.id, -1,
                      [i0, j0, R = x.rows(), C = x.cols()](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = pad_block(g, i0, j0, R, C);
                      });
}

template <class S>
Var<S> pad_block(Var<S> x, Eigen::Index i0, Eigen::Index j0, Eigen::Index rows, Eigen::Index cols) {
  MatX<S> y = MatX<S>::Zero(rows, cols);
  y.block(i0, j0, x.rows(), x.cols()) = x.value();
  return x.tape->push(std::move(y), x.id, -1,
                      [i0, j0, r = x.rows(), c = x.cols()](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = block(g, i0, j0, r, c);
                      });
}

// Gather over row-major flat indices; idx entry -1 reads as zero. The adjoint
// of a gather is a scatter-add with the same index table and vice versa, so
// the pair is closed under differentiation.
using IndexTable = std::shared_ptr<const std::vector<std::int32_t>>;

template <class S>
Var<S> index_select(Var<S> x, const IndexTable& idx, Eigen::Index rows, Eigen::Index cols) {
  require(static_cast<Eigen::Index>(idx->size()) == rows * cols, Errc::ShapeMismatch,
          "index_select table size");
  MatX<S> y(rows, cols);
  const S* src = x.value().data();
  S* dst = y.data();
  const auto& t = *idx;
  const Eigen::Index n = rows * cols;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::int32_t j = t[static_cast<std::size_t>(i)];
    dst[i] = j < 0 ? S(0) : src[j];
  }
  return x.tape->push(std::move(y), x.id, -1,
                      [idx, r = x.rows(), c = x.cols()](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = scatter_add(g, idx, r, c);
                      });
}

template <class S>
Var<S> scatter_add(Var<S> x, const IndexTable& idx, Eigen::Index rows, Eigen::Index cols) {
  require(static_cast<Eigen::Index>(idx->size()) == x.rows() * x.cols(), Errc::ShapeMismatch,
          "scatter_add table size");
  MatX<S> y = MatX<S>::Zero(rows, cols);
  const S* src = x.value().data();
  S* dst = y.data();
  const auto& t = *idx;
  const Eigen::Index n = x.rows() * x.cols();
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::int32_t j = t[static_cast<std::size_t>(i)];
    if (j >= 0) dst[j] += src[i];
  }
  return x.tape->push(std::move(y), x.id, -1,
                      [idx, r = x.rows(), c = x.cols()](Tape<S>&, Var<S>, Var<S> g, Var<S>& ga, Var<S>&) {
                        ga = index_select(g, idx, r, c);
                      });
}

// ---- compositions ----

template <class S>
Var<S> mean_all(Var<S> x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x.rows() * x.cols()));
}

template <class S>
Var<S> colwise_mean(Var<S> x) {
  return scale(colwise_sum(x), S(1) / static_cast<S>(x.rows()));
}

template <class S>
Var<S> square(Var<S> x) {
  return mul(x, x);
}

// Numerically shifted softmax over each row. The shift is detached: softmax is
// shift-invariant, so its gradient contribution cancels exactly.
template <class S>
Var<S> softmax_rows(Var<S> x) {
  MatX<S> shift = x.value().rowwise().maxCoeff();
  Var<S> centered = sub(x, repeat_cols(x.tape->constant(MatX<S>(shift)), x.cols()));
  Var<S> e = exp_v(centered);
  return divide(e, repeat_cols(rowwise_sum(e), x.cols()));
}

template <class S>
Var<S> operator+(Var<S> x, Var<S> y) { return add(x, y); }
template <class S>
Var<S> operator-(Var<S> x, Var<S> y) { return sub(x, y); }
template <class S>
Var<S> operator*(Var<S> x, Var<S> y) { return mul(x, y); }
template <class S>
Var<S> operator-(Var<S> x) { return neg(x); }
template <class S>
Var<S> operator*(S c, Var<S> x) { return scale(x, c); }
template <class S>
Var<S> operator*(Var<S> x, S c) { return scale(x, c); }

}  // namespace canroll::ad
