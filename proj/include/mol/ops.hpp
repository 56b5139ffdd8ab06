#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "mol/autodiff.hpp"

namespace mol {

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline void require_rank2(const char* op, const Shape& s) {
  if (s.size() != 2) throw DimensionError(std::string(op) + ": expected rank 2, got " + shape_str(s));
}

template <typename Scalar>
void require_finite(const char* op, const Tensor<Scalar>& t) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

template <typename Scalar>
Scalar normal_cdf(Scalar x) {
  return Scalar(0.5) * std::erfc(-x / std::numbers::sqrt2_v<Scalar>);
}

template <typename Scalar>
Scalar normal_pdf(Scalar x) {
  return std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
}

// Row-wise max-subtracted softmax of a matrix.
template <typename Scalar>
RowMatrix<Scalar> softmax_rows(const Eigen::Ref<const RowMatrix<Scalar>>& x) {
  RowMatrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

// Row-wise log-softmax.
template <typename Scalar>
RowMatrix<Scalar> log_softmax_rows(const Eigen::Ref<const RowMatrix<Scalar>>& x) {
  RowMatrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
    y.row(r) = (x.row(r).array() - lse).matrix();
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  }
  Tensor<Scalar> out(Shape{av.rows(), bv.cols()});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  return make_result<Scalar>("matmul", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& n) {
    auto& an = *n.inputs[0];
    auto& bn = *n.inputs[1];
    const auto g = n.grad.matrix();
    if (an.requires_grad) an.accumulate_matrix(g * bn.value.matrix().transpose());
    if (bn.requires_grad) bn.accumulate_matrix(an.value.matrix().transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  detail::require_rank2("transpose", a.shape());
  return make_result<Scalar>("transpose", a.value().transposed(), {a.node()}, [](Node<Scalar>& n) {
    n.inputs[0]->accumulate_matrix(n.grad.matrix().transpose());
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  return make_result<Scalar>("reshape", a.value().reshaped(std::move(shape)), {a.node()},
                             [](Node<Scalar>& n) {
                               auto& in = *n.inputs[0];
                               in.accumulate(n.grad.reshaped(in.value.shape()));
                             });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  Tensor<Scalar> out(a.shape());
  out.data() = a.value().data() + b.value().data();
  return make_result<Scalar>("add", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& n) {
    for (auto& in : n.inputs)
      if (in->requires_grad) in->accumulate(n.grad);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  Tensor<Scalar> out(a.shape());
  out.data() = a.value().data() - b.value().data();
  return make_result<Scalar>("sub", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& n) {
    if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(n.grad);
    if (n.inputs[1]->requires_grad) {
      Tensor<Scalar> neg = n.grad;
      neg.data() = -neg.data();
      n.inputs[1]->accumulate(neg);
    }
  });
}

// Hadamard product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  Tensor<Scalar> out(a.shape());
  out.data() = a.value().data().cwiseProduct(b.value().data());
  return make_result<Scalar>("mul", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& n) {
    auto& an = *n.inputs[0];
    auto& bn = *n.inputs[1];
    if (an.requires_grad) {
      Tensor<Scalar> g(an.value.shape());
      g.data() = n.grad.data().cwiseProduct(bn.value.data());
      an.accumulate(g);
    }
    if (bn.requires_grad) {
      Tensor<Scalar> g(bn.value.shape());
      g.data() = n.grad.data().cwiseProduct(an.value.data());
      bn.accumulate(g);
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape());
  out.data() = a.value().data() * s;
  return make_result<Scalar>("scale", std::move(out), {a.node()}, [s](Node<Scalar>& n) {
    Tensor<Scalar> g(n.grad.shape());
    g.data() = n.grad.data() * s;
    n.inputs[0]->accumulate(g);
  });
}

// x + c for a constant tensor c of the same shape (masks).
template <typename Scalar>
Var<Scalar> add_constant(const Var<Scalar>& x, const Tensor<Scalar>& c) {
  detail::require_same_shape("add_constant", x.shape(), c.shape());
  Tensor<Scalar> out(x.shape());
  out.data() = x.value().data() + c.data();
  return make_result<Scalar>("add_constant", std::move(out), {x.node()},
                             [](Node<Scalar>& n) { n.inputs[0]->accumulate(n.grad); });
}

// x[r, :] * w[r] for a column w of shape [rows, 1].
template <typename Scalar>
Var<Scalar> scale_rows(const Var<Scalar>& x, const Var<Scalar>& w) {
  if (w.value().numel() != x.value().rows()) {
    throw DimensionError("scale_rows: weights " + shape_str(w.shape()) + " vs rows of " +
                         shape_str(x.shape()));
  }
  Tensor<Scalar> out(x.shape());
  out.matrix() = w.value().data().asDiagonal() * x.value().matrix();
  return make_result<Scalar>("scale_rows", std::move(out), {x.node(), w.node()}, [](Node<Scalar>& n) {
    auto& xn = *n.inputs[0];
    auto& wn = *n.inputs[1];
    const auto g = n.grad.matrix();
    if (xn.requires_grad) xn.accumulate_matrix(wn.value.data().asDiagonal() * g);
    if (wn.requires_grad) {
      Tensor<Scalar> gw(wn.value.shape());
      gw.data() = g.cwiseProduct(xn.value.matrix()).rowwise().sum();
      wn.accumulate(gw);
    }
  });
}

// x[r, :] + v for a vector v of length cols.
template <typename Scalar>
Var<Scalar> add_rowvec(const Var<Scalar>& x, const Var<Scalar>& v) {
  if (v.value().numel() != x.value().cols()) {
    throw DimensionError("add_rowvec: vector " + shape_str(v.shape()) + " vs " + shape_str(x.shape()));
  }
  Tensor<Scalar> out(x.shape());
  out.matrix() = x.value().matrix().rowwise() + v.value().data().transpose();
  return make_result<Scalar>("add_rowvec", std::move(out), {x.node(), v.node()}, [](Node<Scalar>& n) {
    if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(n.grad);
    auto& vn = *n.inputs[1];
    if (vn.requires_grad) {
      Tensor<Scalar> gv(vn.value.shape());
      gv.data() = n.grad.matrix().colwise().sum().transpose();
      vn.accumulate(gv);
    }
  });
}

// Exact GELU x * Phi(x).
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.data() = x.value().data().unaryExpr([](Scalar v) { return v * detail::normal_cdf(v); });
  return make_result<Scalar>("gelu", std::move(out), {x.node()}, [](Node<Scalar>& n) {
    auto& in = *n.inputs[0];
    Tensor<Scalar> g(in.value.shape());
    g.data() = in.value.data()
                   .unaryExpr([](Scalar v) { return detail::normal_cdf(v) + v * detail::normal_pdf(v); })
                   .cwiseProduct(n.grad.data());
    in.accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Normalisation

template <typename Scalar>
Var<Scalar> softmax_lastdim(const Var<Scalar>& x) {
  detail::require_finite("softmax_lastdim", x.value());
  Tensor<Scalar> out(x.shape());
  out.matrix() = detail::softmax_rows<Scalar>(x.value().matrix());
  return make_result<Scalar>("softmax", std::move(out), {x.node()}, [](Node<Scalar>& n) {
    const auto y = n.value.matrix();
    const auto g = n.grad.matrix();
    const ColVector<Scalar> dot = g.cwiseProduct(y).rowwise().sum();
    n.inputs[0]->accumulate_matrix(y.cwiseProduct(g - dot.replicate(1, g.cols())));
  });
}

// Pre-norm layer normalisation over the last dim with affine gain/bias.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias,
                       Scalar eps) {
  const Index d = x.value().cols();
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const auto xm = x.value().matrix();
  const Index rows = xm.rows();
  RowMatrix<Scalar> xhat(rows, d);
  ColVector<Scalar> inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = xm.row(r).mean();
    const auto centered = (xm.row(r).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / Scalar(d);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Tensor<Scalar> out(x.shape());
  out.matrix() = (xhat.array().rowwise() * gain.value().data().transpose().array()).matrix();
  out.matrix().rowwise() += bias.value().data().transpose();
  return make_result<Scalar>(
      "layer_norm", std::move(out), {x.node(), gain.node(), bias.node()},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), d](Node<Scalar>& n) {
        auto& xn = *n.inputs[0];
        auto& gn = *n.inputs[1];
        auto& bn = *n.inputs[2];
        const auto g = n.grad.matrix();
        if (xn.requires_grad) {
          const RowMatrix<Scalar> dxhat = g.array().rowwise() * gn.value.data().transpose().array();
          RowMatrix<Scalar> dx(dxhat.rows(), d);
          for (Index r = 0; r < dxhat.rows(); ++r) {
            const Scalar mean_d = dxhat.row(r).mean();
            const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / Scalar(d);
            dx.row(r) = inv_std(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
          }
          xn.accumulate_matrix(dx);
        }
        if (gn.requires_grad) {
          Tensor<Scalar> gg(gn.value.shape());
          gg.data() = g.cwiseProduct(xhat).colwise().sum().transpose();
          gn.accumulate(gg);
        }
        if (bn.requires_grad) {
          Tensor<Scalar> gb(bn.value.shape());
          gb.data() = g.colwise().sum().transpose();
          bn.accumulate(gb);
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing

// out[i, :] = x[idx[i], :]
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, std::vector<Index> idx) {
  const Index rows = x.value().rows();
  const Index cols = x.value().cols();
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor<Scalar> out(Shape{static_cast<Index>(idx.size()), cols});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                           shape_str(x.shape()));
    }
    out.matrix().row(static_cast<Index>(i)) = x.value().matrix().row(idx[i]);
  }
  return make_result<Scalar>("gather_rows", std::move(out), {x.node()},
                             [idx = std::move(idx)](Node<Scalar>& n) {
                               auto& in = *n.inputs[0];
                               Tensor<Scalar>& g = in.grad.empty() ? (in.grad = Tensor<Scalar>(in.value.shape()))
                                                                   : in.grad;
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 g.matrix().row(idx[i]) += n.grad.matrix().row(static_cast<Index>(i));
                             });
}

// out has `total_rows` rows; out[idx[i], :] += x[i, :], all other rows zero.
template <typename Scalar>
Var<Scalar> scatter_rows(const Var<Scalar>& x, std::vector<Index> idx, Index total_rows) {
  if (static_cast<Index>(idx.size()) != x.value().rows()) {
    throw DimensionError("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                         shape_str(x.shape()));
  }
  Tensor<Scalar> out(Shape{total_rows, x.value().cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= total_rows) throw DimensionError("scatter_rows: index out of range");
    out.matrix().row(idx[i]) += x.value().matrix().row(static_cast<Index>(i));
  }
  return make_result<Scalar>("scatter_rows", std::move(out), {x.node()},
                             [idx = std::move(idx)](Node<Scalar>& n) {
                               auto& in = *n.inputs[0];
                               RowMatrix<Scalar> g(in.value.rows(), in.value.cols());
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 g.row(static_cast<Index>(i)) = n.grad.matrix().row(idx[i]);
                               in.accumulate_matrix(g);
                             });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count) {
  detail::require_rank2("slice_cols", x.shape());
  if (start < 0 || count < 1 || start + count > x.value().cols()) {
    throw DimensionError("slice_cols: range out of bounds for " + shape_str(x.shape()));
  }
  Tensor<Scalar> out(Shape{x.value().rows(), count});
  out.matrix() = x.value().matrix().middleCols(start, count);
  return make_result<Scalar>("slice_cols", std::move(out), {x.node()}, [start, count](Node<Scalar>& n) {
    auto& in = *n.inputs[0];
    if (in.grad.empty()) in.grad = Tensor<Scalar>(in.value.shape());
    in.grad.matrix().middleCols(start, count) += n.grad.matrix();
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().value().rows();
  Index cols = 0;
  std::vector<std::shared_ptr<Node<Scalar>>> nodes;
  for (const auto& p : parts) {
    detail::require_rank2("concat_cols", p.shape());
    if (p.value().rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.value().cols();
    nodes.push_back(p.node());
  }
  Tensor<Scalar> out(Shape{rows, cols});
  Index offset = 0;
  for (const auto& p : parts) {
    out.matrix().middleCols(offset, p.value().cols()) = p.value().matrix();
    offset += p.value().cols();
  }
  return make_result<Scalar>("concat_cols", std::move(out), std::move(nodes), [](Node<Scalar>& n) {
    Index offset = 0;
    for (auto& in : n.inputs) {
      const Index c = in->value.cols();
      if (in->requires_grad) in->accumulate_matrix(n.grad.matrix().middleCols(offset, c));
      offset += c;
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts.front().value().cols();
  Index rows = 0;
  std::vector<std::shared_ptr<Node<Scalar>>> nodes;
  for (const auto& p : parts) {
    detail::require_rank2("concat_rows", p.shape());
    if (p.value().cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += p.value().rows();
    nodes.push_back(p.node());
  }
  Tensor<Scalar> out(Shape{rows, cols});
  Index offset = 0;
  for (const auto& p : parts) {
    out.matrix().middleRows(offset, p.value().rows()) = p.value().matrix();
    offset += p.value().rows();
  }
  return make_result<Scalar>("concat_rows", std::move(out), std::move(nodes), [](Node<Scalar>& n) {
    Index offset = 0;
    for (auto& in : n.inputs) {
      const Index r = in->value.rows();
      if (in->requires_grad) in->accumulate_matrix(n.grad.matrix().middleRows(offset, r));
      offset += r;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  return make_result<Scalar>("sum", Tensor<Scalar>::scalar(x.value().data().sum()), {x.node()},
                             [](Node<Scalar>& n) {
                               auto& in = *n.inputs[0];
                               in.accumulate(Tensor<Scalar>(in.value.shape(), n.grad.item()));
                             });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().numel()));
}

// Column-wise mean over rows: [rows, cols] -> [1, cols].
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& x) {
  const Index rows = x.value().rows();
  Tensor<Scalar> out(Shape{1, x.value().cols()});
  out.matrix() = x.value().matrix().colwise().mean();
  return make_result<Scalar>("mean_rows", std::move(out), {x.node()}, [rows](Node<Scalar>& n) {
    auto& in = *n.inputs[0];
    in.accumulate_matrix((n.grad.matrix() / static_cast<Scalar>(rows)).replicate(rows, 1));
  });
}

// ---------------------------------------------------------------------------
// Losses

// Mean cross-entropy of row-wise softmax(logits) against integer labels.
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, const std::vector<Index>& labels) {
  const auto lm = logits.value().matrix();
  if (static_cast<Index>(labels.size()) != lm.rows() || labels.empty()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  detail::require_finite("cross_entropy", logits.value());
  const RowMatrix<Scalar> logp = detail::log_softmax_rows<Scalar>(lm);
  Scalar total = 0;
  for (Index r = 0; r < lm.rows(); ++r) {
    const Index y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= lm.cols()) throw DimensionError("cross_entropy: label out of range");
    total -= logp(r, y);
  }
  const Scalar n_rows = static_cast<Scalar>(lm.rows());
  return make_result<Scalar>("cross_entropy", Tensor<Scalar>::scalar(total / n_rows), {logits.node()},
                             [logp, labels, n_rows](Node<Scalar>& n) {
                               RowMatrix<Scalar> g = logp.array().exp().matrix();
                               for (Index r = 0; r < g.rows(); ++r) g(r, labels[static_cast<std::size_t>(r)]) -= 1;
                               n.inputs[0]->accumulate_matrix(g * (n.grad.item() / n_rows));
                             });
}

// T^2 * mean_rows KL(softmax(teacher/T) || softmax(student/T)).
template <typename Scalar>
Var<Scalar> distill_kl(const Var<Scalar>& student, const Tensor<Scalar>& teacher, Scalar temperature) {
  detail::require_same_shape("distill_kl", student.shape(), teacher.shape());
  if (!(temperature > 0)) throw ConfigError("distillation temperature must be > 0");
  const RowMatrix<Scalar> s = student.value().matrix() / temperature;
  const RowMatrix<Scalar> t = teacher.matrix() / temperature;
  const RowMatrix<Scalar> log_ps = detail::log_softmax_rows<Scalar>(s);
  const RowMatrix<Scalar> log_pt = detail::log_softmax_rows<Scalar>(t);
  const RowMatrix<Scalar> pt = log_pt.array().exp().matrix();
  const Scalar n_rows = static_cast<Scalar>(s.rows());
  const Scalar kl = (pt.array() * (log_pt - log_ps).array()).sum() / n_rows;
  return make_result<Scalar>(
      "distill_kl", Tensor<Scalar>::scalar(temperature * temperature * kl), {student.node()},
      [log_ps, pt, temperature, n_rows](Node<Scalar>& n) {
        // d/ds of T^2 KL = T (p_s - p_t) / rows
        const RowMatrix<Scalar> g = (log_ps.array().exp().matrix() - pt) * (temperature / n_rows);
        n.inputs[0]->accumulate_matrix(g * n.grad.item());
      });
}

}  // namespace mol
