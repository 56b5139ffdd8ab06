#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "mol/ops.hpp"

namespace mol {

template <typename Scalar>
struct LayerNormParams {
  Var<Scalar> gain;
  Var<Scalar> bias;
  Scalar epsilon = Scalar(1e-5);
};

template <typename Scalar>
struct AttentionParams {
  Var<Scalar> w_q, w_k, w_v, w_o;  // each [d, d]
  Index n_heads = 1;

  Index d_model() const { return w_q.value().rows(); }
  Index head_dim() const { return d_model() / n_heads; }
};

// Feed-forward weights. W_down expands d -> f (the name follows the
// conventional LoRA formulation even though it is the expanding projection);
// W_up maps f -> d. W_gate is present only for GeGLU.
template <typename Scalar>
struct FfnParams {
  Var<Scalar> w_down;  // [d, f]
  Var<Scalar> w_gate;  // [d, f] or undefined
  Var<Scalar> w_up;    // [f, d]

  bool geglu() const { return w_gate.defined(); }
};

// Low-rank update W' = W + scale * A B on both FFN projections.
template <typename Scalar>
struct LoraDelta {
  Var<Scalar> a1, b1;  // [d, r], [r, f]
  Var<Scalar> a2, b2;  // [f, r], [r, d]
  Scalar scale = Scalar(1);
};

template <typename Scalar>
struct SharedBlockParams {
  LayerNormParams<Scalar> attn_norm;
  AttentionParams<Scalar> attn;
  LayerNormParams<Scalar> ffn_norm;
  FfnParams<Scalar> ffn;
};

struct RopeConfig {
  double base = 10000.0;
  Index head_dim = 2;
  Index max_seq = 512;

  RopeConfig() = default;
  RopeConfig(double base_, Index head_dim_, Index max_seq_)
      : base(base_), head_dim(head_dim_), max_seq(max_seq_) {
    validate();
  }

  void validate() const {
    if (head_dim < 2 || head_dim % 2 != 0) {
      throw ConfigError("rope: head_dim must be even, got " + std::to_string(head_dim));
    }
    if (!(base > 0)) throw ConfigError("rope: base must be positive");
    if (max_seq < 1) throw ConfigError("rope: max_seq must be >= 1");
  }

  double angle(Index position, Index pair) const {
    return static_cast<double>(position) *
           std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(head_dim));
  }
};

namespace detail {

// Rotates each head's consecutive coordinate pairs of `m` (rows x n_heads*head_dim)
// by +angle (sign=1) or -angle (sign=-1).
template <typename Scalar, typename Matrix>
void rotate_pairs(Matrix& m, const std::vector<Index>& positions, Index n_heads, const RopeConfig& cfg,
                  int sign) {
  const Index hd = cfg.head_dim;
  for (Index r = 0; r < m.rows(); ++r) {
    const Index pos = positions[static_cast<std::size_t>(r)];
    for (Index j = 0; j < hd / 2; ++j) {
      const double theta = sign * cfg.angle(pos, j);
      const Scalar c = static_cast<Scalar>(std::cos(theta));
      const Scalar s = static_cast<Scalar>(std::sin(theta));
      for (Index h = 0; h < n_heads; ++h) {
        const Index i0 = h * hd + 2 * j;
        const Scalar x0 = m(r, i0);
        const Scalar x1 = m(r, i0 + 1);
        m(r, i0) = c * x0 - s * x1;
        m(r, i0 + 1) = s * x0 + c * x1;
      }
    }
  }
}

inline void check_positions(const std::vector<Index>& positions, Index rows, const RopeConfig& cfg) {
  if (static_cast<Index>(positions.size()) != rows) {
    throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(rows) + " rows");
  }
  for (Index p : positions) {
    if (p < 0 || p >= cfg.max_seq) {
      throw InputError("rope: position " + std::to_string(p) + " outside [0, " +
                       std::to_string(cfg.max_seq) + ")");
    }
  }
}

}  // namespace detail

// Rotary embedding on a [seq, n_heads, head_dim] tensor.
template <typename Scalar>
Tensor<Scalar> rope_rotate(const Tensor<Scalar>& x, const std::vector<Index>& positions,
                           const RopeConfig& cfg) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(2) != cfg.head_dim) {
    throw DimensionError("rope_rotate: expected [seq, heads, " + std::to_string(cfg.head_dim) + "], got " +
                         shape_str(x.shape()));
  }
  detail::check_positions(positions, x.dim(0), cfg);
  Tensor<Scalar> out = x.reshaped(Shape{x.dim(0), x.dim(1) * x.dim(2)});
  auto m = out.matrix();
  detail::rotate_pairs<Scalar>(m, positions, x.dim(1), cfg, +1);
  return out.reshaped(x.shape());
}

// Differentiable rotary embedding on a packed [rows, n_heads*head_dim] matrix.
template <typename Scalar>
Var<Scalar> rope(const Var<Scalar>& x, std::vector<Index> positions, Index n_heads, const RopeConfig& cfg) {
  cfg.validate();
  if (x.value().cols() != n_heads * cfg.head_dim) {
    throw DimensionError("rope: width " + std::to_string(x.value().cols()) + " != heads*head_dim");
  }
  detail::check_positions(positions, x.value().rows(), cfg);
  Tensor<Scalar> out = x.value();
  auto m = out.matrix();
  detail::rotate_pairs<Scalar>(m, positions, n_heads, cfg, +1);
  return make_result<Scalar>("rope", std::move(out), {x.node()},
                             [positions = std::move(positions), n_heads, cfg](Node<Scalar>& n) {
                               // The transpose of a rotation is the inverse rotation.
                               Tensor<Scalar> g = n.grad;
                               auto gm = g.matrix();
                               detail::rotate_pairs<Scalar>(gm, positions, n_heads, cfg, -1);
                               n.inputs[0]->accumulate(g);
                             });
}

// Scaled dot-product attention over packed sequences.
//
// q, k, v: [n_seq * seq_len, n_heads * head_dim], already projected (and
// rotated). key_valid, when non-empty, has one entry per row; invalid keys are
// excluded from the softmax. If every key of a sequence is invalid the mask is
// ignored for that sequence. When `weights_out` is given, it receives the
// [n_seq * n_heads * seq_len, seq_len] attention probabilities.
template <typename Scalar>
Var<Scalar> attention_core(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, Index n_heads,
                           Index seq_len, const std::vector<bool>& key_valid = {},
                           Tensor<Scalar>* weights_out = nullptr) {
  detail::require_same_shape("attention", q.shape(), k.shape());
  detail::require_same_shape("attention", q.shape(), v.shape());
  const Index rows = q.value().rows();
  const Index d = q.value().cols();
  if (seq_len < 1 || rows % seq_len != 0 || d % n_heads != 0) {
    throw DimensionError("attention: rows " + std::to_string(rows) + " not a multiple of seq_len " +
                         std::to_string(seq_len) + " or width not divisible by heads");
  }
  if (!key_valid.empty() && static_cast<Index>(key_valid.size()) != rows) {
    throw DimensionError("attention: mask has " + std::to_string(key_valid.size()) + " entries for " +
                         std::to_string(rows) + " rows");
  }
  const Index n_seq = rows / seq_len;
  const Index hd = d / n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));

  // probs[(s * n_heads + h)] is a seq_len x seq_len block
  auto probs = std::make_shared<std::vector<RowMatrix<Scalar>>>(n_seq * n_heads);
  Tensor<Scalar> out(Shape{rows, d});
  const auto qm = q.value().matrix();
  const auto km = k.value().matrix();
  const auto vm = v.value().matrix();
  for (Index s = 0; s < n_seq; ++s) {
    const Index r0 = s * seq_len;
    bool any_valid = key_valid.empty();
    for (Index t = 0; t < seq_len && !any_valid; ++t) any_valid = key_valid[r0 + t];
    for (Index h = 0; h < n_heads; ++h) {
      RowMatrix<Scalar> scores =
          qm.block(r0, h * hd, seq_len, hd) * km.block(r0, h * hd, seq_len, hd).transpose() * inv_sqrt;
      if (!key_valid.empty() && any_valid) {
        for (Index t = 0; t < seq_len; ++t)
          if (!key_valid[r0 + t]) scores.col(t).setConstant(-std::numeric_limits<Scalar>::infinity());
      }
      RowMatrix<Scalar>& p = (*probs)[s * n_heads + h];
      p = detail::softmax_rows<Scalar>(scores);
      out.matrix().block(r0, h * hd, seq_len, hd).noalias() = p * vm.block(r0, h * hd, seq_len, hd);
    }
  }
  if (weights_out) {
    *weights_out = Tensor<Scalar>(Shape{n_seq * n_heads * seq_len, seq_len});
    for (Index i = 0; i < n_seq * n_heads; ++i)
      weights_out->matrix().middleRows(i * seq_len, seq_len) = (*probs)[i];
  }
  return make_result<Scalar>(
      "attention", std::move(out), {q.node(), k.node(), v.node()},
      [probs, n_seq, n_heads, seq_len, hd, inv_sqrt](Node<Scalar>& n) {
        auto& qn = *n.inputs[0];
        auto& kn = *n.inputs[1];
        auto& vn = *n.inputs[2];
        const Index rows = n.value.rows();
        const Index d = n.value.cols();
        RowMatrix<Scalar> dq = RowMatrix<Scalar>::Zero(rows, d);
        RowMatrix<Scalar> dk = RowMatrix<Scalar>::Zero(rows, d);
        RowMatrix<Scalar> dv = RowMatrix<Scalar>::Zero(rows, d);
        const auto g = n.grad.matrix();
        const auto qm = qn.value.matrix();
        const auto km = kn.value.matrix();
        const auto vm = vn.value.matrix();
        for (Index s = 0; s < n_seq; ++s) {
          const Index r0 = s * seq_len;
          for (Index h = 0; h < n_heads; ++h) {
            const RowMatrix<Scalar>& p = (*probs)[s * n_heads + h];
            const auto go = g.block(r0, h * hd, seq_len, hd);
            dv.block(r0, h * hd, seq_len, hd).noalias() = p.transpose() * go;
            const RowMatrix<Scalar> dp = go * vm.block(r0, h * hd, seq_len, hd).transpose();
            const ColVector<Scalar> rowdot = dp.cwiseProduct(p).rowwise().sum();
            const RowMatrix<Scalar> ds = p.cwiseProduct(dp - rowdot.replicate(1, seq_len)) * inv_sqrt;
            dq.block(r0, h * hd, seq_len, hd).noalias() = ds * km.block(r0, h * hd, seq_len, hd);
            dk.block(r0, h * hd, seq_len, hd).noalias() = ds.transpose() * qm.block(r0, h * hd, seq_len, hd);
          }
        }
        if (qn.requires_grad) qn.accumulate_matrix(dq);
        if (kn.requires_grad) kn.accumulate_matrix(dk);
        if (vn.requires_grad) vn.accumulate_matrix(dv);
      });
}

// Multi-head self-attention with RoPE on q and k. Bidirectional.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& x, const AttentionParams<Scalar>& p, const RopeConfig& cfg,
                      Index seq_len, const std::vector<bool>& key_valid = {},
                      Tensor<Scalar>* weights_out = nullptr) {
  const Index rows = x.value().rows();
  if (seq_len < 1 || rows % seq_len != 0) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows is not a multiple of seq_len " +
                         std::to_string(seq_len));
  }
  std::vector<Index> positions(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) positions[static_cast<std::size_t>(r)] = r % seq_len;
  const Var<Scalar> q = rope(matmul(x, p.w_q), positions, p.n_heads, cfg);
  const Var<Scalar> k = rope(matmul(x, p.w_k), positions, p.n_heads, cfg);
  const Var<Scalar> v = matmul(x, p.w_v);
  return matmul(attention_core(q, k, v, p.n_heads, seq_len, key_valid, weights_out), p.w_o);
}

// x W + scale (x A) B, never forming the dense update.
template <typename Scalar>
Var<Scalar> lora_project(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& a,
                         const Var<Scalar>& b, Scalar factor) {
  return add(matmul(x, w), scale(matmul(matmul(x, a), b), factor));
}

// Feed-forward sublayer on already-normalised input. With GeGLU:
//   (gelu(x W_gate) * (x W_down')) W_up'
// otherwise gelu(x W_down') W_up'. Primed matrices carry the optional delta;
// W_gate never does.
template <typename Scalar>
Var<Scalar> ffn_forward(const Var<Scalar>& x, const FfnParams<Scalar>& p,
                        const std::optional<LoraDelta<Scalar>>& delta = std::nullopt) {
  const Var<Scalar> value =
      delta ? lora_project(x, p.w_down, delta->a1, delta->b1, delta->scale) : matmul(x, p.w_down);
  const Var<Scalar> hidden = p.geglu() ? mul(gelu(matmul(x, p.w_gate)), value) : gelu(value);
  return delta ? lora_project(hidden, p.w_up, delta->a2, delta->b2, delta->scale) : matmul(hidden, p.w_up);
}

template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const LayerNormParams<Scalar>& p) {
  return layer_norm(x, p.gain, p.bias, p.epsilon);
}

// Pre-norm encoder layer:
//   h_att = h + MHA(LN(h)),  h_out = h_att + FFN(LN(h_att)).
// `ffn` maps the normalised input to the FFN sublayer output, which lets a
// MoL/MoA layer replace the plain shared FFN.
template <typename Scalar, typename FfnFn>
Var<Scalar> encoder_layer_forward(const Var<Scalar>& h_prev, const SharedBlockParams<Scalar>& block,
                                  const RopeConfig& cfg, Index seq_len, const std::vector<bool>& key_valid,
                                  FfnFn&& ffn) {
  const Var<Scalar> h_att =
      add(h_prev, attention(layer_norm(h_prev, block.attn_norm), block.attn, cfg, seq_len, key_valid));
  return add(h_att, ffn(layer_norm(h_att, block.ffn_norm)));
}

template <typename Scalar>
Var<Scalar> encoder_layer_forward(const Var<Scalar>& h_prev, const SharedBlockParams<Scalar>& block,
                                  const RopeConfig& cfg, Index seq_len, const std::vector<bool>& key_valid = {}) {
  return encoder_layer_forward(h_prev, block, cfg, seq_len, key_valid,
                               [&](const Var<Scalar>& x) { return ffn_forward(x, block.ffn); });
}

}  // namespace mol
