#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mol/layers.hpp"

namespace mol {

// Number of router evaluations performed process-wide. Merged (routing-free)
// inference must leave it untouched.
inline std::atomic<std::uint64_t>& routing_evaluations() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

template <typename Scalar>
struct Router {
  Var<Scalar> weight;  // [d, E]
  Index top_k = 2;
  bool frozen = false;

  Index n_experts() const { return weight.value().cols(); }
};

template <typename Scalar>
struct LoraExpert {
  Var<Scalar> a1, b1;  // W_down delta: [d, r], [r, f]
  Var<Scalar> a2, b2;  // W_up delta:   [f, r], [r, d]
  Index rank = 1;
  Scalar alpha = Scalar(1);

  Scalar scale() const { return alpha / static_cast<Scalar>(rank); }
  LoraDelta<Scalar> delta() const { return {a1, b1, a2, b2, scale()}; }
};

template <typename Scalar>
struct MolLayer {
  std::vector<LoraExpert<Scalar>> experts;
  Router<Scalar> router;

  Index n_experts() const { return static_cast<Index>(experts.size()); }

  void validate() const {
    if (experts.empty()) throw ConfigError("MoL layer needs at least one expert");
    if (router.n_experts() != n_experts()) {
      throw ConfigError("router has " + std::to_string(router.n_experts()) + " outputs for " +
                        std::to_string(n_experts()) + " experts");
    }
    if (router.top_k < 1 || router.top_k > n_experts()) throw ConfigError("top_k must be in [1, E]");
    for (const auto& e : experts) {
      if (e.rank != experts.front().rank || e.alpha != experts.front().alpha) {
        throw ConfigError("all MoL experts must share rank and lora_alpha");
      }
    }
  }
};

// Bottleneck adapter y -> gelu(y D) U applied to the FFN output.
template <typename Scalar>
struct BottleneckAdapter {
  Var<Scalar> down;  // [d, b]
  Var<Scalar> up;    // [b, d]
};

template <typename Scalar>
struct MoaLayer {
  std::vector<BottleneckAdapter<Scalar>> adapters;
  Router<Scalar> router;

  Index n_experts() const { return static_cast<Index>(adapters.size()); }
};

// Adapter bottleneck width giving the same parameter budget as a rank-r LoRA
// expert on a (d, f) FFN: 2 b d == 2 r (d + f).
inline Index moa_bottleneck_for_rank(Index d, Index f, Index rank) {
  return std::max<Index>(1, (rank * (d + f) + d / 2) / d);
}

template <typename Scalar>
struct TopK {
  std::vector<Index> indices;
  std::vector<Scalar> weights;
};

// Top-k of a probability vector with weights renormalised over the selection.
// Ties go to the lowest index.
template <typename Scalar>
TopK<Scalar> topk_renormalised(const Eigen::Ref<const ColVector<Scalar>>& probs, Index k) {
  const Index e = probs.size();
  if (k < 1 || k > e) throw ConfigError("top_k " + std::to_string(k) + " outside [1, " + std::to_string(e) + "]");
  std::vector<Index> order(static_cast<std::size_t>(e));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return probs(a) > probs(b); });
  TopK<Scalar> out;
  out.indices.assign(order.begin(), order.begin() + k);
  Scalar z = 0;
  for (Index i : out.indices) z += probs(i);
  for (Index i : out.indices) out.weights.push_back(probs(i) / z);
  return out;
}

// Router probabilities softmax(x W_r) for every row of x.
template <typename Scalar>
Var<Scalar> router_probabilities(const Var<Scalar>& x, const Router<Scalar>& router) {
  routing_evaluations().fetch_add(1, std::memory_order_relaxed);
  return softmax_lastdim(matmul(x, router.weight));
}

template <typename Scalar>
TopK<Scalar> route_topk(const Tensor<Scalar>& h, const Router<Scalar>& router) {
  const Var<Scalar> x = Var<Scalar>::constant(h.reshaped(Shape{1, h.numel()}));
  const Tensor<Scalar> p = router_probabilities(x, router).value();
  return topk_renormalised<Scalar>(p.data(), router.top_k);
}

// Dense [T, E] gate: renormalised top-k weights per row, zero elsewhere.
// `selected` receives each row's chosen experts in descending order.
template <typename Scalar>
Var<Scalar> topk_gate(const Var<Scalar>& probs, Index k, std::vector<std::vector<Index>>* selected = nullptr) {
  const Index rows = probs.value().rows();
  const Index e = probs.value().cols();
  auto sel = std::make_shared<std::vector<std::vector<Index>>>(static_cast<std::size_t>(rows));
  Tensor<Scalar> gate(Shape{rows, e});
  ColVector<Scalar> norm(rows);
  for (Index t = 0; t < rows; ++t) {
    const ColVector<Scalar> p = probs.value().matrix().row(t).transpose();
    const TopK<Scalar> tk = topk_renormalised<Scalar>(p, k);
    Scalar z = 0;
    for (std::size_t j = 0; j < tk.indices.size(); ++j) {
      gate.at(t, tk.indices[j]) = tk.weights[j];
      z += p(tk.indices[j]);
    }
    norm(t) = z;
    (*sel)[static_cast<std::size_t>(t)] = tk.indices;
  }
  if (selected) *selected = *sel;
  return make_result<Scalar>("topk_gate", std::move(gate), {probs.node()}, [sel, norm](Node<Scalar>& n) {
    // w_i = p_i / Z over the selected set S, so dp_j = (g_j - sum_S g_i w_i) / Z for j in S.
    Tensor<Scalar> gp(n.value.shape());
    for (Index t = 0; t < n.value.rows(); ++t) {
      const auto& s = (*sel)[static_cast<std::size_t>(t)];
      Scalar dot = 0;
      for (Index i : s) dot += n.grad.at(t, i) * n.value.at(t, i);
      for (Index j : s) gp.at(t, j) = (n.grad.at(t, j) - dot) / norm(t);
    }
    n.inputs[0]->accumulate(gp);
  });
}

// Rows routed to each expert.
inline std::vector<std::vector<Index>> rows_per_expert(const std::vector<std::vector<Index>>& selected,
                                                       Index n_experts) {
  std::vector<std::vector<Index>> rows(static_cast<std::size_t>(n_experts));
  for (std::size_t t = 0; t < selected.size(); ++t)
    for (Index e : selected[t]) rows[static_cast<std::size_t>(e)].push_back(static_cast<Index>(t));
  return rows;
}

template <typename Scalar>
struct RoutingTrace {
  Var<Scalar> probs;                          // [T, E] full router distribution
  std::vector<std::vector<Index>> selected;  // per token, top-k experts
};

// Combines per-expert outputs: sum_e scatter(gate[:, e] * expert_e(x[rows_e])).
template <typename Scalar, typename ExpertFn>
Var<Scalar> combine_experts(const Var<Scalar>& input, const Var<Scalar>& gate,
                            const std::vector<std::vector<Index>>& selected, Index n_experts, Index out_cols,
                            ExpertFn&& expert) {
  const Index rows = input.value().rows();
  const auto routed = rows_per_expert(selected, n_experts);
  Var<Scalar> out;
  for (Index e = 0; e < n_experts; ++e) {
    const auto& idx = routed[static_cast<std::size_t>(e)];
    if (idx.empty()) continue;
    const Var<Scalar> y = expert(e, gather_rows(input, idx));
    const Var<Scalar> w = gather_rows(slice_cols(gate, e, 1), idx);
    const Var<Scalar> part = scatter_rows(scale_rows(y, w), idx, rows);
    out = out.defined() ? add(out, part) : part;
  }
  if (!out.defined()) out = Var<Scalar>::constant(Tensor<Scalar>(Shape{rows, out_cols}));
  return out;
}

// MoL given explicit routing probabilities (lets tests force one-hot routing).
template <typename Scalar>
Var<Scalar> mol_forward_with_probs(const Var<Scalar>& x, const MolLayer<Scalar>& layer,
                                   const FfnParams<Scalar>& shared, const Var<Scalar>& probs,
                                   RoutingTrace<Scalar>* trace = nullptr) {
  if (probs.value().rows() != x.value().rows() || probs.value().cols() != layer.n_experts()) {
    throw DimensionError("mol: routing probabilities " + shape_str(probs.shape()) + " for input " +
                         shape_str(x.shape()) + " and " + std::to_string(layer.n_experts()) + " experts");
  }
  std::vector<std::vector<Index>> selected;
  const Var<Scalar> gate = topk_gate(probs, layer.router.top_k, &selected);
  Var<Scalar> out = combine_experts(x, gate, selected, layer.n_experts(), x.value().cols(),
                                    [&](Index e, const Var<Scalar>& xe) {
                                      return ffn_forward(xe, shared, std::optional(layer.experts[e].delta()));
                                    });
  if (trace) {
    trace->probs = probs;
    trace->selected = std::move(selected);
  }
  return out;
}

// Per-token sparse Mixture of LoRAs on normalised input x [T, d]:
//   sum_{i in top-k} p_i/Z * FFN(x; shared + delta_i)
template <typename Scalar>
Var<Scalar> mol_forward(const Var<Scalar>& x, const MolLayer<Scalar>& layer, const FfnParams<Scalar>& shared,
                        RoutingTrace<Scalar>* trace = nullptr) {
  return mol_forward_with_probs(x, layer, shared, router_probabilities(x, layer.router), trace);
}

template <typename Scalar>
Var<Scalar> adapter_forward(const Var<Scalar>& y, const BottleneckAdapter<Scalar>& a) {
  return matmul(gelu(matmul(y, a.down)), a.up);
}

// Mixture of adapters after the FFN: y = FFN(x); y + sum_{top-k} w_i adapter_i(y).
// The router reads the same normalised input x as the FFN.
template <typename Scalar>
Var<Scalar> moa_forward_with_probs(const Var<Scalar>& x, const MoaLayer<Scalar>& layer,
                                   const FfnParams<Scalar>& shared, const Var<Scalar>& probs,
                                   RoutingTrace<Scalar>* trace = nullptr) {
  const Var<Scalar> y = ffn_forward(x, shared);
  std::vector<std::vector<Index>> selected;
  const Var<Scalar> gate = topk_gate(probs, layer.router.top_k, &selected);
  const Var<Scalar> mix = combine_experts(y, gate, selected, layer.n_experts(), y.value().cols(),
                                          [&](Index e, const Var<Scalar>& ye) {
                                            return adapter_forward(ye, layer.adapters[e]);
                                          });
  if (trace) {
    trace->probs = probs;
    trace->selected = std::move(selected);
  }
  return add(y, mix);
}

template <typename Scalar>
Var<Scalar> moa_forward(const Var<Scalar>& x, const MoaLayer<Scalar>& layer, const FfnParams<Scalar>& shared,
                        RoutingTrace<Scalar>* trace = nullptr) {
  return moa_forward_with_probs(x, layer, shared, router_probabilities(x, layer.router), trace);
}

// Dense W' = W + (alpha/r) A B for both FFN projections. W_gate is copied.
template <typename Scalar>
FfnParams<Scalar> lora_materialise(const FfnParams<Scalar>& shared, const LoraDelta<Scalar>& delta) {
  auto dense = [&](const Var<Scalar>& w, const Var<Scalar>& a, const Var<Scalar>& b) {
    Tensor<Scalar> out = w.value();
    out.matrix() += delta.scale * (a.value().matrix() * b.value().matrix());
    return Var<Scalar>::constant(std::move(out));
  };
  FfnParams<Scalar> p;
  p.w_down = dense(shared.w_down, delta.a1, delta.b1);
  p.w_up = dense(shared.w_up, delta.a2, delta.b2);
  if (shared.geglu()) p.w_gate = Var<Scalar>::constant(shared.w_gate.value());
  return p;
}

template <typename Scalar>
FfnParams<Scalar> lora_materialise(const FfnParams<Scalar>& shared, const LoraExpert<Scalar>& expert) {
  return lora_materialise(shared, expert.delta());
}

// Switch-style balance term E * sum_i f_i * P_i, where f_i is the fraction of
// routing slots assigned to expert i and P_i the mean router probability.
template <typename Scalar>
Var<Scalar> load_balance_loss(const Var<Scalar>& probs, const std::vector<std::vector<Index>>& selected) {
  const Index rows = probs.value().rows();
  const Index e = probs.value().cols();
  if (rows < 1 || static_cast<Index>(selected.size()) != rows) {
    throw DimensionError("load_balance_loss: " + std::to_string(selected.size()) + " selections for " +
                         shape_str(probs.shape()));
  }
  Tensor<Scalar> fraction(Shape{1, e});
  Index slots = 0;
  for (const auto& s : selected) {
    for (Index i : s) fraction[i] += 1;
    slots += static_cast<Index>(s.size());
  }
  fraction.data() /= static_cast<Scalar>(slots);
  return scale(sum(mul(mean_rows(probs), Var<Scalar>::constant(std::move(fraction)))), static_cast<Scalar>(e));
}

// Mean per-token entropy (nats) of router distributions.
template <typename Scalar>
Scalar routing_entropy(const Tensor<Scalar>& probs) {
  const auto p = probs.matrix();
  Scalar total = 0;
  for (Index t = 0; t < p.rows(); ++t)
    for (Index i = 0; i < p.cols(); ++i)
      if (p(t, i) > 0) total -= p(t, i) * std::log(p(t, i));
  return total / static_cast<Scalar>(p.rows());
}

}  // namespace mol
