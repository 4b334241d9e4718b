#pragma once

#include <atomic>
#include <optional>
#include <vector>

#include "recttt/autodiff.hpp"

namespace recttt {

// Counts cosine-loss layers whose norm product hit the denominator clamp
// (a layer of exact zeros yields cosine 0, i.e. loss term 1, instead of a
// division error; the counter makes that visible in diagnostics).
inline std::atomic<long>& zero_norm_events() {
  static std::atomic<long> n{0};
  return n;
}

// Sum over layers of 1 - <sg(e_l), d_l> / (||e_l|| * ||d_l||), each layer
// flattened before the cosine. With block_enc_grad the first pyramid sits
// behind a stop-gradient barrier, so the loss only steers the decoder-side
// path. Value range is [0, 2L].
template <class T>
Var global_cosine_loss(BasicGraph<T>& g, const std::vector<Var>& enc,
                       const std::vector<Var>& dec, bool block_enc_grad,
                       float denom_eps = 1e-8f) {
  if (enc.empty() || enc.size() != dec.size())
    throw ShapeError("global_cosine_loss: pyramids must have equal, nonzero depth");
  Var one = g.leaf(scalar_tensor(T(1)));
  Var total;
  for (std::size_t l = 0; l < enc.size(); ++l) {
    if (g.value(enc[l]).shape != g.value(dec[l]).shape)
      throw ShapeError("global_cosine_loss: layer " + std::to_string(l) + " shape mismatch " +
                       g.value(enc[l]).shape_str() + " vs " + g.value(dec[l]).shape_str());
    Var e = g.flatten(enc[l]);
    if (block_enc_grad) e = g.stop_gradient(e);
    Var d = g.flatten(dec[l]);
    if (recttt::norm2(g.value(e)) * recttt::norm2(g.value(d)) <= static_cast<double>(denom_eps))
      zero_norm_events().fetch_add(1);
    Var term = g.sub(one, g.cosine_sim(e, d, denom_eps));
    total = total.valid() ? g.add(total, term) : term;
  }
  return total;
}

// Mean over the batch of -log softmax(logits)[label].
template <class T>
Var cross_entropy(BasicGraph<T>& g, Var logits, const std::vector<int>& labels) {
  return g.nll(g.log_softmax(logits), labels);
}

template <class T>
void require_prob_rows(const BasicTensor<T>& t, const char* who) {
  if (t.rank() != 2) throw ShapeError(std::string(who) + ": expects [batch, classes]");
  const int n = t.shape[0], c = t.shape[1];
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      const T v = t.data[static_cast<std::size_t>(i) * c + j];
      if (v < T(-1e-6)) throw ShapeError(std::string(who) + ": negative probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-4)
      throw ShapeError(std::string(who) + ": row " + std::to_string(i) + " sums to " +
                       std::to_string(s) + ", not 1");
  }
}

// Mean over the batch of sum_k p_k log(p_k / q_k); q (and p inside the log)
// clamped below at eps so zero entries stay finite. p_k = 0 terms contribute
// exactly zero.
template <class T>
Var kl_divergence(BasicGraph<T>& g, Var p, Var q, float eps = 1e-8f) {
  const BasicTensor<T>& pv = g.value(p);
  const BasicTensor<T>& qv = g.value(q);
  require_same_shape(pv, qv, "kl_divergence");
  require_prob_rows(pv, "kl_divergence(p)");
  require_prob_rows(qv, "kl_divergence(q)");
  Var log_ratio = g.sub(g.log(p, eps), g.log(q, eps));
  Var per_elem = g.mul(p, log_ratio);
  return g.scale(g.sum_all(per_elem), 1.0f / static_cast<float>(pv.shape[0]));
}

// 0.5 * (KL(p||q) + KL(q||p)) by default; the one-directional form is kept
// because the reference formulation does not fix which predictor plays p.
template <class T>
Var kl_consistency(BasicGraph<T>& g, Var p, Var q, bool symmetric) {
  if (!symmetric) return kl_divergence(g, p, q);
  return g.scale(g.add(kl_divergence(g, p, q), kl_divergence(g, q, p)), 0.5f);
}

struct LossWeights {
  float ce = 1.0f;
  float aux = 1.0f;
  float kl = 1.0f;
};

// Joint objective: w_ce * sum(ce) + w_aux * aux + w_kl * kl, with the kl
// term absent in the single-encoder form.
template <class T>
Var train_loss(BasicGraph<T>& g, Var ce1, std::optional<Var> ce2, Var aux,
               std::optional<Var> kl, const LossWeights& w = {}) {
  Var ce_sum = ce2 ? g.add(ce1, *ce2) : ce1;
  Var total = g.add(g.scale(ce_sum, w.ce), g.scale(aux, w.aux));
  if (kl) total = g.add(total, g.scale(*kl, w.kl));
  return total;
}

}  // namespace recttt
