#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "recttt/losses.hpp"
#include "recttt/rng.hpp"

using namespace recttt;
using Catch::Approx;

namespace {

// Straight-line double recomputation, independent of the tape.
double cosine_loss_reference(const std::vector<Tensor>& enc, const std::vector<Tensor>& dec) {
  double total = 0.0;
  for (std::size_t l = 0; l < enc.size(); ++l) {
    double aa = 0, bb = 0, ab = 0;
    for (std::size_t i = 0; i < enc[l].data.size(); ++i) {
      aa += double(enc[l].data[i]) * enc[l].data[i];
      bb += double(dec[l].data[i]) * dec[l].data[i];
      ab += double(enc[l].data[i]) * dec[l].data[i];
    }
    total += 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
  }
  return total;
}

double ce_reference(const Tensor& logits, const std::vector<int>& labels) {
  const int n = logits.shape[0], c = logits.shape[1];
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data.data() + std::size_t(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, double(row[j]));
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    total += -(row[labels[i]] - mx - std::log(denom));
  }
  return total / n;
}

double kl_reference(const Tensor& p, const Tensor& q, double eps = 1e-8) {
  const int n = p.shape[0], c = p.shape[1];
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) {
      const double pv = p.data[std::size_t(i) * c + j];
      const double qv = std::max(double(q.data[std::size_t(i) * c + j]), eps);
      if (pv > 0.0) total += pv * (std::log(std::max(pv, eps)) - std::log(qv));
    }
  return total / n;
}

Tensor random_dist(Rng& rng, int n, int c) {
  Tensor t = rng.uniform_tensor({n, c}, 0.05f, 1.0f);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += t.data[std::size_t(i) * c + j];
    for (int j = 0; j < c; ++j)
      t.data[std::size_t(i) * c + j] = float(t.data[std::size_t(i) * c + j] / s);
  }
  return t;
}

std::vector<Var> leaves(Graph& g, const std::vector<Tensor>& ts, bool rg = false) {
  std::vector<Var> out;
  for (const Tensor& t : ts) out.push_back(g.leaf(t, rg));
  return out;
}

}  // namespace

TEST_CASE("global cosine loss analytic anchors") {
  Rng rng(31);
  SECTION("identical pyramids give exactly zero") {
    std::vector<Tensor> enc = {rng.uniform_tensor({2, 3, 4, 4}, -1, 1),
                               rng.uniform_tensor({2, 6, 2, 2}, -1, 1),
                               rng.uniform_tensor({12}, -1, 1)};
    Graph g;
    Var total = global_cosine_loss(g, leaves(g, enc), leaves(g, enc), true);
    REQUIRE(g.value(total).data[0] == 0.0f);
  }
  SECTION("negated pyramids give exactly 2L") {
    std::vector<Tensor> enc = {rng.uniform_tensor({8}, -1, 1), rng.uniform_tensor({5}, -1, 1)};
    std::vector<Tensor> dec = {scale(enc[0], -1.0f), scale(enc[1], -1.0f)};
    Graph g;
    Var total = global_cosine_loss(g, leaves(g, enc), leaves(g, dec), true);
    REQUIRE(g.value(total).data[0] == 4.0f);
  }
  SECTION("orthogonal single layer gives one") {
    Graph g;
    Var total = global_cosine_loss(g, {g.leaf(Tensor({2}, {1, 0}))}, {g.leaf(Tensor({2}, {0, 1}))},
                                   true);
    REQUIRE(g.value(total).data[0] == 1.0f);
  }
  SECTION("unequal depth and layer shape mismatch rejected") {
    Graph g;
    Var a = g.leaf(ones({3}));
    Var b = g.leaf(ones({4}));
    REQUIRE_THROWS_AS(global_cosine_loss(g, {a, a}, {a}, true), ShapeError);
    REQUIRE_THROWS_AS(global_cosine_loss(g, {a}, {b}, true), ShapeError);
  }
}

TEST_CASE("global cosine loss matches independent recomputation") {
  Rng rng(32);
  for (int t = 0; t < 100; ++t) {
    std::vector<Tensor> enc = {rng.uniform_tensor({6}, -1, 1), rng.uniform_tensor({10}, -1, 1)};
    std::vector<Tensor> dec = {rng.uniform_tensor({6}, -1, 1), rng.uniform_tensor({10}, -1, 1)};
    Graph g;
    Var total = global_cosine_loss(g, leaves(g, enc), leaves(g, dec), true);
    REQUIRE(g.value(total).data[0] == Approx(cosine_loss_reference(enc, dec)).margin(1e-6));
  }
}

TEST_CASE("global cosine loss is scale invariant") {
  Rng rng(33);
  std::vector<Tensor> enc = {rng.uniform_tensor({2, 4, 3, 3}, -1, 1),
                             rng.uniform_tensor({2, 8, 2, 2}, -1, 1)};
  std::vector<Tensor> dec = {rng.uniform_tensor({2, 4, 3, 3}, -1, 1),
                             rng.uniform_tensor({2, 8, 2, 2}, -1, 1)};
  Graph g;
  const float base = g.value(global_cosine_loss(g, leaves(g, enc), leaves(g, dec), true)).data[0];
  for (float c : {0.3f, 2.0f, 17.0f}) {
    std::vector<Tensor> dec_scaled = {scale(dec[0], c), scale(dec[1], c)};
    std::vector<Tensor> enc_scaled = {scale(enc[0], c), scale(enc[1], c)};
    Graph g2;
    REQUIRE(g2.value(global_cosine_loss(g2, leaves(g2, enc), leaves(g2, dec_scaled), true)).data[0] ==
            Approx(base).margin(1e-5));
    Graph g3;
    REQUIRE(g3.value(global_cosine_loss(g3, leaves(g3, enc_scaled), leaves(g3, dec), true)).data[0] ==
            Approx(base).margin(1e-5));
  }
}

TEST_CASE("blocked pyramid contributes exactly zero gradient") {
  Rng rng(34);
  Tensor w0 = rng.uniform_tensor({8}, 0.2f, 1.0f);
  Graph g;
  Var w = g.leaf(w0, true);
  // Parameter reachable only through the enc pyramid.
  Var enc = g.mul(w, g.leaf(rng.uniform_tensor({8}, 0.2f, 1.0f)));
  Var dec = g.leaf(rng.uniform_tensor({8}, 0.2f, 1.0f));
  GradMap grads = g.backward(global_cosine_loss(g, {enc}, {dec}, true));
  for (float v : grads.at(w).data) REQUIRE(v == 0.0f);
}

TEST_CASE("zero-norm layer is clamped and counted") {
  const long before = zero_norm_events().load();
  Graph g;
  Var e = g.leaf(zeros({4}));
  Var d = g.leaf(ones({4}));
  Var total = global_cosine_loss(g, {e}, {d}, true);
  REQUIRE(g.value(total).data[0] == 1.0f);  // cosine treated as 0
  REQUIRE(zero_norm_events().load() == before + 1);
}

TEST_CASE("cross entropy anchors and oracle") {
  SECTION("uniform logits give ln(C)") {
    Graph g;
    Var ce = cross_entropy(g, g.leaf(zeros({3, 4})), {0, 1, 3});
    REQUIRE(g.value(ce).data[0] == Approx(std::log(4.0)).margin(1e-6));
  }
  SECTION("near-certain correct logit is near zero") {
    Graph g;
    Var ce = cross_entropy(g, g.leaf(Tensor({1, 2}, {10.0f, -10.0f})), {0});
    REQUIRE(g.value(ce).data[0] >= 0.0f);
    REQUIRE(g.value(ce).data[0] <= 1e-4f);
  }
  SECTION("random batches match the reference") {
    Rng rng(35);
    for (int t = 0; t < 100; ++t) {
      Tensor logits = rng.uniform_tensor({4, 5}, -3.0f, 3.0f);
      std::vector<int> labels;
      for (int i = 0; i < 4; ++i) labels.push_back(rng.uniform_int(0, 4));
      Graph g;
      Var ce = cross_entropy(g, g.leaf(logits), labels);
      REQUIRE(g.value(ce).data[0] == Approx(ce_reference(logits, labels)).margin(1e-5));
      REQUIRE(g.value(ce).data[0] >= 0.0f);
    }
  }
  SECTION("label out of range rejected") {
    Graph g;
    REQUIRE_THROWS_AS(cross_entropy(g, g.leaf(zeros({2, 3})), {0, 3}), ShapeError);
    Graph g2;
    REQUIRE_THROWS_AS(cross_entropy(g2, g2.leaf(zeros({2, 3})), {-1, 0}), ShapeError);
  }
}

TEST_CASE("kl divergence anchors and oracle") {
  SECTION("identical distributions give exactly zero") {
    Rng rng(36);
    Tensor p = random_dist(rng, 3, 5);
    Graph g;
    REQUIRE(g.value(kl_divergence(g, g.leaf(p), g.leaf(p))).data[0] == 0.0f);
  }
  SECTION("point mass against uniform gives ln 2") {
    Graph g;
    Var kl = kl_divergence(g, g.leaf(Tensor({1, 2}, {1, 0})), g.leaf(Tensor({1, 2}, {0.5f, 0.5f})));
    REQUIRE(g.value(kl).data[0] == Approx(std::log(2.0)).margin(1e-6));
  }
  SECTION("random pairs match the reference and stay nonnegative") {
    Rng rng(37);
    for (int t = 0; t < 100; ++t) {
      Tensor p = random_dist(rng, 3, 4);
      Tensor q = random_dist(rng, 3, 4);
      Graph g;
      const float v = g.value(kl_divergence(g, g.leaf(p), g.leaf(q))).data[0];
      REQUIRE(v == Approx(kl_reference(p, q)).margin(1e-6));
      REQUIRE(v >= -1e-6f);       // Gibbs, up to float rounding
      if (t < 20) REQUIRE(v > 1e-4f);  // distinct random pairs are clearly apart
    }
  }
  SECTION("invalid rows rejected") {
    Graph g;
    Var bad = g.leaf(Tensor({1, 2}, {0.7f, 0.7f}));
    Var ok = g.leaf(Tensor({1, 2}, {0.5f, 0.5f}));
    REQUIRE_THROWS_AS(kl_divergence(g, bad, ok), ShapeError);
    REQUIRE_THROWS_AS(kl_divergence(g, ok, bad), ShapeError);
    Graph g2;
    Var neg = g2.leaf(Tensor({1, 2}, {1.5f, -0.5f}));
    REQUIRE_THROWS_AS(kl_divergence(g2, g2.leaf(Tensor({1, 2}, {0.5f, 0.5f})), neg), ShapeError);
  }
  SECTION("symmetrized form averages both directions") {
    Rng rng(38);
    Tensor p = random_dist(rng, 2, 4);
    Tensor q = random_dist(rng, 2, 4);
    Graph g;
    const float sym = g.value(kl_consistency(g, g.leaf(p), g.leaf(q), true)).data[0];
    REQUIRE(sym == Approx(0.5 * (kl_reference(p, q) + kl_reference(q, p))).margin(1e-6));
    Graph g2;
    const float one_dir = g2.value(kl_consistency(g2, g2.leaf(p), g2.leaf(q), false)).data[0];
    REQUIRE(one_dir == Approx(kl_reference(p, q)).margin(1e-6));
  }
}

TEST_CASE("train loss composition") {
  SECTION("all zero components give zero") {
    Graph g;
    Var z = g.leaf(scalar_tensor(0.0f));
    REQUIRE(g.value(train_loss(g, z, z, z, z)).data[0] == 0.0f);
  }
  SECTION("single-encoder form is ce + aux") {
    Graph g;
    Var ce = g.leaf(scalar_tensor(1.0f));
    Var aux = g.leaf(scalar_tensor(2.0f));
    REQUIRE(g.value(train_loss(g, ce, std::nullopt, aux, std::nullopt)).data[0] == 3.0f);
  }
  SECTION("ensemble form sums every term once") {
    Graph g;
    Var ce1 = g.leaf(scalar_tensor(1.0f));
    Var ce2 = g.leaf(scalar_tensor(0.25f));
    Var aux = g.leaf(scalar_tensor(2.0f));
    Var kl = g.leaf(scalar_tensor(0.5f));
    REQUIRE(g.value(train_loss(g, ce1, ce2, aux, kl)).data[0] == 3.75f);
  }
  SECTION("weights rescale their terms") {
    Graph g;
    Var ce = g.leaf(scalar_tensor(1.0f));
    Var aux = g.leaf(scalar_tensor(1.0f));
    Var kl = g.leaf(scalar_tensor(1.0f));
    REQUIRE(g.value(train_loss(g, ce, std::nullopt, aux, kl, {0.5f, 2.0f, 4.0f})).data[0] == 6.5f);
  }
  SECTION("gradient of the sum equals the sum of component gradients") {
    Rng rng(39);
    Tensor w0 = rng.uniform_tensor({6}, 0.2f, 1.0f);
    auto component_grads = [&](int which) {
      Graph g;
      Var w = g.leaf(w0, true);
      Var losses[3] = {g.dot(w, w), g.norm2(w), g.sum_all(g.mul(w, w))};
      return g.backward(losses[which]).at(w);
    };
    Graph g;
    Var w = g.leaf(w0, true);
    Var total = train_loss(g, g.dot(w, w), std::nullopt, g.norm2(w), g.sum_all(g.mul(w, w)));
    const Tensor combined = g.backward(total).at(w);
    Tensor expect = add(add(component_grads(0), component_grads(1)), component_grads(2));
    for (std::size_t i = 0; i < expect.data.size(); ++i)
      REQUIRE(combined.data[i] == Approx(expect.data[i]).margin(1e-5));
  }
}
