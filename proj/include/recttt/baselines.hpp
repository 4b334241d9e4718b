#pragma once

#include <optional>
#include <string>
#include <vector>

#include "recttt/data.hpp"
#include "recttt/model.hpp"

namespace recttt {

// Reference adaptation methods the cross-reconstruction approach is compared
// against: the unadapted source model, batch-statistics replacement (PTBN),
// and a single-encoder TTT variant built on the negative-cosine projector /
// predictor loss. All of them consume the same batches in the same order as
// the main method and none reads a label at adaptation time.

enum class BaselineKind { Source, Ptbn, SimsiamTtt };

struct BaselineEval {
  double accuracy = 0.0;  // percent
  int total = 0;
};

inline double accuracy_percent(const std::vector<int>& pred, const std::vector<int>& labels) {
  int correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == labels[i]) correct++;
  return pred.empty() ? 0.0 : 100.0 * correct / static_cast<double>(pred.size());
}

// Ensemble predictions with zero adaptation.
inline BaselineEval eval_source(RecTttModel& model, const std::vector<Batch>& batches) {
  BaselineEval out;
  int correct = 0;
  for (const Batch& b : batches) {
    std::vector<int> pred = RecTttModel::argmax_rows(model.predict_ensemble(b.x));
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == b.labels[i]) correct++;
    out.total += static_cast<int>(pred.size());
  }
  out.accuracy = out.total ? 100.0 * correct / out.total : 0.0;
  return out;
}

// Per batch, normalization statistics are recomputed from the test batch
// (full replacement, no parameter updates) and discarded afterwards.
inline BaselineEval eval_ptbn(RecTttModel& model, const std::vector<Batch>& batches) {
  BaselineEval out;
  int correct = 0;
  for (const Batch& b : batches) {
    if (b.x.shape[0] < 2)
      throw ShapeError("eval_ptbn: batch statistics require batch size >= 2");
    std::vector<int> pred =
        RecTttModel::argmax_rows(model.predict_ensemble(b.x, BnMode::BatchStats));
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (pred[i] == b.labels[i]) correct++;
    out.total += static_cast<int>(pred.size());
  }
  out.accuracy = out.total ? 100.0 * correct / out.total : 0.0;
  return out;
}

// 0.5 * (-cos(p1, sg(z2)) - cos(p2, sg(z1))): maximal agreement gives -1.
// z are projector outputs, p predictor outputs; the barrier sits on the
// target branch.
template <class T>
Var simsiam_loss(BasicGraph<T>& g, Var z1, Var z2, Var p1, Var p2) {
  Var c1 = g.cosine_sim(p1, g.stop_gradient(z2), 1e-8f);
  Var c2 = g.cosine_sim(p2, g.stop_gradient(z1), 1e-8f);
  return g.scale(g.add(c1, c2), -0.5f);
}

// Single encoder, two-layer projector and predictor over the pooled f^L,
// plus a classifier head. Trains with cross-entropy + the agreement loss on
// (image, flipped image) views; adapts with the agreement loss only under
// the same per-batch reset discipline as the main method.
class SimSiamModel {
 public:
  struct Config {
    BackboneDims dims;
    int classes = 4;
    int input_hw = 32;
    int adapt_depth = 3;
    int proj_hidden = 0;  // 0: feature_channels()
    int proj_out = 0;     // 0: feature_channels() / 2
    int pred_hidden = 0;  // 0: proj_out
  };

  static SimSiamModel make(const Config& cfg, Rng& rng) {
    SimSiamModel m;
    m.cfg_ = cfg;
    const int ch = cfg.dims.feature_channels();
    const int ph = cfg.proj_hidden > 0 ? cfg.proj_hidden : ch;
    const int po = cfg.proj_out > 0 ? cfg.proj_out : std::max(4, ch / 2);
    const int qh = cfg.pred_hidden > 0 ? cfg.pred_hidden : po;
    m.enc_ = Encoder::make(cfg.dims, rng);
    m.head_ = ClassifierHead::make(ch, cfg.classes, rng);
    m.proj1_ = linear_params(ch, ph, rng);
    m.proj2_ = linear_params(ph, po, rng);
    m.pred1_ = linear_params(po, qh, rng);
    m.pred2_ = linear_params(qh, po, rng);
    m.set_phase(Phase::Train);
    return m;
  }

  const Config& config() const { return cfg_; }
  Encoder& encoder() { return enc_; }
  ClassifierHead& head() { return head_; }

  void set_phase(Phase p) {
    phase_ = p;
    const bool train = p == Phase::Train;
    set_trainable(enc_, train);
    set_trainable(head_, train);
    for (Param* prm : head_params()) prm->trainable = train;
    if (p == Phase::Adapt) {
      const int depth = std::min(cfg_.adapt_depth, static_cast<int>(enc_.blocks.size()));
      for (int b = 0; b < depth; ++b) set_trainable(enc_.blocks[b], true);
      origin_ = snapshot();
    }
  }

  struct TrainStats {
    double ce = 0, agree = 0, total = 0;
  };

  TrainStats train_step(const Tensor& x, const std::vector<int>& labels, Sgd& opt) {
    if (phase_ != Phase::Train) throw ConfigError("simsiam train_step: not in Train phase");
    Graph g;
    TapeBindings tb;
    FeaturePyramid f1 = enc_.forward(g, tb, g.leaf(x), BnMode::Train);
    FeaturePyramid f2 = enc_.forward(g, tb, g.leaf(hflip(x)), BnMode::Train);
    Var z1 = project(g, tb, pooled(g, f1.back()));
    Var z2 = project(g, tb, pooled(g, f2.back()));
    Var agree = simsiam_loss(g, z1, z2, predictor(g, tb, z1), predictor(g, tb, z2));
    Var ce = cross_entropy(g, head_.forward(g, tb, f1.back()), labels);
    Var total = g.add(ce, agree);

    TrainStats st;
    st.ce = g.value(ce).data[0];
    st.agree = g.value(agree).data[0];
    st.total = g.value(total).data[0];
    if (!std::isfinite(st.total)) throw NumericError("simsiam train_step: non-finite loss");
    opt.step(tb, g.backward(total));
    return st;
  }

  struct AdaptResult {
    Tensor probs;
    std::vector<int> pred;
    double agree_pre = 0, agree_post = 0;
  };

  AdaptResult adapt_batch(const Tensor& x, int iterations, float lr) {
    if (phase_ != Phase::Adapt) throw ConfigError("simsiam adapt_batch: not in Adapt phase");
    if (iterations < 0) throw ConfigError("simsiam adapt_batch: negative iteration count");
    AdaptResult res;
    Sgd opt(lr);
    const Tensor x2 = hflip(x);
    for (int t = 1; t <= iterations; ++t) {
      Graph g;
      TapeBindings tb;
      Var agree = adapt_loss(g, tb, x, x2);
      if (t == 1) res.agree_pre = g.value(agree).data[0];
      opt.step(tb, g.backward(agree));
    }
    if (iterations > 0) {
      Graph g;
      TapeBindings tb;
      res.agree_post = g.value(adapt_loss(g, tb, x, x2)).data[0];
    }
    res.probs = predict(x);
    res.pred = RecTttModel::argmax_rows(res.probs);
    restore(origin_);
    return res;
  }

  Tensor predict(const Tensor& x) {
    Graph g;
    TapeBindings tb;
    FeaturePyramid pyr = enc_.forward(g, tb, g.leaf(x), BnMode::Eval);
    return g.value(g.softmax(head_.forward(g, tb, pyr.back())));
  }

  template <class P, class S>
  void visit(P&& on_param, S&& on_state) {
    enc_.visit("encoder", on_param, on_state);
    head_.visit("head", on_param, on_state);
    const char* names[8] = {"proj1.weight", "proj1.bias", "proj2.weight", "proj2.bias",
                            "pred1.weight", "pred1.bias", "pred2.weight", "pred2.bias"};
    Param* ps[8] = {&proj1_.w, &proj1_.b, &proj2_.w, &proj2_.b,
                    &pred1_.w, &pred1_.b, &pred2_.w, &pred2_.b};
    for (int i = 0; i < 8; ++i) on_param(std::string("simsiam.") + names[i], *ps[i]);
  }

  Snapshot snapshot() {
    Snapshot s;
    visit([&](const std::string&, Param& p) { s.tensors.push_back(p.value); },
          [&](const std::string&, Tensor& t) { s.tensors.push_back(t); });
    return s;
  }

  void restore(const Snapshot& s) {
    std::size_t i = 0;
    visit([&](const std::string&, Param& p) { p.value = s.tensors.at(i++); },
          [&](const std::string&, Tensor& t) { t = s.tensors.at(i++); });
    if (i != s.tensors.size()) throw ShapeError("simsiam restore: snapshot size mismatch");
  }

 private:
  struct LinearParams {
    Param w, b;
  };

  static LinearParams linear_params(int in, int out, Rng& rng) {
    LinearParams l;
    l.w.value = rng.normal_tensor({in, out}, 0.0f, std::sqrt(2.0f / in));
    l.b.value = zeros({out});
    return l;
  }

  std::vector<Param*> head_params() {
    return {&proj1_.w, &proj1_.b, &proj2_.w, &proj2_.b, &pred1_.w, &pred1_.b, &pred2_.w, &pred2_.b};
  }

  Var pooled(Graph& g, Var fl) {
    const Tensor& v = g.value(fl);
    Var p = g.avgpool2d(fl, v.shape[2], 1);
    return g.reshape(p, {v.shape[0], v.shape[1]});
  }

  Var project(Graph& g, TapeBindings& tb, Var x) {
    Var h = g.relu(g.linear(x, tb.bind(g, proj1_.w), tb.bind(g, proj1_.b)));
    return g.linear(h, tb.bind(g, proj2_.w), tb.bind(g, proj2_.b));
  }

  Var predictor(Graph& g, TapeBindings& tb, Var z) {
    Var h = g.relu(g.linear(z, tb.bind(g, pred1_.w), tb.bind(g, pred1_.b)));
    return g.linear(h, tb.bind(g, pred2_.w), tb.bind(g, pred2_.b));
  }

  Var adapt_loss(Graph& g, TapeBindings& tb, const Tensor& x, const Tensor& x2) {
    FeaturePyramid f1 = enc_.forward(g, tb, g.leaf(x), BnMode::BatchStats);
    FeaturePyramid f2 = enc_.forward(g, tb, g.leaf(x2), BnMode::BatchStats);
    Var z1 = project(g, tb, pooled(g, f1.back()));
    Var z2 = project(g, tb, pooled(g, f2.back()));
    return simsiam_loss(g, z1, z2, predictor(g, tb, z1), predictor(g, tb, z2));
  }

  Config cfg_;
  Phase phase_ = Phase::Train;
  Encoder enc_;
  ClassifierHead head_;
  LinearParams proj1_, proj2_, pred1_, pred2_;
  Snapshot origin_;
};

}  // namespace recttt
