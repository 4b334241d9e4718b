#pragma once

#include <optional>
#include <string>
#include <vector>

#include "recttt/layers.hpp"
#include "recttt/losses.hpp"

namespace recttt {

// Cross-reconstruction test-time-training model: a frozen source-trained
// encoder, one or two trainable encoders (the second fed the horizontally
// flipped image), a shared bottleneck+decoder, and one classifier head per
// trainable encoder.
//
// Phase contract:
//   Train  — everything except the frozen encoder updates.
//   Adapt  — only the first adapt_depth residual blocks of the trainable
//            encoders update; bottleneck, decoder and heads are frozen, and
//            every batch starts from (and afterwards restores) the weights
//            captured when the phase was entered.
//   Infer  — nothing updates.

enum class Phase { Train, Adapt, Infer };

struct ModelConfig {
  BackboneDims dims;
  int classes = 4;
  int input_hw = 32;
  bool two_encoders = true;
  int adapt_depth = 3;
  bool kl_symmetric = true;
  bool aux_off = false;
  bool kl_off = false;
  LossWeights loss_weights;
};

struct Snapshot {
  std::vector<Tensor> tensors;
};

class RecTttModel {
 public:
  static RecTttModel make(const ModelConfig& cfg, Rng& rng) {
    if (cfg.adapt_depth < 1 || cfg.adapt_depth > cfg.dims.levels())
      throw ConfigError("adapt_depth must be in [1, " + std::to_string(cfg.dims.levels()) + "]");
    RecTttModel m;
    m.cfg_ = cfg;
    m.frozen_enc_ = Encoder::make(cfg.dims, rng);
    m.enc1_ = Encoder::make(cfg.dims, rng);
    m.head1_ = ClassifierHead::make(cfg.dims.feature_channels(), cfg.classes, rng);
    if (cfg.two_encoders) {
      m.enc2_ = Encoder::make(cfg.dims, rng);
      m.head2_ = ClassifierHead::make(cfg.dims.feature_channels(), cfg.classes, rng);
    }
    m.bottleneck_ = Bottleneck::make(cfg.dims, rng);
    m.decoder_ = Decoder::make(cfg.dims, rng);
    set_trainable(m.frozen_enc_, false);
    m.check_mirror_shapes();
    m.set_phase(Phase::Train);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  Phase phase() const { return phase_; }
  int adapt_depth() const { return cfg_.adapt_depth; }

  // Copies a source-pretrained backbone into the frozen encoder and both
  // trainable encoders (heads likewise); bottleneck and decoder keep their
  // fresh initialization.
  void init_from_pretrained(const Encoder& enc, const ClassifierHead& head) {
    frozen_enc_ = enc;
    enc1_ = enc;
    head1_ = head;
    if (cfg_.two_encoders) {
      enc2_ = enc;
      head2_ = head;
    }
    set_trainable(frozen_enc_, false);
    set_phase(phase_);
  }

  void set_adapt_depth(int depth) {
    if (depth < 1 || depth > cfg_.dims.levels())
      throw ConfigError("adapt_depth must be in [1, " + std::to_string(cfg_.dims.levels()) + "]");
    cfg_.adapt_depth = depth;
    if (phase_ == Phase::Adapt) apply_freeze_masks();
  }

  void set_phase(Phase p) {
    phase_ = p;
    apply_freeze_masks();
    if (p == Phase::Adapt) adapt_origin_ = snapshot();
  }

  // -- forward passes ------------------------------------------------------

  struct AuxStreams {
    Var loss;
    Var s1, s2, s3, s4;           // s3/s4 invalid when running single-encoder
    FeaturePyramid enc1_pyramid;  // kept for the classifier heads and diagnostics
    FeaturePyramid enc2_pyramid;
    FeaturePyramid frozen_pyramid;
  };

  // Four reconstruction streams through the shared bottleneck+decoder:
  //   s1: decode(enc1 f^L)   against frozen(x) pyramid
  //   s2: decode(frozen f^L) against enc1 pyramid
  //   s3/s4: the same pair on the flipped image with enc2.
  // The compared pyramid always sits behind stop-gradient, so s1/s3 steer the
  // trainable encoders (through the decoder) and s2/s4 steer the decoder.
  AuxStreams aux_forward(Graph& g, TapeBindings& tb, const Tensor& x, BnMode enc_mode,
                         BnMode dec_mode) {
    AuxStreams out;
    const Tensor x2 = hflip(x);
    FeaturePyramid e1 = enc1_.forward(g, tb, g.leaf(x), enc_mode);
    FeaturePyramid ef = frozen_enc_.forward(g, tb, g.leaf(x), BnMode::Eval);
    out.s1 = global_cosine_loss(g, ef, decode_stream(g, tb, e1.back(), dec_mode), true);
    out.s2 = global_cosine_loss(g, e1, decode_stream(g, tb, ef.back(), dec_mode), true);
    out.loss = g.add(out.s1, out.s2);
    if (cfg_.two_encoders) {
      FeaturePyramid e2 = enc2_->forward(g, tb, g.leaf(x2), enc_mode);
      FeaturePyramid ef2 = frozen_enc_.forward(g, tb, g.leaf(x2), BnMode::Eval);
      out.s3 = global_cosine_loss(g, ef2, decode_stream(g, tb, e2.back(), dec_mode), true);
      out.s4 = global_cosine_loss(g, e2, decode_stream(g, tb, ef2.back(), dec_mode), true);
      out.loss = g.add(out.loss, g.add(out.s3, out.s4));
      out.enc2_pyramid = e2;
    }
    out.enc1_pyramid = e1;
    out.frozen_pyramid = ef;
    return out;
  }

  struct TrainStepStats {
    double ce1 = 0, ce2 = 0, aux = 0, kl = 0, total = 0;
  };

  TrainStepStats train_step(const Tensor& x, const std::vector<int>& labels, Sgd& opt) {
    if (phase_ != Phase::Train) throw ConfigError("train_step: model not in Train phase");
    Graph g;
    TapeBindings tb;
    TrainStepStats st;

    Var aux;
    FeaturePyramid e1, e2;
    if (cfg_.aux_off) {
      e1 = enc1_.forward(g, tb, g.leaf(x), BnMode::Train);
      if (cfg_.two_encoders) e2 = enc2_->forward(g, tb, g.leaf(hflip(x)), BnMode::Train);
      aux = g.leaf(scalar_tensor(0.0f));
    } else {
      AuxStreams streams = aux_forward(g, tb, x, BnMode::Train, BnMode::Train);
      aux = streams.loss;
      e1 = streams.enc1_pyramid;
      e2 = streams.enc2_pyramid;
    }

    Var logits1 = head1_.forward(g, tb, e1.back());
    Var ce1 = cross_entropy(g, logits1, labels);
    std::optional<Var> ce2, kl;
    if (cfg_.two_encoders) {
      // Labels are flip-invariant by dataset construction.
      Var logits2 = head2_->forward(g, tb, e2.back());
      ce2 = cross_entropy(g, logits2, labels);
      if (!cfg_.kl_off)
        kl = kl_consistency(g, g.softmax(logits1), g.softmax(logits2), cfg_.kl_symmetric);
    }
    Var total = train_loss(g, ce1, ce2, aux, kl, cfg_.loss_weights);

    st.ce1 = g.value(ce1).data[0];
    st.ce2 = ce2 ? g.value(*ce2).data[0] : 0.0;
    st.aux = g.value(aux).data[0];
    st.kl = kl ? g.value(*kl).data[0] : 0.0;
    st.total = g.value(total).data[0];
    if (!std::isfinite(st.total))
      throw NumericError("train_step: non-finite loss (ce1=" + std::to_string(st.ce1) +
                         " aux=" + std::to_string(st.aux) + ")");

    GradMap grads = g.backward(total);
    opt.step(tb, grads);
    return st;
  }

  // -- test-time adaptation --------------------------------------------------

  struct AdaptOpts {
    int iterations = 20;
    float lr = 0.005f;
    float momentum = 0.0f;
    bool capture_features = false;  // pooled enc1 f^L before/after adaptation
    // Optional intermediate prediction marks (iteration counts <= iterations).
    // Because weights follow one deterministic trajectory, the snapshot at
    // mark t is bitwise the result a run with iterations = t would produce.
    std::vector<int> marks;
  };

  struct MarkRecord {
    int iteration = 0;
    Tensor ensemble_probs, single_probs;
    double aux = 0.0;
  };

  struct AdaptResult {
    Tensor ensemble_probs;  // [N, classes] at the final iterate
    Tensor single_probs;    // head1 path only
    std::vector<int> ensemble_pred, single_pred;
    double aux_pre = 0.0, aux_post = 0.0;
    Tensor features_pre, features_post;  // [N, ch] when captured
    std::vector<MarkRecord> marks;
  };

  // One batch of label-free adaptation: starting from the weights captured at
  // set_phase(Adapt), runs T auxiliary-loss SGD steps on the first
  // adapt_depth blocks of the trainable encoders, predicts with the adapted
  // weights, then restores the originals so batches stay independent.
  // Encoder batch-norm layers normalize by the test batch statistics during
  // the iterations; predictions use eval-mode normalization.
  AdaptResult adapt_batch(const Tensor& x, const AdaptOpts& opts) {
    if (phase_ != Phase::Adapt) throw ConfigError("adapt_batch: model not in Adapt phase");
    if (opts.iterations < 0) throw ConfigError("adapt_batch: negative iteration count");
    if (x.rank() != 4 || x.shape[0] < 1) throw ShapeError("adapt_batch: empty batch");

    AdaptResult res;
    if (opts.capture_features) res.features_pre = pooled_features(x);

    const Tensor x2 = hflip(x);
    ConstStream cs1, cs2;
    const bool need_aux = opts.iterations > 0 || x.shape[0] >= 2;
    if (need_aux) {
      // Frozen-encoder pyramids and their decoded streams are constant across
      // iterations; compute them once per batch.
      cs1 = make_const_stream(x);
      if (cfg_.two_encoders) cs2 = make_const_stream(x2);
    }
    auto aux_value = [&] {
      Graph g;
      TapeBindings tb;
      return static_cast<double>(g.value(adapt_aux(g, tb, x, x2, cs1, cs2)).data[0]);
    };
    auto record_mark = [&](int t) {
      for (int m : opts.marks)
        if (m == t) {
          MarkRecord rec;
          rec.iteration = t;
          rec.ensemble_probs = predict_ensemble(x);
          rec.single_probs = predict_single(x);
          rec.aux = need_aux ? aux_value() : 0.0;
          res.marks.push_back(std::move(rec));
          break;
        }
    };

    record_mark(0);
    if (opts.iterations > 0) {
      Sgd opt(opts.lr, opts.momentum);
      for (int t = 1; t <= opts.iterations; ++t) {
        Graph g;
        TapeBindings tb;
        Var aux = adapt_aux(g, tb, x, x2, cs1, cs2);
        if (t == 1) res.aux_pre = g.value(aux).data[0];
        if (!std::isfinite(g.value(aux).data[0]))
          throw NumericError("adapt_batch: non-finite auxiliary loss");
        GradMap grads = g.backward(aux);
        opt.step(tb, grads);
        record_mark(t);
      }
      res.aux_post = aux_value();
    } else if (need_aux) {
      res.aux_pre = res.aux_post = aux_value();
    }

    res.ensemble_probs = predict_ensemble(x);
    res.single_probs = predict_single(x);
    res.ensemble_pred = argmax_rows(res.ensemble_probs);
    res.single_pred = argmax_rows(res.single_probs);
    if (opts.capture_features) res.features_post = pooled_features(x);

    restore(adapt_origin_);
    return res;
  }

  // -- inference -------------------------------------------------------------

  // Average of softmax(head1(enc1(x))) and softmax(head2(enc2(hflip(x)))).
  // Uses current weights, mutates nothing. Eval-mode batch norm by default;
  // BatchStats normalizes by the test batch without touching running
  // statistics, which is exactly the PTBN baseline's forward.
  Tensor predict_ensemble(const Tensor& x, BnMode mode = BnMode::Eval) {
    Tensor p1 = head_probs(x, enc1_, head1_, /*flip=*/false, mode);
    if (!cfg_.two_encoders) return p1;
    Tensor p2 = head_probs(x, *enc2_, *head2_, /*flip=*/true, mode);
    return scale(add(p1, p2), 0.5f);
  }

  Tensor predict_single(const Tensor& x, BnMode mode = BnMode::Eval) {
    return head_probs(x, enc1_, head1_, false, mode);
  }

  // Argmax per row, ties broken toward the lowest class index.
  static std::vector<int> argmax_rows(const Tensor& probs) {
    std::vector<int> out(probs.shape[0]);
    const int c = probs.shape[1];
    for (int i = 0; i < probs.shape[0]; ++i) {
      const float* row = probs.data.data() + static_cast<std::size_t>(i) * c;
      int best = 0;
      for (int j = 1; j < c; ++j)
        if (row[j] > row[best]) best = j;
      out[i] = best;
    }
    return out;
  }

  // Globally pooled enc1 f^L, eval mode: one row of ch values per sample.
  Tensor pooled_features(const Tensor& x) {
    Graph g;
    TapeBindings tb;
    FeaturePyramid pyr = enc1_.forward(g, tb, g.leaf(x), BnMode::Eval);
    const Tensor& fl = g.value(pyr.back());
    Var pooled = g.avgpool2d(pyr.back(), fl.shape[2], 1);
    return Tensor({fl.shape[0], fl.shape[1]}, g.value(pooled).data);
  }

  // -- snapshot / enumeration ------------------------------------------------

  template <class P, class S>
  void visit(P&& on_param, S&& on_state) {
    frozen_enc_.visit("frozen_encoder", on_param, on_state);
    enc1_.visit("encoder1", on_param, on_state);
    bottleneck_.visit("bottleneck", on_param, on_state);
    decoder_.visit("decoder", on_param, on_state);
    head1_.visit("head1", on_param, on_state);
    if (cfg_.two_encoders) {
      enc2_->visit("encoder2", on_param, on_state);
      head2_->visit("head2", on_param, on_state);
    }
  }

  // Copies of every parameter and batch-norm statistic outside the frozen
  // encoder; restore() brings them back bitwise.
  Snapshot snapshot() {
    Snapshot s;
    visit_mutable([&](const std::string&, Param& p) { s.tensors.push_back(p.value); },
                  [&](const std::string&, Tensor& t) { s.tensors.push_back(t); });
    return s;
  }

  void restore(const Snapshot& s) {
    std::size_t i = 0;
    visit_mutable(
        [&](const std::string&, Param& p) {
          if (i >= s.tensors.size()) throw ShapeError("restore: snapshot too small");
          p.value = s.tensors[i++];
        },
        [&](const std::string&, Tensor& t) {
          if (i >= s.tensors.size()) throw ShapeError("restore: snapshot too small");
          t = s.tensors[i++];
        });
    if (i != s.tensors.size()) throw ShapeError("restore: snapshot size mismatch");
  }

  Encoder& encoder1() { return enc1_; }
  Encoder& encoder2() { return *enc2_; }
  Encoder& frozen_encoder() { return frozen_enc_; }
  Bottleneck& bottleneck() { return bottleneck_; }
  Decoder& decoder() { return decoder_; }
  ClassifierHead& head1() { return head1_; }
  ClassifierHead& head2() { return *head2_; }

 private:
  // Non-frozen modules only, fixed order shared by snapshot/restore.
  template <class P, class S>
  void visit_mutable(P&& on_param, S&& on_state) {
    enc1_.visit("encoder1", on_param, on_state);
    bottleneck_.visit("bottleneck", on_param, on_state);
    decoder_.visit("decoder", on_param, on_state);
    head1_.visit("head1", on_param, on_state);
    if (cfg_.two_encoders) {
      enc2_->visit("encoder2", on_param, on_state);
      head2_->visit("head2", on_param, on_state);
    }
  }

  void apply_freeze_masks() {
    set_trainable(frozen_enc_, false);
    const bool train = phase_ == Phase::Train;
    set_trainable(enc1_, train);
    set_trainable(bottleneck_, train);
    set_trainable(decoder_, train);
    set_trainable(head1_, train);
    if (cfg_.two_encoders) {
      set_trainable(*enc2_, train);
      set_trainable(*head2_, train);
    }
    if (phase_ == Phase::Adapt) {
      for (int b = 0; b < cfg_.adapt_depth; ++b) {
        set_trainable(enc1_.blocks[b], true);
        if (cfg_.two_encoders) set_trainable(enc2_->blocks[b], true);
      }
    }
  }

  FeaturePyramid decode_stream(Graph& g, TapeBindings& tb, Var fL, BnMode mode) {
    return decoder_.forward(g, tb, bottleneck_.forward(g, tb, fL, mode), mode);
  }

  // Per-batch constants of the adaptation loop: the frozen-encoder pyramid
  // and the decoded stream computed from it (decoder frozen at adapt time).
  struct ConstStream {
    std::vector<Tensor> frozen_pyramid;
    std::vector<Tensor> decoded_from_frozen;
  };

  ConstStream make_const_stream(const Tensor& img) {
    Graph g;
    TapeBindings tb;
    ConstStream cs;
    FeaturePyramid ef = frozen_enc_.forward(g, tb, g.leaf(img), BnMode::Eval);
    FeaturePyramid df = decode_stream(g, tb, ef.back(), BnMode::Eval);
    for (Var v : ef) cs.frozen_pyramid.push_back(g.value(v));
    for (Var v : df) cs.decoded_from_frozen.push_back(g.value(v));
    return cs;
  }

  Var adapt_aux(Graph& g, TapeBindings& tb, const Tensor& x, const Tensor& x2,
                const ConstStream& cs1, const ConstStream& cs2) {
    auto leaves = [&](const std::vector<Tensor>& ts) {
      FeaturePyramid p;
      for (const Tensor& t : ts) p.push_back(g.leaf(t));
      return p;
    };
    FeaturePyramid e1 = enc1_.forward(g, tb, g.leaf(x), BnMode::BatchStats);
    FeaturePyramid d1 = decode_stream(g, tb, e1.back(), BnMode::Eval);
    Var aux = g.add(global_cosine_loss(g, leaves(cs1.frozen_pyramid), d1, true),
                    global_cosine_loss(g, e1, leaves(cs1.decoded_from_frozen), true));
    if (cfg_.two_encoders) {
      FeaturePyramid e2 = enc2_->forward(g, tb, g.leaf(x2), BnMode::BatchStats);
      FeaturePyramid d2 = decode_stream(g, tb, e2.back(), BnMode::Eval);
      aux = g.add(aux, g.add(global_cosine_loss(g, leaves(cs2.frozen_pyramid), d2, true),
                             global_cosine_loss(g, e2, leaves(cs2.decoded_from_frozen), true)));
    }
    return aux;
  }

  Tensor head_probs(const Tensor& x, Encoder& enc, ClassifierHead& head, bool flip, BnMode mode) {
    Graph g;
    TapeBindings tb;
    FeaturePyramid pyr = enc.forward(g, tb, g.leaf(flip ? hflip(x) : x), mode);
    return g.value(g.softmax(head.forward(g, tb, pyr.back())));
  }

  // Decoder output l must match encoder feature f^l exactly, or the layerwise
  // cosine loss is ill-defined; verified once on a dummy input.
  void check_mirror_shapes() {
    Graph g;
    TapeBindings tb;
    Tensor dummy = zeros({1, cfg_.dims.in_channels, cfg_.input_hw, cfg_.input_hw});
    FeaturePyramid ef = frozen_enc_.forward(g, tb, g.leaf(dummy), BnMode::Eval);
    FeaturePyramid df = decode_stream(g, tb, ef.back(), BnMode::Eval);
    if (ef.size() != df.size()) throw ShapeError("model: pyramid depth mismatch");
    for (std::size_t l = 0; l < ef.size(); ++l)
      if (g.value(ef[l]).shape != g.value(df[l]).shape)
        throw ShapeError("model: decoder output " + std::to_string(l + 1) + " shape " +
                         g.value(df[l]).shape_str() + " does not mirror encoder feature " +
                         g.value(ef[l]).shape_str());
  }

  ModelConfig cfg_;
  Phase phase_ = Phase::Train;
  Encoder frozen_enc_, enc1_;
  std::optional<Encoder> enc2_;
  Bottleneck bottleneck_;
  Decoder decoder_;
  ClassifierHead head1_;
  std::optional<ClassifierHead> head2_;
  Snapshot adapt_origin_;
};

}  // namespace recttt
