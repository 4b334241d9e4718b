#include <catch2/catch_amalgamated.hpp>

#include "recttt/layers.hpp"

using namespace recttt;
using Catch::Approx;

TEST_CASE("conv2d basics") {
  SECTION("1x1 identity kernel reproduces the input") {
    Rng rng(50);
    Tensor x = rng.uniform_tensor({2, 3, 4, 4}, -1, 1);
    Tensor w = zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) w.data[std::size_t(c) * 3 + c] = 1.0f;
    Tensor out = conv2d_forward(x, w, zeros({3}), 1, 0);
    REQUIRE(bitwise_equal(out, x));
  }
  SECTION("zero input leaves only the bias") {
    Tensor w({2, 1, 3, 3});
    std::fill(w.data.begin(), w.data.end(), 0.37f);
    Tensor b({2}, {1.5f, -0.5f});
    Tensor out = conv2d_forward(zeros({1, 1, 5, 5}), w, b, 1, 1);
    for (int c = 0; c < 2; ++c)
      for (int p = 0; p < 25; ++p) REQUIRE(out.data[std::size_t(c) * 25 + p] == b.data[c]);
  }
  SECTION("3x3 ones kernel on a ones image counts the window overlap") {
    Tensor out = conv2d_forward(ones({1, 1, 3, 3}), ones({1, 1, 3, 3}), zeros({1}), 1, 1);
    // corners see 4 pixels, edges 6, the center all 9
    REQUIRE(out.data == std::vector<float>{4, 6, 4, 6, 9, 6, 4, 6, 4});
  }
  SECTION("output extent follows floor((H + 2p - k) / s) + 1") {
    Tensor out = conv2d_forward(zeros({1, 1, 5, 5}), zeros({1, 1, 3, 3}), zeros({1}), 2, 1);
    REQUIRE(out.shape == std::vector<int>{1, 1, 3, 3});
  }
  SECTION("channel mismatch rejected") {
    REQUIRE_THROWS_AS(conv2d_forward(zeros({1, 2, 4, 4}), zeros({1, 3, 3, 3}), zeros({1}), 1, 1),
                      ShapeError);
  }
  SECTION("even kernels rejected at construction") {
    Rng rng(51);
    REQUIRE_THROWS_AS(Conv2dParams::make(3, 4, 2, 1, rng), ShapeError);
  }
}

TEST_CASE("batchnorm modes") {
  Rng rng(52);
  SECTION("constant per-channel input normalizes to zero in train mode") {
    Tensor x({4, 2, 3, 3});
    for (int i = 0; i < 4; ++i)
      for (int c = 0; c < 2; ++c)
        for (int p = 0; p < 9; ++p) x.data[(std::size_t(i) * 2 + c) * 9 + p] = c ? 2.5f : -1.0f;
    Tensor rm = zeros({2}), rv = ones({2});
    Tensor sm, si;
    Tensor y = batchnorm_forward(x, ones({2}), zeros({2}), rm, rv, 0.1f, 1e-5f, BnMode::Train, sm, si);
    for (float v : y.data) REQUIRE(v == 0.0f);
    // running statistics moved toward the batch
    REQUIRE(rm.data[0] == Approx(-0.1f));
    REQUIRE(rm.data[1] == Approx(0.25f));
  }
  SECTION("eval mode with unit running stats is near identity") {
    Tensor x = rng.uniform_tensor({2, 3, 4, 4}, -1, 1);
    Tensor rm = zeros({3}), rv = ones({3});
    Tensor sm, si;
    Tensor y = batchnorm_forward(x, ones({3}), zeros({3}), rm, rv, 0.1f, 1e-5f, BnMode::Eval, sm, si);
    for (std::size_t i = 0; i < x.data.size(); ++i)
      REQUIRE(y.data[i] == Approx(x.data[i]).margin(1e-4));
  }
  SECTION("train-mode output is standardized per channel") {
    Tensor x = rng.uniform_tensor({8, 3, 5, 5}, -2, 3);
    Tensor rm = zeros({3}), rv = ones({3});
    Tensor sm, si;
    Tensor y = batchnorm_forward(x, ones({3}), zeros({3}), rm, rv, 0.1f, 1e-5f, BnMode::Train, sm, si);
    const int m = 8 * 5 * 5;
    for (int c = 0; c < 3; ++c) {
      double s = 0, sq = 0;
      for (int i = 0; i < 8; ++i)
        for (int p = 0; p < 25; ++p) {
          const double v = y.data[(std::size_t(i) * 3 + c) * 25 + p];
          s += v;
          sq += v * v;
        }
      const double mean = s / m;
      const double var = sq / m - mean * mean;
      REQUIRE(std::abs(mean) <= 1e-5);
      REQUIRE(std::abs(var - 1.0) <= 1e-3);
    }
  }
  SECTION("batch statistics need at least two samples") {
    Tensor rm = zeros({1}), rv = ones({1});
    Tensor sm, si;
    REQUIRE_THROWS_AS(batchnorm_forward(zeros({1, 1, 2, 2}), ones({1}), zeros({1}), rm, rv, 0.1f,
                                        1e-5f, BnMode::Train, sm, si),
                      ShapeError);
    // eval mode accepts single samples
    batchnorm_forward(zeros({1, 1, 2, 2}), ones({1}), zeros({1}), rm, rv, 0.1f, 1e-5f,
                      BnMode::Eval, sm, si);
  }
  SECTION("eval and batch-stats modes never touch running statistics") {
    Tensor x = rng.uniform_tensor({4, 2, 3, 3}, -1, 1);
    Tensor rm = rng.uniform_tensor({2}, -1, 1);
    Tensor rv = rng.uniform_tensor({2}, 0.5f, 2.0f);
    const Tensor rm0 = rm, rv0 = rv;
    Tensor sm, si;
    batchnorm_forward(x, ones({2}), zeros({2}), rm, rv, 0.1f, 1e-5f, BnMode::Eval, sm, si);
    REQUIRE(bitwise_equal(rm, rm0));
    REQUIRE(bitwise_equal(rv, rv0));
    batchnorm_forward(x, ones({2}), zeros({2}), rm, rv, 0.1f, 1e-5f, BnMode::BatchStats, sm, si);
    REQUIRE(bitwise_equal(rm, rm0));
    REQUIRE(bitwise_equal(rv, rv0));
  }
}

TEST_CASE("encoder pyramid") {
  Rng rng(53);
  BackboneDims dims;
  dims.stem_channels = 8;
  dims.block_channels = {12, 24, 48};
  Encoder enc = Encoder::make(dims, rng);

  SECTION("halving shapes per block on 32x32") {
    Graph g;
    TapeBindings tb;
    FeaturePyramid pyr = enc.forward(g, tb, g.leaf(zeros({2, 3, 32, 32})), BnMode::Eval);
    REQUIRE(pyr.size() == 3);
    REQUIRE(g.value(pyr[0]).shape == std::vector<int>{2, 12, 16, 16});
    REQUIRE(g.value(pyr[1]).shape == std::vector<int>{2, 24, 8, 8});
    REQUIRE(g.value(pyr[2]).shape == std::vector<int>{2, 48, 4, 4});
  }
  SECTION("indivisible spatial size rejected") {
    Graph g;
    TapeBindings tb;
    REQUIRE_THROWS_AS(enc.forward(g, tb, g.leaf(zeros({1, 3, 30, 30})), BnMode::Eval), ShapeError);
  }
  SECTION("eval forwards are deterministic") {
    Tensor x = rng.uniform_tensor({2, 3, 32, 32}, 0, 1);
    auto run = [&] {
      Graph g;
      TapeBindings tb;
      FeaturePyramid pyr = enc.forward(g, tb, g.leaf(x), BnMode::Eval);
      std::vector<Tensor> vals;
      for (Var v : pyr) vals.push_back(g.value(v));
      return vals;
    };
    auto a = run();
    auto b = run();
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(bitwise_equal(a[i], b[i]));
  }
}

TEST_CASE("decoder mirrors the encoder pyramid") {
  Rng rng(54);
  BackboneDims dims;
  dims.stem_channels = 8;
  dims.block_channels = {12, 24, 48};
  Encoder enc = Encoder::make(dims, rng);
  Bottleneck bneck = Bottleneck::make(dims, rng);
  Decoder dec = Decoder::make(dims, rng);

  Graph g;
  TapeBindings tb;
  FeaturePyramid ef = enc.forward(g, tb, g.leaf(zeros({2, 3, 32, 32})), BnMode::Eval);
  Var mid = bneck.forward(g, tb, ef.back(), BnMode::Eval);
  REQUIRE(g.value(mid).shape == g.value(ef.back()).shape);  // block-L shape preserved

  FeaturePyramid df = dec.forward(g, tb, mid, BnMode::Eval);
  REQUIRE(df.size() == ef.size());
  for (std::size_t l = 0; l < ef.size(); ++l)
    REQUIRE(g.value(df[l]).shape == g.value(ef[l]).shape);
  // beyond the 4x4 input scale the stages upsample to 8x8 then 16x16
  REQUIRE(g.value(df[1]).shape == std::vector<int>{2, 24, 8, 8});
  REQUIRE(g.value(df[0]).shape == std::vector<int>{2, 12, 16, 16});

  SECTION("frozen decoder repeats itself on identical input") {
    Tensor fl = rng.uniform_tensor({2, 48, 4, 4}, -1, 1);
    auto run = [&] {
      Graph g2;
      TapeBindings tb2;
      FeaturePyramid p = dec.forward(g2, tb2, g2.leaf(fl), BnMode::Eval);
      std::vector<Tensor> vals;
      for (Var v : p) vals.push_back(g2.value(v));
      return vals;
    };
    auto a = run();
    auto b = run();
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(bitwise_equal(a[i], b[i]));
  }
}

TEST_CASE("classifier head") {
  Rng rng(55);
  SECTION("zero weights give uniform softmax") {
    ClassifierHead head = ClassifierHead::make(6, 4, rng);
    std::fill(head.weight.value.data.begin(), head.weight.value.data.end(), 0.0f);
    std::fill(head.bias.value.data.begin(), head.bias.value.data.end(), 0.0f);
    Graph g;
    TapeBindings tb;
    Var logits = head.forward(g, tb, g.leaf(rng.uniform_tensor({3, 6, 4, 4}, -1, 1)));
    for (float v : g.value(logits).data) REQUIRE(v == 0.0f);
    for (float v : g.value(g.softmax(logits)).data) REQUIRE(v == Approx(0.25f));
  }
  SECTION("doubling features doubles logits with zero bias") {
    ClassifierHead head = ClassifierHead::make(5, 3, rng);
    std::fill(head.bias.value.data.begin(), head.bias.value.data.end(), 0.0f);
    Tensor f = rng.uniform_tensor({2, 5, 2, 2}, -1, 1);
    Graph g;
    TapeBindings tb;
    Tensor l1 = g.value(head.forward(g, tb, g.leaf(f)));
    Tensor l2 = g.value(head.forward(g, tb, g.leaf(scale(f, 2.0f))));
    for (std::size_t i = 0; i < l1.data.size(); ++i)
      REQUIRE(l2.data[i] == Approx(2.0f * l1.data[i]).margin(1e-5));
  }
  SECTION("logits match a direct pool-then-multiply recomputation") {
    ClassifierHead head = ClassifierHead::make(4, 3, rng);
    Tensor f = rng.uniform_tensor({2, 4, 3, 3}, -1, 1);
    Graph g;
    TapeBindings tb;
    Tensor got = g.value(head.forward(g, tb, g.leaf(f)));
    for (int i = 0; i < 2; ++i)
      for (int o = 0; o < 3; ++o) {
        double acc = head.bias.value.data[o];
        for (int c = 0; c < 4; ++c) {
          double pool = 0.0;
          for (int p = 0; p < 9; ++p) pool += f.data[(std::size_t(i) * 4 + c) * 9 + p];
          pool /= 9.0;
          acc += pool * head.weight.value.data[std::size_t(c) * 3 + o];
        }
        REQUIRE(got.data[std::size_t(i) * 3 + o] == Approx(acc).margin(1e-5));
      }
  }
}

TEST_CASE("freeze masks keep parameters untouched by sgd") {
  Rng rng(56);
  BackboneDims dims;
  dims.stem_channels = 4;
  dims.block_channels = {6, 8};
  Encoder enc = Encoder::make(dims, rng);
  set_trainable(enc, false);

  std::vector<Tensor> before;
  enc.visit(
      "enc", [&](const std::string&, Param& p) { before.push_back(p.value); },
      [](const std::string&, Tensor&) {});

  Graph g;
  TapeBindings tb;
  FeaturePyramid pyr = enc.forward(g, tb, g.leaf(rng.uniform_tensor({2, 3, 8, 8}, 0, 1)),
                                   BnMode::Eval);
  Sgd opt(0.5f);
  // nothing was bound trainable, so there is nothing to update
  REQUIRE(tb.items.empty());
  GradMap grads = g.backward(g.sum_all(pyr.back()));
  opt.step(tb, grads);

  std::size_t i = 0;
  enc.visit(
      "enc", [&](const std::string&, Param& p) { REQUIRE(bitwise_equal(p.value, before[i++])); },
      [](const std::string&, Tensor&) {});
}
