#pragma once

#include <string>
#include <vector>

#include "recttt/autodiff.hpp"
#include "recttt/rng.hpp"

namespace recttt {

// Convolutional building blocks. Each module owns its Params, records its
// forward onto a Graph through TapeBindings, and exposes visit() so the
// harness can enumerate parameters and batch-norm state by stable names
// (checkpointing, snapshots, freeze masks).

struct Conv2dParams {
  Param weight;  // [out_ch, in_ch, kh, kw]
  Param bias;    // [out_ch]
  int stride = 1;
  int pad = 0;

  // 3x3 ("same") or 1x1 projection; odd kernels only, pad = (k-1)/2.
  static Conv2dParams make(int in_ch, int out_ch, int k, int stride, Rng& rng) {
    if (k % 2 == 0) throw ShapeError("conv kernel extent must be odd");
    Conv2dParams c;
    const float std = std::sqrt(2.0f / (static_cast<float>(in_ch) * k * k));
    c.weight.value = rng.normal_tensor({out_ch, in_ch, k, k}, 0.0f, std);
    c.bias.value = zeros({out_ch});
    c.stride = stride;
    c.pad = (k - 1) / 2;
    return c;
  }

  Var forward(Graph& g, TapeBindings& tb, Var x) {
    return g.conv2d(x, tb.bind(g, weight), tb.bind(g, bias), stride, pad);
  }

  template <class P, class S>
  void visit(const std::string& prefix, P&& on_param, S&& on_state) {
    on_param(prefix + ".weight", weight);
    on_param(prefix + ".bias", bias);
    (void)on_state;
  }
};

struct BatchNormParams {
  Param gamma, beta;
  Tensor running_mean, running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  static BatchNormParams make(int ch) {
    BatchNormParams b;
    b.gamma.value = ones({ch});
    b.beta.value = zeros({ch});
    b.running_mean = zeros({ch});
    b.running_var = ones({ch});
    return b;
  }

  Var forward(Graph& g, TapeBindings& tb, Var x, BnMode mode) {
    return g.batchnorm(x, tb.bind(g, gamma), tb.bind(g, beta), running_mean, running_var,
                       momentum, eps, mode);
  }

  template <class P, class S>
  void visit(const std::string& prefix, P&& on_param, S&& on_state) {
    on_param(prefix + ".gamma", gamma);
    on_param(prefix + ".beta", beta);
    on_state(prefix + ".running_mean", running_mean);
    on_state(prefix + ".running_var", running_var);
  }
};

// conv-bn-relu, conv-bn plus (projected) identity, relu.
struct ResidualBlock {
  Conv2dParams conv1, conv2;
  BatchNormParams bn1, bn2;
  bool projected = false;  // 1x1 conv on the skip when shape changes
  Conv2dParams skip_conv;
  BatchNormParams skip_bn;

  static ResidualBlock make(int in_ch, int out_ch, int stride, Rng& rng) {
    ResidualBlock b;
    b.conv1 = Conv2dParams::make(in_ch, out_ch, 3, stride, rng);
    b.bn1 = BatchNormParams::make(out_ch);
    b.conv2 = Conv2dParams::make(out_ch, out_ch, 3, 1, rng);
    b.bn2 = BatchNormParams::make(out_ch);
    b.projected = (in_ch != out_ch || stride != 1);
    if (b.projected) {
      b.skip_conv = Conv2dParams::make(in_ch, out_ch, 1, stride, rng);
      b.skip_bn = BatchNormParams::make(out_ch);
    }
    return b;
  }

  Var forward(Graph& g, TapeBindings& tb, Var x, BnMode mode) {
    Var y = g.relu(bn1.forward(g, tb, conv1.forward(g, tb, x), mode));
    y = bn2.forward(g, tb, conv2.forward(g, tb, y), mode);
    Var s = projected ? skip_bn.forward(g, tb, skip_conv.forward(g, tb, x), mode) : x;
    return g.relu(g.add(y, s));
  }

  template <class P, class S>
  void visit(const std::string& prefix, P&& on_param, S&& on_state) {
    conv1.visit(prefix + ".conv1", on_param, on_state);
    bn1.visit(prefix + ".bn1", on_param, on_state);
    conv2.visit(prefix + ".conv2", on_param, on_state);
    bn2.visit(prefix + ".bn2", on_param, on_state);
    if (projected) {
      skip_conv.visit(prefix + ".skip_conv", on_param, on_state);
      skip_bn.visit(prefix + ".skip_bn", on_param, on_state);
    }
  }
};

struct BackboneDims {
  int in_channels = 3;
  int stem_channels = 16;
  std::vector<int> block_channels = {32, 64, 128};

  int levels() const { return static_cast<int>(block_channels.size()); }
  int feature_channels() const { return block_channels.back(); }
};

using FeaturePyramid = std::vector<Var>;

// Stem conv followed by L stride-2 residual blocks; block l emits feature
// map f^l at half the spatial extent of its input.
struct Encoder {
  Conv2dParams stem_conv;
  BatchNormParams stem_bn;
  std::vector<ResidualBlock> blocks;

  static Encoder make(const BackboneDims& dims, Rng& rng) {
    Encoder e;
    e.stem_conv = Conv2dParams::make(dims.in_channels, dims.stem_channels, 3, 1, rng);
    e.stem_bn = BatchNormParams::make(dims.stem_channels);
    int ch = dims.stem_channels;
    for (int out : dims.block_channels) {
      e.blocks.push_back(ResidualBlock::make(ch, out, 2, rng));
      ch = out;
    }
    return e;
  }

  FeaturePyramid forward(Graph& g, TapeBindings& tb, Var x, BnMode mode) {
    const Tensor& xv = g.value(x);
    if (xv.rank() != 4) throw ShapeError("encoder: expects NCHW input");
    const int div = 1 << static_cast<int>(blocks.size());
    if (xv.shape[2] % div != 0 || xv.shape[3] % div != 0)
      throw ShapeError("encoder: spatial extent " + xv.shape_str() + " not divisible by " +
                       std::to_string(div));
    Var y = g.relu(stem_bn.forward(g, tb, stem_conv.forward(g, tb, x), mode));
    FeaturePyramid pyr;
    pyr.reserve(blocks.size());
    for (auto& b : blocks) {
      y = b.forward(g, tb, y, mode);
      pyr.push_back(y);
    }
    return pyr;
  }

  template <class P, class S>
  void visit(const std::string& prefix, P&& on_param, S&& on_state) {
    stem_conv.visit(prefix + ".stem_conv", on_param, on_state);
    stem_bn.visit(prefix + ".stem_bn", on_param, on_state);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".block" + std::to_string(i + 1), on_param, on_state);
  }
};

// One stride-1 residual block on f^L; output keeps the block-L shape.
struct Bottleneck {
  ResidualBlock block;

  static Bottleneck make(const BackboneDims& dims, Rng& rng) {
    const int ch = dims.feature_channels();
    return Bottleneck{ResidualBlock::make(ch, ch, 1, rng)};
  }

  Var forward(Graph& g, TapeBindings& tb, Var fL, BnMode mode) {
    return block.forward(g, tb, fL, mode);
  }

  template <class P, class S>
  void visit(const std::string& prefix, P&& on_param, S&& on_state) {
    block.visit(prefix + ".block", on_param, on_state);
  }
};

// Mirror of the encoder: one same-scale stage at the f^L level, then one
// stage per remaining level doing nearest-neighbor 2x upsampling followed by
// a 3x3 conv that halves the channels. Outputs are returned ordered so index
// l-1 is shape-aligned with encoder feature f^l.
struct Decoder {
  struct Stage {
    bool upsample = false;
    Conv2dParams conv;
    BatchNormParams bn;
  };
  std::vector<Stage> stages;

  static Decoder make(const BackboneDims& dims, Rng& rng) {
    Decoder d;
    const auto& ch = dims.block_channels;
    const int L = dims.levels();
    Stage same;
    same.upsample = false;
    same.conv = Conv2dParams::make(ch[L - 1], ch[L - 1], 3, 1, rng);
    same.bn = BatchNormParams::make(ch[L - 1]);
    d.stages.push_back(std::move(same));
    for (int l = L - 1; l >= 1; --l) {
      Stage s;
      s.upsample = true;
      s.conv = Conv2dParams::make(ch[l], ch[l - 1], 3, 1, rng);
      s.bn = BatchNormParams::make(ch[l - 1]);
      d.stages.push_back(std::move(s));
    }
    return d;
  }

  FeaturePyramid forward(Graph& g, TapeBindings& tb, Var bottleneck_out, BnMode mode) {
    FeaturePyramid rev;  // produced deepest-first
    Var y = bottleneck_out;
    for (auto& s : stages) {
      if (s.upsample) y = g.upsample2x(y);
      y = g.relu(s.bn.forward(g, tb, s.conv.forward(g, tb, y), mode));
      rev.push_back(y);
    }
    return FeaturePyramid(rev.rbegin(), rev.rend());
  }

  template <class P, class S>
  void visit(const std::string& prefix, P&& on_param, S&& on_state) {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      stages[i].conv.visit(prefix + ".stage" + std::to_string(i) + ".conv", on_param, on_state);
      stages[i].bn.visit(prefix + ".stage" + std::to_string(i) + ".bn", on_param, on_state);
    }
  }
};

// Global average pool over f^L, then a single linear layer to class logits.
struct ClassifierHead {
  Param weight;  // [ch, classes]
  Param bias;    // [classes]

  static ClassifierHead make(int ch, int classes, Rng& rng) {
    ClassifierHead h;
    h.weight.value = rng.normal_tensor({ch, classes}, 0.0f, std::sqrt(1.0f / ch));
    h.bias.value = zeros({classes});
    return h;
  }

  Var forward(Graph& g, TapeBindings& tb, Var fL) {
    const Tensor& v = g.value(fL);
    if (v.rank() != 4) throw ShapeError("classifier: expects NCHW features");
    if (v.shape[2] != v.shape[3]) throw ShapeError("classifier: expects square feature maps");
    Var pooled = g.avgpool2d(fL, v.shape[2], 1);
    Var flat = g.reshape(pooled, {v.shape[0], v.shape[1]});
    return g.linear(flat, tb.bind(g, weight), tb.bind(g, bias));
  }

  template <class P, class S>
  void visit(const std::string& prefix, P&& on_param, S&& on_state) {
    on_param(prefix + ".weight", weight);
    on_param(prefix + ".bias", bias);
    (void)on_state;
  }
};

template <class Module>
void set_trainable(Module& m, bool trainable) {
  m.visit(
      "", [&](const std::string&, Param& p) { p.trainable = trainable; },
      [](const std::string&, Tensor&) {});
}

}  // namespace recttt
