#pragma once

#include <functional>
#include <string>
#include <vector>

#include "recttt/autodiff.hpp"
#include "recttt/losses.hpp"
#include "recttt/rng.hpp"

namespace recttt {

// Central finite-difference verification of the tape's analytic gradients.
// The analytic side runs the production float graph; the differenced
// forwards run a freshly built 64-bit shadow graph per evaluation, so the
// oracle shares no state with the backward pass it checks and the epsilon
// perturbations are not drowned in float32 rounding.

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int checked = 0;
  bool pass = true;
};

struct GradCheckOpts {
  double eps = 1e-3;
  double rel_tol = 1e-3;
  double abs_tol = 1e-5;
  // Multiplies analytic gradients before comparison; anything but 1.0 is a
  // deliberately corrupted rule used as a negative control in tests.
  double tamper = 1.0;
};

// Builder must be generic over the graph's scalar type:
//   [](auto& g, const std::vector<Var>& v) -> Var
template <class Builder>
GradCheckReport gradcheck(const std::string& name, const Builder& build,
                          const std::vector<Tensor>& inputs, const GradCheckOpts& opts = {}) {
  GradCheckReport rep;
  rep.name = name;

  Graph g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(g.leaf(t, /*requires_grad=*/true));
  GradMap grads = g.backward(build(g, vars));

  std::vector<DTensor> shadow;
  shadow.reserve(inputs.size());
  for (const Tensor& t : inputs) shadow.push_back(tensor_cast<double>(t));

  auto eval_at = [&](std::size_t which, std::size_t elem, double v) -> double {
    DGraph g2;
    std::vector<Var> vs;
    vs.reserve(shadow.size());
    for (std::size_t i = 0; i < shadow.size(); ++i) {
      DTensor t = shadow[i];
      if (i == which) t.data[elem] = v;
      vs.push_back(g2.leaf(std::move(t), false));
    }
    return g2.value(build(g2, vs)).data[0];
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& analytic = grads.at(vars[i]);
    for (std::size_t j = 0; j < inputs[i].data.size(); ++j) {
      const double x0 = shadow[i].data[j];
      const double fp = eval_at(i, j, x0 + opts.eps);
      const double fm = eval_at(i, j, x0 - opts.eps);
      const double fd = (fp - fm) / (2.0 * opts.eps);
      const double an = static_cast<double>(analytic.data[j]) * opts.tamper;
      const double abs_err = std::abs(an - fd);
      const double rel_err = abs_err / std::max(std::max(std::abs(an), std::abs(fd)), 1e-12);
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      rep.max_rel_err = std::max(rep.max_rel_err, rel_err);
      ++rep.checked;
      if (abs_err > opts.abs_tol && rel_err > opts.rel_tol) rep.pass = false;
    }
  }
  return rep;
}

// One leaf held out of the gradient (a fixed projection direction), so any
// op output reduces to a scalar loss.
template <class T>
Var project(BasicGraph<T>& g, Var out, const Tensor& direction) {
  return g.dot(out, g.leaf(direction));
}

// The standard suite: every tape op and every loss, `instances` random
// draws each. Inputs are kept away from relu/clamp kinks and log/div
// singularities, where a finite difference is not a valid oracle.
inline std::vector<GradCheckReport> run_standard_gradchecks(std::uint64_t seed,
                                                            int instances = 20) {
  std::vector<GradCheckReport> out;
  Rng root(seed);

  auto merge = [&out](GradCheckReport r, bool first) {
    if (first) {
      out.push_back(r);
      return;
    }
    GradCheckReport& dst = out.back();
    dst.max_rel_err = std::max(dst.max_rel_err, r.max_rel_err);
    dst.max_abs_err = std::max(dst.max_abs_err, r.max_abs_err);
    dst.checked += r.checked;
    dst.pass = dst.pass && r.pass;
  };

  auto run = [&](const std::string& name, auto make_case) {
    for (int k = 0; k < instances; ++k) {
      Rng rng = root.split(fnv1a64(name) + static_cast<std::uint64_t>(k));
      auto [builder, inputs] = make_case(rng);
      merge(gradcheck(name, builder, inputs), k == 0);
    }
  };

    auto unit = [](Rng& rng, std::vector<int> shape, float lo = -1.0f, float hi = 1.0f) {
    return rng.uniform_tensor(std::move(shape), lo, hi);
  };
  // Magnitudes in [0.1, 1] with random sign: differentiable neighborhoods for
  // relu-like kinks.
  auto off_kink = [](Rng& rng, std::vector<int> shape) {
    Tensor t = rng.uniform_tensor(std::move(shape), 0.1f, 1.0f);
    for (float& v : t.data)
      if (rng.uniform() < 0.5) v = -v;
    return t;
  };

  run("add", [&](Rng& rng) {
    Tensor dir = unit(rng, {2, 3});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.add(v[0], v[1]), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 3}), unit(rng, {2, 3})}};
  });
  run("sub", [&](Rng& rng) {
    Tensor dir = unit(rng, {2, 3});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.sub(v[0], v[1]), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 3}), unit(rng, {2, 3})}};
  });
  run("mul", [&](Rng& rng) {
    Tensor dir = unit(rng, {2, 3});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.mul(v[0], v[1]), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 3}), unit(rng, {2, 3})}};
  });
  run("div", [&](Rng& rng) {
    Tensor dir = unit(rng, {2, 3});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.div(v[0], v[1]), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 3}), unit(rng, {2, 3}, 0.5f, 1.5f)}};
  });
  run("scale", [&](Rng& rng) {
    Tensor dir = unit(rng, {5});
    const float s = rng.uniform(-2.0f, 2.0f);
    return std::pair{[dir, s](auto& g, const std::vector<Var>& v) {
              return project(g, g.scale(v[0], s), dir);
            },
            std::vector<Tensor>{unit(rng, {5})}};
  });
  run("matmul", [&](Rng& rng) {
    Tensor dir = unit(rng, {3, 2});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.matmul(v[0], v[1]), dir);
            },
            std::vector<Tensor>{unit(rng, {3, 4}), unit(rng, {4, 2})}};
  });
  run("conv2d", [&](Rng& rng) {
    const int stride = rng.uniform_int(1, 2);
    const int oh = conv_out_extent(6, 3, stride, 1);
    Tensor dir = unit(rng, {2, 4, oh, oh});
    return std::pair{[dir, stride](auto& g, const std::vector<Var>& v) {
              return project(g, g.conv2d(v[0], v[1], v[2], stride, 1), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 3, 6, 6}), unit(rng, {4, 3, 3, 3}), unit(rng, {4})}};
  });
  run("batchnorm_train", [&](Rng& rng) {
    Tensor dir = unit(rng, {3, 2, 4, 4});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              Tensor rm = zeros({2}), rv = ones({2});
              Var y = g.batchnorm(v[0], v[1], v[2], rm, rv, 0.1f, 1e-5f, BnMode::Train);
              return project(g, y, dir);
            },
            std::vector<Tensor>{unit(rng, {3, 2, 4, 4}), unit(rng, {2}, 0.5f, 1.5f), unit(rng, {2})}};
  });
  run("batchnorm_eval", [&](Rng& rng) {
    Tensor dir = unit(rng, {3, 2, 4, 4});
    Tensor rm = unit(rng, {2});
    Tensor rv = unit(rng, {2}, 0.5f, 2.0f);
    return std::pair{[dir, rm, rv](auto& g, const std::vector<Var>& v) {
              Tensor m = rm, s = rv;
              Var y = g.batchnorm(v[0], v[1], v[2], m, s, 0.1f, 1e-5f, BnMode::Eval);
              return project(g, y, dir);
            },
            std::vector<Tensor>{unit(rng, {3, 2, 4, 4}), unit(rng, {2}, 0.5f, 1.5f), unit(rng, {2})}};
  });
  run("relu", [&](Rng& rng) {
    Tensor dir = unit(rng, {3, 4});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) { return project(g, g.relu(v[0]), dir); },
            std::vector<Tensor>{off_kink(rng, {3, 4})}};
  });
  run("avgpool2d", [&](Rng& rng) {
    const int k = rng.uniform_int(2, 3);
    const int s = k == 2 ? 2 : 1;
    const int oh = (6 - k) / s + 1;
    Tensor dir = unit(rng, {2, 2, oh, oh});
    return std::pair{[dir, k, s](auto& g, const std::vector<Var>& v) {
              return project(g, g.avgpool2d(v[0], k, s), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 2, 6, 6})}};
  });
  run("upsample2x", [&](Rng& rng) {
    Tensor dir = unit(rng, {2, 2, 6, 6});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.upsample2x(v[0]), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 2, 3, 3})}};
  });
  run("linear", [&](Rng& rng) {
    Tensor dir = unit(rng, {3, 2});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.linear(v[0], v[1], v[2]), dir);
            },
            std::vector<Tensor>{unit(rng, {3, 4}), unit(rng, {4, 2}), unit(rng, {2})}};
  });
  run("flatten", [&](Rng& rng) {
    Tensor dir = unit(rng, {12});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) { return project(g, g.flatten(v[0]), dir); },
            std::vector<Tensor>{unit(rng, {3, 4})}};
  });
  run("reshape", [&](Rng& rng) {
    Tensor dir = unit(rng, {4, 3});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.reshape(v[0], {4, 3}), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 6})}};
  });
  run("concat", [&](Rng& rng) {
    Tensor dir = unit(rng, {2, 5});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.concat(v[0], v[1], 1), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 3}), unit(rng, {2, 2})}};
  });
  run("dot", [&](Rng& rng) {
    return std::pair{[](auto& g, const std::vector<Var>& v) { return g.dot(v[0], v[1]); },
            std::vector<Tensor>{unit(rng, {7}), unit(rng, {7})}};
  });
  run("norm2", [&](Rng& rng) {
    return std::pair{[](auto& g, const std::vector<Var>& v) { return g.norm2(v[0]); },
            std::vector<Tensor>{unit(rng, {6}, 0.3f, 1.0f)}};
  });
  run("cosine_sim", [&](Rng& rng) {
    return std::pair{[](auto& g, const std::vector<Var>& v) {
              return g.cosine_sim(v[0], v[1], 1e-8f);
            },
            std::vector<Tensor>{unit(rng, {9}, 0.2f, 1.0f), unit(rng, {9}, 0.2f, 1.0f)}};
  });
  run("log", [&](Rng& rng) {
    Tensor dir = unit(rng, {5});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) { return project(g, g.log(v[0]), dir); },
            std::vector<Tensor>{unit(rng, {5}, 0.2f, 2.0f)}};
  });
  run("exp", [&](Rng& rng) {
    Tensor dir = unit(rng, {5});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) { return project(g, g.exp(v[0]), dir); },
            std::vector<Tensor>{unit(rng, {5})}};
  });
  run("softmax", [&](Rng& rng) {
    Tensor dir = unit(rng, {2, 4});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) { return project(g, g.softmax(v[0]), dir); },
            std::vector<Tensor>{unit(rng, {2, 4})}};
  });
  run("log_softmax", [&](Rng& rng) {
    Tensor dir = unit(rng, {2, 4});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.log_softmax(v[0]), dir);
            },
            std::vector<Tensor>{unit(rng, {2, 4})}};
  });
  run("sum_all", [&](Rng& rng) {
    return std::pair{[](auto& g, const std::vector<Var>& v) { return g.sum_all(v[0]); },
            std::vector<Tensor>{unit(rng, {3, 3})}};
  });
  run("clamp_min", [&](Rng& rng) {
    Tensor dir = unit(rng, {6});
    return std::pair{[dir](auto& g, const std::vector<Var>& v) {
              return project(g, g.clamp_min(v[0], 0.1f), dir);
            },
            std::vector<Tensor>{unit(rng, {6}, 0.3f, 1.0f)}};
  });
  run("cross_entropy", [&](Rng& rng) {
    std::vector<int> labels = {rng.uniform_int(0, 3), rng.uniform_int(0, 3), rng.uniform_int(0, 3)};
    return std::pair{[labels](auto& g, const std::vector<Var>& v) {
              return cross_entropy(g, v[0], labels);
            },
            std::vector<Tensor>{unit(rng, {3, 4})}};
  });
  run("kl_divergence", [&](Rng& rng) {
    return std::pair{[](auto& g, const std::vector<Var>& v) {
              return kl_divergence(g, g.softmax(v[0]), g.softmax(v[1]));
            },
            std::vector<Tensor>{unit(rng, {3, 4}), unit(rng, {3, 4})}};
  });
  run("global_cosine_loss", [&](Rng& rng) {
    return std::pair{[](auto& g, const std::vector<Var>& v) {
              return global_cosine_loss(g, {v[0], v[1]}, {v[2], v[3]}, /*block_enc_grad=*/false);
            },
            std::vector<Tensor>{unit(rng, {6}, 0.2f, 1.0f), unit(rng, {10}, 0.2f, 1.0f), unit(rng, {6}, 0.2f, 1.0f),
             unit(rng, {10}, 0.2f, 1.0f)}};
  });
  run("global_cosine_loss_sg", [&](Rng& rng) {
    // Encoder side held constant; analytic gradients flow through the
    // decoder side only, which is exactly what the barrier guarantees.
    Tensor e0 = unit(rng, {6}, 0.2f, 1.0f);
    Tensor e1 = unit(rng, {10}, 0.2f, 1.0f);
    return std::pair{[e0, e1](auto& g, const std::vector<Var>& v) {
              return global_cosine_loss(g, {g.leaf(e0), g.leaf(e1)}, {v[0], v[1]},
                                        /*block_enc_grad=*/true);
            },
            std::vector<Tensor>{unit(rng, {6}, 0.2f, 1.0f), unit(rng, {10}, 0.2f, 1.0f)}};
  });

  // stop_gradient is checked by contract, not finite differences: the
  // barrier's forward is the identity and every gradient behind it is
  // exactly zero.
  {
    GradCheckReport rep;
    rep.name = "stop_gradient";
    for (int k = 0; k < instances; ++k) {
      Rng rng = root.split(fnv1a64("stop_gradient") + static_cast<std::uint64_t>(k));
      Tensor x = rng.uniform_tensor({5}, -1.0f, 1.0f);
      Graph g;
      Var v = g.leaf(x, true);
      Var sg = g.stop_gradient(v);
      if (!bitwise_equal(g.value(sg), x)) rep.pass = false;
      Var loss = g.dot(sg, v);  // only the unblocked factor contributes
      GradMap grads = g.backward(loss);
      const Tensor& gx = grads.at(v);
      for (std::size_t j = 0; j < gx.data.size(); ++j) {
        const double err = std::abs(gx.data[j] - x.data[j]);  // d/dx sg(x).x = sg(x)
        rep.max_abs_err = std::max(rep.max_abs_err, err);
        rep.max_rel_err = std::max(rep.max_rel_err, err / std::max(std::abs(x.data[j]), 1e-12f));
        ++rep.checked;
        if (err > 1e-6) rep.pass = false;
      }
      Graph g2;
      Var v2 = g2.leaf(x, true);
      GradMap blocked = g2.backward(g2.sum_all(g2.stop_gradient(v2)));
      for (float gv : blocked.at(v2).data)
        if (gv != 0.0f) rep.pass = false;
    }
    out.push_back(rep);
  }

  return out;
}

}  // namespace recttt
