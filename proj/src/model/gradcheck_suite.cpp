// SPDX-License-Identifier: Apache-2.0
#include "avsed/gradcheck_suite.hpp"

#include <memory>

#include "avsed/crnn.hpp"
#include "avsed/gru.hpp"
#include "avsed/layers.hpp"

namespace avsed {
namespace {

using D = double;

Tensor<D> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                        double hi = 1.0) {
  Tensor<D> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Values bounded away from zero so elementwise kinks are not straddled.
Tensor<D> signed_away_from_zero(Shape shape, Rng& rng) {
  Tensor<D> t = random_tensor(std::move(shape), rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data())
    if (sign(rng)) v = -v;
  return t;
}

void randomize(Param<D>& p, Rng& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& v : p.value.data()) v = dist(rng);
}

struct Holder {
  virtual ~Holder() = default;
};

template <typename Layer>
struct Owned : Holder {
  Layer layer;
  explicit Owned(Layer l) : layer(std::move(l)) {}
};

struct SuiteTarget {
  GradCheckTarget target;
  std::shared_ptr<Holder> owner;
  std::vector<std::shared_ptr<Tensor<D>>> inputs;
};

std::shared_ptr<Tensor<D>> share(Tensor<D> t) {
  return std::make_shared<Tensor<D>>(std::move(t));
}

SuiteTarget conv_target(Rng& rng) {
  auto own = std::make_shared<Owned<Conv2d<D>>>(Conv2d<D>(2, 3));
  auto& conv = own->layer;
  randomize(conv.weight, rng);
  randomize(conv.bias, rng);
  auto x = share(random_tensor({2, 2, 4, 5}, rng));
  SuiteTarget s;
  s.owner = own;
  s.inputs = {x};
  s.target.name = "conv2d";
  s.target.params = {{"weight", &conv.weight}, {"bias", &conv.bias}};
  s.target.inputs = {{"input", x.get()}};
  s.target.forward = [&conv, x] { return conv.forward(*x); };
  s.target.backward = [&conv](const Tensor<D>& g) {
    return std::vector<Tensor<D>>{conv.backward(g)};
  };
  return s;
}

SuiteTarget batchnorm_target(Rng& rng, Mode mode) {
  auto own = std::make_shared<Owned<BatchNorm2d<D>>>(BatchNorm2d<D>(3));
  auto& bn = own->layer;
  randomize(bn.gamma, rng, 1.5);
  randomize(bn.beta, rng);
  std::uniform_real_distribution<double> stat(0.5, 2.0);
  for (std::size_t c = 0; c < 3; ++c) {
    bn.running_mean[c] = stat(rng) - 1.0;
    bn.running_var[c] = stat(rng);
  }
  auto x = share(random_tensor({2, 3, 4, 4}, rng));
  SuiteTarget s;
  s.owner = own;
  s.inputs = {x};
  s.target.name = mode == Mode::kTrain ? "batchnorm2d(train)"
                                       : "batchnorm2d(eval)";
  s.target.params = {{"gamma", &bn.gamma}, {"beta", &bn.beta}};
  s.target.inputs = {{"input", x.get()}};
  s.target.forward = [&bn, x, mode] { return bn.forward(*x, mode, false); };
  s.target.backward = [&bn](const Tensor<D>& g) {
    return std::vector<Tensor<D>>{bn.backward(g)};
  };
  return s;
}

SuiteTarget pool_target(Rng& rng) {
  auto x = share(random_tensor({1, 2, 4, 6}, rng));
  SuiteTarget s;
  s.inputs = {x};
  s.target.name = "avgpool2d";
  s.target.inputs = {{"input", x.get()}};
  s.target.forward = [x] { return avgpool2d(*x, 2, 2); };
  const Shape shape = x->shape();
  s.target.backward = [shape](const Tensor<D>& g) {
    return std::vector<Tensor<D>>{avgpool2d_backward(g, shape, 2, 2)};
  };
  return s;
}

SuiteTarget relu_target(Rng& rng) {
  auto x = share(signed_away_from_zero({3, 7}, rng));
  auto out = std::make_shared<Tensor<D>>();
  SuiteTarget s;
  s.inputs = {x, out};
  s.target.name = "relu";
  s.target.inputs = {{"input", x.get()}};
  s.target.forward = [x, out] {
    *out = relu(*x);
    return *out;
  };
  s.target.backward = [out](const Tensor<D>& g) {
    return std::vector<Tensor<D>>{relu_backward(g, *out)};
  };
  return s;
}

SuiteTarget sigmoid_target(Rng& rng) {
  auto x = share(random_tensor({3, 7}, rng, -4.0, 4.0));
  auto out = std::make_shared<Tensor<D>>();
  SuiteTarget s;
  s.inputs = {x, out};
  s.target.name = "sigmoid";
  s.target.inputs = {{"input", x.get()}};
  s.target.forward = [x, out] {
    *out = sigmoid(*x);
    return *out;
  };
  s.target.backward = [out](const Tensor<D>& g) {
    return std::vector<Tensor<D>>{sigmoid_backward(g, *out)};
  };
  return s;
}

SuiteTarget dropout_target(Rng& rng) {
  auto own = std::make_shared<Owned<Dropout<D>>>(Dropout<D>(0.33));
  auto& drop = own->layer;
  auto x = share(random_tensor({4, 9}, rng));
  drop.forward(*x, Mode::kTrain, &rng);
  drop.set_frozen(true);
  SuiteTarget s;
  s.owner = own;
  s.inputs = {x};
  s.target.name = "dropout(frozen mask)";
  s.target.inputs = {{"input", x.get()}};
  s.target.forward = [&drop, x] {
    return drop.forward(*x, Mode::kTrain, nullptr);
  };
  s.target.backward = [&drop](const Tensor<D>& g) {
    return std::vector<Tensor<D>>{drop.backward(g)};
  };
  return s;
}

SuiteTarget linear_target(Rng& rng) {
  auto own = std::make_shared<Owned<Linear<D>>>(Linear<D>(4, 5));
  auto& lin = own->layer;
  randomize(lin.weight, rng);
  randomize(lin.bias, rng);
  auto x = share(random_tensor({2, 3, 4}, rng));
  SuiteTarget s;
  s.owner = own;
  s.inputs = {x};
  s.target.name = "linear";
  s.target.params = {{"weight", &lin.weight}, {"bias", &lin.bias}};
  s.target.inputs = {{"input", x.get()}};
  s.target.forward = [&lin, x] { return lin.forward(*x); };
  s.target.backward = [&lin](const Tensor<D>& g) {
    return std::vector<Tensor<D>>{lin.backward(g)};
  };
  return s;
}

SuiteTarget gru_target(Rng& rng) {
  auto own = std::make_shared<Owned<BiGru<D>>>(BiGru<D>(3, 4, 2));
  auto& gru = own->layer;
  for (auto& np : gru.named_params("gru")) randomize(*np.param, rng, 0.8);
  auto x = share(random_tensor({2, 5, 3}, rng));
  SuiteTarget s;
  s.owner = own;
  s.inputs = {x};
  s.target.name = "bigru";
  s.target.params = gru.named_params("gru");
  s.target.inputs = {{"input", x.get()}};
  const std::vector<std::size_t> lengths{5, 3};
  s.target.forward = [&gru, x, lengths] { return gru.forward(*x, lengths); };
  s.target.backward = [&gru](const Tensor<D>& g) {
    return std::vector<Tensor<D>>{gru.backward(g)};
  };
  return s;
}

SuiteTarget pool_linear_target(Rng& rng) {
  const std::size_t nt = 6, n = 3;
  auto p = share(random_tensor({nt, n}, rng, 0.05, 0.95));
  SuiteTarget s;
  s.inputs = {p};
  s.target.name = "linear_pool";
  s.target.inputs = {{"frame_probs", p.get()}};
  s.target.forward = [p, nt, n] {
    Tensor<D> out({n});
    linear_pool(p->ptr(), nt, n, out.ptr());
    return out;
  };
  s.target.backward = [p, nt, n](const Tensor<D>& g) {
    Tensor<D> gp({nt, n});
    for (std::size_t c = 0; c < n; ++c) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t t = 0; t < nt; ++t) {
        s1 += p->at(t, c);
        s2 += p->at(t, c) * p->at(t, c);
      }
      for (std::size_t t = 0; t < nt; ++t)
        gp.at(t, c) = g[c] * (2.0 * p->at(t, c) - s2 / s1) / s1;
    }
    return std::vector<Tensor<D>>{gp};
  };
  return s;
}

SuiteTarget crnn_target(const GradCheckSuiteOptions& o, Rng& rng, Mode mode) {
  CrnnConfig cfg;
  cfg.use_spectral = cfg.use_pre_audio = cfg.use_pre_visual = true;
  cfg.n_classes = o.n_classes;
  cfg.pre_audio_dim = o.pre_audio_dim;
  cfg.pre_visual_dim = o.pre_visual_dim;
  cfg.gru_hidden = o.gru_hidden;
  // One calibration pass sets the running statistics to batch statistics.
  cfg.batch_norm.momentum = 1.0;
  auto own = std::make_shared<Owned<Crnn<D>>>(Crnn<D>(cfg));
  auto& model = own->layer;
  model.init(rng);
  // Perturb batch-norm affine terms away from the identity initialisation.
  for (auto& np : model.named_params())
    if (np.name.find(".bn.") != std::string::npos) {
      std::uniform_real_distribution<double> d(-0.2, 0.2);
      for (auto& v : np.param->value.data()) v += d(rng);
    }

  const std::size_t nb = mode == Mode::kTrain ? 2 : 1;
  const std::size_t tp = o.frames / kTimeReduction;
  {
    // Calibrate batch-norm statistics the way a trained model would have
    // them; with initial statistics the deep activations shrink so far that
    // early-layer gradients drown in round-off.
    ModelInput<D> calib;
    calib.spectral = random_tensor({4, 1, o.frames, kSpectralBins}, rng);
    calib.pre_audio = random_tensor({4, tp, o.pre_audio_dim}, rng);
    calib.pre_visual = random_tensor({4, tp, o.pre_visual_dim}, rng);
    ForwardOptions fo;
    fo.mode = Mode::kTrain;
    fo.rng = &rng;
    model.forward(calib, fo);
  }
  auto spec = share(random_tensor({nb, 1, o.frames, kSpectralBins}, rng));
  auto pa = share(random_tensor({nb, tp, o.pre_audio_dim}, rng));
  auto pv = share(random_tensor({nb, tp, o.pre_visual_dim}, rng));
  auto cached = std::make_shared<ModelOutput<D>>();

  auto run = [&model, spec, pa, pv, mode, cached](Rng* r) {
    ModelInput<D> in;
    in.spectral = *spec;
    in.pre_audio = *pa;
    in.pre_visual = *pv;
    ForwardOptions fo;
    fo.mode = mode;
    fo.rng = r;
    fo.update_bn_stats = false;
    fo.freeze_bn_stats = true;
    *cached = model.forward(in, fo);
    const auto& clip = cached->clip_probs;
    const auto& frames = cached->frame_probs;
    std::vector<D> flat(clip.vec());
    flat.insert(flat.end(), frames.vec().begin(), frames.vec().end());
    const std::size_t total = flat.size();
    return Tensor<D>({total}, std::move(flat));
  };
  if (mode == Mode::kTrain) {
    run(&rng);
    model.set_dropout_frozen(true);
  }

  SuiteTarget s;
  s.owner = own;
  s.inputs = {spec, pa, pv};
  s.target.name = mode == Mode::kTrain ? "crnn(train, frozen dropout)"
                                       : "crnn(eval)";
  s.target.params = model.named_params();
  s.target.inputs = {{"spectral", spec.get()},
                     {"pre_audio", pa.get()},
                     {"pre_visual", pv.get()}};
  s.target.forward = [run] { return run(nullptr); };
  s.target.backward = [&model, cached](const Tensor<D>& g) {
    const Tensor<D>& clip = cached->clip_probs;
    Tensor<D> gc(clip.shape());
    Tensor<D> gf(cached->frame_probs.shape());
    std::copy(g.ptr(), g.ptr() + gc.size(), gc.ptr());
    std::copy(g.ptr() + gc.size(), g.ptr() + g.size(), gf.ptr());
    InputGrads<D> ig = model.backward(gc, gf);
    return std::vector<Tensor<D>>{ig.spectral, ig.pre_audio, ig.pre_visual};
  };
  return s;
}

}  // namespace

GradCheckSuiteResult run_gradcheck_suite(const GradCheckSuiteOptions& opts) {
  if (opts.frames == 0 || opts.frames % kTimeReduction != 0)
    throw ConfigError("gradcheck frames must be a positive multiple of 4");
  Rng rng(opts.seed);
  std::vector<SuiteTarget> targets;
  targets.push_back(conv_target(rng));
  targets.push_back(batchnorm_target(rng, Mode::kTrain));
  targets.push_back(batchnorm_target(rng, Mode::kEval));
  targets.push_back(pool_target(rng));
  targets.push_back(relu_target(rng));
  targets.push_back(sigmoid_target(rng));
  targets.push_back(dropout_target(rng));
  targets.push_back(linear_target(rng));
  targets.push_back(gru_target(rng));
  targets.push_back(pool_linear_target(rng));
  targets.push_back(crnn_target(opts, rng, Mode::kEval));
  targets.push_back(crnn_target(opts, rng, Mode::kTrain));

  if (opts.inject_fault) {
    // Corrupt the conv weight gradient after a correct backward.
    auto& t = targets.front().target;
    auto inner = t.backward;
    Param<D>* w = t.params.front().param;
    t.backward = [inner, w](const Tensor<D>& g) {
      auto out = inner(g);
      for (auto& v : w->grad.data()) v *= 1.5;
      return out;
    };
  }

  GradCheckSuiteResult result;
  GradCheckOptions go;
  go.eps = opts.eps;
  go.max_coords_per_tensor = opts.max_coords_per_tensor;
  go.seed = opts.seed + 1;
  for (auto& t : targets) {
    result.reports.push_back(grad_check(t.target, go));
    result.max_relative_error = std::max(result.max_relative_error,
                                         result.reports.back().max_relative_error);
  }
  result.passed = result.max_relative_error < opts.tolerance;
  return result;
}

}  // namespace avsed
