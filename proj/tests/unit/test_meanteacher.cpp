// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>

#include "avsed/checkpoint.hpp"
#include "avsed/meanteacher.hpp"
#include "test_util.hpp"

using namespace avsed;
using avsed::testing::random_tensor;
using avsed::testing::TempDir;

namespace {

ModelOutput<float> outputs(std::size_t b, std::size_t t, std::size_t n, float clip, float frame) {
  ModelOutput<float> o;
  o.clip_probs = Tensor<float>({b, n}, clip);
  o.frame_probs = Tensor<float>({b, t, n}, frame);
  o.frames.assign(b, t);
  return o;
}

// Small on-disk dataset shared by the training tests.
const Dataset& tiny_dataset() {
  static TempDir dir("mt_data");
  static const Dataset ds = [] {
    SynthSpec s;
    s.n_weak = 6;
    s.n_unlabeled = 4;
    s.n_val = 3;
    s.n_test = 2;
    s.classes = {"a", "b", "c"};
    s.pre_audio_dim = 8;
    s.pre_visual_dim = 8;
    s.event_len_max = 1.5;
    s.seed = 9;
    synthesize_dataset(s, dir.path());
    return load_split(dir.path());
  }();
  return ds;
}

CrnnConfig tiny_model() {
  CrnnConfig c;
  c.n_classes = 3;
  c.pre_audio_dim = 8;
  c.pre_visual_dim = 8;
  c.gru_hidden = 8;
  return c;
}

TrainRunConfig tiny_run() {
  TrainRunConfig r;
  r.epochs = 2;
  r.batches_per_epoch = 2;
  r.weak_per_batch = 3;
  r.unlabeled_per_batch = 2;
  r.lr.ramp_steps = 2;
  r.seed = 4;
  return r;
}

std::vector<float> flat_weights(Crnn<float>& m) {
  std::vector<float> out;
  for (auto& p : m.named_params()) out.insert(out.end(), p.param->value.data().begin(), p.param->value.data().end());
  for (auto& b : m.named_buffers()) out.insert(out.end(), b.tensor->data().begin(), b.tensor->data().end());
  return out;
}

}  // namespace

TEST_CASE("lr schedule") {
  CHECK(lr_at(12500) == 0.001);
  CHECK(lr_at(12501) / lr_at(12500) == doctest::Approx(0.99995).epsilon(1e-12));
  CHECK(lr_at(0) == doctest::Approx(0.001 * std::exp(-5.0)).epsilon(1e-12));
  CHECK(lr_at(0) == doctest::Approx(6.7379e-6).epsilon(1e-4));
  for (std::uint64_t s = 1; s <= 25000; ++s) {
    if (s <= 12500)
      REQUIRE(lr_at(s) > lr_at(s - 1));
    else
      REQUIRE(lr_at(s) < lr_at(s - 1));
  }
  // Continuity at the junction: the last ramp step is within one ramp increment.
  CHECK(lr_at(12500) - lr_at(12499) < 1e-9);
}

TEST_CASE("adam: hand-evaluated and oracle updates") {
  Param<float> p({1});
  p.value[0] = 0.5f;
  Adam zero({&p});
  CHECK(zero.step(1e-3));
  CHECK(p.value[0] == 0.5f);

  Param<float> q({1});
  Adam adam({&q});
  q.grad[0] = 1.0f;
  adam.step(1e-3);
  CHECK(q.value[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(q.grad[0] == 0.0f);

  // Double-precision reference over random gradients.
  Rng rng(11);
  Param<float> r({5});
  for (auto& v : r.value.data()) v = std::uniform_real_distribution<float>(-1, 1)(rng);
  std::vector<double> theta(r.value.data().begin(), r.value.data().end()), m(5, 0.0), v(5, 0.0);
  Adam opt({&r});
  std::normal_distribution<double> g(0.0, 3.0);
  for (int step = 1; step <= 30; ++step) {
    const double lr = 1e-2 / step;
    for (std::size_t i = 0; i < 5; ++i) {
      const float gi = static_cast<float>(g(rng));
      r.grad[i] = gi;
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * double(gi) * gi;
      const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
      theta[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    opt.step(lr);
    for (std::size_t i = 0; i < 5; ++i) REQUIRE(r.value[i] == doctest::Approx(theta[i]).epsilon(1e-5));
  }
  CHECK(opt.steps() == 30);
}

TEST_CASE("adam: large gradients move each coordinate by about lr") {
  Rng rng(12);
  Param<float> p({64});
  Adam adam({&p});
  for (int s = 0; s < 10; ++s) {
    std::vector<float> before(p.value.data().begin(), p.value.data().end());
    for (auto& g : p.grad.data()) g = std::uniform_real_distribution<float>(-1e4, 1e4)(rng);
    adam.step(1e-3);
    for (std::size_t i = 0; i < 64; ++i) REQUIRE(std::abs(p.value[i] - before[i]) <= 1e-3 * 3.2);
  }
}

TEST_CASE("adam: non-finite gradients skip the step") {
  Param<float> p({3});
  p.value.fill(1.0f);
  Adam adam({&p});
  p.grad[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(adam.step(1e-3));
  CHECK(adam.steps() == 0);
  CHECK(p.value == Tensor<float>({3}, 1.0f));
  CHECK(p.grad == Tensor<float>({3}, 0.0f));
  CHECK(adam.first_moments()[0] == std::vector<double>(3, 0.0));
  p.grad[0] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(adam.step(1e-3));
}

TEST_CASE("ema: geometric law on scalars") {
  for (int k : {1, 10, 1000}) {
    CrnnConfig c = tiny_model();
    Crnn<float> teacher(c), student(c);
    for (auto& p : teacher.named_params()) p.param->value.fill(0.0f);
    for (auto& b : teacher.named_buffers()) b.tensor->fill(0.0f);
    for (auto& p : student.named_params()) p.param->value.fill(1.0f);
    for (auto& b : student.named_buffers()) b.tensor->fill(1.0f);
    EmaTeacher ema(teacher);
    for (int i = 0; i < k; ++i) ema.update(teacher, student);
    const float expect = static_cast<float>(1.0 - std::pow(0.999, k));
    for (float v : flat_weights(teacher)) REQUIRE(v == expect);
  }
  std::vector<float> t{0.0f}, s{1.0f};
  ema_update(t, s, 0.999);
  CHECK(t[0] == 0.001f);
}

TEST_CASE("ema: frozen student convergence and identity") {
  Rng rng(13);
  CrnnConfig c = tiny_model();
  Crnn<float> teacher(c), student(c);
  teacher.init(rng);
  student.init(rng);
  const auto t0 = flat_weights(teacher), s = flat_weights(student);
  EmaTeacher ema(teacher);
  for (int k = 1; k <= 50; ++k) {
    ema.update(teacher, student);
    const auto t = flat_weights(teacher);
    const double f = std::pow(0.999, k);
    for (std::size_t i = 0; i < t.size(); i += 7) {
      // Bounded by the float rounding of the stored teacher value.
      const double err = (double(t[i]) - s[i]) - f * (double(t0[i]) - s[i]);
      REQUIRE(std::abs(err) <= 6e-8 * std::abs(t[i]) + 1e-30);
    }
  }
  CHECK(flat_weights(student) == s);

  Crnn<float> same(c);
  copy_weights(student, same);
  EmaTeacher e2(same);
  e2.update(same, student);
  CHECK(flat_weights(same) == s);

  CrnnConfig other = c;
  other.gru_hidden = 4;
  Crnn<float> wrong(other);
  CHECK_THROWS_AS(ema.update(teacher, wrong), ConfigError);
}

TEST_CASE("classification loss examples") {
  Tensor<float> half({2, 3}, 0.5f);
  Tensor<float> y({2, 3}, std::vector<float>{1, 0, 1, 0, 0, 1});
  CHECK(classification_loss(half, y).value == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  auto r = classification_loss(Tensor<float>({1, 2}, std::vector<float>{0.8f, 0.2f}),
                               Tensor<float>({1, 2}, std::vector<float>{1, 0}));
  CHECK(r.value == doctest::Approx(0.2231).epsilon(1e-4));
  auto perfect = classification_loss(Tensor<float>({1, 2}, std::vector<float>{1, 0}),
                                     Tensor<float>({1, 2}, std::vector<float>{1, 0}));
  CHECK(perfect.value < 1e-6);
  CHECK(perfect.value >= 0.0);
  CHECK_THROWS_AS(classification_loss(half, Tensor<float>({2, 3}, 0.5f)), DataError);
  CHECK_THROWS_AS(classification_loss(half, Tensor<float>({3, 3}, 1.0f)), ShapeError);

  // Only the labelled (leading) rows contribute.
  Tensor<float> mixed({3, 3}, 0.5f);
  mixed.at(2, 0) = 0.01f;
  auto part = classification_loss(mixed, y);
  CHECK(part.value == doctest::Approx(std::log(2.0)));
  CHECK(part.grad_clip.at(2, 0) == 0.0f);
}

TEST_CASE("classification loss gradient matches finite differences") {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_tensor<float>({4, 3}, rng, 0.05, 0.95);
    Tensor<float> y({3, 3});
    for (auto& v : y.data()) v = std::bernoulli_distribution(0.5)(rng) ? 1.0f : 0.0f;
    const auto g = classification_loss(p, y).grad_clip;
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto hi = p, lo = p;
      hi[i] += 1e-3f;
      lo[i] -= 1e-3f;
      const double num = (classification_loss(hi, y).value - classification_loss(lo, y).value) /
                         (static_cast<double>(hi[i]) - lo[i]);
      REQUIRE(g[i] == doctest::Approx(num).epsilon(1e-3).scale(1e-6));
    }
  }
}

TEST_CASE("consistency loss examples and masking") {
  auto a = outputs(1, 4, 10, 0.3f, 0.6f);
  CHECK(consistency_loss(a, a).value == 0.0);
  auto b = a;
  b.clip_probs[3] += 0.1f;
  CHECK(consistency_loss(b, a).value == doctest::Approx(0.001).epsilon(1e-5));
  CHECK(consistency_loss(outputs(2, 3, 4, 0, 0), outputs(2, 3, 4, 1, 1)).value ==
        doctest::Approx(2.0));

  // Frames past a clip's valid length are ignored.
  auto s = outputs(2, 4, 2, 0.5f, 0.5f), t = s;
  s.frames = t.frames = {4, 2};
  s.frame_probs.at(1, 3, 0) = 0.0f;
  auto r = consistency_loss(s, t);
  CHECK(r.value == 0.0);
  CHECK(r.grad_frame.at(1, 3, 0) == 0.0f);
  s.frame_probs.at(1, 1, 0) = 0.0f;
  CHECK(consistency_loss(s, t).value == doctest::Approx(0.25 / 12.0));

  CHECK_THROWS_AS(consistency_loss(outputs(1, 4, 3, 0, 0), outputs(1, 5, 3, 0, 0)), ShapeError);
}

TEST_CASE("consistency loss gradient matches finite differences") {
  Rng rng(15);
  ModelOutput<float> s, t;
  s.clip_probs = random_tensor<float>({2, 3}, rng, 0, 1);
  t.clip_probs = random_tensor<float>({2, 3}, rng, 0, 1);
  s.frame_probs = random_tensor<float>({2, 4, 3}, rng, 0, 1);
  t.frame_probs = random_tensor<float>({2, 4, 3}, rng, 0, 1);
  s.frames = t.frames = {4, 3};
  const auto base = consistency_loss(s, t);
  for (std::size_t i = 0; i < s.clip_probs.size(); ++i) {
    auto hi = s, lo = s;
    hi.clip_probs[i] += 1e-3f;
    lo.clip_probs[i] -= 1e-3f;
    const double num = (consistency_loss(hi, t).value - consistency_loss(lo, t).value) /
                       (static_cast<double>(hi.clip_probs[i]) - lo.clip_probs[i]);
    CHECK(base.grad_clip[i] == doctest::Approx(num).epsilon(1e-3));
  }
  for (std::size_t i = 0; i < s.frame_probs.size(); ++i) {
    auto hi = s, lo = s;
    hi.frame_probs[i] += 1e-3f;
    lo.frame_probs[i] -= 1e-3f;
    const double num = (consistency_loss(hi, t).value - consistency_loss(lo, t).value) /
                       (static_cast<double>(hi.frame_probs[i]) - lo.frame_probs[i]);
    CHECK(base.grad_frame[i] == doctest::Approx(num).epsilon(1e-3).scale(1e-6));
  }
}

TEST_CASE("total loss") {
  CHECK(total_loss(0.5, 0.1) == doctest::Approx(0.7));
  CHECK(total_loss(0, 0) == 0.0);
  CHECK(total_loss(std::log(2.0), 0.001) == doctest::Approx(0.6951).epsilon(1e-4));
  CHECK(total_loss(1.0, 5.0, {1.0, 0.0}) == 1.0);
  CHECK_THROWS_AS(total_loss(std::nan(""), 0.0), RuntimeError);
  CHECK_THROWS_AS(total_loss(0.0, INFINITY), RuntimeError);
}

TEST_CASE("batch composition") {
  Rng rng(16);
  auto b = compose_batch(1, 1, 24, 24, rng);
  CHECK(b.weak == std::vector<std::size_t>(24, 0));
  CHECK(b.unlabeled == std::vector<std::size_t>(24, 0));

  Rng r1(5), r2(5);
  for (int i = 0; i < 10; ++i) {
    auto x = compose_batch(100, 50, 24, 24, r1), y = compose_batch(100, 50, 24, 24, r2);
    REQUIRE(x.weak == y.weak);
    REQUIRE(x.unlabeled == y.unlabeled);
  }

  std::vector<std::size_t> hist(10, 0);
  std::size_t draws = 0;
  for (int i = 0; i < 250; ++i) {
    auto x = compose_batch(10, 7, 24, 24, rng);
    REQUIRE(x.unlabeled.size() == 24);
    for (auto w : x.weak) ++hist[w];
    draws += x.weak.size();
  }
  CHECK(draws == 6000);
  for (auto h : hist) CHECK(std::abs(static_cast<double>(h) - 600.0) < 100.0);

  CHECK_THROWS_AS(compose_batch(0, 5, 24, 24, rng), ConfigError);
  CHECK_THROWS_AS(compose_batch(5, 0, 24, 24, rng), ConfigError);
  CHECK(compose_batch(5, 0, 24, 0, rng).unlabeled.empty());
}

TEST_CASE("collate pads to the longest clip") {
  Rng rng(17);
  ClipRecord a, b;
  a.id = "a";
  a.spectral = random_tensor<float>({8, 128}, rng);
  a.pre_audio = random_tensor<float>({2, 3}, rng);
  b.id = "b";
  b.spectral = random_tensor<float>({4, 128}, rng);
  b.pre_audio = random_tensor<float>({1, 3}, rng);
  CrnnConfig c;
  c.use_pre_audio = true;
  c.pre_audio_dim = 3;
  auto in = collate({&a, &b}, c);
  CHECK(in.spectral.shape() == Shape{2, 1, 8, 128});
  CHECK(in.pre_audio.shape() == Shape{2, 2, 3});
  CHECK(in.frames == std::vector<std::size_t>{2, 1});
  CHECK(in.spectral.at(1, 0, 3, 5) == b.spectral.at(3, 5));
  CHECK(in.spectral.at(1, 0, 4, 5) == 0.0f);
  CHECK(in.pre_audio.at(1, 1, 2) == 0.0f);
  CHECK(in.pre_visual.empty());
  c.use_pre_visual = true;
  CHECK_THROWS_AS(collate({&a}, c), DataError);
}

TEST_CASE("multi-seed selection") {
  CHECK(select_top_k({0.8, 0.6, 0.9}, 2) == std::vector<std::size_t>{2, 0});
  CHECK(select_top_k({0.5, 0.5, 0.5}, 2) == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(select_top_k({0.1}, 2), ConfigError);

  auto run = [](std::size_t i) {
    SeedOutcome o;
    o.seed = i;
    o.validation = std::vector<double>{0.8, 0.6, 0.9}[i];
    o.test.clip.f1 = 0.1 * (i + 1);
    o.test.segment.f1 = 0.2;
    o.test.event.f1 = 0.05 * i;
    return o;
  };
  auto r = multi_seed_select(3, 2, run);
  CHECK(r.selected == std::vector<std::size_t>{2, 0});
  CHECK(r.clip_f1 == doctest::Approx(0.2));
  CHECK(r.segment_f1 == doctest::Approx(0.2));
  CHECK(r.event_f1 == doctest::Approx(0.05));
  auto one = multi_seed_select(1, 1, run);
  CHECK(one.clip_f1 == run(0).test.clip.f1);
  CHECK_THROWS_AS(multi_seed_select(3, 4, run), ConfigError);
  CHECK_NOTHROW(multi_seed_select(20, 5, [](std::size_t i) { return SeedOutcome{i, 0.0, {}}; }));
}

TEST_CASE("train: zero epochs returns the initialisation") {
  auto run = tiny_run();
  run.epochs = 0;
  auto r = train(tiny_model(), run, tiny_dataset());
  CHECK(r.log.empty());
  Crnn<float> init(tiny_model());
  Rng rng = make_stream(run.seed, 0);
  init.init(rng);
  CHECK(flat_weights(r.student) == flat_weights(init));
  CHECK(flat_weights(r.teacher) == flat_weights(init));
  CHECK(format_epoch_log(r.log) == std::string(kEpochLogHeader) + "\n");
}

TEST_CASE("train: deterministic, logged, and the teacher tracks the student") {
  const auto& ds = tiny_dataset();
  auto run = tiny_run();
  std::vector<EpochRecord> seen;
  auto a = train(tiny_model(), run, ds, [&](const EpochRecord& r) { seen.push_back(r); });
  auto b = train(tiny_model(), run, ds);
  REQUIRE(a.log.size() == 2);
  CHECK(seen.size() == 2);
  CHECK(a.log[1].step == 4);
  CHECK(format_epoch_log(a.log, run.to_kv()) == format_epoch_log(b.log, run.to_kv()));
  CHECK(encode_checkpoint(a.student) == encode_checkpoint(b.student));
  CHECK(encode_checkpoint(a.teacher) == encode_checkpoint(b.teacher));
  CHECK(flat_weights(a.student) != flat_weights(a.teacher));
  for (const auto& r : a.log) {
    CHECK(r.class_loss > 0.0);
    CHECK(r.cons_loss >= 0.0);
    CHECK(r.total == doctest::Approx(r.class_loss + 2.0 * r.cons_loss));
    CHECK(r.val_clip_f1 >= 0.0);
    CHECK(r.val_clip_f1 <= 1.0);
  }
  const auto text = format_epoch_log(a.log, run.to_kv());
  CHECK(text.find("# epochs=2\n") == 0);
  CHECK(text.find(std::string(kEpochLogHeader) + "\n1\t2\t") != std::string::npos);

  run.seed = 5;
  auto c = train(tiny_model(), run, ds);
  CHECK(encode_checkpoint(c.student) != encode_checkpoint(a.student));
}

TEST_CASE("train: a zero learning rate leaves the teacher on the student") {
  auto run = tiny_run();
  run.lr.peak = 0.0;
  auto r = train(tiny_model(), run, tiny_dataset());
  auto sp = r.student.named_params();
  auto tp = r.teacher.named_params();
  for (std::size_t i = 0; i < sp.size(); ++i) CHECK(sp[i].param->value == tp[i].param->value);
}

TEST_CASE("train: supervised-only reduction and modality filters") {
  auto run = tiny_run();
  run.weights.consistency = 0.0;
  run.unlabeled_per_batch = 0;
  auto r = train(tiny_model(), run, tiny_dataset());
  for (const auto& e : r.log) {
    CHECK(e.cons_loss == 0.0);
    CHECK(e.total == e.class_loss);
  }
  CrnnConfig full = tiny_model();
  full.use_pre_audio = full.use_pre_visual = true;
  run.epochs = 1;
  CHECK_NOTHROW(train(full, run, tiny_dataset()));
  full.n_classes = 4;
  CHECK_THROWS_AS(train(full, run, tiny_dataset()), ConfigError);
}

TEST_CASE("train: a non-finite loss aborts with the batch index") {
  Dataset ds = tiny_dataset();
  for (auto& c : ds.weak.clips) c.spectral[0] = std::numeric_limits<float>::quiet_NaN();
  auto run = tiny_run();
  CHECK_THROWS_WITH_AS(train(tiny_model(), run, ds),
                       doctest::Contains("at epoch 1, batch 0 (step 0)"), RuntimeError);
}
