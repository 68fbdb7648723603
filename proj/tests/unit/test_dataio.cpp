// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "avsed/checkpoint.hpp"
#include "avsed/dataio.hpp"
#include "avsed/errors.hpp"
#include "avsed/kv.hpp"
#include "test_util.hpp"

using namespace avsed;
using avsed::testing::random_tensor;
using avsed::testing::TempDir;
namespace fs = std::filesystem;

namespace {

Vocabulary animals() { return Vocabulary({"Dog", "Cat", "Speech"}); }

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file())
      files[fs::relative(e.path(), dir).string()] = read_text_file(e.path());
  return files;
}

SynthSpec tiny_spec() {
  SynthSpec s;
  s.n_weak = 4;
  s.n_unlabeled = 3;
  s.n_val = 3;
  s.n_test = 2;
  s.clip_duration = 2.5;
  s.pre_visual_dim = 16;
  s.pre_audio_dim = 8;
  s.event_len_max = 1.5;
  s.seed = 42;
  return s;
}

}  // namespace

TEST_CASE("feature container: pinned byte layout") {
  Tensor<float> t({2}, std::vector<float>{1.0f, -2.0f});
  const std::string bytes = encode_feature_container({{"a", t}});
  const unsigned char expect[] = {'F', 'T', 'B', '1', '\n', 1, 0, 0, 0,   1,    0,
                                  'a', 1,   2,   0,   0,    0, 0, 0, 0x80, 0x3f, 0,
                                  0,   0,   0xc0};
  REQUIRE(bytes.size() == sizeof expect);
  CHECK(std::memcmp(bytes.data(), expect, sizeof expect) == 0);
}

TEST_CASE("feature container: round trips") {
  Rng rng(1);
  auto t = random_tensor<float>({2, 3}, rng);
  auto back = decode_feature_container(encode_feature_container({{"x", t}}));
  REQUIRE(back.size() == 1);
  CHECK(back[0].name == "x");
  CHECK(back[0].tensor == t);

  const std::string empty = encode_feature_container({});
  CHECK(empty.size() == 9);
  CHECK(decode_feature_container(empty).empty());

  // Bit-exact for special values, including NaN payloads and signed zero.
  Tensor<float> special({6});
  special[0] = -0.0f;
  special[1] = std::numeric_limits<float>::infinity();
  special[2] = std::numeric_limits<float>::quiet_NaN();
  special[3] = std::numeric_limits<float>::denorm_min();
  special[4] = std::numeric_limits<float>::max();
  special[5] = -1.5e-30f;
  const std::string bytes = encode_feature_container(
      {{"special", special}, {"m", random_tensor<float>({3, 1, 4}, rng)}});
  CHECK(encode_feature_container(decode_feature_container(bytes)) == bytes);

  TempDir tmp("ftb");
  write_feature_file(tmp / "a.ftb", {{"x", t}});
  CHECK(read_feature_file(tmp / "a.ftb")[0].tensor == t);
}

TEST_CASE("feature container: random round-trip property") {
  Rng rng(2);
  std::uniform_int_distribution<int> nrec(0, 4), nd(1, 4), ext(1, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<NamedTensor> recs;
    for (int r = nrec(rng); r > 0; --r) {
      Shape s;
      for (int d = nd(rng); d > 0; --d) s.push_back(ext(rng));
      recs.push_back({"rec/" + std::to_string(r), random_tensor<float>(s, rng, -1e6, 1e6)});
    }
    const auto bytes = encode_feature_container(recs);
    const auto back = decode_feature_container(bytes);
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
      CHECK(back[i].name == recs[i].name);
      CHECK(back[i].tensor == recs[i].tensor);
    }
    CHECK(encode_feature_container(back) == bytes);
  }
}

TEST_CASE("feature container: errors carry byte offsets") {
  CHECK_THROWS_WITH_AS(decode_feature_container("XXXX\n\0\0\0\0"),
                       "bad magic at offset 0", ParseError);
  CHECK_THROWS_WITH_AS(decode_feature_container("FT"), "bad magic at offset 0",
                       ParseError);
  Tensor<float> t({2, 2}, 1.0f);
  std::string bytes = encode_feature_container({{"w", t}});
  CHECK_THROWS_WITH_AS(decode_feature_container(bytes.substr(0, bytes.size() - 3)),
                       doctest::Contains("truncated payload at offset"), ParseError);
  CHECK_THROWS_WITH_AS(decode_feature_container(bytes + "z"),
                       doctest::Contains("trailing bytes at offset 37"), ParseError);

  // Two records named "w": patch the count of a two-record container.
  std::string dup = encode_feature_container({{"w", t}, {"v", t}});
  dup[dup.size() - 16 - 4 * 2 - 1 - 1] = 'w';
  CHECK_THROWS_WITH_AS(decode_feature_container(dup),
                       doctest::Contains("duplicate record name 'w' at offset 37"),
                       ParseError);
  CHECK_THROWS_AS(encode_feature_container({{"w", t}, {"w", t}}), DataError);
  CHECK_THROWS_AS(encode_feature_container({{"caf\xc3\xa9", t}}), DataError);
}

TEST_CASE("strong TSV parsing") {
  const auto v = animals();
  auto a = parse_strong_tsv("a.wav\t0.5\t2.0\tDog\n", v);
  REQUIRE(a.clips == std::vector<std::string>{"a.wav"});
  REQUIRE(a.events["a.wav"].size() == 1);
  CHECK(a.events["a.wav"][0] == Event{0.5, 2.0, 0});
  CHECK(parse_strong_tsv("", v).clips.empty());
  CHECK_THROWS_WITH_AS(parse_strong_tsv("a.wav\t2.0\t1.0\tDog\n", v),
                       "offset before onset, line 1", ParseError);
  CHECK_THROWS_WITH_AS(parse_strong_tsv("a.wav\t0\t1\tBird\n", v),
                       doctest::Contains("vocabulary: Dog,Cat,Speech"), DataError);

  auto h = parse_strong_tsv(std::string(kStrongHeader) +
                                "\nb\t1\t2\tCat\na\t0\t1\tDog\nb\t3\t4\tSpeech\nc\t\t\t\n",
                            v);
  CHECK(h.clips == std::vector<std::string>{"b", "a", "c"});
  CHECK(h.events["b"].size() == 2);
  CHECK(h.events["c"].empty());
  CHECK_THROWS_WITH_AS(parse_strong_tsv("a\t1\t2\n", v),
                       doctest::Contains("line 1"), ParseError);
  CHECK_THROWS_WITH_AS(parse_strong_tsv("a\t1\t2\tDog\na\tx\t2\tDog\n", v),
                       doctest::Contains("bad onset 'x', line 2"), ParseError);
}

TEST_CASE("strong TSV round trip is value-exact") {
  const auto v = animals();
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 30.0);
  std::uniform_int_distribution<std::size_t> cls(0, 2);
  for (int trial = 0; trial < 100; ++trial) {
    StrongAnnotations ann;
    for (int c = 0; c < 4; ++c) {
      const std::string id = "clip" + std::to_string(c) + ".wav";
      ann.add_clip(id);
      for (int e = trial % 3 + c % 2; e > 0; --e) {
        const double on = u(rng);
        ann.events[id].push_back({on, on + u(rng) + 1e-3, cls(rng)});
      }
    }
    const auto back = parse_strong_tsv(format_strong_tsv(ann, v), v);
    CHECK(back.clips == ann.clips);
    CHECK(back.events == ann.events);
  }
}

TEST_CASE("weak TSV parsing and round trip") {
  const auto v = animals();
  auto a = parse_weak_tsv("a.wav\tDog,Cat\n", v);
  CHECK(a.labels["a.wav"] == std::set<std::size_t>{0, 1});
  CHECK(parse_weak_tsv("a.wav\tDog,Dog\n", v).labels["a.wav"] ==
        std::set<std::size_t>{0});
  CHECK(parse_weak_tsv("a.wav\tCat,Dog\n", v).labels ==
        parse_weak_tsv("a.wav\tDog,Cat\n", v).labels);
  CHECK_THROWS_WITH_AS(parse_weak_tsv("a.wav\t\n", v), "no labels, line 1",
                       ParseError);
  CHECK(parse_weak_tsv("a.wav\t\n", v, true).labels["a.wav"].empty());
  CHECK_THROWS_AS(parse_weak_tsv("a\tDog\na\tCat\n", v), ParseError);

  WeakAnnotations w;
  w.clips = {"z", "y"};
  w.labels["z"] = {2, 0};
  w.labels["y"] = {1};
  const auto text = format_weak_tsv(w, v);
  CHECK(text == "z\tDog,Speech\ny\tCat\n");
  CHECK(parse_weak_tsv(std::string(kWeakHeader) + "\n" + text, v).labels == w.labels);
  const auto back = parse_weak_tsv(text, v);
  CHECK(back.clips == w.clips);
  CHECK(back.labels == w.labels);
}

TEST_CASE("synthesis: counts, determinism, weak projection") {
  SynthSpec s = tiny_spec();
  s.n_weak = 2;
  s.n_unlabeled = 0;
  s.events_min = s.events_max = 1;
  TempDir a("synA"), b("synB");
  auto summary = synthesize_dataset(s, a.path());
  CHECK(summary.clips_per_partition["weak"] == 2);
  std::size_t weak_files = 0;
  for (const auto& e : fs::directory_iterator(a / "features"))
    if (e.path().filename().string().rfind("weak_", 0) == 0) ++weak_files;
  CHECK(weak_files == 2);
  const auto weak_text = read_text_file(a / "weak.tsv");
  CHECK(std::count(weak_text.begin(), weak_text.end(), '\n') == 2);

  synthesize_dataset(s, b.path());
  CHECK(snapshot(a.path()) == snapshot(b.path()));

  SynthSpec other = s;
  other.seed = 43;
  TempDir c("synC");
  synthesize_dataset(other, c.path());
  CHECK(snapshot(a.path()) != snapshot(c.path()));
}

TEST_CASE("synthesis: load, alignment, partition contract") {
  TempDir dir("synL");
  const SynthSpec s = tiny_spec();
  synthesize_dataset(s, dir.path());
  const Dataset ds = load_split(dir.path());
  CHECK(ds.warnings.empty());
  CHECK(ds.weak.clips.size() == 4);
  CHECK(ds.unlabeled.clips.size() == 3);
  CHECK(ds.val.clips.size() == 3);
  CHECK(ds.test.clips.size() == 2);
  CHECK(ds.info.vocab.size() == 10);
  for (const Partition* p : {&ds.weak, &ds.unlabeled, &ds.val, &ds.test})
    for (const auto& c : p->clips) {
      CHECK(c.spectral.dim(0) == 4 * c.pre_audio.dim(0));
      CHECK(c.pre_visual.dim(0) == c.pre_audio.dim(0));
      CHECK(c.spectral.dim(1) == 128);
      CHECK(c.pre_visual.dim(1) == 16);
    }
  CHECK(ds.weak.strong.empty());
  CHECK(ds.unlabeled.strong.empty());
  CHECK(ds.unlabeled.weak_labels.empty());
  CHECK(ds.val.weak_labels.empty());
  CHECK(ds.val.strong.size() == 3);
  CHECK(ds.test.strong.size() == 2);

  // Weak labels are exactly the classes present in the hidden truth.
  const auto truth = load_hidden_truth(dir.path(), ds.info.vocab);
  CHECK(truth.clips.size() == 12);
  for (const auto& [clip, labels] : ds.weak.weak_labels) {
    std::set<std::size_t> from_truth;
    for (const auto& e : truth.events.at(clip)) from_truth.insert(e.cls);
    CHECK(labels == from_truth);
    CHECK_FALSE(labels.empty());
  }
  for (const auto& [clip, events] : ds.val.strong) {
    CHECK(events == truth.events.at(clip));
    for (const auto& e : events) {
      CHECK(e.onset >= 0.0);
      CHECK(e.offset > e.onset);
      CHECK(e.offset <= ds.val.durations.at(clip) + 1e-9);
    }
  }
}

TEST_CASE("synthesis: tampered pretrained length is an alignment error") {
  TempDir dir("synT");
  SynthSpec s = tiny_spec();
  s.clip_duration = 10.0;
  s.short_fraction = 0.0;
  s.n_weak = 1;
  s.n_unlabeled = s.n_val = s.n_test = 0;
  synthesize_dataset(s, dir.path());
  const fs::path f = dir / "features" / "weak_00000.ftb";
  auto recs = read_feature_file(f);
  for (auto& r : recs)
    if (r.name == "pre_audio") {
      CHECK(r.tensor.dim(0) == 151);
      Tensor<float> cut({150, r.tensor.dim(1)});
      std::copy(r.tensor.ptr(), r.tensor.ptr() + cut.size(), cut.ptr());
      r.tensor = cut;
    }
  write_feature_file(f, recs);
  CHECK_THROWS_WITH_AS(load_partition(dir.path(), "weak"),
                       doctest::Contains("alignment violation: expected 151, got 150"),
                       AlignmentError);
  fs::remove(f);
  CHECK_THROWS_WITH_AS(load_partition(dir.path(), "weak"),
                       doctest::Contains("weak_00000"), DataError);
}

TEST_CASE("synthesis: invalid specs") {
  TempDir dir("synE");
  SynthSpec s = tiny_spec();
  s.n_weak = 0;
  CHECK_THROWS_WITH_AS(synthesize_dataset(s, dir.path()),
                       doctest::Contains("weak pool required"), ConfigError);
  s = tiny_spec();
  s.event_len_min = 3.0;
  s.event_len_max = 4.0;
  CHECK_THROWS_AS(synthesize_dataset(s, dir.path()), ConfigError);
  s = tiny_spec();
  s.events_min = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("synthesis: nearest-template classifier separates high-SNR frames") {
  TempDir dir("synS");
  SynthSpec s = tiny_spec();
  s.spectral_snr = 6.0;
  s.n_weak = 20;
  s.n_unlabeled = s.n_val = s.n_test = 0;
  synthesize_dataset(s, dir.path());
  const auto sig = synth_signatures(s);
  const Dataset ds = [&] {
    Dataset d;
    d.weak = load_partition(dir.path(), "weak", &d.info);
    return d;
  }();
  const auto truth = load_hidden_truth(dir.path(), ds.info.vocab);
  const std::size_t n = 10;
  std::size_t correct = 0, total = 0;
  for (const auto& clip : ds.weak.clips) {
    const auto& events = truth.events.at(clip.id);
    for (std::size_t t = 0; t < clip.spectral.dim(0); ++t) {
      const double f0 = t / kSpectralFrameRate, f1 = (t + 1) / kSpectralFrameRate;
      for (std::size_t c = 0; c < n; ++c) {
        double dot = 0.0, norm = 0.0;
        for (std::size_t b = 0; b < 128; ++b) {
          dot += clip.spectral.at(t, b) * sig.spectral.at(c, b);
          norm += sig.spectral.at(c, b) * sig.spectral.at(c, b);
        }
        // Least-squares amplitude along the template, thresholded at half SNR.
        const bool predicted = dot / norm > 0.5 * s.spectral_snr * s.noise;
        bool active = false;
        for (const auto& e : events)
          if (e.cls == c && std::min(f1, e.offset) - std::max(f0, e.onset) > 1e-9)
            active = true;
        correct += predicted == active;
        ++total;
      }
    }
  }
  CHECK(static_cast<double>(correct) / total >= 0.99);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(5);
  CrnnConfig c;
  c.use_pre_audio = c.use_pre_visual = true;
  c.n_classes = 4;
  c.pre_audio_dim = 8;
  c.pre_visual_dim = 16;
  c.gru_hidden = 6;
  Crnn<float> m(c);
  m.init(rng);
  for (auto& b : m.named_buffers())
    for (auto& v : b.tensor->data()) v = std::uniform_real_distribution<float>(0.5f, 1.5f)(rng);

  TempDir dir("ckpt");
  save_checkpoint(dir / "m.ftb", m, {{"role", "student"}, {"classes", "a,b,c,d"}});
  auto loaded = load_checkpoint(dir / "m.ftb");
  CHECK(loaded.meta.at("role") == "student");
  CHECK(loaded.meta.at("fusion_order") == "spectral,pre_audio,pre_visual");
  CHECK(loaded.model.config().to_kv() == c.to_kv());
  auto pa = m.named_params();
  auto pb = loaded.model.named_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].param->value == pb[i].param->value);
  CHECK(encode_checkpoint(loaded.model, {{"role", "student"}, {"classes", "a,b,c,d"}}) ==
        read_text_file(dir / "m.ftb"));

  ModelInput<float> in;
  in.spectral = random_tensor<float>({1, 1, 8, 128}, rng);
  in.pre_audio = random_tensor<float>({1, 2, 8}, rng);
  in.pre_visual = random_tensor<float>({1, 2, 16}, rng);
  CHECK(m.forward(in, {}).clip_probs == loaded.model.forward(in, {}).clip_probs);

  auto recs = read_feature_file(dir / "m.ftb");
  recs.pop_back();
  write_feature_file(dir / "bad.ftb", recs);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "bad.ftb"), doctest::Contains("missing tensor"),
                       DataError);
  CHECK_THROWS_AS(load_checkpoint(dir / "none.ftb"), DataError);
}
