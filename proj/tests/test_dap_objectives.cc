#include "doctest.h"

#include <cmath>
#include <set>

#include "dapcap/dap_objectives.h"
#include "dapcap/mil_attribute_head.h"
#include "test_support.h"

namespace dapcap {
namespace {

using testing::Label;
using testing::ToyConfig;

TEST_CASE("sampled frame count uses the ceiling with a floor of one") {
  CHECK(SampledFrameCount(28, 0.5) == 14);
  CHECK(SampledFrameCount(5, 0.01) == 1);
  CHECK(SampledFrameCount(8, 1.0) == 8);
  CHECK(SampledFrameCount(1, 1e-9) == 1);
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const size_t n = 1 + rng.UniformInt(40);
    const double r = rng.UniformOpenClosed();
    const size_t kept = SampledFrameCount(n, r);
    CHECK(kept >= 1);
    CHECK(kept <= n);
    CHECK(kept == static_cast<size_t>(std::ceil(static_cast<double>(n) * r)));
  }
}

TEST_CASE("frame subsets are sorted and distinct") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n = 1 + rng.UniformInt(30);
    const double r = rng.UniformOpenClosed();
    const auto frames = DrawFrameSubset(n, r, rng);
    CHECK(frames.size() == SampledFrameCount(n, r));
    CHECK(std::is_sorted(frames.begin(), frames.end()));
    CHECK(std::set<int>(frames.begin(), frames.end()).size() == frames.size());
    for (int f : frames) CHECK((f >= 0 && f < static_cast<int>(n)));
  }
}

TEST_CASE("sparse sample keeps the same frames in every modality block") {
  Matrix f(2, 12);
  for (Eigen::Index j = 0; j < 12; ++j) f.col(j) << static_cast<double>(j), -static_cast<double>(j);
  const std::vector<int> frames = {1, 3};
  const Matrix s = SparseSample(f, 3, frames);
  REQUIRE(s.cols() == 6);
  const std::vector<double> expected = {1, 3, 5, 7, 9, 11};
  for (Eigen::Index j = 0; j < 6; ++j) CHECK(s(0, j) == expected[static_cast<size_t>(j)]);

  const std::vector<int> all = {0, 1, 2, 3};
  CHECK(SparseSample(f, 3, all) == f);
  Rng rng(3);
  const auto full = DrawFrameSubset(4, 1.0, rng);
  CHECK(SparseSample(f, 3, full) == f);
}

TEST_CASE("sampled fraction matches its expectation") {
  // E[ceil(28 r)] / 28 for r uniform on (0, 1]: ceil(28 r) is uniform on 1..28.
  double expectation = 0;
  for (int j = 1; j <= 28; ++j) expectation += j / 28.0 / 28.0;
  CHECK(expectation == doctest::Approx(29.0 / 56.0));

  Rng rng(4);
  double total = 0;
  for (int trial = 0; trial < 1000; ++trial) total += DrawSparseSample(28, rng).size() / 28.0;
  CHECK(std::abs(total / 1000 - expectation) <= 0.03);
}

TEST_CASE("vap in eval mode is deterministic and single frames are never dropped") {
  auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 1);
  Rng rng(5);
  const auto label = Label({1, 0, 0, 1, 0, 0});
  const Matrix f = model.Encode(testing::RandomInputs(config, 4, rng));
  CHECK(VapLoss(model, f, label) == VapLoss(model, f, label));
  CHECK(VapLoss(model, f, label) ==
        mil::AttributePredictionLoss(model.params().video_apnet, f, label).total);

  const Matrix single = model.Encode(testing::RandomInputs(config, 1, rng));
  const double direct = mil::AttributePredictionLoss(model.params().video_apnet, single, label).total;
  for (int i = 0; i < 10; ++i) CHECK(VapLoss(model, single, label, &rng) == direct);

  Rng a(9), b(9);
  CHECK(VapLoss(model, f, label, &a) == VapLoss(model, f, label, &b));
}

TEST_CASE("tap reads the non-pad caption embeddings") {
  auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 2);
  const auto label = Label({0, 1, 1, 0, 0, 0});
  const std::vector<int> caption = {1, 5, 6, 2, 0, 0, 0, 0};
  const std::vector<int> unpadded = {1, 5, 6, 2};
  const double expected =
      mil::AttributePredictionLoss(model.params().text_apnet, model.Embed(unpadded), label).total;
  CHECK(TapLoss(model, caption, label) == expected);
  CHECK(TapLoss(model, caption, label) != TapLoss(model, {{1, 7, 8, 9, 2, 0, 0, 0}}, label));
  // Only specials: BOS and EOS remain as instances.
  CHECK(std::isfinite(TapLoss(model, {{1, 2, 0, 0}}, label)));
}

struct Batch {
  std::vector<std::vector<Matrix>> inputs;
  std::vector<MultiHotLabel> labels;
  std::vector<TrainingExample> examples;
};

Batch MakeBatch(const CaptionModelConfig& config, uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.inputs = {testing::RandomInputs(config, 4, rng), testing::RandomInputs(config, 4, rng),
              testing::RandomInputs(config, 4, rng)};
  b.labels = {Label({1, 0, 1, 0, 0, 0}), Label({0, 0, 0, 0, 0, 0}), Label({0, 1, 0, 0, 0, 1})};
  b.examples = {{&b.inputs[0], {1, 4, 5, 2, 0, 0, 0, 0}, &b.labels[0], {1, 2}},
                {&b.inputs[1], {1, 6, 2, 0, 0, 0, 0, 0}, &b.labels[1], {}},
                {&b.inputs[2], {1, 7, 8, 9, 2, 0, 0, 0}, &b.labels[2], {3}}};
  return b;
}

TEST_CASE("total loss reductions") {
  const auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 3);
  const Batch b = MakeBatch(config, 1);
  const auto loss = TotalLoss(model, b.examples, {});

  // Sample 1 has no positives: excluded from the BCE mean, kept in L_reg.
  double bce = 0, reg = 0, cap = 0;
  for (size_t i : {0, 2}) {
    const Matrix f = model.Encode(*b.examples[i].inputs);
    const Matrix fs = SparseSample(f, 2, b.examples[i].frames);
    bce += mil::AttributePredictionLoss(model.params().video_apnet, fs, b.labels[i]).bce;
  }
  for (size_t i = 0; i < 3; ++i) {
    const Matrix f = model.Encode(*b.examples[i].inputs);
    Matrix fs = b.examples[i].frames.empty() ? f : SparseSample(f, 2, b.examples[i].frames);
    reg += mil::AttributePredictionLoss(model.params().video_apnet, fs, b.labels[i]).reg;
    const std::vector<CaptionExample> one = {{b.examples[i].inputs, b.examples[i].caption}};
    cap += CaptionLoss(model, one);
  }
  CHECK(loss.video_bce == doctest::Approx(bce / 2).epsilon(1e-12));
  CHECK(loss.video_reg == doctest::Approx(reg / 3).epsilon(1e-12));
  CHECK(loss.caption == doctest::Approx(cap / 3).epsilon(1e-12));
  CHECK(loss.video_ap == loss.video_bce + loss.video_reg);
  CHECK(loss.total == doctest::Approx(loss.caption + loss.video_ap + loss.text_ap).epsilon(1e-15));
}

TEST_CASE("total loss is linear in the weights") {
  const auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 4);
  const Batch b = MakeBatch(config, 2);
  const auto base = TotalLoss(model, b.examples, {{0.0, 0.0}, 1.0});
  CHECK(base.total == base.caption);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const double l1 = 3 * rng.Uniform(), l2 = 3 * rng.Uniform();
    const auto loss = TotalLoss(model, b.examples, {{l1, l2}, 1.0});
    CHECK(loss.caption == base.caption);
    CHECK(loss.total ==
          doctest::Approx(loss.caption + l1 * loss.video_ap + l2 * loss.text_ap).epsilon(1e-14));
  }
  LossBreakdown parts;
  parts.caption = 2.0, parts.video_ap = 0.5, parts.text_ap = 0.3;
  CHECK(parts.caption + 1.0 * parts.video_ap + 1.0 * parts.text_ap == doctest::Approx(2.8));
}

bool AllZero(CaptionModelParams& grad, const std::string& prefix) {
  for (const auto& t : grad.Tensors()) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    for (double v : t.values())
      if (v != 0.0) return false;
  }
  return true;
}

TEST_CASE("video and text objectives touch disjoint inputs") {
  const auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 5);
  const Batch b = MakeBatch(config, 3);

  auto grad = CaptionModelParams::Zeros(config);
  TotalLoss(model, b.examples, {{0.0, 1.0}, 0.0}, nullptr, &grad);
  CHECK(AllZero(grad, "projection."));
  CHECK(AllZero(grad, "video_apnet."));
  CHECK(AllZero(grad, "decoder."));
  CHECK(!AllZero(grad, "word_embeddings"));
  CHECK(!AllZero(grad, "text_apnet."));

  grad.SetZero();
  TotalLoss(model, b.examples, {{1.0, 0.0}, 0.0}, nullptr, &grad);
  CHECK(AllZero(grad, "word_embeddings"));
  CHECK(AllZero(grad, "position_embeddings"));
  CHECK(AllZero(grad, "embedding_ln."));
  CHECK(AllZero(grad, "text_apnet."));
  CHECK(!AllZero(grad, "projection."));

  grad.SetZero();
  TotalLoss(model, b.examples, {{0.0, 0.0}, 1.0}, nullptr, &grad);
  CHECK(AllZero(grad, "video_apnet."));
  CHECK(AllZero(grad, "text_apnet."));
}

TEST_CASE("loss breakdown json keys") {
  LossBreakdown l;
  l.caption = 1.0;
  l.video_bce = 0.25;
  const auto j = l.ToJson();
  for (const char* key : {"L", "L_cap", "L_vap", "L_tap", "L_bce", "L_reg"}) CHECK(j.contains(key));
}

}  // namespace
}  // namespace dapcap
