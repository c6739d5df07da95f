#include "doctest.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "dapcap/caption_model.h"
#include "test_support.h"

namespace dapcap {
namespace {

using testing::ToyConfig;

TEST_CASE("encoder output shape is d_h by M*N") {
  auto config = ToyConfig();
  config.modalities = {{"a", 3}, {"b", 4}, {"c", 5}};
  CaptionModel model(config, 1);
  Rng rng(1);
  const Matrix f = model.Encode(testing::RandomInputs(config, 28, rng));
  CHECK(f.rows() == 64);
  CHECK(f.cols() == 84);

  CaptionModelConfig wide;
  wide.hidden_size = 512;
  wide.modalities = {{"image", 16}};
  wide.vocab_size = 10;
  wide.num_attributes = 5;
  CaptionModel big(wide, 2);
  CHECK(big.Encode(testing::RandomInputs(wide, 28, rng)).rows() == 512);
  CHECK(big.Encode(testing::RandomInputs(wide, 28, rng)).cols() == 28);
}

TEST_CASE("encoder columns are centred for zero input with identity projection") {
  auto config = ToyConfig();
  config.modalities = {{"image", 64}};
  CaptionModel model(config, 1);
  model.params().projections[0].fc.weight.setIdentity();
  std::vector<Matrix> inputs = {Matrix::Zero(64, 5)};
  const Matrix f = model.Encode(inputs);
  for (Eigen::Index j = 0; j < f.cols(); ++j) CHECK(std::abs(f.col(j).mean()) < 1e-12);
}

TEST_CASE("config validation") {
  auto config = ToyConfig();
  config.hidden_size = 96;
  CHECK_THROWS_AS(config.Validate(), std::invalid_argument);
  config = ToyConfig();
  CHECK(config.num_heads() == 1);
  CHECK(config.ffn_size() == 256);
  const auto back = CaptionModelConfig::FromJson(config.ToJson());
  CHECK(back.modalities == config.modalities);
  CHECK(back.vocab_size == config.vocab_size);
}

TEST_CASE("embedding columns follow the layer-norm formula") {
  const auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 4);
  const std::vector<int> ids = {1, 5, 5, 7, 5};
  const Matrix e = model.Embed(ids);
  CHECK(!e.col(1).isApprox(e.col(2)));
  const Matrix again = model.Embed(ids);
  CHECK(e == again);

  const auto& p = model.params();
  for (Eigen::Index t = 0; t < 5; ++t) {
    const Vector x = p.word_embeddings.col(ids[static_cast<size_t>(t)]) + p.position_embeddings.col(t);
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const Vector normalized = (x.array() - mu) / std::sqrt(var + 1e-5);
    CHECK(std::abs(normalized.mean()) < 1e-12);
    const Vector expected = normalized.cwiseProduct(p.embedding_ln.gain) + p.embedding_ln.bias;
    CHECK((e.col(t) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("embedding rejects positions past the maximum length") {
  CaptionModel model(ToyConfig(), 1);
  std::vector<int> ids(9, 4);
  CHECK_THROWS_AS(model.Embed(ids), std::out_of_range);
  CHECK_THROWS_AS(model.Embed(std::vector<int>{1, 11}), std::out_of_range);
}

TEST_CASE("decode step distribution is normalized and causal") {
  const auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 5);
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix f = model.Encode(testing::RandomInputs(config, 4, rng));
    std::vector<int> ids = {1};
    for (int i = 0; i < 5; ++i) ids.push_back(2 + static_cast<int>(rng.UniformInt(9)));
    const Matrix full = model.Decode(model.Embed(ids), f);

    for (size_t t = 1; t <= ids.size(); ++t) {
      const std::span<const int> prefix(ids.data(), t);
      const auto step = model.DecodeStep(model.Embed(prefix), f);
      CHECK(step.distribution.sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK((step.hidden - full.col(static_cast<Eigen::Index>(t) - 1)).cwiseAbs().maxCoeff() <
            1e-10);
    }
    // Changing a later token leaves earlier hidden states untouched.
    auto changed = ids;
    changed[4] = changed[4] == 3 ? 4 : 3;
    const Matrix altered = model.Decode(model.Embed(changed), f);
    CHECK((altered.leftCols(4) - full.leftCols(4)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((altered.col(4) - full.col(4)).cwiseAbs().maxCoeff() > 1e-8);
  }
}

TEST_CASE("decode without dropout is deterministic") {
  const auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 6);
  Rng rng(1);
  const Matrix f = model.Encode(testing::RandomInputs(config, 4, rng));
  const std::vector<int> ids = {1, 4, 5};
  const auto a = model.DecodeStep(model.Embed(ids), f);
  const auto b = model.DecodeStep(model.Embed(ids), f);
  CHECK(a.distribution == b.distribution);
  CHECK(a.hidden == b.hidden);
}

TEST_CASE("one decoder layer has 16 d^2 + 19 d parameters") {
  CHECK(DecoderLayerParameterCount(64) == 66752);
  CaptionModel model(ToyConfig(), 1);
  size_t counted = 0;
  for (const auto& t : model.params().Tensors()) {
    if (t.name.rfind("decoder.0.", 0) == 0) counted += static_cast<size_t>(t.size());
  }
  CHECK(counted == 66752);
  CHECK(DecoderLayerParameterCount(512) == 16 * 512 * 512 + 19 * 512);
}

TEST_CASE("apnet head shape") {
  auto config = ToyConfig();
  config.num_attributes = 500;
  CaptionModel model(config, 1);
  CHECK(model.params().video_apnet.weight.rows() == 500);
  CHECK(model.params().video_apnet.weight.cols() == 64);
  CHECK(model.params().video_apnet.bias.size() == 500);
}

TEST_CASE("uniform model caption loss is the sum of log |V|") {
  auto config = ToyConfig();
  config.vocab_size = 4;
  CaptionModel model(config, 1);
  model.params().head.weight.setZero();
  model.params().head.bias.setZero();
  Rng rng(2);
  const auto inputs = testing::RandomInputs(config, 4, rng);
  const std::vector<CaptionExample> batch = {{&inputs, {1, 3, 2, 0, 0, 0, 0, 0}}};
  CHECK(CaptionLoss(model, batch) == doctest::Approx(2 * std::log(4.0)).epsilon(1e-12));
  CHECK(2 * std::log(4.0) == doctest::Approx(2.7726).epsilon(1e-4));
}

TEST_CASE("padding does not contribute to the caption loss") {
  auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 7);
  Rng rng(2);
  const auto inputs = testing::RandomInputs(config, 4, rng);
  const std::vector<CaptionExample> short_batch = {{&inputs, {1, 5, 6, 2}}};
  const std::vector<CaptionExample> padded = {{&inputs, {1, 5, 6, 2, 0, 0, 0, 0}}};
  CHECK(CaptionLoss(model, short_batch) == CaptionLoss(model, padded));
  const std::vector<CaptionExample> empty = {{&inputs, {0, 0, 0}}};
  CHECK_THROWS_AS(CaptionLoss(model, empty), std::invalid_argument);
}

TEST_CASE("a dominant head bias drives the caption loss to zero") {
  auto config = ToyConfig();
  CaptionModel model(config, 1);
  model.params().head.weight.setZero();
  model.params().head.bias.setConstant(-1e3);
  model.params().head.bias[2] = 0.0;  // always EOS
  Rng rng(2);
  const auto inputs = testing::RandomInputs(config, 4, rng);
  const std::vector<CaptionExample> batch = {{&inputs, {1, 2, 0, 0}}};
  CHECK(CaptionLoss(model, batch) == doctest::Approx(0.0));
}

std::string ReadAll(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST_CASE("checkpoint round trip is bit exact") {
  testing::TempDir dir("ckpt");
  const auto config = ToyConfig();
  CaptionModel model = testing::PerturbedModel(config, 8);
  const CaptionVocabulary vocab({"a", "b", "c", "d", "e", "f", "g"});
  const AttributeVocabulary attributes({"a", "b", "c", "d", "e", "f"});
  SaveCheckpoint(dir.path() / "m.ckpt", model, vocab, attributes);
  auto loaded = LoadCheckpoint(dir.path() / "m.ckpt");
  auto original = model.params().Tensors();
  auto restored = loaded.model.params().Tensors();
  REQUIRE(original.size() == restored.size());
  for (size_t i = 0; i < original.size(); ++i) {
    CHECK(original[i].name == restored[i].name);
    CHECK(std::memcmp(original[i].data, restored[i].data,
                      static_cast<size_t>(original[i].size()) * sizeof(double)) == 0);
  }
  CHECK(loaded.caption_vocab.tokens() == vocab.tokens());
  CHECK(loaded.attribute_vocab.words() == attributes.words());

  Rng rng(3);
  const auto inputs = testing::RandomInputs(config, 4, rng);
  const std::vector<CaptionExample> batch = {{&inputs, {1, 5, 6, 2}}};
  CHECK(CaptionLoss(model, batch) == CaptionLoss(loaded.model, batch));
}

TEST_CASE("checkpoint load fails on shape mismatch and truncation") {
  testing::TempDir dir("ckptbad");
  const auto config = ToyConfig();
  CaptionModel model(config, 8);
  SaveCheckpoint(dir.path() / "m.ckpt", model, CaptionVocabulary({"a", "b", "c", "d", "e", "f", "g"}),
                 AttributeVocabulary({"a", "b", "c", "d", "e", "f"}));
  const std::string bytes = ReadAll(dir.path() / "m.ckpt");
  uint64_t header_size = 0;
  std::memcpy(&header_size, bytes.data() + 8, sizeof(header_size));
  auto header = nlohmann::json::parse(bytes.substr(16, header_size));
  const std::string data = bytes.substr(16 + header_size);

  auto write = [&](const std::string& name, const nlohmann::json& h, const std::string& payload) {
    const std::string text = h.dump();
    const uint64_t n = text.size();
    std::ofstream out(dir.path() / name, std::ios::binary);
    out.write("DAPCKPT1", 8);
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out << text << payload;
  };

  auto reshaped = header;
  reshaped["tensors"][0]["shape"] = {1, 1};
  write("shape.ckpt", reshaped, data);
  CHECK_THROWS_WITH_AS(LoadCheckpoint(dir.path() / "shape.ckpt"),
                       doctest::Contains("does not match"), std::runtime_error);

  auto resized = header;
  resized["config"]["hidden_size"] = 128;
  write("config.ckpt", resized, data);
  CHECK_THROWS_AS(LoadCheckpoint(dir.path() / "config.ckpt"), std::runtime_error);

  write("short.ckpt", header, data.substr(0, data.size() - 8));
  CHECK_THROWS_WITH_AS(LoadCheckpoint(dir.path() / "short.ckpt"), doctest::Contains("truncated"),
                       std::runtime_error);
  write("long.ckpt", header, data + "x");
  CHECK_THROWS_AS(LoadCheckpoint(dir.path() / "long.ckpt"), std::runtime_error);
  write("ok.ckpt", header, data);
  CHECK_NOTHROW(LoadCheckpoint(dir.path() / "ok.ckpt"));

  std::ofstream(dir.path() / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(LoadCheckpoint(dir.path() / "junk.ckpt"), std::runtime_error);
}

}  // namespace
}  // namespace dapcap
