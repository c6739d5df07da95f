#include "doctest.h"

#include <fstream>
#include <iterator>
#include <set>

#include <Eigen/Dense>

#include "dapcap/attribute_supervision.h"
#include "dapcap/data_io.h"
#include "test_support.h"

namespace dapcap {
namespace {

namespace fs = std::filesystem;

std::string ReadBytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
}

TEST_CASE("feature files round trip") {
  testing::TempDir dir("features");
  FeatureMatrix m(3, 2);
  m << 1.5f, -2.f, 0.f, 3.25f, 1e-3f, 7.f;
  WriteFeatureFile(dir.path() / "x.f32", m);
  CHECK(fs::file_size(dir.path() / "x.f32") == 24);
  CHECK(ReadFeatureFile(dir.path() / "x.f32") == m);
}

TEST_CASE("manifest loads features and zero-fills null modalities") {
  testing::TempDir dir("manifest");
  FeatureMatrix image = FeatureMatrix::Constant(28, 4, 0.5f);
  WriteFeatureFile(dir.path() / "v0.image.f32", image);
  WriteText(dir.path() / "m.jsonl",
            R"({"video_id":"v0","split":"train","features":{"image":"v0.image.f32","audio":null},)"
            R"("dims":{"audio":3},"captions":["a man runs"],"category":4})"
            "\n");
  const auto records = LoadManifest(dir.path() / "m.jsonl");
  REQUIRE(records.size() == 1);
  const auto& r = records[0];
  CHECK(r.video_id == "v0");
  CHECK(r.category == 4);
  CHECK(r.feature("image").rows() == 28);
  CHECK(r.feature("audio").rows() == 28);
  CHECK(r.feature("audio").cols() == 3);
  CHECK(r.feature("audio").isZero());
  CHECK(r.num_frames() == 28);
}

TEST_CASE("manifest rejects mismatched frame counts") {
  testing::TempDir dir("mismatch");
  WriteFeatureFile(dir.path() / "i.f32", FeatureMatrix::Zero(28, 4));
  WriteFeatureFile(dir.path() / "m.f32", FeatureMatrix::Zero(27, 4));
  WriteText(dir.path() / "m.jsonl",
            R"({"video_id":"bad","features":{"image":"i.f32","motion":"m.f32"},"captions":[]})"
            "\n");
  CHECK_THROWS_WITH_AS(LoadManifest(dir.path() / "m.jsonl"), doctest::Contains("bad"),
                       std::runtime_error);
}

TEST_CASE("split labels") {
  CHECK(ParseSplit("train") == Split::kTrain);
  CHECK(ParseSplit("val") == Split::kValidation);
  CHECK(ParseSplit("validation") == Split::kValidation);
  CHECK(ParseSplit("test") == Split::kTest);
  CHECK_THROWS_AS(ParseSplit("dev"), std::invalid_argument);
}

TEST_CASE("caption vocabulary thresholds by count") {
  auto vocab = BuildCaptionVocabulary({"a man", "a man"}, 2);
  CHECK(vocab.tokens() == std::vector<std::string>{"<pad>", "<bos>", "<eos>", "<unk>", "a", "man"});

  CHECK(BuildCaptionVocabulary({}, 1).size() == 4);

  vocab = BuildCaptionVocabulary({"a man", "a dog"}, 2);
  CHECK(vocab.Id("dog") == CaptionVocabulary::kUnk);
  CHECK(vocab.Id("a") == 4);
  CHECK(CaptionVocabulary::FromJson(vocab.ToJson()).tokens() == vocab.tokens());
}

TEST_CASE("encode caption framing and truncation") {
  const auto vocab = BuildCaptionVocabulary({"a man runs", "a man runs"}, 1);
  const auto empty = EncodeCaption("", vocab, 30);
  REQUIRE(empty.size() == 30);
  CHECK(empty[0] == CaptionVocabulary::kBos);
  CHECK(empty[1] == CaptionVocabulary::kEos);
  for (size_t i = 2; i < 30; ++i) CHECK(empty[i] == CaptionVocabulary::kPad);

  std::string long_caption;
  for (int i = 0; i < 40; ++i) long_caption += i % 2 ? "man " : "runs ";
  const auto truncated = EncodeCaption(long_caption, vocab, 30);
  CHECK(truncated.size() == 30);
  CHECK(truncated.back() == CaptionVocabulary::kEos);

  CHECK(DecodeCaption(EncodeCaption("A man runs.", vocab, 30), vocab) == "a man runs");
}

TEST_CASE("encoded length and first pad position") {
  const auto vocab = BuildCaptionVocabulary({"x y z"}, 1);
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const size_t t_max = 2 + rng.UniformInt(10);
    const size_t words = rng.UniformInt(15);
    std::string text;
    for (size_t i = 0; i < words; ++i) text += std::string(1, "xyzq"[rng.UniformInt(4)]) + " ";
    const auto ids = EncodeCaption(text, vocab, t_max);
    REQUIRE(ids.size() == t_max);
    const auto first_pad = std::find(ids.begin(), ids.end(), CaptionVocabulary::kPad) - ids.begin();
    CHECK(static_cast<size_t>(first_pad) == std::min(words + 2, t_max));
    if (words + 2 <= t_max - 1 && text.find('q') == std::string::npos) {
      CHECK(TokenizeCaption(DecodeCaption(ids, vocab)) == TokenizeCaption(text));
    }
  }
}

TEST_CASE("synthetic dataset shape and determinism") {
  SyntheticConfig config;
  const auto a = GenerateSyntheticDataset(config);
  REQUIRE(a.size() == 50);
  for (const auto& r : a) {
    CHECK(r.num_frames() == 8);
    CHECK(r.features.size() == 2);
    CHECK(r.captions.size() == 3);
  }
  testing::TempDir d1("syn1"), d2("syn2");
  WriteDataset(a, d1.path());
  WriteDataset(GenerateSyntheticDataset(config), d2.path());
  for (const auto& entry : fs::recursive_directory_iterator(d1.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), d1.path());
    CHECK(ReadBytes(entry.path()) == ReadBytes(d2.path() / rel));
  }
  const auto reloaded = LoadManifest(d1.path() / "manifest.jsonl");
  REQUIRE(reloaded.size() == a.size());
  CHECK(reloaded[7].feature("image") == a[7].feature("image"));
  CHECK(reloaded[7].captions == a[7].captions);

  config.seed = 14;
  CHECK(GenerateSyntheticDataset(config)[0].feature("image") != a[0].feature("image"));
}

TEST_CASE("synthetic vocabulary covers the 20 word pool") {
  const auto records = GenerateSyntheticDataset({});
  std::vector<std::string> train;
  for (const auto* r : SelectSplit(records, Split::kTrain))
    train.insert(train.end(), r->captions.begin(), r->captions.end());
  CHECK(BuildCaptionVocabulary(train, 2).size() == 24);
}

// Brute-force AP: precision at the rank of every positive, ties by index.
double ProbeAp(const Eigen::VectorXd& s, const std::vector<int>& pos) {
  std::vector<int> order(s.size());
  for (int i = 0; i < s.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return s[a] > s[b]; });
  double hits = 0, sum = 0;
  for (size_t r = 0; r < order.size(); ++r) {
    if (pos[order[r]]) sum += ++hits / static_cast<double>(r + 1);
  }
  return hits > 0 ? sum / hits : -1;
}

TEST_CASE("noiseless synthetic attributes are linearly decodable") {
  SyntheticConfig config;
  config.noise = 0.0;
  const auto records = GenerateSyntheticDataset(config);
  const AttributeVocabulary vocab(DefaultSyntheticWords());
  const auto n = static_cast<Eigen::Index>(records.size());
  Eigen::MatrixXd x(n, 32 + 24 + 1);
  Eigen::MatrixXd y(n, 20);
  for (Eigen::Index v = 0; v < n; ++v) {
    const auto& r = records[static_cast<size_t>(v)];
    x.row(v) << r.feature("image").cast<double>().colwise().mean(),
        r.feature("motion").cast<double>().colwise().mean(), 1.0;
    std::vector<Tokens> tokens;
    for (const auto& c : r.captions) tokens.push_back(TokenizeCaption(c));
    const auto label = MakeMultiHotLabel(tokens, vocab);
    CHECK(label.k_pos == 2);
    for (int k = 0; k < 20; ++k) y(v, k) = label.bits[static_cast<size_t>(k)];
  }
  const Eigen::MatrixXd w = x.completeOrthogonalDecomposition().solve(y);
  const Eigen::MatrixXd scores = x * w;
  double total = 0;
  int counted = 0;
  for (int k = 0; k < 20; ++k) {
    std::vector<int> pos(static_cast<size_t>(n));
    for (Eigen::Index v = 0; v < n; ++v) pos[static_cast<size_t>(v)] = y(v, k) > 0.5;
    const double ap = ProbeAp(scores.col(k), pos);
    if (ap >= 0) total += ap, ++counted;
  }
  CHECK(counted == 20);
  CHECK(total / counted == doctest::Approx(1.0).epsilon(1e-12));
}

}  // namespace
}  // namespace dapcap
