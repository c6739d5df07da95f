#include "dapcap/attribute_supervision.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>

namespace dapcap {

Tokens TokenizeCaption(std::string_view text) {
  Tokens tokens;
  std::string current;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else if (c >= 0x80 || std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

const StopWords& DefaultStopWords() {
  static const StopWords kWords = {
      "a",       "about",  "above",   "after",  "again",   "against", "all",
      "am",      "an",     "and",     "any",    "are",     "as",      "at",
      "be",      "because", "been",   "before", "being",   "below",   "between",
      "both",    "but",    "by",      "can",    "could",   "did",     "do",
      "does",    "doing",  "down",    "during", "each",    "few",     "for",
      "from",    "further", "had",    "has",    "have",    "having",  "he",
      "her",     "here",   "hers",    "herself", "him",    "himself", "his",
      "how",     "i",      "if",      "in",     "into",    "is",      "it",
      "its",     "itself", "just",    "me",     "more",    "most",    "my",
      "myself",  "no",     "nor",     "not",    "now",     "of",      "off",
      "on",      "once",   "only",    "or",     "other",   "our",     "ours",
      "ourselves", "out",  "over",    "own",    "same",    "she",     "should",
      "so",      "some",   "such",    "than",   "that",    "the",     "their",
      "theirs",  "them",   "themselves", "then", "there",  "these",   "they",
      "this",    "those",  "through", "to",     "too",     "under",   "until",
      "up",      "very",   "was",     "we",     "were",    "what",    "when",
      "where",   "which",  "while",   "who",    "whom",    "why",     "will",
      "with",    "would",  "you",     "your",   "yours",   "yourself",
      "yourselves"};
  return kWords;
}

StopWords LoadStopWords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open stop-word list: " + path);
  StopWords words;
  std::string line;
  while (std::getline(in, line)) {
    auto tokens = TokenizeCaption(line);
    if (line.empty() || line.front() == '#' || tokens.empty()) continue;
    for (auto& t : tokens) words.insert(std::move(t));
  }
  return words;
}

AttributeVocabulary::AttributeVocabulary(std::vector<std::string> words)
    : words_(std::move(words)) {
  for (size_t k = 0; k < words_.size(); ++k) {
    if (!index_of_.emplace(words_[k], static_cast<int>(k)).second) {
      throw std::invalid_argument("duplicate attribute word: " + words_[k]);
    }
  }
}

int AttributeVocabulary::IndexOf(const std::string& word) const {
  auto it = index_of_.find(word);
  return it == index_of_.end() ? -1 : it->second;
}

nlohmann::json AttributeVocabulary::ToJson() const {
  return {{"k", words_.size()}, {"words", words_}};
}

AttributeVocabulary AttributeVocabulary::FromJson(const nlohmann::json& doc) {
  auto words = doc.at("words").get<std::vector<std::string>>();
  if (doc.contains("k") && doc.at("k").get<size_t>() != words.size()) {
    throw std::runtime_error("attribute vocabulary: k does not match word count");
  }
  return AttributeVocabulary(std::move(words));
}

AttributeVocabulary BuildAttributeVocabulary(const std::vector<Tokens>& captions,
                                             size_t k, const StopWords& stopwords) {
  if (k == 0) throw std::invalid_argument("attribute count K must be >= 1");
  if (captions.empty()) throw std::invalid_argument("no captions to mine attributes from");

  std::map<std::string, size_t> counts;
  for (const auto& caption : captions) {
    for (const auto& token : caption) {
      if (!stopwords.contains(token)) ++counts[token];
    }
  }
  if (counts.size() < k) {
    throw std::runtime_error("only " + std::to_string(counts.size()) +
                             " distinct non-stop words available, cannot select K=" +
                             std::to_string(k));
  }

  std::vector<std::pair<std::string, size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(k);
  for (size_t i = 0; i < k; ++i) words.push_back(ranked[i].first);
  return AttributeVocabulary(std::move(words));
}

MultiHotLabel MakeMultiHotLabel(const std::vector<Tokens>& video_captions,
                                const AttributeVocabulary& vocab) {
  MultiHotLabel label;
  label.bits.assign(vocab.size(), 0);
  for (const auto& caption : video_captions) {
    for (const auto& token : caption) {
      const int k = vocab.IndexOf(token);
      if (k >= 0 && !label.bits[k]) {
        label.bits[k] = 1;
        ++label.k_pos;
      }
    }
  }
  return label;
}

}  // namespace dapcap
