#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

namespace dapcap {

using Tokens = std::vector<std::string>;
using StopWords = std::unordered_set<std::string>;

// Lowercases ASCII letters, drops punctuation and splits on whitespace.
// Bytes >= 0x80 (UTF-8 continuation/lead bytes) are kept verbatim.
Tokens TokenizeCaption(std::string_view text);

// A common English stop-word list used when no list is supplied.
const StopWords& DefaultStopWords();

// Reads one word per line; blank lines and lines starting with '#' skipped.
StopWords LoadStopWords(const std::string& path);

// The K most frequent non-stop caption words, used as weak video labels.
class AttributeVocabulary {
 public:
  AttributeVocabulary() = default;
  explicit AttributeVocabulary(std::vector<std::string> words);

  size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(size_t k) const { return words_.at(k); }

  // -1 when the word is not an attribute.
  int IndexOf(const std::string& word) const;

  nlohmann::json ToJson() const;
  static AttributeVocabulary FromJson(const nlohmann::json& doc);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_of_;
};

struct MultiHotLabel {
  std::vector<unsigned char> bits;
  size_t k_pos = 0;

  size_t size() const { return bits.size(); }
  bool operator==(const MultiHotLabel&) const = default;
};

// Counts raw token frequency over every caption; ties are broken by
// ascending lexicographic order. Throws std::invalid_argument when K is 0 or
// the corpus is empty, and std::runtime_error when fewer than K distinct
// non-stop tokens exist.
AttributeVocabulary BuildAttributeVocabulary(const std::vector<Tokens>& captions,
                                             size_t k, const StopWords& stopwords);

// bits[k] = 1 iff attribute k occurs in any of the video's captions.
MultiHotLabel MakeMultiHotLabel(const std::vector<Tokens>& video_captions,
                                const AttributeVocabulary& vocab);

}  // namespace dapcap
