#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dast::gen {

// Lowercases and splits on whitespace and punctuation; each punctuation
// character becomes its own token.
std::vector<std::string> split_words(std::string_view text);

// Joins tokens with single spaces, without a space before punctuation.
std::string join_words(std::span<const std::string> words);

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::optional<std::string> source;
};

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kSep = 3;
  static constexpr std::size_t kUnk = 4;
  static constexpr std::size_t kNumSpecial = 5;

  Vocabulary();
  // Specials first, then every corpus word in sorted order.
  static Vocabulary build(std::span<const std::string> corpus);
  // Restores from the word list produced by words().
  static Vocabulary from_words(std::span<const std::string> words);

  std::size_t size() const { return words_.size(); }
  std::size_t id(std::string_view word) const;
  const std::string& word(std::size_t id) const;
  bool is_special(std::size_t id) const { return id < kNumSpecial; }
  const std::vector<std::string>& words() const { return words_; }

  // [BOS, w…, EOS].
  TokenSequence tokenize(std::string_view text) const;
  // Word ids only, no BOS/EOS.
  std::vector<std::size_t> encode_words(std::string_view text) const;
  // Skips special tokens.
  std::string detokenize(std::span<const std::size_t> ids) const;
  std::string detokenize(const TokenSequence& seq) const { return detokenize(seq.ids); }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace dast::gen
