#include "generator/vocab.hpp"

#include <cctype>
#include <set>
#include <stdexcept>

namespace dast::gen {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    const bool punct = w.size() == 1 && std::ispunct(static_cast<unsigned char>(w[0]));
    if (!out.empty() && !punct) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"}) {
    index_.emplace(s, words_.size());
    words_.emplace_back(s);
  }
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus) {
  std::set<std::string> seen;
  for (const auto& text : corpus)
    for (auto& w : split_words(text)) seen.insert(std::move(w));
  Vocabulary v;
  for (const auto& w : seen) {
    if (v.index_.count(w)) continue;
    v.index_.emplace(w, v.words_.size());
    v.words_.push_back(w);
  }
  return v;
}

Vocabulary Vocabulary::from_words(std::span<const std::string> words) {
  Vocabulary v;
  if (words.size() < kNumSpecial) throw std::invalid_argument("vocabulary: word list lacks special tokens");
  for (std::size_t i = 0; i < kNumSpecial; ++i) {
    if (words[i] != v.words_[i]) throw std::invalid_argument("vocabulary: special tokens out of order");
  }
  for (std::size_t i = kNumSpecial; i < words.size(); ++i) {
    if (!v.index_.emplace(words[i], v.words_.size()).second) {
      throw std::invalid_argument("vocabulary: duplicate word '" + words[i] + "'");
    }
    v.words_.push_back(words[i]);
  }
  return v;
}

std::size_t Vocabulary::id(std::string_view word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(std::size_t id) const {
  if (id >= words_.size()) throw std::out_of_range("vocabulary id " + std::to_string(id) + " out of range");
  return words_[id];
}

std::vector<std::size_t> Vocabulary::encode_words(std::string_view text) const {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

TokenSequence Vocabulary::tokenize(std::string_view text) const {
  TokenSequence seq;
  seq.source = std::string(text);
  seq.ids.push_back(kBos);
  for (auto i : encode_words(text)) seq.ids.push_back(i);
  seq.ids.push_back(kEos);
  return seq;
}

std::string Vocabulary::detokenize(std::span<const std::size_t> ids) const {
  std::vector<std::string> words;
  for (auto i : ids) {
    if (is_special(i)) continue;
    words.push_back(word(i));
  }
  return join_words(words);
}

}  // namespace dast::gen
