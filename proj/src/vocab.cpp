#include "vocab.hpp"

#include <fstream>
#include <sstream>

#include "errors.hpp"

namespace nbr {

const char* const kSpecialTokenStrings[kNumSpecialTokens] = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

Vocabulary::Vocabulary() {
  for (int i = 0; i < kNumSpecialTokens; ++i) {
    tokens_.emplace_back(kSpecialTokenStrings[i]);
    index_.emplace(tokens_.back(), i);
  }
}

Vocabulary::Vocabulary(const std::vector<std::string>& content_tokens) : Vocabulary() {
  for (const std::string& t : content_tokens) add(t);
}

int Vocabulary::add(const std::string& token) {
  if (token.empty()) throw InvalidArgumentError("vocabulary: empty token string");
  if (index_.count(token)) {
    throw InvalidArgumentError("vocabulary: duplicate token '" + token + "'");
  }
  int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? -1 : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw StructuralError("vocabulary: token id " + std::to_string(id) + " out of range [0, " +
                          std::to_string(size()) + ")");
  }
  return tokens_[id];
}

uint64_t Vocabulary::fingerprint() const {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](unsigned char c) {
    h ^= c;
    h *= 1099511628211ull;
  };
  for (const std::string& t : tokens_) {
    for (char c : t) mix(static_cast<unsigned char>(c));
    mix('\n');
  }
  return h;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open vocabulary file for writing: " + path);
  for (const std::string& t : tokens_) out << t << '\n';
  if (!out) throw IoError("short write to vocabulary file: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocabulary file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    lines.push_back(line);
  }
  if (lines.size() < kNumSpecialTokens) {
    throw ParseError("vocabulary file too short: " + path);
  }
  for (int i = 0; i < kNumSpecialTokens; ++i) {
    if (lines[i] != kSpecialTokenStrings[i]) {
      throw ParseError("vocabulary file " + path + ": line " + std::to_string(i + 1) +
                       " must be " + kSpecialTokenStrings[i] + ", got '" + lines[i] + "'");
    }
  }
  Vocabulary v;
  for (size_t i = kNumSpecialTokens; i < lines.size(); ++i) v.add(lines[i]);
  return v;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) {
    int id = vocab.id(word);
    ids.push_back(id < 0 ? kUnkId : id);
  }
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

}  // namespace nbr
