#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace nbr {

// Fixed ids of the special symbols. Content tokens start at kNumSpecialTokens.
enum SpecialTokenId : int {
  kPadId = 0,
  kUnkId = 1,
  kClsId = 2,
  kSepId = 3,
  kMaskId = 4,
};
inline constexpr int kNumSpecialTokens = 5;
extern const char* const kSpecialTokenStrings[kNumSpecialTokens];

// Closed word vocabulary. The five special symbols always occupy ids 0..4 in
// the order [PAD], [UNK], [CLS], [SEP], [MASK].
class Vocabulary {
 public:
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& content_tokens);

  // Appends a content token. Duplicates are rejected.
  int add(const std::string& token);

  int size() const { return static_cast<int>(tokens_.size()); }
  int content_size() const { return size() - kNumSpecialTokens; }

  // Returns the token's id or -1 when absent.
  int id(const std::string& token) const;
  const std::string& token(int id) const;

  static bool is_special(int id) { return id >= 0 && id < kNumSpecialTokens; }
  // Structural symbols may never appear inside hypothesis or reference text.
  // [UNK] is lexical and is allowed there.
  static bool is_structural(int id) {
    return id == kPadId || id == kClsId || id == kSepId || id == kMaskId;
  }

  // FNV-1a over the token list; used to tie checkpoints to a vocabulary.
  uint64_t fingerprint() const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Whitespace tokenization; out-of-vocabulary words map to [UNK].
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

}  // namespace nbr
