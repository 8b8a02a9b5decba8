#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace nbr {

struct WerStats {
  long long substitutions = 0;
  long long deletions = 0;
  long long insertions = 0;
  long long ref_len = 0;

  long long errors() const { return substitutions + deletions + insertions; }

  // Empty-reference convention: the denominator is clamped to 1, so a
  // nonempty hypothesis against an empty reference scores WER = insertions.
  // Such utterances are flagged in evaluation reports.
  double wer() const {
    return static_cast<double>(errors()) / static_cast<double>(ref_len > 0 ? ref_len : 1);
  }

  bool operator==(const WerStats&) const = default;
};

struct Hypothesis {
  std::vector<int> tokens;  // content ids; structural specials forbidden, [UNK] allowed
  double am_score = 0.0;    // log-domain acoustic score
  double lm_score = 0.0;    // log-domain language-model score
  std::optional<WerStats> wer_stats;
};

struct NBestList {
  std::string utterance_id;
  std::vector<int> reference;
  bool has_reference = true;
  std::vector<Hypothesis> hypotheses;
  int oracle = -1;  // smallest index with minimal WER; -1 when unlabeled
};

struct Dataset {
  std::string name;
  std::vector<NBestList> lists;

  // Content identity used to reject comparisons across different datasets.
  uint64_t fingerprint() const;
};

// Minimum-edit-distance alignment with unit costs. Ties among minimum-cost
// alignments are resolved by preferring substitution over deletion over
// insertion: the alignment maximizing match/substitution moves is chosen,
// which uniquely determines the S/D/I counts and makes them symmetric
// (swapping the arguments swaps D and I exactly).
WerStats word_error_rate(const std::vector<int>& reference, const std::vector<int>& hypothesis);

// Smallest index achieving the minimum WER over the list. Fills wer_stats on
// every hypothesis as a side effect of scoring.
int oracle_index(NBestList& list);

// Recomputes wer_stats and the oracle label for every list that has a
// reference; lists without references keep oracle = -1.
void relabel_oracles(Dataset& dataset);

}  // namespace nbr
