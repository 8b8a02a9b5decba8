#include "nbest.hpp"

#include "errors.hpp"

namespace nbr {

uint64_t Dataset::fingerprint() const {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (const NBestList& l : lists) {
    for (char c : l.utterance_id) mix(static_cast<unsigned char>(c));
    mix(l.reference.size());
    for (int t : l.reference) mix(static_cast<uint64_t>(t));
    mix(l.hypotheses.size());
    for (const Hypothesis& hyp : l.hypotheses) {
      mix(hyp.tokens.size());
      for (int t : hyp.tokens) mix(static_cast<uint64_t>(t));
    }
  }
  return h;
}

WerStats word_error_rate(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
  const int r = static_cast<int>(reference.size());
  const int h = static_cast<int>(hypothesis.size());

  // Two-key DP: minimize edit cost, then maximize diagonal (match/substitute)
  // moves. Among minimum-cost alignments the diagonal count g pins all four
  // tallies — D = r - g, I = h - g, S = cost - D - I — so the S/D/I split is
  // well-defined and swapping the arguments exactly swaps D and I. A greedy
  // substitution-first backtrace alone does not guarantee that.
  std::vector<std::vector<int>> cost(r + 1, std::vector<int>(h + 1, 0));
  std::vector<std::vector<int>> diag(r + 1, std::vector<int>(h + 1, 0));
  for (int i = 0; i <= r; ++i) cost[i][0] = i;
  for (int j = 0; j <= h; ++j) cost[0][j] = j;
  for (int i = 1; i <= r; ++i) {
    for (int j = 1; j <= h; ++j) {
      const int via_diag = cost[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      const int via_del = cost[i - 1][j] + 1;
      const int via_ins = cost[i][j - 1] + 1;
      int best_cost = via_diag;
      int best_diag = diag[i - 1][j - 1] + 1;
      if (via_del < best_cost || (via_del == best_cost && diag[i - 1][j] > best_diag)) {
        best_cost = via_del;
        best_diag = diag[i - 1][j];
      }
      if (via_ins < best_cost || (via_ins == best_cost && diag[i][j - 1] > best_diag)) {
        best_cost = via_ins;
        best_diag = diag[i][j - 1];
      }
      cost[i][j] = best_cost;
      diag[i][j] = best_diag;
    }
  }

  // Backtrace, preferring substitution/match over deletion over insertion.
  WerStats stats;
  stats.ref_len = r;
  int i = r, j = h;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const int step = reference[i - 1] == hypothesis[j - 1] ? 0 : 1;
      if (cost[i][j] == cost[i - 1][j - 1] + step && diag[i][j] == diag[i - 1][j - 1] + 1) {
        stats.substitutions += step;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && cost[i][j] == cost[i - 1][j] + 1 && diag[i][j] == diag[i - 1][j]) {
      ++stats.deletions;
      --i;
      continue;
    }
    ++stats.insertions;
    --j;
  }
  return stats;
}

int oracle_index(NBestList& list) {
  if (list.hypotheses.empty()) {
    throw StructuralError("utterance '" + list.utterance_id + "': empty hypothesis list");
  }
  if (!list.has_reference) {
    throw StructuralError("utterance '" + list.utterance_id + "': oracle requires a reference");
  }
  int best = 0;
  long long best_errors = -1;
  for (size_t i = 0; i < list.hypotheses.size(); ++i) {
    WerStats s = word_error_rate(list.reference, list.hypotheses[i].tokens);
    list.hypotheses[i].wer_stats = s;
    // Equal ref_len across the list, so comparing raw error counts is the
    // exact WER comparison and sidesteps floating-point ties.
    if (best_errors < 0 || s.errors() < best_errors) {
      best_errors = s.errors();
      best = static_cast<int>(i);
    }
  }
  return best;
}

void relabel_oracles(Dataset& dataset) {
  for (NBestList& list : dataset.lists) {
    if (list.has_reference) {
      list.oracle = oracle_index(list);
    } else {
      list.oracle = -1;
    }
  }
}

}  // namespace nbr
