#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nbest.hpp"
#include "rerank.hpp"

namespace nbr {

// One table row: a selection policy applied to every utterance of a dataset.
struct RerankRun {
  std::string method;
  std::string dataset_name;
  uint64_t dataset_fingerprint = 0;
  std::vector<RerankSelection> selections;
  WerStats aggregate;  // pooled counts over all utterances
  double wer = 0.0;    // percent, pooled errors / pooled reference words
  double selection_accuracy = 0.0;
  double seconds = 0.0;
  int fallback_count = 0;  // utterances where the selector failed
  bool flagged = false;    // any fallback or empty-reference utterance
};

using Selector = std::function<RerankSelection(const NBestList&)>;

// Built-in selection policies.
Selector first_selector();                 // the decoder's original 1-best
Selector oracle_selector();                // the stored oracle index
Selector worst_selector();                 // most errors; upper WER bound
Selector random_selector(uint64_t seed);   // uniform over slots, seeded

// Applies the selector to every utterance, scoring the chosen hypothesis
// against the reference. A selector failure on an utterance is recorded and
// that utterance falls back to the 1-best.
RerankRun evaluate(const Dataset& dataset, const std::string& method, const Selector& selector);

struct ReportDelta {
  std::string from, to;
  double abs_points = 0.0;  // WER_from - WER_to, percentage points
  double rel_pct = 0.0;     // 100 * (WER_from - WER_to) / WER_from
};

struct Report {
  std::string dataset;
  uint64_t dataset_fingerprint = 0;
  std::vector<RerankRun> runs;  // selections omitted when loaded from JSON
  std::vector<ReportDelta> deltas;

  nlohmann::json to_json() const;
  static Report from_json(const nlohmann::json& j);
  std::string human_table() const;
};

// Builds the method comparison across runs of the same dataset, with
// absolute and relative WER deltas for every ordered pair.
Report compare_runs(const std::vector<RerankRun>& runs);

}  // namespace nbr
