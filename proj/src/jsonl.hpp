#pragma once

#include <string>
#include <vector>

#include "nbest.hpp"
#include "vocab.hpp"

namespace nbr {

// JSONL n-best format, one object per line:
//   {"utt_id": ..., "ref": "space separated words",
//    "hyps": [{"text": ..., "am_score": ..., "lm_score": ...}, ...]}
// Unknown fields are ignored. This toolkit adds an optional "split" field
// ("train"/"dev"/"test") so one corpus file can carry all three subsets.

struct LoadOptions {
  // Filter by split tag. Ignored when no line in the file carries a tag, so
  // plain external files load as a whole regardless of the requested split.
  std::string split;
  // When set, a line without "ref" is an error instead of an unlabeled list.
  bool require_references = true;
};

// Loads one dataset. Oracle labels are always recomputed from the reference;
// oracle fields present in the input are ignored.
Dataset load_nbest(const std::string& path, const Vocabulary& vocab, const LoadOptions& opts = {});

// Writes lists one per line, tagging each with `split` when non-empty.
void save_nbest(const Dataset& dataset, const Vocabulary& vocab, const std::string& path,
                const std::string& split = "");

// Appends to an already-open corpus file; used to pack several splits into
// one corpus.jsonl.
void append_nbest(std::ostream& out, const Dataset& dataset, const Vocabulary& vocab,
                  const std::string& split);

}  // namespace nbr
