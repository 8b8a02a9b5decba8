#include "jsonl.hpp"

#include <fstream>
#include <ostream>

#include <json.hpp>

#include "errors.hpp"

namespace nbr {
namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& path, size_t line_no, const std::string& what) {
  throw ParseError(path + " line " + std::to_string(line_no) + ": " + what);
}

std::vector<int> tokenize_checked(const std::string& path, size_t line_no, const std::string& field,
                                  const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids = tokenize(text, vocab);
  for (int id : ids) {
    if (Vocabulary::is_structural(id)) {
      fail(path, line_no, "field '" + field + "' contains the reserved symbol " + vocab.token(id));
    }
  }
  return ids;
}

}  // namespace

Dataset load_nbest(const std::string& path, const Vocabulary& vocab, const LoadOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open n-best file: " + path);

  Dataset all;
  all.name = path;
  std::vector<std::string> splits;
  bool any_split_tag = false;

  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(path, line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) fail(path, line_no, "expected a JSON object");

    NBestList list;
    if (!obj.contains("utt_id") || !obj["utt_id"].is_string()) {
      fail(path, line_no, "field 'utt_id' missing or not a string");
    }
    list.utterance_id = obj["utt_id"].get<std::string>();

    if (obj.contains("ref")) {
      if (!obj["ref"].is_string()) fail(path, line_no, "field 'ref' must be a string");
      list.reference = tokenize_checked(path, line_no, "ref", obj["ref"].get<std::string>(), vocab);
      list.has_reference = true;
    } else if (opts.require_references) {
      fail(path, line_no, "field 'ref' missing (references are required here)");
    } else {
      list.has_reference = false;
    }

    if (!obj.contains("hyps") || !obj["hyps"].is_array()) {
      fail(path, line_no, "field 'hyps' missing or not an array");
    }
    const json& hyps = obj["hyps"];
    if (hyps.empty()) fail(path, line_no, "field 'hyps' must contain at least one hypothesis");
    for (const json& h : hyps) {
      if (!h.is_object()) fail(path, line_no, "field 'hyps' entries must be objects");
      Hypothesis hyp;
      if (!h.contains("text") || !h["text"].is_string()) {
        fail(path, line_no, "field 'hyps[].text' missing or not a string");
      }
      hyp.tokens = tokenize_checked(path, line_no, "hyps[].text", h["text"].get<std::string>(), vocab);
      if (!h.contains("am_score") || !h["am_score"].is_number()) {
        fail(path, line_no, "field 'hyps[].am_score' missing or not a number");
      }
      if (!h.contains("lm_score") || !h["lm_score"].is_number()) {
        fail(path, line_no, "field 'hyps[].lm_score' missing or not a number");
      }
      hyp.am_score = h["am_score"].get<double>();
      hyp.lm_score = h["lm_score"].get<double>();
      list.hypotheses.push_back(std::move(hyp));
    }

    std::string split;
    if (obj.contains("split")) {
      if (!obj["split"].is_string()) fail(path, line_no, "field 'split' must be a string");
      split = obj["split"].get<std::string>();
      any_split_tag = true;
    }

    all.lists.push_back(std::move(list));
    splits.push_back(split);
  }

  Dataset out;
  out.name = path + (opts.split.empty() ? "" : ":" + opts.split);
  if (!any_split_tag || opts.split.empty()) {
    out.lists = std::move(all.lists);
  } else {
    for (size_t i = 0; i < all.lists.size(); ++i) {
      if (splits[i] == opts.split) out.lists.push_back(std::move(all.lists[i]));
    }
  }
  relabel_oracles(out);
  return out;
}

void append_nbest(std::ostream& out, const Dataset& dataset, const Vocabulary& vocab,
                  const std::string& split) {
  for (const NBestList& list : dataset.lists) {
    json obj;
    obj["utt_id"] = list.utterance_id;
    if (!split.empty()) obj["split"] = split;
    if (list.has_reference) obj["ref"] = detokenize(list.reference, vocab);
    json hyps = json::array();
    for (const Hypothesis& hyp : list.hypotheses) {
      json h;
      h["text"] = detokenize(hyp.tokens, vocab);
      h["am_score"] = hyp.am_score;
      h["lm_score"] = hyp.lm_score;
      hyps.push_back(std::move(h));
    }
    obj["hyps"] = std::move(hyps);
    out << obj.dump() << '\n';
  }
}

void save_nbest(const Dataset& dataset, const Vocabulary& vocab, const std::string& path,
                const std::string& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open n-best file for writing: " + path);
  append_nbest(out, dataset, vocab, split);
  if (!out) throw IoError("short write to n-best file: " + path);
}

}  // namespace nbr
