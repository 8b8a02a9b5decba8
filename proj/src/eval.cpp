#include "eval.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <random>

#include "errors.hpp"

namespace nbr {

namespace {

RerankSelection one_hot_selection(const NBestList& list, int chosen) {
  RerankSelection sel;
  sel.utterance_id = list.utterance_id;
  sel.probs.assign(list.hypotheses.size(), 0.0);
  sel.probs[chosen] = 1.0;
  sel.chosen = chosen;
  return sel;
}

long long hyp_errors(const NBestList& list, size_t i) {
  const Hypothesis& hyp = list.hypotheses[i];
  if (hyp.wer_stats) return hyp.wer_stats->errors();
  return word_error_rate(list.reference, hyp.tokens).errors();
}

}  // namespace

Selector first_selector() {
  return [](const NBestList& list) { return one_hot_selection(list, 0); };
}

Selector oracle_selector() {
  return [](const NBestList& list) {
    if (list.oracle < 0 || list.oracle >= static_cast<int>(list.hypotheses.size()))
      throw StructuralError("utterance " + list.utterance_id + " has no oracle label");
    return one_hot_selection(list, list.oracle);
  };
}

Selector worst_selector() {
  return [](const NBestList& list) {
    if (!list.has_reference)
      throw StructuralError("utterance " + list.utterance_id + " has no reference");
    int worst = 0;
    long long worst_errors = -1;
    for (size_t i = 0; i < list.hypotheses.size(); ++i) {
      const long long e = hyp_errors(list, i);
      if (e > worst_errors) {
        worst_errors = e;
        worst = static_cast<int>(i);
      }
    }
    return one_hot_selection(list, worst);
  };
}

Selector random_selector(uint64_t seed) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  return [rng](const NBestList& list) {
    if (list.hypotheses.empty())
      throw StructuralError("utterance " + list.utterance_id + ": empty hypothesis list");
    const int n = static_cast<int>(list.hypotheses.size());
    std::uniform_int_distribution<int> pick(0, n - 1);
    RerankSelection sel;
    sel.utterance_id = list.utterance_id;
    sel.probs.assign(n, 1.0 / n);
    sel.chosen = pick(*rng);
    return sel;
  };
}

RerankRun evaluate(const Dataset& dataset, const std::string& method, const Selector& selector) {
  if (dataset.lists.empty()) throw InvalidArgumentError("evaluate: empty dataset");
  const auto started = std::chrono::steady_clock::now();

  RerankRun run;
  run.method = method;
  run.dataset_name = dataset.name;
  run.dataset_fingerprint = dataset.fingerprint();
  run.selections.reserve(dataset.lists.size());

  long long correct = 0;
  for (const NBestList& list : dataset.lists) {
    if (list.hypotheses.empty())
      throw StructuralError("evaluate: utterance " + list.utterance_id +
                            " has an empty hypothesis list");
    if (!list.has_reference)
      throw StructuralError("evaluate: utterance " + list.utterance_id +
                            " has no reference to score against");
    RerankSelection sel;
    bool failed = false;
    try {
      sel = selector(list);
      if (sel.chosen < 0 || sel.chosen >= static_cast<int>(list.hypotheses.size()))
        failed = true;
    } catch (const std::exception&) {
      failed = true;
    }
    if (failed) {
      sel = one_hot_selection(list, 0);
      ++run.fallback_count;
      run.flagged = true;
    }
    sel.method = method;
    sel.utterance_id = list.utterance_id;

    const Hypothesis& chosen = list.hypotheses[sel.chosen];
    const WerStats stats =
        chosen.wer_stats ? *chosen.wer_stats : word_error_rate(list.reference, chosen.tokens);
    run.aggregate.substitutions += stats.substitutions;
    run.aggregate.deletions += stats.deletions;
    run.aggregate.insertions += stats.insertions;
    run.aggregate.ref_len += stats.ref_len;
    if (stats.ref_len == 0) run.flagged = true;

    int oracle = list.oracle;
    if (oracle < 0) {
      // Unlabeled input: derive the oracle locally without touching the list.
      long long best = -1;
      for (size_t i = 0; i < list.hypotheses.size(); ++i) {
        const long long e = hyp_errors(list, i);
        if (best < 0 || e < best) {
          best = e;
          oracle = static_cast<int>(i);
        }
      }
    }
    if (sel.chosen == oracle) ++correct;
    run.selections.push_back(std::move(sel));
  }

  run.wer = 100.0 * static_cast<double>(run.aggregate.errors()) /
            static_cast<double>(run.aggregate.ref_len > 0 ? run.aggregate.ref_len : 1);
  run.selection_accuracy =
      static_cast<double>(correct) / static_cast<double>(dataset.lists.size());
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return run;
}

Report compare_runs(const std::vector<RerankRun>& runs) {
  if (runs.empty()) throw InvalidArgumentError("compare_runs: no runs to compare");
  Report report;
  report.dataset = runs.front().dataset_name;
  report.dataset_fingerprint = runs.front().dataset_fingerprint;
  // Identity is the content fingerprint; the name is only a label.
  for (const RerankRun& run : runs)
    if (run.dataset_fingerprint != report.dataset_fingerprint)
      throw InvalidArgumentError("compare_runs: run '" + run.method +
                                 "' was evaluated on a different dataset (" + run.dataset_name +
                                 ") than '" + runs.front().method + "' (" + report.dataset + ")");
  report.runs = runs;
  for (size_t a = 0; a < runs.size(); ++a) {
    for (size_t b = 0; b < runs.size(); ++b) {
      if (a == b) continue;
      ReportDelta delta;
      delta.from = runs[a].method;
      delta.to = runs[b].method;
      delta.abs_points = runs[a].wer - runs[b].wer;
      delta.rel_pct = runs[a].wer > 0 ? 100.0 * (runs[a].wer - runs[b].wer) / runs[a].wer : 0.0;
      report.deltas.push_back(delta);
    }
  }
  return report;
}

nlohmann::json Report::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["dataset_fingerprint"] = std::to_string(dataset_fingerprint);
  j["runs"] = nlohmann::ordered_json::array();
  for (const RerankRun& run : runs) {
    nlohmann::ordered_json r;
    r["method"] = run.method;
    r["wer"] = run.wer;
    r["sel_acc"] = run.selection_accuracy;
    r["seconds"] = run.seconds;
    r["substitutions"] = run.aggregate.substitutions;
    r["deletions"] = run.aggregate.deletions;
    r["insertions"] = run.aggregate.insertions;
    r["ref_words"] = run.aggregate.ref_len;
    r["fallbacks"] = run.fallback_count;
    r["flagged"] = run.flagged;
    j["runs"].push_back(std::move(r));
  }
  j["deltas"] = nlohmann::ordered_json::array();
  for (const ReportDelta& d : deltas) {
    j["deltas"].push_back(nlohmann::ordered_json{
        {"from", d.from}, {"to", d.to}, {"abs", d.abs_points}, {"rel_pct", d.rel_pct}});
  }
  return j;
}

Report Report::from_json(const nlohmann::json& j) {
  Report report;
  try {
    report.dataset = j.at("dataset").get<std::string>();
    report.dataset_fingerprint =
        std::stoull(j.at("dataset_fingerprint").get<std::string>(), nullptr, 10);
    for (const auto& r : j.at("runs")) {
      RerankRun run;
      run.method = r.at("method").get<std::string>();
      run.dataset_name = report.dataset;
      run.dataset_fingerprint = report.dataset_fingerprint;
      run.wer = r.at("wer").get<double>();
      run.selection_accuracy = r.at("sel_acc").get<double>();
      run.seconds = r.at("seconds").get<double>();
      run.aggregate.substitutions = r.value("substitutions", 0LL);
      run.aggregate.deletions = r.value("deletions", 0LL);
      run.aggregate.insertions = r.value("insertions", 0LL);
      run.aggregate.ref_len = r.value("ref_words", 0LL);
      run.fallback_count = r.value("fallbacks", 0);
      run.flagged = r.value("flagged", false);
      report.runs.push_back(std::move(run));
    }
    if (j.contains("deltas")) {
      for (const auto& d : j.at("deltas")) {
        ReportDelta delta;
        delta.from = d.at("from").get<std::string>();
        delta.to = d.at("to").get<std::string>();
        delta.abs_points = d.at("abs").get<double>();
        delta.rel_pct = d.at("rel_pct").get<double>();
        report.deltas.push_back(std::move(delta));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("report document: ") + e.what());
  }
  return report;
}

std::string Report::human_table() const {
  std::string out = "dataset: " + dataset + "\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-14s %8s %8s %8s %9s %9s\n", "method", "WER%", "d-abs",
                "d-rel%", "sel-acc", "seconds");
  out += line;
  const double base = runs.empty() ? 0.0 : runs.front().wer;
  for (size_t i = 0; i < runs.size(); ++i) {
    const RerankRun& run = runs[i];
    if (i == 0) {
      std::snprintf(line, sizeof(line), "%-14s %8.2f %8s %8s %9.3f %9.2f%s\n",
                    run.method.c_str(), run.wer, "-", "-", run.selection_accuracy, run.seconds,
                    run.flagged ? "  [flagged]" : "");
    } else {
      const double abs = base - run.wer;
      const double rel = base > 0 ? 100.0 * abs / base : 0.0;
      std::snprintf(line, sizeof(line), "%-14s %8.2f %8.2f %8.2f %9.3f %9.2f%s\n",
                    run.method.c_str(), run.wer, abs, rel, run.selection_accuracy, run.seconds,
                    run.flagged ? "  [flagged]" : "");
    }
    out += line;
  }
  return out;
}

}  // namespace nbr
