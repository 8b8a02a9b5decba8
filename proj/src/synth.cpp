#include "synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "errors.hpp"

namespace nbr {
namespace {

// One topic's word source: a unigram distribution plus sparse bigram
// successor lists, and the smoothed mixture used for scoring.
struct TopicSource {
  std::vector<double> unigram;                       // over content words
  std::vector<std::vector<int>> successor_ids;       // per word
  std::vector<std::vector<double>> successor_probs;  // per word, sums to 1
};

constexpr double kBigramWeight = 0.8;  // scoring mixture: bigram vs unigram

int draw_discrete(const std::vector<double>& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double u = unit(rng);
  double acc = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

double successor_prob(const TopicSource& src, int prev, int word) {
  const auto& ids = src.successor_ids[prev];
  const auto& probs = src.successor_probs[prev];
  double bigram = 0.0;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == word) {
      bigram = probs[i];
      break;
    }
  }
  return kBigramWeight * bigram + (1.0 - kBigramWeight) * src.unigram[word];
}

double source_log_prob(const TopicSource& src, const std::vector<int>& words) {
  if (words.empty()) return 0.0;
  double lp = std::log(src.unigram[words[0]]);
  for (size_t t = 1; t < words.size(); ++t) {
    lp += std::log(successor_prob(src, words[t - 1], words[t]));
  }
  return lp;
}

}  // namespace

void SynthSpec::validate() const {
  if (topics < 1) throw InvalidArgumentError("synth spec: topics must be >= 1");
  if (vocab_size < kNumSpecialTokens + 2) {
    throw InvalidArgumentError("synth spec: vocab_size must be at least " +
                               std::to_string(kNumSpecialTokens + 2));
  }
  if (train_lists < 0 || dev_lists < 0 || test_lists < 0) {
    throw InvalidArgumentError("synth spec: utterance counts must be non-negative");
  }
  if (nbest < 1) throw InvalidArgumentError("synth spec: nbest must be >= 1");
  if (corrupt_rate < 0.0 || corrupt_rate > 1.0) {
    throw InvalidArgumentError("synth spec: corrupt_rate must lie in [0, 1]");
  }
  if (sub_frac < 0 || del_frac < 0 || ins_frac < 0 ||
      std::abs(sub_frac + del_frac + ins_frac - 1.0) > 1e-9) {
    throw InvalidArgumentError("synth spec: sub/del/ins fractions must be non-negative and sum to 1");
  }
  if (score_noise < 0.0) throw InvalidArgumentError("synth spec: score_noise must be >= 0");
  if (clean_prob < 0.0 || clean_prob > 1.0) {
    throw InvalidArgumentError("synth spec: clean_prob must lie in [0, 1]");
  }
  if (len_min < 1 || len_max < len_min) {
    throw InvalidArgumentError("synth spec: need 1 <= len_min <= len_max");
  }
  if (bigram_successors < 1) {
    throw InvalidArgumentError("synth spec: bigram_successors must be >= 1");
  }
}

SynthCorpus generate_synthetic_corpus(const SynthSpec& spec, uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const int content = spec.vocab_size - kNumSpecialTokens;

  SynthCorpus corpus;
  {
    std::vector<std::string> words(content);
    int digits = std::max(3, static_cast<int>(std::to_string(content - 1).size()));
    for (int w = 0; w < content; ++w) {
      std::string num = std::to_string(w);
      words[w] = "w" + std::string(digits - num.size(), '0') + num;
    }
    corpus.vocab = Vocabulary(words);
  }

  // Topic sources: each topic concentrates 80% of its unigram mass on its own
  // block of the vocabulary, jittered so topics are not perfectly uniform.
  std::vector<TopicSource> sources(spec.topics);
  for (int g = 0; g < spec.topics; ++g) {
    TopicSource& src = sources[g];
    src.unigram.resize(content);
    double total = 0.0;
    for (int w = 0; w < content; ++w) {
      double base = (w % spec.topics == g) ? 4.0 : 1.0;
      double jitter = std::exp(0.25 * gauss(rng));
      src.unigram[w] = base * jitter;
      total += src.unigram[w];
    }
    for (double& p : src.unigram) p /= total;

    src.successor_ids.resize(content);
    src.successor_probs.resize(content);
    int fanout = std::min(spec.bigram_successors, content);
    for (int w = 0; w < content; ++w) {
      auto& ids = src.successor_ids[w];
      while (static_cast<int>(ids.size()) < fanout) {
        int cand = draw_discrete(src.unigram, rng);
        if (std::find(ids.begin(), ids.end(), cand) == ids.end()) ids.push_back(cand);
      }
      auto& probs = src.successor_probs[w];
      probs.resize(fanout);
      double s = 0.0;
      for (double& p : probs) {
        p = 0.2 + unit(rng);
        s += p;
      }
      for (double& p : probs) p /= s;
    }
  }

  auto corrupt = [&](const std::vector<int>& ref, double* event_ll, long long* events) {
    std::vector<int> out;
    double ll = 0.0;
    long long n_events = 0;
    const double p = spec.corrupt_rate;
    for (int token : ref) {
      if (p > 0.0 && unit(rng) < p) {
        double a = unit(rng);
        if (a < spec.sub_frac) {
          // substitution: uniform over the other content words
          int repl = token;
          if (content > 1) {
            std::uniform_int_distribution<int> pick(0, content - 2);
            repl = pick(rng);
            if (repl >= token - kNumSpecialTokens) ++repl;
            repl += kNumSpecialTokens;
          }
          out.push_back(repl);
          ll += std::log(p * spec.sub_frac / std::max(1, content - 1));
        } else if (a < spec.sub_frac + spec.del_frac) {
          ll += std::log(p * spec.del_frac);
        } else {
          std::uniform_int_distribution<int> pick(0, content - 1);
          out.push_back(pick(rng) + kNumSpecialTokens);
          out.push_back(token);
          ll += std::log(p * spec.ins_frac / content);
        }
        ++n_events;
      } else {
        out.push_back(token);
        ll += std::log(1.0 - p);
      }
    }
    if (event_ll) *event_ll = ll;
    if (events) *events = n_events;
    return out;
  };

  auto generate_split = [&](const std::string& split, int count) {
    Dataset ds;
    ds.name = split;
    ds.lists.reserve(count);
    int digits = std::max(4, static_cast<int>(std::to_string(std::max(1, count - 1)).size()));
    for (int i = 0; i < count; ++i) {
      NBestList list;
      {
        std::string num = std::to_string(i);
        list.utterance_id = split + "-" + std::string(digits - num.size(), '0') + num;
      }
      std::uniform_int_distribution<int> pick_topic(0, spec.topics - 1);
      const int topic = pick_topic(rng);
      const TopicSource& src = sources[topic];

      std::uniform_int_distribution<int> pick_len(spec.len_min, spec.len_max);
      const int len = pick_len(rng);
      std::vector<int> ref_words(len);
      ref_words[0] = draw_discrete(src.unigram, rng);
      for (int t = 1; t < len; ++t) {
        int prev = ref_words[t - 1];
        int idx = draw_discrete(src.successor_probs[prev], rng);
        ref_words[t] = src.successor_ids[prev][idx];
      }
      list.reference.resize(len);
      for (int t = 0; t < len; ++t) list.reference[t] = ref_words[t] + kNumSpecialTokens;

      int clean_slot = -1;
      if (spec.clean_prob > 0.0 && unit(rng) < spec.clean_prob) {
        std::uniform_int_distribution<int> pick_slot(0, spec.nbest - 1);
        clean_slot = pick_slot(rng);
      }

      const double keep_ll =
          static_cast<double>(len) * std::log(std::max(1e-12, 1.0 - spec.corrupt_rate));
      for (int n = 0; n < spec.nbest; ++n) {
        Hypothesis hyp;
        double event_ll = keep_ll;
        if (n == clean_slot || spec.corrupt_rate == 0.0) {
          hyp.tokens = list.reference;
        } else {
          hyp.tokens = corrupt(list.reference, &event_ll, nullptr);
        }
        std::vector<int> hyp_words(hyp.tokens.size());
        for (size_t t = 0; t < hyp.tokens.size(); ++t) {
          hyp_words[t] = hyp.tokens[t] - kNumSpecialTokens;
        }
        hyp.am_score = event_ll + spec.score_noise * gauss(rng);
        hyp.lm_score = source_log_prob(src, hyp_words) + spec.score_noise * gauss(rng);
        list.hypotheses.push_back(std::move(hyp));
      }

      // Decoder convention: slots ordered by combined score, best first.
      std::stable_sort(list.hypotheses.begin(), list.hypotheses.end(),
                       [](const Hypothesis& a, const Hypothesis& b) {
                         return a.am_score + a.lm_score > b.am_score + b.lm_score;
                       });
      ds.lists.push_back(std::move(list));
    }
    relabel_oracles(ds);
    return ds;
  };

  corpus.train = generate_split("train", spec.train_lists);
  corpus.dev = generate_split("dev", spec.dev_lists);
  corpus.test = generate_split("test", spec.test_lists);
  return corpus;
}

}  // namespace nbr
