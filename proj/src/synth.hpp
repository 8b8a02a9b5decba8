#pragma once

#include <cstdint>

#include "nbest.hpp"
#include "vocab.hpp"

namespace nbr {

// Parameters of the synthetic n-best generator that stands in for an ASR
// front end. References are drawn from topic-conditioned bigram sources;
// hypotheses are the reference passed through a per-position corruption
// channel; scores are the channel log-likelihood and the source log
// probability, both perturbed by Gaussian noise so they are informative but
// imperfect. Hypotheses are ordered by noisy combined score, so index 0
// plays the role of the decoder's 1-best.
struct SynthSpec {
  int topics = 2;
  int vocab_size = 200;  // total, including the five special symbols
  int train_lists = 2000;
  int dev_lists = 200;
  int test_lists = 200;
  int nbest = 10;
  double corrupt_rate = 0.3;  // per-position corruption probability
  double sub_frac = 0.6;      // action split given corruption
  double del_frac = 0.2;
  double ins_frac = 0.2;
  double score_noise = 4.0;  // stddev of the Gaussian noise on both scores
  double clean_prob = 0.5;   // chance that one slot keeps the exact reference
  int len_min = 5;
  int len_max = 9;
  int bigram_successors = 6;  // branching factor of each topic's bigram source

  void validate() const;
};

struct SynthCorpus {
  Vocabulary vocab;
  Dataset train;
  Dataset dev;
  Dataset test;
};

// Fully deterministic given the seed.
SynthCorpus generate_synthetic_corpus(const SynthSpec& spec, uint64_t seed);

}  // namespace nbr
