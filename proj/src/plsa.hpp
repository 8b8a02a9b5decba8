#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "matrix.hpp"

namespace nbr {

// Bag-of-words document over the content vocabulary. Word indices are
// 0-based content indices (vocabulary id minus the reserved tokens).
struct DocBag {
  std::vector<int> word;
  std::vector<double> count;  // parallel to `word`, all > 0

  double total() const;
};

// Counts the content words of a token sequence; reserved ids (including the
// unknown-word token) carry no topic evidence and are skipped.
DocBag bag_from_tokens(const std::vector<int>& tokens, int vocab_size);

// Latent-topic mixture model: P(w|z) rows per topic plus the per-training-doc
// mixtures P(z|d), both estimated by EM with additive smoothing.
struct TopicModel {
  int topics = 0;       // K
  int vocab_words = 0;  // content vocabulary size W
  double epsilon = 1e-6;
  int fold_in_iterations = 20;  // default EM budget when folding in new docs
  Matrix word_given_topic;  // K x W, rows sum to 1
  Matrix topic_given_doc;   // training docs x K, rows sum to 1
};

struct PlsaTrainResult {
  TopicModel model;
  std::vector<double> log_likelihood;  // corpus log-likelihood after each iteration
};

PlsaTrainResult train_plsa(const std::vector<DocBag>& docs, int topics, int vocab_words,
                           int iterations, double epsilon, uint64_t seed);

// Estimates P(z|doc) for a new document with P(w|z) frozen, starting from the
// uniform mixture. Empty documents stay uniform. Pure: never touches the
// model.
std::vector<double> fold_in(const TopicModel& model, const DocBag& doc, int iterations);

// Sum over documents and words of count * log(sum_z P(z|d) P(w|z)), with one
// doc_topics row per document.
double plsa_log_likelihood(const TopicModel& model, const std::vector<DocBag>& docs,
                           const Matrix& doc_topics);
// Same, against the stored training mixtures.
double plsa_training_log_likelihood(const TopicModel& model, const std::vector<DocBag>& docs);

void save_topic_model(const TopicModel& model, const std::string& path,
                      uint64_t vocab_fingerprint);
TopicModel load_topic_model(const std::string& path, uint64_t* vocab_fingerprint = nullptr);

}  // namespace nbr
