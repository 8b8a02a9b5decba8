#include "plsa.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <random>

#include <json.hpp>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "vocab.hpp"

namespace nbr {

namespace {

void validate_docs(const std::vector<DocBag>& docs, int vocab_words) {
  if (docs.empty()) throw InvalidArgumentError("plsa: empty document collection");
  for (size_t d = 0; d < docs.size(); ++d) {
    const DocBag& doc = docs[d];
    if (doc.word.size() != doc.count.size())
      throw StructuralError("plsa: document " + std::to_string(d) +
                            " has mismatched word/count arrays");
    if (doc.word.empty())
      throw InvalidArgumentError("plsa: document " + std::to_string(d) + " is empty");
    for (size_t i = 0; i < doc.word.size(); ++i) {
      if (doc.word[i] < 0 || doc.word[i] >= vocab_words)
        throw StructuralError("plsa: document " + std::to_string(d) + " references word index " +
                              std::to_string(doc.word[i]) + " outside vocabulary of " +
                              std::to_string(vocab_words) + " content words");
      if (!(doc.count[i] > 0))
        throw StructuralError("plsa: document " + std::to_string(d) +
                              " has a non-positive word count");
    }
  }
}

void normalize_rows(Matrix& m) {
  for (int r = 0; r < m.rows; ++r) {
    double sum = 0.0;
    for (int c = 0; c < m.cols; ++c) sum += m(r, c);
    for (int c = 0; c < m.cols; ++c) m(r, c) /= sum;
  }
}

}  // namespace

double DocBag::total() const {
  double t = 0.0;
  for (double c : count) t += c;
  return t;
}

DocBag bag_from_tokens(const std::vector<int>& tokens, int vocab_size) {
  std::map<int, double> counts;
  for (int id : tokens) {
    if (id < 0 || id >= vocab_size)
      throw StructuralError("bag_from_tokens: token id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(vocab_size));
    if (id < kNumSpecialTokens) continue;
    counts[id - kNumSpecialTokens] += 1.0;
  }
  DocBag bag;
  bag.word.reserve(counts.size());
  bag.count.reserve(counts.size());
  for (const auto& [w, c] : counts) {
    bag.word.push_back(w);
    bag.count.push_back(c);
  }
  return bag;
}

PlsaTrainResult train_plsa(const std::vector<DocBag>& docs, int topics, int vocab_words,
                           int iterations, double epsilon, uint64_t seed) {
  if (topics < 1) throw InvalidArgumentError("plsa: topic count must be >= 1");
  if (vocab_words < 1) throw InvalidArgumentError("plsa: content vocabulary must be nonempty");
  if (iterations < 0) throw InvalidArgumentError("plsa: iteration count must be >= 0");
  if (epsilon < 0) throw InvalidArgumentError("plsa: smoothing epsilon must be >= 0");
  validate_docs(docs, vocab_words);

  const int D = static_cast<int>(docs.size());
  PlsaTrainResult result;
  TopicModel& model = result.model;
  model.topics = topics;
  model.vocab_words = vocab_words;
  model.epsilon = epsilon;
  model.word_given_topic = Matrix(topics, vocab_words);
  model.topic_given_doc = Matrix(D, topics);

  // Normalized positive random draws keep every EM posterior well-defined
  // from the first iteration.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.05, 1.0);
  for (double& v : model.word_given_topic.data) v = unit(rng);
  normalize_rows(model.word_given_topic);
  for (double& v : model.topic_given_doc.data) v = unit(rng);
  normalize_rows(model.topic_given_doc);

  Matrix n_wz(topics, vocab_words);
  Matrix n_dz(D, topics);
  std::vector<double> posterior(topics);
  for (int it = 0; it < iterations; ++it) {
    n_wz.fill(0.0);
    n_dz.fill(0.0);
    for (int d = 0; d < D; ++d) {
      const DocBag& doc = docs[d];
      for (size_t i = 0; i < doc.word.size(); ++i) {
        const int w = doc.word[i];
        const double c = doc.count[i];
        double denom = 0.0;
        for (int z = 0; z < topics; ++z) {
          posterior[z] = model.topic_given_doc(d, z) * model.word_given_topic(z, w);
          denom += posterior[z];
        }
        if (denom <= 0.0)
          throw NumericError("plsa: word " + std::to_string(w) +
                             " has zero probability under every topic; train with epsilon > 0");
        for (int z = 0; z < topics; ++z) {
          const double e = c * posterior[z] / denom;
          n_wz(z, w) += e;
          n_dz(d, z) += e;
        }
      }
    }
    for (int z = 0; z < topics; ++z) {
      double sum = 0.0;
      for (int w = 0; w < vocab_words; ++w) sum += n_wz(z, w);
      const double denom = sum + epsilon * vocab_words;
      for (int w = 0; w < vocab_words; ++w)
        model.word_given_topic(z, w) = (n_wz(z, w) + epsilon) / denom;
    }
    for (int d = 0; d < D; ++d) {
      double sum = 0.0;
      for (int z = 0; z < topics; ++z) sum += n_dz(d, z);
      const double denom = sum + epsilon * topics;
      for (int z = 0; z < topics; ++z)
        model.topic_given_doc(d, z) = (n_dz(d, z) + epsilon) / denom;
    }
    result.log_likelihood.push_back(plsa_training_log_likelihood(model, docs));
  }
  return result;
}

std::vector<double> fold_in(const TopicModel& model, const DocBag& doc, int iterations) {
  if (iterations < 0) throw InvalidArgumentError("fold_in: iteration count must be >= 0");
  if (model.topics < 1) throw StructuralError("fold_in: model has no topics");
  std::vector<double> mix(model.topics, 1.0 / model.topics);
  if (doc.word.empty()) return mix;  // no evidence: stay uniform

  std::vector<double> posterior(model.topics);
  std::vector<double> expected(model.topics);
  for (int it = 0; it < iterations; ++it) {
    std::fill(expected.begin(), expected.end(), 0.0);
    for (size_t i = 0; i < doc.word.size(); ++i) {
      const int w = doc.word[i];
      if (w < 0 || w >= model.vocab_words) {
        // A word the model has never seen carries no usable evidence.
        static std::once_flag warned;
        std::call_once(warned, [] {
          std::fprintf(stderr, "fold_in: skipping words outside the trained vocabulary\n");
        });
        continue;
      }
      double denom = 0.0;
      for (int z = 0; z < model.topics; ++z) {
        posterior[z] = mix[z] * model.word_given_topic(z, w);
        denom += posterior[z];
      }
      if (denom <= 0.0) continue;  // unseen under every topic (epsilon = 0)
      for (int z = 0; z < model.topics; ++z)
        expected[z] += doc.count[i] * posterior[z] / denom;
    }
    double sum = 0.0;
    for (double e : expected) sum += e;
    if (sum <= 0.0) return std::vector<double>(model.topics, 1.0 / model.topics);
    const double denom = sum + model.epsilon * model.topics;
    for (int z = 0; z < model.topics; ++z) mix[z] = (expected[z] + model.epsilon) / denom;
  }
  return mix;
}

double plsa_log_likelihood(const TopicModel& model, const std::vector<DocBag>& docs,
                           const Matrix& doc_topics) {
  if (doc_topics.rows != static_cast<int>(docs.size()) || doc_topics.cols != model.topics)
    throw StructuralError("plsa_log_likelihood: document-topic matrix shape mismatch");
  double ll = 0.0;
  for (size_t d = 0; d < docs.size(); ++d) {
    const DocBag& doc = docs[d];
    for (size_t i = 0; i < doc.word.size(); ++i) {
      const int w = doc.word[i];
      if (w < 0 || w >= model.vocab_words)
        throw StructuralError("plsa_log_likelihood: word index " + std::to_string(w) +
                              " outside the trained vocabulary");
      double p = 0.0;
      for (int z = 0; z < model.topics; ++z)
        p += doc_topics(static_cast<int>(d), z) * model.word_given_topic(z, w);
      if (p <= 0.0)
        throw NumericError("plsa_log_likelihood: word " + std::to_string(w) +
                           " has zero probability; train with epsilon > 0");
      ll += doc.count[i] * std::log(p);
    }
  }
  return ll;
}

double plsa_training_log_likelihood(const TopicModel& model, const std::vector<DocBag>& docs) {
  return plsa_log_likelihood(model, docs, model.topic_given_doc);
}

void save_topic_model(const TopicModel& model, const std::string& path,
                      uint64_t vocab_fingerprint) {
  nlohmann::json meta{{"topics", model.topics},
                      {"vocab_words", model.vocab_words},
                      {"epsilon", model.epsilon},
                      {"fold_in_iterations", model.fold_in_iterations},
                      {"vocab_fingerprint", std::to_string(vocab_fingerprint)}};
  std::vector<std::pair<std::string, const Matrix*>> tensors{
      {"word_given_topic", &model.word_given_topic},
      {"topic_given_doc", &model.topic_given_doc}};
  save_checkpoint_file(path, "plsa", meta, tensors);
}

TopicModel load_topic_model(const std::string& path, uint64_t* vocab_fingerprint) {
  LoadedCheckpoint ckpt = load_checkpoint_file(path, "plsa");
  TopicModel model;
  try {
    model.topics = ckpt.meta.at("topics").get<int>();
    model.vocab_words = ckpt.meta.at("vocab_words").get<int>();
    model.epsilon = ckpt.meta.at("epsilon").get<double>();
    model.fold_in_iterations = ckpt.meta.value("fold_in_iterations", 20);
    if (vocab_fingerprint)
      *vocab_fingerprint =
          std::stoull(ckpt.meta.at("vocab_fingerprint").get<std::string>(), nullptr, 10);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": topic-model metadata: " + e.what());
  }
  auto wz = ckpt.tensors.find("word_given_topic");
  if (wz == ckpt.tensors.end())
    throw ParseError(path + ": topic-model checkpoint lacks the word_given_topic table");
  if (wz->second.rows != model.topics || wz->second.cols != model.vocab_words)
    throw ParseError(path + ": word_given_topic shape does not match the recorded K and W");
  model.word_given_topic = std::move(wz->second);
  auto dz = ckpt.tensors.find("topic_given_doc");
  if (dz != ckpt.tensors.end()) {
    if (dz->second.cols != model.topics)
      throw ParseError(path + ": topic_given_doc shape does not match the recorded K");
    model.topic_given_doc = std::move(dz->second);
  }
  return model;
}

}  // namespace nbr
