#include "rerank.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "vocab.hpp"

namespace nbr {

namespace {

void check_content_tokens(const NBestList& list) {
  for (size_t i = 0; i < list.hypotheses.size(); ++i)
    for (int id : list.hypotheses[i].tokens)
      if (Vocabulary::is_structural(id))
        throw StructuralError("utterance " + list.utterance_id + ": hypothesis " +
                              std::to_string(i) + " contains reserved token id " +
                              std::to_string(id));
}

// Mean/population-std of one score family; constant scores keep std = 1 so
// standardization stays a no-op instead of dividing by zero.
void fit_moments(const std::vector<double>& values, double& mean, double& std) {
  mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  std = var > 1e-24 ? std::sqrt(var) : 1.0;
}

double head_forward(const PredictionHead& head, const double* feature, double* hidden) {
  const int in = head.w1.rows;
  const int h = head.w1.cols;
  for (int j = 0; j < h; ++j) {
    double s = head.b1(0, j);
    for (int i = 0; i < in; ++i) s += feature[i] * head.w1(i, j);
    hidden[j] = std::tanh(s);
  }
  double logit = head.b2(0, 0);
  for (int j = 0; j < h; ++j) logit += hidden[j] * head.w2(j, 0);
  return logit;
}

// Accumulates head gradients for one slot and, when d_feature is non-null,
// the gradient w.r.t. the feature vector.
void head_backward(const PredictionHead& head, const double* feature, const double* hidden,
                   double d_logit, PredictionHead& grads, double* d_feature) {
  const int in = head.w1.rows;
  const int h = head.w1.cols;
  grads.b2(0, 0) += d_logit;
  for (int j = 0; j < h; ++j) {
    grads.w2(j, 0) += d_logit * hidden[j];
    const double d_pre = d_logit * head.w2(j, 0) * (1.0 - hidden[j] * hidden[j]);
    grads.b1(0, j) += d_pre;
    for (int i = 0; i < in; ++i) {
      grads.w1(i, j) += d_pre * feature[i];
      if (d_feature) d_feature[i] += d_pre * head.w1(i, j);
    }
  }
}

std::vector<Matrix*> collect_ptrs(std::vector<std::pair<std::string, Matrix*>> reg) {
  std::vector<Matrix*> out;
  out.reserve(reg.size());
  for (auto& [name, m] : reg) out.push_back(m);
  return out;
}

}  // namespace

std::string score_setting_name(ScoreSetting s) {
  switch (s) {
    case ScoreSetting::kNone: return "none";
    case ScoreSetting::kCombined: return "combined";
    case ScoreSetting::kSplit: return "split";
  }
  throw InvalidArgumentError("unknown score setting");
}

ScoreSetting score_setting_from_name(const std::string& name) {
  if (name == "none") return ScoreSetting::kNone;
  if (name == "combined") return ScoreSetting::kCombined;
  if (name == "split") return ScoreSetting::kSplit;
  throw InvalidArgumentError("unknown score setting '" + name +
                             "', expected none, combined or split");
}

std::string encode_mode_name(EncodeMode m) {
  return m == EncodeMode::kJoint ? "joint" : "independent";
}

EncodeMode encode_mode_from_name(const std::string& name) {
  if (name == "joint") return EncodeMode::kJoint;
  if (name == "independent") return EncodeMode::kIndependent;
  throw InvalidArgumentError("unknown encode mode '" + name +
                             "', expected joint or independent");
}

int FeatureConfig::appended_dims() const {
  int dims = 0;
  if (score_setting == ScoreSetting::kCombined) dims += 1;
  if (score_setting == ScoreSetting::kSplit) dims += 2;
  if (topic_enabled) dims += topics;
  return dims;
}

void FeatureConfig::validate() const {
  if (topic_enabled && topics < 1)
    throw InvalidArgumentError("feature config: topic dims must be >= 1 when topics are enabled");
  if (!topic_enabled && topics != 0)
    throw InvalidArgumentError("feature config: topic dims set but topics are disabled");
  if (!(am_std > 0) || !(lm_std > 0) || !(combined_std > 0))
    throw InvalidArgumentError("feature config: standardization stddevs must be positive");
  if (!std::isfinite(lambda_am) || !std::isfinite(lambda_lm))
    throw InvalidArgumentError("feature config: combined-score weights must be finite");
}

nlohmann::json FeatureConfig::to_json() const {
  return nlohmann::json{{"score_setting", score_setting_name(score_setting)},
                        {"topic_enabled", topic_enabled},
                        {"topics", topics},
                        {"lambda_am", lambda_am},
                        {"lambda_lm", lambda_lm},
                        {"am_mean", am_mean},
                        {"am_std", am_std},
                        {"lm_mean", lm_mean},
                        {"lm_std", lm_std},
                        {"combined_mean", combined_mean},
                        {"combined_std", combined_std}};
}

FeatureConfig FeatureConfig::from_json(const nlohmann::json& j) {
  FeatureConfig c;
  try {
    c.score_setting = score_setting_from_name(j.at("score_setting").get<std::string>());
    c.topic_enabled = j.at("topic_enabled").get<bool>();
    c.topics = j.at("topics").get<int>();
    c.lambda_am = j.at("lambda_am").get<double>();
    c.lambda_lm = j.at("lambda_lm").get<double>();
    c.am_mean = j.at("am_mean").get<double>();
    c.am_std = j.at("am_std").get<double>();
    c.lm_mean = j.at("lm_mean").get<double>();
    c.lm_std = j.at("lm_std").get<double>();
    c.combined_mean = j.at("combined_mean").get<double>();
    c.combined_std = j.at("combined_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("feature config record: ") + e.what());
  }
  c.validate();
  return c;
}

void fit_standardization(FeatureConfig& config, const Dataset& train) {
  std::vector<double> am, lm, combined;
  for (const NBestList& list : train.lists) {
    for (const Hypothesis& hyp : list.hypotheses) {
      am.push_back(hyp.am_score);
      lm.push_back(hyp.lm_score);
      combined.push_back(config.lambda_am * hyp.am_score + config.lambda_lm * hyp.lm_score);
    }
  }
  if (am.empty())
    throw InvalidArgumentError("fit_standardization: training set has no hypotheses");
  fit_moments(am, config.am_mean, config.am_std);
  fit_moments(lm, config.lm_mean, config.lm_std);
  fit_moments(combined, config.combined_mean, config.combined_std);
}

PredictionHead PredictionHead::init(int input_dim, int hidden_dim, uint64_t seed) {
  if (input_dim < 1 || hidden_dim < 1)
    throw InvalidArgumentError("prediction head: dimensions must be >= 1");
  PredictionHead head;
  head.w1 = Matrix(input_dim, hidden_dim);
  head.b1 = Matrix(1, hidden_dim);
  head.w2 = Matrix(hidden_dim, 1);
  head.b2 = Matrix(1, 1);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.1);
  for (double& v : head.w1.data) v = dist(rng);
  for (double& v : head.w2.data) v = dist(rng);
  return head;
}

PredictionHead PredictionHead::zeros_like() const {
  PredictionHead z;
  z.w1 = Matrix(w1.rows, w1.cols);
  z.b1 = Matrix(b1.rows, b1.cols);
  z.w2 = Matrix(w2.rows, w2.cols);
  z.b2 = Matrix(b2.rows, b2.cols);
  return z;
}

std::vector<std::pair<std::string, Matrix*>> PredictionHead::tensors() {
  return {{"head.w1", &w1}, {"head.b1", &b1}, {"head.w2", &w2}, {"head.b2", &b2}};
}

std::vector<std::pair<std::string, const Matrix*>> PredictionHead::tensors() const {
  return {{"head.w1", &w1}, {"head.b1", &b1}, {"head.w2", &w2}, {"head.b2", &b2}};
}

NBestEncoding encode_nbest(const EncoderParams& params, const NBestList& list, EncodeMode mode,
                           bool keep_caches) {
  const int N = static_cast<int>(list.hypotheses.size());
  if (N == 0)
    throw StructuralError("utterance " + list.utterance_id + ": empty hypothesis list");
  check_content_tokens(list);
  const EncoderConfig& cfg = params.config;

  NBestEncoding enc;
  enc.cls = Matrix(N, cfg.hidden);
  enc.slot_site.resize(N);

  if (mode == EncodeMode::kIndependent) {
    if (keep_caches) enc.caches.resize(N);
    for (int i = 0; i < N; ++i) {
      const std::vector<int> framed = frame_sequence(list.hypotheses[i].tokens, cfg.max_seq);
      const std::vector<int> segments(framed.size(), 0);
      const std::vector<uint8_t> padding(framed.size(), 0);
      EncodeCache local;
      const Matrix hidden =
          encode(params, framed, segments, padding, keep_caches ? &enc.caches[i] : &local);
      const Matrix& h = keep_caches ? enc.caches[i].hidden : local.hidden;
      for (int c = 0; c < cfg.hidden; ++c) enc.cls(i, c) = h(0, c);
      enc.slot_site[i] = {i, 0};
    }
    return enc;
  }

  // Joint mode: one packed sequence, segment id = hypothesis slot.
  if (N > cfg.max_segments)
    throw StructuralError("utterance " + list.utterance_id + ": " + std::to_string(N) +
                          " hypotheses exceed the encoder's " +
                          std::to_string(cfg.max_segments) + " segment slots");
  std::vector<int> lens(N);
  int total = 0;
  for (int i = 0; i < N; ++i) {
    lens[i] = static_cast<int>(list.hypotheses[i].tokens.size());
    total += lens[i] + 2;
  }
  if (total > cfg.max_seq) {
    if (cfg.max_seq < 2 * N)
      throw StructuralError("utterance " + list.utterance_id + ": " + std::to_string(N) +
                            " framed hypotheses cannot fit a max sequence length of " +
                            std::to_string(cfg.max_seq));
    const int cap = (cfg.max_seq - 2 * N) / N;
    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return lens[a] != lens[b] ? lens[a] > lens[b] : a < b;
    });
    for (int idx : order) {
      if (total <= cfg.max_seq) break;
      if (lens[idx] > cap) {
        total -= lens[idx] - cap;
        lens[idx] = cap;
      }
    }
    if (total > cfg.max_seq)
      throw StructuralError("utterance " + list.utterance_id +
                            ": hypotheses still overflow the packed sequence after truncation");
  }

  std::vector<int> tokens, segments;
  tokens.reserve(total);
  segments.reserve(total);
  std::vector<int> cls_positions(N);
  for (int i = 0; i < N; ++i) {
    cls_positions[i] = static_cast<int>(tokens.size());
    tokens.push_back(kClsId);
    segments.push_back(i);
    const std::vector<int>& hyp = list.hypotheses[i].tokens;
    for (int t = 0; t < lens[i]; ++t) {
      tokens.push_back(hyp[t]);
      segments.push_back(i);
    }
    tokens.push_back(kSepId);
    segments.push_back(i);
  }
  const std::vector<uint8_t> padding(tokens.size(), 0);

  EncodeCache local;
  if (keep_caches) enc.caches.resize(1);
  const Matrix hidden =
      encode(params, tokens, segments, padding, keep_caches ? &enc.caches[0] : &local);
  for (int i = 0; i < N; ++i) {
    for (int c = 0; c < cfg.hidden; ++c) enc.cls(i, c) = hidden(cls_positions[i], c);
    enc.slot_site[i] = {0, cls_positions[i]};
  }
  return enc;
}

Matrix build_features(const Matrix& cls_vectors, const std::vector<Hypothesis>& hypotheses,
                      const std::vector<std::vector<double>>* topic_vectors,
                      const FeatureConfig& config) {
  config.validate();
  const int N = cls_vectors.rows;
  if (N != static_cast<int>(hypotheses.size()))
    throw StructuralError("build_features: got " + std::to_string(N) + " encoder vectors for " +
                          std::to_string(hypotheses.size()) + " hypotheses");
  if (config.topic_enabled != (topic_vectors != nullptr))
    throw StructuralError(
        "build_features: topic vectors must be supplied exactly when topics are enabled");
  if (topic_vectors && static_cast<int>(topic_vectors->size()) != N)
    throw StructuralError("build_features: topic vector count does not match hypotheses");

  const int d = cls_vectors.cols;
  Matrix features(N, d + config.appended_dims());
  for (int i = 0; i < N; ++i) {
    int c = 0;
    for (; c < d; ++c) features(i, c) = cls_vectors(i, c);
    if (config.score_setting == ScoreSetting::kCombined) {
      const double raw =
          config.lambda_am * hypotheses[i].am_score + config.lambda_lm * hypotheses[i].lm_score;
      features(i, c++) = (raw - config.combined_mean) / config.combined_std;
    } else if (config.score_setting == ScoreSetting::kSplit) {
      features(i, c++) = (hypotheses[i].am_score - config.am_mean) / config.am_std;
      features(i, c++) = (hypotheses[i].lm_score - config.lm_mean) / config.lm_std;
    }
    if (topic_vectors) {
      const std::vector<double>& tv = (*topic_vectors)[i];
      if (static_cast<int>(tv.size()) != config.topics)
        throw StructuralError("build_features: topic vector of dim " +
                              std::to_string(tv.size()) + " does not match configured " +
                              std::to_string(config.topics));
      for (double v : tv) features(i, c++) = v;
    }
  }
  return features;
}

std::vector<std::vector<double>> hypothesis_topic_vectors(const TopicModel& model,
                                                          const NBestList& list) {
  std::vector<std::vector<double>> out;
  out.reserve(list.hypotheses.size());
  const int vocab_size = model.vocab_words + kNumSpecialTokens;
  for (const Hypothesis& hyp : list.hypotheses)
    out.push_back(fold_in(model, bag_from_tokens(hyp.tokens, vocab_size),
                          model.fold_in_iterations));
  return out;
}

RerankSelection predict(const PredictionHead& head, const Matrix& features,
                        const std::vector<uint8_t>& valid_mask) {
  const int N = features.rows;
  if (N < 1) throw StructuralError("predict: no hypothesis slots");
  if (static_cast<int>(valid_mask.size()) != N)
    throw StructuralError("predict: validity mask does not match slot count");
  if (features.cols != head.input_dim())
    throw StructuralError("predict: feature dim " + std::to_string(features.cols) +
                          " does not match head input dim " + std::to_string(head.input_dim()));

  std::vector<double> logits(N, 0.0);
  std::vector<double> hidden(head.hidden_dim());
  double max_logit = -std::numeric_limits<double>::infinity();
  int valid = 0;
  for (int i = 0; i < N; ++i) {
    if (!valid_mask[i]) continue;
    ++valid;
    logits[i] = head_forward(head, features.row(i), hidden.data());
    max_logit = std::max(max_logit, logits[i]);
  }
  if (valid == 0) throw InvalidArgumentError("predict: every hypothesis slot is masked out");

  RerankSelection sel;
  sel.probs.assign(N, 0.0);
  double denom = 0.0;
  for (int i = 0; i < N; ++i) {
    if (!valid_mask[i]) continue;
    sel.probs[i] = std::exp(logits[i] - max_logit);
    denom += sel.probs[i];
  }
  for (int i = 0; i < N; ++i)
    if (valid_mask[i]) sel.probs[i] /= denom;
  sel.chosen = 0;
  double best = -1.0;
  for (int i = 0; i < N; ++i) {
    if (sel.probs[i] > best) {
      best = sel.probs[i];
      sel.chosen = i;
    }
  }
  return sel;
}

double rerank_list_loss(const EncoderParams& encoder, const PredictionHead& head,
                        const NBestList& list,
                        const std::vector<std::vector<double>>* topic_vectors,
                        const FeatureConfig& config, EncodeMode mode, bool fine_tune,
                        PredictionHead* head_grads, EncoderParams* encoder_grads) {
  if (list.oracle < 0 || list.oracle >= static_cast<int>(list.hypotheses.size()))
    throw StructuralError("rerank_list_loss: utterance " + list.utterance_id +
                          " lacks a valid oracle label");
  if (fine_tune && head_grads && !encoder_grads)
    throw InvalidArgumentError("rerank_list_loss: fine_tune gradients need encoder_grads");

  const int N = static_cast<int>(list.hypotheses.size());
  const int d = encoder.config.hidden;
  const bool want_grads = head_grads != nullptr;
  NBestEncoding enc = encode_nbest(encoder, list, mode, want_grads && fine_tune);
  const Matrix features = build_features(enc.cls, list.hypotheses, topic_vectors, config);

  std::vector<double> hidden_buf(static_cast<size_t>(N) * head.hidden_dim());
  std::vector<double> logits(N);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < N; ++i) {
    logits[i] = head_forward(head, features.row(i),
                             hidden_buf.data() + static_cast<size_t>(i) * head.hidden_dim());
    max_logit = std::max(max_logit, logits[i]);
  }
  double denom = 0.0;
  for (int i = 0; i < N; ++i) denom += std::exp(logits[i] - max_logit);
  const double log_denom = std::log(denom) + max_logit;
  const double loss = log_denom - logits[list.oracle];
  if (!want_grads) return loss;

  Matrix d_features(N, features.cols);
  for (int i = 0; i < N; ++i) {
    double d_logit = std::exp(logits[i] - log_denom);
    if (i == list.oracle) d_logit -= 1.0;
    head_backward(head, features.row(i),
                  hidden_buf.data() + static_cast<size_t>(i) * head.hidden_dim(), d_logit,
                  *head_grads, d_features.row(i));
  }
  if (fine_tune) {
    // Only the leading d feature dims come from the encoder; route them back
    // through the [CLS] rows they were read from.
    std::vector<Matrix> d_hidden(enc.caches.size());
    for (size_t c = 0; c < enc.caches.size(); ++c)
      d_hidden[c] = Matrix(enc.caches[c].hidden.rows, d);
    for (int i = 0; i < N; ++i) {
      const auto [cache_idx, row] = enc.slot_site[i];
      for (int c = 0; c < d; ++c) d_hidden[cache_idx](row, c) += d_features(i, c);
    }
    for (size_t c = 0; c < enc.caches.size(); ++c)
      encode_backward(encoder, enc.caches[c], d_hidden[c], *encoder_grads);
  }
  return loss;
}

RerankTrainResult train_reranker(EncoderParams& encoder, PredictionHead& head,
                                 const Dataset& train, const Dataset* dev,
                                 const TopicModel* topic_model, FeatureConfig& config,
                                 const RerankTrainOptions& opts, uint64_t seed) {
  if (opts.epochs < 0) throw InvalidArgumentError("train_reranker: epochs must be >= 0");
  if (train.lists.empty()) throw InvalidArgumentError("train_reranker: empty training set");
  if (config.topic_enabled && !topic_model)
    throw InvalidArgumentError("train_reranker: topic features enabled but no topic model given");
  if (config.topic_enabled) config.topics = topic_model->topics;
  config.validate();
  for (const NBestList& list : train.lists)
    if (list.oracle < 0)
      throw StructuralError("train_reranker: utterance " + list.utterance_id +
                            " lacks an oracle label");

  fit_standardization(config, train);
  const int in_dim = encoder.config.hidden + config.appended_dims();
  if (head.input_dim() != in_dim)
    throw InvalidArgumentError("train_reranker: head expects input dim " +
                               std::to_string(head.input_dim()) + " but features have dim " +
                               std::to_string(in_dim));

  // Topic vectors depend only on the frozen topic model; compute them once.
  std::vector<std::vector<std::vector<double>>> train_topics, dev_topics;
  if (config.topic_enabled) {
    train_topics.reserve(train.lists.size());
    for (const NBestList& list : train.lists)
      train_topics.push_back(hypothesis_topic_vectors(*topic_model, list));
    if (dev) {
      dev_topics.reserve(dev->lists.size());
      for (const NBestList& list : dev->lists)
        dev_topics.push_back(hypothesis_topic_vectors(*topic_model, list));
    }
  }

  PredictionHead head_grads = head.zeros_like();
  EncoderParams encoder_grads = opts.fine_tune ? encoder.zeros_like() : EncoderParams{};
  std::vector<Matrix*> param_ptrs = collect_ptrs(head.tensors());
  std::vector<Matrix*> grad_ptrs = collect_ptrs(head_grads.tensors());
  if (opts.fine_tune) {
    for (Matrix* m : collect_ptrs(encoder.tensors())) param_ptrs.push_back(m);
    for (Matrix* m : collect_ptrs(encoder_grads.tensors())) grad_ptrs.push_back(m);
  }
  std::vector<const Matrix*> param_cptrs(param_ptrs.begin(), param_ptrs.end());
  std::vector<const Matrix*> grad_cptrs(grad_ptrs.begin(), grad_ptrs.end());
  AdamState adam = AdamState::like(param_cptrs);

  std::mt19937_64 rng(seed);
  std::vector<size_t> order(train.lists.size());
  std::iota(order.begin(), order.end(), 0);

  RerankTrainResult result;
  long long step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (size_t li : order) {
      const NBestList& list = train.lists[li];
      ++step;
      for (Matrix* g : grad_ptrs) g->fill(0.0);
      const double loss = rerank_list_loss(
          encoder, head, list, config.topic_enabled ? &train_topics[li] : nullptr, config,
          opts.mode, opts.fine_tune, &head_grads,
          opts.fine_tune ? &encoder_grads : nullptr);
      if (!std::isfinite(loss))
        throw NumericError("train_reranker: loss diverged at step " + std::to_string(step));

      adam_step(param_ptrs, grad_cptrs, adam, opts.adam);
      for (Matrix* p : param_ptrs)
        if (!all_finite(*p))
          throw NumericError("train_reranker: non-finite parameters after step " +
                             std::to_string(step));
      epoch_sum += loss;
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(train.lists.size()));

    if (dev) {
      long long correct = 0;
      for (size_t li = 0; li < dev->lists.size(); ++li) {
        const NBestList& list = dev->lists[li];
        NBestEncoding enc = encode_nbest(encoder, list, opts.mode, false);
        const Matrix features =
            build_features(enc.cls, list.hypotheses,
                           config.topic_enabled ? &dev_topics[li] : nullptr, config);
        const RerankSelection sel =
            predict(head, features, std::vector<uint8_t>(list.hypotheses.size(), 1));
        if (sel.chosen == list.oracle) ++correct;
      }
      result.epoch_dev_accuracy.push_back(
          dev->lists.empty() ? 0.0
                             : static_cast<double>(correct) /
                                   static_cast<double>(dev->lists.size()));
    }
  }
  return result;
}

RerankSelection rerank_list(const EncoderParams& encoder, const PredictionHead& head,
                            const TopicModel* topic_model, const FeatureConfig& config,
                            EncodeMode mode, const NBestList& list) {
  if (config.topic_enabled && !topic_model)
    throw InvalidArgumentError("rerank_list: topic features enabled but no topic model given");
  NBestEncoding enc = encode_nbest(encoder, list, mode, false);
  std::vector<std::vector<double>> topics;
  if (config.topic_enabled) topics = hypothesis_topic_vectors(*topic_model, list);
  const Matrix features = build_features(enc.cls, list.hypotheses,
                                         config.topic_enabled ? &topics : nullptr, config);
  RerankSelection sel =
      predict(head, features, std::vector<uint8_t>(list.hypotheses.size(), 1));
  sel.utterance_id = list.utterance_id;
  return sel;
}

PllResult pll_score(const EncoderParams& params, const std::vector<int>& content_tokens) {
  if (content_tokens.empty()) return {0.0, true};
  const std::vector<int> framed = frame_sequence(content_tokens, params.config.max_seq);
  const std::vector<int> segments(framed.size(), 0);
  const std::vector<uint8_t> padding(framed.size(), 0);

  double sum = 0.0;
  std::vector<int> corrupted = framed;
  for (int t = 1; t + 1 < static_cast<int>(framed.size()); ++t) {
    corrupted[t] = kMaskId;
    const Matrix hidden = encode(params, corrupted, segments, padding);
    const Matrix lp = head_log_probs(params, hidden, {t});
    sum += lp(0, framed[t]);
    corrupted[t] = framed[t];
  }
  return {sum, false};
}

RerankSelection mbert_rerank(const EncoderParams& params, const NBestList& list,
                             const MbertWeights& weights) {
  const int N = static_cast<int>(list.hypotheses.size());
  if (N == 0)
    throw StructuralError("utterance " + list.utterance_id + ": empty hypothesis list");
  std::vector<double> scores(N);
  for (int i = 0; i < N; ++i) {
    const Hypothesis& hyp = list.hypotheses[i];
    double s = weights.am * hyp.am_score + weights.lm * hyp.lm_score;
    if (weights.pll != 0.0) s += weights.pll * pll_score(params, hyp.tokens).value;
    scores[i] = s;
  }
  RerankSelection sel;
  sel.utterance_id = list.utterance_id;
  sel.method = "mbert";
  sel.chosen = 0;
  for (int i = 1; i < N; ++i)
    if (scores[i] > scores[sel.chosen]) sel.chosen = i;
  const double max_score = scores[sel.chosen];
  sel.probs.assign(N, 0.0);
  double denom = 0.0;
  for (int i = 0; i < N; ++i) {
    sel.probs[i] = std::exp(scores[i] - max_score);
    denom += sel.probs[i];
  }
  for (double& p : sel.probs) p /= denom;
  return sel;
}

MbertWeights mbert_grid_search(const EncoderParams& params, const Dataset& dev,
                               const std::vector<double>& grid_values) {
  if (grid_values.empty())
    throw InvalidArgumentError("mbert_grid_search: empty grid");
  if (dev.lists.empty()) throw InvalidArgumentError("mbert_grid_search: empty dev set");

  // PLL and per-hypothesis error counts do not depend on the weights.
  std::vector<std::vector<double>> pll(dev.lists.size());
  std::vector<std::vector<long long>> errs(dev.lists.size());
  long long ref_total = 0;
  for (size_t l = 0; l < dev.lists.size(); ++l) {
    const NBestList& list = dev.lists[l];
    if (list.hypotheses.empty())
      throw StructuralError("utterance " + list.utterance_id + ": empty hypothesis list");
    if (!list.has_reference)
      throw StructuralError("mbert_grid_search: utterance " + list.utterance_id +
                            " has no reference");
    ref_total += static_cast<long long>(list.reference.size());
    pll[l].resize(list.hypotheses.size());
    errs[l].resize(list.hypotheses.size());
    for (size_t i = 0; i < list.hypotheses.size(); ++i) {
      pll[l][i] = pll_score(params, list.hypotheses[i].tokens).value;
      errs[l][i] = list.hypotheses[i].wer_stats
                       ? list.hypotheses[i].wer_stats->errors()
                       : word_error_rate(list.reference, list.hypotheses[i].tokens).errors();
    }
  }
  if (ref_total < 1) ref_total = 1;

  MbertWeights best;
  long long best_errors = -1;
  for (double pw : grid_values) {
    for (double aw : grid_values) {
      for (double lw : grid_values) {
        long long total = 0;
        for (size_t l = 0; l < dev.lists.size(); ++l) {
          const NBestList& list = dev.lists[l];
          int chosen = 0;
          double chosen_score = -std::numeric_limits<double>::infinity();
          for (size_t i = 0; i < list.hypotheses.size(); ++i) {
            const double s = pw * pll[l][i] + aw * list.hypotheses[i].am_score +
                             lw * list.hypotheses[i].lm_score;
            if (s > chosen_score) {
              chosen_score = s;
              chosen = static_cast<int>(i);
            }
          }
          total += errs[l][chosen];
        }
        if (best_errors < 0 || total < best_errors) {
          best_errors = total;
          best = {pw, aw, lw};
        }
      }
    }
  }
  return best;
}

MlmFineTuneRegime regime_from_name(const std::string& name) {
  if (name == "a" || name == "none") return MlmFineTuneRegime::kNone;
  if (name == "b" || name == "references") return MlmFineTuneRegime::kReferences;
  if (name == "c" || name == "oracles") return MlmFineTuneRegime::kOracles;
  throw InvalidArgumentError("unknown fine-tuning regime '" + name + "', expected a, b or c");
}

std::string regime_name(MlmFineTuneRegime r) {
  switch (r) {
    case MlmFineTuneRegime::kNone: return "a";
    case MlmFineTuneRegime::kReferences: return "b";
    case MlmFineTuneRegime::kOracles: return "c";
  }
  throw InvalidArgumentError("unknown fine-tuning regime");
}

PretrainResult mlm_fine_tune(EncoderParams& params, const Dataset& dataset,
                             MlmFineTuneRegime regime, const PretrainOptions& opts,
                             uint64_t seed) {
  if (regime == MlmFineTuneRegime::kNone) return {};
  std::vector<std::vector<int>> corpus;
  corpus.reserve(dataset.lists.size());
  for (const NBestList& list : dataset.lists) {
    if (regime == MlmFineTuneRegime::kReferences) {
      if (!list.has_reference)
        throw StructuralError("mlm_fine_tune: utterance " + list.utterance_id +
                              " has no reference transcript");
      corpus.push_back(list.reference);
    } else {
      if (list.oracle < 0 || list.oracle >= static_cast<int>(list.hypotheses.size()))
        throw StructuralError("mlm_fine_tune: utterance " + list.utterance_id +
                              " has no oracle label");
      corpus.push_back(list.hypotheses[list.oracle].tokens);
    }
  }
  return pretrain(params, corpus, opts, seed);
}

void save_reranker(const RerankerBundle& bundle, const std::string& path,
                   uint64_t vocab_fingerprint) {
  nlohmann::json meta{{"feature_config", bundle.config.to_json()},
                      {"mode", encode_mode_name(bundle.mode)},
                      {"encoder_config", bundle.encoder.config.to_json()},
                      {"vocab_fingerprint", std::to_string(vocab_fingerprint)}};
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (auto& [name, m] : bundle.head.tensors()) tensors.emplace_back(name, m);
  for (auto& [name, m] : bundle.encoder.tensors())
    tensors.emplace_back("encoder." + name, m);
  save_checkpoint_file(path, "reranker", meta, tensors);
}

RerankerBundle load_reranker(const std::string& path, uint64_t* vocab_fingerprint) {
  LoadedCheckpoint ckpt = load_checkpoint_file(path, "reranker");
  RerankerBundle bundle;
  try {
    bundle.config = FeatureConfig::from_json(ckpt.meta.at("feature_config"));
    bundle.mode = encode_mode_from_name(ckpt.meta.at("mode").get<std::string>());
    bundle.encoder.config = EncoderConfig::from_json(ckpt.meta.at("encoder_config"));
    if (vocab_fingerprint)
      *vocab_fingerprint =
          std::stoull(ckpt.meta.at("vocab_fingerprint").get<std::string>(), nullptr, 10);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": reranker metadata: " + e.what());
  }

  bundle.encoder = bundle.encoder.zeros_like();  // allocate at the recorded shapes
  size_t consumed = 0;
  for (auto& [name, tensor] : bundle.encoder.tensors()) {
    auto it = ckpt.tensors.find("encoder." + name);
    if (it == ckpt.tensors.end())
      throw ParseError(path + ": reranker checkpoint is missing tensor 'encoder." + name + "'");
    if (!tensor->same_shape(it->second))
      throw ParseError(path + ": tensor 'encoder." + name + "' shape mismatch");
    *tensor = std::move(it->second);
    ++consumed;
  }

  auto take = [&](const char* name) -> Matrix {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end())
      throw ParseError(path + ": reranker checkpoint is missing tensor '" + std::string(name) +
                       "'");
    ++consumed;
    return std::move(it->second);
  };
  bundle.head.w1 = take("head.w1");
  bundle.head.b1 = take("head.b1");
  bundle.head.w2 = take("head.w2");
  bundle.head.b2 = take("head.b2");
  if (consumed != ckpt.tensors.size())
    throw ParseError(path + ": reranker checkpoint holds unexpected extra tensors");

  const int in_dim = bundle.encoder.config.hidden + bundle.config.appended_dims();
  if (bundle.head.w1.rows != in_dim || bundle.head.b1.cols != bundle.head.w1.cols ||
      bundle.head.w2.rows != bundle.head.w1.cols || bundle.head.w2.cols != 1 ||
      bundle.head.b2.rows != 1 || bundle.head.b2.cols != 1)
    throw ParseError(path + ": prediction-head tensor shapes are inconsistent");
  return bundle;
}

}  // namespace nbr
