#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "encoder.hpp"
#include "nbest.hpp"
#include "plsa.hpp"

namespace nbr {

// How ASR decoding scores are appended to each hypothesis's feature vector:
// not at all, as one combined log-linear score, or as separate acoustic and
// language-model dimensions.
enum class ScoreSetting { kNone, kCombined, kSplit };

std::string score_setting_name(ScoreSetting s);
ScoreSetting score_setting_from_name(const std::string& name);

struct FeatureConfig {
  ScoreSetting score_setting = ScoreSetting::kNone;
  bool topic_enabled = false;
  int topics = 0;  // appended topic dims when topic_enabled
  // Combined-setting mixing weights (log-linear; decoder weights unknown).
  double lambda_am = 1.0;
  double lambda_lm = 1.0;
  // Standardization parameters estimated on the training set.
  double am_mean = 0.0, am_std = 1.0;
  double lm_mean = 0.0, lm_std = 1.0;
  double combined_mean = 0.0, combined_std = 1.0;

  int appended_dims() const;
  void validate() const;
  nlohmann::json to_json() const;
  static FeatureConfig from_json(const nlohmann::json& j);
};

// Estimates the score standardization constants from every hypothesis in the
// training set. Degenerate (constant) scores keep std = 1.
void fit_standardization(FeatureConfig& config, const Dataset& train);

// Shared per-hypothesis scorer: feature vector -> tanh hidden layer -> scalar
// logit. Sharing one head across slots keeps the listwise softmax
// permutation-equivariant and independent of N.
struct PredictionHead {
  Matrix w1;  // in_dim x hidden
  Matrix b1;  // 1 x hidden
  Matrix w2;  // hidden x 1
  Matrix b2;  // 1 x 1

  int input_dim() const { return w1.rows; }
  int hidden_dim() const { return w1.cols; }

  static PredictionHead init(int input_dim, int hidden_dim, uint64_t seed);
  PredictionHead zeros_like() const;
  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;
};

struct RerankSelection {
  std::string utterance_id;
  std::string method;
  std::vector<double> probs;  // per slot; invalid slots exactly 0
  int chosen = 0;
};

enum class EncodeMode { kJoint, kIndependent };

std::string encode_mode_name(EncodeMode m);
EncodeMode encode_mode_from_name(const std::string& name);

// Result of running the encoder over one n-best list, with enough forward
// state kept (when requested) to push gradients back through the [CLS] rows.
struct NBestEncoding {
  Matrix cls;  // N x d, in list order
  std::vector<EncodeCache> caches;             // 1 in joint mode, N in independent
  std::vector<std::pair<int, int>> slot_site;  // per hypothesis: (cache, row)
};

// Joint mode packs "[CLS] h_i [SEP]" blocks into one sequence with segment id
// = hypothesis index and global positions; hypotheses are truncated to
// floor((T_max - 2N)/N) tokens longest-first (ties to the smaller index),
// stopping as soon as the packed length fits. Independent mode encodes each
// hypothesis on its own.
NBestEncoding encode_nbest(const EncoderParams& params, const NBestList& list, EncodeMode mode,
                           bool keep_caches = false);

// feature_i = cls_i ++ standardized scores per the setting ++ topic vector.
// topic_vectors must be present exactly when config.topic_enabled.
Matrix build_features(const Matrix& cls_vectors, const std::vector<Hypothesis>& hypotheses,
                      const std::vector<std::vector<double>>* topic_vectors,
                      const FeatureConfig& config);

// Per-hypothesis topic vectors via fold-in (model's iteration budget).
std::vector<std::vector<double>> hypothesis_topic_vectors(const TopicModel& model,
                                                          const NBestList& list);

// Softmax over the valid slots; invalid slots get exactly 0 probability.
// chosen = argmax probability, ties to the smallest index.
RerankSelection predict(const PredictionHead& head, const Matrix& features,
                        const std::vector<uint8_t>& valid_mask);

struct RerankTrainOptions {
  int epochs = 10;
  EncodeMode mode = EncodeMode::kJoint;
  bool fine_tune = true;  // backpropagate through the encoder
  AdamConfig adam;
};

struct RerankTrainResult {
  std::vector<double> epoch_loss;          // mean listwise cross-entropy
  std::vector<double> epoch_dev_accuracy;  // empty when no dev set given
};

// Listwise cross-entropy of one list against its oracle label. When
// head_grads is given, analytic gradients are accumulated into it (and into
// encoder_grads when fine_tune is set; the caller zeroes both first).
// topic_vectors must match config.topic_enabled.
double rerank_list_loss(const EncoderParams& encoder, const PredictionHead& head,
                        const NBestList& list,
                        const std::vector<std::vector<double>>* topic_vectors,
                        const FeatureConfig& config, EncodeMode mode, bool fine_tune,
                        PredictionHead* head_grads = nullptr,
                        EncoderParams* encoder_grads = nullptr);

// Listwise training against the oracle index. config's standardization is
// fit on `train` up front. With fine_tune=false the encoder is left
// bit-identical. Topic model required iff config.topic_enabled.
RerankTrainResult train_reranker(EncoderParams& encoder, PredictionHead& head,
                                 const Dataset& train, const Dataset* dev,
                                 const TopicModel* topic_model, FeatureConfig& config,
                                 const RerankTrainOptions& opts, uint64_t seed);

// Applies a trained reranker to one list.
RerankSelection rerank_list(const EncoderParams& encoder, const PredictionHead& head,
                            const TopicModel* topic_model, const FeatureConfig& config,
                            EncodeMode mode, const NBestList& list);

struct PllResult {
  double value = 0.0;
  bool empty_hypothesis = false;  // PLL of an empty hypothesis is 0, flagged
};

// Pseudo-log-likelihood: for each content position, mask exactly that
// position, run the encoder, and take the head's log-probability of the
// original token; positions are summed in ascending order.
PllResult pll_score(const EncoderParams& params, const std::vector<int>& content_tokens);

struct MbertWeights {
  double pll = 1.0;
  double am = 1.0;
  double lm = 1.0;
};

// score_i = pll_w * PLL_i + am_w * am_i + lm_w * lm_i; argmax with ties to
// the smallest index. Probabilities are the softmax of the scores
// (diagnostic only).
RerankSelection mbert_rerank(const EncoderParams& params, const NBestList& list,
                             const MbertWeights& weights);

// Exhaustive grid search minimizing pooled WER on `dev`; ties resolved by
// iteration order (pll outermost, lm innermost). Hypothesis PLLs are
// computed once and reused across the grid.
MbertWeights mbert_grid_search(const EncoderParams& params, const Dataset& dev,
                               const std::vector<double>& grid_values);

enum class MlmFineTuneRegime { kNone, kReferences, kOracles };

MlmFineTuneRegime regime_from_name(const std::string& name);
std::string regime_name(MlmFineTuneRegime r);

// Continues masked-LM training on the regime's text source: none leaves the
// params untouched, references uses the ground-truth transcripts, oracles
// uses each list's oracle hypothesis.
PretrainResult mlm_fine_tune(EncoderParams& params, const Dataset& dataset,
                             MlmFineTuneRegime regime, const PretrainOptions& opts,
                             uint64_t seed);

// Reranker bundle: the (possibly fine-tuned) encoder is embedded outright so
// the artifact stays valid even when training updated it.
struct RerankerBundle {
  EncoderParams encoder;
  PredictionHead head;
  FeatureConfig config;
  EncodeMode mode = EncodeMode::kJoint;
};

void save_reranker(const RerankerBundle& bundle, const std::string& path,
                   uint64_t vocab_fingerprint);
RerankerBundle load_reranker(const std::string& path, uint64_t* vocab_fingerprint = nullptr);

}  // namespace nbr
