#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adam.hpp"
#include "matrix.hpp"
#include "vocab.hpp"

namespace nbr {

// Miniature bidirectional self-attention encoder: token/position/segment
// embeddings feeding L pre-norm residual blocks (multi-head attention, then
// a GELU feed-forward), a final layer normalization, and a linear
// masked-token prediction head over the vocabulary.
struct EncoderConfig {
  int vocab_size = 200;
  int hidden = 32;
  int layers = 2;
  int heads = 2;
  int ffn = 64;
  int max_seq = 128;
  int max_segments = 16;
  double mask_prob = 0.15;
  // Action split for selected positions: replace with [MASK], replace with a
  // random content token, keep unchanged. Must sum to 1.
  double action_mask = 0.8;
  double action_random = 0.1;
  double action_keep = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  bool operator==(const EncoderConfig&) const = default;
};

struct LayerParams {
  Matrix ln1_g, ln1_b;          // 1 x d
  Matrix wq, wk, wv, wo;        // d x d
  Matrix bq, bk, bv, bo;        // 1 x d
  Matrix ln2_g, ln2_b;          // 1 x d
  Matrix ffn_w1, ffn_b1;        // d x ffn, 1 x ffn
  Matrix ffn_w2, ffn_b2;        // ffn x d, 1 x d
};

struct EncoderParams {
  EncoderConfig config;
  Matrix tok_emb;  // V x d
  Matrix pos_emb;  // max_seq x d
  Matrix seg_emb;  // max_segments x d
  std::vector<LayerParams> layers;
  Matrix ln_f_g, ln_f_b;  // 1 x d
  Matrix head_w;          // d x V
  Matrix head_b;          // 1 x V

  static EncoderParams init(const EncoderConfig& config, uint64_t seed);
  // Same shapes, all zeros; used for gradients and optimizer state.
  EncoderParams zeros_like() const;

  // Stable name -> tensor registry; drives checkpoints, the optimizer and
  // finite-difference probes.
  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;
};

// One masked sequence. Sequences are processed unpadded; the padding mask
// exists for callers that assemble fixed-length inputs.
struct MaskedBatch {
  std::vector<int> tokens;       // x, the original framed sequence
  std::vector<int> corrupted;    // x-hat
  std::vector<uint8_t> mask;     // m_t, 1 where the position was selected
  std::vector<int> segments;
  std::vector<uint8_t> padding;  // 1 = padded position
};

// Per-layer forward records kept for the backward pass and for tests that
// inspect attention distributions.
struct LayerCache {
  Matrix x_in;
  Matrix ln1_out, ln1_xhat;
  std::vector<double> ln1_inv_std;
  Matrix q, k, v;                  // T x d, heads side by side
  std::vector<Matrix> attn_probs;  // per head, T x T, zero at padded keys
  Matrix context;                  // T x d
  Matrix after_attn;               // x_in + attention output
  Matrix ln2_out, ln2_xhat;
  std::vector<double> ln2_inv_std;
  Matrix ffn_pre;  // T x ffn, before GELU
  Matrix ffn_act;  // T x ffn, after GELU
};

struct EncodeCache {
  std::vector<int> tokens;
  std::vector<int> segments;
  std::vector<uint8_t> padding;
  Matrix embedded;  // T x d sum of the three embeddings
  std::vector<LayerCache> layers;
  Matrix pre_final;  // T x d, input of the final layer norm
  Matrix final_xhat;
  std::vector<double> final_inv_std;
  Matrix hidden;  // T x d, the encoder output
};

// Runs the encoder. Throws StructuralError on out-of-range ids or sequences
// longer than max_seq. When `cache` is non-null the full forward record is
// kept for a later backward pass.
Matrix encode(const EncoderParams& params, const std::vector<int>& tokens,
              const std::vector<int>& segments, const std::vector<uint8_t>& padding,
              EncodeCache* cache = nullptr);

// Accumulates parameter gradients for d(loss)/d(hidden) into `grads`.
void encode_backward(const EncoderParams& params, const EncodeCache& cache, const Matrix& d_hidden,
                     EncoderParams& grads);

// Rows of the final hidden states at the given positions, which must hold
// [CLS] tokens.
Matrix cls_vector(const Matrix& hidden, const std::vector<int>& tokens,
                  const std::vector<int>& cls_positions);

// Wraps content tokens as [CLS] tokens [SEP], truncating to max_seq.
std::vector<int> frame_sequence(const std::vector<int>& content, int max_seq);

// Independently selects each maskable position with probability mask_prob and
// applies the configured action split. [CLS]/[SEP]/other specials are never
// maskable.
MaskedBatch mask_inputs(const std::vector<int>& framed_tokens, const EncoderConfig& config,
                        std::mt19937_64& rng);

struct MlmResult {
  double loss = 0.0;        // mean cross-entropy over selected positions
  long long selected = 0;   // number of selected positions
};

// Loss only.
MlmResult mlm_loss(const EncoderParams& params, const MaskedBatch& batch);
// Loss plus analytic gradients for every parameter tensor (accumulated into
// `grads`, scaled as the gradient of the mean loss).
MlmResult mlm_loss_grad(const EncoderParams& params, const MaskedBatch& batch,
                        EncoderParams& grads);

// Log-probability rows of the prediction head; one row per requested
// position.
Matrix head_log_probs(const EncoderParams& params, const Matrix& hidden,
                      const std::vector<int>& positions);

struct PretrainOptions {
  int epochs = 5;
  int batch_size = 16;
  AdamConfig adam;
};

struct PretrainResult {
  std::vector<double> epoch_loss;  // mean masked loss per epoch
};

// Masked-LM pretraining over a corpus of content-token sequences.
// Deterministic given the seed; throws NumericError with the step index if
// the loss diverges.
PretrainResult pretrain(EncoderParams& params, const std::vector<std::vector<int>>& corpus,
                        const PretrainOptions& opts, uint64_t seed);

// Mean masked loss over a corpus under a fixed masking realization; used to
// compare parameters before and after fine-tuning.
double mlm_corpus_loss(const EncoderParams& params, const std::vector<std::vector<int>>& corpus,
                       uint64_t mask_seed);

// Fraction of masked positions whose argmax prediction recovers the original
// token, under a fixed masking realization.
double mlm_corpus_accuracy(const EncoderParams& params,
                           const std::vector<std::vector<int>>& corpus, uint64_t mask_seed);

void save_encoder(const EncoderParams& params, const std::string& path,
                  uint64_t vocab_fingerprint);
EncoderParams load_encoder(const std::string& path, uint64_t* vocab_fingerprint = nullptr);

}  // namespace nbr
