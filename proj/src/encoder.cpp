#include "encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "checkpoint.hpp"
#include "errors.hpp"

namespace nbr {

namespace {

// Keeps 1/sqrt(var) bounded when a row is nearly constant.
constexpr double kLnEpsilon = 1e-5;
constexpr double kInvSqrt2Pi = 0.39894228040143268;  // 1/sqrt(2*pi)

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_prime(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

void add_bias_rows(Matrix& m, const Matrix& bias) {
  for (int r = 0; r < m.rows; ++r) {
    double* row = m.row(r);
    for (int c = 0; c < m.cols; ++c) row[c] += bias(0, c);
  }
}

void add_col_sums(const Matrix& d, Matrix& d_bias) {
  for (int r = 0; r < d.rows; ++r) {
    const double* row = d.row(r);
    for (int c = 0; c < d.cols; ++c) d_bias(0, c) += row[c];
  }
}

void layer_norm_forward(const Matrix& x, const Matrix& g, const Matrix& b, Matrix& out,
                        Matrix& xhat, std::vector<double>& inv_std) {
  const int d = x.cols;
  out = Matrix(x.rows, d);
  xhat = Matrix(x.rows, d);
  inv_std.assign(x.rows, 0.0);
  for (int r = 0; r < x.rows; ++r) {
    const double* row = x.row(r);
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + kLnEpsilon);
    inv_std[r] = is;
    for (int c = 0; c < d; ++c) {
      const double xh = (row[c] - mean) * is;
      xhat(r, c) = xh;
      out(r, c) = g(0, c) * xh + b(0, c);
    }
  }
}

// Adds d(loss)/dx into d_x and the gain/bias gradients into d_g/d_b.
void layer_norm_backward(const Matrix& d_out, const Matrix& g, const Matrix& xhat,
                         const std::vector<double>& inv_std, Matrix& d_x, Matrix& d_g,
                         Matrix& d_b) {
  const int d = d_out.cols;
  for (int r = 0; r < d_out.rows; ++r) {
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (int c = 0; c < d; ++c) {
      const double dy = d_out(r, c);
      d_g(0, c) += dy * xhat(r, c);
      d_b(0, c) += dy;
      const double dxh = dy * g(0, c);
      mean_dxhat += dxh;
      mean_dxhat_xhat += dxh * xhat(r, c);
    }
    mean_dxhat /= d;
    mean_dxhat_xhat /= d;
    for (int c = 0; c < d; ++c) {
      const double dxh = d_out(r, c) * g(0, c);
      d_x(r, c) += inv_std[r] * (dxh - mean_dxhat - xhat(r, c) * mean_dxhat_xhat);
    }
  }
}

Matrix normal_matrix(int rows, int cols, double stddev, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.data) v = dist(rng);
  return m;
}

// Allocates every tensor at the shape the config dictates, zero-filled.
EncoderParams shaped_params(const EncoderConfig& config) {
  EncoderParams p;
  p.config = config;
  const int d = config.hidden;
  p.tok_emb = Matrix(config.vocab_size, d);
  p.pos_emb = Matrix(config.max_seq, d);
  p.seg_emb = Matrix(config.max_segments, d);
  p.layers.resize(config.layers);
  for (LayerParams& l : p.layers) {
    l.ln1_g = Matrix(1, d);
    l.ln1_b = Matrix(1, d);
    l.wq = Matrix(d, d);
    l.wk = Matrix(d, d);
    l.wv = Matrix(d, d);
    l.wo = Matrix(d, d);
    l.bq = Matrix(1, d);
    l.bk = Matrix(1, d);
    l.bv = Matrix(1, d);
    l.bo = Matrix(1, d);
    l.ln2_g = Matrix(1, d);
    l.ln2_b = Matrix(1, d);
    l.ffn_w1 = Matrix(d, config.ffn);
    l.ffn_b1 = Matrix(1, config.ffn);
    l.ffn_w2 = Matrix(config.ffn, d);
    l.ffn_b2 = Matrix(1, d);
  }
  p.ln_f_g = Matrix(1, d);
  p.ln_f_b = Matrix(1, d);
  p.head_w = Matrix(d, config.vocab_size);
  p.head_b = Matrix(1, config.vocab_size);
  return p;
}

std::vector<Matrix*> tensor_ptrs(std::vector<std::pair<std::string, Matrix*>> reg) {
  std::vector<Matrix*> out;
  out.reserve(reg.size());
  for (auto& [name, m] : reg) out.push_back(m);
  return out;
}

std::vector<const Matrix*> tensor_cptrs(
    const std::vector<std::pair<std::string, const Matrix*>>& reg) {
  std::vector<const Matrix*> out;
  out.reserve(reg.size());
  for (const auto& [name, m] : reg) out.push_back(m);
  return out;
}

}  // namespace

void EncoderConfig::validate() const {
  if (vocab_size <= kNumSpecialTokens)
    throw InvalidArgumentError("encoder config: vocab_size must exceed the " +
                               std::to_string(kNumSpecialTokens) + " reserved tokens, got " +
                               std::to_string(vocab_size));
  if (hidden < 1) throw InvalidArgumentError("encoder config: hidden dim must be >= 1");
  if (layers < 0) throw InvalidArgumentError("encoder config: layer count must be >= 0");
  if (heads < 1) throw InvalidArgumentError("encoder config: head count must be >= 1");
  if (hidden % heads != 0)
    throw InvalidArgumentError("encoder config: hidden dim " + std::to_string(hidden) +
                               " not divisible by " + std::to_string(heads) + " heads");
  if (ffn < 1) throw InvalidArgumentError("encoder config: feed-forward dim must be >= 1");
  if (max_seq < 2)
    throw InvalidArgumentError("encoder config: max_seq must be >= 2 to frame a sequence");
  if (max_segments < 1) throw InvalidArgumentError("encoder config: max_segments must be >= 1");
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0))
    throw InvalidArgumentError("encoder config: mask_prob must lie in [0,1]");
  if (action_mask < 0.0 || action_random < 0.0 || action_keep < 0.0)
    throw InvalidArgumentError("encoder config: mask-action probabilities must be >= 0");
  if (std::abs(action_mask + action_random + action_keep - 1.0) > 1e-12)
    throw InvalidArgumentError("encoder config: mask-action probabilities must sum to 1");
}

nlohmann::json EncoderConfig::to_json() const {
  return nlohmann::json{{"vocab_size", vocab_size},
                        {"hidden", hidden},
                        {"layers", layers},
                        {"heads", heads},
                        {"ffn", ffn},
                        {"max_seq", max_seq},
                        {"max_segments", max_segments},
                        {"mask_prob", mask_prob},
                        {"action_mask", action_mask},
                        {"action_random", action_random},
                        {"action_keep", action_keep}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.max_segments = j.at("max_segments").get<int>();
    c.mask_prob = j.at("mask_prob").get<double>();
    c.action_mask = j.at("action_mask").get<double>();
    c.action_random = j.at("action_random").get<double>();
    c.action_keep = j.at("action_keep").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("encoder config record: ") + e.what());
  }
  c.validate();
  return c;
}

EncoderParams EncoderParams::init(const EncoderConfig& config, uint64_t seed) {
  config.validate();
  EncoderParams p = shaped_params(config);
  std::mt19937_64 rng(seed);
  const double stddev = 0.02;
  // Random draws follow registry order for the weight tensors; layer-norm
  // gains start at 1 and every bias at 0.
  p.tok_emb = normal_matrix(config.vocab_size, config.hidden, stddev, rng);
  p.pos_emb = normal_matrix(config.max_seq, config.hidden, stddev, rng);
  p.seg_emb = normal_matrix(config.max_segments, config.hidden, stddev, rng);
  for (LayerParams& l : p.layers) {
    l.ln1_g.fill(1.0);
    l.wq = normal_matrix(config.hidden, config.hidden, stddev, rng);
    l.wk = normal_matrix(config.hidden, config.hidden, stddev, rng);
    l.wv = normal_matrix(config.hidden, config.hidden, stddev, rng);
    l.wo = normal_matrix(config.hidden, config.hidden, stddev, rng);
    l.ln2_g.fill(1.0);
    l.ffn_w1 = normal_matrix(config.hidden, config.ffn, stddev, rng);
    l.ffn_w2 = normal_matrix(config.ffn, config.hidden, stddev, rng);
  }
  p.ln_f_g.fill(1.0);
  p.head_w = normal_matrix(config.hidden, config.vocab_size, stddev, rng);
  return p;
}

EncoderParams EncoderParams::zeros_like() const { return shaped_params(config); }

std::vector<std::pair<std::string, Matrix*>> EncoderParams::tensors() {
  std::vector<std::pair<std::string, Matrix*>> reg;
  reg.emplace_back("emb.token", &tok_emb);
  reg.emplace_back("emb.pos", &pos_emb);
  reg.emplace_back("emb.seg", &seg_emb);
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string base = "layer" + std::to_string(i) + ".";
    LayerParams& l = layers[i];
    reg.emplace_back(base + "ln1.g", &l.ln1_g);
    reg.emplace_back(base + "ln1.b", &l.ln1_b);
    reg.emplace_back(base + "attn.wq", &l.wq);
    reg.emplace_back(base + "attn.bq", &l.bq);
    reg.emplace_back(base + "attn.wk", &l.wk);
    reg.emplace_back(base + "attn.bk", &l.bk);
    reg.emplace_back(base + "attn.wv", &l.wv);
    reg.emplace_back(base + "attn.bv", &l.bv);
    reg.emplace_back(base + "attn.wo", &l.wo);
    reg.emplace_back(base + "attn.bo", &l.bo);
    reg.emplace_back(base + "ln2.g", &l.ln2_g);
    reg.emplace_back(base + "ln2.b", &l.ln2_b);
    reg.emplace_back(base + "ffn.w1", &l.ffn_w1);
    reg.emplace_back(base + "ffn.b1", &l.ffn_b1);
    reg.emplace_back(base + "ffn.w2", &l.ffn_w2);
    reg.emplace_back(base + "ffn.b2", &l.ffn_b2);
  }
  reg.emplace_back("final_ln.g", &ln_f_g);
  reg.emplace_back("final_ln.b", &ln_f_b);
  reg.emplace_back("head.w", &head_w);
  reg.emplace_back("head.b", &head_b);
  return reg;
}

std::vector<std::pair<std::string, const Matrix*>> EncoderParams::tensors() const {
  auto mutable_reg = const_cast<EncoderParams*>(this)->tensors();
  std::vector<std::pair<std::string, const Matrix*>> reg;
  reg.reserve(mutable_reg.size());
  for (auto& [name, m] : mutable_reg) reg.emplace_back(name, m);
  return reg;
}

Matrix encode(const EncoderParams& params, const std::vector<int>& tokens,
              const std::vector<int>& segments, const std::vector<uint8_t>& padding,
              EncodeCache* cache) {
  const EncoderConfig& cfg = params.config;
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw StructuralError("encode: empty token sequence");
  if (segments.size() != tokens.size() || padding.size() != tokens.size())
    throw StructuralError("encode: tokens, segments and padding mask must have equal length");
  if (T > cfg.max_seq)
    throw StructuralError("encode: sequence length " + std::to_string(T) +
                          " exceeds max_seq " + std::to_string(cfg.max_seq));
  for (int t = 0; t < T; ++t) {
    if (tokens[t] < 0 || tokens[t] >= cfg.vocab_size)
      throw StructuralError("encode: token id " + std::to_string(tokens[t]) + " at position " +
                            std::to_string(t) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
    if (segments[t] < 0 || segments[t] >= cfg.max_segments)
      throw StructuralError("encode: segment id " + std::to_string(segments[t]) +
                            " at position " + std::to_string(t) + " outside max_segments " +
                            std::to_string(cfg.max_segments));
  }

  const int d = cfg.hidden;
  const int heads = cfg.heads;
  const int dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  EncodeCache local;
  local.tokens = tokens;
  local.segments = segments;
  local.padding = padding;

  Matrix x(T, d);
  for (int t = 0; t < T; ++t) {
    const double* te = params.tok_emb.row(tokens[t]);
    const double* pe = params.pos_emb.row(t);
    const double* se = params.seg_emb.row(segments[t]);
    double* row = x.row(t);
    for (int c = 0; c < d; ++c) row[c] = te[c] + pe[c] + se[c];
  }
  local.embedded = x;

  local.layers.resize(params.layers.size());
  for (size_t li = 0; li < params.layers.size(); ++li) {
    const LayerParams& l = params.layers[li];
    LayerCache& lc = local.layers[li];
    lc.x_in = x;

    layer_norm_forward(lc.x_in, l.ln1_g, l.ln1_b, lc.ln1_out, lc.ln1_xhat, lc.ln1_inv_std);

    matmul(lc.ln1_out, l.wq, lc.q);
    add_bias_rows(lc.q, l.bq);
    matmul(lc.ln1_out, l.wk, lc.k);
    add_bias_rows(lc.k, l.bk);
    matmul(lc.ln1_out, l.wv, lc.v);
    add_bias_rows(lc.v, l.bv);

    lc.attn_probs.assign(heads, Matrix(T, T));
    lc.context = Matrix(T, d);
    std::vector<double> scores(T);
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      Matrix& probs = lc.attn_probs[h];
      for (int i = 0; i < T; ++i) {
        // Padded keys are excluded before normalization; their probability
        // stays an exact 0.
        double max_score = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < T; ++j) {
          if (padding[j]) continue;
          double s = 0.0;
          const double* qi = lc.q.row(i) + off;
          const double* kj = lc.k.row(j) + off;
          for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt_dh;
          scores[j] = s;
          max_score = std::max(max_score, s);
        }
        double denom = 0.0;
        for (int j = 0; j < T; ++j) {
          if (padding[j]) continue;
          scores[j] = std::exp(scores[j] - max_score);
          denom += scores[j];
        }
        for (int j = 0; j < T; ++j) {
          if (padding[j]) continue;
          probs(i, j) = scores[j] / denom;
        }
        double* ctx = lc.context.row(i) + off;
        for (int j = 0; j < T; ++j) {
          const double p = probs(i, j);
          if (p == 0.0) continue;
          const double* vj = lc.v.row(j) + off;
          for (int c = 0; c < dh; ++c) ctx[c] += p * vj[c];
        }
      }
    }

    Matrix proj;
    matmul(lc.context, l.wo, proj);
    add_bias_rows(proj, l.bo);
    lc.after_attn = lc.x_in;
    add_inplace(lc.after_attn, proj);

    layer_norm_forward(lc.after_attn, l.ln2_g, l.ln2_b, lc.ln2_out, lc.ln2_xhat, lc.ln2_inv_std);

    matmul(lc.ln2_out, l.ffn_w1, lc.ffn_pre);
    add_bias_rows(lc.ffn_pre, l.ffn_b1);
    lc.ffn_act = lc.ffn_pre;
    for (double& v : lc.ffn_act.data) v = gelu(v);
    Matrix ffn_out;
    matmul(lc.ffn_act, l.ffn_w2, ffn_out);
    add_bias_rows(ffn_out, l.ffn_b2);

    x = lc.after_attn;
    add_inplace(x, ffn_out);
  }

  local.pre_final = x;
  Matrix hidden;
  layer_norm_forward(local.pre_final, params.ln_f_g, params.ln_f_b, hidden, local.final_xhat,
                     local.final_inv_std);
  if (!all_finite(hidden)) throw NumericError("encode: non-finite hidden states");
  local.hidden = hidden;
  if (cache) *cache = std::move(local);
  return hidden;
}

void encode_backward(const EncoderParams& params, const EncodeCache& cache, const Matrix& d_hidden,
                     EncoderParams& grads) {
  const EncoderConfig& cfg = params.config;
  const int T = static_cast<int>(cache.tokens.size());
  const int d = cfg.hidden;
  if (d_hidden.rows != T || d_hidden.cols != d)
    throw StructuralError("encode_backward: gradient shape does not match the cached forward");
  const int heads = cfg.heads;
  const int dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix d_x(T, d);
  layer_norm_backward(d_hidden, params.ln_f_g, cache.final_xhat, cache.final_inv_std, d_x,
                      grads.ln_f_g, grads.ln_f_b);

  Matrix scratch;
  for (int li = static_cast<int>(params.layers.size()) - 1; li >= 0; --li) {
    const LayerParams& l = params.layers[li];
    const LayerCache& lc = cache.layers[li];
    LayerParams& gl = grads.layers[li];

    // x_out = after_attn + ffn(ln2(after_attn)); d_x holds d(x_out).
    matmul_tn(lc.ffn_act, d_x, scratch);
    add_inplace(gl.ffn_w2, scratch);
    add_col_sums(d_x, gl.ffn_b2);
    Matrix d_ffn_act;
    matmul_nt(d_x, l.ffn_w2, d_ffn_act);
    for (size_t i = 0; i < d_ffn_act.data.size(); ++i)
      d_ffn_act.data[i] *= gelu_prime(lc.ffn_pre.data[i]);

    matmul_tn(lc.ln2_out, d_ffn_act, scratch);
    add_inplace(gl.ffn_w1, scratch);
    add_col_sums(d_ffn_act, gl.ffn_b1);
    Matrix d_ln2_out;
    matmul_nt(d_ffn_act, l.ffn_w1, d_ln2_out);

    Matrix d_after_attn = d_x;  // residual branch
    layer_norm_backward(d_ln2_out, l.ln2_g, lc.ln2_xhat, lc.ln2_inv_std, d_after_attn, gl.ln2_g,
                        gl.ln2_b);

    // after_attn = x_in + (context * wo + bo)
    matmul_tn(lc.context, d_after_attn, scratch);
    add_inplace(gl.wo, scratch);
    add_col_sums(d_after_attn, gl.bo);
    Matrix d_context;
    matmul_nt(d_after_attn, l.wo, d_context);

    Matrix d_q(T, d), d_k(T, d), d_v(T, d);
    std::vector<double> d_probs(T), d_scores(T);
    for (int h = 0; h < heads; ++h) {
      const int off = h * dh;
      const Matrix& probs = lc.attn_probs[h];
      for (int i = 0; i < T; ++i) {
        const double* d_ctx = d_context.row(i) + off;
        double dot = 0.0;
        for (int j = 0; j < T; ++j) {
          const double p = probs(i, j);
          if (p == 0.0) {
            d_probs[j] = 0.0;
            continue;
          }
          const double* vj = lc.v.row(j) + off;
          double dp = 0.0;
          for (int c = 0; c < dh; ++c) dp += d_ctx[c] * vj[c];
          d_probs[j] = dp;
          dot += p * dp;
          double* dvj = d_v.row(j) + off;
          for (int c = 0; c < dh; ++c) dvj[c] += p * d_ctx[c];
        }
        for (int j = 0; j < T; ++j) {
          const double p = probs(i, j);
          d_scores[j] = p == 0.0 ? 0.0 : p * (d_probs[j] - dot);
        }
        double* dqi = d_q.row(i) + off;
        const double* qi = lc.q.row(i) + off;
        for (int j = 0; j < T; ++j) {
          const double ds = d_scores[j] * inv_sqrt_dh;
          if (ds == 0.0) continue;
          const double* kj = lc.k.row(j) + off;
          double* dkj = d_k.row(j) + off;
          for (int c = 0; c < dh; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }

    matmul_tn(lc.ln1_out, d_q, scratch);
    add_inplace(gl.wq, scratch);
    add_col_sums(d_q, gl.bq);
    matmul_tn(lc.ln1_out, d_k, scratch);
    add_inplace(gl.wk, scratch);
    add_col_sums(d_k, gl.bk);
    matmul_tn(lc.ln1_out, d_v, scratch);
    add_inplace(gl.wv, scratch);
    add_col_sums(d_v, gl.bv);

    Matrix d_ln1_out;
    matmul_nt(d_q, l.wq, d_ln1_out);
    matmul_nt(d_k, l.wk, scratch);
    add_inplace(d_ln1_out, scratch);
    matmul_nt(d_v, l.wv, scratch);
    add_inplace(d_ln1_out, scratch);

    Matrix d_x_in = d_after_attn;  // residual into the attention block
    layer_norm_backward(d_ln1_out, l.ln1_g, lc.ln1_xhat, lc.ln1_inv_std, d_x_in, gl.ln1_g,
                        gl.ln1_b);
    d_x = std::move(d_x_in);
  }

  // d_x is now the gradient at the summed embeddings; scatter by input row.
  for (int t = 0; t < T; ++t) {
    const double* row = d_x.row(t);
    double* g_tok = grads.tok_emb.row(cache.tokens[t]);
    double* g_pos = grads.pos_emb.row(t);
    double* g_seg = grads.seg_emb.row(cache.segments[t]);
    for (int c = 0; c < d; ++c) {
      g_tok[c] += row[c];
      g_pos[c] += row[c];
      g_seg[c] += row[c];
    }
  }
}

Matrix cls_vector(const Matrix& hidden, const std::vector<int>& tokens,
                  const std::vector<int>& cls_positions) {
  Matrix out(static_cast<int>(cls_positions.size()), hidden.cols);
  for (size_t i = 0; i < cls_positions.size(); ++i) {
    const int pos = cls_positions[i];
    if (pos < 0 || pos >= hidden.rows || pos >= static_cast<int>(tokens.size()))
      throw StructuralError("cls_vector: position " + std::to_string(pos) + " out of bounds");
    if (tokens[pos] != kClsId)
      throw StructuralError("cls_vector: position " + std::to_string(pos) +
                            " does not hold the classifier token");
    for (int c = 0; c < hidden.cols; ++c) out(static_cast<int>(i), c) = hidden(pos, c);
  }
  return out;
}

std::vector<int> frame_sequence(const std::vector<int>& content, int max_seq) {
  const size_t keep = std::min(content.size(), static_cast<size_t>(max_seq) - 2);
  std::vector<int> framed;
  framed.reserve(keep + 2);
  framed.push_back(kClsId);
  framed.insert(framed.end(), content.begin(), content.begin() + keep);
  framed.push_back(kSepId);
  return framed;
}

MaskedBatch mask_inputs(const std::vector<int>& framed_tokens, const EncoderConfig& config,
                        std::mt19937_64& rng) {
  MaskedBatch batch;
  batch.tokens = framed_tokens;
  batch.corrupted = framed_tokens;
  batch.mask.assign(framed_tokens.size(), 0);
  batch.segments.assign(framed_tokens.size(), 0);
  batch.padding.assign(framed_tokens.size(), 0);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> random_token(kNumSpecialTokens, config.vocab_size - 1);
  for (size_t t = 0; t < framed_tokens.size(); ++t) {
    if (framed_tokens[t] < kNumSpecialTokens) continue;  // specials are never maskable
    if (unit(rng) >= config.mask_prob) continue;
    batch.mask[t] = 1;
    const double action = unit(rng);
    if (action < config.action_mask) {
      batch.corrupted[t] = kMaskId;
    } else if (action < config.action_mask + config.action_random) {
      batch.corrupted[t] = random_token(rng);
    }  // else: keep the original token
  }
  return batch;
}

Matrix head_log_probs(const EncoderParams& params, const Matrix& hidden,
                      const std::vector<int>& positions) {
  const int V = params.config.vocab_size;
  Matrix out(static_cast<int>(positions.size()), V);
  std::vector<double> logits(V);
  for (size_t i = 0; i < positions.size(); ++i) {
    const int pos = positions[i];
    if (pos < 0 || pos >= hidden.rows)
      throw StructuralError("head_log_probs: position " + std::to_string(pos) + " out of bounds");
    const double* h = hidden.row(pos);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (int w = 0; w < V; ++w) {
      double s = params.head_b(0, w);
      for (int c = 0; c < hidden.cols; ++c) s += h[c] * params.head_w(c, w);
      logits[w] = s;
      max_logit = std::max(max_logit, s);
    }
    if (!std::isfinite(max_logit)) throw NumericError("head_log_probs: non-finite head logits");
    double denom = 0.0;
    for (int w = 0; w < V; ++w) denom += std::exp(logits[w] - max_logit);
    const double log_denom = std::log(denom) + max_logit;
    for (int w = 0; w < V; ++w) out(static_cast<int>(i), w) = logits[w] - log_denom;
  }
  return out;
}

namespace {

struct MlmSum {
  double sum_loss = 0.0;
  long long count = 0;
};

// Cross-entropy of the prediction head against the original tokens over the
// selected positions. When `grads` is given, accumulates the gradient of
// scale * sum_loss for every parameter tensor.
MlmSum mlm_core(const EncoderParams& params, const MaskedBatch& batch, double scale,
                EncoderParams* grads) {
  std::vector<int> positions;
  for (size_t t = 0; t < batch.mask.size(); ++t)
    if (batch.mask[t] && !batch.padding[t]) positions.push_back(static_cast<int>(t));
  MlmSum result;
  result.count = static_cast<long long>(positions.size());
  if (positions.empty()) return result;

  EncodeCache cache;
  const Matrix hidden = encode(params, batch.corrupted, batch.segments, batch.padding,
                               grads ? &cache : nullptr);
  const Matrix log_probs = head_log_probs(params, hidden, positions);

  const int V = params.config.vocab_size;
  const int d = params.config.hidden;
  Matrix d_hidden;
  if (grads) d_hidden = Matrix(hidden.rows, d);
  for (size_t i = 0; i < positions.size(); ++i) {
    const int pos = positions[i];
    const int target = batch.tokens[pos];
    if (target < 0 || target >= V)
      throw StructuralError("masked loss: original token id " + std::to_string(target) +
                            " outside the vocabulary");
    result.sum_loss -= log_probs(static_cast<int>(i), target);
    if (!grads) continue;
    const double* h = hidden.row(pos);
    double* dh = d_hidden.row(pos);
    for (int w = 0; w < V; ++w) {
      double dl = std::exp(log_probs(static_cast<int>(i), w));
      if (w == target) dl -= 1.0;
      dl *= scale;
      grads->head_b(0, w) += dl;
      for (int c = 0; c < d; ++c) {
        grads->head_w(c, w) += dl * h[c];
        dh[c] += dl * params.head_w(c, w);
      }
    }
  }
  if (!std::isfinite(result.sum_loss)) throw NumericError("masked loss is not finite");
  if (grads) encode_backward(params, cache, d_hidden, *grads);
  return result;
}

}  // namespace

MlmResult mlm_loss(const EncoderParams& params, const MaskedBatch& batch) {
  const MlmSum s = mlm_core(params, batch, 0.0, nullptr);
  return {s.count > 0 ? s.sum_loss / s.count : 0.0, s.count};
}

MlmResult mlm_loss_grad(const EncoderParams& params, const MaskedBatch& batch,
                        EncoderParams& grads) {
  long long count = 0;
  for (size_t t = 0; t < batch.mask.size(); ++t)
    if (batch.mask[t] && !batch.padding[t]) ++count;
  if (count == 0) return {0.0, 0};
  const MlmSum s = mlm_core(params, batch, 1.0 / static_cast<double>(count), &grads);
  return {s.sum_loss / s.count, s.count};
}

PretrainResult pretrain(EncoderParams& params, const std::vector<std::vector<int>>& corpus,
                        const PretrainOptions& opts, uint64_t seed) {
  if (corpus.empty()) throw InvalidArgumentError("pretrain: empty corpus");
  if (opts.epochs < 0) throw InvalidArgumentError("pretrain: epochs must be >= 0");
  if (opts.batch_size < 1) throw InvalidArgumentError("pretrain: batch size must be >= 1");

  std::vector<std::vector<int>> framed;
  framed.reserve(corpus.size());
  for (const auto& seq : corpus) framed.push_back(frame_sequence(seq, params.config.max_seq));

  std::mt19937_64 rng(seed);
  auto reg = params.tensors();
  std::vector<Matrix*> param_ptrs = tensor_ptrs(reg);
  AdamState adam = AdamState::like(tensor_cptrs(std::as_const(params).tensors()));
  EncoderParams grads = params.zeros_like();
  std::vector<Matrix*> grad_ptrs = tensor_ptrs(grads.tensors());
  std::vector<const Matrix*> grad_cptrs(grad_ptrs.begin(), grad_ptrs.end());

  std::vector<size_t> order(framed.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  PretrainResult result;
  long long step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    long long epoch_count = 0;
    for (size_t start = 0; start < order.size(); start += opts.batch_size) {
      const size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<MaskedBatch> batch;
      long long total = 0;
      for (size_t i = start; i < end; ++i) {
        batch.push_back(mask_inputs(framed[order[i]], params.config, rng));
        for (size_t t = 0; t < batch.back().mask.size(); ++t)
          if (batch.back().mask[t]) ++total;
      }
      if (total == 0) continue;  // nothing selected; no step to take

      ++step;
      for (Matrix* g : grad_ptrs) g->fill(0.0);
      double batch_sum = 0.0;
      for (const MaskedBatch& mb : batch)
        batch_sum += mlm_core(params, mb, 1.0 / static_cast<double>(total), &grads).sum_loss;
      if (!std::isfinite(batch_sum))
        throw NumericError("pretrain: loss diverged at step " + std::to_string(step));
      adam_step(param_ptrs, grad_cptrs, adam, opts.adam);
      for (Matrix* p : param_ptrs)
        if (!all_finite(*p))
          throw NumericError("pretrain: non-finite parameters after step " +
                             std::to_string(step));
      epoch_sum += batch_sum;
      epoch_count += total;
    }
    result.epoch_loss.push_back(epoch_count > 0 ? epoch_sum / epoch_count : 0.0);
  }
  return result;
}

double mlm_corpus_loss(const EncoderParams& params, const std::vector<std::vector<int>>& corpus,
                       uint64_t mask_seed) {
  std::mt19937_64 rng(mask_seed);
  double sum = 0.0;
  long long count = 0;
  for (const auto& seq : corpus) {
    const MaskedBatch batch =
        mask_inputs(frame_sequence(seq, params.config.max_seq), params.config, rng);
    const MlmSum s = mlm_core(params, batch, 0.0, nullptr);
    sum += s.sum_loss;
    count += s.count;
  }
  return count > 0 ? sum / count : 0.0;
}

double mlm_corpus_accuracy(const EncoderParams& params,
                           const std::vector<std::vector<int>>& corpus, uint64_t mask_seed) {
  std::mt19937_64 rng(mask_seed);
  long long hits = 0;
  long long count = 0;
  for (const auto& seq : corpus) {
    const MaskedBatch batch =
        mask_inputs(frame_sequence(seq, params.config.max_seq), params.config, rng);
    std::vector<int> positions;
    for (size_t t = 0; t < batch.mask.size(); ++t)
      if (batch.mask[t]) positions.push_back(static_cast<int>(t));
    if (positions.empty()) continue;
    const Matrix hidden = encode(params, batch.corrupted, batch.segments, batch.padding);
    const Matrix log_probs = head_log_probs(params, hidden, positions);
    for (size_t i = 0; i < positions.size(); ++i) {
      int best = 0;
      for (int w = 1; w < log_probs.cols; ++w)
        if (log_probs(static_cast<int>(i), w) > log_probs(static_cast<int>(i), best)) best = w;
      if (best == batch.tokens[positions[i]]) ++hits;
      ++count;
    }
  }
  return count > 0 ? static_cast<double>(hits) / static_cast<double>(count) : 0.0;
}

void save_encoder(const EncoderParams& params, const std::string& path,
                  uint64_t vocab_fingerprint) {
  nlohmann::json meta{{"config", params.config.to_json()},
                      {"vocab_fingerprint", std::to_string(vocab_fingerprint)}};
  save_checkpoint_file(path, "encoder", meta, params.tensors());
}

EncoderParams load_encoder(const std::string& path, uint64_t* vocab_fingerprint) {
  LoadedCheckpoint ckpt = load_checkpoint_file(path, "encoder");
  if (!ckpt.meta.contains("config"))
    throw ParseError(path + ": encoder checkpoint lacks a config record");
  const EncoderConfig config = EncoderConfig::from_json(ckpt.meta.at("config"));
  EncoderParams params = shaped_params(config);
  auto reg = params.tensors();
  for (auto& [name, tensor] : reg) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end())
      throw ParseError(path + ": encoder checkpoint is missing tensor '" + name + "'");
    if (!tensor->same_shape(it->second))
      throw ParseError(path + ": tensor '" + name + "' has shape " +
                       std::to_string(it->second.rows) + "x" + std::to_string(it->second.cols) +
                       ", expected " + std::to_string(tensor->rows) + "x" +
                       std::to_string(tensor->cols));
    *tensor = std::move(it->second);
  }
  if (ckpt.tensors.size() != reg.size())
    throw ParseError(path + ": encoder checkpoint holds unexpected extra tensors");
  if (vocab_fingerprint) {
    if (!ckpt.meta.contains("vocab_fingerprint"))
      throw ParseError(path + ": encoder checkpoint lacks a vocabulary fingerprint");
    *vocab_fingerprint =
        std::stoull(ckpt.meta.at("vocab_fingerprint").get<std::string>(), nullptr, 10);
  }
  return params;
}

}  // namespace nbr
