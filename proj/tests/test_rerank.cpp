#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "nbest.hpp"
#include "plsa.hpp"
#include "rerank.hpp"
#include "vocab.hpp"

using namespace nbr;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.vocab_size = 12;
  cfg.hidden = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn = 16;
  cfg.max_seq = 32;
  cfg.max_segments = 4;
  return cfg;
}

Hypothesis hyp(std::vector<int> tokens, double am = 0.0, double lm = 0.0) {
  Hypothesis h;
  h.tokens = std::move(tokens);
  h.am_score = am;
  h.lm_score = lm;
  return h;
}

// A labeled list; the oracle is recomputed from the reference.
NBestList make_list(std::string id, std::vector<int> reference,
                    std::vector<Hypothesis> hypotheses) {
  NBestList list;
  list.utterance_id = std::move(id);
  list.reference = std::move(reference);
  list.has_reference = true;
  list.hypotheses = std::move(hypotheses);
  list.oracle = oracle_index(list);
  return list;
}

bool params_equal(const EncoderParams& a, const EncoderParams& b) {
  auto ta = a.tensors(), tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].first != tb[i].first) return false;
    if (ta[i].second->rows != tb[i].second->rows) return false;
    if (ta[i].second->cols != tb[i].second->cols) return false;
    if (ta[i].second->data != tb[i].second->data) return false;
  }
  return true;
}

bool heads_equal(const PredictionHead& a, const PredictionHead& b) {
  return a.w1.data == b.w1.data && a.b1.data == b.b1.data && a.w2.data == b.w2.data &&
         a.b2.data == b.b2.data;
}

// Sequences alternating between tokens 5 and 6; the context determines every
// masked token exactly, so a converged model separates plausible from
// implausible strings.
std::vector<std::vector<int>> alternation_corpus(int n, int len) {
  std::vector<std::vector<int>> corpus;
  for (int s = 0; s < n; ++s) {
    std::vector<int> seq(len);
    for (int t = 0; t < len; ++t) seq[t] = kNumSpecialTokens + ((t + s) % 2);
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

std::filesystem::path temp_file(const std::string& tag) {
  return std::filesystem::temp_directory_path() / ("nbr-test-" + tag);
}

}  // namespace

TEST_CASE("setting and mode names round-trip") {
  for (ScoreSetting s : {ScoreSetting::kNone, ScoreSetting::kCombined, ScoreSetting::kSplit})
    CHECK(score_setting_from_name(score_setting_name(s)) == s);
  CHECK_THROWS_AS(score_setting_from_name("both"), InvalidArgumentError);
  for (EncodeMode m : {EncodeMode::kJoint, EncodeMode::kIndependent})
    CHECK(encode_mode_from_name(encode_mode_name(m)) == m);
  CHECK_THROWS_AS(encode_mode_from_name("packed"), InvalidArgumentError);
}

TEST_CASE("feature config dimensions and serialization") {
  FeatureConfig c;
  CHECK(c.appended_dims() == 0);
  c.score_setting = ScoreSetting::kCombined;
  CHECK(c.appended_dims() == 1);
  c.score_setting = ScoreSetting::kSplit;
  CHECK(c.appended_dims() == 2);
  c.topic_enabled = true;
  c.topics = 8;
  CHECK(c.appended_dims() == 10);

  c.lambda_am = 0.25;
  c.am_mean = -3.0;
  c.am_std = 2.0;
  FeatureConfig back = FeatureConfig::from_json(c.to_json());
  CHECK(back.score_setting == c.score_setting);
  CHECK(back.topic_enabled == c.topic_enabled);
  CHECK(back.topics == c.topics);
  CHECK(back.lambda_am == c.lambda_am);
  CHECK(back.am_mean == c.am_mean);
  CHECK(back.am_std == c.am_std);

  FeatureConfig bad;
  bad.topic_enabled = true;
  bad.topics = 0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgumentError);
}

TEST_CASE("standardization constants come from the training scores") {
  Dataset train;
  train.lists.push_back(make_list("u1", {5}, {hyp({5}, 1.0, 10.0), hyp({6}, 3.0, 30.0)}));
  FeatureConfig config;
  config.lambda_am = 2.0;
  config.lambda_lm = 0.5;
  fit_standardization(config, train);
  CHECK(config.am_mean == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(config.am_std == doctest::Approx(1.0).epsilon(1e-12));  // population std
  CHECK(config.lm_mean == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(config.lm_std == doctest::Approx(10.0).epsilon(1e-12));
  // combined = 2*am + 0.5*lm -> {7, 21}
  CHECK(config.combined_mean == doctest::Approx(14.0).epsilon(1e-12));
  CHECK(config.combined_std == doctest::Approx(7.0).epsilon(1e-12));

  // Constant scores keep std = 1 so standardization cannot divide by zero.
  Dataset flat;
  flat.lists.push_back(make_list("u2", {5}, {hyp({5}, 4.0, 4.0), hyp({6}, 4.0, 4.0)}));
  FeatureConfig fc;
  fit_standardization(fc, flat);
  CHECK(fc.am_std == 1.0);
  CHECK(fc.lm_std == 1.0);
  CHECK(fc.combined_std == 1.0);

  Dataset empty;
  CHECK_THROWS_AS(fit_standardization(fc, empty), InvalidArgumentError);
}

TEST_CASE("single-hypothesis lists encode identically in both modes") {
  EncoderParams params = EncoderParams::init(tiny_config(), 101);
  NBestList list = make_list("u", {5, 6, 7}, {hyp({5, 6, 7})});
  NBestEncoding joint = encode_nbest(params, list, EncodeMode::kJoint);
  NBestEncoding indep = encode_nbest(params, list, EncodeMode::kIndependent);
  REQUIRE(joint.cls.rows == 1);
  REQUIRE(indep.cls.rows == 1);
  CHECK(joint.cls.data == indep.cls.data);  // bit-exact: same framed input
}

TEST_CASE("independent mode gives identical hypotheses identical vectors") {
  EncoderParams params = EncoderParams::init(tiny_config(), 102);
  NBestList list = make_list(
      "u", {5, 6}, {hyp({5, 6}), hyp({5, 6}), hyp({7, 8})});
  NBestEncoding enc = encode_nbest(params, list, EncodeMode::kIndependent);
  for (int c = 0; c < enc.cls.cols; ++c) {
    CHECK(enc.cls(0, c) == enc.cls(1, c));
  }
  bool any_diff = false;
  for (int c = 0; c < enc.cls.cols; ++c)
    if (enc.cls(0, c) != enc.cls(2, c)) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("joint mode swap equivariance once positions and segments are neutral") {
  EncoderParams params = EncoderParams::init(tiny_config(), 103);
  params.pos_emb.fill(0.0);
  params.seg_emb.fill(0.0);
  NBestList ab = make_list("u", {5, 6}, {hyp({5, 6, 7}), hyp({8, 9})});
  NBestList ba = make_list("u", {5, 6}, {hyp({8, 9}), hyp({5, 6, 7})});
  NBestEncoding e_ab = encode_nbest(params, ab, EncodeMode::kJoint);
  NBestEncoding e_ba = encode_nbest(params, ba, EncodeMode::kJoint);
  for (int c = 0; c < e_ab.cls.cols; ++c) {
    CHECK(e_ab.cls(0, c) == doctest::Approx(e_ba.cls(1, c)).epsilon(1e-10));
    CHECK(e_ab.cls(1, c) == doctest::Approx(e_ba.cls(0, c)).epsilon(1e-10));
  }
}

TEST_CASE("joint packing lays out [CLS] h [SEP] blocks with slot segments") {
  EncoderParams params = EncoderParams::init(tiny_config(), 104);
  NBestList list = make_list("u", {5, 6}, {hyp({5, 6}), hyp({7, 8, 9})});
  NBestEncoding enc = encode_nbest(params, list, EncodeMode::kJoint, /*keep_caches=*/true);
  REQUIRE(enc.caches.size() == 1);
  const std::vector<int> want_tokens = {kClsId, 5, 6, kSepId, kClsId, 7, 8, 9, kSepId};
  const std::vector<int> want_segments = {0, 0, 0, 0, 1, 1, 1, 1, 1};
  CHECK(enc.caches[0].tokens == want_tokens);
  CHECK(enc.caches[0].segments == want_segments);
  CHECK(enc.slot_site[0] == std::pair<int, int>(0, 0));
  CHECK(enc.slot_site[1] == std::pair<int, int>(0, 4));
  // CLS rows are read straight out of the packed hidden states.
  for (int c = 0; c < enc.cls.cols; ++c) {
    CHECK(enc.cls(0, c) == enc.caches[0].hidden(0, c));
    CHECK(enc.cls(1, c) == enc.caches[0].hidden(4, c));
  }
}

TEST_CASE("joint packing truncates the longest hypotheses first") {
  EncoderConfig cfg = tiny_config();
  cfg.max_seq = 21;
  EncoderParams params = EncoderParams::init(cfg, 105);

  // Two length-9 hypotheses frame to 22 tokens; the cap is (21-4)/2 = 8 and
  // the tie goes to the smaller index, so hypothesis 0 alone is cut to 8.
  std::vector<int> a(9), b(9);
  for (int t = 0; t < 9; ++t) {
    a[t] = 5 + (t % 3);
    b[t] = 8 + (t % 3);
  }
  NBestList list = make_list("u", a, {hyp(a), hyp(b)});
  NBestEncoding enc = encode_nbest(params, list, EncodeMode::kJoint, true);
  const std::vector<int>& tokens = enc.caches[0].tokens;
  REQUIRE(static_cast<int>(tokens.size()) == 21);
  std::vector<int> want = {kClsId};
  want.insert(want.end(), a.begin(), a.begin() + 8);
  want.push_back(kSepId);
  want.push_back(kClsId);
  want.insert(want.end(), b.begin(), b.end());
  want.push_back(kSepId);
  CHECK(tokens == want);

  // Three hypotheses against max_seq = 32: only the length-20 one is cut to
  // the cap (32-6)/3 = 8.
  EncoderParams params32 = EncoderParams::init(tiny_config(), 105);
  std::vector<int> lng(20, 5), mid(6, 6), shrt(4, 7);
  NBestList trio = make_list("v", lng, {hyp(lng), hyp(mid), hyp(shrt)});
  NBestEncoding enc3 = encode_nbest(params32, trio, EncodeMode::kJoint, true);
  REQUIRE(static_cast<int>(enc3.caches[0].tokens.size()) == 24);
  CHECK(enc3.slot_site[0].second == 0);
  CHECK(enc3.slot_site[1].second == 10);  // [CLS] + 8 + [SEP]
  CHECK(enc3.slot_site[2].second == 18);
}

TEST_CASE("joint mode rejects lists the encoder cannot represent") {
  EncoderConfig cfg = tiny_config();  // max_segments = 4
  EncoderParams params = EncoderParams::init(cfg, 106);
  NBestList many = make_list("crowded", {5},
                             {hyp({5}), hyp({6}), hyp({7}), hyp({8}), hyp({9})});
  try {
    encode_nbest(params, many, EncodeMode::kJoint);
    FAIL_CHECK("expected a structural error");
  } catch (const StructuralError& e) {
    CHECK(std::string(e.what()).find("crowded") != std::string::npos);
  }

  EncoderConfig narrow = tiny_config();
  narrow.max_seq = 6;
  narrow.max_segments = 8;
  EncoderParams params6 = EncoderParams::init(narrow, 107);
  NBestList four = make_list("narrow", {5},
                             {hyp({5, 6}), hyp({6, 7}), hyp({7, 8}), hyp({8, 9})});
  try {
    encode_nbest(params6, four, EncodeMode::kJoint);
    FAIL_CHECK("expected a structural error");
  } catch (const StructuralError& e) {
    CHECK(std::string(e.what()).find("narrow") != std::string::npos);
  }
}

TEST_CASE("feature assembly appends standardized scores and topic mixtures") {
  Matrix cls(2, 3);
  for (int i = 0; i < 6; ++i) cls.data[i] = 0.1 * (i + 1);
  std::vector<Hypothesis> hyps = {hyp({5}, 2.0, 4.0), hyp({6}, -1.0, 0.5)};

  FeatureConfig none;
  Matrix f0 = build_features(cls, hyps, nullptr, none);
  CHECK(f0.cols == 3);
  CHECK(f0.data == cls.data);

  FeatureConfig comb;
  comb.score_setting = ScoreSetting::kCombined;
  comb.lambda_am = 2.0;
  comb.lambda_lm = 0.5;
  comb.combined_mean = 1.0;
  comb.combined_std = 2.0;
  Matrix f1 = build_features(cls, hyps, nullptr, comb);
  REQUIRE(f1.cols == 4);
  CHECK(f1(0, 3) == doctest::Approx((2.0 * 2.0 + 0.5 * 4.0 - 1.0) / 2.0).epsilon(1e-12));
  CHECK(f1(1, 3) == doctest::Approx((2.0 * -1.0 + 0.5 * 0.5 - 1.0) / 2.0).epsilon(1e-12));

  FeatureConfig split;
  split.score_setting = ScoreSetting::kSplit;
  split.am_mean = 0.5;
  split.am_std = 0.25;
  split.lm_mean = 1.0;
  split.lm_std = 4.0;
  Matrix f2 = build_features(cls, hyps, nullptr, split);
  REQUIRE(f2.cols == 5);
  CHECK(f2(0, 3) == doctest::Approx((2.0 - 0.5) / 0.25).epsilon(1e-12));
  CHECK(f2(0, 4) == doctest::Approx((4.0 - 1.0) / 4.0).epsilon(1e-12));
  CHECK(f2(1, 3) == doctest::Approx((-1.0 - 0.5) / 0.25).epsilon(1e-12));

  FeatureConfig topical = split;
  topical.topic_enabled = true;
  topical.topics = 2;
  std::vector<std::vector<double>> tv = {{0.9, 0.1}, {0.3, 0.7}};
  Matrix f3 = build_features(cls, hyps, &tv, topical);
  REQUIRE(f3.cols == 7);
  CHECK(f3(0, 5) == 0.9);
  CHECK(f3(0, 6) == 0.1);
  CHECK(f3(1, 5) == 0.3);
  CHECK(f3(1, 6) == 0.7);
  // The leading block is always the untouched encoder output.
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 3; ++c) CHECK(f3(i, c) == cls(i, c));

  CHECK_THROWS_AS(build_features(cls, {hyps[0]}, nullptr, none), StructuralError);
  CHECK_THROWS_AS(build_features(cls, hyps, &tv, none), StructuralError);
  CHECK_THROWS_AS(build_features(cls, hyps, nullptr, topical), StructuralError);
  std::vector<std::vector<double>> short_tv = {{0.9}, {0.3}};
  CHECK_THROWS_AS(build_features(cls, hyps, &short_tv, topical), StructuralError);
}

TEST_CASE("topic vectors separate hypotheses from different sources") {
  // Topic 0 emits content ids 5..9, topic 1 emits 10..14.
  std::vector<DocBag> docs;
  for (int d = 0; d < 12; ++d) {
    DocBag b;
    const int base = (d % 2 == 0) ? 0 : 5;
    for (int w = 0; w < 5; ++w) {
      b.word.push_back(base + w);
      b.count.push_back(1.0 + (d + w) % 3);
    }
    docs.push_back(std::move(b));
  }
  PlsaTrainResult r = train_plsa(docs, 2, 10, 60, 1e-6, 11);

  NBestList list;
  list.utterance_id = "u";
  list.hypotheses = {hyp({5, 6, 7}), hyp({10, 11, 12}), hyp({})};
  auto tv = hypothesis_topic_vectors(r.model, list);
  REQUIRE(tv.size() == 3);
  REQUIRE(tv[0].size() == 2);
  CHECK(*std::max_element(tv[0].begin(), tv[0].end()) >= 0.99);
  CHECK(*std::max_element(tv[1].begin(), tv[1].end()) >= 0.99);
  const int t0 = tv[0][0] > tv[0][1] ? 0 : 1;
  const int t1 = tv[1][0] > tv[1][1] ? 0 : 1;
  CHECK(t0 != t1);
  CHECK(tv[2][0] == 0.5);  // empty hypothesis folds in to the uniform mixture
  CHECK(tv[2][1] == 0.5);
}

TEST_CASE("predict softmax, tie handling and masked slots") {
  // Saturating tanh turns the hidden unit into a sign detector, pinning the
  // logits at feature + 1.
  PredictionHead head;
  head.w1 = Matrix(1, 1);
  head.w1(0, 0) = 1e3;
  head.b1 = Matrix(1, 1);
  head.w2 = Matrix(1, 1);
  head.w2(0, 0) = 1.0;
  head.b2 = Matrix(1, 1);
  head.b2(0, 0) = 1.0;

  Matrix features(2, 1);
  features(0, 0) = 1.0;   // tanh(1000) = 1 -> logit 2
  features(1, 0) = -1.0;  // tanh(-1000) = -1 -> logit 0
  RerankSelection sel = predict(head, features, {1, 1});
  CHECK(sel.probs[0] == doctest::Approx(0.88079708).epsilon(1e-8));
  CHECK(sel.probs[1] == doctest::Approx(0.11920292).epsilon(1e-8));
  CHECK(sel.chosen == 0);

  // Equal features: uniform probabilities, ties to the smallest index.
  Matrix same(3, 1);
  same(0, 0) = same(1, 0) = same(2, 0) = 0.5;
  RerankSelection tie = predict(head, same, {1, 1, 1});
  for (double p : tie.probs) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(tie.chosen == 0);

  // A zeroed head scores every row the same.
  PredictionHead zero = PredictionHead::init(4, 3, 1);
  for (auto& [name, m] : zero.tensors()) m->fill(0.0);
  Matrix rows(3, 4);
  for (int i = 0; i < 12; ++i) rows.data[i] = static_cast<double>(i);
  RerankSelection flat = predict(zero, rows, {1, 1, 1});
  for (double p : flat.probs) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // Masked slots take exactly zero probability and the rest renormalize.
  RerankSelection masked = predict(head, same, {1, 0, 1});
  CHECK(masked.probs[1] == 0.0);
  CHECK(masked.probs[0] + masked.probs[2] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(masked.chosen == 0);

  CHECK_THROWS_AS(predict(head, same, {0, 0, 0}), InvalidArgumentError);
  CHECK_THROWS_AS(predict(head, same, {1, 1}), StructuralError);
  Matrix wide(1, 2);
  CHECK_THROWS_AS(predict(head, wide, {1}), StructuralError);
}

TEST_CASE("listwise loss matches a hand-built softmax cross-entropy") {
  EncoderParams params = EncoderParams::init(tiny_config(), 108);
  FeatureConfig config;
  config.score_setting = ScoreSetting::kCombined;
  NBestList list = make_list("u", {5, 6, 7},
                             {hyp({5, 6, 7}, -1.0, -2.0), hyp({5, 6}, -0.5, -1.0),
                              hyp({6, 6, 7}, -2.0, -0.25)});
  PredictionHead head = PredictionHead::init(9, 4, 2);

  const double loss =
      rerank_list_loss(params, head, list, nullptr, config, EncodeMode::kJoint, false);

  NBestEncoding enc = encode_nbest(params, list, EncodeMode::kJoint);
  Matrix features = build_features(enc.cls, list.hypotheses, nullptr, config);
  RerankSelection sel = predict(head, features, {1, 1, 1});
  CHECK(loss == doctest::Approx(-std::log(sel.probs[list.oracle])).epsilon(1e-12));

  NBestList unlabeled = list;
  unlabeled.oracle = -1;
  CHECK_THROWS_AS(
      rerank_list_loss(params, head, unlabeled, nullptr, config, EncodeMode::kJoint, false),
      StructuralError);

  PredictionHead head_grads = head.zeros_like();
  CHECK_THROWS_AS(rerank_list_loss(params, head, list, nullptr, config, EncodeMode::kJoint,
                                   /*fine_tune=*/true, &head_grads, nullptr),
                  InvalidArgumentError);
}

TEST_CASE("listwise gradients agree with finite differences") {
  EncoderParams params = EncoderParams::init(tiny_config(), 109);
  FeatureConfig config;
  config.score_setting = ScoreSetting::kSplit;
  config.topic_enabled = true;
  config.topics = 2;
  NBestList list = make_list("u", {5, 6, 7, 8},
                             {hyp({5, 6, 7, 8}, -1.0, -2.0), hyp({5, 7, 7}, -0.5, -1.0),
                              hyp({6, 6}, -2.0, -0.25)});
  std::vector<std::vector<double>> topics = {{0.8, 0.2}, {0.5, 0.5}, {0.1, 0.9}};
  PredictionHead head = PredictionHead::init(8 + 4, 5, 3);

  PredictionHead head_grads = head.zeros_like();
  EncoderParams encoder_grads = params.zeros_like();
  rerank_list_loss(params, head, list, &topics, config, EncodeMode::kJoint,
                   /*fine_tune=*/true, &head_grads, &encoder_grads);

  auto loss_at = [&]() {
    return rerank_list_loss(params, head, list, &topics, config, EncodeMode::kJoint, false);
  };
  const double eps = 1e-5;
  std::mt19937_64 rng(12345);
  auto check_slots = [&](std::vector<std::pair<std::string, Matrix*>> ps,
                         std::vector<std::pair<std::string, Matrix*>> gs, int count) {
    std::uniform_int_distribution<size_t> pick_tensor(0, ps.size() - 1);
    for (int probe = 0; probe < count; ++probe) {
      const size_t ti = pick_tensor(rng);
      Matrix* tensor = ps[ti].second;
      if (tensor->data.empty()) {
        --probe;
        continue;
      }
      std::uniform_int_distribution<size_t> pick_elem(0, tensor->data.size() - 1);
      const size_t ei = pick_elem(rng);
      const double saved = tensor->data[ei];
      tensor->data[ei] = saved + eps;
      const double up = loss_at();
      tensor->data[ei] = saved - eps;
      const double down = loss_at();
      tensor->data[ei] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double analytic = gs[ti].second->data[ei];
      const double tol = 1e-4 * std::max(1e-8, std::abs(fd));
      INFO(ps[ti].first, "[", ei, "] fd=", fd, " analytic=", analytic);
      CHECK(std::abs(analytic - fd) <= std::max(tol, 1e-9));
    }
  };
  check_slots(head.tensors(), head_grads.tensors(), 20);
  check_slots(params.tensors(), encoder_grads.tensors(), 20);

  // Without fine-tuning the head gradients must still match the restricted
  // loss surface (the encoder is a constant there).
  PredictionHead head_only = head.zeros_like();
  rerank_list_loss(params, head, list, &topics, config, EncodeMode::kIndependent, false,
                   &head_only);
  auto loss_ind = [&]() {
    return rerank_list_loss(params, head, list, &topics, config, EncodeMode::kIndependent, false);
  };
  for (int probe = 0; probe < 8; ++probe) {
    auto ps = head.tensors();
    std::uniform_int_distribution<size_t> pick_tensor(0, ps.size() - 1);
    const size_t ti = pick_tensor(rng);
    Matrix* tensor = ps[ti].second;
    std::uniform_int_distribution<size_t> pick_elem(0, tensor->data.size() - 1);
    const size_t ei = pick_elem(rng);
    const double saved = tensor->data[ei];
    tensor->data[ei] = saved + eps;
    const double up = loss_ind();
    tensor->data[ei] = saved - eps;
    const double down = loss_ind();
    tensor->data[ei] = saved;
    const double fd = (up - down) / (2.0 * eps);
    const double analytic = head_only.tensors()[ti].second->data[ei];
    CHECK(std::abs(analytic - fd) <= std::max(1e-4 * std::max(1e-8, std::abs(fd)), 1e-9));
  }
}

TEST_CASE("zero-epoch training changes nothing but the standardization") {
  EncoderParams encoder = EncoderParams::init(tiny_config(), 110);
  EncoderParams before = encoder;
  PredictionHead head = PredictionHead::init(9, 4, 4);
  PredictionHead head_before = head;
  Dataset train;
  train.lists.push_back(make_list("u", {5, 6}, {hyp({5, 6}, 1.0, 2.0), hyp({7}, 3.0, 4.0)}));
  FeatureConfig config;
  config.score_setting = ScoreSetting::kCombined;
  RerankTrainOptions opts;
  opts.epochs = 0;
  RerankTrainResult result = train_reranker(encoder, head, train, nullptr, nullptr, config,
                                            opts, 1);
  CHECK(result.epoch_loss.empty());
  CHECK(params_equal(encoder, before));
  CHECK(heads_equal(head, head_before));
  CHECK(config.combined_mean != 0.0);  // standardization was still fit
}

TEST_CASE("training memorizes a single list") {
  EncoderParams encoder = EncoderParams::init(tiny_config(), 111);
  Dataset train;
  train.lists.push_back(make_list(
      "u", {5, 6, 7}, {hyp({8, 9, 10}, 0.0, 0.0), hyp({5, 6, 7}, 0.0, 0.0),
                       hyp({5, 9, 7}, 0.0, 0.0)}));
  REQUIRE(train.lists[0].oracle == 1);

  FeatureConfig config;  // encoder features only
  PredictionHead head = PredictionHead::init(8, 8, 5);
  RerankTrainOptions opts;
  opts.epochs = 150;
  opts.fine_tune = false;
  opts.adam.lr = 1e-2;
  RerankTrainResult result =
      train_reranker(encoder, head, train, nullptr, nullptr, config, opts, 2);
  CHECK(result.epoch_loss.back() < 1e-2);
  RerankSelection sel = rerank_list(encoder, head, nullptr, config, opts.mode,
                                    train.lists[0]);
  CHECK(sel.chosen == 1);
  CHECK(sel.probs[1] > 0.99);
}

TEST_CASE("frozen-encoder training leaves the encoder bit-identical") {
  EncoderParams encoder = EncoderParams::init(tiny_config(), 112);
  EncoderParams before = encoder;
  Dataset train;
  train.lists.push_back(make_list("u1", {5, 6}, {hyp({5, 6}), hyp({7, 8})}));
  train.lists.push_back(make_list("u2", {9, 10}, {hyp({9, 5}), hyp({9, 10})}));
  FeatureConfig config;
  PredictionHead head = PredictionHead::init(8, 4, 6);
  RerankTrainOptions opts;
  opts.epochs = 3;
  opts.fine_tune = false;
  train_reranker(encoder, head, train, nullptr, nullptr, config, opts, 3);
  CHECK(params_equal(encoder, before));
  CHECK_FALSE(heads_equal(head, PredictionHead::init(8, 4, 6)));

  // Fine-tuning does move the encoder.
  EncoderParams tuned = EncoderParams::init(tiny_config(), 112);
  PredictionHead head2 = PredictionHead::init(8, 4, 6);
  opts.fine_tune = true;
  train_reranker(tuned, head2, train, nullptr, nullptr, config, opts, 3);
  CHECK_FALSE(params_equal(tuned, before));
}

TEST_CASE("reranker training is deterministic per seed") {
  auto run = [](uint64_t seed) {
    EncoderParams encoder = EncoderParams::init(tiny_config(), 113);
    Dataset train;
    train.lists.push_back(make_list("u1", {5, 6}, {hyp({5, 6}, -1, -1), hyp({7, 8}, -2, -2)}));
    train.lists.push_back(make_list("u2", {9, 10}, {hyp({9, 5}, -1, -3), hyp({9, 10}, -2, -1)}));
    train.lists.push_back(make_list("u3", {11, 5}, {hyp({11, 5}, -1, -1), hyp({11, 6}, 0, -2)}));
    FeatureConfig config;
    config.score_setting = ScoreSetting::kSplit;
    PredictionHead head = PredictionHead::init(10, 4, seed ^ 0x9e3779b97f4a7c15ULL);
    RerankTrainOptions opts;
    opts.epochs = 4;
    RerankTrainResult r = train_reranker(encoder, head, train, nullptr, nullptr, config,
                                         opts, seed);
    return std::make_pair(head.w1.data, r.epoch_loss);
  };
  auto [w_a, loss_a] = run(7);
  auto [w_b, loss_b] = run(7);
  auto [w_c, loss_c] = run(8);
  CHECK(w_a == w_b);
  CHECK(loss_a == loss_b);
  CHECK(w_a != w_c);
}

TEST_CASE("training rejects malformed setups") {
  EncoderParams encoder = EncoderParams::init(tiny_config(), 114);
  PredictionHead head = PredictionHead::init(8, 4, 9);
  FeatureConfig config;
  RerankTrainOptions opts;
  Dataset empty;
  CHECK_THROWS_AS(train_reranker(encoder, head, empty, nullptr, nullptr, config, opts, 1),
                  InvalidArgumentError);

  Dataset train;
  train.lists.push_back(make_list("u", {5}, {hyp({5}), hyp({6})}));
  FeatureConfig topical;
  topical.topic_enabled = true;
  topical.topics = 2;
  CHECK_THROWS_AS(train_reranker(encoder, head, train, nullptr, nullptr, topical, opts, 1),
                  InvalidArgumentError);

  PredictionHead narrow = PredictionHead::init(5, 4, 9);
  CHECK_THROWS_AS(train_reranker(encoder, narrow, train, nullptr, nullptr, config, opts, 1),
                  InvalidArgumentError);

  Dataset unlabeled;
  NBestList raw;
  raw.utterance_id = "nolabel";
  raw.has_reference = false;
  raw.hypotheses = {hyp({5})};
  unlabeled.lists.push_back(raw);
  CHECK_THROWS_AS(train_reranker(encoder, head, unlabeled, nullptr, nullptr, config, opts, 1),
                  StructuralError);
}

TEST_CASE("pseudo-log-likelihood closed form and decomposition") {
  EncoderConfig cfg = tiny_config();
  EncoderParams params = EncoderParams::init(cfg, 115);

  // Zeroed prediction head: every position scores -log V regardless of the
  // encoder stack.
  EncoderParams flat = params;
  flat.head_w.fill(0.0);
  flat.head_b.fill(0.0);
  PllResult one = pll_score(flat, {5});
  CHECK(one.value == doctest::Approx(-std::log(12.0)).epsilon(1e-12));
  CHECK(one.value == doctest::Approx(-2.48490665).epsilon(1e-8));
  CHECK_FALSE(one.empty_hypothesis);
  PllResult three = pll_score(flat, {5, 6, 7});
  CHECK(three.value == doctest::Approx(-3.0 * std::log(12.0)).epsilon(1e-12));

  // Empty hypotheses are flagged and contribute exactly zero.
  PllResult empty = pll_score(params, {});
  CHECK(empty.value == 0.0);
  CHECK(empty.empty_hypothesis);

  // The score decomposes into one masked forward pass per content position,
  // summed in ascending position order.
  const std::vector<int> content = {5, 9, 6, 11, 7};
  const std::vector<int> framed = frame_sequence(content, cfg.max_seq);
  const std::vector<int> segments(framed.size(), 0);
  const std::vector<uint8_t> padding(framed.size(), 0);
  double expect = 0.0;
  for (int t = 1; t + 1 < static_cast<int>(framed.size()); ++t) {
    std::vector<int> corrupted = framed;
    corrupted[t] = kMaskId;
    const Matrix hidden = encode(params, corrupted, segments, padding);
    const Matrix lp = head_log_probs(params, hidden, {t});
    expect += lp(0, framed[t]);
  }
  CHECK(pll_score(params, content).value == expect);  // bit-exact
}

TEST_CASE("pseudo-log-likelihood prefers strings the model was trained on") {
  EncoderConfig cfg;
  cfg.vocab_size = 12;
  cfg.hidden = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.max_seq = 16;
  cfg.max_segments = 2;
  EncoderParams params = EncoderParams::init(cfg, 21);
  PretrainOptions opts;
  opts.epochs = 200;
  opts.batch_size = 16;
  pretrain(params, alternation_corpus(64, 12), opts, 22);

  const int a = kNumSpecialTokens, b = kNumSpecialTokens + 1;
  const double good = pll_score(params, {a, b, a, b}).value;
  const double bad = pll_score(params, {a, a, a, a}).value;
  CHECK(good > bad);
}

TEST_CASE("weighted-sum reranking follows the dominant score") {
  EncoderParams params = EncoderParams::init(tiny_config(), 116);
  NBestList list;
  list.utterance_id = "u";
  list.hypotheses = {hyp({5}, 0.5, 3.0), hyp({6}, 2.0, 1.0), hyp({7}, 1.0, 2.0)};

  RerankSelection am_only = mbert_rerank(params, list, {0.0, 1.0, 0.0});
  CHECK(am_only.chosen == 1);
  RerankSelection lm_only = mbert_rerank(params, list, {0.0, 0.0, 1.0});
  CHECK(lm_only.chosen == 0);
  double sum = 0.0;
  for (double p : am_only.probs) sum += p;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));

  // Shifting every score by a constant cannot change the winner.
  NBestList shifted = list;
  for (Hypothesis& h : shifted.hypotheses) h.am_score += 123.5;
  CHECK(mbert_rerank(params, shifted, {0.0, 1.0, 0.0}).chosen == 1);

  // Exact ties resolve to the smallest index.
  NBestList tied;
  tied.utterance_id = "t";
  tied.hypotheses = {hyp({5}, 1.0, 1.0), hyp({6}, 1.0, 1.0)};
  CHECK(mbert_rerank(params, tied, {0.0, 1.0, 1.0}).chosen == 0);

  // A zeroed head makes the pseudo-log-likelihood -len * log V, so the
  // shorter hypothesis wins once PLL is the only signal.
  EncoderParams flat = params;
  flat.head_w.fill(0.0);
  flat.head_b.fill(0.0);
  NBestList lengths;
  lengths.utterance_id = "l";
  lengths.hypotheses = {hyp({5, 6, 7}, 0.0, 0.0), hyp({5}, 0.0, 0.0)};
  CHECK(mbert_rerank(flat, lengths, {1.0, 0.0, 0.0}).chosen == 1);

  NBestList none;
  none.utterance_id = "empty";
  CHECK_THROWS_AS(mbert_rerank(params, none, {1.0, 1.0, 1.0}), StructuralError);
}

TEST_CASE("weight grid search matches an exhaustive oracle") {
  EncoderParams params = EncoderParams::init(tiny_config(), 117);
  std::mt19937_64 rng(118);
  std::uniform_int_distribution<int> tok(5, 11), len(1, 3);
  std::uniform_real_distribution<double> score(-3.0, 3.0);
  Dataset dev;
  for (int l = 0; l < 6; ++l) {
    std::vector<int> ref(len(rng) + 1);
    for (int& t : ref) t = tok(rng);
    std::vector<Hypothesis> hyps;
    for (int i = 0; i < 3; ++i) {
      std::vector<int> toks(len(rng));
      for (int& t : toks) t = tok(rng);
      hyps.push_back(hyp(i == 0 ? ref : toks, score(rng), score(rng)));
    }
    dev.lists.push_back(make_list("d" + std::to_string(l), ref, hyps));
  }

  const std::vector<double> grid = {0.0, 0.25, 0.5, 0.75, 1.0};
  MbertWeights found = mbert_grid_search(params, dev, grid);

  // Oracle: precompute PLL and error counts, then scan the grid in the same
  // pll-outer / lm-inner order, keeping the first strict improvement.
  std::vector<std::vector<double>> pll(dev.lists.size());
  std::vector<std::vector<long long>> errs(dev.lists.size());
  for (size_t l = 0; l < dev.lists.size(); ++l) {
    for (const Hypothesis& h : dev.lists[l].hypotheses) {
      pll[l].push_back(pll_score(params, h.tokens).value);
      errs[l].push_back(word_error_rate(dev.lists[l].reference, h.tokens).errors());
    }
  }
  MbertWeights best;
  long long best_total = -1;
  for (double pw : grid)
    for (double aw : grid)
      for (double lw : grid) {
        long long total = 0;
        for (size_t l = 0; l < dev.lists.size(); ++l) {
          int chosen = 0;
          double top = -std::numeric_limits<double>::infinity();
          for (size_t i = 0; i < dev.lists[l].hypotheses.size(); ++i) {
            const double s = pw * pll[l][i] + aw * dev.lists[l].hypotheses[i].am_score +
                             lw * dev.lists[l].hypotheses[i].lm_score;
            if (s > top) {
              top = s;
              chosen = static_cast<int>(i);
            }
          }
          total += errs[l][chosen];
        }
        if (best_total < 0 || total < best_total) {
          best_total = total;
          best = {pw, aw, lw};
        }
      }
  CHECK(found.pll == best.pll);
  CHECK(found.am == best.am);
  CHECK(found.lm == best.lm);

  CHECK_THROWS_AS(mbert_grid_search(params, dev, {}), InvalidArgumentError);
  Dataset none;
  CHECK_THROWS_AS(mbert_grid_search(params, none, grid), InvalidArgumentError);
  Dataset unref = dev;
  unref.lists[0].has_reference = false;
  CHECK_THROWS_AS(mbert_grid_search(params, unref, grid), StructuralError);
}

TEST_CASE("masked-LM fine-tuning regimes pick their text source") {
  EncoderConfig cfg = tiny_config();
  Dataset data;
  data.lists.push_back(make_list("u1", {5, 6, 7}, {hyp({5, 9, 7}), hyp({5, 6, 7})}));
  data.lists.push_back(make_list("u2", {8, 9}, {hyp({8, 9}), hyp({8, 5})}));
  PretrainOptions opts;
  opts.epochs = 1;
  opts.batch_size = 2;

  // Regime a: a strict no-op.
  EncoderParams a = EncoderParams::init(cfg, 119);
  EncoderParams a_before = a;
  PretrainResult ra = mlm_fine_tune(a, data, MlmFineTuneRegime::kNone, opts, 30);
  CHECK(ra.epoch_loss.empty());
  CHECK(params_equal(a, a_before));

  // Regime b trains on the references: identical to pretraining on them.
  EncoderParams b = EncoderParams::init(cfg, 119);
  mlm_fine_tune(b, data, MlmFineTuneRegime::kReferences, opts, 30);
  EncoderParams b_oracle = EncoderParams::init(cfg, 119);
  pretrain(b_oracle, {{5, 6, 7}, {8, 9}}, opts, 30);
  CHECK(params_equal(b, b_oracle));

  // Regime c trains on the oracle hypotheses.
  EncoderParams c = EncoderParams::init(cfg, 119);
  mlm_fine_tune(c, data, MlmFineTuneRegime::kOracles, opts, 30);
  EncoderParams c_oracle = EncoderParams::init(cfg, 119);
  pretrain(c_oracle, {{5, 6, 7}, {8, 9}}, opts, 30);  // oracles equal the references here
  CHECK(params_equal(c, c_oracle));
  CHECK_FALSE(params_equal(b, a_before));

  // Missing text sources are structural errors that name the utterance.
  Dataset unref = data;
  unref.lists[1].has_reference = false;
  EncoderParams d = EncoderParams::init(cfg, 119);
  try {
    mlm_fine_tune(d, unref, MlmFineTuneRegime::kReferences, opts, 30);
    FAIL_CHECK("expected a structural error");
  } catch (const StructuralError& e) {
    CHECK(std::string(e.what()).find("u2") != std::string::npos);
  }
  Dataset unlabeled = data;
  unlabeled.lists[0].oracle = -1;
  CHECK_THROWS_AS(mlm_fine_tune(d, unlabeled, MlmFineTuneRegime::kOracles, opts, 30),
                  StructuralError);

  CHECK(regime_from_name("a") == MlmFineTuneRegime::kNone);
  CHECK(regime_from_name("references") == MlmFineTuneRegime::kReferences);
  CHECK(regime_name(MlmFineTuneRegime::kOracles) == "c");
  CHECK_THROWS_AS(regime_from_name("d"), InvalidArgumentError);
}

TEST_CASE("reranker bundles round-trip bit-exactly") {
  RerankerBundle bundle;
  bundle.encoder = EncoderParams::init(tiny_config(), 120);
  bundle.config.score_setting = ScoreSetting::kSplit;
  bundle.config.am_mean = -1.5;
  bundle.config.am_std = 2.5;
  bundle.config.lm_mean = 0.25;
  bundle.config.lm_std = 1.25;
  bundle.mode = EncodeMode::kIndependent;
  bundle.head = PredictionHead::init(10, 6, 121);

  const auto path = temp_file("reranker-roundtrip.ckpt");
  save_reranker(bundle, path.string(), 0xbeefULL);
  uint64_t fp = 0;
  RerankerBundle loaded = load_reranker(path.string(), &fp);
  CHECK(fp == 0xbeefULL);
  CHECK(loaded.mode == EncodeMode::kIndependent);
  CHECK(loaded.config.score_setting == ScoreSetting::kSplit);
  CHECK(loaded.config.am_mean == -1.5);
  CHECK(params_equal(loaded.encoder, bundle.encoder));
  CHECK(heads_equal(loaded.head, bundle.head));

  // Applying the loaded bundle reproduces the original probabilities.
  NBestList list = make_list("u", {5, 6}, {hyp({5, 6}, -1, -2), hyp({7, 8}, -2, -1)});
  RerankSelection before = rerank_list(bundle.encoder, bundle.head, nullptr, bundle.config,
                                       bundle.mode, list);
  RerankSelection after = rerank_list(loaded.encoder, loaded.head, nullptr, loaded.config,
                                      loaded.mode, list);
  CHECK(before.probs == after.probs);
  CHECK(before.chosen == after.chosen);
  std::filesystem::remove(path);
}

TEST_CASE("reranker loading rejects inconsistent head shapes") {
  RerankerBundle bundle;
  bundle.encoder = EncoderParams::init(tiny_config(), 122);
  bundle.config.score_setting = ScoreSetting::kCombined;
  bundle.head = PredictionHead::init(9, 4, 123);
  const auto path = temp_file("reranker-badshape.ckpt");

  // Head input dim disagrees with encoder hidden + appended score dims.
  RerankerBundle wrong_in = bundle;
  wrong_in.head = PredictionHead::init(7, 4, 123);
  save_reranker(wrong_in, path.string(), 1);
  CHECK_THROWS_AS(load_reranker(path.string()), ParseError);

  // Bias width disagrees with the hidden layer.
  RerankerBundle wrong_b1 = bundle;
  wrong_b1.head.b1 = Matrix(1, 5);
  save_reranker(wrong_b1, path.string(), 1);
  CHECK_THROWS_AS(load_reranker(path.string()), ParseError);

  // Output layer must map hidden -> scalar.
  RerankerBundle wrong_w2 = bundle;
  wrong_w2.head.w2 = Matrix(4, 2);
  save_reranker(wrong_w2, path.string(), 1);
  CHECK_THROWS_AS(load_reranker(path.string()), ParseError);

  // Dropping or adding tensors is detected.
  save_reranker(bundle, path.string(), 1);
  LoadedCheckpoint ckpt = load_checkpoint_file(path.string(), "reranker");
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (const auto& [name, m] : ckpt.tensors)
    if (name != "head.b2") tensors.emplace_back(name, &m);
  save_checkpoint_file(path.string(), "reranker", ckpt.meta, tensors);
  CHECK_THROWS_AS(load_reranker(path.string()), ParseError);

  Matrix extra(1, 1);
  tensors.clear();
  for (const auto& [name, m] : ckpt.tensors) tensors.emplace_back(name, &m);
  tensors.emplace_back("head.w3", &extra);
  save_checkpoint_file(path.string(), "reranker", ckpt.meta, tensors);
  CHECK_THROWS_AS(load_reranker(path.string()), ParseError);
  std::filesystem::remove(path);
}
