#include "nbr/nbr.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "../encoder.hpp"
#include "../errors.hpp"
#include "../eval.hpp"
#include "../jsonl.hpp"
#include "../plsa.hpp"
#include "../rerank.hpp"
#include "../synth.hpp"
#include "../vocab.hpp"

using nlohmann::json;

struct nbr_vocab {
  nbr::Vocabulary v;
};
struct nbr_dataset {
  nbr::Dataset d;
  uint64_t vocab_fp = 0;
};
struct nbr_encoder {
  nbr::EncoderParams p;
  uint64_t vocab_fp = 0;
};
struct nbr_plsa {
  nbr::TopicModel m;
  uint64_t vocab_fp = 0;
};
struct nbr_reranker {
  nbr::RerankerBundle b;
  uint64_t vocab_fp = 0;
};
struct nbr_report {
  std::vector<nbr::RerankRun> runs;
};

namespace {

thread_local std::string g_last_error;

nbr_status fail(const std::string& message, nbr_status code) {
  g_last_error = message;
  return code;
}

// Runs the body and maps the library's exception taxonomy onto status codes.
template <typename Fn>
nbr_status guarded(Fn&& fn) {
  try {
    fn();
    return NBR_OK;
  } catch (const nbr::InvalidArgumentError& e) {
    return fail(e.what(), NBR_ERR_INVALID_ARGUMENT);
  } catch (const nbr::IoError& e) {
    return fail(e.what(), NBR_ERR_IO);
  } catch (const nbr::ParseError& e) {
    return fail(e.what(), NBR_ERR_PARSE);
  } catch (const nbr::StructuralError& e) {
    return fail(e.what(), NBR_ERR_STATE);
  } catch (const nbr::NumericError& e) {
    return fail(e.what(), NBR_ERR_NUMERIC);
  } catch (const json::exception& e) {
    return fail(e.what(), NBR_ERR_PARSE);
  } catch (const std::exception& e) {
    return fail(e.what(), NBR_ERR_INTERNAL);
  } catch (...) {
    return fail("unknown failure", NBR_ERR_INTERNAL);
  }
}

char* copy_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Parses an options object, rejecting keys outside the allowed set so typos
// fail loudly instead of silently using defaults.
json parse_options(const char* options_json, std::initializer_list<const char*> allowed) {
  if (!options_json || !*options_json) return json::object();
  json j;
  try {
    j = json::parse(options_json);
  } catch (const json::parse_error& e) {
    throw nbr::ParseError(std::string("options: ") + e.what());
  }
  if (!j.is_object()) throw nbr::InvalidArgumentError("options must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known) throw nbr::InvalidArgumentError("options: unknown key '" + key + "'");
  }
  return j;
}

void check_same_vocab(uint64_t a, uint64_t b, const char* what) {
  if (a != b)
    throw nbr::StructuralError(std::string(what) +
                               " (vocabulary fingerprint mismatch; the inputs were built "
                               "against different vocabularies)");
}

std::vector<std::vector<int>> reference_corpus(const nbr::Dataset& d) {
  std::vector<std::vector<int>> corpus;
  corpus.reserve(d.lists.size());
  for (const nbr::NBestList& list : d.lists) {
    if (!list.has_reference)
      throw nbr::StructuralError("utterance " + list.utterance_id +
                                 " has no reference transcript");
    corpus.push_back(list.reference);
  }
  return corpus;
}

json history_to_json(const nbr::PretrainResult& r) {
  return json{{"epoch_loss", r.epoch_loss}};
}

}  // namespace

extern "C" {

const char* nbr_version(void) { return "0.1.0"; }

const char* nbr_last_error(void) { return g_last_error.c_str(); }

void nbr_string_free(char* s) { std::free(s); }

/* ---- vocabulary ---- */

nbr_status nbr_vocab_load(const char* path, nbr_vocab** out) {
  if (!path || !out) return fail("nbr_vocab_load: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] { *out = new nbr_vocab{nbr::Vocabulary::load(path)}; });
}

void nbr_vocab_free(nbr_vocab* vocab) { delete vocab; }

nbr_status nbr_vocab_size(const nbr_vocab* vocab, int32_t* out) {
  if (!vocab || !out) return fail("nbr_vocab_size: null argument", NBR_ERR_INVALID_ARGUMENT);
  *out = vocab->v.size();
  return NBR_OK;
}

nbr_status nbr_vocab_fingerprint(const nbr_vocab* vocab, uint64_t* out) {
  if (!vocab || !out)
    return fail("nbr_vocab_fingerprint: null argument", NBR_ERR_INVALID_ARGUMENT);
  *out = vocab->v.fingerprint();
  return NBR_OK;
}

/* ---- datasets ---- */

nbr_status nbr_dataset_load(const char* path, const nbr_vocab* vocab, const char* split,
                            int require_references, nbr_dataset** out) {
  if (!path || !vocab || !out)
    return fail("nbr_dataset_load: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    nbr::LoadOptions opts;
    opts.split = split ? split : "";
    opts.require_references = require_references != 0;
    auto* handle = new nbr_dataset();
    try {
      handle->d = nbr::load_nbest(path, vocab->v, opts);
      handle->vocab_fp = vocab->v.fingerprint();
    } catch (...) {
      delete handle;
      throw;
    }
    *out = handle;
  });
}

void nbr_dataset_free(nbr_dataset* dataset) { delete dataset; }

nbr_status nbr_dataset_size(const nbr_dataset* dataset, int64_t* out) {
  if (!dataset || !out) return fail("nbr_dataset_size: null argument", NBR_ERR_INVALID_ARGUMENT);
  *out = static_cast<int64_t>(dataset->d.lists.size());
  return NBR_OK;
}

nbr_status nbr_dataset_fingerprint(const nbr_dataset* dataset, uint64_t* out) {
  if (!dataset || !out)
    return fail("nbr_dataset_fingerprint: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] { *out = dataset->d.fingerprint(); });
}

nbr_status nbr_synth_write(const char* spec_json, uint64_t seed, const char* out_dir) {
  if (!out_dir) return fail("nbr_synth_write: null out_dir", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    const json j = parse_options(
        spec_json, {"topics", "vocab_size", "train_lists", "dev_lists", "test_lists", "nbest",
                    "corrupt_rate", "sub_frac", "del_frac", "ins_frac", "score_noise",
                    "clean_prob", "len_min", "len_max", "bigram_successors"});
    nbr::SynthSpec spec;
    spec.topics = j.value("topics", spec.topics);
    spec.vocab_size = j.value("vocab_size", spec.vocab_size);
    spec.train_lists = j.value("train_lists", spec.train_lists);
    spec.dev_lists = j.value("dev_lists", spec.dev_lists);
    spec.test_lists = j.value("test_lists", spec.test_lists);
    spec.nbest = j.value("nbest", spec.nbest);
    spec.corrupt_rate = j.value("corrupt_rate", spec.corrupt_rate);
    spec.sub_frac = j.value("sub_frac", spec.sub_frac);
    spec.del_frac = j.value("del_frac", spec.del_frac);
    spec.ins_frac = j.value("ins_frac", spec.ins_frac);
    spec.score_noise = j.value("score_noise", spec.score_noise);
    spec.clean_prob = j.value("clean_prob", spec.clean_prob);
    spec.len_min = j.value("len_min", spec.len_min);
    spec.len_max = j.value("len_max", spec.len_max);
    spec.bigram_successors = j.value("bigram_successors", spec.bigram_successors);

    const nbr::SynthCorpus corpus = nbr::generate_synthetic_corpus(spec, seed);
    std::filesystem::create_directories(out_dir);
    const std::string dir(out_dir);
    corpus.vocab.save(dir + "/vocab.txt");
    std::ofstream out(dir + "/corpus.jsonl", std::ios::trunc);
    if (!out) throw nbr::IoError("cannot write " + dir + "/corpus.jsonl");
    nbr::append_nbest(out, corpus.train, corpus.vocab, "train");
    nbr::append_nbest(out, corpus.dev, corpus.vocab, "dev");
    nbr::append_nbest(out, corpus.test, corpus.vocab, "test");
    out.flush();
    if (!out) throw nbr::IoError("short write to " + dir + "/corpus.jsonl");
  });
}

/* ---- encoder ---- */

nbr_status nbr_encoder_init(const char* config_json, const nbr_vocab* vocab, uint64_t seed,
                            nbr_encoder** out) {
  if (!vocab || !out) return fail("nbr_encoder_init: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    const json j = parse_options(
        config_json, {"vocab_size", "hidden", "layers", "heads", "ffn", "max_seq",
                      "max_segments", "mask_prob", "action_mask", "action_random", "action_keep"});
    nbr::EncoderConfig config;
    config.vocab_size = j.value("vocab_size", vocab->v.size());
    config.hidden = j.value("hidden", config.hidden);
    config.layers = j.value("layers", config.layers);
    config.heads = j.value("heads", config.heads);
    config.ffn = j.value("ffn", config.ffn);
    config.max_seq = j.value("max_seq", config.max_seq);
    config.max_segments = j.value("max_segments", config.max_segments);
    config.mask_prob = j.value("mask_prob", config.mask_prob);
    config.action_mask = j.value("action_mask", config.action_mask);
    config.action_random = j.value("action_random", config.action_random);
    config.action_keep = j.value("action_keep", config.action_keep);
    if (config.vocab_size != vocab->v.size())
      throw nbr::InvalidArgumentError(
          "encoder config: vocab_size " + std::to_string(config.vocab_size) +
          " does not match the supplied vocabulary of size " + std::to_string(vocab->v.size()));
    *out = new nbr_encoder{nbr::EncoderParams::init(config, seed), vocab->v.fingerprint()};
  });
}

nbr_status nbr_encoder_load(const char* path, nbr_encoder** out) {
  if (!path || !out) return fail("nbr_encoder_load: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    uint64_t fp = 0;
    nbr::EncoderParams params = nbr::load_encoder(path, &fp);
    *out = new nbr_encoder{std::move(params), fp};
  });
}

nbr_status nbr_encoder_save(const nbr_encoder* encoder, const char* path) {
  if (!encoder || !path)
    return fail("nbr_encoder_save: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] { nbr::save_encoder(encoder->p, path, encoder->vocab_fp); });
}

void nbr_encoder_free(nbr_encoder* encoder) { delete encoder; }

nbr_status nbr_encoder_vocab_fingerprint(const nbr_encoder* encoder, uint64_t* out) {
  if (!encoder || !out)
    return fail("nbr_encoder_vocab_fingerprint: null argument", NBR_ERR_INVALID_ARGUMENT);
  *out = encoder->vocab_fp;
  return NBR_OK;
}

nbr_status nbr_encoder_pretrain(nbr_encoder* encoder, const nbr_dataset* dataset,
                                const char* opts_json, uint64_t seed, char** history_json) {
  if (!encoder || !dataset)
    return fail("nbr_encoder_pretrain: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    check_same_vocab(encoder->vocab_fp, dataset->vocab_fp,
                     "pretrain: dataset does not match the encoder");
    const json j = parse_options(opts_json, {"epochs", "batch_size", "lr"});
    nbr::PretrainOptions opts;
    opts.epochs = j.value("epochs", opts.epochs);
    opts.batch_size = j.value("batch_size", opts.batch_size);
    opts.adam.lr = j.value("lr", opts.adam.lr);
    const nbr::PretrainResult history =
        nbr::pretrain(encoder->p, reference_corpus(dataset->d), opts, seed);
    if (history_json) *history_json = copy_string(history_to_json(history).dump());
  });
}

nbr_status nbr_encoder_finetune_mlm(nbr_encoder* encoder, const nbr_dataset* dataset,
                                    const char* regime, const char* opts_json, uint64_t seed,
                                    char** history_json) {
  if (!encoder || !dataset || !regime)
    return fail("nbr_encoder_finetune_mlm: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    check_same_vocab(encoder->vocab_fp, dataset->vocab_fp,
                     "finetune-mlm: dataset does not match the encoder");
    const json j = parse_options(opts_json, {"epochs", "batch_size", "lr"});
    nbr::PretrainOptions opts;
    opts.epochs = j.value("epochs", 1);
    opts.batch_size = j.value("batch_size", opts.batch_size);
    opts.adam.lr = j.value("lr", opts.adam.lr);
    const nbr::PretrainResult history = nbr::mlm_fine_tune(
        encoder->p, dataset->d, nbr::regime_from_name(regime), opts, seed);
    if (history_json) *history_json = copy_string(history_to_json(history).dump());
  });
}

nbr_status nbr_encoder_mlm_loss(const nbr_encoder* encoder, const nbr_dataset* dataset,
                                uint64_t mask_seed, double* out) {
  if (!encoder || !dataset || !out)
    return fail("nbr_encoder_mlm_loss: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    check_same_vocab(encoder->vocab_fp, dataset->vocab_fp,
                     "mlm-loss: dataset does not match the encoder");
    *out = nbr::mlm_corpus_loss(encoder->p, reference_corpus(dataset->d), mask_seed);
  });
}

nbr_status nbr_encoder_mlm_accuracy(const nbr_encoder* encoder, const nbr_dataset* dataset,
                                    uint64_t mask_seed, double* out) {
  if (!encoder || !dataset || !out)
    return fail("nbr_encoder_mlm_accuracy: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    check_same_vocab(encoder->vocab_fp, dataset->vocab_fp,
                     "mlm-accuracy: dataset does not match the encoder");
    *out = nbr::mlm_corpus_accuracy(encoder->p, reference_corpus(dataset->d), mask_seed);
  });
}

nbr_status nbr_rescore_pll(const nbr_encoder* encoder, const nbr_dataset* dataset,
                           char** jsonl_out) {
  if (!encoder || !dataset || !jsonl_out)
    return fail("nbr_rescore_pll: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    check_same_vocab(encoder->vocab_fp, dataset->vocab_fp,
                     "rescore-pll: dataset does not match the encoder");
    std::string out;
    for (const nbr::NBestList& list : dataset->d.lists) {
      nlohmann::ordered_json line;
      line["utt_id"] = list.utterance_id;
      nlohmann::ordered_json plls = nlohmann::ordered_json::array();
      bool any_empty = false;
      for (const nbr::Hypothesis& hyp : list.hypotheses) {
        const nbr::PllResult r = nbr::pll_score(encoder->p, hyp.tokens);
        plls.push_back(r.value);
        any_empty = any_empty || r.empty_hypothesis;
      }
      line["pll"] = std::move(plls);
      if (any_empty) line["empty_hypothesis"] = true;
      out += line.dump();
      out += '\n';
    }
    *jsonl_out = copy_string(out);
  });
}

/* ---- topic model ---- */

nbr_status nbr_plsa_train(const nbr_dataset* dataset, const nbr_vocab* vocab, int32_t topics,
                          int32_t iterations, double epsilon, int32_t fold_in_iterations,
                          uint64_t seed, nbr_plsa** out, char** history_json) {
  if (!dataset || !vocab || !out)
    return fail("nbr_plsa_train: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    check_same_vocab(vocab->v.fingerprint(), dataset->vocab_fp,
                     "train-plsa: dataset does not match the vocabulary");
    if (fold_in_iterations < 0)
      throw nbr::InvalidArgumentError("train-plsa: fold-in iterations must be >= 0");
    std::vector<nbr::DocBag> docs;
    docs.reserve(dataset->d.lists.size());
    for (const nbr::NBestList& list : dataset->d.lists) {
      if (!list.has_reference)
        throw nbr::StructuralError("utterance " + list.utterance_id +
                                   " has no reference transcript");
      nbr::DocBag bag = nbr::bag_from_tokens(list.reference, vocab->v.size());
      if (!bag.word.empty()) docs.push_back(std::move(bag));
    }
    if (docs.empty())
      throw nbr::InvalidArgumentError("train-plsa: no usable reference transcripts");
    nbr::PlsaTrainResult trained =
        nbr::train_plsa(docs, topics, vocab->v.content_size(), iterations, epsilon, seed);
    trained.model.fold_in_iterations = fold_in_iterations;
    if (history_json)
      *history_json = copy_string(json{{"log_likelihood", trained.log_likelihood}}.dump());
    *out = new nbr_plsa{std::move(trained.model), vocab->v.fingerprint()};
  });
}

nbr_status nbr_plsa_load(const char* path, nbr_plsa** out) {
  if (!path || !out) return fail("nbr_plsa_load: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    uint64_t fp = 0;
    nbr::TopicModel model = nbr::load_topic_model(path, &fp);
    *out = new nbr_plsa{std::move(model), fp};
  });
}

nbr_status nbr_plsa_save(const nbr_plsa* plsa, const char* path) {
  if (!plsa || !path) return fail("nbr_plsa_save: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] { nbr::save_topic_model(plsa->m, path, plsa->vocab_fp); });
}

void nbr_plsa_free(nbr_plsa* plsa) { delete plsa; }

nbr_status nbr_plsa_topics(const nbr_plsa* plsa, int32_t* out) {
  if (!plsa || !out) return fail("nbr_plsa_topics: null argument", NBR_ERR_INVALID_ARGUMENT);
  *out = plsa->m.topics;
  return NBR_OK;
}

/* ---- reranker ---- */

nbr_status nbr_reranker_train(const nbr_encoder* encoder, const nbr_dataset* train,
                              const nbr_dataset* dev, const nbr_plsa* plsa,
                              const char* opts_json, uint64_t seed, nbr_reranker** out,
                              char** history_json) {
  if (!encoder || !train || !out)
    return fail("nbr_reranker_train: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    check_same_vocab(encoder->vocab_fp, train->vocab_fp,
                     "train-rerank: training set does not match the encoder");
    if (dev)
      check_same_vocab(encoder->vocab_fp, dev->vocab_fp,
                       "train-rerank: dev set does not match the encoder");
    const json j =
        parse_options(opts_json, {"epochs", "lr", "head_hidden", "scores", "topic", "mode",
                                  "fine_tune", "lambda_am", "lambda_lm"});

    nbr::FeatureConfig config;
    config.score_setting =
        nbr::score_setting_from_name(j.value("scores", std::string("none")));
    config.topic_enabled = j.value("topic", false);
    config.lambda_am = j.value("lambda_am", 1.0);
    config.lambda_lm = j.value("lambda_lm", 1.0);
    if (config.topic_enabled) {
      if (!plsa)
        throw nbr::InvalidArgumentError(
            "train-rerank: topic features requested but no topic model supplied");
      check_same_vocab(encoder->vocab_fp, plsa->vocab_fp,
                       "train-rerank: topic model does not match the encoder");
      config.topics = plsa->m.topics;
    }

    nbr::RerankTrainOptions opts;
    opts.epochs = j.value("epochs", opts.epochs);
    opts.adam.lr = j.value("lr", opts.adam.lr);
    opts.mode = nbr::encode_mode_from_name(j.value("mode", std::string("joint")));
    opts.fine_tune = j.value("fine_tune", true);
    const int head_hidden = j.value("head_hidden", 32);

    nbr::RerankerBundle bundle;
    bundle.encoder = encoder->p;  // train a copy; the handle stays frozen
    bundle.config = config;
    bundle.mode = opts.mode;
    bundle.head =
        nbr::PredictionHead::init(encoder->p.config.hidden + config.appended_dims(), head_hidden,
                                  seed ^ 0xda3e39cb94b95bdbULL);
    const nbr::RerankTrainResult history = nbr::train_reranker(
        bundle.encoder, bundle.head, train->d, dev ? &dev->d : nullptr,
        plsa && config.topic_enabled ? &plsa->m : nullptr, bundle.config, opts, seed);
    if (history_json)
      *history_json = copy_string(json{{"epoch_loss", history.epoch_loss},
                                       {"dev_accuracy", history.epoch_dev_accuracy}}
                                      .dump());
    *out = new nbr_reranker{std::move(bundle), encoder->vocab_fp};
  });
}

nbr_status nbr_reranker_load(const char* path, nbr_reranker** out) {
  if (!path || !out) return fail("nbr_reranker_load: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    uint64_t fp = 0;
    nbr::RerankerBundle bundle = nbr::load_reranker(path, &fp);
    *out = new nbr_reranker{std::move(bundle), fp};
  });
}

nbr_status nbr_reranker_save(const nbr_reranker* reranker, const char* path) {
  if (!reranker || !path)
    return fail("nbr_reranker_save: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] { nbr::save_reranker(reranker->b, path, reranker->vocab_fp); });
}

void nbr_reranker_free(nbr_reranker* reranker) { delete reranker; }

/* ---- evaluation ---- */

nbr_status nbr_report_new(nbr_report** out) {
  if (!out) return fail("nbr_report_new: null argument", NBR_ERR_INVALID_ARGUMENT);
  *out = new nbr_report();
  return NBR_OK;
}

void nbr_report_free(nbr_report* report) { delete report; }

nbr_status nbr_evaluate(const nbr_dataset* dataset, const char* method,
                        const nbr_reranker* reranker, const nbr_plsa* plsa,
                        const nbr_encoder* encoder, const char* opts_json, nbr_report* report) {
  if (!dataset || !method || !report)
    return fail("nbr_evaluate: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    const std::string name(method);
    const json j = parse_options(opts_json, {"seed", "mu_pll", "mu_am", "mu_lm"});
    nbr::Selector selector;
    if (name == "first") {
      selector = nbr::first_selector();
    } else if (name == "oracle") {
      selector = nbr::oracle_selector();
    } else if (name == "worst") {
      selector = nbr::worst_selector();
    } else if (name == "random") {
      selector = nbr::random_selector(j.value("seed", 0ULL));
    } else if (name == "pbert" || name == "tpbert") {
      if (!reranker)
        throw nbr::InvalidArgumentError("method '" + name + "' requires a reranker");
      check_same_vocab(reranker->vocab_fp, dataset->vocab_fp,
                       "evaluate: dataset does not match the reranker");
      if (name == "tpbert" && !reranker->b.config.topic_enabled)
        throw nbr::InvalidArgumentError(
            "method 'tpbert' requires a reranker trained with topic features");
      if (name == "pbert" && reranker->b.config.topic_enabled)
        throw nbr::InvalidArgumentError(
            "method 'pbert' got a topic-augmented reranker; evaluate it as 'tpbert'");
      const nbr::TopicModel* topics = nullptr;
      if (reranker->b.config.topic_enabled) {
        if (!plsa)
          throw nbr::InvalidArgumentError(
              "method 'tpbert' requires the topic model the reranker was trained with");
        check_same_vocab(reranker->vocab_fp, plsa->vocab_fp,
                         "evaluate: topic model does not match the reranker");
        topics = &plsa->m;
      }
      const nbr::RerankerBundle& b = reranker->b;
      selector = [&b, topics](const nbr::NBestList& list) {
        return nbr::rerank_list(b.encoder, b.head, topics, b.config, b.mode, list);
      };
    } else if (name == "mbert") {
      if (!encoder) throw nbr::InvalidArgumentError("method 'mbert' requires an encoder");
      check_same_vocab(encoder->vocab_fp, dataset->vocab_fp,
                       "evaluate: dataset does not match the encoder");
      nbr::MbertWeights weights;
      weights.pll = j.value("mu_pll", 1.0);
      weights.am = j.value("mu_am", 1.0);
      weights.lm = j.value("mu_lm", 1.0);
      const nbr::EncoderParams& p = encoder->p;
      selector = [&p, weights](const nbr::NBestList& list) {
        return nbr::mbert_rerank(p, list, weights);
      };
    } else {
      throw nbr::InvalidArgumentError(
          "unknown method '" + name +
          "', expected first, oracle, worst, random, pbert, tpbert or mbert");
    }
    nbr::RerankRun run = nbr::evaluate(dataset->d, name, selector);
    if (!report->runs.empty() &&
        report->runs.front().dataset_fingerprint != run.dataset_fingerprint)
      throw nbr::StructuralError(
          "nbr_evaluate: report already holds runs for a different dataset");
    report->runs.push_back(std::move(run));
  });
}

nbr_status nbr_mbert_grid_search(const nbr_encoder* encoder, const nbr_dataset* dev,
                                 const char* grid_json, char** weights_json) {
  if (!encoder || !dev || !weights_json)
    return fail("nbr_mbert_grid_search: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    check_same_vocab(encoder->vocab_fp, dev->vocab_fp,
                     "mbert grid search: dev set does not match the encoder");
    std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
    if (grid_json && *grid_json) {
      const json g = json::parse(grid_json);
      if (!g.is_array() || g.empty())
        throw nbr::InvalidArgumentError("grid must be a nonempty JSON array of numbers");
      grid = g.get<std::vector<double>>();
    }
    const nbr::MbertWeights best = nbr::mbert_grid_search(encoder->p, dev->d, grid);
    *weights_json = copy_string(
        json{{"mu_pll", best.pll}, {"mu_am", best.am}, {"mu_lm", best.lm}}.dump());
  });
}

nbr_status nbr_report_merge(nbr_report* dst, const nbr_report* src) {
  if (!dst || !src) return fail("nbr_report_merge: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    if (!dst->runs.empty() && !src->runs.empty() &&
        dst->runs.front().dataset_fingerprint != src->runs.front().dataset_fingerprint)
      throw nbr::StructuralError("nbr_report_merge: reports cover different datasets");
    for (const nbr::RerankRun& run : src->runs) dst->runs.push_back(run);
  });
}

nbr_status nbr_report_from_json(const char* json_text, nbr_report** out) {
  if (!json_text || !out)
    return fail("nbr_report_from_json: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    const nbr::Report report = nbr::Report::from_json(json::parse(json_text));
    *out = new nbr_report{report.runs};
  });
}

nbr_status nbr_report_to_json(const nbr_report* report, char** json_out) {
  if (!report || !json_out)
    return fail("nbr_report_to_json: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    *json_out = copy_string(nbr::compare_runs(report->runs).to_json().dump(2));
  });
}

nbr_status nbr_report_table(const nbr_report* report, char** table_out) {
  if (!report || !table_out)
    return fail("nbr_report_table: null argument", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    *table_out = copy_string(nbr::compare_runs(report->runs).human_table());
  });
}

nbr_status nbr_report_run_count(const nbr_report* report, int32_t* out) {
  if (!report || !out)
    return fail("nbr_report_run_count: null argument", NBR_ERR_INVALID_ARGUMENT);
  *out = static_cast<int32_t>(report->runs.size());
  return NBR_OK;
}

nbr_status nbr_report_run_stats(const nbr_report* report, int32_t index, char** method_out,
                                double* wer_out, double* sel_acc_out) {
  if (!report) return fail("nbr_report_run_stats: null argument", NBR_ERR_INVALID_ARGUMENT);
  if (index < 0 || index >= static_cast<int32_t>(report->runs.size()))
    return fail("nbr_report_run_stats: run index out of range", NBR_ERR_INVALID_ARGUMENT);
  return guarded([&] {
    const nbr::RerankRun& run = report->runs[index];
    if (method_out) *method_out = copy_string(run.method);
    if (wer_out) *wer_out = run.wer;
    if (sel_acc_out) *sel_acc_out = run.selection_accuracy;
  });
}

}  // extern "C"
