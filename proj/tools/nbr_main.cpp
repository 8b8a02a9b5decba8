// nbr — command-line front end for the n-best reranking toolkit.
//
// Every subcommand talks to the core library exclusively through the C API
// in include/nbr/nbr.h, so this file doubles as a usage example for anyone
// embedding libnbr in another program.

#include <nbr/nbr.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Small RAII wrappers so early exits never leak handles.

struct VocabDeleter { void operator()(nbr_vocab* v) const { nbr_vocab_free(v); } };
struct DatasetDeleter { void operator()(nbr_dataset* d) const { nbr_dataset_free(d); } };
struct EncoderDeleter { void operator()(nbr_encoder* e) const { nbr_encoder_free(e); } };
struct PlsaDeleter { void operator()(nbr_plsa* p) const { nbr_plsa_free(p); } };
struct RerankerDeleter { void operator()(nbr_reranker* r) const { nbr_reranker_free(r); } };
struct ReportDeleter { void operator()(nbr_report* r) const { nbr_report_free(r); } };

using VocabPtr = std::unique_ptr<nbr_vocab, VocabDeleter>;
using DatasetPtr = std::unique_ptr<nbr_dataset, DatasetDeleter>;
using EncoderPtr = std::unique_ptr<nbr_encoder, EncoderDeleter>;
using PlsaPtr = std::unique_ptr<nbr_plsa, PlsaDeleter>;
using RerankerPtr = std::unique_ptr<nbr_reranker, RerankerDeleter>;
using ReportPtr = std::unique_ptr<nbr_report, ReportDeleter>;

// Owned C string returned by the library.
struct CStr {
  char* ptr = nullptr;
  ~CStr() { nbr_string_free(ptr); }
  std::string str() const { return ptr ? std::string(ptr) : std::string(); }
};

// Abort the process with the library's last error message on stderr.
void check(nbr_status status, const char* what) {
  if (status == NBR_OK) return;
  std::fprintf(stderr, "nbr: %s failed: %s\n", what, nbr_last_error());
  std::exit(1);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::fprintf(stderr, "nbr: cannot open %s\n", path.c_str());
    std::exit(1);
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    std::fprintf(stderr, "nbr: cannot write %s\n", path.c_str());
    std::exit(1);
  }
  out << text;
  if (!out) {
    std::fprintf(stderr, "nbr: short write to %s\n", path.c_str());
    std::exit(1);
  }
}

// A corpus directory is the pair vocab.txt + corpus.jsonl produced by `nbr synth`.
VocabPtr load_vocab(const std::string& corpus_dir) {
  nbr_vocab* v = nullptr;
  check(nbr_vocab_load((corpus_dir + "/vocab.txt").c_str(), &v), "loading vocabulary");
  return VocabPtr(v);
}

DatasetPtr load_split(const std::string& corpus_dir, const nbr_vocab* vocab,
                      const std::string& split, bool require_references) {
  nbr_dataset* d = nullptr;
  check(nbr_dataset_load((corpus_dir + "/corpus.jsonl").c_str(), vocab, split.c_str(),
                         require_references ? 1 : 0, &d),
        "loading dataset");
  return DatasetPtr(d);
}

void print_history(const std::string& history_json) {
  json h = json::parse(history_json);
  const auto& losses = h.at("epoch_loss");
  const json* dev = h.contains("dev_accuracy") ? &h.at("dev_accuracy") : nullptr;
  for (size_t i = 0; i < losses.size(); ++i) {
    if (dev && i < dev->size()) {
      std::printf("epoch %zu: loss %.6f  dev-acc %.4f\n", i + 1,
                  losses[i].get<double>(), (*dev)[i].get<double>());
    } else {
      std::printf("epoch %zu: loss %.6f\n", i + 1, losses[i].get<double>());
    }
  }
}

// ---------------------------------------------------------------------------
// Per-subcommand option bags. CLI11 fills them; run_* consumes them.

struct SynthArgs {
  std::string out_dir;
  std::uint64_t seed = 7;
  int topics = 2;
  int vocab_size = 200;
  int train = 2000, dev = 200, test = 200;
  int nbest = 10;
  double corrupt_rate = 0.3;
  double score_noise = 4.0;
  double clean_prob = 0.5;
  int len_min = 5, len_max = 9;
};

int run_synth(const SynthArgs& a) {
  json spec = {
      {"topics", a.topics},           {"vocab_size", a.vocab_size},
      {"train_lists", a.train},       {"dev_lists", a.dev},
      {"test_lists", a.test},         {"nbest", a.nbest},
      {"corrupt_rate", a.corrupt_rate}, {"score_noise", a.score_noise},
      {"clean_prob", a.clean_prob},   {"len_min", a.len_min},
      {"len_max", a.len_max},
  };
  check(nbr_synth_write(spec.dump().c_str(), a.seed, a.out_dir.c_str()), "synthesis");
  std::printf("wrote %s/vocab.txt and %s/corpus.jsonl\n", a.out_dir.c_str(), a.out_dir.c_str());
  return 0;
}

struct PretrainArgs {
  std::string corpus_dir;
  std::string out_path = "encoder.ckpt";
  std::uint64_t seed = 7;
  int epochs = 5;
  int batch = 16;
  double lr = 1e-3;
  int hidden = 32, layers = 2, heads = 2, ffn = 64;
  int max_seq = 128, max_segments = 16;
  double mask_prob = 0.15;
};

int run_pretrain(const PretrainArgs& a) {
  VocabPtr vocab = load_vocab(a.corpus_dir);
  DatasetPtr train = load_split(a.corpus_dir, vocab.get(), "train", true);

  json config = {
      {"hidden", a.hidden},       {"layers", a.layers},
      {"heads", a.heads},         {"ffn", a.ffn},
      {"max_seq", a.max_seq},     {"max_segments", a.max_segments},
      {"mask_prob", a.mask_prob},
  };
  nbr_encoder* enc_raw = nullptr;
  check(nbr_encoder_init(config.dump().c_str(), vocab.get(), a.seed, &enc_raw),
        "initializing encoder");
  EncoderPtr enc(enc_raw);

  json opts = {{"epochs", a.epochs}, {"batch_size", a.batch}, {"lr", a.lr}};
  CStr history;
  check(nbr_encoder_pretrain(enc.get(), train.get(), opts.dump().c_str(), a.seed, &history.ptr),
        "pretraining");
  print_history(history.str());

  check(nbr_encoder_save(enc.get(), a.out_path.c_str()), "saving encoder");
  std::printf("wrote %s\n", a.out_path.c_str());
  return 0;
}

struct TrainPlsaArgs {
  std::string corpus_dir;
  std::string out_path = "plsa.ckpt";
  int topics = 8;
  int iters = 50;
  double epsilon = 1e-6;
  int fold_iters = 20;
  std::uint64_t seed = 7;
};

int run_train_plsa(const TrainPlsaArgs& a) {
  VocabPtr vocab = load_vocab(a.corpus_dir);
  DatasetPtr train = load_split(a.corpus_dir, vocab.get(), "train", true);
  nbr_plsa* raw = nullptr;
  CStr history;
  check(nbr_plsa_train(train.get(), vocab.get(), a.topics, a.iters, a.epsilon,
                       a.fold_iters, a.seed, &raw, &history.ptr),
        "training topic model");
  PlsaPtr model(raw);
  json h = json::parse(history.str());
  const auto& ll = h.at("log_likelihood");
  if (!ll.empty()) {
    std::printf("log-likelihood: %.4f -> %.4f over %zu iterations\n",
                ll.front().get<double>(), ll.back().get<double>(), ll.size());
  }
  check(nbr_plsa_save(model.get(), a.out_path.c_str()), "saving topic model");
  int32_t topics = 0;
  check(nbr_plsa_topics(model.get(), &topics), "reading topic count");
  std::printf("wrote %s (%d topics)\n", a.out_path.c_str(), topics);
  return 0;
}

struct TrainRerankArgs {
  std::string corpus_dir;
  std::string encoder_path;
  std::string out_path = "reranker.ckpt";
  std::string plsa_path;
  bool topic = false;
  std::string scores = "split";
  std::string mode = "joint";
  bool fine_tune = true;
  int epochs = 10;
  double lr = 1e-3;
  int head_hidden = 32;
  double lambda_am = 1.0, lambda_lm = 1.0;
  std::uint64_t seed = 7;
};

int run_train_rerank(const TrainRerankArgs& a) {
  if (a.topic && a.plsa_path.empty()) {
    std::fprintf(stderr, "nbr: --topic requires --plsa PATH\n");
    return 1;
  }
  VocabPtr vocab = load_vocab(a.corpus_dir);
  DatasetPtr train = load_split(a.corpus_dir, vocab.get(), "train", true);
  DatasetPtr dev = load_split(a.corpus_dir, vocab.get(), "dev", true);

  nbr_encoder* enc_raw = nullptr;
  check(nbr_encoder_load(a.encoder_path.c_str(), &enc_raw), "loading encoder");
  EncoderPtr enc(enc_raw);

  PlsaPtr plsa;
  if (a.topic) {
    nbr_plsa* p = nullptr;
    check(nbr_plsa_load(a.plsa_path.c_str(), &p), "loading topic model");
    plsa.reset(p);
  }

  json opts = {
      {"epochs", a.epochs},     {"lr", a.lr},
      {"head_hidden", a.head_hidden}, {"scores", a.scores},
      {"topic", a.topic},       {"mode", a.mode},
      {"fine_tune", a.fine_tune}, {"lambda_am", a.lambda_am},
      {"lambda_lm", a.lambda_lm},
  };
  nbr_reranker* rr_raw = nullptr;
  CStr history;
  check(nbr_reranker_train(enc.get(), train.get(), dev.get(), plsa.get(),
                           opts.dump().c_str(), a.seed, &rr_raw, &history.ptr),
        "training reranker");
  RerankerPtr reranker(rr_raw);
  print_history(history.str());

  check(nbr_reranker_save(reranker.get(), a.out_path.c_str()), "saving reranker");
  std::printf("wrote %s\n", a.out_path.c_str());
  return 0;
}

struct FinetuneMlmArgs {
  std::string corpus_dir;
  std::string encoder_path;
  std::string out_path = "encoder-ft.ckpt";
  std::string regime = "b";
  std::string split = "train";
  int epochs = 1;
  int batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 7;
};

int run_finetune_mlm(const FinetuneMlmArgs& a) {
  VocabPtr vocab = load_vocab(a.corpus_dir);
  DatasetPtr data = load_split(a.corpus_dir, vocab.get(), a.split, a.regime == "b");

  nbr_encoder* enc_raw = nullptr;
  check(nbr_encoder_load(a.encoder_path.c_str(), &enc_raw), "loading encoder");
  EncoderPtr enc(enc_raw);

  json opts = {{"epochs", a.epochs}, {"batch_size", a.batch}, {"lr", a.lr}};
  CStr history;
  check(nbr_encoder_finetune_mlm(enc.get(), data.get(), a.regime.c_str(),
                                 opts.dump().c_str(), a.seed, &history.ptr),
        "fine-tuning");
  print_history(history.str());

  check(nbr_encoder_save(enc.get(), a.out_path.c_str()), "saving encoder");
  std::printf("wrote %s\n", a.out_path.c_str());
  return 0;
}

struct RescorePllArgs {
  std::string corpus_dir;
  std::string encoder_path;
  std::string split = "test";
  std::string out_path;  // empty → stdout
};

int run_rescore_pll(const RescorePllArgs& a) {
  VocabPtr vocab = load_vocab(a.corpus_dir);
  DatasetPtr data = load_split(a.corpus_dir, vocab.get(), a.split, false);
  nbr_encoder* enc_raw = nullptr;
  check(nbr_encoder_load(a.encoder_path.c_str(), &enc_raw), "loading encoder");
  EncoderPtr enc(enc_raw);

  CStr lines;
  check(nbr_rescore_pll(enc.get(), data.get(), &lines.ptr), "scoring");
  if (a.out_path.empty()) {
    std::fputs(lines.str().c_str(), stdout);
  } else {
    write_text_file(a.out_path, lines.str());
    std::printf("wrote %s\n", a.out_path.c_str());
  }
  return 0;
}

struct EvaluateArgs {
  std::string corpus_dir;
  std::string method;
  std::string reranker_path;
  std::string plsa_path;
  std::string encoder_path;
  std::string split = "test";
  std::string out_path;
  std::uint64_t seed = 7;
  double mu_pll = 1.0, mu_am = 1.0, mu_lm = 1.0;
  bool tune_mu = false;
};

int run_evaluate(const EvaluateArgs& a) {
  VocabPtr vocab = load_vocab(a.corpus_dir);
  DatasetPtr data = load_split(a.corpus_dir, vocab.get(), a.split, true);

  RerankerPtr reranker;
  if (!a.reranker_path.empty()) {
    nbr_reranker* r = nullptr;
    check(nbr_reranker_load(a.reranker_path.c_str(), &r), "loading reranker");
    reranker.reset(r);
  }
  PlsaPtr plsa;
  if (!a.plsa_path.empty()) {
    nbr_plsa* p = nullptr;
    check(nbr_plsa_load(a.plsa_path.c_str(), &p), "loading topic model");
    plsa.reset(p);
  }
  EncoderPtr encoder;
  if (!a.encoder_path.empty()) {
    nbr_encoder* e = nullptr;
    check(nbr_encoder_load(a.encoder_path.c_str(), &e), "loading encoder");
    encoder.reset(e);
  }

  double mu_pll = a.mu_pll, mu_am = a.mu_am, mu_lm = a.mu_lm;
  if (a.tune_mu) {
    if (a.method != "mbert") {
      std::fprintf(stderr, "nbr: --tune-mu only applies to --method mbert\n");
      return 1;
    }
    DatasetPtr dev = load_split(a.corpus_dir, vocab.get(), "dev", true);
    CStr weights;
    check(nbr_mbert_grid_search(encoder.get(), dev.get(), nullptr, &weights.ptr),
          "grid search");
    json w = json::parse(weights.str());
    mu_pll = w.at("mu_pll").get<double>();
    mu_am = w.at("mu_am").get<double>();
    mu_lm = w.at("mu_lm").get<double>();
    std::printf("tuned weights: mu_pll=%.2f mu_am=%.2f mu_lm=%.2f\n", mu_pll, mu_am, mu_lm);
  }

  ReportPtr report;
  {
    nbr_report* r = nullptr;
    check(nbr_report_new(&r), "creating report");
    report.reset(r);
  }
  json opts = {{"seed", a.seed}, {"mu_pll", mu_pll}, {"mu_am", mu_am}, {"mu_lm", mu_lm}};
  check(nbr_evaluate(data.get(), a.method.c_str(), reranker.get(), plsa.get(),
                     encoder.get(), opts.dump().c_str(), report.get()),
        "evaluation");

  CStr table;
  check(nbr_report_table(report.get(), &table.ptr), "formatting report");
  std::fputs(table.str().c_str(), stdout);

  if (!a.out_path.empty()) {
    CStr text;
    check(nbr_report_to_json(report.get(), &text.ptr), "serializing report");
    write_text_file(a.out_path, text.str());
    std::printf("wrote %s\n", a.out_path.c_str());
  }
  return 0;
}

struct CompareArgs {
  std::vector<std::string> report_paths;
  std::string out_path;
};

int run_compare(const CompareArgs& a) {
  ReportPtr merged;
  {
    nbr_report* r = nullptr;
    check(nbr_report_new(&r), "creating report");
    merged.reset(r);
  }
  for (const std::string& path : a.report_paths) {
    nbr_report* r = nullptr;
    check(nbr_report_from_json(read_text_file(path).c_str(), &r), "parsing report");
    ReportPtr loaded(r);
    check(nbr_report_merge(merged.get(), loaded.get()), "merging reports");
  }
  CStr table;
  check(nbr_report_table(merged.get(), &table.ptr), "formatting report");
  std::fputs(table.str().c_str(), stdout);
  if (!a.out_path.empty()) {
    CStr text;
    check(nbr_report_to_json(merged.get(), &text.ptr), "serializing report");
    write_text_file(a.out_path, text.str());
    std::printf("wrote %s\n", a.out_path.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"n-best list reranking toolkit"};
  app.set_version_flag("--version", std::string(nbr_version()));
  app.set_config("--config", "", "Read options from a TOML/INI file");
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  SynthArgs synth;
  CLI::App* s = app.add_subcommand("synth", "Generate a synthetic n-best corpus");
  s->add_option("--out", synth.out_dir, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--topics", synth.topics, "Latent topic count");
  s->add_option("--vocab", synth.vocab_size, "Content vocabulary size");
  s->add_option("--train", synth.train, "Training utterances");
  s->add_option("--dev", synth.dev, "Development utterances");
  s->add_option("--test", synth.test, "Test utterances");
  s->add_option("--nbest", synth.nbest, "Hypotheses per utterance");
  s->add_option("--corrupt-rate", synth.corrupt_rate, "Per-token corruption rate");
  s->add_option("--score-noise", synth.score_noise, "Score noise level");
  s->add_option("--clean-prob", synth.clean_prob, "Probability the reference survives");
  s->add_option("--len-min", synth.len_min, "Minimum reference length");
  s->add_option("--len-max", synth.len_max, "Maximum reference length");

  PretrainArgs pre;
  CLI::App* p = app.add_subcommand("pretrain", "Pretrain a masked-LM encoder on references");
  p->add_option("--corpus", pre.corpus_dir, "Corpus directory")->required();
  p->add_option("--out", pre.out_path, "Encoder checkpoint path");
  p->add_option("--seed", pre.seed, "Random seed");
  p->add_option("--epochs", pre.epochs, "Training epochs");
  p->add_option("--batch", pre.batch, "Batch size");
  p->add_option("--lr", pre.lr, "Adam learning rate");
  p->add_option("--hidden", pre.hidden, "Hidden width");
  p->add_option("--layers", pre.layers, "Transformer layers");
  p->add_option("--heads", pre.heads, "Attention heads");
  p->add_option("--ffn", pre.ffn, "Feed-forward width");
  p->add_option("--max-seq", pre.max_seq, "Maximum sequence length");
  p->add_option("--max-segments", pre.max_segments, "Maximum segment ids");
  p->add_option("--mask-prob", pre.mask_prob, "Masking probability");

  TrainPlsaArgs tp;
  CLI::App* tpl = app.add_subcommand("train-plsa", "Train a PLSA topic model on references");
  tpl->add_option("--corpus", tp.corpus_dir, "Corpus directory")->required();
  tpl->add_option("--out", tp.out_path, "Topic model checkpoint path");
  tpl->add_option("--topics", tp.topics, "Topic count");
  tpl->add_option("--iters", tp.iters, "EM iterations");
  tpl->add_option("--epsilon", tp.epsilon, "Smoothing constant");
  tpl->add_option("--fold-iters", tp.fold_iters, "Fold-in EM iterations");
  tpl->add_option("--seed", tp.seed, "Random seed");

  TrainRerankArgs tr;
  CLI::App* trr = app.add_subcommand("train-rerank", "Train a listwise reranker");
  trr->add_option("--corpus", tr.corpus_dir, "Corpus directory")->required();
  trr->add_option("--encoder", tr.encoder_path, "Pretrained encoder checkpoint")->required();
  trr->add_option("--out", tr.out_path, "Reranker checkpoint path");
  trr->add_option("--plsa", tr.plsa_path, "Topic model checkpoint (with --topic)");
  trr->add_flag("--topic,!--no-topic", tr.topic, "Append topic vectors to features");
  trr->add_option("--scores", tr.scores, "Score features: none, combined, split")
      ->check(CLI::IsMember({"none", "combined", "split"}));
  trr->add_option("--mode", tr.mode, "Encoding mode: joint or independent")
      ->check(CLI::IsMember({"joint", "independent"}));
  trr->add_flag("--fine-tune,!--no-fine-tune", tr.fine_tune, "Backprop into the encoder");
  trr->add_option("--epochs", tr.epochs, "Training epochs");
  trr->add_option("--lr", tr.lr, "Adam learning rate");
  trr->add_option("--head-hidden", tr.head_hidden, "Prediction head hidden width");
  trr->add_option("--lambda-am", tr.lambda_am, "Acoustic score weight (combined setting)");
  trr->add_option("--lambda-lm", tr.lambda_lm, "Language-model score weight (combined setting)");
  trr->add_option("--seed", tr.seed, "Random seed");

  FinetuneMlmArgs ft;
  CLI::App* f = app.add_subcommand("finetune-mlm", "Continue masked-LM training on task text");
  f->add_option("--corpus", ft.corpus_dir, "Corpus directory")->required();
  f->add_option("--encoder", ft.encoder_path, "Encoder checkpoint to start from")->required();
  f->add_option("--out", ft.out_path, "Output encoder checkpoint");
  f->add_option("--regime", ft.regime, "Text source: a (none), b (references), c (oracles)")
      ->check(CLI::IsMember({"a", "b", "c"}));
  f->add_option("--split", ft.split, "Dataset split to draw text from");
  f->add_option("--epochs", ft.epochs, "Training epochs");
  f->add_option("--batch", ft.batch, "Batch size");
  f->add_option("--lr", ft.lr, "Adam learning rate");
  f->add_option("--seed", ft.seed, "Random seed");

  RescorePllArgs rp;
  CLI::App* r = app.add_subcommand("rescore-pll", "Emit pseudo-log-likelihoods per hypothesis");
  r->add_option("--corpus", rp.corpus_dir, "Corpus directory")->required();
  r->add_option("--encoder", rp.encoder_path, "Encoder checkpoint")->required();
  r->add_option("--split", rp.split, "Dataset split");
  r->add_option("--out", rp.out_path, "Output JSONL path (default: stdout)");

  EvaluateArgs ev;
  CLI::App* e = app.add_subcommand("evaluate", "Score a selection method on a dataset split");
  e->add_option("--corpus", ev.corpus_dir, "Corpus directory")->required();
  e->add_option("--method", ev.method,
                "first, oracle, worst, random, pbert, tpbert, or mbert")
      ->required()
      ->check(CLI::IsMember({"first", "oracle", "worst", "random", "pbert", "tpbert", "mbert"}));
  e->add_option("--reranker", ev.reranker_path, "Reranker checkpoint (pbert/tpbert)");
  e->add_option("--plsa", ev.plsa_path, "Topic model checkpoint (tpbert)");
  e->add_option("--encoder", ev.encoder_path, "Encoder checkpoint (mbert)");
  e->add_option("--split", ev.split, "Dataset split");
  e->add_option("--out", ev.out_path, "Write the JSON report here");
  e->add_option("--seed", ev.seed, "Random seed (random method)");
  e->add_option("--mu-pll", ev.mu_pll, "Pseudo-log-likelihood weight (mbert)");
  e->add_option("--mu-am", ev.mu_am, "Acoustic score weight (mbert)");
  e->add_option("--mu-lm", ev.mu_lm, "Language-model score weight (mbert)");
  e->add_flag("--tune-mu", ev.tune_mu, "Grid-search the mbert weights on the dev split");

  CompareArgs cmp;
  CLI::App* c = app.add_subcommand("compare", "Merge evaluation reports and tabulate deltas");
  c->add_option("reports", cmp.report_paths, "Report JSON files")->required()->expected(-1);
  c->add_option("--out", cmp.out_path, "Write the merged report here");

  CLI11_PARSE(app, argc, argv);

  if (s->parsed()) return run_synth(synth);
  if (p->parsed()) return run_pretrain(pre);
  if (tpl->parsed()) return run_train_plsa(tp);
  if (trr->parsed()) return run_train_rerank(tr);
  if (f->parsed()) return run_finetune_mlm(ft);
  if (r->parsed()) return run_rescore_pll(rp);
  if (e->parsed()) return run_evaluate(ev);
  if (c->parsed()) return run_compare(cmp);
  return 0;
}
