#ifndef NBR_H
#define NBR_H

/* C interface to the n-best reranking toolkit.
 *
 * All functions return an nbr_status code; 0 means success. On failure,
 * nbr_last_error() returns a thread-local message describing what went
 * wrong. Objects are opaque handles created and destroyed by the paired
 * _free function. Strings returned through char** outputs are heap-owned
 * and must be released with nbr_string_free().
 *
 * Configuration-heavy calls take JSON option strings so the C surface stays
 * small; unknown keys are rejected where noted, missing keys fall back to
 * the library defaults.
 */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define NBR_API __declspec(dllexport)
#else
#define NBR_API __attribute__((visibility("default")))
#endif

typedef enum nbr_status {
  NBR_OK = 0,
  NBR_ERR_INVALID_ARGUMENT = 1, /* value outside its documented range */
  NBR_ERR_IO = 2,               /* file missing, unreadable, short write */
  NBR_ERR_PARSE = 3,            /* malformed JSON/JSONL/checkpoint */
  NBR_ERR_STATE = 4,            /* structural precondition violated */
  NBR_ERR_NUMERIC = 5,          /* divergence or non-finite values */
  NBR_ERR_INTERNAL = 6          /* unexpected failure */
} nbr_status;

typedef struct nbr_vocab nbr_vocab;
typedef struct nbr_dataset nbr_dataset;
typedef struct nbr_encoder nbr_encoder;
typedef struct nbr_plsa nbr_plsa;
typedef struct nbr_reranker nbr_reranker;
typedef struct nbr_report nbr_report;

/* Library version string, e.g. "0.1.0". Static storage; do not free. */
NBR_API const char* nbr_version(void);

/* Message for the most recent failure on this thread. Static storage. */
NBR_API const char* nbr_last_error(void);

/* Releases a string returned through a char** output parameter. */
NBR_API void nbr_string_free(char* s);

/* ---- vocabulary ---- */

NBR_API nbr_status nbr_vocab_load(const char* path, nbr_vocab** out);
NBR_API void nbr_vocab_free(nbr_vocab* vocab);
NBR_API nbr_status nbr_vocab_size(const nbr_vocab* vocab, int32_t* out);
NBR_API nbr_status nbr_vocab_fingerprint(const nbr_vocab* vocab, uint64_t* out);

/* ---- datasets ---- */

/* Loads JSONL n-best lists. split may be "train"/"dev"/"test" or NULL for
 * everything; the filter is ignored for files without split tags.
 * require_references != 0 makes reference-less lines an error. */
NBR_API nbr_status nbr_dataset_load(const char* path, const nbr_vocab* vocab, const char* split,
                                    int require_references, nbr_dataset** out);
NBR_API void nbr_dataset_free(nbr_dataset* dataset);
NBR_API nbr_status nbr_dataset_size(const nbr_dataset* dataset, int64_t* out);
NBR_API nbr_status nbr_dataset_fingerprint(const nbr_dataset* dataset, uint64_t* out);

/* Writes corpus.jsonl and vocab.txt for a synthetic n-best corpus into
 * out_dir (created if missing). spec_json keys (all optional): topics,
 * vocab_size, train_lists, dev_lists, test_lists, nbest, corrupt_rate,
 * sub_frac, del_frac, ins_frac, score_noise, clean_prob, len_min, len_max,
 * bigram_successors. Unknown keys are an error. */
NBR_API nbr_status nbr_synth_write(const char* spec_json, uint64_t seed, const char* out_dir);

/* ---- encoder ---- */

/* config_json keys (all optional): vocab_size, hidden, layers, heads, ffn,
 * max_seq, max_segments, mask_prob, action_mask, action_random, action_keep.
 * vocab_size defaults to the supplied vocabulary's size. */
NBR_API nbr_status nbr_encoder_init(const char* config_json, const nbr_vocab* vocab,
                                    uint64_t seed, nbr_encoder** out);
NBR_API nbr_status nbr_encoder_load(const char* path, nbr_encoder** out);
NBR_API nbr_status nbr_encoder_save(const nbr_encoder* encoder, const char* path);
NBR_API void nbr_encoder_free(nbr_encoder* encoder);
NBR_API nbr_status nbr_encoder_vocab_fingerprint(const nbr_encoder* encoder, uint64_t* out);

/* Masked-LM training on the dataset's reference transcripts. opts_json keys
 * (optional): epochs, batch_size, lr. history_json (optional) receives
 * {"epoch_loss": [...]}. */
NBR_API nbr_status nbr_encoder_pretrain(nbr_encoder* encoder, const nbr_dataset* dataset,
                                        const char* opts_json, uint64_t seed,
                                        char** history_json);

/* Continues masked-LM training per regime: "a" leaves the encoder untouched,
 * "b" trains on references, "c" on each list's oracle hypothesis. */
NBR_API nbr_status nbr_encoder_finetune_mlm(nbr_encoder* encoder, const nbr_dataset* dataset,
                                            const char* regime, const char* opts_json,
                                            uint64_t seed, char** history_json);

/* Mean masked cross-entropy / masked-prediction accuracy over the dataset's
 * references under a fixed masking realization. */
NBR_API nbr_status nbr_encoder_mlm_loss(const nbr_encoder* encoder, const nbr_dataset* dataset,
                                        uint64_t mask_seed, double* out);
NBR_API nbr_status nbr_encoder_mlm_accuracy(const nbr_encoder* encoder,
                                            const nbr_dataset* dataset, uint64_t mask_seed,
                                            double* out);

/* Pseudo-log-likelihood rescoring: writes one JSON object per utterance
 * ({"utt_id": ..., "pll": [...]}) joined by newlines into *jsonl_out. */
NBR_API nbr_status nbr_rescore_pll(const nbr_encoder* encoder, const nbr_dataset* dataset,
                                   char** jsonl_out);

/* ---- topic model ---- */

/* EM training on the dataset's reference transcripts. */
NBR_API nbr_status nbr_plsa_train(const nbr_dataset* dataset, const nbr_vocab* vocab,
                                  int32_t topics, int32_t iterations, double epsilon,
                                  int32_t fold_in_iterations, uint64_t seed, nbr_plsa** out,
                                  char** history_json);
NBR_API nbr_status nbr_plsa_load(const char* path, nbr_plsa** out);
NBR_API nbr_status nbr_plsa_save(const nbr_plsa* plsa, const char* path);
NBR_API void nbr_plsa_free(nbr_plsa* plsa);
NBR_API nbr_status nbr_plsa_topics(const nbr_plsa* plsa, int32_t* out);

/* ---- reranker ---- */

/* Listwise training against the oracle labels. The encoder handle is not
 * modified; fine-tuning updates the copy embedded in the new reranker.
 * opts_json keys (optional): epochs, lr, head_hidden, scores
 * ("none"/"combined"/"split"), topic (bool), mode ("joint"/"independent"),
 * fine_tune (bool), lambda_am, lambda_lm. dev and plsa may be NULL; plsa is
 * required when topic is true. history_json (optional) receives
 * {"epoch_loss": [...], "dev_accuracy": [...]}. */
NBR_API nbr_status nbr_reranker_train(const nbr_encoder* encoder, const nbr_dataset* train,
                                      const nbr_dataset* dev, const nbr_plsa* plsa,
                                      const char* opts_json, uint64_t seed, nbr_reranker** out,
                                      char** history_json);
NBR_API nbr_status nbr_reranker_load(const char* path, nbr_reranker** out);
NBR_API nbr_status nbr_reranker_save(const nbr_reranker* reranker, const char* path);
NBR_API void nbr_reranker_free(nbr_reranker* reranker);

/* ---- evaluation ---- */

NBR_API nbr_status nbr_report_new(nbr_report** out);
NBR_API void nbr_report_free(nbr_report* report);

/* Evaluates one selection method over the dataset and appends the run to
 * the report. Methods: "first", "oracle", "worst", "random" (opts: seed),
 * "pbert"/"tpbert" (reranker required; plsa required when the reranker uses
 * topics), "mbert" (encoder required; opts: mu_pll, mu_am, mu_lm). */
NBR_API nbr_status nbr_evaluate(const nbr_dataset* dataset, const char* method,
                                const nbr_reranker* reranker, const nbr_plsa* plsa,
                                const nbr_encoder* encoder, const char* opts_json,
                                nbr_report* report);

/* Dev-set grid search for the mbert interpolation weights. grid_json is a
 * JSON array of candidate values (default [0, 0.25, 0.5, 0.75, 1]);
 * weights_json receives {"mu_pll": ..., "mu_am": ..., "mu_lm": ...}. */
NBR_API nbr_status nbr_mbert_grid_search(const nbr_encoder* encoder, const nbr_dataset* dev,
                                         const char* grid_json, char** weights_json);

/* Merges the runs of src into dst (same dataset fingerprint required). */
NBR_API nbr_status nbr_report_merge(nbr_report* dst, const nbr_report* src);
/* Parses a report previously produced by nbr_report_to_json. */
NBR_API nbr_status nbr_report_from_json(const char* json, nbr_report** out);
NBR_API nbr_status nbr_report_to_json(const nbr_report* report, char** json_out);
NBR_API nbr_status nbr_report_table(const nbr_report* report, char** table_out);
NBR_API nbr_status nbr_report_run_count(const nbr_report* report, int32_t* out);
/* WER (percent) and oracle-selection accuracy of run `index`. */
NBR_API nbr_status nbr_report_run_stats(const nbr_report* report, int32_t index,
                                        char** method_out, double* wer_out, double* sel_acc_out);

#ifdef __cplusplus
}
#endif

#endif /* NBR_H */
