#ifndef SOAPGRPO_H
#define SOAPGRPO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SoapgrpoStatus {
  SOAPGRPO_STATUS_OK = 0,
  SOAPGRPO_STATUS_INVALID_ARGUMENT = 1,
  SOAPGRPO_STATUS_INTEGRITY = 2,
  SOAPGRPO_STATUS_TRANSPORT = 3,
  SOAPGRPO_STATUS_IO = 4,
  SOAPGRPO_STATUS_PANIC = 5,
  SOAPGRPO_STATUS_NULL_POINTER = 6,
} SoapgrpoStatus;

typedef enum SoapgrpoSplit {
  SOAPGRPO_SPLIT_TRAIN = 0,
  SOAPGRPO_SPLIT_TEST = 1,
  SOAPGRPO_SPLIT_ALL = 2,
} SoapgrpoSplit;

/**
 * A synthetic corpus with its reference-claim cache.
 */
typedef struct SoapgrpoCorpus SoapgrpoCorpus;

/**
 * Inclusion-policy weights.
 */
typedef struct SoapgrpoPolicy SoapgrpoPolicy;

typedef struct SoapgrpoRewardConfig {
  double scale;
  double epsilon;
  bool gate_enabled;
  double gate_tau;
} SoapgrpoRewardConfig;

typedef struct SoapgrpoCorpusSpec {
  size_t n_dialogues;
  size_t facts_min;
  size_t facts_max;
  size_t vocabulary_size;
  double distractor_fraction;
  uint64_t seed;
} SoapgrpoCorpusSpec;

typedef struct SoapgrpoEvalScores {
  double precision;
  double recall;
  double f1;
} SoapgrpoEvalScores;

typedef struct SoapgrpoCorpusScores {
  size_t n;
  double precision;
  double recall;
  /**
   * Mean of per-note F1.
   */
  double macro_f1;
  /**
   * F1 of mean precision and mean recall.
   */
  double f1_of_means;
  double mean_reward;
} SoapgrpoCorpusScores;

typedef struct SoapgrpoTrainConfig {
  size_t k;
  double learning_rate;
  size_t epochs;
  size_t grad_accumulation;
  uint64_t seed;
  struct SoapgrpoRewardConfig reward;
  /**
   * When false, `max_updates` is ignored.
   */
  bool limit_updates;
  size_t max_updates;
} SoapgrpoTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *soapgrpo_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 */
void soapgrpo_string_free(char *s);

/**
 * Library version as a static string.
 */
const char *soapgrpo_version(void);

/**
 * Scale 10, epsilon 1e-8, gate off.
 */
struct SoapgrpoRewardConfig soapgrpo_reward_config_default(void);

enum SoapgrpoStatus soapgrpo_f1(double precision, double recall, double epsilon, double *f1_out);

/**
 * Reward for a note with the given precision and recall.
 */
enum SoapgrpoStatus soapgrpo_reward(double precision,
                                    double recall,
                                    const struct SoapgrpoRewardConfig *config,
                                    double *reward_out);

enum SoapgrpoStatus soapgrpo_reward_from_f1(double f1,
                                            const struct SoapgrpoRewardConfig *config,
                                            double *reward_out);

/**
 * Writes `n` advantages (reward minus group mean) and the mean.
 */
enum SoapgrpoStatus soapgrpo_advantages(const double *rewards,
                                        size_t n,
                                        double *advantages_out,
                                        double *baseline_out);

/**
 * 200 dialogues, 4 to 8 facts each, vocabulary 60, distractor fraction 0.4, seed 1.
 */
struct SoapgrpoCorpusSpec soapgrpo_corpus_spec_default(void);

enum SoapgrpoStatus soapgrpo_corpus_generate(const struct SoapgrpoCorpusSpec *spec,
                                             struct SoapgrpoCorpus **corpus_out);

/**
 * Loads a corpus file and its `.vocab` sidecar.
 */
enum SoapgrpoStatus soapgrpo_corpus_load(const char *path, struct SoapgrpoCorpus **corpus_out);

/**
 * Writes the corpus file and its `.vocab` sidecar.
 */
enum SoapgrpoStatus soapgrpo_corpus_save(const struct SoapgrpoCorpus *corpus, const char *path);

void soapgrpo_corpus_free(struct SoapgrpoCorpus *corpus);

/**
 * Number of dialogues, or 0 for a null handle.
 */
size_t soapgrpo_corpus_len(const struct SoapgrpoCorpus *corpus);

enum SoapgrpoStatus soapgrpo_corpus_dialogue_id(const struct SoapgrpoCorpus *corpus,
                                                size_t index,
                                                char **id_out);

/**
 * The dialogue rendered as `Speaker: text` lines.
 */
enum SoapgrpoStatus soapgrpo_corpus_dialogue_text(const struct SoapgrpoCorpus *corpus,
                                                  size_t index,
                                                  char **text_out);

/**
 * Scores `note` against dialogue `index` and its cached reference claims.
 */
enum SoapgrpoStatus soapgrpo_score_note(const struct SoapgrpoCorpus *corpus,
                                        size_t index,
                                        const char *note,
                                        double epsilon,
                                        struct SoapgrpoEvalScores *scores_out);

/**
 * Number of policy features.
 */
size_t soapgrpo_policy_feature_dim(void);

/**
 * Weights uniform in `[-scale, scale]`.
 */
enum SoapgrpoStatus soapgrpo_policy_new_random(double scale,
                                               uint64_t seed,
                                               struct SoapgrpoPolicy **policy_out);

/**
 * A policy from `dim` explicit weights; `dim` must equal the feature dimension.
 */
enum SoapgrpoStatus soapgrpo_policy_from_weights(const double *weights,
                                                 size_t dim,
                                                 struct SoapgrpoPolicy **policy_out);

enum SoapgrpoStatus soapgrpo_policy_load(const char *path, struct SoapgrpoPolicy **policy_out);

enum SoapgrpoStatus soapgrpo_policy_save(const struct SoapgrpoPolicy *policy, const char *path);

void soapgrpo_policy_free(struct SoapgrpoPolicy *policy);

/**
 * Copies the weights into `weights_out`, which must hold `capacity >= dim` values.
 */
enum SoapgrpoStatus soapgrpo_policy_weights(const struct SoapgrpoPolicy *policy,
                                            double *weights_out,
                                            size_t capacity);

/**
 * Greedy note for dialogue `index`.
 */
enum SoapgrpoStatus soapgrpo_greedy_note(const struct SoapgrpoCorpus *corpus,
                                         const struct SoapgrpoPolicy *policy,
                                         size_t index,
                                         char **note_out);

/**
 * Greedy-decoding scores over one split.
 */
enum SoapgrpoStatus soapgrpo_evaluate(const struct SoapgrpoCorpus *corpus,
                                      const struct SoapgrpoPolicy *policy,
                                      enum SoapgrpoSplit split,
                                      const struct SoapgrpoRewardConfig *reward_config,
                                      struct SoapgrpoCorpusScores *scores_out);

/**
 * k 3, learning rate 0.1, 3 epochs, accumulation 2, seed 0, gate off.
 */
struct SoapgrpoTrainConfig soapgrpo_train_config_default(void);

/**
 * Trains `policy` in place on the corpus's training split. Optional
 * out-parameters receive the number of updates applied and the final
 * training-split scores.
 */
enum SoapgrpoStatus soapgrpo_train(const struct SoapgrpoCorpus *corpus,
                                   struct SoapgrpoPolicy *policy,
                                   const struct SoapgrpoTrainConfig *config,
                                   size_t *updates_out,
                                   struct SoapgrpoCorpusScores *scores_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOAPGRPO_H */
