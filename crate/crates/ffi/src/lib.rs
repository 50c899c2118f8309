//! C ABI for soapgrpo.
//!
//! Objects are opaque handles created by `*_new`/`*_generate`/`*_load` and
//! released by the matching `*_free`. Every fallible call returns a
//! [`SoapgrpoStatus`]; on failure the thread's last error message is
//! available from [`soapgrpo_last_error_message`]. Strings returned through
//! out-parameters are owned by the caller and released with
//! [`soapgrpo_string_free`].
//!
//! Scoring and training here always use the deterministic rule-based claim
//! extractor and entailment checker.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use soapgrpo::claims::{OracleChecker, RuleExtractor};
use soapgrpo::corpus::{self, Corpus, CorpusSpec, Split};
use soapgrpo::grpo::{self, TrainConfig};
use soapgrpo::policy::{self, PolicyParams, FEATURE_DIM};
use soapgrpo::reward::{
    self, build_cache_in_memory, ClaimCache, CorpusScores, EvalScores, RewardConfig,
};
use soapgrpo::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoapgrpoStatus {
    Ok = 0,
    InvalidArgument = 1,
    Integrity = 2,
    Transport = 3,
    Io = 4,
    Panic = 5,
    NullPointer = 6,
}

impl From<&Error> for SoapgrpoStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Usage(_) | Error::Unsupported(_) => {
                SoapgrpoStatus::InvalidArgument
            }
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::CacheMiss(_)
            | Error::Stale { .. }
            | Error::NonFinite { .. } => SoapgrpoStatus::Integrity,
            Error::Io { .. } => SoapgrpoStatus::Io,
            Error::Transport { .. }
            | Error::Request { .. }
            | Error::Validation { .. }
            | Error::PartialFailure { .. }
            | Error::Extraction(_) => SoapgrpoStatus::Transport,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', "\\0")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SoapgrpoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SoapgrpoStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SoapgrpoStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics to a status code.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> SoapgrpoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SoapgrpoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal panic: {msg}"));
            SoapgrpoStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Failure(SoapgrpoStatus::NullPointer, format!("`{what}` is null")))
}

unsafe fn nonnull_mut<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| Failure(SoapgrpoStatus::NullPointer, format!("`{what}` is null")))
}

unsafe fn out<T>(p: *mut T, what: &str, value: T) -> FfiResult<()> {
    if p.is_null() {
        return Err(Failure(
            SoapgrpoStatus::NullPointer,
            format!("`{what}` is null"),
        ));
    }
    p.write(value);
    Ok(())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(
            SoapgrpoStatus::NullPointer,
            format!("`{what}` is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> FfiResult<PathBuf> {
    str_arg(p, what).map(PathBuf::from)
}

fn owned_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s).map(CString::into_raw).map_err(|_| {
        Failure(
            SoapgrpoStatus::Integrity,
            "string contains a nul byte".into(),
        )
    })
}

/// The message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn soapgrpo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn soapgrpo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SoapgrpoRewardConfig {
    pub scale: f64,
    pub epsilon: f64,
    pub gate_enabled: bool,
    pub gate_tau: f64,
}

impl From<&SoapgrpoRewardConfig> for RewardConfig {
    fn from(c: &SoapgrpoRewardConfig) -> Self {
        RewardConfig {
            scale: c.scale,
            epsilon: c.epsilon,
            gate_tau: c.gate_enabled.then_some(c.gate_tau),
        }
    }
}

/// Scale 10, epsilon 1e-8, gate off.
#[no_mangle]
pub extern "C" fn soapgrpo_reward_config_default() -> SoapgrpoRewardConfig {
    let d = RewardConfig::default();
    SoapgrpoRewardConfig {
        scale: d.scale,
        epsilon: d.epsilon,
        gate_enabled: false,
        gate_tau: RewardConfig::DEFAULT_GATE,
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SoapgrpoEvalScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<EvalScores> for SoapgrpoEvalScores {
    fn from(s: EvalScores) -> Self {
        Self {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SoapgrpoCorpusScores {
    pub n: usize,
    pub precision: f64,
    pub recall: f64,
    /// Mean of per-note F1.
    pub macro_f1: f64,
    /// F1 of mean precision and mean recall.
    pub f1_of_means: f64,
    pub mean_reward: f64,
}

fn corpus_scores(s: &CorpusScores, mean_reward: f64) -> SoapgrpoCorpusScores {
    SoapgrpoCorpusScores {
        n: s.n,
        precision: s.precision,
        recall: s.recall,
        macro_f1: s.macro_f1,
        f1_of_means: s.f1_of_means,
        mean_reward,
    }
}

#[no_mangle]
pub unsafe extern "C" fn soapgrpo_f1(
    precision: f64,
    recall: f64,
    epsilon: f64,
    f1_out: *mut f64,
) -> SoapgrpoStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&precision) || !(0.0..=1.0).contains(&recall) {
            return Err(invalid(format!(
                "precision {precision} and recall {recall} must lie in [0, 1]"
            )));
        }
        out(
            f1_out,
            "f1_out",
            reward::f1_score(precision, recall, epsilon),
        )
    })
}

/// Reward for a note with the given precision and recall.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_reward(
    precision: f64,
    recall: f64,
    config: *const SoapgrpoRewardConfig,
    reward_out: *mut f64,
) -> SoapgrpoStatus {
    guard(|| {
        let cfg = RewardConfig::from(nonnull(config, "config")?);
        cfg.validate()?;
        if !(0.0..=1.0).contains(&precision) || !(0.0..=1.0).contains(&recall) {
            return Err(invalid(format!(
                "precision {precision} and recall {recall} must lie in [0, 1]"
            )));
        }
        let scores = EvalScores::from_rates(precision, recall, cfg.epsilon);
        out(
            reward_out,
            "reward_out",
            reward::compute_reward(&scores, &cfg),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn soapgrpo_reward_from_f1(
    f1: f64,
    config: *const SoapgrpoRewardConfig,
    reward_out: *mut f64,
) -> SoapgrpoStatus {
    guard(|| {
        let cfg = RewardConfig::from(nonnull(config, "config")?);
        cfg.validate()?;
        out(reward_out, "reward_out", reward::reward_from_f1(f1, &cfg))
    })
}

/// Writes `n` advantages (reward minus group mean) and the mean.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_advantages(
    rewards: *const f64,
    n: usize,
    advantages_out: *mut f64,
    baseline_out: *mut f64,
) -> SoapgrpoStatus {
    guard(|| {
        if rewards.is_null() || advantages_out.is_null() {
            return Err(Failure(
                SoapgrpoStatus::NullPointer,
                "`rewards` or `advantages_out` is null".into(),
            ));
        }
        let rewards = std::slice::from_raw_parts(rewards, n);
        let (baseline, adv) = grpo::compute_advantages(rewards)?;
        std::slice::from_raw_parts_mut(advantages_out, n).copy_from_slice(&adv);
        if !baseline_out.is_null() {
            baseline_out.write(baseline);
        }
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SoapgrpoCorpusSpec {
    pub n_dialogues: usize,
    pub facts_min: usize,
    pub facts_max: usize,
    pub vocabulary_size: usize,
    pub distractor_fraction: f64,
    pub seed: u64,
}

impl From<&SoapgrpoCorpusSpec> for CorpusSpec {
    fn from(s: &SoapgrpoCorpusSpec) -> Self {
        CorpusSpec {
            n_dialogues: s.n_dialogues,
            facts_min: s.facts_min,
            facts_max: s.facts_max,
            vocabulary_size: s.vocabulary_size,
            distractor_fraction: s.distractor_fraction,
            seed: s.seed,
        }
    }
}

/// 200 dialogues, 4 to 8 facts each, vocabulary 60, distractor fraction 0.4, seed 1.
#[no_mangle]
pub extern "C" fn soapgrpo_corpus_spec_default() -> SoapgrpoCorpusSpec {
    let d = CorpusSpec::default();
    SoapgrpoCorpusSpec {
        n_dialogues: d.n_dialogues,
        facts_min: d.facts_min,
        facts_max: d.facts_max,
        vocabulary_size: d.vocabulary_size,
        distractor_fraction: d.distractor_fraction,
        seed: d.seed,
    }
}

/// A synthetic corpus with its reference-claim cache.
pub struct SoapgrpoCorpus {
    corpus: Corpus,
    cache: ClaimCache,
}

impl SoapgrpoCorpus {
    fn new(corpus: Corpus) -> FfiResult<Self> {
        let cache = build_cache_in_memory(&corpus.dialogues, &RuleExtractor)?;
        Ok(Self { corpus, cache })
    }

    fn dialogue(&self, index: usize) -> FfiResult<&corpus::Dialogue> {
        self.corpus.dialogues.get(index).ok_or_else(|| {
            invalid(format!(
                "dialogue index {index} out of range for {} dialogues",
                self.corpus.dialogues.len()
            ))
        })
    }
}

unsafe fn boxed_out<T>(handle_out: *mut *mut T, value: T) -> FfiResult<()> {
    out(handle_out, "handle_out", Box::into_raw(Box::new(value)))
}

#[no_mangle]
pub unsafe extern "C" fn soapgrpo_corpus_generate(
    spec: *const SoapgrpoCorpusSpec,
    corpus_out: *mut *mut SoapgrpoCorpus,
) -> SoapgrpoStatus {
    guard(|| {
        let spec = CorpusSpec::from(nonnull(spec, "spec")?);
        let c = SoapgrpoCorpus::new(corpus::generate_corpus(&spec)?)?;
        boxed_out(corpus_out, c)
    })
}

/// Loads a corpus file and its `.vocab` sidecar.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_corpus_load(
    path: *const c_char,
    corpus_out: *mut *mut SoapgrpoCorpus,
) -> SoapgrpoStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let c = SoapgrpoCorpus::new(Corpus::load(&path)?)?;
        boxed_out(corpus_out, c)
    })
}

/// Writes the corpus file and its `.vocab` sidecar.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_corpus_save(
    corpus: *const SoapgrpoCorpus,
    path: *const c_char,
) -> SoapgrpoStatus {
    guard(|| {
        let c = nonnull(corpus, "corpus")?;
        c.corpus.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn soapgrpo_corpus_free(corpus: *mut SoapgrpoCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Number of dialogues, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_corpus_len(corpus: *const SoapgrpoCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.corpus.dialogues.len())
}

#[no_mangle]
pub unsafe extern "C" fn soapgrpo_corpus_dialogue_id(
    corpus: *const SoapgrpoCorpus,
    index: usize,
    id_out: *mut *mut c_char,
) -> SoapgrpoStatus {
    guard(|| {
        let d = nonnull(corpus, "corpus")?.dialogue(index)?;
        out(id_out, "id_out", owned_string(d.id.clone())?)
    })
}

/// The dialogue rendered as `Speaker: text` lines.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_corpus_dialogue_text(
    corpus: *const SoapgrpoCorpus,
    index: usize,
    text_out: *mut *mut c_char,
) -> SoapgrpoStatus {
    guard(|| {
        let d = nonnull(corpus, "corpus")?.dialogue(index)?;
        out(text_out, "text_out", owned_string(d.text())?)
    })
}

/// Scores `note` against dialogue `index` and its cached reference claims.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_score_note(
    corpus: *const SoapgrpoCorpus,
    index: usize,
    note: *const c_char,
    epsilon: f64,
    scores_out: *mut SoapgrpoEvalScores,
) -> SoapgrpoStatus {
    guard(|| {
        let c = nonnull(corpus, "corpus")?;
        let d = c.dialogue(index)?;
        let note = str_arg(note, "note")?;
        let s = reward::score_note(
            c.cache.lookup(d)?,
            note,
            &d.text(),
            &RuleExtractor,
            &OracleChecker,
            epsilon,
        )?;
        out(scores_out, "scores_out", s.into())
    })
}

/// Inclusion-policy weights.
pub struct SoapgrpoPolicy {
    params: PolicyParams,
}

/// Number of policy features.
#[no_mangle]
pub extern "C" fn soapgrpo_policy_feature_dim() -> usize {
    FEATURE_DIM
}

/// Weights uniform in `[-scale, scale]`.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_policy_new_random(
    scale: f64,
    seed: u64,
    policy_out: *mut *mut SoapgrpoPolicy,
) -> SoapgrpoStatus {
    guard(|| {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(invalid(format!(
                "scale {scale} must be finite and non-negative"
            )));
        }
        boxed_out(
            policy_out,
            SoapgrpoPolicy {
                params: PolicyParams::random(FEATURE_DIM, scale, seed),
            },
        )
    })
}

/// A policy from `dim` explicit weights; `dim` must equal the feature dimension.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_policy_from_weights(
    weights: *const f64,
    dim: usize,
    policy_out: *mut *mut SoapgrpoPolicy,
) -> SoapgrpoStatus {
    guard(|| {
        if weights.is_null() {
            return Err(Failure(
                SoapgrpoStatus::NullPointer,
                "`weights` is null".into(),
            ));
        }
        if dim != FEATURE_DIM {
            return Err(invalid(format!(
                "expected {FEATURE_DIM} weights, got {dim}"
            )));
        }
        let params = PolicyParams {
            weights: std::slice::from_raw_parts(weights, dim).to_vec(),
        };
        if !params.is_finite() {
            return Err(invalid("weights must be finite"));
        }
        boxed_out(policy_out, SoapgrpoPolicy { params })
    })
}

#[no_mangle]
pub unsafe extern "C" fn soapgrpo_policy_load(
    path: *const c_char,
    policy_out: *mut *mut SoapgrpoPolicy,
) -> SoapgrpoStatus {
    guard(|| {
        let params = PolicyParams::load(Path::new(&path_arg(path, "path")?))?;
        boxed_out(policy_out, SoapgrpoPolicy { params })
    })
}

#[no_mangle]
pub unsafe extern "C" fn soapgrpo_policy_save(
    policy: *const SoapgrpoPolicy,
    path: *const c_char,
) -> SoapgrpoStatus {
    guard(|| {
        let p = nonnull(policy, "policy")?;
        p.params.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn soapgrpo_policy_free(policy: *mut SoapgrpoPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Copies the weights into `weights_out`, which must hold `capacity >= dim` values.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_policy_weights(
    policy: *const SoapgrpoPolicy,
    weights_out: *mut f64,
    capacity: usize,
) -> SoapgrpoStatus {
    guard(|| {
        let w = &nonnull(policy, "policy")?.params.weights;
        if weights_out.is_null() {
            return Err(Failure(
                SoapgrpoStatus::NullPointer,
                "`weights_out` is null".into(),
            ));
        }
        if capacity < w.len() {
            return Err(invalid(format!(
                "capacity {capacity} < {} weights",
                w.len()
            )));
        }
        std::slice::from_raw_parts_mut(weights_out, w.len()).copy_from_slice(w);
        Ok(())
    })
}

/// Greedy note for dialogue `index`.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_greedy_note(
    corpus: *const SoapgrpoCorpus,
    policy: *const SoapgrpoPolicy,
    index: usize,
    note_out: *mut *mut c_char,
) -> SoapgrpoStatus {
    guard(|| {
        let c = nonnull(corpus, "corpus")?;
        let p = nonnull(policy, "policy")?;
        let d = c.dialogue(index)?;
        let candidates = policy::candidate_facts(d, &c.corpus);
        let t = policy::greedy_note(&p.params, &d.id, &candidates);
        out(note_out, "note_out", owned_string(t.note.rendered_text)?)
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoapgrpoSplit {
    Train = 0,
    Test = 1,
    All = 2,
}

/// Greedy-decoding scores over one split.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_evaluate(
    corpus: *const SoapgrpoCorpus,
    policy: *const SoapgrpoPolicy,
    split: SoapgrpoSplit,
    reward_config: *const SoapgrpoRewardConfig,
    scores_out: *mut SoapgrpoCorpusScores,
) -> SoapgrpoStatus {
    guard(|| {
        let c = nonnull(corpus, "corpus")?;
        let p = nonnull(policy, "policy")?;
        let cfg = RewardConfig::from(nonnull(reward_config, "reward_config")?);
        cfg.validate()?;
        let dialogues = match split {
            SoapgrpoSplit::Train => c.corpus.split(Split::Train),
            SoapgrpoSplit::Test => c.corpus.split(Split::Test),
            SoapgrpoSplit::All => c.corpus.dialogues.iter().collect(),
        };
        let e = grpo::evaluate(
            &p.params,
            &c.corpus,
            &dialogues,
            &c.cache,
            &RuleExtractor,
            &OracleChecker,
            &cfg,
        )?;
        out(
            scores_out,
            "scores_out",
            corpus_scores(&e.scores, e.mean_reward),
        )
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SoapgrpoTrainConfig {
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_accumulation: usize,
    pub seed: u64,
    pub reward: SoapgrpoRewardConfig,
    /// When false, `max_updates` is ignored.
    pub limit_updates: bool,
    pub max_updates: usize,
}

/// k 3, learning rate 0.1, 3 epochs, accumulation 2, seed 0, gate off.
#[no_mangle]
pub extern "C" fn soapgrpo_train_config_default() -> SoapgrpoTrainConfig {
    let d = TrainConfig::default();
    SoapgrpoTrainConfig {
        k: d.k,
        learning_rate: d.learning_rate,
        epochs: d.epochs,
        grad_accumulation: d.grad_accumulation,
        seed: d.seed,
        reward: soapgrpo_reward_config_default(),
        limit_updates: false,
        max_updates: 0,
    }
}

/// Trains `policy` in place on the corpus's training split. Optional
/// out-parameters receive the number of updates applied and the final
/// training-split scores.
#[no_mangle]
pub unsafe extern "C" fn soapgrpo_train(
    corpus: *const SoapgrpoCorpus,
    policy: *mut SoapgrpoPolicy,
    config: *const SoapgrpoTrainConfig,
    updates_out: *mut usize,
    scores_out: *mut SoapgrpoCorpusScores,
) -> SoapgrpoStatus {
    guard(|| {
        let c = nonnull(corpus, "corpus")?;
        let p = nonnull_mut(policy, "policy")?;
        let cfg = nonnull(config, "config")?;
        let train = TrainConfig {
            k: cfg.k,
            learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
            grad_accumulation: cfg.grad_accumulation,
            seed: cfg.seed,
            reward: RewardConfig::from(&cfg.reward),
            max_updates: cfg.limit_updates.then_some(cfg.max_updates),
            eval_every: None,
        };
        let (params, metrics) = grpo::train(
            p.params.clone(),
            &c.corpus,
            &c.cache,
            &RuleExtractor,
            &OracleChecker,
            &train,
        )?;
        p.params = params;
        if !updates_out.is_null() {
            updates_out.write(metrics.updates.len());
        }
        if !scores_out.is_null() {
            let s = match metrics.epochs.last() {
                Some(e) => corpus_scores(&e.scores, e.mean_reward),
                None => {
                    let ds = grpo::training_dialogues(&c.corpus);
                    let e = grpo::evaluate(
                        &p.params,
                        &c.corpus,
                        &ds,
                        &c.cache,
                        &RuleExtractor,
                        &OracleChecker,
                        &train.reward,
                    )?;
                    corpus_scores(&e.scores, e.mean_reward)
                }
            };
            scores_out.write(s);
        }
        Ok(())
    })
}
