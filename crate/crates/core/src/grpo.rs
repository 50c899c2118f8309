//! Group-relative policy optimization over the inclusion policy.
//!
//! Each visited dialogue gets `k` sampled notes. Their rewards are centered on
//! the group mean, and the ascent direction on
//! `(1/k) Σ_j log π(τ_j | x) (r_j − r̄)` is accumulated over
//! `grad_accumulation` dialogues before each plain gradient step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::{ClaimExtractor, ClaimSet, EntailmentChecker};
use crate::corpus::{Corpus, Dialogue, Split};
use crate::error::{Error, Result};
use crate::policy::{self, FactCandidate, PolicyParams, Trajectory};
use crate::reward::{self, ClaimCache, CorpusScores, EvalScores, RewardConfig};

/// Returns the group mean and each reward's deviation from it.
pub fn compute_advantages(rewards: &[f64]) -> Result<(f64, Vec<f64>)> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "group baseline needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok((baseline, rewards.iter().map(|r| r - baseline).collect()))
}

#[derive(Clone, Debug)]
pub struct GroupSample {
    pub dialogue_id: String,
    pub trajectories: Vec<Trajectory>,
    pub scores: Vec<EvalScores>,
    pub rewards: Vec<f64>,
    pub baseline: f64,
    pub advantages: Vec<f64>,
}

impl GroupSample {
    pub fn new(
        dialogue_id: &str,
        trajectories: Vec<Trajectory>,
        scores: Vec<EvalScores>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if trajectories.len() != rewards.len() || scores.len() != rewards.len() {
            return Err(Error::Integrity(format!(
                "group for `{dialogue_id}` has {} trajectories, {} scores and {} rewards",
                trajectories.len(),
                scores.len(),
                rewards.len()
            )));
        }
        let (baseline, advantages) = compute_advantages(&rewards)?;
        Ok(Self {
            dialogue_id: dialogue_id.to_string(),
            trajectories,
            scores,
            rewards,
            baseline,
            advantages,
        })
    }

    pub fn k(&self) -> usize {
        self.rewards.len()
    }

    pub fn all_advantages_zero(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }
}

/// `(1/k) Σ_j ∇ log π(τ_j) · A_j`, the ascent direction of the group objective.
pub fn grpo_gradient(
    params: &PolicyParams,
    group: &GroupSample,
    candidates: &[FactCandidate],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.dim()];
    for (t, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let g = policy::grad_logprob(params, &t.decisions, candidates)?;
        if g.len() != grad.len() {
            return Err(Error::Integrity(format!(
                "gradient dimension {} != policy dimension {}",
                g.len(),
                grad.len()
            )));
        }
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi * adv;
        }
    }
    let k = group.k() as f64;
    grad.iter_mut().for_each(|g| *g /= k);
    Ok(grad)
}

/// The group objective at fixed advantages.
pub fn grpo_surrogate(
    params: &PolicyParams,
    group: &GroupSample,
    candidates: &[FactCandidate],
) -> Result<f64> {
    let mut total = 0.0;
    for (t, &adv) in group.trajectories.iter().zip(&group.advantages) {
        total += policy::logprob(params, &t.decisions, candidates)? * adv;
    }
    Ok(total / group.k() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub grad_accumulation: usize,
    pub seed: u64,
    pub reward: RewardConfig,
    pub max_updates: Option<usize>,
    /// Greedy evaluation on the training dialogues every this many updates
    /// (and once before the first update).
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            learning_rate: 0.1,
            epochs: 3,
            grad_accumulation: 2,
            seed: 0,
            reward: RewardConfig::default(),
            max_updates: None,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    /// Default epochs when reward gating is enabled.
    pub const GATED_EPOCHS: usize = 2;

    pub fn gated(tau: f64) -> Self {
        Self {
            epochs: Self::GATED_EPOCHS,
            reward: RewardConfig::gated(tau),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k = {} but the baseline needs k >= 2",
                self.k
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.grad_accumulation == 0 {
            return Err(Error::Config(
                "epochs and grad_accumulation must be positive".into(),
            ));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.reward.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub epoch: usize,
    pub groups: usize,
    pub skipped_groups: usize,
    pub mean_reward: f64,
    pub mean_f1: f64,
    pub grad_norm: f64,
    pub gated_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updates: usize,
    pub scores: CorpusScores,
    pub mean_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub update: usize,
    pub scores: CorpusScores,
    pub mean_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Update(UpdateRecord),
    Eval(EvalRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    pub updates: Vec<UpdateRecord>,
    pub evals: Vec<EvalRecord>,
    pub epochs: Vec<EpochRecord>,
    /// All records in emission order.
    pub log: Vec<MetricRecord>,
}

impl TrainMetrics {
    fn push(&mut self, record: MetricRecord) {
        match &record {
            MetricRecord::Update(r) => self.updates.push(r.clone()),
            MetricRecord::Eval(r) => self.evals.push(r.clone()),
            MetricRecord::Epoch(r) => self.epochs.push(r.clone()),
        }
        self.log.push(record);
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("metric record serializes"));
            out.push('\n');
        }
        out
    }

    /// First update index whose evaluation reached `f1` (macro F1).
    pub fn first_update_reaching(&self, f1: f64) -> Option<usize> {
        self.evals
            .iter()
            .find(|e| e.scores.macro_f1 >= f1)
            .map(|e| e.update)
    }
}

/// Hooks invoked by [`train_with`].
pub trait TrainObserver {
    fn on_record(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _params: &PolicyParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// A dialogue with everything scoring needs, computed once.
pub struct PreparedDialogue<'a> {
    pub dialogue: &'a Dialogue,
    pub text: String,
    pub refs: &'a ClaimSet,
    pub candidates: Vec<FactCandidate>,
}

pub fn prepare<'a>(
    dialogues: &[&'a Dialogue],
    corpus: &Corpus,
    cache: &'a ClaimCache,
) -> Result<Vec<PreparedDialogue<'a>>> {
    dialogues
        .iter()
        .map(|&d| {
            Ok(PreparedDialogue {
                dialogue: d,
                text: d.text(),
                refs: cache.lookup(d)?,
                candidates: policy::candidate_facts(d, corpus),
            })
        })
        .collect()
}

/// Training dialogues: the train split, or every dialogue when the corpus
/// carries no split labels.
pub fn training_dialogues(corpus: &Corpus) -> Vec<&Dialogue> {
    if corpus.dialogues.iter().any(|d| d.split.is_some()) {
        corpus.split(Split::Train)
    } else {
        corpus.dialogues.iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: CorpusScores,
    pub per_dialogue: Vec<EvalScores>,
    pub mean_reward: f64,
}

/// Greedy-decoding evaluation over dialogues.
pub fn evaluate(
    params: &PolicyParams,
    corpus: &Corpus,
    dialogues: &[&Dialogue],
    cache: &ClaimCache,
    extractor: &dyn ClaimExtractor,
    checker: &dyn EntailmentChecker,
    reward_config: &RewardConfig,
) -> Result<Evaluation> {
    let prepared = prepare(dialogues, corpus, cache)?;
    evaluate_prepared(params, &prepared, extractor, checker, reward_config)
}

pub fn evaluate_prepared(
    params: &PolicyParams,
    prepared: &[PreparedDialogue<'_>],
    extractor: &dyn ClaimExtractor,
    checker: &dyn EntailmentChecker,
    reward_config: &RewardConfig,
) -> Result<Evaluation> {
    let per_dialogue = prepared
        .par_iter()
        .map(|p| {
            let t = policy::greedy_note(params, &p.dialogue.id, &p.candidates);
            reward::score_note(
                p.refs,
                &t.note.rendered_text,
                &p.text,
                extractor,
                checker,
                reward_config.epsilon,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_reward = if per_dialogue.is_empty() {
        0.0
    } else {
        per_dialogue
            .iter()
            .map(|s| reward::compute_reward(s, reward_config))
            .sum::<f64>()
            / per_dialogue.len() as f64
    };
    Ok(Evaluation {
        scores: CorpusScores::aggregate(&per_dialogue, reward_config.epsilon),
        per_dialogue,
        mean_reward,
    })
}

/// Samples and scores the `k` group members for one dialogue. Member `j`
/// draws from stream `j` of a generator seeded with `visit_seed`.
pub fn sample_group(
    params: &PolicyParams,
    prepared: &PreparedDialogue<'_>,
    k: usize,
    visit_seed: u64,
    extractor: &dyn ClaimExtractor,
    checker: &dyn EntailmentChecker,
    reward_config: &RewardConfig,
) -> Result<GroupSample> {
    let members = (0..k)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(visit_seed);
            rng.set_stream(j as u64);
            let t = policy::sample_note(
                params,
                &prepared.dialogue.id,
                &prepared.candidates,
                &mut rng,
            );
            let s = reward::score_note(
                prepared.refs,
                &t.note.rendered_text,
                &prepared.text,
                extractor,
                checker,
                reward_config.epsilon,
            )?;
            Ok((t, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let (trajectories, scores): (Vec<_>, Vec<_>) = members.into_iter().unzip();
    let rewards = scores
        .iter()
        .map(|s| reward::compute_reward(s, reward_config))
        .collect();
    GroupSample::new(&prepared.dialogue.id, trajectories, scores, rewards)
}

pub fn train(
    params: PolicyParams,
    corpus: &Corpus,
    cache: &ClaimCache,
    extractor: &dyn ClaimExtractor,
    checker: &dyn EntailmentChecker,
    config: &TrainConfig,
) -> Result<(PolicyParams, TrainMetrics)> {
    train_with(params, corpus, cache, extractor, checker, config, &mut ())
}

#[derive(Default)]
struct Pending {
    gradient: Vec<f64>,
    groups: usize,
    contributing: usize,
    trajectories: usize,
    reward_sum: f64,
    f1_sum: f64,
    gated: usize,
}

impl Pending {
    fn new(dim: usize) -> Self {
        Self {
            gradient: vec![0.0; dim],
            ..Self::default()
        }
    }
}

struct Run<'o> {
    params: PolicyParams,
    metrics: TrainMetrics,
    updates: usize,
    observer: &'o mut dyn TrainObserver,
}

impl Run<'_> {
    fn emit(&mut self, record: MetricRecord) -> Result<()> {
        self.observer.on_record(&record)?;
        self.metrics.push(record);
        Ok(())
    }

    fn apply(
        &mut self,
        pending: &mut Pending,
        epoch: usize,
        lr: f64,
        last_dialogue: &str,
    ) -> Result<()> {
        let n = pending.contributing as f64;
        let step: Vec<f64> = pending.gradient.iter().map(|g| g / n).collect();
        let grad_norm = step.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                update: self.updates + 1,
                dialogue_id: last_dialogue.to_string(),
                detail: format!(
                    "accumulated gradient {step:?} over {} groups",
                    pending.contributing
                ),
            });
        }
        for (w, g) in self.params.weights.iter_mut().zip(&step) {
            *w += lr * g;
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite {
                update: self.updates + 1,
                dialogue_id: last_dialogue.to_string(),
                detail: format!("parameters {:?} after step", self.params.weights),
            });
        }
        self.updates += 1;
        let t = pending.trajectories.max(1) as f64;
        let record = UpdateRecord {
            update: self.updates,
            epoch,
            groups: pending.groups,
            skipped_groups: pending.groups - pending.contributing,
            mean_reward: pending.reward_sum / t,
            mean_f1: pending.f1_sum / t,
            grad_norm,
            gated_fraction: pending.gated as f64 / t,
        };
        *pending = Pending::new(self.params.dim());
        self.emit(MetricRecord::Update(record))
    }
}

/// Full training loop. Deterministic in `(params, corpus, cache, config)`.
pub fn train_with(
    params: PolicyParams,
    corpus: &Corpus,
    cache: &ClaimCache,
    extractor: &dyn ClaimExtractor,
    checker: &dyn EntailmentChecker,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(PolicyParams, TrainMetrics)> {
    config.validate()?;
    let cap = config.max_updates.unwrap_or(usize::MAX);
    if cap == 0 {
        return Ok((params, TrainMetrics::default()));
    }
    let dialogues = training_dialogues(corpus);
    let prepared = prepare(&dialogues, corpus, cache)?;
    if prepared.is_empty() {
        return Err(Error::Config("no training dialogues".into()));
    }

    let dim = params.dim();
    let mut run = Run {
        params,
        metrics: TrainMetrics::default(),
        updates: 0,
        observer,
    };
    let eval = |params: &PolicyParams| {
        evaluate_prepared(params, &prepared, extractor, checker, &config.reward)
    };
    if config.eval_every.is_some() {
        let e = eval(&run.params)?;
        run.emit(MetricRecord::Eval(EvalRecord {
            update: 0,
            scores: e.scores,
            mean_reward: e.mean_reward,
        }))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pending = Pending::new(dim);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut last_dialogue = String::new();

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            if run.updates >= cap {
                break 'epochs;
            }
            let p = &prepared[i];
            let visit_seed: u64 = rng.random();
            let group = sample_group(
                &run.params,
                p,
                config.k,
                visit_seed,
                extractor,
                checker,
                &config.reward,
            )?;
            pending.groups += 1;
            pending.trajectories += group.k();
            pending.reward_sum += group.rewards.iter().sum::<f64>();
            pending.f1_sum += group.scores.iter().map(|s| s.f1).sum::<f64>();
            pending.gated += group
                .scores
                .iter()
                .filter(|s| config.reward.is_gated_out(s.f1))
                .count();
            last_dialogue.clone_from(&p.dialogue.id);
            if group.all_advantages_zero() {
                continue;
            }
            let g = grpo_gradient(&run.params, &group, &p.candidates)?;
            for (acc, gi) in pending.gradient.iter_mut().zip(g) {
                *acc += gi;
            }
            pending.contributing += 1;
            if pending.contributing == config.grad_accumulation {
                run.apply(&mut pending, epoch, config.learning_rate, &last_dialogue)?;
                if let Some(every) = config.eval_every {
                    if run.updates.is_multiple_of(every) {
                        let e = eval(&run.params)?;
                        run.emit(MetricRecord::Eval(EvalRecord {
                            update: run.updates,
                            scores: e.scores,
                            mean_reward: e.mean_reward,
                        }))?;
                    }
                }
            }
        }
        let e = eval(&run.params)?;
        run.emit(MetricRecord::Epoch(EpochRecord {
            epoch,
            updates: run.updates,
            scores: e.scores,
            mean_reward: e.mean_reward,
        }))?;
        run.observer.on_epoch_end(epoch, &run.params)?;
    }

    if pending.contributing > 0 && run.updates < cap {
        let epoch = run.metrics.epochs.last().map_or(1, |e| e.epoch);
        run.apply(&mut pending, epoch, config.learning_rate, &last_dialogue)?;
    }
    Ok((run.params, run.metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{OracleChecker, RuleExtractor};
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::policy::FEATURE_DIM;
    use crate::reward::build_cache_in_memory;
    use proptest::prelude::*;

    #[test]
    fn advantages_examples() {
        let (b, a) = compute_advantages(&[2.0, 5.0, 8.0]).unwrap();
        assert_eq!(b, 5.0);
        assert_eq!(a, vec![-3.0, 0.0, 3.0]);
        let (_, a) = compute_advantages(&[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(a, vec![0.0; 3]);
        assert!(matches!(compute_advantages(&[1.0]), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn advantages_are_shift_invariant(
            r in prop::collection::vec(0.0f64..10.0, 2..8),
            c in -100.0f64..100.0,
        ) {
            let (_, a) = compute_advantages(&r).unwrap();
            let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
            let (_, b) = compute_advantages(&shifted).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    fn small_setup() -> (Corpus, ClaimCache) {
        let corpus = generate_corpus(&CorpusSpec {
            n_dialogues: 20,
            vocabulary_size: 16,
            facts_min: 2,
            facts_max: 5,
            distractor_fraction: 0.25,
            seed: 5,
        })
        .unwrap();
        let cache = build_cache_in_memory(&corpus.dialogues, &RuleExtractor).unwrap();
        (corpus, cache)
    }

    #[test]
    fn equal_rewards_give_zero_gradient() {
        let (corpus, cache) = small_setup();
        let d = [&corpus.dialogues[0]];
        let prepared = prepare(&d, &corpus, &cache).unwrap();
        let params = PolicyParams::random(FEATURE_DIM, 0.5, 1);
        let mut group = sample_group(
            &params,
            &prepared[0],
            3,
            42,
            &RuleExtractor,
            &OracleChecker,
            &RewardConfig::default(),
        )
        .unwrap();
        group = GroupSample::new(
            &group.dialogue_id,
            group.trajectories,
            group.scores,
            vec![4.0; 3],
        )
        .unwrap();
        let g = grpo_gradient(&params, &group, &prepared[0].candidates).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_update_cap_is_a_no_op() {
        let (corpus, cache) = small_setup();
        let params = PolicyParams::random(FEATURE_DIM, 0.5, 1);
        let config = TrainConfig {
            max_updates: Some(0),
            ..TrainConfig::default()
        };
        let (out, metrics) = train(
            params.clone(),
            &corpus,
            &cache,
            &RuleExtractor,
            &OracleChecker,
            &config,
        )
        .unwrap();
        assert_eq!(out, params);
        assert!(metrics.updates.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_counts_updates() {
        let (corpus, cache) = small_setup();
        let params = PolicyParams::random(FEATURE_DIM, 0.5, 1);
        let config = TrainConfig {
            seed: 3,
            epochs: 2,
            eval_every: Some(3),
            ..TrainConfig::default()
        };
        let a = train(
            params.clone(),
            &corpus,
            &cache,
            &RuleExtractor,
            &OracleChecker,
            &config,
        )
        .unwrap();
        let b = train(
            params,
            &corpus,
            &cache,
            &RuleExtractor,
            &OracleChecker,
            &config,
        )
        .unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let metrics = a.1;
        assert_eq!(metrics.epochs.len(), 2);
        assert!(!metrics.updates.is_empty());
        for (i, u) in metrics.updates.iter().enumerate() {
            assert_eq!(u.update, i + 1);
            assert!(u.groups > u.skipped_groups);
        }
        assert_eq!(metrics.evals[0].update, 0);
    }

    #[test]
    fn cache_miss_aborts_training() {
        let (corpus, _) = small_setup();
        let cache = build_cache_in_memory(&corpus.dialogues[..3], &RuleExtractor).unwrap();
        let err = train(
            PolicyParams::zeros(FEATURE_DIM),
            &corpus,
            &cache,
            &RuleExtractor,
            &OracleChecker,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::CacheMiss(_)));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig {
                k: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                grad_accumulation: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                eval_every: Some(0),
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        assert_eq!(TrainConfig::gated(0.6).epochs, 2);
    }

    #[test]
    fn gated_rewards_enter_the_baseline_as_zero() {
        let (corpus, cache) = small_setup();
        let d = [&corpus.dialogues[1]];
        let prepared = prepare(&d, &corpus, &cache).unwrap();
        let params = PolicyParams::zeros(FEATURE_DIM);
        let cfg = RewardConfig::gated(0.6);
        for seed in 0..20 {
            let g = sample_group(
                &params,
                &prepared[0],
                3,
                seed,
                &RuleExtractor,
                &OracleChecker,
                &cfg,
            )
            .unwrap();
            for (s, (&r, &a)) in g.scores.iter().zip(g.rewards.iter().zip(&g.advantages)) {
                if s.f1 < 0.6 {
                    assert_eq!(r, 0.0);
                    assert_eq!(a, -g.baseline);
                }
            }
        }
    }
}
