//! Independent reference computations shared by the property and acceptance
//! tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use soapgrpo::claims::{EntailmentChecker, OracleChecker};
use soapgrpo::corpus::{generate_corpus, Corpus, CorpusSpec};
use soapgrpo::grpo::{grpo_gradient, grpo_surrogate, GroupSample};
use soapgrpo::judge::JudgeVerdict;
use soapgrpo::policy::{self, candidate_facts, FactCandidate, PolicyParams, SoapNote, FEATURE_DIM};
use soapgrpo::report::Aggregates;
use soapgrpo::reward::EvalScores;

pub const FD_STEP: f64 = 1e-5;
/// Differences smaller than this are below the finite-difference noise floor
/// and are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

pub fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(&CorpusSpec {
        n_dialogues: 20,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn central_difference(params: &PolicyParams, i: usize, f: impl Fn(&PolicyParams) -> f64) -> f64 {
    let mut plus = params.clone();
    plus.weights[i] += FD_STEP;
    let mut minus = params.clone();
    minus.weights[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

fn random_params(rng: &mut ChaCha8Rng) -> PolicyParams {
    let scale = rng.random_range(0.1..3.0);
    PolicyParams {
        weights: (0..FEATURE_DIM)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    }
}

fn random_instance(corpus: &Corpus, rng: &mut ChaCha8Rng) -> (PolicyParams, Vec<FactCandidate>) {
    let d = &corpus.dialogues[rng.random_range(0..corpus.dialogues.len())];
    (random_params(rng), candidate_facts(d, corpus))
}

/// Worst per-coordinate relative error of `grad_logprob` against central
/// differences of `logprob` over `n` random (params, trajectory) pairs.
pub fn logprob_fd_worst(n: usize, seed: u64) -> f64 {
    let corpus = small_corpus(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (params, cands) = random_instance(&corpus, &mut rng);
        let t = policy::sample_note(&params, "x", &cands, &mut rng);
        let g = policy::grad_logprob(&params, &t.decisions, &cands).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let fd = central_difference(&params, i, |p| {
                policy::logprob(p, &t.decisions, &cands).unwrap()
            });
            worst = worst.max(rel_err(gi, fd));
        }
    }
    worst
}

fn dummy_scores(k: usize) -> Vec<EvalScores> {
    (0..k)
        .map(|_| EvalScores::from_rates(1.0, 1.0, 1e-8))
        .collect()
}

pub fn random_group(
    params: &PolicyParams,
    cands: &[FactCandidate],
    rewards: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> GroupSample {
    let trajectories = (0..rewards.len())
        .map(|_| policy::sample_note(params, "x", cands, rng))
        .collect();
    GroupSample::new("x", trajectories, dummy_scores(rewards.len()), rewards).unwrap()
}

/// Same as [`logprob_fd_worst`] for `grpo_gradient` against the surrogate at
/// fixed advantages.
pub fn grpo_fd_worst(n: usize, seed: u64) -> f64 {
    let corpus = small_corpus(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (params, cands) = random_instance(&corpus, &mut rng);
        let k = rng.random_range(2..=5);
        let rewards = (0..k).map(|_| rng.random_range(0.0..10.0)).collect();
        let group = random_group(&params, &cands, rewards, &mut rng);
        let g = grpo_gradient(&params, &group, &cands).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let fd = central_difference(&params, i, |p| grpo_surrogate(p, &group, &cands).unwrap());
            worst = worst.max(rel_err(gi, fd));
        }
    }
    worst
}

/// Over `n` random reward triples: the largest |Σ advantages| and the largest
/// coordinate change of the GRPO gradient under a constant reward shift.
pub fn advantage_invariants(n: usize, seed: u64) -> (f64, f64) {
    let corpus = small_corpus(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_sum, mut worst_shift) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let (params, cands) = random_instance(&corpus, &mut rng);
        let rewards: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..10.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(rng.random());
        let mut r2 = r1.clone();
        let a = random_group(&params, &cands, rewards, &mut r1);
        let b = random_group(&params, &cands, shifted, &mut r2);
        worst_sum = worst_sum.max(a.advantages.iter().sum::<f64>().abs());
        let ga = grpo_gradient(&params, &a, &cands).unwrap();
        let gb = grpo_gradient(&params, &b, &cands).unwrap();
        for (x, y) in ga.iter().zip(&gb) {
            worst_shift = worst_shift.max((x - y).abs());
        }
    }
    (worst_sum, worst_shift)
}

/// Every subset of a 10-fact vocabulary rendered as a note, checked against
/// every vocabulary claim. Returns (pairs checked, disagreements).
pub fn exhaustive_entailment() -> (usize, usize) {
    let corpus = generate_corpus(&CorpusSpec {
        n_dialogues: 4,
        facts_min: 2,
        facts_max: 4,
        vocabulary_size: 10,
        distractor_fraction: 0.4,
        seed: 11,
    })
    .unwrap();
    let vocab = &corpus.vocabulary;
    assert_eq!(vocab.len(), 10);
    let claims: Vec<_> = vocab.iter().map(|v| v.tuple.to_claim()).collect();
    let (mut pairs, mut wrong) = (0, 0);
    for mask in 0u32..(1 << vocab.len()) {
        let member = |i: usize| mask & (1 << i) != 0;
        let note = SoapNote::from_facts(
            (0..vocab.len())
                .filter(|&i| member(i))
                .map(|i| &vocab[i].tuple),
        );
        for (i, claim) in claims.iter().enumerate() {
            pairs += 1;
            if OracleChecker.entails(&note.rendered_text, claim).unwrap() != member(i) {
                wrong += 1;
            }
        }
    }
    // Dialogues as premises: a claim is entailed iff its fact is mentioned.
    for d in &corpus.dialogues {
        let text = d.text();
        for (v, claim) in vocab.iter().zip(&claims) {
            pairs += 1;
            let mentioned = d.truth_fact_ids.as_ref().unwrap().contains(&v.id);
            if OracleChecker.entails(&text, claim).unwrap() != mentioned {
                wrong += 1;
            }
        }
    }
    (pairs, wrong)
}

const WINNERS: [&str; 3] = ["tie", "grpo", "base"];
const OMISSION_FORMS: [&str; 10] = [
    "S: ",
    "O: ",
    "A: ",
    "P: ",
    "  P: ",
    "S:",
    "Subjective: ",
    "s: ",
    "Plan - ",
    "",
];

fn random_findings(rng: &mut ChaCha8Rng) -> Value {
    let hallucinations: Vec<String> = (0..rng.random_range(0..6))
        .map(|i| format!("h{i}"))
        .collect();
    let omissions: Vec<String> = (0..rng.random_range(0..5))
        .map(|i| {
            format!(
                "{}missing item {i}",
                OMISSION_FORMS[rng.random_range(0..OMISSION_FORMS.len())]
            )
        })
        .collect();
    serde_json::json!({"hallucinations": hallucinations, "omissions": omissions})
}

pub fn random_verdict(rng: &mut ChaCha8Rng) -> JudgeVerdict {
    let mut w = || WINNERS[rng.random_range(0..3)];
    let dims = serde_json::json!({
        "factuality": {"winner": w()},
        "completeness": {"winner": w()},
        "organization": {"winner": w()},
        "brevity": {"winner": w()},
    });
    let overall = w();
    let v = serde_json::json!({
        "clinical_tags": {"primary_conditions": [], "systems": [], "medications": [], "procedures": []},
        "base": random_findings(rng),
        "grpo": random_findings(rng),
        "pairwise_preference": {
            "dimensions": dims,
            "overall_winner": overall,
            "overall_confidence": rng.random_range(1..=5),
            "rationale_short": "r",
        }
    });
    serde_json::from_value(v).unwrap()
}

fn brute_section(omission: &str) -> usize {
    let chars: Vec<char> = omission.trim_start().chars().take(2).collect();
    match chars.as_slice() {
        ['S', ':'] => 0,
        ['O', ':'] => 1,
        ['A', ':'] => 2,
        ['P', ':'] => 3,
        _ => 4,
    }
}

fn brute_ecdf(counts: &[usize]) -> Vec<(usize, f64)> {
    let max = *counts.iter().max().unwrap();
    (0..=max)
        .map(|t| {
            (
                t,
                counts.iter().filter(|&&c| c <= t).count() as f64 / counts.len() as f64,
            )
        })
        .collect()
}

/// Compares aggregates with direct recomputation from the raw verdicts.
/// Returns a description of the first disagreement.
pub fn check_aggregates(verdicts: &[JudgeVerdict], agg: &Aggregates) -> Result<(), String> {
    if agg.n_verdicts != verdicts.len() {
        return Err(format!(
            "n_verdicts {} != {}",
            agg.n_verdicts,
            verdicts.len()
        ));
    }
    let json: Vec<Value> = verdicts
        .iter()
        .map(|v| serde_json::to_value(v).unwrap())
        .collect();
    let count = |path: &[&str], who: &str| {
        json.iter()
            .filter(|v| path.iter().fold(*v, |acc, k| &acc[*k]) == who)
            .count()
    };
    let p = &agg.preferences;
    for (name, wc) in [
        ("factuality", p.factuality),
        ("completeness", p.completeness),
        ("organization", p.organization),
        ("brevity", p.brevity),
    ] {
        let path = ["pairwise_preference", "dimensions", name, "winner"];
        let got = [wc.grpo_wins, wc.base_wins, wc.ties];
        let want = [
            count(&path, "grpo"),
            count(&path, "base"),
            count(&path, "tie"),
        ];
        if got != want {
            return Err(format!("{name} tally {got:?} != {want:?}"));
        }
    }
    let path = ["pairwise_preference", "overall_winner"];
    let got = [p.overall.grpo_wins, p.overall.base_wins, p.overall.ties];
    let want = [
        count(&path, "grpo"),
        count(&path, "base"),
        count(&path, "tie"),
    ];
    if got != want {
        return Err(format!("overall tally {got:?} != {want:?}"));
    }

    for (label, findings, counts, cdf) in [
        (
            "base",
            verdicts.iter().map(|v| &v.base).collect::<Vec<_>>(),
            agg.omissions.base,
            &agg.hallucinations.base,
        ),
        (
            "grpo",
            verdicts.iter().map(|v| &v.grpo).collect(),
            agg.omissions.grpo,
            &agg.hallucinations.grpo,
        ),
    ] {
        let mut want = [0usize; 5];
        for f in &findings {
            for o in &f.omissions {
                want[brute_section(o)] += 1;
            }
        }
        if counts.0 != want {
            return Err(format!("{label} omissions {:?} != {want:?}", counts.0));
        }
        let hall: Vec<usize> = findings.iter().map(|f| f.hallucinations.len()).collect();
        let expect = brute_ecdf(&hall);
        if cdf.0.len() != expect.len() {
            return Err(format!(
                "{label} ECDF has {} points, expected {}",
                cdf.0.len(),
                expect.len()
            ));
        }
        for (&(t, f), &(te, fe)) in cdf.0.iter().zip(&expect) {
            if t != te || (f - fe).abs() > 1e-12 {
                return Err(format!("{label} ECDF point ({t}, {f}) != ({te}, {fe})"));
            }
        }
        if cdf.0.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(format!("{label} ECDF not monotone"));
        }
        if cdf.0.last().map(|p| p.1) != Some(1.0) {
            return Err(format!("{label} ECDF does not end at exactly 1.0"));
        }
    }
    Ok(())
}

/// Corrupts a valid verdict by deleting a random field or writing a value
/// outside an enum.
pub fn corrupt_verdict(valid: &str, rng: &mut ChaCha8Rng) -> (String, String) {
    let mut v: Value = serde_json::from_str(valid).unwrap();
    let mut paths = Vec::new();
    collect_paths(&v, &mut Vec::new(), &mut paths);
    let path = &paths[rng.random_range(0..paths.len())];
    let enum_targets: Vec<&Vec<String>> = paths
        .iter()
        .filter(|p| {
            matches!(
                p.last().map(String::as_str),
                Some("winner" | "overall_winner")
            )
        })
        .collect();
    if rng.random_bool(0.5) {
        let (last, parent) = path.split_last().unwrap();
        let obj = parent.iter().fold(&mut v, |acc, k| &mut acc[k.as_str()]);
        obj.as_object_mut().unwrap().remove(last);
        (v.to_string(), format!("delete {}", path.join(".")))
    } else {
        let target = enum_targets[rng.random_range(0..enum_targets.len())];
        let bad = ["both", "GRPO", "", "none", "base_note", "1"][rng.random_range(0..6)];
        *target.iter().fold(&mut v, |acc, k| &mut acc[k.as_str()]) = Value::String(bad.into());
        (v.to_string(), format!("{} = {bad:?}", target.join(".")))
    }
}

fn collect_paths(v: &Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            out.push(prefix.clone());
            collect_paths(child, prefix, out);
            prefix.pop();
        }
    }
}
