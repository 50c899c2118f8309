//! The `soapgrpo` command line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::claims::{ClaimExtractor, EntailmentChecker, OracleChecker, RuleExtractor};
use crate::config::{parse_gate, require, RunConfig};
use crate::corpus::{generate_corpus, load_dialogues, vocab_path, Corpus, Dialogue, Split};
use crate::error::{Error, Result};
use crate::grpo::{self, MetricRecord, TrainObserver};
use crate::judge::{JudgeClient, RemoteChecker, RemoteExtractor};
use crate::notes::{pair_notes, read_jsonl, write_jsonl, NoteRecord, VerdictRecord};
use crate::policy::{self, PolicyParams};
use crate::report;
use crate::reward::{self, ClaimCache, CorpusScores};

#[derive(Parser, Debug)]
#[command(
    name = "soapgrpo",
    version,
    about = "Claim-level reward GRPO for SOAP notes"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Rule,
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate(pub Option<f64>);

fn parse_gate_arg(s: &str) -> std::result::Result<Gate, String> {
    parse_gate(s).map(Gate)
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for corpus generation (gen-corpus) or training (train).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<Backend>,
    /// Reward gate threshold, or `off`.
    #[arg(long, global = true, value_parser = parse_gate_arg)]
    pub gate: Option<Gate>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Output directory for the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub notes: Option<PathBuf>,
    #[arg(long, global = true)]
    pub base_notes: Option<PathBuf>,
    #[arg(long, global = true)]
    pub grpo_notes: Option<PathBuf>,
    /// Verdict file; repeat to aggregate several (report).
    #[arg(long, global = true)]
    pub verdicts: Vec<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, global = true)]
    pub max_updates: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus and its vocabulary sidecar.
    GenCorpus,
    /// Extract and cache reference claims for every dialogue.
    CacheClaims,
    /// Train the inclusion policy; writes checkpoints and metrics.
    Train,
    /// Score a checkpoint (greedy) or a notes file against a dialogue set.
    Eval,
    /// Write notes for a dialogue set from a checkpoint or the remote generator.
    Notes,
    /// Judge paired base/GRPO notes with the remote judge.
    Judge,
    /// Aggregate verdict files into preference, omission and CDF tables.
    Report,
}

struct Ctx {
    cfg: RunConfig,
    backend: Backend,
    split: Option<SplitArg>,
    out: Option<PathBuf>,
    verdict_files: Vec<PathBuf>,
}

impl Ctx {
    fn from_overrides(o: Overrides) -> Result<Ctx> {
        let mut cfg = match &o.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let paths = &mut cfg.paths;
        let set = |slot: &mut Option<PathBuf>, v: Option<PathBuf>| {
            if v.is_some() {
                *slot = v;
            }
        };
        set(&mut paths.corpus, o.corpus);
        set(&mut paths.cache, o.cache);
        set(&mut paths.checkpoint, o.checkpoint);
        set(&mut paths.notes, o.notes);
        set(&mut paths.base_notes, o.base_notes);
        set(&mut paths.grpo_notes, o.grpo_notes);
        if let Some(v) = o.verdicts.first() {
            paths.verdicts = Some(v.clone());
        }
        let verdict_files = match (&o.verdicts[..], &paths.verdicts) {
            ([], Some(p)) => vec![p.clone()],
            (v, _) => v.to_vec(),
        };
        if let Some(seed) = o.seed {
            cfg.corpus.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(Gate(g)) = o.gate {
            cfg.reward.gate = g;
        }
        if let Some(e) = o.epochs {
            cfg.train.epochs = Some(e);
        }
        if let Some(k) = o.k {
            cfg.train.k = k;
        }
        if let Some(lr) = o.lr {
            cfg.train.learning_rate = lr;
        }
        if o.max_updates.is_some() {
            cfg.train.max_updates = o.max_updates;
        }
        Ok(Ctx {
            cfg,
            backend: o.backend.unwrap_or(Backend::Rule),
            split: o.split,
            out: o.out,
            verdict_files,
        })
    }

    fn client(&self) -> Result<Arc<JudgeClient>> {
        Ok(Arc::new(JudgeClient::new(self.cfg.endpoint.clone())?))
    }

    fn backends(&self) -> Result<(Box<dyn ClaimExtractor>, Box<dyn EntailmentChecker>)> {
        Ok(match self.backend {
            Backend::Rule => (Box::new(RuleExtractor), Box::new(OracleChecker)),
            Backend::Remote => {
                let client = self.client()?;
                (
                    Box::new(RemoteExtractor::new(client.clone())),
                    Box::new(RemoteChecker::new(client)),
                )
            }
        })
    }

    /// `--out <dir>/<file>` when given, else the configured path.
    fn output(&self, configured: &Option<PathBuf>, key: &str, file: &str) -> Result<PathBuf> {
        match &self.out {
            Some(dir) => Ok(dir.join(file)),
            None => Ok(require(configured, key, "--out")?.to_path_buf()),
        }
    }

    fn corpus_path(&self) -> Result<&Path> {
        require(&self.cfg.paths.corpus, "corpus", "--corpus")
    }

    fn cache(&self) -> Result<ClaimCache> {
        ClaimCache::load(require(&self.cfg.paths.cache, "cache", "--cache")?)
    }
}

/// Loads the corpus with its vocabulary when the sidecar exists, otherwise
/// just the dialogues (external data).
fn load_corpus(path: &Path) -> Result<Corpus> {
    if vocab_path(path).exists() {
        Corpus::load(path)
    } else {
        Ok(Corpus {
            vocabulary: Vec::new(),
            dialogues: load_dialogues(path)?,
        })
    }
}

fn select(corpus: &Corpus, split: Option<SplitArg>, default: SplitArg) -> Vec<&Dialogue> {
    let labelled = corpus.dialogues.iter().any(|d| d.split.is_some());
    match split.unwrap_or(default) {
        SplitArg::Train if labelled => corpus.split(Split::Train),
        SplitArg::Test if labelled => corpus.split(Split::Test),
        _ => corpus.dialogues.iter().collect(),
    }
}

fn print_scores(label: &str, s: &CorpusScores) {
    println!("{label}: {} dialogues", s.n);
    println!("  precision                  {:.4}", s.precision);
    println!("  recall                     {:.4}", s.recall);
    println!("  f1 (mean per-note F1)      {:.4}", s.macro_f1);
    println!("  f1 (F1 of mean P, mean R)  {:.4}", s.f1_of_means);
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::from_overrides(cli.overrides)?;
    match cli.command {
        Command::GenCorpus => gen_corpus(&ctx),
        Command::CacheClaims => cache_claims(&ctx),
        Command::Train => train(&ctx),
        Command::Eval => eval(&ctx),
        Command::Notes => notes(&ctx),
        Command::Judge => judge(&ctx),
        Command::Report => report_cmd(&ctx),
    }
}

fn gen_corpus(ctx: &Ctx) -> Result<()> {
    let path = ctx.output(&ctx.cfg.paths.corpus, "corpus", "corpus.jsonl")?;
    let corpus = generate_corpus(&ctx.cfg.corpus)?;
    corpus.save(&path)?;
    println!(
        "wrote {} dialogues ({} train / {} test) and {} vocabulary facts ({} distractors) to {}",
        corpus.dialogues.len(),
        corpus.split(Split::Train).len(),
        corpus.split(Split::Test).len(),
        corpus.vocabulary.len(),
        corpus.distractors().count(),
        path.display()
    );
    Ok(())
}

fn cache_claims(ctx: &Ctx) -> Result<()> {
    let dialogues = load_dialogues(ctx.corpus_path()?)?;
    let path = ctx.output(&ctx.cfg.paths.cache, "cache", "cache.jsonl")?;
    let (extractor, _) = ctx.backends()?;
    let cache = reward::build_cache(&dialogues, extractor.as_ref(), &path)?;
    let claims: usize = cache
        .ids()
        .iter()
        .map(|id| cache.entry(id).map_or(0, |e| e.claims.len()))
        .sum();
    println!(
        "cached {claims} reference claims for {} dialogues to {}",
        cache.len(),
        path.display()
    );
    Ok(())
}

struct RunDirObserver {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl TrainObserver for RunDirObserver {
    fn on_record(&mut self, record: &MetricRecord) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        serde_json::to_writer(&mut self.metrics, record).expect("metric record serializes");
        self.metrics
            .write_all(b"\n")
            .map_err(|e| Error::io(&path, e))?;
        if let MetricRecord::Epoch(e) = record {
            log::info!(
                "epoch {} after {} updates: P {:.4} R {:.4} F1 {:.4}",
                e.epoch,
                e.updates,
                e.scores.precision,
                e.scores.recall,
                e.scores.macro_f1
            );
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, params: &PolicyParams) -> Result<()> {
        params.save(&self.dir.join(format!("epoch_{epoch}.weights")))
    }
}

fn train(ctx: &Ctx) -> Result<()> {
    let corpus = Corpus::load(ctx.corpus_path()?)?;
    let cache = ctx.cache()?;
    let run_dir = match &ctx.out {
        Some(d) => d.clone(),
        None => require(&ctx.cfg.paths.run_dir, "run_dir", "--out")?.to_path_buf(),
    };
    let config = ctx.cfg.train_config();
    config.validate()?;
    let init = match &ctx.cfg.paths.checkpoint {
        Some(p) => PolicyParams::load(p)?,
        None => ctx.cfg.initial_params(),
    };
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut observer = RunDirObserver {
        dir: run_dir.clone(),
        metrics: BufWriter::new(file),
    };
    let (extractor, checker) = ctx.backends()?;
    let (params, metrics) = grpo::train_with(
        init,
        &corpus,
        &cache,
        extractor.as_ref(),
        checker.as_ref(),
        &config,
        &mut observer,
    )?;
    observer
        .metrics
        .flush()
        .map_err(|e| Error::io(&metrics_path, e))?;
    params.save(&run_dir.join("final.weights"))?;
    println!(
        "applied {} updates over {} epochs (k = {}, lr = {}, gate = {})",
        metrics.updates.len(),
        metrics.epochs.len(),
        config.k,
        config.learning_rate,
        config
            .reward
            .gate_tau
            .map_or_else(|| "off".to_string(), |t| t.to_string())
    );
    if let Some(last) = metrics.epochs.last() {
        print_scores("training set (greedy)", &last.scores);
    }
    println!("wrote {}", run_dir.display());
    Ok(())
}

fn eval(ctx: &Ctx) -> Result<()> {
    let corpus = load_corpus(ctx.corpus_path()?)?;
    let cache = ctx.cache()?;
    let dialogues = select(&corpus, ctx.split, SplitArg::Test);
    let (extractor, checker) = ctx.backends()?;
    let reward_config = ctx.cfg.reward_config();
    let eps = reward_config.epsilon;

    let (label, scores) = match (&ctx.cfg.paths.notes, &ctx.cfg.paths.checkpoint) {
        (Some(notes_path), _) => {
            let notes: Vec<NoteRecord> = read_jsonl(notes_path)?;
            let pairs = pair_notes(&dialogues, &notes, &notes_path.display().to_string())?;
            let per_note = pairs
                .par_iter()
                .map(|(d, n)| {
                    reward::score_note(
                        cache.lookup(d)?,
                        &n.note,
                        &d.text(),
                        extractor.as_ref(),
                        checker.as_ref(),
                        eps,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            (
                notes_path.display().to_string(),
                CorpusScores::aggregate(&per_note, eps),
            )
        }
        (None, Some(ckpt)) => {
            if corpus.vocabulary.is_empty() {
                return Err(Error::Usage(
                    "checkpoint evaluation needs the corpus vocabulary sidecar".into(),
                ));
            }
            let params = PolicyParams::load(ckpt)?;
            let e = grpo::evaluate(
                &params,
                &corpus,
                &dialogues,
                &cache,
                extractor.as_ref(),
                checker.as_ref(),
                &reward_config,
            )?;
            (ckpt.display().to_string(), e.scores)
        }
        (None, None) => {
            return Err(Error::Usage(
                "eval needs `--checkpoint <weights>` or `--notes <notes.jsonl>`".into(),
            ))
        }
    };
    print_scores(&label, &scores);
    if let Some(dir) = &ctx.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("eval.json");
        let json = serde_json::to_string_pretty(&scores).expect("scores serialize");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn notes(ctx: &Ctx) -> Result<()> {
    let corpus = load_corpus(ctx.corpus_path()?)?;
    let dialogues = select(&corpus, ctx.split, SplitArg::Test);
    let out = ctx.output(&ctx.cfg.paths.notes, "notes", "notes.jsonl")?;
    let records: Vec<NoteRecord> = match (ctx.backend, &ctx.cfg.paths.checkpoint) {
        (Backend::Remote, _) => {
            let client = ctx.client()?;
            dialogues
                .par_iter()
                .map(|d| {
                    Ok(NoteRecord {
                        dialogue_id: d.id.clone(),
                        note: client.generate_note(&d.text())?,
                    })
                })
                .collect::<Result<_>>()?
        }
        (Backend::Rule, Some(ckpt)) => {
            let params = PolicyParams::load(ckpt)?;
            dialogues
                .iter()
                .map(|d| {
                    let candidates = policy::candidate_facts(d, &corpus);
                    NoteRecord {
                        dialogue_id: d.id.clone(),
                        note: policy::greedy_note(&params, &d.id, &candidates)
                            .note
                            .rendered_text,
                    }
                })
                .collect()
        }
        (Backend::Rule, None) => {
            return Err(Error::Usage(
                "notes needs `--checkpoint <weights>` or `--backend remote`".into(),
            ))
        }
    };
    write_jsonl(&out, &records)?;
    println!("wrote {} notes to {}", records.len(), out.display());
    Ok(())
}

fn judge(ctx: &Ctx) -> Result<()> {
    let corpus = load_corpus(ctx.corpus_path()?)?;
    let dialogues = select(&corpus, ctx.split, SplitArg::Test);
    let base_path = require(&ctx.cfg.paths.base_notes, "base_notes", "--base-notes")?;
    let grpo_path = require(&ctx.cfg.paths.grpo_notes, "grpo_notes", "--grpo-notes")?;
    let base: Vec<NoteRecord> = read_jsonl(base_path)?;
    let grpo_notes: Vec<NoteRecord> = read_jsonl(grpo_path)?;
    let base_pairs = pair_notes(&dialogues, &base, &base_path.display().to_string())?;
    let grpo_pairs = pair_notes(&dialogues, &grpo_notes, &grpo_path.display().to_string())?;
    let out = ctx.output(&ctx.cfg.paths.verdicts, "verdicts", "verdicts.jsonl")?;

    let client = ctx.client()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.cfg.endpoint.max_in_flight)
        .build()
        .map_err(|e| Error::Config(format!("cannot start judge workers: {e}")))?;
    let results: Vec<Result<VerdictRecord>> = pool.install(|| {
        base_pairs
            .par_iter()
            .zip(&grpo_pairs)
            .map(|((d, b), (_, g))| {
                client
                    .pairwise_judge(&d.text(), &b.note, &g.note)
                    .map(|verdict| VerdictRecord {
                        dialogue_id: d.id.clone(),
                        verdict,
                    })
            })
            .collect()
    });
    let total = results.len();
    let mut records = Vec::with_capacity(total);
    for (r, (d, _)) in results.into_iter().zip(&base_pairs) {
        match r {
            Ok(v) => records.push(v),
            Err(e) => log::error!("judging `{}` failed: {e}", d.id),
        }
    }
    write_jsonl(&out, &records)?;
    println!(
        "wrote {} of {total} verdicts to {}",
        records.len(),
        out.display()
    );
    let failed = total - records.len();
    if failed > 0 {
        return Err(Error::PartialFailure { failed, total });
    }
    Ok(())
}

fn report_cmd(ctx: &Ctx) -> Result<()> {
    let files = &ctx.verdict_files;
    if files.is_empty() {
        return Err(Error::Usage(
            "report needs `--verdicts <file>` (repeatable) or `paths.verdicts`".into(),
        ));
    }
    let mut verdicts = Vec::new();
    for f in files {
        let records: Vec<VerdictRecord> = read_jsonl(f)?;
        verdicts.extend(records.into_iter().map(|r| r.verdict));
    }
    let agg = report::aggregate_verdicts(&verdicts)?;
    let out = match &ctx.out {
        Some(d) => d.clone(),
        None => require(&ctx.cfg.paths.report_dir, "report_dir", "--out")?.to_path_buf(),
    };
    for path in report::export_tables(&agg, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;
    use crate::grpo::TrainConfig;

    fn ctx(args: &[&str]) -> Ctx {
        let cli =
            Cli::try_parse_from(std::iter::once("soapgrpo").chain(args.iter().copied())).unwrap();
        Ctx::from_overrides(cli.overrides).unwrap()
    }

    #[test]
    fn flags_override_config_defaults() {
        let c = ctx(&[
            "train", "--seed", "7", "--gate", "0.6", "--k", "5", "--lr", "0.2",
        ]);
        assert_eq!(c.cfg.corpus.seed, 7);
        let t = c.cfg.train_config();
        assert_eq!((t.seed, t.k, t.learning_rate), (7, 5, 0.2));
        assert_eq!(t.reward.gate_tau, Some(0.6));
        assert_eq!(t.epochs, TrainConfig::GATED_EPOCHS);
        assert_eq!(c.backend, Backend::Rule);

        let c = ctx(&["--gate", "off", "--epochs", "4", "train"]);
        assert_eq!(c.cfg.train_config().reward.gate_tau, None);
        assert_eq!(c.cfg.train_config().epochs, 4);
    }

    #[test]
    fn repeated_verdict_files_are_kept() {
        let c = ctx(&["report", "--verdicts", "a.jsonl", "--verdicts", "b.jsonl"]);
        assert_eq!(
            c.verdict_files,
            vec![PathBuf::from("a.jsonl"), PathBuf::from("b.jsonl")]
        );
    }

    #[test]
    fn invalid_flag_values_fail_to_parse() {
        for args in [
            &["--gate", "1.5", "train"][..],
            &["--backend", "gpu", "eval"],
            &["--k", "-1", "train"],
        ] {
            assert!(
                Cli::try_parse_from(std::iter::once("soapgrpo").chain(args.iter().copied()))
                    .is_err()
            );
        }
    }

    #[test]
    fn split_selection() {
        let corpus = generate_corpus(&CorpusSpec {
            n_dialogues: 10,
            vocabulary_size: 16,
            ..CorpusSpec::default()
        })
        .unwrap();
        assert_eq!(select(&corpus, None, SplitArg::Test).len(), 2);
        assert_eq!(
            select(&corpus, Some(SplitArg::Train), SplitArg::Test).len(),
            8
        );
        assert_eq!(
            select(&corpus, Some(SplitArg::All), SplitArg::Test).len(),
            10
        );
        let unlabelled = Corpus {
            vocabulary: Vec::new(),
            dialogues: corpus
                .dialogues
                .iter()
                .cloned()
                .map(|mut d| {
                    d.split = None;
                    d
                })
                .collect(),
        };
        assert_eq!(
            select(&unlabelled, Some(SplitArg::Test), SplitArg::Test).len(),
            10
        );
    }
}
