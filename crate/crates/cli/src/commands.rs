use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use ifir_core::analytics;
use ifir_core::corpus::{corpus_stats, flatten_training_tuples, load_corpus, validate_family};
use ifir_core::embedding::{EmbeddingProvider, Pooling, ProviderConfig};
use ifir_core::eval::{evaluate_suite, write_report, EvalConfig, EvalDataset, MetricReport};
use ifir_core::fusion::{init_params, InitScheme};
use ifir_core::model::{Interaction, ScoringModel};
use ifir_core::objectives::LossVariant;
use ifir_core::synth::mock::{mock_seed_pairs, MockJudge, SeededMockClient};
use ifir_core::synth::{
    load_seed_pairs, run_pipeline, ChatClient, ChatClientConfig, HttpChatClient, PipelineConfig,
    ScriptedFileClient,
};
use ifir_core::trainer::{grad_check, model_from_checkpoint, train, GradCheckConfig, TrainConfig};

fn parse_variant(s: &str) -> std::result::Result<LossVariant, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_interaction(s: &str) -> std::result::Result<Interaction, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_pooling(s: &str) -> std::result::Result<Pooling, String> {
    s.parse().map_err(|e| format!("{e}"))
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone, serde::Deserialize, Default)]
struct SynthFileConfig {
    pipeline: Option<PipelinePartial>,
    generator: Option<ChatClientConfig>,
    judge: Option<ChatClientConfig>,
}

#[derive(Debug, Clone, serde::Deserialize, Default)]
struct PipelinePartial {
    k_distractors: Option<usize>,
    max_parallel: Option<usize>,
    source: Option<String>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Seed pair file (.jsonl with id, query, passage).
    #[arg(long, conflicts_with = "mock_seeds")]
    seeds: Option<PathBuf>,
    /// Generate this many deterministic mock seed pairs instead.
    #[arg(long)]
    mock_seeds: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML file with [pipeline], [generator], [judge] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the fully offline deterministic mock client.
    #[arg(long)]
    mock: bool,
    #[arg(long, default_value_t = 0)]
    mock_seed: u64,
    /// Mock judge behavior: correct | fail:N | acc:P.
    #[arg(long, default_value = "correct")]
    mock_judge: String,
    /// Scripted response file for the generator client.
    #[arg(long)]
    gen_script: Option<PathBuf>,
    /// Scripted response file for the judge client.
    #[arg(long)]
    judge_script: Option<PathBuf>,
    #[arg(long)]
    k_distractors: Option<usize>,
    #[arg(long)]
    max_parallel: Option<usize>,
    #[arg(long)]
    source: Option<String>,
    /// Exit 0 even when no family is retained.
    #[arg(long)]
    allow_empty: bool,
    /// Resume from an existing journal (always on; flag kept for scripts).
    #[arg(long)]
    resume: bool,
}

fn parse_mock_judge(s: &str) -> Result<MockJudge> {
    if s == "correct" {
        return Ok(MockJudge::AlwaysCorrect);
    }
    if let Some(n) = s.strip_prefix("fail:") {
        return Ok(MockJudge::AlwaysFailScenario(
            n.parse().context("bad fail:N scenario number")?,
        ));
    }
    if let Some(p) = s.strip_prefix("acc:") {
        return Ok(MockJudge::Accuracy(
            p.parse().context("bad acc:P probability")?,
        ));
    }
    bail!("unknown mock judge `{s}` (expected correct | fail:N | acc:P)")
}

pub fn run_synth(args: SynthArgs) -> Result<ExitCode> {
    let file_cfg: SynthFileConfig = match &args.config {
        Some(path) => toml::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        None => SynthFileConfig::default(),
    };
    let partial = file_cfg.pipeline.unwrap_or_default();
    let cfg = PipelineConfig {
        out_dir: args.out_dir.clone(),
        k_distractors: args.k_distractors.or(partial.k_distractors).unwrap_or(3),
        max_parallel: args.max_parallel.or(partial.max_parallel).unwrap_or(1),
        source: args
            .source
            .or(partial.source)
            .unwrap_or_else(|| "seed".into()),
    };

    let seeds = match (&args.seeds, args.mock_seeds) {
        (Some(path), None) => load_seed_pairs(path)?,
        (None, Some(n)) => mock_seed_pairs(n, args.mock_seed),
        _ => bail!("provide exactly one of --seeds or --mock-seeds"),
    };

    let (gen_client, judge_client): (Box<dyn ChatClient>, Box<dyn ChatClient>) = if args.mock {
        let judge = parse_mock_judge(&args.mock_judge)?;
        (
            Box::new(SeededMockClient::new(args.mock_seed, MockJudge::AlwaysCorrect)),
            Box::new(SeededMockClient::new(args.mock_seed, judge)),
        )
    } else if args.gen_script.is_some() || args.judge_script.is_some() {
        let gen = args
            .gen_script
            .as_ref()
            .context("--gen-script required alongside --judge-script")?;
        let judge = args
            .judge_script
            .as_ref()
            .context("--judge-script required alongside --gen-script")?;
        (
            Box::new(ScriptedFileClient::load(gen)?),
            Box::new(ScriptedFileClient::load(judge)?),
        )
    } else {
        let gen_cfg = file_cfg
            .generator
            .context("config file must define [generator] for live runs")?;
        let judge_cfg = file_cfg
            .judge
            .context("config file must define [judge] for live runs")?;
        (
            Box::new(HttpChatClient::new(gen_cfg)?),
            Box::new(HttpChatClient::new(judge_cfg)?),
        )
    };

    let (corpus, report) = run_pipeline(&seeds, gen_client.as_ref(), judge_client.as_ref(), &cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    tracing::info!(
        corpus = %cfg.out_dir.join("corpus.jsonl").display(),
        retained = report.retained,
        "synthesis finished"
    );
    let _ = corpus;
    if report.retained == 0 && !args.allow_empty {
        bail!("no family was retained (pass --allow-empty to accept)");
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// stats / flatten

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Also run validate_family over every family and report violations.
    #[arg(long)]
    validate: bool,
}

pub fn run_stats(args: StatsArgs) -> Result<ExitCode> {
    let corpus = load_corpus(&args.corpus)?;
    let stats = corpus_stats(&corpus);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    if args.validate {
        let mut violations = 0usize;
        for f in corpus.families() {
            for v in validate_family(f) {
                eprintln!("{}: {} {}", f.id, v.field, v.rule);
                violations += 1;
            }
        }
        if violations > 0 {
            bail!("{violations} invariant violations");
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct FlattenArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn run_flatten(args: FlattenArgs) -> Result<ExitCode> {
    let corpus = load_corpus(&args.corpus)?;
    let flat = flatten_training_tuples(&corpus);
    std::fs::write(&args.out, serde_json::to_string(&flat)?)
        .with_context(|| format!("writing {}", args.out.display()))?;
    tracing::info!(
        tuples = flat.tuples.len(),
        passages = flat.passages.len(),
        skipped_missing = flat.skipped_missing_negatives,
        skipped_not_retained = flat.skipped_not_retained,
        "flattened corpus"
    );
    println!(
        "{} tuples, tables P:{} I:{} Q:{}",
        flat.tuples.len(),
        flat.passages.len(),
        flat.instructions.len(),
        flat.queries.len()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// train.toml mirroring the training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<LossVariant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_interaction)]
    interaction: Option<Interaction>,
    #[arg(long, value_parser = parse_pooling)]
    pooling: Option<Pooling>,
    /// Hash provider dimension when no config file is given.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    provider_seed: u64,
    #[arg(long)]
    trainable_proj: Option<bool>,
}

pub fn run_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => toml::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        None => TrainConfig::with_provider(ProviderConfig::hash(args.dim, args.provider_seed)),
    };
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.interaction {
        cfg.interaction = v;
    }
    if let Some(v) = args.pooling {
        cfg.pooling = v;
    }
    if let Some(v) = args.trainable_proj {
        cfg.trainable_proj = v;
    }

    let corpus = load_corpus(&args.corpus)?;
    let outcome = train(&corpus, &cfg, Some(&args.out_dir))?;
    let final_loss = outcome.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("final loss {final_loss:.6}");
    println!(
        "checkpoint {}",
        outcome
            .checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// grad-check

#[derive(Args)]
pub struct GradCheckArgs {
    #[arg(long, value_parser = parse_variant, default_value = "multi:P,I")]
    variant: LossVariant,
    #[arg(long, value_parser = parse_interaction, default_value = "cross_attention")]
    interaction: Interaction,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 6)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    batch: usize,
    #[arg(long, default_value_t = 0.7)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    /// Skew added to every analytic gradient entry; nonzero must fail.
    #[arg(long, default_value_t = 0.0)]
    perturbation: f64,
}

pub fn run_grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    let cfg = GradCheckConfig {
        variant: args.variant,
        interaction: args.interaction,
        dim: args.dim,
        batch: args.batch,
        tau: args.tau,
        n_instances: args.n,
        tolerance: args.tolerance,
        seed: args.seed,
        fd_step: args.fd_step,
        perturbation: args.perturbation,
        trainable_proj: true,
    };
    let report = grad_check(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed {
        bail!(
            "gradient check failed: max relative error {} > tolerance {}",
            report.max_rel_err,
            report.tolerance
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the untrained identity model instead of a checkpoint.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// nDCG cutoffs.
    #[arg(long = "ndcg-k", default_values_t = vec![5usize, 10])]
    ndcg_ks: Vec<usize>,
    // Baseline model settings.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    provider_seed: u64,
    #[arg(long, value_parser = parse_interaction, default_value = "concat")]
    interaction: Interaction,
    #[arg(long, value_parser = parse_pooling, default_value = "mean")]
    pooling: Pooling,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
}

pub fn run_eval(args: EvalArgs) -> Result<ExitCode> {
    let model: ScoringModel = match (&args.checkpoint, args.baseline) {
        (Some(path), false) => model_from_checkpoint(path)?,
        (None, true) => {
            let mut provider = ProviderConfig::hash(args.dim, args.provider_seed);
            provider.pooling = args.pooling;
            let params = init_params(args.dim, 0, InitScheme::IdentityNoise { scale: 0.0 }, false)?;
            ScoringModel::from_provider_config(params, args.interaction, args.tau, &provider)?
        }
        _ => bail!("provide exactly one of --checkpoint or --baseline"),
    };
    let dataset = EvalDataset::load(&args.dataset)?;
    let report = evaluate_suite(&model, &dataset, &EvalConfig { ndcg_ks: args.ndcg_ks })?;
    if let Some(dir) = &args.out_dir {
        write_report(&report, dir)?;
    }
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Args, Clone)]
pub struct ProviderArgs {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    provider_seed: u64,
    #[arg(long, value_parser = parse_pooling, default_value = "mean")]
    pooling: Pooling,
}

impl ProviderArgs {
    fn build(&self) -> Result<(Arc<dyn EmbeddingProvider>, String)> {
        let cfg = ProviderConfig::hash(self.dim, self.provider_seed);
        let provider = cfg.build()?;
        Ok((provider, format!("hash/d{}/seed{}", self.dim, self.provider_seed)))
    }
}

#[derive(Subcommand)]
pub enum AnalyzeCmd {
    /// Average pairwise sample similarity (writes the diversity report with
    /// --out).
    Aps {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long, default_value_t = 2)]
        ngram_low: usize,
        #[arg(long, default_value_t = 4)]
        ngram_high: usize,
        /// Write the full diversity report (aps + ingf) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inter-sample n-gram frequency.
    Ingf {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 2)]
        ngram_low: usize,
        #[arg(long, default_value_t = 4)]
        ngram_high: usize,
    },
    /// Cohen's kappa between two label files (one label per line).
    Kappa {
        #[arg(long)]
        rater_a: PathBuf,
        #[arg(long)]
        rater_b: PathBuf,
    },
    /// Exact-match contamination check between a corpus and a dataset dir.
    Overlap {
        #[arg(long)]
        train_corpus: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export pooled embeddings and metadata for external projection.
    Export {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

pub fn run_analyze(cmd: AnalyzeCmd) -> Result<ExitCode> {
    match cmd {
        AnalyzeCmd::Aps {
            corpus,
            provider,
            ngram_low,
            ngram_high,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let (p, desc) = provider.build()?;
            let report = analytics::diversity_report(
                &corpus,
                &p,
                provider.pooling,
                &desc,
                (ngram_low, ngram_high),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        AnalyzeCmd::Ingf {
            corpus,
            ngram_low,
            ngram_high,
        } => {
            let corpus = load_corpus(&corpus)?;
            let texts = analytics::corpus_sample_texts(&corpus);
            let value = analytics::ingf(&texts, ngram_low, ngram_high)?;
            println!("{}", serde_json::json!({ "ingf": value, "n_texts": texts.len() }));
        }
        AnalyzeCmd::Kappa { rater_a, rater_b } => {
            let read_labels = |p: &PathBuf| -> Result<Vec<String>> {
                Ok(std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .lines()
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .collect())
            };
            let table = analytics::AgreementTable::new(read_labels(&rater_a)?, read_labels(&rater_b)?)?;
            let kappa = analytics::cohens_kappa(&table)?;
            println!("{}", serde_json::json!({ "kappa": kappa, "n": table.len() }));
        }
        AnalyzeCmd::Overlap {
            train_corpus,
            dataset,
        } => {
            let corpus = load_corpus(&train_corpus)?;
            let train_texts: Vec<(String, String)> = analytics::corpus_export_items(&corpus)
                .into_iter()
                .map(|item| (item.id, item.text))
                .collect();
            let ds = EvalDataset::load(&dataset)?;
            let mut eval_texts: Vec<(String, String)> = ds
                .pool
                .iter()
                .map(|p| (format!("pool/{}", p.passage_id), p.text.clone()))
                .collect();
            eval_texts.extend(
                ds.queries
                    .iter()
                    .map(|q| (format!("query/{}", q.query_id), q.query.clone())),
            );
            let matches = analytics::overlap_check(&train_texts, &eval_texts);
            println!("{}", serde_json::to_string_pretty(&matches)?);
            if !matches.is_empty() {
                tracing::warn!(n = matches.len(), "train/eval overlap detected");
            }
        }
        AnalyzeCmd::Export {
            corpus,
            provider,
            out_dir,
        } => {
            let corpus = load_corpus(&corpus)?;
            let items = analytics::corpus_export_items(&corpus);
            let (p, _) = provider.build()?;
            let (vecs, meta) =
                analytics::export_embeddings(&items, &p, provider.pooling, &out_dir)?;
            println!("{}\n{}", vecs.display(), meta.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// report

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
}

pub fn run_report(args: ReportArgs) -> Result<ExitCode> {
    let raw = std::fs::read_to_string(&args.report)
        .with_context(|| format!("reading {}", args.report.display()))?;
    let report: MetricReport = serde_json::from_str(&raw)?;
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}
