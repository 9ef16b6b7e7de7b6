//! Command-line front end: `gen-data`, `train`, `sample`, `eval`, `verify`.
//!
//! Every command is deterministic under a fixed seed. Exit codes: 0 on
//! success, 1 when verification checks fail, 2 on runtime faults (bad
//! arguments, unreadable files, non-finite losses).

mod config;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use config::ExperimentConfig;
use hierdiff_core::guidance::{self, GuidanceConfig, Scorer};
use hierdiff_core::network::{ConditionBundle, Network, Variant};
use hierdiff_core::schedule::NoiseSchedule;
use hierdiff_core::synthdata::{self, Generator, SynthSample};
use hierdiff_core::token_space::{write_corpus, CorpusHeader, StateSpaceConfig, TokenGrid};
use hierdiff_core::training::{self, make_eval_batch, mean_dse};
use hierdiff_core::verify::{self, FaultInjection};
use ndarray::{Array1, Array2};
use serde::Deserialize;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hierdiff",
    version,
    about = "Hierarchical masked discrete diffusion over multi-level token grids"
)]
struct Cli {
    /// Worker thread cap (falls back to HCDT_THREADS, then 1). All
    /// computation is sequential and seed-deterministic at any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (binary grids + JSONL condition sidecar).
    GenData {
        /// Experiment config JSON; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output corpus path; the sidecar defaults to this path + ".jsonl".
        #[arg(long)]
        out: PathBuf,
        /// Sidecar path override.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Number of records to generate.
        #[arg(short = 'n', long)]
        count: usize,
        /// Index of the first record (records are pure functions of index).
        #[arg(long, default_value_t = 0)]
        start_index: u64,
    },
    /// Train a score network on a corpus; writes checkpoint + metrics CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus path (sidecar expected at path + ".jsonl" unless given).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV path (default: checkpoint path + ".metrics.csv").
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Override train.iters from the config.
        #[arg(long)]
        iters: Option<usize>,
        /// Override train.lr from the config.
        #[arg(long)]
        lr: Option<f64>,
        /// Override train.lr_final_frac from the config (cosine decay floor
        /// as a fraction of lr; 1.0 keeps the rate constant).
        #[arg(long)]
        lr_final_frac: Option<f64>,
        /// Override train.batch_size from the config.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Train the single-stack ablation (all levels through one tier,
        /// all conditions injected everywhere).
        #[arg(long, conflicts_with = "single_scale_adaln")]
        flat_ablation: bool,
        /// Train the ablation that replaces dual-scale temporal modulation
        /// with pooled single-scale modulation in the high tier.
        #[arg(long)]
        single_scale_adaln: bool,
    },
    /// Sample grids from a checkpoint, one per condition record.
    Sample {
        /// Checkpoint path.
        #[arg(long)]
        ckpt: PathBuf,
        /// JSONL condition records (a gen-data sidecar works directly);
        /// null or missing fields mean the condition is absent.
        #[arg(long)]
        conditions: PathBuf,
        /// Output corpus of sampled grids.
        #[arg(long)]
        out: PathBuf,
        /// Experiment config (for the noise schedule and guidance defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        w_all: Option<f64>,
        #[arg(long)]
        w_id: Option<f64>,
        #[arg(long)]
        w_emo: Option<f64>,
        #[arg(long)]
        w_lip: Option<f64>,
        /// Euler steps (default from config, itself defaulting to 64).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint (or the exact oracle) against a corpus.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; required unless --use-oracle.
        #[arg(long, required_unless_present = "use_oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Metrics CSV output path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score with the exact posterior oracle instead of a checkpoint.
        #[arg(long)]
        use_oracle: bool,
        /// Held-out batch size for the score-entropy comparison.
        #[arg(long, default_value_t = 512)]
        batch: usize,
        /// Number of corpus records used for accuracy and agreement rates.
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Euler steps for agreement sampling.
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the self-check battery; one line per check, exit 1 on failure.
    Verify {
        /// Optional config to validate alongside the battery.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only run checks whose name contains this substring.
        #[arg(long)]
        only: Option<String>,
        /// Inject a deliberate fault to demonstrate the battery catches it.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    NonMonotoneSchedule,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = resolve_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let outcome = match cli.command {
        Command::GenData { config, out, sidecar, count, start_index } => {
            cmd_gen_data(config.as_deref(), &out, sidecar.as_deref(), count, start_index)
                .map(|()| ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            corpus,
            sidecar,
            out,
            metrics,
            iters,
            lr,
            lr_final_frac,
            batch_size,
            seed,
            flat_ablation,
            single_scale_adaln,
        } => {
            let variant = if flat_ablation {
                Variant::Flat
            } else if single_scale_adaln {
                Variant::SingleScaleAdaln
            } else {
                Variant::Hierarchical
            };
            let overrides = TrainOverrides { iters, lr, lr_final_frac, batch_size, seed };
            cmd_train(
                config.as_deref(),
                &corpus,
                sidecar.as_deref(),
                &out,
                metrics.as_deref(),
                overrides,
                variant,
            )
            .map(|()| ExitCode::SUCCESS)
        }
        Command::Sample { ckpt, conditions, out, config, w_all, w_id, w_emo, w_lip, steps, seed } => {
            let overrides = GuidanceOverrides { w_all, w_id, w_emo, w_lip, steps };
            cmd_sample(&ckpt, &conditions, &out, config.as_deref(), overrides, seed)
                .map(|()| ExitCode::SUCCESS)
        }
        Command::Eval {
            config,
            ckpt,
            corpus,
            sidecar,
            out,
            use_oracle,
            batch,
            samples,
            steps,
            seed,
        } => cmd_eval(
            config.as_deref(),
            ckpt.as_deref(),
            &corpus,
            sidecar.as_deref(),
            out.as_deref(),
            use_oracle,
            batch,
            samples,
            steps,
            seed,
        )
        .map(|()| ExitCode::SUCCESS),
        Command::Verify { config, only, inject_fault } => {
            cmd_verify(config.as_deref(), only.as_deref(), inject_fault)
        }
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> anyhow::Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => std::env::var("HCDT_THREADS")
            .ok()
            .map(|v| v.parse::<usize>().context("HCDT_THREADS must be a positive integer"))
            .transpose()?
            .unwrap_or(1),
    };
    if n == 0 {
        bail!("--threads must be at least 1");
    }
    Ok(n)
}

fn default_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    config: Option<&Path>,
    out: &Path,
    sidecar: Option<&Path>,
    count: usize,
    start_index: u64,
) -> anyhow::Result<()> {
    if count == 0 {
        bail!("--count must be positive");
    }
    let cfg = ExperimentConfig::load(config)?;
    let gen = Generator::new(cfg.synth, cfg.state_space)?;
    let samples = gen.generate(start_index, count);
    let sidecar_path = sidecar.map(Path::to_path_buf).unwrap_or_else(|| default_suffix(out, ".jsonl"));
    synthdata::write_samples(out, &sidecar_path, &cfg.state_space, &samples)?;
    println!(
        "wrote {count} records to {} (sidecar {})",
        out.display(),
        sidecar_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOverrides {
    iters: Option<usize>,
    lr: Option<f64>,
    lr_final_frac: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
}

fn check_corpus_header(header: &CorpusHeader, space: &StateSpaceConfig) -> anyhow::Result<()> {
    if header.levels as usize != space.levels
        || header.frames as usize != space.frames
        || header.vocab != space.vocab
        || header.split as usize != space.split
    {
        bail!(
            "corpus header ({}×{} vocab {} split {}) does not match the configured state space \
             ({}×{} vocab {} split {})",
            header.levels,
            header.frames,
            header.vocab,
            header.split,
            space.levels,
            space.frames,
            space.vocab,
            space.split
        );
    }
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    corpus: &Path,
    sidecar: Option<&Path>,
    out: &Path,
    metrics: Option<&Path>,
    overrides: TrainOverrides,
    variant: Variant,
) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(v) = overrides.iters {
        cfg.train.iters = v;
    }
    if let Some(v) = overrides.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = overrides.lr_final_frac {
        cfg.train.lr_final_frac = v;
    }
    if let Some(v) = overrides.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = overrides.seed {
        cfg.train.seed = v;
    }
    cfg.train.validate()?;

    let sidecar_path =
        sidecar.map(Path::to_path_buf).unwrap_or_else(|| default_suffix(corpus, ".jsonl"));
    let (header, data) = synthdata::read_samples(corpus, &sidecar_path)?;
    check_corpus_header(&header, &cfg.state_space)?;

    let mut net = Network::new(cfg.network.clone(), cfg.state_space, variant, cfg.train.seed)?;
    let metrics_path =
        metrics.map(Path::to_path_buf).unwrap_or_else(|| default_suffix(out, ".metrics.csv"));
    let mut csv = BufWriter::new(
        File::create(&metrics_path)
            .with_context(|| format!("creating metrics file {}", metrics_path.display()))?,
    );
    let outcome = training::train_loop(&mut net, &data, &cfg.schedule, &cfg.train, Some(&mut csv))?;
    csv.flush()?;

    let mut f = BufWriter::new(
        File::create(out).with_context(|| format!("creating checkpoint {}", out.display()))?,
    );
    net.save(&mut f)?;
    f.flush()?;
    let last = outcome.rows.last().expect("at least one iteration");
    println!(
        "trained {} iterations ({:?}); final dse {:.6}, id {:.6}, total {:.6}; checkpoint {}, metrics {}",
        outcome.rows.len(),
        variant,
        last.dse_loss,
        last.id_loss,
        last.total_loss,
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

/// One line of a conditions file. Unknown keys are tolerated so gen-data
/// sidecar files double as condition inputs; null/missing fields mean the
/// condition is absent.
#[derive(Debug, Deserialize)]
struct ConditionRecord {
    #[serde(default)]
    lip: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    identity: Option<Vec<f64>>,
    #[serde(default)]
    emotions: Option<Vec<u16>>,
}

impl ConditionRecord {
    fn to_bundle(&self) -> anyhow::Result<ConditionBundle> {
        let lip = match &self.lip {
            None => None,
            Some(rows) => {
                let frames = rows.len();
                let dim = rows.first().map(Vec::len).unwrap_or(0);
                if rows.iter().any(|r| r.len() != dim) {
                    bail!("lip rows are ragged");
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Some(Array2::from_shape_vec((frames, dim), flat)?)
            }
        };
        Ok(ConditionBundle {
            lip,
            id: self.identity.as_ref().map(|v| Array1::from_vec(v.clone())),
            emo: self.emotions.clone(),
        })
    }
}

fn read_condition_records(path: &Path) -> anyhow::Result<Vec<ConditionRecord>> {
    let f = BufReader::new(
        File::open(path).with_context(|| format!("opening conditions {}", path.display()))?,
    );
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConditionRecord = serde_json::from_str(&line)
            .with_context(|| format!("conditions record {i} is not valid JSON"))?;
        out.push(rec);
    }
    if out.is_empty() {
        bail!("conditions file {} holds no records", path.display());
    }
    Ok(out)
}

struct GuidanceOverrides {
    w_all: Option<f64>,
    w_id: Option<f64>,
    w_emo: Option<f64>,
    w_lip: Option<f64>,
    steps: Option<usize>,
}

impl GuidanceOverrides {
    fn apply(&self, mut base: GuidanceConfig) -> GuidanceConfig {
        if let Some(v) = self.w_all {
            base.w_all = v;
        }
        if let Some(v) = self.w_id {
            base.w_id = v;
        }
        if let Some(v) = self.w_emo {
            base.w_emo = v;
        }
        if let Some(v) = self.w_lip {
            base.w_lip = v;
        }
        if let Some(v) = self.steps {
            base.steps = v;
        }
        base
    }
}

fn cmd_sample(
    ckpt: &Path,
    conditions: &Path,
    out: &Path,
    config: Option<&Path>,
    overrides: GuidanceOverrides,
    seed: u64,
) -> anyhow::Result<()> {
    let mut f = BufReader::new(
        File::open(ckpt).with_context(|| format!("opening checkpoint {}", ckpt.display()))?,
    );
    let net = Network::load(&mut f)?;
    let cfg = ExperimentConfig::load(config)?;
    if config.is_some() && *net.space() != cfg.state_space {
        bail!(
            "checkpoint state space {:?} does not match the config's {:?}",
            net.space(),
            cfg.state_space
        );
    }
    let gcfg = overrides.apply(cfg.guidance);
    gcfg.validate()?;
    let records = read_condition_records(conditions)?;
    let space = net.space().clone();
    let mut grids = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let bundle = rec.to_bundle()?;
        let grid = guidance::sample(&net, &space, &bundle, &cfg.schedule, &gcfg, seed.wrapping_add(i as u64))?;
        grids.push(grid);
    }
    let header = CorpusHeader {
        levels: space.levels as u32,
        frames: space.frames as u32,
        vocab: space.vocab,
        split: space.split as u32,
    };
    write_corpus(out, header, &grids)?;
    println!("sampled {} grids to {}", grids.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

enum EvalScorer<'a> {
    Net(&'a Network),
    Oracle(&'a Generator),
}

impl Scorer for EvalScorer<'_> {
    fn score(
        &self,
        grid: &TokenGrid,
        t: f64,
        bundle: &ConditionBundle,
        sched: &NoiseSchedule,
    ) -> hierdiff_core::Result<hierdiff_core::diffusion::ScoreField> {
        match self {
            EvalScorer::Net(n) => n.score(grid, t, bundle, sched),
            EvalScorer::Oracle(g) => g.oracle_score(grid, t, bundle, sched),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: Option<&Path>,
    ckpt: Option<&Path>,
    corpus: &Path,
    sidecar: Option<&Path>,
    out: Option<&Path>,
    use_oracle: bool,
    batch: usize,
    samples: usize,
    steps: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let sidecar_path =
        sidecar.map(Path::to_path_buf).unwrap_or_else(|| default_suffix(corpus, ".jsonl"));
    let (header, data) = synthdata::read_samples(corpus, &sidecar_path)?;
    check_corpus_header(&header, &cfg.state_space)?;
    if data.is_empty() {
        bail!("corpus {} holds no records", corpus.display());
    }
    let gen = Generator::new(cfg.synth, cfg.state_space)?;
    let sched = cfg.schedule;

    let net = match (use_oracle, ckpt) {
        (true, _) => None,
        (false, Some(p)) => {
            let mut f = BufReader::new(
                File::open(p).with_context(|| format!("opening checkpoint {}", p.display()))?,
            );
            let net = Network::load(&mut f)?;
            if *net.space() != cfg.state_space {
                bail!(
                    "checkpoint state space {:?} does not match the config's {:?}",
                    net.space(),
                    cfg.state_space
                );
            }
            Some(net)
        }
        (false, None) => bail!("--ckpt is required unless --use-oracle is set"),
    };
    let scorer = match &net {
        Some(n) => EvalScorer::Net(n),
        None => EvalScorer::Oracle(&gen),
    };

    let rows = eval_metrics(&scorer, &gen, &data, &sched, batch, samples, steps, seed)?;

    let mut text = String::from("metric,value\n");
    for (k, v) in &rows {
        text.push_str(&format!("{k},{v}\n"));
    }
    match out {
        Some(p) => {
            std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
            println!("wrote {} metrics to {}", rows.len(), p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// All eval metrics as (name, value) rows, in a fixed order.
#[allow(clippy::too_many_arguments)]
fn eval_metrics(
    scorer: &EvalScorer<'_>,
    gen: &Generator,
    data: &[SynthSample],
    sched: &NoiseSchedule,
    batch: usize,
    samples: usize,
    steps: usize,
    seed: u64,
) -> anyhow::Result<Vec<(String, f64)>> {
    let space = *gen.space();
    let mut rows = Vec::new();

    // Held-out score-entropy loss versus the oracle on the same batch.
    let eval_batch = make_eval_batch(data, sched, batch, seed, 0.10, 0.10)?;
    let dse_model = mean_dse(&eval_batch, sched, |g, t, b| scorer.score(g, t, b, sched))?;
    let dse_oracle = mean_dse(&eval_batch, sched, |g, t, b| gen.oracle_score(g, t, b, sched))?;
    rows.push(("heldout_dse".into(), dse_model));
    rows.push(("heldout_dse_oracle".into(), dse_oracle));
    rows.push(("dse_ratio".into(), dse_model / dse_oracle));

    // Single-step argmax unmasking accuracy at σ̄ = ln 2, against the
    // Bayes-optimal rate from oracle scores.
    let t_star = sched.time_for_sigma_bar(2f64.ln())?;
    let n_acc = samples.min(data.len());
    let mut correct = vec![0u64; space.levels];
    let mut bayes = vec![0u64; space.levels];
    let mut totals = vec![0u64; space.levels];
    for (i, sample) in data.iter().take(n_acc).enumerate() {
        let corrupted = hierdiff_core::diffusion::forward_sample(
            &sample.grid,
            sched,
            t_star,
            seed ^ (0xACC + i as u64),
        )?;
        let bundle = sample.bundle();
        let field = scorer.score(&corrupted, t_star, &bundle, sched)?;
        let oracle_field = gen.oracle_score(&corrupted, t_star, &bundle, sched)?;
        for r in 0..space.levels {
            for j in 0..space.frames {
                if !corrupted.is_masked(r, j) {
                    continue;
                }
                totals[r] += 1;
                let truth = sample.grid.get(r, j);
                if argmax(&field.scores, r, j, space.vocab as usize) == truth {
                    correct[r] += 1;
                }
                if argmax(&oracle_field.scores, r, j, space.vocab as usize) == truth {
                    bayes[r] += 1;
                }
            }
        }
    }
    for r in 0..space.levels {
        let denom = totals[r].max(1) as f64;
        rows.push((format!("argmax_accuracy_level{r}"), correct[r] as f64 / denom));
        rows.push((format!("bayes_accuracy_level{r}"), bayes[r] as f64 / denom));
    }

    // Sample TV distance on enumerable state spaces.
    let states = (space.vocab as u128).checked_pow((space.levels * space.frames) as u32);
    if let Some(states) = states {
        if states <= 4096 {
            let tv = sampled_tv(scorer, gen, &data[0], sched, steps, 2000, seed)?;
            rows.push(("sample_tv".into(), tv));
        }
    }

    // Agreement of guided samples with the generator's deterministic rules.
    let gcfg = GuidanceConfig { w_all: 1.0, w_id: 0.0, w_emo: 0.0, w_lip: 0.0, steps };
    let mut lip_hits = 0u64;
    let mut lip_total = 0u64;
    let mut emo_hits = 0u64;
    let mut emo_total = 0u64;
    for (i, sample) in data.iter().take(n_acc).enumerate() {
        let grid = guidance::sample(
            scorer,
            &space,
            &sample.bundle(),
            sched,
            &gcfg,
            seed ^ (0xA9 + i as u64),
        )?;
        for j in 0..space.frames {
            lip_total += 1;
            if grid.get(0, j) == gen.low_rule(sample.phonemes[j], sample.speaker) {
                lip_hits += 1;
            }
            let block = j / space.emotion_downsample;
            for r in 1..space.levels {
                emo_total += 1;
                if grid.get(r, j) == gen.high_rule(r, grid.get(0, j), sample.emotions[block]) {
                    emo_hits += 1;
                }
            }
        }
    }
    rows.push(("lip_agreement".into(), lip_hits as f64 / lip_total.max(1) as f64));
    rows.push(("emotion_agreement".into(), emo_hits as f64 / emo_total.max(1) as f64));
    Ok(rows)
}

fn argmax(scores: &ndarray::Array3<f64>, r: usize, j: usize, vocab: usize) -> u16 {
    let mut best = 0usize;
    for v in 1..vocab {
        if scores[(r, j, v)] > scores[(r, j, best)] {
            best = v;
        }
    }
    best as u16
}

/// TV distance between `n` sampler draws conditioned on a record's full
/// bundle and the exact conditional law (which factorizes over columns once
/// every condition is observed).
fn sampled_tv(
    scorer: &EvalScorer<'_>,
    gen: &Generator,
    record: &SynthSample,
    sched: &NoiseSchedule,
    steps: usize,
    n: usize,
    seed: u64,
) -> anyhow::Result<f64> {
    let space = *gen.space();
    let v = space.vocab as usize;
    let cells = space.levels * space.frames;
    let outcomes = v.pow(cells as u32);
    let eps = gen.spec().noise_eps;

    // Exact conditional law of one full grid.
    let mix = |det: u16, val: usize| -> f64 {
        let base = eps / v as f64;
        if val == det as usize {
            1.0 - eps + base
        } else {
            base
        }
    };
    let prob_of = |grid: &TokenGrid| -> f64 {
        let mut p = 1.0;
        for j in 0..space.frames {
            let e = record.emotions[j / space.emotion_downsample];
            let a0 = grid.get(0, j);
            p *= mix(gen.low_rule(record.phonemes[j], record.speaker), a0 as usize);
            for r in 1..space.levels {
                p *= mix(gen.high_rule(r, a0, e), grid.get(r, j) as usize);
            }
        }
        p
    };

    let mut counts = vec![0u64; outcomes];
    let gcfg = GuidanceConfig { w_all: 1.0, w_id: 0.0, w_emo: 0.0, w_lip: 0.0, steps };
    let bundle = record.bundle();
    for i in 0..n {
        let grid = guidance::sample(scorer, &space, &bundle, sched, &gcfg, seed ^ (0x7F00 + i as u64))?;
        let mut code = 0usize;
        for r in 0..space.levels {
            for j in 0..space.frames {
                code = code * v + grid.get(r, j) as usize;
            }
        }
        counts[code] += 1;
    }

    let mut tv = 0.0;
    let mut grid = TokenGrid::all_masked(space.levels, space.frames, space.vocab);
    for code in 0..outcomes {
        let mut rest = code;
        for r in (0..space.levels).rev() {
            for j in (0..space.frames).rev() {
                grid.set(r, j, (rest % v) as u16)?;
                rest /= v;
            }
        }
        tv += (counts[code] as f64 / n as f64 - prob_of(&grid)).abs();
    }
    Ok(tv / 2.0)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(
    config: Option<&Path>,
    only: Option<&str>,
    fault: Option<FaultArg>,
) -> anyhow::Result<ExitCode> {
    let mut all_ok = true;
    if let Some(path) = config {
        match ExperimentConfig::load(Some(path)) {
            Ok(_) => println!("PASS config-valid: {} parses and cross-validates", path.display()),
            Err(e) => {
                println!("FAIL config-valid: {e:#}");
                all_ok = false;
            }
        }
    }
    let fault = match fault {
        Some(FaultArg::NonMonotoneSchedule) => FaultInjection::NonMonotoneSchedule,
        None => FaultInjection::None,
    };
    let results = verify::run_battery(only, fault);
    if results.is_empty() && only.is_some() {
        bail!("no check matches --only {}", only.unwrap_or_default());
    }
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {} ({} ms): {}", r.name, r.millis, r.detail);
    }
    all_ok &= verify::all_passed(&results);
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
