//! Experiment runner: a small command-line front end that reproduces every
//! desk-scale experiment from one config document and writes
//! machine-readable artifacts.
//!
//! Precedence is flags > config file > built-in defaults. Every artifact is
//! stamped with the resolved config's hash and the root seed; rerunning a
//! command with the same pair reproduces the same deterministic content
//! (wall-clock timings live only in `bench.csv`).
//!
//! Exit codes: 0 success, 1 verification failure, 2 config error,
//! 3 runtime abort.

use std::fs::File;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::{stable_hash, substream, substream_seed};
use crate::shift_variants::{build_variant, VariantConfig, VariantKind, VariantParams};
use crate::tasks::{
    generate_task_dataset, latency_bench, read_reports_csv, EvalReport, EvalSubject,
    IcdSelection, MappingTask, StudentKind, TaskFamily, TokenLayout,
};
use crate::training::{pretrain, train_loop, PretrainConfig, TrainConfig};
use crate::verify;

pub const CONFIG_VERSION: u32 = 1;

/// Which task the train/eval/ablate commands work on.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub family: TaskFamily,
    pub alphabet: usize,
    /// Seed of the fixed mapping (independent of the root seed, so the same
    /// task can be studied across seeds).
    pub task_seed: u64,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            family: TaskFamily::Permutation,
            alphabet: 8,
            task_seed: 1,
            train_samples: 200,
            eval_samples: 200,
        }
    }
}

/// One versioned document describing an experiment end to end. Unknown keys
/// are rejected; missing keys fall back to the toy defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub task: TaskSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 42,
            output_dir: PathBuf::from("runs/toy"),
            model: ModelConfig::toy(42),
            pretrain: PretrainConfig::defaults(42),
            train: TrainConfig::defaults(VariantConfig::new(VariantKind::Mimic), 42),
            task: TaskSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Derive all section seeds from the root seed via named sub-streams,
    /// and expand the output directory under `MIMIC_OUT` when set.
    pub fn resolve(&mut self) {
        // masked into i64 range so the resolved document stays TOML-serializable
        let derive = |name: &str| substream_seed(self.seed, name) & (i64::MAX as u64);
        self.model.seed = derive("model");
        self.pretrain.seed = derive("pretrain");
        self.train.seed = derive("train");
        if self.output_dir.is_relative() {
            if let Ok(root) = std::env::var("MIMIC_OUT") {
                self.output_dir = PathBuf::from(root).join(&self.output_dir);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.train.variant.validate(&self.model)?;
        let max_m = TokenLayout::max_alphabet(&self.model);
        if self.task.alphabet < 2 || self.task.alphabet > max_m {
            return Err(Error::config(format!(
                "task alphabet {} outside 2..={max_m}",
                self.task.alphabet
            )));
        }
        if self.pretrain.alphabet < 2 || self.pretrain.alphabet > max_m {
            return Err(Error::config(format!(
                "pretrain alphabet {} outside 2..={max_m}",
                self.pretrain.alphabet
            )));
        }
        if self.pretrain.k_max == 0 {
            return Err(Error::config("pretrain k_max must be at least 1"));
        }
        if self.task.train_samples < self.train.k_shots + 1 {
            return Err(Error::config("train_samples too small for k_shots"));
        }
        Ok(())
    }

    /// Stable fingerprint of the resolved document.
    pub fn hash(&self) -> u64 {
        stable_hash(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    pub fn task(&self) -> Result<MappingTask> {
        MappingTask::from_seed(self.task.family, self.task.alphabet, self.task.task_seed)
    }
}

// ── Argument surface ────────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(
    name = "mimic",
    version,
    about = "Shift-vector approximations of in-context learning: verification and desk-scale experiments"
)]
pub struct Cli {
    /// Experiment config file (TOML); missing keys use toy defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run all verification suites; exit 1 on any failure.
    Verify,
    /// Pretrain the base model on the fresh-mapping stream.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        target_accuracy: Option<f64>,
    },
    /// Distill one variant against the frozen base on the fixed task.
    Train {
        /// Variant kind (e.g. mimic, head_sharing_mu, lora).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        k_shots: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Alignment loss: l2 or kl.
        #[arg(long)]
        align_kind: Option<String>,
    },
    /// Accuracy (and latent distances) of zero-shot, k-shot, and every
    /// trained variant found in the output directory.
    Eval {
        /// Teacher shots for the ICL row and distance reports.
        #[arg(long)]
        k: Option<usize>,
        /// Evaluation queries per row.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Shot-sweep / variant-grid: one row per (variant, k, seed).
    Ablate {
        /// Comma-separated variant kinds.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Comma-separated teacher shot counts.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        /// Comma-separated replicate seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Wall-clock and token-count comparison against k-shot prompting.
    Bench {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        /// Rendered demonstration block length (padded).
        #[arg(long)]
        block_len: Option<usize>,
    },
    /// Summarize the artifacts in the output directory.
    Report,
}

fn parse_kind(s: &str) -> Result<VariantKind> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::config(format!("unknown variant kind `{s}`")))
}

fn kind_name(kind: VariantKind) -> String {
    serde_json::to_value(kind)
        .expect("kind serializes")
        .as_str()
        .expect("kind is a string")
        .to_string()
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        _ => 3,
    }
}

/// Parse `std::env::args`, execute, and return the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }

    match cli.command {
        Command::Verify => {
            cfg.resolve();
            cfg.validate()?;
            prepare_out(&cfg)?;
            cmd_verify(&cfg)
        }
        Command::Pretrain {
            steps,
            target_accuracy,
        } => {
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            if let Some(a) = target_accuracy {
                cfg.pretrain.target_accuracy = Some(a);
            }
            cfg.resolve();
            cfg.validate()?;
            prepare_out(&cfg)?;
            cmd_pretrain(&cfg)
        }
        Command::Train {
            variant,
            epochs,
            k_shots,
            lambda,
            align_kind,
        } => {
            if let Some(v) = &variant {
                cfg.train.variant = VariantConfig::new(parse_kind(v)?);
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(k) = k_shots {
                cfg.train.k_shots = k;
            }
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            if let Some(a) = &align_kind {
                cfg.train.align_kind = serde_json::from_value(serde_json::Value::String(
                    a.clone(),
                ))
                .map_err(|_| Error::config(format!("unknown align kind `{a}`")))?;
            }
            cfg.resolve();
            cfg.validate()?;
            prepare_out(&cfg)?;
            cmd_train(&cfg)
        }
        Command::Eval { k, n } => {
            cfg.resolve();
            cfg.validate()?;
            prepare_out(&cfg)?;
            cmd_eval(&cfg, k, n)
        }
        Command::Ablate {
            variants,
            shots,
            seeds,
            epochs,
            n,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.resolve();
            cfg.validate()?;
            prepare_out(&cfg)?;
            let kinds = match variants {
                Some(vs) => vs
                    .iter()
                    .map(|s| parse_kind(s))
                    .collect::<Result<Vec<_>>>()?,
                None => vec![
                    VariantKind::Mimic,
                    VariantKind::HeadSharingMu,
                    VariantKind::QuerySharingMu,
                ],
            };
            let shots = shots.unwrap_or_else(|| vec![1, 4, 8]);
            let seeds = seeds.unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
            cmd_ablate(&cfg, &kinds, &shots, &seeds, n)
        }
        Command::Bench { k, n, block_len } => {
            cfg.resolve();
            cfg.validate()?;
            prepare_out(&cfg)?;
            cmd_bench(&cfg, k.unwrap_or(8), n.unwrap_or(50), block_len.unwrap_or(6))
        }
        Command::Report => {
            cfg.resolve();
            prepare_out(&cfg)?;
            cmd_report(&cfg)
        }
    }
}

/// Create the output directory and record the resolved config beside the
/// artifacts it produced.
fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let doc = toml::to_string_pretty(cfg)
        .map_err(|e| Error::config(format!("config serialize error: {e}")))?;
    std::fs::write(
        cfg.out_path("config.toml"),
        format!("# config_hash={:016x} seed={}\n{doc}", cfg.hash(), cfg.seed),
    )?;
    Ok(())
}

fn stamp(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={:016x} seed={}", cfg.hash(), cfg.seed)
}

fn write_stamped_reports(
    cfg: &ExperimentConfig,
    path: &Path,
    reports: &[EvalReport],
) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", stamp(cfg))?;
    let mut w = csv::Writer::from_writer(f);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Atomic-enough checkpoint write: a failed run never clobbers the last
/// good artifact.
fn write_via_temp(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ── Subcommands ─────────────────────────────────────────────────────────

pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<i32> {
    let report = verify::run_all(cfg.seed)?;
    for s in &report.suites {
        let status = if s.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<24} {} ({:.2}s)", s.name, s.detail, s.runtime_s);
    }
    let doc = serde_json::json!({
        "config_hash": format!("{:016x}", cfg.hash()),
        "seed": cfg.seed,
        "passed": report.passed,
        "suites": report.suites,
    });
    std::fs::write(
        cfg.out_path("verify.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    Ok(if report.passed { 0 } else { 1 })
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<i32> {
    let mut model = ModelParams::init(&cfg.model)?;
    let layout = TokenLayout::compact(&cfg.model);
    println!(
        "pretraining base: {} params, up to {} steps",
        model.num_params(),
        cfg.pretrain.steps
    );
    let log = pretrain(&mut model, &cfg.pretrain, &layout)?;

    let base_path = cfg.out_path("base.json");
    let tmp = cfg.out_path("base.json.tmp");
    model.save(&tmp)?;
    std::fs::rename(&tmp, &base_path)?;

    let log_path = cfg.out_path("pretrain_log.jsonl");
    write_log_stamped(cfg, &log_path, |f| {
        for r in &log {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    })?;

    let final_acc = log.iter().rev().find_map(|r| r.eval_accuracy);
    println!(
        "done after {} steps; streamed-episode accuracy {}",
        log.len(),
        final_acc
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|| "n/a".into())
    );
    println!("checkpoint: {}", base_path.display());
    Ok(0)
}

fn write_log_stamped(
    cfg: &ExperimentConfig,
    path: &Path,
    body: impl FnOnce(&mut File) -> Result<()>,
) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", stamp(cfg))?;
    body(&mut f)
}

fn load_base(cfg: &ExperimentConfig) -> Result<ModelParams> {
    let p = cfg.out_path("base.json");
    if !p.exists() {
        return Err(Error::Checkpoint(format!(
            "no base checkpoint at {}; run `mimic pretrain` first",
            p.display()
        )));
    }
    ModelParams::load(&p)
}

/// Serialized trained-variant artifact.
#[derive(Serialize, Deserialize)]
pub struct VariantCheckpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub variant: VariantParams,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<i32> {
    let base = load_base(cfg)?;
    if base.config != cfg.model {
        return Err(Error::Checkpoint(
            "base checkpoint was pretrained with a different model config".into(),
        ));
    }
    let task = cfg.task()?;
    let mut data_rng = substream(cfg.seed, "dataset");
    let dataset = generate_task_dataset(&task, cfg.task.train_samples, &mut data_rng, None)?;
    let layout = TokenLayout::compact(&cfg.model);

    let name = kind_name(cfg.train.variant.kind);
    println!(
        "training {name}: {} samples, k={}, {} epochs",
        dataset.len(),
        cfg.train.k_shots,
        cfg.train.epochs
    );
    let outcome = train_loop(&base, &dataset, &cfg.train, &layout)?;

    let ckpt = VariantCheckpoint {
        version: CONFIG_VERSION,
        config_hash: format!("{:016x}", cfg.hash()),
        seed: cfg.seed,
        variant: outcome.variant,
    };
    write_via_temp(
        &cfg.out_path(&format!("variant_{name}.json")),
        &serde_json::to_string(&ckpt)?,
    )?;
    write_log_stamped(cfg, &cfg.out_path(&format!("train_{name}.jsonl")), |f| {
        for r in &outcome.log {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    })?;

    let last = outcome.log.last().expect("at least one step");
    println!(
        "done: {} steps, final align {:.4e}, gt {:.4e}, total {:.4e}",
        outcome.log.len(),
        last.align,
        last.gt,
        last.total
    );
    Ok(0)
}

fn trained_variants(cfg: &ExperimentConfig) -> Result<Vec<VariantCheckpoint>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&cfg.output_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("variant_") && name.ends_with(".json") {
            let text = std::fs::read_to_string(&path)?;
            let ckpt: VariantCheckpoint = serde_json::from_str(&text)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
            out.push(ckpt);
        }
    }
    out.sort_by_key(|c| kind_name(c.variant.config.kind));
    Ok(out)
}

pub fn cmd_eval(cfg: &ExperimentConfig, k: Option<usize>, n: Option<usize>) -> Result<i32> {
    let base = load_base(cfg)?;
    let task = cfg.task()?;
    let layout = TokenLayout::compact(&cfg.model);
    let k = k.unwrap_or(cfg.train.k_shots);
    let n_eval = n.unwrap_or(cfg.task.eval_samples);
    let eval_seed = substream_seed(cfg.seed, "eval");

    let mut rows = Vec::new();
    let mut eval_one = |subject: &EvalSubject, with_distance: bool| -> Result<()> {
        let mut row = crate::tasks::evaluate_accuracy(&base, &task, subject, n_eval, eval_seed, &layout)?;
        row.latency_s = 0.0; // timing lives in bench.csv; keep this file deterministic
        if with_distance {
            let student = match subject {
                EvalSubject::ZeroShot => StudentKind::ZeroShot,
                EvalSubject::Variant(v) => StudentKind::Variant(v),
                EvalSubject::KShotIcl { .. } => unreachable!("no distance for the teacher"),
            };
            let d = crate::tasks::alignment_distance_report(
                &base,
                &student,
                &task,
                k,
                n_eval.min(200),
                eval_seed,
                &layout,
                crate::model::AlignPoint::AfterFfn,
            )?;
            row.mean_l2 = Some(d.mean_l2);
            row.mean_cosine = Some(d.mean_cosine);
        }
        rows.push(row);
        Ok(())
    };

    eval_one(&EvalSubject::ZeroShot, true)?;
    eval_one(
        &EvalSubject::KShotIcl {
            k,
            selection: IcdSelection::Random,
        },
        false,
    )?;
    let ckpts = trained_variants(cfg)?;
    for ckpt in &ckpts {
        eval_one(&EvalSubject::Variant(&ckpt.variant), true)?;
    }

    write_stamped_reports(cfg, &cfg.out_path("eval.csv"), &rows)?;
    println!("{:<20} {:>3} {:>9} {:>12} {:>12}", "mode", "k", "accuracy", "mean_l2", "mean_cos");
    for r in &rows {
        println!(
            "{:<20} {:>3} {:>9.3} {:>12} {:>12}",
            r.mode,
            r.k,
            r.accuracy,
            r.mean_l2.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
            r.mean_cosine.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
        );
    }
    Ok(0)
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    kinds: &[VariantKind],
    shots: &[usize],
    seeds: &[u64],
    n: Option<usize>,
) -> Result<i32> {
    let base = load_base(cfg)?;
    let task = cfg.task()?;
    let layout = TokenLayout::compact(&cfg.model);
    let n_eval = n.unwrap_or(cfg.task.eval_samples);

    let mut rows = Vec::new();
    for &seed in seeds {
        let mut data_rng = substream(seed, "dataset");
        let dataset = generate_task_dataset(&task, cfg.task.train_samples, &mut data_rng, None)?;
        let eval_seed = substream_seed(seed, "ablate_eval");
        for &k in shots {
            let mut icl_row = crate::tasks::evaluate_accuracy(
                &base,
                &task,
                &EvalSubject::KShotIcl {
                    k,
                    selection: IcdSelection::Random,
                },
                n_eval,
                eval_seed,
                &layout,
            )?;
            icl_row.seed = seed;
            icl_row.latency_s = 0.0;
            rows.push(icl_row);

            for &kind in kinds {
                let mut tc = cfg.train.clone();
                tc.variant = VariantConfig::new(kind);
                tc.k_shots = k;
                tc.seed = substream_seed(seed, "ablate_train");
                let outcome = train_loop(&base, &dataset, &tc, &layout)?;
                let mut row = crate::tasks::evaluate_accuracy(
                    &base,
                    &task,
                    &EvalSubject::Variant(&outcome.variant),
                    n_eval,
                    eval_seed,
                    &layout,
                )?;
                row.seed = seed;
                row.k = k; // teacher shots the variant was distilled from
                row.latency_s = 0.0;
                rows.push(row);
                println!(
                    "seed {seed} k {k} {:<20} accuracy {:.3}",
                    kind_name(kind),
                    row_last(&rows).accuracy
                );
            }
        }
    }
    write_stamped_reports(cfg, &cfg.out_path("ablate.csv"), &rows)?;
    println!("{} rows written to ablate.csv", rows.len());
    Ok(0)
}

fn row_last(rows: &[EvalReport]) -> &EvalReport {
    rows.last().expect("nonempty")
}

#[derive(Serialize, Deserialize)]
struct BenchRow {
    mode: String,
    k: usize,
    block_len: usize,
    icl_tokens: usize,
    variant_tokens: usize,
    icl_latency_s: f64,
    variant_latency_s: f64,
    speedup: f64,
}

pub fn cmd_bench(cfg: &ExperimentConfig, k: usize, n: usize, block_len: usize) -> Result<i32> {
    let base = load_base(cfg)?;
    let task = cfg.task()?;
    let layout = TokenLayout::padded(&cfg.model, block_len);

    // prefer the trained shift variant; fall back to neutral (same cost)
    let trained = trained_variants(cfg)?
        .into_iter()
        .find(|c| c.variant.config.kind == VariantKind::Mimic);
    let variant = match trained {
        Some(c) => c.variant,
        None => build_variant(&VariantConfig::new(VariantKind::Mimic), &cfg.model)?,
    };

    let rep = latency_bench(&base, &variant, &task, k, n, cfg.seed, &layout)?;
    let expect_icl = k * layout.block_len + 1;
    if rep.icl_tokens != expect_icl || rep.variant_tokens != 1 {
        return Err(Error::config(format!(
            "token accounting violated: icl {} (expected {expect_icl}), variant {} (expected 1)",
            rep.icl_tokens, rep.variant_tokens
        )));
    }

    let row = BenchRow {
        mode: "mimic_vs_icl".into(),
        k,
        block_len: layout.block_len,
        icl_tokens: rep.icl_tokens,
        variant_tokens: rep.variant_tokens,
        icl_latency_s: rep.icl_latency_s,
        variant_latency_s: rep.variant_latency_s,
        speedup: rep.speedup,
    };
    let mut f = File::create(cfg.out_path("bench.csv"))?;
    writeln!(f, "{}", stamp(cfg))?;
    let mut w = csv::Writer::from_writer(f);
    w.serialize(&row)?;
    w.flush()?;

    println!(
        "k={k}: {} tokens vs {} tokens, {:.1}× speedup ({:.3}ms vs {:.3}ms per query)",
        rep.icl_tokens,
        rep.variant_tokens,
        rep.speedup,
        rep.icl_latency_s * 1e3,
        rep.variant_latency_s * 1e3
    );
    Ok(0)
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<i32> {
    let dir = &cfg.output_dir;
    let mut found = false;

    let verify_path = cfg.out_path("verify.json");
    if verify_path.exists() {
        found = true;
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&verify_path)?)?;
        println!(
            "verify: {}",
            if doc["passed"].as_bool() == Some(true) {
                "all suites passed"
            } else {
                "FAILURES recorded"
            }
        );
    }
    let base_path = cfg.out_path("base.json");
    if base_path.exists() {
        found = true;
        let model = ModelParams::load(&base_path)?;
        println!(
            "base: {} params, checksum {:016x}",
            model.num_params(),
            model.checksum()
        );
    }
    for csv_name in ["eval.csv", "ablate.csv"] {
        let p = cfg.out_path(csv_name);
        if !p.exists() {
            continue;
        }
        found = true;
        let rows = read_reports_csv(&p)?;
        println!("{csv_name}: {} rows", rows.len());
        // mean accuracy per (mode, k)
        let mut groups: Vec<(String, usize, Vec<f64>)> = Vec::new();
        for r in &rows {
            match groups
                .iter_mut()
                .find(|(m, k, _)| *m == r.mode && *k == r.k)
            {
                Some((_, _, accs)) => accs.push(r.accuracy),
                None => groups.push((r.mode.clone(), r.k, vec![r.accuracy])),
            }
        }
        for (mode, k, accs) in &groups {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            println!("  {mode:<20} k={k} mean accuracy {mean:.3} over {} seeds", accs.len());
        }
    }
    let bench_path = cfg.out_path("bench.csv");
    if bench_path.exists() {
        found = true;
        let text = std::fs::read_to_string(&bench_path)?;
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        for rec in r.deserialize::<BenchRow>() {
            let b = rec?;
            println!(
                "bench: k={} speedup {:.1}× ({} vs {} tokens)",
                b.k, b.speedup, b.icl_tokens, b.variant_tokens
            );
        }
    }
    if !found {
        return Err(Error::config(format!(
            "no artifacts under {}; run verify/pretrain/… first",
            dir.display()
        )));
    }
    Ok(0)
}
