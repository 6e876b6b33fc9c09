//! Synthetic in-context-learning tasks, the pretraining episode stream, and
//! the evaluation suite (accuracy, latent distances, demonstration
//! selection, latency).
//!
//! Tasks are mappings over a small alphabet: a random permutation π, or a
//! modular offset x ↦ (x+c) mod m. Episodes render each demonstration as
//! `[x, π(x), SEP]` (optionally padded) and the query as `[x, SEP, answer]`,
//! so the answer position is always structural: the row after the final
//! separator.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_with_trace, icl_forward, AlignPoint, ModelConfig, ModelParams, PromptContext,
};
use crate::rng::{stable_hash, substream};
use crate::shift_variants::{variant_forward, VariantParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Permutation,
    ModularOffset,
}

/// A bijective mapping over alphabet `{0, …, m−1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingTask {
    pub family: TaskFamily,
    pub alphabet: usize,
    mapping: Vec<usize>,
}

impl MappingTask {
    pub fn sample(family: TaskFamily, m: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        if m < 2 {
            return Err(Error::config("alphabet must have at least 2 symbols"));
        }
        let mapping = match family {
            TaskFamily::Permutation => {
                let mut table: Vec<usize> = (0..m).collect();
                table.shuffle(rng);
                table
            }
            TaskFamily::ModularOffset => {
                let c = rng.gen_range(1..m);
                (0..m).map(|x| (x + c) % m).collect()
            }
        };
        Ok(MappingTask {
            family,
            alphabet: m,
            mapping,
        })
    }

    /// Reproducible mapping from `(family, m, seed)`.
    pub fn from_seed(family: TaskFamily, m: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "mapping_task");
        Self::sample(family, m, &mut rng)
    }

    pub fn apply(&self, x: usize) -> usize {
        self.mapping[x]
    }

    pub fn is_bijection(&self) -> bool {
        let seen: HashSet<usize> = self.mapping.iter().copied().collect();
        seen.len() == self.alphabet && self.mapping.iter().all(|&y| y < self.alphabet)
    }

    /// Stable identifier for dataset files.
    pub fn task_id(&self) -> u64 {
        let mut bytes = vec![match self.family {
            TaskFamily::Permutation => 0u8,
            TaskFamily::ModularOffset => 1u8,
        }];
        bytes.extend((self.alphabet as u64).to_le_bytes());
        for &y in &self.mapping {
            bytes.extend((y as u64).to_le_bytes());
        }
        stable_hash(&bytes)
    }
}

/// One labeled pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub x: usize,
    pub y: usize,
    pub task_id: u64,
}

/// k demonstration pairs plus one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub demos: Vec<(usize, usize)>,
    pub query_x: usize,
    pub answer: usize,
}

/// Demonstration pairs from labeled samples.
pub fn sample_to_pairs(samples: &[Sample]) -> Vec<(usize, usize)> {
    samples.iter().map(|s| (s.x, s.y)).collect()
}

/// Reserved token ids and demonstration-block padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub sep: usize,
    pub pad: usize,
    /// Rendered length of one demonstration block (≥ 3; extra positions are
    /// filled with `pad`).
    pub block_len: usize,
}

impl TokenLayout {
    /// Unpadded blocks: `[x, y, SEP]`.
    pub fn compact(cfg: &ModelConfig) -> Self {
        TokenLayout {
            sep: cfg.vocab_size - 1,
            pad: cfg.vocab_size - 2,
            block_len: 3,
        }
    }

    pub fn padded(cfg: &ModelConfig, block_len: usize) -> Self {
        TokenLayout {
            block_len: block_len.max(3),
            ..Self::compact(cfg)
        }
    }

    /// Largest alphabet that avoids the reserved ids.
    pub fn max_alphabet(cfg: &ModelConfig) -> usize {
        cfg.vocab_size - 2
    }
}

/// Render to a prompt context: demos as padded blocks, query as
/// `[x, answer]` with the answer span on the final token. The query mirrors
/// the demonstration structure exactly — in a block `[x, y, SEP]` the output
/// directly follows the input, so the query input's own row is the one that
/// proposes the answer.
pub fn render_episode(ep: &Episode, layout: &TokenLayout) -> PromptContext {
    let icd_tokens = ep
        .demos
        .iter()
        .map(|&(x, y)| {
            let mut block = vec![x, y, layout.sep];
            block.resize(layout.block_len, layout.pad);
            block
        })
        .collect();
    PromptContext {
        icd_tokens,
        query_tokens: vec![ep.query_x, ep.answer],
        answer_span: (1, 2),
    }
}

/// Inverse of [`render_episode`].
pub fn parse_episode(ctx: &PromptContext, layout: &TokenLayout) -> Result<Episode> {
    let mut demos = Vec::with_capacity(ctx.icd_tokens.len());
    for block in &ctx.icd_tokens {
        if block.len() != layout.block_len || block[2] != layout.sep {
            return Err(Error::config("malformed demonstration block"));
        }
        if block[3..].iter().any(|&t| t != layout.pad) {
            return Err(Error::config("malformed demonstration padding"));
        }
        demos.push((block[0], block[1]));
    }
    let q = &ctx.query_tokens;
    if q.len() != 2 || ctx.answer_span != (1, 2) {
        return Err(Error::config("malformed query block"));
    }
    Ok(Episode {
        demos,
        query_x: q[0],
        answer: q[1],
    })
}

/// Prompt for greedy evaluation: the answer is omitted and `predict_row` is
/// the position whose logits propose it — the query input's own row.
pub fn render_eval_prompt(
    demos: &[(usize, usize)],
    query_x: usize,
    layout: &TokenLayout,
) -> (Vec<usize>, usize) {
    let mut tokens = Vec::with_capacity(demos.len() * layout.block_len + 1);
    for &(x, y) in demos {
        let start = tokens.len();
        tokens.extend([x, y, layout.sep]);
        tokens.resize(start + layout.block_len, layout.pad);
    }
    tokens.push(query_x);
    let row = tokens.len() - 1;
    (tokens, row)
}

/// One pretraining episode with a freshly sampled mapping: demonstration
/// inputs are drawn with replacement and the query input always appears
/// among them, so the episode is solvable only by reading its own
/// demonstrations.
pub fn pretrain_episode(
    family: TaskFamily,
    m: usize,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(Episode, MappingTask)> {
    if k == 0 {
        return Err(Error::config("pretraining episodes need k ≥ 1"));
    }
    let task = MappingTask::sample(family, m, rng)?;
    let demos: Vec<(usize, usize)> = (0..k)
        .map(|_| {
            let x = rng.gen_range(0..m);
            (x, task.apply(x))
        })
        .collect();
    let query_x = demos[rng.gen_range(0..k)].0;
    let answer = task.apply(query_x);
    Ok((
        Episode {
            demos,
            query_x,
            answer,
        },
        task,
    ))
}

/// `n` labeled samples for one fixed task. When `allowed_xs` is given,
/// inputs are drawn from it only (for disjoint train/eval splits).
pub fn generate_task_dataset(
    task: &MappingTask,
    n: usize,
    rng: &mut ChaCha12Rng,
    allowed_xs: Option<&[usize]>,
) -> Result<Vec<Sample>> {
    let id = task.task_id();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = match allowed_xs {
            Some(pool) => {
                if pool.is_empty() {
                    return Err(Error::EmptyInput("generate_task_dataset: empty x pool"));
                }
                pool[rng.gen_range(0..pool.len())]
            }
            None => rng.gen_range(0..task.alphabet),
        };
        out.push(Sample {
            x,
            y: task.apply(x),
            task_id: id,
        });
    }
    Ok(out)
}

/// Answer by scanning the demonstrations for the query input.
pub fn table_lookup_oracle(ep: &Episode) -> Option<usize> {
    ep.demos
        .iter()
        .find(|&&(x, _)| x == ep.query_x)
        .map(|&(_, y)| y)
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcdSelection {
    Random,
    Nearest,
}

/// Choose `k` demonstrations from a pool. `Nearest` ranks by cosine
/// similarity between the query input's embedding and each pool input's
/// embedding; `Random` draws without replacement.
pub fn icd_selection(
    strategy: IcdSelection,
    pool: &[Sample],
    model: &ModelParams,
    query_x: usize,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Sample>> {
    if pool.len() < k {
        return Err(Error::config(format!(
            "pool of {} cannot supply {k} demonstrations",
            pool.len()
        )));
    }
    match strategy {
        IcdSelection::Random => {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(rng);
            Ok(idx[..k].iter().map(|&i| pool[i]).collect())
        }
        IcdSelection::Nearest => {
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb).max(1e-30)
            };
            let q = model.embed.row(query_x);
            let mut scored: Vec<(usize, f64)> = pool
                .iter()
                .enumerate()
                .map(|(i, s)| (i, cos(q, model.embed.row(s.x))))
                .collect();
            // stable ranking: similarity desc, pool order as tiebreak
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            Ok(scored[..k].iter().map(|&(i, _)| pool[i]).collect())
        }
    }
}

/// How the subject under evaluation answers a query.
pub enum EvalSubject<'a> {
    ZeroShot,
    KShotIcl {
        k: usize,
        selection: IcdSelection,
    },
    Variant(&'a VariantParams),
}

impl EvalSubject<'_> {
    pub fn mode_name(&self) -> String {
        match self {
            EvalSubject::ZeroShot => "zero_shot".into(),
            EvalSubject::KShotIcl { .. } => "k_shot_icl".into(),
            EvalSubject::Variant(v) => format!("{:?}", v.config.kind)
                .chars()
                .flat_map(|c| {
                    if c.is_uppercase() {
                        vec!['_', c.to_ascii_lowercase()]
                    } else {
                        vec![c]
                    }
                })
                .skip(1) // leading underscore
                .collect(),
        }
    }

    fn shots(&self) -> usize {
        match self {
            EvalSubject::KShotIcl { k, .. } => *k,
            _ => 0,
        }
    }
}

/// One evaluation result row (CSV-friendly; distance fields are filled by
/// [`alignment_distance_report`]).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub k: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_l2: Option<f64>,
    pub mean_cosine: Option<f64>,
    pub latency_s: f64,
    pub tokens: usize,
}

/// Greedy exact-match accuracy of a subject on a fixed task.
///
/// Demonstrations are drawn from a disjoint pool sampled with
/// `substream(seed, "eval_pool")`; queries with `substream(seed, "eval")`.
pub fn evaluate_accuracy(
    model: &ModelParams,
    task: &MappingTask,
    subject: &EvalSubject,
    n_eval: usize,
    seed: u64,
    layout: &TokenLayout,
) -> Result<EvalReport> {
    if n_eval == 0 {
        return Err(Error::EmptyInput("evaluate_accuracy: n_eval = 0"));
    }
    let mut pool_rng = substream(seed, "eval_pool");
    let pool = generate_task_dataset(task, 64.max(4 * task.alphabet), &mut pool_rng, None)?;
    let mut rng = substream(seed, "eval");

    let mut correct = 0usize;
    let mut tokens_per_query = 0usize;
    let start = Instant::now();
    for _ in 0..n_eval {
        let x = rng.gen_range(0..task.alphabet);
        let truth = task.apply(x);
        let pred = match subject {
            EvalSubject::ZeroShot => {
                let (tokens, row) = render_eval_prompt(&[], x, layout);
                tokens_per_query = tokens.len();
                let t = forward_with_trace(model, &tokens, None, AlignPoint::AfterFfn)?;
                argmax(t.logits.row(row))
            }
            EvalSubject::KShotIcl { k, selection } => {
                let demos = icd_selection(*selection, &pool, model, x, *k, &mut rng)?;
                let pairs: Vec<(usize, usize)> = demos.iter().map(|s| (s.x, s.y)).collect();
                let (tokens, row) = render_eval_prompt(&pairs, x, layout);
                tokens_per_query = tokens.len();
                let t = forward_with_trace(model, &tokens, None, AlignPoint::AfterFfn)?;
                argmax(t.logits.row(row))
            }
            EvalSubject::Variant(vp) => {
                let (tokens, row) = render_eval_prompt(&[], x, layout);
                tokens_per_query = tokens.len();
                let patch_row = vp.config.kind.uses_patch().then_some(row);
                let run = variant_forward(model, vp, &tokens, AlignPoint::AfterFfn, patch_row)?;
                argmax(run.trace.logits.row(row))
            }
        };
        if pred == truth {
            correct += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(EvalReport {
        mode: subject.mode_name(),
        k: subject.shots(),
        seed,
        accuracy: correct as f64 / n_eval as f64,
        mean_l2: None,
        mean_cosine: None,
        latency_s: elapsed / n_eval as f64,
        tokens: tokens_per_query,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Per-layer latent distances between a student and the k-shot ICL teacher,
/// measured at the position that generates the first answer token.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistanceReport {
    pub per_layer_l2: Vec<f64>,
    pub per_layer_cosine: Vec<f64>,
    pub mean_l2: f64,
    pub mean_cosine: f64,
    pub n_samples: usize,
}

pub enum StudentKind<'a> {
    ZeroShot,
    Variant(&'a VariantParams),
}

pub fn alignment_distance_report(
    model: &ModelParams,
    student: &StudentKind,
    task: &MappingTask,
    k: usize,
    n_samples: usize,
    seed: u64,
    layout: &TokenLayout,
    align: AlignPoint,
) -> Result<DistanceReport> {
    if n_samples == 0 {
        return Err(Error::EmptyInput("alignment_distance_report: no samples"));
    }
    let n_layers = model.config.n_layers;
    let mut rng = substream(seed, "distance");
    let mut l2 = vec![0.0; n_layers];
    let mut cosine = vec![0.0; n_layers];
    for _ in 0..n_samples {
        // teacher episode over the fixed task, demos drawn fresh
        let demos: Vec<(usize, usize)> = (0..k)
            .map(|_| {
                let x = rng.gen_range(0..task.alphabet);
                (x, task.apply(x))
            })
            .collect();
        let query_x = rng.gen_range(0..task.alphabet);
        let ep = Episode {
            demos,
            query_x,
            answer: task.apply(query_x),
        };
        let ctx = render_episode(&ep, layout);
        let row = ctx.answer_span.0 - 1; // the query-token row
        let teacher = icl_forward(model, &ctx, align, false)?;

        let student_trace = match student {
            StudentKind::ZeroShot => {
                forward_with_trace(model, &ctx.query_tokens, None, align)?
            }
            StudentKind::Variant(vp) => {
                let patch_row = vp.config.kind.uses_patch().then_some(row);
                variant_forward(model, vp, &ctx.query_tokens, align, patch_row)?.trace
            }
        };
        for i in 0..n_layers {
            let t = teacher.hidden[i].row(row);
            let s = student_trace.hidden[i].row(row);
            let dist: f64 = t
                .iter()
                .zip(s)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
            let nt: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ns: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            l2[i] += dist;
            cosine[i] += dot / (nt * ns).max(1e-30);
        }
    }
    for i in 0..n_layers {
        l2[i] /= n_samples as f64;
        cosine[i] /= n_samples as f64;
    }
    let mean_l2 = l2.iter().sum::<f64>() / n_layers as f64;
    let mean_cosine = cosine.iter().sum::<f64>() / n_layers as f64;
    Ok(DistanceReport {
        per_layer_l2: l2,
        per_layer_cosine: cosine,
        mean_l2,
        mean_cosine,
        n_samples,
    })
}

/// Wall-clock and token-count comparison: k-shot ICL versus a
/// demonstration-free variant on the same queries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencyReport {
    pub icl_latency_s: f64,
    pub variant_latency_s: f64,
    pub icl_tokens: usize,
    pub variant_tokens: usize,
    pub speedup: f64,
}

pub fn latency_bench(
    model: &ModelParams,
    variant: &VariantParams,
    task: &MappingTask,
    k: usize,
    n: usize,
    seed: u64,
    layout: &TokenLayout,
) -> Result<LatencyReport> {
    if n == 0 {
        return Err(Error::EmptyInput("latency_bench: n = 0"));
    }
    let mut rng = substream(seed, "latency");
    let queries: Vec<usize> = (0..n).map(|_| rng.gen_range(0..task.alphabet)).collect();
    let demo_sets: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let x = rng.gen_range(0..task.alphabet);
                    (x, task.apply(x))
                })
                .collect()
        })
        .collect();

    let mut icl_tokens = 0;
    let icl_start = Instant::now();
    for (q, demos) in queries.iter().zip(&demo_sets) {
        let (tokens, row) = render_eval_prompt(demos, *q, layout);
        icl_tokens = tokens.len();
        let t = forward_with_trace(model, &tokens, None, AlignPoint::AfterFfn)?;
        std::hint::black_box(argmax(t.logits.row(row)));
    }
    let icl_latency = icl_start.elapsed().as_secs_f64() / n as f64;

    let mut variant_tokens = 0;
    let var_start = Instant::now();
    for q in &queries {
        let (tokens, row) = render_eval_prompt(&[], *q, layout);
        variant_tokens = tokens.len();
        let patch_row = variant.config.kind.uses_patch().then_some(row);
        let run = variant_forward(model, variant, &tokens, AlignPoint::AfterFfn, patch_row)?;
        std::hint::black_box(argmax(run.trace.logits.row(row)));
    }
    let variant_latency = var_start.elapsed().as_secs_f64() / n as f64;

    Ok(LatencyReport {
        icl_latency_s: icl_latency,
        variant_latency_s: variant_latency,
        icl_tokens,
        variant_tokens,
        speedup: icl_latency / variant_latency,
    })
}

/// Fraction of queries whose k-shot prediction changes when the
/// demonstration order is permuted (recorded, not asserted).
pub fn order_sensitivity(
    model: &ModelParams,
    task: &MappingTask,
    k: usize,
    n: usize,
    seed: u64,
    layout: &TokenLayout,
) -> Result<f64> {
    let mut rng = substream(seed, "order");
    let mut changed = 0usize;
    for _ in 0..n {
        let mut demos: Vec<(usize, usize)> = (0..k)
            .map(|_| {
                let x = rng.gen_range(0..task.alphabet);
                (x, task.apply(x))
            })
            .collect();
        let q = rng.gen_range(0..task.alphabet);
        let (tokens, row) = render_eval_prompt(&demos, q, layout);
        let a = argmax(
            forward_with_trace(model, &tokens, None, AlignPoint::AfterFfn)?
                .logits
                .row(row),
        );
        demos.shuffle(&mut rng);
        let (tokens, row) = render_eval_prompt(&demos, q, layout);
        let b = argmax(
            forward_with_trace(model, &tokens, None, AlignPoint::AfterFfn)?
                .logits
                .row(row),
        );
        if a != b {
            changed += 1;
        }
    }
    Ok(changed as f64 / n as f64)
}

// ── File formats ────────────────────────────────────────────────────────

pub fn write_samples_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for s in samples {
        let line = serde_json::to_string(s)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_samples_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<EvalReport>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
