//! Self-contained verification suites: the attention decomposition identity,
//! the μ contract, neutral-init equivalence of every variant, and gradient
//! checks of the differentiable kernels. The `verify` subcommand runs all of
//! them and fails loudly on any violation.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{decomposed_icl_sa, mu, partition_terms, scaled_scores};
use crate::error::Result;
use crate::model::{forward_with_trace, AlignPoint, ModelConfig, ModelParams};
use crate::numerics::{causal_mask, grad_check, log_sum_exp, Tape, Tensor, Var};
use crate::rng::substream;
use crate::shift_variants::{build_variant, variant_forward, VariantConfig, VariantKind};

/// Result of one verification suite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    /// Worst deviation observed, where the suite measures one.
    pub max_abs_diff: Option<f64>,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteOutcome>,
}

fn outcome(
    name: &str,
    passed: bool,
    detail: String,
    max_abs_diff: Option<f64>,
    start: Instant,
) -> SuiteOutcome {
    SuiteOutcome {
        name: name.into(),
        passed,
        detail,
        max_abs_diff,
        runtime_s: start.elapsed().as_secs_f64(),
    }
}

fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Full-context attention equals the μ-mixture of the two segment
/// attentions, over 100 random instances.
pub fn suite_decomposition(seed: u64) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let mut rng = substream(seed, "verify_decomposition");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d_h = 2 * rng.gen_range(1..=16); // ≤ 32
        let l_d = rng.gen_range(1..=16);
        let l_q = rng.gen_range(1..=8);
        let q: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k_d = rand_matrix(l_d, d_h, &mut rng);
        let v_d = rand_matrix(l_d, d_h, &mut rng);
        let k = rand_matrix(l_q, d_h, &mut rng);
        let v = rand_matrix(l_q, d_h, &mut rng);
        let rep = decomposed_icl_sa(&q, &k_d, &v_d, &k, &v)?;
        worst = worst.max(rep.max_abs_diff);
    }
    let passed = worst <= 1e-9;
    Ok(outcome(
        "decomposition_identity",
        passed,
        format!("100 instances, max |combined − full| = {worst:.3e}"),
        Some(worst),
        start,
    ))
}

/// μ lies in (0,1) when both segments are nonempty, is exactly zero without
/// demonstrations, and strictly increases when demonstration scores get a
/// uniform boost.
pub fn suite_mu_bounds(seed: u64) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let mut rng = substream(seed, "verify_mu");
    let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut failures = Vec::new();
    for i in 0..200 {
        let d_h = rng.gen_range(2..=16);
        let l_d = rng.gen_range(1..=12);
        let l_q = rng.gen_range(1..=8);
        let q: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k_d = rand_matrix(l_d, d_h, &mut rng);
        let k = rand_matrix(l_q, d_h, &mut rng);

        let m = mu(&q, &k_d, &k)?;
        if !(m > 0.0 && m < 1.0) {
            failures.push(format!("instance {i}: μ = {m} outside (0,1)"));
        }
        let empty = Tensor::zeros(vec![0, d_h]);
        if mu(&q, &empty, &k)? != 0.0 {
            failures.push(format!("instance {i}: μ ≠ 0 at l_D = 0"));
        }
        // +δ on demonstration scores multiplies Z₁ by e^δ
        let (lz1, lz2) = partition_terms(&q, &k_d, &k)?;
        let lz1 = lz1.unwrap();
        for &delta in &[0.1, 0.5, 2.0] {
            let boosted = logistic(lz1 + delta - lz2);
            if boosted <= m {
                failures.push(format!("instance {i}: μ not increasing under +{delta}"));
            }
        }
        // cross-check against explicit boosted scores
        let mut s = scaled_scores(&q, &k_d)?;
        for x in &mut s {
            *x += 0.5;
        }
        let explicit = logistic(log_sum_exp(&s)? - lz2);
        if (explicit - logistic(lz1 + 0.5 - lz2)).abs() > 1e-12 {
            failures.push(format!("instance {i}: boost identity violated"));
        }
    }
    let passed = failures.is_empty();
    let detail = if passed {
        "200 instances: bounds, l_D = 0 case, and monotonicity hold".into()
    } else {
        failures.join("; ")
    };
    Ok(outcome("mu_contract", passed, detail, None, start))
}

/// Every variant at neutral initialization reproduces the frozen base
/// forward within 1e-12; patched task/function vectors at zero are
/// bit-equivalent.
pub fn suite_zero_shift(seed: u64) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let model = ModelParams::init(&ModelConfig::tiny(seed))?;
    let tokens = [3usize, 1, 4, 1, 5];
    let base = forward_with_trace(&model, &tokens, None, AlignPoint::AfterFfn)?;

    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for kind in VariantKind::ALL {
        let variant = build_variant(&VariantConfig::new(kind), &model.config)?;
        let patch_row = kind.uses_patch().then_some(tokens.len() - 1);
        let run = variant_forward(&model, &variant, &tokens, AlignPoint::AfterFfn, patch_row)?;
        let mut diff: f64 = 0.0;
        for (a, b) in base.hidden.iter().zip(&run.trace.hidden) {
            for (x, y) in a.data.iter().zip(&b.data) {
                diff = diff.max((x - y).abs());
            }
        }
        for (x, y) in base.logits.data.iter().zip(&run.trace.logits.data) {
            diff = diff.max((x - y).abs());
        }
        worst = worst.max(diff);
        if diff > 1e-12 {
            failures.push(format!("{kind:?}: max diff {diff:.3e}"));
        }
        if kind.uses_patch() {
            let bitwise = base
                .logits
                .data
                .iter()
                .zip(&run.trace.logits.data)
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if !bitwise {
                failures.push(format!("{kind:?}: zero patch not bit-equivalent"));
            }
        }
    }
    let passed = failures.is_empty();
    let detail = if passed {
        format!("9 variants, worst deviation {worst:.3e}")
    } else {
        failures.join("; ")
    };
    Ok(outcome("zero_shift_equivalence", passed, detail, Some(worst), start))
}

/// A differentiable kernel under test: name, input shape, and the function
/// mapping the input leaf to a scalar loss.
pub struct NamedCheck {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub f: Box<dyn Fn(&mut Tape, Var) -> Result<Var>>,
}

/// The standard battery: every nonlinear kernel the model relies on,
/// composed into a scalar via fixed random weights so the gradient is
/// nondegenerate.
pub fn named_grad_checks(seed: u64) -> Vec<NamedCheck> {
    let mut rng = substream(seed, "verify_grad_weights");
    let w_row = rand_matrix(1, 6, &mut rng);
    let w_mat = rand_matrix(3, 4, &mut rng);
    let gain = rand_matrix(1, 6, &mut rng);

    let weighted = move |tape: &mut Tape, y: Var, w: &Tensor| -> Result<Var> {
        let wv = tape.constant(w.clone());
        let p = tape.mul_elem(y, wv)?;
        Ok(tape.sum_all(p))
    };

    let w1 = w_row.clone();
    let w2 = w_row.clone();
    let w3 = w_row.clone();
    let w4 = w_row.clone();
    let w5 = w_row.clone();
    let w6 = w_row.clone();
    let g = gain.clone();
    let wm = w_mat.clone();
    vec![
        NamedCheck {
            name: "sigmoid",
            shape: vec![1, 6],
            f: Box::new(move |t, x| {
                let y = t.sigmoid(x);
                weighted(t, y, &w1)
            }),
        },
        NamedCheck {
            name: "silu",
            shape: vec![1, 6],
            f: Box::new(move |t, x| {
                let y = t.silu(x);
                weighted(t, y, &w2)
            }),
        },
        NamedCheck {
            name: "rms_norm",
            shape: vec![1, 6],
            f: Box::new(move |t, x| {
                let gv = t.constant(g.clone());
                let y = t.rms_norm(x, gv, 1e-6)?;
                weighted(t, y, &w3)
            }),
        },
        NamedCheck {
            name: "rope",
            shape: vec![3, 6],
            f: Box::new(move |t, x| {
                let y = t.rope(x, &[0, 1, 5])?;
                let s = t.sum_all(y);
                let q = t.mul_elem(s, s)?;
                let w = t.constant(w4.clone());
                let row = t.slice_rows(y, 0, 1)?;
                let p = t.mul_elem(row, w)?;
                let p = t.sum_all(p);
                t.add(q, p)
            }),
        },
        NamedCheck {
            name: "softmax_rows",
            shape: vec![2, 6],
            f: Box::new(move |t, x| {
                let y = t.softmax_rows(x)?;
                let row = t.slice_rows(y, 1, 1)?;
                weighted(t, row, &w5)
            }),
        },
        NamedCheck {
            name: "masked_softmax_rows",
            shape: vec![4, 4],
            f: Box::new(move |t, x| {
                let mask = causal_mask(4, 4, None);
                let y = t.masked_softmax_rows(x, &mask)?;
                let s = t.sum_all(y);
                let row = t.slice_rows(y, 3, 1)?;
                let wv = t.constant(Tensor::matrix(1, 4, vec![0.3, -0.9, 1.4, 0.2]).unwrap());
                let p = t.mul_elem(row, wv)?;
                let p = t.sum_all(p);
                t.add(s, p)
            }),
        },
        NamedCheck {
            name: "masked_logsumexp_rows",
            shape: vec![3, 5],
            f: Box::new(move |t, x| {
                let mask = causal_mask(3, 5, None);
                let y = t.masked_logsumexp_rows(x, &mask)?;
                Ok(t.sum_all(y))
            }),
        },
        NamedCheck {
            name: "log_softmax_rows",
            shape: vec![2, 6],
            f: Box::new(move |t, x| {
                let y = t.log_softmax_rows(x)?;
                let row = t.slice_rows(y, 0, 1)?;
                weighted(t, row, &w6)
            }),
        },
        NamedCheck {
            name: "matmul",
            shape: vec![2, 3],
            f: Box::new(move |t, x| {
                let wv = t.constant(wm.clone());
                let y = t.matmul(x, wv)?;
                let q = t.mul_elem(y, y)?;
                Ok(t.sum_all(q))
            }),
        },
        NamedCheck {
            name: "attention_core_mimic",
            shape: vec![2, 8],
            f: Box::new(move |t, x| {
                // x is the query projection; keys/values fixed
                let mut rng = substream(91, "verify_attn_core");
                let k = t.constant(rand_matrix(2, 8, &mut rng));
                let v = t.constant(rand_matrix(2, 8, &mut rng));
                let heads: Vec<crate::attention::MimicHeadVars> = (0..2)
                    .map(|_| crate::attention::MimicHeadVars {
                        f_w: t.constant(rand_matrix(4, 1, &mut rng)),
                        f_b: t.constant(Tensor::scalar(0.2)),
                        v: t.constant(rand_matrix(1, 4, &mut rng)),
                    })
                    .collect();
                let mask = causal_mask(2, 2, None);
                let y = crate::attention::attention_core(
                    t,
                    x,
                    k,
                    v,
                    2,
                    &crate::attention::AttnHook::Mimic(&heads),
                    Some(&[0, 1]),
                    &mask,
                    None,
                )?;
                let p = t.mul_elem(y, y)?;
                Ok(t.sum_all(p))
            }),
        },
        NamedCheck {
            name: "variant_trainables_tiny_forward",
            shape: vec![1, 1],
            f: Box::new(move |t, x| {
                // scale the mimic head's v by the input and push it through
                // a full tiny-model forward so every layer's adjoints fire
                let model = ModelParams::init(&ModelConfig::tiny(13)).unwrap();
                let mvars = model.load_on_tape(t, false);
                let mut rng = substream(17, "verify_variant_grad");
                let d_h = model.config.d_head();
                let heads: Vec<Vec<crate::attention::MimicHeadVars>> = (0..model
                    .config
                    .n_layers)
                    .map(|_| {
                        (0..model.config.n_heads)
                            .map(|_| {
                                let base = t.constant(rand_matrix(1, d_h, &mut rng));
                                let xs = t.matmul(x, base).unwrap();
                                crate::attention::MimicHeadVars {
                                    f_w: t.constant(rand_matrix(d_h, 1, &mut rng)),
                                    f_b: t.constant(Tensor::scalar(0.1)),
                                    v: xs,
                                }
                            })
                            .collect()
                    })
                    .collect();
                let hooks: Vec<crate::model::LayerHooks> = heads
                    .iter()
                    .map(|h| crate::model::LayerHooks {
                        attn: crate::attention::AttnHook::Mimic(h),
                        ..Default::default()
                    })
                    .collect();
                let tokens = [2usize, 7, 2];
                let mask = causal_mask(3, 3, None);
                let out = crate::model::forward_on_tape(
                    t,
                    &model.config,
                    &mvars,
                    &tokens,
                    &hooks,
                    &mask,
                    AlignPoint::AfterFfn,
                )?;
                let sq = t.mul_elem(out.logits, out.logits)?;
                Ok(t.sum_all(sq))
            }),
        },
    ]
}

/// Run each named check at `points` random inputs; a check passes when the
/// worst relative error stays within `tol`.
pub fn run_grad_checks(
    checks: &[NamedCheck],
    seed: u64,
    points: usize,
    tol: f64,
) -> Result<SuiteOutcome> {
    let start = Instant::now();
    let mut rng = substream(seed, "verify_grad_points");
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for c in checks {
        let numel: usize = c.shape.iter().product();
        let mut op_worst: f64 = 0.0;
        for _ in 0..points {
            let at = Tensor::new(
                c.shape.clone(),
                (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )?;
            let err = grad_check(&c.f, &at, 1e-6)?;
            op_worst = op_worst.max(err);
        }
        worst = worst.max(op_worst);
        if op_worst > tol {
            failures.push(format!("{}: relative error {op_worst:.3e}", c.name));
        }
    }
    let passed = failures.is_empty();
    let detail = if passed {
        format!("{} kernels × {points} points, worst relative error {worst:.3e}", checks.len())
    } else {
        failures.join("; ")
    };
    Ok(outcome("gradient_checks", passed, detail, Some(worst), start))
}

pub fn suite_gradients(seed: u64) -> Result<SuiteOutcome> {
    run_grad_checks(&named_grad_checks(seed), seed, 5, 1e-4)
}

/// End-to-end gradient oracle for every trainable variant: at `points`
/// random parameter settings per variant, the tape's gradient of the total
/// training loss is compared against central differences over *every*
/// trainable coordinate. Dropout is off, so the loss is a deterministic
/// function of the parameters.
pub fn suite_variant_gradients(seed: u64, points: usize, tol: f64) -> Result<SuiteOutcome> {
    use crate::tasks::{generate_task_dataset, Episode, MappingTask, TaskFamily, TokenLayout};
    use crate::training::{episode_gradients, eval_episode_loss, sample_episode, TrainConfig};

    let start = Instant::now();
    let kinds = [
        VariantKind::Mimic,
        VariantKind::HeadSharingMu,
        VariantKind::QuerySharingMu,
        VariantKind::LinearShift,
        VariantKind::LiveStyle,
        VariantKind::Lora,
    ];
    let model = ModelParams::init(&ModelConfig::tiny(seed))?;
    let layout = TokenLayout::compact(&model.config);
    let task = MappingTask::from_seed(TaskFamily::Permutation, 8, 1)?;
    let mut rng = substream(seed, "verify_variant_grad");
    let data = generate_task_dataset(&task, 12, &mut rng, None)?;

    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let eps = 1e-5;
    for kind in kinds {
        let cfg = {
            let mut c = TrainConfig::defaults(VariantConfig::new(kind), seed);
            c.k_shots = 2;
            c
        };
        let mut variant = build_variant(&cfg.variant, &model.config)?;
        let mut kind_worst: f64 = 0.0;
        for _ in 0..points {
            for t in variant.trainable_tensors_mut() {
                for x in t.data.iter_mut() {
                    *x = rng.gen_range(-0.3..0.3);
                }
            }
            let (icds, q) = sample_episode(&data, cfg.k_shots, &mut rng)?;
            let ep = Episode {
                demos: icds.iter().map(|s| (s.x, s.y)).collect(),
                query_x: q.x,
                answer: q.y,
            };
            let (_, grads) = episode_gradients(&model, &variant, &ep, &cfg, &layout)?;
            let n_tensors = variant.trainable_tensors().len();
            for ti in 0..n_tensors {
                for j in 0..grads[ti].len() {
                    let orig = variant.trainable_tensors()[ti].data[j];
                    variant.trainable_tensors_mut()[ti].data[j] = orig + eps;
                    let up = eval_episode_loss(&model, &variant, &ep, &cfg, &layout)?.total;
                    variant.trainable_tensors_mut()[ti].data[j] = orig - eps;
                    let down = eval_episode_loss(&model, &variant, &ep, &cfg, &layout)?.total;
                    variant.trainable_tensors_mut()[ti].data[j] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let analytic = grads[ti][j];
                    let rel = (numeric - analytic).abs()
                        / numeric.abs().max(analytic.abs()).max(1.0);
                    kind_worst = kind_worst.max(rel);
                }
            }
        }
        worst = worst.max(kind_worst);
        if kind_worst > tol {
            failures.push(format!("{kind:?}: relative error {kind_worst:.3e}"));
        }
    }
    let passed = failures.is_empty();
    let detail = if passed {
        format!(
            "{} variants × {points} points, all trainable coordinates, worst relative error {worst:.3e}",
            kinds.len()
        )
    } else {
        failures.join("; ")
    };
    Ok(outcome("variant_gradients", passed, detail, Some(worst), start))
}

/// All suites, in order. `passed` is the conjunction.
pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let suites = vec![
        suite_decomposition(seed)?,
        suite_mu_bounds(seed)?,
        suite_zero_shift(seed)?,
        suite_gradients(seed)?,
        suite_variant_gradients(seed, 2, 1e-4)?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport { seed, passed, suites })
}
