//! Self-attention, its exact decomposition over a segmented context, and the
//! learnable shift-vector head.
//!
//! Attention over a prompt `[X_D; X]` (demonstrations then query) splits
//! exactly into standard attention over the query prefix plus a
//! demonstration-dependent term, weighted by the normalized attention mass μ
//! the query places on the demonstrations. The shift head approximates the
//! demonstration term with a learnable direction `v` per head and a
//! query-dependent magnitude μ̃ derived from a linear map `f`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{sigmoid, Mask, Tape, Var};
use crate::numerics::tensor::{log_sum_exp, Tensor};
use crate::numerics::causal_mask;

/// Per-head projection weights. `wo` is shared across the heads of a layer
/// and lives with the caller.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadWeights {
    pub wq: Tensor, // d × d_h
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Per-head trainable pair: the magnitude map `f(q) = f_w·q + f_b`
/// approximating log Z₁, and the shift direction `v`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MimicHeadParams {
    pub f_w: Vec<f64>, // length d_h
    pub f_b: f64,
    pub v: Vec<f64>, // length d_h
}

impl MimicHeadParams {
    /// Neutral initialization: the shift contributes exactly zero, so a
    /// freshly wrapped model reproduces the frozen base bit for bit.
    pub fn zeros(d_head: usize) -> Self {
        MimicHeadParams {
            f_w: vec![0.0; d_head],
            f_b: 0.0,
            v: vec![0.0; d_head],
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.f_w.len() + 1
    }

    pub fn f(&self, q: &[f64]) -> f64 {
        self.f_w.iter().zip(q).map(|(w, x)| w * x).sum::<f64>() + self.f_b
    }
}

/// Everything the exact decomposition produces for one query vector.
#[derive(Clone, Debug)]
pub struct DecompositionReport {
    pub mu: f64,
    pub sa_query: Vec<f64>,
    pub sa_icd: Vec<f64>,
    pub combined: Vec<f64>,
    pub full_reference: Vec<f64>,
    pub max_abs_diff: f64,
}

/// Scaled dot-product scores: `(q·Kᵢ)/√d_h`.
pub fn scaled_scores(q: &[f64], k: &Tensor) -> Result<Vec<f64>> {
    if k.rows() == 0 {
        return Err(Error::EmptyInput("scaled_scores: empty K"));
    }
    if k.cols() != q.len() {
        return Err(Error::shape("scaled_scores", &[q.len()], &k.shape));
    }
    let scale = 1.0 / (q.len() as f64).sqrt();
    Ok((0..k.rows())
        .map(|i| k.row(i).iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect())
}

/// Softmax-weighted combination of `V` rows for a single query vector.
pub fn standard_sa(q: &[f64], k: &Tensor, v: &Tensor) -> Result<Vec<f64>> {
    if k.rows() != v.rows() {
        return Err(Error::shape("standard_sa: K/V row mismatch", &k.shape, &v.shape));
    }
    let scores = scaled_scores(q, k)?;
    let lse = log_sum_exp(&scores)?;
    let mut out = vec![0.0; v.cols()];
    for (i, &s) in scores.iter().enumerate() {
        let w = (s - lse).exp();
        for (o, &vv) in out.iter_mut().zip(v.row(i)) {
            *o += w * vv;
        }
    }
    Ok(out)
}

/// Log partition sums over the demonstration and query key segments:
/// `log Z₁` (None when there are no demonstrations) and `log Z₂`.
pub fn partition_terms(q: &[f64], k_d: &Tensor, k: &Tensor) -> Result<(Option<f64>, f64)> {
    let log_z2 = log_sum_exp(&scaled_scores(q, k)?)?;
    let log_z1 = if k_d.rows() == 0 {
        None
    } else {
        Some(log_sum_exp(&scaled_scores(q, k_d)?)?)
    };
    Ok((log_z1, log_z2))
}

/// Shift magnitude: `Z₁/(Z₁+Z₂)`, evaluated stably as
/// `logistic(log Z₁ − log Z₂)`. Zero when there are no demonstrations.
pub fn mu(q: &[f64], k_d: &Tensor, k: &Tensor) -> Result<f64> {
    let (log_z1, log_z2) = partition_terms(q, k_d, k)?;
    Ok(match log_z1 {
        Some(lz1) => sigmoid(lz1 - log_z2),
        None => 0.0,
    })
}

/// Exact decomposition of full-context attention into
/// `(1−μ)·SA(q,K,V) + μ·SA(q,K_D,V_D)`, checked against direct attention
/// over the concatenated keys and values.
pub fn decomposed_icl_sa(
    q: &[f64],
    k_d: &Tensor,
    v_d: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<DecompositionReport> {
    if k_d.rows() != v_d.rows() {
        return Err(Error::shape("decomposed_icl_sa: K_D/V_D rows", &k_d.shape, &v_d.shape));
    }
    let d_h = k.cols();
    let sa_query = standard_sa(q, k, v)?;
    let m = mu(q, k_d, k)?;
    let sa_icd = if k_d.rows() == 0 {
        vec![0.0; d_h]
    } else {
        standard_sa(q, k_d, v_d)?
    };
    let combined: Vec<f64> = sa_query
        .iter()
        .zip(&sa_icd)
        .map(|(&sq, &sd)| (1.0 - m) * sq + m * sd)
        .collect();

    // Reference: direct softmax attention over [K_D; K], [V_D; V].
    let l = k_d.rows() + k.rows();
    let mut k_cat = Vec::with_capacity(l * d_h);
    k_cat.extend_from_slice(&k_d.data);
    k_cat.extend_from_slice(&k.data);
    let mut v_cat = Vec::with_capacity(l * d_h);
    v_cat.extend_from_slice(&v_d.data);
    v_cat.extend_from_slice(&v.data);
    let full_reference = standard_sa(
        q,
        &Tensor::new(vec![l, d_h], k_cat)?,
        &Tensor::new(vec![l, v.cols()], v_cat)?,
    )?;

    let max_abs_diff = combined
        .iter()
        .zip(&full_reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    Ok(DecompositionReport {
        mu: m,
        sa_query,
        sa_icd,
        combined,
        full_reference,
        max_abs_diff,
    })
}

/// Shift-head attention for one query vector:
/// `SA(q,K,V) + logistic(f(q) − log Z₂)·v`.
pub fn mimic_sa(q: &[f64], k: &Tensor, v: &Tensor, params: &MimicHeadParams) -> Result<Vec<f64>> {
    let base = standard_sa(q, k, v)?;
    let log_z2 = log_sum_exp(&scaled_scores(q, k)?)?;
    let mu_tilde = sigmoid(params.f(q) - log_z2);
    Ok(base
        .iter()
        .zip(&params.v)
        .map(|(&b, &sv)| b + mu_tilde * sv)
        .collect())
}

// ── Tape-level attention (used by the transformer) ──────────────────────

/// Shift-head parameters as tape leaves: `f_w` is `d_h×1`, `f_b` scalar,
/// `v` is `1×d_h`.
#[derive(Clone, Copy, Debug)]
pub struct MimicHeadVars {
    pub f_w: Var,
    pub f_b: Var,
    pub v: Var,
}

/// Linear-map shift head: magnitude map plus `h: R^{d_h}→R^{d_h}`
/// (`h_w: d_h×d_h`, `h_b: 1×d_h`).
#[derive(Clone, Copy, Debug)]
pub struct LinearShiftHeadVars {
    pub f_w: Var,
    pub f_b: Var,
    pub h_w: Var,
    pub h_b: Var,
}

/// What, if anything, modifies the attention heads of a layer.
pub enum AttnHook<'a> {
    /// Plain multi-head attention.
    None,
    /// Per-head shift vector with query-dependent magnitude.
    Mimic(&'a [MimicHeadVars]),
    /// One magnitude map `g: R^d→R` shared by all heads; per-head `v`.
    /// `g_w` is `d×1`, `g_b` scalar, `v[h]` is `1×d_h`.
    HeadSharing { g_w: Var, g_b: Var, v: &'a [Var] },
    /// Per-head constant magnitude (`mu[h]` scalar) and direction `v[h]`.
    QuerySharing { mu: &'a [Var], v: &'a [Var] },
    /// Replace `v` by a trainable linear map of the query:
    /// output = `(1−μ̃)·SA + μ̃·h(q)`.
    LinearShift(&'a [LinearShiftHeadVars]),
}

/// Per-layer μ̃ probe filled during the forward pass, one `l×1` tensor per
/// head. Used by instrumentation tests and the distance reports.
#[derive(Default)]
pub struct MuProbe {
    pub per_head: Vec<Tensor>,
}

/// Multi-head causal attention over precomputed projections.
///
/// `q_full`, `k_full`, `v_full` are `l×d`; the result is the concatenated
/// head outputs (`l×d`), before the output projection. Rotary position
/// encoding is applied per head when `positions` is given.
pub fn attention_core(
    tape: &mut Tape,
    q_full: Var,
    k_full: Var,
    v_full: Var,
    n_heads: usize,
    hook: &AttnHook,
    positions: Option<&[usize]>,
    mask: &Mask,
    mu_probe: Option<&mut MuProbe>,
) -> Result<Var> {
    let d = tape.value(q_full).cols();
    if d % n_heads != 0 {
        return Err(Error::config(format!("d={d} not divisible by n_heads={n_heads}")));
    }
    let d_h = d / n_heads;
    let scale = 1.0 / (d_h as f64).sqrt();

    let mut qs = Vec::with_capacity(n_heads);
    let mut scores_per_head = Vec::with_capacity(n_heads);
    let mut sa_per_head = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut qh = tape.slice_cols(q_full, h * d_h, d_h)?;
        let mut kh = tape.slice_cols(k_full, h * d_h, d_h)?;
        let vh = tape.slice_cols(v_full, h * d_h, d_h)?;
        if let Some(pos) = positions {
            qh = tape.rope(qh, pos)?;
            kh = tape.rope(kh, pos)?;
        }
        let raw = tape.matmul_tb(qh, kh)?;
        let scores = tape.scale(raw, scale);
        let probs = tape.masked_softmax_rows(scores, mask)?;
        let sa = tape.matmul(probs, vh)?;
        qs.push(qh);
        scores_per_head.push(scores);
        sa_per_head.push(sa);
    }

    let mut probe_rows: Vec<Tensor> = Vec::new();
    let outs: Vec<Var> = match hook {
        AttnHook::None => sa_per_head,
        AttnHook::Mimic(heads) => {
            let mut outs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let p = &heads[h];
                let fq_raw = tape.matmul(qs[h], p.f_w)?;
                let fq = tape.add_scalar(fq_raw, p.f_b)?;
                let log_z2 = tape.masked_logsumexp_rows(scores_per_head[h], mask)?;
                let gap = tape.sub(fq, log_z2)?;
                let mu = tape.sigmoid(gap);
                probe_rows.push(tape.value(mu).clone());
                let shift = tape.matmul(mu, p.v)?;
                outs.push(tape.add(sa_per_head[h], shift)?);
            }
            outs
        }
        AttnHook::HeadSharing { g_w, g_b, v } => {
            let q_cat = tape.concat_cols(&qs)?;
            let gq_raw = tape.matmul(q_cat, *g_w)?;
            let gq = tape.add_scalar(gq_raw, *g_b)?;
            // One μ̃ per layer: compare g against the mean log Z₂ over heads.
            let mut lz_sum = tape.masked_logsumexp_rows(scores_per_head[0], mask)?;
            for &s in &scores_per_head[1..] {
                let lz = tape.masked_logsumexp_rows(s, mask)?;
                lz_sum = tape.add(lz_sum, lz)?;
            }
            let lz_mean = tape.scale(lz_sum, 1.0 / n_heads as f64);
            let gap = tape.sub(gq, lz_mean)?;
            let mu = tape.sigmoid(gap);
            let mut outs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                probe_rows.push(tape.value(mu).clone());
                let shift = tape.matmul(mu, v[h])?;
                outs.push(tape.add(sa_per_head[h], shift)?);
            }
            outs
        }
        AttnHook::QuerySharing { mu, v } => {
            let mut outs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let l = tape.value(sa_per_head[h]).rows();
                let mu_val = tape.value(mu[h]).item();
                probe_rows.push(Tensor::new(vec![l, 1], vec![mu_val; l])?);
                let shift = tape.matmul(mu[h], v[h])?; // 1×1 · 1×d_h
                let shift_row = tape.slice_rows(shift, 0, 1)?;
                outs.push(tape.add_row_broadcast(sa_per_head[h], shift_row)?);
            }
            outs
        }
        AttnHook::LinearShift(heads) => {
            let mut outs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let p = &heads[h];
                let fq_raw = tape.matmul(qs[h], p.f_w)?;
                let fq = tape.add_scalar(fq_raw, p.f_b)?;
                let log_z2 = tape.masked_logsumexp_rows(scores_per_head[h], mask)?;
                let gap = tape.sub(fq, log_z2)?;
                let mu = tape.sigmoid(gap);
                probe_rows.push(tape.value(mu).clone());
                let hq_raw = tape.matmul(qs[h], p.h_w)?;
                let hb_row = tape.slice_rows(p.h_b, 0, 1)?;
                let hq = tape.add_row_broadcast(hq_raw, hb_row)?;
                let neg_mu = tape.scale(mu, -1.0);
                let one_minus_mu = tape.add_const(neg_mu, 1.0);
                let base = tape.row_scale(sa_per_head[h], one_minus_mu)?;
                let shifted = tape.row_scale(hq, mu)?;
                outs.push(tape.add(base, shifted)?);
            }
            outs
        }
    };

    if let Some(probe) = mu_probe {
        probe.per_head = probe_rows;
    }
    tape.concat_cols(&outs)
}

/// Causal multi-head self-attention over an `l×d` input, per-head weights,
/// shared output projection, and optional shift-head parameters. No position
/// encoding; this is the reference entry point for identity checks.
pub fn multi_head_forward(
    x: &Tensor,
    weights: &[HeadWeights],
    wo: &Tensor,
    mimic: Option<&[MimicHeadParams]>,
) -> Result<Tensor> {
    let n_heads = weights.len();
    if n_heads == 0 {
        return Err(Error::EmptyInput("multi_head_forward: no heads"));
    }
    let d = x.cols();
    let d_h = weights[0].wq.cols();
    if d_h * n_heads != d {
        return Err(Error::config(format!(
            "head dim {d_h} × heads {n_heads} != model dim {d}"
        )));
    }
    if let Some(m) = mimic {
        if m.len() != n_heads {
            return Err(Error::config("mimic params count != head count"));
        }
    }
    let l = x.rows();

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut q_parts = Vec::with_capacity(n_heads);
    let mut k_parts = Vec::with_capacity(n_heads);
    let mut v_parts = Vec::with_capacity(n_heads);
    for w in weights {
        let wq = tape.constant(w.wq.clone());
        let wk = tape.constant(w.wk.clone());
        let wv = tape.constant(w.wv.clone());
        q_parts.push(tape.matmul(xv, wq)?);
        k_parts.push(tape.matmul(xv, wk)?);
        v_parts.push(tape.matmul(xv, wv)?);
    }
    let q_full = tape.concat_cols(&q_parts)?;
    let k_full = tape.concat_cols(&k_parts)?;
    let v_full = tape.concat_cols(&v_parts)?;

    let mask = causal_mask(l, l, None);
    let mimic_vars: Vec<MimicHeadVars> = match mimic {
        Some(ms) => ms
            .iter()
            .map(|p| {
                let d_h = p.f_w.len();
                MimicHeadVars {
                    f_w: tape.constant(Tensor::new(vec![d_h, 1], p.f_w.clone()).unwrap()),
                    f_b: tape.constant(Tensor::scalar(p.f_b)),
                    v: tape.constant(Tensor::new(vec![1, d_h], p.v.clone()).unwrap()),
                }
            })
            .collect(),
        None => Vec::new(),
    };
    let hook = if mimic.is_some() {
        AttnHook::Mimic(&mimic_vars)
    } else {
        AttnHook::None
    };

    let cat = attention_core(&mut tape, q_full, k_full, v_full, n_heads, &hook, None, &mask, None)?;
    let wo_v = tape.constant(wo.clone());
    let out = tape.matmul(cat, wo_v)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn scaled_scores_zero_query() {
        let k = Tensor::matrix(3, 2, vec![1.0; 6]).unwrap();
        assert_eq!(scaled_scores(&[0.0, 0.0], &k).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn scaled_scores_hand_case() {
        let k = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(scaled_scores(&[2.0], &k).unwrap(), vec![6.0]);
    }

    #[test]
    fn scaled_scores_linear_in_query() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let k = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap();
        let q = randn(&mut rng, 3);
        let q3: Vec<f64> = q.iter().map(|x| 3.0 * x).collect();
        let s1 = scaled_scores(&q, &k).unwrap();
        let s3 = scaled_scores(&q3, &k).unwrap();
        for (a, b) in s1.iter().zip(&s3) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_scores_rejects_empty_keys() {
        let k = Tensor::new(vec![0, 2], vec![]).unwrap();
        assert!(scaled_scores(&[0.0, 0.0], &k).is_err());
    }

    #[test]
    fn standard_sa_uniform_scores_give_column_mean() {
        let k = Tensor::matrix(3, 2, vec![0.0; 6]).unwrap();
        let v = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = standard_sa(&[1.0, -1.0], &k, &v).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-15);
        assert!((out[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn standard_sa_singleton_returns_the_row() {
        let k = Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap();
        let v = Tensor::matrix(1, 2, vec![9.0, -3.0]).unwrap();
        assert_eq!(standard_sa(&[1.0, 1.0], &k, &v).unwrap(), vec![9.0, -3.0]);
    }

    #[test]
    fn standard_sa_matches_naive_two_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let k = Tensor::matrix(5, 3, randn(&mut rng, 15)).unwrap();
        let v = Tensor::matrix(5, 4, randn(&mut rng, 20)).unwrap();
        let q = randn(&mut rng, 3);
        let out = standard_sa(&q, &k, &v).unwrap();

        // independent oracle: exponentiate raw scaled scores, normalize, sum
        let scale = 1.0 / 3f64.sqrt();
        let w: Vec<f64> = (0..5)
            .map(|i| (k.row(i).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale).exp())
            .collect();
        let z: f64 = w.iter().sum();
        for j in 0..4 {
            let expected: f64 = (0..5).map(|i| w[i] / z * v.at(i, j)).sum();
            assert!((out[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_terms_forced_values() {
        let k_d = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let k = Tensor::matrix(3, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let (lz1, lz2) = partition_terms(&[0.0], &k_d, &k).unwrap();
        assert!((lz1.unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((lz2 - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn partition_terms_empty_demo_segment() {
        let k_d = Tensor::new(vec![0, 1], vec![]).unwrap();
        let k = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let (lz1, lz2) = partition_terms(&[1.0], &k_d, &k).unwrap();
        assert!(lz1.is_none());
        assert!(lz2.is_finite());
    }

    #[test]
    fn partition_terms_match_concatenated_naive_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let k_d = Tensor::matrix(3, 2, randn(&mut rng, 6)).unwrap();
        let k = Tensor::matrix(4, 2, randn(&mut rng, 8)).unwrap();
        let q = randn(&mut rng, 2);
        let (lz1, lz2) = partition_terms(&q, &k_d, &k).unwrap();
        let naive: f64 = scaled_scores(&q, &k_d)
            .unwrap()
            .iter()
            .chain(scaled_scores(&q, &k).unwrap().iter())
            .map(|s| s.exp())
            .sum();
        assert!((lz1.unwrap().exp() + lz2.exp() - naive).abs() < 1e-12);
    }

    #[test]
    fn mu_hand_case_and_empty() {
        let k_d = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let k = Tensor::matrix(3, 1, vec![0.0, 0.0, 0.0]).unwrap();
        assert!((mu(&[0.0], &k_d, &k).unwrap() - 0.4).abs() < 1e-15);
        let empty = Tensor::new(vec![0, 1], vec![]).unwrap();
        assert_eq!(mu(&[0.0], &empty, &k).unwrap(), 0.0);
    }

    #[test]
    fn mu_strictly_increases_with_demo_score_boost() {
        // with d_h=1 and q=1, adding δ to K_D entries adds δ/√1 to scores
        let k = Tensor::matrix(2, 1, vec![0.3, -0.1]).unwrap();
        let mut prev = 0.0;
        for step in 0..5 {
            let delta = step as f64 * 0.5;
            let k_d = Tensor::matrix(2, 1, vec![0.1 + delta, -0.4 + delta]).unwrap();
            let m = mu(&[1.0], &k_d, &k).unwrap();
            if step > 0 {
                assert!(m > prev, "mu not increasing: {m} vs {prev}");
            }
            prev = m;
        }
    }

    #[test]
    fn decomposition_hand_case() {
        let q = [0.0];
        let k_d = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let v_d = Tensor::matrix(2, 1, vec![4.0, 2.0]).unwrap();
        let k = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let v = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let rep = decomposed_icl_sa(&q, &k_d, &v_d, &k, &v).unwrap();
        assert!((rep.mu - 2.0 / 3.0).abs() < 1e-15);
        assert!((rep.sa_icd[0] - 3.0).abs() < 1e-15);
        assert!(rep.sa_query[0].abs() < 1e-15);
        assert!((rep.combined[0] - 2.0).abs() < 1e-15);
        assert!((rep.full_reference[0] - 2.0).abs() < 1e-15);
        assert!(rep.max_abs_diff <= 1e-15);
    }

    #[test]
    fn decomposition_degenerates_without_demos() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let k = Tensor::matrix(3, 2, randn(&mut rng, 6)).unwrap();
        let v = Tensor::matrix(3, 2, randn(&mut rng, 6)).unwrap();
        let q = randn(&mut rng, 2);
        let empty = Tensor::new(vec![0, 2], vec![]).unwrap();
        let rep = decomposed_icl_sa(&q, &empty, &empty, &k, &v).unwrap();
        assert_eq!(rep.mu, 0.0);
        assert_eq!(rep.combined, rep.sa_query);
        assert!(rep.max_abs_diff < 1e-15);
    }

    #[test]
    fn decomposition_identity_hundred_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        for _ in 0..100 {
            let d_h = rng.gen_range(1..=32);
            let l_d = rng.gen_range(0..=16);
            let l_q = rng.gen_range(1..=8);
            let k_d = Tensor::new(vec![l_d, d_h], randn(&mut rng, l_d * d_h)).unwrap();
            let v_d = Tensor::new(vec![l_d, d_h], randn(&mut rng, l_d * d_h)).unwrap();
            let k = Tensor::new(vec![l_q, d_h], randn(&mut rng, l_q * d_h)).unwrap();
            let v = Tensor::new(vec![l_q, d_h], randn(&mut rng, l_q * d_h)).unwrap();
            let q = randn(&mut rng, d_h);
            let rep = decomposed_icl_sa(&q, &k_d, &v_d, &k, &v).unwrap();
            assert!(rep.max_abs_diff <= 1e-9, "diff {}", rep.max_abs_diff);
        }
    }

    #[test]
    fn mimic_sa_zero_shift_is_exact_standard_attention() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let k = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap();
        let v = Tensor::matrix(4, 3, randn(&mut rng, 12)).unwrap();
        let q = randn(&mut rng, 3);
        let mut p = MimicHeadParams::zeros(3);
        p.f_b = 1.3; // irrelevant while v = 0
        assert_eq!(
            mimic_sa(&q, &k, &v, &p).unwrap(),
            standard_sa(&q, &k, &v).unwrap()
        );
    }

    #[test]
    fn mimic_sa_half_magnitude_case() {
        // single zero key: log Z₂ = 0, f(q) = f_b = 0 → μ̃ = 1/2
        let k = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let v = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let p = MimicHeadParams {
            f_w: vec![0.0],
            f_b: 0.0,
            v: vec![2.0],
        };
        let out = mimic_sa(&[0.0], &k, &v, &p).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mimic_sa_saturated_negative_bias_vanishes() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let k = Tensor::matrix(3, 2, randn(&mut rng, 6)).unwrap();
        let v = Tensor::matrix(3, 2, randn(&mut rng, 6)).unwrap();
        let q = randn(&mut rng, 2);
        let p = MimicHeadParams {
            f_w: vec![0.0, 0.0],
            f_b: -50.0,
            v: vec![10.0, 10.0],
        };
        let base = standard_sa(&q, &k, &v).unwrap();
        let out = mimic_sa(&q, &k, &v, &p).unwrap();
        for (a, b) in out.iter().zip(&base) {
            assert!((a - b).abs() < 1e-19);
        }
    }

    fn rand_head(rng: &mut ChaCha12Rng, d: usize, d_h: usize) -> HeadWeights {
        HeadWeights {
            wq: Tensor::new(vec![d, d_h], randn(rng, d * d_h)).unwrap(),
            wk: Tensor::new(vec![d, d_h], randn(rng, d * d_h)).unwrap(),
            wv: Tensor::new(vec![d, d_h], randn(rng, d * d_h)).unwrap(),
        }
    }

    #[test]
    fn multi_head_single_head_identity_projection() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let d = 3;
        let x = Tensor::matrix(4, d, randn(&mut rng, 4 * d)).unwrap();
        let w = rand_head(&mut rng, d, d);
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.data[i * d + i] = 1.0;
        }
        let out = multi_head_forward(&x, &[w.clone()], &eye, None).unwrap();
        // per causal row: standard_sa over the prefix
        let q_all = matmul(&x, &w.wq).unwrap();
        let k_all = matmul(&x, &w.wk).unwrap();
        let v_all = matmul(&x, &w.wv).unwrap();
        for j in 0..4 {
            let kp = Tensor::new(vec![j + 1, d], k_all.data[..(j + 1) * d].to_vec()).unwrap();
            let vp = Tensor::new(vec![j + 1, d], v_all.data[..(j + 1) * d].to_vec()).unwrap();
            let expect = standard_sa(q_all.row(j), &kp, &vp).unwrap();
            for (a, b) in out.row(j).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_zero_shift_equals_plain_forward() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (d, n_h) = (4, 2);
        let x = Tensor::matrix(3, d, randn(&mut rng, 3 * d)).unwrap();
        let heads: Vec<HeadWeights> = (0..n_h).map(|_| rand_head(&mut rng, d, d / n_h)).collect();
        let wo = Tensor::matrix(d, d, randn(&mut rng, d * d)).unwrap();
        let mimic = vec![MimicHeadParams::zeros(d / n_h); n_h];
        let plain = multi_head_forward(&x, &heads, &wo, None).unwrap();
        let shifted = multi_head_forward(&x, &heads, &wo, Some(&mimic)).unwrap();
        assert_eq!(plain.data, shifted.data);
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let (d, n_h, l) = (4, 2, 3);
        let d_h = d / n_h;
        let x = Tensor::matrix(l, d, randn(&mut rng, l * d)).unwrap();
        let heads: Vec<HeadWeights> = (0..n_h).map(|_| rand_head(&mut rng, d, d_h)).collect();
        let wo = Tensor::matrix(d, d, randn(&mut rng, d * d)).unwrap();
        let out = multi_head_forward(&x, &heads, &wo, None).unwrap();

        // oracle: loop heads and rows, concat, project
        let mut cat = Tensor::zeros(vec![l, d]);
        for (h, w) in heads.iter().enumerate() {
            let q_all = matmul(&x, &w.wq).unwrap();
            let k_all = matmul(&x, &w.wk).unwrap();
            let v_all = matmul(&x, &w.wv).unwrap();
            for j in 0..l {
                let kp =
                    Tensor::new(vec![j + 1, d_h], k_all.data[..(j + 1) * d_h].to_vec()).unwrap();
                let vp =
                    Tensor::new(vec![j + 1, d_h], v_all.data[..(j + 1) * d_h].to_vec()).unwrap();
                let sa = standard_sa(q_all.row(j), &kp, &vp).unwrap();
                for (c, &val) in sa.iter().enumerate() {
                    cat.data[j * d + h * d_h + c] = val;
                }
            }
        }
        let expect = matmul(&cat, &wo).unwrap();
        for (a, b) in out.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causality_changing_later_token_leaves_earlier_rows_fixed() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let (d, n_h, l) = (4, 2, 4);
        let heads: Vec<HeadWeights> = (0..n_h).map(|_| rand_head(&mut rng, d, d / n_h)).collect();
        let wo = Tensor::matrix(d, d, randn(&mut rng, d * d)).unwrap();
        let mut x = Tensor::matrix(l, d, randn(&mut rng, l * d)).unwrap();
        let before = multi_head_forward(&x, &heads, &wo, None).unwrap();
        for j in 0..d {
            x.data[2 * d + j] += 5.0; // perturb token 2
        }
        let after = multi_head_forward(&x, &heads, &wo, None).unwrap();
        for row in 0..2 {
            assert_eq!(before.row(row), after.row(row));
        }
    }
}
