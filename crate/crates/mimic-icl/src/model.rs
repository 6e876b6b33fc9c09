//! Small decoder-only transformer with hidden-state tracing.
//!
//! Pre-norm blocks: RMSNorm → causal multi-head attention (rotary positions)
//! → residual, RMSNorm → SiLU FFN → residual. The forward pass can capture
//! the residual stream at a fixed point in every layer (the trace), and each
//! layer accepts hooks: an attention-head modification, low-rank adapters on
//! the projections, a broadcast vector after the FFN, and a single-row patch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_core, AttnHook, MimicHeadParams, MimicHeadVars, MuProbe};
use crate::error::{Error, Result};
use crate::numerics::{causal_mask, Mask, Tape, Tensor, Var};
use crate::rng::{randn, stable_hash, substream};

/// Where in each layer the trace is captured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPoint {
    /// Residual stream right after the attention residual add.
    AfterSa,
    /// Residual stream after the FFN residual add (the default).
    AfterFfn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(42)
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Default small config: 4 layers × 4 heads, d=64.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            vocab_size: 64,
            max_len: 128,
            ffn_mult: 4,
            seed,
        }
    }

    /// Much smaller config for gradient checks and fast unit tests.
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            vocab_size: 16,
            max_len: 32,
            ffn_mult: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::config("model dims must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(Error::config("d_head must be even for rotary positions"));
        }
        if self.vocab_size < 2 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(Error::config("vocab_size/max_len/ffn_mult too small"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn_norm: Tensor, // 1×d gain
    pub wq: Tensor,        // d×d
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w1: Tensor, // d×(ffn_mult·d)
    pub w2: Tensor, // (ffn_mult·d)×d
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: Tensor, // vocab×d
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub unembed: Tensor, // d×vocab
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: ModelParams,
}

impl ModelParams {
    /// Seeded initialization. Projections are scaled by `1/√fan_in`; norm
    /// gains start at 1.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let inner = config.ffn_mult * d;
        let gauss = |name: String, rows: usize, cols: usize, scale: f64| {
            let mut rng = substream(config.seed, &name);
            let data = (0..rows * cols).map(|_| randn(&mut rng) * scale).collect();
            Tensor::new(vec![rows, cols], data)
        };
        let ones = |n: usize| Tensor::new(vec![1, n], vec![1.0; n]);

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let s = 1.0 / (d as f64).sqrt();
            layers.push(LayerParams {
                attn_norm: ones(d)?,
                wq: gauss(format!("layer{i}.wq"), d, d, s)?,
                wk: gauss(format!("layer{i}.wk"), d, d, s)?,
                wv: gauss(format!("layer{i}.wv"), d, d, s)?,
                wo: gauss(format!("layer{i}.wo"), d, d, s)?,
                ffn_norm: ones(d)?,
                w1: gauss(format!("layer{i}.w1"), d, inner, s)?,
                w2: gauss(format!("layer{i}.w2"), inner, d, 1.0 / (inner as f64).sqrt())?,
            });
        }
        Ok(ModelParams {
            config: config.clone(),
            embed: gauss("embed".into(), config.vocab_size, d, 1.0)?,
            layers,
            final_norm: ones(d)?,
            unembed: gauss("unembed".into(), d, config.vocab_size, 1.0 / (d as f64).sqrt())?,
        })
    }

    /// All weight tensors in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w1,
                &l.w2,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.unembed);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w1,
                &mut l.w2,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Order-sensitive hash of every weight bit. Used to prove the base
    /// stays frozen across adapter training.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            for &x in &t.data {
                bytes.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        stable_hash(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string(&ckpt)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.model.config.validate()?;
        Ok(ckpt.model)
    }

    /// Register every weight on a tape, as trainable leaves or frozen
    /// constants.
    pub fn load_on_tape(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embed = put(&self.embed);
        let layers: Vec<LayerVars> = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: put(&l.attn_norm),
                wq: put(&l.wq),
                wk: put(&l.wk),
                wv: put(&l.wv),
                wo: put(&l.wo),
                ffn_norm: put(&l.ffn_norm),
                w1: put(&l.w1),
                w2: put(&l.w2),
            })
            .collect();
        ModelVars {
            embed,
            layers,
            final_norm: put(&self.final_norm),
            unembed: put(&self.unembed),
        }
    }
}

/// Tape handles for every weight tensor, mirroring [`ModelParams`].
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub unembed: Var,
}

pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w1: Var,
    pub w2: Var,
}

impl ModelVars {
    /// Flat list matching [`ModelParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w1, l.w2]);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }
}

/// One low-rank adapter: `x·W + scale·drop(x)·A·B`.
#[derive(Clone, Copy)]
pub struct LoraPair {
    pub a: Var, // d×r
    pub b: Var, // r×d
    pub scale: f64,
    /// Optional dropout mask on the adapter input, elementwise, already
    /// scaled by 1/(1−p). Constant per step.
    pub dropout: Option<Var>,
}

#[derive(Clone, Copy, Default)]
pub struct LayerLora {
    pub q: Option<LoraPair>,
    pub k: Option<LoraPair>,
    pub v: Option<LoraPair>,
    pub o: Option<LoraPair>,
}

/// Per-layer forward modifications.
pub struct LayerHooks<'a> {
    pub attn: AttnHook<'a>,
    pub lora: Option<LayerLora>,
    /// `1×d` vector added to every row after the FFN residual.
    pub post_ffn_add: Option<Var>,
    /// `(row, 1×d vector)` added to one row after the FFN residual.
    pub patch_row: Option<(usize, Var)>,
}

impl Default for LayerHooks<'_> {
    fn default() -> Self {
        LayerHooks {
            attn: AttnHook::None,
            lora: None,
            post_ffn_add: None,
            patch_row: None,
        }
    }
}

/// Forward-pass outputs on the tape.
pub struct ForwardOut {
    pub logits: Var, // l×vocab
    /// Residual stream at the capture point, one `l×d` node per layer.
    pub trace: Vec<Var>,
    /// Concatenated per-head attention outputs (`l×d`, before the output
    /// projection), one per layer.
    pub attn_cat: Vec<Var>,
    /// Shift magnitudes recorded per layer (empty entries when the layer's
    /// hook produces none).
    pub mu_probes: Vec<MuProbe>,
}

fn projected(
    tape: &mut Tape,
    x: Var,
    w: Var,
    lora: Option<LoraPair>,
) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    match lora {
        None => Ok(base),
        Some(p) => {
            let inp = match p.dropout {
                Some(m) => tape.mul_elem(x, m)?,
                None => x,
            };
            let xa = tape.matmul(inp, p.a)?;
            let xab = tape.matmul(xa, p.b)?;
            let scaled = tape.scale(xab, p.scale);
            tape.add(base, scaled)
        }
    }
}

/// Full causal forward over `tokens` with per-layer hooks.
///
/// `hooks` must be empty (no modifications anywhere) or hold one entry per
/// layer. Rotary positions are `0..l`.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    tokens: &[usize],
    hooks: &[LayerHooks],
    mask: &Mask,
    align: AlignPoint,
) -> Result<ForwardOut> {
    let l = tokens.len();
    if l == 0 {
        return Err(Error::EmptyInput("forward: no tokens"));
    }
    if l > cfg.max_len {
        return Err(Error::config(format!(
            "input length {l} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if !hooks.is_empty() && hooks.len() != cfg.n_layers {
        return Err(Error::config("hooks must cover every layer"));
    }
    let positions: Vec<usize> = (0..l).collect();
    let default_hooks = LayerHooks::default();

    let mut h = tape.embed_lookup(vars.embed, tokens)?;
    let mut trace = Vec::with_capacity(cfg.n_layers);
    let mut mu_probes = Vec::with_capacity(cfg.n_layers);
    let mut attn_cat = Vec::with_capacity(cfg.n_layers);
    for (i, lv) in vars.layers.iter().enumerate() {
        let hk = if hooks.is_empty() { &default_hooks } else { &hooks[i] };
        let lora = hk.lora.unwrap_or_default();

        let n1 = tape.rms_norm(h, lv.attn_norm, 1e-6)?;
        let q = projected(tape, n1, lv.wq, lora.q)?;
        let k = projected(tape, n1, lv.wk, lora.k)?;
        let v = projected(tape, n1, lv.wv, lora.v)?;
        let mut probe = MuProbe::default();
        let cat = attention_core(
            tape,
            q,
            k,
            v,
            cfg.n_heads,
            &hk.attn,
            Some(&positions),
            mask,
            Some(&mut probe),
        )?;
        mu_probes.push(probe);
        attn_cat.push(cat);
        let attn_out = projected(tape, cat, lv.wo, lora.o)?;
        h = tape.add(h, attn_out)?;
        if align == AlignPoint::AfterSa {
            trace.push(h);
        }

        let n2 = tape.rms_norm(h, lv.ffn_norm, 1e-6)?;
        let f1_raw = tape.matmul(n2, lv.w1)?;
        let f1 = tape.silu(f1_raw);
        let f2 = tape.matmul(f1, lv.w2)?;
        h = tape.add(h, f2)?;
        if let Some(vec) = hk.post_ffn_add {
            h = tape.add_row_broadcast(h, vec)?;
        }
        if let Some((row, vec)) = hk.patch_row {
            h = tape.add_to_row(h, vec, row)?;
        }
        if align == AlignPoint::AfterFfn {
            trace.push(h);
        }
    }
    let n = tape.rms_norm(h, vars.final_norm, 1e-6)?;
    let logits = tape.matmul(n, vars.unembed)?;
    Ok(ForwardOut {
        logits,
        trace,
        attn_cat,
        mu_probes,
    })
}

// ── Value-level entry points ────────────────────────────────────────────

/// Concatenated demonstrations plus query, with the answer location.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptContext {
    pub icd_tokens: Vec<Vec<usize>>,
    pub query_tokens: Vec<usize>,
    /// `[start, end)` within `query_tokens` holding the answer tokens.
    pub answer_span: (usize, usize),
}

impl PromptContext {
    /// Demonstration length `l_D`.
    pub fn boundary(&self) -> usize {
        self.icd_tokens.iter().map(|b| b.len()).sum()
    }

    pub fn full_tokens(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.icd_tokens.iter().flatten().copied().collect();
        out.extend_from_slice(&self.query_tokens);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.answer_span;
        if self.query_tokens.is_empty() {
            return Err(Error::EmptyInput("PromptContext: empty query"));
        }
        if s >= e || e > self.query_tokens.len() {
            return Err(Error::config(format!(
                "answer_span [{s},{e}) outside query of length {}",
                self.query_tokens.len()
            )));
        }
        Ok(())
    }
}

/// Per-layer traced hidden states plus final logits, as plain values.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub hidden: Vec<Tensor>, // one l×d per layer
    pub logits: Tensor,      // l×vocab
}

fn run_plain(
    params: &ModelParams,
    tokens: &[usize],
    mimic: Option<&[Vec<MimicHeadParams>]>,
    mask: &Mask,
    align: AlignPoint,
) -> Result<LayerTrace> {
    let mut tape = Tape::new();
    let vars = params.load_on_tape(&mut tape, false);

    // mimic head leaves, one block per layer
    let mimic_vars: Vec<Vec<MimicHeadVars>> = match mimic {
        Some(blocks) => {
            if blocks.len() != params.config.n_layers {
                return Err(Error::config("mimic params must cover every layer"));
            }
            blocks
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|p| {
                            let d_h = p.f_w.len();
                            MimicHeadVars {
                                f_w: tape.constant(
                                    Tensor::new(vec![d_h, 1], p.f_w.clone()).unwrap(),
                                ),
                                f_b: tape.constant(Tensor::scalar(p.f_b)),
                                v: tape
                                    .constant(Tensor::new(vec![1, d_h], p.v.clone()).unwrap()),
                            }
                        })
                        .collect()
                })
                .collect()
        }
        None => Vec::new(),
    };
    let hooks: Vec<LayerHooks> = mimic_vars
        .iter()
        .map(|heads| LayerHooks {
            attn: AttnHook::Mimic(heads),
            ..Default::default()
        })
        .collect();

    let out = forward_on_tape(&mut tape, &params.config, &vars, tokens, &hooks, mask, align)?;
    Ok(LayerTrace {
        hidden: out.trace.iter().map(|&v| tape.value(v).clone()).collect(),
        logits: tape.value(out.logits).clone(),
    })
}

/// Plain (or shift-head) forward with per-layer trace capture.
pub fn forward_with_trace(
    params: &ModelParams,
    tokens: &[usize],
    mimic: Option<&[Vec<MimicHeadParams>]>,
    align: AlignPoint,
) -> Result<LayerTrace> {
    let mask = causal_mask(tokens.len(), tokens.len(), None);
    run_plain(params, tokens, mimic, &mask, align)
}

/// Frozen-base forward over `[X_D; X]`; the trace is restricted to the query
/// rows, re-indexed from zero. When `ban_demo_keys` is set, query positions
/// may not attend to demonstration keys (a masking experiment, not the
/// normal path).
pub fn icl_forward(
    params: &ModelParams,
    ctx: &PromptContext,
    align: AlignPoint,
    ban_demo_keys: bool,
) -> Result<LayerTrace> {
    ctx.validate()?;
    let tokens = ctx.full_tokens();
    let l = tokens.len();
    let l_d = ctx.boundary();
    let banned = if ban_demo_keys { Some((l_d, l_d)) } else { None };
    let mask = causal_mask(l, l, banned);
    let full = run_plain(params, &tokens, None, &mask, align)?;

    let l_q = ctx.query_tokens.len();
    let d = params.config.d_model;
    let slice_rows = |t: &Tensor, width: usize| -> Result<Tensor> {
        Tensor::new(
            vec![l_q, width],
            t.data[l_d * width..(l_d + l_q) * width].to_vec(),
        )
    };
    Ok(LayerTrace {
        hidden: full
            .hidden
            .iter()
            .map(|t| slice_rows(t, d))
            .collect::<Result<_>>()?,
        logits: slice_rows(&full.logits, params.config.vocab_size)?,
    })
}

/// Shift-head forward over the bare query.
pub fn mimic_forward(
    params: &ModelParams,
    query_tokens: &[usize],
    mimic: &[Vec<MimicHeadParams>],
    align: AlignPoint,
) -> Result<LayerTrace> {
    forward_with_trace(params, query_tokens, Some(mimic), align)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::softmax_row_in_place;

    fn toy() -> ModelParams {
        ModelParams::init(&ModelConfig::tiny(3)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy(0);
        assert!(c.validate().is_ok());
        c.d_model = 63;
        assert!(c.validate().is_err());
        let mut c2 = ModelConfig::tiny(0);
        c2.n_heads = 8; // d_head = 2... still even; force odd head dim
        c2.d_model = 8;
        assert!(c2.validate().is_err()); // d_head = 1, odd
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let p = toy();
        let a = forward_with_trace(&p, &[1, 2, 3], None, AlignPoint::AfterFfn).unwrap();
        let b = forward_with_trace(&p, &[1, 2, 3], None, AlignPoint::AfterFfn).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
        for (x, y) in a.hidden.iter().zip(&b.hidden) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn zero_shift_trace_equals_plain_trace() {
        let p = toy();
        let d_h = p.config.d_head();
        let mimic: Vec<Vec<MimicHeadParams>> = (0..p.config.n_layers)
            .map(|_| vec![MimicHeadParams::zeros(d_h); p.config.n_heads])
            .collect();
        let plain = forward_with_trace(&p, &[0, 5, 9], None, AlignPoint::AfterFfn).unwrap();
        let shifted = mimic_forward(&p, &[0, 5, 9], &mimic, AlignPoint::AfterFfn).unwrap();
        assert_eq!(plain.logits.data, shifted.logits.data);
        for (x, y) in plain.hidden.iter().zip(&shifted.hidden) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn overlong_input_rejected() {
        let p = toy();
        let tokens = vec![0usize; p.config.max_len + 1];
        assert!(forward_with_trace(&p, &tokens, None, AlignPoint::AfterFfn).is_err());
    }

    #[test]
    fn trace_has_one_entry_per_layer_both_capture_points() {
        let p = toy();
        for align in [AlignPoint::AfterSa, AlignPoint::AfterFfn] {
            let t = forward_with_trace(&p, &[2, 4], None, align).unwrap();
            assert_eq!(t.hidden.len(), p.config.n_layers);
            for h in &t.hidden {
                assert_eq!(h.shape, vec![2, p.config.d_model]);
            }
        }
    }

    /// Straight-line recomputation of a 1-layer, 1-head, d=2 model on two
    /// tokens, using only scalar f64 arithmetic.
    #[test]
    fn one_block_matches_scalar_oracle() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            vocab_size: 4,
            max_len: 8,
            ffn_mult: 2,
            seed: 11,
        };
        let p = ModelParams::init(&cfg).unwrap();
        let tokens = [1usize, 3];
        let got = forward_with_trace(&p, &tokens, None, AlignPoint::AfterFfn).unwrap();

        let d = 2usize;
        let rms = |r: &[f64], g: &[f64]| -> Vec<f64> {
            let ms = r.iter().map(|x| x * x).sum::<f64>() / d as f64;
            let s = (ms + 1e-6).sqrt();
            r.iter().zip(g).map(|(x, gn)| gn * x / s).collect()
        };
        let mat = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..w.cols())
                .map(|j| (0..w.rows()).map(|i| x[i] * w.at(i, j)).sum())
                .collect()
        };
        let rope = |r: &[f64], pos: usize| -> Vec<f64> {
            let th = pos as f64; // d=2 → single pair, θ = pos·10000^0
            let (s, c) = th.sin_cos();
            vec![r[0] * c - r[1] * s, r[0] * s + r[1] * c]
        };

        let l = &p.layers[0];
        let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| p.embed.row(t).to_vec()).collect();

        // attention
        let n1: Vec<Vec<f64>> = h.iter().map(|r| rms(r, &l.attn_norm.data)).collect();
        let q: Vec<Vec<f64>> = n1.iter().enumerate().map(|(i, r)| rope(&mat(r, &l.wq), i)).collect();
        let k: Vec<Vec<f64>> = n1.iter().enumerate().map(|(i, r)| rope(&mat(r, &l.wk), i)).collect();
        let v: Vec<Vec<f64>> = n1.iter().map(|r| mat(r, &l.wv)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..2 {
            let mut scores: Vec<f64> = (0..=i)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            softmax_row_in_place(&mut scores).unwrap();
            let mut sa = vec![0.0; d];
            for (j, &w) in scores.iter().enumerate() {
                for (acc, &vv) in sa.iter_mut().zip(&v[j]) {
                    *acc += w * vv;
                }
            }
            let proj = mat(&sa, &l.wo);
            for (x, pv) in h[i].iter_mut().zip(&proj) {
                *x += pv;
            }
        }

        // ffn
        for row in h.iter_mut() {
            let n2 = rms(row, &l.ffn_norm.data);
            let f1: Vec<f64> = mat(&n2, &l.w1)
                .into_iter()
                .map(|x| x / (1.0 + (-x).exp()))
                .collect();
            let f2 = mat(&f1, &l.w2);
            for (x, fv) in row.iter_mut().zip(&f2) {
                *x += fv;
            }
        }

        for i in 0..2 {
            for j in 0..d {
                let diff = (got.hidden[0].at(i, j) - h[i][j]).abs();
                assert!(diff < 1e-12, "trace[{i}][{j}] diff {diff}");
            }
        }

        // logits
        for i in 0..2 {
            let n = rms(&h[i], &p.final_norm.data);
            let logits = mat(&n, &p.unembed);
            for j in 0..cfg.vocab_size {
                assert!((got.logits.at(i, j) - logits[j]).abs() < 1e-12);
            }
        }
    }

    fn ctx(icds: Vec<Vec<usize>>, query: Vec<usize>) -> PromptContext {
        let e = query.len();
        PromptContext {
            icd_tokens: icds,
            query_tokens: query,
            answer_span: (e - 1, e),
        }
    }

    #[test]
    fn icl_forward_without_demos_equals_plain_trace() {
        let p = toy();
        let c = ctx(vec![], vec![1, 2, 3]);
        let icl = icl_forward(&p, &c, AlignPoint::AfterFfn, false).unwrap();
        let plain = forward_with_trace(&p, &[1, 2, 3], None, AlignPoint::AfterFfn).unwrap();
        assert_eq!(icl.logits.data, plain.logits.data);
        for (a, b) in icl.hidden.iter().zip(&plain.hidden) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn demo_rows_unaffected_by_query_content() {
        // causality: demonstration-position outputs identical regardless of
        // what the query holds
        let p = toy();
        let a = ctx(vec![vec![1, 2], vec![3, 4]], vec![5, 6]);
        let b = ctx(vec![vec![1, 2], vec![3, 4]], vec![9, 1]);
        let fa = forward_with_trace(&p, &a.full_tokens(), None, AlignPoint::AfterFfn).unwrap();
        let fb = forward_with_trace(&p, &b.full_tokens(), None, AlignPoint::AfterFfn).unwrap();
        for row in 0..4 {
            assert_eq!(fa.hidden[0].row(row), fb.hidden[0].row(row));
            assert_eq!(fa.logits.row(row), fb.logits.row(row));
        }
    }

    #[test]
    fn banned_demo_keys_reproduce_zero_shot_geometry() {
        // rotary positions are relative, so if query rows are forbidden from
        // attending to demonstration keys, the query block behaves like a
        // zero-shot run up to numerical noise
        let p = toy();
        let c = ctx(vec![vec![1, 2, 3], vec![4, 5, 6]], vec![7, 8]);
        let masked = icl_forward(&p, &c, AlignPoint::AfterFfn, true).unwrap();
        let zero = forward_with_trace(&p, &[7, 8], None, AlignPoint::AfterFfn).unwrap();
        for (a, b) in masked.hidden.iter().zip(&zero.hidden) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
        for (x, y) in masked.logits.data.iter().zip(&zero.logits.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbing_one_layer_v_changes_only_deeper_trace() {
        let p = toy();
        let d_h = p.config.d_head();
        let mut mimic: Vec<Vec<MimicHeadParams>> = (0..p.config.n_layers)
            .map(|_| vec![MimicHeadParams::zeros(d_h); p.config.n_heads])
            .collect();
        let base = mimic_forward(&p, &[1, 2, 3], &mimic, AlignPoint::AfterFfn).unwrap();
        mimic[1][0].v[0] = 0.7; // perturb layer 1, head 0
        let pert = mimic_forward(&p, &[1, 2, 3], &mimic, AlignPoint::AfterFfn).unwrap();
        assert_eq!(base.hidden[0].data, pert.hidden[0].data);
        let diff: f64 = base.hidden[1]
            .data
            .iter()
            .zip(&pert.hidden[1].data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn trace_gradient_wrt_v_matches_finite_differences() {
        let p = ModelParams::init(&ModelConfig {
            n_layers: 2,
            n_heads: 1,
            d_model: 4,
            vocab_size: 8,
            max_len: 8,
            ffn_mult: 2,
            seed: 21,
        })
        .unwrap();
        let tokens = [1usize, 5, 2];
        let d_h = p.config.d_head();

        // loss = sum of the layer-1 trace entries, as a function of the
        // layer-0 head's v
        let eval = |vdata: &[f64]| -> f64 {
            let mut mimic: Vec<Vec<MimicHeadParams>> = (0..2)
                .map(|_| vec![MimicHeadParams::zeros(d_h)])
                .collect();
            mimic[0][0].v = vdata.to_vec();
            mimic[0][0].f_b = 0.5; // keep μ̃ away from saturation
            let t = mimic_forward(&p, &tokens, &mimic, AlignPoint::AfterFfn).unwrap();
            t.hidden[1].data.iter().sum()
        };

        // analytic gradient via the tape
        let mut tape = Tape::new();
        let vars = p.load_on_tape(&mut tape, false);
        let v0 = vec![0.3, -0.2, 0.1, 0.4];
        let head0 = vec![MimicHeadVars {
            f_w: tape.constant(Tensor::new(vec![d_h, 1], vec![0.0; d_h]).unwrap()),
            f_b: tape.constant(Tensor::scalar(0.5)),
            v: tape.param(Tensor::new(vec![1, d_h], v0.clone()).unwrap()),
        }];
        let head1 = vec![MimicHeadVars {
            f_w: tape.constant(Tensor::new(vec![d_h, 1], vec![0.0; d_h]).unwrap()),
            f_b: tape.constant(Tensor::scalar(0.0)),
            v: tape.constant(Tensor::new(vec![1, d_h], vec![0.0; d_h]).unwrap()),
        }];
        let hooks = vec![
            LayerHooks {
                attn: AttnHook::Mimic(&head0),
                ..Default::default()
            },
            LayerHooks {
                attn: AttnHook::Mimic(&head1),
                ..Default::default()
            },
        ];
        let mask = causal_mask(3, 3, None);
        let out = forward_on_tape(
            &mut tape,
            &p.config,
            &vars,
            &tokens,
            &hooks,
            &mask,
            AlignPoint::AfterFfn,
        )
        .unwrap();
        let loss = tape.sum_all(out.trace[1]);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(head0[0].v).unwrap().to_vec();

        let eps = 1e-5;
        for i in 0..d_h {
            let mut up = v0.clone();
            up[i] += eps;
            let mut dn = v0.clone();
            dn[i] -= eps;
            let numeric = (eval(&up) - eval(&dn)) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            assert!(err < 1e-6, "v[{i}] err {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let p = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        let a = forward_with_trace(&p, &[1, 2], None, AlignPoint::AfterFfn).unwrap();
        let b = forward_with_trace(&q, &[1, 2], None, AlignPoint::AfterFfn).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
    }

    #[test]
    fn prompt_context_validation() {
        let mut c = ctx(vec![vec![1]], vec![2, 3]);
        assert!(c.validate().is_ok());
        assert_eq!(c.boundary(), 1);
        c.answer_span = (2, 3);
        assert!(c.validate().is_err());
    }
}
