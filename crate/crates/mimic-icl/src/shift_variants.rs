//! Ablation and baseline mechanisms: per-head shift vectors, shared-μ
//! variants, a linear-map shift, a post-FFN vector, activation patching
//! (task / function vectors), and low-rank adapters.
//!
//! Every variant starts from a neutral initialization that reproduces the
//! frozen base model exactly, so training always begins at zero-shot
//! behavior.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttnHook, LinearShiftHeadVars, MimicHeadParams, MimicHeadVars};
use crate::error::{Error, Result};
use crate::model::{
    forward_on_tape, AlignPoint, LayerHooks, LayerLora, LayerTrace, LoraPair, ModelConfig,
    ModelParams, PromptContext,
};
use crate::numerics::{causal_mask, matmul, Tape, Tensor, Var};
use crate::rng::{randn, substream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Mimic,
    HeadSharingMu,
    QuerySharingMu,
    LinearShift,
    LiveStyle,
    TaskVector,
    FunctionVector,
    Lora,
    MimicPlusLora,
}

impl VariantKind {
    pub fn uses_lora(self) -> bool {
        matches!(self, VariantKind::Lora | VariantKind::MimicPlusLora)
    }

    pub fn uses_patch(self) -> bool {
        matches!(self, VariantKind::TaskVector | VariantKind::FunctionVector)
    }

    pub const ALL: [VariantKind; 9] = [
        VariantKind::Mimic,
        VariantKind::HeadSharingMu,
        VariantKind::QuerySharingMu,
        VariantKind::LinearShift,
        VariantKind::LiveStyle,
        VariantKind::TaskVector,
        VariantKind::FunctionVector,
        VariantKind::Lora,
        VariantKind::MimicPlusLora,
    ];
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub kind: VariantKind,
    /// Adapter rank (lora kinds only).
    #[serde(default)]
    pub lora_rank: Option<usize>,
    /// Adapter-input dropout rate during training (lora kinds only).
    #[serde(default)]
    pub lora_dropout: Option<f64>,
    /// Layer receiving the patched vector (task/function vector only).
    #[serde(default)]
    pub patch_layer: Option<usize>,
    /// Initial value of the learnable scale (live_style only).
    #[serde(default)]
    pub live_scale_init: Option<f64>,
}

impl VariantConfig {
    pub fn new(kind: VariantKind) -> Self {
        VariantConfig {
            kind,
            lora_rank: None,
            lora_dropout: None,
            patch_layer: None,
            live_scale_init: None,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.lora_rank.is_some() && !self.kind.uses_lora() {
            return Err(Error::config("lora_rank set for a non-lora variant"));
        }
        if self.lora_dropout.is_some() && !self.kind.uses_lora() {
            return Err(Error::config("lora_dropout set for a non-lora variant"));
        }
        if self.patch_layer.is_some() && !self.kind.uses_patch() {
            return Err(Error::config("patch_layer set for a non-patching variant"));
        }
        if self.live_scale_init.is_some() && self.kind != VariantKind::LiveStyle {
            return Err(Error::config("live_scale_init set for a non-live variant"));
        }
        if self.kind.uses_lora() {
            let r = self.rank();
            if r == 0 || r > model.d_model {
                return Err(Error::config(format!(
                    "lora rank {r} outside 1..={}",
                    model.d_model
                )));
            }
            let p = self.dropout();
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("lora dropout {p} outside [0,1)")));
            }
        }
        if let Some(l) = self.patch_layer {
            if l >= model.n_layers {
                return Err(Error::config(format!(
                    "patch_layer {l} out of range for {} layers",
                    model.n_layers
                )));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.lora_rank.unwrap_or(2)
    }

    pub fn dropout(&self) -> f64 {
        self.lora_dropout.unwrap_or(0.05)
    }

    pub fn scale_init(&self) -> f64 {
        self.live_scale_init.unwrap_or(0.1)
    }
}

// ── Parameter containers (plain tensors, serializable) ──────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MimicHeadTensors {
    pub f_w: Tensor, // d_h×1
    pub f_b: Tensor, // scalar
    pub v: Tensor,   // 1×d_h
}

impl MimicHeadTensors {
    fn zeros(d_h: usize) -> Self {
        MimicHeadTensors {
            f_w: Tensor::zeros(vec![d_h, 1]),
            f_b: Tensor::scalar(0.0),
            v: Tensor::zeros(vec![1, d_h]),
        }
    }

    pub fn to_value_params(&self) -> MimicHeadParams {
        MimicHeadParams {
            f_w: self.f_w.data.clone(),
            f_b: self.f_b.item(),
            v: self.v.data.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadSharingLayer {
    pub g_w: Tensor,    // d×1
    pub g_b: Tensor,    // scalar
    pub v: Vec<Tensor>, // per head, 1×d_h
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuerySharingLayer {
    pub mu: Vec<Tensor>, // per head, scalar (raw coefficient, not gated)
    pub v: Vec<Tensor>,  // per head, 1×d_h
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearShiftHead {
    pub f_w: Tensor, // d_h×1
    pub f_b: Tensor, // scalar
    pub h_w: Tensor, // d_h×d_h
    pub h_b: Tensor, // 1×d_h
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiveLayer {
    pub vector: Tensor, // 1×d
    pub scale: Tensor,  // scalar
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchVector {
    pub layer: usize,
    pub vector: Tensor, // 1×d, extracted (not trained)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoraMat {
    pub a: Tensor, // d×r
    pub b: Tensor, // r×d
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoraLayer {
    pub q: LoraMat,
    pub k: LoraMat,
    pub v: LoraMat,
    pub o: LoraMat,
}

/// Trainable state for one variant. Only the fields the kind needs are
/// populated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantParams {
    pub config: VariantConfig,
    #[serde(default)]
    pub mimic: Vec<Vec<MimicHeadTensors>>,
    #[serde(default)]
    pub head_sharing: Vec<HeadSharingLayer>,
    #[serde(default)]
    pub query_sharing: Vec<QuerySharingLayer>,
    #[serde(default)]
    pub linear_shift: Vec<Vec<LinearShiftHead>>,
    #[serde(default)]
    pub live: Vec<LiveLayer>,
    #[serde(default)]
    pub patch: Option<PatchVector>,
    #[serde(default)]
    pub lora: Vec<LoraLayer>,
}

/// Saturating negative bias: the linear-shift gate opens at ~1e-13, so the
/// neutral-initialized variant is indistinguishable from the base model at
/// double precision.
const LINEAR_SHIFT_NEUTRAL_BIAS: f64 = -30.0;

/// Build a variant at its neutral initialization for the given model shape.
pub fn build_variant(cfg: &VariantConfig, model: &ModelConfig) -> Result<VariantParams> {
    cfg.validate(model)?;
    let (n_l, n_h, d, d_h) = (model.n_layers, model.n_heads, model.d_model, model.d_head());
    let mut out = VariantParams {
        config: cfg.clone(),
        mimic: Vec::new(),
        head_sharing: Vec::new(),
        query_sharing: Vec::new(),
        linear_shift: Vec::new(),
        live: Vec::new(),
        patch: None,
        lora: Vec::new(),
    };
    match cfg.kind {
        VariantKind::Mimic => {
            out.mimic = (0..n_l)
                .map(|_| (0..n_h).map(|_| MimicHeadTensors::zeros(d_h)).collect())
                .collect();
        }
        VariantKind::HeadSharingMu => {
            out.head_sharing = (0..n_l)
                .map(|_| HeadSharingLayer {
                    g_w: Tensor::zeros(vec![d, 1]),
                    g_b: Tensor::scalar(0.0),
                    v: (0..n_h).map(|_| Tensor::zeros(vec![1, d_h])).collect(),
                })
                .collect();
        }
        VariantKind::QuerySharingMu => {
            out.query_sharing = (0..n_l)
                .map(|_| QuerySharingLayer {
                    mu: (0..n_h).map(|_| Tensor::zeros(vec![1, 1])).collect(),
                    v: (0..n_h).map(|_| Tensor::zeros(vec![1, d_h])).collect(),
                })
                .collect();
        }
        VariantKind::LinearShift => {
            out.linear_shift = (0..n_l)
                .map(|_| {
                    (0..n_h)
                        .map(|_| LinearShiftHead {
                            f_w: Tensor::zeros(vec![d_h, 1]),
                            f_b: Tensor::scalar(LINEAR_SHIFT_NEUTRAL_BIAS),
                            h_w: Tensor::zeros(vec![d_h, d_h]),
                            h_b: Tensor::zeros(vec![1, d_h]),
                        })
                        .collect()
                })
                .collect();
        }
        VariantKind::LiveStyle => {
            out.live = (0..n_l)
                .map(|_| LiveLayer {
                    vector: Tensor::zeros(vec![1, d]),
                    scale: Tensor::matrix(1, 1, vec![cfg.scale_init()]).unwrap(),
                })
                .collect();
        }
        VariantKind::TaskVector | VariantKind::FunctionVector => {
            out.patch = Some(PatchVector {
                layer: cfg.patch_layer.unwrap_or(0),
                vector: Tensor::zeros(vec![1, d]),
            });
        }
        VariantKind::Lora => {
            out.lora = init_lora(cfg, model);
        }
        VariantKind::MimicPlusLora => {
            out.mimic = (0..n_l)
                .map(|_| (0..n_h).map(|_| MimicHeadTensors::zeros(d_h)).collect())
                .collect();
            out.lora = init_lora(cfg, model);
        }
    }
    Ok(out)
}

fn init_lora(cfg: &VariantConfig, model: &ModelConfig) -> Vec<LoraLayer> {
    let (d, r) = (model.d_model, cfg.rank());
    let mat = |name: String| {
        let mut rng = substream(model.seed, &name);
        let a = Tensor::new(
            vec![d, r],
            (0..d * r).map(|_| randn(&mut rng) * 0.01).collect(),
        )
        .unwrap();
        LoraMat {
            a,
            b: Tensor::zeros(vec![r, d]),
        }
    };
    (0..model.n_layers)
        .map(|i| LoraLayer {
            q: mat(format!("lora.layer{i}.q")),
            k: mat(format!("lora.layer{i}.k")),
            v: mat(format!("lora.layer{i}.v")),
            o: mat(format!("lora.layer{i}.o")),
        })
        .collect()
}

impl VariantParams {
    /// Trainable tensors in the registration order used by
    /// [`VariantParams::load_on_tape`]. The patch vector is extracted, not
    /// trained, so it never appears here.
    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.mimic {
            for h in layer {
                out.extend([&h.f_w, &h.f_b, &h.v]);
            }
        }
        for l in &self.head_sharing {
            out.push(&l.g_w);
            out.push(&l.g_b);
            out.extend(l.v.iter());
        }
        for l in &self.query_sharing {
            out.extend(l.mu.iter());
            out.extend(l.v.iter());
        }
        for layer in &self.linear_shift {
            for h in layer {
                out.extend([&h.f_w, &h.f_b, &h.h_w, &h.h_b]);
            }
        }
        for l in &self.live {
            out.push(&l.vector);
            out.push(&l.scale);
        }
        for l in &self.lora {
            for m in [&l.q, &l.k, &l.v, &l.o] {
                out.push(&m.a);
                out.push(&m.b);
            }
        }
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.mimic {
            for h in layer {
                out.extend([&mut h.f_w, &mut h.f_b, &mut h.v]);
            }
        }
        for l in &mut self.head_sharing {
            out.push(&mut l.g_w);
            out.push(&mut l.g_b);
            out.extend(l.v.iter_mut());
        }
        for l in &mut self.query_sharing {
            out.extend(l.mu.iter_mut());
            out.extend(l.v.iter_mut());
        }
        for layer in &mut self.linear_shift {
            for h in layer {
                out.extend([&mut h.f_w, &mut h.f_b, &mut h.h_w, &mut h.h_b]);
            }
        }
        for l in &mut self.live {
            out.push(&mut l.vector);
            out.push(&mut l.scale);
        }
        for l in &mut self.lora {
            for m in [&mut l.q, &mut l.k, &mut l.v, &mut l.o] {
                out.push(&mut m.a);
                out.push(&mut m.b);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.trainable_tensors().iter().map(|t| t.numel()).sum()
    }

    /// Value-level head parameters, for routing through
    /// [`crate::model::mimic_forward`].
    pub fn mimic_value_params(&self) -> Vec<Vec<MimicHeadParams>> {
        self.mimic
            .iter()
            .map(|layer| layer.iter().map(|h| h.to_value_params()).collect())
            .collect()
    }

    /// Register the variant's tensors on a tape. Trainable tensors become
    /// gradient leaves when `trainable`; the patch vector is always frozen.
    pub fn load_on_tape(&self, tape: &mut Tape, trainable: bool) -> VariantVars {
        let mut reg = Vec::new();
        let mut put = |tape: &mut Tape, t: &Tensor| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            reg.push(v);
            v
        };

        let mimic: Vec<Vec<MimicHeadVars>> = self
            .mimic
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|h| MimicHeadVars {
                        f_w: put(tape, &h.f_w),
                        f_b: put(tape, &h.f_b),
                        v: put(tape, &h.v),
                    })
                    .collect()
            })
            .collect();
        let head_sharing: Vec<HeadSharingVars> = self
            .head_sharing
            .iter()
            .map(|l| HeadSharingVars {
                g_w: put(tape, &l.g_w),
                g_b: put(tape, &l.g_b),
                v: l.v.iter().map(|t| put(tape, t)).collect(),
            })
            .collect();
        let query_sharing: Vec<QuerySharingVars> = self
            .query_sharing
            .iter()
            .map(|l| QuerySharingVars {
                mu: l.mu.iter().map(|t| put(tape, t)).collect(),
                v: l.v.iter().map(|t| put(tape, t)).collect(),
            })
            .collect();
        let linear_shift: Vec<Vec<LinearShiftHeadVars>> = self
            .linear_shift
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|h| LinearShiftHeadVars {
                        f_w: put(tape, &h.f_w),
                        f_b: put(tape, &h.f_b),
                        h_w: put(tape, &h.h_w),
                        h_b: put(tape, &h.h_b),
                    })
                    .collect()
            })
            .collect();
        let live: Vec<(Var, Var)> = self
            .live
            .iter()
            .map(|l| (put(tape, &l.vector), put(tape, &l.scale)))
            .collect();
        let lora: Vec<LoraLayerVars> = self
            .lora
            .iter()
            .map(|l| LoraLayerVars {
                q: (put(tape, &l.q.a), put(tape, &l.q.b)),
                k: (put(tape, &l.k.a), put(tape, &l.k.b)),
                v: (put(tape, &l.v.a), put(tape, &l.v.b)),
                o: (put(tape, &l.o.a), put(tape, &l.o.b)),
            })
            .collect();
        let patch = self
            .patch
            .as_ref()
            .map(|p| (p.layer, tape.constant(p.vector.clone())));

        VariantVars {
            kind: self.config.kind,
            dropout_rate: self.config.dropout(),
            mimic,
            head_sharing,
            query_sharing,
            linear_shift,
            live,
            patch,
            lora,
            trainable: reg,
        }
    }
}

pub struct HeadSharingVars {
    pub g_w: Var,
    pub g_b: Var,
    pub v: Vec<Var>,
}

pub struct QuerySharingVars {
    pub mu: Vec<Var>,
    pub v: Vec<Var>,
}

pub struct LoraLayerVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
}

/// Tape handles mirroring [`VariantParams`], plus the flat leaf list in
/// [`VariantParams::trainable_tensors`] order.
pub struct VariantVars {
    pub kind: VariantKind,
    pub dropout_rate: f64,
    pub mimic: Vec<Vec<MimicHeadVars>>,
    pub head_sharing: Vec<HeadSharingVars>,
    pub query_sharing: Vec<QuerySharingVars>,
    pub linear_shift: Vec<Vec<LinearShiftHeadVars>>,
    pub live: Vec<(Var, Var)>,
    pub patch: Option<(usize, Var)>,
    pub lora: Vec<LoraLayerVars>,
    pub trainable: Vec<Var>,
}

impl VariantVars {
    /// Per-layer hooks for a forward pass over `seq_len` tokens.
    ///
    /// `patch_row` selects the row the task/function vector lands on (must
    /// be `Some` for patching variants, ignored otherwise). A dropout RNG
    /// enables adapter-input dropout; pass `None` at evaluation time.
    pub fn layer_hooks(
        &self,
        tape: &mut Tape,
        n_layers: usize,
        seq_len: usize,
        d_model: usize,
        patch_row: Option<usize>,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Vec<LayerHooks<'_>>> {
        // LoRA scaling factor α/r with α = 2r.
        const LORA_SCALE: f64 = 2.0;

        let mut hooks = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let attn = if !self.mimic.is_empty() {
                AttnHook::Mimic(&self.mimic[i])
            } else if !self.head_sharing.is_empty() {
                let hs = &self.head_sharing[i];
                AttnHook::HeadSharing {
                    g_w: hs.g_w,
                    g_b: hs.g_b,
                    v: &hs.v,
                }
            } else if !self.query_sharing.is_empty() {
                let qs = &self.query_sharing[i];
                AttnHook::QuerySharing {
                    mu: &qs.mu,
                    v: &qs.v,
                }
            } else if !self.linear_shift.is_empty() {
                AttnHook::LinearShift(&self.linear_shift[i])
            } else {
                AttnHook::None
            };

            let lora = if self.lora.is_empty() {
                None
            } else {
                let lv = &self.lora[i];
                let mut pair = |ab: (Var, Var)| -> Result<LoraPair> {
                    let dropout = match dropout_rng.as_deref_mut() {
                        Some(rng) if self.dropout_rate > 0.0 => {
                            Some(tape.constant(dropout_mask(
                                rng,
                                seq_len,
                                d_model,
                                self.dropout_rate,
                            )))
                        }
                        _ => None,
                    };
                    Ok(LoraPair {
                        a: ab.0,
                        b: ab.1,
                        scale: LORA_SCALE,
                        dropout,
                    })
                };
                Some(LayerLora {
                    q: Some(pair(lv.q)?),
                    k: Some(pair(lv.k)?),
                    v: Some(pair(lv.v)?),
                    o: Some(pair(lv.o)?),
                })
            };

            let post_ffn_add = if self.live.is_empty() {
                None
            } else {
                let (vec, scale) = self.live[i];
                Some(tape.matmul(scale, vec)?) // 1×1 · 1×d
            };

            let patch_hook = match self.patch {
                Some((layer, vec)) if layer == i => {
                    let row = patch_row.ok_or_else(|| {
                        Error::config("patching variant needs a patch row")
                    })?;
                    Some((row, vec))
                }
                _ => None,
            };

            hooks.push(LayerHooks {
                attn,
                lora,
                post_ffn_add,
                patch_row: patch_hook,
            });
        }
        Ok(hooks)
    }
}

/// Inverted-scaling dropout mask: entries are `1/(1−p)` with probability
/// `1−p`, else 0, so the expected forward is unchanged.
fn dropout_mask(rng: &mut ChaCha12Rng, rows: usize, cols: usize, p: f64) -> Tensor {
    let keep = 1.0 - p;
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Variant forward pass (no dropout), returning the trace and the per-layer
/// shift magnitudes for instrumentation.
pub struct VariantRun {
    pub trace: LayerTrace,
    /// μ̃ columns per layer and head (empty for hook-free layers).
    pub mu_per_layer: Vec<Vec<Tensor>>,
}

pub fn variant_forward(
    model: &ModelParams,
    variant: &VariantParams,
    tokens: &[usize],
    align: AlignPoint,
    patch_row: Option<usize>,
) -> Result<VariantRun> {
    let mut tape = Tape::new();
    let mvars = model.load_on_tape(&mut tape, false);
    let vvars = variant.load_on_tape(&mut tape, false);
    let hooks = vvars.layer_hooks(
        &mut tape,
        model.config.n_layers,
        tokens.len(),
        model.config.d_model,
        patch_row,
        None,
    )?;
    let mask = causal_mask(tokens.len(), tokens.len(), None);
    let out = forward_on_tape(&mut tape, &model.config, &mvars, tokens, &hooks, &mask, align)?;
    Ok(VariantRun {
        trace: LayerTrace {
            hidden: out.trace.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: tape.value(out.logits).clone(),
        },
        mu_per_layer: out.mu_probes.into_iter().map(|p| p.per_head).collect(),
    })
}

// ── Activation-vector extraction (task / function vectors) ──────────────

/// Mean hidden state at the last demonstration token of layer `layer`,
/// averaged over contexts. The query is not consumed.
pub fn tv_extract(
    model: &ModelParams,
    demos: &[PromptContext],
    layer: usize,
) -> Result<Tensor> {
    if demos.is_empty() {
        return Err(Error::EmptyInput("tv_extract: no contexts"));
    }
    if layer >= model.config.n_layers {
        return Err(Error::config(format!("tv_extract: layer {layer} out of range")));
    }
    let d = model.config.d_model;
    let mut acc = vec![0.0; d];
    for ctx in demos {
        let tokens: Vec<usize> = ctx.icd_tokens.iter().flatten().copied().collect();
        if tokens.is_empty() {
            return Err(Error::EmptyInput("tv_extract: context without demonstrations"));
        }
        let trace =
            crate::model::forward_with_trace(model, &tokens, None, AlignPoint::AfterFfn)?;
        let last = trace.hidden[layer].row(tokens.len() - 1);
        for (a, &x) in acc.iter_mut().zip(last) {
            *a += x;
        }
    }
    let n = demos.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Tensor::new(vec![1, d], acc)
}

/// Mean attention output at the last demonstration token of layer `layer`,
/// restricted to the chosen heads and passed through that layer's output
/// projection.
pub fn fv_extract(
    model: &ModelParams,
    demos: &[PromptContext],
    layer: usize,
    heads: &[usize],
) -> Result<Tensor> {
    if demos.is_empty() {
        return Err(Error::EmptyInput("fv_extract: no contexts"));
    }
    if layer >= model.config.n_layers {
        return Err(Error::config(format!("fv_extract: layer {layer} out of range")));
    }
    let (d, d_h) = (model.config.d_model, model.config.d_head());
    if heads.is_empty() || heads.iter().any(|&h| h >= model.config.n_heads) {
        return Err(Error::config("fv_extract: bad head set"));
    }
    let mut acc = vec![0.0; d];
    for ctx in demos {
        let tokens: Vec<usize> = ctx.icd_tokens.iter().flatten().copied().collect();
        if tokens.is_empty() {
            return Err(Error::EmptyInput("fv_extract: context without demonstrations"));
        }
        let mut tape = Tape::new();
        let vars = model.load_on_tape(&mut tape, false);
        let mask = causal_mask(tokens.len(), tokens.len(), None);
        let out = forward_on_tape(
            &mut tape,
            &model.config,
            &vars,
            &tokens,
            &[],
            &mask,
            AlignPoint::AfterFfn,
        )?;
        let cat = tape.value(out.attn_cat[layer]);
        let mut masked = vec![0.0; d];
        for &h in heads {
            let row = cat.row(tokens.len() - 1);
            masked[h * d_h..(h + 1) * d_h].copy_from_slice(&row[h * d_h..(h + 1) * d_h]);
        }
        let projected = matmul(
            &Tensor::new(vec![1, d], masked)?,
            &model.layers[layer].wo,
        )?;
        for (a, x) in acc.iter_mut().zip(projected.data) {
            *a += x;
        }
    }
    let n = demos.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Tensor::new(vec![1, d], acc)
}

/// Run the base model on a bare query with `vector` added to row
/// `patch_row` of layer `layer`.
pub fn patched_forward(
    model: &ModelParams,
    query_tokens: &[usize],
    layer: usize,
    vector: &Tensor,
    patch_row: usize,
    align: AlignPoint,
) -> Result<LayerTrace> {
    if patch_row >= query_tokens.len() {
        return Err(Error::config("patch row outside query"));
    }
    let mut tape = Tape::new();
    let vars = model.load_on_tape(&mut tape, false);
    let vec = tape.constant(vector.clone());
    let hooks: Vec<LayerHooks> = (0..model.config.n_layers)
        .map(|i| LayerHooks {
            patch_row: (i == layer).then_some((patch_row, vec)),
            ..Default::default()
        })
        .collect();
    let mask = causal_mask(query_tokens.len(), query_tokens.len(), None);
    let out = forward_on_tape(
        &mut tape,
        &model.config,
        &vars,
        query_tokens,
        &hooks,
        &mask,
        align,
    )?;
    Ok(LayerTrace {
        hidden: out.trace.iter().map(|&v| tape.value(v).clone()).collect(),
        logits: tape.value(out.logits).clone(),
    })
}
