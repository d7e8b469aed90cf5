//! The Kanformer encoder and classification model.
//!
//! Block layout (each sub-module residual, macaron feed-forward halves):
//!
//! ```text
//! x ─ FF ─ MHSA ─ Conv ─ FF ─ LayerNorm ─▶
//! ```
//!
//! Feed-forward: `x + 0.5·FF(LN(x))`, FF = linear–swish–linear (baseline)
//! or ChebyKAN–swish–ChebyKAAN with the same dimensions (kan variant).
//! Convolution module: LN → pointwise(2D') → GLU → depthwise(k) →
//! batch-norm → swish → pointwise(D') → residual; the kan variant swaps
//! all three convolutions for Kolmogorov-Arnold convolutions.
//!
//! The encoder appends a learnable CLS vector at the last time index,
//! adds an absolute sinusoidal positional encoding once at the input, and
//! classifies from the CLS state of the final block.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kan::{normal_tensor, ChebyKanLayer, KanConv};
use crate::ops::Padding;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Feed-forward expansion factor.
pub const FF_EXPANSION: usize = 4;
/// Macaron half-step weight on feed-forward residuals.
pub const FF_RESIDUAL_WEIGHT: f64 = 0.5;
const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Forward phase. Train mode draws dropout masks from the provided rng and
/// updates batch-norm running statistics; eval mode is a pure function.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

fn apply_dropout(tape: &mut Tape, x: ValueId, p: f64, mode: &mut Mode) -> Result<ValueId> {
    match mode {
        Mode::Train { rng } if p > 0.0 => tape.dropout(x, p, rng),
        _ => Ok(x),
    }
}

// ── configuration ────────────────────────────────────────────────────

fn default_model_dim() -> usize { 32 }
fn default_heads() -> usize { 4 }
fn default_blocks() -> usize { 2 }
fn default_cheby_degree() -> usize { 4 }
fn default_depthwise_kernel() -> usize { 15 }
fn default_true() -> bool { true }

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature width D (the upstream feature extractor's output dim).
    pub feature_dim: usize,
    /// Encoder width D'.
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Number of encoder blocks L.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_cheby_degree")]
    pub cheby_degree: usize,
    #[serde(default = "default_depthwise_kernel")]
    pub depthwise_kernel: usize,
    #[serde(default = "default_true")]
    pub kan_projection: bool,
    #[serde(default = "default_true")]
    pub kan_feedforward: bool,
    #[serde(default = "default_true")]
    pub kan_convolution: bool,
    /// Dropout rate after each sub-module (0 disables dropout).
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.feature_dim == 0 {
            problems.push("feature_dim must be positive".to_string());
        }
        if self.model_dim == 0 {
            problems.push("model_dim must be positive".to_string());
        }
        if self.heads == 0 {
            problems.push("heads must be positive".to_string());
        } else if self.model_dim % self.heads != 0 {
            problems.push(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.cheby_degree > 8 {
            problems.push(format!("cheby_degree {} outside 0..=8", self.cheby_degree));
        }
        if self.depthwise_kernel == 0 || self.depthwise_kernel % 2 == 0 {
            problems.push(format!(
                "depthwise_kernel {} must be odd and positive",
                self.depthwise_kernel
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON form; embedded in checkpoints and
    /// verified on load.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }
}

// ── elementary layers ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(
            &format!("{name}.w"),
            normal_tensor(&[in_dim, out_dim], (1.0 / in_dim as f64).sqrt(), rng),
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(LinearLayer { w, b, in_dim, out_dim })
    }

    fn forward(&self, store: &ParamStore, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::Dim(format!(
                "linear: input {:?} does not end in {}",
                shape, self.in_dim
            )));
        }
        let n: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[n, self.in_dim])?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(flat, w)?;
        let y = tape.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormLayer {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormLayer {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNormLayer { gamma, beta })
    }

    fn forward(&self, store: &ParamStore, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv1dLayer {
    w: ParamId,
    b: ParamId,
    groups: usize,
}

impl Conv1dLayer {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (in_ch / groups) * k;
        let w = store.add(
            &format!("{name}.w"),
            normal_tensor(&[out_ch, in_ch / groups, k], (1.0 / fan_in as f64).sqrt(), rng),
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[out_ch]))?;
        Ok(Conv1dLayer { w, b, groups })
    }

    /// Depthwise kernel initialized as a bank of random bandpass filters.
    fn new_depthwise_bandpass(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut taps = Vec::with_capacity(channels * k);
        for _ in 0..channels {
            let (omega, phase) = crate::kan::random_band(rng);
            taps.extend(crate::kan::gabor_taps(k, omega, phase));
        }
        let w = store.add(
            &format!("{name}.w"),
            Tensor::new(vec![channels, 1, k], taps)?,
        )?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[channels]))?;
        Ok(Conv1dLayer { w, b, groups: channels })
    }

    fn forward(&self, store: &ParamStore, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, Some(b), self.groups, Padding::Same)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNormLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNormLayer {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store
                .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store
                .add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0))?,
        })
    }

    fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        train: bool,
    ) -> Result<ValueId> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let mut rm = store.get(self.running_mean).value.clone();
        let mut rv = store.get(self.running_var).value.clone();
        let y = tape.batch_norm(x, gamma, beta, &mut rm, &mut rv, BN_MOMENTUM, BN_EPS, train)?;
        if train {
            store.get_mut(self.running_mean).value = rm;
            store.get_mut(self.running_var).value = rv;
        }
        Ok(y)
    }
}

// ── feed-forward module ──────────────────────────────────────────────

#[derive(Debug, Clone)]
enum FfCore {
    Mlp { lin1: LinearLayer, lin2: LinearLayer },
    Kan { kan1: ChebyKanLayer, kan2: ChebyKanLayer },
}

#[derive(Debug, Clone)]
pub struct FeedForwardModule {
    ln: LayerNormLayer,
    core: FfCore,
    dropout: f64,
}

impl FeedForwardModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kan: bool,
        degree: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let ln = LayerNormLayer::new(store, &format!("{name}.ln"), dim)?;
        let hidden = dim * FF_EXPANSION;
        let core = if kan {
            FfCore::Kan {
                kan1: ChebyKanLayer::new(store, &format!("{name}.kan1"), dim, hidden, degree, rng)?,
                kan2: ChebyKanLayer::new(store, &format!("{name}.kan2"), hidden, dim, degree, rng)?,
            }
        } else {
            FfCore::Mlp {
                lin1: LinearLayer::new(store, &format!("{name}.lin1"), dim, hidden, rng)?,
                lin2: LinearLayer::new(store, &format!("{name}.lin2"), hidden, dim, rng)?,
            }
        };
        Ok(FeedForwardModule { ln, core, dropout })
    }

    /// x + 0.5·FF(LN(x))
    pub fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        mode: &mut Mode,
    ) -> Result<ValueId> {
        let h = self.ln.forward(store, tape, x)?;
        let h = match &self.core {
            FfCore::Mlp { lin1, lin2 } => {
                let h = lin1.forward(store, tape, h)?;
                let h = tape.swish(h);
                lin2.forward(store, tape, h)?
            }
            FfCore::Kan { kan1, kan2 } => {
                let h = kan1.forward(store, tape, h)?;
                let h = tape.swish(h);
                kan2.forward(store, tape, h)?
            }
        };
        let h = apply_dropout(tape, h, self.dropout, mode)?;
        let h = tape.scale(h, FF_RESIDUAL_WEIGHT);
        tape.add(x, h)
    }
}

// ── multi-head self-attention ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    ln: LayerNormLayer,
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    o: LinearLayer,
    heads: usize,
    dim: usize,
    dropout: f64,
}

impl MultiHeadSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadSelfAttention {
            ln: LayerNormLayer::new(store, &format!("{name}.ln"), dim)?,
            q: LinearLayer::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: LinearLayer::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: LinearLayer::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: LinearLayer::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
            dropout,
        })
    }

    /// Returns the residual output and the attention tensor [B,h,T,T].
    pub(crate) fn forward_with_attention(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        mode: &mut Mode,
    ) -> Result<(ValueId, ValueId)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Dim(format!(
                "attention: input {:?} does not match [B,T,{}]",
                shape, self.dim
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;

        let h = self.ln.forward(store, tape, x)?;
        let split = |tape: &mut Tape, store: &mut ParamStore, lin: &LinearLayer, h: ValueId| -> Result<ValueId> {
            let p = lin.forward(store, tape, h)?;
            let p = tape.reshape(p, &[b, t, self.heads, dh])?;
            tape.swap_axes(p, 1, 2) // [B,h,T,dh]
        };
        let q = split(tape, store, &self.q, h)?;
        let k = split(tape, store, &self.k, h)?;
        let v = split(tape, store, &self.v, h)?;

        // scale q rather than the much larger T×T score matrix
        let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
        let kt = tape.swap_axes(k, 2, 3)?; // [B,h,dh,T]
        let scores = tape.matmul(q, kt)?; // [B,h,T,T]
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(attn, v)?; // [B,h,T,dh]
        let ctx = tape.swap_axes(ctx, 1, 2)?; // [B,T,h,dh]
        let ctx = tape.reshape(ctx, &[b, t, self.dim])?;
        let out = self.o.forward(store, tape, ctx)?;
        let out = apply_dropout(tape, out, self.dropout, mode)?;
        Ok((tape.add(x, out)?, attn))
    }

    /// x + MHSA(LN(x))
    pub fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        mode: &mut Mode,
    ) -> Result<ValueId> {
        Ok(self.forward_with_attention(store, tape, x, mode)?.0)
    }
}

// ── convolution module ───────────────────────────────────────────────

#[derive(Debug, Clone)]
enum ConvCore {
    Standard { pw1: Conv1dLayer, dw: Conv1dLayer, pw2: Conv1dLayer },
    Kan { pw1: KanConv, dw: KanConv, pw2: KanConv },
}

#[derive(Debug, Clone)]
pub struct ConvolutionModule {
    ln: LayerNormLayer,
    core: ConvCore,
    bn: BatchNormLayer,
    dropout: f64,
}

impl ConvolutionModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kernel: usize,
        kan: bool,
        degree: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let ln = LayerNormLayer::new(store, &format!("{name}.ln"), dim)?;
        let core = if kan {
            ConvCore::Kan {
                pw1: KanConv::pointwise(store, &format!("{name}.pw1"), dim, 2 * dim, degree, rng)?,
                dw: KanConv::depthwise_bandpass(store, &format!("{name}.dw"), dim, kernel, degree, rng)?,
                pw2: KanConv::pointwise(store, &format!("{name}.pw2"), dim, dim, degree, rng)?,
            }
        } else {
            ConvCore::Standard {
                pw1: Conv1dLayer::new(store, &format!("{name}.pw1"), dim, 2 * dim, 1, 1, rng)?,
                dw: Conv1dLayer::new_depthwise_bandpass(store, &format!("{name}.dw"), dim, kernel, rng)?,
                pw2: Conv1dLayer::new(store, &format!("{name}.pw2"), dim, dim, 1, 1, rng)?,
            }
        };
        let bn = BatchNormLayer::new(store, &format!("{name}.bn"), dim)?;
        Ok(ConvolutionModule { ln, core, bn, dropout })
    }

    /// x + Conv(LN(x)); layout LN → pointwise(2D') → GLU → depthwise(k) →
    /// batch-norm → swish → pointwise(D') → dropout → residual.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        mode: &mut Mode,
    ) -> Result<ValueId> {
        let h = self.ln.forward(store, tape, x)?;
        let h = tape.swap_axes(h, 1, 2)?; // [B,D,T]
        let h = match &self.core {
            ConvCore::Standard { pw1, .. } => pw1.forward(store, tape, h)?,
            ConvCore::Kan { pw1, .. } => pw1.forward(store, tape, h)?,
        };
        // GLU gates over channels; the op works on the last axis
        let h = tape.swap_axes(h, 1, 2)?;
        let h = tape.glu(h)?;
        let h = tape.swap_axes(h, 1, 2)?;
        let h = match &self.core {
            ConvCore::Standard { dw, .. } => dw.forward(store, tape, h)?,
            ConvCore::Kan { dw, .. } => dw.forward(store, tape, h)?,
        };
        let h = self.bn.forward(store, tape, h, mode.is_train())?;
        let h = tape.swish(h);
        let h = match &self.core {
            ConvCore::Standard { pw2, .. } => pw2.forward(store, tape, h)?,
            ConvCore::Kan { pw2, .. } => pw2.forward(store, tape, h)?,
        };
        let h = tape.swap_axes(h, 1, 2)?; // [B,T,D]
        let h = apply_dropout(tape, h, self.dropout, mode)?;
        tape.add(x, h)
    }
}

// ── block and full model ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct KanformerBlock {
    pub ff1: FeedForwardModule,
    pub mhsa: MultiHeadSelfAttention,
    pub conv: ConvolutionModule,
    pub ff2: FeedForwardModule,
    ln_final: LayerNormLayer,
}

impl KanformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(KanformerBlock {
            ff1: FeedForwardModule::new(
                store,
                &format!("{name}.ff1"),
                d,
                cfg.kan_feedforward,
                cfg.cheby_degree,
                cfg.dropout,
                rng,
            )?,
            mhsa: MultiHeadSelfAttention::new(
                store,
                &format!("{name}.attn"),
                d,
                cfg.heads,
                cfg.dropout,
                rng,
            )?,
            conv: ConvolutionModule::new(
                store,
                &format!("{name}.conv"),
                d,
                cfg.depthwise_kernel,
                cfg.kan_convolution,
                cfg.cheby_degree,
                cfg.dropout,
                rng,
            )?,
            ff2: FeedForwardModule::new(
                store,
                &format!("{name}.ff2"),
                d,
                cfg.kan_feedforward,
                cfg.cheby_degree,
                cfg.dropout,
                rng,
            )?,
            ln_final: LayerNormLayer::new(store, &format!("{name}.ln_final"), d)?,
        })
    }

    /// FF → MHSA → Conv → FF → final layer norm.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        mode: &mut Mode,
    ) -> Result<ValueId> {
        let h = self.ff1.forward(store, tape, x, mode)?;
        let h = self.mhsa.forward(store, tape, h, mode)?;
        let h = self.conv.forward(store, tape, h, mode)?;
        let h = self.ff2.forward(store, tape, h, mode)?;
        self.ln_final.forward(store, tape, h)
    }
}

#[derive(Debug, Clone)]
enum Projection {
    LinearSelu(LinearLayer),
    ChebyKan(ChebyKanLayer),
}

/// Sinusoidal absolute positional encoding of shape [t, d].
pub fn sinusoidal_positional_encoding(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[t, d], |flat| {
        let pos = (flat / d) as f64;
        let i = flat % d;
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

pub struct KanformerModel {
    pub config: ModelConfig,
    /// Per-channel feature standardization applied before the projection.
    /// Identity until fitted; persisted with checkpoints as buffers.
    input_mean: ParamId,
    input_inv_std: ParamId,
    projection: Projection,
    cls: ParamId,
    pub blocks: Vec<KanformerBlock>,
    head: LinearLayer,
}

/// Construct a model and its parameter store, deterministically in `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(KanformerModel, ParamStore)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_mean = store.add_buffer("input_norm.mean", Tensor::zeros(&[cfg.feature_dim]))?;
    let input_inv_std =
        store.add_buffer("input_norm.inv_std", Tensor::full(&[cfg.feature_dim], 1.0))?;
    let projection = if cfg.kan_projection {
        Projection::ChebyKan(ChebyKanLayer::new(
            &mut store,
            "projection",
            cfg.feature_dim,
            cfg.model_dim,
            cfg.cheby_degree,
            &mut rng,
        )?)
    } else {
        Projection::LinearSelu(LinearLayer::new(
            &mut store,
            "projection.linear",
            cfg.feature_dim,
            cfg.model_dim,
            &mut rng,
        )?)
    };
    let cls = store.add("cls_token", normal_tensor(&[1, cfg.model_dim], 0.02, &mut rng))?;
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for i in 0..cfg.blocks {
        blocks.push(KanformerBlock::new(
            &mut store,
            &format!("blocks.{i}"),
            cfg,
            &mut rng,
        )?);
    }
    let head = LinearLayer::new(&mut store, "head", cfg.model_dim, 2, &mut rng)?;
    Ok((
        KanformerModel {
            config: cfg.clone(),
            input_mean,
            input_inv_std,
            projection,
            cls,
            blocks,
            head,
        },
        store,
    ))
}

impl KanformerModel {
    /// Fit the per-channel feature standardization from a dataset split
    /// (typically train). The statistics live in checkpoint buffers, so a
    /// restored model applies the same normalization at evaluation time.
    pub fn fit_input_normalization(
        &self,
        store: &mut ParamStore,
        split: &crate::data::DatasetSplit,
    ) -> Result<()> {
        let d = self.config.feature_dim;
        let mut sum = vec![0.0; d];
        let mut sumsq = vec![0.0; d];
        let mut n = 0usize;
        for r in &split.records {
            if r.features.shape().last() != Some(&d) {
                return Err(Error::Dim(format!(
                    "utterance '{}' has feature width {:?}, expected {d}",
                    r.id,
                    r.features.shape()
                )));
            }
            let t = r.features.shape()[0];
            for row in 0..t {
                for ch in 0..d {
                    let v = r.features.at(&[row, ch]);
                    sum[ch] += v;
                    sumsq[ch] += v * v;
                }
            }
            n += t;
        }
        if n == 0 {
            return Err(Error::Input("cannot fit normalization on an empty split".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n as f64 - m * m).max(1e-12);
                1.0 / var.sqrt()
            })
            .collect();
        store.get_mut(self.input_mean).value = Tensor::new(vec![d], mean)?;
        store.get_mut(self.input_inv_std).value = Tensor::new(vec![d], inv)?;
        Ok(())
    }

    /// Project, append the CLS vector at the last time index, add the
    /// positional encoding, and run all blocks: [B,T,D] → [B,T+1,D'].
    pub fn encoder_forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        mode: &mut Mode,
    ) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.config.feature_dim {
            return Err(Error::Dim(format!(
                "encoder: input {:?} does not match [B,T,{}]",
                shape, self.config.feature_dim
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        // standardize features per channel (identity until fitted)
        let mean = tape.leaf(store.get(self.input_mean).value.clone());
        let inv = tape.leaf(store.get(self.input_inv_std).value.clone());
        let x = tape.sub(x, mean)?;
        let x = tape.mul(x, inv)?;
        let proj = match &self.projection {
            Projection::LinearSelu(lin) => {
                let h = lin.forward(store, tape, x)?;
                tape.selu(h)
            }
            Projection::ChebyKan(kan) => kan.forward(store, tape, x)?,
        };
        let cls = tape.param(store, self.cls);
        let cls = tape.reshape(cls, &[1, 1, self.config.model_dim])?;
        let cls = tape.broadcast_to(cls, &[b, 1, self.config.model_dim])?;
        let seq = tape.concat(&[proj, cls], 1)?;
        let pe = tape.leaf(sinusoidal_positional_encoding(t + 1, self.config.model_dim));
        let mut h = tape.add(seq, pe)?;
        for block in &self.blocks {
            h = block.forward(store, tape, h, mode)?;
        }
        Ok(h)
    }

    /// Logits [B,2] (bonafide, spoof) read from the CLS position.
    pub fn logits(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        mode: &mut Mode,
    ) -> Result<ValueId> {
        let t = tape.value(x).shape()[1];
        let enc = self.encoder_forward(store, tape, x, mode)?;
        let b = tape.value(enc).shape()[0];
        let cls_state = tape.slice(enc, 1, t, 1)?;
        let cls_state = tape.reshape(cls_state, &[b, self.config.model_dim])?;
        self.head.forward(store, tape, cls_state)
    }

    /// Logits plus the scalar detection score per utterance:
    /// score = logit(bonafide) − logit(spoof), higher = more bonafide.
    pub fn classify(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: ValueId,
        mode: &mut Mode,
    ) -> Result<(ValueId, Vec<f64>)> {
        let logits = self.logits(store, tape, x, mode)?;
        let t = tape.value(logits);
        let b = t.shape()[0];
        let scores = (0..b).map(|i| t.at(&[i, 0]) - t.at(&[i, 1])).collect();
        Ok((logits, scores))
    }
}
