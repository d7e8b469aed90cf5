//! Kolmogorov-Arnold layers and convolutions.
//!
//! Three learnable units built on univariate function expansions:
//!
//! - [`ChebyKanLayer`] — per input/output edge, a Chebyshev polynomial
//!   expansion of the tanh-squashed input, contracted with a trainable
//!   coefficient tensor of shape `H x O x (degree+1)`;
//! - [`BsplineKanLayer`] — per edge, a SiLU base branch plus a B-spline
//!   expansion, each with its own learnable scale;
//! - [`KanConv`] — a convolution whose kernel taps are univariate
//!   Chebyshev expansions instead of scalar weights, in pointwise,
//!   depthwise, and full (channel-summing) forms.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use crate::ops::kan_conv2d_full;
pub use crate::ops::{KanConvMode, Padding};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{BsplineGrid, Tape, ValueId};
use crate::tensor::Tensor;

/// Draw a tensor with i.i.d. Normal(0, std) entries.
pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Unit-norm FIR taps of a Hamming-windowed cosine centered in the kernel.
/// A bank of these at random center frequencies gives temporal layers
/// frequency selectivity from the first step instead of waiting for it to
/// emerge from noise-level gradients.
pub(crate) fn gabor_taps(k: usize, omega: f64, phase: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let mid = (k as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..k)
        .map(|a| {
            let t = a as f64 - mid;
            let ham =
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * a as f64 / (k as f64 - 1.0)).cos();
            (omega * t + phase).cos() * ham
        })
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);
    w
}

/// Random bandpass parameters for one filter.
pub(crate) fn random_band(rng: &mut ChaCha8Rng) -> (f64, f64) {
    use rand::Rng;
    let omega = rng.random_range(0.05 * std::f64::consts::PI..0.95 * std::f64::consts::PI);
    let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    (omega, phase)
}

/// Chebyshev coefficient init. The T_1 slice is drawn at Kaiming scale
/// (std 1/√fan_in) so the unit starts as a near-linear map of the squashed
/// input; the remaining degrees carry Normal(0, 1/(fan_in·(degree+1)))
/// perturbations. A uniform small init leaves the layer's input
/// sensitivity far below that of a linear layer, and stacked KAN units
/// then train orders of magnitude slower.
pub(crate) fn cheby_coeff_tensor(
    shape: &[usize],
    fan_in: usize,
    degree: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let j = degree + 1;
    debug_assert_eq!(*shape.last().unwrap(), j);
    let linear = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
    let other = Normal::new(0.0, (1.0 / (fan_in * j) as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |i| {
        if i % j == 1 {
            linear.sample(rng)
        } else {
            other.sample(rng)
        }
    })
}

// ── ChebyKAN ─────────────────────────────────────────────────────────

/// Chebyshev KAN layer: y[n,o] = Σ_i Σ_j T_j(tanh x[n,i]) · C[i,o,j].
///
/// The input may carry any leading shape; it is flattened to `(N, H)`,
/// evaluated, and reshaped back with the last axis replaced by `O`.
#[derive(Debug, Clone)]
pub struct ChebyKanLayer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub degree: usize,
    pub coeffs: ParamId,
}

impl ChebyKanLayer {
    /// Coefficients are drawn from Normal(0, 1/(H·(degree+1))) so the
    /// initial outputs have O(1) magnitude.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        degree: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config(format!(
                "chebykan layer '{name}' needs positive dimensions"
            )));
        }
        let j = degree + 1;
        let coeffs = store.add(
            &format!("{name}.cheby_coeffs"),
            cheby_coeff_tensor(&[input_dim, output_dim, j], input_dim, degree, rng),
        )?;
        Ok(ChebyKanLayer {
            input_dim,
            output_dim,
            degree,
            coeffs,
        })
    }

    /// H·O·(degree+1), exactly.
    pub fn parameter_count(&self) -> usize {
        self.input_dim * self.output_dim * (self.degree + 1)
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.last() != Some(&self.input_dim) {
            return Err(Error::Dim(format!(
                "chebykan: input {:?} does not end in {}",
                shape, self.input_dim
            )));
        }
        let n: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[n, self.input_dim])?;
        let coeffs = tape.param(store, self.coeffs);
        let y = tape.cheby_kan(flat, coeffs, self.degree)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.output_dim;
        tape.reshape(y, &out_shape)
    }
}

// ── B-spline KAN ─────────────────────────────────────────────────────

/// B-spline KAN layer. Each edge function is
/// φ_{i,o}(x) = w_b[i,o]·SiLU(x) + w_s[i,o]·Σ_g c[i,o,g]·B_g(x),
/// and output o sums φ_{i,o}(x_i) over inputs i.
#[derive(Debug, Clone)]
pub struct BsplineKanLayer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub grid: BsplineGrid,
    pub spline_coeffs: ParamId,
    pub w_b: ParamId,
    pub w_s: ParamId,
}

impl BsplineKanLayer {
    pub const DEFAULT_GRID: usize = 5;
    pub const DEFAULT_ORDER: usize = 3;

    /// Spline coefficients ~ Normal(0, 0.1); the base scale w_b is
    /// Kaiming-style (std 1/√d_in); the spline scale w_s starts at 1.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        grid: BsplineGrid,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config(format!(
                "b-spline kan layer '{name}' needs positive dimensions"
            )));
        }
        let nb = grid.basis_count();
        let spline_coeffs = store.add(
            &format!("{name}.spline_coeffs"),
            normal_tensor(&[input_dim, output_dim, nb], 0.1, rng),
        )?;
        let w_b = store.add(
            &format!("{name}.w_b"),
            normal_tensor(&[input_dim, output_dim], (1.0 / input_dim as f64).sqrt(), rng),
        )?;
        let w_s = store.add(
            &format!("{name}.w_s"),
            Tensor::full(&[input_dim, output_dim], 1.0),
        )?;
        Ok(BsplineKanLayer {
            input_dim,
            output_dim,
            grid,
            spline_coeffs,
            w_b,
            w_s,
        })
    }

    pub fn parameter_count(&self) -> usize {
        let nb = self.grid.basis_count();
        self.input_dim * self.output_dim * (nb + 2)
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.last() != Some(&self.input_dim) {
            return Err(Error::Dim(format!(
                "b-spline kan: input {:?} does not end in {}",
                shape, self.input_dim
            )));
        }
        let n: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[n, self.input_dim])?;

        // base branch: SiLU(x) · w_b
        let w_b = tape.param(store, self.w_b);
        let silu = tape.silu(flat);
        let base = tape.matmul(silu, w_b)?;

        // spline branch: basis(x) contracted with w_s ⊙ c
        let w_s = tape.param(store, self.w_s);
        let coeffs = tape.param(store, self.spline_coeffs);
        let w_s3 = tape.reshape(w_s, &[self.input_dim, self.output_dim, 1])?;
        let scaled = tape.mul(coeffs, w_s3)?;
        let basis = tape.bspline_basis(flat, &self.grid)?;
        let spline = tape.contract_cheby(basis, scaled)?;

        let y = tape.add(base, spline)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.output_dim;
        tape.reshape(y, &out_shape)
    }
}

// ── Kolmogorov-Arnold convolution ────────────────────────────────────

/// Convolution whose taps are univariate Chebyshev expansions.
///
/// Coefficient layout per mode:
/// - pointwise: `[c_in, c_out, degree+1]` (k = 1; identical to a
///   [`ChebyKanLayer`] applied at every time step),
/// - depthwise: `[k, c, degree+1]` (no channel sum),
/// - full: `[k, c_in, c_out, degree+1]` (channel-summing form with an
///   output-channel axis).
#[derive(Debug, Clone)]
pub struct KanConv {
    pub mode: KanConvMode,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub degree: usize,
    pub padding: Padding,
    pub coeffs: ParamId,
}

impl KanConv {
    pub fn pointwise(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        degree: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let j = degree + 1;
        let coeffs = store.add(
            &format!("{name}.kanconv_coeffs"),
            cheby_coeff_tensor(&[in_channels, out_channels, j], in_channels, degree, rng),
        )?;
        Ok(KanConv {
            mode: KanConvMode::Pointwise,
            kernel_size: 1,
            in_channels,
            out_channels,
            degree,
            padding: Padding::Same,
            coeffs,
        })
    }

    pub fn depthwise(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel_size: usize,
        degree: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel_size == 0 {
            return Err(Error::Config(format!(
                "kan conv '{name}' needs a positive kernel size"
            )));
        }
        let j = degree + 1;
        let coeffs = store.add(
            &format!("{name}.kanconv_coeffs"),
            cheby_coeff_tensor(&[kernel_size, channels, j], kernel_size, degree, rng),
        )?;
        Ok(KanConv {
            mode: KanConvMode::Depthwise,
            kernel_size,
            in_channels: channels,
            out_channels: channels,
            degree,
            padding: Padding::Same,
            coeffs,
        })
    }

    /// Depthwise variant whose T_1 (linear) slice starts as a bank of
    /// random bandpass filters; higher degrees carry the usual small noise.
    pub fn depthwise_bandpass(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel_size: usize,
        degree: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut conv = Self::depthwise(store, name, channels, kernel_size, degree, rng)?;
        let j = degree + 1;
        let value = &mut store.get_mut(conv.coeffs).value;
        for ch in 0..channels {
            let (omega, phase) = random_band(rng);
            let taps = gabor_taps(kernel_size, omega, phase);
            for (a, &tap) in taps.iter().enumerate() {
                if degree >= 1 {
                    value.data_mut()[(a * channels + ch) * j + 1] = tap;
                }
            }
        }
        conv.padding = Padding::Same;
        Ok(conv)
    }

    pub fn full(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        degree: usize,
        padding: Padding,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel_size == 0 {
            return Err(Error::Config(format!(
                "kan conv '{name}' needs a positive kernel size"
            )));
        }
        let j = degree + 1;
        let coeffs = store.add(
            &format!("{name}.kanconv_coeffs"),
            cheby_coeff_tensor(
                &[kernel_size, in_channels, out_channels, j],
                kernel_size * in_channels,
                degree,
                rng,
            ),
        )?;
        Ok(KanConv {
            mode: KanConvMode::Full,
            kernel_size,
            in_channels,
            out_channels,
            degree,
            padding,
            coeffs,
        })
    }

    pub fn parameter_count(&self) -> usize {
        let j = self.degree + 1;
        match self.mode {
            KanConvMode::Pointwise => self.in_channels * self.out_channels * j,
            KanConvMode::Depthwise => self.kernel_size * self.in_channels * j,
            KanConvMode::Full => {
                self.kernel_size * self.in_channels * self.out_channels * j
            }
        }
    }

    /// x is [B, C, T]; output is [B, C', T] (same padding) or
    /// [B, C', T-k+1] (valid).
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let shape = tape.value(x).shape();
        if shape.len() != 3 || shape[1] != self.in_channels {
            return Err(Error::Config(format!(
                "kan conv: input {:?} does not provide {} channels",
                shape, self.in_channels
            )));
        }
        let coeffs = tape.param(store, self.coeffs);
        tape.kan_conv1d(
            x,
            coeffs,
            self.mode,
            self.kernel_size,
            self.degree,
            self.padding,
        )
    }
}
