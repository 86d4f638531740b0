//! Residual CNN denoiser with input scale normalization and its
//! differentiation engine.
//!
//! `forward(x) = x + s · R(x / s)` where `s` is the mean of the positive
//! entries of `x` and `R` is a plain stack of same-padded convolutions with a
//! smooth activation between layers. Jacobians treat `s` as a constant, so
//! `∂forward/∂x = I + J_R(x / s)`.

mod checkpoint;
pub(crate) mod conv;
mod diff;
mod power;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use diff::{param_grad_mse, param_grad_penalty, penalty_hinge, penalty_hinge_derivative, Linearization, PenaltyEval};
pub use power::{power_iteration, spectral_norm_l, PowerConfig, PowerStart, SpectralEstimate};

use crate::error::{Error, Result};
use crate::image::Image;
use conv::{conv_forward, ConvShape};

pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `ln(1 + eᵗ) − ln 2`: smooth, zero at the origin.
    SoftplusShifted,
    Relu,
    /// Linear layers; used for dense-Jacobian checks.
    Identity,
}

impl Activation {
    #[inline]
    pub fn value(self, t: f64) -> f64 {
        match self {
            Activation::SoftplusShifted => t.max(0.0) + (-t.abs()).exp().ln_1p() - std::f64::consts::LN_2,
            Activation::Relu => t.max(0.0),
            Activation::Identity => t,
        }
    }

    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::SoftplusShifted => sigmoid(t),
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn second_derivative(self, t: f64) -> f64 {
        match self {
            Activation::SoftplusShifted => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
            Activation::Relu | Activation::Identity => 0.0,
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::SoftplusShifted => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::SoftplusShifted),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub global_skip: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_layers: 5,
            channels: 16,
            kernel: 3,
            activation: Activation::SoftplusShifted,
            global_skip: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::invalid("the denoiser needs at least 2 layers"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        if !self.global_skip {
            return Err(Error::invalid("the global skip connection is mandatory"));
        }
        Ok(())
    }

    /// `(in_channels, out_channels)` of layer `l`.
    pub fn layer_channels(&self, l: usize) -> (usize, usize) {
        let cin = if l == 0 { 1 } else { self.channels };
        let cout = if l + 1 == self.n_layers { 1 } else { self.channels };
        (cin, cout)
    }

    /// Offsets of each layer's weights and biases in the flat parameter vector.
    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        (0..self.n_layers)
            .map(|l| {
                let (cin, cout) = self.layer_channels(l);
                let n_w = cout * cin * self.kernel * self.kernel;
                let slot = LayerSlot { in_ch: cin, out_ch: cout, weights: offset, bias: offset + n_w };
                offset += n_w + cout;
                slot
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layout().last().map_or(0, |s| s.bias + s.out_ch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weights: usize,
    pub bias: usize,
}

impl LayerSlot {
    pub fn n_weights(&self) -> usize {
        self.bias - self.weights
    }
}

/// All network weights, flattened layer by layer as `[weights][bias]` with
/// weights ordered `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: ArchConfig,
    pub theta: Vec<f64>,
}

/// A vector in parameter space with the same layout as [`DenoiserParams::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient(pub Vec<f64>);

impl ParamGradient {
    pub fn zeros(n: usize) -> Self {
        ParamGradient(vec![0.0; n])
    }

    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }
}

impl DenoiserParams {
    pub fn new(arch: ArchConfig, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.n_params() {
            return Err(Error::dim(format!("expected {} parameters, got {}", arch.n_params(), theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("denoiser parameters"));
        }
        Ok(DenoiserParams { arch, theta })
    }

    /// All-zero parameters: the residual branch vanishes and the denoiser is
    /// the identity.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        Self::new(arch, vec![0.0; arch.n_params()])
    }

    /// He-normal hidden layers, a down-scaled last layer so training starts
    /// near the identity, zero biases.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; arch.n_params()];
        let layout = arch.layout();
        for (l, slot) in layout.iter().enumerate() {
            let fan_in = (slot.in_ch * arch.kernel * arch.kernel) as f64;
            let mut std = (2.0 / fan_in).sqrt();
            if l + 1 == arch.n_layers {
                std *= 0.1;
            }
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut theta[slot.weights..slot.bias] {
                *w = normal.sample(&mut rng);
            }
        }
        Self::new(arch, theta)
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        self.arch.layout()
    }

    pub fn weights(&self, slot: &LayerSlot) -> &[f64] {
        &self.theta[slot.weights..slot.bias]
    }

    pub fn bias(&self, slot: &LayerSlot) -> &[f64] {
        &self.theta[slot.bias..slot.bias + slot.out_ch]
    }

    pub(crate) fn conv_shape(&self, slot: &LayerSlot, height: usize, width: usize) -> ConvShape {
        ConvShape { in_ch: slot.in_ch, out_ch: slot.out_ch, kernel: self.arch.kernel, height, width }
    }

    /// Residual branch `R(w)` without storing intermediates.
    pub fn residual(&self, w: &Image) -> Vec<f64> {
        let act = self.arch.activation;
        let mut a = w.data.clone();
        let layout = self.layout();
        for (l, slot) in layout.iter().enumerate() {
            let shape = self.conv_shape(slot, w.height, w.width);
            let mut z = vec![0.0; slot.out_ch * w.len()];
            conv_forward(&shape, &a, self.weights(slot), Some(self.bias(slot)), &mut z);
            if l + 1 < layout.len() {
                z.iter_mut().for_each(|v| *v = act.value(*v));
            }
            a = z;
        }
        a
    }
}

/// Normalization factor: mean of the positive entries, floored.
pub fn input_scale(x: &Image) -> f64 {
    let (sum, count) = x.data.iter().filter(|&&v| v > 0.0).fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
    if count == 0 {
        SCALE_FLOOR
    } else {
        (sum / count as f64).max(SCALE_FLOOR)
    }
}

/// `D_θ(x) = x + s · R(x / s)`.
pub fn forward(params: &DenoiserParams, x: &Image) -> Result<Image> {
    if !x.is_finite() {
        return Err(Error::non_finite("denoiser input"));
    }
    let s = input_scale(x);
    let w = x.map(|v| v / s);
    let r = params.residual(&w);
    let data = x.data.iter().zip(&r).map(|(xv, rv)| xv + s * rv).collect();
    Ok(Image { width: x.width, height: x.height, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_are_identity() {
        let p = DenoiserParams::zeros(ArchConfig::default()).unwrap();
        let x = Image::from_vec(4, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0, 1e-3, 2.0, 2.0, -1.0, 5.0, 4.0]).unwrap();
        assert_eq!(forward(&p, &x).unwrap(), x);
    }

    #[test]
    fn arch_validation() {
        let mut a = ArchConfig::default();
        assert!(a.validate().is_ok());
        a.kernel = 4;
        assert!(a.validate().is_err());
        a = ArchConfig { n_layers: 1, ..ArchConfig::default() };
        assert!(a.validate().is_err());
        a = ArchConfig { global_skip: false, ..ArchConfig::default() };
        assert!(a.validate().is_err());
    }

    #[test]
    fn layout_counts() {
        let a = ArchConfig { n_layers: 3, channels: 4, kernel: 3, ..ArchConfig::default() };
        // 1→4, 4→4, 4→1
        assert_eq!(a.n_params(), (4 * 9 + 4) + (16 * 9 + 4) + (4 * 9 + 1));
        let l = a.layout();
        assert_eq!(l[1].weights, 40);
        assert_eq!(l[2].bias, a.n_params() - 1);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        let h = 1e-6;
        for act in [Activation::SoftplusShifted, Activation::Identity] {
            assert_eq!(act.value(0.0), 0.0);
            for &t in &[-30.0, -2.0, -0.3, 0.0, 0.7, 5.0, 40.0] {
                let d = (act.value(t + h) - act.value(t - h)) / (2.0 * h);
                assert!((d - act.derivative(t)).abs() < 1e-8, "{act:?} {t}");
                let dd = (act.derivative(t + h) - act.derivative(t - h)) / (2.0 * h);
                assert!((dd - act.second_derivative(t)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = DenoiserParams::zeros(ArchConfig::default()).unwrap();
        let x = Image::from_vec(2, 1, vec![1.0, f64::NAN]).unwrap();
        assert!(forward(&p, &x).is_err());
    }

    #[test]
    fn scale_of_nonpositive_image_is_floored() {
        assert_eq!(input_scale(&Image::filled(3, 3, -1.0)), SCALE_FLOOR);
        let x = Image::from_vec(4, 1, vec![2.0, -5.0, 4.0, 0.0]).unwrap();
        assert_eq!(input_scale(&x), 3.0);
    }
}
