//! Forward-mode, reverse-mode and mixed second-order derivatives of the
//! denoiser.

use super::conv::{conv_forward, conv_param_grad, conv_transpose};
use super::{input_scale, DenoiserParams, ParamGradient};
use crate::error::{Error, Result};
use crate::image::Image;

/// Primal pass of the residual branch at a fixed input, with everything the
/// derivative passes need.
///
/// Layer `l` computes `z[l] = W_l ⋆ a[l] + b_l`; `a[0]` is the normalized
/// input and `a[l + 1] = φ(z[l])`. The residual is `z[L − 1]`.
#[derive(Debug, Clone)]
pub struct Linearization<'a> {
    params: &'a DenoiserParams,
    height: usize,
    width: usize,
    scale: f64,
    input: Vec<f64>,
    a: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    dphi: Vec<Vec<f64>>,
}

impl<'a> Linearization<'a> {
    pub fn new(params: &'a DenoiserParams, x: &Image) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::non_finite("denoiser input"));
        }
        let scale = input_scale(x);
        let act = params.arch.activation;
        let layout = params.layout();
        let n_layers = layout.len();
        let mut a = vec![x.data.iter().map(|v| v / scale).collect::<Vec<f64>>()];
        let mut z = Vec::with_capacity(n_layers);
        let mut dphi = Vec::with_capacity(n_layers - 1);
        for (l, slot) in layout.iter().enumerate() {
            let shape = params.conv_shape(slot, x.height, x.width);
            let mut zl = vec![0.0; slot.out_ch * x.len()];
            conv_forward(&shape, &a[l], params.weights(slot), Some(params.bias(slot)), &mut zl);
            if l + 1 < n_layers {
                a.push(zl.iter().map(|&t| act.value(t)).collect());
                dphi.push(zl.iter().map(|&t| act.derivative(t)).collect());
            }
            z.push(zl);
        }
        Ok(Linearization { params, height: x.height, width: x.width, scale, input: x.data.clone(), a, z, dphi })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn n_layers(&self) -> usize {
        self.z.len()
    }

    fn check(&self, v: &Image) -> Result<()> {
        if v.height != self.height || v.width != self.width {
            return Err(Error::dim(format!(
                "tangent {}x{} vs input {}x{}",
                v.width, v.height, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Denoiser output `x + s · R`.
    pub fn output(&self) -> Image {
        let r = &self.z[self.n_layers() - 1];
        let data = self.input.iter().zip(r).map(|(x, rv)| x + self.scale * rv).collect();
        Image { width: self.width, height: self.height, data }
    }

    /// Tangents `dz[l]` of every layer for an input tangent `u`.
    fn tangent_pass(&self, u: &[f64]) -> Vec<Vec<f64>> {
        let layout = self.params.layout();
        let mut dz: Vec<Vec<f64>> = Vec::with_capacity(layout.len());
        let mut da = u.to_vec();
        for (l, slot) in layout.iter().enumerate() {
            let shape = self.params.conv_shape(slot, self.height, self.width);
            let mut out = vec![0.0; slot.out_ch * self.height * self.width];
            conv_forward(&shape, &da, self.params.weights(slot), None, &mut out);
            if l + 1 < layout.len() {
                da = out.iter().zip(&self.dphi[l]).map(|(d, p)| d * p).collect();
            }
            dz.push(out);
        }
        dz
    }

    /// `J_R t`.
    pub fn residual_jvp(&self, t: &Image) -> Result<Vec<f64>> {
        self.check(t)?;
        Ok(self.tangent_pass(&t.data).pop().unwrap())
    }

    /// `J_Rᵀ c`.
    pub fn residual_vjp(&self, c: &Image) -> Result<Vec<f64>> {
        self.check(c)?;
        Ok(self.adjoint_pass(c.data.clone(), None))
    }

    /// Backpropagates `z̄[L−1] = seed`; accumulates parameter gradients when
    /// asked and returns the input adjoint.
    fn adjoint_pass(&self, seed: Vec<f64>, mut grad: Option<&mut ParamGradient>) -> Vec<f64> {
        let layout = self.params.layout();
        let mut zbar = seed;
        for l in (0..layout.len()).rev() {
            let slot = &layout[l];
            let shape = self.params.conv_shape(slot, self.height, self.width);
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g.0[slot.weights..slot.bias + slot.out_ch].split_at_mut(slot.n_weights());
                conv_param_grad(&shape, &zbar, &self.a[l], gw, Some(gb));
            }
            let mut abar = vec![0.0; slot.in_ch * self.height * self.width];
            conv_transpose(&shape, &zbar, self.params.weights(slot), &mut abar);
            if l == 0 {
                return abar;
            }
            zbar = abar.iter().zip(&self.dphi[l - 1]).map(|(a, p)| a * p).collect();
        }
        unreachable!("network has at least one layer")
    }

    /// Jacobian-vector product of the denoiser: `t + J_R t`.
    pub fn jvp(&self, t: &Image) -> Result<Image> {
        let r = self.residual_jvp(t)?;
        let data = t.data.iter().zip(&r).map(|(a, b)| a + b).collect();
        Ok(Image { width: self.width, height: self.height, data })
    }

    /// Vector-Jacobian product of the denoiser: `c + J_Rᵀ c`.
    pub fn vjp(&self, c: &Image) -> Result<Image> {
        let r = self.residual_vjp(c)?;
        let data = c.data.iter().zip(&r).map(|(a, b)| a + b).collect();
        Ok(Image { width: self.width, height: self.height, data })
    }

    /// `J_L v = 2 J_D v − v = v + 2 J_R v`.
    pub fn l_jvp(&self, v: &Image) -> Result<Image> {
        let r = self.residual_jvp(v)?;
        let data = v.data.iter().zip(&r).map(|(a, b)| a + 2.0 * b).collect();
        Ok(Image { width: self.width, height: self.height, data })
    }

    /// `J_Lᵀ c = c + 2 J_Rᵀ c`.
    pub fn l_vjp(&self, c: &Image) -> Result<Image> {
        let r = self.residual_vjp(c)?;
        let data = c.data.iter().zip(&r).map(|(a, b)| a + 2.0 * b).collect();
        Ok(Image { width: self.width, height: self.height, data })
    }

    /// Gradient of `‖output − target‖²` with respect to the parameters.
    pub fn mse_grad(&self, target: &Image) -> Result<(f64, ParamGradient)> {
        self.check(target)?;
        let out = self.output();
        let diff: Vec<f64> = out.data.iter().zip(&target.data).map(|(o, t)| o - t).collect();
        let loss = diff.iter().map(|d| d * d).sum();
        // ∂/∂R of ‖x + s R − target‖² is 2 s (out − target)
        let seed = diff.iter().map(|d| 2.0 * self.scale * d).collect();
        let mut grad = ParamGradient::zeros(self.params.theta.len());
        self.adjoint_pass(seed, Some(&mut grad));
        Ok((loss, grad))
    }

    /// Value and parameter gradient of `h(‖J_L u‖)` for a fixed direction `u`,
    /// with `h(σ) = max(σ + ε − 1, 0)^{1+α}`. Differentiates through the
    /// tangent pass: reverse mode over forward mode.
    pub fn penalty_grad(&self, u: &Image, epsilon: f64, alpha: f64) -> Result<PenaltyEval> {
        self.check(u)?;
        let un = u.norm();
        if (un - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("penalty direction must be unit norm, got {un}")));
        }
        let dz = self.tangent_pass(&u.data);
        let n_layers = self.n_layers();
        let r: Vec<f64> = u.data.iter().zip(&dz[n_layers - 1]).map(|(a, b)| a + 2.0 * b).collect();
        let sigma = crate::image::norm(&r);
        let value = penalty_hinge(sigma, epsilon, alpha);
        let mut grad = ParamGradient::zeros(self.params.theta.len());
        let slope = penalty_hinge_derivative(sigma, epsilon, alpha);
        if slope == 0.0 || sigma == 0.0 {
            return Ok(PenaltyEval { sigma, value, grad });
        }
        let act = self.params.arch.activation;
        let layout = self.params.layout();
        let plane = self.height * self.width;

        // adjoints of the tangent (dz) and primal (z) pre-activations
        let mut dzbar: Vec<f64> = r.iter().map(|v| slope * 2.0 * v / sigma).collect();
        let mut zbar: Option<Vec<f64>> = None;
        for l in (0..n_layers).rev() {
            let slot = &layout[l];
            let shape = self.params.conv_shape(slot, self.height, self.width);
            let da_l: Vec<f64> = if l == 0 {
                u.data.clone()
            } else {
                dz[l - 1].iter().zip(&self.dphi[l - 1]).map(|(d, p)| d * p).collect()
            };
            {
                let (gw, gb) = grad.0[slot.weights..slot.bias + slot.out_ch].split_at_mut(slot.n_weights());
                conv_param_grad(&shape, &dzbar, &da_l, gw, None);
                if let Some(zb) = &zbar {
                    conv_param_grad(&shape, zb, &self.a[l], gw, Some(gb));
                }
            }
            if l == 0 {
                break;
            }
            let mut dabar = vec![0.0; slot.in_ch * plane];
            conv_transpose(&shape, &dzbar, self.params.weights(slot), &mut dabar);
            let mut abar = vec![0.0; slot.in_ch * plane];
            if let Some(zb) = &zbar {
                conv_transpose(&shape, zb, self.params.weights(slot), &mut abar);
            }
            let prev_z = &self.z[l - 1];
            let prev_dz = &dz[l - 1];
            let prev_dphi = &self.dphi[l - 1];
            let mut next_zbar = Vec::with_capacity(abar.len());
            let mut next_dzbar = Vec::with_capacity(abar.len());
            for k in 0..abar.len() {
                next_dzbar.push(prev_dphi[k] * dabar[k]);
                next_zbar.push(prev_dphi[k] * abar[k] + act.second_derivative(prev_z[k]) * prev_dz[k] * dabar[k]);
            }
            dzbar = next_dzbar;
            zbar = Some(next_zbar);
        }
        Ok(PenaltyEval { sigma, value, grad })
    }
}

#[derive(Debug, Clone)]
pub struct PenaltyEval {
    /// `‖J_L u‖` at the fixed direction.
    pub sigma: f64,
    pub value: f64,
    pub grad: ParamGradient,
}

pub fn penalty_hinge(sigma: f64, epsilon: f64, alpha: f64) -> f64 {
    let m = (sigma + epsilon - 1.0).max(0.0);
    if m == 0.0 {
        0.0
    } else {
        m.powf(1.0 + alpha)
    }
}

pub fn penalty_hinge_derivative(sigma: f64, epsilon: f64, alpha: f64) -> f64 {
    let m = sigma + epsilon - 1.0;
    if m <= 0.0 {
        0.0
    } else {
        (1.0 + alpha) * m.powf(alpha)
    }
}

/// `(‖D_θ(x) − target‖², ∂/∂θ)`.
pub fn param_grad_mse(params: &DenoiserParams, x: &Image, target: &Image) -> Result<(f64, ParamGradient)> {
    Linearization::new(params, x)?.mse_grad(target)
}

/// Penalty value and gradient at `x_tilde` along the fixed unit direction
/// `u_fixed` (no gradient flows through the power iteration).
pub fn param_grad_penalty(
    params: &DenoiserParams,
    x_tilde: &Image,
    u_fixed: &Image,
    epsilon: f64,
    alpha: f64,
) -> Result<PenaltyEval> {
    Linearization::new(params, x_tilde)?.penalty_grad(u_fixed, epsilon, alpha)
}
