//! Penalized-likelihood proximal step `argmin_{x≥0} −LL(y,x) + ρ/2 ‖x − v‖²`.
//!
//! Solved with the separable EM surrogate of the likelihood: at iterate `x`
//! each pixel minimizes `s_j x_j − b_j ln x_j + ρ/2 (x_j − v_j)²` where
//! `s = Aᵀ mult` and `b_j = x_j [Aᵀ(mult ⊙ y/ȳ)]_j`. The minimizer is the
//! positive root of `ρ x² + (s − ρ v) x − b = 0`, and each step decreases the
//! subproblem objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::recon::{ll_gradient, log_likelihood, mlem_step, LikelihoodModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxConfig {
    pub rho: f64,
    pub n_inner: usize,
    pub tol: f64,
}

impl ProxConfig {
    pub fn new(rho: f64) -> Self {
        ProxConfig { rho, n_inner: 30, tol: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid(format!("rho must be positive, got {}", self.rho)));
        }
        if self.n_inner == 0 {
            return Err(Error::invalid("n_inner must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tol must be nonnegative"));
        }
        Ok(())
    }
}

/// Nonnegative root of `ρ x² + (s − ρ v) x − b = 0` for `ρ > 0`, `b ≥ 0`.
#[inline]
pub fn surrogate_root(s: f64, b: f64, v: f64, rho: f64) -> f64 {
    let d = rho * v - s;
    let disc = (d * d + 4.0 * rho * b).sqrt();
    if d >= 0.0 {
        (d + disc) / (2.0 * rho)
    } else {
        // b-form, avoids cancellation between d and disc
        let denom = disc - d;
        if denom > 0.0 {
            2.0 * b / denom
        } else {
            0.0
        }
    }
}

/// One surrogate update. `rho == 0` is the plain MLEM step.
pub fn surrogate_step(lm: &LikelihoodModel, v: &Image, rho: f64, x: &Image) -> Result<Image> {
    if rho == 0.0 {
        return mlem_step(lm, x);
    }
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be nonnegative, got {rho}")));
    }
    lm.model.check_image(x)?;
    x.check_shape(v, "prox anchor")?;
    let back = lm.ratio_backprojection(&x.data, &lm.model.all_angles());
    let sens = lm.model.sensitivity();
    let mask = lm.model.mask();
    let data = (0..x.len())
        .map(|j| {
            if !mask[j] {
                return 0.0;
            }
            surrogate_root(sens[j], x.data[j] * back[j], v.data[j], rho)
        })
        .collect();
    Ok(Image { width: x.width, height: x.height, data })
}

/// Proximal operator of `−LL/ρ` evaluated at `v`, warm-started from `x_init`.
/// `v` may be negative.
pub fn prox_neg_ll(lm: &LikelihoodModel, v: &Image, cfg: &ProxConfig, x_init: &Image) -> Result<Image> {
    cfg.validate()?;
    lm.model.check_image(v)?;
    lm.model.check_image(x_init)?;
    if !lm.model.mask().iter().any(|&m| m) {
        return Err(Error::invalid("all pixels have zero sensitivity"));
    }
    if !v.is_finite() || !x_init.is_finite() {
        return Err(Error::non_finite("prox input"));
    }
    let mask = lm.model.mask();
    if x_init.data.iter().zip(mask).any(|(&x, &m)| m && !(x > 0.0)) {
        return Err(Error::invalid("prox start must be positive on unmasked pixels"));
    }
    let mut x = x_init.clone();
    for _ in 0..cfg.n_inner {
        let next = surrogate_step(lm, v, cfg.rho, &x)?;
        let change = crate::image::distance(&next, &x);
        let scale = next.norm();
        x = next;
        if change <= cfg.tol * scale {
            break;
        }
    }
    Ok(x)
}

/// `−LL(x) + ρ/2 ‖x − v‖²` over unmasked pixels.
pub fn subproblem_objective(lm: &LikelihoodModel, v: &Image, rho: f64, x: &Image) -> Result<f64> {
    x.check_shape(v, "prox anchor")?;
    let ll = log_likelihood(lm, x)?;
    let penalty: f64 = x
        .data
        .iter()
        .zip(&v.data)
        .zip(lm.model.mask())
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum();
    Ok(-ll + 0.5 * rho * penalty)
}

/// `max_j |min(x_j, g_j)|` with `g` the subproblem gradient; zero exactly at a
/// constrained minimizer.
pub fn kkt_residual(lm: &LikelihoodModel, v: &Image, rho: f64, x: &Image) -> Result<f64> {
    x.check_shape(v, "prox anchor")?;
    let g_ll = ll_gradient(lm, x)?;
    let mask = lm.model.mask();
    Ok((0..x.len())
        .filter(|&j| mask[j])
        .map(|j| {
            let g = -g_ll.data[j] + rho * (x.data[j] - v.data[j]);
            x.data[j].min(g).abs()
        })
        .fold(0.0, f64::max))
}
