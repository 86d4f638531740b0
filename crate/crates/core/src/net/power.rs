//! Power iteration for the spectral norm of `J_L = 2 J_D − I`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DenoiserParams, Linearization};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerConfig {
    pub max_iters: usize,
    /// Relative change of the estimate below which iteration stops; `0` runs
    /// all iterations.
    pub tol: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig { max_iters: 10, tol: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub enum PowerStart {
    /// Gaussian unit vector drawn from the seed.
    Seed(u64),
    /// Previous direction, e.g. from an earlier training step.
    Warm(Image),
}

#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    pub sigma: f64,
    /// Unit direction with `‖J_L u‖ = sigma`.
    pub u: Image,
    pub iterations: usize,
}

pub fn random_unit(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..width * height).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut img = Image { width, height, data };
    let n = img.norm();
    img.data.iter_mut().for_each(|v| *v /= n);
    img
}

/// Power iteration on `Aᵀ A` for an operator given by its forward and adjoint
/// actions. The estimate is the ratio `‖A u‖ / ‖u‖`, so an isometry yields
/// exactly 1.
pub fn power_iteration(
    apply: impl Fn(&Image) -> Result<Image>,
    apply_adjoint: impl Fn(&Image) -> Result<Image>,
    start: Image,
    cfg: &PowerConfig,
) -> Result<SpectralEstimate> {
    if cfg.max_iters == 0 {
        return Err(Error::invalid("power iteration needs at least one iteration"));
    }
    let n0 = start.norm();
    if !(n0 > 0.0) || !n0.is_finite() {
        return Err(Error::invalid("power iteration start vector must be nonzero"));
    }
    let mut u = start.map(|v| v / n0);
    let mut v = apply(&u)?;
    let mut sigma = v.norm() / u.norm();
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let w = apply_adjoint(&v)?;
        let nw = w.norm();
        if !(nw > 0.0) {
            break;
        }
        if !nw.is_finite() {
            return Err(Error::non_finite("power iteration"));
        }
        u = w.map(|x| x / nw);
        v = apply(&u)?;
        let next = v.norm() / u.norm();
        let done = (next - sigma).abs() <= cfg.tol * next;
        sigma = next;
        if done {
            break;
        }
    }
    Ok(SpectralEstimate { sigma, u, iterations })
}

/// Spectral norm estimate of `J_L` at `x` for `L = 2 D_θ − I`.
pub fn spectral_norm_l(params: &DenoiserParams, x: &Image, cfg: &PowerConfig, start: &PowerStart) -> Result<SpectralEstimate> {
    let lin = Linearization::new(params, x)?;
    let u0 = match start {
        PowerStart::Seed(seed) => random_unit(x.width, x.height, *seed),
        PowerStart::Warm(u) => {
            x.check_shape(u, "warm-start direction")?;
            u.clone()
        }
    };
    power_iteration(|v| lin.l_jvp(v), |c| lin.l_vjp(c), u0, cfg)
}
