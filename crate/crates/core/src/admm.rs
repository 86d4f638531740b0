//! Plug-and-play ADMM with residual tracking, the equivalent fixed-point
//! operator, and the ρ sweep.
//!
//! One iteration:
//!
//! ```text
//! x ← prox_{−LL/ρ}(z − u)
//! z ← D(x + u)
//! u ← u + x − z
//! ```
//!
//! with primal residual `‖x − z‖` and dual residual `ρ‖z − z_prev‖`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{distance, mse, Image};
use crate::net::{forward, DenoiserParams};
use crate::prox::{prox_neg_ll, ProxConfig};
use crate::recon::{log_likelihood, LikelihoodModel};
use crate::train::fmt_f64;

/// The `z`-update operator.
pub trait Denoiser: Sync {
    fn denoise(&self, x: &Image) -> Result<Image>;
}

impl Denoiser for DenoiserParams {
    fn denoise(&self, x: &Image) -> Result<Image> {
        forward(self, x)
    }
}

/// Proximal operator of `g(z) = λ/2 ‖z − m‖²` at step `1/ρ`:
/// `z = (ρ w + λ m) / (ρ + λ)`. With it, the loop is classical convex ADMM
/// for `−LL + g`.
#[derive(Debug, Clone)]
pub struct QuadraticProxDenoiser {
    pub lambda: f64,
    pub rho: f64,
    pub anchor: Image,
}

impl Denoiser for QuadraticProxDenoiser {
    fn denoise(&self, w: &Image) -> Result<Image> {
        w.check_shape(&self.anchor, "quadratic prox anchor")?;
        let c = self.rho + self.lambda;
        Ok(w.zip_map(&self.anchor, |a, m| (self.rho * a + self.lambda * m) / c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub n_iterations: usize,
    pub n_inner: usize,
    pub inner_tol: f64,
    pub record_t_residual: bool,
}

impl AdmmConfig {
    pub fn new(rho: f64, n_iterations: usize) -> Self {
        AdmmConfig { rho, n_iterations, n_inner: 30, inner_tol: 1e-8, record_t_residual: false }
    }

    pub fn prox(&self) -> ProxConfig {
        ProxConfig { rho: self.rho, n_inner: self.n_inner, tol: self.inner_tol }
    }

    pub fn validate(&self) -> Result<()> {
        self.prox().validate()?;
        if self.n_iterations == 0 {
            return Err(Error::invalid("ADMM needs at least one iteration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: Image,
    pub z: Image,
    pub u: Image,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub log_likelihood: f64,
    pub mse: Option<f64>,
    pub t_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "iteration,primal_residual,dual_residual,log_likelihood,mse,t_residual";

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration,
                fmt_f64(r.primal_residual),
                fmt_f64(r.dual_residual),
                fmt_f64(r.log_likelihood),
                opt(r.mse),
                opt(r.t_residual)
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    /// Last-over-first ratios of the primal and dual residual norms.
    pub fn residual_ratios(&self) -> (f64, f64) {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => (ratio(b.primal_residual, a.primal_residual), ratio(b.dual_residual, a.dual_residual)),
            _ => (f64::NAN, f64::NAN),
        }
    }

    /// Largest relative log-likelihood change over the last `window`
    /// iterations.
    pub fn ll_relative_change(&self, window: usize) -> f64 {
        let n = self.rows.len();
        if n < 2 {
            return f64::NAN;
        }
        let start = n.saturating_sub(window + 1);
        self.rows[start..]
            .windows(2)
            .map(|w| ((w[1].log_likelihood - w[0].log_likelihood) / w[0].log_likelihood).abs())
            .fold(0.0, f64::max)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Positive start for the surrogate iterations: negative or zero pixels of
/// `z0` are lifted to a small fraction of its maximum.
fn positive_start(lm: &LikelihoodModel, z0: &Image) -> Image {
    let floor = (z0.max().max(0.0) * 1e-6).max(1e-12);
    let mask = lm.model.mask();
    Image {
        width: z0.width,
        height: z0.height,
        data: z0.data.iter().zip(mask).map(|(&v, &m)| if m { v.max(floor) } else { 0.0 }).collect(),
    }
}

fn check_finite(img: &Image, what: &str, iteration: usize) -> Result<()> {
    if img.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("ADMM iterate {what} at iteration {iteration}")))
    }
}

/// `½ w + ½ L(2 p − w)` with `p = prox(w)` and `L = 2 D − I`.
fn t_from_prox(denoiser: &dyn Denoiser, w: &Image, p: &Image) -> Result<Image> {
    let reflected = p.zip_map(w, |a, b| 2.0 * a - b);
    let d = denoiser.denoise(&reflected)?;
    let l = d.zip_map(&reflected, |a, b| 2.0 * a - b);
    Ok(w.zip_map(&l, |a, b| 0.5 * a + 0.5 * b))
}

/// Fixed-point operator `T = ½ I + ½ (2D − I)(2 prox_{−LL/ρ} − I)` applied to
/// `w`. The prox is warm-started from `x_init`.
pub fn apply_t(
    lm: &LikelihoodModel,
    denoiser: &dyn Denoiser,
    cfg: &AdmmConfig,
    w: &Image,
    x_init: &Image,
) -> Result<Image> {
    cfg.validate()?;
    if !w.is_finite() {
        return Err(Error::non_finite("T operator input"));
    }
    let p = prox_neg_ll(lm, w, &cfg.prox(), &positive_start(lm, x_init))?;
    t_from_prox(denoiser, w, &p)
}

/// Runs `cfg.n_iterations` plug-and-play ADMM iterations from `z0` with
/// `u = 0`. Returns the last `x` and one history row per iteration.
pub fn admm_pnp(
    lm: &LikelihoodModel,
    denoiser: &dyn Denoiser,
    cfg: &AdmmConfig,
    z0: &Image,
    x_ref: Option<&Image>,
) -> Result<(Image, History)> {
    let (state, history) = admm_run(lm, denoiser, cfg, z0, x_ref)?;
    Ok((state.x, history))
}

/// Same as [`admm_pnp`] but returns the full final state.
pub fn admm_run(
    lm: &LikelihoodModel,
    denoiser: &dyn Denoiser,
    cfg: &AdmmConfig,
    z0: &Image,
    x_ref: Option<&Image>,
) -> Result<(AdmmState, History)> {
    cfg.validate()?;
    lm.model.check_image(z0)?;
    if let Some(r) = x_ref {
        lm.model.check_image(r)?;
    }
    check_finite(z0, "z0", 0)?;
    let prox_cfg = cfg.prox();
    let mut state = AdmmState {
        x: positive_start(lm, z0),
        z: z0.clone(),
        u: Image::zeros(z0.width, z0.height),
        k: 0,
    };
    let mut history = History::default();
    for k in 1..=cfg.n_iterations {
        let w = state.z.zip_map(&state.u, |z, u| z - u);
        let x_init = positive_start(lm, &state.x);
        let x = prox_neg_ll(lm, &w, &prox_cfg, &x_init)?;
        check_finite(&x, "x", k)?;
        let t_residual = if cfg.record_t_residual {
            Some(distance(&t_from_prox(denoiser, &w, &x)?, &w))
        } else {
            None
        };
        let z = denoiser.denoise(&x.zip_map(&state.u, |a, b| a + b))?;
        check_finite(&z, "z", k)?;
        let primal = x.zip_map(&z, |a, b| a - b);
        let u = state.u.zip_map(&primal, |a, b| a + b);
        let row = HistoryRow {
            iteration: k,
            primal_residual: primal.norm(),
            dual_residual: cfg.rho * distance(&z, &state.z),
            log_likelihood: log_likelihood(lm, &x)?,
            mse: x_ref.map(|r| mse(&x, r)),
            t_residual,
        };
        history.rows.push(row);
        state = AdmmState { x, z, u, k };
    }
    Ok((state, history))
}

/// Thresholds used to label a run as converged: both residuals at the last
/// iteration below this fraction of their first-iteration values.
pub const RESIDUAL_DROP: f64 = 0.1;
/// Largest relative log-likelihood change allowed over the last iterations.
pub const LL_STABLE_TOL: f64 = 1e-4;
pub const LL_STABLE_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub rho: f64,
    pub history: History,
    pub final_mse: Option<f64>,
    pub primal_ratio: f64,
    pub dual_ratio: f64,
    pub residuals_converged: bool,
    pub ll_stable: bool,
}

impl SweepRun {
    pub fn meets_convergence(&self) -> bool {
        self.residuals_converged && self.ll_stable
    }

    /// Worse of the two residual ratios; smaller is faster convergence.
    pub fn score(&self) -> f64 {
        self.primal_ratio.max(self.dual_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
}

pub const SWEEP_CURVES_HEADER: &str = "rho,iteration,primal_residual,dual_residual,log_likelihood,mse";
pub const SWEEP_SUMMARY_HEADER: &str = "rho,primal_ratio,dual_ratio,residuals_converged,ll_stable,final_mse";

impl SweepReport {
    pub fn curves_csv(&self) -> String {
        let mut out = format!("{SWEEP_CURVES_HEADER}\n");
        for run in &self.runs {
            for r in &run.history.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    fmt_f64(run.rho),
                    r.iteration,
                    fmt_f64(r.primal_residual),
                    fmt_f64(r.dual_residual),
                    fmt_f64(r.log_likelihood),
                    opt(r.mse)
                ));
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SWEEP_SUMMARY_HEADER}\n");
        for run in &self.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_f64(run.rho),
                fmt_f64(run.primal_ratio),
                fmt_f64(run.dual_ratio),
                run.residuals_converged,
                run.ll_stable,
                opt(run.final_mse)
            ));
        }
        out
    }

    /// Among runs meeting both convergence labels, the one with the lowest
    /// final MSE (or, without a reference image, the smallest
    /// [`SweepRun::score`]). Falls back to the smallest score overall.
    pub fn best(&self) -> Option<&SweepRun> {
        let by_score = |a: &&SweepRun, b: &&SweepRun| a.score().total_cmp(&b.score());
        let by_quality = |a: &&SweepRun, b: &&SweepRun| match (a.final_mse, b.final_mse) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            _ => a.score().total_cmp(&b.score()),
        };
        self.runs
            .iter()
            .filter(|r| r.meets_convergence())
            .min_by(by_quality)
            .or_else(|| self.runs.iter().min_by(by_score))
    }
}

/// One ADMM run per ρ (in parallel), labeled by residual decay and
/// log-likelihood stabilization.
pub fn rho_sweep(
    lm: &LikelihoodModel,
    denoiser: &dyn Denoiser,
    rhos: &[f64],
    base: &AdmmConfig,
    z0: &Image,
    x_ref: Option<&Image>,
) -> Result<SweepReport> {
    if rhos.is_empty() {
        return Err(Error::invalid("empty rho list"));
    }
    if let Some(bad) = rhos.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::invalid(format!("rho must be positive, got {bad}")));
    }
    let runs: Vec<Result<SweepRun>> = rhos
        .par_iter()
        .map(|&rho| {
            let cfg = AdmmConfig { rho, ..*base };
            let (x, history) = admm_pnp(lm, denoiser, &cfg, z0, x_ref)?;
            let (primal_ratio, dual_ratio) = history.residual_ratios();
            let ll_change = history.ll_relative_change(LL_STABLE_WINDOW);
            Ok(SweepRun {
                rho,
                final_mse: x_ref.map(|r| mse(&x, r)),
                primal_ratio,
                dual_ratio,
                residuals_converged: primal_ratio < RESIDUAL_DROP && dual_ratio < RESIDUAL_DROP,
                ll_stable: ll_change < LL_STABLE_TOL,
                history,
            })
        })
        .collect();
    Ok(SweepReport { runs: runs.into_iter().collect::<Result<Vec<_>>>()? })
}

/// `n` values log-spaced over `decades` decades, centered on `center`.
pub fn log_grid(center: f64, decades: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![center];
    }
    (0..n)
        .map(|k| center * 10f64.powf(-decades / 2.0 + decades * k as f64 / (n - 1) as f64))
        .collect()
}

/// Curvature-matched reference value: mean sensitivity over mean activity of
/// `z0` on unmasked pixels, where the likelihood Hessian has scale ~ `s / x`.
pub fn reference_rho(lm: &LikelihoodModel, z0: &Image) -> f64 {
    let mask = lm.model.mask();
    let sens = lm.model.sensitivity();
    let (mut s_sum, mut x_sum, mut n) = (0.0, 0.0, 0usize);
    for j in 0..z0.len() {
        if mask[j] {
            s_sum += sens[j];
            x_sum += z0.data[j].max(0.0);
            n += 1;
        }
    }
    if n == 0 || x_sum <= 0.0 {
        return 1.0;
    }
    s_sum / x_sum
}

/// Default sweep grid: a pilot over seven decades around
/// [`reference_rho`] picks the value with the smallest primal residual at
/// iteration `pilot_iterations`; the grid is then 8 values over 4 decades
/// centered on it.
pub fn default_rho_grid(
    lm: &LikelihoodModel,
    denoiser: &dyn Denoiser,
    base: &AdmmConfig,
    z0: &Image,
    pilot_iterations: usize,
) -> Result<Vec<f64>> {
    let pilot = log_grid(reference_rho(lm, z0), 6.0, 7);
    let cfg = AdmmConfig { n_iterations: pilot_iterations.max(1), record_t_residual: false, ..*base };
    let report = rho_sweep(lm, denoiser, &pilot, &cfg, z0, None)?;
    let best = report
        .runs
        .iter()
        .min_by(|a, b| {
            let pa = a.history.last().map_or(f64::INFINITY, |r| r.primal_residual);
            let pb = b.history.last().map_or(f64::INFINITY, |r| r.primal_residual);
            pa.total_cmp(&pb)
        })
        .map(|r| r.rho)
        .unwrap_or(pilot[3]);
    Ok(log_grid(best, 4.0, 8))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_centered() {
        let g = log_grid(1e-2, 4.0, 5);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[2] - 1e-2).abs() < 1e-16);
        assert!((g[4] - 1.0).abs() < 1e-14);
        let g8 = log_grid(3.0, 4.0, 8);
        assert!(((g8[3] * g8[4]).sqrt() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ll_change_window() {
        let mk = |ll: f64| HistoryRow {
            iteration: 0,
            primal_residual: 1.0,
            dual_residual: 1.0,
            log_likelihood: ll,
            mse: None,
            t_residual: None,
        };
        let h = History { rows: vec![mk(-100.0), mk(-50.0), mk(-50.0), mk(-50.001)] };
        assert!((h.ll_relative_change(2) - 2e-5).abs() < 1e-12);
        assert!((h.ll_relative_change(5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quadratic_prox_formula() {
        let d = QuadraticProxDenoiser { lambda: 3.0, rho: 1.0, anchor: Image::filled(2, 1, 2.0) };
        let z = d.denoise(&Image::from_vec(2, 1, vec![6.0, -2.0]).unwrap()).unwrap();
        assert_eq!(z.data, vec![3.0, 1.0]);
    }
}
