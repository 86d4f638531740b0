mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use common::*;
use pnprecon::admm::{
    admm_pnp, admm_run, apply_t, reference_rho, rho_sweep, AdmmConfig, Denoiser, QuadraticProxDenoiser,
    HISTORY_HEADER, SWEEP_CURVES_HEADER,
};
use pnprecon::error::Result;
use pnprecon::image::{distance, Image};
use pnprecon::net::{forward, Activation, ArchConfig, DenoiserParams};
use pnprecon::prox::prox_neg_ll;
use pnprecon::recon::{osem_reconstruct, uniform_start, LikelihoodModel, OsemConfig};

fn arch() -> ArchConfig {
    ArchConfig { n_layers: 3, channels: 4, kernel: 3, activation: Activation::SoftplusShifted, global_skip: true }
}

fn osem_start(lm: &LikelihoodModel, n_angles: usize) -> Image {
    osem_reconstruct(lm, &OsemConfig::default_for(n_angles), &uniform_start(&lm.model)).unwrap()
}

#[test]
fn quadratic_prior_admm_matches_penalized_solver() {
    for seed in [3u64, 4, 5] {
        let (lm, x_true) = random_problem(32, 24, seed);
        let z0 = osem_start(&lm, 24);
        let rho = reference_rho(&lm, &z0);
        let lambda = rho;
        let m = x_true.map(|a| 0.8 * a + 0.3);
        let den = QuadraticProxDenoiser { lambda, rho, anchor: m.clone() };
        let (x, h) = admm_pnp(&lm, &den, &AdmmConfig::new(rho, 200), &z0, None).unwrap();
        let last = h.last().unwrap();
        assert!(last.primal_residual < 1e-6, "seed {seed}: primal {}", last.primal_residual);
        assert!(last.dual_residual < 1e-6, "seed {seed}: dual {}", last.dual_residual);
        // the minimizer of −LL + λ/2 ‖x − m‖² is the prox of −LL/λ at m
        let oracle = projected_gradient_prox(&lm, &m, lambda, 200_000, 1e-11);
        let rel = distance(&x, &oracle) / oracle.norm();
        assert!(rel < 1e-4, "seed {seed}: rel err {rel}");
    }
}

#[test]
fn identity_denoiser_keeps_the_noise_free_truth() {
    let (lm, x_star) = noise_free_problem(16, 16, 9);
    let id = DenoiserParams::zeros(arch()).unwrap();
    let cfg = AdmmConfig { record_t_residual: true, ..AdmmConfig::new(2.0, 10) };
    let (state, h) = admm_run(&lm, &id, &cfg, &x_star, Some(&x_star)).unwrap();
    assert!(state.u.data.iter().all(|&v| v == 0.0));
    assert!(max_abs_diff(&state.x.data, &x_star.data) < 1e-10);
    for row in &h.rows {
        assert!(row.primal_residual < 1e-10);
        assert!(row.t_residual.unwrap() < 1e-8);
    }
    let t = apply_t(&lm, &id, &cfg, &x_star, &x_star).unwrap();
    assert!(distance(&t, &x_star) < 1e-8);
}

#[test]
fn single_iteration_is_one_prox_one_denoise_one_dual_update() {
    let (lm, _) = random_problem(16, 16, 10);
    let params = DenoiserParams::init(arch(), 11).unwrap();
    let z0 = osem_start(&lm, 16);
    assert!(z0.data.iter().all(|&v| v > z0.max() * 1e-6));
    let cfg = AdmmConfig::new(0.8, 1);
    let (state, h) = admm_run(&lm, &params, &cfg, &z0, None).unwrap();

    let x1 = prox_neg_ll(&lm, &z0, &cfg.prox(), &z0).unwrap();
    let z1 = forward(&params, &x1).unwrap();
    let u1 = x1.zip_map(&z1, |a, b| a - b);
    assert_eq!(state.x, x1);
    assert_eq!(state.z, z1);
    assert_eq!(state.u, u1);
    assert_eq!(h.rows.len(), 1);
    assert_eq!(h.rows[0].primal_residual, u1.norm());
    assert_eq!(h.rows[0].dual_residual, 0.8 * distance(&z1, &z0));
}

#[test]
fn dual_update_is_exact_at_every_iteration() {
    let (lm, _) = random_problem(16, 16, 12);
    let params = DenoiserParams::init(arch(), 13).unwrap();
    let z0 = osem_start(&lm, 16);
    let mut prev = admm_run(&lm, &params, &AdmmConfig::new(1.5, 1), &z0, None).unwrap().0;
    for k in 2..=6 {
        let (s, _) = admm_run(&lm, &params, &AdmmConfig::new(1.5, k), &z0, None).unwrap();
        let want = prev.u.zip_map(&s.x.zip_map(&s.z, |a, b| a - b), |a, b| a + b);
        assert_eq!(s.u, want, "iteration {k}");
        assert_eq!(s.k, k);
        prev = s;
    }
}

#[test]
fn t_operator_with_affine_denoiser_matches_explicit_composition() {
    let (lm, x_true) = random_problem(12, 12, 14);
    let w = x_true.map(|a| a - 0.7);
    for rho in [1e-3, 0.5, 40.0] {
        let den = QuadraticProxDenoiser { lambda: 0.3, rho, anchor: x_true.clone() };
        let cfg = AdmmConfig { n_inner: 20_000, inner_tol: 0.0, ..AdmmConfig::new(rho, 1) };
        let t = apply_t(&lm, &den, &cfg, &w, &uniform_start(&lm.model)).unwrap();
        assert!(t.is_finite());
        if rho < 0.1 {
            continue;
        }
        let (p, _) = converged_prox(&lm, &w, rho, 1e-11, 200_000);
        let c = (rho + 0.3) / 2.0;
        let want: Vec<f64> = (0..w.len())
            .map(|j| {
                let r = 2.0 * p.data[j] - w.data[j];
                let d = (rho * r + 0.3 * x_true.data[j]) / (2.0 * c);
                0.5 * w.data[j] + 0.5 * (2.0 * d - r)
            })
            .collect();
        assert!(max_abs_diff(&t.data, &want) < 1e-8, "rho {rho}");
    }
}

struct FailsAt {
    calls: AtomicUsize,
    at: usize,
}

impl Denoiser for FailsAt {
    fn denoise(&self, x: &Image) -> Result<Image> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        Ok(if n == self.at { x.map(|_| f64::NAN) } else { x.clone() })
    }
}

#[test]
fn non_finite_iterate_reports_its_iteration() {
    let (lm, x_true) = random_problem(12, 12, 15);
    let den = FailsAt { calls: AtomicUsize::new(0), at: 3 };
    let err = admm_pnp(&lm, &den, &AdmmConfig::new(1.0, 10), &x_true, None).unwrap_err();
    assert!(err.to_string().contains("iteration 3"), "{err}");
    let bad = x_true.map(|v| if v > 3.5 { f64::INFINITY } else { v });
    assert!(admm_pnp(&lm, &den, &AdmmConfig::new(1.0, 10), &bad, None).is_err());
    assert!(admm_pnp(&lm, &den, &AdmmConfig::new(0.0, 10), &x_true, None).is_err());
    assert!(admm_pnp(&lm, &den, &AdmmConfig::new(1.0, 0), &x_true, None).is_err());
}

#[test]
fn sweep_matches_individual_runs_and_counts_rows() {
    let (lm, x_true) = random_problem(16, 16, 16);
    let params = DenoiserParams::init(arch(), 17).unwrap();
    let z0 = osem_start(&lm, 16);
    let base = AdmmConfig::new(1.0, 7);
    let single = rho_sweep(&lm, &params, &[0.4], &base, &z0, Some(&x_true)).unwrap();
    let (x, h) = admm_pnp(&lm, &params, &AdmmConfig { rho: 0.4, ..base }, &z0, Some(&x_true)).unwrap();
    assert_eq!(single.runs[0].history, h);
    assert_eq!(single.runs[0].final_mse, Some(pnprecon::image::mse(&x, &x_true)));

    let rhos = [0.1, 1.0, 10.0];
    let a = rho_sweep(&lm, &params, &rhos, &base, &z0, Some(&x_true)).unwrap();
    let b = rho_sweep(&lm, &params, &rhos, &base, &z0, Some(&x_true)).unwrap();
    assert_eq!(a, b);
    let csv = a.curves_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(SWEEP_CURVES_HEADER));
    assert_eq!(lines.count(), rhos.len() * 7);
    assert!(a.best().is_some());
    assert!(rho_sweep(&lm, &params, &[], &base, &z0, None).is_err());
    assert!(rho_sweep(&lm, &params, &[1.0, -2.0], &base, &z0, None).is_err());
}

#[test]
fn history_rows_match_iterations() {
    let (lm, x_true) = random_problem(12, 12, 18);
    let params = DenoiserParams::init(arch(), 19).unwrap();
    let (_, h) = admm_pnp(&lm, &params, &AdmmConfig::new(1.0, 5), &x_true, Some(&x_true)).unwrap();
    assert_eq!(h.rows.len(), 5);
    assert!(h.rows.iter().enumerate().all(|(k, r)| r.iteration == k + 1 && r.mse.is_some()));
    let csv = h.to_csv();
    assert_eq!(csv.lines().next(), Some(HISTORY_HEADER));
    assert_eq!(csv.lines().count(), 6);
}
