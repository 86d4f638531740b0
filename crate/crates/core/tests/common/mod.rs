//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use pnprecon::image::{Image, Sinogram};
use pnprecon::net::{input_scale, DenoiserParams};
use pnprecon::recon::LikelihoodModel;
use pnprecon::sim::{build_system_model, simulate_counts, GeometryConfig, SystemModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(width: usize, height: usize, low: f64, high: f64, rng: &mut impl Rng) -> Image {
    Image { width, height, data: (0..width * height).map(|_| rng.random_range(low..high)).collect() }
}

/// Geometry whose detector covers the grid diagonal.
pub fn geometry_for(grid: usize, n_angles: usize) -> GeometryConfig {
    let n_bins = ((grid as f64) * std::f64::consts::SQRT_2).ceil() as usize + 2;
    GeometryConfig { n_angles, n_bins, bin_width: 1.0 }
}

/// Random smooth-ish attenuation, seeded normalization, background at
/// `bg_fraction` of the mean projection of `x_true`.
pub fn random_model(grid: usize, n_angles: usize, x_true: &Image, bg_fraction: f64, seed: u64) -> Arc<SystemModel> {
    let mut r = rng(seed);
    let mu = random_image(grid, grid, 0.0, 0.03, &mut r);
    let model = build_system_model(geometry_for(grid, n_angles), &mu, Some(seed ^ 0xABCD)).unwrap();
    Arc::new(model.with_background_fraction(bg_fraction, x_true).unwrap())
}

/// A small Poisson problem: positive activity, noisy counts.
pub fn random_problem(grid: usize, n_angles: usize, seed: u64) -> (LikelihoodModel, Image) {
    let mut r = rng(seed);
    let x_true = random_image(grid, grid, 0.5, 4.0, &mut r);
    let model = random_model(grid, n_angles, &x_true, 0.2, seed);
    let counts = simulate_counts(&model, &x_true, 1.0, seed.wrapping_add(17)).unwrap();
    (LikelihoodModel::from_counts(model, &counts).unwrap(), x_true)
}

/// Noise-free data `y = ȳ(x_true)`.
pub fn noise_free_problem(grid: usize, n_angles: usize, seed: u64) -> (LikelihoodModel, Image) {
    let mut r = rng(seed);
    let x_true = random_image(grid, grid, 0.5, 4.0, &mut r);
    let model = random_model(grid, n_angles, &x_true, 0.2, seed);
    let y = expected_dense(&model, &x_true);
    let lm = LikelihoodModel::new(model, y).unwrap();
    (lm, x_true)
}

/// `mult ⊙ A x + r` with `A` assembled densely.
pub fn expected_dense(model: &SystemModel, x: &Image) -> Sinogram {
    let dense = model.matrix.to_dense();
    let values = dense
        .iter()
        .enumerate()
        .map(|(i, row)| model.mult[i] * row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f64>() + model.background[i])
        .collect();
    Sinogram { n_angles: model.geometry.n_angles, n_bins: model.geometry.n_bins, values }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `Σ y ln ȳ − ȳ` from the dense model with compensated summation.
pub fn log_likelihood_oracle(lm: &LikelihoodModel, x: &Image) -> f64 {
    let ybar = expected_dense(&lm.model, x);
    compensated_sum(lm.y.values.iter().zip(&ybar.values).map(|(&y, &e)| if y > 0.0 { y * e.ln() - e } else { -e }))
}

/// `−LL(x) + ρ/2 ‖x − v‖²` and its gradient from the dense model.
fn penalized_objective(dense: &[Vec<f64>], lm: &LikelihoodModel, v: &Image, rho: f64, x: &[f64]) -> (f64, Vec<f64>) {
    let m = &lm.model;
    let mut f = 0.0;
    let mut g = vec![0.0; x.len()];
    for (i, row) in dense.iter().enumerate() {
        let e = m.mult[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + m.background[i];
        let y = lm.y.values[i];
        f -= if y > 0.0 { y * e.ln() - e } else { -e };
        let w = m.mult[i] * (1.0 - y / e);
        for (gj, a) in g.iter_mut().zip(row) {
            *gj += w * a;
        }
    }
    for j in 0..x.len() {
        let d = x[j] - v.data[j];
        f += 0.5 * rho * d * d;
        g[j] += rho * d;
    }
    (f, g)
}

/// Minimizer of `−LL(x) + ρ/2 ‖x − v‖²` over `x ≥ 0` by spectral projected
/// gradient: Barzilai-Borwein steps with a nonmonotone Armijo test against
/// the worst of the last 10 objective values. The test allows rounding-level
/// increases so the iteration keeps driving the projected gradient down
/// after objective differences drop below `f64` resolution. Needs a strictly
/// positive background so the objective is finite on the whole orthant.
pub fn projected_gradient_prox(lm: &LikelihoodModel, v: &Image, rho: f64, max_iters: usize, tol: f64) -> Image {
    assert!(lm.model.background.iter().all(|&b| b > 0.0));
    let dense = lm.model.matrix.to_dense();
    let mut x: Vec<f64> = v.data.iter().map(|&a| a.max(1e-3)).collect();
    let (mut f, mut g) = penalized_objective(&dense, lm, v, rho, &x);
    let mut recent = std::collections::VecDeque::from([f]);
    let mut step = 1.0 / rho.max(1e-3);
    for _ in 0..max_iters {
        let pg: f64 = x.iter().zip(&g).map(|(&a, &b)| (a - (a - b).max(0.0)).abs()).fold(0.0, f64::max);
        if pg < tol {
            break;
        }
        let f_ref = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut t = step;
        let (xn, fn_, gn) = loop {
            let xn: Vec<f64> = x.iter().zip(&g).map(|(&a, &b)| (a - t * b).max(0.0)).collect();
            let (fn_, gn) = penalized_objective(&dense, lm, v, rho, &xn);
            let decrease: f64 = g.iter().zip(&xn).zip(&x).map(|((gj, a), b)| gj * (a - b)).sum();
            if fn_ <= f_ref + 1e-4 * decrease + 1e-13 * f_ref.abs() || t < 1e-20 {
                break (xn, fn_, gn);
            }
            t *= 0.5;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { t * 2.0 };
        x = xn;
        f = fn_;
        g = gn;
        recent.push_back(f);
        if recent.len() > 10 {
            recent.pop_front();
        }
    }
    Image { width: v.width, height: v.height, data: x }
}

/// Direct evaluation of `D(x) = x + s R(x/s)` with nested loops over
/// pixels, channels and taps.
pub fn naive_denoiser(params: &DenoiserParams, x: &Image) -> Image {
    naive_denoiser_with_scale(params, x, input_scale(x))
}

/// Same as [`naive_denoiser`] with the normalization factor fixed to `s`.
pub fn naive_denoiser_with_scale(params: &DenoiserParams, x: &Image, s: f64) -> Image {
    let (h, w) = (x.height, x.width);
    let k = params.arch.kernel as isize;
    let half = k / 2;
    let act = params.arch.activation;
    let layout = params.layout();
    let mut a: Vec<Vec<f64>> = vec![x.data.iter().map(|v| v / s).collect()];
    for (l, slot) in layout.iter().enumerate() {
        let weights = params.weights(slot);
        let bias = params.bias(slot);
        let mut next = vec![vec![0.0; h * w]; slot.out_ch];
        for o in 0..slot.out_ch {
            for row in 0..h as isize {
                for col in 0..w as isize {
                    let mut acc = bias[o];
                    for i in 0..slot.in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (r, c) = (row + ky - half, col + kx - half);
                                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                                    continue;
                                }
                                let widx = ((o * slot.in_ch + i) * k as usize + ky as usize) * k as usize + kx as usize;
                                acc += weights[widx] * a[i][r as usize * w + c as usize];
                            }
                        }
                    }
                    next[o][row as usize * w + col as usize] = if l + 1 < layout.len() { act.value(acc) } else { acc };
                }
            }
        }
        a = next;
    }
    Image { width: w, height: h, data: x.data.iter().zip(&a[0]).map(|(xv, r)| xv + s * r).collect() }
}

/// Singular values of a dense row-major matrix, largest first.
pub fn singular_values(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Columns `J_L e_k` of `L = 2D − I` at `x`, as a dense row-major matrix.
pub fn dense_jacobian_l(p: &DenoiserParams, x: &Image) -> Vec<Vec<f64>> {
    let lin = pnprecon::net::Linearization::new(p, x).unwrap();
    let n = x.len();
    let mut rows = vec![vec![0.0; n]; n];
    for k in 0..n {
        let mut e = Image::zeros(x.width, x.height);
        e.data[k] = 1.0;
        let col = lin.l_jvp(&e).unwrap();
        for i in 0..n {
            rows[i][k] = col.data[i];
        }
    }
    rows
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Plain surrogate iterations from the uniform start, checked for KKT every
/// 1000 steps. Small ρ converges at an EM-like rate and can take 10⁵ steps.
pub fn converged_prox(lm: &LikelihoodModel, v: &Image, rho: f64, kkt_tol: f64, max_iters: usize) -> (Image, usize) {
    let mut x = pnprecon::recon::uniform_start(&lm.model);
    let mut it = 0;
    while it < max_iters {
        for _ in 0..1000 {
            x = pnprecon::prox::surrogate_step(lm, v, rho, &x).unwrap();
        }
        it += 1000;
        if pnprecon::prox::kkt_residual(lm, v, rho, &x).unwrap() < kkt_tol {
            break;
        }
    }
    (x, it)
}
