mod common;

use common::*;
use pnprecon::image::{mse, Image};
use pnprecon::recon::{
    gaussian_filter, gaussian_postfilter_sweep, ll_gradient, log_likelihood, mlem_step, osem_reconstruct,
    uniform_start, OsemConfig,
};

#[test]
fn log_likelihood_matches_compensated_dense_oracle() {
    for seed in 0..3 {
        let (lm, x_true) = random_problem(16, 12, seed);
        for x in [x_true.clone(), uniform_start(&lm.model)] {
            let got = log_likelihood(&lm, &x).unwrap();
            let want = log_likelihood_oracle(&lm, &x);
            assert!(rel_err(got, want) < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let (lm, x_true) = random_problem(12, 10, 4);
    let x = x_true.map(|v| 0.8 * v + 0.3);
    let g = ll_gradient(&lm, &x).unwrap();
    let h = 1e-5;
    for j in (0..x.len()).step_by(7) {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data[j] += h;
        xm.data[j] -= h;
        let fd = (log_likelihood(&lm, &xp).unwrap() - log_likelihood(&lm, &xm).unwrap()) / (2.0 * h);
        assert!((fd - g.data[j]).abs() < 1e-5 * fd.abs().max(1.0), "pixel {j}: {fd} vs {}", g.data[j]);
    }
}

#[test]
fn mlem_never_decreases_the_likelihood() {
    for seed in 0..3 {
        let (lm, _) = random_problem(32, 24, 100 + seed);
        let mut x = uniform_start(&lm.model);
        let mut prev = log_likelihood(&lm, &x).unwrap();
        for k in 0..50 {
            x = mlem_step(&lm, &x).unwrap();
            let ll = log_likelihood(&lm, &x).unwrap();
            assert!(ll >= prev - 1e-9 * prev.abs(), "seed {seed} iteration {k}: {ll} < {prev}");
            assert!(x.data.iter().all(|&v| v >= 0.0));
            prev = ll;
        }
    }
}

#[test]
fn noise_free_truth_is_an_mlem_fixed_point() {
    let (lm, x_true) = noise_free_problem(12, 10, 9);
    let next = mlem_step(&lm, &x_true).unwrap();
    assert!(max_abs_diff(&next.data, &x_true.data) < 1e-10 * x_true.max());
    let g = ll_gradient(&lm, &x_true).unwrap();
    assert!(g.data.iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn single_subset_osem_equals_mlem() {
    let (lm, _) = random_problem(16, 12, 2);
    let x0 = uniform_start(&lm.model);
    let cfg = OsemConfig { n_iterations: 5, n_subsets: 1 };
    let osem = osem_reconstruct(&lm, &cfg, &x0).unwrap();
    let mut x = x0;
    for _ in 0..5 {
        x = mlem_step(&lm, &x).unwrap();
    }
    assert_eq!(osem, x);
}

#[test]
fn osem_raises_the_likelihood_from_a_uniform_start() {
    let (lm, _) = random_problem(24, 28, 6);
    let x0 = uniform_start(&lm.model);
    let x = osem_reconstruct(&lm, &OsemConfig::default_for(28), &x0).unwrap();
    assert!(log_likelihood(&lm, &x).unwrap() > log_likelihood(&lm, &x0).unwrap());
}

#[test]
fn postfilter_sweep_equals_exhaustive_table() {
    let (lm, x_true) = random_problem(20, 16, 3);
    let x = osem_reconstruct(&lm, &OsemConfig::default_for(16), &uniform_start(&lm.model)).unwrap();
    let sigmas = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0];
    let table: Vec<f64> = sigmas.iter().map(|&s| mse(&gaussian_filter(&x, s), &x_true)).collect();
    let best = (0..sigmas.len()).fold(0, |b, k| if table[k] < table[b] { k } else { b });
    let (sigma, img) = gaussian_postfilter_sweep(&x, &x_true, &sigmas).unwrap();
    assert_eq!(sigma, sigmas[best]);
    assert_eq!(img, gaussian_filter(&x, sigmas[best]));
}

#[test]
fn gaussian_filter_preserves_constants() {
    let img = Image::filled(9, 7, 2.5);
    let out = gaussian_filter(&img, 1.3);
    assert!(max_abs_diff(&out.data, &img.data) < 1e-12);
}
