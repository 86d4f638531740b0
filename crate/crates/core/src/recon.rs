//! Poisson log-likelihood and (O)SEM reconstruction.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{mse, Image, Sinogram};
use crate::sim::SystemModel;

/// A system model paired with measured data. Counts are stored as reals so
/// that noise-free expectations can serve as data too.
#[derive(Debug, Clone)]
pub struct LikelihoodModel {
    pub model: Arc<SystemModel>,
    pub y: Sinogram,
}

impl LikelihoodModel {
    pub fn new(model: Arc<SystemModel>, y: Sinogram) -> Result<Self> {
        model.check_sinogram(&y)?;
        if y.values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("data must be finite and nonnegative"));
        }
        Ok(LikelihoodModel { model, y })
    }

    pub fn from_counts(model: Arc<SystemModel>, counts: &Sinogram<u64>) -> Result<Self> {
        Self::new(model, counts.to_real())
    }

    pub fn n_pixels(&self) -> usize {
        self.model.n_pixels()
    }

    pub fn grid_size(&self) -> usize {
        self.model.grid_size
    }

    pub(crate) fn expected(&self, x: &Image) -> Result<Vec<f64>> {
        self.model.check_image(x)?;
        let mut ybar = vec![0.0; self.model.n_bins_total()];
        self.model.forward_subset(&x.data, &self.model.all_angles(), &mut ybar);
        Ok(ybar)
    }

    /// `Aᵀ(mult ⊙ y/ȳ)` over the given angles; bins with `ȳ = 0` contribute 0.
    pub(crate) fn ratio_backprojection(&self, x: &[f64], angles: &[usize]) -> Vec<f64> {
        let mut ybar = vec![0.0; self.model.n_bins_total()];
        self.model.forward_subset(x, angles, &mut ybar);
        let ratio: Vec<f64> = ybar
            .iter()
            .zip(&self.y.values)
            .map(|(&yb, &y)| if yb > 0.0 { y / yb } else { 0.0 })
            .collect();
        self.model.back_subset(&ratio, angles)
    }
}

/// `Σ_i y_i ln ȳ_i − ȳ_i`, without the `ln y_i!` constant. Returns `-inf` if
/// some bin has counts but zero expectation.
pub fn log_likelihood(lm: &LikelihoodModel, x: &Image) -> Result<f64> {
    let ybar = lm.expected(x)?;
    let mut total = 0.0;
    for (&yb, &y) in ybar.iter().zip(&lm.y.values) {
        if yb > 0.0 {
            total += if y > 0.0 { y * yb.ln() - yb } else { -yb };
        } else if y > 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
    }
    Ok(total)
}

/// `Aᵀ diag(mult) (y/ȳ − 1)`; masked pixels are zero.
pub fn ll_gradient(lm: &LikelihoodModel, x: &Image) -> Result<Image> {
    let ybar = lm.expected(x)?;
    let mut w = Vec::with_capacity(ybar.len());
    for (bin, (&yb, &y)) in ybar.iter().zip(&lm.y.values).enumerate() {
        if yb > 0.0 {
            w.push(y / yb - 1.0);
        } else if y > 0.0 {
            return Err(Error::ZeroExpectation { bin, count: y });
        } else {
            w.push(-1.0);
        }
    }
    let mut data = lm.model.back_subset(&w, &lm.model.all_angles());
    for (g, &m) in data.iter_mut().zip(lm.model.mask()) {
        if !m {
            *g = 0.0;
        }
    }
    Ok(Image { width: x.width, height: x.height, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OsemConfig {
    pub n_iterations: usize,
    pub n_subsets: usize,
}

impl OsemConfig {
    /// 8 iterations with the largest subset count ≤ 14 that divides the
    /// number of angles.
    pub fn default_for(n_angles: usize) -> Self {
        OsemConfig { n_iterations: 8, n_subsets: default_subsets(n_angles) }
    }

    pub fn validate(&self, n_angles: usize) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::invalid("OSEM needs at least one iteration"));
        }
        if self.n_subsets == 0 || n_angles % self.n_subsets != 0 {
            return Err(Error::invalid(format!(
                "{} subsets do not divide {} angles",
                self.n_subsets, n_angles
            )));
        }
        Ok(())
    }
}

pub fn default_subsets(n_angles: usize) -> usize {
    (1..=14.min(n_angles)).rev().find(|s| n_angles % s == 0).unwrap_or(1)
}

/// Angle-interleaved subsets: subset `k` holds angles `k, k + n, k + 2n, …`.
pub fn subset_angles(n_angles: usize, n_subsets: usize) -> Vec<Vec<usize>> {
    (0..n_subsets).map(|k| (k..n_angles).step_by(n_subsets).collect()).collect()
}

fn em_update(lm: &LikelihoodModel, x: &[f64], angles: &[usize], sens: &[f64]) -> Vec<f64> {
    let back = lm.ratio_backprojection(x, angles);
    let mask = lm.model.mask();
    x.iter()
        .zip(&back)
        .zip(sens)
        .zip(mask)
        .map(|(((&xj, &bj), &sj), &m)| if m && sj > 0.0 { xj * bj / sj } else { 0.0 })
        .collect()
}

pub fn mlem_step(lm: &LikelihoodModel, x: &Image) -> Result<Image> {
    lm.model.check_image(x)?;
    let angles = lm.model.all_angles();
    let sens = lm.model.subset_sensitivity(&angles);
    let data = em_update(lm, &x.data, &angles, &sens);
    Ok(Image { width: x.width, height: x.height, data })
}

pub fn osem_reconstruct(lm: &LikelihoodModel, cfg: &OsemConfig, x0: &Image) -> Result<Image> {
    lm.model.check_image(x0)?;
    let n_angles = lm.model.geometry.n_angles;
    cfg.validate(n_angles)?;
    if x0.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("OSEM start image must be finite and nonnegative"));
    }
    let subsets = subset_angles(n_angles, cfg.n_subsets);
    let sens: Vec<Vec<f64>> = subsets.iter().map(|s| lm.model.subset_sensitivity(s)).collect();
    let mut x = x0.data.clone();
    for _ in 0..cfg.n_iterations {
        for (angles, s) in subsets.iter().zip(&sens) {
            x = em_update(lm, &x, angles, s);
        }
    }
    Ok(Image { width: x0.width, height: x0.height, data: x })
}

/// Ones on unmasked pixels, zero elsewhere.
pub fn uniform_start(model: &SystemModel) -> Image {
    let n = model.grid_size;
    let data = model.mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Image { width: n, height: n, data }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mirror index for reflective boundaries (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflective boundaries. `sigma = 0` returns a
/// copy.
pub fn gaussian_filter(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = vec![0.0; img.len()];
    for row in 0..h {
        for col in 0..w {
            tmp[(row * w + col) as usize] =
                k.iter().enumerate().map(|(t, kv)| kv * img.data[(row * w) as usize + reflect(col + t as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for row in 0..h {
        for col in 0..w {
            out[(row * w + col) as usize] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect(row + t as i64 - r, h) * w as usize + col as usize])
                .sum();
        }
    }
    Image { width: img.width, height: img.height, data: out }
}

/// Picks the post-filter width with the lowest MSE against `x_ref`. Ties keep
/// the earlier entry.
pub fn gaussian_postfilter_sweep(x_osem: &Image, x_ref: &Image, sigmas: &[f64]) -> Result<(f64, Image)> {
    if sigmas.is_empty() {
        return Err(Error::invalid("empty sigma list"));
    }
    x_osem.check_shape(x_ref, "post-filter reference")?;
    let mut best: Option<(f64, f64, Image)> = None;
    for &sigma in sigmas {
        if !(sigma >= 0.0) {
            return Err(Error::invalid(format!("negative sigma {sigma}")));
        }
        let filtered = gaussian_filter(x_osem, sigma);
        let err = mse(&filtered, x_ref);
        if best.as_ref().is_none_or(|(_, e, _)| err < *e) {
            best = Some((sigma, err, filtered));
        }
    }
    let (sigma, _, img) = best.unwrap();
    Ok((sigma, img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_system_model, forward_project, GeometryConfig, SparseMatrix};

    fn scalar_model(background: f64) -> Arc<SystemModel> {
        // one pixel, one bin, A = [1]; the grid is 1x1 so build directly
        let geom = GeometryConfig { n_angles: 1, n_bins: 1, bin_width: 1.0 };
        let a = SparseMatrix { n_rows: 1, n_cols: 1, row_ptr: vec![0, 1], col_idx: vec![0], values: vec![1.0] };
        Arc::new(SystemModel::new(geom, 1, Arc::new(a), vec![1.0], vec![background]).unwrap())
    }

    fn small_model() -> Arc<SystemModel> {
        let g = GeometryConfig { n_angles: 12, n_bins: 26, bin_width: 1.0 };
        let mu = Image::filled(16, 16, 0.02);
        let base = build_system_model(g, &mu, Some(5)).unwrap();
        Arc::new(base.with_background_fraction(0.1, &Image::filled(16, 16, 1.0)).unwrap())
    }

    fn noise_free(model: &Arc<SystemModel>, x: &Image) -> LikelihoodModel {
        let y = forward_project(model, x).unwrap();
        LikelihoodModel::new(Arc::clone(model), y).unwrap()
    }

    fn ramp(n: usize) -> Image {
        Image::from_vec(n, n, (0..n * n).map(|k| 0.5 + (k % 7) as f64 * 0.3).collect()).unwrap()
    }

    #[test]
    fn scalar_likelihood_values() {
        let m = scalar_model(0.0);
        let one = Image::filled(1, 1, 1.0);
        let lm = LikelihoodModel::new(Arc::clone(&m), Sinogram::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(log_likelihood(&lm, &one).unwrap(), -1.0);
        let lm0 = LikelihoodModel::new(Arc::clone(&m), Sinogram::from_vec(1, 1, vec![0.0]).unwrap()).unwrap();
        assert_eq!(log_likelihood(&lm0, &Image::filled(1, 1, 3.0)).unwrap(), -3.0);
        // counts with zero expectation
        assert_eq!(log_likelihood(&lm, &Image::zeros(1, 1)).unwrap(), f64::NEG_INFINITY);
        match ll_gradient(&lm, &Image::zeros(1, 1)) {
            Err(Error::ZeroExpectation { bin: 0, .. }) => {}
            other => panic!("expected zero-expectation error, got {other:?}"),
        }
        assert_eq!(log_likelihood(&lm0, &Image::zeros(1, 1)).unwrap(), 0.0);
    }

    #[test]
    fn gradient_vanishes_on_exact_data() {
        let m = small_model();
        let x = ramp(16);
        let lm = noise_free(&m, &x);
        let g = ll_gradient(&lm, &x).unwrap();
        let scale = m.sensitivity().iter().cloned().fold(0.0, f64::max);
        assert!(g.data.iter().all(|v| v.abs() < 1e-12 * scale));

        // zero image against pure background data
        let lm_bg = LikelihoodModel::new(Arc::clone(&m), forward_project(&m, &Image::zeros(16, 16)).unwrap()).unwrap();
        let g0 = ll_gradient(&lm_bg, &Image::zeros(16, 16)).unwrap();
        assert!(g0.data.iter().all(|v| v.abs() < 1e-12 * scale));
    }

    #[test]
    fn mlem_fixed_point_on_exact_data() {
        let m = small_model();
        let x = ramp(16);
        let lm = noise_free(&m, &x);
        let next = mlem_step(&lm, &x).unwrap();
        for (a, b) in next.data.iter().zip(&x.data) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn single_subset_osem_is_mlem() {
        let m = small_model();
        let lm = noise_free(&m, &ramp(16));
        let x0 = uniform_start(&m);
        let mut x = x0.clone();
        for _ in 0..3 {
            x = mlem_step(&lm, &x).unwrap();
        }
        let o = osem_reconstruct(&lm, &OsemConfig { n_iterations: 3, n_subsets: 1 }, &x0).unwrap();
        assert_eq!(o.data, x.data);
    }

    #[test]
    fn osem_config_checks() {
        assert_eq!(default_subsets(56), 14);
        assert_eq!(default_subsets(12), 12);
        assert_eq!(default_subsets(60), 12);
        assert_eq!(default_subsets(17), 1);
        assert!(OsemConfig { n_iterations: 1, n_subsets: 5 }.validate(12).is_err());
        assert!(OsemConfig { n_iterations: 0, n_subsets: 4 }.validate(12).is_err());
        let s = subset_angles(12, 4);
        assert_eq!(s[1], vec![1, 5, 9]);
    }

    #[test]
    fn osem_stays_nonnegative() {
        let m = small_model();
        let lm = noise_free(&m, &ramp(16));
        let cfg = OsemConfig::default_for(12);
        let x = osem_reconstruct(&lm, &cfg, &uniform_start(&m)).unwrap();
        assert!(x.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn postfilter_prefers_smallest_sigma_on_clean_input() {
        let x = ramp(16);
        let (sigma, img) = gaussian_postfilter_sweep(&x, &x, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(sigma, 0.5);
        assert_eq!(img, gaussian_filter(&x, 0.5));

        let mut impulse = Image::zeros(9, 9);
        impulse.data[40] = 1.0;
        let (sigma, img) = gaussian_postfilter_sweep(&impulse, &impulse, &[1.0, 0.0, 2.0]).unwrap();
        assert_eq!(sigma, 0.0);
        assert_eq!(img, impulse);
        assert!(gaussian_postfilter_sweep(&x, &x, &[]).is_err());
    }

    #[test]
    fn gaussian_filter_preserves_constants_and_mass() {
        let c = Image::filled(10, 7, 2.5);
        let f = gaussian_filter(&c, 1.3);
        assert!(f.data.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let x = ramp(12);
        let f = gaussian_filter(&x, 0.8);
        // reflective boundaries keep the total for a symmetric kernel only approximately
        assert!((f.sum() - x.sum()).abs() / x.sum() < 0.05);
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(-6, 5), 4);
    }
}
