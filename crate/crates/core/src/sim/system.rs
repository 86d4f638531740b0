use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub n_angles: usize,
    pub n_bins: usize,
    pub bin_width: f64,
}

impl GeometryConfig {
    pub fn n_rows(&self) -> usize {
        self.n_angles * self.n_bins
    }

    pub fn validate(&self, grid_size: usize) -> Result<()> {
        if self.n_angles < 2 {
            return Err(Error::invalid(format!("n_angles {} < 2", self.n_angles)));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::invalid("bin_width must be positive"));
        }
        let diagonal = grid_size as f64 * std::f64::consts::SQRT_2;
        if (self.n_bins as f64) * self.bin_width < diagonal {
            return Err(Error::invalid(format!(
                "{} bins of width {} do not cover the grid diagonal {:.2}",
                self.n_bins, self.bin_width, diagonal
            )));
        }
        Ok(())
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparseMatrix { n_rows, n_cols, row_ptr, col_idx, values }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        self.row(r).map(|(c, a)| a * x[c]).sum()
    }

    /// `out += scale * row_r`, scattered over columns.
    pub fn scatter_row(&self, r: usize, scale: f64, out: &mut [f64]) {
        for (c, a) in self.row(r) {
            out[c] += a * scale;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row_dot(r, x)).collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in dense.iter_mut().enumerate() {
            for (c, a) in self.row(r) {
                row[c] = a;
            }
        }
        dense
    }
}

/// Linear projector plus multiplicative and additive per-bin factors.
///
/// Expected data are `mult ⊙ (A x) + background`. The matrix is shared, so
/// cloning or rescaling a model is cheap.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub geometry: GeometryConfig,
    pub grid_size: usize,
    pub matrix: Arc<SparseMatrix>,
    pub mult: Vec<f64>,
    pub background: Vec<f64>,
    sensitivity: Vec<f64>,
    mask: Vec<bool>,
}

impl SystemModel {
    pub fn new(
        geometry: GeometryConfig,
        grid_size: usize,
        matrix: Arc<SparseMatrix>,
        mult: Vec<f64>,
        background: Vec<f64>,
    ) -> Result<Self> {
        let m = geometry.n_rows();
        if matrix.n_rows != m || matrix.n_cols != grid_size * grid_size {
            return Err(Error::dim("matrix shape does not match geometry and grid"));
        }
        if mult.len() != m || background.len() != m {
            return Err(Error::dim("per-bin factors do not match the number of bins"));
        }
        if mult.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("multiplicative factors must be positive"));
        }
        if background.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("background must be nonnegative"));
        }
        let mut model = SystemModel {
            geometry,
            grid_size,
            matrix,
            mult,
            background,
            sensitivity: Vec::new(),
            mask: Vec::new(),
        };
        let col_sums = model.matrix_col_sums();
        model.sensitivity = model.subset_sensitivity(&model.all_angles());
        model.mask = col_sums.iter().map(|&s| s > 0.0).collect();
        Ok(model)
    }

    pub fn n_pixels(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn n_bins_total(&self) -> usize {
        self.geometry.n_rows()
    }

    pub fn all_angles(&self) -> Vec<usize> {
        (0..self.geometry.n_angles).collect()
    }

    /// `Σ_i mult_i a_ij`; zero exactly on masked pixels.
    pub fn sensitivity(&self) -> &[f64] {
        &self.sensitivity
    }

    /// True for pixels seen by at least one bin.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn matrix_col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_pixels()];
        for r in 0..self.matrix.n_rows {
            self.matrix.scatter_row(r, 1.0, &mut sums);
        }
        sums
    }

    /// Same model with every bin scaled by `dose` (acquisition time × activity).
    pub fn with_dose(&self, dose: f64) -> Result<Self> {
        if !(dose > 0.0) {
            return Err(Error::invalid("dose must be positive"));
        }
        SystemModel::new(
            self.geometry,
            self.grid_size,
            Arc::clone(&self.matrix),
            self.mult.iter().map(|v| v * dose).collect(),
            self.background.iter().map(|v| v * dose).collect(),
        )
    }

    /// Uniform background equal to `fraction` times the mean true signal
    /// `mean(mult ⊙ A x_true)`.
    pub fn with_background_fraction(&self, fraction: f64, x_true: &Image) -> Result<Self> {
        if !(fraction >= 0.0) {
            return Err(Error::invalid("background fraction must be nonnegative"));
        }
        self.check_image(x_true)?;
        let ax = self.matrix.mul_vec(&x_true.data);
        let mean = ax.iter().zip(&self.mult).map(|(a, m)| a * m).sum::<f64>() / ax.len() as f64;
        let level = fraction * mean;
        SystemModel::new(
            self.geometry,
            self.grid_size,
            Arc::clone(&self.matrix),
            self.mult.clone(),
            vec![level; self.n_bins_total()],
        )
    }

    pub fn check_image(&self, x: &Image) -> Result<()> {
        if x.width != self.grid_size || x.height != self.grid_size {
            return Err(Error::dim(format!(
                "image {}x{} does not match grid {}",
                x.width, x.height, self.grid_size
            )));
        }
        Ok(())
    }

    pub fn check_sinogram<T>(&self, s: &Sinogram<T>) -> Result<()> {
        if s.n_angles != self.geometry.n_angles || s.n_bins != self.geometry.n_bins || s.values.len() != self.n_bins_total()
        {
            return Err(Error::dim(format!(
                "sinogram {}x{} does not match geometry {}x{}",
                s.n_angles, s.n_bins, self.geometry.n_angles, self.geometry.n_bins
            )));
        }
        Ok(())
    }

    /// Bin indices covered by a list of angles, in angle order.
    pub fn rows_of(&self, angles: &[usize]) -> impl Iterator<Item = usize> + '_ {
        let nb = self.geometry.n_bins;
        let angles = angles.to_vec();
        angles.into_iter().flat_map(move |a| a * nb..(a + 1) * nb)
    }

    /// Expected data `mult ⊙ A x + r` restricted to the given angles. Entries of
    /// other angles are left at zero.
    pub fn forward_subset(&self, x: &[f64], angles: &[usize], out: &mut [f64]) {
        for r in self.rows_of(angles) {
            out[r] = self.mult[r] * self.matrix.row_dot(r, x) + self.background[r];
        }
    }

    /// `A_Sᵀ (mult ⊙ s)` over the rows of the given angles.
    pub fn back_subset(&self, s: &[f64], angles: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_pixels()];
        for r in self.rows_of(angles) {
            let w = self.mult[r] * s[r];
            if w != 0.0 {
                self.matrix.scatter_row(r, w, &mut out);
            }
        }
        out
    }

    /// `A_Sᵀ mult`: the sensitivity of one angular subset.
    pub fn subset_sensitivity(&self, angles: &[usize]) -> Vec<f64> {
        let ones = vec![1.0; self.n_bins_total()];
        self.back_subset(&ones, angles)
    }
}

/// Pixel-driven parallel-beam projector: each pixel center is projected onto
/// the detector and split between the two nearest bins by linear
/// interpolation, weighted by pixel area over bin width so that row sums
/// approximate line integrals in pixel units.
fn assemble_projector(geom: &GeometryConfig, grid_size: usize) -> SparseMatrix {
    let n = grid_size;
    let half = n as f64 / 2.0;
    let nb = geom.n_bins;
    let scale = 1.0 / geom.bin_width;
    let mut triplets = Vec::with_capacity(geom.n_angles * n * n * 2);
    for a in 0..geom.n_angles {
        let theta = a as f64 * std::f64::consts::PI / geom.n_angles as f64;
        let (s, c) = theta.sin_cos();
        for row in 0..n {
            let y = row as f64 + 0.5 - half;
            for col in 0..n {
                let x = col as f64 + 0.5 - half;
                let t = x * c + y * s;
                let f = t / geom.bin_width + nb as f64 / 2.0 - 0.5;
                let b0 = f.floor();
                let frac = f - b0;
                let j = row * n + col;
                for (b, w) in [(b0 as i64, 1.0 - frac), (b0 as i64 + 1, frac)] {
                    if w > 0.0 && b >= 0 && (b as usize) < nb {
                        triplets.push((a * nb + b as usize, j, w * scale));
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(geom.n_rows(), n * n, triplets)
}

/// Builds the projector and multiplicative factors for one attenuation map.
///
/// `mult = exp(-A mu) · norm` with `norm ~ U[0.8, 1.2]` drawn from `norm_seed`
/// (all ones when `None`). The background starts at zero; see
/// [`SystemModel::with_background_fraction`].
pub fn build_system_model(geom: GeometryConfig, mu_map: &Image, norm_seed: Option<u64>) -> Result<SystemModel> {
    if mu_map.width != mu_map.height {
        return Err(Error::dim("attenuation map must be square"));
    }
    if mu_map.data.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("attenuation map must be finite and nonnegative"));
    }
    let grid_size = mu_map.width;
    geom.validate(grid_size)?;
    let matrix = assemble_projector(&geom, grid_size);
    let line_integrals = matrix.mul_vec(&mu_map.data);
    let mut mult: Vec<f64> = line_integrals.iter().map(|l| (-l).exp()).collect();
    if let Some(seed) = norm_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in mult.iter_mut() {
            *m *= rng.random_range(0.8..1.2);
        }
    }
    let m = geom.n_rows();
    SystemModel::new(geom, grid_size, Arc::new(matrix), mult, vec![0.0; m])
}

/// `mult ⊙ (A x) + background`.
pub fn forward_project(model: &SystemModel, x: &Image) -> Result<Sinogram> {
    model.check_image(x)?;
    let mut out = vec![0.0; model.n_bins_total()];
    model.forward_subset(&x.data, &model.all_angles(), &mut out);
    Ok(Sinogram { n_angles: model.geometry.n_angles, n_bins: model.geometry.n_bins, values: out })
}

/// `Aᵀ (mult ⊙ s)`, the adjoint of the linear part of [`forward_project`].
pub fn back_project(model: &SystemModel, s: &Sinogram) -> Result<Image> {
    model.check_sinogram(s)?;
    let data = model.back_subset(&s.values, &model.all_angles());
    Ok(Image { width: model.grid_size, height: model.grid_size, data })
}

/// Independent Poisson draws with mean `dose_scale · ȳ_i`. Bin `i` uses its
/// own ChaCha stream, so the result does not depend on evaluation order.
pub fn simulate_counts(model: &SystemModel, x: &Image, dose_scale: f64, seed: u64) -> Result<Sinogram<u64>> {
    if !(dose_scale > 0.0) {
        return Err(Error::invalid("dose_scale must be positive"));
    }
    let expected = forward_project(model, x)?;
    let values = expected
        .values
        .iter()
        .enumerate()
        .map(|(i, &mean)| {
            let lambda = dose_scale * mean;
            if lambda <= 0.0 {
                return Ok(0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let dist = Poisson::new(lambda).map_err(|e| Error::invalid(format!("bin {i}: {e}")))?;
            Ok(dist.sample(&mut rng) as u64)
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok(Sinogram { n_angles: expected.n_angles, n_bins: expected.n_bins, values })
}
