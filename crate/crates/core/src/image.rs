//! Image and sinogram containers.

use crate::error::{Error, Result};

/// A 2D real-valued image stored row-major (`data[row * width + col]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image { width, height, data: vec![value; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!(
                "image {}x{} needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        debug_assert!(self.same_shape(other));
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn dot(&self, other: &Image) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Projection-domain data indexed by `angle * n_bins + bin`.
///
/// `Sinogram<f64>` carries expectations, `Sinogram<u64>` carries counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram<T = f64> {
    pub n_angles: usize,
    pub n_bins: usize,
    pub values: Vec<T>,
}

impl<T: Copy> Sinogram<T> {
    pub fn from_vec(n_angles: usize, n_bins: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != n_angles * n_bins {
            return Err(Error::dim(format!(
                "sinogram {}x{} needs {} values, got {}",
                n_angles,
                n_bins,
                n_angles * n_bins,
                values.len()
            )));
        }
        Ok(Sinogram { n_angles, n_bins, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Sinogram<f64> {
    pub fn zeros(n_angles: usize, n_bins: usize) -> Self {
        Sinogram { n_angles, n_bins, values: vec![0.0; n_angles * n_bins] }
    }
}

impl Sinogram<u64> {
    pub fn to_real(&self) -> Sinogram<f64> {
        Sinogram {
            n_angles: self.n_angles,
            n_bins: self.n_bins,
            values: self.values.iter().map(|&c| c as f64).collect(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Mean squared error per pixel.
pub fn mse(a: &Image, b: &Image) -> f64 {
    debug_assert!(a.same_shape(b));
    let n = a.len().max(1) as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Euclidean distance.
pub fn distance(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
