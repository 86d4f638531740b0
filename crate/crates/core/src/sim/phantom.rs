use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// An elliptical region in pixel units. `angle` is in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub angle: f64,
    pub activity: f64,
    pub mu: f64,
}

impl Ellipse {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid_size: usize,
    pub regions: Vec<Ellipse>,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 8 {
            return Err(Error::invalid(format!("grid_size {} < 8", self.grid_size)));
        }
        let n = self.grid_size as f64;
        for (k, e) in self.regions.iter().enumerate() {
            let finite = [e.cx, e.cy, e.semi_x, e.semi_y, e.angle, e.activity, e.mu]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::invalid(format!("region {k}: non-finite parameter")));
            }
            if e.activity < 0.0 || e.mu < 0.0 {
                return Err(Error::invalid(format!("region {k}: negative activity or mu")));
            }
            if e.semi_x <= 0.0 || e.semi_y <= 0.0 {
                return Err(Error::invalid(format!("region {k}: non-positive semi-axis")));
            }
            if !(0.0..=n).contains(&e.cx) || !(0.0..=n).contains(&e.cy) {
                return Err(Error::invalid(format!(
                    "region {k}: center ({}, {}) outside the {}x{} grid",
                    e.cx, e.cy, self.grid_size, self.grid_size
                )));
            }
        }
        Ok(())
    }

    /// A randomized head-like phantom: scalp, cortex, white matter, deep
    /// nuclei, ventricles and a few focal uptakes.
    pub fn brain_like(grid_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid_size as f64;
        let c = n / 2.0;
        let mut jit = |scale: f64| rng.random_range(-scale..=scale);
        let tilt = jit(0.15);
        let (ox, oy) = (jit(0.02 * n), jit(0.02 * n));
        let (cx, cy) = (c + ox, c + oy);
        let sx = 0.40 * n * (1.0 + jit(0.04));
        let sy = 0.45 * n * (1.0 + jit(0.04));
        let gm = 4.0 * (1.0 + jit(0.15));
        let wm = 1.2 * (1.0 + jit(0.2));
        let mu = 0.035;

        let mut regions = vec![
            Ellipse { cx, cy, semi_x: sx, semi_y: sy, angle: tilt, activity: 0.4, mu },
            Ellipse { cx, cy, semi_x: 0.88 * sx, semi_y: 0.88 * sy, angle: tilt, activity: gm, mu },
            Ellipse { cx, cy, semi_x: 0.72 * sx, semi_y: 0.74 * sy, angle: tilt, activity: wm, mu },
        ];
        // deep gray nuclei
        let dx = 0.28 * sx;
        let nuc = gm * (0.85 + jit(0.1));
        for side in [-1.0, 1.0] {
            regions.push(Ellipse {
                cx: cx + side * dx,
                cy: cy + 0.05 * sy,
                semi_x: 0.12 * sx,
                semi_y: 0.18 * sy,
                angle: tilt + side * 0.3,
                activity: nuc,
                mu,
            });
        }
        // ventricles
        for side in [-1.0, 1.0] {
            regions.push(Ellipse {
                cx: cx + side * 0.09 * sx,
                cy: cy - 0.08 * sy,
                semi_x: 0.06 * sx,
                semi_y: 0.2 * sy,
                angle: tilt - side * 0.25,
                activity: 0.25,
                mu,
            });
        }
        let n_spots = 1 + (rng.random::<u32>() % 3) as usize;
        for _ in 0..n_spots {
            let r = rng.random_range(0.2..0.6);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            regions.push(Ellipse {
                cx: cx + r * sx * phi.cos(),
                cy: cy + r * sy * phi.sin(),
                semi_x: rng.random_range(0.04..0.09) * n,
                semi_y: rng.random_range(0.04..0.09) * n,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                activity: rng.random_range(0.2..7.0),
                mu,
            });
        }
        PhantomSpec { grid_size, regions, seed }
    }
}

/// Rasterizes the activity and attenuation maps. Each pixel center takes the
/// value of the last region that contains it.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Image, Image)> {
    spec.validate()?;
    let n = spec.grid_size;
    let mut activity = Image::zeros(n, n);
    let mut mu = Image::zeros(n, n);
    for row in 0..n {
        let py = row as f64 + 0.5;
        for col in 0..n {
            let px = col as f64 + 0.5;
            if let Some(e) = spec.regions.iter().rev().find(|e| e.contains(px, py)) {
                activity.data[row * n + col] = e.activity;
                mu.data[row * n + col] = e.mu;
            }
        }
    }
    Ok((activity, mu))
}
