//! Composite Simpson quadrature on uniform 1-D and tensor-product 2-D grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid of `n` points on `[lo, hi]`; `n` must be odd for Simpson.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1d {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid1d {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo < hi) || n < 3 || n.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "Simpson grid needs lo < hi and an odd point count ≥ 3, got [{lo}, {hi}] / {n}"
            )));
        }
        Ok(Self { lo, hi, n })
    }

    /// `[−10, 10]` with 4001 points.
    pub fn standard() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
            n: 4001,
        }
    }

    pub fn h(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.h()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        let h = self.h();
        (0..self.n)
            .map(|i| {
                let c = if i == 0 || i == self.n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * h / 3.0
            })
            .collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.n);
        self.weights().iter().zip(values).map(|(w, v)| w * v).sum()
    }

    pub fn integrate_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        let vals: Vec<f64> = self.points().into_iter().map(f).collect();
        self.integrate(&vals)
    }
}

/// Tensor product of two 1-D grids; values are stored row-major in `(x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2d {
    pub x: Grid1d,
    pub y: Grid1d,
}

impl Grid2d {
    /// `[−8, 8]²` with 401² points.
    pub fn standard() -> Self {
        let g = Grid1d {
            lo: -8.0,
            hi: 8.0,
            n: 401,
        };
        Self { x: g, y: g }
    }

    pub fn len(&self) -> usize {
        self.x.n * self.y.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let (xs, ys) = (self.x.points(), self.y.points());
        xs.iter()
            .flat_map(|&a| ys.iter().map(move |&b| [a, b]))
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        let (wx, wy) = (self.x.weights(), self.y.weights());
        wx.iter()
            .flat_map(|&a| wy.iter().map(move |&b| a * b))
            .collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights().iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
