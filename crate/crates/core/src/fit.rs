//! Least-squares regression with small feed-forward networks.
//!
//! Inputs and targets are standardized before training; the affine maps are
//! stored with the network so that predictions, input gradients and graph
//! recordings all work in the original units.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{Activation, Mlp};
use crate::sde::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// The learning rate decays along a cosine to `lr · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub clip: f64,
    /// Decoupled weight decay, applied as `w ← w (1 − lr · weight_decay)`
    /// after each step.
    pub weight_decay: f64,
    /// Fraction of the data held out for the reported validation error.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            epochs: 400,
            batch: 64,
            lr: 1e-2,
            final_lr_fraction: 0.001,
            clip: 5.0,
            weight_decay: 0.0,
            holdout: 0.2,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("fit needs batch ≥ 1, lr > 0, clip > 0 and weight_decay ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.holdout) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::invalid("holdout must lie in [0, 1) and final_lr_fraction in [0, 1]"));
        }
        Ok(())
    }
}

/// A trained network `x ↦ ŷ` with its standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub mlp: Mlp,
    pub params: ParamSet,
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_shift: f64,
    pub y_scale: f64,
    /// Mean training loss per epoch, in target units squared.
    pub log: Vec<f64>,
    pub train_mse: f64,
    pub heldout_mse: Option<f64>,
}

const FORMAT: &str = "elegant-regressor";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    model: Regressor,
}

fn standardize(values: &[f64]) -> (f64, f64) {
    let m = linalg::mean(values);
    let s = if values.len() > 1 {
        linalg::variance(values).sqrt()
    } else {
        0.0
    };
    (m, if s > 1e-12 { s } else { 1.0 })
}

impl Regressor {
    /// Fits `y ≈ net(x)` by minibatch Adam on the mean squared error.
    pub fn fit(x: &Matrix, y: &[f64], cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        if x.rows == 0 {
            return Err(Error::invalid("empty regression dataset"));
        }
        if x.rows != y.len() {
            return Err(Error::invalid(format!("{} inputs but {} targets", x.rows, y.len())));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression data".into()));
        }
        let d = x.cols;
        let mut order: Vec<usize> = (0..x.rows).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xf17));
        order.shuffle(&mut rng);
        let n_hold = if x.rows >= 10 {
            (cfg.holdout * x.rows as f64).round() as usize
        } else {
            0
        };
        let (hold, train) = order.split_at(n_hold);
        let mut train = train.to_vec();

        let mut x_shift = vec![0.0; d];
        let mut x_scale = vec![1.0; d];
        for j in 0..d {
            let col: Vec<f64> = train.iter().map(|&i| x.get(i, j)).collect();
            (x_shift[j], x_scale[j]) = standardize(&col);
        }
        let ys: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let (y_shift, y_scale) = standardize(&ys);

        let mut sizes = vec![d];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "reg", &sizes, cfg.activation, derive_seed(cfg.seed, 0x1417), false)?;
        let mut model = Self {
            mlp,
            params,
            x_shift,
            x_scale,
            y_shift,
            y_scale,
            log: Vec::with_capacity(cfg.epochs),
            train_mse: f64::NAN,
            heldout_mse: None,
        };

        let xn = model.normalize(x);
        let yn: Vec<f64> = y.iter().map(|v| (v - y_shift) / y_scale).collect();
        let batches = train.len().div_ceil(cfg.batch);
        let total_steps = (cfg.epochs * batches).max(1);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            train.shuffle(&mut rng);
            let mut acc = 0.0;
            for (b, chunk) in train.chunks(cfg.batch).enumerate() {
                let mut g = Graph::new();
                let rows: Vec<f64> = chunk.iter().flat_map(|&i| xn.row(i).to_vec()).collect();
                let input = g.constant(&[chunk.len(), d], rows)?;
                let target = g.constant(&[chunk.len(), 1], chunk.iter().map(|&i| yn[i]).collect())?;
                let pred = model.mlp.record(&mut g, &model.params, input)?;
                let err = g.sub(pred, target)?;
                let sq = g.square(err);
                let total = g.sum(sq);
                let loss = g.scale(total, 1.0 / chunk.len() as f64);
                let lv = g.scalar_value(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                acc += lv * chunk.len() as f64;
                let mut grads = g.backward(loss)?;
                grads.clip_global_norm(cfg.clip);
                let progress = step as f64 / total_steps as f64;
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                let lr = cfg.lr * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
                model.params.adam_step(&grads, &AdamConfig::with_lr(lr))?;
                if cfg.weight_decay > 0.0 {
                    let keep = 1.0 - lr * cfg.weight_decay;
                    for p in model.params.params_mut() {
                        p.values.iter_mut().for_each(|v| *v *= keep);
                    }
                }
                step += 1;
            }
            model.log.push(acc / train.len() as f64 * y_scale * y_scale);
        }
        let mse = |idx: &[usize]| {
            let rows: Vec<f64> = idx.iter().flat_map(|&i| x.row(i).to_vec()).collect();
            let pred = model.predict(&Matrix::from_vec(idx.len(), d, rows));
            idx.iter()
                .zip(pred)
                .map(|(&i, p)| (p - y[i]) * (p - y[i]))
                .sum::<f64>()
                / idx.len() as f64
        };
        let train_mse = mse(&train);
        let heldout_mse = (!hold.is_empty()).then(|| mse(hold));
        model.train_mse = train_mse;
        model.heldout_mse = heldout_mse;
        if !model.train_mse.is_finite() {
            return Err(Error::Diverged {
                epoch: cfg.epochs,
                batch: 0,
            });
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn normalize(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.x_shift[j]) / self.x_scale[j];
            }
        }
        out
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        let out = self.mlp.eval(&self.params, &self.normalize(x));
        out.data.iter().map(|v| v * self.y_scale + self.y_shift).collect()
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.predict(&Matrix::from_vec(1, x.len(), x.to_vec()))[0]
    }

    /// `∇_x ŷ` row by row.
    pub fn gradient(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = self.mlp.input_gradient(&self.params, &self.normalize(x))?;
        for r in 0..g.rows {
            for (j, v) in g.row_mut(r).iter_mut().enumerate() {
                *v *= self.y_scale / self.x_scale[j];
            }
        }
        Ok(g)
    }

    /// Records `ŷ(x)` for `x: [rows, d]` with frozen weights; returns `[rows, 1]`.
    pub fn record(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (rows, d) = match g.shape(x) {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Shape {
                    op: "regressor",
                    lhs: s.to_vec(),
                    rhs: vec![self.input_dim()],
                })
            }
        };
        let xv = Matrix::from_vec(rows, d, g.value(x).to_vec());
        let xn_vals = self.normalize(&xv).data;
        let mut jac = vec![0.0; rows * d * d];
        for r in 0..rows {
            for j in 0..d {
                jac[r * d * d + j * d + j] = 1.0 / self.x_scale[j];
            }
        }
        let xn = g.external(x, d, xn_vals, jac)?;
        let leaves = self.mlp.frozen_leaves(g, &self.params)?;
        let out = self.mlp.record_with(g, &leaves, xn)?;
        let scaled = g.scale(out, self.y_scale);
        let shift = g.constant(&[rows, 1], vec![self.y_shift; rows])?;
        g.add(scaled, shift)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Stored {
            format: FORMAT.into(),
            version: VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let st: Stored = serde_json::from_str(s)?;
        if st.format != FORMAT || st.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                st.format, st.version
            )));
        }
        // Round-trips the embedded parameter set through its own validation.
        let params = ParamSet::from_json(&st.model.params.to_json()?)?;
        Ok(Self { params, ..st.model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_data(n: usize) -> (Matrix, Vec<f64>) {
        let xs: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
        let y = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        (Matrix::from_vec(n, 1, xs), y)
    }

    #[test]
    fn fits_a_line() {
        let (x, y) = line_data(500);
        let m = Regressor::fit(&x, &y, &FitConfig::default()).unwrap();
        assert!(m.heldout_mse.unwrap() < 1e-3, "{:?}", m.heldout_mse);
        assert_eq!(m.log.len(), FitConfig::default().epochs);
        let grad = m.gradient(&Matrix::from_vec(1, 1, vec![0.5])).unwrap();
        assert!((grad.data[0] - 2.0).abs() < 0.05);
    }

    #[test]
    fn single_point_is_interpolated() {
        let x = Matrix::from_vec(1, 2, vec![0.3, -0.7]);
        let m = Regressor::fit(&x, &[4.2], &FitConfig::default()).unwrap();
        assert!((m.predict_one(&[0.3, -0.7]) - 4.2).abs() < 1e-6);
        assert!(m.heldout_mse.is_none());
    }

    #[test]
    fn record_matches_predict_and_gradient() {
        let (x, y) = line_data(50);
        let y: Vec<f64> = y.iter().zip(&x.data).map(|(v, x)| v + x.sin()).collect();
        let cfg = FitConfig {
            epochs: 5,
            ..FitConfig::default()
        };
        let m = Regressor::fit(&x, &y, &cfg).unwrap();
        let probe = Matrix::from_vec(3, 1, vec![-1.0, 0.2, 2.5]);
        let mut g = Graph::new();
        let xv = g.input(&[3, 1], probe.data.clone()).unwrap();
        let out = m.record(&mut g, xv).unwrap();
        let pred = m.predict(&probe);
        for (a, b) in g.value(out).iter().zip(&pred) {
            assert!((a - b).abs() < 1e-12);
        }
        let total = g.sum(out);
        g.backward(total).unwrap();
        let grad = m.gradient(&probe).unwrap();
        for (a, b) in g.grad(xv).unwrap().iter().zip(&grad.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors_and_determinism() {
        assert!(Regressor::fit(&Matrix::zeros(0, 1), &[], &FitConfig::default()).is_err());
        assert!(Regressor::fit(&Matrix::zeros(2, 1), &[1.0], &FitConfig::default()).is_err());
        let (x, y) = line_data(40);
        let cfg = FitConfig {
            epochs: 3,
            ..FitConfig::default()
        };
        let a = Regressor::fit(&x, &y, &cfg).unwrap();
        let b = Regressor::fit(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let back = Regressor::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
        let huge = FitConfig {
            lr: 1e300,
            epochs: 3,
            ..FitConfig::default()
        };
        assert!(Regressor::fit(&x, &y, &huge).is_err());
    }
}
