use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Activation, Mlp};
use crate::sde::{RecordableControl, VectorField};

/// `u(t, x)` as an MLP over `[x, t, sin(2πt/P), cos(2πt/P)]` whose output
/// layer starts at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftNet {
    pub mlp: Mlp,
    pub params: ParamSet,
    pub dim: usize,
    /// Period `P` of the time features, the length of the training interval.
    pub period: f64,
}

const FORMAT: &str = "elegant-drift";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    net: DriftNet,
}

impl DriftNet {
    pub fn new(dim: usize, period: f64, hidden: &[usize], seed: u64) -> Result<Self> {
        if dim == 0 || !(period > 0.0) {
            return Err(Error::invalid("drift net needs d ≥ 1 and a positive period"));
        }
        let mut sizes = vec![dim + 3];
        sizes.extend(hidden);
        sizes.push(dim);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "drift", &sizes, Activation::Tanh, seed, true)?;
        Ok(Self {
            mlp,
            params,
            dim,
            period,
        })
    }

    fn time_features(&self, t: f64) -> [f64; 3] {
        let w = 2.0 * PI * t / self.period;
        [t, w.sin(), w.cos()]
    }

    fn input(&self, t: f64, xs: &Matrix) -> Matrix {
        let tf = self.time_features(t);
        let cols = self.dim + 3;
        let mut m = Matrix::zeros(xs.rows, cols);
        for r in 0..xs.rows {
            let row = m.row_mut(r);
            row[..self.dim].copy_from_slice(xs.row(r));
            row[self.dim..].copy_from_slice(&tf);
        }
        m
    }

    /// Mean `‖u(t, x)‖` over the given states.
    pub fn mean_norm(&self, t: f64, xs: &Matrix) -> f64 {
        let u = self.eval(t, xs);
        u.rows_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / xs.rows.max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Stored {
            format: FORMAT.into(),
            version: VERSION,
            net: self.clone(),
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
        if st.net.mlp.input_dim() != st.net.dim + 3 || st.net.mlp.output_dim() != st.net.dim {
            return Err(Error::Checkpoint("drift net layout does not match its dimension".into()));
        }
        let params = ParamSet::from_json(&st.net.params.to_json()?)?;
        Ok(Self { params, ..st.net })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl VectorField for DriftNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, xs: &Matrix) -> Matrix {
        self.mlp.eval(&self.params, &self.input(t, xs))
    }
}

impl RecordableControl for DriftNet {
    fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.mlp.leaves(g, &self.params)
    }

    fn record(&self, g: &mut Graph, leaves: &[Var], t: f64, x: Var) -> Result<Var> {
        let rows = match g.shape(x) {
            [r, c] if *c == self.dim => *r,
            s => {
                return Err(Error::Shape {
                    op: "drift net",
                    lhs: s.to_vec(),
                    rhs: vec![self.dim],
                })
            }
        };
        let tf = self.time_features(t);
        let feats = g.constant(&[rows, 3], tf.iter().copied().cycle().take(rows * 3).collect())?;
        let input = g.concat(&[x, feats])?;
        self.mlp.record_with(g, leaves, input)
    }
}
