//! Feed-forward networks over the autodiff graph.
//!
//! Each layer is `h ↦ act([h, 1] · W)` with the bias folded into the last row
//! of `W`. The same kernels back [`Mlp::record`] and [`Mlp::eval`], so the two
//! produce identical bits for identical inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    layers: Vec<usize>,
}

impl Mlp {
    /// Registers the layers in `params` with Glorot-uniform weights and zero
    /// biases. `zero_last` zeroes the output layer entirely.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        seed: u64,
        zero_last: bool,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = l + 2 == sizes.len();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut values = Vec::with_capacity((fan_in + 1) * fan_out);
            for r in 0..=fan_in {
                for _ in 0..fan_out {
                    let v = if (last && zero_last) || r == fan_in {
                        0.0
                    } else {
                        rng.random_range(-bound..bound)
                    };
                    values.push(v);
                }
            }
            layers.push(params.add(format!("{prefix}.layer{l}"), &[fan_in + 1, fan_out], values));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    /// Adds the layer weights to the graph as parameter leaves.
    pub fn leaves(&self, g: &mut Graph, params: &ParamSet) -> Vec<Var> {
        self.layers.iter().map(|&i| g.param(params, i)).collect()
    }

    /// Adds the layer weights as constants (no gradient to the weights).
    pub fn frozen_leaves(&self, g: &mut Graph, params: &ParamSet) -> Result<Vec<Var>> {
        self.layers
            .iter()
            .map(|&i| {
                let p = &params.params()[i];
                g.constant(&p.shape, p.values.clone())
            })
            .collect()
    }

    /// Forward pass on `input: [batch, in]` using previously added leaves.
    pub fn record_with(&self, g: &mut Graph, leaves: &[Var], input: Var) -> Result<Var> {
        let rows = match g.shape(input) {
            [r, c] if *c == self.input_dim() => *r,
            s => {
                return Err(Error::Shape {
                    op: "mlp",
                    lhs: s.to_vec(),
                    rhs: vec![self.input_dim()],
                })
            }
        };
        let ones = g.constant(&[rows, 1], vec![1.0; rows])?;
        let mut h = input;
        for (l, &w) in leaves.iter().enumerate() {
            let hb = g.concat(&[h, ones])?;
            h = g.matmul(hb, w)?;
            if l + 1 < leaves.len() {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Relu => g.relu(h),
                };
            }
        }
        Ok(h)
    }

    pub fn record(&self, g: &mut Graph, params: &ParamSet, input: Var) -> Result<Var> {
        let leaves = self.leaves(g, params);
        self.record_with(g, &leaves, input)
    }

    /// Graph-free forward pass.
    pub fn eval(&self, params: &ParamSet, input: &Matrix) -> Matrix {
        assert_eq!(input.cols, self.input_dim(), "mlp input width");
        let mut h = input.clone();
        for (l, &w) in self.layers.iter().enumerate() {
            let hb = h.with_ones_column();
            let p = &params.params()[w];
            let (k, n) = (p.shape[0], p.shape[1]);
            let mut data = linalg::matmul(&hb.data, &p.values, hb.rows, k, n);
            if l + 1 < self.layers.len() {
                data.iter_mut().for_each(|x| *x = self.activation.apply(*x));
            }
            h = Matrix::from_vec(hb.rows, n, data);
        }
        h
    }

    /// Gradient of a scalar-output network with respect to its input, row by row.
    pub fn input_gradient(&self, params: &ParamSet, input: &Matrix) -> Result<Matrix> {
        if self.output_dim() != 1 {
            return Err(Error::invalid("input_gradient needs a scalar-output network"));
        }
        let mut g = Graph::new();
        let x = g.input(&[input.rows, input.cols], input.data.clone())?;
        let leaves = self.frozen_leaves(&mut g, params)?;
        let out = self.record_with(&mut g, &leaves, x)?;
        let total = g.sum(out);
        g.backward(total)?;
        let grad = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.data.len()]);
        Ok(Matrix::from_vec(input.rows, input.cols, grad))
    }
}
