//! Exact entropy-regularized control on a finite Markov chain.
//!
//! Soft values follow `exp(v_t/α) = P_t exp(v_{t+1}/α)` with `v_H = r`.
//! Tilting every transition by the value ratio gives the optimally
//! controlled chain, whose marginals, joints, conditionals and bridges are
//! checked against the base chain by plain matrix algebra.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Row-major `n × n` transition matrices `P_0 … P_{H−1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChain {
    pub n: usize,
    pub transitions: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub reward: Vec<f64>,
    pub alpha: f64,
}

const STOCHASTIC_TOL: f64 = 1e-12;

fn check_stochastic(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DiscreteChain {
    pub fn new(transitions: Vec<Vec<f64>>, initial: Vec<f64>, reward: Vec<f64>, alpha: f64) -> Result<Self> {
        let n = initial.len();
        if n == 0 || reward.len() != n {
            return Err(Error::invalid("chain needs n ≥ 1 states and one reward per state"));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("α must be positive, got {alpha}")));
        }
        check_stochastic(&initial, "initial law")?;
        for (t, p) in transitions.iter().enumerate() {
            if p.len() != n * n {
                return Err(Error::invalid(format!("P_{t} is not {n} × {n}")));
            }
            for x in 0..n {
                check_stochastic(&p[x * n..(x + 1) * n], &format!("row {x} of P_{t}"))?;
            }
        }
        Ok(Self {
            n,
            transitions,
            initial,
            reward,
            alpha,
        })
    }

    /// Dense random chain with positive entries and rewards in `[−1, 1]`.
    pub fn random(n: usize, horizon: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut law = |len: usize| {
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let transitions = (0..horizon)
            .map(|_| (0..n).flat_map(|_| law(n)).collect())
            .collect();
        let initial = law(n);
        let reward = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self::new(transitions, initial, reward, alpha).expect("random chain is valid")
    }

    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }

    /// Marginals `ρ_0 … ρ_H`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        propagate(&self.initial, &self.transitions, self.n)
    }
}

fn propagate(initial: &[f64], transitions: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![initial.to_vec()];
    for p in transitions {
        let prev = out.last().expect("non-empty");
        let mut next = vec![0.0; n];
        for x in 0..n {
            for y in 0..n {
                next[y] += prev[x] * p[x * n + y];
            }
        }
        out.push(next);
    }
    out
}

/// `P_s ⋯ P_{t−1}` as a row-major matrix (identity for `s = t`).
fn product(transitions: &[Vec<f64>], n: usize, s: usize, t: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    for p in &transitions[s..t] {
        m = linalg::matmul(&m, p, n, n, n);
    }
    m
}

/// Soft values `v_0 … v_H`, computed in log space.
pub fn soft_value_backward(chain: &DiscreteChain) -> Result<Vec<Vec<f64>>> {
    if !(chain.alpha > 0.0) {
        return Err(Error::invalid(format!("α must be positive, got {}", chain.alpha)));
    }
    let (n, a) = (chain.n, chain.alpha);
    let mut values = vec![chain.reward.clone()];
    for p in chain.transitions.iter().rev() {
        let next = values.last().expect("non-empty");
        let v: Vec<f64> = (0..n)
            .map(|x| {
                let terms: Vec<f64> = (0..n).map(|y| p[x * n + y].ln() + next[y] / a).collect();
                a * linalg::log_sum_exp(&terms)
            })
            .collect();
        values.push(v);
    }
    values.reverse();
    Ok(values)
}

/// The optimally controlled chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedChain {
    pub values: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    /// `log C_tar`.
    pub log_normalizer: f64,
}

impl TiltedChain {
    /// Adds `delta` to one tilted transition probability; lets tests check
    /// that [`verify_identities`] notices a wrong tilt.
    pub fn corrupt(&mut self, step: usize, from: usize, to: usize, delta: f64) {
        let n = self.initial.len();
        self.transitions[step][from * n + to] += delta;
    }
}

pub fn tilt_chain(chain: &DiscreteChain) -> Result<TiltedChain> {
    let values = soft_value_backward(chain)?;
    let (n, a) = (chain.n, chain.alpha);
    let transitions = chain
        .transitions
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let mut q = vec![0.0; n * n];
            for x in 0..n {
                for y in 0..n {
                    q[x * n + y] = p[x * n + y] * ((values[t + 1][y] - values[t][x]) / a).exp();
                }
            }
            q
        })
        .collect();
    let log_terms: Vec<f64> = (0..n).map(|x| chain.initial[x].ln() + values[0][x] / a).collect();
    let log_c = linalg::log_sum_exp(&log_terms);
    let initial = log_terms.iter().map(|l| (l - log_c).exp()).collect();
    Ok(TiltedChain {
        values,
        transitions,
        initial,
        log_normalizer: log_c,
    })
}

/// Largest deviation per identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub identities: BTreeMap<String, f64>,
}

impl IdentityReport {
    fn record(&mut self, name: &str, deviation: f64) {
        let e = self.identities.entry(name.to_string()).or_insert(0.0);
        // NaN must surface as a failure rather than vanish in `max`.
        *e = if deviation.is_nan() || e.is_nan() {
            f64::NAN
        } else {
            e.max(deviation)
        };
    }

    /// Folds another report in, keeping the worst deviation per identity.
    pub fn merge(&mut self, other: &IdentityReport) {
        for (k, v) in &other.identities {
            self.record(k, *v);
        }
    }

    pub fn worst(&self) -> f64 {
        self.identities
            .values()
            .fold(0.0, |m: f64, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(*v) })
    }

    /// Names whose deviation exceeds `threshold` (or is NaN).
    pub fn failures(&self, threshold: f64) -> Vec<&str> {
        self.identities
            .iter()
            .filter(|(_, v)| !(**v <= threshold))
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Enumerated bridges are only attempted up to this many paths.
pub const MAX_ENUMERATED_PATHS: usize = 50_000;

/// Checks the optimal-control identities by matrix algebra, plus full path
/// enumeration when the chain is small.
pub fn verify_identities(chain: &DiscreteChain, tilted: &TiltedChain) -> IdentityReport {
    let (n, a, h) = (chain.n, chain.alpha, chain.horizon());
    let v = &tilted.values;
    let log_c = tilted.log_normalizer;
    let mut rep = IdentityReport::default();

    // Stochasticity of the tilted objects.
    let mut dev = (tilted.initial.iter().sum::<f64>() - 1.0).abs();
    for q in &tilted.transitions {
        for x in 0..n {
            dev = dev.max((q[x * n..(x + 1) * n].iter().sum::<f64>() - 1.0).abs());
        }
    }
    rep.record("rows_stochastic", dev);

    // Marginal identity at every step: ρ*_t = exp(v_t/α) ρ_t / C.
    let base = chain.marginals();
    let opt = propagate(&tilted.initial, &tilted.transitions, n);
    for t in 0..=h {
        let pred: Vec<f64> = (0..n).map(|x| (v[t][x] / a - log_c).exp() * base[t][x]).collect();
        rep.record("marginal", max_abs_diff(&opt[t], &pred));
    }

    // Terminal law: exp(r/α) ρ_H / C.
    let term: Vec<f64> = (0..n).map(|x| (chain.reward[x] / a - log_c).exp() * base[h][x]).collect();
    rep.record("terminal", max_abs_diff(&opt[h], &term));

    // Optimal initial law through forward products, without soft values.
    let m = product(&chain.transitions, n, 0, h);
    let rmax = chain.reward.iter().fold(f64::NEG_INFINITY, |m, r| m.max(*r));
    let g: Vec<f64> = chain.reward.iter().map(|r| ((r - rmax) / a).exp()).collect();
    let mut init: Vec<f64> = (0..n)
        .map(|x| chain.initial[x] * (0..n).map(|y| m[x * n + y] * g[y]).sum::<f64>())
        .collect();
    let z: f64 = init.iter().sum();
    init.iter_mut().for_each(|p| *p /= z);
    rep.record("optimal_initial", max_abs_diff(&tilted.initial, &init));

    // C_tar from the marginal identity at each t.
    for t in 0..=h {
        let terms: Vec<f64> = (0..n).map(|x| base[t][x].ln() + v[t][x] / a).collect();
        let log_ct = linalg::log_sum_exp(&terms);
        rep.record("c_tar_t_independence", ((log_ct - log_c).exp() - 1.0).abs());
    }

    // Joints P*_{s,t} = P_{s,t} exp(v_t(y)/α)/C and backward conditionals.
    for s in 0..=h {
        for t in s + 1..=h {
            let pb = product(&chain.transitions, n, s, t);
            let po = product(&tilted.transitions, n, s, t);
            let (mut dj, mut dc) = (0.0f64, 0.0f64);
            for x in 0..n {
                for y in 0..n {
                    let jb = base[s][x] * pb[x * n + y];
                    let jo = opt[s][x] * po[x * n + y];
                    dj = dj.max((jo - jb * (v[t][y] / a - log_c).exp()).abs());
                    if base[t][y] > 0.0 && opt[t][y] > 0.0 {
                        dc = dc.max((jo / opt[t][y] - jb / base[t][y]).abs());
                    }
                }
            }
            rep.record("joint", dj);
            rep.record("backward_conditional", dc);
        }
    }

    // Bridge transitions: the law of x_{t+1} given x_t and x_H agrees.
    for t in 0..h {
        let pb_end = product(&chain.transitions, n, t + 1, h);
        let po_end = product(&tilted.transitions, n, t + 1, h);
        let pb_all = product(&chain.transitions, n, t, h);
        let po_all = product(&tilted.transitions, n, t, h);
        let (p, q) = (&chain.transitions[t], &tilted.transitions[t]);
        let mut d = 0.0f64;
        for x in 0..n {
            for z in 0..n {
                if pb_all[x * n + z] <= 0.0 || po_all[x * n + z] <= 0.0 {
                    continue;
                }
                for y in 0..n {
                    let b = p[x * n + y] * pb_end[y * n + z] / pb_all[x * n + z];
                    let o = q[x * n + y] * po_end[y * n + z] / po_all[x * n + z];
                    d = d.max((b - o).abs());
                }
            }
        }
        rep.record("bridge", d);
    }

    // Full bridge by enumeration when feasible.
    let paths = n.checked_pow(h as u32 + 1).unwrap_or(usize::MAX);
    if paths <= MAX_ENUMERATED_PATHS {
        rep.record("bridge_enumeration", enumerate_bridge(chain, tilted));
    }

    // Path KL by the chain rule versus E*[r]/α − log C.
    let mut kl = 0.0;
    for x in 0..n {
        if tilted.initial[x] > 0.0 {
            kl += tilted.initial[x] * (tilted.initial[x] / chain.initial[x]).ln();
        }
    }
    for t in 0..h {
        let (p, q) = (&chain.transitions[t], &tilted.transitions[t]);
        for x in 0..n {
            for y in 0..n {
                let j = opt[t][x] * q[x * n + y];
                if j > 0.0 {
                    kl += j * (q[x * n + y] / p[x * n + y]).ln();
                }
            }
        }
    }
    let er: f64 = (0..n).map(|x| opt[h][x] * chain.reward[x]).sum();
    rep.record("path_kl", (kl - (er / a - log_c)).abs());
    rep
}

/// Max deviation between base and tilted path laws conditioned on `x_H`,
/// over all `n^{H+1}` paths.
fn enumerate_bridge(chain: &DiscreteChain, tilted: &TiltedChain) -> f64 {
    let (n, h) = (chain.n, chain.horizon());
    let total = n.pow(h as u32 + 1);
    let mut base = vec![0.0; total];
    let mut opt = vec![0.0; total];
    let mut path = vec![0usize; h + 1];
    for (idx, (b, o)) in base.iter_mut().zip(opt.iter_mut()).enumerate() {
        let mut k = idx;
        for slot in path.iter_mut().rev() {
            *slot = k % n;
            k /= n;
        }
        let mut pb = chain.initial[path[0]];
        let mut po = tilted.initial[path[0]];
        for t in 0..h {
            pb *= chain.transitions[t][path[t] * n + path[t + 1]];
            po *= tilted.transitions[t][path[t] * n + path[t + 1]];
        }
        *b = pb;
        *o = po;
    }
    // Paths ending in z are those with idx % n == z.
    let mut end_b = vec![0.0; n];
    let mut end_o = vec![0.0; n];
    for idx in 0..total {
        end_b[idx % n] += base[idx];
        end_o[idx % n] += opt[idx];
    }
    let mut dev = 0.0f64;
    for idx in 0..total {
        let z = idx % n;
        if end_b[z] > 0.0 && end_o[z] > 0.0 {
            dev = dev.max((base[idx] / end_b[z] - opt[idx] / end_o[z]).abs());
        }
    }
    dev
}
