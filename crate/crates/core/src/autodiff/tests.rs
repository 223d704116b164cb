use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{Activation, Mlp};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Builds `sum(w ⊙ f(inputs))` for a fixed random weighting `w` so the
/// upstream gradient is not uniform.
fn weighted_root(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = g.constant(&shape, w).unwrap();
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

/// Compares reverse-mode gradients of `build` with central differences
/// (step 1e-5) at one random point.
fn check_point(
    shapes: &[Vec<usize>],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    rng: &mut ChaCha8Rng,
    avoid_kinks: bool,
) -> f64 {
    let sample = |rng: &mut ChaCha8Rng| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if !avoid_kinks || v.abs() > 1e-2 {
            return v;
        }
    };
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| (0..s.iter().product::<usize>()).map(|_| sample(rng)).collect())
        .collect();
    let weight_seed: u64 = rng.random();

    let eval = |vals: &[Vec<f64>], with_grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| g.input(s, v.clone()).unwrap())
            .collect();
        let out = build(&mut g, &vars);
        let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
        let root = weighted_root(&mut g, out, &mut wrng);
        let value = g.scalar_value(root);
        let grads = if with_grad {
            g.backward(root).unwrap();
            vars.iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };

    let (_, analytic) = eval(&inputs, true);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[i][j] += h;
            minus[i][j] -= h;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], fd));
        }
    }
    worst
}

fn check_primitive(shapes: &[Vec<usize>], build: &dyn Fn(&mut Graph, &[Var]) -> Var, kinks: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let e = check_point(shapes, build, &mut rng, kinks);
        assert!(e <= 1e-4, "relative error {e}");
    }
}

#[test]
fn eval_examples() {
    let mut g = Graph::new();
    let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
    let b = g.constant(&[2], vec![3.0, 4.0]).unwrap();
    let s = g.add(a, b).unwrap();
    assert_eq!(g.eval(s), vec![4.0, 6.0]);

    let z = g.constant(&[1], vec![0.0]).unwrap();
    let t = g.tanh(z);
    assert_eq!(g.eval(t), vec![0.0]);

    let id = g
        .constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        .unwrap();
    let x = g.constant(&[3], vec![5.0, -1.0, 2.0]).unwrap();
    let y = g.matvec(id, x).unwrap();
    assert_eq!(g.eval(y), vec![5.0, -1.0, 2.0]);
}

#[test]
fn shape_mismatch_names_the_primitive() {
    let mut g = Graph::new();
    let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
    let b = g.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    match g.add(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2]);
            assert_eq!(rhs, vec![3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let m = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
    assert!(matches!(g.matmul(m, b), Err(Error::Shape { op: "matmul", .. })));
    assert!(matches!(g.matvec(m, b), Err(Error::Shape { op: "matvec", .. })));
}

#[test]
fn backward_examples() {
    let mut ps = ParamSet::new();
    ps.add("p", &[2], vec![1.0, 2.0]);
    let mut g = Graph::new();
    let p = g.param(&ps, 0);
    let sq = g.square(p);
    let root = g.sum(sq);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(0).unwrap(), &[2.0, 4.0]);

    let mut ps = ParamSet::new();
    ps.add("p", &[], vec![2.0]);
    let mut g = Graph::new();
    let p = g.param(&ps, 0);
    let root = g.scale(p, 3.0);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(0).unwrap(), &[3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut ps = ParamSet::new();
    ps.add("p", &[2], vec![1.0, -1.0]);
    let mut g = Graph::new();
    let p = g.param(&ps, 0);
    let c = g.constant(&[2], vec![4.0, 5.0]).unwrap();
    let m = g.mul(p, c).unwrap();
    let root = g.sum(m);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(0).unwrap(), &[4.0, 5.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let a = g.input(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(g.backward(a), Err(Error::NonScalarRoot(_))));
}

#[test]
fn gradient_check_binary_primitives() {
    let v = vec![3usize, 4];
    check_primitive(&[v.clone(), v.clone()], &|g, x| g.add(x[0], x[1]).unwrap(), false);
    check_primitive(&[v.clone(), v.clone()], &|g, x| g.sub(x[0], x[1]).unwrap(), false);
    check_primitive(&[v.clone(), v.clone()], &|g, x| g.mul(x[0], x[1]).unwrap(), false);
    check_primitive(&[v], &|g, x| g.scale(x[0], -1.7), false);
}

#[test]
fn gradient_check_linear_algebra() {
    check_primitive(&[vec![3, 4], vec![4]], &|g, x| g.matvec(x[0], x[1]).unwrap(), false);
    check_primitive(&[vec![3, 4], vec![4, 2]], &|g, x| g.matmul(x[0], x[1]).unwrap(), false);
}

#[test]
fn gradient_check_unary_primitives() {
    let s = vec![5usize];
    check_primitive(std::slice::from_ref(&s), &|g, x| g.tanh(x[0]), false);
    check_primitive(std::slice::from_ref(&s), &|g, x| g.relu(x[0]), true);
    check_primitive(std::slice::from_ref(&s), &|g, x| g.square(x[0]), false);
    check_primitive(&[s], &|g, x| g.sum(x[0]), false);
}

#[test]
fn gradient_check_structural_primitives() {
    check_primitive(
        &[vec![2, 3], vec![2, 1]],
        &|g, x| g.concat(&[x[0], x[1]]).unwrap(),
        false,
    );
    check_primitive(&[vec![3, 5]], &|g, x| g.slice(x[0], 1, 3).unwrap(), false);
    check_primitive(&[vec![4]], &|g, x| g.slice(x[0], 2, 2).unwrap(), false);
    // external: row-wise x ↦ (sin x0 · x1, x0²) with its exact Jacobian
    check_primitive(
        &[vec![3, 2]],
        &|g, x| {
            let v = g.value(x[0]).to_vec();
            let mut out = Vec::new();
            let mut jac = Vec::new();
            for r in v.chunks(2) {
                out.extend([r[0].sin() * r[1], r[0] * r[0]]);
                jac.extend([r[0].cos() * r[1], r[0].sin(), 2.0 * r[0], 0.0]);
            }
            g.external(x[0], 2, out, jac).unwrap()
        },
        false,
    );
}

#[test]
fn gradient_check_two_hidden_layer_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..100 {
        let mut ps = ParamSet::new();
        let mlp = Mlp::new(&mut ps, "net", &[3, 6, 6, 2], Activation::Tanh, trial, false).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |ps: &ParamSet, with_grad: bool| {
            let mut g = Graph::new();
            let xv = g.constant(&[2, 3], x.clone()).unwrap();
            let out = mlp.record(&mut g, ps, xv).unwrap();
            let wv = g.constant(&[2, 2], w.clone()).unwrap();
            let m = g.mul(out, wv).unwrap();
            let root = g.sum(m);
            let value = g.scalar_value(root);
            let grads = with_grad.then(|| g.backward(root).unwrap());
            (value, grads)
        };
        let (_, grads) = loss(&ps, true);
        let grads = grads.unwrap();
        let flat_grad: Vec<f64> = (0..ps.len())
            .flat_map(|i| grads.get(i).unwrap().to_vec())
            .collect();
        let base = ps.flat_values();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            let mut plus = ps.clone();
            plus.set_flat_values(&p);
            p[k] -= 2.0 * h;
            let mut minus = ps.clone();
            minus.set_flat_values(&p);
            let fd = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
            let e = rel_err(flat_grad[k], fd);
            assert!(e <= 1e-4, "trial {trial} component {k}: {} vs {fd}", flat_grad[k]);
        }
    }
}

#[test]
fn backward_is_linear_in_seed() {
    let mut ps = ParamSet::new();
    let mlp = Mlp::new(&mut ps, "net", &[2, 4, 1], Activation::Tanh, 5, false).unwrap();
    let run = |seed: f64| {
        let mut g = Graph::new();
        let x = g.constant(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let out = mlp.record(&mut g, &ps, x).unwrap();
        let root = g.sum(out);
        g.backward_with_seed(root, seed).unwrap()
    };
    let g1 = run(0.75);
    let g2 = run(1.5);
    for i in 0..ps.len() {
        let a = g1.get(i).unwrap();
        let b = g2.get(i).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

#[test]
fn reevaluation_is_bit_identical() {
    let mut ps = ParamSet::new();
    let mlp = Mlp::new(&mut ps, "net", &[2, 8, 8, 1], Activation::Tanh, 11, false).unwrap();
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(&[2, 2], vec![0.3, -1.2, 2.2, 0.0]).unwrap();
        let out = mlp.record(&mut g, &ps, x).unwrap();
        let root = g.sum(out);
        let v = g.scalar_value(root);
        (v, g.backward(root).unwrap())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut ps = ParamSet::new();
    ps.add("p", &[3], vec![1.0, -2.0, 0.5]);
    let before = ps.flat_values();
    let mut grads = Gradients::default();
    grads.accumulate(0, &[0.0, 0.0, 0.0]);
    ps.adam_step(&grads, &AdamConfig::default()).unwrap();
    assert_eq!(ps.flat_values(), before);
    assert_eq!(ps.step(), 1);
}

#[test]
fn adam_first_step_moves_by_lr_against_sign() {
    for (b1, b2) in [(0.9, 0.999), (0.5, 0.9), (0.0, 0.0)] {
        let mut ps = ParamSet::new();
        ps.add("p", &[3], vec![0.0, 0.0, 0.0]);
        let mut grads = Gradients::default();
        grads.accumulate(0, &[3.0, -0.2, 1e3]);
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: b1,
            beta2: b2,
            eps: 1e-8,
        };
        ps.adam_step(&grads, &cfg).unwrap();
        for (v, s) in ps.flat_values().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 0.01).abs() < 1e-8, "{v}");
        }
    }
}

#[test]
fn adam_defaults() {
    let c = AdamConfig::default();
    assert_eq!((c.lr, c.beta1, c.beta2), (1e-4, 0.9, 0.999));
}

#[test]
fn adam_rejects_non_finite_gradient_and_bad_config() {
    let mut ps = ParamSet::new();
    ps.add("p", &[2], vec![0.0, 0.0]);
    let mut grads = Gradients::default();
    grads.accumulate(0, &[1.0, f64::NAN]);
    assert!(matches!(ps.adam_step(&grads, &AdamConfig::default()), Err(Error::NonFinite(_))));
    assert_eq!(ps.step(), 0);
    let mut ok = Gradients::default();
    ok.accumulate(0, &[1.0, 1.0]);
    let bad = AdamConfig {
        lr: 0.0,
        ..AdamConfig::default()
    };
    assert!(ps.adam_step(&ok, &bad).is_err());
    let bad = AdamConfig {
        beta1: 1.0,
        ..AdamConfig::default()
    };
    assert!(ps.adam_step(&ok, &bad).is_err());
}

#[test]
fn clip_global_norm_rescales() {
    let mut grads = Gradients::default();
    grads.accumulate(0, &[3.0]);
    grads.accumulate(1, &[4.0]);
    let before = grads.clip_global_norm(5.0);
    assert_eq!(before, 5.0);
    assert_eq!(grads.get(0).unwrap(), &[3.0]);
    grads.clip_global_norm(1.0);
    assert!((grads.global_norm() - 1.0).abs() < 1e-15);
}

#[test]
fn checkpoint_rejects_unknown_version() {
    let mut ps = ParamSet::new();
    ps.add("w", &[1], vec![1.0]);
    let text = ps.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
    assert!(matches!(ParamSet::from_json(&text), Err(Error::Checkpoint(_))));
}

proptest! {
    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..20), steps in 0usize..4) {
        let mut ps = ParamSet::new();
        let n = values.len();
        ps.add("a", &[n], values.clone());
        ps.add("b", &[1, n], values.iter().map(|v| v * 0.5).collect());
        let mut grads = Gradients::default();
        grads.accumulate(0, &values);
        for _ in 0..steps {
            ps.adam_step(&grads, &AdamConfig::default()).unwrap();
        }
        let back = ParamSet::from_json(&ps.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, ps);
    }
}
