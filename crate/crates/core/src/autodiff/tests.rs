use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::check_gradients;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn tensor_rejects_bad_construction() {
    assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
    assert!(matches!(Tensor::new(vec![1], vec![f64::NAN]), Err(Error::Numeric(_))));
    assert!(matches!(Tensor::new(vec![1], vec![f64::INFINITY]), Err(Error::Numeric(_))));
}

#[test]
fn mul_of_threes() {
    let mut g = Graph::new();
    let a = g.input(t(&[1], &[3.0]));
    let b = g.input(t(&[1], &[3.0]));
    let y = g.mul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let v = g.input(t(&[2], &[0.0, 0.0]));
    let s = g.softmax(v).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[2, 3], -10.0, 10.0);
    let b = random(&mut rng, &[3, 4], -10.0, 10.0);
    let mut g = Graph::new();
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    assert_eq!(g.value(c).data(), naive_matmul(&a, &b).as_slice());
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::new();
    let x = g.param("x", t(&[1], &[3.0]));
    let y = g.mul(x, x).unwrap();
    let root = g.sum(y).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads["x"].data(), &[6.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut g = Graph::new();
    let v = g.param("v", t(&[4], &[0.3, -1.2, 2.0, 0.7]));
    let s = g.softmax(v).unwrap();
    let root = g.sum(s).unwrap();
    let grads = g.backward(root).unwrap();
    for x in grads["v"].data() {
        assert!(x.abs() < 1e-15, "{x}");
    }
}

#[test]
fn cosine_against_linear_map_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[5], -1.0, 1.0);
        let b = random(&mut rng, &[4], -1.0, 1.0);
        let mut params = Params::new();
        params.insert("w", random(&mut rng, &[4, 5], -1.0, 1.0));
        let eval = |p: &Params, grad: bool| -> crate::Result<(f64, Gradients)> {
            let mut g = Graph::new();
            let w = if grad { p.bind(&mut g) } else { p.bind_frozen(&mut g) }.var("w");
            let va = g.constant(a.reshape(vec![1, 5]).unwrap());
            let vb = g.constant(b.reshape(vec![1, 4]).unwrap());
            let wb = g.matmul(vb, w)?;
            let c = g.cosine(va, wb)?;
            let root = g.sum(c)?;
            let v = g.value(root).item()?;
            let grads = if grad { g.backward(root)? } else { Gradients::new() };
            Ok((v, grads))
        };
        let (_, analytic) = eval(&params, true).unwrap();
        let report = check_gradients(|p| Ok(eval(p, false)?.0), &params, &analytic, 64, 1e-6, seed).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

/// Builds `sum(c * f(inputs))` for a primitive `f` with random `c`, so every
/// output entry carries a distinct upstream gradient.
fn primitive_objective(
    prim: &str,
    p: &Params,
    weights: &Tensor,
    grad: bool,
) -> crate::Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let b = if grad { p.bind(&mut g) } else { p.bind_frozen(&mut g) };
    let (x, y) = (b.var("x"), b.var("y"));
    let out = match prim {
        "add" => g.add(x, y)?,
        "add_row" => {
            let r = b.var("r");
            g.add(x, r)?
        }
        "add_scalar" => {
            let s = b.var("s");
            g.add(x, s)?
        }
        "sub" => g.sub(x, y)?,
        "sub_scalar" => {
            let s = b.var("s");
            g.sub(s, x)?
        }
        "mul" => g.mul(x, y)?,
        "mul_scalar" => {
            let s = b.var("s");
            g.mul(x, s)?
        }
        "matmul" => {
            let yt = g.transpose(y)?;
            g.matmul(x, yt)?
        }
        "sum" => g.sum(x)?,
        "mean" => g.mean(x)?,
        "sum_last" => g.sum_last(x)?,
        "scale" => g.scale(x, -1.7)?,
        "tanh" => g.tanh(x)?,
        "silu" => g.silu(x)?,
        "exp" => g.exp(x)?,
        "log" => {
            let sq = g.square(x)?;
            let s = b.var("s");
            let pos = g.add(sq, s)?;
            g.log(pos)?
        }
        "square" => g.square(x)?,
        "softmax" => g.softmax(x)?,
        "log_softmax" => g.log_softmax(x)?,
        "l2_normalize" => g.l2_normalize(x)?,
        "norm" => g.norm(x)?,
        "cosine" => g.cosine(x, y)?,
        "gather" => {
            let tab = b.var("tab");
            g.gather(tab, &[2, 0, 2, 1])?
        }
        "pick" => g.pick(x, &[1, 0, 3])?,
        "concat" => g.concat(&[x, y, x])?,
        other => panic!("unknown primitive {other}"),
    };
    let n = g.value(out).len();
    let wdata = &weights.data()[..n];
    let w = g.constant(Tensor::new(g.shape(out).to_vec(), wdata.to_vec())?);
    let weighted = g.mul(out, w)?;
    let root = g.sum(weighted)?;
    let v = g.value(root).item()?;
    let grads = if grad { g.backward(root)? } else { Gradients::new() };
    Ok((v, grads))
}

#[test]
fn every_primitive_matches_finite_differences() {
    let prims = [
        "add", "add_row", "add_scalar", "sub", "sub_scalar", "mul", "mul_scalar", "matmul",
        "sum", "mean", "sum_last", "scale", "tanh", "silu", "exp", "log", "square", "softmax",
        "log_softmax", "l2_normalize", "norm", "cosine", "gather", "pick", "concat",
    ];
    for prim in prims {
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut p = Params::new();
            p.insert("x", random(&mut rng, &[3, 4], -2.0, 2.0));
            p.insert("y", random(&mut rng, &[3, 4], -2.0, 2.0));
            p.insert("r", random(&mut rng, &[4], -2.0, 2.0));
            p.insert("s", random(&mut rng, &[1], 0.5, 2.0));
            p.insert("tab", random(&mut rng, &[3, 4], -2.0, 2.0));
            let weights = random(&mut rng, &[64], -1.0, 1.0);
            let (_, analytic) = primitive_objective(prim, &p, &weights, true).unwrap();
            let report = check_gradients(
                |q| Ok(primitive_objective(prim, q, &weights, false)?.0),
                &p,
                &analytic,
                64,
                1e-6,
                seed,
            )
            .unwrap();
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst < 1e-4, "{prim}: max relative error {worst:e}");
    }
}

#[test]
fn apply_dispatches_named_primitives() {
    let mut g = Graph::new();
    let a = g.input(t(&[2], &[1.0, 2.0]));
    let b = g.input(t(&[2], &[3.0, 4.0]));
    let s = g.apply(Primitive::Add, &[a, b]).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    let sc = g.apply(Primitive::Scale(2.0), &[s]).unwrap();
    assert_eq!(g.value(sc).data(), &[8.0, 12.0]);
    assert_eq!(g.op_name(sc), "scale");
    assert_eq!(g.parents(sc), vec![s]);
    assert!(matches!(g.apply(Primitive::Add, &[a]), Err(Error::Shape(_))));
}

#[test]
fn shape_and_domain_errors() {
    let mut g = Graph::new();
    let a = g.input(t(&[2, 3], &[1.0; 6]));
    let b = g.input(t(&[2, 2], &[1.0; 4]));
    assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    assert!(matches!(g.matmul(a, a), Err(Error::Shape(_))));
    let row = g.input(t(&[3], &[1.0; 3]));
    assert!(g.add(a, row).is_ok(), "row bias is allowed");
    assert!(matches!(g.mul(a, row), Err(Error::Shape(_))), "mul does not row-broadcast");

    let neg = g.input(t(&[2], &[1.0, -1.0]));
    assert!(matches!(g.log(neg), Err(Error::Domain(_))));
    let zero = g.input(t(&[2], &[0.0, 0.0]));
    assert!(matches!(g.log(zero), Err(Error::Domain(_))));
    assert!(matches!(g.l2_normalize(zero), Err(Error::Domain(_))));
    let tiny = g.input(t(&[2], &[1e-13, 0.0]));
    assert!(matches!(g.l2_normalize(tiny), Err(Error::Domain(_))));
    assert!(matches!(g.cosine(zero, neg), Err(Error::Domain(_))));

    let big = g.input(t(&[1], &[800.0]));
    assert!(matches!(g.exp(big), Err(Error::Numeric(_))));
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let a = g.param("a", t(&[2], &[1.0, 2.0]));
    assert!(matches!(g.backward(a), Err(Error::Shape(_))));
    let one = g.param("o", t(&[1], &[2.0]));
    assert!(g.backward(one).is_ok(), "shape [1] counts as scalar");
}

#[test]
fn repeated_backward_accumulates_and_reset_restores() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.param("x", random(&mut rng, &[3, 4], -1.0, 1.0));
    let w = g.param("w", random(&mut rng, &[4, 2], -1.0, 1.0));
    let h = g.matmul(x, w).unwrap();
    let h = g.tanh(h).unwrap();
    let s = g.log_softmax(h).unwrap();
    let root = g.mean(s).unwrap();

    let first = g.backward(root).unwrap();
    let doubled = g.backward(root).unwrap();
    for (name, t1) in &first {
        for (a, b) in t1.data().iter().zip(doubled[name].data()) {
            assert_eq!(2.0 * a, *b);
        }
    }
    g.zero_grad();
    let again = g.backward(root).unwrap();
    assert_eq!(first, again, "bitwise identical after reset");
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(t(&[2], &[1.0, 2.0]));
    let x = g.param("x", t(&[2], &[0.5, 0.5]));
    let y = g.mul(c, x).unwrap();
    let root = g.sum(y).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(grads["x"].data(), &[1.0, 2.0]);
}

#[test]
fn softmax_and_normalize_match_naive_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 5], -10.0, 10.0);
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let s = g.softmax(v).unwrap();
    let n = g.l2_normalize(v).unwrap();
    for r in 0..3 {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..5 {
            assert_eq!(g.value(s).row(r)[j], e[j] / z);
            assert_eq!(g.value(n).row(r)[j], row[j] / norm);
        }
    }
}

proptest! {
    #[test]
    fn matmul_forward_is_exact(
        a in proptest::collection::vec(-10.0f64..10.0, 12),
        b in proptest::collection::vec(-10.0f64..10.0, 20),
    ) {
        let ta = t(&[3, 4], &a);
        let tb = t(&[4, 5], &b);
        let mut g = Graph::new();
        let (va, vb) = (g.input(ta.clone()), g.input(tb.clone()));
        let c = g.matmul(va, vb).unwrap();
        let naive = naive_matmul(&ta, &tb);
        prop_assert_eq!(g.value(c).data(), naive.as_slice());
    }

    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-10.0f64..10.0, 1..16)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(v).unwrap());
        let s = g.softmax(x).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn params_json_round_trip_is_bitwise(bits in proptest::collection::vec(any::<u64>(), 1..24)) {
        let data: Vec<f64> = bits
            .iter()
            .map(|b| f64::from_bits(*b))
            .map(|v| if v.is_finite() { v } else { 0.0 })
            .collect();
        let mut p = Params::new();
        p.insert("w", Tensor::vector(data.clone()).unwrap());
        let back: Params = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        let got: Vec<u64> = back.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }
}
