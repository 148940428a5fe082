//! Finite-difference verification for every registered tape op, 10 seeds
//! each, in f64 at eps = 1e-5.

use webhc_core::gradcheck::grad_check;
use webhc_core::params::FlatParams;
use webhc_core::rng::Rng;
use webhc_core::tape::{NodeId, Tape};
use webhc_core::tensor::Tensor;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
const SEEDS: u64 = 10;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 0.5, rng)
}

/// Run one builder across seeds; `make` constructs the params per seed.
fn check_op<F, G>(name: &str, make: G, build: F)
where
    F: Fn(&mut Tape<f64>, &FlatParams<f64>) -> webhc_core::Result<NodeId>,
    G: Fn(&mut Rng) -> FlatParams<f64>,
{
    for seed in 0..SEEDS {
        let mut rng = Rng::stream(seed, &format!("gradcheck/{name}"));
        let params = make(&mut rng);
        let report = grad_check(&params, &build, EPS).unwrap();
        assert!(
            report.passes(TOL),
            "{name} seed {seed}: max rel error {}",
            report.max_rel_error
        );
    }
}

/// Random projection of a rank-2 output down to a scalar so every element's
/// gradient is exercised with distinct weights.
fn project(tape: &mut Tape<f64>, x: NodeId, rng: &mut Rng) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let r = tape.leaf(Tensor::randn(&shape, 1.0, rng));
    let p = tape.mul(x, r).unwrap();
    tape.sum_all(p)
}

#[test]
fn matmul_grads() {
    check_op(
        "matmul",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("a", randn(&[3, 4], rng));
            p.insert("b", randn(&[4, 2], rng));
            p
        },
        |tape, p| {
            let a = tape.param("a", p.get("a"))?;
            let b = tape.param("b", p.get("b"))?;
            let c = tape.matmul_scaled(a, b, 0.37)?;
            let mut rng = Rng::new(99);
            Ok(project(tape, c, &mut rng))
        },
    );
}

#[test]
fn add_mul_broadcast_grads() {
    check_op(
        "add_mul",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("a", randn(&[3, 4], rng));
            p.insert("row", randn(&[4], rng));
            p.insert("s", randn(&[1], rng));
            p
        },
        |tape, p| {
            let a = tape.param("a", p.get("a"))?;
            let row = tape.param("row", p.get("row"))?;
            let s = tape.param("s", p.get("s"))?;
            let x = tape.add(a, row)?;
            let x = tape.mul(x, a)?;
            let x = tape.scale_by(x, s)?;
            let x = tape.scale(x, -1.7);
            let mut rng = Rng::new(98);
            Ok(project(tape, x, &mut rng))
        },
    );
}

#[test]
fn activation_grads() {
    check_op(
        "activations",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("x", randn(&[2, 6], rng));
            p
        },
        |tape, p| {
            let x = tape.param("x", p.get("x"))?;
            let t = tape.tanh(x);
            let g = tape.gelu(t);
            let mut rng = Rng::new(97);
            Ok(project(tape, g, &mut rng))
        },
    );
}

#[test]
fn softmax_grads() {
    check_op(
        "softmax",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("x", randn(&[3, 5], rng));
            p
        },
        |tape, p| {
            let x = tape.param("x", p.get("x"))?;
            let s = tape.softmax_lastdim(x)?;
            let mut rng = Rng::new(96);
            Ok(project(tape, s, &mut rng))
        },
    );
}

#[test]
fn masked_softmax_grads() {
    let mask = vec![
        true, true, false, true, false, //
        true, false, true, true, true, //
        false, true, true, false, true,
    ];
    check_op(
        "masked_softmax",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("x", randn(&[3, 5], rng));
            p
        },
        move |tape, p| {
            let x = tape.param("x", p.get("x"))?;
            let s = tape.masked_softmax_lastdim(x, mask.clone())?;
            let mut rng = Rng::new(95);
            Ok(project(tape, s, &mut rng))
        },
    );
}

#[test]
fn layer_norm_grads() {
    check_op(
        "layer_norm",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("x", randn(&[4, 6], rng));
            p.insert("gamma", randn(&[6], rng));
            p.insert("beta", randn(&[6], rng));
            p
        },
        |tape, p| {
            let x = tape.param("x", p.get("x"))?;
            let g = tape.param("gamma", p.get("gamma"))?;
            let b = tape.param("beta", p.get("beta"))?;
            let y = tape.layer_norm(x, g, b, 1e-5)?;
            let mut rng = Rng::new(94);
            Ok(project(tape, y, &mut rng))
        },
    );
}

#[test]
fn cross_entropy_grads() {
    check_op(
        "cross_entropy",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("w", randn(&[3, 4], rng));
            p
        },
        |tape, p| {
            let w = tape.param("w", p.get("w"))?;
            let x = tape.leaf(Tensor::randn(&[2, 3], 1.0, &mut Rng::new(12)));
            let logits = tape.matmul(x, w)?;
            tape.cross_entropy(logits, &[1, 3])
        },
    );
}

#[test]
fn embed_scatter_grads() {
    check_op(
        "embed",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("table", randn(&[8, 4], rng));
            p
        },
        |tape, p| {
            let table = tape.param("table", p.get("table"))?;
            // duplicate id 3 exercises gradient accumulation into one row
            let e = tape.embed(table, &[3, 1, 3, 7])?;
            let mut rng = Rng::new(93);
            Ok(project(tape, e, &mut rng))
        },
    );
}

#[test]
fn reshape_like_op_grads() {
    check_op(
        "narrow_concat_transpose",
        |rng| {
            let mut p = FlatParams::new();
            p.insert("x", randn(&[4, 6], rng));
            p
        },
        |tape, p| {
            let x = tape.param("x", p.get("x"))?;
            let left = tape.narrow(x, 1, 0, 2)?;
            let right = tape.narrow(x, 1, 2, 4)?;
            let rt = tape.transpose(right)?;
            let rtt = tape.transpose(rt)?;
            let back = tape.concat(&[left, rtt], 1)?;
            let rows = tape.narrow(back, 0, 1, 2)?;
            let m = tape.mean_rows(rows)?;
            let mut rng = Rng::new(92);
            Ok(project(tape, m, &mut rng))
        },
    );
}

#[test]
fn linear_layer_tight_tolerance() {
    // Linear graphs have zero truncation error; only rounding remains.
    let mut rng = Rng::stream(0, "gradcheck/linear");
    let mut p = FlatParams::new();
    p.insert("w", randn(&[3, 2], &mut rng));
    p.insert("b", randn(&[2], &mut rng));
    let report = grad_check(
        &p,
        |tape, p| {
            let w = tape.param("w", p.get("w"))?;
            let b = tape.param("b", p.get("b"))?;
            let x = tape.leaf(Tensor::randn(&[2, 3], 1.0, &mut Rng::new(44)));
            let y = tape.matmul(x, w)?;
            let y = tape.add(y, b)?;
            Ok(tape.sum_all(y))
        },
        EPS,
    )
    .unwrap();
    assert!(
        report.max_rel_error <= 1e-7,
        "linear layer rel error {}",
        report.max_rel_error
    );
}

#[test]
fn softmax_cross_entropy_composite() {
    let mut rng = Rng::stream(0, "gradcheck/smce");
    let mut p = FlatParams::new();
    p.insert("w", randn(&[4, 5], &mut rng));
    let report = grad_check(
        &p,
        |tape, p| {
            let w = tape.param("w", p.get("w"))?;
            let x = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut Rng::new(45)));
            let logits = tape.matmul(x, w)?;
            tape.cross_entropy(logits, &[0, 4, 2])
        },
        EPS,
    )
    .unwrap();
    assert!(
        report.max_rel_error <= 1e-6,
        "softmax+CE rel error {}",
        report.max_rel_error
    );
}
