// SPDX-License-Identifier: Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Random entries with |x| ≥ 0.1 so kinks (relu, clamp) are avoided.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let a = rand_array(rng, shape, 0.1, 2.0);
    let signs = rand_array(rng, shape, -1.0, 1.0);
    Array::new(
        shape.to_vec(),
        a.data()
            .iter()
            .zip(signs.data())
            .map(|(v, s)| if *s < 0.0 { -v } else { *v })
            .collect(),
    )
    .unwrap()
}

/// `Σ w ⊙ f(x)` so every output entry gets a distinct adjoint.
fn weighted(g: &mut Graph, rng: &mut ChaCha8Rng, y: NodeId) -> NodeId {
    let w = rand_array(rng, g.value(y).shape(), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

fn assert_check(g: &mut Graph, out: NodeId, leaves: &[NodeId], tol: f64) {
    let report = check_gradients(g, out, leaves, &GradCheckOptions::with_tolerance(tol)).unwrap();
    assert!(
        report.passed(),
        "gradient check failed: {:?}",
        report.failures()
    );
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let x = g.input(Array::vector(vec![1.0, 2.0, 3.0]));
    let s = g.sum(x).unwrap();
    assert_eq!(g.value(s).item(), 6.0);

    let eye = g.input(Array::identity(2, None));
    let col = g.input(Array::matrix(2, 1, vec![5.0, 7.0]).unwrap());
    let prod = g.matmul(eye, col).unwrap();
    assert_eq!(g.value(prod).data(), &[5.0, 7.0]);

    let m = g.input(Array::matrix(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap());
    let f = g.frobenius_sq(m).unwrap();
    assert_eq!(g.value(f).item(), 25.0);
}

#[test]
fn forward_replay_rebinds_inputs() {
    let mut g = Graph::new();
    let x = g.input(Array::vector(vec![1.0, 2.0]));
    let sq = g.square(x).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.value(s).item(), 5.0);
    g.forward(&[(x, Array::vector(vec![3.0, 4.0]))]).unwrap();
    assert_eq!(g.value(s).item(), 25.0);
    assert!(matches!(
        g.forward(&[(x, Array::vector(vec![1.0]))]),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::new();
    let a = g.input(Array::zeros(&[2, 3]));
    let b = g.input(Array::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    match err {
        Error::Dimension(msg) => assert!(msg.contains("matmul"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.input(Array::vector(vec![1.0, 2.0]));
    let sq = g.square(x).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.input(Array::vector(vec![1.0, 2.0]));
    let c = g.input(Array::scalar(3.0));
    let out = g.scale(c, 2.0).unwrap();
    assert_eq!(g.backward(out).unwrap().get(x).data(), &[0.0, 0.0]);

    let mut g = Graph::new();
    let x = g.input(Array::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::InvalidInput(_))));
}

#[test]
fn mat_exp_gradient_matches_finite_difference() {
    // d/dt ‖exp(tA)‖²_F at t = 0.3, A nilpotent: exp(tA) = I + tA, so the
    // value is 2 + t² and the derivative 2t = 0.6.
    let mut g = Graph::new();
    let t = g.input(Array::scalar(0.3));
    let a = g.constant(Array::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap());
    let ta = g.mul(a, t).unwrap();
    let e = g.mat_exp(ta).unwrap();
    let f = g.frobenius_sq(e).unwrap();
    let grad = g.backward(f).unwrap().get(t).item();
    let h = 1e-5;
    let eval = |tv: f64| {
        let m = crate::matcore::DenseMatrix::new(2, 2, vec![0.0, tv, 0.0, 0.0]).unwrap();
        let e = crate::matcore::mat_exp(&m).unwrap();
        e.data().iter().map(|v| v * v).sum::<f64>()
    };
    let fd = (eval(0.3 + h) - eval(0.3 - h)) / (2.0 * h);
    assert!(relative_error(grad, fd, 1e-12) < 1e-5, "{grad} vs {fd}");
    assert!((grad - 0.6).abs() < 1e-12);
}

#[test]
fn linear_graph_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let w = g.input(rand_array(&mut rng, &[1, 6], -1.0, 1.0));
    let x = g.input(rand_array(&mut rng, &[6, 1], -1.0, 1.0));
    let y = g.matmul(w, x).unwrap();
    let s = g.sum(y).unwrap();
    assert_check(&mut g, s, &[w, x], 1e-9);
}

#[test]
fn softmax_with_temperature_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.input(rand_array(&mut rng, &[3, 4], -2.0, 2.0));
    let y = g.softmax(x, 0.67).unwrap();
    let out = weighted(&mut g, &mut rng, y);
    assert_check(&mut g, out, &[x], 1e-6);
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    type Build = fn(&mut Graph, &mut ChaCha8Rng) -> (NodeId, Vec<NodeId>);
    let cases: Vec<(&str, Build)> = vec![
        ("add", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            let b = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            (g.add(a, b).unwrap(), vec![a, b])
        }),
        ("sub", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            let b = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            (g.sub(a, b).unwrap(), vec![a, b])
        }),
        ("mul", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            let b = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            (g.mul(a, b).unwrap(), vec![a, b])
        }),
        ("mul-scalar", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            let s = g.input(Array::scalar(0.7));
            (g.mul(s, a).unwrap(), vec![a, s])
        }),
        ("add-row-bias", |g, r| {
            let a = g.input(rand_array(r, &[4, 3], -1.0, 1.0));
            let b = g.input(rand_array(r, &[3], -1.0, 1.0));
            (g.add_row_bias(a, b).unwrap(), vec![a, b])
        }),
        ("scale", |g, r| {
            let a = g.input(rand_array(r, &[5], -1.0, 1.0));
            (g.scale(a, -1.3).unwrap(), vec![a])
        }),
        ("matmul", |g, r| {
            let a = g.input(rand_array(r, &[3, 4], -1.0, 1.0));
            let b = g.input(rand_array(r, &[4, 2], -1.0, 1.0));
            (g.matmul(a, b).unwrap(), vec![a, b])
        }),
        ("matmul-large", |g, r| {
            let a = g.input(rand_array(r, &[9, 40], -1.0, 1.0));
            let b = g.input(rand_array(r, &[40, 17], -1.0, 1.0));
            (g.matmul(a, b).unwrap(), vec![a, b])
        }),
        ("matmul-batched", |g, r| {
            let a = g.input(rand_array(r, &[3, 2, 2], -1.0, 1.0));
            let b = g.input(rand_array(r, &[3, 2, 2], -1.0, 1.0));
            (g.matmul(a, b).unwrap(), vec![a, b])
        }),
        ("sum", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            (g.sum(a).unwrap(), vec![a])
        }),
        ("mean", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            (g.mean(a).unwrap(), vec![a])
        }),
        ("sum-rows", |g, r| {
            let a = g.input(rand_array(r, &[3, 4], -1.0, 1.0));
            (g.sum_rows(a).unwrap(), vec![a])
        }),
        ("exp", |g, r| {
            let a = g.input(rand_array(r, &[4], -1.0, 1.0));
            (g.exp(a).unwrap(), vec![a])
        }),
        ("log", |g, r| {
            let a = g.input(rand_array(r, &[4], 0.2, 3.0));
            (g.log(a).unwrap(), vec![a])
        }),
        ("tanh", |g, r| {
            let a = g.input(rand_array(r, &[4], -2.0, 2.0));
            (g.tanh(a).unwrap(), vec![a])
        }),
        ("sigmoid", |g, r| {
            let a = g.input(rand_array(r, &[4], -3.0, 3.0));
            (g.sigmoid(a).unwrap(), vec![a])
        }),
        ("relu", |g, r| {
            let a = g.input(away_from_zero(r, &[6]));
            (g.relu(a).unwrap(), vec![a])
        }),
        ("square", |g, r| {
            let a = g.input(rand_array(r, &[4], -2.0, 2.0));
            (g.square(a).unwrap(), vec![a])
        }),
        ("sqrt", |g, r| {
            let a = g.input(rand_array(r, &[4], 0.2, 3.0));
            (g.sqrt(a).unwrap(), vec![a])
        }),
        ("clamp", |g, r| {
            let a = g.input(away_from_zero(r, &[6]));
            (g.clamp(a, -1.05, 1.05).unwrap(), vec![a])
        }),
        ("softmax", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -2.0, 2.0));
            (g.softmax(a, 1.5).unwrap(), vec![a])
        }),
        ("log-softmax", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -2.0, 2.0));
            (g.log_softmax(a).unwrap(), vec![a])
        }),
        ("reshape", |g, r| {
            let a = g.input(rand_array(r, &[2, 6], -1.0, 1.0));
            (g.reshape(a, &[3, 2, 2]).unwrap(), vec![a])
        }),
        ("concat", |g, r| {
            let a = g.input(rand_array(r, &[2, 3], -1.0, 1.0));
            let b = g.input(rand_array(r, &[2, 2], -1.0, 1.0));
            (g.concat(&[a, b], 1).unwrap(), vec![a, b])
        }),
        ("slice", |g, r| {
            let a = g.input(rand_array(r, &[3, 5], -1.0, 1.0));
            (g.slice(a, 1, 1, 3).unwrap(), vec![a])
        }),
        ("frobenius-sq", |g, r| {
            let a = g.input(rand_array(r, &[3, 3], -1.0, 1.0));
            (g.frobenius_sq(a).unwrap(), vec![a])
        }),
        ("bce-with-logits", |g, r| {
            let z = g.input(rand_array(r, &[2, 4], -3.0, 3.0));
            let x = g.input(rand_array(r, &[2, 4], 0.0, 1.0));
            (g.bce_with_logits(z, x).unwrap(), vec![z, x])
        }),
        ("mat-exp", |g, r| {
            let a = g.input(rand_array(r, &[2, 3, 3], -1.5, 1.5));
            (g.mat_exp(a).unwrap(), vec![a])
        }),
    ];
    for (name, build) in cases {
        let mut g = Graph::new();
        let (y, leaves) = build(&mut g, &mut rng);
        let out = weighted(&mut g, &mut rng, y);
        let report = check_gradients(
            &mut g,
            out,
            &leaves,
            &GradCheckOptions::with_tolerance(1e-5),
        )
        .unwrap();
        assert!(report.passed(), "{name}: {:?}", report.failures());
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Array::vector(vec![0.0, 1.0, -1.0]));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let w = g.input(rand_array(&mut rng, &[8, 5], -1.0, 1.0));
        let x = g.input(rand_array(&mut rng, &[4, 8], -1.0, 1.0));
        let h = g.matmul(x, w).unwrap();
        let t = g.tanh(h).unwrap();
        let s = g.softmax(t, 0.5).unwrap();
        let l = g.log(s).unwrap();
        let out = g.sum(l).unwrap();
        g.backward(out).unwrap().get(w)
    };
    let a = build();
    let b = build();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn batch_gradient_is_sum_of_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w0 = rand_array(&mut rng, &[3, 2], -1.0, 1.0);
    let xs = rand_array(&mut rng, &[5, 3], -1.0, 1.0);
    let loss = |x: Array| {
        let mut g = Graph::new();
        let w = g.input(w0.clone());
        let x = g.input(x);
        let h = g.matmul(x, w).unwrap();
        let t = g.tanh(h).unwrap();
        let sq = g.square(t).unwrap();
        let out = g.sum(sq).unwrap();
        g.backward(out).unwrap().get(w)
    };
    let batch = loss(xs.clone());
    let mut total = Array::zeros(&[3, 2]);
    for r in 0..5 {
        total.add_assign(&loss(Array::matrix(1, 3, xs.row(r).to_vec()).unwrap()));
    }
    for (a, b) in batch.data().iter().zip(total.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn graph_mat_exp_matches_matcore() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_array(&mut rng, &[4, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.input(a.clone());
    let e = g.mat_exp(x).unwrap();
    let want =
        crate::matcore::mat_exp(&crate::matcore::DenseMatrix::new(4, 4, a.into_data()).unwrap())
            .unwrap();
    for (u, v) in g.value(e).data().iter().zip(want.data()) {
        assert!((u - v).abs() < 1e-13);
    }
}
