//! Gradient checks for every op against central finite differences.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::numcheck::{assert_grad_close, finite_diff_grad};
use super::{Graph, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0f32..1.0))
}

/// Random array bounded away from zero (for kink-free checks of |.|, min, max).
fn rand_arr_offset(shape: &[usize], rng: &mut ChaCha8Rng, offset: f32) -> ArrayD<f32> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let x: f32 = rng.random_range(0.2f32..1.0);
        let s: bool = rng.random();
        (if s { x } else { -x }) + offset
    })
}

/// Deterministic readout weights so the scalar loss exercises every
/// output element differently.
fn readout(g: &mut Graph, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = ArrayD::from_shape_vec(
        IxDyn(&shape),
        (0..n).map(|i| 0.3 + 0.1 * (i as f32 % 7.0) - 0.05 * (i as f32 % 3.0)).collect(),
    )
    .unwrap();
    let wv = g.constant(w);
    let prod = g.mul(y, wv);
    g.sum_all(prod)
}

fn check_unary(name: &str, x: ArrayD<f32>, op: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = op(&mut g, xv);
    let loss = readout(&mut g, y);
    let grads = g.backward(loss);
    let analytic = grads.wrt(xv).expect("input grad");

    let numeric = finite_diff_grad(
        |x| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = op(&mut g, xv);
            let loss = readout(&mut g, y);
            g.scalar_value(loss) as f64
        },
        &x,
        1e-2,
    );
    assert_grad_close(analytic, &numeric, tol, name);
}

fn check_binary(
    name: &str,
    a: ArrayD<f32>,
    b: ArrayD<f32>,
    op: impl Fn(&mut Graph, Var, Var) -> Var,
    tol: f64,
) {
    for side in 0..2 {
        let (fixed, free) = if side == 0 { (b.clone(), a.clone()) } else { (a.clone(), b.clone()) };
        let eval = |x: &ArrayD<f32>| -> (f64, Option<ArrayD<f32>>) {
            let mut g = Graph::new();
            let (av, bv) = if side == 0 {
                (g.input(x.clone()), g.constant(fixed.clone()))
            } else {
                (g.constant(fixed.clone()), g.input(x.clone()))
            };
            let free_var = if side == 0 { av } else { bv };
            let y = op(&mut g, av, bv);
            let loss = readout(&mut g, y);
            let value = g.scalar_value(loss) as f64;
            let grads = g.backward(loss);
            (value, grads.wrt(free_var).cloned())
        };
        let (_, analytic) = eval(&free);
        let analytic = analytic.expect("free side grad");
        let numeric = finite_diff_grad(|x| eval(x).0, &free, 1e-2);
        assert_grad_close(&analytic, &numeric, tol, &format!("{name} side {side}"));
    }
}

#[test]
fn grad_add_sub_mul_div() {
    let mut r = rng(1);
    let a = rand_arr(&[3, 4], &mut r);
    let b = rand_arr_offset(&[3, 4], &mut r, 0.0); // denominators away from 0
    check_binary("add", a.clone(), b.clone(), |g, a, b| g.add(a, b), 1e-3);
    check_binary("sub", a.clone(), b.clone(), |g, a, b| g.sub(a, b), 1e-3);
    check_binary("mul", a.clone(), b.clone(), |g, a, b| g.mul(a, b), 1e-3);
    check_binary("div", a, b, |g, a, b| g.div(a, b), 5e-3);
}

#[test]
fn grad_min_max() {
    let mut r = rng(2);
    // keep |a-b| > 0.1 so finite differences do not cross the kink
    let a = rand_arr(&[4, 3], &mut r);
    let b = a.mapv(|x| x + if x > 0.0 { 0.5 } else { -0.5 });
    check_binary("minimum", a.clone(), b.clone(), |g, a, b| g.minimum(a, b), 1e-3);
    check_binary("maximum", a, b, |g, a, b| g.maximum(a, b), 1e-3);
}

#[test]
fn grad_scalar_ops() {
    let mut r = rng(3);
    let x = rand_arr(&[2, 5], &mut r);
    check_unary("add_scalar", x.clone(), |g, v| g.add_scalar(v, 0.7), 1e-3);
    check_unary("mul_scalar", x.clone(), |g, v| g.mul_scalar(v, -1.3), 1e-3);
    check_unary("neg", x, |g, v| g.neg(v), 1e-3);
}

#[test]
fn grad_activations() {
    let mut r = rng(4);
    let x = rand_arr_offset(&[3, 4], &mut r, 0.0);
    check_unary("relu", x.clone(), |g, v| g.relu(v), 1e-3);
    check_unary("sigmoid", rand_arr(&[3, 4], &mut r), |g, v| g.sigmoid(v), 1e-3);
    check_unary("abs", x, |g, v| g.abs(v), 1e-3);
    let pos = rand_arr_offset(&[3, 4], &mut r, 0.0).mapv(|x| x.abs() + 0.3);
    check_unary("sqrt", pos, |g, v| g.sqrt(v), 2e-3);
}

#[test]
fn grad_shape_ops() {
    let mut r = rng(5);
    let x = rand_arr(&[4, 6], &mut r);
    check_unary("reshape", x.clone(), |g, v| g.reshape(v, &[2, 12]), 1e-3);
    check_unary("slice_rows", x.clone(), |g, v| g.slice_rows(v, 1, 3), 1e-3);
    check_unary("slice_cols", x.clone(), |g, v| g.slice_cols(v, 2, 5), 1e-3);
    check_unary("gather_rows", x.clone(), |g, v| g.gather_rows(v, &[3, 0, 0, 2]), 1e-3);
    let x3 = rand_arr(&[3, 2, 4], &mut r);
    check_unary("channels_to_rows", x3, |g, v| g.channels_to_rows(v), 1e-3);
    check_unary("rows_to_channels", x.clone(), |g, v| g.rows_to_channels(v, &[2, 2]), 1e-3);

    // concat: both parents receive distinct slices
    let a = rand_arr(&[2, 3], &mut r);
    let b = rand_arr(&[4, 3], &mut r);
    check_binary("concat_rows", a, b, |g, a, b| g.concat_rows(&[a, b]), 1e-3);
    let a = rand_arr(&[3, 2], &mut r);
    let b = rand_arr(&[3, 5], &mut r);
    check_binary("concat_cols", a, b, |g, a, b| g.concat_cols(&[a, b]), 1e-3);
}

#[test]
fn grad_reductions() {
    let mut r = rng(6);
    let x = rand_arr(&[3, 5], &mut r);
    check_unary("sum_all", x.clone(), |g, v| {
        let s = g.sum_all(v);
        g.reshape(s, &[1])
    }, 1e-3);
    check_unary("mean_all", x.clone(), |g, v| {
        let s = g.mean_all(v);
        g.reshape(s, &[1])
    }, 1e-3);
    check_unary("sum_rows", x, |g, v| g.sum_rows(v), 1e-3);
}

#[test]
fn grad_matmul_bias() {
    let mut r = rng(7);
    let a = rand_arr(&[3, 4], &mut r);
    let b = rand_arr(&[4, 5], &mut r);
    check_binary("matmul", a, b, |g, a, b| g.matmul(a, b), 2e-3);
    let x = rand_arr(&[4, 3], &mut r);
    let bias = rand_arr(&[3], &mut r);
    check_binary("add_bias", x, bias, |g, x, b| g.add_bias(x, b), 1e-3);
}

#[test]
fn grad_layer_norm() {
    let mut r = rng(8);
    let x = rand_arr(&[3, 6], &mut r);
    let gamma = rand_arr(&[6], &mut r).mapv(|v| v + 1.5);
    let beta = rand_arr(&[6], &mut r);

    // w.r.t. x
    check_unary("layer_norm x", x.clone(), {
        let gamma = gamma.clone();
        let beta = beta.clone();
        move |g, v| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            g.layer_norm(v, ga, be, 1e-5)
        }
    }, 5e-3);

    // w.r.t. gamma and beta
    check_unary("layer_norm gamma", gamma.clone(), {
        let x = x.clone();
        let beta = beta.clone();
        move |g, v| {
            let xv = g.constant(x.clone());
            let be = g.constant(beta.clone());
            g.layer_norm(xv, v, be, 1e-5)
        }
    }, 2e-3);
    check_unary("layer_norm beta", beta, {
        move |g, v| {
            let xv = g.constant(x.clone());
            let ga = g.constant(gamma.clone());
            g.layer_norm(xv, ga, v, 1e-5)
        }
    }, 1e-3);
}

#[test]
fn grad_attend() {
    let mut r = rng(9);
    let q = rand_arr(&[4, 3], &mut r);
    let k = rand_arr(&[5, 3], &mut r);
    let v = rand_arr(&[5, 3], &mut r);
    let scale = 1.0 / (3.0f32).sqrt();

    for (name, which) in [("q", 0usize), ("k", 1), ("v", 2)] {
        let (q, k, v) = (q.clone(), k.clone(), v.clone());
        let free0 = [&q, &k, &v][which].clone();
        let eval = move |x: &ArrayD<f32>| -> (f64, Option<ArrayD<f32>>) {
            let mut g = Graph::new();
            let mk = |g: &mut Graph, arr: &ArrayD<f32>, free: bool| {
                if free { g.input(arr.clone()) } else { g.constant(arr.clone()) }
            };
            let qv = mk(&mut g, if which == 0 { x } else { &q }, which == 0);
            let kv = mk(&mut g, if which == 1 { x } else { &k }, which == 1);
            let vv = mk(&mut g, if which == 2 { x } else { &v }, which == 2);
            let free_var = [qv, kv, vv][which];
            let y = g.attend(qv, kv, vv, scale);
            let loss = readout(&mut g, y);
            let value = g.scalar_value(loss) as f64;
            let grads = g.backward(loss);
            (value, grads.wrt(free_var).cloned())
        };
        let (_, analytic) = eval(&free0);
        let analytic = analytic.expect("grad");
        let numeric = finite_diff_grad(|x| eval(x).0, &free0, 1e-2);
        assert_grad_close(&analytic, &numeric, 5e-3, &format!("attend d{name}"));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    use super::nn_ops::softmax_rows_raw;
    let mut r = rng(10);
    let scores = ndarray::Array2::from_shape_fn((6, 9), |_| r.random_range(-3.0f32..3.0));
    let attn = softmax_rows_raw(&scores);
    for row in attn.rows() {
        let s: f32 = row.sum();
        assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
    }
}

#[test]
fn grad_cross_entropy() {
    let mut r = rng(11);
    let logits = rand_arr(&[5, 4], &mut r);
    let targets = vec![0usize, 3, 1, 3, 2];
    let weights = vec![1.0f32, 1.0, 1.0, 0.1];

    let eval = |x: &ArrayD<f32>| -> (f64, Option<ArrayD<f32>>) {
        let mut g = Graph::new();
        let lv = g.input(x.clone());
        let loss = g.cross_entropy(lv, &targets, &weights);
        let value = g.scalar_value(loss) as f64;
        let grads = g.backward(loss);
        (value, grads.wrt(lv).cloned())
    };
    let (_, analytic) = eval(&logits);
    let numeric = finite_diff_grad(|x| eval(x).0, &logits, 1e-2);
    assert_grad_close(&analytic.unwrap(), &numeric, 2e-3, "cross_entropy");
}

#[test]
fn conv2d_matches_reference_and_grads() {
    let mut r = rng(12);
    let x = rand_arr(&[2, 7, 6], &mut r);
    let w = rand_arr(&[3, 2, 3, 3], &mut r);
    let b = rand_arr(&[3], &mut r);

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(xv, wv, bv, 2, 1);
    let expected = super::conv2d_reference(&x, &w, &b, 2, 1);
    assert_eq!(g.shape(y), expected.shape());
    let max_diff = g
        .value(y)
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff < 1e-4, "conv2d forward mismatch {max_diff}");

    let loss = readout(&mut g, y);
    let grads = g.backward(loss);
    for (free, name) in [(xv, "x"), (wv, "w"), (bv, "b")] {
        let analytic = grads.wrt(free).unwrap().clone();
        let arrs = [&x, &w, &b];
        let which = match name {
            "x" => 0,
            "w" => 1,
            _ => 2,
        };
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let xs = if which == 0 { probe } else { &x };
                let ws = if which == 1 { probe } else { &w };
                let bs = if which == 2 { probe } else { &b };
                let (xv, wv, bv) = (g.input(xs.clone()), g.input(ws.clone()), g.input(bs.clone()));
                let y = g.conv2d(xv, wv, bv, 2, 1);
                let loss = readout(&mut g, y);
                g.scalar_value(loss) as f64
            },
            arrs[which],
            1e-2,
        );
        assert_grad_close(&analytic, &numeric, 5e-3, &format!("conv2d d{name}"));
    }
}

#[test]
fn conv3d_matches_reference_and_grads() {
    let mut r = rng(13);
    let x = rand_arr(&[2, 3, 5, 4], &mut r);
    let w = rand_arr(&[2, 2, 3, 3, 3], &mut r);
    let b = rand_arr(&[2], &mut r);

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv3d(xv, wv, bv);
    let expected = super::conv3d_reference(&x, &w, &b);
    assert_eq!(g.shape(y), expected.shape());
    let max_diff = g
        .value(y)
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff < 1e-4, "conv3d forward mismatch {max_diff}");

    let loss = readout(&mut g, y);
    let grads = g.backward(loss);
    let analytic_x = grads.wrt(xv).unwrap().clone();
    let numeric_x = finite_diff_grad(
        |probe| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(probe.clone()), g.input(w.clone()), g.input(b.clone()));
            let y = g.conv3d(xv, wv, bv);
            let loss = readout(&mut g, y);
            g.scalar_value(loss) as f64
        },
        &x,
        1e-2,
    );
    assert_grad_close(&analytic_x, &numeric_x, 5e-3, "conv3d dx");
    let analytic_w = grads.wrt(wv).unwrap().clone();
    let numeric_w = finite_diff_grad(
        |probe| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(x.clone()), g.input(probe.clone()), g.input(b.clone()));
            let y = g.conv3d(xv, wv, bv);
            let loss = readout(&mut g, y);
            g.scalar_value(loss) as f64
        },
        &w,
        1e-2,
    );
    assert_grad_close(&analytic_w, &numeric_w, 5e-3, "conv3d dw");
}

#[test]
fn param_binding_dedupes_and_accumulates() {
    use super::{Binder, ParamStore};
    let mut store = ParamStore::new();
    let w = store.add("w", ndarray::arr2(&[[1.0f32, 2.0], [3.0, 4.0]]).into_dyn());

    let mut g = Graph::new();
    let binder = Binder::trainable(&store);
    let w1 = g.bind(&binder, w);
    let w2 = g.bind(&binder, w);
    assert_eq!(w1, w2, "same param binds to same node");

    // Using the param twice must accumulate both contributions.
    let a = g.mul_scalar(w1, 2.0);
    let b = g.mul_scalar(w2, 3.0);
    let s = g.add(a, b);
    let loss = g.sum_all(s);
    let grads = g.backward(loss);
    g.accumulate_param_grads(&grads, &mut store, 1.0);
    for &v in store.grad(w).iter() {
        assert!((v - 5.0).abs() < 1e-6, "expected 5.0 got {v}");
    }
}

#[test]
fn no_grad_graph_records_nothing() {
    let mut g = Graph::no_grad();
    let x = g.input(ndarray::arr2(&[[1.0f32, 2.0]]).into_dyn());
    let y = g.relu(x);
    assert!(!g.requires_grad(y));
}

#[test]
fn frozen_binder_produces_constants() {
    use super::{Binder, ParamStore};
    let mut store = ParamStore::new();
    let w = store.add("w", ndarray::arr1(&[1.0f32, -2.0]).into_dyn());
    let mut g = Graph::new();
    let wv = g.bind(&Binder::frozen(&store), w);
    let y = g.relu(wv);
    assert!(!g.requires_grad(y), "frozen params must not require grad");
}
