//! Finite-difference checks for every graph op. Each test builds a small
//! scalar loss from deterministic inputs and compares the analytic gradient
//! against central differences.

use super::*;
use ndarray::{ArrayD, IxDyn};

/// Deterministic quasi-random filler, kept away from 0 so that kinked ops
/// (relu, abs, min, clamp) are probed off their non-differentiable points.
fn filled(shape: &[usize], phase: f64) -> ArrayD<f64> {
    let mut v = ArrayD::zeros(IxDyn(shape));
    for (i, x) in v.iter_mut().enumerate() {
        let s = ((i as f64) * 0.7391 + phase).sin();
        *x = s + 0.31 * s.signum().max(0.0) + 0.17;
    }
    v
}

fn eval<F>(params: &[ArrayD<f64>], build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    g.scalar_value(loss)
}

fn check_grads<F>(params: &[ArrayD<f64>], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);

    let eps = 1e-6;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.wrt(vars[pi], p.shape());
        let a = analytic.as_slice().unwrap();
        for idx in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].as_slice_mut().unwrap()[idx] += eps;
            let fp = eval(&plus, &build);
            let mut minus = params.to_vec();
            minus[pi].as_slice_mut().unwrap()[idx] -= eps;
            let fm = eval(&minus, &build);
            let numeric = (fp - fm) / (2.0 * eps);
            let abs = (numeric - a[idx]).abs();
            let rel = abs / (numeric.abs() + a[idx].abs()).max(1e-8);
            // tiny gradients are dominated by finite-difference roundoff;
            // accept them on absolute error instead
            assert!(
                rel < 1e-6 || abs < 1e-9,
                "param {pi} elem {idx}: numeric {numeric:.10e} vs analytic {:.10e} (rel {rel:.3e})",
                a[idx]
            );
        }
    }
}

#[test]
fn elementwise_arithmetic() {
    let p = [filled(&[2, 3], 0.1), filled(&[2, 3], 1.3)];
    check_grads(&p, |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(v[0], v[1]);
        let m = g.mul(s, d);
        let q = g.div(m, v[1]);
        let t = g.add_scalar(q, 2.0);
        let u = g.mul_scalar(t, 0.7);
        g.sum(u)
    });
}

#[test]
fn activations() {
    let p = [filled(&[7], 0.4)];
    check_grads(&p, |g, v| {
        let a = g.relu(v[0]);
        let b = g.sigmoid(a);
        let c = g.tanh(b);
        let d = g.exp(c);
        let e = g.ln(d);
        let f = g.softplus(e);
        let h = g.abs(f);
        g.mean(h)
    });
}

#[test]
fn minimum_and_clamp() {
    let p = [filled(&[9], 0.2), filled(&[9], 2.1)];
    check_grads(&p, |g, v| {
        let m = g.minimum(v[0], v[1]);
        let c = g.clamp(m, -0.9, 0.9);
        g.sum(c)
    });
}

#[test]
fn gather_and_reshape() {
    let p = [filled(&[3, 4], 0.5)];
    check_grads(&p, |g, v| {
        let f = g.flatten(v[0]);
        let picked = g.gather(f, vec![0, 5, 5, 11, 3]);
        let sq = g.mul(picked, picked);
        g.sum(sq)
    });
}

#[test]
fn slice_channel_grad() {
    let p = [filled(&[2, 3, 2, 2], 0.8)];
    check_grads(&p, |g, v| {
        let c1 = g.slice_channel(v[0], 1);
        let c2 = g.slice_channel(v[0], 2);
        let m = g.mul(c1, c2);
        g.sum(m)
    });
}

#[test]
fn conv2d_grad_stride1() {
    let p = [filled(&[1, 2, 5, 5], 0.3), filled(&[3, 2, 3, 3], 1.1), filled(&[3], 2.2)];
    check_grads(&p, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1);
        let s = g.sigmoid(y);
        g.sum(s)
    });
}

#[test]
fn conv2d_grad_stride2() {
    let p = [filled(&[2, 2, 6, 6], 0.9), filled(&[2, 2, 3, 3], 1.7), filled(&[2], 0.4)];
    check_grads(&p, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1);
        let t = g.tanh(y);
        g.mean(t)
    });
}

#[test]
fn conv_transpose2d_grad() {
    // (Ci, Co, k, k) weights, k=4 s=2 p=1 doubles the spatial size
    let p = [filled(&[1, 2, 3, 3], 0.6), filled(&[2, 3, 4, 4], 1.9), filled(&[3], 0.2)];
    check_grads(&p, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], v[2], 2, 1);
        let s = g.sigmoid(y);
        g.mean(s)
    });
}

#[test]
fn conv_transpose2d_shape() {
    let mut g = Graph::new();
    let x = g.input(filled(&[1, 1, 14, 14], 0.0));
    let w = g.input(filled(&[1, 1, 4, 4], 0.5));
    let b = g.input(ArrayD::zeros(IxDyn(&[1])));
    let y = g.conv_transpose2d(x, w, b, 2, 1);
    assert_eq!(g.value(y).shape(), &[1, 1, 28, 28]);
}

#[test]
fn max_pool2_grad() {
    let p = [filled(&[2, 2, 4, 4], 0.25)];
    check_grads(&p, |g, v| {
        let y = g.max_pool2(v[0]);
        let s = g.mul(y, y);
        g.sum(s)
    });
}

#[test]
fn linear_grad() {
    let p = [filled(&[4, 5], 0.3), filled(&[3, 5], 1.2), filled(&[3], 2.5)];
    check_grads(&p, |g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        let r = g.relu(y);
        g.sum(r)
    });
}

#[test]
fn spatial_mean_grad() {
    let p = [filled(&[2, 3, 4, 4], 0.7)];
    check_grads(&p, |g, v| {
        let y = g.spatial_mean(v[0]);
        let s = g.mul(y, y);
        g.sum(s)
    });
}

#[test]
fn minmax_normalize_grad() {
    let p = [filled(&[2, 1, 3, 3], 0.45)];
    check_grads(&p, |g, v| {
        let y = g.minmax_normalize(v[0]);
        let w = g.add_scalar(y, 0.5);
        let s = g.mul(w, w);
        g.sum(s)
    });
}

#[test]
fn minmax_normalize_values() {
    let mut g = Graph::new();
    let raw = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 5.0]).unwrap();
    let x = g.input(raw);
    let y = g.minmax_normalize(x);
    let out: Vec<f64> = g.value(y).iter().copied().collect();
    assert_eq!(out, vec![0.0, 0.25, 0.5, 1.0]);

    let constant = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 3.5);
    let c = g.input(constant);
    let yc = g.minmax_normalize(c);
    assert!(g.value(yc).iter().all(|&v| v == 0.0));
}

#[test]
fn mul_broadcast_channel_grad() {
    let p = [filled(&[2, 3, 2, 2], 0.35), filled(&[2, 1, 2, 2], 1.4)];
    check_grads(&p, |g, v| {
        let y = g.mul_broadcast_channel(v[0], v[1]);
        let s = g.sigmoid(y);
        g.sum(s)
    });
}

#[test]
fn cross_entropy_grad() {
    let p = [filled(&[3, 4], 0.55)];
    check_grads(&p, |g, v| g.cross_entropy_logits(v[0], vec![1, 3, 0]));
}

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    let mut g = Graph::new();
    let z = g.input(ArrayD::zeros(IxDyn(&[1, 2])));
    let l = g.cross_entropy_logits(z, vec![0]);
    assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn composite_small_network() {
    // conv -> relu -> pool -> conv -> spatial mean -> cross entropy,
    // exercising several ops chained together.
    let p = [
        filled(&[2, 1, 6, 6], 0.15),
        filled(&[2, 1, 3, 3], 1.05),
        filled(&[2], 0.5),
        filled(&[3, 2, 1, 1], 1.85),
        filled(&[3], 2.6),
    ];
    check_grads(&p, |g, v| {
        let c1 = g.conv2d(v[0], v[1], v[2], 1, 1);
        let r1 = g.relu(c1);
        let p1 = g.max_pool2(r1);
        let c2 = g.conv2d(p1, v[3], v[4], 1, 0);
        let logits = g.spatial_mean(c2);
        g.cross_entropy_logits(logits, vec![0, 2])
    });
}

#[test]
fn constants_do_not_collect_gradients() {
    let mut g = Graph::new();
    let x = g.input(filled(&[4], 0.0));
    let w = g.param(filled(&[4], 1.0));
    let y = g.mul(x, w);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}
