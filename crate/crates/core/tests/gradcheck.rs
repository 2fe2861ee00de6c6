//! Central finite-difference checks for every differentiable primitive, a
//! multi-layer composite, and the straight-through estimator's exact clip
//! region.

use bpt_core::autodiff::{BinarizeMode, Graph, Var};
use bpt_core::gradcheck::{finite_diff_grads, max_rel_err};
use ndarray::{arr0, Array1, Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.5..1.5))
}

/// Random values bounded away from zero (for |·| and relu kinks).
fn rand_arr_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        sign * rng.random_range(0.2..1.2)
    })
}

/// Check d(scalar loss)/d(inputs) for a graph builder against central
/// differences.
fn check<F>(name: &str, inputs: &[ArrayD<f64>], build: F)
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = build(&g, &vars);
    g.backward(&loss).unwrap();
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim())))
        .collect();

    let numeric = finite_diff_grads(
        |xs: &[ArrayD<f64>]| {
            let g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
            build(&g, &vars).scalar_value()
        },
        inputs,
        EPS,
    );
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let err = max_rel_err(a, n, ABS_FLOOR);
        assert!(err <= TOL, "{name}: input {i} worst rel err {err:.3e}");
    }
}

/// Random projection to a scalar so gradient errors cannot cancel.
fn project(g: &Graph, x: &Var, rng: &mut ChaCha8Rng) -> Var {
    let r = ArrayD::from_shape_fn(IxDyn(&x.shape()), |_| rng.random_range(-1.0..1.0));
    x.mul(&g.constant(r)).unwrap().sum_all()
}

#[test]
fn elementwise_and_scalar_ops() {
    let mut r = rng(1);
    let a = rand_arr(&mut r, &[3, 4]);
    let b = rand_arr(&mut r, &[3, 4]);
    let mut pr = rng(101);
    check("add", &[a.clone(), b.clone()], |g, v| {
        project(g, &v[0].add(&v[1]).unwrap(), &mut pr.clone())
    });
    check("sub", &[a.clone(), b.clone()], |g, v| {
        project(g, &v[0].sub(&v[1]).unwrap(), &mut pr.clone())
    });
    check("mul", &[a.clone(), b.clone()], |g, v| {
        project(g, &v[0].mul(&v[1]).unwrap(), &mut pr.clone())
    });
    check("add_scalar+scale", &[a.clone()], |g, v| {
        project(g, &v[0].add_scalar(0.7).scale(-1.3), &mut pr.clone())
    });
}

#[test]
fn matmul_linear_transpose() {
    let mut r = rng(2);
    let a = rand_arr(&mut r, &[3, 5]);
    let b = rand_arr(&mut r, &[5, 2]);
    let w = rand_arr(&mut r, &[4, 5]);
    let bias = rand_arr(&mut r, &[4]);
    let mut pr = rng(102);
    check("matmul", &[a.clone(), b.clone()], |g, v| {
        project(g, &v[0].matmul(&v[1]).unwrap(), &mut pr.clone())
    });
    check("linear", &[a.clone(), w.clone(), bias.clone()], |g, v| {
        project(g, &v[0].linear(&v[1], Some(&v[2])).unwrap(), &mut pr.clone())
    });
    check("transpose2", &[a.clone()], |g, v| {
        project(g, &v[0].transpose2().unwrap(), &mut pr.clone())
    });
}

#[test]
fn activations_and_normalizers() {
    let mut r = rng(3);
    let a = rand_arr_off_zero(&mut r, &[4, 6]);
    let pos = a.mapv(|v| v.abs() + 0.1);
    let vec1 = rand_arr(&mut r, &[7]);
    let mut pr = rng(103);
    check("relu", &[a.clone()], |g, v| project(g, &v[0].relu(), &mut pr.clone()));
    check("softmax", &[a.clone()], |g, v| {
        project(g, &v[0].softmax().unwrap(), &mut pr.clone())
    });
    check("log_softmax", &[a.clone()], |g, v| {
        project(g, &v[0].log_softmax().unwrap(), &mut pr.clone())
    });
    check("l1_normalize_axis0", &[pos.clone()], |g, v| {
        project(g, &v[0].l1_normalize_axis(0, 1e-9).unwrap(), &mut pr.clone())
    });
    check("l1_normalize_axis1", &[pos], |g, v| {
        project(g, &v[0].l1_normalize_axis(1, 1e-9).unwrap(), &mut pr.clone())
    });
    check("l2_normalize", &[vec1], |g, v| {
        project(g, &v[0].l2_normalize().unwrap(), &mut pr.clone())
    });
}

#[test]
fn reductions_concat_gather_reshape() {
    let mut r = rng(4);
    let a = rand_arr(&mut r, &[4, 6]);
    let t3 = rand_arr(&mut r, &[3, 4, 5]);
    let b = rand_arr(&mut r, &[4, 3]);
    let v1 = rand_arr(&mut r, &[5]);
    let v2 = rand_arr(&mut r, &[6]);
    let mut pr = rng(104);
    check("max_axis0", &[a.clone()], |g, v| {
        project(g, &v[0].max_axis(0).unwrap(), &mut pr.clone())
    });
    check("max_axis1_rank3", &[t3.clone()], |g, v| {
        project(g, &v[0].max_axis(1).unwrap(), &mut pr.clone())
    });
    check("mean_axis", &[a.clone()], |g, v| {
        project(g, &v[0].mean_axis(0).unwrap(), &mut pr.clone())
    });
    check("sum_all", &[a.clone()], |g, v| v[0].sum_all());
    check("concat", &[a.clone(), b.clone()], |g, v| {
        project(g, &g.concat(&[v[0].clone(), v[1].clone()], 1).unwrap(), &mut pr.clone())
    });
    check("outer_sub", &[v1, v2], |g, v| {
        project(g, &v[0].outer_sub(&v[1]).unwrap(), &mut pr.clone())
    });
    check("gather_rows", &[a.clone()], |g, v| {
        project(g, &v[0].gather_rows(&[0, 2, 2, 3, 1, 0], &[3, 2]).unwrap(), &mut pr.clone())
    });
    check("reshape", &[t3], |g, v| {
        project(g, &v[0].reshape(&[12, 5]).unwrap(), &mut pr.clone())
    });
}

#[test]
fn scale_factor_ops() {
    let mut r = rng(5);
    let w = rand_arr_off_zero(&mut r, &[4, 6]);
    let x = rand_arr(&mut r, &[3, 5]);
    let v = rand_arr(&mut r, &[5]);
    let mut pr = rng(105);
    check("center_rows", &[w.clone()], |g, vv| {
        project(g, &vv[0].center_rows().unwrap(), &mut pr.clone())
    });
    check("row_abs_mean", &[w.clone()], |g, vv| {
        project(g, &vv[0].row_abs_mean().unwrap(), &mut pr.clone())
    });
    check("abs_mean_all", &[w], |_, vv| vv[0].abs_mean_all());
    check("mul_feature_scale", &[x.clone(), v], |g, vv| {
        project(g, &vv[0].mul_feature_scale(&vv[1]).unwrap(), &mut pr.clone())
    });
    check("mul_scalar_node", &[x, arr0(0.37).into_dyn()], |g, vv| {
        project(g, &vv[0].mul_scalar_node(&vv[1]).unwrap(), &mut pr.clone())
    });
}

#[test]
fn batchnorm_train_and_eval() {
    let mut r = rng(6);
    let x = rand_arr(&mut r, &[6, 4]);
    let gamma = rand_arr_off_zero(&mut r, &[4]);
    let beta = rand_arr(&mut r, &[4]);
    let mut pr = rng(106);
    check("batchnorm_train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = v[0].batchnorm(&v[1], &v[2], None, 1e-5).unwrap();
        project(g, &y, &mut pr.clone())
    });
    let mean = Array1::from_vec(vec![0.3, -0.2, 0.1, 0.5]);
    let var = Array1::from_vec(vec![1.2, 0.8, 2.0, 0.5]);
    check("batchnorm_eval", &[x, gamma, beta], |g, v| {
        let (y, _) = v[0].batchnorm(&v[1], &v[2], Some((&mean, &var)), 1e-5).unwrap();
        project(g, &y, &mut pr.clone())
    });
}

#[test]
fn three_layer_composite_mlp() {
    let mut r = rng(7);
    let x = rand_arr(&mut r, &[5, 6]);
    let w1 = rand_arr(&mut r, &[8, 6]);
    let g1 = rand_arr_off_zero(&mut r, &[8]);
    let b1 = rand_arr(&mut r, &[8]);
    let w2 = rand_arr(&mut r, &[7, 8]);
    let g2 = rand_arr_off_zero(&mut r, &[7]);
    let b2 = rand_arr(&mut r, &[7]);
    let w3 = rand_arr(&mut r, &[3, 7]);
    let inputs = vec![x, w1, g1, b1, w2, g2, b2, w3];
    let mut pr = rng(107);
    check("mlp3", &inputs, |g, v| {
        let h1 = v[0].linear(&v[1], None).unwrap();
        let (h1, _) = h1.batchnorm(&v[2], &v[3], None, 1e-5).unwrap();
        let h1 = h1.relu();
        let h2 = h1.linear(&v[4], None).unwrap();
        let (h2, _) = h2.batchnorm(&v[5], &v[6], None, 1e-5).unwrap();
        let h2 = h2.relu();
        let out = h2.linear(&v[7], None).unwrap();
        project(g, &out, &mut pr.clone())
    });
}

#[test]
fn ste_clip_region_is_exact() {
    // forward(0.7) → 1.0 with upstream 2.0 passing; forward(−3) blocks
    let g = Graph::new();
    let x = g.leaf(ndarray::arr1(&[0.7, -3.0, 1.0, -1.0, 1.0 + 1e-12]).into_dyn());
    let y = x.ste_binarize(BinarizeMode::Signed).unwrap();
    assert_eq!(
        y.value(),
        ndarray::arr1(&[1.0, -1.0, 1.0, -1.0, 1.0]).into_dyn()
    );
    let loss = y.sum_all().scale(2.0);
    g.backward(&loss).unwrap();
    assert_eq!(
        x.grad().unwrap(),
        ndarray::arr1(&[2.0, 0.0, 2.0, 2.0, 0.0]).into_dyn()
    );
}

/// Wire the dense-expansion binary linear layer three ways to separate its
/// gradient paths:
///   A) training wiring (STE through the sign, analytic through α and the
///      row-mean centering),
///   B) frozen-bits wiring (sign output as a constant; only the smooth α path
///      carries gradient),
///   C) frozen-α wiring (only the STE path carries gradient).
/// Central differences of the true function see the sign as locally constant,
/// so FD must match B; path additivity demands A = B + C.
#[test]
fn binary_linear_composite_fd_matches_smooth_path() {
    let mut r = rng(8);
    let w0 = ArrayD::from_shape_fn(IxDyn(&[4, 6]), |_| r.random_range(-0.9..0.9));
    let a0 = rand_arr(&mut r, &[3, 6]);
    let proj = ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| r.random_range(-1.0..1.0));

    let forward = |w: &ArrayD<f64>, wiring: u8| -> (f64, Option<ArrayD<f64>>) {
        let g = Graph::new();
        let wv = g.leaf(w.clone());
        let a = g.constant(a0.clone());
        let centered = wv.center_rows().unwrap();
        let bits = match wiring {
            1 => g.constant(centered.value().mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 })),
            _ => centered.ste_binarize(BinarizeMode::Signed).unwrap(),
        };
        let alpha = match wiring {
            2 => g.constant(wv.row_abs_mean().unwrap().value()),
            _ => wv.row_abs_mean().unwrap(),
        };
        let ab = a.ste_binarize(BinarizeMode::Signed).unwrap();
        let beta = a.abs_mean_all();
        let y = ab
            .linear(&bits, None)
            .unwrap()
            .mul_feature_scale(&alpha)
            .unwrap()
            .mul_scalar_node(&beta)
            .unwrap();
        let loss = y.mul(&g.constant(proj.clone())).unwrap().sum_all();
        g.backward(&loss).unwrap();
        (loss.scalar_value(), wv.grad())
    };

    let (_, grad_full) = forward(&w0, 0);
    let (_, grad_smooth) = forward(&w0, 1);
    let (_, grad_ste) = forward(&w0, 2);
    let grad_full = grad_full.unwrap();
    let grad_smooth = grad_smooth.unwrap();
    let grad_ste = grad_ste.unwrap();

    // path additivity: training gradient = smooth path + STE path
    let sum = &grad_smooth + &grad_ste;
    assert!(max_rel_err(&grad_full, &sum, 1e-12) < 1e-12);

    // FD of the true composite sees only the smooth path (sign is flat a.e.)
    let fd = finite_diff_grads(|xs| forward(&xs[0], 0).0, &[w0.clone()], EPS);
    let err = max_rel_err(&grad_smooth, &fd[0], 1e-6);
    assert!(err < 1e-3, "smooth-path FD mismatch {err:.3e}");

    // pushing a row's centered weights outside |x| ≤ 1 zeroes its STE path
    let mut w_sat = w0.clone();
    for j in 0..6 {
        w_sat[[0, j]] = if j % 2 == 0 { 5.0 } else { -5.0 };
    }
    let (_, grad_sat) = forward(&w_sat, 2);
    let grad_sat = grad_sat.unwrap();
    for j in 0..6 {
        assert_eq!(grad_sat[[0, j]], 0.0, "saturated row must have zero STE gradient");
    }
}
