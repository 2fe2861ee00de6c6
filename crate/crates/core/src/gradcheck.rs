//! Central finite-difference gradient checking used by the verification
//! suites.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function of several tensors.
pub fn finite_diff_grads<F>(mut f: F, inputs: &[ArrayD<f64>], eps: f64) -> Vec<ArrayD<f64>>
where
    F: FnMut(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = ArrayD::<f64>::zeros(inputs[i].raw_dim());
        for pos in 0..inputs[i].len() {
            let slice = work[i].as_slice_mut().expect("contiguous");
            let orig = slice[pos];
            slice[pos] = orig + eps;
            let plus = f(&work);
            work[i].as_slice_mut().expect("contiguous")[pos] = orig - eps;
            let minus = f(&work);
            work[i].as_slice_mut().expect("contiguous")[pos] = orig;
            g.as_slice_mut().expect("contiguous")[pos] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between analytic and numeric gradients. Entries where
/// both are below `abs_floor` are compared absolutely.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, abs_floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let scale = a.abs().max(n.abs());
        let err = if scale < abs_floor { (a - n).abs() } else { (a - n).abs() / scale };
        worst = worst.max(err);
    }
    worst
}
