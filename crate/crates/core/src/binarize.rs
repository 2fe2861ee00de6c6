//! Binarization functions, scale factors, and the straight-through estimator.
//!
//! Weights binarize as `sign(W − row_mean(W))` with a per-output-row scale
//! α = mean|W_row|; activations binarize with a single per-tensor scale
//! β = mean|A|, through `sign` for signed tensors or a 0.5 threshold for
//! non-negative ones. A binary linear layer output is then
//! `α ⊙ β ⊙ (bits_W ⊛ bits_A)` with the bit product computed exactly by the
//! xnor/popcount kernels.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis};

use crate::bitops::{self, BitMatrix, Convention, LaneWidth, DEFAULT_LANE_WIDTH};
use crate::error::{Error, Result};

/// Packed bits plus the scale restoring output amplitude: one α per row for
/// weights, a single broadcast β for activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBinary {
    pub bits: BitMatrix,
    pub scale: Vec<f64>,
}

impl ScaledBinary {
    /// Dense expansion: `scale[i] * value(i, j)` (β broadcasts when the scale
    /// vector has a single entry).
    pub fn to_dense(&self) -> Array2<f64> {
        let broadcast = self.scale.len() == 1;
        Array2::from_shape_fn((self.bits.rows(), self.bits.cols()), |(i, j)| {
            let s = if broadcast { self.scale[0] } else { self.scale[i] };
            s * self.bits.value(i, j)
        })
    }
}

/// Full-precision shadow weights, binarized on every forward pass during
/// training. Row means are kept in sync with the shadow so binarization never
/// reads a stale centering term.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWeight {
    shadow: Array2<f64>,
    row_means: Array1<f64>,
}

impl LatentWeight {
    pub fn new(shadow: Array2<f64>) -> Self {
        let row_means = shadow.mean_axis(Axis(1)).expect("weight matrix has columns");
        LatentWeight { shadow, row_means }
    }

    pub fn shadow(&self) -> &Array2<f64> {
        &self.shadow
    }

    pub fn row_means(&self) -> &Array1<f64> {
        &self.row_means
    }

    pub fn out_features(&self) -> usize {
        self.shadow.nrows()
    }

    pub fn in_features(&self) -> usize {
        self.shadow.ncols()
    }

    /// Mutate the shadow and refresh the cached row means.
    pub fn update<F: FnOnce(&mut Array2<f64>)>(&mut self, f: F) {
        f(&mut self.shadow);
        self.row_means = self.shadow.mean_axis(Axis(1)).expect("weight matrix has columns");
    }
}

/// Eq-1 binarization: +1 where x ≥ 0 (including −0.0), −1 otherwise.
pub fn sign_binarize(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Threshold binarization for non-negative activations: 1 where x ≥ threshold,
/// 0 otherwise. Negative input signals a misplaced use after a signed
/// activation.
pub fn nonneg_binarize(x: &ArrayD<f64>, threshold: f64) -> Result<ArrayD<f64>> {
    if let Some(v) = x.iter().find(|v| **v < 0.0) {
        return Err(Error::Contract(format!(
            "nonneg_binarize received negative entry {v}"
        )));
    }
    Ok(x.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

/// Paper-literal threshold for the non-negative path.
pub const NONNEG_THRESHOLD: f64 = 0.5;

/// Straight-through estimator: pass the upstream gradient where |input| ≤ 1,
/// zero elsewhere.
pub fn ste_grad(upstream: &ArrayD<f64>, pre_binarization_input: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    if upstream.shape() != pre_binarization_input.shape() {
        return Err(Error::DimMismatch(format!(
            "ste_grad shapes {:?} vs {:?}",
            upstream.shape(),
            pre_binarization_input.shape()
        )));
    }
    let mut out = upstream.clone();
    out.zip_mut_with(pre_binarization_input, |g, &x| {
        if x.abs() > 1.0 {
            *g = 0.0;
        }
    });
    Ok(out)
}

/// Per-row mean absolute value: the α scale vector.
pub fn row_abs_mean(w: ArrayView2<'_, f64>) -> Array1<f64> {
    let n = w.ncols() as f64;
    w.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / n).collect()
}

/// Binarize shadow weights: bits = sign(W − row_mean(W)), α_i = mean|W_i|.
pub fn weight_binarize(w: &LatentWeight, lane_width: LaneWidth) -> ScaledBinary {
    let means = w.row_means();
    let bits = BitMatrix::from_bit_fn(
        w.out_features(),
        w.in_features(),
        lane_width,
        Convention::Signed,
        |i, j| w.shadow()[(i, j)] - means[i] >= 0.0,
    );
    ScaledBinary { bits, scale: row_abs_mean(w.shadow().view()).to_vec() }
}

/// Binarize a live activation matrix with a single per-tensor β = mean|A|.
/// `signed` selects the sign path; otherwise the threshold path (entries must
/// be non-negative).
pub fn activation_binarize(
    a: ArrayView2<'_, f64>,
    signed: bool,
    threshold: f64,
    lane_width: LaneWidth,
) -> Result<ScaledBinary> {
    let n = a.len() as f64;
    let beta = if n == 0.0 { 0.0 } else { a.iter().map(|v| v.abs()).sum::<f64>() / n };
    let (rows, cols) = a.dim();
    let bits = if signed {
        BitMatrix::from_bit_fn(rows, cols, lane_width, Convention::Signed, |i, j| {
            a[(i, j)] >= 0.0
        })
    } else {
        if let Some(v) = a.iter().find(|v| **v < 0.0) {
            return Err(Error::Contract(format!(
                "unsigned activation binarization received negative entry {v}"
            )));
        }
        BitMatrix::from_bit_fn(rows, cols, lane_width, Convention::NonNeg, |i, j| {
            a[(i, j)] >= threshold
        })
    };
    Ok(ScaledBinary { bits, scale: vec![beta] })
}

/// Full binary linear layer via the bit kernels: rows of the output are
/// activations, columns are the weight's output features.
///
/// `a` is `[points × in]`, the result `[points × out]` with
/// `y[p][i] = α_i · β · (bits_W.row(i) ⊛ bits_A.row(p))`.
pub fn binary_linear(
    w: &LatentWeight,
    a: ArrayView2<'_, f64>,
    signed_act: bool,
    threshold: f64,
) -> Result<Array2<f64>> {
    if a.ncols() != w.in_features() {
        return Err(Error::DimMismatch(format!(
            "activation width {} vs weight input width {}",
            a.ncols(),
            w.in_features()
        )));
    }
    let wb = weight_binarize(w, DEFAULT_LANE_WIDTH);
    let ab = activation_binarize(a, signed_act, threshold, DEFAULT_LANE_WIDTH)?;
    binary_linear_packed(&wb, &ab)
}

/// Same as [`binary_linear`] but from already-binarized operands (the frozen
/// inference path).
pub fn binary_linear_packed(wb: &ScaledBinary, ab: &ScaledBinary) -> Result<Array2<f64>> {
    let beta = ab.scale[0];
    let ints = bitops::bgemm(&wb.bits, &ab.bits)?;
    let points = ab.bits.rows();
    let out_features = wb.bits.rows();
    Ok(Array2::from_shape_fn((points, out_features), |(p, i)| {
        wb.scale[i] * beta * ints.get(i, p) as f64
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dyn2(a: Array2<f64>) -> ArrayD<f64> {
        a.into_dyn()
    }

    #[test]
    fn sign_binarize_zero_is_positive() {
        let x = dyn2(arr2(&[[0.0, -0.3, 2.5, -0.0, -7.0]]));
        let got = sign_binarize(&x);
        assert_eq!(got, dyn2(arr2(&[[1.0, -1.0, 1.0, 1.0, -1.0]])));
    }

    #[test]
    fn nonneg_binarize_threshold_boundary() {
        let x = dyn2(arr2(&[[0.5, 0.49, 1.0]]));
        let got = nonneg_binarize(&x, NONNEG_THRESHOLD).unwrap();
        assert_eq!(got, dyn2(arr2(&[[1.0, 0.0, 1.0]])));

        // uniform softmax over 8 entries → all below threshold
        let x = ArrayD::from_elem(vec![8], 0.125);
        let got = nonneg_binarize(&x, NONNEG_THRESHOLD).unwrap();
        assert!(got.iter().all(|&v| v == 0.0));

        let bad = dyn2(arr2(&[[-0.1]]));
        assert!(matches!(nonneg_binarize(&bad, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn weight_binarize_examples() {
        // row [1, −2, 3]: mean 2/3 → signs [+1, −1, +1]; α = 2
        let w = LatentWeight::new(arr2(&[[1.0, -2.0, 3.0]]));
        let sb = weight_binarize(&w, LaneWidth::W64);
        assert_eq!(sb.bits.unpack(), arr2(&[[1.0, -1.0, 1.0]]));
        assert!((sb.scale[0] - 2.0).abs() < 1e-15);

        // constant row → centered all zero → all +1, α = |c|
        let w = LatentWeight::new(arr2(&[[-1.5, -1.5, -1.5, -1.5]]));
        let sb = weight_binarize(&w, LaneWidth::W64);
        assert_eq!(sb.bits.unpack(), arr2(&[[1.0, 1.0, 1.0, 1.0]]));
        assert!((sb.scale[0] - 1.5).abs() < 1e-15);

        // already zero-mean row
        let w = LatentWeight::new(arr2(&[[-1.0, 1.0]]));
        let sb = weight_binarize(&w, LaneWidth::W64);
        assert_eq!(sb.bits.unpack(), arr2(&[[-1.0, 1.0]]));
        assert!((sb.scale[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_bits_invariant_to_row_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let w0 = Array2::from_shape_fn((4, 9), |_| rng.random_range(-1.0..1.0));
            let shift = rng.random_range(-3.0..3.0);
            let w1 = &w0 + shift;
            let b0 = weight_binarize(&LatentWeight::new(w0), LaneWidth::W64);
            let b1 = weight_binarize(&LatentWeight::new(w1), LaneWidth::W64);
            assert_eq!(b0.bits, b1.bits);
        }
    }

    #[test]
    fn activation_binarize_examples() {
        let a = arr2(&[[1.0, -1.0, 1.0, -1.0]]);
        let sb = activation_binarize(a.view(), true, NONNEG_THRESHOLD, LaneWidth::W64).unwrap();
        assert_eq!(sb.bits.unpack(), a);
        assert!((sb.scale[0] - 1.0).abs() < 1e-15);

        let zeros = Array2::zeros((2, 3));
        let sb = activation_binarize(zeros.view(), true, 0.5, LaneWidth::W64).unwrap();
        assert_eq!(sb.scale[0], 0.0);

        let a = arr2(&[[0.6, 0.4, 1.0]]);
        let sb = activation_binarize(a.view(), false, NONNEG_THRESHOLD, LaneWidth::W64).unwrap();
        assert_eq!(sb.bits.unpack(), arr2(&[[1.0, 0.0, 1.0]]));
        assert!((sb.scale[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn beta_scales_linearly_bits_fixed_for_signed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((3, 7), |_| rng.random_range(-2.0..2.0));
        let c = 3.25;
        let sa = activation_binarize(a.view(), true, 0.5, LaneWidth::W64).unwrap();
        let sc = activation_binarize((&a * c).view(), true, 0.5, LaneWidth::W64).unwrap();
        assert_eq!(sa.bits, sc.bits);
        assert!((sc.scale[0] - c * sa.scale[0]).abs() < 1e-12);
    }

    #[test]
    fn ste_grad_clip_region() {
        let x = dyn2(arr2(&[[0.5, 1.5, 1.0, -1.0, -1.0001]]));
        let up = ArrayD::from_elem(vec![1, 5], 3.0);
        let g = ste_grad(&up, &x).unwrap();
        assert_eq!(g, dyn2(arr2(&[[3.0, 0.0, 3.0, 3.0, 0.0]])));

        let bad = ArrayD::from_elem(vec![2], 1.0);
        assert!(matches!(ste_grad(&up, &bad), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn binary_linear_hand_case() {
        // 1×2 weight [1,−1] (α=1), signed activation [2,−2] (β=2) → Y = 4
        let w = LatentWeight::new(arr2(&[[1.0, -1.0]]));
        let a = arr2(&[[2.0, -2.0]]);
        let y = binary_linear(&w, a.view(), true, 0.5).unwrap();
        assert_eq!(y, arr2(&[[4.0]]));

        // zero activations → β = 0 → zero output
        let a = Array2::zeros((3, 2));
        let y = binary_linear(&w, a.view(), true, 0.5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_linear_matches_dense_expansion_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let w = LatentWeight::new(Array2::from_shape_fn((8, 16), |_| {
                rng.random_range(-1.5..1.5)
            }));
            let signed = rng.random::<bool>();
            let a = if signed {
                Array2::from_shape_fn((1, 16), |_| rng.random_range(-2.0..2.0))
            } else {
                Array2::from_shape_fn((1, 16), |_| rng.random_range(0.0..1.0))
            };
            let y = binary_linear(&w, a.view(), signed, NONNEG_THRESHOLD).unwrap();
            let wb = weight_binarize(&w, LaneWidth::W64);
            let ab = activation_binarize(a.view(), signed, NONNEG_THRESHOLD, LaneWidth::W64)
                .unwrap();
            let oracle = ab.to_dense().dot(&wb.to_dense().t());
            for (got, want) in y.iter().zip(oracle.iter()) {
                let denom = want.abs().max(1.0);
                assert!((got - want).abs() / denom < 1e-6, "got {got} want {want}");
            }
        }
    }

    #[test]
    fn latent_weight_means_stay_fresh() {
        let mut w = LatentWeight::new(arr2(&[[1.0, 3.0], [0.0, 0.0]]));
        assert_eq!(w.row_means(), &arr1(&[2.0, 0.0]));
        w.update(|s| s[(1, 0)] = 4.0);
        assert_eq!(w.row_means(), &arr1(&[2.0, 2.0]));
    }
}
