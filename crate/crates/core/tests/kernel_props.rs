//! Property tests for the bit-packed kernels: exactness against dense
//! integer matrix multiplication, lane-width invariance, output parity, and
//! the pack/unpack identity.

use bpt_core::bitops::{bgemm, pack_binary01, pack_signs, LaneWidth};
use ndarray::Array2;
use proptest::prelude::*;

fn pm1_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(proptest::bool::ANY, rows * cols).prop_map(move |bits| {
        Array2::from_shape_vec(
            (rows, cols),
            bits.into_iter().map(|b| if b { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap()
    })
}

fn b01_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(proptest::bool::ANY, rows * cols).prop_map(move |bits| {
        Array2::from_shape_vec(
            (rows, cols),
            bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn bgemm_equals_dense_matmul_exactly(
        (m, n, k) in (1usize..12, 1usize..12, 1usize..256),
        seed in any::<u64>(),
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((m, k), |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let bt = Array2::from_shape_fn((n, k), |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let dense = a.dot(&bt.t());
        for lw in [LaneWidth::W32, LaneWidth::W64] {
            let out = bgemm(
                &pack_signs(a.view(), lw).unwrap(),
                &pack_signs(bt.view(), lw).unwrap(),
            ).unwrap();
            prop_assert_eq!(out.to_dense(), dense.clone());
        }
    }

    #[test]
    fn bgemm_outputs_have_parity_of_k(
        a in pm1_matrix(3, 37),
        bt in pm1_matrix(4, 37),
    ) {
        let out = bgemm(
            &pack_signs(a.view(), LaneWidth::W64).unwrap(),
            &pack_signs(bt.view(), LaneWidth::W64).unwrap(),
        ).unwrap();
        for &v in out.values() {
            prop_assert_eq!(v.rem_euclid(2), 37i64.rem_euclid(2));
            prop_assert!(v.abs() <= 37);
        }
    }

    #[test]
    fn lane_width_is_unobservable(
        a in pm1_matrix(5, 91),
        bt in b01_matrix(3, 91),
    ) {
        let o32 = bgemm(
            &pack_signs(a.view(), LaneWidth::W32).unwrap(),
            &pack_binary01(bt.view(), LaneWidth::W32).unwrap(),
        ).unwrap();
        let o64 = bgemm(
            &pack_signs(a.view(), LaneWidth::W64).unwrap(),
            &pack_binary01(bt.view(), LaneWidth::W64).unwrap(),
        ).unwrap();
        prop_assert_eq!(o32, o64);
    }

    #[test]
    fn pack_unpack_identity(
        m in pm1_matrix(4, 70),
        b in b01_matrix(3, 65),
    ) {
        for lw in [LaneWidth::W32, LaneWidth::W64] {
            prop_assert_eq!(pack_signs(m.view(), lw).unwrap().unpack(), m.clone());
            prop_assert_eq!(pack_binary01(b.view(), lw).unwrap().unpack(), b.clone());
        }
    }

    #[test]
    fn mixed_bgemm_equals_dense(
        a in pm1_matrix(4, 83),
        bt in b01_matrix(5, 83),
    ) {
        let dense = a.dot(&bt.t());
        let out = bgemm(
            &pack_signs(a.view(), LaneWidth::W64).unwrap(),
            &pack_binary01(bt.view(), LaneWidth::W64).unwrap(),
        ).unwrap();
        prop_assert_eq!(out.to_dense(), dense);
    }
}
