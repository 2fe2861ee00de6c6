//! Bit-packed ±1 / {1,0} matrices and the xnor/popcount matrix-multiply kernels.
//!
//! A `BitMatrix` stores one value per bit, row-major, each row padded to a whole
//! number of lanes (32- or 64-bit words). Under the signed convention a set bit
//! means +1 and a clear bit means −1; under the non-negative convention a set
//! bit means 1 and a clear bit means 0. Padding bits past the last column are
//! always zero, so popcounts over the tail lane must be masked to the valid
//! bit range.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Value convention carried by a packed matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    /// bit 1 ↔ +1, bit 0 ↔ −1
    Signed,
    /// bit 1 ↔ 1, bit 0 ↔ 0 (post-ReLU / post-softmax activations)
    NonNeg,
}

impl Convention {
    pub fn tag(self) -> u8 {
        match self {
            Convention::Signed => 0,
            Convention::NonNeg => 1,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Convention::Signed),
            1 => Ok(Convention::NonNeg),
            _ => Err(Error::Checkpoint(format!("unknown convention tag {t}"))),
        }
    }

    fn value_of_bit(self, bit: bool) -> f64 {
        match (self, bit) {
            (Convention::Signed, true) => 1.0,
            (Convention::Signed, false) => -1.0,
            (Convention::NonNeg, true) => 1.0,
            (Convention::NonNeg, false) => 0.0,
        }
    }
}

/// Machine word size used for packing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneWidth {
    W32,
    W64,
}

impl LaneWidth {
    pub fn bits(self) -> usize {
        match self {
            LaneWidth::W32 => 32,
            LaneWidth::W64 => 64,
        }
    }

    pub fn tag(self) -> u8 {
        self.bits() as u8
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            32 => Ok(LaneWidth::W32),
            64 => Ok(LaneWidth::W64),
            _ => Err(Error::Checkpoint(format!("unknown lane width {t}"))),
        }
    }
}

pub const DEFAULT_LANE_WIDTH: LaneWidth = LaneWidth::W64;

trait Lane: Copy + Eq {
    const LANE_BITS: usize;
    const ZERO: Self;
    fn popcount(self) -> i64;
    fn xor(self, other: Self) -> Self;
    fn and(self, other: Self) -> Self;
    fn not(self) -> Self;
    fn with_bit(self, i: usize) -> Self;
    /// Mask with the low `n` bits set, `1 ..= BITS`.
    fn low_mask(n: usize) -> Self;
    fn from_le_slice(b: &[u8]) -> Self;
}

macro_rules! impl_lane {
    ($t:ty, $bits:expr) => {
        impl Lane for $t {
            const LANE_BITS: usize = $bits;
            const ZERO: Self = 0;
            fn popcount(self) -> i64 {
                self.count_ones() as i64
            }
            fn xor(self, other: Self) -> Self {
                self ^ other
            }
            fn and(self, other: Self) -> Self {
                self & other
            }
            fn not(self) -> Self {
                !self
            }
            fn with_bit(self, i: usize) -> Self {
                self | (1 << i)
            }
            fn low_mask(n: usize) -> Self {
                debug_assert!(n >= 1 && n <= Self::LANE_BITS);
                if n == Self::LANE_BITS {
                    !0
                } else {
                    (1 << n) - 1
                }
            }
            fn from_le_slice(b: &[u8]) -> Self {
                let mut buf = [0u8; $bits / 8];
                buf.copy_from_slice(b);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_lane!(u32, 32);
impl_lane!(u64, 64);

#[derive(Debug, Clone, PartialEq)]
enum Words {
    W32(Vec<u32>),
    W64(Vec<u64>),
}

/// Row-major bit-packed matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    lane_width: LaneWidth,
    convention: Convention,
    words: Words,
}

impl BitMatrix {
    /// Build from a per-entry bit predicate. Padding bits are left zero.
    pub fn from_bit_fn<F>(
        rows: usize,
        cols: usize,
        lane_width: LaneWidth,
        convention: Convention,
        mut bit: F,
    ) -> Self
    where
        F: FnMut(usize, usize) -> bool,
    {
        let lanes = lanes_per_row(cols, lane_width);
        match lane_width {
            LaneWidth::W32 => {
                let mut words = vec![0u32; rows * lanes];
                fill_words(&mut words, rows, cols, lanes, &mut bit);
                BitMatrix { rows, cols, lane_width, convention, words: Words::W32(words) }
            }
            LaneWidth::W64 => {
                let mut words = vec![0u64; rows * lanes];
                fill_words(&mut words, rows, cols, lanes, &mut bit);
                BitMatrix { rows, cols, lane_width, convention, words: Words::W64(words) }
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn lane_width(&self) -> LaneWidth {
        self.lane_width
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn lanes_per_row(&self) -> usize {
        lanes_per_row(self.cols, self.lane_width)
    }

    pub fn bit(&self, row: usize, col: usize) -> bool {
        assert!(row < self.rows && col < self.cols, "bit index out of range");
        let lanes = self.lanes_per_row();
        match &self.words {
            Words::W32(w) => bit_at(w, row, col, lanes),
            Words::W64(w) => bit_at(w, row, col, lanes),
        }
    }

    /// Entry value under this matrix's convention.
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.convention.value_of_bit(self.bit(row, col))
    }

    /// Dense expansion under this matrix's convention.
    pub fn unpack(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| self.value(i, j))
    }

    /// Serialized byte length (header + lanes).
    pub fn byte_len(&self) -> usize {
        let lane_bytes = self.lane_width.bits() / 8;
        18 + self.rows * self.lanes_per_row() * lane_bytes
    }

    /// Header (rows, cols, lane width, convention tag) then lanes in
    /// row-major little-endian order.
    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.push(self.lane_width.tag());
        out.push(self.convention.tag());
        match &self.words {
            Words::W32(w) => {
                for lane in w {
                    out.extend_from_slice(&lane.to_le_bytes());
                }
            }
            Words::W64(w) => {
                for lane in w {
                    out.extend_from_slice(&lane.to_le_bytes());
                }
            }
        }
    }

    /// Parse a matrix from `bytes`, returning the remaining tail. Validates
    /// that all padding bits are zero.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, &[u8])> {
        if bytes.len() < 18 {
            return Err(Error::Checkpoint("bit matrix header truncated".into()));
        }
        let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let lane_width = LaneWidth::from_tag(bytes[16])?;
        let convention = Convention::from_tag(bytes[17])?;
        let lanes = lanes_per_row(cols, lane_width);
        let lane_bytes = lane_width.bits() / 8;
        let payload = rows * lanes * lane_bytes;
        let rest = &bytes[18..];
        if rest.len() < payload {
            return Err(Error::Checkpoint("bit matrix payload truncated".into()));
        }
        let words = match lane_width {
            LaneWidth::W32 => Words::W32(read_lanes::<u32>(&rest[..payload], lane_bytes)),
            LaneWidth::W64 => Words::W64(read_lanes::<u64>(&rest[..payload], lane_bytes)),
        };
        let m = BitMatrix { rows, cols, lane_width, convention, words };
        m.check_padding()?;
        Ok((m, &rest[payload..]))
    }

    fn check_padding(&self) -> Result<()> {
        let tail_bits = self.cols % self.lane_width.bits();
        if tail_bits == 0 || self.rows == 0 {
            return Ok(());
        }
        let lanes = self.lanes_per_row();
        let ok = match &self.words {
            Words::W32(w) => padding_clear(w, self.rows, lanes, tail_bits),
            Words::W64(w) => padding_clear(w, self.rows, lanes, tail_bits),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("nonzero padding bits in bit matrix".into()))
        }
    }
}

fn lanes_per_row(cols: usize, lane_width: LaneWidth) -> usize {
    cols.div_ceil(lane_width.bits())
}

fn fill_words<L: Lane, F: FnMut(usize, usize) -> bool>(
    words: &mut [L],
    rows: usize,
    cols: usize,
    lanes: usize,
    bit: &mut F,
) {
    for r in 0..rows {
        for c in 0..cols {
            if bit(r, c) {
                let w = &mut words[r * lanes + c / L::LANE_BITS];
                *w = w.with_bit(c % L::LANE_BITS);
            }
        }
    }
}

fn bit_at<L: Lane>(words: &[L], row: usize, col: usize, lanes: usize) -> bool {
    let w = words[row * lanes + col / L::LANE_BITS];
    w.and(L::ZERO.with_bit(col % L::LANE_BITS)) != L::ZERO
}

fn padding_clear<L: Lane>(words: &[L], rows: usize, lanes: usize, tail_bits: usize) -> bool {
    let pad_mask = L::low_mask(tail_bits).not();
    (0..rows).all(|r| words[r * lanes + lanes - 1].and(pad_mask) == L::ZERO)
}

fn read_lanes<L: Lane>(bytes: &[u8], lane_bytes: usize) -> Vec<L> {
    bytes.chunks_exact(lane_bytes).map(L::from_le_slice).collect()
}

/// Pack a dense ±1 matrix under the signed convention.
pub fn pack_signs(dense: ArrayView2<'_, f64>, lane_width: LaneWidth) -> Result<BitMatrix> {
    for &v in dense.iter() {
        if v != 1.0 && v != -1.0 {
            return Err(Error::Encoding(format!("entry {v} is not exactly +1 or -1")));
        }
    }
    let (rows, cols) = dense.dim();
    Ok(BitMatrix::from_bit_fn(rows, cols, lane_width, Convention::Signed, |i, j| {
        dense[(i, j)] == 1.0
    }))
}

/// Pack a dense {1,0} matrix under the non-negative convention.
pub fn pack_binary01(dense: ArrayView2<'_, f64>, lane_width: LaneWidth) -> Result<BitMatrix> {
    for &v in dense.iter() {
        if v != 1.0 && v != 0.0 {
            return Err(Error::Encoding(format!("entry {v} is not exactly 1 or 0")));
        }
    }
    let (rows, cols) = dense.dim();
    Ok(BitMatrix::from_bit_fn(rows, cols, lane_width, Convention::NonNeg, |i, j| {
        dense[(i, j)] == 1.0
    }))
}

/// Exact integer result of a binary GEMM; entries are dot products of ±1 (or
/// ±1 × {0,1}) vectors, so |value| ≤ inner dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    values: Vec<i64>,
}

impl IntMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn to_dense(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| self.get(i, j) as f64)
    }
}

/// Dot product of two signed rows: `2·popcount(xnor masked to n bits) − n`,
/// exactly the dense ±1 dot product.
pub fn xnor_dot(a: &BitMatrix, row_a: usize, b: &BitMatrix, row_b: usize) -> Result<i64> {
    check_dot_operands(a, row_a, b, row_b)?;
    if a.convention != Convention::Signed || b.convention != Convention::Signed {
        return Err(Error::Contract("xnor_dot requires signed operands".into()));
    }
    Ok(dispatch_dot(a, row_a, b, row_b, DotKind::SignedSigned))
}

/// Dot product of a signed row against a {1,0} row:
/// `popcount(a AND b) − popcount(NOT a AND b)`.
pub fn xnor_dot_binary01(a: &BitMatrix, row_a: usize, b: &BitMatrix, row_b: usize) -> Result<i64> {
    check_dot_operands(a, row_a, b, row_b)?;
    match (a.convention, b.convention) {
        (Convention::Signed, Convention::NonNeg) => {
            Ok(dispatch_dot(a, row_a, b, row_b, DotKind::SignedNonNeg))
        }
        (Convention::NonNeg, Convention::Signed) => {
            Ok(dispatch_dot(b, row_b, a, row_a, DotKind::SignedNonNeg))
        }
        _ => Err(Error::Contract(
            "xnor_dot_binary01 requires one signed and one non-negative operand".into(),
        )),
    }
}

fn check_dot_operands(a: &BitMatrix, row_a: usize, b: &BitMatrix, row_b: usize) -> Result<()> {
    if a.cols != b.cols {
        return Err(Error::DimMismatch(format!(
            "row lengths differ: {} vs {}",
            a.cols, b.cols
        )));
    }
    if a.lane_width != b.lane_width {
        return Err(Error::DimMismatch("operand lane widths differ".into()));
    }
    if row_a >= a.rows || row_b >= b.rows {
        return Err(Error::DimMismatch("row index out of range".into()));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum DotKind {
    SignedSigned,
    /// first operand signed, second is the {1,0} mask
    SignedNonNeg,
    NonNegNonNeg,
}

fn dispatch_dot(a: &BitMatrix, row_a: usize, b: &BitMatrix, row_b: usize, kind: DotKind) -> i64 {
    let lanes = a.lanes_per_row();
    match (&a.words, &b.words) {
        (Words::W32(wa), Words::W32(wb)) => row_dot(
            &wa[row_a * lanes..(row_a + 1) * lanes],
            &wb[row_b * lanes..(row_b + 1) * lanes],
            a.cols,
            kind,
        ),
        (Words::W64(wa), Words::W64(wb)) => row_dot(
            &wa[row_a * lanes..(row_a + 1) * lanes],
            &wb[row_b * lanes..(row_b + 1) * lanes],
            a.cols,
            kind,
        ),
        _ => unreachable!("lane widths checked equal"),
    }
}

fn row_dot<L: Lane>(a: &[L], b: &[L], n: usize, kind: DotKind) -> i64 {
    let tail_bits = n % L::LANE_BITS;
    let last = a.len().saturating_sub(1);
    let mut acc: i64 = 0;
    for i in 0..a.len() {
        let mask = if i == last && tail_bits != 0 {
            L::low_mask(tail_bits)
        } else {
            L::low_mask(L::LANE_BITS)
        };
        acc += match kind {
            DotKind::SignedSigned => a[i].xor(b[i]).not().and(mask).popcount(),
            DotKind::SignedNonNeg => {
                let m = b[i].and(mask);
                a[i].and(m).popcount() - a[i].not().and(m).popcount()
            }
            DotKind::NonNegNonNeg => a[i].and(b[i]).and(mask).popcount(),
        };
    }
    match kind {
        DotKind::SignedSigned => 2 * acc - n as i64,
        _ => acc,
    }
}

/// Binary GEMM: `result[i][j]` is the dot product of `a.row(i)` and
/// `b.row(j)` (the second operand is stored row-major as the transposed
/// factor). Dispatches on the operands' value conventions; identical to the
/// dense matrix product of the unpacked operands.
pub fn bgemm(a: &BitMatrix, b: &BitMatrix) -> Result<IntMatrix> {
    if a.cols != b.cols {
        return Err(Error::DimMismatch(format!(
            "inner dimensions differ: {} vs {}",
            a.cols, b.cols
        )));
    }
    if a.lane_width != b.lane_width {
        return Err(Error::DimMismatch("operand lane widths differ".into()));
    }
    let kind = match (a.convention, b.convention) {
        (Convention::Signed, Convention::Signed) => DotKind::SignedSigned,
        (Convention::Signed, Convention::NonNeg) | (Convention::NonNeg, Convention::Signed) => {
            DotKind::SignedNonNeg
        }
        (Convention::NonNeg, Convention::NonNeg) => DotKind::NonNegNonNeg,
    };
    // The mixed kernel takes (signed, mask) in that order.
    let swap = a.convention == Convention::NonNeg && b.convention == Convention::Signed;
    let mut values = vec![0i64; a.rows * b.rows];
    for i in 0..a.rows {
        for j in 0..b.rows {
            values[i * b.rows + j] = if swap {
                dispatch_dot(b, j, a, i, kind)
            } else {
                dispatch_dot(a, i, b, j, kind)
            };
        }
    }
    Ok(IntMatrix { rows: a.rows, cols: b.rows, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_pm1(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| if rng.random::<bool>() { 1.0 } else { -1.0 })
    }

    fn random_01(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| if rng.random::<bool>() { 1.0 } else { 0.0 })
    }

    #[test]
    fn pack_bit_order_lsb_first() {
        let m = arr2(&[[1.0, -1.0, 1.0, 1.0]]);
        let packed = pack_signs(m.view(), LaneWidth::W64).unwrap();
        let mut bytes = Vec::new();
        packed.write_to(&mut bytes);
        // 18-byte header, then the single lane: low 4 bits 0b1101.
        assert_eq!(bytes[18], 0b1101);
        assert!(bytes[19..].iter().all(|&b| b == 0));
    }

    #[test]
    fn pack_saturated_row() {
        let m = Array2::from_elem((1, 64), 1.0);
        let packed = pack_signs(m.view(), LaneWidth::W64).unwrap();
        assert_eq!(packed.lanes_per_row(), 1);
        let mut bytes = Vec::new();
        packed.write_to(&mut bytes);
        assert_eq!(&bytes[18..26], &[0xff; 8]);
    }

    #[test]
    fn pack_rejects_non_pm1() {
        let m = arr2(&[[1.0, 0.5]]);
        assert!(matches!(pack_signs(m.view(), LaneWidth::W64), Err(Error::Encoding(_))));
        let m = arr2(&[[1.0, 0.5]]);
        assert!(matches!(pack_binary01(m.view(), LaneWidth::W64), Err(Error::Encoding(_))));
    }

    #[test]
    fn pack_unpack_roundtrip_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let m = random_pm1(&mut rng, 3, 70);
            for lw in [LaneWidth::W32, LaneWidth::W64] {
                let packed = pack_signs(m.view(), lw).unwrap();
                assert_eq!(packed.unpack(), m);
            }
        }
    }

    #[test]
    fn xnor_dot_self_and_complement() {
        let a = Array2::from_shape_fn((1, 8), |(_, j)| if j % 3 == 0 { 1.0 } else { -1.0 });
        let b = a.mapv(|v| -v);
        let pa = pack_signs(a.view(), LaneWidth::W64).unwrap();
        let pb = pack_signs(b.view(), LaneWidth::W64).unwrap();
        assert_eq!(xnor_dot(&pa, 0, &pa, 0).unwrap(), 8);
        assert_eq!(xnor_dot(&pa, 0, &pb, 0).unwrap(), -8);
    }

    #[test]
    fn xnor_dot_mixed_signs_case() {
        let a = arr2(&[[1.0, -1.0, 1.0, -1.0, -1.0, 1.0]]);
        let b = arr2(&[[1.0, 1.0, -1.0, -1.0, 1.0, 1.0]]);
        let dense: f64 = a.row(0).dot(&b.row(0));
        assert_eq!(dense, 0.0);
        let pa = pack_signs(a.view(), LaneWidth::W64).unwrap();
        let pb = pack_signs(b.view(), LaneWidth::W64).unwrap();
        assert_eq!(xnor_dot(&pa, 0, &pb, 0).unwrap(), 0);
    }

    #[test]
    fn xnor_dot_length_mismatch() {
        let a = pack_signs(Array2::from_elem((1, 5), 1.0).view(), LaneWidth::W64).unwrap();
        let b = pack_signs(Array2::from_elem((1, 6), 1.0).view(), LaneWidth::W64).unwrap();
        assert!(matches!(xnor_dot(&a, 0, &b, 0), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn bgemm_all_ones_and_k1() {
        let a = pack_signs(Array2::from_elem((4, 4), 1.0).view(), LaneWidth::W64).unwrap();
        let out = bgemm(&a, &a).unwrap();
        assert!(out.values().iter().all(|&v| v == 4));

        let x = arr2(&[[1.0], [-1.0]]);
        let p = pack_signs(x.view(), LaneWidth::W32).unwrap();
        let out = bgemm(&p, &p).unwrap();
        assert_eq!(out.get(0, 0), 1);
        assert_eq!(out.get(0, 1), -1);
        assert_eq!(out.get(1, 1), 1);
    }

    #[test]
    fn bgemm_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_pm1(&mut rng, 5, 70);
        let bt = random_pm1(&mut rng, 3, 70); // transposed operand, 70×3 logical
        let dense = a.dot(&bt.t());
        for lw in [LaneWidth::W32, LaneWidth::W64] {
            let out = bgemm(
                &pack_signs(a.view(), lw).unwrap(),
                &pack_signs(bt.view(), lw).unwrap(),
            )
            .unwrap();
            assert_eq!(out.to_dense(), dense);
        }
    }

    #[test]
    fn mixed_dot_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // b all-zero → 0 regardless of a
        let a = random_pm1(&mut rng, 1, 12);
        let zeros = Array2::from_elem((1, 12), 0.0);
        let pa = pack_signs(a.view(), LaneWidth::W64).unwrap();
        let pz = pack_binary01(zeros.view(), LaneWidth::W64).unwrap();
        assert_eq!(xnor_dot_binary01(&pa, 0, &pz, 0).unwrap(), 0);

        // a all +1, b with 5 set bits → 5
        let ones = Array2::from_elem((1, 12), 1.0);
        let b = Array2::from_shape_fn((1, 12), |(_, j)| if j < 5 { 1.0 } else { 0.0 });
        let po = pack_signs(ones.view(), LaneWidth::W64).unwrap();
        let pb = pack_binary01(b.view(), LaneWidth::W64).unwrap();
        assert_eq!(xnor_dot_binary01(&po, 0, &pb, 0).unwrap(), 5);

        // random case vs dense oracle, argument order symmetric
        let a = random_pm1(&mut rng, 1, 12);
        let b = random_01(&mut rng, 1, 12);
        let dense: f64 = a.row(0).dot(&b.row(0));
        let pa = pack_signs(a.view(), LaneWidth::W64).unwrap();
        let pb = pack_binary01(b.view(), LaneWidth::W64).unwrap();
        assert_eq!(xnor_dot_binary01(&pa, 0, &pb, 0).unwrap(), dense as i64);
        assert_eq!(xnor_dot_binary01(&pb, 0, &pa, 0).unwrap(), dense as i64);
    }

    #[test]
    fn bgemm_mixed_and_nonneg_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w = random_pm1(&mut rng, 6, 37);
        let a01 = random_01(&mut rng, 4, 37);
        let dense = w.dot(&a01.t());
        let pw = pack_signs(w.view(), LaneWidth::W64).unwrap();
        let pa = pack_binary01(a01.view(), LaneWidth::W64).unwrap();
        assert_eq!(bgemm(&pw, &pa).unwrap().to_dense(), dense);
        assert_eq!(bgemm(&pa, &pw).unwrap().to_dense(), dense.t().to_owned());

        let b01 = random_01(&mut rng, 5, 37);
        let pb = pack_binary01(b01.view(), LaneWidth::W64).unwrap();
        assert_eq!(bgemm(&pa, &pb).unwrap().to_dense(), a01.dot(&b01.t()));
    }

    #[test]
    fn bgemm_dim_mismatch() {
        let a = pack_signs(Array2::from_elem((2, 8), 1.0).view(), LaneWidth::W64).unwrap();
        let b = pack_signs(Array2::from_elem((2, 9), 1.0).view(), LaneWidth::W64).unwrap();
        assert!(matches!(bgemm(&a, &b), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn serialization_roundtrip_rejects_bad_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = random_pm1(&mut rng, 3, 70);
        let packed = pack_signs(m.view(), LaneWidth::W32).unwrap();
        let mut bytes = Vec::new();
        packed.write_to(&mut bytes);
        assert_eq!(bytes.len(), packed.byte_len());
        let (back, rest) = BitMatrix::read_from(&bytes).unwrap();
        assert!(rest.is_empty());
        assert_eq!(back, packed);

        // flip a padding bit (col 70 of 70 → bits 6..32 of the tail lane pad)
        let tail_byte = bytes.len() - 1;
        bytes[tail_byte] |= 0x80;
        assert!(matches!(BitMatrix::read_from(&bytes), Err(Error::Checkpoint(_))));
    }
}
