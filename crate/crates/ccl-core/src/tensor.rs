//! Dense row-major tensors and the numeric kernels the rest of the crate
//! builds on.
//!
//! Kernels are pure functions over immutable inputs and are deterministic:
//! every output element is accumulated in a fixed order (ascending inner
//! index), so results are bit-identical across runs for identical inputs.
//! The matmul kernel blocks over k and processes four output rows per pass
//! for cache reuse; blocking never changes the per-element summation order.

use crate::error::{CclError, Result};
use std::fmt;

/// Element type for all numeric work. `f64` is used by the test and
/// gradient-checking suites, `f32` by the training runners.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Copy
    + Send
    + Sync
    + Default
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// Byte width recorded in checkpoint headers.
    const BYTES: u8;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const BYTES: u8 = 8;
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

impl Scalar for f32 {
    const BYTES: u8 = 4;
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

/// Dense N-dimensional array, row-major, contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(CclError::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(CclError::dim(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 2-D constructor from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(CclError::dim("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(&[r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data under a new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(CclError::dim(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// View of a higher-rank batch tensor as [B × D] with B = shape[0].
    pub fn as_matrix(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(CclError::dim(format!(
                "need rank >= 2 to flatten, got {:?}",
                self.shape
            )));
        }
        let b = self.shape[0];
        self.reshaped(&[b, self.data.len() / b])
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(CclError::dim(format!("expected rank 2, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[self.rank() - 1];
        let width: usize = self.shape[1..].iter().product();
        debug_assert_eq!(self.rank(), 2, "row() is for rank-2 tensors");
        let _ = c;
        &self.data[i * width..(i + 1) * width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let width: usize = self.shape[1..].iter().product();
        &mut self.data[i * width..(i + 1) * width]
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(CclError::NonFinite(op))
        }
    }

    /// Matrix product `self · other` for rank-2 tensors.
    ///
    /// Each output element is the plain left-to-right sum over k; the kernel
    /// blocks over k and tiles four output rows at a time, which changes
    /// neither the order nor the grouping of any element's additions. Output
    /// therefore matches a naive triple loop bit for bit.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(CclError::dim(format!(
                "matmul inner dims {k} vs {k2} ({:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        saxpy_gemm(&self.data, &other.data, &mut out.data, m, k, n);
        out.check_finite("matmul")
    }

    /// `selfᵀ · other` for rank-2 tensors: [k×m]ᵀ·[k×n] → [m×n].
    ///
    /// Used for weight gradients (δᵀ · input) without materializing the
    /// transpose. Summation per element runs in ascending k order.
    pub fn matmul_tn(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(CclError::dim(format!(
                "matmul_tn shared dim {k} vs {k2} ({:?}ᵀ x {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        let a = &self.data;
        let b = &other.data;
        let c = &mut out.data;
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = a[kk * m + i];
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        out.check_finite("matmul_tn")
    }

    /// Transpose of a rank-2 tensor.
    pub fn transposed2(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2()?;
        let mut out = Tensor::zeros(&[c, r]);
        // Block both dimensions so reads and writes stay cache-resident.
        const B: usize = 32;
        for ib in (0..r).step_by(B) {
            for jb in (0..c).step_by(B) {
                for i in ib..(ib + B).min(r) {
                    for j in jb..(jb + B).min(c) {
                        out.data[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a - b, "sub")
    }

    pub fn hadamard(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a * b, "hadamard")
    }

    fn zip_with(
        &self,
        other: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        op: &'static str,
    ) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(CclError::dim(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    /// `self += s · other`, in place.
    pub fn add_scaled(&mut self, other: &Tensor<T>, s: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(CclError::dim(format!(
                "add_scaled: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Add a [D] bias to every row of a [B×D] tensor.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, d) = self.dims2()?;
        if bias.len() != d {
            return Err(CclError::dim(format!(
                "bias length {} vs row width {d}",
                bias.len()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(d) {
            for (v, &b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Column sums of a [B×D] tensor → [D].
    pub fn col_sum(&self) -> Result<Tensor<T>> {
        let (_, d) = self.dims2()?;
        let mut out = Tensor::zeros(&[d]);
        for row in self.data.chunks_exact(d) {
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn sq_sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v * v;
        }
        acc
    }

    /// Index of the largest value in each row of a [B×C] tensor
    /// (first index wins ties).
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (b, c) = self.dims2()?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let row = &self.data[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Convert element type (used when loading checkpoints across precisions
    /// and when promoting test fixtures).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// C[m×n] += A[m×k]·B[k×n], k-blocked with a 4-row tile.
fn saxpy_gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    const KC: usize = 128;
    let mut kb = 0;
    while kb < k {
        let kend = (kb + KC).min(k);
        let mut i = 0;
        while i + 4 <= m {
            let tile = &mut c[i * n..(i + 4) * n];
            let (c0, rest) = tile.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for kk in kb..kend {
                let a0 = a[i * k + kk];
                let a1 = a[(i + 1) * k + kk];
                let a2 = a[(i + 2) * k + kk];
                let a3 = a[(i + 3) * k + kk];
                let brow = &b[kk * n..kk * n + n];
                for j in 0..n {
                    let bv = brow[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n..(i + 1) * n];
            for kk in kb..kend {
                let av = a[i * k + kk];
                let brow = &b[kk * n..kk * n + n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
            i += 1;
        }
        kb = kend;
    }
}

/// The elementwise maps named by the library's contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Map {
    Elu,
    Tanh,
    EluDerivative,
    TanhDerivative,
    SoftmaxRowwise,
}

/// ELU with α = 1.
#[inline(always)]
pub fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

/// Derivative of ELU (α = 1) at pre-activation x.
#[inline(always)]
pub fn elu_derivative<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

#[inline(always)]
pub fn tanh_derivative<T: Scalar>(x: T) -> T {
    let t = x.tanh();
    T::one() - t * t
}

/// Apply one of the named maps. `SoftmaxRowwise` requires rank 2 and
/// subtracts each row's max before exponentiating, so it is shift-invariant
/// and overflow-safe.
pub fn elementwise<T: Scalar>(map: Map, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out = match map {
        Map::Elu => x.map(elu),
        Map::Tanh => x.map(|v| v.tanh()),
        Map::EluDerivative => x.map(elu_derivative),
        Map::TanhDerivative => x.map(tanh_derivative),
        Map::SoftmaxRowwise => softmax_rowwise(x)?,
    };
    out.check_finite("elementwise")
}

/// Row-wise softmax of a [B×C] tensor.
pub fn softmax_rowwise<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = x.dims2()?;
    let mut out = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let row = x.row(i);
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let orow = out.row_mut(i);
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Identity matrix as a tensor.
pub fn eye<T: Scalar>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = T::one();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Naive triple-loop reference used as the independent oracle.
    fn matmul_naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at2(i, kk) * b.at2(kk, j);
                }
                c.set2(i, j, acc);
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let i2 = eye::<f64>(2);
        assert_eq!(i2.matmul(&x).unwrap(), x);
        assert_eq!(x.matmul(&i2).unwrap(), x);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let want = Tensor::from_rows(&[&[5.0, 6.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(p.matmul(&b).unwrap(), want);
    }

    #[test]
    fn matmul_matches_naive_oracle_exactly() {
        let mut rng = Rng::new(11);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[4, 2], &mut rng);
        assert_eq!(a.matmul(&b).unwrap(), matmul_naive(&a, &b));
        // Larger shapes cross the kernel's k blocks and row tiles.
        let a = random_tensor(&[9, 300], &mut rng);
        let b = random_tensor(&[300, 17], &mut rng);
        assert_eq!(a.matmul(&b).unwrap(), matmul_naive(&a, &b));
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let mut rng = Rng::new(12);
        let a = random_tensor(&[7, 5], &mut rng);
        let b = random_tensor(&[7, 6], &mut rng);
        let got = a.matmul_tn(&b).unwrap();
        let want = a.transposed2().unwrap().matmul(&b).unwrap();
        // Same k-order accumulation on both routes.
        assert_eq!(got, want);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(a.matmul(&b), Err(CclError::Dimension(_))));
    }

    #[test]
    fn matmul_rejects_nonfinite() {
        let a = Tensor::from_rows(&[&[f64::MAX, f64::MAX]]).unwrap();
        let b = Tensor::from_rows(&[&[f64::MAX], &[f64::MAX]]).unwrap();
        assert!(matches!(a.matmul(&b), Err(CclError::NonFinite(_))));
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Rng::new(13);
        let a = random_tensor(&[41, 67], &mut rng);
        assert_eq!(a.transposed2().unwrap().transposed2().unwrap(), a);
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0f64), 0.0);
        assert_eq!(elu(2.5f64), 2.5);
        // elu(x) → −1 as x → −∞
        assert!((elu(-30.0f64) + 1.0).abs() < 1e-12);
        assert!((elu_derivative(-30.0f64)).abs() < 1e-12);
        assert_eq!(elu_derivative(1.0f64), 1.0);
    }

    #[test]
    fn tanh_values() {
        let x = Tensor::from_rows(&[&[0.0f64]]).unwrap();
        assert_eq!(elementwise(Map::Tanh, &x).unwrap().data()[0], 0.0);
        assert_eq!(elementwise(Map::TanhDerivative, &x).unwrap().data()[0], 1.0);
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::<f64>::zeros(&[1, 10]);
        let s = elementwise(Map::SoftmaxRowwise, &x).unwrap();
        for &v in s.data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let y = x.map(|v| v + 1000.0);
        let sx = softmax_rowwise(&x).unwrap();
        let sy = softmax_rowwise(&y).unwrap();
        for (&a, &b) in sx.data().iter().zip(sy.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_requires_rank2() {
        let x = Tensor::<f64>::zeros(&[4]);
        assert!(elementwise(Map::SoftmaxRowwise, &x).is_err());
    }

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f64; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f64; 6]).is_ok());
    }

    #[test]
    fn col_sum_and_bias() {
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let s = x.col_sum().unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
        let b = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap();
        let y = x.add_row_bias(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
    }
}
