//! Dense row-major tensors, the primitive kernels, and a reverse-mode tape
//! whose every primitive carries an analytic backward pass.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_piecewise, CoordinateSelection, GradCheckOptions, GradCheckReport};
pub use tape::{Tape, Unary, Var};

use std::fmt::{Debug, Display};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working precision of a model or computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Floating-point element type usable by the tape.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + serde::Serialize + 'static
{
    const PRECISION: Precision;

    /// Additive stand-in for minus infinity in attention masks.
    fn mask_sentinel() -> Self;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8>;

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn mask_sentinel() -> Self {
        -1e9
    }

    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: callers pass slices whose extents cover every strided
        // access implied by (m, k, n) and the strides; `c` is m×n row-major.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn mask_sentinel() -> Self {
        -1e30
    }

    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    fn to_le_bytes_vec(data: &[Self]) -> Vec<u8> {
        data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn from_le_bytes_slice(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    }
}

/// Contiguous row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&x| F::of(x)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 view; rank-1 tensors are treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|x| x * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn sum(&self) -> F {
        self.data.iter().fold(F::zero(), |s, &x| s + x)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.cast()
    }

    /// Euclidean norm of every row.
    pub fn row_norms(&self) -> Vec<F> {
        (0..self.rows())
            .map(|r| self.row(r).iter().fold(F::zero(), |s, &x| s + x * x).sqrt())
            .collect()
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
pub fn gemm<F: Scalar>(a: &Tensor<F>, ta: bool, b: &Tensor<F>, tb: bool) -> Result<Tensor<F>> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::dim(
            "matmul",
            format!("rank-2 operands required, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!(
                "inner dimensions differ: {:?}{} x {:?}{}",
                a.shape,
                if ta { "ᵀ" } else { "" },
                b.shape,
                if tb { "ᵀ" } else { "" }
            ),
        ));
    }
    let mut out = vec![F::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        F::gemm(m, k, n, &a.data, rsa, csa, &b.data, rsb, csb, &mut out);
    }
    Tensor::matrix(m, n, out)
}

/// Standard matrix product.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    gemm(a, false, b, false)
}

/// Row-wise softmax of `x + mask`, where mask entries are 0 or the
/// precision's minus-infinity sentinel.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>, mask: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    if let Some(m) = mask {
        if m.shape != x.shape {
            return Err(Error::dim(
                "softmax_rows",
                format!("mask {:?} vs input {:?}", m.shape, x.shape),
            ));
        }
    }
    let (rows, cols) = (x.rows(), x.cols());
    let sentinel = F::mask_sentinel();
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let xr = x.row(r);
        let mr = mask.map(|m| m.row(r));
        if let Some(mr) = mr {
            if cols > 0 && mr.iter().all(|&v| v <= sentinel) {
                return Err(Error::DegenerateRow {
                    op: "softmax_rows",
                    row: r,
                });
            }
        }
        let shifted = |j: usize| match mr {
            Some(mr) => xr[j] + mr[j],
            None => xr[j],
        };
        let mut max = F::neg_infinity();
        for j in 0..cols {
            let v = shifted(j);
            if v > max {
                max = v;
            }
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = F::zero();
        for (j, o) in orow.iter_mut().enumerate() {
            let masked = mr.is_some_and(|mr| mr[j] <= sentinel);
            *o = if masked {
                F::zero()
            } else {
                (shifted(j) - max).exp()
            };
            total = total + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_x_is_x() {
        let x = Tensor::<f64>::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![-4.0, 5.5, 6.0],
            vec![0.0, 0.25, -9.0],
        ])
        .unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn transposed_operands() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let direct = matmul(&a, &a.transpose()).unwrap();
        let strided = gemm(&a, false, &a, true).unwrap();
        assert_eq!(direct, strided);
        let gram = gemm(&a, true, &a, false).unwrap();
        assert_eq!(gram, matmul(&a.transpose(), &a).unwrap());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let y = softmax_rows(&x, None).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::<f32>::from_rows(&[vec![0.7, 0.0]]).unwrap();
        let m = Tensor::<f32>::from_rows(&[vec![0.0, f32::mask_sentinel()]]).unwrap();
        let y = softmax_rows(&x, Some(&m)).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_known_values() {
        let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let y = softmax_rows(&x, None).unwrap();
        // e^x / Σe^x evaluated independently
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expected = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.data()[0] - 0.09003).abs() < 1e-5);
        assert!((y.data()[1] - 0.24473).abs() < 1e-5);
        assert!((y.data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let s = f64::mask_sentinel();
        let m = Tensor::<f64>::from_rows(&[vec![0.0, s], vec![s, s]]).unwrap();
        assert!(matches!(
            softmax_rows(&x, Some(&m)),
            Err(Error::DegenerateRow { row: 1, .. })
        ));
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }
}
