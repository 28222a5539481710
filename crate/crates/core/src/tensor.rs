//! Dense row-major `f32` tensors and the handful of matrix primitives the
//! merge code needs. Storage is 32-bit; every reduction accumulates in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape-tagged, row-major dense array of finite `f32` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must have positive extents"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Narrows `f64` values to storage precision.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::matrix(n, n, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; a vector counts as a single row.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols() + col]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Column `j` of a matrix, widened to `f64`.
    pub fn column_f64(&self, j: usize) -> Vec<f64> {
        let n = self.cols();
        (0..self.rows()).map(|i| f64::from(self.data[i * n + j])).collect()
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("add", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) + f64::from(b)) as f32)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("sub", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)) as f32)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Stacks two matrices with equal column counts vertically.
    pub fn vstack(top: &Tensor, bottom: &Tensor) -> Result<Tensor> {
        top.require_matrix("vstack")?;
        bottom.require_matrix("vstack")?;
        if top.cols() != bottom.cols() {
            return Err(Error::dim("vstack", &top.shape, &bottom.shape));
        }
        let mut data = top.data.clone();
        data.extend_from_slice(&bottom.data);
        Tensor::matrix(top.rows() + bottom.rows(), top.cols(), data)
    }

    /// Concatenates two matrices with equal row counts side by side.
    pub fn hstack(left: &Tensor, right: &Tensor) -> Result<Tensor> {
        left.require_matrix("hstack")?;
        right.require_matrix("hstack")?;
        if left.rows() != right.rows() {
            return Err(Error::dim("hstack", &left.shape, &right.shape));
        }
        let (a, b) = (left.cols(), right.cols());
        let mut data = Vec::with_capacity(left.rows() * (a + b));
        for i in 0..left.rows() {
            data.extend_from_slice(&left.data[i * a..(i + 1) * a]);
            data.extend_from_slice(&right.data[i * b..(i + 1) * b]);
        }
        Tensor::matrix(left.rows(), a + b, data)
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.is_matrix() {
            Ok(())
        } else {
            Err(Error::dim(op, &self.shape, &[]))
        }
    }
}

/// Row-major `f64` product `c = a · b` with `a` of shape `m×k` and `b` of
/// shape `k×n`. Transposed operands are expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the full extents described by (m, k, n) and
    // the strides above, as asserted at entry.
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

/// Matrix product with `f64` accumulation, rounded once to `f32`.
pub fn matmul(lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    if !lhs.is_matrix() || !rhs.is_matrix() || lhs.cols() != rhs.rows() {
        return Err(Error::dim("matmul", lhs.shape(), rhs.shape()));
    }
    let (m, k, n) = (lhs.rows(), lhs.cols(), rhs.cols());
    let mut out = vec![0.0f64; m * n];
    gemm_f64(m, k, n, &lhs.to_f64(), false, &rhs.to_f64(), false, &mut out);
    Tensor::from_f64(vec![m, n], &out)
}

/// Multiplies column `j` of `matrix` by `coeffs[j]`.
pub fn column_scale(matrix: &Tensor, coeffs: &Tensor) -> Result<Tensor> {
    if !matrix.is_matrix() || coeffs.shape() != [matrix.cols()] {
        return Err(Error::dim("column_scale", matrix.shape(), coeffs.shape()));
    }
    let n = matrix.cols();
    let data = matrix
        .data()
        .chunks_exact(n)
        .flat_map(|row| row.iter().zip(coeffs.data()).map(|(&x, &c)| x * c))
        .collect();
    Tensor::new(matrix.shape().to_vec(), data)
}

pub fn frobenius_norm(t: &Tensor) -> f64 {
    t.data()
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Norms below this are treated as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Cosine similarity on `f64` slices; `None` when either side is degenerate.
pub fn cosine_f64(u: &[f64], v: &[f64]) -> Option<f64> {
    debug_assert_eq!(u.len(), v.len());
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        return None;
    }
    Some((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn cosine(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.shape().len() != 1 || u.shape() != v.shape() {
        return Err(Error::dim("cosine", u.shape(), v.shape()));
    }
    let (a, b) = (u.to_f64(), v.to_f64());
    cosine_f64(&a, &b).ok_or_else(|| {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        Error::DegenerateVector { norm: na.min(nb) }
    })
}
