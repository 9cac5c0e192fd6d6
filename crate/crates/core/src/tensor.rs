//! Dense row-major `f64` tensors and the matrix kernels used by every layer.
//!
//! Every matrix product accumulates each output element as
//! `((0 + a[i,0]·b[0,j]) + a[i,1]·b[1,j]) + …` with `k` ascending, so results
//! are bitwise reproducible and identical to the textbook triple loop. Zero
//! entries of the left operand are skipped; with finite operands this never
//! changes a result bit, and it makes products with dropped-out or rectified
//! activations proportionally cheaper.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a tensor, checking that `data` has `product(shape)` entries and
    /// that every entry is finite.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {}",
                data[pos], pos
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Row-major matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == n), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor {
            shape: vec![m, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            return 1;
        }
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        self.transpose()?.matmul(other)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul(&other.transpose()?)
    }

    /// Squared Euclidean norm of every row of a 2-D tensor.
    pub fn row_sq_norms(&self) -> Result<Tensor> {
        let (m, _) = self.dims2()?;
        let data = (0..m)
            .map(|i| self.row(i).iter().map(|v| v * v).sum())
            .collect();
        Ok(Tensor {
            shape: vec![m],
            data,
        })
    }

    /// Squared Euclidean norm of every column of a 2-D tensor.
    pub fn col_sq_norms(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (acc, v) in data.iter_mut().zip(self.row(i)) {
                *acc += v * v;
            }
        }
        Ok(Tensor {
            shape: vec![n],
            data,
        })
    }

    /// Sum over rows, giving one value per column.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (acc, v) in data.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        Ok(Tensor {
            shape: vec![n],
            data,
        })
    }

    /// Adds `bias` (length = cols) to every row in place.
    pub fn add_row_broadcast(&mut self, bias: &Tensor) -> Result<()> {
        let (m, n) = self.dims2()?;
        if bias.len() != n {
            return Err(Error::shape(format!(
                "bias of length {} cannot broadcast over {} columns",
                bias.len(),
                n
            )));
        }
        for i in 0..m {
            for (v, b) in self.row_mut(i).iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Elementwise product in place.
    pub fn mul_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "elementwise product")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Tensor {
        let mut t = self.clone();
        t.scale(alpha);
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `inf` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Width of the column panels of `b` visited by [`gemm_acc`].
const GEMM_TILE: usize = 128;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Zero entries of `a` are skipped, which pays off on dropout-masked and
/// rectified activations. `b` is visited in column panels that stay in
/// cache while every row of `a` streams over them. Per output element the
/// accumulation order is `k` ascending regardless of tiling.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let mut starts = Vec::with_capacity(m + 1);
    let mut nz: Vec<(usize, f64)> = Vec::new();
    starts.push(0);
    for row in a.chunks_exact(k.max(1)).take(m) {
        nz.extend(row.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(kk, &x)| (kk, x)));
        starts.push(nz.len());
    }
    if k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_panels_avx2(b, c, m, n, &starts, &nz) };
            return;
        }
    }
    gemm_panels(b, c, m, n, &starts, &nz);
}

/// Wider vectors only; no fused multiply-add, so results are identical to
/// the portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_panels_avx2(b: &[f64], c: &mut [f64], m: usize, n: usize, starts: &[usize], nz: &[(usize, f64)]) {
    gemm_panels(b, c, m, n, starts, nz);
}

#[inline(always)]
fn gemm_panels(b: &[f64], c: &mut [f64], m: usize, n: usize, starts: &[usize], nz: &[(usize, f64)]) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + GEMM_TILE).min(n);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for &(kk, x) in &nz[starts[i]..starts[i + 1]] {
                let brow = &b[kk * n + j0..kk * n + j1];
                for (y, bv) in crow.iter_mut().zip(brow) {
                    *y += x * bv;
                }
            }
        }
        j0 = j1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;
    use proptest::prelude::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(eye.matmul(&b).unwrap(), b);
    }

    #[test]
    fn zero_annihilates() {
        let z = Tensor::zeros(&[3, 2]);
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(z.matmul(&b).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn two_by_two_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let expected = Tensor::from_rows(&[vec![19.0, 22.0], vec![43.0, 50.0]]);
        assert_eq!(a.matmul(&b).unwrap(), expected);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[1], vec![f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn row_norms() {
        assert_eq!(
            Tensor::zeros(&[3, 4]).row_sq_norms().unwrap().data(),
            &[0.0; 3]
        );
        let t = Tensor::from_rows(&[vec![3.0, 4.0]]);
        assert_eq!(t.row_sq_norms().unwrap().data(), &[25.0]);

        let mut rng = RandomSource::new(11);
        let w = rng.gauss_sample(0.0, 1.0, &[5, 7]).unwrap();
        let norms = w.row_sq_norms().unwrap();
        for i in 0..5 {
            let mut acc = 0.0;
            for j in 0..7 {
                let v = w.data()[i * 7 + j];
                acc += v * v;
            }
            assert_eq!(norms.data()[i], acc);
        }
        let cols = w.col_sq_norms().unwrap();
        assert_eq!(cols, w.transpose().unwrap().row_sq_norms().unwrap());
    }

    #[test]
    fn blocked_kernel_matches_naive_bitwise_with_sparsity() {
        let mut rng = RandomSource::new(5);
        for &(m, k, n) in &[(1, 1, 1), (7, 13, 5), (9, 4, 17), (16, 30, 3)] {
            let mut a = rng.gauss_sample(0.0, 1.0, &[m, k]).unwrap();
            let mask = rng.bernoulli_mask(0.4, &[m, k]).unwrap();
            a.mul_assign(&mask).unwrap();
            let b = rng.gauss_sample(0.0, 1.0, &[k, n]).unwrap();
            assert_eq!(a.matmul(&b).unwrap(), naive(&a, &b));
        }
    }

    fn matrix(m: usize, n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-3.0f64..3.0, m * n)
            .prop_map(move |d| Tensor::from_vec(&[m, n], d).unwrap())
    }

    proptest! {
        #[test]
        fn associativity(a in matrix(3, 4), b in matrix(4, 5), c in matrix(5, 2)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) <= 1e-10);
        }

        #[test]
        fn transpose_of_product_is_exact(a in matrix(4, 6), b in matrix(6, 3)) {
            let lhs = a.matmul(&b).unwrap().transpose().unwrap();
            let rhs = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
