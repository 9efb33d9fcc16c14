//! Dense tensors with a switchable numeric precision.
//!
//! Values are held as `f64` but in the default `F32` mode every produced
//! value is rounded to `f32` precision, so runs behave like 32-bit arithmetic
//! while gradient-check tests can flip to full `F64` per thread.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
}

pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Restores the previous precision when dropped.
pub struct PrecisionGuard(Precision);

impl PrecisionGuard {
    pub fn new(p: Precision) -> Self {
        let prev = precision();
        set_precision(p);
        PrecisionGuard(prev)
    }
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        set_precision(self.0);
    }
}

#[inline]
pub fn quantize(x: f64) -> f64 {
    match precision() {
        Precision::F32 => x as f32 as f64,
        Precision::F64 => x,
    }
}

/// A dense row-major tensor. Shapes are explicit; ops never broadcast
/// implicitly beyond what the graph layer provides.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {:?} expects {} values, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape, data }
    }

    /// Like `from_vec` but rounds every value to the active precision.
    pub fn from_vec_q(shape: Vec<usize>, mut data: Vec<f64>) -> Self {
        if precision() == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Tensor::from_vec(shape, data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![quantize(value); n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec_q(vec![1], vec![value])
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| quantize(f(i))).collect();
        Tensor { shape, data }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.rank() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{} tensor", r),
        }
    }

    pub fn cols(&self) -> usize {
        match self.rank() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("cols() on rank-{} tensor", r),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Panics with a diagnostic if any value is NaN or infinite. Called on
    /// every graph-op output: silent divergence is worse than an abort.
    pub fn assert_finite(&self, context: &str) {
        if let Some((i, v)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            panic!(
                "non-finite value {} at flat index {} (shape {:?}) in {}",
                v, i, self.shape, context
            );
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_fn(self.shape.clone(), |i| f(self.data[i]))
    }

    pub fn transposed(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose needs rank 2");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(vec![n, m], out)
    }

    /// Plain matrix product with a fixed accumulation order.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2, "matmul lhs rank");
        assert_eq!(rhs.rank(), 2, "matmul rhs rank");
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, p) = (rhs.shape[0], rhs.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {}x{} vs {}x{}", m, k, k2, p);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[kk * p..(kk + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        if precision() == Precision::F32 {
            for v in &mut out {
                *v = *v as f32 as f64;
            }
        }
        Tensor::from_vec(vec![m, p], out)
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape, rhs.shape, "add shape mismatch");
        Tensor::from_fn(self.shape.clone(), |i| self.data[i] + rhs.data[i])
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape, rhs.shape, "sub shape mismatch");
        Tensor::from_fn(self.shape.clone(), |i| self.data[i] - rhs.data[i])
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_fn(self.shape.clone(), |i| self.data[i] * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Squared L2 distance to another tensor of the same shape.
    pub fn sq_dist(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape, rhs.shape);
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn mse(&self, rhs: &Tensor) -> f64 {
        self.sq_dist(rhs) / self.numel() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        let t = Tensor::from_vec(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "expects")]
    fn bad_shape_panics() {
        Tensor::from_vec(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]);
        assert_eq!(eye.matmul(&b), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn f32_mode_rounds_values() {
        let _g = PrecisionGuard::new(Precision::F32);
        let t = Tensor::from_vec_q(vec![1], vec![0.1]);
        assert_eq!(t.item(), 0.1f32 as f64);
        let _g2 = PrecisionGuard::new(Precision::F64);
        let t = Tensor::from_vec_q(vec![1], vec![0.1]);
        assert_eq!(t.item(), 0.1);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn assert_finite_catches_nan() {
        let t = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]);
        t.assert_finite("test");
    }
}
