//! Dense row-major matrices and the handful of kernels the model needs.

use serde::{Deserialize, Serialize};

/// A row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        Mat::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Gather the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn vstack(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map_or(0, |m| m.cols);
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            assert_eq!(m.cols, cols, "vstack: column mismatch");
            data.extend_from_slice(&m.data);
        }
        Mat::from_vec(rows, cols, data)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Strided view description for [`gemm`]: `(data, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> Self {
        Self {
            data: &m.data,
            rs: m.cols as isize,
            cs: 1,
        }
    }

    /// Row-major `rows × cols` view over a raw slice.
    pub fn raw(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c ← alpha · a·b + beta · c` where `a` is `m × k`, `b` is `k × n` and `c` is a
/// row-major `m × n` buffer with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds: the last touched element of each operand must be in range.
    let last = |v: &View<'_>, r: usize, q: usize| {
        if r == 0 || q == 0 {
            0
        } else {
            ((r - 1) as isize * v.rs + (q - 1) as isize * v.cs) as usize
        }
    };
    assert!(k == 0 || last(&a, m, k) < a.data.len(), "gemm: a out of bounds");
    assert!(k == 0 || last(&b, k, n) < b.data.len(), "gemm: b out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "gemm: c out of bounds");
    if k == 0 {
        c.chunks_mut(ldc)
            .take(m)
            .for_each(|row| row[..n].iter_mut().for_each(|v| *v *= beta));
        return;
    }
    // SAFETY: all strided accesses were bounds-checked above; the slices are
    // distinct borrows so `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// `a · b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul: inner dimension mismatch");
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, 1.0, View::of(a), View::of(b), 0.0, &mut c.data, b.cols);
    c
}

/// `acc += aᵀ · b`
pub fn matmul_tn_acc(a: &Mat, b: &Mat, acc: &mut [f64]) {
    assert_eq!(a.rows, b.rows);
    gemm(a.cols, a.rows, b.cols, 1.0, View::of(a).t(), View::of(b), 1.0, acc, b.cols);
}

/// `e^x` by range reduction to `|r| ≤ ln2/2` and a degree-13 Taylor
/// polynomial evaluated in Estrin form. Within a few ulp of [`f64::exp`] on
/// `[-708, 709]`; saturates outside that range. Branch-free, no float→int
/// conversion, so loops over it vectorise.
#[inline]
pub fn exp(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5·2^52
    const C: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let xc = x.max(-708.0).min(709.0);
    // the low mantissa bits of `kr` hold round(x / ln2) in two's complement
    let kr = xc * std::f64::consts::LOG2_E + ROUND;
    let k = kr - ROUND;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q = |i: usize| C[i] + C[i + 1] * r;
    let s0 = q(0) + q(2) * r2;
    let s1 = q(4) + q(6) * r2;
    let s2 = q(8) + q(10) * r2;
    let s3 = q(12);
    let p = (s0 + s1 * r4) + (s2 + s3 * r4) * r8;
    let scale = f64::from_bits(kr.to_bits().wrapping_add(1023) << 52);
    // NaN passes through min/max as a bound; `x - x` restores it
    p * scale + (x - x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = exp(-x.abs());
    let inv = 1.0 / (1.0 + e);
    if x >= 0.0 { inv } else { e * inv }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_std() {
        let mut worst: f64 = 0.0;
        for i in -70_800..=70_899 {
            let x = i as f64 * 0.01 + 0.003_7;
            let (a, b) = (exp(x), x.exp());
            worst = worst.max(((a - b) / b).abs());
        }
        assert!(worst < 4.0 * f64::EPSILON, "{worst:e}");
        assert_eq!(exp(0.0), 1.0);
        assert!(exp(f64::NAN).is_nan());
        assert!(exp(-1e6) >= 0.0 && exp(-1e6) < 1e-300);
    }

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                c.data[i * b.cols + j] = (0..a.cols).map(|k| a.get(i, k) * b.get(k, j)).sum();
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Mat::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|v| (v as f64).sin()).collect());
        let c = matmul(&a, &b);
        let d = naive(&a, &b);
        for (x, y) in c.data.iter().zip(&d.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_accumulate() {
        let a = Mat::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(3, 1, vec![1., 1., 1.]);
        let mut acc = vec![1.0, 1.0];
        matmul_tn_acc(&a, &b, &mut acc);
        assert_eq!(acc, vec![10.0, 13.0]);
    }

    #[test]
    fn silu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
