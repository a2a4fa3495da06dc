//! Dense row-major tensors and the value-level kernels built on them.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{DapeError, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(DapeError::dim("tensor", format!("zero-sized axis in {shape:?}")));
        }
        if n != data.len() {
            return Err(DapeError::dim(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(DapeError::dim("from_rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::c(x)).collect())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { S::one() } else { S::zero() })
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(lo, hi);
        Self::from_fn(shape, |_| S::c(dist.sample(rng)))
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        Self::from_fn(shape, |_| S::c(dist.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(DapeError::dim(op, format!("expected a matrix, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn require_rank3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(DapeError::dim(op, format!("expected h×w×c, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    #[inline]
    pub fn get2(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: S) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    #[inline]
    pub fn get3(&self, y: usize, x: usize, c: usize) -> S {
        self.data[(y * self.shape[1] + x) * self.shape[2] + c]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(DapeError::shapes(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(DapeError::shapes("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_usize_lossy(self.len())
    }

    pub fn norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = Vec::with_capacity(self.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::new(&[c, r], out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(DapeError::shapes("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == S::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// Softmax along each row, with the row maximum subtracted first.
    pub fn row_softmax(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("row_softmax")?;
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Tensor::new(&[r, c], out)
    }

    /// Rows selected in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.require_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(DapeError::Index(format!("row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(&[idx.len(), c], out)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts.first().ok_or_else(|| DapeError::dim("concat_rows", "no parts"))?.cols();
        let mut data = Vec::new();
        let mut r = 0;
        for p in parts {
            let (pr, pc) = p.require_matrix("concat_rows")?;
            if pc != c {
                return Err(DapeError::shapes("concat_rows", parts[0].shape(), p.shape()));
            }
            data.extend_from_slice(&p.data);
            r += pr;
        }
        Tensor::new(&[r, c], data)
    }

    /// Column means of a matrix as a `1×n` row.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("mean_rows")?;
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        let inv = S::one() / S::from_usize_lossy(r);
        Tensor::new(&[1, c], out.into_iter().map(|x| x * inv).collect())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::c(x.as_f64())).collect(),
        }
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Cosine similarity clamped to `[-1, 1]`; a zero vector on either side gives 0.
pub fn cosine<S: Scalar>(u: &[S], v: &[S]) -> S {
    debug_assert_eq!(u.len(), v.len());
    let mut dot = S::zero();
    let mut nu = S::zero();
    let mut nv = S::zero();
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == S::zero() || nv == S::zero() {
        return S::zero();
    }
    (dot / (nu.sqrt() * nv.sqrt())).max(-S::one()).min(S::one())
}

/// Checked cosine over two rank-1 (or equal-length) tensors.
pub fn cosine_t<S: Scalar>(u: &Tensor<S>, v: &Tensor<S>) -> Result<S> {
    if u.len() != v.len() {
        return Err(DapeError::shapes("cosine", u.shape(), v.shape()));
    }
    Ok(cosine(u.data(), v.data()))
}

pub fn check_kernel_size(k: usize) -> Result<()> {
    if k % 2 == 0 || !(3..=7).contains(&k) {
        return Err(DapeError::Config(format!("kernel size must be 3, 5 or 7, got {k}")));
    }
    Ok(())
}

/// Depthwise same-size convolution with zero padding.
///
/// `x` is `h×w×c`, `weights` is `c×k×k` (one kernel per channel). The kernel
/// is applied as a correlation: output(y, x) = Σ w[dy][dx] · in(y+dy−r, x+dx−r).
pub fn conv2d_local<S: Scalar>(x: &Tensor<S>, kernel_size: usize, weights: &Tensor<S>) -> Result<Tensor<S>> {
    check_kernel_size(kernel_size)?;
    let (h, w, c) = x.require_rank3("conv2d_local")?;
    let k = kernel_size;
    if weights.shape() != [c, k, k] {
        return Err(DapeError::shapes("conv2d_local", &[c, k, k], weights.shape()));
    }
    let r = (k / 2) as isize;
    let xd = x.data();
    let wd = weights.data();
    let mut out = vec![S::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let obase = (y * w + xx) * c;
            for dy in 0..k {
                let sy = y as isize + dy as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..k {
                    let sx = xx as isize + dx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let ibase = (sy as usize * w + sx as usize) * c;
                    for ch in 0..c {
                        out[obase + ch] += wd[(ch * k + dy) * k + dx] * xd[ibase + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Average-pool an `h×w×d` map by `s` on both spatial axes.
pub fn downsample_avg<S: Scalar>(x: &Tensor<S>, s: usize) -> Result<Tensor<S>> {
    let (h, w, d) = x.require_rank3("downsample_avg")?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(DapeError::dim("downsample_avg", format!("factor {s} does not divide {h}×{w}")));
    }
    let (oh, ow) = (h / s, w / s);
    let inv = S::one() / S::from_usize_lossy(s * s);
    let mut out = vec![S::zero(); oh * ow * d];
    for y in 0..h {
        for xx in 0..w {
            let o = ((y / s) * ow + xx / s) * d;
            let i = (y * w + xx) * d;
            for ch in 0..d {
                out[o + ch] += x.data()[i + ch];
            }
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Tensor::new(&[oh, ow, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.get2(i, p) * b.get2(p, j)).sum()
        })
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let p = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., 0.]).unwrap();
        let q = Tensor::<f64>::from_f64(&[2, 2], &[0., 0., 0., 1.]).unwrap();
        assert_eq!(p.matmul(&q).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(7);
        let a = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform(&[4, 2], -1.0, 1.0, &mut r);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_works_in_f32() {
        let a = Tensor::<f32>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0f32]);
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::<f64>::from_f64(&[1, 2], &[0., 0.]).unwrap().row_softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::<f64>::from_f64(&[1, 2], &[1000., 0.]).unwrap().row_softmax().unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = Tensor::<f64>::from_f64(&[1, 3], &[1., 2., 3.]).unwrap().row_softmax().unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|x| x.exp()).sum();
        for (i, x) in [1f64, 2., 3.].iter().enumerate() {
            assert!((s.data()[i] - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0f64, -1.0], &[3.0, -1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0f64, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-15);
        assert_eq!(cosine(&[0.0f64, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn conv_identity_and_constant() {
        let mut r = rng(3);
        let x = Tensor::<f64>::uniform(&[5, 5, 2], -1.0, 1.0, &mut r);
        let mut w = Tensor::<f64>::zeros(&[2, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[9 + 4] = 1.0;
        assert_eq!(conv2d_local(&x, 3, &w).unwrap(), x);

        let v = 0.7;
        let x = Tensor::<f64>::full(&[4, 4, 1], v);
        let out = conv2d_local(&x, 3, &Tensor::ones(&[1, 3, 3])).unwrap();
        assert!((out.get3(1, 1, 0) - 9.0 * v).abs() < 1e-12);
        assert!((out.get3(2, 2, 0) - 9.0 * v).abs() < 1e-12);
        assert!((out.get3(0, 0, 0) - 4.0 * v).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_sliding_window() {
        let mut r = rng(11);
        let x = Tensor::<f64>::uniform(&[5, 5, 1], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::uniform(&[1, 3, 3], -1.0, 1.0, &mut r);
        let out = conv2d_local(&x, 3, &w).unwrap();
        let padded = |y: i32, xx: i32| {
            if (0..5).contains(&y) && (0..5).contains(&xx) {
                x.get3(y as usize, xx as usize, 0)
            } else {
                0.0
            }
        };
        for y in 0..5i32 {
            for xx in 0..5i32 {
                let mut acc = 0.0;
                for i in 0..3i32 {
                    for j in 0..3i32 {
                        acc += w.data()[(i * 3 + j) as usize] * padded(y + i - 1, xx + j - 1);
                    }
                }
                assert!((out.get3(y as usize, xx as usize, 0) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let x = Tensor::<f64>::zeros(&[4, 4, 1]);
        assert!(matches!(conv2d_local(&x, 4, &Tensor::zeros(&[1, 4, 4])), Err(DapeError::Config(_))));
    }

    #[test]
    fn downsample_examples() {
        let mut r = rng(5);
        let x = Tensor::<f64>::uniform(&[4, 4, 3], -1.0, 1.0, &mut r);
        assert_eq!(downsample_avg(&x, 1).unwrap(), x);
        let b = Tensor::<f64>::from_f64(&[2, 2, 1], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(downsample_avg(&b, 2).unwrap().data(), &[2.5]);
        let out = downsample_avg(&x, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                for c in 0..3 {
                    let m: f64 = (0..2)
                        .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                        .map(|(dy, dx)| x.get3(2 * oy + dy, 2 * ox + dx, c))
                        .sum::<f64>()
                        / 4.0;
                    assert!((out.get3(oy, ox, c) - m).abs() < 1e-12);
                }
            }
        }
        assert!(downsample_avg(&Tensor::<f64>::zeros(&[3, 4, 1]), 2).is_err());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000) {
            let mut r = rng(seed);
            let a = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut r);
            let b = Tensor::<f64>::uniform(&[4, 2], -1.0, 1.0, &mut r);
            let c = Tensor::<f64>::uniform(&[2, 5], -1.0, 1.0, &mut r);
            let l = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let rr = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(l.max_abs_diff(&rr) < 1e-9);
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(seed in 0u64..1000, shift in -50.0f64..50.0) {
            let mut r = rng(seed);
            let a = Tensor::<f64>::uniform(&[3, 6], -10.0, 10.0, &mut r);
            let s = a.row_softmax().unwrap();
            for i in 0..3 {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(s.row(i).iter().all(|&x| x >= 0.0));
            }
            let shifted = a.map(|x| x + shift).row_softmax().unwrap();
            prop_assert!(shifted.max_abs_diff(&s) < 1e-12);
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in proptest::collection::vec(-5.0f64..5.0, 6),
            v in proptest::collection::vec(-5.0f64..5.0, 6),
            alpha in 0.01f64..100.0,
        ) {
            prop_assert_eq!(cosine(&u, &v), cosine(&v, &u));
            let su: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine(&su, &v) - cosine(&u, &v)).abs() < 1e-12);
        }

        #[test]
        fn downsample_preserves_mean(seed in 0u64..1000, s in 1usize..4) {
            let mut r = rng(seed);
            let x = Tensor::<f64>::uniform(&[12, 12, 2], -3.0, 3.0, &mut r);
            let y = downsample_avg(&x, s).unwrap();
            prop_assert!((x.mean() - y.mean()).abs() < 1e-12);
        }
    }
}
