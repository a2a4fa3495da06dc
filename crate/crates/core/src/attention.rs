//! Scaled dot-product cross-attention gated by an affinity mask.

use serde::{Deserialize, Serialize};

use crate::error::{DapeError, Result};
use crate::mask::AffinityMask;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Query, key and value projections of one token stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet<T> {
    pub q: T,
    pub k: T,
    pub v: T,
}

impl<T> ProjectionSet<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ProjectionSet<U> {
        ProjectionSet { q: f(&self.q), k: f(&self.k), v: f(&self.v) }
    }
}

/// Where the mask enters the attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `softmax(S) ∘ A`, rows are not renormalised.
    #[default]
    PostSoftmax,
    /// Softmax restricted to the support of `A`, then scaled by `A`.
    /// A row with empty support yields zeros.
    PreSoftmax,
}

/// How a mask is laid out relative to (queries, keys).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Mask rows index queries.
    QueryByKey,
    /// Mask rows index keys; it is transposed before use.
    KeyByQuery,
}

/// Attention over already projected `q` (n×d), `k` (m×d), `v` (m×e).
pub fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<(&AffinityMask<S>, Orientation)>,
    mode: MaskMode,
) -> Result<Var> {
    let (n, d) = tape.value(q).require_matrix("attention")?;
    let (m, dk) = tape.value(k).require_matrix("attention")?;
    if d != dk || tape.value(v).rows() != m {
        return Err(DapeError::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", tape.shape(q), tape.shape(k), tape.shape(v)),
        ));
    }
    let weights = match mask {
        None => None,
        Some((a, orient)) => {
            let w = match orient {
                Orientation::QueryByKey => a.weights.clone(),
                Orientation::KeyByQuery => a.weights.transpose()?,
            };
            if w.shape() != [n, m] {
                return Err(DapeError::dim(
                    "attention",
                    format!("mask {:?} ({orient:?}) for {n} queries and {m} keys", a.weights.shape()),
                ));
            }
            Some(w)
        }
    };
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, S::one() / S::from_usize_lossy(d).sqrt())?;
    let p = match (weights, mode) {
        (None, _) => tape.row_softmax(s)?,
        (Some(w), MaskMode::PostSoftmax) => {
            let p = tape.row_softmax(s)?;
            let wv = tape.constant(w);
            tape.hadamard(p, wv)?
        }
        (Some(w), MaskMode::PreSoftmax) => {
            let bias = w.map(|x| if x > S::zero() { S::zero() } else { S::c(-1e30) });
            let bv = tape.constant(bias);
            let s = tape.add(s, bv)?;
            let p = tape.row_softmax(s)?;
            let wv = tape.constant(w);
            tape.hadamard(p, wv)?
        }
    };
    tape.matmul(p, v)
}

/// Queries from `x_q` through `w_q`; keys and values from `x_kv` through `w_k`, `w_v`.
#[allow(clippy::too_many_arguments)]
pub fn masked_cross_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x_q: Var,
    x_kv: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    mask: Option<(&AffinityMask<S>, Orientation)>,
    mode: MaskMode,
) -> Result<Var> {
    let q = tape.matmul(x_q, w_q)?;
    let k = tape.matmul(x_kv, w_k)?;
    let v = tape.matmul(x_kv, w_v)?;
    attend(tape, q, k, v, mask, mode)
}

/// Value-only reference: `(softmax(QKᵀ/√d) ∘ W) V` with `W` laid out query-by-key.
pub fn reference_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    w: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let d = q.cols();
    let s = q.matmul(&k.transpose()?)?.scale(S::one() / S::from_usize_lossy(d).sqrt());
    let mut p = s.row_softmax()?;
    if let Some(w) = w {
        p = p.hadamard(w)?;
    }
    p.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskLevel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(w: Tensor<f64>) -> AffinityMask<f64> {
        AffinityMask { weights: w, alphabet: vec![0.0, 1.0], level: MaskLevel::Coarse }
    }

    #[test]
    fn all_ones_mask_is_plain_attention() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (
            Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut r),
            Tensor::<f64>::uniform(&[5, 4], -1.0, 1.0, &mut r),
            Tensor::<f64>::uniform(&[5, 2], -1.0, 1.0, &mut r),
        );
        let ones = mask(Tensor::ones(&[5, 3]));
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let masked = attend(&mut t, qv, kv, vv, Some((&ones, Orientation::KeyByQuery)), MaskMode::PostSoftmax).unwrap();
        let plain = attend(&mut t, qv, kv, vv, None, MaskMode::PostSoftmax).unwrap();
        assert!(t.value(masked).max_abs_diff(t.value(plain)) < 1e-15);
        let oracle = reference_attention(&q, &k, &v, None).unwrap();
        assert!(t.value(plain).max_abs_diff(&oracle) < 1e-12);
        let pre = attend(&mut t, qv, kv, vv, Some((&ones, Orientation::KeyByQuery)), MaskMode::PreSoftmax).unwrap();
        assert!(t.value(pre).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn zero_mask_gives_zero_output_in_both_modes() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let q = t.constant(Tensor::<f64>::uniform(&[2, 3], -1.0, 1.0, &mut r));
        let k = t.constant(Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut r));
        let z = mask(Tensor::zeros(&[2, 4]));
        for mode in [MaskMode::PostSoftmax, MaskMode::PreSoftmax] {
            let out = attend(&mut t, q, k, k, Some((&z, Orientation::QueryByKey)), mode).unwrap();
            assert_eq!(t.value(out).max_abs(), 0.0);
        }
    }

    #[test]
    fn pre_softmax_renormalises_over_support() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::<f64>::zeros(&[1, 2]));
        let k = t.constant(Tensor::<f64>::zeros(&[3, 2]));
        let v = t.constant(Tensor::<f64>::from_f64(&[3, 1], &[1.0, 2.0, 4.0]).unwrap());
        let m = mask(Tensor::from_f64(&[1, 3], &[1.0, 0.0, 1.0]).unwrap());
        let pre = attend(&mut t, q, k, v, Some((&m, Orientation::QueryByKey)), MaskMode::PreSoftmax).unwrap();
        assert!((t.value(pre).data()[0] - 2.5).abs() < 1e-12);
        let post = attend(&mut t, q, k, v, Some((&m, Orientation::QueryByKey)), MaskMode::PostSoftmax).unwrap();
        assert!((t.value(post).data()[0] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_mask_shape_is_rejected() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::<f64>::zeros(&[2, 2]));
        let k = t.constant(Tensor::<f64>::zeros(&[3, 2]));
        let m = mask(Tensor::zeros(&[2, 3]));
        assert!(attend(&mut t, q, k, k, Some((&m, Orientation::KeyByQuery)), MaskMode::PostSoftmax).is_err());
    }
}
