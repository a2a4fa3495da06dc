//! Coarse-grained alignment: uniform tokens, one thresholded mask, two masked attentions.

use crate::attention::{masked_cross_attention, MaskMode, Orientation, ProjectionSet};
use crate::decisions::Decisions;
use crate::error::{DapeError, Result};
use crate::mask::{affinity_matrix, binarize, AffinityMask, MaskLevel};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokens::{cell_groups, even_spans, grid_cells, span_groups};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseParams {
    pub k0: f64,
    pub mode: MaskMode,
}

#[derive(Clone, Debug)]
pub struct CoarseOutput<S> {
    /// `J×d` text update.
    pub t1: Var,
    /// `I×d` image update.
    pub m1: Var,
    /// `I×J`, alphabet {0, 1}.
    pub a0: AffinityMask<S>,
}

/// Threshold the cosine affinity of two token matrices into the coarse mask.
pub fn coarse_mask<S: Scalar>(tape: &mut Tape<S>, m: &Tensor<S>, t: &Tensor<S>, k0: f64) -> Result<AffinityMask<S>> {
    let a = affinity_matrix(m, t)?;
    tape.charge_cosines(a.len() as u64, m.cols());
    Ok(binarize(&a, k0, S::one(), MaskLevel::Coarse))
}

/// Align image tokens `m` (I×d) and text tokens `t` (J×d).
///
/// `T1 = (softmax(Q_T K_Mᵀ/√d) ∘ A0ᵀ) V_M` and `M1 = (softmax(Q_M K_Tᵀ/√d) ∘ A0) V_T`.
pub fn coarse_align<S: Scalar>(
    tape: &mut Tape<S>,
    m: Var,
    t: Var,
    img: &ProjectionSet<Var>,
    txt: &ProjectionSet<Var>,
    p: &CoarseParams,
    decisions: &mut Decisions<S>,
) -> Result<CoarseOutput<S>> {
    let (mv, tv) = (tape.value(m).clone(), tape.value(t).clone());
    let a0 = decisions.mask(|| coarse_mask(tape, &mv, &tv, p.k0))?;
    if a0.weights.shape() != [mv.rows(), tv.rows()] {
        return Err(DapeError::Contract(format!(
            "coarse mask {:?} does not match {}×{} tokens",
            a0.weights.shape(),
            mv.rows(),
            tv.rows()
        )));
    }
    let t1 = masked_cross_attention(tape, t, m, txt.q, img.k, img.v, Some((&a0, Orientation::KeyByQuery)), p.mode)?;
    let m1 = masked_cross_attention(tape, m, t, img.q, txt.k, txt.v, Some((&a0, Orientation::QueryByKey)), p.mode)?;
    Ok(CoarseOutput { t1, m1, a0 })
}

/// The block from raw inputs: `m_raw` is `h×w×d`, `t_raw` is `l×d`.
#[allow(clippy::too_many_arguments)]
pub fn coarse_align_block<S: Scalar>(
    tape: &mut Tape<S>,
    m_raw: Var,
    t_raw: Var,
    s: usize,
    grid: (usize, usize),
    j: usize,
    img: &ProjectionSet<Var>,
    txt: &ProjectionSet<Var>,
    p: &CoarseParams,
    decisions: &mut Decisions<S>,
) -> Result<CoarseOutput<S>> {
    let (h, w, d) = tape.value(m_raw).require_rank3("coarse_align_block")?;
    let (l, dt) = tape.value(t_raw).require_matrix("coarse_align_block")?;
    if d != dt {
        return Err(DapeError::shapes("coarse_align_block", tape.shape(m_raw), tape.shape(t_raw)));
    }
    if j == 0 || j > l {
        return Err(DapeError::Config(format!("cannot split {l} text positions into {j} tokens")));
    }
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(DapeError::Config(format!("stride {s} does not divide {h}×{w}")));
    }
    grid_cells(h / s, w / s, grid.0, grid.1)?;
    let groups = cell_groups(&grid_cells(h, w, grid.0, grid.1)?, h, w)?;
    let flat = tape.reshape(m_raw, &[h * w, d])?;
    let m = tape.pool_rows(flat, &groups)?;
    let t = tape.pool_rows(t_raw, &span_groups(&even_spans(0, l, j))?)?;
    coarse_align(tape, m, t, img, txt, p, decisions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::reference_attention;
    use crate::tensor::downsample_avg;
    use crate::tokens::{tokenize_image, tokenize_text};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn projections(t: &mut Tape<f64>, d: usize, r: &mut ChaCha8Rng) -> ProjectionSet<Var> {
        let s = 1.0 / (d as f64).sqrt();
        ProjectionSet {
            q: t.param(Tensor::normal(&[d, d], s, r)),
            k: t.param(Tensor::normal(&[d, d], s, r)),
            v: t.param(Tensor::normal(&[d, d], s, r)),
        }
    }

    #[test]
    fn block_matches_explicit_pipeline() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let d = 6;
        let raw_m = Tensor::<f64>::uniform(&[8, 8, d], -1.0, 1.0, &mut r);
        let raw_t = Tensor::<f64>::uniform(&[6, d], -1.0, 1.0, &mut r);
        let mut t = Tape::new();
        let img = projections(&mut t, d, &mut r);
        let txt = projections(&mut t, d, &mut r);
        let (mv, tv) = (t.constant(raw_m.clone()), t.constant(raw_t.clone()));
        let p = CoarseParams { k0: 0.0, mode: MaskMode::PostSoftmax };
        let out = coarse_align_block(&mut t, mv, tv, 2, (2, 2), 3, &img, &txt, &p, &mut Decisions::live()).unwrap();

        let m0 = downsample_avg(&raw_m, 2).unwrap();
        let mt = tokenize_image(&m0, (2, 2)).unwrap().tokens;
        let tt = tokenize_text(&raw_t, 3).unwrap().tokens;
        let a = affinity_matrix(&mt, &tt).unwrap();
        let a0 = a.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        assert_eq!(out.a0.weights, a0);
        let w = |v: Var| t.value(v).clone();
        let t1 = reference_attention(
            &tt.matmul(&w(txt.q)).unwrap(),
            &mt.matmul(&w(img.k)).unwrap(),
            &mt.matmul(&w(img.v)).unwrap(),
            Some(&a0.transpose().unwrap()),
        )
        .unwrap();
        let m1 = reference_attention(
            &mt.matmul(&w(img.q)).unwrap(),
            &tt.matmul(&w(txt.k)).unwrap(),
            &tt.matmul(&w(txt.v)).unwrap(),
            Some(&a0),
        )
        .unwrap();
        assert!(t.value(out.t1).max_abs_diff(&t1) < 1e-12);
        assert!(t.value(out.m1).max_abs_diff(&m1) < 1e-12);
        assert_eq!(t.shape(out.t1), &[3, d]);
        assert_eq!(t.shape(out.m1), &[4, d]);
        assert_eq!(t.meter().cosines(crate::cost::Module::Head), 12);
    }

    #[test]
    fn threshold_one_blocks_everything() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let mut t = Tape::new();
        let img = projections(&mut t, 4, &mut r);
        let txt = projections(&mut t, 4, &mut r);
        let m = t.constant(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r));
        let tx = t.constant(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut r));
        let p = CoarseParams { k0: 1.0, mode: MaskMode::PostSoftmax };
        let out = coarse_align(&mut t, m, tx, &img, &txt, &p, &mut Decisions::live()).unwrap();
        assert_eq!(out.a0.nonzero(), 0);
        assert_eq!(t.value(out.t1).max_abs(), 0.0);
        assert_eq!(t.value(out.m1).max_abs(), 0.0);
    }
}
