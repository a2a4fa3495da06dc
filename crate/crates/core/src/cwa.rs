//! Channel-wise alignment: gate channels, keep the strongest per segment,
//! and let the text attend over the resulting channel tokens.

use serde::{Deserialize, Serialize};

use crate::attention::{masked_cross_attention, MaskMode, Orientation, ProjectionSet};
use crate::decisions::Decisions;
use crate::error::{DapeError, Result};
use crate::mask::{affinity_matrix, binarize, AffinityMask, MaskLevel};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How selected channels are combined into one token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAgg {
    #[default]
    Mean,
    Sum,
}

/// Two-layer MLP over the spatially pooled channels, softmax output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelGate<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwaWeights<T> {
    pub gate: ChannelGate<T>,
    /// `I×d`, lifts channel tokens from positions to model width.
    pub lift: T,
    /// Queries from text, keys and values from channel tokens.
    pub attn: ProjectionSet<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CwaParams {
    pub segments: usize,
    pub k1: usize,
    pub k_c: f64,
    pub agg: ChannelAgg,
    pub mode: MaskMode,
}

/// `L` channel tokens and the channel indices behind each.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTokenSet<S> {
    /// `L×P`.
    pub tokens: Tensor<S>,
    pub selection: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct CwaOutput<S> {
    /// `J×d`.
    pub t2: Var,
    /// `L×J`, alphabet {0, 1}.
    pub ac: AffinityMask<S>,
    pub selection: Vec<Vec<usize>>,
    /// `1×d` gate weights.
    pub gate: Var,
}

/// `h×w×d` map to `d×(h·w)`: one row per channel.
pub fn channelize<S: Scalar>(m: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w, d) = m.require_rank3("channelize")?;
    m.reshaped(&[h * w, d])?.transpose()
}

pub fn dechannelize<S: Scalar>(c: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let (d, p) = c.require_matrix("dechannelize")?;
    if p != h * w {
        return Err(DapeError::dim("dechannelize", format!("{p} positions for a {h}×{w} map")));
    }
    c.transpose()?.reshape(&[h, w, d])
}

/// Gate weights for `tokens` (P×d): softmax(relu(mean·W1 + b1)·W2 + b2).
pub fn gate_channels<S: Scalar>(tape: &mut Tape<S>, tokens: Var, g: &ChannelGate<Var>) -> Result<Var> {
    let pooled = tape.mean_rows(tokens)?;
    let h = tape.matmul(pooled, g.w1)?;
    let h = tape.add_row(h, g.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, g.w2)?;
    let o = tape.add_row(o, g.b2)?;
    tape.row_softmax(o)
}

/// Indices of the `k1` largest weights in each of `segments` equal channel ranges.
/// Ties go to the lower index; each list is ascending.
pub fn topk_segments<S: Scalar>(a: &[S], segments: usize, k1: usize) -> Result<Vec<Vec<usize>>> {
    let d = a.len();
    if segments == 0 || d % segments != 0 {
        return Err(DapeError::Config(format!("{segments} segments do not divide {d} channels")));
    }
    let width = d / segments;
    if k1 == 0 || k1 > width {
        return Err(DapeError::Config(format!("k1 = {k1} outside 1..={width}")));
    }
    Ok((0..segments)
        .map(|l| {
            let mut idx: Vec<usize> = (l * width..(l + 1) * width).collect();
            idx.sort_by(|&x, &y| a[y].partial_cmp(&a[x]).unwrap_or(std::cmp::Ordering::Equal).then(x.cmp(&y)));
            idx.truncate(k1);
            idx.sort_unstable();
            idx
        })
        .collect())
}

/// `L×d` matrix that combines the selected channels of each segment.
pub fn aggregation_matrix<S: Scalar>(selection: &[Vec<usize>], d: usize, agg: ChannelAgg) -> Result<Tensor<S>> {
    let mut m = Tensor::zeros(&[selection.len(), d]);
    for (l, sel) in selection.iter().enumerate() {
        let w = match agg {
            ChannelAgg::Mean => S::one() / S::from_usize_lossy(sel.len()),
            ChannelAgg::Sum => S::one(),
        };
        for &c in sel {
            if c >= d {
                return Err(DapeError::Index(format!("channel {c} out of range for {d}")));
            }
            m.set2(l, c, w);
        }
    }
    Ok(m)
}

/// Channel tokens from channelized features `c` (d×P) and gate weights `a`.
pub fn select_topk_segments<S: Scalar>(
    c: &Tensor<S>,
    a: &[S],
    segments: usize,
    k1: usize,
    agg: ChannelAgg,
) -> Result<ChannelTokenSet<S>> {
    let (d, _) = c.require_matrix("select_topk_segments")?;
    if a.len() != d {
        return Err(DapeError::dim("select_topk_segments", format!("{} gate weights for {d} channels", a.len())));
    }
    let selection = topk_segments(a, segments, k1)?;
    let tokens = aggregation_matrix(&selection, d, agg)?.matmul(c)?;
    Ok(ChannelTokenSet { tokens, selection })
}

/// `m1` is `I×d` (positions by channels), `t1` is `J×d`.
pub fn cwa_block<S: Scalar>(
    tape: &mut Tape<S>,
    m1: Var,
    t1: Var,
    w: &CwaWeights<Var>,
    p: &CwaParams,
    decisions: &mut Decisions<S>,
) -> Result<CwaOutput<S>> {
    let (_, d) = tape.value(m1).require_matrix("cwa_block")?;
    let gate = gate_channels(tape, m1, &w.gate)?;
    let a = tape.value(gate).data().to_vec();
    let selection = decisions.selection(|| topk_segments(&a, p.segments, p.k1))?;
    let sel = tape.constant(aggregation_matrix(&selection, d, p.agg)?);
    let c = tape.transpose(m1)?;
    let b = tape.matmul(sel, c)?;
    let bp = tape.matmul(b, w.lift)?;
    let (bv, tv) = (tape.value(bp).clone(), tape.value(t1).clone());
    let ac = decisions.mask(|| {
        let aff = affinity_matrix(&bv, &tv)?;
        tape.charge_cosines(aff.len() as u64, bv.cols());
        Ok(binarize(&aff, p.k_c, S::one(), MaskLevel::Channel))
    })?;
    let t2 = masked_cross_attention(tape, t1, bp, w.attn.q, w.attn.k, w.attn.v, Some((&ac, Orientation::KeyByQuery)), p.mode)?;
    Ok(CwaOutput { t2, ac, selection, gate })
}

/// `T′ = T1 + T2`.
pub fn fuse_text<S: Scalar>(tape: &mut Tape<S>, t1: Var, t2: Var) -> Result<Var> {
    tape.add(t1, t2)
}
