//! Non-uniform fine-grained alignment.
//!
//! Channels are split into three branches, each convolved and tokenised at
//! its own granularity. Level 1 has `I` tokens on the base grid, level 2 has
//! `2I` (each level-1 cell halved along x) and level 3 has `4I` (each level-2
//! cell halved along y). Children of row `r` are rows `2r` and `2r + 1`, and
//! text spans are refined the same way, so an upscaled mask row at level 1
//! covers exactly its descendants at levels 2 and 3.

use serde::{Deserialize, Serialize};

use crate::attention::{attend, MaskMode, Orientation, ProjectionSet};
use crate::cost::Module;
use crate::decisions::Decisions;
use crate::error::{DapeError, Result};
use crate::mask::{affinity_matrix, AffinityMask, MaskLevel};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{check_kernel_size, conv2d_local, cosine, Tensor};
use crate::tokens::{cell_groups, pool_cells, pool_spans, refine_spans, span_groups, Modality, Provenance, TokenSet};

#[derive(Clone, Debug, PartialEq)]
pub struct NfaParams {
    pub mu: [f64; 3],
    pub kernels: [usize; 3],
    pub k_thr: f64,
    pub tau_d: f64,
    /// Level-1 grid `(gy, gx)`.
    pub grid: (usize, usize),
    /// When false only level 1 is evaluated.
    pub refine: bool,
    /// Score with values instead of keys inside the softmax.
    pub eq8_literal: bool,
    pub mode: MaskMode,
}

impl NfaParams {
    pub fn hierarchy(&self) -> HierarchyParams {
        HierarchyParams { mu: self.mu, k_thr: self.k_thr, tau_d: self.tau_d, refine: self.refine }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HierarchyParams {
    pub mu: [f64; 3],
    pub k_thr: f64,
    pub tau_d: f64,
    pub refine: bool,
}

/// Depthwise kernels, per-branch projections to width `d`, and the update attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NfaWeights<T> {
    /// Branch `k` kernel, `w_k × n_k × n_k`.
    pub conv: [T; 3],
    /// Branch `k` projection, `w_k × d`.
    pub branch_proj: [T; 3],
    /// `q` is `c×d` over image channels; `k`, `v` are `d×d` over text.
    pub attn: ProjectionSet<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GranularitySplit<S> {
    /// Convolved branches, `h×w×w_k`.
    pub branches: [Tensor<S>; 3],
    pub widths: [usize; 3],
    pub kernels: [usize; 3],
}

/// Largest-remainder rounding of `μ·c`; every branch must get a channel.
pub fn split_widths(mu: [f64; 3], c: usize) -> Result<[usize; 3]> {
    if mu.iter().any(|&m| !(m > 0.0)) || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DapeError::Config(format!("split ratios {mu:?} must be positive and sum to 1")));
    }
    let exact: Vec<f64> = mu.iter().map(|&m| m * c as f64).collect();
    let mut widths = [0usize; 3];
    for k in 0..3 {
        widths[k] = exact[k].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = c - widths.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        widths[k] += 1;
        left -= 1;
    }
    if widths.contains(&0) {
        return Err(DapeError::Config(format!("{c} channels leave an empty branch under {mu:?}")));
    }
    Ok(widths)
}

/// Channel ranges of the three branches.
pub fn branch_ranges(widths: [usize; 3]) -> [std::ops::Range<usize>; 3] {
    [0..widths[0], widths[0]..widths[0] + widths[1], widths[0] + widths[1]..widths.iter().sum()]
}

pub fn split_channels<S: Scalar>(
    m: &Tensor<S>,
    mu: [f64; 3],
    kernels: [usize; 3],
    weights: [&Tensor<S>; 3],
) -> Result<GranularitySplit<S>> {
    let (h, w, c) = m.require_rank3("split_channels")?;
    let widths = split_widths(mu, c)?;
    let ranges = branch_ranges(widths);
    let mut out: Vec<Tensor<S>> = Vec::with_capacity(3);
    for k in 0..3 {
        check_kernel_size(kernels[k])?;
        let r = ranges[k].clone();
        let part = Tensor::from_fn(&[h, w, widths[k]], |i| {
            let (pos, ch) = (i / widths[k], i % widths[k]);
            m.data()[pos * c + r.start + ch]
        });
        out.push(conv2d_local(&part, kernels[k], weights[k])?);
    }
    let branches: [Tensor<S>; 3] = out.try_into().expect("three branches");
    Ok(GranularitySplit { branches, widths, kernels })
}

/// Cells of `level` (1, 2 or 3) over an `h×w` map in hierarchical order.
pub fn level_cells(h: usize, w: usize, grid: (usize, usize), level: usize) -> Result<Vec<Provenance>> {
    let (gy, gx) = grid;
    if gy == 0 || gx == 0 || h % (2 * gy) != 0 || w % (2 * gx) != 0 {
        return Err(DapeError::dim(
            "level_cells",
            format!("base grid {gy}×{gx} needs a map divisible by {}×{}, got {h}×{w}", 2 * gy, 2 * gx),
        ));
    }
    if !(1..=3).contains(&level) {
        return Err(DapeError::dim("level_cells", format!("no level {level}")));
    }
    let (ch, cw) = (h / gy, w / gx);
    let mut cells: Vec<Provenance> = (0..gy * gx)
        .map(|i| {
            let (r, c) = (i / gx, i % gx);
            Provenance::Cell { y0: r * ch, y1: (r + 1) * ch, x0: c * cw, x1: (c + 1) * cw }
        })
        .collect();
    if level >= 2 {
        cells = cells
            .into_iter()
            .flat_map(|p| {
                let Provenance::Cell { y0, y1, x0, x1 } = p else { unreachable!() };
                let xm = (x0 + x1) / 2;
                [Provenance::Cell { y0, y1, x0, x1: xm }, Provenance::Cell { y0, y1, x0: xm, x1 }]
            })
            .collect();
    }
    if level == 3 {
        cells = cells
            .into_iter()
            .flat_map(|p| {
                let Provenance::Cell { y0, y1, x0, x1 } = p else { unreachable!() };
                let ym = (y0 + y1) / 2;
                [Provenance::Cell { y0, y1: ym, x0, x1 }, Provenance::Cell { y0: ym, y1, x0, x1 }]
            })
            .collect();
    }
    Ok(cells)
}

/// For each cell of the row-major `2gy×2gx` level-3 grid, its hierarchical index.
pub fn level3_row_major(grid: (usize, usize)) -> Vec<usize> {
    let (gy, gx) = grid;
    (0..4 * gy * gx)
        .map(|p| {
            let (r, c) = (p / (2 * gx), p % (2 * gx));
            let l1 = (r / 2) * gx + c / 2;
            let l2 = 2 * l1 + c % 2;
            2 * l2 + r % 2
        })
        .collect()
}

/// Text spans at `level`: each base span halved `level − 1` times.
pub fn level_text_spans(base: &[Provenance], level: usize) -> Result<Vec<Provenance>> {
    let mut spans = base.to_vec();
    for _ in 1..level {
        spans = refine_spans(&spans, 2)?;
    }
    Ok(spans)
}

/// Branch `k` tokenised at level `k + 1`; tokens keep the branch width.
pub fn tokenize_multiscale<S: Scalar>(split: &GranularitySplit<S>, grid: (usize, usize)) -> Result<[TokenSet<S>; 3]> {
    let (h, w, _) = split.branches[0].require_rank3("tokenize_multiscale")?;
    let mut out = Vec::with_capacity(3);
    for k in 0..3 {
        let cells = level_cells(h, w, grid, k + 1)?;
        out.push(TokenSet { tokens: pool_cells(&split.branches[k], &cells)?, provenance: cells, modality: Modality::Image });
    }
    Ok(out.try_into().expect("three levels"))
}

fn level_tag(level: usize) -> MaskLevel {
    match level {
        1 => MaskLevel::Fine1,
        2 => MaskLevel::Fine2,
        _ => MaskLevel::Fine3,
    }
}

/// Cosine mask on `active_rows` only, binarised to {0, μ_k}. Returns the mask and the cosine count.
pub fn level_mask<S: Scalar>(
    x: &Tensor<S>,
    t: &Tensor<S>,
    k_thr: f64,
    mu_k: S,
    active_rows: &[usize],
    level: usize,
) -> Result<(AffinityMask<S>, u64)> {
    let (n, d) = x.require_matrix("level_mask")?;
    let (m, dt) = t.require_matrix("level_mask")?;
    if d != dt {
        return Err(DapeError::shapes("level_mask", x.shape(), t.shape()));
    }
    let mut mask = AffinityMask::zeros(n, m, mu_k, level_tag(level));
    let thr = S::c(k_thr);
    for &r in active_rows {
        if r >= n {
            return Err(DapeError::Index(format!("active row {r} out of range for {n} rows")));
        }
        for j in 0..m {
            if cosine(x.row(r), t.row(j)) > thr {
                mask.weights.set2(r, j, mu_k);
            }
        }
    }
    Ok((mask, (active_rows.len() * m) as u64))
}

/// Rows whose nonzero fraction exceeds `tau_d`, ascending.
pub fn density_flag<S: Scalar>(mask: &AffinityMask<S>, tau_d: f64) -> Vec<usize> {
    let cols = mask.cols() as f64;
    (0..mask.rows()).filter(|&r| mask.row_nonzero(r) as f64 / cols > tau_d).collect()
}

/// Nearest-neighbour block replication to `rows × cols`.
pub fn upscale_mask<S: Scalar>(mask: &AffinityMask<S>, rows: usize, cols: usize) -> Result<AffinityMask<S>> {
    let (r0, c0) = (mask.rows(), mask.cols());
    if rows % r0 != 0 || cols % c0 != 0 {
        return Err(DapeError::dim("upscale_mask", format!("{r0}×{c0} does not tile {rows}×{cols}")));
    }
    let (fy, fx) = (rows / r0, cols / c0);
    Ok(AffinityMask {
        weights: Tensor::from_fn(&[rows, cols], |i| mask.weights.get2(i / cols / fy, (i % cols) / fx)),
        alphabet: mask.alphabet.clone(),
        level: mask.level,
    })
}

/// Rows `2r` and `2r + 1` for every `r`.
pub fn children(rows: &[usize]) -> Vec<usize> {
    rows.iter().flat_map(|&r| [2 * r, 2 * r + 1]).collect()
}

/// Every value `e1 + e2 + e3` with `e_k ∈ {0, μ_k}`, summed in that order.
pub fn lattice<S: Scalar>(mu: [f64; 3]) -> Vec<S> {
    let m: Vec<S> = mu.iter().map(|&x| S::c(x)).collect();
    let mut out: Vec<S> = (0..8)
        .map(|b| {
            let e = |k: usize| if b & (1 << k) != 0 { m[k] } else { S::zero() };
            e(0) + e(1) + e(2)
        })
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    out.dedup();
    out
}

/// Cosines the uniform-fine baseline evaluates: every level on every row.
pub fn uniform_cosines(i: usize, j: usize) -> u64 {
    21 * (i * j) as u64
}

/// Cosines evaluated with `n1` dense level-1 rows and `n2` dense level-2 rows.
pub fn hierarchical_cosines(i: usize, j: usize, n1: usize, n2: usize) -> u64 {
    (i * j + 4 * n1 * j + 8 * n2 * j) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalMask<S> {
    /// `A″_k` upscaled to `4I×4J`.
    pub levels: [AffinityMask<S>; 3],
    /// `A′ = A″₁ + A″₂ + A″₃`.
    pub combined: AffinityMask<S>,
    /// Dense rows at level 1 and level 2, in their own level's indexing.
    pub dense: [Vec<usize>; 2],
    pub cosines: [u64; 3],
    pub base: (usize, usize),
}

impl<S: Scalar> HierarchicalMask<S> {
    pub fn total_cosines(&self) -> u64 {
        self.cosines.iter().sum()
    }

    /// Structural invariants: the sum, the alphabets, and refinement nesting.
    pub fn check(&self) -> Result<()> {
        for l in &self.levels {
            l.validate()?;
        }
        self.combined.validate()?;
        let sum = self.levels[0].weights.add(&self.levels[1].weights)?.add(&self.levels[2].weights)?;
        if sum != self.combined.weights {
            return Err(DapeError::Contract("combined mask is not the sum of its levels".into()));
        }
        let dense1: std::collections::BTreeSet<usize> = self.dense[0].iter().copied().collect();
        let dense2: std::collections::BTreeSet<usize> = self.dense[1].iter().copied().collect();
        if let Some(r) = dense2.iter().find(|&&r| !dense1.contains(&(r / 2))) {
            return Err(DapeError::Contract(format!("dense level-2 row {r} has a sparse parent")));
        }
        for r in 0..self.combined.rows() {
            if self.levels[1].row_nonzero(r) > 0 && !dense1.contains(&(r / 4)) {
                return Err(DapeError::Contract(format!("level-2 entry in row {r} outside a dense level-1 row")));
            }
            if self.levels[2].row_nonzero(r) > 0 && !dense2.contains(&(r / 2)) {
                return Err(DapeError::Contract(format!("level-3 entry in row {r} outside a dense level-2 row")));
            }
        }
        Ok(())
    }
}

/// Build `A′` from per-level image tokens (`I`, `2I`, `4I` rows) and text tokens (`J`, `2J`, `4J` rows).
pub fn hierarchy_from_level_tokens<S: Scalar>(
    x: [&Tensor<S>; 3],
    t: [&Tensor<S>; 3],
    p: &HierarchyParams,
) -> Result<HierarchicalMask<S>> {
    let tau_d = p.tau_d;
    let refine = p.refine;
    hierarchy_with_flags(x, t, p.mu, p.k_thr, &mut |mask, _| if refine { density_flag(mask, tau_d) } else { Vec::new() })
}

/// As [`hierarchy_from_level_tokens`] with the dense-row rule supplied by the caller.
/// `flag(mask, level)` sees the level-1 or level-2 mask and returns rows to refine;
/// rows outside the active set are dropped.
pub fn hierarchy_with_flags<S: Scalar>(
    x: [&Tensor<S>; 3],
    t: [&Tensor<S>; 3],
    mu: [f64; 3],
    k_thr: f64,
    flag: &mut dyn FnMut(&AffinityMask<S>, usize) -> Vec<usize>,
) -> Result<HierarchicalMask<S>> {
    let (i, j) = (x[0].rows(), t[0].rows());
    for k in 0..3 {
        if x[k].rows() != i << k || t[k].rows() != j << k {
            return Err(DapeError::dim(
                "build_hierarchy",
                format!("level {} has {}×{} tokens, expected {}×{}", k + 1, x[k].rows(), t[k].rows(), i << k, j << k),
            ));
        }
    }
    let m: Vec<S> = mu.iter().map(|&v| S::c(v)).collect();
    let all: Vec<usize> = (0..i).collect();
    let (a1, c1) = level_mask(x[0], t[0], k_thr, m[0], &all, 1)?;
    let dense1 = restrict(flag(&a1, 1), &all);
    let active2 = children(&dense1);
    let (a2, c2) = level_mask(x[1], t[1], k_thr, m[1], &active2, 2)?;
    let dense2 = restrict(flag(&a2, 2), &active2);
    let (a3, c3) = level_mask(x[2], t[2], k_thr, m[2], &children(&dense2), 3)?;
    let (rows, cols) = (4 * i, 4 * j);
    let levels = [upscale_mask(&a1, rows, cols)?, upscale_mask(&a2, rows, cols)?, upscale_mask(&a3, rows, cols)?];
    let weights = levels[0].weights.add(&levels[1].weights)?.add(&levels[2].weights)?;
    let combined = AffinityMask { weights, alphabet: lattice(mu), level: MaskLevel::Combined };
    let h = HierarchicalMask { levels, combined, dense: [dense1, dense2], cosines: [c1, c2, c3], base: (i, j) };
    h.check()?;
    Ok(h)
}

fn restrict(mut rows: Vec<usize>, active: &[usize]) -> Vec<usize> {
    rows.sort_unstable();
    rows.dedup();
    rows.retain(|r| active.binary_search(r).is_ok());
    rows
}

/// Value-level similarity tokens of [`nfa_block`]: per-level image tokens projected to
/// width `d`, and the matching text span means.
pub fn similarity_tokens<S: Scalar>(
    map: &Tensor<S>,
    text: &Tensor<S>,
    base_spans: &[Provenance],
    conv: [&Tensor<S>; 3],
    branch_proj: [&Tensor<S>; 3],
    p: &NfaParams,
) -> Result<([Tensor<S>; 3], [Tensor<S>; 3])> {
    let (h, w, _) = map.require_rank3("similarity_tokens")?;
    let split = split_channels(map, p.mu, p.kernels, conv)?;
    let mut xs = Vec::with_capacity(3);
    let mut ts = Vec::with_capacity(3);
    for k in 0..3 {
        let cells = level_cells(h, w, p.grid, k + 1)?;
        xs.push(pool_cells(&split.branches[k], &cells)?.matmul(branch_proj[k])?);
        ts.push(pool_spans(text, &level_text_spans(base_spans, k + 1)?)?);
    }
    Ok((xs.try_into().expect("three levels"), ts.try_into().expect("three levels")))
}

/// `M2 = (softmax(Q_M K_Tᵀ/√d) ∘ A′) V_T`; with `eq8_literal` the score uses `V_T`.
#[allow(clippy::too_many_arguments)]
pub fn nfa_attention<S: Scalar>(
    tape: &mut Tape<S>,
    m_tokens: Var,
    t_tokens: Var,
    a_prime: &AffinityMask<S>,
    proj: &ProjectionSet<Var>,
    eq8_literal: bool,
    mode: MaskMode,
) -> Result<Var> {
    let (n, _) = tape.value(m_tokens).require_matrix("nfa_attention")?;
    let (m, _) = tape.value(t_tokens).require_matrix("nfa_attention")?;
    if a_prime.weights.shape() != [n, m] {
        return Err(DapeError::dim(
            "nfa_attention",
            format!("mask {:?} for {n} image and {m} text tokens", a_prime.weights.shape()),
        ));
    }
    let q = tape.matmul(m_tokens, proj.q)?;
    let v = tape.matmul(t_tokens, proj.v)?;
    let k = if eq8_literal { v } else { tape.matmul(t_tokens, proj.k)? };
    attend(tape, q, k, v, Some((a_prime, Orientation::QueryByKey)), mode)
}

#[derive(Clone, Debug)]
pub struct NfaOutput<S> {
    /// `4I×d`, rows in hierarchical level-3 order.
    pub m2: Var,
    pub hierarchy: HierarchicalMask<S>,
}

/// Full block on a spatial map `map` (h×w×c) and text positions `text` (l×d)
/// whose level-1 tokens are `base_spans`. Work is charged to the NFA bucket.
pub fn nfa_block<S: Scalar>(
    tape: &mut Tape<S>,
    map: Var,
    text: Var,
    base_spans: &[Provenance],
    w: &NfaWeights<Var>,
    p: &NfaParams,
    decisions: &mut Decisions<S>,
) -> Result<NfaOutput<S>> {
    let prev = tape.enter(Module::Nfa);
    let out = nfa_block_inner(tape, map, text, base_spans, w, p, decisions);
    tape.enter(prev);
    out
}

fn nfa_block_inner<S: Scalar>(
    tape: &mut Tape<S>,
    map: Var,
    text: Var,
    base_spans: &[Provenance],
    w: &NfaWeights<Var>,
    p: &NfaParams,
    decisions: &mut Decisions<S>,
) -> Result<NfaOutput<S>> {
    let (h, wd, c) = tape.value(map).require_rank3("nfa_block")?;
    let widths = split_widths(p.mu, c)?;
    let ranges = branch_ranges(widths);
    let flat = tape.reshape(map, &[h * wd, c])?;
    let mut branches = Vec::with_capacity(3);
    for k in 0..3 {
        check_kernel_size(p.kernels[k])?;
        let cols: Vec<usize> = ranges[k].clone().collect();
        let part = tape.gather_cols(flat, &cols)?;
        let part = tape.reshape(part, &[h, wd, widths[k]])?;
        let conv = tape.conv2d(part, w.conv[k], p.kernels[k])?;
        branches.push(tape.reshape(conv, &[h * wd, widths[k]])?);
    }
    let text_val = tape.value(text).clone();
    let d = text_val.cols();
    let mut xs = Vec::with_capacity(3);
    let mut ts = Vec::with_capacity(3);
    let mut level3_groups = Vec::new();
    for k in 0..3 {
        let cells = level_cells(h, wd, p.grid, k + 1)?;
        let groups = cell_groups(&cells, h, wd)?;
        let pooled = pool_grouped(tape.value(branches[k]), &groups);
        let proj = tape.value(w.branch_proj[k]);
        if proj.shape() != [widths[k], d] {
            return Err(DapeError::shapes("nfa_block", proj.shape(), &[widths[k], d]));
        }
        xs.push(pooled.matmul(proj)?);
        tape.charge_macs((h * wd * widths[k] + cells.len() * widths[k] * d) as u64);
        let spans = level_text_spans(base_spans, k + 1)?;
        ts.push(pool_spans(&text_val, &spans)?);
        tape.charge_macs((text_val.rows() * d) as u64);
        if k == 2 {
            level3_groups = groups;
        }
    }
    let hp = p.hierarchy();
    let hierarchy = decisions.hierarchy(|| {
        let hm = hierarchy_from_level_tokens([&xs[0], &xs[1], &xs[2]], [&ts[0], &ts[1], &ts[2]], &hp)?;
        tape.charge_cosines(hm.total_cosines(), d);
        Ok(hm)
    })?;
    let joined = tape.concat_cols(&branches)?;
    let m_tokens = tape.pool_rows(joined, &level3_groups)?;
    let spans3 = level_text_spans(base_spans, 3)?;
    let t_tokens = tape.pool_rows(text, &span_groups(&spans3)?)?;
    let m2 = nfa_attention(tape, m_tokens, t_tokens, &hierarchy.combined, &w.attn, p.eq8_literal, p.mode)?;
    Ok(NfaOutput { m2, hierarchy })
}

fn pool_grouped<S: Scalar>(x: &Tensor<S>, groups: &[Vec<usize>]) -> Tensor<S> {
    let n = x.cols();
    let mut out = Tensor::zeros(&[groups.len(), n]);
    for (g, members) in groups.iter().enumerate() {
        let row = out.row_mut(g);
        for &r in members {
            for (o, &v) in row.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let inv = S::one() / S::from_usize_lossy(members.len());
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    out
}

/// Dense full-materialisation reference: every level on every row, inactive rows zeroed afterwards.
pub fn full_materialization<S: Scalar>(
    x: [&Tensor<S>; 3],
    t: [&Tensor<S>; 3],
    p: &HierarchyParams,
) -> Result<(Tensor<S>, u64)> {
    let mut cos = 0u64;
    let mut raw = Vec::new();
    for k in 0..3 {
        let a = affinity_matrix(x[k], t[k])?;
        cos += a.len() as u64;
        let mu = S::c(p.mu[k]);
        raw.push(a.map(|v| if v > S::c(p.k_thr) { mu } else { S::zero() }));
    }
    let (i, j) = (x[0].rows(), t[0].rows());
    let frac = |m: &Tensor<S>, r: usize| {
        m.row(r).iter().filter(|&&v| v != S::zero()).count() as f64 / m.cols() as f64 > p.tau_d
    };
    let dense1: Vec<bool> = (0..i).map(|r| p.refine && frac(&raw[0], r)).collect();
    for r in 0..2 * i {
        if !dense1[r / 2] {
            raw[1].row_mut(r).iter_mut().for_each(|v| *v = S::zero());
        }
    }
    let dense2: Vec<bool> = (0..2 * i).map(|r| p.refine && frac(&raw[1], r)).collect();
    for r in 0..4 * i {
        if !dense2[r / 2] {
            raw[2].row_mut(r).iter_mut().for_each(|v| *v = S::zero());
        }
    }
    let (rows, cols) = (4 * i, 4 * j);
    let up = |m: &Tensor<S>| {
        let (fy, fx) = (rows / m.rows(), cols / m.cols());
        Tensor::from_fn(&[rows, cols], |q| m.get2(q / cols / fy, (q % cols) / fx))
    };
    Ok((up(&raw[0]).add(&up(&raw[1]))?.add(&up(&raw[2]))?, cos))
}
