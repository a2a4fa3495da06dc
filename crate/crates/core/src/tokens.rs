//! Token sets with provenance, and the uniform tokenizers that produce them.

use serde::{Deserialize, Serialize};

use crate::error::{DapeError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

/// Which part of the source a token summarises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Half-open rectangle `[y0, y1) × [x0, x1)` of a spatial map.
    Cell { y0: usize, y1: usize, x0: usize, x1: usize },
    /// Half-open range of text positions.
    Span { start: usize, end: usize },
    /// Learnable slot appended after the real tokens.
    Synthetic { slot: usize },
}

impl Provenance {
    pub fn area(&self) -> usize {
        match *self {
            Provenance::Cell { y0, y1, x0, x1 } => (y1 - y0) * (x1 - x0),
            Provenance::Span { start, end } => end - start,
            Provenance::Synthetic { .. } => 0,
        }
    }
}

/// `N × d` tokens plus where each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<S> {
    pub tokens: Tensor<S>,
    pub provenance: Vec<Provenance>,
    pub modality: Modality,
}

impl<S: Scalar> TokenSet<S> {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// True when the non-synthetic provenance entries tile `extent` exactly once.
    ///
    /// `extent` is `[h, w]` for image tokens and `[l]` for text tokens.
    pub fn partitions(&self, extent: &[usize]) -> bool {
        let total: usize = extent.iter().product();
        let mut hits = vec![0u8; total];
        for p in &self.provenance {
            match (*p, extent) {
                (Provenance::Cell { y0, y1, x0, x1 }, [h, w]) => {
                    if y1 > *h || x1 > *w || y0 >= y1 || x0 >= x1 {
                        return false;
                    }
                    for y in y0..y1 {
                        for x in x0..x1 {
                            hits[y * w + x] += 1;
                        }
                    }
                }
                (Provenance::Span { start, end }, [l]) => {
                    if end > *l || start >= end {
                        return false;
                    }
                    for h in &mut hits[start..end] {
                        *h += 1;
                    }
                }
                (Provenance::Synthetic { .. }, _) => {}
                _ => return false,
            }
        }
        hits.iter().all(|&h| h == 1)
    }
}

/// Row-stochastic pooling matrix (`N × h·w`) for cell provenance over an `h×w` map.
pub fn cell_pooling_matrix<S: Scalar>(cells: &[Provenance], h: usize, w: usize) -> Result<Tensor<S>> {
    let mut m = Tensor::zeros(&[cells.len(), h * w]);
    for (i, p) in cells.iter().enumerate() {
        let Provenance::Cell { y0, y1, x0, x1 } = *p else {
            return Err(DapeError::dim("cell_pooling_matrix", "non-cell provenance"));
        };
        if y1 > h || x1 > w {
            return Err(DapeError::dim("cell_pooling_matrix", format!("cell {p:?} outside {h}×{w}")));
        }
        let inv = S::one() / S::from_usize_lossy(p.area());
        for y in y0..y1 {
            for x in x0..x1 {
                m.set2(i, y * w + x, inv);
            }
        }
    }
    Ok(m)
}

/// Row-stochastic pooling matrix (`N × l`) for span provenance.
pub fn span_pooling_matrix<S: Scalar>(spans: &[Provenance], l: usize) -> Result<Tensor<S>> {
    let mut m = Tensor::zeros(&[spans.len(), l]);
    for (i, p) in spans.iter().enumerate() {
        let Provenance::Span { start, end } = *p else {
            return Err(DapeError::dim("span_pooling_matrix", "non-span provenance"));
        };
        if end > l {
            return Err(DapeError::dim("span_pooling_matrix", format!("span {p:?} outside length {l}")));
        }
        let inv = S::one() / S::from_usize_lossy(end - start);
        for t in start..end {
            m.set2(i, t, inv);
        }
    }
    Ok(m)
}

/// Spread matrix (`l × N`): position t receives token j when t lies in span j.
pub fn span_spread_matrix<S: Scalar>(spans: &[Provenance], l: usize) -> Result<Tensor<S>> {
    let mut m = Tensor::zeros(&[l, spans.len()]);
    for (j, p) in spans.iter().enumerate() {
        let Provenance::Span { start, end } = *p else {
            return Err(DapeError::dim("span_spread_matrix", "non-span provenance"));
        };
        for t in start..end.min(l) {
            m.set2(t, j, S::one());
        }
    }
    Ok(m)
}

/// Flattened row-major position indices covered by each cell of an `h×w` map.
pub fn cell_groups(cells: &[Provenance], h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
    cells
        .iter()
        .map(|p| match *p {
            Provenance::Cell { y0, y1, x0, x1 } if y1 <= h && x1 <= w => {
                Ok((y0..y1).flat_map(|y| (x0..x1).map(move |x| y * w + x)).collect())
            }
            _ => Err(DapeError::dim("cell_groups", format!("{p:?} is not a cell inside {h}×{w}"))),
        })
        .collect()
}

/// Position indices covered by each span.
pub fn span_groups(spans: &[Provenance]) -> Result<Vec<Vec<usize>>> {
    spans
        .iter()
        .map(|p| match *p {
            Provenance::Span { start, end } => Ok((start..end).collect()),
            _ => Err(DapeError::dim("span_groups", format!("{p:?} is not a span"))),
        })
        .collect()
}

/// For each position, the index of the span that owns it.
pub fn span_owner(spans: &[Provenance], l: usize) -> Result<Vec<usize>> {
    let mut owner = vec![usize::MAX; l];
    for (j, p) in spans.iter().enumerate() {
        let Provenance::Span { start, end } = *p else {
            return Err(DapeError::dim("span_owner", "non-span provenance"));
        };
        for o in owner.iter_mut().take(end.min(l)).skip(start) {
            *o = j;
        }
    }
    if owner.contains(&usize::MAX) {
        return Err(DapeError::dim("span_owner", "spans do not cover every position"));
    }
    Ok(owner)
}

/// Mean of the source rows of an `h×w×d` map inside each cell.
pub fn pool_cells<S: Scalar>(map: &Tensor<S>, cells: &[Provenance]) -> Result<Tensor<S>> {
    let (h, w, d) = map.require_rank3("pool_cells")?;
    let mut out = Tensor::zeros(&[cells.len(), d]);
    for (i, p) in cells.iter().enumerate() {
        let Provenance::Cell { y0, y1, x0, x1 } = *p else {
            return Err(DapeError::dim("pool_cells", "non-cell provenance"));
        };
        if y1 > h || x1 > w {
            return Err(DapeError::dim("pool_cells", format!("cell {p:?} outside {h}×{w}")));
        }
        let row = out.row_mut(i);
        for y in y0..y1 {
            for x in x0..x1 {
                let base = (y * w + x) * d;
                for (o, &v) in row.iter_mut().zip(&map.data()[base..base + d]) {
                    *o += v;
                }
            }
        }
        let inv = S::one() / S::from_usize_lossy(p.area());
        for o in row.iter_mut() {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Mean of the source rows of an `l×d` sequence inside each span.
pub fn pool_spans<S: Scalar>(seq: &Tensor<S>, spans: &[Provenance]) -> Result<Tensor<S>> {
    span_pooling_matrix(spans, seq.rows())?.matmul(seq)
}

/// Row-major `gy×gx` grid of cells over an `h×w` map.
pub fn grid_cells(h: usize, w: usize, gy: usize, gx: usize) -> Result<Vec<Provenance>> {
    if gy == 0 || gx == 0 || h % gy != 0 || w % gx != 0 {
        return Err(DapeError::dim("grid_cells", format!("grid {gy}×{gx} does not divide {h}×{w}")));
    }
    let (ch, cw) = (h / gy, w / gx);
    Ok((0..gy * gx)
        .map(|i| {
            let (r, c) = (i / gx, i % gx);
            Provenance::Cell { y0: r * ch, y1: (r + 1) * ch, x0: c * cw, x1: (c + 1) * cw }
        })
        .collect())
}

/// `j` contiguous spans over `l` positions whose lengths differ by at most one.
pub fn even_spans(start: usize, end: usize, j: usize) -> Vec<Provenance> {
    let l = end - start;
    (0..j).map(|k| Provenance::Span { start: start + k * l / j, end: start + (k + 1) * l / j }).collect()
}

pub fn tokenize_image<S: Scalar>(m0: &Tensor<S>, grid: (usize, usize)) -> Result<TokenSet<S>> {
    let (h, w, _) = m0.require_rank3("tokenize_image")?;
    let cells = grid_cells(h, w, grid.0, grid.1)?;
    Ok(TokenSet { tokens: pool_cells(m0, &cells)?, provenance: cells, modality: Modality::Image })
}

pub fn tokenize_text<S: Scalar>(t: &Tensor<S>, j: usize) -> Result<TokenSet<S>> {
    let (l, _) = t.require_matrix("tokenize_text")?;
    if j == 0 || j > l {
        return Err(DapeError::Config(format!("cannot split {l} text positions into {j} tokens")));
    }
    let spans = even_spans(0, l, j);
    Ok(TokenSet { tokens: pool_spans(t, &spans)?, provenance: spans, modality: Modality::Text })
}

/// Split every span of `t` into `factor` sub-spans and re-pool from `source`.
pub fn refine_text<S: Scalar>(t: &TokenSet<S>, source: &Tensor<S>, factor: usize) -> Result<TokenSet<S>> {
    let spans = refine_spans(&t.provenance, factor)?;
    Ok(TokenSet { tokens: pool_spans(source, &spans)?, provenance: spans, modality: Modality::Text })
}

pub fn refine_spans(spans: &[Provenance], factor: usize) -> Result<Vec<Provenance>> {
    if factor == 0 {
        return Err(DapeError::Config("refinement factor must be positive".into()));
    }
    let mut out = Vec::with_capacity(spans.len() * factor);
    for p in spans {
        let Provenance::Span { start, end } = *p else {
            return Err(DapeError::Config("only text spans can be refined".into()));
        };
        if end - start < factor {
            return Err(DapeError::Config(format!(
                "span {start}..{end} is shorter than refinement factor {factor}"
            )));
        }
        out.extend(even_spans(start, end, factor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(h: usize, w: usize, d: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[h, w, d], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn degenerate_grid_is_global_mean() {
        let m = rand_map(4, 6, 3, 1);
        let t = tokenize_image(&m, (1, 1)).unwrap();
        assert_eq!(t.len(), 1);
        for c in 0..3 {
            let mean: f64 = (0..24).map(|i| m.data()[i * 3 + c]).sum::<f64>() / 24.0;
            assert!((t.tokens.get2(0, c) - mean).abs() < 1e-12);
        }
        assert!(t.partitions(&[4, 6]));
    }

    #[test]
    fn two_by_two_grid_block_means() {
        let m = rand_map(4, 4, 2, 2);
        let t = tokenize_image(&m, (2, 2)).unwrap();
        assert_eq!(t.len(), 4);
        for (i, (by, bx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            for c in 0..2 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += m.get3(2 * by + dy, 2 * bx + dx, c);
                    }
                }
                assert!((t.tokens.get2(i, c) - acc / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_grid_is_identity() {
        let m = rand_map(3, 2, 4, 3);
        let t = tokenize_image(&m, (3, 2)).unwrap();
        assert_eq!(t.tokens.data(), m.data());
    }

    #[test]
    fn non_divisible_grid_errors() {
        assert!(tokenize_image(&rand_map(4, 4, 1, 0), (3, 1)).is_err());
    }

    #[test]
    fn text_tokenization() {
        let t = Tensor::<f64>::from_f64(&[4, 2], &[1., 0., 3., 2., 5., 4., 7., 6.]).unwrap();
        assert_eq!(tokenize_text(&t, 4).unwrap().tokens, t);
        let two = tokenize_text(&t, 2).unwrap();
        assert_eq!(two.tokens.data(), &[2., 1., 6., 5.]);
        assert_eq!(two.provenance[1], Provenance::Span { start: 2, end: 4 });
        let one = tokenize_text(&t, 1).unwrap();
        assert_eq!(one.tokens.data(), &[4., 3.]);
        assert!(matches!(tokenize_text(&t, 5), Err(DapeError::Config(_))));
    }

    #[test]
    fn uneven_spans_differ_by_at_most_one() {
        for l in 1..30 {
            for j in 1..=l {
                let spans = even_spans(0, l, j);
                let lens: Vec<usize> = spans.iter().map(Provenance::area).collect();
                let (mn, mx) = (lens.iter().min().unwrap(), lens.iter().max().unwrap());
                assert!(mx - mn <= 1);
                let ts = TokenSet::<f64> { tokens: Tensor::zeros(&[j, 1]), provenance: spans, modality: Modality::Text };
                assert!(ts.partitions(&[l]));
            }
        }
    }

    #[test]
    fn refine_text_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let src = Tensor::<f64>::uniform(&[16, 3], -1.0, 1.0, &mut r);
        let t = tokenize_text(&src, 2).unwrap();
        assert_eq!(refine_text(&t, &src, 1).unwrap(), t);
        let r2 = refine_text(&t, &src, 2).unwrap();
        assert_eq!(r2.len(), 4);
        for (k, p) in r2.provenance.iter().enumerate() {
            assert_eq!(*p, Provenance::Span { start: 4 * k, end: 4 * k + 4 });
            for c in 0..3 {
                let m: f64 = (4 * k..4 * k + 4).map(|i| src.get2(i, c)).sum::<f64>() / 4.0;
                assert!((r2.tokens.get2(k, c) - m).abs() < 1e-12);
            }
        }
        let short = tokenize_text(&src, 8).unwrap();
        assert!(matches!(refine_text(&short, &src, 4), Err(DapeError::Config(_))));
    }

    #[test]
    fn spread_then_pool_is_identity() {
        let spans = even_spans(0, 7, 3);
        let pool = span_pooling_matrix::<f64>(&spans, 7).unwrap();
        let spread = span_spread_matrix::<f64>(&spans, 7).unwrap();
        assert!(pool.matmul(&spread).unwrap().max_abs_diff(&Tensor::identity(3)) < 1e-15);
    }
}
