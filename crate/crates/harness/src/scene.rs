//! Procedural scenes: coloured shapes on a black canvas, with a templated caption.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CANVAS: usize = 32;
/// Shapes sit in distinct cells of a `PLACEMENT × PLACEMENT` layout grid.
pub const PLACEMENT: usize = 4;

pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    /// Half-extent in pixels.
    pub fn radius(self) -> f64 {
        match self {
            SizeClass::Small => 2.0,
            SizeClass::Large => 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityClass {
    /// One shape.
    Sparse,
    /// Two or three.
    Mixed,
    /// Four to six.
    Dense,
}

impl DensityClass {
    pub const ALL: [DensityClass; 3] = [DensityClass::Sparse, DensityClass::Mixed, DensityClass::Dense];

    pub fn shape_range(self) -> (u32, u32) {
        match self {
            DensityClass::Sparse => (1, 1),
            DensityClass::Mixed => (2, 3),
            DensityClass::Dense => (4, 6),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub kind: ShapeKind,
    /// Index into [`PALETTE`].
    pub color: usize,
    pub size: SizeClass,
    /// `(row, col)` in the placement grid.
    pub cell: (usize, usize),
}

impl ShapeRecord {
    pub fn color_name(&self) -> &'static str {
        PALETTE[self.color].0
    }

    fn covers(&self, y: f64, x: f64) -> bool {
        let pitch = (CANVAS / PLACEMENT) as f64;
        let cy = (self.cell.0 as f64 + 0.5) * pitch;
        let cx = (self.cell.1 as f64 + 0.5) * pitch;
        let (dy, dx) = (y - cy, x - cx);
        let r = self.size.radius();
        match self.kind {
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            // apex up, base at the bottom
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub canvas: usize,
    /// Ordered by placement cell, row-major.
    pub shapes: Vec<ShapeRecord>,
    pub caption: String,
    pub density: DensityClass,
}

/// `"a {color} {kind}"`, then `" and a {color} {kind}"` for every further shape.
pub fn caption_for(shapes: &[ShapeRecord]) -> String {
    let parts: Vec<String> = shapes.iter().map(|s| format!("a {} {}", s.color_name(), s.kind.name())).collect();
    parts.join(" and ")
}

impl SyntheticScene {
    pub fn new(mut shapes: Vec<ShapeRecord>, density: DensityClass) -> Self {
        shapes.sort_by_key(|s| s.cell);
        let caption = caption_for(&shapes);
        SyntheticScene { canvas: CANVAS, shapes, caption, density }
    }

    /// `canvas × canvas × 3` RGB in [0, 1], row-major. Pixel centres are sampled;
    /// a later shape paints over an earlier one, though cells never overlap.
    pub fn render(&self) -> Vec<f64> {
        let n = self.canvas;
        let mut px = vec![0.0; n * n * 3];
        for s in &self.shapes {
            let rgb = PALETTE[s.color].1;
            for y in 0..n {
                for x in 0..n {
                    if s.covers(y as f64 + 0.5, x as f64 + 0.5) {
                        px[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        px
    }

    pub fn word_count(&self) -> usize {
        self.caption.split_whitespace().count()
    }
}

/// Relative weights of sparse, mixed and dense scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMix(pub [f64; 3]);

impl Default for DensityMix {
    fn default() -> Self {
        DensityMix([1.0, 1.0, 1.0])
    }
}

impl DensityMix {
    pub fn validate(&self) -> Result<()> {
        let w = self.0;
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(HarnessError::Usage(format!("density mix {w:?} needs non-negative weights with a positive sum")));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DensityClass {
        let total: f64 = self.0.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (k, &w) in self.0.iter().enumerate() {
            if w > 0.0 && u < w {
                return DensityClass::ALL[k];
            }
            u -= w;
        }
        let last = self.0.iter().rposition(|&w| w > 0.0).expect("validated mix");
        DensityClass::ALL[last]
    }
}

impl FromStr for DensityMix {
    type Err = HarnessError;

    /// `"1,0,0"` or one of `sparse`, `mixed`, `dense`, `uniform`.
    fn from_str(s: &str) -> Result<Self> {
        let mix = match s.trim() {
            "sparse" => DensityMix([1.0, 0.0, 0.0]),
            "mixed" => DensityMix([0.0, 1.0, 0.0]),
            "dense" => DensityMix([0.0, 0.0, 1.0]),
            "uniform" => DensityMix::default(),
            other => {
                let parts: Vec<f64> = other
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| HarnessError::Usage(format!("density mix {other:?}: {e}")))?;
                let w: [f64; 3] = parts
                    .try_into()
                    .map_err(|_| HarnessError::Usage(format!("density mix {other:?} needs three weights")))?;
                DensityMix(w)
            }
        };
        mix.validate()?;
        Ok(mix)
    }
}

impl fmt::Display for DensityMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.0[0], self.0[1], self.0[2])
    }
}

fn below<R: Rng>(rng: &mut R, n: usize) -> usize {
    rng.gen_range(0..n as u32) as usize
}

/// One scene of the given class. Draws only `u32` ranges and `f64`s, so the
/// stream is the same on every platform.
pub fn random_scene<R: Rng>(rng: &mut R, density: DensityClass) -> SyntheticScene {
    let (lo, hi) = density.shape_range();
    let n = rng.gen_range(lo..=hi) as usize;
    let mut cells: Vec<usize> = (0..PLACEMENT * PLACEMENT).collect();
    for k in 0..n {
        let j = k + below(rng, cells.len() - k);
        cells.swap(k, j);
    }
    let shapes = cells[..n]
        .iter()
        .map(|&c| ShapeRecord {
            kind: ShapeKind::ALL[below(rng, 3)],
            color: below(rng, PALETTE.len()),
            size: if rng.gen::<bool>() { SizeClass::Large } else { SizeClass::Small },
            cell: (c / PLACEMENT, c % PLACEMENT),
        })
        .collect();
    SyntheticScene::new(shapes, density)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(kind: ShapeKind, color: usize, cell: (usize, usize)) -> ShapeRecord {
        ShapeRecord { kind, color, size: SizeClass::Large, cell }
    }

    #[test]
    fn caption_template() {
        let s = SyntheticScene::new(
            vec![shape(ShapeKind::Square, 2, (3, 0)), shape(ShapeKind::Circle, 0, (0, 1))],
            DensityClass::Mixed,
        );
        assert_eq!(s.caption, "a red circle and a blue square");
        assert_eq!(s.word_count(), 7);
    }

    #[test]
    fn rendering_paints_only_inside_cells() {
        let s = SyntheticScene::new(vec![shape(ShapeKind::Square, 1, (1, 2))], DensityClass::Sparse);
        let px = s.render();
        let lit: Vec<(usize, usize)> =
            (0..CANVAS * CANVAS).filter(|&p| px[p * 3 + 1] > 0.0).map(|p| (p / CANVAS, p % CANVAS)).collect();
        assert_eq!(lit.len(), 36);
        assert!(lit.iter().all(|&(y, x)| (8..16).contains(&y) && (16..24).contains(&x)));
        assert!(px.iter().step_by(3).all(|&r| r == 0.0));
    }

    #[test]
    fn shapes_differ_in_footprint() {
        let area = |k| SyntheticScene::new(vec![shape(k, 6, (0, 0))], DensityClass::Sparse).render().iter().filter(|&&v| v > 0.0).count();
        let (c, s, t) = (area(ShapeKind::Circle), area(ShapeKind::Square), area(ShapeKind::Triangle));
        assert!(t < c && c < s, "{t} {c} {s}");
    }

    #[test]
    fn class_bounds_and_distinct_cells() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for class in DensityClass::ALL {
            for _ in 0..50 {
                let s = random_scene(&mut r, class);
                let (lo, hi) = class.shape_range();
                assert!((lo as usize..=hi as usize).contains(&s.shapes.len()));
                let mut cells: Vec<_> = s.shapes.iter().map(|x| x.cell).collect();
                cells.dedup();
                assert_eq!(cells.len(), s.shapes.len());
                assert_eq!(s.word_count(), 3 + 4 * (s.shapes.len() - 1));
            }
        }
    }

    #[test]
    fn mix_parsing() {
        assert_eq!("1,0,0".parse::<DensityMix>().unwrap(), DensityMix([1.0, 0.0, 0.0]));
        assert_eq!("mixed".parse::<DensityMix>().unwrap(), DensityMix([0.0, 1.0, 0.0]));
        assert!("1,2".parse::<DensityMix>().is_err());
        assert!("0,0,0".parse::<DensityMix>().is_err());
        assert!("-1,2,0".parse::<DensityMix>().is_err());
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let m = DensityMix([0.0, 0.0, 3.0]);
        assert!((0..20).all(|_| m.sample(&mut r) == DensityClass::Dense));
    }
}
