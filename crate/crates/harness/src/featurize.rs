//! Fixed, seeded featurizers standing in for pretrained encoders.

use dape_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};
use crate::scene::{ShapeKind, SyntheticScene, PALETTE};

const IMAGE_SEED: u64 = 0x1A6E_F00D;
const TEXT_SEED: u64 = 0x7E47_F00D;

/// Every word the caption grammar can produce.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["a", "and"];
    v.extend(PALETTE.iter().map(|p| p.0));
    v.extend(ShapeKind::ALL.iter().map(|k| k.name()));
    v
}

/// Non-overlapping `patch×patch` RGB patches through one random linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeaturizer {
    pub patch: usize,
    /// `(patch²·3) × channels`.
    pub weights: Tensor<f64>,
}

impl ImageFeaturizer {
    pub fn new(patch: usize, channels: usize) -> Self {
        let fan_in = patch * patch * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(IMAGE_SEED);
        ImageFeaturizer { patch, weights: Tensor::normal(&[fan_in, channels], 1.0 / (fan_in as f64).sqrt(), &mut rng) }
    }

    pub fn channels(&self) -> usize {
        self.weights.cols()
    }

    /// `(canvas/patch) × (canvas/patch) × channels`.
    pub fn apply(&self, pixels: &[f64], canvas: usize) -> Result<Tensor<f64>> {
        let p = self.patch;
        if p == 0 || canvas % p != 0 || pixels.len() != canvas * canvas * 3 {
            return Err(HarnessError::Usage(format!("cannot cut a {canvas}px canvas into {p}px patches")));
        }
        let g = canvas / p;
        let mut patches = Tensor::zeros(&[g * g, p * p * 3]);
        for gy in 0..g {
            for gx in 0..g {
                let row = patches.row_mut(gy * g + gx);
                for dy in 0..p {
                    for dx in 0..p {
                        let src = ((gy * p + dy) * canvas + gx * p + dx) * 3;
                        let dst = (dy * p + dx) * 3;
                        row[dst..dst + 3].copy_from_slice(&pixels[src..src + 3]);
                    }
                }
            }
        }
        Ok(patches.matmul(&self.weights)?.reshape(&[g, g, self.channels()])?)
    }

    pub fn scene(&self, s: &SyntheticScene) -> Result<Tensor<f64>> {
        self.apply(&s.render(), s.canvas)
    }
}

/// One random vector per vocabulary word; position `p` carries word `p`, later positions are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeaturizer {
    pub words: Vec<&'static str>,
    /// `|vocab| × channels`.
    pub vectors: Tensor<f64>,
    pub max_len: usize,
}

impl TextFeaturizer {
    pub fn new(max_len: usize, channels: usize) -> Self {
        let words = vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(TEXT_SEED);
        let vectors = Tensor::normal(&[words.len(), channels], 1.0 / (channels as f64).sqrt(), &mut rng);
        TextFeaturizer { words, vectors, max_len }
    }

    pub fn channels(&self) -> usize {
        self.vectors.cols()
    }

    pub fn apply(&self, caption: &str) -> Result<Tensor<f64>> {
        let c = self.channels();
        let mut out = Tensor::zeros(&[self.max_len, c]);
        let tokens: Vec<&str> = caption.split_whitespace().collect();
        if tokens.len() > self.max_len {
            return Err(HarnessError::Usage(format!("caption of {} words exceeds {} positions", tokens.len(), self.max_len)));
        }
        for (p, w) in tokens.iter().enumerate() {
            let id = self
                .words
                .iter()
                .position(|v| v == w)
                .ok_or_else(|| HarnessError::Usage(format!("word {w:?} is outside the caption vocabulary")))?;
            out.row_mut(p).copy_from_slice(self.vectors.row(id));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{DensityClass, ShapeRecord, SizeClass};

    #[test]
    fn image_features_are_linear_in_pixels() {
        let f = ImageFeaturizer::new(2, 5);
        assert_eq!(f.apply(&vec![0.0; 32 * 32 * 3], 32).unwrap().max_abs(), 0.0);
        let s = SyntheticScene::new(
            vec![ShapeRecord { kind: ShapeKind::Circle, color: 0, size: SizeClass::Small, cell: (0, 0) }],
            DensityClass::Sparse,
        );
        let px = s.render();
        let a = f.apply(&px, 32).unwrap();
        let twice: Vec<f64> = px.iter().map(|v| 2.0 * v).collect();
        assert!(f.apply(&twice, 32).unwrap().max_abs_diff(&a.scale(2.0)) < 1e-12);
        assert_eq!(a.shape(), &[16, 16, 5]);
        assert!(f.apply(&px, 30).is_err());
    }

    #[test]
    fn text_features_place_words() {
        let f = TextFeaturizer::new(8, 4);
        let t = f.apply("a red circle").unwrap();
        let red = f.words.iter().position(|&w| w == "red").unwrap();
        assert_eq!(t.row(1), f.vectors.row(red));
        assert!(t.row(3).iter().all(|&x| x == 0.0));
        assert!(f.apply("a mauve circle").is_err());
        assert!(f.apply("a a a a a a a a a").is_err());
        assert_eq!(vocabulary().len(), 13);
    }
}
