//! Cosine affinities and the binarised masks derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{DapeError, Result};
use crate::scalar::Scalar;
use crate::tensor::{cosine, Tensor};
use crate::tokens::TokenSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskLevel {
    Coarse,
    Channel,
    Fine1,
    Fine2,
    Fine3,
    Combined,
}

/// Non-negative mask whose entries are drawn from a declared alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMask<S> {
    pub weights: Tensor<S>,
    /// Sorted admissible values.
    pub alphabet: Vec<S>,
    pub level: MaskLevel,
}

impl<S: Scalar> AffinityMask<S> {
    pub fn zeros(rows: usize, cols: usize, hi: S, level: MaskLevel) -> Self {
        AffinityMask { weights: Tensor::zeros(&[rows, cols]), alphabet: vec![S::zero(), hi], level }
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn cols(&self) -> usize {
        self.weights.cols()
    }

    pub fn nonzero(&self) -> usize {
        self.weights.data().iter().filter(|&&x| x != S::zero()).count()
    }

    pub fn row_nonzero(&self, r: usize) -> usize {
        self.weights.row(r).iter().filter(|&&x| x != S::zero()).count()
    }

    /// Every weight is non-negative and exactly equal to some alphabet value.
    pub fn is_valid(&self) -> bool {
        self.weights.data().iter().all(|&x| x >= S::zero() && self.alphabet.contains(&x))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.weights.data().iter().find(|&&x| x < S::zero() || !self.alphabet.contains(&x)) {
            return Err(DapeError::Contract(format!(
                "{:?} mask holds {bad}, outside alphabet {:?}",
                self.level, self.alphabet
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        AffinityMask {
            weights: self.weights.transpose().expect("mask is a matrix"),
            alphabet: self.alphabet.clone(),
            level: self.level,
        }
    }
}

/// `I×J` cosine matrix between two token matrices of equal width.
pub fn affinity_matrix<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, d) = a.require_matrix("affinity")?;
    let (m, d2) = b.require_matrix("affinity")?;
    if d != d2 {
        return Err(DapeError::shapes("affinity", a.shape(), b.shape()));
    }
    Ok(Tensor::from_fn(&[n, m], |k| cosine(a.row(k / m), b.row(k % m))))
}

pub fn affinity<S: Scalar>(imgs: &TokenSet<S>, txts: &TokenSet<S>) -> Result<Tensor<S>> {
    affinity_matrix(&imgs.tokens, &txts.tokens)
}

/// Entries strictly above `threshold` become `hi`, the rest 0.
pub fn binarize<S: Scalar>(a: &Tensor<S>, threshold: f64, hi: S, level: MaskLevel) -> AffinityMask<S> {
    let t = S::c(threshold);
    AffinityMask {
        weights: a.map(|x| if x > t { hi } else { S::zero() }),
        alphabet: vec![S::zero(), hi],
        level,
    }
}
