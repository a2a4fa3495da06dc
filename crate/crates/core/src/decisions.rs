//! Record and replay of the discrete choices made during a forward pass.
//!
//! Masks, top-k selections and density flags are piecewise constant in the
//! parameters. Freezing them lets finite differences probe the continuous
//! path only.

use crate::error::{DapeError, Result};
use crate::mask::AffinityMask;
use crate::nfa::HierarchicalMask;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub enum Decision<S> {
    Mask(AffinityMask<S>),
    Selection(Vec<Vec<usize>>),
    Hierarchy(Box<HierarchicalMask<S>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecisionMode {
    /// Compute every decision, keep nothing.
    Live,
    Record,
    Replay,
}

#[derive(Clone, Debug)]
pub struct Decisions<S> {
    mode: DecisionMode,
    log: Vec<Decision<S>>,
    cursor: usize,
}

impl<S: Scalar> Decisions<S> {
    pub fn live() -> Self {
        Decisions { mode: DecisionMode::Live, log: Vec::new(), cursor: 0 }
    }

    pub fn record() -> Self {
        Decisions { mode: DecisionMode::Record, log: Vec::new(), cursor: 0 }
    }

    pub fn replay(log: Vec<Decision<S>>) -> Self {
        Decisions { mode: DecisionMode::Replay, log, cursor: 0 }
    }

    pub fn mode(&self) -> DecisionMode {
        self.mode
    }

    pub fn log(&self) -> &[Decision<S>] {
        &self.log
    }

    pub fn into_log(self) -> Vec<Decision<S>> {
        self.log
    }

    pub fn mask(&mut self, f: impl FnOnce() -> Result<AffinityMask<S>>) -> Result<AffinityMask<S>> {
        self.decide(f, Decision::Mask, |d| match d {
            Decision::Mask(m) => Some(m.clone()),
            _ => None,
        })
    }

    pub fn selection(&mut self, f: impl FnOnce() -> Result<Vec<Vec<usize>>>) -> Result<Vec<Vec<usize>>> {
        self.decide(f, Decision::Selection, |d| match d {
            Decision::Selection(s) => Some(s.clone()),
            _ => None,
        })
    }

    pub fn hierarchy(&mut self, f: impl FnOnce() -> Result<HierarchicalMask<S>>) -> Result<HierarchicalMask<S>> {
        self.decide(
            f,
            |h| Decision::Hierarchy(Box::new(h)),
            |d| match d {
                Decision::Hierarchy(h) => Some((**h).clone()),
                _ => None,
            },
        )
    }

    fn decide<T: Clone>(
        &mut self,
        f: impl FnOnce() -> Result<T>,
        wrap: impl FnOnce(T) -> Decision<S>,
        unwrap: impl FnOnce(&Decision<S>) -> Option<T>,
    ) -> Result<T> {
        match self.mode {
            DecisionMode::Live => f(),
            DecisionMode::Record => {
                let v = f()?;
                self.log.push(wrap(v.clone()));
                Ok(v)
            }
            DecisionMode::Replay => {
                let entry = self.log.get(self.cursor).ok_or_else(|| {
                    DapeError::Contract(format!("replay log exhausted after {} decisions", self.cursor))
                })?;
                let v = unwrap(entry).ok_or_else(|| {
                    DapeError::Contract(format!("replay decision {} has a different kind", self.cursor))
                })?;
                self.cursor += 1;
                Ok(v)
            }
        }
    }
}
