//! Multiply-accumulate and cosine-evaluation accounting.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Cost bucket an operation is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Coarse,
    Cwa,
    Nfa,
    Phi,
    Head,
}

impl Module {
    pub const ALL: [Module; 5] = [Module::Coarse, Module::Cwa, Module::Nfa, Module::Phi, Module::Head];

    pub fn name(self) -> &'static str {
        match self {
            Module::Coarse => "coarse",
            Module::Cwa => "cwa",
            Module::Nfa => "nfa",
            Module::Phi => "phi",
            Module::Head => "head",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-module MAC and cosine counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostMeter {
    macs: [u64; 5],
    cosines: [u64; 5],
}

impl CostMeter {
    pub fn charge_macs(&mut self, m: Module, macs: u64) {
        self.macs[m.index()] += macs;
    }

    /// Record `n` cosine evaluations of dimension `d` (three MACs per component).
    pub fn charge_cosines(&mut self, m: Module, n: u64, d: usize) {
        self.cosines[m.index()] += n;
        self.macs[m.index()] += n * 3 * d as u64;
    }

    pub fn macs(&self, m: Module) -> u64 {
        self.macs[m.index()]
    }

    pub fn cosines(&self, m: Module) -> u64 {
        self.cosines[m.index()]
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum()
    }

    pub fn total_cosines(&self) -> u64 {
        self.cosines.iter().sum()
    }

    pub fn merge(&mut self, other: &CostMeter) {
        for i in 0..5 {
            self.macs[i] += other.macs[i];
            self.cosines[i] += other.cosines[i];
        }
    }

    pub fn since(&self, earlier: &CostMeter) -> CostMeter {
        let mut out = CostMeter::default();
        for i in 0..5 {
            out.macs[i] = self.macs[i] - earlier.macs[i];
            out.cosines[i] = self.cosines[i] - earlier.cosines[i];
        }
        out
    }
}
