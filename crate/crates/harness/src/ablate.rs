//! Component ablation: the same run with alignment modules switched on one at a time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::Result;
use crate::runcfg::{ensure_dir, write_file, RunConfig};
use crate::training::{csv_bytes, run_training, write_outcome, MetricsRow, TrainOutcome};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TIMING_CSV: &str = "ablation_timing.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    /// Output directory under `ablate/`.
    pub slug: &'static str,
    pub cwa: bool,
    pub nfa: bool,
    pub phi: bool,
}

/// Base plus one component each, then everything together.
pub const VARIANTS: [Variant; 5] = [
    Variant { name: "base", slug: "base", cwa: false, nfa: false, phi: false },
    Variant { name: "+CWA", slug: "cwa", cwa: true, nfa: false, phi: false },
    Variant { name: "+NFA", slug: "nfa", cwa: false, nfa: true, phi: false },
    Variant { name: "+PHI", slug: "phi", cwa: false, nfa: false, phi: true },
    Variant { name: "+DAPE", slug: "dape", cwa: true, nfa: true, phi: true },
];

impl Variant {
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        out.model.enable_cwa = self.cwa;
        out.model.enable_nfa = self.nfa;
        out.model.enable_phi = self.phi;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub cwa: bool,
    pub nfa: bool,
    pub phi: bool,
    pub steps: usize,
    pub r1: f64,
    pub r5: f64,
    pub eval_loss: f64,
    /// Per (image, text) pair.
    pub macs_total: f64,
    /// Fine-alignment share of `macs_total`.
    pub macs_fine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTiming {
    pub variant: String,
    pub steps_per_sec: f64,
}

pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub timing: Vec<AblationTiming>,
    pub outcomes: Vec<TrainOutcome>,
}

fn summary(v: &Variant, steps: usize, last: &MetricsRow) -> AblationRow {
    AblationRow {
        variant: v.name.into(),
        cwa: v.cwa,
        nfa: v.nfa,
        phi: v.phi,
        steps,
        r1: last.r1,
        r5: last.r5,
        eval_loss: last.eval_loss,
        macs_total: last.macs_total,
        macs_fine: last.macs_nfa,
    }
}

pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus, on_variant: &mut dyn FnMut(&AblationRow, f64)) -> Result<Ablation> {
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let mut outcomes = Vec::new();
    for v in &VARIANTS {
        let vc = v.apply(cfg);
        let out = run_training(&vc, corpus, &mut |_| {})?;
        let row = summary(v, vc.train.steps, out.last());
        on_variant(&row, out.steps_per_sec());
        timing.push(AblationTiming { variant: v.name.into(), steps_per_sec: out.steps_per_sec() });
        rows.push(row);
        outcomes.push(out);
    }
    Ok(Ablation { rows, timing, outcomes })
}

/// `dape ablate`: table and timing in `root/<run id>`, each variant's run under `ablate/<variant>`.
pub fn cmd_ablate(cfg: &RunConfig, root: &Path, on_variant: &mut dyn FnMut(&AblationRow, f64)) -> Result<(Ablation, PathBuf)> {
    let dir = root.join(cfg.run_id());
    ensure_dir(&dir)?;
    let corpus = cfg.materialize_corpus(&dir)?;
    let ab = run_ablation(cfg, &corpus, on_variant)?;
    for (v, out) in VARIANTS.iter().zip(&ab.outcomes) {
        write_outcome(&v.apply(cfg), out, &dir.join("ablate").join(v.slug))?;
    }
    write_file(&dir.join(ABLATION_CSV), csv_bytes(&ab.rows)?)?;
    write_file(&dir.join(ABLATION_TIMING_CSV), csv_bytes(&ab.timing)?)?;
    Ok((ab, dir))
}
