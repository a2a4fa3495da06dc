//! Fine-alignment cost against the uniform baseline as the share of dense rows varies.

use std::path::{Path, PathBuf};

use dape_core::nfa::{children, density_flag, hierarchical_cosines, hierarchy_with_flags, similarity_tokens, uniform_cosines, HierarchicalMask};
use dape_core::tokens::even_spans;
use dape_core::{AffinityMask, DapeModel, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::Result;
use crate::runcfg::{ensure_dir, write_file, RunConfig};
use crate::training::csv_bytes;

pub const BENCH_CSV: &str = "bench.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// Forced dense fraction, or `natural` for the configured threshold rule.
    pub density: String,
    pub scenes: usize,
    pub cosines_l1: u64,
    pub cosines_l2: u64,
    pub cosines_l3: u64,
    pub nfa_cosines: u64,
    pub uniform_cosines: u64,
    pub nfa_macs: u64,
    pub uniform_macs: u64,
    pub ratio: f64,
    /// `(I·J + 4·n1·J + 8·n2·J) / 21·I·J` with the forced counts; empty for `natural`.
    pub closed_form_ratio: Option<f64>,
}

/// Dense counts forced at fraction `rho` on an `i`-row base grid.
pub fn forced_counts(i: usize, rho: f64) -> (usize, usize) {
    let n1 = (rho * i as f64).round() as usize;
    let n2 = ((2.0 * rho * i as f64).round() as usize).min(2 * n1);
    (n1, n2)
}

/// The `round(rho·rows)` active rows with the most hits, ties to the lower index.
pub fn busiest_rows<S: dape_core::Scalar>(mask: &AffinityMask<S>, active: &[usize], rho: f64) -> Vec<usize> {
    let want = ((rho * mask.rows() as f64).round() as usize).min(active.len());
    let mut rows = active.to_vec();
    rows.sort_by(|&a, &b| mask.row_nonzero(b).cmp(&mask.row_nonzero(a)).then(a.cmp(&b)));
    rows.truncate(want);
    rows.sort_unstable();
    rows
}

/// Per-scene similarity tokens fed to the mask builder, from the model's input projections.
pub struct SceneTokens {
    pub xs: [Tensor<f64>; 3],
    pub ts: [Tensor<f64>; 3],
}

fn named<'a>(model: &'a DapeModel<f64>, name: &str) -> &'a Tensor<f64> {
    model.store.get(model.store.index_of(name).unwrap_or_else(|| panic!("parameter {name}")))
}

pub fn scene_tokens(model: &DapeModel<f64>, features: &Tensor<f64>, text: &Tensor<f64>) -> Result<SceneTokens> {
    let cfg = &model.config;
    let [h, w] = cfg.feature_hw;
    let flat = features.reshaped(&[h * w, cfg.image_channels])?;
    let fmap = flat.matmul(named(model, "in_img"))?.reshape(&[h, w, cfg.d])?;
    let tpos = text.matmul(named(model, "in_txt"))?;
    let spans = even_spans(0, cfg.text_len, cfg.j);
    let conv = [0, 1, 2].map(|k| named(model, &format!("nfa.conv{k}")));
    let proj = [0, 1, 2].map(|k| named(model, &format!("nfa.branch{k}")));
    let (xs, ts) = similarity_tokens(&fmap, &tpos, &spans, conv, proj, &cfg.nfa())?;
    Ok(SceneTokens { xs, ts })
}

/// Hierarchy with `rho` of the rows forced dense at each level.
pub fn forced_hierarchy(tok: &SceneTokens, mu: [f64; 3], k_thr: f64, rho: f64) -> Result<HierarchicalMask<f64>> {
    let i = tok.xs[0].rows();
    let mut active: Vec<usize> = (0..i).collect();
    let mut rule = |mask: &AffinityMask<f64>, _level: usize| {
        let rows = busiest_rows(mask, &active, rho);
        active = children(&rows);
        rows
    };
    Ok(hierarchy_with_flags([&tok.xs[0], &tok.xs[1], &tok.xs[2]], [&tok.ts[0], &tok.ts[1], &tok.ts[2]], mu, k_thr, &mut rule)?)
}

pub fn natural_hierarchy(tok: &SceneTokens, mu: [f64; 3], k_thr: f64, tau_d: f64) -> Result<HierarchicalMask<f64>> {
    let mut rule = |mask: &AffinityMask<f64>, _: usize| density_flag(mask, tau_d);
    Ok(hierarchy_with_flags([&tok.xs[0], &tok.xs[1], &tok.xs[2]], [&tok.ts[0], &tok.ts[1], &tok.ts[2]], mu, k_thr, &mut rule)?)
}

/// One row per forced density, then the `natural` row.
pub fn run_bench(cfg: &RunConfig, corpus: &Corpus, densities: &[f64]) -> Result<Vec<BenchRow>> {
    let model = DapeModel::<f64>::new(cfg.model.clone())?;
    let n = cfg.bench.scenes.unwrap_or(corpus.len()).min(corpus.len());
    let tokens: Vec<SceneTokens> = (0..n).map(|s| scene_tokens(&model, &corpus.images[s], &corpus.texts[s])).collect::<Result<_>>()?;
    let m = &cfg.model;
    let (i, j) = (m.nfa_grid[0] * m.nfa_grid[1], m.j);
    let macs = |c: u64| c * 3 * m.d as u64;
    let summarize = |label: String, hs: &[HierarchicalMask<f64>], closed: Option<f64>| {
        let mut per = [0u64; 3];
        for h in hs {
            for k in 0..3 {
                per[k] += h.cosines[k];
            }
        }
        let total: u64 = per.iter().sum();
        let uniform = uniform_cosines(i, j) * hs.len() as u64;
        BenchRow {
            density: label,
            scenes: hs.len(),
            cosines_l1: per[0],
            cosines_l2: per[1],
            cosines_l3: per[2],
            nfa_cosines: total,
            uniform_cosines: uniform,
            nfa_macs: macs(total),
            uniform_macs: macs(uniform),
            ratio: total as f64 / uniform as f64,
            closed_form_ratio: closed,
        }
    };
    let mut rows = Vec::new();
    for &rho in densities {
        let hs: Vec<_> = tokens.iter().map(|t| forced_hierarchy(t, m.mu, m.k_thr, rho)).collect::<Result<_>>()?;
        let (n1, n2) = forced_counts(i, rho);
        let closed = hierarchical_cosines(i, j, n1, n2) as f64 / uniform_cosines(i, j) as f64;
        rows.push(summarize(format!("{rho:.2}"), &hs, Some(closed)));
    }
    let hs: Vec<_> = tokens.iter().map(|t| natural_hierarchy(t, m.mu, m.k_thr, m.tau_d)).collect::<Result<_>>()?;
    rows.push(summarize("natural".into(), &hs, None));
    Ok(rows)
}

/// `dape bench`: writes `bench.csv` under `root/<run id>`.
pub fn cmd_bench(cfg: &RunConfig, root: &Path, densities: &[f64]) -> Result<(Vec<BenchRow>, PathBuf)> {
    let dir = root.join(cfg.run_id());
    ensure_dir(&dir)?;
    let corpus = cfg.materialize_corpus(&dir)?;
    let rows = run_bench(cfg, &corpus, densities)?;
    write_file(&dir.join(BENCH_CSV), csv_bytes(&rows)?)?;
    Ok((rows, dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate;

    #[test]
    fn forced_rows_match_the_closed_form() {
        let cfg = RunConfig { bench: crate::runcfg::BenchSpec { scenes: Some(3), ..Default::default() }, ..Default::default() };
        let corpus = generate(&cfg.corpus_params()).unwrap();
        let rows = run_bench(&cfg, &corpus, &[0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(rows.len(), 5);
        for r in &rows[..4] {
            assert!((r.ratio - r.closed_form_ratio.unwrap()).abs() < 1e-12, "{r:?}");
            assert_eq!(r.scenes, 3);
        }
        assert!((rows[0].ratio - 1.0 / 21.0).abs() < 1e-15);
        assert_eq!(rows[3].ratio, 1.0);
        assert!(rows.windows(2).take(3).all(|w| w[0].ratio < w[1].ratio));
        assert_eq!(rows[4].density, "natural");
    }

    #[test]
    fn busiest_rows_break_ties_low() {
        let mut m = AffinityMask::<f64>::zeros(4, 3, 1.0, dape_core::MaskLevel::Coarse);
        m.weights.set2(2, 0, 1.0);
        m.weights.set2(2, 1, 1.0);
        m.weights.set2(3, 0, 1.0);
        m.weights.set2(1, 0, 1.0);
        assert_eq!(busiest_rows(&m, &[0, 1, 2, 3], 0.5), vec![1, 2]);
        assert_eq!(busiest_rows(&m, &[0, 3], 0.75), vec![0, 3]);
        assert_eq!(forced_counts(16, 0.25), (4, 8));
        assert_eq!(forced_counts(16, 0.1), (2, 3));
    }
}
