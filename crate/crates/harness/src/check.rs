//! Invariant suites, one or more per module, with optional seeded faults.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use dape_core::attention::{MaskMode, ProjectionSet};
use dape_core::coarse::{coarse_align, coarse_mask, CoarseParams};
use dape_core::cwa::{cwa_block, gate_channels, topk_segments, ChannelAgg, ChannelGate, CwaParams, CwaWeights};
use dape_core::decisions::Decisions;
use dape_core::fourier::highpass_channels;
use dape_core::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use dape_core::mask::binarize;
use dape_core::nfa::{
    density_flag, full_materialization, hierarchical_cosines, hierarchy_with_flags, lattice, nfa_block, split_widths, HierarchyParams,
    NfaParams, NfaWeights,
};
use dape_core::phi::{phi_inject, DetailSource, PhiParams, PhiWeights, ResidualSource};
use dape_core::tensor::conv2d_local;
use dape_core::tokens::even_spans;
use dape_core::train::batch_loss_on_tape;
use dape_core::{checkpoint, train_step, AffinityMask, Batch, DapeConfig, DapeModel, ForwardTrace, ImageInput, MaskLevel, Module, Tape, Tensor, TextInput, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::run_bench;
use crate::corpus::{generate, CorpusParams};
use crate::error::{HarnessError, Result};
use crate::oracle::{direct_affinity, direct_attention, direct_highpass, oracle_configs, oracle_gap, random_pair};
use crate::runcfg::{BenchSpec, RunConfig};
use crate::scene::{caption_for, DensityMix, PALETTE};

type Inv = std::result::Result<(), String>;

/// The discrete kernels the suites exercise; a fault swaps one for a broken copy.
#[derive(Clone, Copy)]
pub struct Kernels {
    pub binarize: fn(&Tensor<f64>, f64, f64, MaskLevel) -> AffinityMask<f64>,
    pub topk_segments: fn(&[f64], usize, usize) -> dape_core::Result<Vec<Vec<usize>>>,
    pub density_flag: fn(&AffinityMask<f64>, f64) -> Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlippedThreshold,
    WrongOrderTopk,
    OffByOneDensity,
}

impl Fault {
    pub const ALL: [Fault; 3] = [Fault::FlippedThreshold, Fault::WrongOrderTopk, Fault::OffByOneDensity];

    pub fn name(self) -> &'static str {
        match self {
            Fault::FlippedThreshold => "flipped-threshold",
            Fault::WrongOrderTopk => "wrong-order-topk",
            Fault::OffByOneDensity => "off-by-one-density",
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fault {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Fault::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| HarnessError::Usage(format!("unknown fault {s:?}; expected one of flipped-threshold, wrong-order-topk, off-by-one-density")))
    }
}

fn flipped_binarize(a: &Tensor<f64>, threshold: f64, hi: f64, level: MaskLevel) -> AffinityMask<f64> {
    AffinityMask { weights: a.map(|x| if x < threshold { hi } else { 0.0 }), alphabet: vec![0.0, hi], level }
}

fn reversed_topk(a: &[f64], segments: usize, k1: usize) -> dape_core::Result<Vec<Vec<usize>>> {
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    topk_segments(&neg, segments, k1)
}

fn loose_density_flag(mask: &AffinityMask<f64>, tau_d: f64) -> Vec<usize> {
    let cols = mask.cols() as f64;
    (0..mask.rows()).filter(|&r| (mask.row_nonzero(r) + 1) as f64 / cols > tau_d).collect()
}

impl Kernels {
    pub fn live() -> Self {
        Kernels { binarize, topk_segments, density_flag }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        let mut k = Kernels::live();
        match fault {
            Some(Fault::FlippedThreshold) => k.binarize = flipped_binarize,
            Some(Fault::WrongOrderTopk) => k.topk_segments = reversed_topk,
            Some(Fault::OffByOneDensity) => k.density_flag = loose_density_flag,
            None => {}
        }
        k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub module: String,
    pub passed: bool,
    pub seconds: f64,
    pub invariants: Vec<InvariantResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub fault: Option<String>,
    pub seconds: f64,
    pub suites: Vec<SuiteReport>,
}

impl CheckReport {
    /// `suite/invariant` for every failure.
    pub fn failures(&self) -> Vec<String> {
        self.suites
            .iter()
            .flat_map(|s| s.invariants.iter().filter(|i| !i.passed).map(move |i| format!("{}/{}", s.suite, i.name)))
            .collect()
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Inv {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core<T>(r: dape_core::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed weights that turn an output into a scalar for gradient checks.
fn probe(tape: &mut Tape<f64>, out: Var) -> dape_core::Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |i| ((i * 7919 % 13) as f64 - 6.0) / 6.0));
    let h = tape.hadamard(out, w)?;
    tape.sum_all(h)
}

/// Gradient check with every discrete decision recorded once and replayed.
fn frozen_check<F>(params: &[Tensor<f64>], f: F) -> std::result::Result<GradCheckReport, String>
where
    F: Fn(&mut Tape<f64>, &[Var], &mut Decisions<f64>) -> dape_core::Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let mut rec = Decisions::record();
    core(f(&mut tape, &vars, &mut rec))?;
    let log = rec.into_log();
    core(grad_check(params, |t, p| f(t, p, &mut Decisions::replay(log.clone())), &GradCheckOptions::default()))
}

fn grad_bound(rep: &GradCheckReport, bound: f64) -> Inv {
    ensure(rep.max_rel_error < bound && rep.tape_norm > 0.0, || format!("max relative error {:.3e} (bound {bound:.0e}), tape norm {:.3e}", rep.max_rel_error, rep.tape_norm))
}

// ---- tensor ----

fn matmul_matches_naive(_: &Kernels) -> Inv {
    let mut r = rng(1);
    let a = Tensor::<f64>::uniform(&[5, 7], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::uniform(&[7, 3], -1.0, 1.0, &mut r);
    let c = core(a.matmul(&b))?;
    for i in 0..5 {
        for j in 0..3 {
            let want: f64 = (0..7).map(|k| a.get2(i, k) * b.get2(k, j)).sum();
            ensure((c.get2(i, j) - want).abs() < 1e-14, || format!("entry ({i},{j}) {} vs {want}", c.get2(i, j)))?;
        }
    }
    ensure(core(core(a.transpose())?.transpose())? == a, || "transpose is not an involution".into())
}

fn conv_matches_direct(_: &Kernels) -> Inv {
    let mut r = rng(2);
    let (h, w, c) = (6, 5, 2);
    let x = Tensor::<f64>::uniform(&[h, w, c], -1.0, 1.0, &mut r);
    for k in [3usize, 5, 7] {
        let wt = Tensor::<f64>::uniform(&[c, k, k], -1.0, 1.0, &mut r);
        let y = core(conv2d_local(&x, k, &wt))?;
        let rad = (k / 2) as isize;
        for (yy, xx, ch) in [(0, 0, 0), (2, 3, 1), (5, 4, 0), (3, 0, 1)] {
            let mut want = 0.0;
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    let (sy, sx) = (yy as isize + dy - rad, xx as isize + dx - rad);
                    if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                        want += wt.data()[(ch * k + dy as usize) * k + dx as usize] * x.get3(sy as usize, sx as usize, ch);
                    }
                }
            }
            let got = y.get3(yy, xx, ch);
            ensure((got - want).abs() < 1e-13, || format!("k={k} at ({yy},{xx},{ch}): {got} vs {want}"))?;
        }
    }
    Ok(())
}

fn highpass_matches_direct_dft(_: &Kernels) -> Inv {
    let mut r = rng(3);
    for (h, w) in [(8, 8), (6, 10)] {
        let x = Tensor::<f64>::uniform(&[h, w, 2], -1.0, 1.0, &mut r);
        for cutoff in [0.1, 0.25, 0.6] {
            let got = core(highpass_channels(&x, cutoff))?;
            let gap = got.max_abs_diff(&direct_highpass(&x, cutoff));
            ensure(gap < 1e-12, || format!("{h}×{w} cutoff {cutoff}: gap {gap:.2e}"))?;
        }
    }
    let flat = Tensor::<f64>::full(&[8, 8, 1], 0.7);
    ensure(core(highpass_channels(&flat, 0.25))?.max_abs() < 1e-12, || "a constant map survives the high-pass".into())
}

// ---- mask ----

fn binarize_matches_threshold(k: &Kernels) -> Inv {
    let mut r = rng(4);
    for thr in [-0.3, 0.0, 0.5] {
        let mut a = Tensor::<f64>::uniform(&[12, 7], -1.0, 1.0, &mut r);
        a.data_mut()[5] = thr;
        let m = (k.binarize)(&a, thr, 1.0, MaskLevel::Coarse);
        for (i, (&x, &v)) in a.data().iter().zip(m.weights.data()).enumerate() {
            let want = if x > thr { 1.0 } else { 0.0 };
            ensure(v == want, || format!("entry {i}: affinity {x:.4} at threshold {thr} gave {v}, expected {want}"))?;
        }
    }
    Ok(())
}

fn coarse_and_channel_alphabets(_: &Kernels) -> Inv {
    let mut r = rng(5);
    for cfg in [crate::oracle::small_config(), DapeConfig { k0: 0.3, k_c: 0.2, ..crate::oracle::small_config() }] {
        let model = core(DapeModel::<f64>::new(cfg))?;
        let (f, t) = random_pair(&model.config, &mut r);
        let res = core(model.pair(&core(ImageInput::new(f, model.config.cutoff_frac))?, &TextInput::new(t)))?;
        for l in &res.trace.layers {
            let masks = std::iter::once(&l.a0).chain(l.cwa.iter().map(|c| &c.ac));
            for m in masks {
                ensure(m.weights.data().iter().all(|&x| x == 0.0 || x == 1.0), || format!("layer {}: {:?} mask leaves {{0, 1}}", l.layer, m.level))?;
            }
        }
    }
    Ok(())
}

fn random_levels(r: &mut ChaCha8Rng, i: usize, j: usize, d: usize) -> ([Tensor<f64>; 3], [Tensor<f64>; 3]) {
    let xs = [0, 1, 2].map(|k| Tensor::uniform(&[i << k, d], -1.0, 1.0, r));
    let ts = [0, 1, 2].map(|k| Tensor::uniform(&[j << k, d], -1.0, 1.0, r));
    (xs, ts)
}

fn hierarchy_structure_on_100_instances(k: &Kernels) -> Inv {
    let mut r = rng(6);
    for inst in 0..100 {
        let (i, j, d) = (r.gen_range(1..6), r.gen_range(1..5), r.gen_range(2..7));
        let (xs, ts) = random_levels(&mut r, i, j, d);
        let raw: [f64; 3] = [r.gen_range(0.1..1.0), r.gen_range(0.1..1.0), r.gen_range(0.1..1.0)];
        let s: f64 = raw.iter().sum();
        let mu = raw.map(|x| x / s);
        let k_thr = r.gen_range(-0.3..0.4);
        let tau_d = r.gen_range(0.0..0.6);
        let flag = k.density_flag;
        let h = core(hierarchy_with_flags([&xs[0], &xs[1], &xs[2]], [&ts[0], &ts[1], &ts[2]], mu, k_thr, &mut |m, _| flag(m, tau_d)))?;
        core(h.check()).map_err(|e| format!("instance {inst}: {e}"))?;
        let lat = lattice::<f64>(mu);
        for &v in h.combined.weights.data() {
            ensure(lat.contains(&v), || format!("instance {inst}: {v} is off the lattice {lat:?}"))?;
            ensure(v <= 1.0 + 1e-12, || format!("instance {inst}: entry {v} above 1"))?;
        }
    }
    Ok(())
}

// ---- coarse ----

fn coarse_mask_is_thresholded_cosine(k: &Kernels) -> Inv {
    let mut r = rng(7);
    for k0 in [-0.2, 0.0, 0.3] {
        let m = Tensor::<f64>::uniform(&[9, 5], -1.0, 1.0, &mut r);
        let t = Tensor::<f64>::uniform(&[4, 5], -1.0, 1.0, &mut r);
        let mut tape = Tape::<f64>::new();
        let got = core(coarse_mask(&mut tape, &m, &t, k0))?;
        let want = (k.binarize)(&direct_affinity(&m, &t), k0, 1.0, MaskLevel::Coarse);
        ensure(got.weights == want.weights, || format!("k0 = {k0}: mask differs from thresholded cosines"))?;
        ensure(tape.meter().total_cosines() == 36, || format!("charged {} cosines for 9×4", tape.meter().total_cosines()))?;
    }
    Ok(())
}

fn coarse_updates(_: &Kernels) -> Inv {
    let mut r = rng(8);
    let d = 6;
    let m = Tensor::<f64>::uniform(&[5, d], -1.0, 1.0, &mut r);
    let t = Tensor::<f64>::uniform(&[3, d], -1.0, 1.0, &mut r);
    let w: Vec<Tensor<f64>> = (0..6).map(|_| Tensor::normal(&[d, d], 0.4, &mut r)).collect();
    for (k0, mode) in [(0.0, MaskMode::PostSoftmax), (0.1, MaskMode::PreSoftmax), (1.0, MaskMode::PostSoftmax)] {
        let mut tape = Tape::<f64>::new();
        let (mv, tv) = (tape.constant(m.clone()), tape.constant(t.clone()));
        let p: Vec<Var> = w.iter().map(|x| tape.constant(x.clone())).collect();
        let img = ProjectionSet { q: p[0], k: p[1], v: p[2] };
        let txt = ProjectionSet { q: p[3], k: p[4], v: p[5] };
        let out = core(coarse_align(&mut tape, mv, tv, &img, &txt, &CoarseParams { k0, mode }, &mut Decisions::live()))?;
        let a = &out.a0.weights;
        let mm = |x: &Tensor<f64>, y: &Tensor<f64>| x.matmul(y).expect("shapes agree");
        let m1 = direct_attention(&mm(&m, &w[0]), &mm(&t, &w[4]), &mm(&t, &w[5]), Some(a), mode);
        let t1 = direct_attention(&mm(&t, &w[3]), &mm(&m, &w[1]), &mm(&m, &w[2]), Some(&core(a.transpose())?), mode);
        let gap = tape.value(out.m1).max_abs_diff(&m1).max(tape.value(out.t1).max_abs_diff(&t1));
        ensure(gap < 1e-12, || format!("k0 = {k0}, {mode:?}: updates differ from direct attention by {gap:.2e}"))?;
        if k0 >= 1.0 {
            ensure(tape.value(out.m1).max_abs() == 0.0 && tape.value(out.t1).max_abs() == 0.0, || "fully masked updates are not zero".into())?;
        }
    }
    Ok(())
}

// ---- cwa ----

fn topk_matches_rank_oracle(k: &Kernels) -> Inv {
    let mut r = rng(9);
    for case in 0..40 {
        let segments = r.gen_range(1..5);
        let width = r.gen_range(1..7);
        let k1 = r.gen_range(1..=width);
        // few distinct values, so ties are common
        let a: Vec<f64> = (0..segments * width).map(|_| r.gen_range(0..4) as f64 / 4.0).collect();
        let got = core((k.topk_segments)(&a, segments, k1))?;
        for (l, sel) in got.iter().enumerate() {
            let range = l * width..(l + 1) * width;
            let want: Vec<usize> = range
                .clone()
                .filter(|&c| range.clone().filter(|&o| a[o] > a[c] || (a[o] == a[c] && o < c)).count() < k1)
                .collect();
            ensure(sel == &want, || format!("case {case} segment {l}: selected {sel:?}, expected {want:?} from {:?}", &a[range.clone()]))?;
        }
    }
    Ok(())
}

fn gate_is_a_distribution(_: &Kernels) -> Inv {
    let mut r = rng(10);
    let d = 8;
    let mut tape = Tape::<f64>::new();
    let m1 = tape.constant(Tensor::uniform(&[5, d], -1.0, 1.0, &mut r));
    let g = ChannelGate {
        w1: tape.constant(Tensor::normal(&[d, d], 0.5, &mut r)),
        b1: tape.constant(Tensor::normal(&[1, d], 0.5, &mut r)),
        w2: tape.constant(Tensor::normal(&[d, d], 0.5, &mut r)),
        b2: tape.constant(Tensor::normal(&[1, d], 0.5, &mut r)),
    };
    let a = core(gate_channels(&mut tape, m1, &g))?;
    let v = tape.value(a);
    ensure(v.shape() == [1, d], || format!("gate shape {:?}", v.shape()))?;
    ensure((v.sum() - 1.0f64).abs() < 1e-12 && v.data().iter().all(|&x| x > 0.0), || "gate is not a distribution".into())
}

fn disabled_cwa_leaves_no_trace(_: &Kernels) -> Inv {
    let mut r = rng(11);
    let cfg = DapeConfig { enable_cwa: false, ..crate::oracle::small_config() };
    let model = core(DapeModel::<f64>::new(cfg))?;
    let (f, t) = random_pair(&model.config, &mut r);
    let res = core(model.pair(&core(ImageInput::new(f, 0.25))?, &TextInput::new(t)))?;
    ensure(res.trace.layers.iter().all(|l| l.cwa.is_none()), || "channel alignment ran while disabled".into())?;
    ensure(res.trace.cost.macs(Module::Cwa) == 0, || "channel alignment was charged while disabled".into())
}

// ---- nfa ----

fn density_flag_matches_fraction(k: &Kernels) -> Inv {
    let mut r = rng(12);
    for case in 0..30 {
        let (rows, cols) = (r.gen_range(1..9), r.gen_range(1..9));
        let mut m = AffinityMask::<f64>::zeros(rows, cols, 1.0, MaskLevel::Fine1);
        for i in 0..rows * cols {
            if r.gen_bool(0.4) {
                m.weights.data_mut()[i] = 1.0;
            }
        }
        // boundary: exactly a quarter of the row set
        let tau = if case % 3 == 0 && cols % 4 == 0 { 0.25 } else { r.gen_range(0.0..1.0) };
        if tau == 0.25 {
            let row = m.weights.row_mut(0);
            row.fill(0.0);
            row[..cols / 4].fill(1.0);
        }
        let want: Vec<usize> = (0..rows).filter(|&i| m.row_nonzero(i) as f64 / cols as f64 > tau).collect();
        let got = (k.density_flag)(&m, tau);
        ensure(got == want, || format!("case {case} ({rows}×{cols}, tau {tau}): flagged {got:?}, expected {want:?}"))?;
    }
    Ok(())
}

fn hierarchy_matches_full_materialization(k: &Kernels) -> Inv {
    let mut r = rng(13);
    for inst in 0..50 {
        let (i, j) = (r.gen_range(1..6), r.gen_range(1..5));
        let (xs, ts) = random_levels(&mut r, i, j, 4);
        let p = HierarchyParams { mu: [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], k_thr: r.gen_range(-0.3..0.3), tau_d: r.gen_range(0.0..0.6), refine: true };
        let flag = k.density_flag;
        let h = core(hierarchy_with_flags([&xs[0], &xs[1], &xs[2]], [&ts[0], &ts[1], &ts[2]], p.mu, p.k_thr, &mut |m, _| flag(m, p.tau_d)))?;
        let (full, full_cos) = core(full_materialization([&xs[0], &xs[1], &xs[2]], [&ts[0], &ts[1], &ts[2]], &p))?;
        ensure(h.combined.weights == full, || format!("instance {inst}: hierarchical mask differs from full materialisation"))?;
        let (n1, n2) = (h.dense[0].len(), h.dense[1].len());
        ensure(h.total_cosines() == hierarchical_cosines(i, j, n1, n2), || format!("instance {inst}: cosine count off the closed form"))?;
        ensure(h.total_cosines() <= full_cos, || format!("instance {inst}: more cosines than the uniform baseline"))?;
    }
    Ok(())
}

fn branch_widths_partition_channels(_: &Kernels) -> Inv {
    for c in 7..64 {
        let w = core(split_widths([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], c))?;
        ensure(w.iter().sum::<usize>() == c && w.iter().all(|&x| x > 0), || format!("c = {c}: widths {w:?}"))?;
        ensure(w[0] <= w[1] && w[1] <= w[2], || format!("c = {c}: widths {w:?} not ordered like μ"))?;
    }
    Ok(())
}

fn disabled_refinement_is_level_one_only(_: &Kernels) -> Inv {
    let mut r = rng(14);
    let cfg = DapeConfig { enable_nfa: false, ..crate::oracle::small_config() };
    let model = core(DapeModel::<f64>::new(cfg))?;
    let (f, t) = random_pair(&model.config, &mut r);
    let res = core(model.pair(&core(ImageInput::new(f, 0.25))?, &TextInput::new(t)))?;
    for h in res.trace.hierarchies() {
        ensure(h.cosines[1] == 0 && h.cosines[2] == 0 && h.dense[0].is_empty(), || format!("refinement ran: {:?}", h.cosines))?;
    }
    Ok(())
}

// ---- phi ----

fn generation_counts_injections(_: &Kernels) -> Inv {
    let mut r = rng(15);
    for (n_layers, period) in [(2, 2), (4, 2), (6, 3), (3, 4)] {
        let cfg = DapeConfig { n_layers, phi_period: period, ..crate::oracle::small_config() };
        let model = core(DapeModel::<f64>::new(cfg))?;
        let (f, t) = random_pair(&model.config, &mut r);
        let res = core(model.pair(&core(ImageInput::new(f, 0.25))?, &TextInput::new(t)))?;
        let want = n_layers / period;
        ensure(res.trace.generation == want, || format!("{n_layers} layers, period {period}: generation {}", res.trace.generation))?;
        let phi_layers: Vec<usize> = res.trace.layers.iter().filter(|l| l.phi.is_some()).map(|l| l.layer).collect();
        let expect: Vec<usize> = (0..n_layers).filter(|l| l % period == period - 1).collect();
        ensure(phi_layers == expect, || format!("injections at {phi_layers:?}, expected {expect:?}"))?;
    }
    Ok(())
}

fn nfa_weights(tape: &mut Tape<f64>, r: &mut ChaCha8Rng, d: usize) -> std::result::Result<NfaWeights<Var>, String> {
    let w = core(split_widths([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], d))?;
    let ks = [3, 5, 7];
    Ok(NfaWeights {
        conv: [0, 1, 2].map(|k| tape.constant(Tensor::uniform(&[w[k], ks[k], ks[k]], -0.3, 0.3, r))),
        branch_proj: [0, 1, 2].map(|k| tape.constant(Tensor::normal(&[w[k], d], 0.5, r))),
        attn: ProjectionSet {
            q: tape.constant(Tensor::normal(&[d, d], 0.4, r)),
            k: tape.constant(Tensor::normal(&[d, d], 0.4, r)),
            v: tape.constant(Tensor::normal(&[d, d], 0.4, r)),
        },
    })
}

fn nfa_params(k_thr: f64) -> NfaParams {
    NfaParams {
        mu: [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0],
        kernels: [3, 5, 7],
        k_thr,
        tau_d: 0.25,
        grid: (2, 2),
        refine: true,
        eq8_literal: false,
        mode: MaskMode::PostSoftmax,
    }
}

fn injection_touches_only_slots(_: &Kernels) -> Inv {
    let mut r = rng(16);
    let d = 6;
    let mut tape = Tape::<f64>::new();
    let rows = Tensor::<f64>::uniform(&[7, d], -1.0, 1.0, &mut r);
    let m1 = tape.constant(rows.clone());
    let text = tape.constant(Tensor::uniform(&[16, d], -1.0, 1.0, &mut r));
    let raw = Tensor::<f64>::uniform(&[8, 8, 3], -1.0, 1.0, &mut r);
    let nfa_w = nfa_weights(&mut tape, &mut r, d)?;
    let w = PhiWeights {
        detail_w: tape.constant(Tensor::normal(&[3, d], 0.5, &mut r)),
        detail_b: tape.constant(Tensor::normal(&[1, d], 0.5, &mut r)),
        attn: ProjectionSet {
            q: tape.constant(Tensor::normal(&[d, d], 0.4, &mut r)),
            k: tape.constant(Tensor::normal(&[d, d], 0.4, &mut r)),
            v: tape.constant(Tensor::normal(&[d, d], 0.4, &mut r)),
        },
        slots: tape.constant(Tensor::zeros(&[2, d])),
    };
    let p = PhiParams { period: 2, residual: ResidualSource::M3, nfa: nfa_params(0.0) };
    let slots = [4, 6];
    let spans = even_spans(0, 16, 4);
    let out = core(phi_inject(&mut tape, 1, m1, &slots, DetailSource::Raw { map: &raw, cutoff_frac: 0.25 }, 0, text, &spans, &w, &nfa_w, &p, &mut Decisions::live()))?;
    let after = tape.value(out.m_out);
    for row in 0..7 {
        let same = after.row(row) == rows.row(row);
        ensure(same != slots.contains(&row), || format!("row {row}: changed = {}", !same))?;
    }
    ensure(out.state.generation == 1, || "generation did not advance".into())?;
    let off_phase = phi_inject(&mut tape, 0, m1, &slots, DetailSource::Raw { map: &raw, cutoff_frac: 0.25 }, 0, text, &spans, &w, &nfa_w, &p, &mut Decisions::live());
    ensure(off_phase.is_err(), || "an off-phase injection was accepted".into())
}

/// Extra MACs each injecting layer costs over the same layer without detail injection.
pub fn injection_costs(with: &ForwardTrace<f64>, without: &ForwardTrace<f64>) -> Vec<i64> {
    with.layers
        .iter()
        .zip(&without.layers)
        .filter(|(a, _)| a.phi.is_some())
        .map(|(a, b)| a.cost.total_macs() as i64 - b.cost.total_macs() as i64)
        .collect()
}

fn injection_cost_bound(_: &Kernels) -> Inv {
    let mut r = rng(17);
    for n_layers in [4, 8] {
        let base = DapeConfig { n_layers, phi_period: 4, enable_nfa: false, ..crate::oracle::small_config() };
        let (f, t) = random_pair(&base, &mut r);
        let (img, txt) = (core(ImageInput::new(f, base.cutoff_frac))?, TextInput::new(t));
        let run = |cfg: DapeConfig| -> std::result::Result<_, String> { core(core(DapeModel::<f64>::new(cfg))?.pair(&img, &txt)) };
        let with = run(DapeConfig { enable_phi: true, ..base.clone() })?;
        let without = run(DapeConfig { enable_phi: false, ..base.clone() })?;
        let per = injection_costs(&with.trace, &without.trace);
        let one = per.iter().copied().max().unwrap_or(0);
        let added = with.trace.cost.total_macs() as i64 - without.trace.cost.total_macs() as i64;
        let bound = (n_layers / 4) as i64 * one;
        ensure(per.len() == n_layers / 4, || format!("{} injections for {n_layers} layers", per.len()))?;
        ensure(added <= bound, || format!("{n_layers} layers: detail injection adds {added} MACs, bound {bound}"))?;
    }
    Ok(())
}

// ---- model ----

fn oracle_equivalence(_: &Kernels) -> Inv {
    let mut r = rng(18);
    for (name, cfg) in oracle_configs() {
        let model = core(DapeModel::<f64>::new(cfg))?;
        for pair in 0..2 {
            let (f, t) = random_pair(&model.config, &mut r);
            let gap = oracle_gap(&model, &f, &t).map_err(|e| e.to_string())?;
            ensure(gap < 1e-10, || format!("{name} pair {pair}: gap {gap:.3e}"))?;
        }
    }
    Ok(())
}

fn embeddings_are_unit_norm(_: &Kernels) -> Inv {
    let mut r = rng(19);
    let model = core(DapeModel::<f64>::new(crate::oracle::small_config()))?;
    let (f, t) = random_pair(&model.config, &mut r);
    let res = core(model.pair(&core(ImageInput::new(f, 0.25))?, &TextInput::new(t)))?;
    for e in [&res.img_emb, &res.txt_emb] {
        ensure((e.norm() - 1.0).abs() < 1e-12, || format!("embedding norm {}", e.norm()))?;
    }
    ensure((-1.0..=1.0).contains(&res.score), || format!("score {}", res.score))
}

fn tiny_config() -> DapeConfig {
    DapeConfig {
        d: 8,
        n_layers: 2,
        feature_hw: [8, 8],
        text_len: 16,
        image_channels: 4,
        text_channels: 4,
        grid: [2, 2],
        j: 4,
        segments: 2,
        k1: 2,
        k0: 0.0,
        k_c: 0.0,
        k_thr: 0.0,
        nfa_grid: [2, 2],
        phi_period: 2,
        batch_size: 2,
        ..Default::default()
    }
}

fn random_batch(cfg: &DapeConfig, b: usize, seed: u64) -> std::result::Result<Batch<f64>, String> {
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for _ in 0..b {
        let (f, t) = random_pair(cfg, &mut r);
        images.push(core(ImageInput::new(f, cfg.cutoff_frac))?);
        texts.push(TextInput::new(t));
    }
    core(Batch::new(images, texts))
}

fn training_is_bit_reproducible(_: &Kernels) -> Inv {
    let cfg = tiny_config();
    let b = random_batch(&cfg, 2, 20)?;
    let run = || -> std::result::Result<Vec<u8>, String> {
        let mut m = core(DapeModel::<f64>::new(cfg.clone()))?;
        for _ in 0..2 {
            core(train_step(&mut m, &b))?;
        }
        core(checkpoint::to_bytes(&m))
    };
    let (a, c) = (run()?, run()?);
    ensure(a == c, || "two identical runs wrote different checkpoints".into())?;
    let back: DapeModel<f64> = core(checkpoint::from_bytes(&a))?;
    ensure(core(checkpoint::to_bytes(&back))? == a, || "checkpoint does not round-trip".into())
}

// ---- grad ----

fn full_model_gradients(_: &Kernels) -> Inv {
    let cfg = tiny_config();
    let m = core(DapeModel::<f64>::new(cfg.clone()))?;
    let b = random_batch(&cfg, 2, 21)?;
    let mut params: Vec<Tensor<f64>> = (0..m.store.len()).map(|i| m.store.get(i).clone()).collect();
    params.push(Tensor::scalar(m.temperature));
    let weights = m.weights.clone();
    let rep = frozen_check(&params, |t, p, dec| {
        let w = weights.map(&mut |&i| p[i]);
        batch_loss_on_tape(t, &cfg, &w, p[p.len() - 1], &b, dec)
    })?;
    grad_bound(&rep, 1e-3)
}

fn coarse_gradients(_: &Kernels) -> Inv {
    let mut r = rng(22);
    let d = 6;
    let mut params = vec![Tensor::<f64>::uniform(&[5, d], -1.0, 1.0, &mut r), Tensor::uniform(&[3, d], -1.0, 1.0, &mut r)];
    params.extend((0..6).map(|_| Tensor::normal(&[d, d], 0.4, &mut r)));
    let rep = frozen_check(&params, |t, p, dec| {
        let img = ProjectionSet { q: p[2], k: p[3], v: p[4] };
        let txt = ProjectionSet { q: p[5], k: p[6], v: p[7] };
        let out = coarse_align(t, p[0], p[1], &img, &txt, &CoarseParams { k0: 0.0, mode: MaskMode::PostSoftmax }, dec)?;
        let (a, b) = (probe(t, out.t1)?, probe(t, out.m1)?);
        t.add(a, b)
    })?;
    grad_bound(&rep, 1e-4)
}

fn cwa_gradients(_: &Kernels) -> Inv {
    let mut r = rng(23);
    let (i, j, d) = (4, 3, 6);
    let params = vec![
        Tensor::<f64>::uniform(&[i, d], -1.0, 1.0, &mut r),
        Tensor::uniform(&[j, d], -1.0, 1.0, &mut r),
        Tensor::normal(&[d, d], 0.5, &mut r),
        Tensor::normal(&[1, d], 0.5, &mut r),
        Tensor::normal(&[d, d], 0.5, &mut r),
        Tensor::normal(&[1, d], 0.5, &mut r),
        Tensor::normal(&[i, d], 0.5, &mut r),
        Tensor::normal(&[d, d], 0.4, &mut r),
        Tensor::normal(&[d, d], 0.4, &mut r),
        Tensor::normal(&[d, d], 0.4, &mut r),
    ];
    let cp = CwaParams { segments: 2, k1: 2, k_c: 0.0, agg: ChannelAgg::Mean, mode: MaskMode::PostSoftmax };
    let rep = frozen_check(&params, |t, p, dec| {
        let w = CwaWeights {
            gate: ChannelGate { w1: p[2], b1: p[3], w2: p[4], b2: p[5] },
            lift: p[6],
            attn: ProjectionSet { q: p[7], k: p[8], v: p[9] },
        };
        let out = cwa_block(t, p[0], p[1], &w, &cp, dec)?;
        probe(t, out.t2)
    })?;
    grad_bound(&rep, 1e-4)
}

fn nfa_param_tensors(r: &mut ChaCha8Rng, c: usize, d: usize) -> Vec<Tensor<f64>> {
    let w = split_widths([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], c).expect("enough channels");
    let ks = [3, 5, 7];
    let mut v: Vec<Tensor<f64>> = (0..3).map(|k| Tensor::uniform(&[w[k], ks[k], ks[k]], -0.3, 0.3, r)).collect();
    v.extend((0..3).map(|k| Tensor::normal(&[w[k], d], 0.5, r)));
    v.extend((0..3).map(|_| Tensor::normal(&[d, d], 0.4, r)));
    v
}

fn bind_nfa(p: &[Var]) -> NfaWeights<Var> {
    NfaWeights { conv: [p[0], p[1], p[2]], branch_proj: [p[3], p[4], p[5]], attn: ProjectionSet { q: p[6], k: p[7], v: p[8] } }
}

fn nfa_gradients(_: &Kernels) -> Inv {
    let mut r = rng(24);
    let d = 6;
    let mut params = vec![Tensor::<f64>::uniform(&[8, 8, d], -1.0, 1.0, &mut r), Tensor::uniform(&[16, d], -1.0, 1.0, &mut r)];
    params.extend(nfa_param_tensors(&mut r, d, d));
    let spans = even_spans(0, 16, 4);
    let np = nfa_params(0.0);
    let rep = frozen_check(&params, |t, p, dec| {
        let out = nfa_block(t, p[0], p[1], &spans, &bind_nfa(&p[2..]), &np, dec)?;
        probe(t, out.m2)
    })?;
    grad_bound(&rep, 1e-4)
}

fn phi_gradients(_: &Kernels) -> Inv {
    let mut r = rng(25);
    let d = 6;
    let raw = Tensor::<f64>::uniform(&[8, 8, 3], -1.0, 1.0, &mut r);
    let mut params = vec![
        Tensor::<f64>::uniform(&[6, d], -1.0, 1.0, &mut r),
        Tensor::uniform(&[16, d], -1.0, 1.0, &mut r),
        Tensor::normal(&[3, d], 0.5, &mut r),
        Tensor::normal(&[1, d], 0.5, &mut r),
        Tensor::normal(&[d, d], 0.4, &mut r),
        Tensor::normal(&[d, d], 0.4, &mut r),
        Tensor::normal(&[d, d], 0.4, &mut r),
    ];
    params.extend(nfa_param_tensors(&mut r, d, d));
    let spans = even_spans(0, 16, 4);
    let pp = PhiParams { period: 1, residual: ResidualSource::M3, nfa: nfa_params(0.0) };
    let rep = frozen_check(&params, |t, p, dec| {
        let slots = t.constant(Tensor::zeros(&[2, d]));
        let w = PhiWeights { detail_w: p[2], detail_b: p[3], attn: ProjectionSet { q: p[4], k: p[5], v: p[6] }, slots };
        let source = DetailSource::Raw { map: &raw, cutoff_frac: 0.25 };
        let out = phi_inject(t, 0, p[0], &[4, 5], source, 0, p[1], &spans, &w, &bind_nfa(&p[7..]), &pp, dec)?;
        probe(t, out.m_out)
    })?;
    grad_bound(&rep, 1e-4)
}

// ---- corpus ----

fn corpus_params(n: usize, mix: DensityMix) -> CorpusParams {
    CorpusParams::for_model(n, 3, mix, &DapeConfig::default())
}

fn corpus_bytes_are_reproducible(_: &Kernels) -> Inv {
    let p = corpus_params(4, DensityMix::default());
    let (a, b) = (generate(&p).map_err(|e| e.to_string())?, generate(&p).map_err(|e| e.to_string())?);
    for ((name, x), (_, y)) in a.encode().iter().zip(b.encode().iter()) {
        ensure(x == y, || format!("{name} differs between two generations"))?;
    }
    let other = generate(&CorpusParams { seed: 4, ..p }).map_err(|e| e.to_string())?;
    ensure(other.encode()[1].1 != a.encode()[1].1, || "seed does not change the images".into())
}

fn single_shape_mix(_: &Kernels) -> Inv {
    let c = generate(&corpus_params(12, DensityMix([1.0, 0.0, 0.0]))).map_err(|e| e.to_string())?;
    ensure(c.manifest.scenes.iter().all(|s| s.shapes.len() == 1), || "a sparse-only corpus has a multi-shape scene".into())
}

fn captions_follow_the_grammar(_: &Kernels) -> Inv {
    let c = generate(&corpus_params(30, DensityMix::default())).map_err(|e| e.to_string())?;
    for (i, s) in c.manifest.scenes.iter().enumerate() {
        let parts: Vec<&str> = s.caption.split(" and ").collect();
        ensure(parts.len() == s.shapes.len(), || format!("scene {i}: {} clauses for {} shapes", parts.len(), s.shapes.len()))?;
        for (part, shape) in parts.iter().zip(&s.shapes) {
            let words: Vec<&str> = part.split(' ').collect();
            ensure(words.len() == 3 && words[0] == "a", || format!("scene {i}: clause {part:?}"))?;
            ensure(PALETTE.iter().any(|p| p.0 == words[1]) && words[1] == shape.color_name(), || format!("scene {i}: colour {:?}", words[1]))?;
            ensure(words[2] == shape.kind.name(), || format!("scene {i}: kind {:?}", words[2]))?;
        }
        ensure(s.word_count() == 3 + 4 * (s.shapes.len() - 1), || format!("scene {i}: {} words", s.word_count()))?;
        ensure(s.caption == caption_for(&s.shapes), || format!("scene {i}: caption is not generated from the record"))?;
    }
    Ok(())
}

fn split_is_eighty_twenty(_: &Kernels) -> Inv {
    for n in [4, 10, 64] {
        let c = generate(&corpus_params(n, DensityMix::default())).map_err(|e| e.to_string())?;
        let m = &c.manifest;
        let want = (0.2 * n as f64).round() as usize;
        ensure(m.eval.len() == want && m.train.len() + m.eval.len() == n, || format!("n = {n}: {} train, {} eval", m.train.len(), m.eval.len()))?;
        ensure(m.eval.iter().all(|i| !m.train.contains(i)), || format!("n = {n}: train and eval overlap"))?;
    }
    Ok(())
}

// ---- bench ----

fn bench_rows() -> std::result::Result<Vec<crate::bench::BenchRow>, String> {
    let cfg = RunConfig { bench: BenchSpec { scenes: Some(6), ..Default::default() }, ..Default::default() };
    let corpus = generate(&corpus_params(8, DensityMix::default())).map_err(|e| e.to_string())?;
    run_bench(&cfg, &corpus, &[0.0, 0.25, 0.5, 0.75, 1.0]).map_err(|e| e.to_string())
}

fn bench_endpoints_and_monotonicity(_: &Kernels) -> Inv {
    let rows = bench_rows()?;
    ensure(rows[0].ratio == rows[0].cosines_l1 as f64 / rows[0].uniform_cosines as f64 && rows[0].cosines_l2 == 0, || format!("0% dense: {:?}", rows[0]))?;
    ensure((rows[0].ratio - 1.0 / 21.0).abs() < 1e-15, || format!("0% dense ratio {}", rows[0].ratio))?;
    ensure(rows[4].ratio == 1.0, || format!("100% dense ratio {}", rows[4].ratio))?;
    ensure(rows[..5].windows(2).all(|w| w[0].ratio <= w[1].ratio), || "ratio is not monotone in density".into())?;
    ensure(rows[1].ratio <= 0.6, || format!("25% dense ratio {} above 0.6", rows[1].ratio))
}

fn bench_matches_closed_form(_: &Kernels) -> Inv {
    for r in &bench_rows()?[..5] {
        let c = r.closed_form_ratio.unwrap_or(f64::NAN);
        ensure((r.ratio - c).abs() <= 0.02 * c, || format!("density {}: ratio {} vs closed form {c}", r.density, r.ratio))?;
    }
    Ok(())
}

type Invariant = (&'static str, fn(&Kernels) -> Inv);

pub struct Suite {
    pub name: &'static str,
    pub module: &'static str,
    pub invariants: &'static [Invariant],
}

pub const SUITES: &[Suite] = &[
    Suite {
        name: "tensor",
        module: "tensor-core",
        invariants: &[
            ("matmul_matches_naive", matmul_matches_naive),
            ("conv_matches_direct", conv_matches_direct),
            ("highpass_matches_direct_dft", highpass_matches_direct_dft),
        ],
    },
    Suite {
        name: "mask",
        module: "tensor-core",
        invariants: &[
            ("binarize", binarize_matches_threshold),
            ("coarse_and_channel_alphabets", coarse_and_channel_alphabets),
            ("hierarchy_structure_on_100_instances", hierarchy_structure_on_100_instances),
        ],
    },
    Suite {
        name: "coarse",
        module: "coarse-align",
        invariants: &[("mask_is_thresholded_cosine", coarse_mask_is_thresholded_cosine), ("updates_match_direct_attention", coarse_updates)],
    },
    Suite {
        name: "cwa",
        module: "cwa",
        invariants: &[
            ("topk_matches_rank_oracle", topk_matches_rank_oracle),
            ("gate_is_a_distribution", gate_is_a_distribution),
            ("disabled_leaves_no_trace", disabled_cwa_leaves_no_trace),
        ],
    },
    Suite {
        name: "nfa",
        module: "nfa",
        invariants: &[
            ("density_flag_matches_fraction", density_flag_matches_fraction),
            ("hierarchy_matches_full_materialization", hierarchy_matches_full_materialization),
            ("branch_widths_partition_channels", branch_widths_partition_channels),
            ("disabled_refinement_is_level_one_only", disabled_refinement_is_level_one_only),
        ],
    },
    Suite {
        name: "phi",
        module: "phi",
        invariants: &[
            ("generation_counts_injections", generation_counts_injections),
            ("injection_touches_only_slots", injection_touches_only_slots),
            ("injection_cost_bound", injection_cost_bound),
        ],
    },
    Suite {
        name: "model",
        module: "model-stack",
        invariants: &[
            ("oracle_equivalence", oracle_equivalence),
            ("embeddings_are_unit_norm", embeddings_are_unit_norm),
            ("training_is_bit_reproducible", training_is_bit_reproducible),
        ],
    },
    Suite {
        name: "grad",
        module: "model-stack",
        invariants: &[
            ("full_model", full_model_gradients),
            ("coarse", coarse_gradients),
            ("cwa", cwa_gradients),
            ("nfa", nfa_gradients),
            ("phi", phi_gradients),
        ],
    },
    Suite {
        name: "corpus",
        module: "harness-cli",
        invariants: &[
            ("bytes_are_reproducible", corpus_bytes_are_reproducible),
            ("single_shape_mix", single_shape_mix),
            ("captions_follow_the_grammar", captions_follow_the_grammar),
            ("split_is_eighty_twenty", split_is_eighty_twenty),
        ],
    },
    Suite {
        name: "bench",
        module: "harness-cli",
        invariants: &[("endpoints_and_monotonicity", bench_endpoints_and_monotonicity), ("matches_closed_form", bench_matches_closed_form)],
    },
];

pub fn run_suite(suite: &Suite, kernels: &Kernels) -> SuiteReport {
    let t0 = Instant::now();
    let invariants: Vec<InvariantResult> = suite
        .invariants
        .iter()
        .map(|(name, f)| {
            let res = std::panic::catch_unwind(|| f(kernels)).unwrap_or_else(|p| {
                let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                Err(format!("panicked: {}", msg.unwrap_or_default()))
            });
            InvariantResult { name: name.to_string(), passed: res.is_ok(), detail: res.err() }
        })
        .collect();
    SuiteReport {
        suite: suite.name.into(),
        module: suite.module.into(),
        passed: invariants.iter().all(|i| i.passed),
        seconds: t0.elapsed().as_secs_f64(),
        invariants,
    }
}

/// Run one suite by name, or all of them.
pub fn run_check(only: Option<&str>, fault: Option<Fault>) -> Result<CheckReport> {
    let picked: Vec<&Suite> = match only {
        None => SUITES.iter().collect(),
        Some(name) => vec![SUITES.iter().find(|s| s.name == name).ok_or_else(|| {
            let names: Vec<&str> = SUITES.iter().map(|s| s.name).collect();
            HarnessError::Usage(format!("unknown suite {name:?}; expected one of {}", names.join(", ")))
        })?],
    };
    let kernels = Kernels::with_fault(fault);
    let t0 = Instant::now();
    let suites: Vec<SuiteReport> = picked.into_iter().map(|s| run_suite(s, &kernels)).collect();
    Ok(CheckReport { passed: suites.iter().all(|s| s.passed), fault: fault.map(|f| f.name().to_string()), seconds: t0.elapsed().as_secs_f64(), suites })
}
