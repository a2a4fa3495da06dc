//! The n-layer encoder: parameters, per-pair forward pass and its trace.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::ProjectionSet;
use crate::coarse::coarse_align;
use crate::config::DapeConfig;
use crate::cost::{CostMeter, Module};
use crate::cwa::{cwa_block, fuse_text, ChannelGate, CwaWeights};
use crate::decisions::Decisions;
use crate::error::{DapeError, Result};
use crate::fourier::{highpass_channels, highpass_macs};
use crate::mask::AffinityMask;
use crate::nfa::{level3_row_major, nfa_block, split_widths, uniform_cosines, HierarchicalMask, NfaWeights};
use crate::phi::{pad_with_learnable, phi_inject, DetailSource, DetailState, PhiWeights};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokens::{cell_groups, even_spans, grid_cells, span_groups, span_owner, Provenance};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub img: ProjectionSet<T>,
    pub txt: ProjectionSet<T>,
    pub cwa: CwaWeights<T>,
}

/// Every learnable tensor of the model, addressed by handle type `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    /// `c_img×d` and `c_txt×d` input projections.
    pub in_img: T,
    pub in_txt: T,
    pub layers: Vec<LayerWeights<T>>,
    pub nfa: NfaWeights<T>,
    pub phi: PhiWeights<T>,
}

fn map_proj<A, B>(p: &ProjectionSet<A>, f: &mut impl FnMut(&A) -> B) -> ProjectionSet<B> {
    ProjectionSet { q: f(&p.q), k: f(&p.k), v: f(&p.v) }
}

impl<T> ModelWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelWeights<U> {
        let in_img = f(&self.in_img);
        let in_txt = f(&self.in_txt);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                img: map_proj(&l.img, f),
                txt: map_proj(&l.txt, f),
                cwa: CwaWeights {
                    gate: ChannelGate { w1: f(&l.cwa.gate.w1), b1: f(&l.cwa.gate.b1), w2: f(&l.cwa.gate.w2), b2: f(&l.cwa.gate.b2) },
                    lift: f(&l.cwa.lift),
                    attn: map_proj(&l.cwa.attn, f),
                },
            })
            .collect();
        let nfa = NfaWeights {
            conv: [f(&self.nfa.conv[0]), f(&self.nfa.conv[1]), f(&self.nfa.conv[2])],
            branch_proj: [f(&self.nfa.branch_proj[0]), f(&self.nfa.branch_proj[1]), f(&self.nfa.branch_proj[2])],
            attn: map_proj(&self.nfa.attn, f),
        };
        let phi = PhiWeights {
            detail_w: f(&self.phi.detail_w),
            detail_b: f(&self.phi.detail_b),
            attn: map_proj(&self.phi.attn, f),
            slots: f(&self.phi.slots),
        };
        ModelWeights { in_img, in_txt, layers, nfa, phi }
    }
}

/// Named parameter tensors in allocation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<S>>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.tensors.push(Arc::new(t));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn shared(&self, i: usize) -> Arc<Tensor<S>> {
        Arc::clone(&self.tensors[i])
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// One image of a batch: features and their precomputed high-pass version.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput<S> {
    /// `h×w×c_img`.
    pub features: Arc<Tensor<S>>,
    pub highpass: Arc<Tensor<S>>,
}

impl<S: Scalar> ImageInput<S> {
    pub fn new(features: Tensor<S>, cutoff_frac: f64) -> Result<Self> {
        let highpass = highpass_channels(&features, cutoff_frac)?;
        Ok(ImageInput { features: Arc::new(features), highpass: Arc::new(highpass) })
    }
}

/// One caption: `l×c_txt` position features, zero rows past the last word.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInput<S> {
    pub features: Arc<Tensor<S>>,
}

impl<S: Scalar> TextInput<S> {
    pub fn new(features: Tensor<S>) -> Self {
        TextInput { features: Arc::new(features) }
    }
}

/// Image `i` is paired with text `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub images: Vec<ImageInput<S>>,
    pub texts: Vec<TextInput<S>>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(images: Vec<ImageInput<S>>, texts: Vec<TextInput<S>>) -> Result<Self> {
        if images.len() != texts.len() {
            return Err(DapeError::dim("batch", format!("{} images and {} texts", images.len(), texts.len())));
        }
        if images.len() < 2 {
            return Err(DapeError::Config(format!("a contrastive batch needs at least 2 pairs, got {}", images.len())));
        }
        Ok(Batch { images, texts })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct CwaTrace<S> {
    pub ac: AffinityMask<S>,
    pub selection: Vec<Vec<usize>>,
    /// Value of the text update `T2`.
    pub t2: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace<S> {
    pub layer: usize,
    /// Image rows entering the layer, slots included.
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub a0: AffinityMask<S>,
    pub cwa: Option<CwaTrace<S>>,
    /// Fine alignment merged into the main stream.
    pub nfa: Option<HierarchicalMask<S>>,
    /// Fine alignment inside a detail injection.
    pub phi: Option<HierarchicalMask<S>>,
    pub cost: CostMeter,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<S> {
    pub layers: Vec<LayerTrace<S>>,
    pub generation: usize,
    pub slots: usize,
    pub cost: CostMeter,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn hierarchies(&self) -> impl Iterator<Item = &HierarchicalMask<S>> {
        self.layers.iter().flat_map(|l| l.nfa.iter().chain(l.phi.iter()))
    }
}

#[derive(Clone, Debug)]
pub struct PairForward<S> {
    /// `1×d`, unit norm.
    pub img_emb: Var,
    pub txt_emb: Var,
    /// `1×1` inner product of the embeddings.
    pub score: Var,
    pub trace: ForwardTrace<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub module: Module,
    pub macs: u64,
    pub cosines: u64,
}

/// Cost summary of one or more forward passes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub modules: Vec<ModuleCost>,
    pub total_macs: u64,
    pub total_cosines: u64,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub nfa_calls: usize,
    pub nfa_cosines: u64,
    /// Cosines the same calls would cost with every level evaluated everywhere.
    pub uniform_cosines: u64,
}

impl CostReport {
    pub fn macs(&self, m: Module) -> u64 {
        self.modules.iter().find(|c| c.module == m).map_or(0, |c| c.macs)
    }

    pub fn ratio(&self) -> f64 {
        if self.uniform_cosines == 0 {
            return 0.0;
        }
        self.nfa_cosines as f64 / self.uniform_cosines as f64
    }

    pub fn merge(&mut self, other: &CostReport) {
        for (a, b) in self.modules.iter_mut().zip(&other.modules) {
            a.macs += b.macs;
            a.cosines += b.cosines;
        }
        self.total_macs += other.total_macs;
        self.total_cosines += other.total_cosines;
        self.image_tokens += other.image_tokens;
        self.text_tokens += other.text_tokens;
        self.nfa_calls += other.nfa_calls;
        self.nfa_cosines += other.nfa_cosines;
        self.uniform_cosines += other.uniform_cosines;
    }
}

pub fn cost_report<S: Scalar>(trace: &ForwardTrace<S>) -> CostReport {
    let m = &trace.cost;
    let modules = Module::ALL.iter().map(|&module| ModuleCost { module, macs: m.macs(module), cosines: m.cosines(module) }).collect();
    let mut nfa_calls = 0;
    let mut nfa_cosines = 0;
    let mut uniform = 0;
    for h in trace.hierarchies() {
        nfa_calls += 1;
        nfa_cosines += h.total_cosines();
        uniform += uniform_cosines(h.base.0, h.base.1);
    }
    CostReport {
        modules,
        total_macs: m.total_macs(),
        total_cosines: m.total_cosines(),
        image_tokens: trace.layers.iter().map(|l| l.image_tokens).sum(),
        text_tokens: trace.layers.iter().map(|l| l.text_tokens).sum(),
        nfa_calls,
        nfa_cosines,
        uniform_cosines: uniform,
    }
}

/// Row groups that average the row-major fine grid `(fy, fx)` onto the coarser grid `(gy, gx)`.
pub fn grid_merge_groups(fine: (usize, usize), coarse: (usize, usize)) -> Result<Vec<Vec<usize>>> {
    let (fy, fx) = fine;
    let (gy, gx) = coarse;
    if gy == 0 || gx == 0 || fy % gy != 0 || fx % gx != 0 {
        return Err(DapeError::Config(format!("grid {fy}×{fx} does not refine {gy}×{gx}")));
    }
    let (ry, rx) = (fy / gy, fx / gx);
    Ok((0..gy * gx)
        .map(|c| {
            let (a, b) = (c / gx, c % gx);
            let mut g = Vec::with_capacity(ry * rx);
            for u in 0..ry {
                for v in 0..rx {
                    g.push((a * ry + u) * fx + b * rx + v);
                }
            }
            g
        })
        .collect())
}

fn at_layer(e: DapeError, layer: usize) -> DapeError {
    match e {
        DapeError::Numeric(m) => DapeError::Numeric(format!("layer {layer}: {m}")),
        other => other,
    }
}

struct Geometry {
    cell_groups: Vec<Vec<usize>>,
    spans: Vec<Provenance>,
    span_groups: Vec<Vec<usize>>,
    owner: Vec<usize>,
    merge: Vec<Vec<usize>>,
}

fn geometry(cfg: &DapeConfig) -> Result<Geometry> {
    let [h, w] = cfg.feature_hw;
    let cells = grid_cells(h, w, cfg.grid[0], cfg.grid[1])?;
    let spans = even_spans(0, cfg.text_len, cfg.j);
    let fine = (2 * cfg.nfa_grid[0], 2 * cfg.nfa_grid[1]);
    Ok(Geometry {
        cell_groups: cell_groups(&cells, h, w)?,
        span_groups: span_groups(&spans)?,
        owner: span_owner(&spans, cfg.text_len)?,
        spans,
        merge: grid_merge_groups(fine, (cfg.grid[0], cfg.grid[1]))?,
    })
}

/// Forward one (image, text) pair through the stack with weights bound on `tape`.
pub fn forward_pair<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &DapeConfig,
    w: &ModelWeights<Var>,
    image: &ImageInput<S>,
    text: &TextInput<S>,
    decisions: &mut Decisions<S>,
) -> Result<PairForward<S>> {
    let [h, wd] = cfg.feature_hw;
    let d = cfg.d;
    let (fh, fw, fc) = image.features.require_rank3("forward")?;
    if (fh, fw, fc) != (h, wd, cfg.image_channels) {
        return Err(DapeError::shapes("forward", image.features.shape(), &[h, wd, cfg.image_channels]));
    }
    if image.highpass.shape() != image.features.shape() {
        return Err(DapeError::shapes("forward", image.highpass.shape(), image.features.shape()));
    }
    if text.features.shape() != [cfg.text_len, cfg.text_channels] {
        return Err(DapeError::shapes("forward", text.features.shape(), &[cfg.text_len, cfg.text_channels]));
    }
    let geo = geometry(cfg)?;
    let i_tokens = cfg.i();
    let start = tape.meter().clone();
    let outer = tape.enter(Module::Head);

    let raw = tape.constant_shared(Arc::clone(&image.features));
    let raw = tape.reshape(raw, &[h * wd, fc])?;
    let f = tape.matmul(raw, w.in_img)?;
    let fmap = tape.reshape(f, &[h, wd, d])?;
    let mut m = tape.pool_rows(f, &geo.cell_groups)?;
    let traw = tape.constant_shared(Arc::clone(&text.features));
    let mut tpos = tape.matmul(traw, w.in_txt)?;

    let coarse_p = cfg.coarse();
    let cwa_p = cfg.cwa();
    let nfa_p = cfg.nfa();
    let phi_p = cfg.phi();
    let nfa_grid = (cfg.nfa_grid[0], cfg.nfa_grid[1]);
    let mut slots: Vec<usize> = Vec::new();
    let mut detail: Option<DetailState> = None;
    let mut generation = 0;
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for (layer, lw) in w.layers.iter().enumerate() {
        let before = tape.meter().clone();
        let step = (|| -> Result<LayerTrace<S>> {
            tape.enter(Module::Coarse);
            let t = tape.pool_rows(tpos, &geo.span_groups)?;
            let phi_layer = cfg.is_phi_layer(layer);
            if phi_layer && slots.is_empty() {
                let (padded, idx) = pad_with_learnable(tape, m, Some(w.phi.slots))?;
                m = padded;
                slots = idx;
            }
            let image_tokens = tape.value(m).rows();
            let co = coarse_align(tape, m, t, &lw.img, &lw.txt, &coarse_p, decisions)?;
            let mut trace = LayerTrace {
                layer,
                image_tokens,
                text_tokens: cfg.j,
                a0: co.a0.clone(),
                cwa: None,
                nfa: None,
                phi: None,
                cost: CostMeter::default(),
            };
            let t_prime;
            if phi_layer {
                let m_res = tape.add(m, co.m1)?;
                let source = match detail {
                    Some(state) => DetailSource::Carried(state),
                    None => {
                        tape.enter(Module::Phi);
                        tape.charge_macs(highpass_macs(h, wd) * fc as u64);
                        DetailSource::Filtered(&image.highpass)
                    }
                };
                let out = phi_inject(tape, layer, m_res, &slots, source, generation, tpos, &geo.spans, &w.phi, &w.nfa, &phi_p, decisions)?;
                m = out.m_out;
                generation = out.state.generation;
                detail = Some(out.state);
                trace.phi = Some(out.hierarchy);
                t_prime = co.t1;
            } else {
                m = tape.add(m, co.m1)?;
                if cfg.enable_cwa {
                    tape.enter(Module::Cwa);
                    let m1 = if slots.is_empty() {
                        co.m1
                    } else {
                        tape.gather_rows(co.m1, &(0..i_tokens).collect::<Vec<_>>())?
                    };
                    let cw = cwa_block(tape, m1, co.t1, &lw.cwa, &cwa_p, decisions)?;
                    trace.cwa = Some(CwaTrace { ac: cw.ac, selection: cw.selection, t2: tape.value(cw.t2).clone() });
                    t_prime = fuse_text(tape, co.t1, cw.t2)?;
                } else {
                    t_prime = co.t1;
                }
            }
            if cfg.pool_add() {
                let fine = nfa_block(tape, fmap, tpos, &geo.spans, &w.nfa, &nfa_p, decisions)?;
                tape.enter(Module::Nfa);
                let rm = tape.gather_rows(fine.m2, &level3_row_major(nfa_grid))?;
                let mut merged = tape.pool_rows(rm, &geo.merge)?;
                if !slots.is_empty() {
                    let z = tape.constant(Tensor::zeros(&[slots.len(), d]));
                    merged = tape.concat_rows(&[merged, z])?;
                }
                m = tape.add(m, merged)?;
                trace.nfa = Some(fine.hierarchy);
            }
            tape.enter(Module::Coarse);
            let spread = tape.gather_rows(t_prime, &geo.owner)?;
            tpos = tape.add(tpos, spread)?;
            Ok(trace)
        })();
        let mut trace = step.map_err(|e| at_layer(e, layer))?;
        trace.cost = tape.meter().since(&before);
        layers.push(trace);
    }

    tape.enter(Module::Head);
    let img = tape.mean_rows(m)?;
    let img_emb = tape.l2_normalize_rows(img)?;
    let t = tape.pool_rows(tpos, &geo.span_groups)?;
    let t = tape.mean_rows(t)?;
    let txt_emb = tape.l2_normalize_rows(t)?;
    let prod = tape.hadamard(img_emb, txt_emb)?;
    let score = tape.sum_all(prod)?;
    let score = tape.reshape(score, &[1, 1])?;
    tape.enter(outer);
    let trace = ForwardTrace { layers, generation, slots: slots.len(), cost: tape.meter().since(&start) };
    Ok(PairForward { img_emb, txt_emb, score, trace })
}

/// Parameters, their layout and the learnable temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct DapeModel<S> {
    pub config: DapeConfig,
    pub store: ParamStore<S>,
    pub weights: ModelWeights<usize>,
    pub temperature: S,
}

impl<S: Scalar> DapeModel<S> {
    /// Seeded initialisation; the draw order is fixed, so equal configs give equal models.
    pub fn new(config: DapeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let d = config.d;
        let dense = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize| {
            let std = 1.0 / (rows as f64).sqrt();
            store.push(name, Tensor::normal(&[rows, cols], std, rng))
        };
        let in_img = dense(&mut store, &mut rng, "in_img".into(), config.image_channels, d);
        let in_txt = dense(&mut store, &mut rng, "in_txt".into(), config.text_channels, d);
        let proj = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, prefix: String| ProjectionSet {
            q: dense(store, rng, format!("{prefix}.q"), d, d),
            k: dense(store, rng, format!("{prefix}.k"), d, d),
            v: dense(store, rng, format!("{prefix}.v"), d, d),
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let img = proj(&mut store, &mut rng, format!("layer{l}.img"));
            let txt = proj(&mut store, &mut rng, format!("layer{l}.txt"));
            let w1 = dense(&mut store, &mut rng, format!("layer{l}.gate.w1"), d, d);
            let b1 = store.push(format!("layer{l}.gate.b1"), Tensor::zeros(&[1, d]));
            let w2 = dense(&mut store, &mut rng, format!("layer{l}.gate.w2"), d, d);
            let b2 = store.push(format!("layer{l}.gate.b2"), Tensor::zeros(&[1, d]));
            let lift = dense(&mut store, &mut rng, format!("layer{l}.cwa.lift"), config.i(), d);
            let attn = proj(&mut store, &mut rng, format!("layer{l}.cwa"));
            layers.push(LayerWeights { img, txt, cwa: CwaWeights { gate: ChannelGate { w1, b1, w2, b2 }, lift, attn } });
        }
        let widths = split_widths(config.mu, d)?;
        let conv = [0, 1, 2].map(|k| {
            let ks = config.kernels[k];
            let bound = 1.0 / ks as f64;
            store.push(format!("nfa.conv{k}"), Tensor::uniform(&[widths[k], ks, ks], -bound, bound, &mut rng))
        });
        let branch_proj = [0, 1, 2].map(|k| dense(&mut store, &mut rng, format!("nfa.branch{k}"), widths[k], d));
        let nfa_attn = proj(&mut store, &mut rng, "nfa.attn".into());
        let detail_w = dense(&mut store, &mut rng, "phi.detail_w".into(), config.image_channels, d);
        let detail_b = store.push("phi.detail_b", Tensor::zeros(&[1, d]));
        let phi_attn = proj(&mut store, &mut rng, "phi.attn".into());
        let slots = store.push("phi.slots", Tensor::normal(&[config.n_slots().max(1), d], 0.02, &mut rng));
        let weights = ModelWeights {
            in_img,
            in_txt,
            layers,
            nfa: NfaWeights { conv, branch_proj, attn: nfa_attn },
            phi: PhiWeights { detail_w, detail_b, attn: phi_attn, slots },
        };
        let temperature = S::c(config.temperature);
        Ok(DapeModel { config, store, weights, temperature })
    }

    /// Trainable handles for every parameter; `vars[i]` belongs to store entry `i`.
    pub fn bind(&self, tape: &mut Tape<S>) -> (ModelWeights<Var>, Vec<Var>) {
        let vars: Vec<Var> = (0..self.store.len()).map(|i| tape.param_shared(self.store.shared(i))).collect();
        (self.weights.map(&mut |&i| vars[i]), vars)
    }

    /// Constant handles: no gradient bookkeeping.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> ModelWeights<Var> {
        let vars: Vec<Var> = (0..self.store.len()).map(|i| tape.constant_shared(self.store.shared(i))).collect();
        self.weights.map(&mut |&i| vars[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    /// Score of one pair, its embeddings and trace, without gradients.
    pub fn pair(&self, image: &ImageInput<S>, text: &TextInput<S>) -> Result<PairResult<S>> {
        let mut tape = Tape::new();
        let w = self.bind_frozen(&mut tape);
        let out = forward_pair(&mut tape, &self.config, &w, image, text, &mut Decisions::live())?;
        Ok(PairResult {
            score: tape.value(out.score).data()[0],
            img_emb: tape.value(out.img_emb).clone(),
            txt_emb: tape.value(out.txt_emb).clone(),
            trace: out.trace,
        })
    }

    /// Matched-pair forward: row `i` of each output comes from (image `i`, text `i`).
    pub fn forward(&self, batch: &Batch<S>) -> Result<BatchForward<S>> {
        let mut img = Vec::with_capacity(batch.len());
        let mut txt = Vec::with_capacity(batch.len());
        let mut traces = Vec::with_capacity(batch.len());
        for (image, text) in batch.images.iter().zip(&batch.texts) {
            let r = self.pair(image, text)?;
            img.push(r.img_emb);
            txt.push(r.txt_emb);
            traces.push(r.trace);
        }
        let img_refs: Vec<&Tensor<S>> = img.iter().collect();
        let txt_refs: Vec<&Tensor<S>> = txt.iter().collect();
        Ok(BatchForward { img_emb: Tensor::concat_rows(&img_refs)?, txt_emb: Tensor::concat_rows(&txt_refs)?, traces })
    }

    /// `s[i][j]` scores image `i` against text `j`; the cost covers all pairs.
    pub fn score_matrix(&self, images: &[ImageInput<S>], texts: &[TextInput<S>]) -> Result<(Tensor<S>, CostReport)> {
        let mut scores = Tensor::zeros(&[images.len(), texts.len()]);
        let mut report: Option<CostReport> = None;
        for (i, image) in images.iter().enumerate() {
            for (j, text) in texts.iter().enumerate() {
                let r = self.pair(image, text)?;
                scores.set2(i, j, r.score);
                let c = cost_report(&r.trace);
                match report.as_mut() {
                    Some(acc) => acc.merge(&c),
                    None => report = Some(c),
                }
            }
        }
        let report = report.ok_or_else(|| DapeError::Config("empty score matrix".into()))?;
        Ok((scores, report))
    }
}

#[derive(Clone, Debug)]
pub struct PairResult<S> {
    pub score: S,
    pub img_emb: Tensor<S>,
    pub txt_emb: Tensor<S>,
    pub trace: ForwardTrace<S>,
}

#[derive(Clone, Debug)]
pub struct BatchForward<S> {
    /// `b×d`.
    pub img_emb: Tensor<S>,
    pub txt_emb: Tensor<S>,
    pub traces: Vec<ForwardTrace<S>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_groups_cover_fine_grid() {
        let g = grid_merge_groups((4, 4), (2, 2)).unwrap();
        assert_eq!(g[0], vec![0, 1, 4, 5]);
        assert_eq!(g[3], vec![10, 11, 14, 15]);
        let mut all: Vec<usize> = g.concat();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert!(grid_merge_groups((4, 4), (3, 2)).is_err());
    }

    #[test]
    fn parameter_layout_is_a_function_of_config() {
        let cfg = DapeConfig { d: 16, segments: 4, grid: [4, 4], ..Default::default() };
        let a = DapeModel::<f64>::new(cfg.clone()).unwrap();
        let b = DapeModel::<f64>::new(cfg.clone()).unwrap();
        assert_eq!(a, b);
        let c = DapeModel::<f64>::new(DapeConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_eq!(a.store.names(), c.store.names());
        assert_eq!(a.num_scalars(), c.num_scalars());
        assert_ne!(a.store.get(0), c.store.get(0));
        let off = DapeModel::<f64>::new(DapeConfig { enable_cwa: false, enable_phi: false, ..cfg }).unwrap();
        assert_eq!(off.store, a.store);
    }
}
