//! Straight-line reimplementation of the full forward pass.
//!
//! Written against plain row-major buffers with no shared kernels: its own
//! matrix product, softmax, cosine, convolution, pooling and a direct 2D DFT.
//! Used as the reference the modular stack must reproduce.

use dape_core::attention::MaskMode;
use dape_core::cwa::ChannelAgg;
use dape_core::phi::ResidualSource;
use dape_core::{DapeModel, NfaMerge, Tensor};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
struct Mat {
    r: usize,
    c: usize,
    v: Vec<f64>,
}

impl Mat {
    fn zeros(r: usize, c: usize) -> Mat {
        Mat { r, c, v: vec![0.0; r * c] }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.c..(i + 1) * self.c]
    }

    fn mul(&self, o: &Mat) -> Mat {
        assert_eq!(self.c, o.r, "inner dimensions");
        let mut out = Mat::zeros(self.r, o.c);
        for i in 0..self.r {
            for k in 0..self.c {
                let a = self.at(i, k);
                for j in 0..o.c {
                    out.v[i * o.c + j] += a * o.at(k, j);
                }
            }
        }
        out
    }

    fn t(&self) -> Mat {
        let mut out = Mat::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.v[j * self.r + i] = self.at(i, j);
            }
        }
        out
    }

    fn plus(&self, o: &Mat) -> Mat {
        assert_eq!((self.r, self.c), (o.r, o.c));
        Mat { r: self.r, c: self.c, v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect() }
    }

    fn rows(&self, idx: impl IntoIterator<Item = usize>) -> Mat {
        let mut v = Vec::new();
        let mut r = 0;
        for i in idx {
            v.extend_from_slice(self.row(i));
            r += 1;
        }
        Mat { r, c: self.c, v }
    }

    fn mean_of(&self, members: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.c];
        for &i in members {
            for (a, x) in acc.iter_mut().zip(self.row(i)) {
                *a += x;
            }
        }
        let inv = 1.0 / members.len() as f64;
        acc.iter().map(|a| a * inv).collect()
    }

    fn from_rows(rows: Vec<Vec<f64>>) -> Mat {
        let c = rows.first().map_or(0, Vec::len);
        Mat { r: rows.len(), c, v: rows.concat() }
    }
}

fn weight(model: &DapeModel<f64>, name: &str) -> Mat {
    let i = model.store.index_of(name).unwrap_or_else(|| panic!("parameter {name}"));
    let t = model.store.get(i);
    let s = t.shape();
    match s.len() {
        2 => Mat { r: s[0], c: s[1], v: t.data().to_vec() },
        _ => Mat { r: 1, c: t.len(), v: t.data().to_vec() },
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn threshold(a: &Mat, b: &Mat, k: f64, hi: f64) -> Mat {
    let mut out = Mat::zeros(a.r, b.r);
    for i in 0..a.r {
        for j in 0..b.r {
            if cos(a.row(i), b.row(j)) > k {
                out.v[i * b.r + j] = hi;
            }
        }
    }
    out
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `(softmax(q kᵀ/√d) ∘ w) v`, `w` laid out query-by-key.
fn attn(q: &Mat, k: &Mat, v: &Mat, w: Option<&Mat>, mode: MaskMode) -> Mat {
    let mut s = q.mul(&k.t());
    let scale = 1.0 / (q.c as f64).sqrt();
    for x in s.v.iter_mut() {
        *x *= scale;
    }
    if let (Some(w), MaskMode::PreSoftmax) = (w, mode) {
        for (x, m) in s.v.iter_mut().zip(&w.v) {
            if *m <= 0.0 {
                *x += -1e30;
            }
        }
    }
    for i in 0..s.r {
        let c = s.c;
        softmax(&mut s.v[i * c..(i + 1) * c]);
    }
    if let Some(w) = w {
        for (x, m) in s.v.iter_mut().zip(&w.v) {
            *x *= m;
        }
    }
    s.mul(v)
}

/// Spatial map stored as `(h·w) × c`, row-major positions.
struct Map {
    h: usize,
    w: usize,
    m: Mat,
}

impl Map {
    fn cell_mean(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<f64> {
        let members: Vec<usize> = (y0..y1).flat_map(|y| (x0..x1).map(move |x| y * self.w + x)).collect();
        self.m.mean_of(&members)
    }

    /// Row-major `gy×gx` grid means.
    fn grid(&self, gy: usize, gx: usize) -> Mat {
        let (ch, cw) = (self.h / gy, self.w / gx);
        Mat::from_rows(
            (0..gy * gx).map(|g| self.cell_mean((g / gx) * ch, (g / gx + 1) * ch, (g % gx) * cw, (g % gx + 1) * cw)).collect(),
        )
    }
}

/// Bounds of cell `q` at `level` in hierarchical order over an `h×w` map on a `gy×gx` base grid.
fn level_cell(q: usize, level: usize, h: usize, w: usize, gy: usize, gx: usize) -> (usize, usize, usize, usize) {
    let base = q >> (level - 1);
    let (ch, cw) = (h / gy, w / gx);
    let (mut y0, mut y1) = ((base / gx) * ch, (base / gx + 1) * ch);
    let (mut x0, mut x1) = ((base % gx) * cw, (base % gx + 1) * cw);
    if level >= 2 {
        let right = (q >> (level - 2)) & 1;
        let xm = (x0 + x1) / 2;
        if right == 1 {
            x0 = xm;
        } else {
            x1 = xm;
        }
    }
    if level == 3 {
        let ym = (y0 + y1) / 2;
        if q & 1 == 1 {
            y0 = ym;
        } else {
            y1 = ym;
        }
    }
    (y0, y1, x0, x1)
}

fn spans(l: usize, j: usize, level: usize) -> Vec<(usize, usize)> {
    let mut s: Vec<(usize, usize)> = (0..j).map(|k| (k * l / j, (k + 1) * l / j)).collect();
    for _ in 1..level {
        s = s.iter().flat_map(|&(a, b)| [(a, a + (b - a) / 2), (a + (b - a) / 2, b)]).collect();
    }
    s
}

fn span_means(x: &Mat, sp: &[(usize, usize)]) -> Mat {
    Mat::from_rows(sp.iter().map(|&(a, b)| x.mean_of(&(a..b).collect::<Vec<_>>())).collect())
}

fn widths(mu: [f64; 3], c: usize) -> [usize; 3] {
    let exact: Vec<f64> = mu.iter().map(|m| m * c as f64).collect();
    let mut w = [0usize; 3];
    for k in 0..3 {
        w[k] = exact[k].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).partial_cmp(&(exact[a] - exact[a].floor())).unwrap().then(a.cmp(&b)));
    let mut left = c - w.iter().sum::<usize>();
    let mut k = 0;
    while left > 0 {
        w[order[k % 3]] += 1;
        left -= 1;
        k += 1;
    }
    w
}

fn conv(map: &Map, ch0: usize, width: usize, ks: usize, kernel: &[f64]) -> Map {
    let (h, w, c) = (map.h, map.w, map.m.c);
    let r = (ks / 2) as isize;
    let mut out = Mat::zeros(h * w, width);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..width {
                let mut acc = 0.0;
                for dy in 0..ks as isize {
                    for dx in 0..ks as isize {
                        let (sy, sx) = (y + dy - r, x + dx - r);
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            let k = kernel[(ch * ks + dy as usize) * ks + dx as usize];
                            acc += k * map.m.v[(sy as usize * w + sx as usize) * c + ch0 + ch];
                        }
                    }
                }
                out.v[(y as usize * w + x as usize) * width + ch] = acc;
            }
        }
    }
    Map { h, w, m: out }
}

/// `A′` and `M2` (rows in hierarchical level-3 order).
fn fine(model: &DapeModel<f64>, map: &Map, tpos: &Mat) -> (Mat, Mat) {
    let cfg = &model.config;
    let (gy, gx) = (cfg.nfa_grid[0], cfg.nfa_grid[1]);
    let (h, w, c) = (map.h, map.w, map.m.c);
    let wd = widths(cfg.mu, c);
    let mut start = 0;
    let mut branches = Vec::new();
    for k in 0..3 {
        let kernel = weight(model, &format!("nfa.conv{k}"));
        branches.push(conv(map, start, wd[k], cfg.kernels[k], &kernel.v));
        start += wd[k];
    }
    let i = gy * gx;
    let pooled = |b: &Map, level: usize| {
        Mat::from_rows(
            (0..i << (level - 1))
                .map(|q| {
                    let (y0, y1, x0, x1) = level_cell(q, level, h, w, gy, gx);
                    b.cell_mean(y0, y1, x0, x1)
                })
                .collect(),
        )
    };
    let xs: Vec<Mat> = (0..3).map(|k| pooled(&branches[k], k + 1).mul(&weight(model, &format!("nfa.branch{k}")))).collect();
    let ts: Vec<Mat> = (0..3).map(|k| span_means(tpos, &spans(cfg.text_len, cfg.j, k + 1))).collect();
    let j = cfg.j;
    let refine = cfg.enable_nfa;
    let dense = |m: &Mat, r: usize| refine && m.row(r).iter().filter(|&&x| x != 0.0).count() as f64 / m.c as f64 > cfg.tau_d;
    let l1 = threshold(&xs[0], &ts[0], cfg.k_thr, cfg.mu[0]);
    let d1: Vec<bool> = (0..i).map(|r| dense(&l1, r)).collect();
    let mut l2 = threshold(&xs[1], &ts[1], cfg.k_thr, cfg.mu[1]);
    for r in 0..2 * i {
        if !d1[r / 2] {
            l2.v[r * 2 * j..(r + 1) * 2 * j].fill(0.0);
        }
    }
    let d2: Vec<bool> = (0..2 * i).map(|r| dense(&l2, r)).collect();
    let mut l3 = threshold(&xs[2], &ts[2], cfg.k_thr, cfg.mu[2]);
    for r in 0..4 * i {
        if !d2[r / 2] {
            l3.v[r * 4 * j..(r + 1) * 4 * j].fill(0.0);
        }
    }
    let mut a = Mat::zeros(4 * i, 4 * j);
    for r in 0..4 * i {
        for cc in 0..4 * j {
            a.v[r * 4 * j + cc] = l1.at(r / 4, cc / 4) + l2.at(r / 2, cc / 2) + l3.at(r, cc);
        }
    }
    let mut joined = Mat::zeros(h * w, c);
    let mut off = 0;
    for b in &branches {
        for p in 0..h * w {
            joined.v[p * c + off..p * c + off + b.m.c].copy_from_slice(b.m.row(p));
        }
        off += b.m.c;
    }
    let m_tokens = pooled(&Map { h, w, m: joined }, 3);
    let t3 = &ts[2];
    let q = m_tokens.mul(&weight(model, "nfa.attn.q"));
    let v = t3.mul(&weight(model, "nfa.attn.v"));
    let k = if cfg.eq8_literal { v.clone() } else { t3.mul(&weight(model, "nfa.attn.k")) };
    let m2 = attn(&q, &k, &v, Some(&a), cfg.mask_mode);
    (a, m2)
}

/// Hierarchical level-3 index of each row-major cell of the `2gy×2gx` grid.
fn row_major(gy: usize, gx: usize) -> Vec<usize> {
    (0..4 * gy * gx)
        .map(|p| {
            let (r, c) = (p / (2 * gx), p % (2 * gx));
            2 * (2 * ((r / 2) * gx + c / 2) + c % 2) + r % 2
        })
        .collect()
}

/// High-pass by direct 2D DFT per channel.
fn highpass(map: &Map, cutoff: f64) -> Map {
    let (h, w, c) = (map.h, map.w, map.m.c);
    let rad = |u: usize, v: usize| {
        let (a, b) = (u.min(h - u) as f64, v.min(w - v) as f64);
        (a * a + b * b).sqrt()
    };
    let cut = cutoff * rad(h / 2, w / 2);
    let tau = std::f64::consts::TAU;
    let mut out = Mat::zeros(h * w, c);
    for ch in 0..c {
        let mut spec = vec![(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                if rad(u, v) <= cut {
                    continue;
                }
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let val = map.m.at(y * w + x, ch);
                        re += val * ang.cos();
                        im += val * ang.sin();
                    }
                }
                spec[u * w + v] = (re, im);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let (re, im) = spec[u * w + v];
                        let ang = tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        acc += re * ang.cos() - im * ang.sin();
                    }
                }
                out.v[(y * w + x) * c + ch] = acc / (h * w) as f64;
            }
        }
    }
    Map { h, w, m: out }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.iter().map(|x| x / n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutput {
    pub img_emb: Vec<f64>,
    pub txt_emb: Vec<f64>,
    pub score: f64,
    /// Coarse mask of every layer.
    pub a0: Vec<Tensor<f64>>,
    /// Combined fine mask of every fine-alignment call, in call order.
    pub a_prime: Vec<Tensor<f64>>,
    pub generation: usize,
}

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::new(&[m.r, m.c], m.v.clone()).expect("shape matches buffer")
}

/// Forward one pair: `features` is `h×w×c_img`, `text` is `l×c_txt`.
pub fn monolithic_forward(model: &DapeModel<f64>, features: &Tensor<f64>, text: &Tensor<f64>) -> Result<OracleOutput> {
    let cfg = &model.config;
    cfg.validate()?;
    let [h, w] = cfg.feature_hw;
    let (c_img, c_txt, d, l) = (cfg.image_channels, cfg.text_channels, cfg.d, cfg.text_len);
    if features.shape() != [h, w, c_img] || text.shape() != [l, c_txt] {
        return Err(HarnessError::Usage(format!("oracle inputs {:?} and {:?} do not fit the config", features.shape(), text.shape())));
    }
    let raw = Map { h, w, m: Mat { r: h * w, c: c_img, v: features.data().to_vec() } };
    let fmap = Map { h, w, m: raw.m.mul(&weight(model, "in_img")) };
    let (gy, gx) = (cfg.grid[0], cfg.grid[1]);
    let (ny, nx) = (cfg.nfa_grid[0], cfg.nfa_grid[1]);
    let i_tok = gy * gx;
    let mut m = fmap.grid(gy, gx);
    let mut tpos = Mat { r: l, c: c_txt, v: text.data().to_vec() }.mul(&weight(model, "in_txt"));
    let base = spans(l, cfg.j, 1);
    let owner: Vec<usize> = (0..l).map(|p| base.iter().position(|&(a, b)| a <= p && p < b).expect("spans cover")).collect();
    let mut n_slots = 0;
    let mut detail: Option<Mat> = None;
    let mut generation = 0;
    let mut a0s = Vec::new();
    let mut fines = Vec::new();

    for layer in 0..cfg.n_layers {
        let p = |n: &str| weight(model, &format!("layer{layer}.{n}"));
        let t = span_means(&tpos, &base);
        let phi_layer = cfg.enable_phi && layer % cfg.phi_period == cfg.phi_period - 1;
        if phi_layer && n_slots == 0 {
            let slots = weight(model, "phi.slots");
            n_slots = slots.r;
            m = Mat { r: m.r + slots.r, c: d, v: [m.v.clone(), slots.v].concat() };
        }
        let a0 = threshold(&m, &t, cfg.k0, 1.0);
        let t1 = attn(&t.mul(&p("txt.q")), &m.mul(&p("img.k")), &m.mul(&p("img.v")), Some(&a0.t()), cfg.mask_mode);
        let m1 = attn(&m.mul(&p("img.q")), &t.mul(&p("txt.k")), &t.mul(&p("txt.v")), Some(&a0), cfg.mask_mode);
        a0s.push(tensor(&a0));
        let t_prime;
        if phi_layer {
            let mut mres = m.plus(&m1);
            let src = match detail.take() {
                Some(carried) => carried,
                None => {
                    let hp = highpass(&raw, cfg.cutoff_frac);
                    let cells = hp.grid(2 * ny, 2 * nx).mul(&weight(model, "phi.detail_w"));
                    let b = weight(model, "phi.detail_b");
                    Mat { r: cells.r, c: d, v: cells.v.iter().enumerate().map(|(k, x)| x + b.v[k % d]).collect() }
                }
            };
            let (a, m2) = fine(model, &Map { h: 2 * ny, w: 2 * nx, m: src }, &tpos);
            fines.push(tensor(&a));
            let m2 = m2.rows(row_major(ny, nx));
            let m_in = mres.rows(i_tok..i_tok + n_slots);
            let upd = match cfg.residual_source {
                ResidualSource::M3 => attn(
                    &m_in.mul(&weight(model, "phi.attn.q")),
                    &m2.mul(&weight(model, "phi.attn.k")),
                    &m2.mul(&weight(model, "phi.attn.v")),
                    None,
                    MaskMode::PostSoftmax,
                ),
                ResidualSource::M2 => {
                    let mean = m2.mean_of(&(0..m2.r).collect::<Vec<_>>());
                    Mat::from_rows(vec![mean; n_slots])
                }
            };
            let new = m_in.plus(&upd);
            mres.v[i_tok * d..].copy_from_slice(&new.v);
            m = mres;
            detail = Some(m2);
            generation += 1;
            t_prime = t1;
        } else {
            m = m.plus(&m1);
            if cfg.enable_cwa {
                let m1r = m1.rows(0..i_tok);
                let pooled = Mat::from_rows(vec![m1r.mean_of(&(0..i_tok).collect::<Vec<_>>())]);
                let mut hid = pooled.mul(&p("gate.w1")).plus(&p("gate.b1"));
                hid.v.iter_mut().for_each(|x| *x = x.max(0.0));
                let mut gate = hid.mul(&p("gate.w2")).plus(&p("gate.b2"));
                softmax(&mut gate.v);
                let width = d / cfg.segments;
                let mut b_rows = Vec::new();
                for seg in 0..cfg.segments {
                    let mut idx: Vec<usize> = (seg * width..(seg + 1) * width).collect();
                    idx.sort_by(|&x, &y| gate.v[y].partial_cmp(&gate.v[x]).unwrap().then(x.cmp(&y)));
                    idx.truncate(cfg.k1);
                    let wgt = if cfg.cwa_agg == ChannelAgg::Mean { 1.0 / cfg.k1 as f64 } else { 1.0 };
                    let mut row = vec![0.0; i_tok];
                    for &ch in &idx {
                        for (pos, r) in row.iter_mut().enumerate() {
                            *r += wgt * m1r.at(pos, ch);
                        }
                    }
                    b_rows.push(row);
                }
                let bp = Mat::from_rows(b_rows).mul(&p("cwa.lift"));
                let ac = threshold(&bp, &t1, cfg.k_c, 1.0);
                let t2 = attn(&t1.mul(&p("cwa.q")), &bp.mul(&p("cwa.k")), &bp.mul(&p("cwa.v")), Some(&ac.t()), cfg.mask_mode);
                t_prime = t1.plus(&t2);
            } else {
                t_prime = t1;
            }
        }
        let pool_add = cfg.enable_nfa && (cfg.nfa_merge == NfaMerge::PoolAdd || !cfg.enable_phi);
        if pool_add {
            let (a, m2) = fine(model, &fmap, &tpos);
            fines.push(tensor(&a));
            let rm = m2.rows(row_major(ny, nx));
            let (fy, fx) = (2 * ny, 2 * nx);
            let (ry, rx) = (fy / gy, fx / gx);
            for g in 0..i_tok {
                let (a_, b_) = (g / gx, g % gx);
                let members: Vec<usize> = (0..ry).flat_map(|u| (0..rx).map(move |v| (a_ * ry + u) * fx + b_ * rx + v)).collect();
                let mean = rm.mean_of(&members);
                for (x, y) in m.v[g * d..(g + 1) * d].iter_mut().zip(mean) {
                    *x += y;
                }
            }
        }
        for (pos, &o) in owner.iter().enumerate() {
            for k in 0..d {
                tpos.v[pos * d + k] += t_prime.at(o, k);
            }
        }
    }

    let img = normalized(m.mean_of(&(0..m.r).collect::<Vec<_>>()));
    let t = span_means(&tpos, &base);
    let txt = normalized(t.mean_of(&(0..t.r).collect::<Vec<_>>()));
    let score = img.iter().zip(&txt).map(|(a, b)| a * b).sum();
    Ok(OracleOutput { img_emb: img, txt_emb: txt, score, a0: a0s, a_prime: fines, generation })
}

/// Largest elementwise gap between the oracle and the modular stack on one pair,
/// masks included (a mask mismatch counts as infinite).
pub fn oracle_gap(model: &DapeModel<f64>, features: &Tensor<f64>, text: &Tensor<f64>) -> Result<f64> {
    use dape_core::model::{ImageInput, TextInput};
    let o = monolithic_forward(model, features, text)?;
    let r = model.pair(&ImageInput::new(features.clone(), model.config.cutoff_frac)?, &TextInput::new(text.clone()))?;
    let fines: Vec<&Tensor<f64>> = r.trace.layers.iter().flat_map(|l| l.phi.iter().chain(l.nfa.iter())).map(|h| &h.combined.weights).collect();
    if r.trace.layers.len() != o.a0.len() || fines.len() != o.a_prime.len() || r.trace.generation != o.generation {
        return Ok(f64::INFINITY);
    }
    for (l, a) in r.trace.layers.iter().zip(&o.a0) {
        if &l.a0.weights != a {
            return Ok(f64::INFINITY);
        }
    }
    let mut gap: f64 = 0.0;
    for (a, b) in fines.iter().zip(&o.a_prime) {
        gap = gap.max(a.max_abs_diff(b));
    }
    for (a, b) in r.img_emb.data().iter().zip(&o.img_emb).chain(r.txt_emb.data().iter().zip(&o.txt_emb)) {
        gap = gap.max((a - b).abs());
    }
    Ok(gap.max((r.score - o.score).abs()))
}

fn mat(t: &Tensor<f64>) -> Mat {
    let c = *t.shape().last().unwrap_or(&1);
    Mat { r: t.len() / c.max(1), c, v: t.data().to_vec() }
}

/// High-pass of an `h×w×c` map by direct DFT.
pub fn direct_highpass(x: &Tensor<f64>, cutoff_frac: f64) -> Tensor<f64> {
    let s = x.shape();
    let out = highpass(&Map { h: s[0], w: s[1], m: mat(x) }, cutoff_frac);
    Tensor::new(s, out.m.v).expect("same shape")
}

/// `(softmax(q kᵀ/√d) ∘ w) v` with `w` query-by-key.
pub fn direct_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, w: Option<&Tensor<f64>>, mode: MaskMode) -> Tensor<f64> {
    let wm = w.map(mat);
    tensor(&attn(&mat(q), &mat(k), &mat(v), wm.as_ref(), mode))
}

/// Cosine affinity of the rows of `a` against the rows of `b`.
pub fn direct_affinity(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (a, b) = (mat(a), mat(b));
    Tensor::from_fn(&[a.r, b.r], |i| cos(a.row(i / b.r), b.row(i % b.r)))
}

/// d=16, I=16, J=4 stack with a detail injection every second layer.
pub fn small_config() -> dape_core::DapeConfig {
    dape_core::DapeConfig {
        d: 16,
        n_layers: 2,
        feature_hw: [16, 16],
        text_len: 16,
        image_channels: 6,
        text_channels: 5,
        grid: [4, 4],
        j: 4,
        segments: 4,
        k1: 2,
        k0: 0.0,
        k_c: 0.0,
        k_thr: 0.0,
        nfa_grid: [2, 2],
        phi_period: 2,
        batch_size: 3,
        ..Default::default()
    }
}

/// Variants the oracle is compared on: the small stack plus every switch that changes the arithmetic.
pub fn oracle_configs() -> Vec<(&'static str, dape_core::DapeConfig)> {
    let base = small_config();
    vec![
        ("phi", base.clone()),
        ("pool_add", dape_core::DapeConfig { nfa_merge: NfaMerge::PoolAdd, ..base.clone() }),
        ("no_phi", dape_core::DapeConfig { enable_phi: false, ..base.clone() }),
        ("carried_detail", dape_core::DapeConfig { n_layers: 4, k0: 0.1, k_thr: 0.1, tau_d: 0.4, ..base.clone() }),
        (
            "variants",
            dape_core::DapeConfig {
                mask_mode: MaskMode::PreSoftmax,
                eq8_literal: true,
                residual_source: ResidualSource::M2,
                cwa_agg: ChannelAgg::Sum,
                k0: 0.2,
                k_c: 0.1,
                ..base.clone()
            },
        ),
        ("all_off", dape_core::DapeConfig { enable_cwa: false, enable_nfa: false, enable_phi: false, ..base }),
    ]
}

/// Random inputs for one pair; the text has trailing zero positions.
pub fn random_pair<R: rand::Rng>(cfg: &dape_core::DapeConfig, rng: &mut R) -> (Tensor<f64>, Tensor<f64>) {
    let [h, w] = cfg.feature_hw;
    let f = Tensor::uniform(&[h, w, cfg.image_channels], -1.0, 1.0, rng);
    let c = cfg.text_channels;
    let words = cfg.text_len - 3;
    let full = Tensor::<f64>::uniform(&[cfg.text_len, c], -1.0, 1.0, rng);
    let t = Tensor::from_fn(&[cfg.text_len, c], |i| if i / c < words { full.data()[i] } else { 0.0 });
    (f, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modular_stack_matches_the_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for (name, cfg) in oracle_configs() {
            let model = DapeModel::<f64>::new(cfg).unwrap();
            for _ in 0..2 {
                let (f, t) = random_pair(&model.config, &mut r);
                let gap = oracle_gap(&model, &f, &t).unwrap();
                assert!(gap < 1e-10, "{name}: gap {gap}");
            }
        }
    }

    #[test]
    fn oracle_sees_perturbed_weights() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let model = DapeModel::<f64>::new(small_config()).unwrap();
        let (f, t) = random_pair(&model.config, &mut r);
        let mut other = model.clone();
        let i = other.store.index_of("phi.attn.v").unwrap();
        other.store.get_mut(i).data_mut()[0] += 1e-3;
        let a = monolithic_forward(&model, &f, &t).unwrap();
        let b = monolithic_forward(&other, &f, &t).unwrap();
        assert_ne!(a.score, b.score);
        assert!(oracle_gap(&other, &f, &t).unwrap() < 1e-10);
    }
}
