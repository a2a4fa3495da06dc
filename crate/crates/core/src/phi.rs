//! Progressive high-frequency detail injection.
//!
//! Learnable slots ride along with the image tokens. Every `K`-th layer they
//! query a pool of detail tokens that went through the fine alignment block,
//! and that aligned pool becomes the detail source for the next injection.

use serde::{Deserialize, Serialize};

use crate::attention::{masked_cross_attention, MaskMode, ProjectionSet};
use crate::cost::Module;
use crate::decisions::Decisions;
use crate::error::{DapeError, Result};
use crate::fourier::highpass_channels;
use crate::nfa::{level3_row_major, nfa_block, HierarchicalMask, NfaParams, NfaWeights};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokens::{cell_groups, grid_cells, Provenance, TokenSet};

/// What the slots add back after attending over the detail pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    /// `M_in + M3`.
    #[default]
    M3,
    /// `M_in + mean(M2)`.
    M2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiWeights<T> {
    /// `c×d` detail projection and its `1×d` bias.
    pub detail_w: T,
    pub detail_b: T,
    /// Slots query, detail tokens give keys and values.
    pub attn: ProjectionSet<T>,
    /// `P×d` learnable tokens.
    pub slots: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiParams {
    pub period: usize,
    pub residual: ResidualSource,
    pub nfa: NfaParams,
}

/// Carried detail pool: `4·gy·gx` tokens in row-major order of the level-3 grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetailState {
    pub tokens: Var,
    pub generation: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum DetailSource<'a, S> {
    /// Raw high-resolution map, filtered here.
    Raw { map: &'a Tensor<S>, cutoff_frac: f64 },
    /// Map already filtered by the caller.
    Filtered(&'a Tensor<S>),
    Carried(DetailState),
}

#[derive(Clone, Debug)]
pub struct PhiOutput<S> {
    pub m_out: Var,
    pub state: DetailState,
    pub hierarchy: HierarchicalMask<S>,
}

/// Append `lt` after the rows of `m`; returns the padded rows and the slot positions.
pub fn pad_with_learnable<S: Scalar>(tape: &mut Tape<S>, m: Var, lt: Option<Var>) -> Result<(Var, Vec<usize>)> {
    let n = tape.value(m).require_matrix("pad_with_learnable")?.0;
    match lt {
        None => Ok((m, Vec::new())),
        Some(lt) => {
            let p = tape.value(lt).rows();
            Ok((tape.concat_rows(&[m, lt])?, (n..n + p).collect()))
        }
    }
}

/// Value-level padding that marks the new rows as synthetic.
pub fn pad_token_set<S: Scalar>(m: &TokenSet<S>, lt: Option<&Tensor<S>>) -> Result<(TokenSet<S>, Vec<usize>)> {
    let Some(lt) = lt else { return Ok((m.clone(), Vec::new())) };
    let n = m.len();
    let mut provenance = m.provenance.clone();
    provenance.extend((0..lt.rows()).map(|slot| Provenance::Synthetic { slot }));
    let tokens = Tensor::concat_rows(&[&m.tokens, lt])?;
    Ok((TokenSet { tokens, provenance, modality: m.modality }, (n..n + lt.rows()).collect()))
}

pub fn extract_slots<S: Scalar>(tape: &mut Tape<S>, m1_plus: Var, slots: &[usize]) -> Result<Var> {
    let n = tape.value(m1_plus).require_matrix("extract_slots")?.0;
    if let Some(&bad) = slots.iter().find(|&&s| s >= n) {
        return Err(DapeError::Index(format!("slot {bad} out of range for {n} rows")));
    }
    tape.gather_rows(m1_plus, slots)
}

/// Replace rows `slots` of `m` with the rows of `new`, leaving every other row untouched.
pub fn write_slots<S: Scalar>(tape: &mut Tape<S>, m: Var, slots: &[usize], new: Var) -> Result<Var> {
    let n = tape.value(m).require_matrix("write_slots")?.0;
    if tape.value(new).rows() != slots.len() {
        return Err(DapeError::dim("write_slots", format!("{} rows for {} slots", tape.value(new).rows(), slots.len())));
    }
    let keep: Vec<usize> = (0..n).filter(|r| !slots.contains(r)).collect();
    if keep.is_empty() {
        let order: Vec<usize> = (0..n).map(|r| slots.iter().position(|&s| s == r).expect("slot")).collect();
        return tape.gather_rows(new, &order);
    }
    let kept = tape.gather_rows(m, &keep)?;
    let joined = tape.concat_rows(&[kept, new])?;
    let order: Vec<usize> = (0..n)
        .map(|r| match slots.iter().position(|&s| s == r) {
            Some(p) => keep.len() + p,
            None => keep.iter().position(|&k| k == r).expect("kept row"),
        })
        .collect();
    tape.gather_rows(joined, &order)
}

/// Detail tokens in row-major order of the `2gy×2gx` level-3 grid.
pub fn make_detail_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    source: DetailSource<'_, S>,
    w_detail: Var,
    b_detail: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let filtered;
    let map = match source {
        DetailSource::Carried(state) => return Ok(state.tokens),
        DetailSource::Filtered(m) => m,
        DetailSource::Raw { map, cutoff_frac } => {
            filtered = highpass_channels(map, cutoff_frac)?;
            &filtered
        }
    };
    let (h, w, c) = map.require_rank3("make_detail_tokens")?;
    let groups = cell_groups(&grid_cells(h, w, 2 * grid.0, 2 * grid.1)?, h, w)?;
    let flat = tape.constant(map.reshaped(&[h * w, c])?);
    let cells = tape.pool_rows(flat, &groups)?;
    let proj = tape.matmul(cells, w_detail)?;
    tape.add_row(proj, b_detail)
}

/// One injection. `m1_plus` holds the image rows with slots at `slots`,
/// `text` is the `l×d` text stream whose level-1 tokens are `base_spans`.
#[allow(clippy::too_many_arguments)]
pub fn phi_inject<S: Scalar>(
    tape: &mut Tape<S>,
    layer: usize,
    m1_plus: Var,
    slots: &[usize],
    detail: DetailSource<'_, S>,
    generation: usize,
    text: Var,
    base_spans: &[Provenance],
    w: &PhiWeights<Var>,
    nfa_w: &NfaWeights<Var>,
    p: &PhiParams,
    decisions: &mut Decisions<S>,
) -> Result<PhiOutput<S>> {
    if p.period == 0 || layer % p.period != p.period - 1 {
        return Err(DapeError::Contract(format!(
            "detail injection at layer {layer} is off phase for period {}",
            p.period
        )));
    }
    if slots.is_empty() {
        return Err(DapeError::Contract("detail injection needs at least one slot".into()));
    }
    let prev = tape.enter(Module::Phi);
    let out = (|| {
        let grid = p.nfa.grid;
        let tokens = make_detail_tokens(tape, detail, w.detail_w, w.detail_b, grid)?;
        let d = tape.value(tokens).cols();
        let map = tape.reshape(tokens, &[2 * grid.0, 2 * grid.1, d])?;
        let fine = nfa_block(tape, map, text, base_spans, nfa_w, &p.nfa, decisions)?;
        let m2 = tape.gather_rows(fine.m2, &level3_row_major(grid))?;
        let m_in = extract_slots(tape, m1_plus, slots)?;
        let update = match p.residual {
            ResidualSource::M3 => {
                masked_cross_attention(tape, m_in, m2, w.attn.q, w.attn.k, w.attn.v, None, MaskMode::PostSoftmax)?
            }
            ResidualSource::M2 => {
                let pooled = tape.mean_rows(m2)?;
                let zeros = tape.constant(Tensor::zeros(tape.shape(m_in)));
                tape.add_row(zeros, pooled)?
            }
        };
        let m_in_new = tape.add(m_in, update)?;
        let m_out = write_slots(tape, m1_plus, slots, m_in_new)?;
        Ok(PhiOutput { m_out, state: DetailState { tokens: m2, generation: generation + 1 }, hierarchy: fine.hierarchy })
    })();
    tape.enter(prev);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{even_spans, tokenize_image, Modality};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MU: [f64; 3] = [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0];

    fn nfa_params() -> NfaParams {
        NfaParams {
            mu: MU,
            kernels: [3, 5, 7],
            k_thr: -0.5,
            tau_d: 0.25,
            grid: (1, 2),
            refine: true,
            eq8_literal: false,
            mode: MaskMode::PostSoftmax,
        }
    }

    fn weights(t: &mut Tape<f64>, c: usize, d: usize, p: usize, r: &mut ChaCha8Rng) -> (PhiWeights<Var>, NfaWeights<Var>) {
        let widths = crate::nfa::split_widths(MU, d).unwrap();
        let mut proj = || t_normal(r, &[d, d]);
        let attn = ProjectionSet { q: proj(), k: proj(), v: proj() };
        let nattn = ProjectionSet { q: proj(), k: proj(), v: proj() };
        let dw = t_normal(r, &[c, d]);
        let db = t_normal(r, &[1, d]);
        let slots = t_normal(r, &[p, d]);
        let conv = [0, 1, 2].map(|k| Tensor::uniform(&[widths[k], [3, 5, 7][k], [3, 5, 7][k]], -0.3, 0.3, r));
        let bp = [0, 1, 2].map(|k| t_normal(r, &[widths[k], d]));
        let phi = PhiWeights { detail_w: t.param(dw), detail_b: t.param(db), attn: attn.map(|x| t.param(x.clone())), slots: t.param(slots) };
        let nfa = NfaWeights {
            conv: conv.map(|x| t.param(x)),
            branch_proj: bp.map(|x| t.param(x)),
            attn: nattn.map(|x| t.param(x.clone())),
        };
        (phi, nfa)
    }

    fn t_normal(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::normal(shape, 0.5, r)
    }

    #[test]
    fn pad_and_extract_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let m0 = tokenize_image(&Tensor::<f64>::uniform(&[4, 4, 3], -1.0, 1.0, &mut r), (2, 2)).unwrap();
        let (same, none) = pad_token_set(&m0, None).unwrap();
        assert_eq!((same, none.len()), (m0.clone(), 0));
        let lt = Tensor::<f64>::normal(&[2, 3], 0.02, &mut r);
        let (padded, slots) = pad_token_set(&m0, Some(&lt)).unwrap();
        assert_eq!(padded.len(), 6);
        assert_eq!(slots, vec![4, 5]);
        assert!(matches!(padded.provenance[5], Provenance::Synthetic { slot: 1 }));
        assert!(padded.partitions(&[4, 4]));

        let mut t = Tape::new();
        let mv = t.constant(m0.tokens.clone());
        let lv = t.param(lt.clone());
        let (pv, s) = pad_with_learnable(&mut t, mv, Some(lv)).unwrap();
        assert_eq!(t.value(pv), &padded.tokens);
        let back = extract_slots(&mut t, pv, &s).unwrap();
        assert_eq!(t.value(back), &lt);
        let all = extract_slots(&mut t, pv, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(t.value(all), t.value(pv));
        assert!(matches!(extract_slots(&mut t, pv, &[6]), Err(DapeError::Index(_))));
        assert_eq!(padded.modality, Modality::Image);
    }

    #[test]
    fn write_slots_touches_only_slots() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let m = t.constant(Tensor::<f64>::uniform(&[5, 2], -1.0, 1.0, &mut r));
        let new = t.constant(Tensor::<f64>::uniform(&[2, 2], -1.0, 1.0, &mut r));
        let out = write_slots(&mut t, m, &[3, 1], new).unwrap();
        for row in [0, 2, 4] {
            assert_eq!(t.value(out).row(row), t.value(m).row(row));
        }
        assert_eq!(t.value(out).row(3), t.value(new).row(0));
        assert_eq!(t.value(out).row(1), t.value(new).row(1));
    }

    #[test]
    fn detail_tokens_composition_and_dc_case() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let img = Tensor::<f64>::uniform(&[8, 8, 1], -1.0, 1.0, &mut r);
        let wv = Tensor::<f64>::normal(&[1, 3], 1.0, &mut r);
        let bv = Tensor::<f64>::normal(&[1, 3], 1.0, &mut r);
        let (w, b) = (t.param(wv.clone()), t.param(bv.clone()));
        let got = make_detail_tokens(&mut t, DetailSource::Raw { map: &img, cutoff_frac: 0.25 }, w, b, (2, 2)).unwrap();
        let hp = highpass_channels(&img, 0.25).unwrap();
        let cells = tokenize_image(&hp, (4, 4)).unwrap().tokens;
        let want = cells.matmul(&wv).unwrap().add(&Tensor::from_fn(&[16, 3], |i| bv.data()[i % 3])).unwrap();
        assert!(t.value(got).max_abs_diff(&want) < 1e-12);

        let flat = Tensor::<f64>::full(&[8, 8, 1], 0.7);
        let dc = make_detail_tokens(&mut t, DetailSource::Raw { map: &flat, cutoff_frac: 0.25 }, w, b, (2, 2)).unwrap();
        for i in 0..16 {
            for c in 0..3 {
                assert!((t.value(dc).get2(i, c) - bv.data()[c]).abs() < 1e-12);
            }
        }
        let state = DetailState { tokens: got, generation: 1 };
        assert_eq!(make_detail_tokens(&mut t, DetailSource::Carried(state), w, b, (2, 2)).unwrap(), got);
    }

    struct Setup {
        tape: Tape<f64>,
        m1: Var,
        slots: Vec<usize>,
        text: Var,
        phi: PhiWeights<Var>,
        nfa: NfaWeights<Var>,
        img: Tensor<f64>,
    }

    fn setup(seed: u64) -> Setup {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (7, 7);
        let mut tape = Tape::new();
        let (phi, nfa) = weights(&mut tape, c, d, 2, &mut r);
        let m = tape.constant(Tensor::uniform(&[4, d], -1.0, 1.0, &mut r));
        let (m1, slots) = pad_with_learnable(&mut tape, m, Some(phi.slots)).unwrap();
        let text = tape.constant(Tensor::uniform(&[8, d], -1.0, 1.0, &mut r));
        let img = Tensor::uniform(&[8, 8, c], -1.0, 1.0, &mut r);
        Setup { tape, m1, slots, text, phi, nfa, img }
    }

    fn params(period: usize) -> PhiParams {
        PhiParams { period, residual: ResidualSource::M3, nfa: nfa_params() }
    }

    #[test]
    fn injection_composes_its_steps() {
        let mut s = setup(4);
        let spans = even_spans(0, 8, 2);
        let src = DetailSource::Raw { map: &s.img, cutoff_frac: 0.25 };
        let out = phi_inject(&mut s.tape, 3, s.m1, &s.slots, src, 0, s.text, &spans, &s.phi, &s.nfa, &params(4), &mut Decisions::live())
            .unwrap();
        let t = &mut s.tape;
        assert_eq!(out.state.generation, 1);
        assert_eq!(t.shape(out.state.tokens), &[8, 7]);
        for row in 0..4 {
            assert_eq!(t.value(out.m_out).row(row), t.value(s.m1).row(row));
        }
        let m_in = t.value(s.m1).gather_rows(&s.slots).unwrap();
        let m2 = t.value(out.state.tokens).clone();
        let w = |v: Var| t.value(v).clone();
        let m3 = crate::attention::reference_attention(
            &m_in.matmul(&w(s.phi.attn.q)).unwrap(),
            &m2.matmul(&w(s.phi.attn.k)).unwrap(),
            &m2.matmul(&w(s.phi.attn.v)).unwrap(),
            None,
        )
        .unwrap();
        let want = m_in.add(&m3).unwrap();
        assert!(t.value(out.m_out).gather_rows(&s.slots).unwrap().max_abs_diff(&want) < 1e-12);
        assert!(t.meter().macs(Module::Phi) > 0 && t.meter().macs(Module::Nfa) > 0);
    }

    #[test]
    fn zero_detail_leaves_slots_unchanged() {
        let mut s = setup(5);
        let spans = even_spans(0, 8, 2);
        let zero = s.tape.constant(Tensor::zeros(&[7, 7]));
        let zb = s.tape.constant(Tensor::zeros(&[1, 7]));
        s.phi.detail_w = zero;
        s.phi.detail_b = zb;
        let src = DetailSource::Raw { map: &s.img, cutoff_frac: 0.25 };
        let mut p = params(4);
        p.nfa.k_thr = 0.6;
        let out = phi_inject(&mut s.tape, 3, s.m1, &s.slots, src, 0, s.text, &spans, &s.phi, &s.nfa, &p, &mut Decisions::live())
            .unwrap();
        assert_eq!(s.tape.value(out.state.tokens).max_abs(), 0.0);
        assert_eq!(s.tape.value(out.m_out), s.tape.value(s.m1));
    }

    #[test]
    fn off_phase_layer_is_rejected() {
        let mut s = setup(6);
        let spans = even_spans(0, 8, 2);
        let src = DetailSource::Raw { map: &s.img, cutoff_frac: 0.25 };
        let err = phi_inject(&mut s.tape, 2, s.m1, &s.slots, src, 0, s.text, &spans, &s.phi, &s.nfa, &params(4), &mut Decisions::live());
        assert!(matches!(err, Err(DapeError::Contract(_))));
    }

    #[test]
    fn full_cutoff_gives_image_independent_perturbation() {
        let spans = even_spans(0, 8, 2);
        let mut deltas = Vec::new();
        for seed in [7, 8] {
            let mut s = setup(9);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::<f64>::uniform(&[8, 8, 7], -1.0, 1.0, &mut r);
            let src = DetailSource::Raw { map: &img, cutoff_frac: 1.0 };
            let out =
                phi_inject(&mut s.tape, 3, s.m1, &s.slots, src, 0, s.text, &spans, &s.phi, &s.nfa, &params(4), &mut Decisions::live())
                    .unwrap();
            deltas.push(s.tape.value(out.m_out).sub(s.tape.value(s.m1)).unwrap());
        }
        assert!(deltas[0].max_abs() > 0.0);
        assert_eq!(deltas[0], deltas[1]);
    }

    #[test]
    fn carried_state_depends_on_text() {
        let spans = even_spans(0, 8, 2);
        let mut outs = Vec::new();
        for bump in [0.0, 0.1] {
            let mut s = setup(10);
            let src = DetailSource::Raw { map: &s.img, cutoff_frac: 0.25 };
            let first =
                phi_inject(&mut s.tape, 3, s.m1, &s.slots, src, 0, s.text, &spans, &s.phi, &s.nfa, &params(4), &mut Decisions::live())
                    .unwrap();
            let shifted = s.tape.value(s.text).map(|x| x + bump);
            let text2 = s.tape.constant(shifted);
            let second = phi_inject(
                &mut s.tape,
                7,
                first.m_out,
                &s.slots,
                DetailSource::Carried(first.state),
                first.state.generation,
                text2,
                &spans,
                &s.phi,
                &s.nfa,
                &params(4),
                &mut Decisions::live(),
            )
            .unwrap();
            assert_eq!(second.state.generation, 2);
            outs.push(s.tape.value(second.state.tokens).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) > 1e-9);
    }
}
