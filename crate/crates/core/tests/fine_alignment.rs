use dape_core::attention::{MaskMode, ProjectionSet};
use dape_core::decisions::Decisions;
use dape_core::nfa::{
    hierarchical_cosines, hierarchy_from_level_tokens, hierarchy_with_flags, nfa_block, similarity_tokens, split_widths,
    uniform_cosines, NfaParams, NfaWeights,
};
use dape_core::tokens::even_spans;
use dape_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(k_thr: f64) -> NfaParams {
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

struct Case {
    map: Tensor<f64>,
    text: Tensor<f64>,
    conv: [Tensor<f64>; 3],
    proj: [Tensor<f64>; 3],
    attn: ProjectionSet<Tensor<f64>>,
}

fn case(seed: u64, d: usize) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = split_widths(params(0.0).mu, d).unwrap();
    let ks = [3, 5, 7];
    Case {
        map: Tensor::uniform(&[8, 8, d], -1.0, 1.0, &mut r),
        text: Tensor::uniform(&[16, d], -1.0, 1.0, &mut r),
        conv: [0, 1, 2].map(|k| Tensor::uniform(&[w[k], ks[k], ks[k]], -0.3, 0.3, &mut r)),
        proj: [0, 1, 2].map(|k| Tensor::normal(&[w[k], d], 0.5, &mut r)),
        attn: ProjectionSet { q: Tensor::normal(&[d, d], 0.3, &mut r), k: Tensor::normal(&[d, d], 0.3, &mut r), v: Tensor::normal(&[d, d], 0.3, &mut r) },
    }
}

#[test]
fn value_tokens_reproduce_the_block_hierarchy() {
    for seed in 0..5 {
        let c = case(seed, 14);
        let p = params(0.1);
        let spans = even_spans(0, 16, 4);
        let mut tape = Tape::new();
        let map = tape.constant(c.map.clone());
        let text = tape.constant(c.text.clone());
        let w = NfaWeights {
            conv: [0, 1, 2].map(|k| tape.param(c.conv[k].clone())),
            branch_proj: [0, 1, 2].map(|k| tape.param(c.proj[k].clone())),
            attn: c.attn.map(|x| tape.param(x.clone())),
        };
        let out = nfa_block(&mut tape, map, text, &spans, &w, &p, &mut Decisions::live()).unwrap();
        let (xs, ts) = similarity_tokens(&c.map, &c.text, &spans, [&c.conv[0], &c.conv[1], &c.conv[2]], [&c.proj[0], &c.proj[1], &c.proj[2]], &p).unwrap();
        let h = hierarchy_from_level_tokens([&xs[0], &xs[1], &xs[2]], [&ts[0], &ts[1], &ts[2]], &p.hierarchy()).unwrap();
        assert_eq!(h, out.hierarchy);
        assert_eq!(tape.meter().cosines(dape_core::Module::Nfa), h.total_cosines());
    }
}

#[test]
fn forced_flags_follow_the_closed_form() {
    let c = case(9, 14);
    let p = params(0.0);
    let spans = even_spans(0, 16, 4);
    let (xs, ts) = similarity_tokens(&c.map, &c.text, &spans, [&c.conv[0], &c.conv[1], &c.conv[2]], [&c.proj[0], &c.proj[1], &c.proj[2]], &p).unwrap();
    let (i, j) = (xs[0].rows(), ts[0].rows());
    for n1 in 0..=i {
        let mut rule = |m: &dape_core::AffinityMask<f64>, level: usize| -> Vec<usize> {
            if level == 1 { (0..n1).collect() } else { (0..m.rows()).collect() }
        };
        let h = hierarchy_with_flags([&xs[0], &xs[1], &xs[2]], [&ts[0], &ts[1], &ts[2]], p.mu, p.k_thr, &mut rule).unwrap();
        assert_eq!(h.dense[0].len(), n1);
        assert_eq!(h.dense[1].len(), 2 * n1);
        assert_eq!(h.total_cosines(), hierarchical_cosines(i, j, n1, 2 * n1));
    }
    let mut all = |m: &dape_core::AffinityMask<f64>, _: usize| (0..m.rows()).collect::<Vec<_>>();
    let h = hierarchy_with_flags([&xs[0], &xs[1], &xs[2]], [&ts[0], &ts[1], &ts[2]], p.mu, p.k_thr, &mut all).unwrap();
    assert_eq!(h.total_cosines(), uniform_cosines(i, j));
}
