mod common;

use common::{batch, small, tiny};
use dape_core::decisions::Decisions;
use dape_core::gradcheck::{grad_check, GradCheckOptions};
use dape_core::model::{forward_pair, Batch, DapeModel};
use dape_core::train::{batch_gradients, batch_loss_on_tape, train_step};
use dape_core::{cost_report, DapeConfig, DapeError, Module, NfaMerge, Tape, Tensor, Var};

fn model(cfg: DapeConfig) -> DapeModel<f64> {
    DapeModel::new(cfg).unwrap()
}

#[test]
fn all_masked_stack_reduces_to_pooled_inputs() {
    let cfg = DapeConfig { n_layers: 1, k0: 1.0, k_c: 1.0, k_thr: 1.0, ..small() };
    let m = model(cfg.clone());
    let b = batch(&cfg, 2, 1);
    let r = m.pair(&b.images[0], &b.texts[0]).unwrap();
    assert_eq!(r.trace.layers[0].a0.nonzero(), 0);
    assert_eq!(r.trace.layers[0].cwa.as_ref().unwrap().t2.max_abs(), 0.0);

    let [h, w] = cfg.feature_hw;
    let f = b.images[0].features.reshaped(&[h * w, cfg.image_channels]).unwrap();
    let img = f.mean_rows().unwrap().matmul(m.store.get(m.weights.in_img)).unwrap();
    let l2 = |t: &Tensor<f64>| t.scale(1.0 / t.norm());
    assert!(r.img_emb.max_abs_diff(&l2(&img)) < 1e-12);
    let txt = b.texts[0].features.mean_rows().unwrap().matmul(m.store.get(m.weights.in_txt)).unwrap();
    assert!(r.txt_emb.max_abs_diff(&l2(&txt)) < 1e-12);
    let again = m.pair(&b.images[0], &b.texts[0]).unwrap();
    assert_eq!(again.img_emb, r.img_emb);
}

#[test]
fn duplicated_inputs_give_identical_rows() {
    let cfg = small();
    let b = batch(&cfg, 2, 2);
    let dup = Batch::new(vec![b.images[0].clone(); 3], vec![b.texts[0].clone(); 3]).unwrap();
    let out = model(cfg).forward(&dup).unwrap();
    for i in 1..3 {
        assert_eq!(out.img_emb.row(i), out.img_emb.row(0));
        assert_eq!(out.txt_emb.row(i), out.txt_emb.row(0));
    }
}

#[test]
fn embeddings_are_unit_norm() {
    for cfg in [small(), tiny(), DapeConfig { nfa_merge: NfaMerge::PoolAdd, ..small() }] {
        let out = model(cfg.clone()).forward(&batch(&cfg, 3, 3)).unwrap();
        for i in 0..3 {
            for e in [&out.img_emb, &out.txt_emb] {
                let n: f64 = e.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn generation_counts_injections() {
    for (n, k, expect) in [(2, 2, 1), (5, 2, 2), (8, 4, 2), (3, 4, 0), (4, 1, 4)] {
        let cfg = DapeConfig { n_layers: n, phi_period: k, ..small() };
        let r = model(cfg.clone()).pair(&batch(&cfg, 2, 4).images[0], &batch(&cfg, 2, 4).texts[0]).unwrap();
        assert_eq!(r.trace.generation, expect, "n={n} K={k}");
        assert_eq!(r.trace.layers.iter().filter(|l| l.phi.is_some()).count(), expect);
    }
    let off = DapeConfig { enable_phi: false, ..small() };
    let r = model(off.clone()).pair(&batch(&off, 2, 4).images[0], &batch(&off, 2, 4).texts[0]).unwrap();
    assert_eq!((r.trace.generation, r.trace.slots), (0, 0));
}

#[test]
fn disabling_cwa_removes_exactly_the_text_update() {
    let cfg = small();
    let b = batch(&cfg, 2, 5);
    let off = model(DapeConfig { enable_cwa: false, ..cfg.clone() }).pair(&b.images[1], &b.texts[0]).unwrap();
    let closed = model(DapeConfig { k_c: 1.0, ..cfg.clone() }).pair(&b.images[1], &b.texts[0]).unwrap();
    assert!(closed.trace.layers[0].cwa.as_ref().unwrap().t2.max_abs() == 0.0);
    assert_eq!(off.img_emb, closed.img_emb);
    assert_eq!(off.txt_emb, closed.txt_emb);
    assert!(off.trace.layers.iter().all(|l| l.cwa.is_none()));
    let on = model(cfg).pair(&b.images[1], &b.texts[0]).unwrap();
    assert!(on.trace.layers[0].cwa.as_ref().unwrap().t2.max_abs() > 0.0);
    assert_ne!(on.txt_emb, off.txt_emb);
}

#[test]
fn disabling_nfa_collapses_the_hierarchy() {
    let cfg = DapeConfig { enable_nfa: false, k_thr: -1.0, ..small() };
    let b = batch(&cfg, 2, 6);
    let r = model(cfg).pair(&b.images[0], &b.texts[0]).unwrap();
    let h = r.trace.layers[1].phi.as_ref().unwrap();
    assert!(h.levels[0].nonzero() > 0);
    assert_eq!(h.levels[1].nonzero() + h.levels[2].nonzero(), 0);
    assert_eq!(h.combined.weights, h.levels[0].weights);
    assert!(r.trace.layers.iter().all(|l| l.nfa.is_none()));
}

#[test]
fn merge_modes_route_fine_alignment() {
    let b = batch(&small(), 2, 7);
    let slots = model(small()).pair(&b.images[0], &b.texts[0]).unwrap();
    assert!(slots.trace.layers.iter().all(|l| l.nfa.is_none()));
    let pool = model(DapeConfig { nfa_merge: NfaMerge::PoolAdd, ..small() }).pair(&b.images[0], &b.texts[0]).unwrap();
    assert!(pool.trace.layers.iter().all(|l| l.nfa.is_some()));
    let fallback = model(DapeConfig { enable_phi: false, ..small() }).pair(&b.images[0], &b.texts[0]).unwrap();
    assert!(fallback.trace.layers.iter().all(|l| l.nfa.is_some()));
}

#[test]
fn cost_grows_with_each_component() {
    let base = DapeConfig { enable_cwa: false, enable_nfa: false, enable_phi: false, ..small() };
    let b = batch(&base, 2, 8);
    let macs = |cfg: DapeConfig| cost_report(&model(cfg).pair(&b.images[0], &b.texts[0]).unwrap().trace).total_macs;
    let coarse = macs(base.clone());
    let cwa = macs(DapeConfig { enable_cwa: true, ..base.clone() });
    let nfa = macs(DapeConfig { enable_cwa: true, enable_nfa: true, ..base.clone() });
    assert!(coarse <= cwa && cwa <= nfa, "{coarse} {cwa} {nfa}");

    for n_layers in [4, 8] {
        let no_phi = DapeConfig { n_layers, phi_period: 4, enable_nfa: false, ..small() };
        let with_phi = DapeConfig { enable_phi: true, ..no_phi.clone() };
        let no_phi = DapeConfig { enable_phi: false, ..no_phi };
        let r0 = model(no_phi).pair(&b.images[0], &b.texts[0]).unwrap();
        let r1 = model(with_phi.clone()).pair(&b.images[0], &b.texts[0]).unwrap();
        let per_injection: Vec<u64> = r1
            .trace
            .layers
            .iter()
            .filter(|l| l.phi.is_some())
            .map(|l| l.cost.macs(Module::Phi) + l.cost.macs(Module::Nfa))
            .collect();
        assert_eq!(per_injection.len(), with_phi.injections());
        let one = *per_injection.iter().max().unwrap();
        let added = r1.trace.cost.total_macs() as i64 - r0.trace.cost.total_macs() as i64;
        assert!(added <= (with_phi.injections() as u64 * one) as i64, "{added} > {} × {one}", with_phi.injections());
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = DapeConfig { learning_rate: 0.0, ..tiny() };
    let mut m = model(cfg.clone());
    let before = m.clone();
    let rep = train_step(&mut m, &batch(&cfg, 3, 9)).unwrap();
    assert!(rep.grad_norm > 0.0);
    assert_eq!(m, before);
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = DapeConfig { learning_rate: 0.05, ..tiny() };
    let b = batch(&cfg, 3, 10);
    let run = || {
        let mut m = model(cfg.clone());
        (0..10).map(|_| train_step(&mut m, &b).unwrap().loss.to_bits()).collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn small_steps_do_not_increase_loss() {
    let cfg = DapeConfig { learning_rate: 1e-3, k0: 0.5, k_c: 0.5, k_thr: 0.6, ..small() };
    let b = batch(&cfg, 3, 11);
    let mut m = model(cfg);
    let mut prev = f64::INFINITY;
    for _ in 0..20 {
        let loss = train_step(&mut m, &b).unwrap().loss;
        assert!(loss <= prev + 1e-12, "{loss} > {prev}");
        prev = loss;
    }
}

/// Params in store order followed by the temperature.
fn flat_params(m: &DapeModel<f64>) -> Vec<Tensor<f64>> {
    let mut p: Vec<Tensor<f64>> = (0..m.store.len()).map(|i| m.store.get(i).clone()).collect();
    p.push(Tensor::scalar(m.temperature));
    p
}

fn frozen_loss(m: &DapeModel<f64>, b: &Batch<f64>) -> impl Fn(&mut Tape<f64>, &[Var]) -> dape_core::Result<Var> {
    let mut tape = Tape::new();
    let (w, _) = m.bind(&mut tape);
    let tau = tape.param(Tensor::scalar(m.temperature));
    let mut rec = Decisions::record();
    batch_loss_on_tape(&mut tape, &m.config, &w, tau, b, &mut rec).unwrap();
    let log = rec.into_log();
    let (weights, cfg, b) = (m.weights.clone(), m.config.clone(), b.clone());
    move |t: &mut Tape<f64>, p: &[Var]| {
        let w = weights.map(&mut |&i| p[i]);
        batch_loss_on_tape(t, &cfg, &w, p[p.len() - 1], &b, &mut Decisions::replay(log.clone()))
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for cfg in [tiny(), DapeConfig { nfa_merge: NfaMerge::PoolAdd, mask_mode: dape_core::attention::MaskMode::PreSoftmax, ..tiny() }] {
        let m = model(cfg.clone());
        let b = batch(&cfg, 2, 12);
        let rep = grad_check(&flat_params(&m), frozen_loss(&m, &b), &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
        assert!((rep.tape_norm - rep.fd_norm).abs() <= 1e-3 * rep.fd_norm, "{rep:?}");
        assert!(rep.tape_norm > 0.0);
    }
}

#[test]
fn per_pair_backward_equals_single_tape_gradient() {
    let cfg = tiny();
    let m = model(cfg.clone());
    let b = batch(&cfg, 3, 13);
    let phased = batch_gradients(&m, &b).unwrap();
    let mut tape = Tape::new();
    let (w, vars) = m.bind(&mut tape);
    let tau = tape.param(Tensor::scalar(m.temperature));
    let loss = batch_loss_on_tape(&mut tape, &cfg, &w, tau, &b, &mut Decisions::live()).unwrap();
    assert!((tape.value(loss).data()[0] - phased.loss).abs() < 1e-12);
    let g = tape.backward(loss).unwrap();
    for (k, &v) in vars.iter().enumerate() {
        let whole = g.get_or_zeros(v, m.store.get(k));
        assert!(whole.max_abs_diff(&phased.params[k]) < 1e-10, "{}", m.store.names()[k]);
    }
    let dtau = g.get(tau).unwrap().data()[0];
    assert!((dtau * m.temperature - phased.log_temperature).abs() < 1e-10);
}

#[test]
fn gate_parameters_receive_no_gradient() {
    let cfg = tiny();
    let m = model(cfg.clone());
    let g = batch_gradients(&m, &batch(&cfg, 2, 14)).unwrap();
    for (k, name) in m.store.names().iter().enumerate() {
        let zero = g.params[k].max_abs() == 0.0;
        if name.contains(".gate.") || name.starts_with("nfa.branch") {
            assert!(zero, "{name}");
        }
    }
    assert!(g.params[m.weights.in_img].max_abs() > 0.0);
}

#[test]
fn carried_detail_depends_on_earlier_text_update() {
    let cfg = DapeConfig { n_layers: 4, phi_period: 2, ..small() };
    let m = model(cfg.clone());
    let b = batch(&cfg, 2, 15);
    let run = |m: &DapeModel<f64>| {
        let mut tape = Tape::new();
        let w = m.bind_frozen(&mut tape);
        let out = forward_pair(&mut tape, &cfg, &w, &b.images[0], &b.texts[0], &mut Decisions::live()).unwrap();
        tape.value(out.img_emb).clone()
    };
    let base = run(&m);
    let mut moved = m.clone();
    let k = moved.store.index_of("layer2.txt.v").unwrap();
    moved.store.get_mut(k).data_mut()[0] += 0.5;
    assert!(run(&moved).max_abs_diff(&base) > 0.0);
}

#[test]
fn invalid_shapes_and_configs_are_rejected() {
    let cfg = small();
    let m = model(cfg.clone());
    let b = batch(&tiny(), 2, 16);
    assert!(matches!(m.pair(&b.images[0], &b.texts[0]), Err(DapeError::Dimension { .. })));
    assert!(matches!(DapeModel::<f64>::new(DapeConfig { k0: 2.0, ..cfg }), Err(DapeError::Config(_))));
    assert!(Batch::new(vec![b.images[0].clone()], vec![b.texts[0].clone()]).is_err());
}
