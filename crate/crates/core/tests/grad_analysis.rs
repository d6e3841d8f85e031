use std::sync::Arc;

use default_moe::grad::{
    cosine_to_dense, dense_router_gradient, gradsim_seed, model_gradcheck, router_gradient_error,
    router_gradients, similarity_sweep, FdOptions, GradsimPhase, GradsimSettings, Stencil,
};
use default_moe::moe::{DefaultApply, DefaultVectorBank, EmaPolicy, ForwardOptions, RoutingMode};
use default_moe::tensor::{Graph, Tensor};
use default_moe::train::{
    sample_batch, Batch, Corpus, LanguageModel, ModelConfig, ModelForwardOptions, RunConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(n: usize, k: usize) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.layers = 3;
    c.max_seq_len = 16;
    c.moe.num_experts = n;
    c.moe.top_k = k;
    c.moe.hidden = 8;
    c.moe.intermediate = 12;
    c.init_std = 0.3;
    c
}

fn batch(seed: u64, bs: usize, seq: usize, vocab: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..400).map(|_| rng.random_range(0..vocab)).collect();
    sample_batch(&tokens, &vec![0; tokens.len()], bs, seq, seed, 0).unwrap()
}

/// Fills every default vector with random values so default mode differs
/// from Top-K.
fn randomize_banks(m: &mut LanguageModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for bank in m.banks.iter_mut().flatten() {
        for i in 0..bank.num_experts() {
            let v: Vec<f64> = (0..bank.hidden())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            bank.set_vector(i, &v);
        }
    }
}

#[test]
fn small_models_pass_finite_differences() {
    let cases = [
        (4, 1, true, DefaultApply::ForwardAndBackward),
        (4, 2, false, DefaultApply::ForwardAndBackward),
        (3, 1, true, DefaultApply::BackwardOnly),
    ];
    for (seed, &(n, k, first_dense, apply)) in cases.iter().enumerate() {
        let mut c = config(n, k);
        c.first_layer_dense = first_dense;
        c.moe.default_vectors.apply = apply;
        c.seed = seed as u64;
        let mut m = LanguageModel::<f64>::new(&c, 11).unwrap();
        randomize_banks(&mut m, 7);
        let b = batch(seed as u64, 2, 6, 11);
        for mode in [RoutingMode::TopK, RoutingMode::Dense, RoutingMode::Default] {
            if apply == DefaultApply::BackwardOnly && mode == RoutingMode::Default {
                // The surrogate backward is not the derivative of the forward.
                continue;
            }
            // init_std 0.3 makes the loss curvier than the defaults, so a
            // smaller step keeps truncation error down.
            let opts = FdOptions {
                step: 1e-3,
                ..Default::default()
            };
            let r = model_gradcheck(&m, &b, mode, &opts).unwrap();
            assert!(r.max_rel_err < 1e-4, "{n}c{k} {mode}: {:?}", r.worst());
            assert_eq!(r.blocks.len(), m.params.len());
        }
    }
}

#[test]
fn gradcheck_catches_a_broken_backward() {
    // Backward-only default mode uses a dense-style router gradient with a
    // Top-K forward, so finite differences of the forward must disagree.
    let mut c = config(4, 1);
    c.moe.default_vectors.apply = DefaultApply::BackwardOnly;
    let mut m = LanguageModel::<f64>::new(&c, 11).unwrap();
    randomize_banks(&mut m, 3);
    let r = model_gradcheck(
        &m,
        &batch(5, 2, 6, 11),
        RoutingMode::Default,
        &FdOptions::default(),
    )
    .unwrap();
    let router = r
        .blocks
        .iter()
        .filter(|b| b.name.contains("router"))
        .map(|b| b.result.max_rel_err);
    assert!(router.fold(0.0, f64::max) > 1e-2);
}

#[test]
fn three_point_stencil_also_agrees_on_small_models() {
    let m = LanguageModel::<f64>::new(&config(4, 1), 11).unwrap();
    let opts = FdOptions {
        step: 1e-5,
        stencil: Stencil::ThreePoint,
        ..Default::default()
    };
    let r = model_gradcheck(&m, &batch(1, 2, 5, 11), RoutingMode::Dense, &opts).unwrap();
    assert!(r.max_rel_err < 1e-4, "{:?}", r.worst());
}

#[test]
fn every_mode_matches_dense_when_k_equals_n() {
    let mut m = LanguageModel::<f64>::new(&config(4, 4), 13).unwrap();
    randomize_banks(&mut m, 1);
    let b = batch(2, 2, 8, 13);
    for mode in [RoutingMode::TopK, RoutingMode::Default, RoutingMode::Dense] {
        for c in router_gradient_error(&m, &b, mode, None).unwrap() {
            assert_eq!(c.eps_norm, 0.0, "{mode} layer {}", c.layer);
            assert_eq!(c.cosine, Some(1.0));
        }
    }
}

#[test]
fn perfect_default_vectors_give_the_dense_gradient_at_the_last_layer() {
    let mut m = LanguageModel::<f64>::new(&config(5, 1), 13).unwrap();
    let single = batch(4, 1, 1, 13);
    let opts = ModelForwardOptions {
        mode: Some(RoutingMode::Dense),
        ema: EmaPolicy::Frozen,
        capture_outputs: true,
        ..Default::default()
    };
    let (_, _, _, out) = m.loss_and_grads(&single, &opts).unwrap();
    for (l, layer) in out.moe.iter().enumerate() {
        let Some(layer) = layer else { continue };
        let captured = layer.captured.as_ref().unwrap();
        let bank = m.banks[l].as_mut().unwrap();
        for (i, e) in captured.iter().enumerate() {
            bank.set_vector(i, e.as_ref().unwrap().outputs.row(0));
        }
    }
    let cmp = router_gradient_error(&m, &single, RoutingMode::Default, None).unwrap();
    assert_eq!(cmp.len(), 2);
    // Earlier layers see an upstream gradient without the unselected experts'
    // input Jacobians, so only the last MoE layer is exact.
    let last = cmp.last().unwrap();
    assert_eq!(last.eps_norm, 0.0);
    assert_eq!(last.cosine, Some(1.0));
    assert!(cmp[0].eps_norm > 0.0);
    for c in router_gradient_error(&m, &single, RoutingMode::TopK, None).unwrap() {
        assert!(c.eps_norm > 0.0);
    }
}

#[test]
fn perfect_default_vectors_give_the_dense_gradient_in_every_layer() {
    let m = LanguageModel::<f64>::new(&config(6, 2), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (_, layer) in m.moe_layers() {
        let d = layer.config.hidden;
        let x = Tensor::randn(vec![1, d], 1.0, &mut rng);
        let upstream = Tensor::randn(vec![1, d], 1.0, &mut rng);
        let run = |mode, bank: Option<&mut DefaultVectorBank<f64>>, capture| {
            let mut g = Graph::new();
            let b = m.params.bind(&mut g);
            let xv = g.constant(x.clone());
            let opts = ForwardOptions {
                mode: Some(mode),
                ema: EmaPolicy::Frozen,
                capture_outputs: capture,
                ..Default::default()
            };
            let out = layer.forward(&mut g, &b, xv, bank, &opts).unwrap();
            let p = g.constant(upstream.clone());
            let prod = g.mul(out.y, p).unwrap();
            let loss = g.sum(prod);
            g.backward(loss).unwrap();
            let grad = g.grad(b.var(layer.router.weight)).unwrap().clone();
            (grad, out.captured)
        };
        let (dense, captured) = run(RoutingMode::Dense, None, true);
        let mut bank = layer.new_bank(&mut rng);
        for (i, e) in captured.unwrap().iter().enumerate() {
            bank.set_vector(i, e.as_ref().unwrap().outputs.row(0));
        }
        let (default, _) = run(RoutingMode::Default, Some(&mut bank), false);
        assert_eq!(default, dense);
        let (topk, _) = run(RoutingMode::TopK, None, false);
        assert_ne!(topk, dense);
    }
}

#[test]
fn topk_router_gradient_ignores_default_vectors() {
    let mut m = LanguageModel::<f64>::new(&config(4, 1), 13).unwrap();
    let b = batch(6, 2, 8, 13);
    let before = router_gradients(&m, &b, RoutingMode::TopK, None, None).unwrap();
    randomize_banks(&mut m, 9);
    let after = router_gradients(&m, &b, RoutingMode::TopK, None, None).unwrap();
    assert_eq!(before.grads, after.grads);
    let default = router_gradients(&m, &b, RoutingMode::Default, None, None).unwrap();
    assert_ne!(default.grads, after.grads);
}

#[test]
fn analysis_leaves_the_model_untouched() {
    let mut m = LanguageModel::<f64>::new(&config(4, 1), 13).unwrap();
    randomize_banks(&mut m, 2);
    let snapshot = m.clone();
    let b = batch(7, 2, 8, 13);
    router_gradient_error(&m, &b, RoutingMode::Default, Some(2)).unwrap();
    dense_router_gradient(&m, &b, None).unwrap();
    similarity_sweep(&m, &[b], &[RoutingMode::Default], &[1], 0).unwrap();
    assert_eq!(m, snapshot);
}

#[test]
fn router_gradients_sum_to_zero_over_experts() {
    // Softmax rows are invariant to a shared logit shift, so each column of the
    // router gradient sums to zero across experts.
    for (n, k) in [(2, 1), (5, 2)] {
        let mut m = LanguageModel::<f64>::new(&config(n, k), 13).unwrap();
        randomize_banks(&mut m, 4);
        let b = batch(8, 2, 6, 13);
        for mode in [RoutingMode::TopK, RoutingMode::Dense, RoutingMode::Default] {
            let g = router_gradients(&m, &b, mode, None, None).unwrap();
            for w in g.grads.iter().flatten() {
                let (rows, cols) = (w.shape()[0], w.shape()[1]);
                assert_eq!(rows, n);
                let scale = w.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
                for c in 0..cols {
                    let s: f64 = (0..rows).map(|r| w.data()[r * cols + c]).sum();
                    assert!(s.abs() <= 1e-14 * (1.0 + scale), "{mode} {n}c{k}: {s}");
                }
            }
        }
    }
}

#[test]
fn cosine_to_dense_is_one_for_dense() {
    let m = LanguageModel::<f64>::new(&config(4, 1), 13).unwrap();
    let cos = cosine_to_dense(&m, &batch(9, 2, 8, 13), RoutingMode::Dense, None).unwrap();
    assert_eq!(cos, vec![1.0, 1.0]);
}

#[test]
fn sweep_rows_cover_every_layer_k_and_mode() {
    let m = LanguageModel::<f64>::new(&config(4, 1), 13).unwrap();
    let batches: Vec<Batch> = (0..3).map(|s| batch(s, 1, 8, 13)).collect();
    let modes = [RoutingMode::TopK, RoutingMode::Default];
    let rep = similarity_sweep(&m, &batches, &modes, &[1, 2, 4], 5).unwrap();
    assert_eq!(rep.rows.len(), 2 * 3 * 2);
    assert!(rep.rows.iter().all(|r| r.samples == 3 && r.seed == 5));
    for mode in modes {
        let (cos, eps) = rep.mode_means(mode, 4).unwrap();
        assert_eq!((cos, eps), (1.0, 0.0));
        let (c1, _) = rep.mode_means(mode, 1).unwrap();
        assert!(c1 < 1.0);
    }
}

#[test]
fn gradsim_phases_are_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let text: Vec<u8> = (0..3000)
        .map(|_| b"abcdefgh "[rng.random_range(0..9)])
        .collect();
    let corpus = Arc::new(Corpus::from_sources(&[("t".into(), text)], 0.9).unwrap());
    let mut cfg = RunConfig::default();
    cfg.model = config(4, 1);
    cfg.train.seq_len = 8;
    cfg.train.batch_size = 2;
    cfg.train.eval_windows = 4;
    let s = GradsimSettings {
        modes: vec![RoutingMode::TopK, RoutingMode::Default],
        ks: vec![1],
        warmup_steps: 3,
        absorb_batches: 2,
        batches: 2,
        batch_size: 1,
    };
    let a = gradsim_seed::<f64>(&cfg, Arc::clone(&corpus), 1, &s).unwrap();
    let b = gradsim_seed::<f64>(&cfg, Arc::clone(&corpus), 1, &s).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.iter().map(|p| p.0).collect::<Vec<_>>(),
        [GradsimPhase::Init, GradsimPhase::Trained]
    );
    let no_training = GradsimSettings {
        warmup_steps: 0,
        ..s
    };
    assert_eq!(
        gradsim_seed::<f32>(&cfg, corpus, 1, &no_training)
            .unwrap()
            .len(),
        1
    );
}
