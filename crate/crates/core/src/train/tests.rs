use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, sample_coords, AutodiffError};
use crate::corpus::{build_vocab, encode_document};
use crate::maskpat::gen_patterns;
use crate::model::{EncoderConfig, GeneratorMode, ModelConfig};
use crate::synthdata::SynthConfig;

fn corpus(t_max: usize, docs: usize) -> (Vec<TokenSequence>, usize) {
    let cfg = SynthConfig { docs_per_topic: docs, words_per_topic: 40, background_words: 10, min_len: 4, max_len: 30, ..Default::default() };
    let docs = cfg.generate(5).unwrap();
    let vocab = build_vocab(&docs, 1, 1000).unwrap();
    (docs.iter().map(|d| encode_document(d, &vocab, t_max)).collect(), vocab.len())
}

fn tiny(vocab: usize, t_max: usize, k: usize, generator: GeneratorMode) -> ModelConfig {
    let encoder = EncoderConfig { layers: 1, heads: 2, hidden: 16, feedforward: 32, embed_dim: 8, max_positions: t_max, vocab_size: vocab };
    let mut cfg = ModelConfig::new(encoder, k);
    cfg.generator = generator;
    cfg.generator_feedforward = 16;
    cfg
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig { lr: 1e-3, warmup_steps: 5, batch_size: 4, max_steps: steps, ..Default::default() }
}

#[test]
fn rmd_loss_oracles() {
    assert_abs_diff_eq!(loss_rmd(&[0.0, 1.0, 0.0], 1), 0.0);
    assert_abs_diff_eq!(loss_rmd(&vec![0.02; 50], 7), 50f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(loss_rmd(&[0.5, 0.25, 0.25], 0), 2f64.ln(), epsilon = 1e-12);
    assert!(loss_rmd(&[1.0, 0.0], 1).is_finite());
    assert_abs_diff_eq!(loss_rmd_batch(&[vec![0.5, 0.5], vec![1.0, 0.0]], &[0, 0]), 2f64.ln() / 2.0, epsilon = 1e-12);
}

#[test]
fn rtd_loss_oracles() {
    // position 0 is [CLS], positions past attention_len are padding
    let perfect = [[0.3, 0.7], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
    assert_abs_diff_eq!(loss_rtd(&perfect, &[0, 0, 1, 0], 3).unwrap(), 0.0);
    let uniform = [[0.5, 0.5]; 6];
    assert_abs_diff_eq!(loss_rtd(&uniform, &[0, 1, 0, 1, 0, 0], 6).unwrap(), 2f64.ln(), epsilon = 1e-12);
    let p = [[0.1, 0.9], [0.9, 0.1], [0.1, 0.9], [0.9, 0.1], [0.5, 0.5], [0.0, 1.0]];
    let got = loss_rtd(&p, &[0, 0, 1, 0, 1, 0], 5).unwrap();
    assert_abs_diff_eq!(got, -(3.0 * 0.9f64.ln() + 0.5f64.ln()) / 4.0, epsilon = 1e-12);
    assert_abs_diff_eq!(got, 0.2523, epsilon = 1e-4);
    assert_eq!(loss_rtd(&p, &[0; 6], 1).unwrap_err(), TrainError::NoContent);
}

#[test]
fn mlm_loss_oracles() {
    let v = 4;
    let mut p = vec![0.25; 3 * v];
    p[v + 2] = 0.25;
    p[2 * v..3 * v].copy_from_slice(&[0.5, 0.2, 0.2, 0.1]);
    let got = loss_mlm(&p, v, &[0, 2, 0], &[1, 2]).unwrap();
    assert_abs_diff_eq!(got, (4f64.ln() + 2f64.ln()) / 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(got, 1.0397, epsilon = 1e-4);
    assert_abs_diff_eq!(loss_mlm(&p, v, &[0, 2, 0], &[1]).unwrap(), 4f64.ln(), epsilon = 1e-12);
    let one_hot = [0.0, 1.0, 0.0, 0.0];
    assert_abs_diff_eq!(loss_mlm(&one_hot, v, &[1], &[0]).unwrap(), 0.0);
    assert_eq!(loss_mlm(&p, v, &[0, 2, 0], &[]).unwrap_err(), TrainError::EmptyMask);
}

#[test]
fn graph_losses_match_reference_losses() {
    let (docs, v) = corpus(16, 10);
    let patterns = gen_patterns(16, 0.3, 6, 1).unwrap();
    let model = DateModel::<f64>::new(tiny(v, 16, 6, GeneratorMode::Small), 2).unwrap();
    let x = &docs[3];
    let mut g = Graph::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = date_loss(&model, &mut g, x, &patterns, 2, 50.0, 100.0, &mut rng).unwrap();

    let c = &loss.corrupted;
    let inf = model.infer(&c.ids, x.attention_len).unwrap();
    assert_abs_diff_eq!(g.scalar(loss.rmd), loss_rmd(&inf.p_m, 2), epsilon = 1e-10);
    let p_d: Vec<[f64; 2]> = inf.p_original.iter().map(|&p| [p, 1.0 - p]).collect();
    assert_abs_diff_eq!(g.scalar(loss.rtd), loss_rtd(&p_d, &c.rtd_targets, x.attention_len).unwrap(), epsilon = 1e-10);

    let mut g2 = Graph::new(&model.params);
    let masked = apply_mask(x, patterns.get(2)).unwrap();
    let logits = model.generate(&mut g2, &masked.ids, x.attention_len).unwrap();
    let probs = generator_probs(g2.value(logits), v, false);
    let positions: Vec<usize> = (1..x.attention_len).filter(|&i| patterns.get(2).is_masked(i)).collect();
    let expected = loss_mlm(&probs, v, &x.ids, &positions).unwrap();
    assert_abs_diff_eq!(g.scalar(loss.mlm.unwrap()), expected, epsilon = 1e-10);

    let total = 100.0 * g.scalar(loss.rmd) + 50.0 * g.scalar(loss.rtd) + expected;
    assert_abs_diff_eq!(g.scalar(loss.total), total, epsilon = 1e-8);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (docs, v) = corpus(16, 20);
    let patterns = gen_patterns(16, 0.3, 6, 1).unwrap();
    let run = || {
        let mut model = DateModel::<f32>::new(tiny(v, 16, 6, GeneratorMode::Small), 3).unwrap();
        let log = fit(&mut model, &docs, &patterns, &quick(6), None, |_, _| {}).unwrap();
        (log, model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    for ((_, _, x), (_, _, y)) in pa.iter().zip(pb.iter()) {
        assert_eq!(x.values(), y.values());
    }
    let mut other = quick(6);
    other.seed = 1;
    let mut model = DateModel::<f32>::new(tiny(v, 16, 6, GeneratorMode::Small), 3).unwrap();
    let c = fit(&mut model, &docs, &patterns, &other, None, |_, _| {}).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let (docs, v) = corpus(16, 10);
    let patterns = gen_patterns(16, 0.3, 6, 1).unwrap();
    let mut model = DateModel::<f64>::new(tiny(v, 16, 6, GeneratorMode::Random), 4).unwrap();
    let before = model.clone();
    let cfg = TrainConfig { lambda_rtd: 0.0, mu_rmd: 0.0, ..quick(3) };
    let log = fit(&mut model, &docs, &patterns, &cfg, None, |_, _| {}).unwrap();
    for e in &log {
        assert_eq!(e.l_total, 0.0);
        assert_eq!(e.grad_norm, 0.0);
    }
    for ((_, _, x), (_, _, y)) in model.params.iter().zip(before.params.iter()) {
        assert_eq!(x.values(), y.values());
    }
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let (docs, v) = corpus(16, 10);
    let patterns = gen_patterns(16, 0.3, 6, 1).unwrap();
    for mode in [GeneratorMode::Random, GeneratorMode::Small] {
        let mut model = DateModel::<f32>::new(tiny(v, 16, 6, mode), 5).unwrap();
        let log = fit(&mut model, &docs, &patterns, &quick(4), None, |_, _| {}).unwrap();
        assert_eq!(log.len(), 4);
        for e in &log {
            assert!(e.identity_gap() < 1e-5, "{e:?}");
            assert_eq!(e.l_mlm == 0.0, mode == GeneratorMode::Random);
        }
    }
}

#[test]
fn zero_steps_returns_the_initial_model() {
    let (docs, v) = corpus(16, 5);
    let patterns = gen_patterns(16, 0.3, 6, 1).unwrap();
    let mut model = DateModel::<f32>::new(tiny(v, 16, 6, GeneratorMode::Random), 6).unwrap();
    let before = model.clone();
    let log = fit(&mut model, &docs, &patterns, &quick(0), None, |_, _| {}).unwrap();
    assert!(log.is_empty());
    for ((_, _, x), (_, _, y)) in model.params.iter().zip(before.params.iter()) {
        assert_eq!(x.values(), y.values());
    }
}

#[test]
fn single_objective_modes_train() {
    let (docs, v) = corpus(16, 10);
    let patterns = gen_patterns(16, 0.3, 6, 1).unwrap();
    for (lambda, mu) in [(50.0, 0.0), (0.0, 100.0)] {
        let mut model = DateModel::<f32>::new(tiny(v, 16, 6, GeneratorMode::Random), 7).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { lambda_rtd: lambda, mu_rmd: mu, ..quick(3) };
        let log = fit(&mut model, &docs, &patterns, &cfg, None, |_, _| {}).unwrap();
        assert!(log.iter().all(|e| e.l_total.is_finite() && e.grad_norm > 0.0));
        let moved = model.params.iter().zip(before.params.iter()).any(|((_, _, x), (_, _, y))| x.values() != y.values());
        assert!(moved);
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let (docs, v) = corpus(16, 3);
    let patterns = gen_patterns(16, 0.3, 5, 1).unwrap();
    let mut model = DateModel::<f32>::new(tiny(v, 16, 6, GeneratorMode::Random), 8).unwrap();
    let err = fit(&mut model, &docs, &patterns, &quick(1), None, |_, _| {}).unwrap_err();
    assert_eq!(err, TrainError::PatternCount { model: 6, patterns: 5 });
    let patterns = gen_patterns(16, 0.3, 6, 1).unwrap();
    assert_eq!(fit(&mut model, &[], &patterns, &quick(1), None, |_, _| {}).unwrap_err(), TrainError::EmptyTrainSet);
    let bad = TrainConfig { batch_size: 0, ..quick(1) };
    assert!(matches!(fit(&mut model, &docs, &patterns, &bad, None, |_, _| {}), Err(TrainError::Config(_))));
}

#[test]
fn warmup_is_linear_then_constant() {
    let cfg = TrainConfig { lr: 1e-3, warmup_steps: 4, ..Default::default() };
    let lrs: Vec<f64> = (0..6).map(|s| cfg.lr_at(s)).collect();
    for (got, want) in lrs.iter().zip([0.25e-3, 0.5e-3, 0.75e-3, 1e-3, 1e-3, 1e-3]) {
        assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
    }
}

fn as_autodiff(e: TrainError) -> AutodiffError {
    match e {
        TrainError::Model(crate::model::ModelError::Autodiff(a)) => a,
        other => panic!("{other}"),
    }
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let (docs, v) = corpus(12, 5);
    let patterns = gen_patterns(12, 0.4, 4, 2).unwrap();
    for mode in [GeneratorMode::Random, GeneratorMode::Small] {
        let mut cfg = tiny(v, 12, 4, mode);
        cfg.init_std = 0.3;
        let mut model = DateModel::<f64>::new(cfg, 9).unwrap();
        let shape = model.clone();
        let x = docs.iter().find(|d| d.attention_len >= 8).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let coords = sample_coords(&model.params, 60, &mut rng);
        let report = grad_check(
            &mut model.params,
            |g| {
                // same corruption draw at every evaluation
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                Ok(date_loss(&shape, g, &x, &patterns, 1, 2.0, 3.0, &mut rng).map_err(as_autodiff)?.total)
            },
            1e-4,
            &coords,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{mode:?}: {report:?}");
    }
}

#[test]
fn optimizer_skips_decay_for_biases_and_norms() {
    let (docs, v) = corpus(16, 5);
    let patterns = gen_patterns(16, 0.3, 6, 1).unwrap();
    let mut model = DateModel::<f64>::new(tiny(v, 16, 6, GeneratorMode::Random), 11).unwrap();
    // gradient with zeros everywhere but one tensor so only decay can move the rest
    let probe = model.params.id("rmd_head.out.weight").unwrap();
    let mut g = Graph::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = date_loss(&model, &mut g, &docs[0], &patterns, 0, 0.0, 1.0, &mut rng).unwrap();
    let full = g.backward(loss.total).unwrap();
    let mut grads = full.clone();
    for (id, _, _) in model.params.iter() {
        if id != probe {
            if let Some(g) = grads.get_mut(id) {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let before = model.clone();
    let mut opt = AdamW::new(&model.params, 0.9, 0.999, 1e-6, 0.1);
    opt.step(&mut model.params, &grads, 1e-2);
    for ((_, name, x), (_, _, y)) in model.params.iter().zip(before.params.iter()) {
        let changed = x.values() != y.values();
        let exempt = name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta");
        assert_eq!(changed, !exempt || name == "rmd_head.out.weight", "{name}");
        if !exempt && name != "rmd_head.out.weight" {
            // pure decay: w ← w (1 − lr·wd)
            for (a, b) in x.values().iter().zip(y.values()) {
                assert_abs_diff_eq!(*a, b * (1.0 - 1e-3), epsilon = 1e-15);
            }
        }
    }
    assert_eq!(opt.steps(), 1);
}

#[test]
fn rmd_loss_trends_down_on_synthetic_topics() {
    // documents fill the window; RMD sits on a plateau near ln K for the
    // first ~150 steps before it starts to fall
    let synth = SynthConfig { docs_per_topic: 100, words_per_topic: 40, background_words: 10, min_len: 30, max_len: 40, ..Default::default() };
    let raw = synth.generate(5).unwrap();
    let vocab = build_vocab(&raw, 1, 1000).unwrap();
    let docs: Vec<TokenSequence> = raw.iter().map(|d| encode_document(d, &vocab, 24)).collect();
    let patterns = gen_patterns(24, 0.25, 8, 3).unwrap();
    let encoder = EncoderConfig { layers: 2, heads: 4, hidden: 64, feedforward: 128, embed_dim: 32, max_positions: 24, vocab_size: vocab.len() };
    let mut model = DateModel::<f32>::new(ModelConfig::new(encoder, 8), 12).unwrap();
    let cfg = TrainConfig { lr: 1e-3, warmup_steps: 20, batch_size: 16, max_steps: 500, ..Default::default() };
    let log = fit(&mut model, &docs, &patterns, &cfg, None, |_, _| {}).unwrap();
    let mean = |s: &[LossBreakdown]| s.iter().map(|e| e.l_rmd).sum::<f64>() / s.len() as f64;
    let (first, all, last) = (mean(&log[..50]), mean(&log), mean(&log[450..]));
    assert!(all < first, "first 50: {first}, all 500: {all}");
    assert!(last < first - 0.05, "first 50: {first}, last 50: {last}");
}

