use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, sample_coords, Graph};
use crate::corpus::{CLS_ID, PAD_ID};

fn tiny(generator: GeneratorMode) -> ModelConfig {
    let encoder = EncoderConfig { layers: 2, heads: 2, hidden: 16, feedforward: 32, embed_dim: 8, max_positions: 12, vocab_size: 30 };
    let mut cfg = ModelConfig::new(encoder, 4);
    cfg.generator = generator;
    cfg.generator_feedforward = 16;
    cfg
}

fn sequence(rng: &mut ChaCha8Rng, t_max: usize, live: usize, vocab: usize) -> Vec<usize> {
    let mut ids = vec![PAD_ID; t_max];
    ids[0] = CLS_ID;
    for id in ids.iter_mut().take(live).skip(1) {
        *id = rng.gen_range(NUM_SPECIAL..vocab);
    }
    ids
}

fn rows(values: &[f64], cols: usize, n: usize) -> Vec<f64> {
    values[..n * cols].to_vec()
}

#[test]
fn changing_padding_ids_leaves_content_untouched() {
    let model = DateModel::<f64>::new(tiny(GeneratorMode::Random), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ids = sequence(&mut rng, 12, 7, 30);
    let mut other = ids.clone();
    for id in other.iter_mut().skip(7) {
        *id = rng.gen_range(NUM_SPECIAL..30);
    }
    let mut g = Graph::new(&model.params);
    let a = model.discriminate_padded(&mut g, &ids, 7).unwrap();
    let b = model.discriminate_padded(&mut g, &other, 7).unwrap();
    assert_eq!(rows(g.value(a.hidden), 16, 7), rows(g.value(b.hidden), 16, 7));
    assert_eq!(g.value(a.rmd_logits), g.value(b.rmd_logits));
}

#[test]
fn live_prefix_matches_padded_pass() {
    let model = DateModel::<f64>::new(tiny(GeneratorMode::Random), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids = sequence(&mut rng, 12, 5, 30);
    let mut g = Graph::new(&model.params);
    let full = model.discriminate_padded(&mut g, &ids, 5).unwrap();
    let live = model.discriminate(&mut g, &ids, 5).unwrap();
    assert_eq!(g.shape(full.rtd_logits), (12, 2));
    assert_eq!(g.shape(live.rtd_logits), (5, 2));
    for (x, y) in rows(g.value(full.rtd_logits), 2, 5).iter().zip(g.value(live.rtd_logits)) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in g.value(full.rmd_logits).iter().zip(g.value(live.rmd_logits)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn permuting_content_tokens_changes_their_vectors() {
    let model = DateModel::<f64>::new(tiny(GeneratorMode::Random), 5).unwrap();
    let ids = vec![CLS_ID, 10, 11, 12, PAD_ID];
    let swapped = vec![CLS_ID, 11, 10, 12, PAD_ID];
    let mut g = Graph::new(&model.params);
    let a = model.discriminate(&mut g, &ids, 4).unwrap();
    let b = model.discriminate(&mut g, &swapped, 4).unwrap();
    // token 10 at position 1 vs token 10 at position 2
    let ha = &g.value(a.hidden)[16..32];
    let hb = &g.value(b.hidden)[32..48];
    assert!(ha.iter().zip(hb).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn single_token_input_is_finite() {
    let model = DateModel::<f32>::new(tiny(GeneratorMode::Random), 6).unwrap();
    let inf = model.infer(&[CLS_ID, PAD_ID, PAD_ID], 1).unwrap();
    assert_eq!(inf.p_m.len(), 4);
    assert_eq!(inf.p_original.len(), 1);
    assert!(inf.p_m.iter().chain(&inf.p_original).all(|p| p.is_finite()));
}

#[test]
fn untrained_heads_are_near_uniform() {
    let model = DateModel::<f32>::new(tiny(GeneratorMode::Random), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids = sequence(&mut rng, 12, 9, 30);
    let inf = model.infer(&ids, 9).unwrap();
    assert!((inf.p_m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for p in &inf.p_m {
        assert!((p - 0.25).abs() < 0.05, "{p}");
    }
    for p in &inf.p_original {
        assert!((p - 0.5).abs() < 0.05, "{p}");
    }
}

#[test]
fn probability_helpers() {
    assert_eq!(rmd_probs(&[0.0f64; 5]), vec![0.2; 5]);
    let mut logits = vec![0.0f64; 50];
    logits[0] = 10.0;
    // e^10 / (e^10 + 49)
    let top = rmd_probs(&logits)[0];
    assert!((top - 10f64.exp() / (10f64.exp() + 49.0)).abs() < 1e-12);
    assert!(top > 0.997);
    assert_eq!(rmd_probs(&logits).len(), 50);

    for [a, b] in rtd_probs(&[0.0f64, 0.0, 3.0, -1.0]) {
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    let vocab = 9;
    let logits: Vec<f64> = (0..2 * vocab).map(|i| (i % 5) as f64 * 0.3).collect();
    let full = generator_probs(&logits, vocab, false);
    let words = generator_probs(&logits, vocab, true);
    for (f, w) in full.chunks(vocab).zip(words.chunks(vocab)) {
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(w[..NUM_SPECIAL].iter().all(|&p| p == 0.0));
        // renormalizing keeps the ratios among words
        let z: f64 = f[NUM_SPECIAL..].iter().sum();
        for (fi, wi) in f[NUM_SPECIAL..].iter().zip(&w[NUM_SPECIAL..]) {
            assert!((fi / z - wi).abs() < 1e-12);
        }
    }
}

#[test]
fn generator_width_follows_mode() {
    for (mode, width) in [(GeneratorMode::Small, 16), (GeneratorMode::Large, 64)] {
        let model = DateModel::<f32>::new(tiny(mode), 9).unwrap();
        let out = model.params.id("generator.output.weight").unwrap();
        assert_eq!(model.params.get(out).shape(), &[width, 30]);
        let mut g = Graph::new(&model.params);
        let logits = model.generate(&mut g, &[CLS_ID, 1, 5, PAD_ID], 3).unwrap();
        assert_eq!(g.shape(logits), (3, 30));
        // the generator reuses the discriminator's embedding tables
        assert!(model.params.id("generator.embeddings.token").is_none());
    }
    let model = DateModel::<f32>::new(tiny(GeneratorMode::Random), 9).unwrap();
    let mut g = Graph::new(&model.params);
    assert_eq!(model.generate(&mut g, &[CLS_ID, 5], 2).unwrap_err(), ModelError::NoGenerator);
}

#[test]
fn rejects_bad_inputs_and_configs() {
    let model = DateModel::<f32>::new(tiny(GeneratorMode::Random), 10).unwrap();
    let mut g = Graph::new(&model.params);
    let long = vec![CLS_ID; 13];
    assert!(matches!(model.discriminate(&mut g, &long, 3), Err(ModelError::SequenceTooLong { len: 13, max: 12 })));
    assert!(matches!(model.discriminate(&mut g, &[CLS_ID, 5], 0), Err(ModelError::AttentionLen { .. })));

    let mut cfg = tiny(GeneratorMode::Random);
    cfg.encoder.heads = 3;
    assert!(matches!(DateModel::<f32>::new(cfg, 0), Err(ModelError::Config(_))));
}

#[test]
fn padding_embeddings_get_zero_gradient() {
    let model = DateModel::<f64>::new(tiny(GeneratorMode::Random), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ids = sequence(&mut rng, 12, 6, 30);
    let mut g = Graph::new(&model.params);
    let out = model.discriminate_padded(&mut g, &ids, 6).unwrap();
    let targets: Vec<Option<usize>> = (0..12).map(|i| (1..6).contains(&i).then_some(i % 2)).collect();
    let rtd = g.cross_entropy(out.rtd_logits, &targets).unwrap();
    let rmd = g.cross_entropy(out.rmd_logits, &[Some(2)]).unwrap();
    let loss = g.weighted_sum(&[(rtd, 1.0), (rmd, 1.0)]).unwrap();
    let grads = g.backward(loss).unwrap();
    let pos = model.params.id("embeddings.position").unwrap();
    let gp = grads.get(pos).unwrap();
    assert!(gp[6 * 8..].iter().all(|&v| v == 0.0), "padding positions received gradient");
    assert!(gp[..6 * 8].iter().any(|&v| v != 0.0));
    // the [PAD] row of the token table is only touched through padding
    let tok = model.params.id("embeddings.token").unwrap();
    let gt = grads.get(tok).unwrap();
    assert!(gt[PAD_ID * 8..(PAD_ID + 1) * 8].iter().all(|&v| v == 0.0));
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    // wider init so no sampled gradient sits at round-off level
    let mut cfg = tiny(GeneratorMode::Small);
    cfg.init_std = 0.3;
    let mut model = DateModel::<f64>::new(cfg, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ids = sequence(&mut rng, 12, 9, 30);
    let coords = sample_coords(&model.params, 120, &mut rng);
    let shape = model.clone();
    let report = grad_check(
        &mut model.params,
        |g| {
            let out = shape.discriminate(g, &ids, 9).map_err(unwrap_autodiff)?;
            let targets: Vec<Option<usize>> = (0..9).map(|i| (i > 0).then_some(i % 2)).collect();
            let rtd = g.cross_entropy(out.rtd_logits, &targets)?;
            let rmd = g.cross_entropy(out.rmd_logits, &[Some(1)])?;
            let gen = shape.generate(g, &ids, 9).map_err(unwrap_autodiff)?;
            let mlm = g.cross_entropy(gen, &[None, Some(7), None, Some(9), None, None, None, None, None])?;
            g.weighted_sum(&[(rmd, 3.0), (mlm, 1.0), (rtd, 2.0)])
        },
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn unwrap_autodiff(e: ModelError) -> crate::autodiff::AutodiffError {
    match e {
        ModelError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

#[test]
fn checkpoint_round_trip_is_exact_and_deterministic() {
    use crate::corpus::Vocab;
    use crate::maskpat::gen_patterns;

    let model = DateModel::<f32>::new(tiny(GeneratorMode::Small), 15).unwrap();
    let vocab = Vocab::from_words((0..26).map(|i| format!("w{i:02}")));
    let patterns = gen_patterns(12, 0.25, 4, 1).unwrap();
    let ck = Checkpoint { config_hash: "abc".into(), model, vocab, patterns, extra: serde_json::json!({"step": 3}) };
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(bytes, ck.to_bytes().unwrap());
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);

    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.config_hash, "abc");
    assert_eq!(back.patterns, ck.patterns);
    for ((_, n1, t1), (_, n2, t2)) in back.model.params.iter().zip(ck.model.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.values(), t2.values());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(checkpoint_hash(&std::fs::read(&path).unwrap()), checkpoint_hash(&bytes));

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(Checkpoint::<f32>::from_bytes(&corrupt).is_err());
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 4]).is_err());
}

#[test]
fn forward_counter_counts_discriminator_passes() {
    let model = DateModel::<f32>::new(tiny(GeneratorMode::Small), 16).unwrap();
    model.reset_forward_count();
    let ids = [CLS_ID, 7, 8, PAD_ID];
    model.infer(&ids, 3).unwrap();
    model.infer(&ids, 3).unwrap();
    let mut g = Graph::new(&model.params);
    model.generate(&mut g, &ids, 3).unwrap();
    assert_eq!(model.forward_count(), 2);
}
