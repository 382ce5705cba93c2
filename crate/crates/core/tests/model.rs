mod common;

use common::{dense_encoder, dense_led_logits, max_abs_diff, tied_head, to_mat};
use longformer::autodiff::Graph;
use longformer::model::{
    beam_search, greedy_decode, mlm_corrupt, Architecture, BeamOptions, LayerSpec, Model, ModelConfig, BOS_ID,
    EOS_ID, MASK_ID,
};
use longformer::pattern::Window;
use longformer::{DType, Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn double(cfg: ModelConfig) -> ModelConfig {
    ModelConfig {
        dtype: DType::Double,
        ..cfg
    }
}

fn random_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..256)).collect()
}

#[test]
fn charlm_logits_never_see_the_future() {
    assert_eq!(common::charlm_causality_violations(1, 100), 0);
}

#[test]
fn charlm_future_tokens_do_change_later_rows() {
    let m = Model::<f64>::new(double(ModelConfig::charlm(1, 2, 16, 16, 2)), 3).unwrap();
    let tokens: Vec<usize> = (0..16).collect();
    let mut other = tokens.clone();
    other[5] = 200;
    let mut g = Graph::new();
    let a = m.charlm_logits(&mut g, &tokens, None).unwrap();
    let b = m.charlm_logits(&mut g, &other, None).unwrap();
    let (a, b) = (to_mat(g.value(a)), to_mat(g.value(b)));
    assert!(a[5] != b[5] && a[7] != b[7]);
    // one layer with h=2 stops at offset 2
    assert_eq!(a[8], b[8]);
}

#[test]
fn untrained_charlm_is_near_uniform() {
    let m = Model::<f64>::new(double(ModelConfig::charlm(2, 2, 32, 128, 8)), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = random_bytes(&mut rng, 129);
    let nll = m.charlm_nll(&seq[..128], &seq[1..]).unwrap();
    let bpc = nll.iter().sum::<f64>() / nll.len() as f64 / std::f64::consts::LN_2;
    assert!((bpc - 260f64.log2()).abs() < 0.5, "{bpc}");
}

#[test]
fn full_window_charlm_equals_dense_causal_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let n = rng.gen_range(1..=24);
        let cfg = ModelConfig {
            init_std: 0.2,
            ..double(ModelConfig::charlm(2, 4, 16, 24, 24))
        };
        let m = Model::<f64>::new(cfg, seed).unwrap();
        let tokens = random_bytes(&mut rng, n);
        let mut g = Graph::new();
        let logits = m.charlm_logits(&mut g, &tokens, None).unwrap();
        let expect = tied_head(&m, &dense_encoder(&m, &tokens, |i, j| j <= i));
        let diff = max_abs_diff(&to_mat(g.value(logits)), &expect);
        assert!(diff <= 1e-10, "n={n}: {diff}");
    }
}

#[test]
fn full_window_mlm_equals_dense_bidirectional_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let n = rng.gen_range(1..=20);
        let cfg = ModelConfig {
            init_std: 0.2,
            ..double(ModelConfig::mlm(2, 2, 16, 20, 20))
        };
        let m = Model::<f64>::new(cfg, seed).unwrap();
        let tokens = random_bytes(&mut rng, n);
        let mut g = Graph::new();
        let h = m.encode(&mut g, &tokens, None).unwrap();
        let diff = max_abs_diff(&to_mat(g.value(h)), &dense_encoder(&m, &tokens, |_, _| true));
        assert!(diff <= 1e-10, "n={n}: {diff}");
    }
}

#[test]
fn mlm_selection_count_is_near_the_mask_rate() {
    let tokens = vec![65; 1000];
    for seed in 0..20 {
        let b = mlm_corrupt(&tokens, 0.15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!((100..=200).contains(&b.selected), "seed {seed}: {}", b.selected);
        assert_eq!(b.weights.iter().filter(|&&w| w == 1.0).count(), b.selected);
        assert_eq!(b.targets, tokens);
    }
}

#[test]
fn mlm_corruption_proportions() {
    let tokens = vec![65; 200_000];
    let b = mlm_corrupt(&tokens, 0.15, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let masked = b.input.iter().filter(|&&t| t == MASK_ID).count() as f64;
    let kept = (0..tokens.len()).filter(|&i| b.weights[i] == 1.0 && b.input[i] == 65).count() as f64;
    let sel = b.selected as f64;
    assert!((masked / sel - 0.8).abs() < 0.01, "{}", masked / sel);
    // a random byte can also land on the original
    assert!((kept / sel - 0.1 - 0.1 / 256.0).abs() < 0.01, "{}", kept / sel);
    for i in 0..tokens.len() {
        if b.weights[i] == 0.0 {
            assert_eq!(b.input[i], 65);
        }
    }
}

#[test]
fn mlm_corrupt_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(matches!(mlm_corrupt(&[1, 2, 3], p, &mut rng), Err(Error::Config(_))));
    }
    assert!(matches!(mlm_corrupt(&[1], 1e-9, &mut rng), Err(Error::Data(_))));
}

#[test]
fn mlm_loss_ignores_unselected_positions() {
    let m = Model::<f64>::new(double(ModelConfig::mlm(1, 2, 16, 64, 4)), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = random_bytes(&mut rng, 64);
    let mut g = Graph::new();
    let (loss, batch) = m.mlm_loss(&mut g, &tokens, 0.3, 11, None).unwrap();
    let h = m.encode(&mut g, &batch.input, None).unwrap();
    let logits = m.head(&mut g, h).unwrap();
    let mut changed = g.value(logits).clone();
    let v = changed.shape()[1];
    for (i, &w) in batch.weights.iter().enumerate() {
        if w == 0.0 {
            changed.row_mut(i).iter_mut().for_each(|x| *x = 1e3 * (i as f64).sin());
        }
    }
    let c = g.constant(changed);
    let other = g.cross_entropy(c, &batch.targets, Some(&batch.weights)).unwrap();
    assert!((g.value(loss).data()[0] - g.value(other).data()[0]).abs() < 1e-12);
    assert_eq!(v, 260);
}

#[test]
fn uniform_byte_predictions_cost_eight_bits() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[50, 256]));
    let targets: Vec<usize> = (0..50).map(|i| i * 5 % 256).collect();
    let loss = g.cross_entropy(z, &targets, None).unwrap();
    let bits = g.value(loss).data()[0] / std::f64::consts::LN_2;
    assert!((bits - 8.0).abs() < 1e-12);
}

#[test]
fn led_decoder_is_causal() {
    assert_eq!(common::led_decoder_causality_violations(2, 100), 0);
}

#[test]
fn led_global_source_token_reaches_every_encoder_state() {
    let m = Model::<f64>::new(double(ModelConfig::led(1, 1, 2, 16, 40, 8, 1)), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut src = vec![BOS_ID];
    src.extend(random_bytes(&mut rng, 39));
    let mut g = Graph::new();
    let a = m.led_encode(&mut g, &src, None).unwrap();
    let a = to_mat(g.value(a));
    // swap the global token for another id
    let mut other = src.clone();
    other[0] = 12;
    let cfg = ModelConfig {
        architecture: Architecture::Mlm,
        decoder_layers: 0,
        decoder_max_positions: 0,
        ..m.config.clone()
    };
    let tensors: Vec<(String, Tensor<f64>)> = m
        .store
        .iter()
        .filter(|(_, name, _)| !name.starts_with("dec."))
        .map(|(_, name, t)| (name.to_string(), t.clone()))
        .collect();
    let enc = Model::<f64>::from_tensors(cfg, &tensors).unwrap();
    let b = enc.encode(&mut g, &other, None).unwrap();
    let b = to_mat(g.value(b));
    assert!((0..40).all(|i| a[i] != b[i]));
    // a non-global token only reaches its window
    let mut third = src.clone();
    third[20] = (third[20] + 1) % 256;
    let c = m.led_encode(&mut g, &third, None).unwrap();
    let c = to_mat(g.value(c));
    let changed: Vec<usize> = (0..40).filter(|&i| a[i] != c[i]).collect();
    assert_eq!(changed, vec![0, 19, 20, 21]);
}

#[test]
fn led_with_full_windows_equals_dense_encoder_decoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..5 {
        let cfg = ModelConfig {
            init_std: 0.2,
            ..double(ModelConfig::led(2, 2, 2, 16, 20, 12, 20))
        };
        let m = Model::<f64>::new(cfg, seed).unwrap();
        let mut src = vec![BOS_ID];
        let ns = rng.gen_range(0..20);
        src.extend(random_bytes(&mut rng, ns));
        let mut tgt = vec![BOS_ID];
        let nt = rng.gen_range(0..12);
        tgt.extend(random_bytes(&mut rng, nt));
        let mut g = Graph::new();
        let logits = m.led_logits(&mut g, &src, &tgt, None).unwrap();
        let diff = max_abs_diff(&to_mat(g.value(logits)), &dense_led_logits(&m, &src, &tgt));
        assert!(diff <= 1e-10, "seed {seed}: {diff}");
    }
}

#[test]
fn led_source_must_start_with_bos() {
    let m = Model::<f32>::new(ModelConfig::led(1, 1, 2, 8, 8, 8, 2), 0).unwrap();
    let mut g = Graph::new();
    assert!(matches!(m.led_encode(&mut g, &[1, 2, 3], None), Err(Error::Data(_))));
    assert!(m.led_scorer(&[5]).is_err());
}

#[test]
fn sequences_longer_than_the_position_table_are_rejected() {
    let m = Model::<f32>::new(ModelConfig::charlm(1, 2, 8, 8, 2), 0).unwrap();
    let mut g = Graph::new();
    assert!(m.charlm_logits(&mut g, &[1; 9], None).is_err());
    assert!(m.charlm_logits(&mut g, &[1; 8], None).is_ok());
}

#[test]
fn architecture_mismatch_is_a_config_error() {
    let m = Model::<f32>::new(ModelConfig::mlm(1, 2, 8, 8, 2), 0).unwrap();
    let mut g = Graph::new();
    assert!(matches!(m.charlm_logits(&mut g, &[1, 2], None), Err(Error::Config(_))));
}

fn expected_parameters(c: &ModelConfig) -> usize {
    let d = c.dmodel;
    let linear = |i: usize, o: usize| i * o;
    let norm = 2 * d;
    let ffn = linear(d, 4 * d) + 4 * d + linear(4 * d, d) + d;
    let mut enc_attn = 4 * linear(d, d);
    if !c.global_positions.is_empty() {
        enc_attn += 3 * linear(d, d);
    }
    if c.relative_bias {
        let reach = (0..c.layers)
            .flat_map(|l| {
                let s = c.layer(l);
                let mut w = vec![s.window];
                w.extend(s.per_head.iter().copied());
                w
            })
            .map(|w| w.half_window * w.dilation)
            .max()
            .unwrap();
        enc_attn += c.heads * (2 * reach + 1);
    }
    let mut total = c.vocab * d + c.max_positions * d + c.layers * (enc_attn + 2 * norm + ffn) + norm;
    if c.architecture == Architecture::Led {
        total += c.decoder_max_positions * d + c.decoder_layers * (8 * linear(d, d) + 3 * norm + ffn) + norm;
    }
    total
}

#[test]
fn parameter_count_formula() {
    let mut with_bias = ModelConfig::mlm(2, 2, 8, 32, 3);
    with_bias.relative_bias = true;
    with_bias.global_positions = vec![0, 5];
    with_bias.windows = vec![LayerSpec::new(3, 1), LayerSpec::new(2, 4)];
    let configs = [
        ModelConfig::charlm(2, 2, 16, 64, 4),
        ModelConfig::charlm(3, 4, 32, 128, 8),
        ModelConfig::mlm(1, 1, 8, 16, 2),
        with_bias,
        ModelConfig::led(2, 3, 2, 16, 32, 16, 4),
    ];
    for c in configs {
        let m = Model::<f32>::new(c.clone(), 0).unwrap();
        let stored: usize = m.store.iter().map(|(_, _, t)| t.data().len()).sum();
        assert_eq!(c.parameter_count(), expected_parameters(&c), "{c:?}");
        assert_eq!(m.parameter_count(), stored);
        assert_eq!(stored, expected_parameters(&c));
    }
}

#[test]
fn config_json_round_trip_and_unknown_keys() {
    let c = ModelConfig::led(2, 1, 2, 16, 32, 16, 4);
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), c);
    let bad = json.replacen('{', "{\"hidden\":3,", 1);
    assert!(serde_json::from_str::<ModelConfig>(&bad).is_err());
    let minimal = r#"{"architecture":"charlm","layers":1,"heads":1,"dmodel":4,"max_positions":8,"windows":[{"window":4}]}"#;
    let parsed: std::result::Result<ModelConfig, _> = serde_json::from_str(minimal);
    assert!(parsed.is_ok(), "{parsed:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ModelConfig::charlm(2, 3, 16, 8, 2);
    assert!(Model::<f32>::new(c.clone(), 0).is_err());
    c.heads = 2;
    c.global_positions = vec![0];
    assert!(matches!(Model::<f32>::new(c.clone(), 0), Err(Error::Unsupported(_))));
    c.global_positions.clear();
    c.windows = vec![LayerSpec::new(2, 1); 3];
    assert!(Model::<f32>::new(c.clone(), 0).is_err());
    c.windows = vec![LayerSpec::new(2, 1).with_heads(vec![Window::new(1, 1)])];
    assert!(Model::<f32>::new(c, 0).is_err());
}

/// Next-token table over `{0, 1, 2, EOS=3}` keyed by the prefix.
fn table_scorer(seed: u64) -> impl FnMut(&[usize]) -> Result<Vec<f64>> {
    move |prefix: &[usize]| {
        let mut h = seed;
        for &t in prefix {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z = raw.iter().map(|x| x.exp()).sum::<f64>().ln();
        Ok(raw.iter().map(|x| x - z).collect())
    }
}

/// Best normalized score over every sequence of at most `max_len` steps.
fn exhaustive_best(scorer: &mut impl FnMut(&[usize]) -> Result<Vec<f64>>, max_len: usize, alpha: f64) -> Vec<usize> {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut stack = vec![(vec![9usize], 0.0f64)];
    while let Some((prefix, lp)) = stack.pop() {
        let probs = scorer(&prefix).unwrap();
        let steps = prefix.len();
        let end = (lp + probs[3]) / (steps as f64).powf(alpha);
        if end > best.0 {
            best = (end, prefix[1..].to_vec());
        }
        for t in 0..3 {
            let mut p = prefix.clone();
            p.push(t);
            if steps == max_len {
                let cut = (lp + probs[t]) / (steps as f64).powf(alpha);
                if cut > best.0 {
                    best = (cut, p[1..].to_vec());
                }
            } else {
                stack.push((p, lp + probs[t]));
            }
        }
    }
    best.1
}

#[test]
fn wide_beam_finds_the_exhaustive_optimum() {
    for seed in 0..20 {
        for alpha in [0.0, 1.0] {
            let mut s = table_scorer(seed);
            let expect = exhaustive_best(&mut s, 4, alpha);
            let opts = BeamOptions {
                beam: 200,
                max_len: 4,
                length_penalty: alpha,
                bos: 9,
                eos: 3,
            };
            assert_eq!(beam_search(&mut s, opts).unwrap(), expect, "seed {seed} alpha {alpha}");
        }
    }
}

#[test]
fn beam_of_one_is_greedy_on_a_model() {
    let cfg = ModelConfig {
        init_std: 0.3,
        ..ModelConfig::led(1, 1, 2, 16, 16, 12, 4)
    };
    let m = Model::<f32>::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let mut src = vec![BOS_ID];
        src.extend(random_bytes(&mut rng, 10));
        let mut sc = m.led_scorer(&src).unwrap();
        let greedy = greedy_decode(&mut sc, BOS_ID, EOS_ID, 11).unwrap();
        let opts = BeamOptions {
            beam: 1,
            max_len: 11,
            length_penalty: 1.0,
            bos: BOS_ID,
            eos: EOS_ID,
        };
        let beam = beam_search(&mut sc, opts).unwrap();
        assert_eq!(beam, greedy);
        assert!(beam.len() <= 11);
    }
}

#[test]
fn beam_rejects_bad_options() {
    let mut s = table_scorer(0);
    let opts = BeamOptions {
        beam: 0,
        max_len: 3,
        length_penalty: 1.0,
        bos: 9,
        eos: 3,
    };
    assert!(beam_search(&mut s, opts).is_err());
    let opts = BeamOptions {
        beam: 2,
        length_penalty: f64::NAN,
        ..opts
    };
    assert!(beam_search(&mut s, opts).is_err());
}

fn check(model: ModelConfig, seqlen: usize) -> f64 {
    let cfg = longformer::model::GradCheckConfig {
        model,
        seqlen,
        samples: 64,
        eps: 1e-5,
        seed: 3,
    };
    longformer::model::check_model_gradients(&cfg).unwrap().max_rel_error
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    let mut charlm = ModelConfig::charlm(2, 2, 8, 16, 3);
    charlm.relative_bias = true;
    assert!(check(charlm, 13) < 1e-4);
    let mut mlm = ModelConfig::mlm(1, 2, 8, 16, 2);
    mlm.global_positions = vec![0, 7];
    assert!(check(mlm, 12) < 1e-4);
    assert!(check(ModelConfig::led(1, 1, 2, 8, 12, 12, 2), 10) < 1e-4);
}
