mod common;

use common::{attention_layer, local_weights, mha, random_mat, run_layer, Mat};
use longformer::attention::{
    influence_width, init_global_projections, longformer_self_attention, AttentionImpl, AttentionStack,
};
use longformer::autodiff::Graph;
use longformer::pattern::{Mode, PatternConfig, Window};
use longformer::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_window_equals_dense_attention() {
    for seed in 0..30 {
        let diff = common::dense_equivalence_case(seed);
        assert!(diff <= 1e-10, "seed {seed}: {diff}");
    }
}

#[test]
fn implementations_agree_with_globals_and_small_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.gen_range(4..40);
        let cfg = PatternConfig::new(n, rng.gen_range(1..5), 1, Mode::Bidirectional)
            .with_globals(&[0, rng.gen_range(0..n)]);
        let (store, p) = attention_layer(&mut rng, 8, 2, true);
        let x = random_mat(&mut rng, n, 8, 1.0);
        let reference = run_layer(&store, &p, &x, &cfg, AttentionImpl::Oracle);
        for imp in [AttentionImpl::Auto, AttentionImpl::Loop, AttentionImpl::Chunk, AttentionImpl::Dense] {
            let out = run_layer(&store, &p, &x, &cfg, imp);
            assert!(common::max_abs_diff(&out, &reference) < 1e-12, "{imp:?}");
        }
    }
}

#[test]
fn global_row_matches_dense_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 12;
    let cfg = PatternConfig::new(n, 1, 1, Mode::Bidirectional).with_globals(&[5]);
    let (store, p) = attention_layer(&mut rng, 8, 2, true);
    let x = random_mat(&mut rng, n, 8, 1.0);
    let out = run_layer(&store, &p, &x, &cfg, AttentionImpl::Auto);
    let [wq, wk, wv, wo] = local_weights(&store, &p);
    let dense = mha(&x, &x, [&wq, &wk, &wv, &wo], 2, |_, _| true);
    let diff = out[5].iter().zip(&dense[5]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-10);
    // other rows only see their window plus the global key
    let masked = mha(&x, &x, [&wq, &wk, &wv, &wo], 2, |i, j| common::allowed(&cfg, i, j));
    assert!(common::max_abs_diff(&out, &masked) <= 1e-10);
}

fn influenced_by_zero(globals: &[usize]) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 8;
    let cfg = PatternConfig::new(n, 1, 1, Mode::Bidirectional).with_globals(globals);
    let stack = AttentionStack::<f64>::new(8, 2, vec![cfg], 0.4, &mut rng).unwrap();
    let x = Tensor::from_rows(&random_mat(&mut rng, n, 8, 1.0));
    let affected = influence_width(&x, 0, |x| stack.forward(x, AttentionImpl::Auto)).unwrap();
    affected.contains(&7)
}

#[test]
fn global_token_reaches_the_far_end() {
    assert!(influenced_by_zero(&[0]));
    assert!(!influenced_by_zero(&[]));
}

#[test]
fn influence_examples() {
    let (one, _) = common::stack_influence(&[Window::new(2, 1)], &[], 16, 5);
    assert!(one.contains(&5) && one.iter().all(|&i| (3..=7).contains(&i)));
    let (two, _) = common::stack_influence(&[Window::new(2, 1); 2], &[], 16, 5);
    assert!(two.iter().all(|&i| (1..=9).contains(&i)));
    for probe in [3, 9, 15] {
        let (one, _) = common::stack_influence(&[Window::new(1, 1)], &[0], 16, probe);
        assert!(one.contains(&0));
        let (two, _) = common::stack_influence(&[Window::new(1, 1); 2], &[0], 16, probe);
        assert_eq!(two, (0..16).collect::<Vec<_>>());
    }
}

#[test]
fn influence_stays_within_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        assert_eq!(common::receptive_field_problem(&mut rng), None);
    }
}

#[test]
fn global_projection_init_is_a_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut store, p) = attention_layer(&mut rng, 8, 2, true);
    let g = p.global.unwrap();
    // scramble, re-init, and check equality and idempotence
    for id in [g.w_qg, g.w_kg, g.w_vg] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    init_global_projections(&mut store, &p).unwrap();
    let once = store.clone();
    init_global_projections(&mut store, &p).unwrap();
    for (a, b) in [(p.w_qs, g.w_qg), (p.w_ks, g.w_kg), (p.w_vs, g.w_vg)] {
        assert_eq!(store.get(a).data(), store.get(b).data());
        assert_eq!(store.get(b).data(), once.get(b).data());
    }
    let before = store.get(p.w_qs).clone();
    store.get_mut(g.w_qg).data_mut()[0] += 3.0;
    assert_eq!(store.get(p.w_qs), &before);
}

#[test]
fn diverged_global_projections_change_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let n = 10;
    let cfg = PatternConfig::new(n, 2, 1, Mode::Bidirectional).with_globals(&[0]);
    let (mut store, p) = attention_layer(&mut rng, 8, 2, true);
    let x = random_mat(&mut rng, n, 8, 1.0);
    let before = run_layer(&store, &p, &x, &cfg, AttentionImpl::Auto);
    let g = p.global.unwrap();
    store.get_mut(g.w_kg).data_mut().iter_mut().for_each(|v| *v *= 1.5);
    let after = run_layer(&store, &p, &x, &cfg, AttentionImpl::Auto);
    // a far-away row sees token 0 only through the global key
    assert!(before[9].iter().zip(&after[9]).any(|(a, b)| (a - b).abs() > 1e-9));
    let (mut plain, q) = attention_layer(&mut rng, 8, 2, false);
    assert!(init_global_projections(&mut plain, &q).is_err());
}

/// Makes head 1's projections a copy of head 0's and `W_O` the identity.
fn twin_heads(rng: &mut ChaCha8Rng) -> (longformer::params::ParamStore<f64>, longformer::attention::AttentionParams) {
    let (mut store, p) = attention_layer(rng, 8, 2, false);
    for id in [p.w_qs, p.w_ks, p.w_vs] {
        let t = store.get_mut(id);
        for r in 0..8 {
            for c in 0..4 {
                let v = t.data()[r * 8 + c];
                t.data_mut()[r * 8 + c + 4] = v;
            }
        }
    }
    store.replace(p.w_o, Tensor::eye(8));
    (store, p)
}

fn head_cols(m: &Mat, head: usize) -> Mat {
    m.iter().map(|r| r[head * 4..head * 4 + 4].to_vec()).collect()
}

#[test]
fn per_head_windows_only_change_their_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (store, p) = twin_heads(&mut rng);
    let n = 20;
    let x = random_mat(&mut rng, n, 8, 1.0);
    let narrow = PatternConfig::new(n, 1, 1, Mode::Bidirectional);
    let wide = PatternConfig::new(n, 2, 2, Mode::Bidirectional);
    let same = run_layer(&store, &p, &x, &narrow, AttentionImpl::Auto);
    assert_eq!(head_cols(&same, 0), head_cols(&same, 1));

    let mixed_cfg = narrow.clone().with_heads(vec![Window::new(1, 1), Window::new(2, 2)]);
    let mixed = run_layer(&store, &p, &x, &mixed_cfg, AttentionImpl::Auto);
    let all_wide = run_layer(&store, &p, &x, &wide, AttentionImpl::Auto);
    assert_eq!(head_cols(&mixed, 0), head_cols(&same, 0));
    assert_eq!(head_cols(&mixed, 1), head_cols(&all_wide, 1));
    assert_ne!(head_cols(&mixed, 0), head_cols(&mixed, 1));
}

#[test]
fn layer_passes_gradient_check() {
    for imp in [AttentionImpl::Auto, AttentionImpl::Loop] {
        let err = common::layer_grad_error(imp);
        assert!(err < 1e-4, "{imp:?}: {err}");
    }
}

#[test]
fn bad_layer_inputs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (store, p) = attention_layer(&mut rng, 8, 2, true);
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros(&[6, 8]));
    let out_of_range = PatternConfig::new(6, 1, 1, Mode::Bidirectional).with_globals(&[6]);
    assert!(matches!(
        longformer_self_attention(&mut g, &store, &p, x, &out_of_range, AttentionImpl::Auto),
        Err(Error::OutOfRange(_))
    ));
    let causal = PatternConfig::new(6, 1, 1, Mode::Causal).with_globals(&[0]);
    assert!(longformer_self_attention(&mut g, &store, &p, x, &causal, AttentionImpl::Auto).is_err());
    let wrong_n = PatternConfig::new(5, 1, 1, Mode::Bidirectional);
    assert!(longformer_self_attention(&mut g, &store, &p, x, &wrong_n, AttentionImpl::Auto).is_err());
    let (plain, q) = attention_layer(&mut rng, 8, 2, false);
    let with_global = PatternConfig::new(6, 1, 1, Mode::Bidirectional).with_globals(&[0]);
    assert!(longformer_self_attention(&mut g, &plain, &q, x, &with_global, AttentionImpl::Auto).is_err());
}
