use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rarelm_core::loss::LossSpec;
use rarelm_core::model::{self, ModelConfig, ModelParams};
use rarelm_core::optim::{
    adamw_step, adamw_step_separated, adamw_update, clip_global_norm, cosine_lr, global_norm, OptimConfig, OptimState, RowStep,
};

fn random_grads(params: &ModelParams<f32>, rng: &mut ChaCha8Rng, zero_rows: &[usize]) -> ModelParams<f32> {
    let mut g = params.zeros_like();
    for (_, t) in g.tensors_mut() {
        for x in t.iter_mut() {
            // bounded away from zero so no row is ever silent by accident
            let mag: f32 = rng.random_range(0.01..1.0);
            *x = if rng.random::<bool>() { mag } else { -mag };
        }
    }
    let d = params.config.n_embd;
    let v = params.config.vocab_size;
    let mut w = g.wte.matrix().into_owned();
    for &r in zero_rows {
        w[r * d..(r + 1) * d].iter_mut().for_each(|x| *x = 0.0);
    }
    g.wte = rarelm_core::model::Embedding::from_matrix(w, v, d, params.wte.is_separated());
    g
}

#[test]
fn separated_matches_joint_when_every_row_is_active() {
    let cfg = ModelConfig { separated_embeddings: true, ..ModelConfig::tiny(11) };
    let cfg_joint = ModelConfig { separated_embeddings: false, ..cfg.clone() };
    let mut sep = ModelParams::<f32>::init(&cfg, 4).unwrap();
    let mut joint = sep.with_storage(false);
    joint.config = cfg_joint;
    let oc = OptimConfig::default();
    let mut s_sep = OptimState::new(&sep);
    let mut s_joint = OptimState::new(&joint);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for it in 0..100 {
        let g = random_grads(&sep, &mut rng, &[]);
        let lr = cosine_lr(it, &oc);
        adamw_step_separated(&mut sep, &g, &mut s_sep, &oc, lr).unwrap();
        adamw_step(&mut joint, &g.with_storage(false), &mut s_joint, &oc, lr).unwrap();
    }
    let a = sep.with_storage(false);
    let mut worst = 0.0f32;
    for ((_, x), (_, y)) in a.tensors().iter().zip(joint.tensors()) {
        for (p, q) in x.iter().zip(y) {
            worst = worst.max((p - q).abs());
        }
    }
    assert!(worst <= 1e-7, "drift {worst}");
}

#[test]
fn silent_rows_are_bitwise_untouched() {
    let cfg = ModelConfig { separated_embeddings: true, ..ModelConfig::tiny(11) };
    let mut p = ModelParams::<f32>::init(&cfg, 2).unwrap();
    let oc = OptimConfig::default();
    let mut st = OptimState::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // warm every row's moments, then silence rows 4 and 9
    let g = random_grads(&p, &mut rng, &[]);
    adamw_step_separated(&mut p, &g, &mut st, &oc, 1e-3).unwrap();
    let row4 = p.wte.row(4).to_vec();
    let row9 = p.wte.row(9).to_vec();
    let slot4 = st.slots[4].clone();
    for _ in 0..50 {
        let g = random_grads(&p, &mut rng, &[4, 9]);
        adamw_step_separated(&mut p, &g, &mut st, &oc, 1e-3).unwrap();
    }
    assert_eq!(p.wte.row(4), &row4[..]);
    assert_eq!(p.wte.row(9), &row9[..]);
    assert_eq!(st.slots[4], slot4);
    assert_eq!(st.slots[5].step, 51);
}

#[test]
fn late_row_uses_its_own_bias_correction() {
    let cfg = ModelConfig { separated_embeddings: true, ..ModelConfig::tiny(11) };
    let mut p = ModelParams::<f32>::init(&cfg, 8).unwrap();
    let oc = OptimConfig::default();
    let mut st = OptimState::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g1 = random_grads(&p, &mut rng, &[6]);
    adamw_step_separated(&mut p, &g1, &mut st, &oc, 1e-3).unwrap();
    let before = p.wte.row(6).to_vec();
    let g2 = random_grads(&p, &mut rng, &[]);
    adamw_step_separated(&mut p, &g2, &mut st, &oc, 1e-3).unwrap();
    assert_eq!(st.slots[6].step, 1);
    assert_eq!(st.step, 2);

    let mut want = before.clone();
    let d = want.len();
    let (mut m, mut v) = (vec![0f32; d], vec![0f32; d]);
    adamw_update(&mut want, g2.wte.row(6), &mut m, &mut v, 1, 1e-3, oc.weight_decay, &oc);
    assert_eq!(p.wte.row(6), &want[..]);
    // a first bias-corrected step moves each coordinate by about lr
    for (a, b) in before.iter().zip(&want) {
        assert!(((a - b).abs() - 1e-3).abs() < 1e-4);
    }

    // the global-counter ablation corrects with step 2 instead
    let oc_g = OptimConfig { row_step: RowStep::Global, ..oc.clone() };
    let mut p2 = ModelParams::<f32>::init(&cfg, 8).unwrap();
    let mut st2 = OptimState::new(&p2);
    adamw_step_separated(&mut p2, &g1, &mut st2, &oc_g, 1e-3).unwrap();
    adamw_step_separated(&mut p2, &g2, &mut st2, &oc_g, 1e-3).unwrap();
    assert_ne!(p2.wte.row(6), p.wte.row(6));
}

#[test]
fn tied_head_has_one_storage_and_one_slot() {
    let cfg = ModelConfig::tiny(11);
    let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
    assert!(p.lm_head.is_none());
    assert_eq!(p.tensors().iter().filter(|(i, _)| i.name.starts_with("wte")).count(), 1);
    assert_eq!(p.num_params(), cfg.param_count());
    let untied = ModelParams::<f32>::init(&ModelConfig { weight_tying: false, ..cfg.clone() }, 1).unwrap();
    assert_eq!(untied.num_params(), cfg.param_count() + 11 * 16);
}

/// Training with a token that never appears and is always thresholded away
/// leaves its separated row exactly at initialization.
#[test]
fn never_seen_masked_token_keeps_its_initialization() {
    let cfg = ModelConfig { separated_embeddings: true, ..ModelConfig::tiny(11) };
    let mut p = ModelParams::<f32>::init(&cfg, 6).unwrap();
    let d = cfg.n_embd;
    // a large final-norm bias along u and w_10 = −u put token 10's logit far below every target
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let u: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = u.iter().map(|x| x * x).sum::<f32>().sqrt();
    let u: Vec<f32> = u.iter().map(|x| x / n).collect();
    p.lnf_b = u.iter().map(|x| 8.0 * x).collect();
    p.wte.row_mut(10).copy_from_slice(&u.iter().map(|x| -x).collect::<Vec<_>>());
    p.mark_updated();
    let init = p.wte.row(10).to_vec();

    let oc = OptimConfig::default();
    let mut st = OptimState::new(&p);
    let spec = LossSpec::threshold(0.5);
    for it in 0..40u64 {
        let ids: Vec<u16> = (0..2 * 8 + 1).map(|_| rng.random_range(0..10)).collect();
        let inputs: Vec<u16> = ids[..16].to_vec();
        let targets: Vec<u16> = ids[1..].to_vec();
        let (logits, cache) = model::forward::<f32, ChaCha8Rng>(&p, &inputs, 2, 8, None).unwrap();
        let out = model::model_loss(&p, &cache, &logits, &targets, &spec).unwrap();
        for t in 0..16 {
            assert!(!out.survivors[t * 11 + 10], "token 10 survived at iter {it}");
        }
        let mut g = model::backward(&p, cache, &out.dlogits).unwrap();
        assert!(g.params.wte.row(10).iter().all(|&x| x == 0.0));
        clip_global_norm(&mut g.params, oc.grad_clip);
        adamw_step_separated(&mut p, &g.params, &mut st, &oc, cosine_lr(it, &oc)).unwrap();
    }
    assert_eq!(p.wte.row(10), &init[..]);
    assert_eq!(st.slots[10].step, 0);
}

proptest! {
    #[test]
    fn clipping_bounds_the_global_norm(scale in 0.01f32..100.0, max in 0.1f64..5.0, seed in 0u64..1000) {
        let p = ModelParams::<f32>::init(&ModelConfig::tiny(7), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = random_grads(&p, &mut rng, &[]);
        for (_, t) in g.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= scale);
        }
        let before = global_norm(&g);
        let reported = clip_global_norm(&mut g, max);
        prop_assert!((reported - before).abs() <= 1e-9 * before.max(1.0));
        let after = global_norm(&g);
        prop_assert!(after <= max + 1e-6);
        if before <= max {
            prop_assert!((after - before).abs() < 1e-9 * before.max(1.0));
        }
    }

    #[test]
    fn cosine_stays_within_bounds(iter in 0u64..20_000) {
        let oc = OptimConfig::default();
        let lr = cosine_lr(iter, &oc);
        prop_assert!(lr >= oc.min_lr - 1e-18 && lr <= oc.lr + 1e-18);
        if iter >= oc.lr_decay_iters {
            prop_assert_eq!(lr, oc.min_lr);
        } else {
            prop_assert!(cosine_lr(iter + 1, &oc) <= lr);
        }
    }
}
