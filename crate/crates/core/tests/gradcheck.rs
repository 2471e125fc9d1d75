use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rarelm_core::gradcheck::{grad_check, grad_check_at};
use rarelm_core::loss::{ce_loss, LossSpec, Subtrahend};
use rarelm_core::model::{self, ModelConfig, ModelParams};

const TOL: f64 = 1e-4;

fn tiny() -> ModelConfig {
    ModelConfig::tiny(11)
}

fn check(cfg: &ModelConfig, spec: &LossSpec) {
    let r = grad_check(cfg, spec, 7).unwrap();
    assert!(r.max_rel_error < TOL, "{spec:?}: {r:?}");
    assert_eq!(r.checked, cfg.param_count());
}

#[test]
fn standard_ce() {
    check(&tiny(), &LossSpec::standard());
}

#[test]
fn threshold_margin_one() {
    check(&tiny(), &LossSpec::threshold(1.0));
}

#[test]
fn threshold_with_logit_scale() {
    check(&tiny(), &LossSpec { train_logit_scale: 2.17, ..LossSpec::threshold(0.5) });
}

#[test]
fn alpha_threshold() {
    check(&tiny(), &LossSpec::alpha_threshold(0.0625));
}

#[test]
fn dut() {
    check(&tiny(), &LossSpec::dut(0.5));
}

#[test]
fn softminus_variants() {
    check(&tiny(), &LossSpec::softminus(3.0, 1.0, false));
    check(&tiny(), &LossSpec { subtrahend: Subtrahend::Relative, ..LossSpec::softminus(1.0, 1.0, false) });
    check(&tiny(), &LossSpec { subtrahend: Subtrahend::Relative, ..LossSpec::softminus(1.0, 1.0, true) });
}

#[test]
fn untied_separated_and_biasless() {
    check(&ModelConfig { weight_tying: false, ..tiny() }, &LossSpec::threshold(1.0));
    check(&ModelConfig { separated_embeddings: true, ..tiny() }, &LossSpec::standard());
    check(&ModelConfig { bias: false, ..tiny() }, &LossSpec::standard());
}

#[test]
fn dropout_masks_are_reused_in_backward() {
    // A fixed dropout mask turns the network into a smooth function; check it
    // by replaying the same rng stream for every evaluation.
    let cfg = ModelConfig { dropout: 0.2, ..tiny() };
    let p = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<u16> = (0..16).map(|_| rng.random_range(0..11) as u16).collect();
    let y: Vec<u16> = (0..16).map(|_| rng.random_range(0..11) as u16).collect();
    let run = |p: &ModelParams<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        model::forward(p, &x, 2, 8, Some(&mut r)).unwrap()
    };
    let (logits, cache) = run(&p);
    let out = ce_loss(&logits, &y, 11, &LossSpec::standard(), None).unwrap();
    let g = model::backward(&p, cache, &out.dlogits).unwrap();
    let eps = 1e-6;
    let mut probe = p.clone();
    for (k, j) in [(0usize, 5usize), (1, 3), (4, 17)] {
        let orig = probe.tensors()[k].1[j];
        probe.tensors_mut()[k].1[j] = orig + eps;
        let up = ce_loss(&run(&probe).0, &y, 11, &LossSpec::standard(), None).unwrap().loss;
        probe.tensors_mut()[k].1[j] = orig - eps;
        let down = ce_loss(&run(&probe).0, &y, 11, &LossSpec::standard(), None).unwrap().loss;
        probe.tensors_mut()[k].1[j] = orig;
        let num = (up - down) / (2.0 * eps);
        let ana = g.params.tensors()[k].1[j];
        assert!((num - ana).abs() <= TOL * ana.abs().max(num.abs()).max(1e-7), "{num} vs {ana}");
    }
}

#[test]
fn dut_detached_entries_differ_from_unfrozen_differences() {
    let cfg = tiny();
    let p = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<u16> = (0..16).map(|_| rng.random_range(0..11) as u16).collect();
    let y: Vec<u16> = (0..16).map(|_| rng.random_range(0..11) as u16).collect();
    let (logits, _) = model::forward::<f64, ChaCha8Rng>(&p, &x, 2, 8, None).unwrap();
    // scale the logits up so that a margin actually detaches something
    let logits: Vec<f64> = logits.iter().map(|z| z * 20.0).collect();
    let spec = LossSpec::dut(0.5);
    let out = ce_loss(&logits, &y, 11, &spec, None).unwrap();
    let detached: Vec<usize> = (0..logits.len()).filter(|&i| !out.survivors[i]).collect();
    assert!(!detached.is_empty());
    let eps = 1e-6;
    let mut nonzero = 0;
    for &i in &detached {
        assert_eq!(out.dlogits[i], 0.0);
        let mut up = logits.clone();
        up[i] += eps;
        let mut down = logits.clone();
        down[i] -= eps;
        let f = |l: &[f64]| ce_loss(l, &y, 11, &spec, None).unwrap().loss;
        if ((f(&up) - f(&down)) / (2.0 * eps)).abs() > 0.0 {
            nonzero += 1;
        }
    }
    assert!(nonzero > 0, "unfrozen differences should see the detached entries");

    // the model-level check passes with the mask semantics applied
    let r = grad_check_at(&p, &x, &y, 2, 8, &spec).unwrap();
    assert!(r.max_rel_error < TOL);
}
