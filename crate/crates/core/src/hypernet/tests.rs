use proptest::prelude::*;

use super::pretrain::{end2end_gradients, reconstruction_gradients};
use super::*;
use crate::backbone::{encode_pair, Backbone};
use crate::numerics::Rng;
use crate::numerics::{relative_error, OptimizerConfig};
use crate::synthbench::{gen_task, DescriptionVariant, Example, TaskKind};

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 64,
        max_seq: 32,
    }
}

fn small_cfg() -> HypernetConfig {
    HypernetConfig {
        backbone: small_backbone(),
        rank: 2,
        d_task: 16,
        hidden: 12,
    }
}

fn jitter(h: &mut Hypernet, std: f64, seed: u64) {
    let mut rng = Rng::new(seed);
    for m in h.params_mut() {
        let noise = Matrix::randn(m.rows(), m.cols(), std, &mut rng);
        *m = m.add(&noise).unwrap();
    }
}

#[test]
fn empty_text_embeds_to_zero() {
    assert!(embed_description("").unwrap().iter().all(|&v| v == 0.0));
    assert!(embed_description("   ").unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_is_deterministic_and_normalized() {
    let a = embed_description("rate each string").unwrap();
    let b = embed_description("rate each string").unwrap();
    assert_eq!(a, b);
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert_eq!(a.len(), D_TASK);
}

#[test]
fn near_strings_are_closer_than_far_ones() {
    let abc = embed_description("abc").unwrap();
    let abd = embed_description("abd").unwrap();
    let zzz = embed_description("zzz").unwrap();
    let near = cosine(&abc, &abd);
    assert!(near < 1.0);
    assert!(near > cosine(&abc, &zzz));
}

#[test]
fn out_of_alphabet_rejected() {
    assert!(matches!(
        embed_description("tab\there"),
        Err(Error::OutOfAlphabet('\t'))
    ));
}

#[test]
fn paraphrase_stays_closer_than_degraded_description() {
    let mut wins = 0;
    let mut total = 0;
    for kind in TaskKind::ALL {
        for seed in 0..10 {
            let spec = gen_task(kind, seed);
            let canon = embed_description(&spec.description).unwrap();
            let para = embed_description(&spec.perturb_description(DescriptionVariant::GeneratedStyle, seed)).unwrap();
            let vague = embed_description(&spec.perturb_description(DescriptionVariant::Imprecise, seed)).unwrap();
            total += 1;
            if cosine(&canon, &para) > cosine(&canon, &vague) {
                wins += 1;
            }
        }
    }
    assert!(wins * 10 >= total * 7, "{wins}/{total}");
}

#[test]
fn untrained_hypernet_is_a_no_op() {
    let cfg = small_cfg();
    let h = Hypernet::new(cfg, &Rng::new(1)).unwrap();
    let model = Backbone::build(cfg.backbone, &Rng::new(2)).unwrap();
    let anchor = h.generate_anchor("classify each string", &cfg.backbone).unwrap();
    assert_eq!(anchor.len(), 2 * cfg.backbone.n_layers);
    assert_eq!(anchor.variant(), None);
    let seq = encode_pair("abc", "A").unwrap();
    let base = model.forward(None, &seq).unwrap();
    let with = model.forward(Some(&anchor), &seq).unwrap();
    assert!(base.bits_eq(&with));
    for (_, m) in anchor.iter() {
        assert!(m.delta().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn generation_is_pure_and_shaped() {
    let cfg = small_cfg();
    let mut h = Hypernet::new(cfg, &Rng::new(1)).unwrap();
    jitter(&mut h, 0.1, 4);
    let before = h.clone();
    let x = h.generate_anchor("rewrite each list", &cfg.backbone).unwrap();
    let y = h.generate_anchor("rewrite each list", &cfg.backbone).unwrap();
    assert!(x.bits_eq(&y));
    assert!(h.bits_eq(&before));
    for (&(_, site), m) in x.iter() {
        let (d_in, d_out) = cfg.backbone.site_shape(site);
        assert_eq!(m.pair.a.shape(), (cfg.rank, d_in));
        assert_eq!(m.pair.b.shape(), (d_out, cfg.rank));
    }
    let z = h.generate_anchor("classify each string", &cfg.backbone).unwrap();
    assert!(cosine(&x.flatten(), &z.flatten()) < 0.99);
}

#[test]
fn generate_rejects_bad_inputs() {
    let cfg = small_cfg();
    let h = Hypernet::new(cfg, &Rng::new(1)).unwrap();
    assert!(h.generate_anchor("  ", &cfg.backbone).is_err());
    let mut other = cfg.backbone;
    other.n_layers = 3;
    assert!(h.generate_anchor("rate", &other).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let cfg = small_cfg();
    let mut h = Hypernet::new(cfg, &Rng::new(u64::MAX - 3)).unwrap();
    jitter(&mut h, 0.3, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.prsp");
    h.save(&path).unwrap();
    let back = Hypernet::load(&path).unwrap();
    assert!(back.bits_eq(&h));
    assert_eq!(back.seed(), u64::MAX - 3);
    let err = AdapterSet::load(&path).unwrap_err();
    assert!(matches!(err, Error::Format(FormatError::WrongKind { .. })), "{err:?}");
}

#[test]
fn checkpoint_rejects_missing_parameter() {
    let h = Hypernet::new(small_cfg(), &Rng::new(1)).unwrap();
    let mut c = h.to_container();
    c.records.pop();
    assert!(Hypernet::from_container(&c).is_err());
}

fn batch() -> Vec<Example> {
    vec![
        Example {
            input: "abca".into(),
            output: "A".into(),
        },
        Example {
            input: "b c".into(),
            output: "C B".into(),
        },
    ]
}

#[test]
fn end2end_gradient_matches_finite_differences() {
    let cfg = small_cfg();
    let model = Backbone::build(cfg.backbone, &Rng::new(3)).unwrap();
    for seed in [1u64, 2] {
        let mut h = Hypernet::new(cfg, &Rng::new(seed)).unwrap();
        jitter(&mut h, 0.2, seed + 10);
        let emb = embed_with_dim("rate each string", cfg.d_task).unwrap();
        let data = batch();
        let refs: Vec<&Example> = data.iter().collect();
        let (_, grads) = end2end_gradients(&model, &h, &emb, &refs).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let eps = 1e-6;
        for (p, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let eval = |delta: f64| {
                    let mut probe = h.clone();
                    probe.params_mut()[p].data_mut()[k] += delta;
                    end2end_gradients(&model, &probe, &emb, &refs).unwrap().0
                };
                numeric.push((eval(eps) - eval(-eps)) / (2.0 * eps));
                analytic.push(g.data()[k]);
            }
        }
        let n = analytic.len();
        let a = Matrix::from_raw(1, n, analytic).unwrap();
        let b = Matrix::from_raw(1, n, numeric).unwrap();
        let err = relative_error(&a, &b);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let cfg = small_cfg();
    let mut h = Hypernet::new(cfg, &Rng::new(6)).unwrap();
    jitter(&mut h, 0.2, 7);
    let target = Hypernet::new(cfg, &Rng::new(8))
        .map(|mut t| {
            jitter(&mut t, 0.5, 9);
            t.generate_anchor("some task", &cfg.backbone).unwrap()
        })
        .unwrap();
    let emb = embed_with_dim("another task", cfg.d_task).unwrap();
    let (_, grads) = reconstruction_gradients(&h, &emb, &target).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (p, g) in grads.iter().enumerate() {
        for k in (0..g.len()).step_by(3) {
            let eval = |delta: f64| {
                let mut probe = h.clone();
                probe.params_mut()[p].data_mut()[k] += delta;
                reconstruction_gradients(&probe, &emb, &target).unwrap().0
            };
            numeric.push((eval(1e-6) - eval(-1e-6)) / 2e-6);
            analytic.push(g.data()[k]);
        }
    }
    let n = analytic.len();
    let err = relative_error(
        &Matrix::from_raw(1, n, analytic).unwrap(),
        &Matrix::from_raw(1, n, numeric).unwrap(),
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reconstruction_toward_zero_targets() {
    let cfg = small_cfg();
    let mut h = Hypernet::new(cfg, &Rng::new(2)).unwrap();
    jitter(&mut h, 0.2, 3);
    let zero = Hypernet::new(cfg, &Rng::new(4))
        .unwrap()
        .generate_anchor("x", &cfg.backbone)
        .unwrap();
    let mut zero = zero;
    for (_, m) in zero.iter_mut() {
        m.pair.a = Matrix::zeros(m.pair.a.rows(), m.pair.a.cols());
    }
    let targets = vec![
        ("first task".to_string(), zero.clone()),
        ("second task".to_string(), zero),
    ];
    let curve = reconstruction_fit(&mut h, &targets, 60, OptimizerConfig::adamw(1e-2), &Rng::new(5)).unwrap();
    // compare means of consecutive windows of 10 epochs
    let windows: Vec<f64> = curve
        .chunks(10)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "{windows:?}");
    }
    assert!(curve.last().unwrap() < &(curve[0] * 0.05));
}

#[test]
fn pretraining_leaves_backbone_untouched_and_learns() {
    let cfg = small_cfg();
    let model = Backbone::build(cfg.backbone, &Rng::new(3)).unwrap();
    let frozen = model.clone();
    let tasks: Vec<PretrainTask> = [TaskKind::Classification, TaskKind::Ordinal]
        .into_iter()
        .map(|k| {
            let spec = gen_task(k, 40);
            PretrainTask {
                name: spec.id.clone(),
                description: spec.description.clone(),
                train: spec.sample_examples(24, 1),
                val: spec.sample_examples(8, 2),
            }
        })
        .collect();
    let pcfg = PretrainConfig {
        epochs: 3,
        batch_size: 4,
        optimizer: OptimizerConfig::adamw(3e-3),
        ..PretrainConfig::default()
    };
    let h = Hypernet::new(cfg, &Rng::new(1)).unwrap();
    let (trained, log) = pretrain_hypernet(&model, h, &tasks, &pcfg, &Rng::new(2)).unwrap();
    assert!(model.bits_eq(&frozen));
    assert_eq!(log.steps, 3 * 2 * 6);
    assert_eq!(log.epoch_losses.len(), 3);
    for (b, a) in log.val_base.iter().zip(&log.val_anchored) {
        assert!(a < b, "{a} vs {b}");
    }
    let again = pretrain_hypernet(
        &model,
        Hypernet::new(cfg, &Rng::new(1)).unwrap(),
        &tasks,
        &pcfg,
        &Rng::new(2),
    )
    .unwrap()
    .0;
    assert!(again.bits_eq(&trained));
}

#[test]
fn pretraining_input_checks() {
    let cfg = small_cfg();
    let model = Backbone::build(cfg.backbone, &Rng::new(3)).unwrap();
    let h = Hypernet::new(cfg, &Rng::new(1)).unwrap();
    let spec = gen_task(TaskKind::Classification, 1);
    let one = vec![PretrainTask {
        name: "t".into(),
        description: spec.description.clone(),
        train: spec.sample_examples(4, 1),
        val: vec![],
    }];
    assert!(pretrain_hypernet(&model, h, &one, &PretrainConfig::default(), &Rng::new(0)).is_err());
    assert!("sideways".parse::<PretrainMode>().is_err());
    assert_eq!(
        "reconstruction".parse::<PretrainMode>().unwrap(),
        PretrainMode::Reconstruction
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_norm_at_most_one(s in "[a-z :|]{0,40}") {
        let v = embed_description(&s).unwrap();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n <= 1.0 + 1e-12);
    }
}
