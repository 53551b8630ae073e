use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::adapters::{LoraPair, Role};
use crate::backbone::{encode_pair, BackboneConfig, Site, EOS};
use crate::hypernet::HypernetConfig;
use crate::numerics::Rng;
use crate::synthbench::{gen_task, gen_users, TaskKind};

fn small_cfg() -> BackboneConfig {
    BackboneConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 64,
        max_seq: 40,
    }
}

fn small_model(seed: u64) -> Backbone {
    Backbone::build(small_cfg(), &Rng::new(seed)).unwrap()
}

fn random_anchor(cfg: &BackboneConfig, rank: usize, std: f64, seed: u64) -> AdapterSet {
    let mut rng = Rng::new(seed);
    let mut pairs = BTreeMap::new();
    for layer in 0..cfg.n_layers {
        for site in Site::ADAPTED {
            let (d_in, d_out) = cfg.site_shape(site);
            let a = Matrix::randn(rank, d_in, std, &mut rng);
            let b = Matrix::randn(d_out, rank, std, &mut rng);
            pairs.insert((layer, site), LoraPair::new(a, b).unwrap());
        }
    }
    AdapterSet::anchor(pairs)
}

fn user(kind: TaskKind, seed: u64) -> SynthUser {
    let spec = gen_task(kind, 7);
    gen_users(&spec, 1, 50, seed).unwrap().remove(0)
}

fn cfg(variant: Variant) -> PersonalizeConfig {
    PersonalizeConfig {
        variant,
        ..PersonalizeConfig::desk()
    }
}

#[test]
fn untrained_hypernet_anchor_matches_base() {
    let model = small_model(1);
    let h = Hypernet::new(
        HypernetConfig {
            rank: 2,
            ..HypernetConfig::new(small_cfg())
        },
        &Rng::new(2),
    )
    .unwrap();
    let a = stage1_anchor(&h, "rate each string", &model).unwrap();
    let b = stage1_anchor(&h, "rate each string", &model).unwrap();
    assert!(a.bits_eq(&b));
    assert_eq!(a.variant(), None);
    let seq = encode_pair("abc", "B").unwrap();
    assert!(model
        .forward(Some(&a), &seq)
        .unwrap()
        .bits_eq(&model.forward(None, &seq).unwrap()));
}

#[test]
fn refine_with_no_epochs_is_identity() {
    let model = small_model(1);
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let data = gen_task(TaskKind::Classification, 1).sample_examples(8, 1);
    let tc = TrainConfig {
        epochs: 0,
        ..PersonalizeConfig::desk().train_config()
    };
    let out = refine_anchor(&model, &anchor, &data, &tc, &Rng::new(0)).unwrap();
    assert!(out.bits_eq(&anchor));
    assert!(refine_anchor(&model, &anchor, &[], &tc, &Rng::new(0)).is_err());
}

#[test]
fn refinement_lowers_task_loss() {
    let mut wins = 0;
    for seed in 0..5 {
        let model = small_model(10 + seed);
        let frozen = model.clone();
        let anchor = random_anchor(&small_cfg(), 2, 0.2, 20 + seed);
        let spec = gen_task(TaskKind::Classification, 30 + seed);
        let train = spec.sample_examples(48, 1);
        let val = spec.sample_examples(24, 2);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            optimizer: OptimizerConfig::adamw(1e-2),
            dropout: false,
        };
        let refined = refine_anchor(&model, &anchor, &train, &tc, &Rng::new(seed)).unwrap();
        assert_eq!(refined.variant(), None);
        assert!(model.bits_eq(&frozen));
        let before = model.dataset_loss(Some(&anchor), &val).unwrap();
        let after = model.dataset_loss(Some(&refined), &val).unwrap();
        if after <= before {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{wins}/5");
}

#[test]
fn no_steps_leaves_ours_equal_to_anchor() {
    let model = small_model(1);
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let u = UserHistory::from(&user(TaskKind::Ordinal, 1));
    let c = PersonalizeConfig {
        epochs: 0,
        ..cfg(Variant::Ours)
    };
    let run = personalize_user(&model, &anchor, &u, &c).unwrap();
    assert_eq!(run.log.steps, 0);
    for ex in &u.items[..5] {
        let seq = encode_pair(&ex.input, &ex.output).unwrap();
        let x = model.forward(Some(&anchor), &seq).unwrap();
        let y = model.forward(Some(&run.adapters), &seq).unwrap();
        assert!(x.bits_eq(&y));
    }
}

#[test]
fn bridge_only_changes_only_the_bridge() {
    let model = small_model(1);
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let u = UserHistory::from(&user(TaskKind::Classification, 2));
    let run = personalize_user(&model, &anchor, &u, &cfg(Variant::BridgeOnly)).unwrap();
    assert!(frozen_intact(&anchor, &run.adapters));
    let mut moved = false;
    for (&(l, s), m) in run.adapters.iter() {
        let a = anchor.get(l, s).unwrap();
        assert!(m.pair.a.bits_eq(&a.pair.a));
        assert!(m.pair.b.bits_eq(&a.pair.b));
        moved |= !m.c.as_ref().unwrap().bits_eq(&Matrix::identity(2));
    }
    assert!(moved);
}

#[test]
fn frozen_factors_hold_for_every_variant() {
    let model = small_model(4);
    for (seed, kind) in TaskKind::ALL.into_iter().enumerate() {
        let anchor = random_anchor(&small_cfg(), 2, 0.3, seed as u64);
        let u = UserHistory::from(&user(kind, seed as u64));
        for v in Variant::ABLATION {
            let run = personalize_user(&model, &anchor, &u, &cfg(v)).unwrap();
            assert!(frozen_intact(&anchor, &run.adapters), "{v} on {kind}");
            let mask = v.mask();
            for (&(l, s), m) in run.adapters.iter() {
                let start = anchor.get(l, s).unwrap();
                for role in [Role::A, Role::B] {
                    let same = m.factor(role).unwrap().bits_eq(start.factor(role).unwrap());
                    assert!(mask.get(role) || same, "{v} moved frozen {role}");
                }
            }
        }
    }
}

#[test]
fn step_count_is_exact() {
    let model = small_model(1);
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let u = UserHistory::from(&user(TaskKind::Classification, 3));
    for (epochs, shots, batch) in [(1, 10, 16), (1, 10, 3), (2, 7, 2), (3, 5, 5), (1, 1, 4)] {
        let c = PersonalizeConfig {
            epochs,
            shots,
            batch_size: batch,
            ..cfg(Variant::Ours)
        };
        let run = personalize_user(&model, &anchor, &u, &c).unwrap();
        assert_eq!(run.log.steps, epochs * shots.div_ceil(batch));
        assert_eq!(run.log.trace.len(), run.log.steps);
        assert_eq!(run.shots_used, shots);
    }
}

#[test]
fn shot_selection_edge_cases() {
    let model = small_model(1);
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let full = user(TaskKind::Classification, 3);
    let short = UserHistory::new("short", full.history[..4].to_vec());
    let c = PersonalizeConfig {
        shots: 10,
        ..cfg(Variant::Ours)
    };
    let run = personalize_user(&model, &anchor, &short, &c).unwrap();
    assert_eq!(run.shots_used, 4);
    assert!(run.warning.unwrap().contains("fewer"));
    let empty = UserHistory::new("empty", vec![]);
    assert!(personalize_user(&model, &anchor, &empty, &c).is_err());
    let zero = PersonalizeConfig { shots: 0, ..c };
    assert!(personalize_user(&model, &anchor, &short, &zero).is_err());
    let h = UserHistory::from(&full);
    assert_eq!(h.suffix(3), &full.history[47..]);
    assert!(h.suffix(5).ends_with(h.suffix(1)));
}

#[test]
fn ours_fits_a_biased_user() {
    let mut wins = 0;
    for seed in 0..5 {
        let model = small_model(40 + seed);
        let anchor = random_anchor(&small_cfg(), 2, 0.2, 50 + seed);
        let spec = gen_task(TaskKind::Classification, 60 + seed);
        let u = gen_users(&spec, 1, 50, seed).unwrap().remove(0);
        let c = PersonalizeConfig {
            shots: 20,
            shuffle_seed: seed,
            ..cfg(Variant::Ours)
        };
        let run = personalize_user(&model, &anchor, &UserHistory::from(&u), &c).unwrap();
        let before = model.dataset_loss(Some(&anchor), &u.eval).unwrap();
        let after = model.dataset_loss(Some(&run.adapters), &u.eval).unwrap();
        if after < before {
            wins += 1;
        }
    }
    assert!(wins >= 4, "{wins}/5");
}

#[test]
fn users_are_isolated() {
    let model = small_model(1);
    let frozen = model.clone();
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let spec = gen_task(TaskKind::Generation, 3);
    let users = gen_users(&spec, 2, 50, 9).unwrap();
    let c = cfg(Variant::Ours);
    let alone = personalize_user(&model, &anchor, &UserHistory::from(&users[1]), &c).unwrap();
    let first = personalize_user(&model, &anchor, &UserHistory::from(&users[0]), &c).unwrap();
    let after = personalize_user(&model, &anchor, &UserHistory::from(&users[1]), &c).unwrap();
    assert!(alone.adapters.bits_eq(&after.adapters));
    assert!(!first.adapters.bits_eq(&after.adapters));
    assert!(model.bits_eq(&frozen));
}

#[test]
fn oppu_without_steps_is_the_host_model() {
    let model = small_model(1);
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let u = UserHistory::from(&user(TaskKind::Classification, 3));
    let c = PersonalizeConfig {
        epochs: 0,
        ..cfg(Variant::OppuFresh)
    };
    let seq = encode_pair("abc", "A").unwrap();
    let bare = oppu_baseline(&model, None, &u, &c, 2).unwrap();
    assert!(bare.model.bits_eq(&model));
    for (_, m) in bare.run.adapters.iter() {
        assert!(m.delta().data().iter().all(|&v| v == 0.0));
    }
    let y = bare.model.forward(Some(&bare.run.adapters), &seq).unwrap();
    assert!(y.bits_eq(&model.forward(None, &seq).unwrap()));

    let anchored = oppu_baseline(&model, Some(&anchor), &u, &c, 2).unwrap();
    let y = anchored.model.forward(Some(&anchored.run.adapters), &seq).unwrap();
    let want = model.forward(Some(&anchor), &seq).unwrap();
    let err = y
        .data()
        .iter()
        .zip(want.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < 1e-10, "{err}");
}

#[test]
fn oppu_counts_and_determinism() {
    let model = small_model(1);
    let u = UserHistory::from(&user(TaskKind::Ordinal, 3));
    let c = cfg(Variant::OppuFresh);
    let x = oppu_baseline(&model, None, &u, &c, 2).unwrap();
    let y = oppu_baseline(&model, None, &u, &c, 2).unwrap();
    assert!(x.run.adapters.bits_eq(&y.run.adapters));
    for (_, m) in x.run.adapters.iter() {
        assert_eq!(m.trainable_count(), 2 * (m.pair.d_in() + m.pair.d_out()));
    }
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let ours = personalize_user(&model, &anchor, &u, &cfg(Variant::Ours)).unwrap();
    assert!(x.run.adapters.trainable_param_count() > ours.adapters.trainable_param_count());
    assert_eq!(x.run.log.steps, 10);
}

#[test]
fn grad_comparison_is_aligned_and_starts_equal() {
    let model = small_model(1);
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let u = UserHistory::from(&user(TaskKind::Classification, 5));
    let c = PersonalizeConfig {
        batch_size: 8,
        ..cfg(Variant::Ours)
    };
    let cmp = grad_norm_compare(&model, &anchor, &u, &c).unwrap();
    assert_eq!(cmp.ours.len(), 10);
    assert_eq!(cmp.no_bridge.len(), 10);
    let (o, n) = (cmp.ours.b[0].unwrap(), cmp.no_bridge.b[0].unwrap());
    assert!(o.is_finite() && o > 0.0);
    assert_eq!(o.to_bits(), n.to_bits());
    assert!(cmp.ours.c.iter().all(Option::is_some));
    assert!(cmp.no_bridge.c.iter().all(Option::is_none));
    assert!((cmp.ratio - cmp.mean_ours / cmp.mean_no_bridge).abs() < 1e-15);
}

#[test]
fn saturated_target_has_vanishing_gradients() {
    let mut model = small_model(1);
    // push EOS far ahead of every other logit at every position
    model.lnf_bias.data_mut()[0] = 30.0;
    let d = small_cfg().d_model;
    for j in 0..d {
        model.head.data_mut()[EOS * d + j] = if j == 0 { 30.0 } else { 0.0 };
    }
    let anchor = random_anchor(&small_cfg(), 2, 0.3, 3);
    let u = UserHistory::new(
        "sat",
        vec![
            Example {
                input: "abc".into(),
                output: String::new()
            };
            3
        ],
    );
    let c = PersonalizeConfig {
        dropout: false,
        ..cfg(Variant::Ours)
    };
    let cmp = grad_norm_compare(&model, &anchor, &u, &c).unwrap();
    assert!(cmp.ours.b.iter().chain(&cmp.no_bridge.b).all(|g| g.unwrap() < 1e-8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn frozen_a_law(seed in 0u64..1000, bridge_only in any::<bool>()) {
        let model = small_model(seed % 3);
        let anchor = random_anchor(&small_cfg(), 2, 0.3, seed);
        let u = UserHistory::from(&user(TaskKind::ALL[(seed % 3) as usize], seed));
        let v = if bridge_only { Variant::BridgeOnly } else { Variant::Ours };
        let c = PersonalizeConfig { shots: 4, shuffle_seed: seed, ..cfg(v) };
        let run = personalize_user(&model, &anchor, &u, &c).unwrap();
        for (&(l, s), m) in run.adapters.iter() {
            prop_assert!(m.pair.a.bits_eq(&anchor.get(l, s).unwrap().pair.a));
        }
    }
}
