use super::*;
use crate::backbone::BackboneConfig;
use crate::hypernet::{Hypernet, HypernetConfig};
use crate::numerics::Rng;
use crate::synthbench::{DatasetParams, DescriptionVariant, SplitPlan};

fn small_model() -> Backbone {
    let cfg = BackboneConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 64,
        max_seq: 48,
    };
    Backbone::build(cfg, &Rng::new(5)).unwrap()
}

fn jittered_hypernet(model: &Backbone) -> Hypernet {
    let cfg = HypernetConfig {
        rank: 2,
        d_task: 16,
        hidden: 8,
        ..HypernetConfig::new(*model.config())
    };
    let mut h = Hypernet::new(cfg, &Rng::new(1)).unwrap();
    let mut rng = Rng::new(2);
    for m in h.params_mut() {
        *m = m
            .add(&crate::Matrix::randn(m.rows(), m.cols(), 0.05, &mut rng))
            .unwrap();
    }
    h
}

fn dataset(kind: TaskKind, seed: u64) -> Dataset {
    Dataset::generate(&DatasetParams {
        kind,
        task_seed: seed,
        classes: None,
        history_len: 50,
        eval_len: 3,
        user_seed: seed + 1,
        split_seed: seed + 2,
        plan: SplitPlan {
            task_samples: 8,
            shots: 10,
            target_users: 2,
            sharer_users: 1,
        },
    })
    .unwrap()
}

fn lab_cfg() -> LabConfig {
    let mut c = LabConfig::desk();
    c.rank = 2;
    c
}

#[test]
fn method_names_roundtrip() {
    for m in [Method::Base, Method::Anchor].into_iter().chain(Method::ABLATION) {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!("bogus".parse::<Method>().is_err());
    assert_eq!(Method::ABLATION.len(), 5);
}

#[test]
fn scores_follow_the_task_kind() {
    let ds = dataset(TaskKind::Ordinal, 3);
    let golds: Vec<String> = ds.users[0].eval.iter().map(|e| e.output.clone()).collect();
    let raw = score_predictions(&ds.spec, &golds, &golds).unwrap();
    assert_eq!(raw, RawMetrics::Ordinal { mae: 0.0, rmse: 0.0 });
    let gen = dataset(TaskKind::Generation, 3);
    let g: Vec<String> = gen.users[0].eval.iter().map(|e| e.output.clone()).collect();
    assert_eq!(score_predictions(&gen.spec, &g, &g).unwrap().pair(), (1.0, 1.0));
}

#[test]
fn zero_epochs_match_anchor_scores() {
    let model = small_model();
    let h = jittered_hypernet(&model);
    for kind in TaskKind::ALL {
        let ds = dataset(kind, 11);
        let anchor = h.generate_anchor(&ds.spec.description, model.config()).unwrap();
        let mut cfg = lab_cfg();
        cfg.personalize.epochs = 0;
        let stage1 = run_method(&model, &anchor, &ds, Method::Anchor, &cfg).unwrap();
        let ours = run_method(&model, &anchor, &ds, Method::Personalized(Variant::Ours), &cfg).unwrap();
        assert_eq!(stage1.raw, ours.raw);
        assert_eq!(ours.total_steps(), 0);
    }
}

#[test]
fn ablation_shares_shots_and_audits_masks() {
    let model = small_model();
    let h = jittered_hypernet(&model);
    let ds = dataset(TaskKind::Classification, 4);
    let anchor = h.generate_anchor(&ds.spec.description, model.config()).unwrap();
    let runs = ablate(&model, &anchor, &ds, &lab_cfg()).unwrap();
    assert_eq!(runs.len(), 5);
    for r in &runs {
        assert_eq!(r.users.len(), 2);
        for u in &r.users {
            assert!(u.frozen_intact);
            assert_eq!(u.shots_used, 10);
            assert_eq!(u.steps, 10);
        }
    }
    let table = report_for("ours", &runs[3..4]).unwrap();
    table.verify().unwrap();
    let costs = crate::metrics::cost_report(&cost_entries(&runs)).unwrap();
    assert_eq!(costs.rows.len(), 5);
}

#[test]
fn runs_are_deterministic() {
    let model = small_model();
    let h = jittered_hypernet(&model);
    let ds = dataset(TaskKind::Generation, 6);
    let anchor = h.generate_anchor(&ds.spec.description, model.config()).unwrap();
    let m = Method::Personalized(Variant::Ours);
    let a = run_method(&model, &anchor, &ds, m, &lab_cfg()).unwrap();
    let b = run_method(&model, &anchor, &ds, m, &lab_cfg()).unwrap();
    assert_eq!(a.raw, b.raw);
    assert!(a
        .adapters
        .iter()
        .zip(&b.adapters)
        .all(|(x, y)| x.0 == y.0 && x.1.bits_eq(&y.1)));
}

#[test]
fn sweep_checks_history_and_emits_csv() {
    let model = small_model();
    let h = jittered_hypernet(&model);
    let ds = dataset(TaskKind::Ordinal, 8);
    let anchor = h.generate_anchor(&ds.spec.description, model.config()).unwrap();
    let pts = sweep_shots(
        &model,
        &anchor,
        &ds,
        &[Method::Personalized(Variant::Ours)],
        &[1, 5],
        &lab_cfg(),
    )
    .unwrap();
    assert_eq!(pts.len(), 2);
    let csv = sweep_csv(&pts);
    assert!(csv.starts_with("shot,variant,score,seed\n1,ours,"));
    assert!(sweep_shots(&model, &anchor, &ds, &[Method::Anchor], &[51], &lab_cfg()).is_err());
    assert_eq!(SHOT_SWEEP, [1, 5, 10, 30, 50]);
}

#[test]
fn adaptability_needs_two_tasks_and_has_unit_diagonal() {
    let model = small_model();
    let h = jittered_hypernet(&model);
    let one = vec![dataset(TaskKind::Classification, 1)];
    assert!(adaptability_matrix(&model, &h, &one, &lab_cfg()).is_err());
    let two = vec![dataset(TaskKind::Classification, 1), dataset(TaskKind::Generation, 2)];
    let mut cfg = lab_cfg();
    cfg.personalize.shots = 2;
    match adaptability_matrix(&model, &h, &two, &cfg) {
        Ok(m) => {
            for i in 0..2 {
                assert_eq!(m.sharer[i][i].ratio, 1.0);
                assert!(m.prisp[i].iter().all(|r| r.ratio == 1.0));
            }
        }
        // an untrained model may score zero on a target, which has no ratio
        Err(e) => assert!(matches!(e, Error::Data(_)), "{e}"),
    }
}

#[test]
fn robustness_repeats_identically() {
    let model = small_model();
    let h = jittered_hypernet(&model);
    let ds = dataset(TaskKind::Classification, 9);
    let mut cfg = lab_cfg();
    cfg.personalize.shots = 2;
    let v = [
        DescriptionVariant::Canonical,
        DescriptionVariant::Canonical,
        DescriptionVariant::Imprecise,
    ];
    let t = robustness(&model, &h, &ds, &v, &cfg).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.rows[0], t.rows[1]);
    assert!(t.stage1_spread >= 0.0 && t.stage2_spread >= 0.0);
    assert!(robustness(&model, &h, &ds, &[], &cfg).is_err());
}
