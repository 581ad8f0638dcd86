mod common;

use common::*;
use moe_laplace::data::{generate, DataSpec, Dataset, Generator, Split};
use moe_laplace::error::Error;
use moe_laplace::model::{MoEConfig, MoEModel, ParamGroup};
use moe_laplace::train::{evaluate_loss, map_objective, train, FreezeFlags, Schedule, TrainConfig};

fn blobs(seed: u64) -> (Dataset, Dataset, Dataset) {
    let data = generate(&DataSpec {
        generator: Generator::Blobs,
        num_classes: 2,
        dim: 4,
        separation: 4.0,
        n_train: 400,
        n_val: 200,
        n_test: 400,
        n_ood: 0,
        seed,
        ..DataSpec::default()
    })
    .unwrap();
    let get = |s| data.split(s).unwrap().clone();
    (get(Split::Train), get(Split::Val), get(Split::Test))
}

fn blob_model(seed: u64) -> MoEModel {
    model(MoEConfig {
        num_classes: 2,
        d_input: 4,
        seed,
        ..MoEConfig::default()
    })
}

#[test]
fn separable_blobs_are_learned() {
    for seed in 0..5 {
        let (tr, va, te) = blobs(seed);
        let cfg = TrainConfig {
            steps: 500,
            lr: 1e-2,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&blob_model(seed), &tr, &va, &cfg).unwrap();
        let (_, acc) = evaluate_loss(&out.model, &te).unwrap();
        assert!(acc >= 0.95, "seed {seed}: accuracy {acc}");
    }
}

#[test]
fn one_small_full_batch_step_lowers_the_objective() {
    let cfg = small_config(3);
    let m = model(cfg.clone());
    let data = dataset(24, cfg.d_input, cfg.num_classes, 4);
    let tc = TrainConfig {
        steps: 1,
        batch_size: 24,
        lr: 1e-6,
        grad_clip: 0.0,
        schedule: Schedule::Constant,
        weight_decay_lambda: 0.5,
        ..TrainConfig::default()
    };
    let empty = data.subset(&[]);
    let out = train(&m, &data, &empty, &tc).unwrap();
    let free = FreezeFlags::default();
    let before = map_objective(&m, &data, 0.5, &free).unwrap().0;
    let after = map_objective(&out.model, &data, 0.5, &free).unwrap().0;
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn training_is_bit_reproducible() {
    let (tr, va, _) = blobs(9);
    let cfg = TrainConfig {
        steps: 60,
        eval_interval: 20,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&blob_model(9), &tr, &va, &cfg).unwrap();
    let b = train(&blob_model(9), &tr, &va, &cfg).unwrap();
    assert_eq!(a.model.fingerprint(), b.model.fingerprint());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.best_step, b.best_step);
}

fn group_bits(m: &MoEModel, group: ParamGroup) -> Vec<u64> {
    let mut out = Vec::new();
    m.visit_params(|g, _, _, p| {
        if g == group {
            out.extend(p.data().iter().map(|v| v.to_bits()));
        }
    });
    out
}

#[test]
fn frozen_groups_are_untouched() {
    let (tr, va, _) = blobs(2);
    let m = blob_model(2);
    let cfg = TrainConfig {
        steps: 40,
        freeze: FreezeFlags::moe_only(),
        ..TrainConfig::default()
    };
    let out = train(&m, &tr, &va, &cfg).unwrap();
    for g in [ParamGroup::Encoder, ParamGroup::Gate, ParamGroup::Head] {
        assert_eq!(group_bits(&m, g), group_bits(&out.model, g), "{g:?} moved");
    }
    for g in [ParamGroup::ExpertW1, ParamGroup::ExpertW2] {
        assert_ne!(group_bits(&m, g), group_bits(&out.model, g), "{g:?} did not move");
    }
}

#[test]
fn divergence_reports_step_and_keeps_last_good_model() {
    let cfg = small_config(5);
    let m = model(cfg.clone());
    let mut data = dataset(8, cfg.d_input, cfg.num_classes, 6);
    data.features[3] = vec![1e200; cfg.d_input];
    let tc = TrainConfig {
        steps: 5,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let empty = data.subset(&[]);
    let fail = train(&m, &data, &empty, &tc).unwrap_err();
    assert!(matches!(fail.error, Error::Divergence { .. }), "{:?}", fail.error);
    assert_eq!(fail.last_good.model.fingerprint(), m.fingerprint());
}
