mod common;

use std::collections::BTreeSet;

use common::{budget, tiny, tiny_config};
use promptst::error::{DataError, Error, TrainError};
use promptst::model::ModelParameters;
use promptst::prompt::{trainable_params, PromptKind, PromptSet, PromptVariant};
use promptst::train::{
    fine_tune, pretrain, prompt_tune, single_train, TrainConfig, Trainable, Trainer,
};

fn names_of(params: &ModelParameters, backbone: bool, head: bool) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    if backbone {
        params.backbone.visit(&mut |n, _| {
            out.insert(n);
        });
    }
    if head {
        params.head.visit(&mut |n, _| {
            out.insert(n);
        });
    }
    out
}

#[test]
fn prompt_tuning_freezes_the_backbone_for_every_variant() {
    let data = tiny(2, 80, 1);
    let config = tiny_config(&data);
    let base = pretrain(
        &config,
        &data.train,
        Some(&data.val),
        &budget(TrainConfig::pretrain(0), 5, 8),
    )
    .unwrap();
    for kind in PromptKind::ALL {
        let variant = PromptVariant::new(kind, 2);
        let cfg = budget(TrainConfig::prompt_tune(variant, 1, 3), 100, 4);
        let tuned = prompt_tune(&config, &base.params, &data.train, Some(&data.val), &cfg).unwrap();
        assert_eq!(tuned.params.backbone, base.params.backbone, "{kind}");
        assert_eq!(tuned.outcome.steps, 100);

        let mut expected = names_of(&tuned.params, false, true);
        tuned.prompts.as_ref().unwrap().visit(&mut |n, _| {
            expected.insert(n);
        });
        let keys: BTreeSet<String> = tuned.optimizer_keys.iter().cloned().collect();
        assert_eq!(keys, expected, "{kind}");
        assert_eq!(
            tuned.trainable_count,
            trainable_params(&variant, &tuned.config),
            "{kind}"
        );
    }
}

#[test]
fn full_strategies_track_backbone_and_head() {
    let data = tiny(2, 80, 2);
    let config = tiny_config(&data);
    let full = pretrain(
        &config,
        &data.train,
        None,
        &budget(TrainConfig::pretrain(0), 2, 8),
    )
    .unwrap();
    let all = names_of(&full.params, true, true);
    let single = single_train(
        &config,
        &data.train,
        None,
        &budget(TrainConfig::single(0, 0), 2, 8),
    )
    .unwrap();
    let fine = fine_tune(
        &config,
        &full.params,
        &data.train,
        None,
        &budget(TrainConfig::fine_tune(1, 0), 2, 8),
    )
    .unwrap();
    for model in [&full, &single, &fine] {
        assert_eq!(
            model
                .optimizer_keys
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>(),
            all
        );
        assert_eq!(
            model.trainable_count,
            model.config.backbone_param_count() + model.config.head_param_count()
        );
    }
}

#[test]
fn zero_prompt_tokens_follow_the_head_only_trajectory() {
    let data = tiny(2, 80, 3);
    let config = tiny_config(&data).clone();
    let base = ModelParameters::init(&config, 11);
    let single = promptst::model::ModelConfig {
        attributes: 1,
        ..config.clone()
    };
    let windows = data.train.select_attributes(&[0]).unwrap();
    let head = promptst::model::Head::init(&single, 5);
    let params = ModelParameters {
        backbone: base.backbone.clone(),
        head,
    };
    let frozen = Trainable {
        backbone: false,
        head: true,
        prompts: true,
    };
    let make = |variant| {
        let prompts = PromptSet::init(variant, &single, 5).unwrap();
        let cfg = TrainConfig::prompt_tune(variant, 0, 5);
        Trainer::new(single.clone(), params.clone(), Some(prompts), frozen, &cfg).unwrap()
    };
    let mut a = make(PromptVariant::new(PromptKind::StFull, 0));
    let mut b = make(PromptVariant::none());
    for step in 0..50 {
        let idx: Vec<usize> = (0..4).map(|i| (step * 4 + i) % windows.len()).collect();
        let (x, y) = windows.batch(&idx);
        assert_eq!(
            a.step(&x, &y).unwrap().to_bits(),
            b.step(&x, &y).unwrap().to_bits()
        );
        assert_eq!(a.params(), b.params(), "step {step}");
    }
}

#[test]
fn same_seed_same_run() {
    let data = tiny(2, 80, 4);
    let config = tiny_config(&data);
    let cfg = TrainConfig {
        max_epochs: 3,
        batch_size: 8,
        ..TrainConfig::pretrain(9)
    };
    let a = pretrain(&config, &data.train, Some(&data.val), &cfg).unwrap();
    let b = pretrain(&config, &data.train, Some(&data.val), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    let losses = |m: &promptst::train::TrainedModel| {
        m.outcome
            .history
            .iter()
            .map(|r| (r.train_loss, r.val_loss))
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
    let c = pretrain(
        &config,
        &data.train,
        Some(&data.val),
        &TrainConfig { seed: 10, ..cfg },
    )
    .unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn one_attribute_pretrain_is_single_train() {
    let data = tiny(3, 80, 5);
    let config = tiny_config(&data);
    let cfg = budget(TrainConfig::single(2, 4), 6, 8);
    let single = single_train(&config, &data.train, Some(&data.val), &cfg).unwrap();
    let only = data.select(&[2]).unwrap();
    let one = tiny_config(&only);
    let full = pretrain(
        &one,
        &only.train,
        Some(&only.val),
        &budget(TrainConfig::pretrain(4), 6, 8),
    )
    .unwrap();
    assert_eq!(single.params, full.params);
    assert_eq!(single.outcome.history.len(), full.outcome.history.len());
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let data = tiny(2, 80, 6);
    let config = tiny_config(&data);
    let base = ModelParameters::init(&config, 1);
    let cfg = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::fine_tune(0, 0)
    };
    let tuned = fine_tune(&config, &base, &data.train, Some(&data.val), &cfg).unwrap();
    assert_eq!(tuned.params, base);
    assert!(tuned.outcome.history.is_empty());
}

#[test]
fn every_strategy_lowers_the_training_loss() {
    let data = tiny(2, 70, 7);
    let config = tiny_config(&data);
    let steps = 150;
    let base = pretrain(
        &config,
        &data.train,
        None,
        &budget(TrainConfig::pretrain(0), steps, 32),
    )
    .unwrap();
    let fine = fine_tune(
        &config,
        &base.params,
        &data.train,
        None,
        &budget(TrainConfig::fine_tune(0, 0), steps, 32),
    )
    .unwrap();
    let variant = PromptVariant::new(PromptKind::StFull, 2);
    let prompt = prompt_tune(
        &config,
        &base.params,
        &data.train,
        None,
        &budget(TrainConfig::prompt_tune(variant, 0, 0), steps, 32),
    )
    .unwrap();
    let single = single_train(
        &config,
        &data.train,
        None,
        &budget(TrainConfig::single(0, 0), steps, 32),
    )
    .unwrap();
    for (name, m) in [
        ("full", &base),
        ("fine", &fine),
        ("prompt", &prompt),
        ("single", &single),
    ] {
        let h = &m.outcome.history;
        assert!(
            h.last().unwrap().train_loss < h[0].train_loss,
            "{name}: {:?}",
            (h[0].train_loss, h.last().unwrap().train_loss)
        );
    }
    assert!(
        fine.outcome.history.last().unwrap().train_loss
            <= prompt.outcome.history.last().unwrap().train_loss,
        "fine-tuning has strictly more capacity"
    );
}

#[test]
fn prompt_tokens_receive_updates() {
    let data = tiny(2, 80, 8);
    let config = tiny_config(&data);
    let base = ModelParameters::init(&config, 2);
    for kind in PromptKind::ALL
        .into_iter()
        .filter(|&k| k != PromptKind::None)
    {
        let variant = PromptVariant::new(kind, 2);
        let single = promptst::model::ModelConfig {
            attributes: 1,
            ..config.clone()
        };
        let prompts = PromptSet::init(variant, &single, 0).unwrap();
        let trainable = Trainable {
            backbone: false,
            head: true,
            prompts: true,
        };
        let params = ModelParameters {
            backbone: base.backbone.clone(),
            head: promptst::model::Head::init(&single, 0),
        };
        let mut trainer = Trainer::new(
            single,
            params,
            Some(prompts.clone()),
            trainable,
            &TrainConfig::prompt_tune(variant, 0, 0),
        )
        .unwrap();
        let windows = data.train.select_attributes(&[0]).unwrap();
        let (x, y) = windows.batch(&[0, 1, 2, 3]);
        trainer.step(&x, &y).unwrap();
        assert_ne!(trainer.prompts().unwrap(), &prompts, "{kind}");
    }
}

#[test]
fn rejects_bad_inputs() {
    let data = tiny(2, 80, 9);
    let config = tiny_config(&data);
    let mut empty = data.train.clone();
    empty.windows.clear();
    let err = pretrain(&config, &empty, None, &TrainConfig::pretrain(0)).unwrap_err();
    assert!(matches!(err, Error::Train(TrainError::EmptyDataset)));

    let mut raw = data.train.clone();
    raw.windows[0].x.data_mut()[0] = 3.0;
    let err = pretrain(&config, &raw, None, &TrainConfig::pretrain(0)).unwrap_err();
    assert!(matches!(err, Error::Data(DataError::NotNormalized(_))));

    let base = ModelParameters::init(&config, 0);
    let other = promptst::model::ModelConfig {
        regions: config.regions + 1,
        ..config.clone()
    };
    let cfg = TrainConfig::prompt_tune(PromptVariant::new(PromptKind::StFull, 2), 0, 0);
    assert!(matches!(
        prompt_tune(&other, &base, &data.train, None, &cfg),
        Err(Error::Config(_))
    ));
    let bad = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::pretrain(0)
    };
    assert!(matches!(
        pretrain(&config, &data.train, None, &bad),
        Err(Error::Config(_))
    ));
}
