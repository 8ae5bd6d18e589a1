mod common;

use dismae::evaluation::*;
use dismae::model::ParamGroup;
use dismae::objectives::LossConfig;
use dismae::tensor::Tensor;
use dismae::trainer::{TrainConfig, Trainer};

fn pretrained() -> (Trainer, dismae::checkpoint::TrainedState, dismae::datasets::MultiDomainDataset) {
    let ds = common::small_dataset(2, 6);
    let t = Trainer::new(
        common::small_model(3, 2),
        LossConfig::default(),
        TrainConfig {
            epochs: 1,
            per_domain_batch: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let (state, _) = t.train(&ds, t.init_state(), None).unwrap();
    (t, state, ds)
}

const BACKBONE: [ParamGroup; 4] = [
    ParamGroup::Semantic,
    ParamGroup::Variation,
    ParamGroup::Decoder,
    ParamGroup::DomainClassifier,
];

#[test]
fn probe_touches_only_the_label_head() {
    let (t, state, ds) = pretrained();
    let cfg = ProtocolConfig {
        label_fraction: 0.05,
        epochs: 3,
        ..Default::default()
    };
    let a = linear_probe(&t.model, &state, &ds, &cfg).unwrap();
    for g in BACKBONE {
        assert_eq!(a.params.group_bytes(g), state.params.group_bytes(g), "{g:?}");
    }
    assert_ne!(
        a.params.group_bytes(ParamGroup::LabelHead),
        state.params.group_bytes(ParamGroup::LabelHead)
    );
    let again = linear_probe(&t.model, &state, &ds, &cfg).unwrap();
    assert_eq!(a.params, again.params);
}

#[test]
fn finetune_scope_is_semantic_and_head() {
    let (t, state, ds) = pretrained();
    let cfg = ProtocolConfig {
        label_fraction: 0.5,
        epochs: 2,
        ..Default::default()
    };
    let a = full_finetune(&t.model, &state, &ds, &cfg).unwrap();
    for g in [ParamGroup::Variation, ParamGroup::Decoder, ParamGroup::DomainClassifier] {
        assert_eq!(a.params.group_bytes(g), state.params.group_bytes(g), "{g:?}");
    }
    assert_ne!(
        a.params.group_bytes(ParamGroup::Semantic),
        state.params.group_bytes(ParamGroup::Semantic)
    );
    assert_eq!(a.mapping.adaptation, Adaptation::FullFinetune);
}

#[test]
fn probe_fits_its_training_items() {
    // 36 items, two glyph classes, 8-D features: separable on this toy set.
    let (t, state, ds) = pretrained();
    let cfg = ProtocolConfig {
        label_fraction: 0.09,
        epochs: 200,
        lr: Some(0.5),
        ..Default::default()
    };
    let a = linear_probe(&t.model, &state, &ds, &cfg).unwrap();
    let m = evaluate(&t.model, &a.params, &ds).unwrap();
    assert_eq!(m.overall, 1.0);
    assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
}

#[test]
fn probe_refuses_at_threshold_and_finetune_below() {
    let (t, state, ds) = pretrained();
    let at = ProtocolConfig {
        label_fraction: 0.10,
        ..Default::default()
    };
    let err = linear_probe(&t.model, &state, &ds, &at).unwrap_err();
    assert!(err.is_config() && err.to_string().contains("finetun"), "{err}");
    let below = ProtocolConfig {
        label_fraction: 0.05,
        ..Default::default()
    };
    assert!(full_finetune(&t.model, &state, &ds, &below).unwrap_err().is_config());
}

#[test]
fn metrics_against_hand_counts() {
    // 12 items over two domains, predictions counted by hand.
    let pred = [0, 1, 1, 0, 2, 2, 0, 1, 1, 1, 0, 2];
    let truth = [0, 1, 0, 0, 2, 1, 0, 1, 1, 0, 0, 1];
    let dom = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
    let names = vec!["a".to_string(), "b".to_string()];
    let m = Metrics::from_predictions(&pred, &truth, &dom, &names).unwrap();
    // a: 4/6 correct, b: 4/6 correct
    assert_eq!(m.per_domain["a"], 4.0 / 6.0);
    assert_eq!(m.per_domain["b"], 4.0 / 6.0);
    assert_eq!(m.overall, 8.0 / 12.0);
    let perfect = Metrics::from_predictions(&truth, &truth, &dom, &names).unwrap();
    assert_eq!((perfect.overall, perfect.average), (1.0, 1.0));
}

#[test]
fn evaluate_rejects_unseen_class() {
    let (t, state, _) = pretrained();
    let ds = common::small_dataset(3, 2);
    let err = evaluate(&t.model, &state.params, &ds).unwrap_err().to_string();
    assert!(err.contains("unseen"), "{err}");
}

#[test]
fn domain_probe_needs_two_domains() {
    let x = Tensor::zeros(&[10, 2]);
    assert!(domain_probe(&x, &[0; 10], &DomainProbeConfig::default(), 0).is_err());
}
