use imkws_core::experiment::{evaluate_stream, pretrain_source, templates_for, SourceConfig};
use imkws_core::model::{ModelParams, PretrainConfig};
use imkws_core::stream::{generate_stream, Templates};
use imkws_core::{
    adapt_stream, AdaptConfig, MaskPolicy, Method, NormMode, NormPoolClassifier, SelectionThresholds,
    StreamBatch, StreamConfig,
};

fn small_stream() -> StreamConfig {
    StreamConfig {
        n_batches: 4,
        batch_size: 32,
        frames: 20,
        bins: 8,
        ..StreamConfig::default()
    }
}

fn small_mask() -> MaskPolicy {
    MaskPolicy {
        n_time_masks: 1,
        max_time_len: 4,
        n_freq_masks: 1,
        max_freq_len: 2,
    }
}

fn config(method: Method) -> AdaptConfig {
    AdaptConfig {
        method,
        mask_policy: small_mask(),
        batch_size: 32,
        lr: 1e-2,
        ..AdaptConfig::default()
    }
}

fn setup() -> (NormPoolClassifier, Templates, StreamConfig) {
    let stream = small_stream();
    let templates = templates_for(&stream).unwrap();
    let source = SourceConfig {
        n_per_class: 20,
        hidden: 8,
        train: PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        },
        ..SourceConfig::default()
    };
    let (model, _) = pretrain_source(&source, &stream, &templates).unwrap();
    (model, templates, stream)
}

fn batches(stream: &StreamConfig, templates: &Templates) -> Vec<StreamBatch> {
    generate_stream(stream, templates).unwrap().collect()
}

fn frozen_parts_equal(a: &ModelParams, b: &ModelParams) -> bool {
    a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2 && a.eps == b.eps
}

#[test]
fn unadapted_leaves_every_parameter_untouched() {
    let (model, templates, stream) = setup();
    let (after, run) = evaluate_stream(&model, batches(&stream, &templates), &config(Method::Unadapted), 4).unwrap();
    assert_eq!(after.params(), model.params());
    assert!(run.trace.records.iter().all(|r| r.n_selected == 0 && r.grad_norm == 0.0));
}

#[test]
fn rejecting_every_sample_means_no_update() {
    let (model, templates, stream) = setup();
    let cfg = AdaptConfig {
        thresholds: SelectionThresholds {
            tau_dem: 1e9,
            tau_pkc: 1.0,
        },
        refresh_running_stats: false,
        ..config(Method::Imkws)
    };
    let (after, run) = evaluate_stream(&model, batches(&stream, &templates), &cfg, 4).unwrap();
    assert!(run.trace.records.iter().all(|r| r.n_selected == 0 && r.grad_norm == 0.0));
    assert_eq!(after.params().gamma, model.params().gamma);
    assert_eq!(after.params().beta, model.params().beta);
}

#[test]
fn gradient_methods_only_move_the_affine_parameters() {
    let (model, templates, stream) = setup();
    for method in [Method::Tent, Method::Imkws] {
        let cfg = AdaptConfig {
            thresholds: SelectionThresholds {
                tau_dem: 1e9,
                tau_pkc: -1.0,
            },
            ..config(method)
        };
        let (after, _) = evaluate_stream(&model, batches(&stream, &templates), &cfg, 4).unwrap();
        assert!(frozen_parts_equal(after.params(), model.params()), "{method}");
        let moved = after.params().gamma != model.params().gamma || after.params().beta != model.params().beta;
        assert!(moved, "{method} never updated the affine parameters");
    }
}

#[test]
fn tbn_adopts_batch_statistics_without_touching_parameters() {
    let (model, templates, stream) = setup();
    let all = batches(&stream, &templates);
    let first = all[0].clone().into_parts().0;
    let expected: Vec<usize> = model
        .forward(&first.grids, &NormMode::BatchStats)
        .unwrap()
        .0
        .iter()
        .map(|l| l.argmax())
        .collect();
    let (after, run) = evaluate_stream(&model, all, &config(Method::Tbn), 4).unwrap();
    assert_eq!(&run.predictions[..expected.len()], &expected[..]);
    assert!(frozen_parts_equal(after.params(), model.params()));
    assert_eq!(after.params().gamma, model.params().gamma);
    assert_eq!(after.params().beta, model.params().beta);
    assert_ne!(after.params().running_mean, model.params().running_mean);
}

#[test]
fn runs_are_deterministic() {
    let (model, templates, stream) = setup();
    for method in Method::ALL {
        let cfg = config(method);
        let (a_model, a) = evaluate_stream(&model, batches(&stream, &templates), &cfg, 4).unwrap();
        let (b_model, b) = evaluate_stream(&model, batches(&stream, &templates), &cfg, 4).unwrap();
        assert_eq!(a, b, "{method}");
        assert_eq!(a_model.params(), b_model.params(), "{method}");
    }
}

#[test]
fn labels_cannot_influence_adaptation() {
    let (model, templates, stream) = setup();
    let scrambled: Vec<StreamBatch> = batches(&stream, &templates)
        .into_iter()
        .map(|b| {
            let index = b.batch_index();
            let (batch, labels) = b.into_parts();
            let flipped = labels.iter().map(|y| y.map(|c| (c + 1) % 4)).collect();
            StreamBatch::new(index, batch.grids, flipped).unwrap()
        })
        .collect();
    for method in Method::ALL {
        let cfg = config(method);
        let (a_model, a) = evaluate_stream(&model, batches(&stream, &templates), &cfg, 4).unwrap();
        let (b_model, b) = evaluate_stream(&model, scrambled.clone(), &cfg, 4).unwrap();
        assert_eq!(a.predictions, b.predictions, "{method}");
        assert_eq!(a.trace, b.trace, "{method}");
        assert_eq!(a_model.params(), b_model.params(), "{method}");
        assert_ne!(a.labels, b.labels);
    }
}

#[test]
fn predictions_precede_each_update() {
    let (model, templates, stream) = setup();
    let all = batches(&stream, &templates);
    let first = all[0].clone().into_parts().0;
    let expected: Vec<usize> = model
        .forward(&first.grids, &NormMode::BatchStats)
        .unwrap()
        .0
        .iter()
        .map(|l| l.argmax())
        .collect();
    let mut adapted = model.clone();
    let unlabeled = all.into_iter().map(|b| b.into_parts().0);
    let outcome = adapt_stream(&mut adapted, unlabeled, &config(Method::Tent)).unwrap();
    assert_eq!(&outcome.predictions[..expected.len()], &expected[..]);
    assert_eq!(outcome.trace.records.len(), stream.n_batches);
}

#[test]
fn empty_stream_is_an_error() {
    let (mut model, _, _) = setup();
    let err = adapt_stream(&mut model, Vec::new(), &config(Method::Tent));
    assert!(err.is_err());
}
