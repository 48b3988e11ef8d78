use super::*;

fn small_config() -> StreamConfig {
    StreamConfig {
        n_batches: 4,
        batch_size: 16,
        frames: 8,
        bins: 6,
        seed: 3,
        ..StreamConfig::default()
    }
}

fn shape(margin: f64) -> TemplateShape {
    TemplateShape {
        margin,
        ..TemplateShape::default()
    }
}

fn templates_for(cfg: &StreamConfig) -> Templates {
    make_class_templates(cfg.n_classes, cfg.frames, cfg.bins, cfg.template_seed, &TemplateShape::default()).unwrap()
}

#[test]
fn templates_are_deterministic_and_separated() {
    let a = make_class_templates(4, 8, 6, 1, &shape(1.0)).unwrap();
    let b = make_class_templates(4, 8, 6, 1, &shape(1.0)).unwrap();
    assert_eq!(a, b);
    assert!(a[..3].iter().all(|bank| bank.len() == 1));
    let bank = TemplateShape::default();
    assert_eq!(a[3].len(), bank.fillers + bank.silences);
    assert_eq!(a[3].iter().filter(|g| g.power() == 0.0).count(), bank.silences);
    let threshold = (48f64).sqrt();
    for i in 0..4 {
        for j in i + 1..4 {
            for x in &a[i] {
                for y in &a[j] {
                    assert!(frobenius(x, y) >= threshold);
                }
            }
        }
    }
    assert!(make_class_templates(4, 8, 6, 1, &shape(100.0)).is_err());
    let empty = TemplateShape {
        fillers: 0,
        silences: 0,
        ..shape(1.0)
    };
    assert!(make_class_templates(4, 8, 6, 1, &empty).is_err());
}

#[test]
fn keyword_events_have_the_configured_extent_and_power() {
    let s = TemplateShape::default();
    let t = make_class_templates(4, 20, 6, 3, &s).unwrap();
    for bank in &t[..3] {
        let g = &bank[0];
        let active: Vec<usize> = (0..20)
            .filter(|&r| g.data().row(r).iter().any(|v| *v != 0.0))
            .collect();
        assert_eq!(active.len(), 4);
        assert_eq!(active[3] - active[0], 3);
        let want = s.event_fraction * s.event_amplitude * s.event_amplitude;
        assert!((g.power() - want).abs() < 1e-9);
    }
}

#[test]
fn templates_are_linearly_separable_under_small_noise() {
    // Nearest-prototype classification; it must be near-perfect.
    let t = make_class_templates(4, 8, 6, 2, &shape(1.0)).unwrap();
    let mut rng = SeedStream::new(5).rng();
    let mut correct = 0;
    let n = 400;
    for i in 0..n {
        let class = i % 4;
        let x = sample_example(&t, class, 0.3, &mut rng).unwrap();
        let dist = |c: usize| t[c].iter().map(|p| frobenius(&x, p)).fold(f64::INFINITY, f64::min);
        let pred = (0..4).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        correct += usize::from(pred == class);
    }
    assert!(correct as f64 / n as f64 > 0.95);
}

#[test]
fn sample_example_statistics() {
    let t = make_class_templates(2, 3, 2, 0, &shape(0.5)).unwrap();
    let mut rng = SeedStream::new(1).rng();
    assert_eq!(sample_example(&t, 0, 0.0, &mut rng).unwrap(), t[0][0]);
    for _ in 0..20 {
        let x = sample_example(&t, 1, 0.0, &mut rng).unwrap();
        assert!(t[1].contains(&x));
    }
    assert!(sample_example(&t, 2, 1.0, &mut rng).is_err());

    let std = 0.7;
    let draws = 10_000;
    let mut mean = ndarray::Array2::<f64>::zeros((3, 2));
    for _ in 0..draws {
        mean += sample_example(&t, 0, std, &mut rng).unwrap().data();
    }
    mean /= draws as f64;
    let tol = 3.0 * std / 100.0;
    for (m, v) in mean.iter().zip(t[0][0].data().iter()) {
        assert!((m - v).abs() < tol);
    }

    let a = sample_example(&t, 0, std, &mut SeedStream::new(9).rng()).unwrap();
    let b = sample_example(&t, 0, std, &mut SeedStream::new(9).rng()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn snr_mixing_hits_target() {
    let mut rng = SeedStream::new(2).rng();
    let x = draw_noise(&mut rng, 8, 6, NoiseKind::White);
    let n = draw_noise(&mut rng, 8, 6, NoiseKind::Structured);
    for snr in [-10.0, 0.0, 10.0] {
        let mixed = mix_noise_at_snr(&x, &n, snr).unwrap();
        let added = FeatureGrid::from_array_unchecked(mixed.data() - x.data());
        let ratio = x.power() / added.power();
        let want = 10f64.powf(snr / 10.0);
        assert!(((ratio - want) / want).abs() < 1e-9, "snr {snr}");
    }
    assert!((noise_scale_for_snr(1.0, 1.0, -10.0) - 10f64.sqrt()).abs() < 1e-12);
    let zero = FeatureGrid::zeros(8, 6);
    assert!(mix_noise_at_snr(&x, &zero, 0.0).is_err());
    assert!(mix_noise_at_snr(&x, &FeatureGrid::zeros(2, 2), 0.0).is_err());
}

fn class_counts(cfg: &StreamConfig) -> Vec<usize> {
    let t = templates_for(cfg);
    let mut counts = vec![0; cfg.n_classes];
    for b in generate_stream(cfg, &t).unwrap() {
        for y in b.into_parts().1 {
            counts[y.unwrap()] += 1;
        }
    }
    counts
}

#[test]
fn imbalance_ratio_is_respected() {
    let cfg = StreamConfig {
        n_batches: 100,
        batch_size: 100,
        frames: 2,
        bins: 2,
        ratio: 8.0,
        ..StreamConfig::default()
    };
    let counts = class_counts(&cfg);
    let nonkw = counts[3] as f64 / 10_000.0;
    assert!((nonkw - 8.0 / 9.0).abs() < 0.02, "{nonkw}");

    let balanced = StreamConfig { ratio: 1.0, ..cfg };
    let counts = class_counts(&balanced);
    for &c in &counts[..3] {
        assert!((c as f64 / 10_000.0 - 1.0 / 6.0).abs() < 0.02);
    }
}

#[test]
fn stream_is_deterministic_and_lazy() {
    let cfg = small_config();
    let t = templates_for(&cfg);
    let a: Vec<StreamBatch> = generate_stream(&cfg, &t).unwrap().collect();
    let b: Vec<StreamBatch> = generate_stream(&cfg, &t).unwrap().collect();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert!(a.iter().enumerate().all(|(i, b)| b.batch_index() == i && b.len() == 16));
    let other = StreamConfig { seed: 4, ..cfg.clone() };
    let c: Vec<StreamBatch> = generate_stream(&other, &t).unwrap().collect();
    assert_ne!(a, c);
    assert_eq!(generate_stream(&cfg, &t).unwrap().size_hint(), (4, Some(4)));
}

#[test]
fn stream_rejects_mismatched_templates() {
    let cfg = small_config();
    let t = make_class_templates(3, 8, 6, 0, &shape(1.0)).unwrap();
    assert!(generate_stream(&cfg, &t).is_err());
    let bad = StreamConfig { ratio: 0.5, ..cfg };
    assert!(bad.validate().is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small_config();
    let text = cfg.to_toml_string().unwrap();
    for key in ["n_classes", "ratio", "snr_db", "n_batches", "batch_size", "T", "F", "seed"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} ="))), "missing {key}");
    }
    assert_eq!(StreamConfig::from_toml_str(&text).unwrap(), cfg);
    let partial = StreamConfig::from_toml_str("ratio = 4\nsnr_db = 0\nT = 20\n").unwrap();
    assert_eq!(partial.ratio, 4.0);
    assert_eq!(partial.frames, 20);
    assert_eq!(partial.bins, 40);
    assert!(StreamConfig::from_toml_str("bogus = 1").is_err());
}

#[test]
fn feature_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    let mut rng = SeedStream::new(4).rng();
    let rows: Vec<LabeledGrid> = (0..5)
        .map(|i| {
            let g = draw_noise(&mut rng, 3, 4, NoiseKind::White);
            (g, if i == 2 { None } else { Some(i % 3) })
        })
        .collect();
    write_feature_csv(&path, &rows).unwrap();
    let back = load_feature_csv(&path).unwrap();
    assert_eq!(back, rows);
}

#[test]
fn feature_csv_empty_and_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert!(load_feature_csv(&empty).unwrap().is_empty());

    let short = dir.path().join("short.csv");
    std::fs::write(&short, "label,T,F,v0,v1,v2,v3\n1,2,2,0.1,0.2,0.3,0.4\n0,2,2,0.1,0.2,0.3\n").unwrap();
    match load_feature_csv(&short) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }

    let mixed = dir.path().join("mixed.csv");
    std::fs::write(&mixed, "1,2,2,0.1,0.2,0.3,0.4\n1,1,2,0.5,0.6\n2,1,2,0.5,0.6\n").unwrap();
    match load_feature_csv(&mixed) {
        Err(Error::Parse { line, reason, .. }) => {
            assert_eq!(line, 2);
            assert!(reason.contains("earlier rows"));
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn rows_chunk_into_batches() {
    let rows: Vec<LabeledGrid> = (0..5).map(|i| (FeatureGrid::zeros(1, 1), Some(i))).collect();
    let batches = batches_from_rows(rows, 2).unwrap();
    assert_eq!(batches.iter().map(StreamBatch::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    assert_eq!(batches[2].batch_index(), 2);
}
