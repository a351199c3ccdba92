use super::*;
use crate::datagen::{default_conversion, default_profiles, render_scene, scene_to_mosaic};
use crate::util::derive_rng;
use std::time::Duration;

fn conversion_batch(n: usize) -> Vec<CfaMosaic> {
    let profiles = default_profiles();
    (0..n)
        .map(|i| {
            let profile = &profiles[i % profiles.len()];
            let mut rng = derive_rng(0xbe, i as u64, 0);
            let scene = render_scene(profile, 40, &mut rng);
            scene_to_mosaic(
                &scene,
                crate::isp::CfaPattern::Rggb,
                12,
                256,
                4095,
                default_conversion().wb_gains,
                None,
                i as u64,
            )
            .unwrap()
        })
        .collect()
}

fn configs() -> (ConversionConfig, ConversionConfig) {
    let mut cfg8 = default_conversion();
    cfg8.out_depth = 8;
    let mut cfg16 = default_conversion();
    cfg16.out_depth = 16;
    (cfg8, cfg16)
}

#[test]
fn spin_wait_calibration() {
    // A 10 ms spin-wait must land in [9, 12] ms: the loop cannot return
    // early, and overshoot is bounded on an unloaded core.
    let report = time_stage("spin", 8, 2, || {
        let t0 = std::time::Instant::now();
        while t0.elapsed() < Duration::from_millis(10) {
            std::hint::spin_loop();
        }
    })
    .unwrap();
    let mean = report.mean();
    assert!((0.009..=0.012).contains(&mean), "spin-wait mean {mean:.4}s");
}

#[test]
fn constant_work_stub_is_stable() {
    let report = time_stage("stub", 10, 3, || {
        let mut acc = 0.0f64;
        for i in 0..2_000_000u64 {
            acc += (i as f64).sqrt();
        }
        std::hint::black_box(acc);
    })
    .unwrap();
    assert!(
        report.stddev() / report.mean() < 0.20,
        "stub stddev {:.2e} vs mean {:.2e}",
        report.stddev(),
        report.mean()
    );
}

#[test]
fn report_records_exactly_the_requested_runs() {
    let report = time_stage("count", 50, 5, || std::hint::black_box(())).unwrap();
    assert_eq!(report.n_runs(), 50);
    assert_eq!(report.warmup_runs, 5);
    assert_eq!(report.samples.len(), 50);
}

#[test]
fn too_few_runs_are_rejected() {
    assert!(matches!(
        time_stage("bad", 4, 0, || {}),
        Err(BenchError::InvalidRequest(_))
    ));
}

#[test]
fn mean_is_recomputable_from_retained_samples() {
    let report = TimingReport {
        stage: "x".to_string(),
        warmup_runs: 0,
        samples: vec![1.0, 2.0, 3.0, 4.0, 5.0],
        timer_resolution: 1e-9,
    };
    assert_eq!(report.mean(), 3.0);
    // Sample stddev with n-1 denominator: sqrt(10/4).
    assert!((report.stddev() - (10.0f64 / 4.0).sqrt()).abs() < 1e-12);
}

#[test]
fn unstable_reports_are_flagged() {
    let report = TimingReport {
        stage: "x".to_string(),
        warmup_runs: 0,
        samples: vec![1.0, 10.0, 1.0, 10.0, 1.0],
        timer_resolution: 1e-9,
    };
    assert!(!report.is_stable());
    assert!(report.flags().iter().any(|f| f.contains("unstable")));
}

#[test]
fn coarse_timer_resolution_is_flagged_not_fatal() {
    let report = TimingReport {
        stage: "x".to_string(),
        warmup_runs: 0,
        samples: vec![0.001; 5],
        timer_resolution: 0.5,
    };
    assert!(report.flags().iter().any(|f| f.contains("timer resolution")));
}

#[test]
fn empty_conversion_batch_is_near_instant() {
    let (cfg8, cfg16) = configs();
    let (r8, _r16) = bench_conversion(&[], &cfg8, &cfg16, 5, 1).unwrap();
    assert!(r8.mean() < 1e-3, "empty batch mean {:.2e}s", r8.mean());
}

#[test]
fn doubling_the_batch_roughly_doubles_conversion_time() {
    let batch = conversion_batch(120);
    let (cfg8, cfg16) = configs();
    let (small, _) = bench_conversion(&batch[..60], &cfg8, &cfg16, 6, 2).unwrap();
    let (large, _) = bench_conversion(&batch, &cfg8, &cfg16, 6, 2).unwrap();
    let ratio = large.mean() / small.mean();
    assert!(
        (1.4..=2.6).contains(&ratio),
        "expected ~2x scaling, got {ratio:.2} ({:.4}s -> {:.4}s)",
        small.mean(),
        large.mean()
    );
}

#[test]
fn mismatched_depth_configs_are_rejected() {
    let (cfg8, _) = configs();
    let err = bench_conversion(&[], &cfg8, &cfg8, 5, 0);
    assert!(matches!(err, Err(BenchError::InvalidRequest(_))));
}

fn tiny_matrix() -> BenchMatrix {
    let mk = |stage: &str, base: f64| TimingReport {
        stage: stage.to_string(),
        warmup_runs: 1,
        samples: vec![base, base * 1.01, base * 0.99, base, base],
        timer_resolution: 1e-9,
    };
    let mut classification = Vec::new();
    for (v, t) in [
        (PipelineVariant::OriginalRaw, 0.10),
        (PipelineVariant::PackedRaw, 0.05),
        (PipelineVariant::BcaRaw, 0.30),
        (PipelineVariant::Rgb8, 0.11),
        (PipelineVariant::Rgb16, 0.11),
    ] {
        classification.push(BenchEntry {
            variant: v,
            arch: Architecture::TinyVgg,
            report: mk(&format!("classify-{v}"), t),
        });
    }
    BenchMatrix {
        batch_size: 457,
        input_size: 40,
        conversion8: mk("conversion-rgb8", 0.20),
        conversion16: mk("conversion-rgb16", 0.22),
        classification,
    }
}

#[test]
fn totals_are_additive_by_construction() {
    let m = tiny_matrix();
    for v in PipelineVariant::ALL {
        let total = m.total_mean(v, Architecture::TinyVgg).unwrap();
        let cls = m.classification_report(v, Architecture::TinyVgg).unwrap().mean();
        let conv = m.conversion_for(v).map_or(0.0, |r| r.mean());
        assert_eq!(total, cls + conv, "{v}");
        if !v.conversion_required() {
            assert_eq!(total, cls);
        }
    }
}

#[test]
fn speedups_compare_each_raw_variant_to_each_rgb_total() {
    let m = tiny_matrix();
    let speedups = m.speedups(Architecture::TinyVgg);
    assert_eq!(speedups.len(), 6);
    let (min, max) = m.speedup_range(Architecture::TinyVgg).unwrap();
    // Packed vs rgb16: (0.22+0.11)/0.05 = 6.6; BCA vs rgb8: (0.20+0.11)/0.30.
    assert!((max - 6.6).abs() < 0.05, "max {max}");
    assert!((min - 0.31 / 0.30).abs() < 0.05, "min {min}");
}

#[test]
fn rendered_tables_and_exports_are_deterministic() {
    let m = tiny_matrix();
    assert_eq!(m.render_classification_table(), m.render_classification_table());
    assert_eq!(m.render_total_table(), m.render_total_table());
    assert_eq!(m.to_csv(), m.to_csv());
    assert_eq!(m.to_jsonl(), m.to_jsonl());

    let table = m.render_classification_table();
    assert!(table.contains("457 samples"));
    assert!(table.contains("40x40x1"));
    assert!(table.contains("40x40x3"));
    let totals = m.render_total_table();
    assert!(totals.contains("RAW vs RGB: "));
    let csv = m.to_csv();
    assert!(csv.starts_with("variant,arch,stage,n,mean_s,stddev_s\n"));
    assert!(csv.contains("rgb8,-,conversion,5,"));
    let jsonl = m.to_jsonl();
    assert_eq!(jsonl.lines().count(), 5 * 2 + 5 * 5);
    assert!(jsonl.lines().all(|l| l.starts_with('{') && l.ends_with('}')));
}

#[test]
fn classification_bench_validates_the_model_and_batch() {
    use crate::variant::{build_variant_model, VariantModelSpec};
    let spec = VariantModelSpec::new(PipelineVariant::OriginalRaw, Architecture::TinyVgg);
    let model = build_variant_model(&spec, &mut derive_rng(1, 2, 3)).unwrap();
    let batch = crate::nn::gradcheck::random_input(&[8, 1, 40, 40], 4);
    let report =
        bench_classification(PipelineVariant::OriginalRaw, Architecture::TinyVgg, &model, &batch, 5, 1)
            .unwrap();
    assert_eq!(report.n_runs(), 5);

    // Wrong architecture and wrong batch shape are both rejected.
    assert!(bench_classification(PipelineVariant::OriginalRaw, Architecture::TinyResnet, &model, &batch, 5, 1).is_err());
    let bad = crate::nn::gradcheck::random_input(&[8, 3, 40, 40], 5);
    assert!(bench_classification(PipelineVariant::Rgb8, Architecture::TinyVgg, &model, &bad, 5, 1).is_err());
}
