//! Latency harness: per-stage and end-to-end wall times for the five input
//! strategies, with warmup, retained per-run samples, and the two summary
//! tables plus the speedup line.
//!
//! All timed regions run on the caller's (single) thread against
//! pre-materialized batches; a monotonic clock does the measuring.

use std::time::Instant;

use thiserror::Error;

use crate::isp::{convert, CfaMosaic, ConversionConfig, IspError};
use crate::nn::model::{check_input, Architecture, Model};
use crate::nn::tensor::Tensor;
use crate::variant::PipelineVariant;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid timing request: {0}")]
    InvalidRequest(String),
    #[error("checkpoint/variant mismatch: {0}")]
    VariantMismatch(String),
    #[error(transparent)]
    Isp(#[from] IspError),
}

/// Threshold above which a report is flagged unstable.
pub const STABILITY_LIMIT: f64 = 0.25;

/// Wall-time samples for one stage. Mean and standard deviation are always
/// recomputed from the retained samples, so re-emitting a report is
/// byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub stage: String,
    pub warmup_runs: usize,
    /// Seconds per run, one entry per timed run.
    pub samples: Vec<f64>,
    /// Estimated monotonic-clock resolution in seconds.
    pub timer_resolution: f64,
}

impl TimingReport {
    pub fn n_runs(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Sample standard deviation (n-1 denominator).
    pub fn stddev(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let ss: f64 = self.samples.iter().map(|s| (s - mean) * (s - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn is_stable(&self) -> bool {
        let mean = self.mean();
        mean > 0.0 && self.stddev() / mean < STABILITY_LIMIT
    }

    /// Non-fatal quality flags: instability and coarse timer resolution.
    pub fn flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        let mean = self.mean();
        if !self.is_stable() {
            flags.push(format!(
                "unstable: stddev/mean = {:.2} >= {STABILITY_LIMIT}",
                if mean > 0.0 { self.stddev() / mean } else { f64::INFINITY }
            ));
        }
        if mean > 0.0 && self.timer_resolution > 0.01 * mean {
            flags.push(format!(
                "timer resolution {:.1e}s exceeds 1% of the mean",
                self.timer_resolution
            ));
        }
        flags
    }
}

/// Smallest positive interval the monotonic clock resolves.
pub fn timer_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..32 {
        let t0 = Instant::now();
        let dt = loop {
            let d = t0.elapsed();
            if !d.is_zero() {
                break d.as_secs_f64();
            }
        };
        best = best.min(dt);
    }
    best
}

/// Run `workload` `warmup` times untimed, then `n_runs` times timed.
pub fn time_stage(
    stage: &str,
    n_runs: usize,
    warmup: usize,
    mut workload: impl FnMut(),
) -> Result<TimingReport, BenchError> {
    if n_runs < 5 {
        return Err(BenchError::InvalidRequest(format!(
            "n_runs must be at least 5, got {n_runs}"
        )));
    }
    for _ in 0..warmup {
        workload();
    }
    let mut samples = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t0 = Instant::now();
        workload();
        samples.push(t0.elapsed().as_secs_f64());
    }
    Ok(TimingReport {
        stage: stage.to_string(),
        warmup_runs: warmup,
        samples,
        timer_resolution: timer_resolution(),
    })
}

/// Time the full RAW->RGB conversion of a batch at both output depths.
pub fn bench_conversion(
    mosaics: &[CfaMosaic],
    cfg8: &ConversionConfig,
    cfg16: &ConversionConfig,
    n_runs: usize,
    warmup: usize,
) -> Result<(TimingReport, TimingReport), BenchError> {
    for (cfg, depth) in [(cfg8, 8), (cfg16, 16)] {
        cfg.validate()?;
        if cfg.out_depth != depth {
            return Err(BenchError::InvalidRequest(format!(
                "conversion config for the {depth}-bit path has depth {}",
                cfg.out_depth
            )));
        }
    }
    // Fail early on a bad mosaic rather than mid-measurement.
    if let Some(m) = mosaics.first() {
        convert(m, cfg8)?;
    }
    let run = |cfg: &ConversionConfig, stage: &str| {
        time_stage(stage, n_runs, warmup, || {
            for m in mosaics {
                std::hint::black_box(convert(m, cfg).expect("validated conversion"));
            }
        })
    };
    Ok((run(cfg8, "conversion-rgb8")?, run(cfg16, "conversion-rgb16")?))
}

/// Forward-pass wall time over a batch. Packing/BCA work happens inside the
/// model's layers and is therefore included.
pub fn bench_classification(
    variant: PipelineVariant,
    arch: Architecture,
    model: &Model,
    batch: &Tensor,
    n_runs: usize,
    warmup: usize,
) -> Result<TimingReport, BenchError> {
    if model.spec.architecture != arch {
        return Err(BenchError::VariantMismatch(format!(
            "model is {}, requested {arch}",
            model.spec.architecture
        )));
    }
    check_input(&model.spec, batch).map_err(|e| BenchError::VariantMismatch(e.to_string()))?;
    if batch.dim(1) != variant.input_channels() {
        return Err(BenchError::VariantMismatch(format!(
            "{variant} expects {} input channels, batch has {}",
            variant.input_channels(),
            batch.dim(1)
        )));
    }
    time_stage(&format!("classify-{variant}-{arch}"), n_runs, warmup, || {
        std::hint::black_box(model.forward_eval(batch.clone()));
    })
}

#[derive(Debug, Clone)]
pub struct BenchEntry {
    pub variant: PipelineVariant,
    pub arch: Architecture,
    pub report: TimingReport,
}

/// All measurements for one benchmark run: the two conversion reports plus
/// one classification report per (variant, architecture).
#[derive(Debug, Clone)]
pub struct BenchMatrix {
    pub batch_size: usize,
    pub input_size: usize,
    pub conversion8: TimingReport,
    pub conversion16: TimingReport,
    pub classification: Vec<BenchEntry>,
}

impl BenchMatrix {
    pub fn classification_report(&self, variant: PipelineVariant, arch: Architecture) -> Option<&TimingReport> {
        self.classification
            .iter()
            .find(|e| e.variant == variant && e.arch == arch)
            .map(|e| &e.report)
    }

    /// The conversion report a variant pays for, if any.
    pub fn conversion_for(&self, variant: PipelineVariant) -> Option<&TimingReport> {
        match variant {
            PipelineVariant::Rgb8 => Some(&self.conversion8),
            PipelineVariant::Rgb16 => Some(&self.conversion16),
            _ => None,
        }
    }

    /// Total time from capture to classification: conversion (RGB paths
    /// only) plus classification. Additive by definition.
    pub fn total_mean(&self, variant: PipelineVariant, arch: Architecture) -> Option<f64> {
        let cls = self.classification_report(variant, arch)?.mean();
        Some(cls + self.conversion_for(variant).map_or(0.0, |r| r.mean()))
    }

    /// Standard deviation of the total, treating the stages as independent.
    pub fn total_stddev(&self, variant: PipelineVariant, arch: Architecture) -> Option<f64> {
        let cls = self.classification_report(variant, arch)?.stddev();
        let conv = self.conversion_for(variant).map_or(0.0, |r| r.stddev());
        Some((cls * cls + conv * conv).sqrt())
    }

    /// Speedups total(rgb)/total(raw) for every raw/rgb pair of one
    /// architecture.
    pub fn speedups(&self, arch: Architecture) -> Vec<(PipelineVariant, PipelineVariant, f64)> {
        let raw = [
            PipelineVariant::OriginalRaw,
            PipelineVariant::PackedRaw,
            PipelineVariant::BcaRaw,
        ];
        let rgb = [PipelineVariant::Rgb8, PipelineVariant::Rgb16];
        let mut out = Vec::new();
        for &r in &raw {
            for &g in &rgb {
                if let (Some(tr), Some(tg)) = (self.total_mean(r, arch), self.total_mean(g, arch)) {
                    if tr > 0.0 {
                        out.push((r, g, tg / tr));
                    }
                }
            }
        }
        out
    }

    pub fn speedup_range(&self, arch: Architecture) -> Option<(f64, f64)> {
        let all = self.speedups(arch);
        if all.is_empty() {
            return None;
        }
        let min = all.iter().map(|&(_, _, s)| s).fold(f64::INFINITY, f64::min);
        let max = all.iter().map(|&(_, _, s)| s).fold(f64::NEG_INFINITY, f64::max);
        Some((min, max))
    }

    fn arches(&self) -> Vec<Architecture> {
        let mut seen = Vec::new();
        for e in &self.classification {
            if !seen.contains(&e.arch) {
                seen.push(e.arch);
            }
        }
        seen
    }

    fn render_header(&self) -> String {
        let mut line = format!("{:<16}", "");
        for v in PipelineVariant::ALL {
            line.push_str(&format!("{:>14}", v.label()));
        }
        line.push('\n');
        line
    }

    fn render_row(&self, label: &str, cell: impl Fn(PipelineVariant) -> Option<f64>) -> String {
        let mut line = format!("{label:<16}");
        for v in PipelineVariant::ALL {
            match cell(v) {
                Some(x) => line.push_str(&format!("{:>12.3} s", x)),
                None => line.push_str(&format!("{:>14}", "absent")),
            }
        }
        line.push('\n');
        line
    }

    /// Classification-only table (mean and stddev per variant and
    /// architecture), including the input-dimension row.
    pub fn render_classification_table(&self) -> String {
        let mut out = format!(
            "Mean computation times for classifying {} samples\n",
            self.batch_size
        );
        out.push_str(&self.render_header());
        let mut dims = format!("{:<16}", "Input Dimen.");
        for v in PipelineVariant::ALL {
            dims.push_str(&format!(
                "{:>14}",
                format!("{0}x{0}x{1}", self.input_size, v.input_channels())
            ));
        }
        dims.push('\n');
        out.push_str(&dims);
        for arch in self.arches() {
            out.push_str(&format!("--- {arch} ---\n"));
            out.push_str(&self.render_row("Mean Duration", |v| {
                self.classification_report(v, arch).map(|r| r.mean())
            }));
            out.push_str(&self.render_row("Standard Dev.", |v| {
                self.classification_report(v, arch).map(|r| r.stddev())
            }));
        }
        out
    }

    /// Total-time table (conversion + classification for the RGB paths) and
    /// the RAW-vs-RGB speedup range per architecture.
    pub fn render_total_table(&self) -> String {
        let mut out = String::from("Mean computation times from capture to classification\n");
        out.push_str(&format!(
            "(conversion means: rgb8 {:.3} s, rgb16 {:.3} s over {} mosaics)\n",
            self.conversion8.mean(),
            self.conversion16.mean(),
            self.batch_size
        ));
        out.push_str(&self.render_header());
        for arch in self.arches() {
            out.push_str(&format!("--- {arch} ---\n"));
            out.push_str(&self.render_row("Total Time", |v| self.total_mean(v, arch)));
            out.push_str(&self.render_row("Standard Dev.", |v| self.total_stddev(v, arch)));
            if let Some((min, max)) = self.speedup_range(arch) {
                out.push_str(&format!("RAW vs RGB: {min:.2}x to {max:.2}x\n"));
            }
        }
        out
    }

    /// CSV rows: `variant,arch,stage,n,mean_s,stddev_s`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,arch,stage,n,mean_s,stddev_s\n");
        for (variant, report) in [
            (PipelineVariant::Rgb8, &self.conversion8),
            (PipelineVariant::Rgb16, &self.conversion16),
        ] {
            out.push_str(&format!(
                "{variant},-,conversion,{},{:.6},{:.6}\n",
                report.n_runs(),
                report.mean(),
                report.stddev()
            ));
        }
        for e in &self.classification {
            out.push_str(&format!(
                "{},{},classification,{},{:.6},{:.6}\n",
                e.variant,
                e.arch,
                e.report.n_runs(),
                e.report.mean(),
                e.report.stddev()
            ));
            out.push_str(&format!(
                "{},{},total,{},{:.6},{:.6}\n",
                e.variant,
                e.arch,
                e.report.n_runs(),
                self.total_mean(e.variant, e.arch).unwrap(),
                self.total_stddev(e.variant, e.arch).unwrap()
            ));
        }
        out
    }

    /// Raw per-run samples as JSON lines, for archival.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut emit = |variant: &str, arch: &str, stage: &str, report: &TimingReport| {
            for (i, s) in report.samples.iter().enumerate() {
                out.push_str(&format!(
                    "{{\"variant\":\"{variant}\",\"arch\":\"{arch}\",\"stage\":\"{stage}\",\"run\":{i},\"seconds\":{s}}}\n"
                ));
            }
        };
        emit("rgb8", "-", "conversion", &self.conversion8);
        emit("rgb16", "-", "conversion", &self.conversion16);
        for e in &self.classification {
            emit(&e.variant.to_string(), &e.arch.to_string(), "classification", &e.report);
        }
        out
    }
}

#[cfg(test)]
mod tests;
