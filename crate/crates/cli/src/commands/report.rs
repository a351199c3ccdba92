//! `rawbench report`: render markdown and SVG summaries from the CSV
//! outputs of `train` and `bench`. Missing combinations render as explicit
//! "absent" markers; regeneration from the same CSVs is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;

use rawbench_core::nn::Architecture;
use rawbench_core::variant::PipelineVariant;

use crate::provenance::{file_hash, TOOL};
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory containing accuracy-*.csv and/or timing.csv.
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Default)]
struct AccuracySummary {
    /// (variant, arch) -> (mean, stddev, n_seeds)
    rows: BTreeMap<(String, String), (f64, f64, usize)>,
}

#[derive(Default)]
struct TimingSummary {
    /// variant -> (mean, stddev) seconds for conversion
    conversion: BTreeMap<String, (f64, f64)>,
    /// (variant, arch) -> (mean, stddev)
    classification: BTreeMap<(String, String), (f64, f64)>,
    /// (variant, arch) -> (mean, stddev)
    total: BTreeMap<(String, String), (f64, f64)>,
}

fn parse_accuracy_file(path: &Path, summary: &mut AccuracySummary) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(CliError::data)?;
    let mut seeds = 0usize;
    let mut mean = None;
    let mut stddev = None;
    let mut key = None;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() || line.starts_with("variant,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(CliError::data(anyhow!(
                "{}: malformed row '{line}'",
                path.display()
            )));
        }
        key = Some((fields[0].to_string(), fields[1].to_string()));
        let value: f64 = fields[3]
            .parse()
            .map_err(|_| CliError::data(anyhow!("{}: bad accuracy '{}'", path.display(), fields[3])))?;
        match fields[2] {
            "mean" => mean = Some(value),
            "stddev" => stddev = Some(value),
            _ => seeds += 1,
        }
    }
    if let (Some(key), Some(mean), Some(stddev)) = (key, mean, stddev) {
        summary.rows.insert(key, (mean, stddev, seeds));
    }
    Ok(())
}

fn parse_timing_file(path: &Path, summary: &mut TimingSummary) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(CliError::data)?;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() || line.starts_with("variant,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(CliError::data(anyhow!(
                "{}: malformed row '{line}'",
                path.display()
            )));
        }
        let mean: f64 = fields[4].parse().map_err(|_| {
            CliError::data(anyhow!("{}: bad mean '{}'", path.display(), fields[4]))
        })?;
        let stddev: f64 = fields[5].parse().map_err(|_| {
            CliError::data(anyhow!("{}: bad stddev '{}'", path.display(), fields[5]))
        })?;
        let key = (fields[0].to_string(), fields[1].to_string());
        match fields[2] {
            "conversion" => {
                summary.conversion.insert(fields[0].to_string(), (mean, stddev));
            }
            "classification" => {
                summary.classification.insert(key, (mean, stddev));
            }
            "total" => {
                summary.total.insert(key, (mean, stddev));
            }
            other => {
                return Err(CliError::data(anyhow!(
                    "{}: unknown stage '{other}'",
                    path.display()
                )))
            }
        }
    }
    Ok(())
}

fn variant_names() -> Vec<String> {
    PipelineVariant::ALL.iter().map(|v| v.to_string()).collect()
}

fn arch_names() -> Vec<String> {
    Architecture::ALL.iter().map(|a| a.to_string()).collect()
}

fn markdown_accuracy(summary: &AccuracySummary) -> String {
    let mut out = String::from("## Mean top-1 accuracy\n\n");
    out.push_str("| architecture | metric |");
    for v in variant_names() {
        out.push_str(&format!(" {v} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(variant_names().len()));
    out.push('\n');
    for arch in arch_names() {
        for (metric, pick) in [("mean", 0usize), ("stddev", 1usize)] {
            out.push_str(&format!("| {arch} | {metric} |"));
            for v in variant_names() {
                match summary.rows.get(&(v.clone(), arch.clone())) {
                    Some(&(mean, stddev, _)) => {
                        let value = if pick == 0 { mean } else { stddev };
                        out.push_str(&format!(" {:.2}% |", 100.0 * value));
                    }
                    None => out.push_str(" absent |"),
                }
            }
            out.push('\n');
        }
    }
    out.push('\n');
    out
}

fn markdown_timing(summary: &TimingSummary) -> String {
    let mut out = String::from("## Computation time (seconds)\n\n");
    if summary.classification.is_empty() {
        out.push_str("absent (no timing.csv found)\n\n");
        return out;
    }
    out.push_str("| architecture | stage |");
    for v in variant_names() {
        out.push_str(&format!(" {v} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(variant_names().len()));
    out.push('\n');
    for arch in arch_names() {
        for (stage, table) in [
            ("classification", &summary.classification),
            ("total", &summary.total),
        ] {
            out.push_str(&format!("| {arch} | {stage} |"));
            for v in variant_names() {
                match table.get(&(v.clone(), arch.clone())) {
                    Some(&(mean, stddev)) => out.push_str(&format!(" {mean:.3} ± {stddev:.3} |")),
                    None => out.push_str(" absent |"),
                }
            }
            out.push('\n');
        }
        // Speedup range from the totals, matching the bench summary line.
        let mut speedups = Vec::new();
        for raw in ["original-raw", "packed-raw", "bca-raw"] {
            for rgb in ["rgb8", "rgb16"] {
                if let (Some(&(tr, _)), Some(&(tg, _))) = (
                    summary.total.get(&(raw.to_string(), arch.clone())),
                    summary.total.get(&(rgb.to_string(), arch.clone())),
                ) {
                    if tr > 0.0 {
                        speedups.push(tg / tr);
                    }
                }
            }
        }
        if !speedups.is_empty() {
            let min = speedups.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = speedups.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.push_str(&format!("| {arch} | RAW vs RGB speedup | {min:.2}x to {max:.2}x |\n"));
        }
    }
    out.push('\n');
    out
}

/// Simple grouped bar chart. Values in [0, 1] are drawn against the given
/// axis maximum.
fn svg_bars(
    title: &str,
    groups: &[(String, Vec<Option<f64>>)],
    series: &[String],
    axis_max: f64,
    unit: &str,
) -> String {
    let width = 720.0;
    let height = 360.0;
    let margin_left = 60.0;
    let margin_bottom = 60.0;
    let plot_w = width - margin_left - 20.0;
    let plot_h = height - margin_bottom - 40.0;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\">\n<style>text{{font-family:monospace;font-size:11px}}</style>\n<text x=\"{}\" y=\"20\" font-size=\"14\">{title}</text>\n",
        margin_left
    );
    let palette = ["#4878a8", "#e49444", "#5ba053", "#c44e52", "#8172b2"];
    let group_w = plot_w / groups.len().max(1) as f64;
    let bar_w = (group_w - 10.0) / series.len().max(1) as f64;
    for (gi, (label, values)) in groups.iter().enumerate() {
        let gx = margin_left + gi as f64 * group_w;
        for (si, value) in values.iter().enumerate() {
            let x = gx + 5.0 + si as f64 * bar_w;
            match value {
                Some(v) => {
                    let h = (v / axis_max).clamp(0.0, 1.0) * plot_h;
                    let y = 40.0 + plot_h - h;
                    out.push_str(&format!(
                        "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                        bar_w - 2.0,
                        palette[si % palette.len()]
                    ));
                    out.push_str(&format!(
                        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.2}</text>\n",
                        x + bar_w / 2.0,
                        y - 3.0
                    ));
                }
                None => {
                    out.push_str(&format!(
                        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#999\">absent</text>\n",
                        x + bar_w / 2.0,
                        40.0 + plot_h - 5.0
                    ));
                }
            }
        }
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n",
            gx + group_w / 2.0,
            height - margin_bottom + 15.0
        ));
    }
    // Legend and axis.
    out.push_str(&format!(
        "<line x1=\"{margin_left}\" y1=\"40\" x2=\"{margin_left}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
        40.0 + plot_h
    ));
    out.push_str(&format!(
        "<text x=\"10\" y=\"40\">{axis_max:.1}{unit}</text>\n<text x=\"10\" y=\"{:.1}\">0{unit}</text>\n",
        40.0 + plot_h
    ));
    for (si, name) in series.iter().enumerate() {
        let y = height - 30.0 + 12.0 * (si / 4) as f64;
        let x = margin_left + (si % 4) as f64 * 160.0;
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{name}</text>\n",
            y - 9.0,
            palette[si % palette.len()],
            x + 14.0,
            y
        ));
    }
    out.push_str("</svg>\n");
    out
}

pub fn run(args: ReportArgs) -> CliResult {
    if !args.run_dir.is_dir() {
        return Err(CliError::data(anyhow!(
            "run directory {} does not exist",
            args.run_dir.display()
        )));
    }
    let mut accuracy = AccuracySummary::default();
    let mut timing = TimingSummary::default();
    let mut inputs: Vec<(String, String)> = Vec::new();

    let mut entries: Vec<PathBuf> = fs::read_dir(&args.run_dir)
        .with_context(|| format!("reading {}", args.run_dir.display()))
        .map_err(CliError::data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in &entries {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("accuracy-") && name.ends_with(".csv") {
            parse_accuracy_file(path, &mut accuracy)?;
            inputs.push((name.to_string(), file_hash(path).map_err(CliError::data)?));
        } else if name == "timing.csv" {
            parse_timing_file(path, &mut timing)?;
            inputs.push((name.to_string(), file_hash(path).map_err(CliError::data)?));
        }
    }

    let mut md = format!("# RAW vs RGB benchmark report\n\nGenerated by {TOOL}.\n\nInputs:\n");
    if inputs.is_empty() {
        md.push_str("- none found (accuracy-*.csv, timing.csv)\n");
    }
    for (name, hash) in &inputs {
        md.push_str(&format!("- {name} (sha256:{hash})\n"));
    }
    md.push('\n');
    md.push_str(&markdown_accuracy(&accuracy));
    md.push_str(&markdown_timing(&timing));

    // Accuracy chart: group per architecture, one bar per variant.
    let acc_groups: Vec<(String, Vec<Option<f64>>)> = arch_names()
        .into_iter()
        .map(|arch| {
            let values = variant_names()
                .into_iter()
                .map(|v| accuracy.rows.get(&(v, arch.clone())).map(|&(m, _, _)| m * 100.0))
                .collect();
            (arch, values)
        })
        .collect();
    let acc_svg = svg_bars("Mean top-1 accuracy (%)", &acc_groups, &variant_names(), 100.0, "%");

    let time_max = timing
        .total
        .values()
        .map(|&(m, _)| m)
        .fold(0.1f64, f64::max)
        * 1.2;
    let time_groups: Vec<(String, Vec<Option<f64>>)> = arch_names()
        .into_iter()
        .map(|arch| {
            let values = variant_names()
                .into_iter()
                .map(|v| timing.total.get(&(v, arch.clone())).map(|&(m, _)| m))
                .collect();
            (arch, values)
        })
        .collect();
    let time_svg = svg_bars("Total time per batch (s)", &time_groups, &variant_names(), time_max, "s");

    // Consolidated bar data as CSV next to the charts.
    let mut acc_csv = format!("# {TOOL}\nvariant,arch,mean_acc,stddev_acc,seeds\n");
    for ((variant, arch), (mean, stddev, seeds)) in &accuracy.rows {
        acc_csv.push_str(&format!("{variant},{arch},{mean:.6},{stddev:.6},{seeds}\n"));
    }
    let mut time_csv = format!("# {TOOL}\nvariant,arch,classification_s,total_s\n");
    for ((variant, arch), (cls, _)) in &timing.classification {
        if let Some(&(total, _)) = timing.total.get(&(variant.clone(), arch.clone())) {
            time_csv.push_str(&format!("{variant},{arch},{cls:.6},{total:.6}\n"));
        }
    }

    fs::write(args.run_dir.join("report.md"), md).map_err(CliError::data)?;
    fs::write(args.run_dir.join("accuracy.svg"), acc_svg).map_err(CliError::data)?;
    fs::write(args.run_dir.join("timing.svg"), time_svg).map_err(CliError::data)?;
    fs::write(args.run_dir.join("report-accuracy.csv"), acc_csv).map_err(CliError::data)?;
    fs::write(args.run_dir.join("report-timing.csv"), time_csv).map_err(CliError::data)?;
    println!(
        "wrote report.md, accuracy.svg, timing.svg, report-accuracy.csv, report-timing.csv under {}",
        args.run_dir.display()
    );
    Ok(())
}
