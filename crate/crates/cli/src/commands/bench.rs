//! `rawbench bench`: measure conversion and classification latency for all
//! five variants with both architectures, emit the two summary tables, CSV
//! and raw JSONL samples.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;

use rawbench_core::bench::{bench_classification, bench_conversion, BenchEntry, BenchMatrix};
use rawbench_core::datagen::{load_batch, LoadFormat, Split, SplitManifest};
use rawbench_core::isp::read_craw;
use rawbench_core::nn::{load_checkpoint, restore, Architecture};
use rawbench_core::util::derive_rng;
use rawbench_core::variant::{build_variant_model, spec_from_meta, PipelineVariant};

use crate::provenance::{config_hash, TOOL};
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct BenchArgs {
    /// Dataset directory (the `gen` output containing manifest.csv).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the trained checkpoints (one per variant/arch).
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Output directory for timing.csv, samples.jsonl and tables.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Timed runs per stage.
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    /// Untimed warmup runs per stage.
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Samples per timed batch.
    #[arg(long, default_value_t = 457)]
    pub batch: usize,
}

/// Pick one checkpoint per (variant, arch), lexicographically first.
fn find_checkpoints(
    dir: &std::path::Path,
) -> Result<BTreeMap<(u8, u8), PathBuf>, CliError> {
    let mut found: BTreeMap<(u8, u8), PathBuf> = BTreeMap::new();
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(CliError::data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "ckpt"))
        .collect();
    names.sort();
    for path in names {
        let (meta, _) = load_checkpoint(&path).map_err(CliError::data)?;
        let key = (meta.variant_code, meta.architecture.code());
        found.entry(key).or_insert(path);
    }
    Ok(found)
}

pub fn run(args: BenchArgs) -> CliResult {
    fs::create_dir_all(&args.out).map_err(CliError::data)?;
    let manifest = SplitManifest::load(&args.data.join("manifest.csv")).map_err(CliError::data)?;
    if manifest.records.is_empty() {
        return Err(CliError::data(anyhow!("manifest has no samples")));
    }

    let checkpoints = find_checkpoints(&args.checkpoints)?;
    let mut missing = Vec::new();
    for variant in PipelineVariant::ALL {
        for arch in Architecture::ALL {
            if !checkpoints.contains_key(&(variant.code(), arch.code())) {
                missing.push(format!("{variant}/{arch}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(CliError::data(anyhow!(
            "missing checkpoints for: {}",
            missing.join(", ")
        )));
    }

    // Materialize the timed batches before any timing: a fixed cycle over
    // the manifest gives exactly `batch` samples.
    let cycle: Vec<usize> = (0..args.batch).map(|i| i % manifest.records.len()).collect();
    let mosaics: Vec<_> = cycle
        .iter()
        .map(|&i| read_craw(&args.data.join(&manifest.records[i].craw_path)))
        .collect::<Result<_, _>>()
        .map_err(CliError::data)?;
    let input_size = mosaics[0].width;

    // Tensor batches cycle over the train split (splits are irrelevant for
    // timing; the batch just has to be the right shape).
    let train_len = manifest.split_indices(Split::Train).len();
    if train_len == 0 {
        return Err(CliError::data(anyhow!("manifest has no train samples to batch")));
    }
    let batch_for = |format: LoadFormat| -> Result<_, CliError> {
        let indices: Vec<usize> = (0..args.batch).map(|i| i % train_len).collect();
        load_batch(&manifest, &args.data, Split::Train, format, &indices).map_err(CliError::data)
    };
    let raw_batch = batch_for(LoadFormat::Raw)?;
    let rgb8_batch = batch_for(LoadFormat::Rgb8)?;
    let rgb16_batch = batch_for(LoadFormat::Rgb16)?;

    let conversion = rawbench_core::datagen::default_conversion();
    let mut cfg8 = conversion.clone();
    cfg8.out_depth = 8;
    let mut cfg16 = conversion;
    cfg16.out_depth = 16;
    let (conv8, conv16) =
        bench_conversion(&mosaics, &cfg8, &cfg16, args.runs, args.warmup).map_err(CliError::data)?;

    let mut classification = Vec::new();
    for variant in PipelineVariant::ALL {
        for arch in Architecture::ALL {
            let path = &checkpoints[&(variant.code(), arch.code())];
            let (meta, entries) = load_checkpoint(path).map_err(CliError::data)?;
            let spec = spec_from_meta(&meta).map_err(CliError::data)?;
            let mut model =
                build_variant_model(&spec, &mut derive_rng(0, 0, 0)).map_err(CliError::data)?;
            restore(&mut model, &entries).map_err(CliError::data)?;
            let batch = match variant {
                PipelineVariant::Rgb8 => &rgb8_batch,
                PipelineVariant::Rgb16 => &rgb16_batch,
                _ => &raw_batch,
            };
            let report =
                bench_classification(variant, arch, &model, &batch.inputs, args.runs, args.warmup)
                    .map_err(CliError::data)?;
            for flag in report.flags() {
                eprintln!("warning: {variant}/{arch}: {flag}");
            }
            classification.push(BenchEntry {
                variant,
                arch,
                report,
            });
        }
    }

    let matrix = BenchMatrix {
        batch_size: args.batch,
        input_size,
        conversion8: conv8,
        conversion16: conv16,
        classification,
    };

    let canonical = format!(
        "runs={} warmup={} batch={} data={}",
        args.runs,
        args.warmup,
        args.batch,
        args.data.display()
    );
    let digest = config_hash(&canonical);
    let meta_header = format!(
        "# {TOOL}\n# config_hash={digest}\n# runs={} warmup={} batch={}\n",
        args.runs, args.warmup, args.batch
    );

    let tables = format!(
        "{}\n{}",
        matrix.render_classification_table(),
        matrix.render_total_table()
    );
    print!("{tables}");
    for arch in Architecture::ALL {
        if let Some((min, max)) = matrix.speedup_range(arch) {
            println!("{arch}: RAW vs RGB: {min:.2}x to {max:.2}x");
        }
    }

    fs::write(args.out.join("timing.csv"), format!("{meta_header}{}", matrix.to_csv()))
        .map_err(CliError::data)?;
    // First JSONL record is the provenance object, then one line per run.
    let jsonl = format!(
        "{{\"tool\":\"{TOOL}\",\"config_hash\":\"{digest}\",\"runs\":{},\"warmup\":{},\"batch\":{}}}\n{}",
        args.runs,
        args.warmup,
        args.batch,
        matrix.to_jsonl()
    );
    fs::write(args.out.join("samples.jsonl"), jsonl).map_err(CliError::data)?;
    fs::write(args.out.join("tables.txt"), format!("{meta_header}{tables}")).map_err(CliError::data)?;
    println!("wrote timing.csv, samples.jsonl, tables.txt under {}", args.out.display());
    Ok(())
}
