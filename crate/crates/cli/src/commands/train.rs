//! `rawbench train`: train one variant/architecture pair over one or more
//! seeds, store best-validation checkpoints, histories and the accuracy
//! summary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;

use rawbench_core::datagen::{load_split, LoadFormat, Split, SplitManifest};
use rawbench_core::nn::{
    evaluate, save_checkpoint, snapshot, train as train_model, Architecture, NnError, TrainConfig,
    TrainOutcome,
};
use rawbench_core::util::derive_rng;
use rawbench_core::variant::{build_variant_model, checkpoint_meta, PipelineVariant, VariantModelSpec};

use crate::provenance::{config_hash, TOOL};
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (the `gen` output containing manifest.csv).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, histories and summaries.
    #[arg(long)]
    pub out: PathBuf,
    /// Input strategy: original-raw, packed-raw, bca-raw, rgb8 or rgb16.
    #[arg(long)]
    pub variant: String,
    /// Classifier: tiny-vgg or tiny-resnet.
    #[arg(long)]
    pub arch: String,
    /// Number of independently seeded training runs to aggregate.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Training epochs per run.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// L2 weight decay (applied to weights through the gradient).
    #[arg(long, default_value_t = 0.0001)]
    pub wd: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Minibatch size.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Base seed; repeat r uses seed + r.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channel width multiplier for both architectures.
    #[arg(long, default_value_t = 0.5)]
    pub width: f64,
}

pub fn parse_variant(text: &str) -> Result<PipelineVariant, CliError> {
    PipelineVariant::parse(text).ok_or_else(|| CliError {
        code: 1,
        source: anyhow!(
            "unknown variant '{text}' (original-raw, packed-raw, bca-raw, rgb8, rgb16)"
        ),
    })
}

pub fn parse_arch(text: &str) -> Result<Architecture, CliError> {
    Architecture::parse(text).ok_or_else(|| CliError {
        code: 1,
        source: anyhow!("unknown architecture '{text}' (tiny-vgg, tiny-resnet)"),
    })
}

pub fn load_format(variant: PipelineVariant) -> LoadFormat {
    match variant {
        PipelineVariant::Rgb8 => LoadFormat::Rgb8,
        PipelineVariant::Rgb16 => LoadFormat::Rgb16,
        _ => LoadFormat::Raw,
    }
}

fn classify_train_error(e: NnError) -> CliError {
    match e {
        NnError::Diverged { .. } => CliError::numeric(e),
        other => CliError::data(other),
    }
}

fn history_csv(outcome: &TrainOutcome, header_lines: &[String]) -> String {
    let mut out = String::new();
    for line in header_lines {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str("epoch,train_loss,val_loss,train_acc,val_acc\n");
    for e in &outcome.history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.train_loss, e.val_loss, e.train_acc, e.val_acc
        ));
    }
    out
}

pub fn run(args: TrainArgs) -> CliResult {
    let variant = parse_variant(&args.variant)?;
    let arch = parse_arch(&args.arch)?;
    fs::create_dir_all(&args.out).map_err(CliError::data)?;

    let manifest_path = args.data.join("manifest.csv");
    let manifest = SplitManifest::load(&manifest_path)
        .with_context(|| format!("loading {}", manifest_path.display()))
        .map_err(CliError::data)?;

    let format = load_format(variant);
    let train_set = load_split(&manifest, &args.data, Split::Train, format).map_err(CliError::data)?;
    let val_set = load_split(&manifest, &args.data, Split::Val, format).map_err(CliError::data)?;
    let test_set = load_split(&manifest, &args.data, Split::Test, format).map_err(CliError::data)?;
    let size = train_set.inputs.dim(2);

    let canonical = format!(
        "variant={variant} arch={arch} repeats={} epochs={} lr={} wd={} momentum={} batch={} seed={} width={}",
        args.repeats, args.epochs, args.lr, args.wd, args.momentum, args.batch, args.seed, args.width
    );
    let digest = config_hash(&canonical);

    let mut accuracies = Vec::with_capacity(args.repeats);
    for repeat in 0..args.repeats {
        let seed = args.seed + repeat as u64;
        let spec = VariantModelSpec {
            variant,
            architecture: arch,
            mosaic_size: size,
            num_classes: 5,
            width_multiplier: args.width,
        };
        let mut model =
            build_variant_model(&spec, &mut derive_rng(seed, 0x1217, 0)).map_err(CliError::data)?;
        let cfg = TrainConfig {
            learning_rate: args.lr,
            weight_decay: args.wd,
            momentum: args.momentum,
            batch_size: args.batch,
            epochs: args.epochs,
            seed,
        };
        let outcome =
            train_model(&mut model, &train_set, &val_set, &cfg).map_err(classify_train_error)?;
        let accuracy = evaluate(&model, &test_set);
        accuracies.push(accuracy);

        let stem = format!("{variant}-{arch}-seed{seed}");
        let header_lines = vec![
            TOOL.to_string(),
            format!("config_hash={digest}"),
            format!("seed={seed}"),
            format!("best_epoch={}", outcome.best_epoch),
            format!("test_acc={accuracy:.6}"),
        ];
        fs::write(
            args.out.join(format!("history-{stem}.csv")),
            history_csv(&outcome, &header_lines),
        )
        .map_err(CliError::data)?;
        save_checkpoint(
            &args.out.join(format!("{stem}.ckpt")),
            &checkpoint_meta(&spec),
            &snapshot(&mut model),
        )
        .map_err(CliError::data)?;
        println!(
            "{variant} {arch} seed {seed}: best epoch {} (val loss {:.4}), test top-1 {:.2}%",
            outcome.best_epoch,
            outcome.best_val_loss,
            100.0 * accuracy
        );
    }

    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let stddev = if accuracies.len() > 1 {
        let ss: f64 = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum();
        (ss / (accuracies.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    write_summary(&args.out, variant, arch, &digest, &accuracies, mean, stddev)?;
    println!(
        "{variant} {arch}: mean top-1 {:.2}% / stddev {:.3} over {} run(s)",
        100.0 * mean,
        100.0 * stddev,
        accuracies.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_summary(
    out_dir: &Path,
    variant: PipelineVariant,
    arch: Architecture,
    digest: &str,
    accuracies: &[f64],
    mean: f64,
    stddev: f64,
) -> CliResult {
    let mut text = format!("# {TOOL}\n# config_hash={digest}\n");
    text.push_str("variant,arch,seed_index,test_acc\n");
    for (i, a) in accuracies.iter().enumerate() {
        text.push_str(&format!("{variant},{arch},{i},{a:.6}\n"));
    }
    text.push_str(&format!("{variant},{arch},mean,{mean:.6}\n"));
    text.push_str(&format!("{variant},{arch},stddev,{stddev:.6}\n"));
    fs::write(out_dir.join(format!("accuracy-{variant}-{arch}.csv")), text)
        .map_err(CliError::data)?;
    Ok(())
}
