//! `rawbench gen`: write the paired dataset, manifest and config files.

use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use rawbench_core::datagen::{
    generate_dataset, parse_profiles, render_generator_config, GenConfig, Imbalance, NoiseModel,
    CLASS_NAMES,
};
use rawbench_core::isp::{render_conversion_config, CfaPattern};

use crate::provenance::{config_hash, header, write_if_changed, TOOL};
use crate::{CliError, CliResult};

#[derive(Args)]
pub struct GenArgs {
    /// Samples per class (total = 5x this in balanced mode).
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Root seed; all sample streams derive from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the dataset tree.
    #[arg(long)]
    pub out: PathBuf,
    /// Class balance: "balanced" or "paper" (published proportions).
    #[arg(long, default_value = "balanced")]
    pub imbalance: String,
    /// Optional class-profile overrides (key=value file).
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Square sample side length in pixels.
    #[arg(long, default_value_t = 40)]
    pub size: usize,
    /// CFA phase: RGGB, BGGR, GRBG or GBRG.
    #[arg(long, default_value = "RGGB")]
    pub pattern: String,
    /// Disable the sensor noise model.
    #[arg(long, default_value_t = false)]
    pub no_noise: bool,
}

pub fn run(args: GenArgs) -> CliResult {
    let imbalance = match args.imbalance.as_str() {
        "balanced" => Imbalance::Balanced,
        "paper" => Imbalance::Paper,
        other => {
            return Err(CliError {
                code: 1,
                source: anyhow::anyhow!("unknown imbalance mode '{other}' (use balanced or paper)"),
            })
        }
    };
    let pattern = CfaPattern::parse(&args.pattern).ok_or_else(|| CliError {
        code: 1,
        source: anyhow::anyhow!("unknown CFA pattern '{}'", args.pattern),
    })?;
    let profiles = match &args.profiles {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading profiles {}", path.display()))
                .map_err(CliError::data)?;
            parse_profiles(&text).map_err(CliError::data)?
        }
        None => rawbench_core::datagen::default_profiles(),
    };
    let mut cfg = GenConfig {
        n_per_class: args.n,
        seed: args.seed,
        imbalance,
        size: args.size,
        pattern,
        profiles,
        ..GenConfig::default()
    };
    if args.no_noise {
        cfg.noise = None;
    } else {
        cfg.noise = Some(NoiseModel::default());
    }

    let canonical = render_generator_config(&cfg);
    let digest = config_hash(&canonical);
    let (manifest, stats) = generate_dataset(&cfg, &args.out).map_err(CliError::data)?;

    let mut changed = stats.files_written > 0;
    let manifest_header = header(&digest, &[("seed", args.seed.to_string())]);
    let mut manifest_text = String::new();
    for line in &manifest_header {
        manifest_text.push_str(&format!("# {line}\n"));
    }
    manifest_text.push_str("id,class,split,craw_path,rgb8_path,rgb16_path\n");
    for r in &manifest.records {
        manifest_text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id, r.class_id, r.split, r.craw_path, r.rgb8_path, r.rgb16_path
        ));
    }
    changed |= write_if_changed(&args.out.join("manifest.csv"), manifest_text.as_bytes())
        .map_err(CliError::data)?;

    let gen_cfg_text = format!("# {TOOL}\n# config_hash={digest}\n{canonical}");
    changed |= write_if_changed(&args.out.join("generator.cfg"), gen_cfg_text.as_bytes())
        .map_err(CliError::data)?;
    let conv_text = format!(
        "# {TOOL}\n# config_hash={digest}\n# depth applies to the 8-bit outputs; rgb16 uses 16\n{}",
        render_conversion_config(&cfg.conversion)
    );
    changed |= write_if_changed(&args.out.join("conversion.cfg"), conv_text.as_bytes())
        .map_err(CliError::data)?;

    // Split table in the shape of the published sample-distribution table.
    let counts = manifest.counts();
    println!("Sample distribution (seed {}, config {})", args.seed, digest);
    print!("{:<12}", "");
    for name in CLASS_NAMES {
        print!("{name:>11}");
    }
    println!();
    let rows = [("Training", 0), ("Validation", 1), ("Testing", 2)];
    for (label, idx) in rows {
        print!("{label:<12}");
        for class in 0..5 {
            print!("{:>11}", counts[class][idx]);
        }
        println!();
    }
    print!("{:<12}", "Total");
    for class_counts in counts.iter() {
        print!("{:>11}", class_counts.iter().sum::<usize>());
    }
    println!();

    if !changed {
        println!("up to date ({} files verified)", stats.files_unchanged);
    } else {
        println!(
            "wrote {} files ({} unchanged) under {}",
            stats.files_written,
            stats.files_unchanged,
            args.out.display()
        );
    }
    Ok(())
}
