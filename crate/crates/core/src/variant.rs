//! Assembly of one trainable network per classifier-input strategy.
//!
//! RAW variants consume the 1-channel normalized mosaic directly; packing
//! and BCA happen inside the network as layers, so no preprocessing runs
//! outside the timed forward pass. RGB variants consume the converted
//! 3-channel images.

use rand_chacha::ChaCha8Rng;

use crate::nn::checkpoint::CheckpointMeta;
use crate::nn::layers::{Layer, Sequential};
use crate::nn::model::{build_model, Architecture, Model, ModelSpec};
use crate::nn::NnError;
use crate::rawrep::{BcaFrontend, PackLayer, BCA_MERGE_CHANNELS};

/// The five classifier-input strategies compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipelineVariant {
    OriginalRaw,
    PackedRaw,
    BcaRaw,
    Rgb8,
    Rgb16,
}

impl PipelineVariant {
    pub const ALL: [PipelineVariant; 5] = [
        PipelineVariant::OriginalRaw,
        PipelineVariant::PackedRaw,
        PipelineVariant::BcaRaw,
        PipelineVariant::Rgb8,
        PipelineVariant::Rgb16,
    ];

    /// Only the RGB paths pay for RAW->RGB conversion; the RAW strategies
    /// rearrange inside the network.
    pub fn conversion_required(self) -> bool {
        matches!(self, PipelineVariant::Rgb8 | PipelineVariant::Rgb16)
    }

    /// Channels of the tensor the network is fed from disk.
    pub fn input_channels(self) -> usize {
        if self.conversion_required() {
            3
        } else {
            1
        }
    }

    pub fn code(self) -> u8 {
        match self {
            PipelineVariant::OriginalRaw => 0,
            PipelineVariant::PackedRaw => 1,
            PipelineVariant::BcaRaw => 2,
            PipelineVariant::Rgb8 => 3,
            PipelineVariant::Rgb16 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<PipelineVariant> {
        PipelineVariant::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn parse(text: &str) -> Option<PipelineVariant> {
        match text {
            "original-raw" => Some(PipelineVariant::OriginalRaw),
            "packed-raw" => Some(PipelineVariant::PackedRaw),
            "bca-raw" => Some(PipelineVariant::BcaRaw),
            "rgb8" => Some(PipelineVariant::Rgb8),
            "rgb16" => Some(PipelineVariant::Rgb16),
            _ => None,
        }
    }

    /// Human-readable table column label.
    pub fn label(self) -> &'static str {
        match self {
            PipelineVariant::OriginalRaw => "Original RAW",
            PipelineVariant::PackedRaw => "Packed RAW",
            PipelineVariant::BcaRaw => "BCA RAW",
            PipelineVariant::Rgb8 => "8-bit RGB",
            PipelineVariant::Rgb16 => "16-bit RGB",
        }
    }
}

impl std::fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PipelineVariant::OriginalRaw => "original-raw",
            PipelineVariant::PackedRaw => "packed-raw",
            PipelineVariant::BcaRaw => "bca-raw",
            PipelineVariant::Rgb8 => "rgb8",
            PipelineVariant::Rgb16 => "rgb16",
        })
    }
}

/// Full description of a trainable pipeline network.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantModelSpec {
    pub variant: PipelineVariant,
    pub architecture: Architecture,
    /// Side length of the square mosaic (and of the converted RGB images).
    pub mosaic_size: usize,
    pub num_classes: usize,
    pub width_multiplier: f64,
}

impl VariantModelSpec {
    /// Benchmark defaults: 40x40 mosaics, 5 classes, half-width channels.
    /// Half width keeps single-core classification cheap enough that the
    /// conversion-to-classification cost ratio resembles the full-scale
    /// pipeline this models.
    pub fn new(variant: PipelineVariant, architecture: Architecture) -> VariantModelSpec {
        VariantModelSpec {
            variant,
            architecture,
            mosaic_size: 40,
            num_classes: 5,
            width_multiplier: 0.5,
        }
    }
}

/// Build the network for a variant. RAW rearrangement layers are prepended
/// inside the model; the model's external input contract stays at the
/// variant's on-disk tensor shape.
pub fn build_variant_model(
    spec: &VariantModelSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Model, NnError> {
    let size = spec.mosaic_size;
    if size < 4 || size % 2 != 0 {
        return Err(NnError::InvalidSpec(format!(
            "mosaic size must be even and at least 4, got {size}"
        )));
    }
    let external = ModelSpec {
        architecture: spec.architecture,
        input_channels: spec.variant.input_channels(),
        input_size: size,
        num_classes: spec.num_classes,
        width_multiplier: spec.width_multiplier,
    };
    match spec.variant {
        PipelineVariant::OriginalRaw | PipelineVariant::Rgb8 | PipelineVariant::Rgb16 => {
            build_model(&external, rng)
        }
        PipelineVariant::PackedRaw => {
            let backbone = build_model(
                &ModelSpec {
                    architecture: spec.architecture,
                    input_channels: 4,
                    input_size: size / 2,
                    num_classes: spec.num_classes,
                    width_multiplier: spec.width_multiplier,
                },
                rng,
            )?;
            let blocks = backbone.residual_block_count();
            let layers: Vec<Box<dyn Layer>> = vec![Box::new(PackLayer::new()), Box::new(backbone.net)];
            Ok(Model::compose(Sequential::new(layers), external, blocks))
        }
        PipelineVariant::BcaRaw => {
            let frontend = BcaFrontend::new(rng);
            let backbone = build_model(
                &ModelSpec {
                    architecture: spec.architecture,
                    input_channels: BCA_MERGE_CHANNELS,
                    input_size: size / 2,
                    num_classes: spec.num_classes,
                    width_multiplier: spec.width_multiplier,
                },
                rng,
            )?;
            let blocks = backbone.residual_block_count();
            let layers: Vec<Box<dyn Layer>> = vec![Box::new(frontend), Box::new(backbone.net)];
            Ok(Model::compose(Sequential::new(layers), external, blocks))
        }
    }
}

pub fn checkpoint_meta(spec: &VariantModelSpec) -> CheckpointMeta {
    CheckpointMeta {
        variant_code: spec.variant.code(),
        architecture: spec.architecture,
        input_channels: spec.variant.input_channels() as u32,
        input_size: spec.mosaic_size as u32,
        num_classes: spec.num_classes as u32,
        width_multiplier: spec.width_multiplier,
    }
}

/// Rebuild the spec a checkpoint was written with.
pub fn spec_from_meta(meta: &CheckpointMeta) -> Result<VariantModelSpec, NnError> {
    let variant = PipelineVariant::from_code(meta.variant_code)
        .ok_or_else(|| NnError::Checkpoint(format!("bad variant code {}", meta.variant_code)))?;
    Ok(VariantModelSpec {
        variant,
        architecture: meta.architecture,
        mosaic_size: meta.input_size as usize,
        num_classes: meta.num_classes as usize,
        width_multiplier: meta.width_multiplier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_input;
    use crate::util::derive_rng;

    #[test]
    fn variant_codes_round_trip() {
        for v in PipelineVariant::ALL {
            assert_eq!(PipelineVariant::from_code(v.code()), Some(v));
            assert_eq!(PipelineVariant::parse(&v.to_string()), Some(v));
        }
    }

    #[test]
    fn conversion_required_only_for_rgb() {
        assert!(!PipelineVariant::OriginalRaw.conversion_required());
        assert!(!PipelineVariant::PackedRaw.conversion_required());
        assert!(!PipelineVariant::BcaRaw.conversion_required());
        assert!(PipelineVariant::Rgb8.conversion_required());
        assert!(PipelineVariant::Rgb16.conversion_required());
    }

    #[test]
    fn every_variant_builds_and_runs_forward() {
        for variant in PipelineVariant::ALL {
            for arch in Architecture::ALL {
                let spec = VariantModelSpec::new(variant, arch);
                let mut rng = derive_rng(3, variant.code() as u64, arch.code() as u64);
                let model = build_variant_model(&spec, &mut rng).unwrap();
                let x = random_input(&[2, variant.input_channels(), 40, 40], 99);
                let logits = model.forward_eval(x);
                assert_eq!(logits.shape(), &[2, 5], "{variant} {arch}");
            }
        }
    }

    #[test]
    fn resnet_variants_keep_their_residual_blocks() {
        for variant in PipelineVariant::ALL {
            let spec = VariantModelSpec::new(variant, Architecture::TinyResnet);
            let mut rng = derive_rng(4, variant.code() as u64, 0);
            let model = build_variant_model(&spec, &mut rng).unwrap();
            assert!(model.residual_block_count() >= 1);
        }
    }

    #[test]
    fn bca_adds_parameters_over_the_plain_raw_network() {
        for arch in Architecture::ALL {
            let count = |variant| {
                let spec = VariantModelSpec::new(variant, arch);
                let mut rng = derive_rng(5, 0, arch.code() as u64);
                build_variant_model(&spec, &mut rng).unwrap().param_count()
            };
            assert!(
                count(PipelineVariant::BcaRaw) > count(PipelineVariant::OriginalRaw),
                "{arch}"
            );
        }
    }
}
