//! Synthetic five-class grain dataset: paired 40x40 RAW mosaics and
//! converted RGB images, with 70/20/10 splits per class.
//!
//! Every sample draws from its own RNG stream derived from
//! `(seed, class, index)`, so regeneration is byte-identical and
//! independent of generation order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::isp::{
    convert, encode_craw, encode_ppm, linearize, read_craw, read_ppm, CfaColor, CfaMosaic,
    CfaPattern, ConversionConfig, GammaCurve, IspError, LinearImage, ToneCurve,
};
use crate::nn::tensor::Tensor;
use crate::nn::train::LabeledSet;
use crate::util::derive_rng;

const TAG_SCENE: u64 = 0x5ce7e;
const TAG_NOISE: u64 = 0x7015e;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("pairing violation for sample {id}: {message}")]
    Pairing { id: String, message: String },
    #[error(transparent)]
    Isp(#[from] IspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const CLASS_NAMES: [&str; 5] = ["arborio", "basmati", "brown", "jasmine", "parboiled"];

/// Table-derived class proportions for the imbalanced mode.
pub const PAPER_CLASS_WEIGHTS: [usize; 5] = [3569, 5142, 4856, 4864, 4456];

/// Shape/albedo/texture recipe for one grain class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub class_id: usize,
    pub name: String,
    /// Linear RGB reflectance, each component in (0, 1).
    pub albedo: [f64; 3],
    /// Full major axis length distribution, pixels.
    pub major_axis_mean: f64,
    pub major_axis_sd: f64,
    /// Major/minor axis ratio.
    pub elongation: f64,
    /// Relative brightness texture amplitude inside the grain.
    pub texture_amplitude: f64,
}

impl ClassProfile {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.albedo.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(DatagenError::InvalidConfig(format!(
                "{}: albedo components must lie in (0, 1)",
                self.name
            )));
        }
        if !(self.major_axis_mean > 0.0) || self.major_axis_sd < 0.0 {
            return Err(DatagenError::InvalidConfig(format!("{}: axes must be positive", self.name)));
        }
        if !(self.elongation >= 1.0) {
            return Err(DatagenError::InvalidConfig(format!(
                "{}: elongation must be at least 1",
                self.name
            )));
        }
        if self.texture_amplitude < 0.0 {
            return Err(DatagenError::InvalidConfig(format!(
                "{}: texture amplitude must be non-negative",
                self.name
            )));
        }
        Ok(())
    }
}

/// Default profiles: distinct but overlapping distributions, so the task is
/// learnable without being trivial. Whites separate mostly by shape, brown
/// and parboiled mostly by color.
pub fn default_profiles() -> Vec<ClassProfile> {
    let mk = |class_id: usize, albedo: [f64; 3], major: f64, sd: f64, elong: f64, tex: f64| ClassProfile {
        class_id,
        name: CLASS_NAMES[class_id].to_string(),
        albedo,
        major_axis_mean: major,
        major_axis_sd: sd,
        elongation: elong,
        texture_amplitude: tex,
    };
    vec![
        mk(0, [0.75, 0.72, 0.66], 11.0, 1.2, 1.7, 0.06),
        mk(1, [0.78, 0.75, 0.68], 21.0, 1.8, 4.0, 0.05),
        mk(2, [0.42, 0.28, 0.16], 15.0, 1.5, 2.8, 0.12),
        mk(3, [0.70, 0.71, 0.62], 16.0, 1.5, 3.1, 0.04),
        mk(4, [0.70, 0.58, 0.33], 14.5, 1.5, 2.6, 0.09),
    ]
}

/// Shot+read noise approximation: sigma = sqrt_scale*sqrt(v) + floor, in
/// normalized signal units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sqrt_scale: f64,
    pub floor: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            sqrt_scale: 0.01,
            floor: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Imbalance {
    Balanced,
    /// Class totals proportional to the published sample distribution.
    Paper,
}

/// Everything the generator needs. Output is a pure function of this value.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n_per_class: usize,
    pub seed: u64,
    pub imbalance: Imbalance,
    pub size: usize,
    pub pattern: CfaPattern,
    pub bit_depth: u8,
    pub black_level: u16,
    pub white_level: u16,
    pub noise: Option<NoiseModel>,
    pub profiles: Vec<ClassProfile>,
    pub conversion: ConversionConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_per_class: 1000,
            seed: 0,
            imbalance: Imbalance::Balanced,
            size: 40,
            pattern: CfaPattern::Rggb,
            bit_depth: 12,
            black_level: 256,
            white_level: 4095,
            noise: Some(NoiseModel::default()),
            profiles: default_profiles(),
            conversion: default_conversion(),
        }
    }
}

/// The fixed conversion the dataset ships with. RGB outputs are derived
/// from the mosaics with exactly this config (at 8- and 16-bit depth).
pub fn default_conversion() -> ConversionConfig {
    ConversionConfig {
        wb_gains: [1.9, 1.0, 1.6],
        color_matrix: [
            [1.15, -0.10, -0.05],
            [-0.10, 1.25, -0.15],
            [-0.05, -0.20, 1.25],
        ],
        tone: ToneCurve::Reinhard { scale: 2.5 },
        gamma: GammaCurve::Srgb,
        out_depth: 8,
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.n_per_class < 10 {
            return Err(DatagenError::InvalidConfig(format!(
                "n_per_class must be at least 10 for a nonempty test split, got {}",
                self.n_per_class
            )));
        }
        if self.size < 4 || self.size % 2 != 0 {
            return Err(DatagenError::InvalidConfig(format!(
                "size must be even and at least 4, got {}",
                self.size
            )));
        }
        if self.profiles.len() != CLASS_NAMES.len() {
            return Err(DatagenError::InvalidConfig(format!(
                "expected {} class profiles, got {}",
                CLASS_NAMES.len(),
                self.profiles.len()
            )));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if p.class_id != i {
                return Err(DatagenError::InvalidConfig(format!(
                    "profile {i} has class_id {}",
                    p.class_id
                )));
            }
            p.validate()?;
        }
        self.conversion.validate()?;
        Ok(())
    }

    /// Per-class sample totals under the configured balance mode.
    pub fn class_counts(&self) -> [usize; 5] {
        match self.imbalance {
            Imbalance::Balanced => [self.n_per_class; 5],
            Imbalance::Paper => {
                let total = (self.n_per_class * 5) as f64;
                let weight_sum: usize = PAPER_CLASS_WEIGHTS.iter().sum();
                let mut counts = [0usize; 5];
                for (c, &w) in PAPER_CLASS_WEIGHTS.iter().enumerate() {
                    counts[c] = ((total * w as f64 / weight_sum as f64).round() as usize).max(10);
                }
                counts
            }
        }
    }
}

/// Render one scene: an anti-aliased ellipse with class-conditional shape,
/// albedo and texture on a dark background. Scene-linear values in [0, 1].
pub fn render_scene(profile: &ClassProfile, size: usize, rng: &mut ChaCha8Rng) -> LinearImage {
    let s = size as f64;
    let cx = s / 2.0 + rng.gen_range(-1.5..1.5);
    let cy = s / 2.0 + rng.gen_range(-1.5..1.5);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let axis_dist = Normal::new(profile.major_axis_mean, profile.major_axis_sd).expect("sd >= 0");
    let major = axis_dist.sample(rng).max(4.0).min(s - 4.0);
    let minor_jitter: f64 = rng.gen_range(0.92..1.08);
    let minor = (major / profile.elongation * minor_jitter).max(2.0);
    let (a, b) = (major / 2.0, minor / 2.0);
    let (sin_t, cos_t) = theta.sin_cos();

    let mut img = LinearImage::zeros(size, size, 3);
    // Background first, one draw per pixel, kept at or below 0.05 linear.
    let mut background = vec![0.0; size * size];
    for v in background.iter_mut() {
        *v = 0.02 + rng.gen_range(0.0..0.015);
    }
    // One brightness texture draw per pixel, fixed count regardless of
    // geometry so the stream layout never shifts.
    let mut texture = vec![0.0; size * size];
    for v in texture.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }

    let edge = b.min(a);
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let u = (px * cos_t + py * sin_t) / a;
            let v = (-px * sin_t + py * cos_t) / b;
            let d = (u * u + v * v).sqrt();
            // ~1px linear ramp at the rim.
            let coverage = ((1.0 - d) * edge + 0.5).clamp(0.0, 1.0);
            let bg = background[y * size + x];
            let brightness = 1.0 + profile.texture_amplitude * texture[y * size + x];
            for c in 0..3 {
                let grain = (profile.albedo[c] * brightness).clamp(0.0, 1.0);
                let value = bg * (1.0 - coverage) + grain * coverage;
                img.set(x, y, c, value.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Simulate the sensor: sample the per-site CFA color, divide out the white
/// balance gains (the inverse of the conversion's multiply), add bounded
/// noise, and map to raw counts between the black and white levels.
#[allow(clippy::too_many_arguments)]
pub fn scene_to_mosaic(
    scene: &LinearImage,
    pattern: CfaPattern,
    bit_depth: u8,
    black_level: u16,
    white_level: u16,
    wb_gains: [f64; 3],
    noise: Option<NoiseModel>,
    noise_seed: u64,
) -> Result<CfaMosaic, DatagenError> {
    if scene.channels != 3 {
        return Err(DatagenError::InvalidConfig(format!(
            "scene must have 3 channels, got {}",
            scene.channels
        )));
    }
    let mut rng = derive_rng(noise_seed, 0, TAG_NOISE);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let max = crate::isp::max_code(bit_depth) as f64;
    let black = black_level as f64;
    let range = white_level as f64 - black;
    let mut samples = Vec::with_capacity(scene.width * scene.height);
    for y in 0..scene.height {
        for x in 0..scene.width {
            let (channel, gain) = match pattern.color_at(x, y) {
                CfaColor::R => (0, wb_gains[0]),
                CfaColor::G => (1, wb_gains[1]),
                CfaColor::B => (2, wb_gains[2]),
            };
            let mut v = scene.at(x, y, channel) / gain;
            if let Some(n) = noise {
                let sigma = n.sqrt_scale * v.max(0.0).sqrt() + n.floor;
                v += sigma * normal.sample(&mut rng);
            }
            let counts = (black + v * range).round().clamp(0.0, max);
            samples.push(counts as u16);
        }
    }
    Ok(CfaMosaic::new(
        scene.width,
        scene.height,
        pattern,
        bit_depth,
        black_level,
        white_level,
        samples,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(text: &str) -> Option<Split> {
        match text {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-class split sizes: test = max(1, round(0.1 n)), val = round(0.2 n),
/// train = the rest. Satisfies the 70/20/10 contract within one sample.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = ((n as f64 * 0.1).round() as usize).max(1);
    let val = (n as f64 * 0.2).round() as usize;
    let train = n - val - test;
    (train, val, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub class_id: usize,
    pub split: Split,
    pub craw_path: String,
    pub rgb8_path: String,
    pub rgb16_path: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitManifest {
    pub records: Vec<SampleRecord>,
}

impl SplitManifest {
    /// Row indices of one split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-class counts per split: `counts[class][split]`.
    pub fn counts(&self) -> [[usize; 3]; 5] {
        let mut counts = [[0usize; 3]; 5];
        for r in &self.records {
            counts[r.class_id][r.split.index()] += 1;
        }
        counts
    }

    /// Check the 70/20/10 (+-1 per class) contract and id disjointness.
    pub fn validate_ratios(&self) -> Result<(), DatagenError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(DatagenError::Manifest(format!("duplicate sample id {}", r.id)));
            }
        }
        for (class, per_split) in self.counts().iter().enumerate() {
            let n: usize = per_split.iter().sum();
            if n == 0 {
                continue;
            }
            let targets = [0.7 * n as f64, 0.2 * n as f64, 0.1 * n as f64];
            for (s, (&got, &target)) in per_split.iter().zip(targets.iter()).enumerate() {
                if (got as f64 - target).abs() > 1.0 + 1e-9 {
                    return Err(DatagenError::Manifest(format!(
                        "class {class} split {s}: {got} samples, expected {target:.1} +- 1"
                    )));
                }
            }
            if per_split[2] == 0 {
                return Err(DatagenError::Manifest(format!("class {class}: empty test split")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, header_comments: &[String]) -> Result<(), DatagenError> {
        let mut out = String::new();
        for line in header_comments {
            out.push_str(&format!("# {line}\n"));
        }
        out.push_str("id,class,split,craw_path,rgb8_path,rgb16_path\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id, r.class_id, r.split, r.craw_path, r.rgb8_path, r.rgb16_path
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitManifest, DatagenError> {
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != "id,class,split,craw_path,rgb8_path,rgb16_path" {
                    return Err(DatagenError::Manifest(format!(
                        "line {}: unexpected header '{line}'",
                        lineno + 1
                    )));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(DatagenError::Manifest(format!(
                    "line {}: expected 6 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let class_id: usize = fields[1]
                .parse()
                .map_err(|_| DatagenError::Manifest(format!("line {}: bad class id", lineno + 1)))?;
            if class_id >= 5 {
                return Err(DatagenError::Manifest(format!("line {}: class id out of range", lineno + 1)));
            }
            let split = Split::parse(fields[2])
                .ok_or_else(|| DatagenError::Manifest(format!("line {}: bad split tag", lineno + 1)))?;
            records.push(SampleRecord {
                id: fields[0].to_string(),
                class_id,
                split,
                craw_path: fields[3].to_string(),
                rgb8_path: fields[4].to_string(),
                rgb16_path: fields[5].to_string(),
            });
        }
        if !saw_header {
            return Err(DatagenError::Manifest("missing header row".to_string()));
        }
        Ok(SplitManifest { records })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GenStats {
    pub files_written: usize,
    pub files_unchanged: usize,
}

impl GenStats {
    pub fn up_to_date(&self) -> bool {
        self.files_written == 0
    }
}

fn write_if_changed(path: &Path, bytes: &[u8], stats: &mut GenStats) -> Result<(), DatagenError> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            stats.files_unchanged += 1;
            return Ok(());
        }
    }
    fs::write(path, bytes)?;
    stats.files_written += 1;
    Ok(())
}

/// Generate (or refresh) the paired dataset under `out_dir`. Returns the
/// manifest and write statistics; unchanged files are left untouched, so a
/// rerun over an intact dataset reports `up_to_date`.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<(SplitManifest, GenStats), DatagenError> {
    cfg.validate()?;
    let craw_dir = out_dir.join("craw");
    let rgb8_dir = out_dir.join("rgb8");
    let rgb16_dir = out_dir.join("rgb16");
    for dir in [out_dir, &craw_dir, &rgb8_dir, &rgb16_dir] {
        fs::create_dir_all(dir)?;
    }

    let mut cfg8 = cfg.conversion.clone();
    cfg8.out_depth = 8;
    let mut cfg16 = cfg.conversion.clone();
    cfg16.out_depth = 16;

    let counts = cfg.class_counts();
    let mut stats = GenStats::default();
    let mut records = Vec::new();
    for (class_id, profile) in cfg.profiles.iter().enumerate() {
        let n = counts[class_id];
        let (n_train, n_val, _n_test) = split_sizes(n);
        for i in 0..n {
            let id = format!("{}_{:05}", profile.name, i);
            let stream = ((class_id as u64) << 32) | i as u64;
            let mut scene_rng = derive_rng(cfg.seed, stream, TAG_SCENE);
            let scene = render_scene(profile, cfg.size, &mut scene_rng);
            let noise_seed = crate::util::splitmix64(cfg.seed ^ stream.wrapping_mul(0x9e37_79b9));
            let mosaic = scene_to_mosaic(
                &scene,
                cfg.pattern,
                cfg.bit_depth,
                cfg.black_level,
                cfg.white_level,
                cfg.conversion.wb_gains,
                cfg.noise,
                noise_seed,
            )?;
            let rgb8 = convert(&mosaic, &cfg8)?;
            let rgb16 = convert(&mosaic, &cfg16)?;

            let craw_rel = format!("craw/{id}.craw");
            let rgb8_rel = format!("rgb8/{id}.ppm");
            let rgb16_rel = format!("rgb16/{id}.ppm");
            write_if_changed(&out_dir.join(&craw_rel), &encode_craw(&mosaic), &mut stats)?;
            write_if_changed(&out_dir.join(&rgb8_rel), &encode_ppm(&rgb8), &mut stats)?;
            write_if_changed(&out_dir.join(&rgb16_rel), &encode_ppm(&rgb16), &mut stats)?;

            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            records.push(SampleRecord {
                id,
                class_id,
                split,
                craw_path: craw_rel,
                rgb8_path: rgb8_rel,
                rgb16_path: rgb16_rel,
            });
        }
    }
    let manifest = SplitManifest { records };
    manifest.validate_ratios()?;
    Ok((manifest, stats))
}

/// On-disk tensor format of a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadFormat {
    Raw,
    Rgb8,
    Rgb16,
}

impl LoadFormat {
    pub fn parse(text: &str) -> Option<LoadFormat> {
        match text {
            "raw" => Some(LoadFormat::Raw),
            "rgb8" => Some(LoadFormat::Rgb8),
            "rgb16" => Some(LoadFormat::Rgb16),
            _ => None,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            LoadFormat::Raw => 1,
            _ => 3,
        }
    }
}

fn record_path(base_dir: &Path, rel: &str) -> PathBuf {
    base_dir.join(rel)
}

/// Load selected samples of a split as one NCHW tensor plus labels.
///
/// RAW loads as the black/white-normalized mosaic (no ISP stages); RGB loads
/// as planar channels scaled by 1/255 or 1/65535.
pub fn load_batch(
    manifest: &SplitManifest,
    base_dir: &Path,
    split: Split,
    format: LoadFormat,
    indices: &[usize],
) -> Result<LabeledSet, DatagenError> {
    let rows = manifest.split_indices(split);
    let mut size: Option<usize> = None;
    let mut data: Vec<f64> = Vec::new();
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let &row = rows
            .get(idx)
            .ok_or_else(|| DatagenError::Manifest(format!("index {idx} outside {split} split")))?;
        let record = &manifest.records[row];
        let (s, values) = load_sample(base_dir, record, format)?;
        match size {
            None => size = Some(s),
            Some(prev) if prev != s => {
                return Err(DatagenError::Pairing {
                    id: record.id.clone(),
                    message: format!("sample size {s} differs from {prev}"),
                })
            }
            _ => {}
        }
        data.extend_from_slice(&values);
        labels.push(record.class_id);
    }
    let s = size.ok_or_else(|| DatagenError::Manifest("empty batch".to_string()))?;
    let tensor = Tensor::from_vec(&[indices.len(), format.channels(), s, s], data);
    Ok(LabeledSet::new(tensor, labels).expect("consistent batch"))
}

/// Load a whole split in manifest order.
pub fn load_split(
    manifest: &SplitManifest,
    base_dir: &Path,
    split: Split,
    format: LoadFormat,
) -> Result<LabeledSet, DatagenError> {
    let n = manifest.split_indices(split).len();
    let indices: Vec<usize> = (0..n).collect();
    load_batch(manifest, base_dir, split, format, &indices)
}

fn load_sample(
    base_dir: &Path,
    record: &SampleRecord,
    format: LoadFormat,
) -> Result<(usize, Vec<f64>), DatagenError> {
    match format {
        LoadFormat::Raw => {
            let mosaic = read_craw(&record_path(base_dir, &record.craw_path))?;
            if mosaic.width != mosaic.height {
                return Err(DatagenError::Pairing {
                    id: record.id.clone(),
                    message: "non-square mosaic".to_string(),
                });
            }
            let lin = linearize(&mosaic)?;
            Ok((mosaic.width, lin.values))
        }
        LoadFormat::Rgb8 | LoadFormat::Rgb16 => {
            let rel = if format == LoadFormat::Rgb8 {
                &record.rgb8_path
            } else {
                &record.rgb16_path
            };
            let img = read_ppm(&record_path(base_dir, rel))?;
            let want_depth = if format == LoadFormat::Rgb8 { 8 } else { 16 };
            if img.depth != want_depth {
                return Err(DatagenError::Pairing {
                    id: record.id.clone(),
                    message: format!("expected {want_depth}-bit PPM, found {}-bit", img.depth),
                });
            }
            if img.width != img.height {
                return Err(DatagenError::Pairing {
                    id: record.id.clone(),
                    message: "non-square image".to_string(),
                });
            }
            let scale = 1.0 / crate::isp::max_code(want_depth) as f64;
            // Interleaved HWC on disk -> planar CHW in the tensor.
            let s = img.width;
            let mut values = vec![0.0; 3 * s * s];
            for p in 0..s * s {
                for c in 0..3 {
                    values[c * s * s + p] = img.pixels[p * 3 + c] as f64 * scale;
                }
            }
            Ok((s, values))
        }
    }
}

/// Recompute both conversions for every sample and byte-compare with the
/// stored PPMs: RAW and RGB entries must derive from the same scene.
pub fn verify_pairing(
    manifest: &SplitManifest,
    base_dir: &Path,
    conversion: &ConversionConfig,
) -> Result<(), DatagenError> {
    let mut cfg8 = conversion.clone();
    cfg8.out_depth = 8;
    let mut cfg16 = conversion.clone();
    cfg16.out_depth = 16;
    for record in &manifest.records {
        let mosaic = read_craw(&record_path(base_dir, &record.craw_path))?;
        for (cfg, rel) in [(&cfg8, &record.rgb8_path), (&cfg16, &record.rgb16_path)] {
            let derived = encode_ppm(&convert(&mosaic, cfg)?);
            let stored = fs::read(record_path(base_dir, rel))?;
            if derived != stored {
                return Err(DatagenError::Pairing {
                    id: record.id.clone(),
                    message: format!("{rel} does not match the conversion of its mosaic"),
                });
            }
        }
    }
    Ok(())
}

/// Parse a class-profile overrides file (key=value, one `class.<i>.<field>`
/// per line).
pub fn parse_profiles(text: &str) -> Result<Vec<ClassProfile>, DatagenError> {
    let mut profiles = default_profiles();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DatagenError::InvalidConfig(format!("line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let mut parts = key.split('.');
        let bad_key = || DatagenError::InvalidConfig(format!("line {}: unknown key '{key}'", lineno + 1));
        if parts.next() != Some("class") {
            return Err(bad_key());
        }
        let idx: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .filter(|&i| i < profiles.len())
            .ok_or_else(bad_key)?;
        let field = parts.next().ok_or_else(bad_key)?;
        if parts.next().is_some() {
            return Err(bad_key());
        }
        let parse_f64 = |v: &str| -> Result<f64, DatagenError> {
            v.parse()
                .map_err(|_| DatagenError::InvalidConfig(format!("line {}: bad number '{v}'", lineno + 1)))
        };
        match field {
            "name" => profiles[idx].name = value.to_string(),
            "albedo" => {
                let vals: Vec<f64> = value
                    .split(',')
                    .map(|v| parse_f64(v.trim()))
                    .collect::<Result<_, _>>()?;
                if vals.len() != 3 {
                    return Err(DatagenError::InvalidConfig(format!(
                        "line {}: albedo needs 3 components",
                        lineno + 1
                    )));
                }
                profiles[idx].albedo = [vals[0], vals[1], vals[2]];
            }
            "major_axis" => {
                let vals: Vec<f64> = value
                    .split(',')
                    .map(|v| parse_f64(v.trim()))
                    .collect::<Result<_, _>>()?;
                if vals.len() != 2 {
                    return Err(DatagenError::InvalidConfig(format!(
                        "line {}: major_axis needs mean, sd",
                        lineno + 1
                    )));
                }
                profiles[idx].major_axis_mean = vals[0];
                profiles[idx].major_axis_sd = vals[1];
            }
            "elongation" => profiles[idx].elongation = parse_f64(value)?,
            "texture" => profiles[idx].texture_amplitude = parse_f64(value)?,
            _ => return Err(bad_key()),
        }
    }
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

/// Render the generator configuration as the documented key=value format.
pub fn render_generator_config(cfg: &GenConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("n_per_class = {}\n", cfg.n_per_class));
    out.push_str(&format!("seed = {}\n", cfg.seed));
    out.push_str(&format!(
        "imbalance = {}\n",
        match cfg.imbalance {
            Imbalance::Balanced => "balanced",
            Imbalance::Paper => "paper",
        }
    ));
    out.push_str(&format!("size = {}\n", cfg.size));
    out.push_str(&format!("pattern = {}\n", cfg.pattern));
    out.push_str(&format!("bit_depth = {}\n", cfg.bit_depth));
    out.push_str(&format!("black_level = {}\n", cfg.black_level));
    out.push_str(&format!("white_level = {}\n", cfg.white_level));
    match cfg.noise {
        Some(n) => out.push_str(&format!("noise = {}, {}\n", n.sqrt_scale, n.floor)),
        None => out.push_str("noise = off\n"),
    }
    for p in &cfg.profiles {
        out.push_str(&format!("class.{}.name = {}\n", p.class_id, p.name));
        out.push_str(&format!(
            "class.{}.albedo = {}, {}, {}\n",
            p.class_id, p.albedo[0], p.albedo[1], p.albedo[2]
        ));
        out.push_str(&format!(
            "class.{}.major_axis = {}, {}\n",
            p.class_id, p.major_axis_mean, p.major_axis_sd
        ));
        out.push_str(&format!("class.{}.elongation = {}\n", p.class_id, p.elongation));
        out.push_str(&format!("class.{}.texture = {}\n", p.class_id, p.texture_amplitude));
    }
    out
}
