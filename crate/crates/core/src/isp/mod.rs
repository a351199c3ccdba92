//! RAW→RGB conversion pipeline.
//!
//! Composable, deterministic stages: linearization, white balance, bilinear
//! demosaic, color correction, tone mapping, gamma encoding, quantization.
//! Every stage is a pure function; identical inputs give bit-identical
//! outputs. Values are carried as 64-bit floats in [0, 1] between stages, so
//! quantization is the only lossy step.

mod io;

pub use io::{
    decode_craw, decode_ppm, encode_craw, encode_ppm, parse_conversion_config, read_craw,
    read_ppm, render_conversion_config, write_craw, write_ppm,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IspError {
    #[error("invalid mosaic: {0}")]
    InvalidMosaic(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid conversion config: {0}")]
    InvalidConfig(String),
    #[error("malformed {format} data: {message}")]
    Format { format: &'static str, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bayer color filter array phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfaColor {
    R,
    G,
    B,
}

impl CfaPattern {
    pub const ALL: [CfaPattern; 4] = [
        CfaPattern::Rggb,
        CfaPattern::Bggr,
        CfaPattern::Grbg,
        CfaPattern::Gbrg,
    ];

    /// 2x2 tile as rows of colors, top-left first.
    pub fn tile(self) -> [[CfaColor; 2]; 2] {
        use CfaColor::*;
        match self {
            CfaPattern::Rggb => [[R, G], [G, B]],
            CfaPattern::Bggr => [[B, G], [G, R]],
            CfaPattern::Grbg => [[G, R], [B, G]],
            CfaPattern::Gbrg => [[G, B], [R, G]],
        }
    }

    pub fn color_at(self, x: usize, y: usize) -> CfaColor {
        self.tile()[y & 1][x & 1]
    }

    /// Wire code used by the `.craw` container.
    pub fn code(self) -> u8 {
        match self {
            CfaPattern::Rggb => 0,
            CfaPattern::Bggr => 1,
            CfaPattern::Grbg => 2,
            CfaPattern::Gbrg => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<CfaPattern> {
        match code {
            0 => Some(CfaPattern::Rggb),
            1 => Some(CfaPattern::Bggr),
            2 => Some(CfaPattern::Grbg),
            3 => Some(CfaPattern::Gbrg),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Option<CfaPattern> {
        match text.to_ascii_uppercase().as_str() {
            "RGGB" => Some(CfaPattern::Rggb),
            "BGGR" => Some(CfaPattern::Bggr),
            "GRBG" => Some(CfaPattern::Grbg),
            "GBRG" => Some(CfaPattern::Gbrg),
            _ => None,
        }
    }
}

impl std::fmt::Display for CfaPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            CfaPattern::Rggb => "RGGB",
            CfaPattern::Bggr => "BGGR",
            CfaPattern::Grbg => "GRBG",
            CfaPattern::Gbrg => "GBRG",
        };
        f.write_str(name)
    }
}

/// Single-channel Bayer sensor readout with bit-depth and black/white level
/// metadata. Samples are raw counts, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfaMosaic {
    pub width: usize,
    pub height: usize,
    pub pattern: CfaPattern,
    pub bit_depth: u8,
    pub black_level: u16,
    pub white_level: u16,
    pub samples: Vec<u16>,
}

impl CfaMosaic {
    pub fn new(
        width: usize,
        height: usize,
        pattern: CfaPattern,
        bit_depth: u8,
        black_level: u16,
        white_level: u16,
        samples: Vec<u16>,
    ) -> Result<CfaMosaic, IspError> {
        if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
            return Err(IspError::InvalidMosaic(format!(
                "dimensions must be even and nonzero, got {width}x{height}"
            )));
        }
        if !(10..=16).contains(&bit_depth) {
            return Err(IspError::InvalidMosaic(format!(
                "bit depth must be in [10, 16], got {bit_depth}"
            )));
        }
        let max = max_code(bit_depth);
        if black_level >= white_level || white_level > max {
            return Err(IspError::InvalidMosaic(format!(
                "levels must satisfy black < white <= {max}, got black={black_level} white={white_level}"
            )));
        }
        if samples.len() != width * height {
            return Err(IspError::InvalidMosaic(format!(
                "expected {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        if let Some(&bad) = samples.iter().find(|&&s| s > max) {
            return Err(IspError::InvalidMosaic(format!(
                "sample {bad} exceeds {bit_depth}-bit maximum {max}"
            )));
        }
        Ok(CfaMosaic {
            width,
            height,
            pattern,
            bit_depth,
            black_level,
            white_level,
            samples,
        })
    }

    pub fn sample(&self, x: usize, y: usize) -> u16 {
        self.samples[y * self.width + x]
    }
}

/// Maximum representable code at a given bit depth.
pub fn max_code(bit_depth: u8) -> u16 {
    (((1u32 << bit_depth) - 1) & 0xffff) as u16
}

/// Scene-linear floating-point image, 1 or 3 channels interleaved, values
/// in [0, 1] after clamping stages.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<LinearImage, IspError> {
        if channels != 1 && channels != 3 {
            return Err(IspError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if values.len() != width * height * channels {
            return Err(IspError::InvalidImage(format!(
                "expected {} values, got {}",
                width * height * channels,
                values.len()
            )));
        }
        Ok(LinearImage {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> LinearImage {
        LinearImage {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Interleaved R,G,B integer image at 8 or 16 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub depth: u8,
    pub pixels: Vec<u16>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, depth: u8, pixels: Vec<u16>) -> Result<RgbImage, IspError> {
        if depth != 8 && depth != 16 {
            return Err(IspError::InvalidImage(format!("depth must be 8 or 16, got {depth}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(IspError::InvalidImage(format!(
                "expected {} channel values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        let max = max_code(depth);
        if pixels.iter().any(|&p| p > max) {
            return Err(IspError::InvalidImage(format!("channel value exceeds {depth}-bit maximum")));
        }
        Ok(RgbImage {
            width,
            height,
            depth,
            pixels,
        })
    }

    pub fn max_value(&self) -> u16 {
        max_code(self.depth)
    }
}

/// Global tone mapping operator applied to scene-linear values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToneCurve {
    Identity,
    /// Reinhard operator `v -> (s*v)/(1+s*v)`, renormalized so 1 maps to 1.
    Reinhard { scale: f64 },
}

/// Transfer function applied before quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaCurve {
    /// Standard two-piece sRGB curve.
    Srgb,
    /// Pure power law `v -> v^(1/gamma)`.
    Power { gamma: f64 },
}

/// Knobs of the conversion stages. Rows of `color_matrix` must each sum to
/// 1.0 so that gray is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversionConfig {
    pub wb_gains: [f64; 3],
    pub color_matrix: [[f64; 3]; 3],
    pub tone: ToneCurve,
    pub gamma: GammaCurve,
    pub out_depth: u8,
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl ConversionConfig {
    pub fn validate(&self) -> Result<(), IspError> {
        for (i, &g) in self.wb_gains.iter().enumerate() {
            if !(g > 0.0) || !g.is_finite() {
                return Err(IspError::InvalidConfig(format!("wb gain {i} must be positive, got {g}")));
            }
        }
        for (i, row) in self.color_matrix.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(IspError::InvalidConfig(format!(
                    "color matrix row {i} sums to {sum}, expected 1.0"
                )));
            }
        }
        if let ToneCurve::Reinhard { scale } = self.tone {
            if !(scale > 0.0) {
                return Err(IspError::InvalidConfig(format!("tone scale must be positive, got {scale}")));
            }
        }
        if let GammaCurve::Power { gamma } = self.gamma {
            if !(gamma > 0.0) {
                return Err(IspError::InvalidConfig(format!("gamma must be positive, got {gamma}")));
            }
        }
        if self.out_depth != 8 && self.out_depth != 16 {
            return Err(IspError::InvalidConfig(format!(
                "output depth must be 8 or 16, got {}",
                self.out_depth
            )));
        }
        Ok(())
    }

    /// Identity pipeline at a given depth: unit gains, identity matrix, no
    /// tone curve, sRGB gamma.
    pub fn identity(out_depth: u8) -> ConversionConfig {
        ConversionConfig {
            wb_gains: [1.0, 1.0, 1.0],
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tone: ToneCurve::Identity,
            gamma: GammaCurve::Srgb,
            out_depth,
        }
    }
}

#[inline]
fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Normalize raw counts to [0, 1] between the black and white levels.
pub fn linearize(m: &CfaMosaic) -> Result<LinearImage, IspError> {
    if m.black_level >= m.white_level {
        return Err(IspError::InvalidMosaic(format!(
            "black level {} must be below white level {}",
            m.black_level, m.white_level
        )));
    }
    let black = m.black_level as f64;
    let range = m.white_level as f64 - black;
    let values = m
        .samples
        .iter()
        .map(|&s| clamp01((s as f64 - black) / range))
        .collect();
    LinearImage::new(m.width, m.height, 1, values)
}

/// Multiply every CFA site by the gain of its color, clamped to [0, 1].
pub fn white_balance(
    img: &LinearImage,
    pattern: CfaPattern,
    gains: [f64; 3],
) -> Result<LinearImage, IspError> {
    if img.channels != 1 {
        return Err(IspError::InvalidImage(format!(
            "white balance expects a 1-channel mosaic, got {} channels",
            img.channels
        )));
    }
    if gains.iter().any(|&g| !(g > 0.0)) {
        return Err(IspError::InvalidConfig(format!("wb gains must be positive, got {gains:?}")));
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let gain = match pattern.color_at(x, y) {
                CfaColor::R => gains[0],
                CfaColor::G => gains[1],
                CfaColor::B => gains[2],
            };
            let v = out.values[y * img.width + x];
            out.values[y * img.width + x] = clamp01(v * gain);
        }
    }
    Ok(out)
}

/// Reflect an out-of-range coordinate back into [0, n) without repeating the
/// edge sample (`-1 -> 1`, `n -> n-2`). Preserves Bayer phase because the
/// reflection distance is always even.
#[inline]
pub fn mirror_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 2);
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// Bilinear CFA interpolation over a 3x3 window with mirrored borders.
///
/// At each site the native color is copied; each missing color is the
/// average of the same-color sites inside the 3x3 window, scanned in
/// row-major order (reflected duplicates included).
pub fn demosaic_bilinear(img: &LinearImage, pattern: CfaPattern) -> Result<LinearImage, IspError> {
    if img.channels != 1 {
        return Err(IspError::InvalidImage(format!(
            "demosaic expects a 1-channel mosaic, got {} channels",
            img.channels
        )));
    }
    if img.width % 2 != 0 || img.height % 2 != 0 || img.width < 2 || img.height < 2 {
        return Err(IspError::InvalidImage(format!(
            "demosaic requires even dimensions >= 2, got {}x{}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut out = LinearImage::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let native = pattern.color_at(x, y);
            for (c, color) in [CfaColor::R, CfaColor::G, CfaColor::B].into_iter().enumerate() {
                let v = if color == native {
                    img.values[y * w + x]
                } else {
                    let mut sum = 0.0;
                    let mut count = 0u32;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let sy = mirror_index(y as isize + dy, h);
                            let sx = mirror_index(x as isize + dx, w);
                            if pattern.color_at(sx, sy) == color {
                                sum += img.values[sy * w + sx];
                                count += 1;
                            }
                        }
                    }
                    sum / count as f64
                };
                out.values[(y * w + x) * 3 + c] = v;
            }
        }
    }
    Ok(out)
}

/// Apply a 3x3 color matrix to every pixel, clamped to [0, 1].
pub fn color_correct(img: &LinearImage, matrix: &[[f64; 3]; 3]) -> Result<LinearImage, IspError> {
    if img.channels != 3 {
        return Err(IspError::InvalidImage(format!(
            "color correction expects 3 channels, got {}",
            img.channels
        )));
    }
    for (i, row) in matrix.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(IspError::InvalidConfig(format!(
                "color matrix row {i} sums to {sum}, expected 1.0"
            )));
        }
    }
    let mut out = img.clone();
    for px in out.values.chunks_exact_mut(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        for (c, row) in matrix.iter().enumerate() {
            px[c] = clamp01(row[0] * r + row[1] * g + row[2] * b);
        }
    }
    Ok(out)
}

fn reinhard(v: f64, scale: f64) -> f64 {
    // (s*v)/(1+s*v) scaled by the inverse of its value at v=1, so the white
    // point stays fixed.
    clamp01(v * (1.0 + scale) / (1.0 + scale * v))
}

/// Apply the configured global tone curve.
pub fn tone_map(img: &LinearImage, curve: ToneCurve) -> Result<LinearImage, IspError> {
    if img.channels != 3 {
        return Err(IspError::InvalidImage(format!(
            "tone mapping expects 3 channels, got {}",
            img.channels
        )));
    }
    match curve {
        ToneCurve::Identity => Ok(img.clone()),
        ToneCurve::Reinhard { scale } => {
            if !(scale > 0.0) {
                return Err(IspError::InvalidConfig(format!(
                    "tone scale must be positive, got {scale}"
                )));
            }
            let mut out = img.clone();
            for v in out.values.iter_mut() {
                *v = reinhard(*v, scale);
            }
            Ok(out)
        }
    }
}

/// sRGB encoding of one linear value (IEC 61966-2-1 two-piece curve).
/// The white point is pinned to 1.0; the polynomial form lands one ulp low.
pub fn srgb_encode_value(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else if v >= 1.0 {
        1.0
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Apply the configured transfer function. Monotone, fixes 0 and 1.
pub fn gamma_encode(img: &LinearImage, gamma: GammaCurve) -> Result<LinearImage, IspError> {
    if img.channels != 3 {
        return Err(IspError::InvalidImage(format!(
            "gamma encoding expects 3 channels, got {}",
            img.channels
        )));
    }
    let mut out = img.clone();
    match gamma {
        GammaCurve::Srgb => {
            for v in out.values.iter_mut() {
                *v = clamp01(srgb_encode_value(*v));
            }
        }
        GammaCurve::Power { gamma } => {
            let e = 1.0 / gamma;
            for v in out.values.iter_mut() {
                *v = clamp01(v.powf(e));
            }
        }
    }
    Ok(out)
}

/// Round half away from zero. Stated explicitly for bit-exact cross-language
/// reproduction (`f64::round` has exactly these semantics).
#[inline]
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Map [0, 1] values to integer codes at the requested depth.
pub fn quantize(img: &LinearImage, depth: u8) -> Result<RgbImage, IspError> {
    if img.channels != 3 {
        return Err(IspError::InvalidImage(format!(
            "quantization expects 3 channels, got {}",
            img.channels
        )));
    }
    if depth != 8 && depth != 16 {
        return Err(IspError::InvalidConfig(format!("depth must be 8 or 16, got {depth}")));
    }
    let max = max_code(depth) as f64;
    let pixels = img
        .values
        .iter()
        .map(|&v| round_half_away(clamp01(v) * max).min(max).max(0.0) as u16)
        .collect();
    RgbImage::new(img.width, img.height, depth, pixels)
}

/// Full conversion: linearize → white balance → demosaic → color correct →
/// tone map → gamma encode → quantize.
pub fn convert(m: &CfaMosaic, cfg: &ConversionConfig) -> Result<RgbImage, IspError> {
    cfg.validate()?;
    let lin = linearize(m)?;
    let balanced = white_balance(&lin, m.pattern, cfg.wb_gains)?;
    let rgb = demosaic_bilinear(&balanced, m.pattern)?;
    let corrected = color_correct(&rgb, &cfg.color_matrix)?;
    let toned = tone_map(&corrected, cfg.tone)?;
    let encoded = gamma_encode(&toned, cfg.gamma)?;
    quantize(&encoded, cfg.out_depth)
}
