//! On-disk formats: the `.craw` RAW container, binary PPM, and the flat
//! key=value conversion config.

use std::fs;
use std::path::Path;

use super::{CfaMosaic, CfaPattern, ConversionConfig, GammaCurve, IspError, RgbImage, ToneCurve};

const CRAW_MAGIC: &[u8; 4] = b"CRAW";
const CRAW_VERSION: u8 = 1;
const CRAW_HEADER_LEN: usize = 20;

/// Serialize a mosaic into the little-endian `.craw` container.
pub fn encode_craw(m: &CfaMosaic) -> Vec<u8> {
    let mut out = Vec::with_capacity(CRAW_HEADER_LEN + m.samples.len() * 2);
    out.extend_from_slice(CRAW_MAGIC);
    out.push(CRAW_VERSION);
    out.push(m.pattern.code());
    out.push(m.bit_depth);
    out.push(0); // reserved
    out.extend_from_slice(&(m.width as u32).to_le_bytes());
    out.extend_from_slice(&(m.height as u32).to_le_bytes());
    out.extend_from_slice(&m.black_level.to_le_bytes());
    out.extend_from_slice(&m.white_level.to_le_bytes());
    for &s in &m.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn craw_err(message: impl Into<String>) -> IspError {
    IspError::Format {
        format: "craw",
        message: message.into(),
    }
}

pub fn decode_craw(bytes: &[u8]) -> Result<CfaMosaic, IspError> {
    if bytes.len() < CRAW_HEADER_LEN {
        return Err(craw_err("truncated header"));
    }
    if &bytes[0..4] != CRAW_MAGIC {
        return Err(craw_err("bad magic"));
    }
    if bytes[4] != CRAW_VERSION {
        return Err(craw_err(format!("unsupported version {}", bytes[4])));
    }
    let pattern = CfaPattern::from_code(bytes[5]).ok_or_else(|| craw_err(format!("bad pattern code {}", bytes[5])))?;
    let bit_depth = bytes[6];
    if bytes[7] != 0 {
        return Err(craw_err("reserved byte must be zero"));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let black_level = u16::from_le_bytes(bytes[16..18].try_into().unwrap());
    let white_level = u16::from_le_bytes(bytes[18..20].try_into().unwrap());
    let n = width
        .checked_mul(height)
        .ok_or_else(|| craw_err("dimension overflow"))?;
    let payload = &bytes[CRAW_HEADER_LEN..];
    if payload.len() != n * 2 {
        return Err(craw_err(format!(
            "expected {} sample bytes, got {}",
            n * 2,
            payload.len()
        )));
    }
    let samples = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    CfaMosaic::new(width, height, pattern, bit_depth, black_level, white_level, samples)
}

pub fn write_craw(path: &Path, m: &CfaMosaic) -> Result<(), IspError> {
    fs::write(path, encode_craw(m))?;
    Ok(())
}

pub fn read_craw(path: &Path) -> Result<CfaMosaic, IspError> {
    decode_craw(&fs::read(path)?)
}

/// Serialize as binary PPM (`P6`). 16-bit samples are big-endian, following
/// the Netpbm convention.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let maxval = img.max_value();
    let mut out = format!("P6\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    if img.depth == 8 {
        out.extend(img.pixels.iter().map(|&p| p as u8));
    } else {
        for &p in &img.pixels {
            out.extend_from_slice(&p.to_be_bytes());
        }
    }
    out
}

fn ppm_err(message: impl Into<String>) -> IspError {
    IspError::Format {
        format: "ppm",
        message: message.into(),
    }
}

/// Read one whitespace-delimited ASCII token, skipping `#` comments.
fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], IspError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ppm_err("unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize) -> Result<usize, IspError> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| ppm_err("bad numeric field"))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, IspError> {
    let mut pos = 0usize;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(ppm_err("expected P6 magic"));
    }
    let width = ppm_number(bytes, &mut pos)?;
    let height = ppm_number(bytes, &mut pos)?;
    let maxval = ppm_number(bytes, &mut pos)?;
    let depth = match maxval {
        255 => 8,
        65535 => 16,
        other => return Err(ppm_err(format!("unsupported maxval {other}"))),
    };
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ppm_err("missing raster separator"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    let n = width * height * 3;
    let pixels: Vec<u16> = if depth == 8 {
        if raster.len() != n {
            return Err(ppm_err(format!("expected {} raster bytes, got {}", n, raster.len())));
        }
        raster.iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() != n * 2 {
            return Err(ppm_err(format!("expected {} raster bytes, got {}", n * 2, raster.len())));
        }
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    RgbImage::new(width, height, depth, pixels)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), IspError> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, IspError> {
    decode_ppm(&fs::read(path)?)
}

fn cfg_err(message: impl Into<String>) -> IspError {
    IspError::Format {
        format: "conversion config",
        message: message.into(),
    }
}

fn parse_floats(value: &str, expected: usize, key: &str) -> Result<Vec<f64>, IspError> {
    let parts: Result<Vec<f64>, _> = value.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let parts = parts.map_err(|_| cfg_err(format!("{key}: expected {expected} comma-separated numbers")))?;
    if parts.len() != expected {
        return Err(cfg_err(format!("{key}: expected {expected} values, got {}", parts.len())));
    }
    Ok(parts)
}

/// Parse the flat key=value conversion config. Lines starting with `#` are
/// comments. Required keys: `wb_gains`, `matrix_row0..2`, `tone`, `gamma`,
/// `depth`.
pub fn parse_conversion_config(text: &str) -> Result<ConversionConfig, IspError> {
    let mut wb_gains: Option<[f64; 3]> = None;
    let mut rows: [Option<[f64; 3]>; 3] = [None, None, None];
    let mut tone: Option<ToneCurve> = None;
    let mut gamma: Option<GammaCurve> = None;
    let mut depth: Option<u8> = None;

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "wb_gains" => {
                let v = parse_floats(value, 3, key)?;
                wb_gains = Some([v[0], v[1], v[2]]);
            }
            "matrix_row0" | "matrix_row1" | "matrix_row2" => {
                let idx = key.as_bytes()[key.len() - 1] - b'0';
                let v = parse_floats(value, 3, key)?;
                rows[idx as usize] = Some([v[0], v[1], v[2]]);
            }
            "tone" => {
                let mut parts = value.split_whitespace();
                tone = Some(match parts.next() {
                    Some("identity") => ToneCurve::Identity,
                    Some("reinhard") => {
                        let scale = parts
                            .next()
                            .and_then(|s| s.parse::<f64>().ok())
                            .ok_or_else(|| cfg_err("tone: reinhard needs a scale"))?;
                        ToneCurve::Reinhard { scale }
                    }
                    _ => return Err(cfg_err(format!("tone: unknown curve '{value}'"))),
                });
            }
            "gamma" => {
                let mut parts = value.split_whitespace();
                gamma = Some(match parts.next() {
                    Some("srgb") => GammaCurve::Srgb,
                    Some("power") => {
                        let g = parts
                            .next()
                            .and_then(|s| s.parse::<f64>().ok())
                            .ok_or_else(|| cfg_err("gamma: power needs an exponent"))?;
                        GammaCurve::Power { gamma: g }
                    }
                    _ => return Err(cfg_err(format!("gamma: unknown curve '{value}'"))),
                });
            }
            "depth" => {
                depth = Some(value.parse::<u8>().map_err(|_| cfg_err("depth: expected 8 or 16"))?);
            }
            other => return Err(cfg_err(format!("unknown key '{other}'"))),
        }
    }

    let cfg = ConversionConfig {
        wb_gains: wb_gains.ok_or_else(|| cfg_err("missing wb_gains"))?,
        color_matrix: [
            rows[0].ok_or_else(|| cfg_err("missing matrix_row0"))?,
            rows[1].ok_or_else(|| cfg_err("missing matrix_row1"))?,
            rows[2].ok_or_else(|| cfg_err("missing matrix_row2"))?,
        ],
        tone: tone.ok_or_else(|| cfg_err("missing tone"))?,
        gamma: gamma.ok_or_else(|| cfg_err("missing gamma"))?,
        out_depth: depth.ok_or_else(|| cfg_err("missing depth"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Render a config in the same key=value format accepted by
/// [`parse_conversion_config`].
pub fn render_conversion_config(cfg: &ConversionConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "wb_gains = {}, {}, {}\n",
        cfg.wb_gains[0], cfg.wb_gains[1], cfg.wb_gains[2]
    ));
    for (i, row) in cfg.color_matrix.iter().enumerate() {
        out.push_str(&format!("matrix_row{} = {}, {}, {}\n", i, row[0], row[1], row[2]));
    }
    match cfg.tone {
        ToneCurve::Identity => out.push_str("tone = identity\n"),
        ToneCurve::Reinhard { scale } => out.push_str(&format!("tone = reinhard {scale}\n")),
    }
    match cfg.gamma {
        GammaCurve::Srgb => out.push_str("gamma = srgb\n"),
        GammaCurve::Power { gamma } => out.push_str(&format!("gamma = power {gamma}\n")),
    }
    out.push_str(&format!("depth = {}\n", cfg.out_depth));
    out
}
