//! Versioned binary checkpoint: magic `CKPT`, a fixed descriptor, then
//! named tensors (name length u16 + bytes, rank u8 + u32 dims, f64 LE data).
//! All multi-byte fields little-endian.

use std::fs;
use std::path::Path;

use super::model::{Architecture, Model};
use super::tensor::Tensor;
use super::NnError;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u8 = 1;

/// Descriptor stored in the checkpoint header. `variant_code` is the
/// pipeline-variant discriminant (see the `variant` module); pure
/// classifier checkpoints use the code of their input strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub variant_code: u8,
    pub architecture: Architecture,
    pub input_channels: u32,
    pub input_size: u32,
    pub num_classes: u32,
    pub width_multiplier: f64,
}

fn ck_err(message: impl Into<String>) -> NnError {
    NnError::Checkpoint(message.into())
}

/// Collect the model's named parameters and buffers in visit order.
pub fn snapshot(model: &mut Model) -> Vec<(String, Tensor)> {
    let mut entries = Vec::new();
    model.visit_params(&mut |name, p| entries.push((name.to_string(), p.value.clone())));
    model.visit_buffers(&mut |name, t| entries.push((name.to_string(), t.clone())));
    entries
}

/// Write a snapshot back into the model. Every entry must match an existing
/// tensor by name and shape, and every model tensor must be covered.
pub fn restore(model: &mut Model, entries: &[(String, Tensor)]) -> Result<(), NnError> {
    let mut missing: Vec<String> = Vec::new();
    let mut used = vec![false; entries.len()];
    {
        let mut apply = |name: &str, target: &mut Tensor| {
            match entries.iter().position(|(n, _)| n == name) {
                Some(i) => {
                    let src = &entries[i].1;
                    if src.shape() != target.shape() {
                        missing.push(format!(
                            "{name}: shape {:?} != expected {:?}",
                            src.shape(),
                            target.shape()
                        ));
                    } else {
                        target.data_mut().copy_from_slice(src.data());
                        used[i] = true;
                    }
                }
                None => missing.push(format!("{name}: absent from checkpoint")),
            }
        };
        model.visit_params(&mut |name, p| apply(name, &mut p.value));
        model.visit_buffers(&mut |name, t| apply(name, t));
    }
    if !missing.is_empty() {
        return Err(ck_err(format!("restore failed: {}", missing.join("; "))));
    }
    if let Some(i) = used.iter().position(|&u| !u) {
        return Err(ck_err(format!("restore failed: unused entry '{}'", entries[i].0)));
    }
    Ok(())
}

pub fn encode_checkpoint(meta: &CheckpointMeta, entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(meta.architecture.code());
    out.push(meta.variant_code);
    out.push(0); // reserved
    out.extend_from_slice(&meta.input_channels.to_le_bytes());
    out.extend_from_slice(&meta.input_size.to_le_bytes());
    out.extend_from_slice(&meta.num_classes.to_le_bytes());
    out.extend_from_slice(&meta.width_multiplier.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(ck_err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, Vec<(String, Tensor)>), NnError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(ck_err("bad magic"));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(ck_err(format!("unsupported version {version}")));
    }
    let arch = Architecture::from_code(c.u8()?).ok_or_else(|| ck_err("bad architecture code"))?;
    let variant_code = c.u8()?;
    let _reserved = c.u8()?;
    let meta = CheckpointMeta {
        variant_code,
        architecture: arch,
        input_channels: c.u32()?,
        input_size: c.u32()?,
        num_classes: c.u32()?,
        width_multiplier: c.f64()?,
    };
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| ck_err("non-utf8 tensor name"))?;
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(c.f64()?);
        }
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    if c.pos != bytes.len() {
        return Err(ck_err("trailing bytes after last tensor"));
    }
    Ok((meta, entries))
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    entries: &[(String, Tensor)],
) -> Result<(), NnError> {
    fs::write(path, encode_checkpoint(meta, entries))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, Tensor)>), NnError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::random_input;
    use crate::nn::model::{build_model, ModelSpec};
    use crate::util::derive_rng;

    fn small_model() -> Model {
        build_model(
            &ModelSpec {
                architecture: Architecture::TinyResnet,
                input_channels: 1,
                input_size: 8,
                num_classes: 3,
                width_multiplier: 0.25,
            },
            &mut derive_rng(0xcc, 0, 0),
        )
        .unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            variant_code: 0,
            architecture: Architecture::TinyResnet,
            input_channels: 1,
            input_size: 8,
            num_classes: 3,
            width_multiplier: 0.25,
        }
    }

    #[test]
    fn encode_decode_round_trip_preserves_everything() {
        let mut model = small_model();
        let entries = snapshot(&mut model);
        let bytes = encode_checkpoint(&meta(), &entries);
        let (got_meta, got_entries) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(got_meta, meta());
        assert_eq!(got_entries, entries);
    }

    #[test]
    fn restore_reproduces_forward_outputs() {
        let mut trained = small_model();
        // Nudge parameters away from init so restore has something to do.
        trained.visit_params(&mut |_, p| {
            p.value.data_mut().iter_mut().for_each(|v| *v += 0.01);
        });
        let entries = snapshot(&mut trained);
        let x = random_input(&[2, 1, 8, 8], 1);
        let want = trained.forward_eval(x.clone());

        let mut fresh = small_model();
        restore(&mut fresh, &entries).unwrap();
        assert_eq!(fresh.forward_eval(x), want);
    }

    #[test]
    fn restore_rejects_missing_and_extra_entries() {
        let mut model = small_model();
        let mut entries = snapshot(&mut model);
        let dropped = entries.pop().unwrap();
        assert!(restore(&mut model, &entries).is_err());
        entries.push(dropped);
        entries.push(("phantom.weight".to_string(), Tensor::zeros(&[1])));
        assert!(restore(&mut model, &entries).is_err());
    }

    #[test]
    fn decode_rejects_corruption() {
        let mut model = small_model();
        let entries = snapshot(&mut model);
        let bytes = encode_checkpoint(&meta(), &entries);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_checkpoint(&bad_magic).is_err());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(decode_checkpoint(truncated).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
    }

    #[test]
    fn snapshot_includes_running_statistics() {
        let mut model = small_model();
        let entries = snapshot(&mut model);
        assert!(entries.iter().any(|(n, _)| n.contains("running_mean")));
        assert!(entries.iter().any(|(n, _)| n.contains("running_var")));
    }
}
