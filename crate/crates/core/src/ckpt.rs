//! Bit-exact checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "BIDF" | version u32 | meta_len u32 | meta (UTF-8 JSON)
//!   then per tensor: name_len u32 | name | dtype u8 (0 = f32) |
//!   ndim u8 | dims u32 x ndim | payload (f32 LE)
//!
//! Only full-precision latent weights are stored; packed binary forms are
//! derived at load time, which keeps the format identical for training and
//! inference. A save -> load -> save round trip is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleConfig;
use crate::engine::Param;
use crate::error::{contract_err, Error, Result};
use crate::tensor::{Dims, Tensor4};
use crate::unet::{UNet, UNetConfig};

const MAGIC: &[u8; 4] = b"BIDF";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub train_step: u64,
    pub scale: u32,
    pub seed: u64,
}

pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, params: &[&Param]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::Io(e.to_string()))?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    for p in params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(DTYPE_F32);
        buf.push(4);
        let d = p.tensor().dims();
        for v in [d.n, d.c, d.h, d.w] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in p.tensor().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&buf)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[derive(Debug)]
pub struct CheckpointContents {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor4)>,
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointContents> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(Error::Io(format!("{}: truncated checkpoint", path.display())));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != MAGIC {
        return Err(Error::Io(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Io(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut at, meta_len)?)
        .map_err(|e| Error::Io(format!("{}: bad metadata: {e}", path.display())))?;
    let mut tensors = Vec::new();
    while at < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|e| Error::Io(format!("{}: bad tensor name: {e}", path.display())))?;
        let dtype = take(&mut at, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Io(format!("{}: unsupported dtype {dtype}", path.display())));
        }
        let ndim = take(&mut at, 1)?[0] as usize;
        if ndim != 4 {
            return Err(Error::Io(format!("{}: expected rank 4, got {ndim}", path.display())));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        }
        let d = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = take(&mut at, d.len() * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor4::from_vec(d, data)?));
    }
    Ok(CheckpointContents { meta, tensors })
}

/// Save a network plus its metadata.
pub fn save_model(path: &Path, net: &UNet, meta: &CheckpointMeta) -> Result<()> {
    write_checkpoint(path, meta, &net.params())
}

/// Rebuild a network from a checkpoint. Name/shape coverage is verified
/// against the freshly built network before any parameter is written.
pub fn load_model(path: &Path) -> Result<(UNet, CheckpointMeta)> {
    let contents = read_checkpoint(path)?;
    let mut net = UNet::new(contents.meta.unet.clone(), 0)?;
    let by_name: std::collections::HashMap<&str, &Tensor4> = contents
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    if by_name.len() != contents.tensors.len() {
        return contract_err("duplicate tensor names in checkpoint".to_string());
    }
    // validate first
    let mut missing = Vec::new();
    let mut bad_shape = Vec::new();
    net.visit_params(&mut |p| match by_name.get(p.name.as_str()) {
        None => missing.push(p.name.clone()),
        Some(t) if t.dims() != p.tensor().dims() => bad_shape.push(p.name.clone()),
        _ => {}
    });
    if !missing.is_empty() || !bad_shape.is_empty() {
        return contract_err(format!(
            "checkpoint does not match the configured network (missing: {missing:?}, wrong shape: {bad_shape:?})"
        ));
    }
    if by_name.len() != net.param_count() {
        return contract_err(format!(
            "checkpoint holds {} tensors, network has {} parameters",
            by_name.len(),
            net.param_count()
        ));
    }
    net.visit_params_mut(&mut |p| {
        *p.tensor_mut() = (*by_name[p.name.as_str()]).clone();
    });
    Ok((net, contents.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            unet: UNetConfig {
                levels: 2,
                n_e: 1,
                n_d: 1,
                base_channels: 8,
                k_pairs: 2,
                bottleneck_blocks: 1,
                ..Default::default()
            },
            schedule: ScheduleConfig {
                t_total: 50,
                ddim_steps: 10,
            },
            train_step: 17,
            scale: 2,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_is_byte_identical_and_lossless() {
        let dir = tempdir().unwrap();
        let m = meta();
        let net = UNet::new(m.unet.clone(), 33).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_model(&p1, &net, &m).unwrap();
        let (net2, m2) = load_model(&p1).unwrap();
        assert_eq!(m, m2);
        save_model(&p2, &net2, &m2).unwrap();
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(b1, b2);
        // exact parameter equality
        let a_params = net.params();
        let b_params = net2.params();
        for (a, b) in a_params.iter().zip(&b_params) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.tensor().data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.tensor().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
    }

    #[test]
    fn every_parameter_is_stored_exactly_once() {
        let dir = tempdir().unwrap();
        let m = meta();
        let net = UNet::new(m.unet.clone(), 1).unwrap();
        let p = dir.path().join("c.ckpt");
        save_model(&p, &net, &m).unwrap();
        let contents = read_checkpoint(&p).unwrap();
        assert_eq!(contents.tensors.len(), net.param_count());
        let mut names: Vec<&str> = contents.tensors.iter().map(|(n, _)| n.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), before);
    }

    #[test]
    fn config_mismatch_fails_before_loading() {
        let dir = tempdir().unwrap();
        let m = meta();
        let net = UNet::new(m.unet.clone(), 1).unwrap();
        let p = dir.path().join("d.ckpt");
        // lie about the config in the metadata
        let mut wrong = m.clone();
        wrong.unet.base_channels = 16;
        write_checkpoint(&p, &wrong, &net.params()).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn bad_magic_is_an_io_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"NOPExxxx").unwrap();
        let err = read_checkpoint(&p).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
