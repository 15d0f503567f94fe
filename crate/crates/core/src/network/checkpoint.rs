//! Binary checkpoint format.
//!
//! ```text
//! "CKAP" | u16 version | u32 header_len | header JSON | weights | u32 crc32(weights)
//! ```
//!
//! Integers are little-endian. The header carries the architecture, the
//! removal log, the hidden width of every surviving block and the byte
//! length of the weight section. Weights are `f64` little-endian in
//! [`ResidualNet::tensors`] order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Affine, ArchSpec, Block, BlockId, ResidualNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CKAP";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ArchSpec,
    removal_log: Vec<BlockId>,
    hidden_widths: Vec<Vec<usize>>,
    weight_bytes: u64,
}

/// Serialises `net` into checkpoint bytes.
pub fn write_checkpoint(net: &ResidualNet) -> Result<Vec<u8>> {
    let mut weights = Vec::new();
    for t in net.tensors() {
        for v in t {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        spec: net.spec.clone(),
        removal_log: net.removal_log.clone(),
        hidden_widths: net.hidden_widths(),
        weight_bytes: weights.len() as u64,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + 2 + 4 + header.len() + weights.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&weights);
    out.extend_from_slice(&crc32fast::hash(&weights).to_le_bytes());
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Truncated(what));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

/// Rebuilds a net from checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ResidualNet> {
    let mut buf = bytes;
    if take(&mut buf, 4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut buf, 2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let hlen = u32::from_le_bytes(take(&mut buf, 4, "header length")?.try_into().unwrap());
    let header: Header = serde_json::from_slice(take(&mut buf, hlen as usize, "header")?)
        .map_err(|e| Error::Header(e.to_string()))?;
    let weights = take(&mut buf, header.weight_bytes as usize, "weights")?;
    let stored = u32::from_le_bytes(take(&mut buf, 4, "checksum")?.try_into().unwrap());
    let computed = crc32fast::hash(weights);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if !buf.is_empty() {
        return Err(Error::Header(format!("{} trailing bytes", buf.len())));
    }

    let mut net = skeleton(&header)?;
    let expected: usize = net.tensors().iter().map(|t| t.len()).sum();
    if weights.len() != expected * 8 {
        return Err(Error::Header(format!(
            "weight section holds {} bytes, architecture needs {}",
            weights.len(),
            expected * 8
        )));
    }
    let mut values = weights
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in net.tensors_mut() {
        for (slot, v) in t.iter_mut().zip(&mut values) {
            *slot = v;
        }
    }
    if net.tensors().iter().flat_map(|t| t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("checkpoint weights"));
    }
    Ok(net)
}

/// Zero-filled net with the header's surviving structure.
fn skeleton(h: &Header) -> Result<ResidualNet> {
    h.spec.validate()?;
    let spec = &h.spec;
    if h.hidden_widths.len() != spec.stage_widths.len() {
        return Err(Error::Header("hidden_widths does not match stage count".into()));
    }
    let mut removed = vec![0usize; spec.stage_widths.len()];
    for id in &h.removal_log {
        *removed
            .get_mut(id.stage)
            .ok_or_else(|| Error::Header(format!("removal_log names stage {}", id.stage)))? += 1;
    }
    for (s, hidden) in h.hidden_widths.iter().enumerate() {
        if hidden.len() + removed[s] != spec.blocks_per_stage[s] {
            return Err(Error::Header(format!(
                "stage {s}: {} blocks + {} removed != {} declared",
                hidden.len(),
                removed[s],
                spec.blocks_per_stage[s]
            )));
        }
        if hidden.contains(&0) {
            return Err(Error::Header(format!("stage {s}: block with zero hidden units")));
        }
    }
    let w = &spec.stage_widths;
    Ok(ResidualNet {
        spec: spec.clone(),
        stem: Affine::zeros(spec.input_dim, w[0]),
        stages: h
            .hidden_widths
            .iter()
            .zip(w)
            .map(|(hs, &width)| {
                hs.iter()
                    .map(|&u| Block {
                        expand: Affine::zeros(width, u),
                        project: Affine::zeros(u, width),
                    })
                    .collect()
            })
            .collect(),
        transitions: w.windows(2).map(|p| Affine::zeros(p[0], p[1])).collect(),
        classifier: Affine::zeros(*w.last().unwrap(), spec.num_classes),
        removal_log: h.removal_log.clone(),
    })
}

pub fn save(net: &ResidualNet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_checkpoint(net)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ResidualNet> {
    read_checkpoint(&fs::read(path)?)
}
