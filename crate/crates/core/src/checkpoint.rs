//! Checkpoint files: magic, JSON header, raw little-endian f32 blob.
//!
//! Layout: `GCTCKPT1` | header length (u64 LE) | header JSON | blob.
//! Every non-GCT parameter and buffer is stored in the blob under its
//! name; GCT layers are stored in the header as flat parameter records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gct::{GctParams, GctParamsRecord};
use crate::layers::{build_network, Network, NetworkSpec, ParamKind};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"GCTCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// Offset in f32 elements from the start of the blob.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub spec: NetworkSpec,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub gct: BTreeMap<String, GctParamsRecord>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn is_gct(kind: ParamKind) -> bool {
    matches!(kind, ParamKind::GctAlpha | ParamKind::GctGamma | ParamKind::GctBeta)
}

pub fn to_bytes<T: Scalar>(net: &mut Network<T>, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |name: String, values: &[T]| {
        tensors.push(TensorEntry {
            name,
            offset: blob.len(),
            len: values.len(),
        });
        blob.extend(values.iter().map(|v| v.to_f64_lossy() as f32));
    };
    net.visit_params(&mut |p| {
        if !is_gct(p.kind) {
            push(p.name, p.value);
        }
    });
    net.visit_buffers(&mut |name, v| push(name, v));
    let gct = net
        .gct_layers()
        .into_iter()
        .map(|l| (l.name.clone(), l.params.to_record()))
        .collect();
    let header = Header {
        version: VERSION,
        spec: net.spec.clone(),
        seed: net.seed,
        tensors,
        gct,
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    Ok((header, &bytes[16 + len..]))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Network<T>, serde_json::Value)> {
    let (header, blob) = read_header(bytes)?;
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint("blob length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut table: BTreeMap<&str, &[f32]> = BTreeMap::new();
    for e in &header.tensors {
        let slice = floats
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| Error::Checkpoint(format!("{}: out of range", e.name)))?;
        table.insert(&e.name, slice);
    }
    let mut net: Network<T> = build_network(&header.spec, header.seed).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut err = None;
    let mut fill = |name: &str, dst: &mut [T]| match table.get(name) {
        Some(src) if src.len() == dst.len() => {
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = T::from_f64_lossy(s as f64);
            }
        }
        Some(src) => {
            err.get_or_insert(Error::Checkpoint(format!(
                "{name}: expected {} values, found {}",
                dst.len(),
                src.len()
            )));
        }
        None => {
            err.get_or_insert(Error::Checkpoint(format!("{name}: missing from checkpoint")));
        }
    };
    net.visit_params(&mut |p| {
        if !is_gct(p.kind) {
            fill(&p.name, p.value)
        }
    });
    net.visit_buffers(&mut |name, v| fill(&name, v));
    if let Some(e) = err {
        return Err(e);
    }
    let names: Vec<String> = net.gct_layers().iter().map(|l| l.name.clone()).collect();
    for name in names {
        let rec = header
            .gct
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: missing GCT record")))?;
        let params = GctParams::<T>::from_record(rec)?;
        let layer = net.gct_layer_mut(&name).expect("name came from the network");
        if params.channels() != layer.channels() {
            return Err(Error::Checkpoint(format!("{name}: channel count mismatch")));
        }
        layer.params = params;
    }
    Ok((net, header.metadata))
}

pub fn save<T: Scalar>(net: &mut Network<T>, path: impl AsRef<Path>, metadata: serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(net, metadata)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(Network<T>, serde_json::Value)> {
    from_bytes(&fs::read(path)?)
}
