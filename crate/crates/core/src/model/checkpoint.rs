//! Binary checkpoint format.
//!
//! ```text
//! b"SVHC" | version: u32 LE | header_len: u64 LE | header JSON | params: f32 LE * n
//! ```
//!
//! The header carries the network configuration, the parameter count and
//! free-form training metadata. Parameters follow in `NetworkParams` order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{NetworkConfig, NetworkParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVHC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub parameter_count: usize,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    pub metadata: serde_json::Value,
}

pub fn encode(params: &NetworkParams<f32>, metadata: &serde_json::Value) -> Vec<u8> {
    let header = CheckpointHeader {
        network: *params.config(),
        parameter_count: params.len(),
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params.flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::BadCheckpoint(m.to_owned());
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic bytes"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported format version {version}")));
    }
    let mut long = [0u8; 8];
    r.read_exact(&mut long).map_err(|_| bad("truncated header length"))?;
    let header_len = u64::from_le_bytes(long) as usize;
    if r.len() < header_len {
        return Err(bad("truncated header"));
    }
    let (header, rest) = r.split_at(header_len);
    let header: CheckpointHeader = serde_json::from_slice(header)?;
    header.network.validate()?;
    if rest.len() != 4 * header.parameter_count {
        return Err(Error::BadCheckpoint(format!(
            "expected {} parameter bytes, found {}",
            4 * header.parameter_count,
            rest.len()
        )));
    }
    let data: Vec<f32> = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let params = NetworkParams::from_flat(&header.network, data)?;
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
    })
}

pub fn save(path: &Path, params: &NetworkParams<f32>, metadata: &serde_json::Value) -> Result<()> {
    let bytes = encode(params, metadata);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig {
            depth: 2,
            base_channels: 4,
            in_h: 16,
            in_w: 16,
            ..NetworkConfig::default()
        };
        let mut params = init_params(&cfg, 5).unwrap();
        params.flat_mut()[0] = f32::MIN_POSITIVE / 3.0; // subnormal survives
        let meta = serde_json::json!({"seed": 5, "epochs": 0});
        let bytes = encode(&params, &meta);
        assert_eq!(&bytes[..4], b"SVHC");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.metadata, meta);
        assert!(back.params.flat().iter().zip(params.flat()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(encode(&back.params, &back.metadata), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let params = init_params(&NetworkConfig::default(), 0).unwrap();
        let bytes = encode(&params, &serde_json::Value::Null);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode(&version).is_err());
    }
}
