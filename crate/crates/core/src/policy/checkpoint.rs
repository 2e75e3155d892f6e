//! Binary checkpoints: magic, a JSON header, then the flat parameter vector
//! as little-endian `f64`.
//!
//! ```text
//! b"SRPPOCKP" | u32 LE header length | header JSON | u64 LE count | count × f64 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::Vocabulary;

use super::{Architecture, Lineage, Policy, Role, ValueHead};

const MAGIC: &[u8; 8] = b"SRPPOCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"policy"` or `"value"`.
    pub kind: String,
    pub architecture: Architecture,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default)]
    pub lineage: Vec<Lineage>,
}

fn encode<F: Scalar>(header: &CheckpointHeader, params: &[F]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serialises");
    let mut out = Vec::with_capacity(8 + 4 + json.len() + 8 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.as_f64().to_le_bytes());
    }
    out
}

fn decode<F: Scalar>(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, Vec<F>)> {
    let bad = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    let rest = &bytes[12 + hlen..];
    if rest.len() < 8 {
        return Err(bad("missing parameter count"));
    }
    let count = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let data = &rest[8..];
    if data.len() != count * 8 {
        return Err(bad("parameter payload length mismatch"));
    }
    let params = data
        .chunks_exact(8)
        .map(|c| F::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((header, params))
}

pub fn write_policy<F: Scalar>(path: &Path, policy: &Policy<F>) -> Result<()> {
    let header = CheckpointHeader {
        kind: "policy".into(),
        architecture: policy.architecture(),
        vocab_size: policy.vocab_ref().size(),
        role: Some(policy.role()),
        lineage: policy.lineage().to_vec(),
    };
    fs::write(path, encode(&header, policy.params())).map_err(|e| Error::io(path, e))
}

pub fn read_policy<F: Scalar>(path: &Path) -> Result<Policy<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, params) = decode::<F>(path, &bytes)?;
    if header.kind != "policy" {
        return Err(Error::Input(format!("{} holds a {} checkpoint", path.display(), header.kind)));
    }
    let mut p = Policy::from_params(
        header.architecture,
        Vocabulary::new(header.vocab_size)?,
        header.role.unwrap_or(Role::Actor),
        params,
    )?;
    p.set_lineage(header.lineage);
    Ok(p)
}

pub fn write_value_head<F: Scalar>(path: &Path, head: &ValueHead<F>) -> Result<()> {
    let header = CheckpointHeader {
        kind: "value".into(),
        architecture: head.architecture(),
        vocab_size: head.vocab().size(),
        role: None,
        lineage: Vec::new(),
    };
    fs::write(path, encode(&header, head.params())).map_err(|e| Error::io(path, e))
}

pub fn read_value_head<F: Scalar>(path: &Path) -> Result<ValueHead<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, params) = decode::<F>(path, &bytes)?;
    if header.kind != "value" {
        return Err(Error::Input(format!("{} holds a {} checkpoint", path.display(), header.kind)));
    }
    ValueHead::from_params(header.architecture, Vocabulary::new(header.vocab_size)?, params)
}
