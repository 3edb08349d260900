use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamEntry, ParamSet};
use super::{Network, NetworkSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SCNNCKP1";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    entries: Vec<ParamEntry>,
}

/// Writes `magic | u64 header length | JSON header | f32 LE parameters`.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        spec: net.spec().clone(),
        entries: net.params().entries().to_vec(),
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * net.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in net.params().data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_parts(path: &Path) -> Result<(Header, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a network checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    let raw = &bytes[16 + hlen..];
    if raw.len() % 4 != 0 {
        return Err(Error::format(path, "parameter block is not a whole number of f32"));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, data))
}

/// The spec stored in a checkpoint.
pub fn read_checkpoint_spec(path: &Path) -> Result<NetworkSpec> {
    Ok(read_parts(path)?.0.spec)
}

/// Loads a checkpoint; with `expected`, the stored spec must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkSpec>) -> Result<Network> {
    let (header, data) = read_parts(path)?;
    if let Some(spec) = expected {
        if *spec != header.spec {
            return Err(Error::Config(format!(
                "checkpoint {} was produced by a different network spec",
                path.display()
            )));
        }
    }
    let mut net = Network::new(header.spec, 0)?;
    let layout = net.params().entries();
    let same_layout = layout.len() == header.entries.len()
        && layout
            .iter()
            .zip(&header.entries)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !same_layout || data.len() != net.num_params() {
        return Err(Error::format(path, "parameter layout does not match its spec"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite parameters"));
    }
    let entries = layout.to_vec();
    *net.params_mut() = ParamSet::with_data(entries, data);
    Ok(net)
}
