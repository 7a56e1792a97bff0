//! Self-describing binary container shared by feature caches, checkpoints and
//! embedding exports: one line of JSON header, a newline, then the payload as
//! little-endian `f32` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(header)?;
    if bytes.contains(&b'\n') {
        return Err(Error::Format("header serialized across lines".into()));
    }
    bytes.push(b'\n');
    bytes.reserve(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let header = serde_json::from_slice(&bytes[..nl])?;
    let body = &bytes[nl + 1..];
    if body.len() % 4 != 0 {
        return Err(Error::Format(format!("payload of {} bytes is not whole f32s", body.len())));
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

/// Reads only the JSON header line.
pub fn read_header<H: DeserializeOwned>(path: &Path) -> Result<H> {
    use std::io::BufRead;
    let mut line = Vec::new();
    std::io::BufReader::new(fs::File::open(path)?).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format(format!("{}: missing header terminator", path.display())));
    }
    line.pop();
    Ok(serde_json::from_slice(&line)?)
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>)> {
    decode(&fs::read(path)?)
}

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[f32]) -> Result<()> {
    write_atomic(path, &encode(header, payload)?)
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
