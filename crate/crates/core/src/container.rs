//! Binary container shared by dataset, concept-label and checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes
//! version    u32
//! header_len u64
//! header     header_len bytes of UTF-8 JSON
//! payload    contiguous IEEE-754 f32 values until end of file
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

pub struct Container<H> {
    pub version: u32,
    pub header: H,
    pub payload: Vec<f32>,
}

pub fn encode<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 4], bytes: &[u8]) -> Result<Container<H>> {
    if bytes.len() < 16 {
        return Err(Error::format("file shorter than container preamble"));
    }
    if &bytes[0..4] != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(Error::format("header length exceeds file size"));
    }
    let header: H = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::format(format!("bad header: {e}")))?;
    let raw = &body[header_len..];
    if raw.len() % 4 != 0 {
        return Err(Error::format("payload is not a whole number of f32 values"));
    }
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Container {
        version,
        header,
        payload,
    })
}

/// Writes through a temporary sibling file so a crash never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Hdr {
        n: usize,
    }

    #[test]
    fn round_trip() {
        let bytes = encode(b"TEST", &Hdr { n: 3 }, &[1.0, -2.5, 3.25]).unwrap();
        let c: Container<Hdr> = decode(b"TEST", &bytes).unwrap();
        assert_eq!(c.header, Hdr { n: 3 });
        assert_eq!(c.payload, vec![1.0, -2.5, 3.25]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let bytes = encode(b"TEST", &Hdr { n: 0 }, &[]).unwrap();
        assert!(matches!(decode::<Hdr>(b"OTHR", &bytes), Err(Error::Format(_))));
        assert!(matches!(decode::<Hdr>(b"TEST", &bytes[..10]), Err(Error::Format(_))));
        let mut odd = bytes.clone();
        odd.push(0);
        assert!(matches!(decode::<Hdr>(b"TEST", &odd), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = encode(b"TEST", &Hdr { n: 0 }, &[]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode::<Hdr>(b"TEST", &bytes), Err(Error::Format(_))));
    }
}
