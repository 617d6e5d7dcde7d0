//! Flat binary arrays with a structured-text manifest.
//!
//! Layout: the 8-byte magic `SGBSARR1`, a little-endian `u64` manifest
//! length, the manifest as UTF-8 TOML, a `u64` element count, then the
//! elements as little-endian `f64`. Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SGBSARR1";

pub fn write_array<M: Serialize>(path: &Path, manifest: &M, data: &[f64]) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::data(format!("manifest: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_array<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!("{}: not an sgbs array file", path.display())));
    }
    let len = read_u64(&mut r)? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::data(format!("{}: manifest is not UTF-8", path.display())))?;
    let manifest: M = toml::from_str(&text)
        .map_err(|e| Error::data(format!("{}: manifest: {e}", path.display())))?;
    let count = read_u64(&mut r)? as usize;
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((manifest, data))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_toml<M: Serialize>(path: &Path, value: &M) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::data(format!("manifest: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_toml<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Meta {
        name: String,
        n: u32,
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(data in proptest::collection::vec(proptest::num::f64::ANY, 0..64)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.bin");
            let meta = Meta { name: "x".into(), n: 3 };
            write_array(&path, &meta, &data).unwrap();
            let (m, back): (Meta, Vec<f64>) = read_array(&path).unwrap();
            prop_assert_eq!(m, meta);
            let a: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        std::fs::write(&path, b"hello world, not an array").unwrap();
        assert!(matches!(read_array::<Meta>(&path), Err(Error::Data(_))));
    }
}
