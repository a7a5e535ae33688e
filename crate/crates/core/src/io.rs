//! Binary tensor files and JSON manifests.
//!
//! Layout of a tensor file, all integers little-endian:
//!
//! ```text
//! "ADMT" | version: u8 = 1 | rank: u8 | dims: rank × u64 | payload: Π dims × f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADMT";
pub const VERSION: u8 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(6 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {}", bytes[4]));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let raw: [u8; 8] = bytes[6 + 8 * i..14 + 8 * i].try_into().unwrap();
        let d = u64::from_le_bytes(raw);
        shape.push(usize::try_from(d).map_err(|_| format!("dimension {d} too large"))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("element count overflows")?;
    let payload = &bytes[header..];
    if payload.len() != count * 8 {
        return Err(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * 8
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

/// Named tensors stored as `<name>.admt` files next to a manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl TensorManifest {
    pub fn write_all<'a>(
        dir: &Path,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = TensorManifest::default();
        for (name, t) in tensors {
            let file = format!("{name}.admt");
            save_tensor(&dir.join(&file), t)?;
            manifest.tensors.insert(
                name.to_string(),
                TensorEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
        Ok(manifest)
    }

    pub fn load(&self, dir: &Path, name: &str) -> Result<Tensor> {
        let entry = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Usage(format!("tensor {name:?} missing from manifest")))?;
        let t = load_tensor(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::shape("manifest", &entry.shape, t.shape()));
        }
        Ok(t)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"ADMT");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &1u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &3u64.to_le_bytes());
        assert_eq!(&bytes[22..30], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 6 + 16 + 24);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::zeros(&[2, 2]);
        let mut bytes = encode_tensor(&t);
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
        bytes[4] = 2;
        assert!(decode_tensor(&bytes).unwrap_err().contains("version"));
        assert!(decode_tensor(b"NOPE\x01\x01").is_err());
    }

    #[test]
    fn manifest_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_rows(&[[1.5, -2.0], [0.25, 8.0]]).unwrap();
        let b = Tensor::new(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = TensorManifest::write_all(dir.path(), [("a", &a), ("b", &b)]).unwrap();
        write_json(&dir.path().join("manifest.json"), &m).unwrap();
        let m2: TensorManifest = read_json(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m, m2);
        assert_eq!(m2.load(dir.path(), "a").unwrap(), a);
        assert_eq!(m2.load(dir.path(), "b").unwrap(), b);
        assert!(m2.load(dir.path(), "c").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(shape in prop::collection::vec(1usize..5, 1..=3), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin()).collect();
            let t = Tensor::new(&shape, data).unwrap();
            prop_assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
        }
    }
}
