//! Self-describing binary container of named arrays plus a JSON manifest.
//!
//! Used for checkpoints and morphable-basis files. Layout:
//!
//! ```text
//! magic "FSC1" | manifest_len: u64 LE | manifest (JSON, UTF-8)
//! repeated entries:
//!   name_len u32 | name | dtype u8 (0 = f64, 1 = u32) | ndim u32 |
//!   dims u64[ndim] | payload (little-endian)
//! ```
//!
//! Writing is deterministic (insertion order, fixed-width fields), so a
//! load/save round trip reproduces the file byte for byte.

use crate::error::{Error, Result};
use crate::ad::Arr;
use ndarray::IxDyn;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FSC1";

#[derive(Clone, Debug)]
pub enum Payload {
    F64(Arr),
    U32(Vec<u32>),
}

#[derive(Default)]
pub struct Container {
    pub manifest: serde_json::Value,
    entries: Vec<(String, Payload)>,
    index: BTreeMap<String, usize>,
}

impl Container {
    pub fn new(manifest: serde_json::Value) -> Self {
        Container {
            manifest,
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn push_array(&mut self, name: impl Into<String>, arr: Arr) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate entry {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, Payload::F64(arr)));
    }

    pub fn push_indices(&mut self, name: impl Into<String>, idx: Vec<u32>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate entry {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, Payload::U32(idx)));
    }

    pub fn array(&self, name: &str) -> Result<&Arr> {
        match self.get(name)? {
            Payload::F64(a) => Ok(a),
            _ => Err(Error::Format(format!("entry {name} is not an f64 array"))),
        }
    }

    pub fn indices(&self, name: &str) -> Result<&[u32]> {
        match self.get(name)? {
            Payload::U32(v) => Ok(v),
            _ => Err(Error::Format(format!("entry {name} is not an index array"))),
        }
    }

    fn get(&self, name: &str) -> Result<&Payload> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Format(format!("missing container entry {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for (name, payload) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match payload {
                Payload::F64(arr) => {
                    w.write_all(&[0u8])?;
                    w.write_all(&(arr.ndim() as u32).to_le_bytes())?;
                    for &d in arr.shape() {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                    let std = arr.as_standard_layout();
                    for &v in std.as_slice().unwrap() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Payload::U32(idx) => {
                    w.write_all(&[1u8])?;
                    w.write_all(&1u32.to_le_bytes())?;
                    w.write_all(&(idx.len() as u64).to_le_bytes())?;
                    for &v in idx {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad container magic".into()));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let mlen = u64::from_le_bytes(len8) as usize;
        let mut mbytes = vec![0u8; mlen];
        r.read_exact(&mut mbytes)?;
        let manifest: serde_json::Value =
            serde_json::from_slice(&mbytes).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Container::new(manifest);
        loop {
            let mut len4 = [0u8; 4];
            match r.read_exact(&mut len4) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let nlen = u32::from_le_bytes(len4) as usize;
            let mut nbytes = vec![0u8; nlen];
            r.read_exact(&mut nbytes)?;
            let name = String::from_utf8(nbytes)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            r.read_exact(&mut len4)?;
            let ndim = u32::from_le_bytes(len4) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut len8)?;
                dims.push(u64::from_le_bytes(len8) as usize);
            }
            let count: usize = dims.iter().product();
            match dtype[0] {
                0 => {
                    let mut data = Vec::with_capacity(count);
                    let mut b8 = [0u8; 8];
                    for _ in 0..count {
                        r.read_exact(&mut b8)?;
                        data.push(f64::from_le_bytes(b8));
                    }
                    let arr = Arr::from_shape_vec(IxDyn(&dims), data)
                        .map_err(|e| Error::Format(e.to_string()))?;
                    out.push_array(name, arr);
                }
                1 => {
                    let mut data = Vec::with_capacity(count);
                    let mut b4 = [0u8; 4];
                    for _ in 0..count {
                        r.read_exact(&mut b4)?;
                        data.push(u32::from_le_bytes(b4));
                    }
                    out.push_indices(name, data);
                }
                d => return Err(Error::Format(format!("unknown dtype tag {d}"))),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        // write-temp-then-rename so a crash never leaves a torn file
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut c = Container::new(serde_json::json!({"version": 1, "kind": "test"}));
        c.push_array(
            "a/weight",
            ndarray::arr2(&[[1.5, -2.25], [0.0, f64::MIN_POSITIVE]]).into_dyn(),
        );
        c.push_indices("ids", vec![7, 0, 42]);
        let mut buf1 = Vec::new();
        c.write_to(&mut buf1).unwrap();
        let c2 = Container::read_from(buf1.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        c2.write_to(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
        assert_eq!(c2.indices("ids").unwrap(), &[7, 0, 42]);
        assert_eq!(c2.array("a/weight").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn missing_entry_is_a_format_error() {
        let c = Container::new(serde_json::json!({}));
        assert!(c.array("nope").is_err());
    }
}
