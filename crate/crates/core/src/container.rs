//! Binary container shared by checkpoints and packed datasets.
//!
//! Layout: `u64` little-endian header length, a UTF-8 JSON header, then raw
//! little-endian payloads in directory order. The header is a JSON object
//! holding caller metadata plus one directory array whose entries carry
//! `name`, `dtype`, `shape` and the byte `offset` of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F64(_) => "f64",
            Payload::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len() * 8,
            Payload::U32(v) => v.len() * 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    /// Metadata fields written at the top level of the header.
    pub header: Map<String, Value>,
    /// Header key under which the directory is stored.
    pub directory: String,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut dir = Vec::with_capacity(self.entries.len());
        let mut offset = 0;
        for e in &self.entries {
            if e.shape.iter().product::<usize>() != e.payload.len() {
                return Err(Error::shape("container", format!("{}: shape {:?}", e.name, e.shape)));
            }
            dir.push(DirEntry {
                name: e.name.clone(),
                dtype: e.payload.dtype().into(),
                shape: e.shape.clone(),
                offset,
            });
            offset += e.payload.byte_len();
        }
        let mut header = self.header.clone();
        if header.contains_key(&self.directory) {
            return Err(Error::Format(format!(
                "metadata key {:?} clashes with the directory",
                self.directory
            )));
        }
        header.insert(self.directory.clone(), serde_json::to_value(dir)?);
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            match &e.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], directory: &str) -> Result<Self> {
        let truncated = || Error::Format("truncated container".into());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().expect("8 bytes");
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated())?;
        let json = bytes
            .get(8..8usize.checked_add(hlen).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let mut header: Map<String, Value> = serde_json::from_slice(json)?;
        let dir: Vec<DirEntry> = match header.remove(directory) {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(Error::Format(format!("header has no {directory:?} directory"))),
        };
        let body = &bytes[8 + hlen..];
        let mut entries = Vec::with_capacity(dir.len());
        let mut expected = 0;
        for d in dir {
            if d.offset != expected {
                return Err(Error::Format(format!("{}: offset {} out of order", d.name, d.offset)));
            }
            let n: usize = d.shape.iter().product();
            let (width, payload_of): (usize, fn(&[u8]) -> Payload) = match d.dtype.as_str() {
                "f64" => (8, |b| {
                    Payload::F64(
                        b.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }),
                "u32" => (4, |b| {
                    Payload::U32(
                        b.chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }),
                other => return Err(Error::Format(format!("{}: unknown dtype {other}", d.name))),
            };
            let end = d.offset + n * width;
            let raw = body.get(d.offset..end).ok_or_else(truncated)?;
            entries.push(Entry {
                name: d.name,
                shape: d.shape,
                payload: payload_of(raw),
            });
            expected = end;
        }
        if expected != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - expected)));
        }
        Ok(Container {
            header,
            directory: directory.into(),
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, directory: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, directory)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut header = Map::new();
        header.insert("version".into(), 1.into());
        Container {
            header,
            directory: "tensors".into(),
            entries: vec![
                Entry {
                    name: "a".into(),
                    shape: vec![2, 2],
                    payload: Payload::F64(vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]),
                },
                Entry {
                    name: "ids".into(),
                    shape: vec![3],
                    payload: Payload::U32(vec![0, 7, u32::MAX]),
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes, "tensors").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 4, 8, 20, bytes.len() - 1] {
            assert!(
                matches!(Container::from_bytes(&bytes[..cut], "tensors"), Err(Error::Format(_))),
                "{cut}"
            );
        }
    }

    #[test]
    fn wrong_directory_name_fails() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes, "segments").is_err());
    }
}
