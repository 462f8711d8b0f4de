//! Flat binary container for weights, features and checkpoints.
//!
//! Layout: magic `CSSM`, version `u32` LE, then entries until EOF. Each entry
//! is `name_len: u16` LE, UTF-8 name, `rank: u8`, `rank` dims as `u64` LE,
//! then the row-major payload as `f64` LE. The same container carries model
//! checkpoints, externally computed vision features and serialized states.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::FormatError;

pub const MAGIC: [u8; 4] = *b"CSSM";
pub const VERSION: u32 = 1;

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn new(dims: Vec<u64>, data: Vec<f64>) -> Self {
        let n: u64 = dims.iter().product();
        assert_eq!(n as usize, data.len(), "dims do not match payload length");
        Self { dims, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len() as u64],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self {
            dims: vec![rows as u64, cols as u64],
            data,
        }
    }
}

/// An ordered set of named entries. Entry names are unique; writing keeps
/// insertion independent (sorted on write) so byte output is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Result<&Entry, FormatError> {
        self.entries
            .get(name)
            .ok_or_else(|| FormatError::MissingEntry(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64, FormatError> {
        let e = self.get(name)?;
        if e.data.len() != 1 {
            return Err(FormatError::BadShape {
                name: name.to_string(),
                got: e.dims.clone(),
                expected: "scalar".to_string(),
            });
        }
        Ok(e.data[0])
    }

    pub fn get_matrix(&self, name: &str) -> Result<(usize, usize, &[f64]), FormatError> {
        let e = self.get(name)?;
        if e.dims.len() != 2 {
            return Err(FormatError::BadShape {
                name: name.to_string(),
                got: e.dims.clone(),
                expected: "rank-2 tensor".to_string(),
            });
        }
        Ok((e.dims[0] as usize, e.dims[1] as usize, &e.data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, entry) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(entry.dims.len() as u8);
            for d in &entry.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut off = 0usize;
        let magic = take(bytes, &mut off, 4, "magic")?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic { offset: 0 });
        }
        let vb = take(bytes, &mut off, 4, "version")?;
        let version = u32::from_le_bytes(vb.try_into().unwrap());
        if version != VERSION {
            return Err(FormatError::BadVersion { version, offset: 4 });
        }
        let mut entries = BTreeMap::new();
        while off < bytes.len() {
            let entry_off = off;
            let nl = take(bytes, &mut off, 2, "entry name length")?;
            let name_len = u16::from_le_bytes(nl.try_into().unwrap()) as usize;
            let name_bytes = take(bytes, &mut off, name_len, "entry name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| FormatError::InvalidEntry {
                    offset: entry_off,
                    context: "entry name is not UTF-8".to_string(),
                })?
                .to_string();
            let rank = take(bytes, &mut off, 1, "entry rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let db = take(bytes, &mut off, 8, "entry dimension")?;
                dims.push(u64::from_le_bytes(db.try_into().unwrap()));
            }
            let count = dims.iter().product::<u64>().max(1) as usize;
            // Guard overflow on hostile inputs before allocating.
            let payload_bytes = count.checked_mul(8).ok_or(FormatError::InvalidEntry {
                offset: entry_off,
                context: "entry payload size overflows".to_string(),
            })?;
            let payload = take(bytes, &mut off, payload_bytes, "entry payload")?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(name, Entry { dims, data });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn take<'a>(
    bytes: &'a [u8],
    off: &mut usize,
    n: usize,
    context: &str,
) -> Result<&'a [u8], FormatError> {
    if *off + n > bytes.len() {
        return Err(FormatError::Truncated {
            offset: *off,
            context: context.to_string(),
        });
    }
    let s = &bytes[*off..*off + n];
    *off += n;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut c = Container::new();
        c.insert("features", Entry::matrix(2, 3, vec![1.0, -2.5, 0.0, 1e-300, f64::MIN, 3.25]));
        c.insert("scalar", Entry::scalar(-0.0));
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(c, back);
        let e = back.get("features").unwrap();
        assert_eq!(e.dims, vec![2, 3]);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = Container::new().to_bytes();
        bytes[0] = b'X';
        match Container::from_bytes(&bytes) {
            Err(FormatError::BadMagic { offset: 0 }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
        // The rendered message names the expected magic.
        let msg = Container::from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("CSSM"), "message should name CSSM: {msg}");
    }

    #[test]
    fn truncation_reports_offset_not_panic() {
        let mut c = Container::new();
        c.insert("w", Entry::vector(vec![1.0, 2.0, 3.0]));
        let bytes = c.to_bytes();
        for cut in [3, 6, 9, bytes.len() - 5] {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            match err {
                FormatError::Truncated { .. } | FormatError::BadMagic { .. } => {}
                other => panic!("unexpected error for cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn missing_entry_named_in_error() {
        let c = Container::new();
        let err = c.get("weights").unwrap_err();
        assert!(err.to_string().contains("weights"));
    }
}
