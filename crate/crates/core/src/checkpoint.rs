//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CODI"  u32 version
//! u16 hash_len, hash bytes (config hash, UTF-8)
//! u32 entry_count
//! per entry: u16 name_len, name bytes, u8 rank, rank x u32 dims, u8 dtype tag, raw values
//! ```
//!
//! Entries keep their raw bytes, so load followed by save reproduces the file
//! byte for byte.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CODI";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
    raw: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: String,
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(prefix))
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let name = name.into();
        let mut raw = Vec::with_capacity(t.len() * T::DTYPE.size());
        t.data().iter().for_each(|&v| v.write_le(&mut raw));
        let entry = Entry {
            name: name.clone(),
            dims: t.dims().to_vec(),
            dtype: T::DTYPE,
            raw,
        };
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))?;
        let size = e.dtype.size();
        let data: Vec<T> = match e.dtype {
            DType::F32 => e.raw.chunks_exact(size).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => e.raw.chunks_exact(size).map(|c| T::of(f64::read_le(c))).collect(),
        };
        Tensor::new(e.dims.clone(), data)
    }

    /// Store every parameter under `prefix + name`.
    pub fn add_params<T: Scalar>(&mut self, prefix: &str, ps: &ParamSet<T>) {
        for p in ps.iter() {
            self.insert(format!("{prefix}{}", p.name), &p.value);
        }
    }

    /// Overwrite every parameter of `ps` from `prefix + name`; missing names and
    /// dimension changes are errors.
    pub fn load_params<T: Scalar>(&self, prefix: &str, ps: &mut ParamSet<T>) -> Result<()> {
        for p in ps.iter_mut() {
            let name = format!("{prefix}{}", p.name);
            let t = self.get::<T>(&name)?;
            if t.dims() != p.value.dims() {
                return Err(Error::EntryDims {
                    name,
                    expected: p.value.dims().to_vec(),
                    found: t.dims().to_vec(),
                });
            }
            p.value = t;
        }
        Ok(())
    }

    /// Entries whose names start with `prefix` (partial load for staging).
    pub fn subset(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            config_hash: self.config_hash.clone(),
            entries: self.entries.iter().filter(|e| e.name.starts_with(prefix)).cloned().collect(),
        }
    }

    pub fn merge(&mut self, other: &Checkpoint) {
        for e in &other.entries {
            match self.entries.iter_mut().find(|x| x.name == e.name) {
                Some(x) => *x = e.clone(),
                None => self.entries.push(e.clone()),
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u16).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            e.dims.iter().for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
            out.push(e.dtype.tag());
            out.extend_from_slice(&e.raw);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, off: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected CODI".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let hash_len = r.u16()? as usize;
        let at = r.off;
        let config_hash = String::from_utf8(r.take(hash_len)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: "config hash is not UTF-8".into(),
        })?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.off;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                msg: "entry name is not UTF-8".into(),
            })?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let at = r.off;
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Format {
                offset: at,
                msg: format!("unknown dtype tag in entry `{name}`"),
            })?;
            if dims.iter().any(|&d| d == 0) {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("entry `{name}` has a zero dimension"),
                });
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * dtype.size())?.to_vec();
            entries.push(Entry { name, dims, dtype, raw });
        }
        if r.off != bytes.len() {
            return Err(Error::Format {
                offset: r.off,
                msg: "trailing bytes after last entry".into(),
            });
        }
        Ok(Self { config_hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.off + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::SeededRng;

    fn sample() -> (Checkpoint, ParamSet<f32>) {
        let mut ps = ParamSet::<f32>::new();
        let mut rng = SeededRng::new(1);
        Linear::new(&mut ps, "enc", 3, 4, &mut rng);
        let mut ck = Checkpoint::new("abc123");
        ck.add_params("codec.image.", &ps);
        ck.insert("extra", &Tensor::<f64>::from_vec(vec![1.0, -2.5]));
        (ck, ps)
    }

    #[test]
    fn bytes_round_trip_is_identical() {
        let (ck, mut ps) = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let before = ps.clone();
        ps.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
        back.load_params("codec.image.", &mut ps).unwrap();
        assert!(ps.bit_eq(&before));
        assert_eq!(back.get::<f64>("extra").unwrap().data(), &[1.0, -2.5]);
    }

    #[test]
    fn renamed_entry_is_reported() {
        let (ck, mut ps) = sample();
        let mut bytes = ck.to_bytes();
        // Corrupt the first entry name ("codec.image.enc.weight" -> "Codec...").
        let pos = bytes.windows(5).position(|w| w == b"codec").unwrap();
        bytes[pos] = b'C';
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        match back.load_params("codec.image.", &mut ps).unwrap_err() {
            Error::MissingEntry(name) => assert_eq!(name, "codec.image.enc.weight"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncation_version_and_dims_are_rejected() {
        let (ck, _) = sample();
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { found: 2, .. })));

        let mut other = ParamSet::<f32>::new();
        Linear::new(&mut other, "enc", 3, 5, &mut SeededRng::new(0));
        assert!(matches!(ck.load_params("codec.image.", &mut other), Err(Error::EntryDims { .. })));
    }

    #[test]
    fn subset_selects_prefix() {
        let (ck, _) = sample();
        let sub = ck.subset("codec.");
        assert_eq!(sub.entries().len(), 2);
        assert!(!sub.contains("extra"));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.codi");
        let (ck, _) = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes());
    }
}
