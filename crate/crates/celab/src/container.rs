//! Named-tensor checkpoint container shared by VAE (`"CVAE"`) and GMM
//! (`"CGMM"`) models.
//!
//! Little-endian binary layout, byte-exact:
//!
//! | field        | type                      |
//! |--------------|---------------------------|
//! | magic        | 4 bytes                   |
//! | version      | u16 (currently 1)         |
//! | config_len   | u32                       |
//! | config       | `config_len` bytes        |
//! | tensor_count | u32                       |
//! | tensors      | `tensor_count` entries    |
//!
//! Each tensor entry is `(name_len u16, name bytes, rank u8, dims u32 x rank,
//! f64 x prod(dims))`. The config block's meaning is owner-specific; its
//! layouts are documented where the owners define them.

use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("unsupported checkpoint version {version}")]
    UnsupportedVersion { version: u16 },
}

pub type Result<T> = std::result::Result<T, ContainerError>;

const VERSION: u16 = 1;

/// One named f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f64>) -> Self {
        let entry = Self { name: name.into(), dims, data };
        debug_assert_eq!(
            entry.dims.iter().map(|&d| d as usize).product::<usize>(),
            entry.data.len(),
            "tensor {} dims do not match payload",
            entry.name
        );
        entry
    }
}

/// A parsed checkpoint: opaque config block plus tensor directory.
#[derive(Debug, Clone)]
pub struct Container {
    pub config: Vec<u8>,
    pub tensors: Vec<TensorEntry>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Writes a container with the given magic.
pub fn write_container<P: AsRef<Path>>(path: P, magic: &[u8; 4], c: &Container) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(c.config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&c.config);
    buf.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for t in &c.tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.dims.len() as u8);
        for &d in &t.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(ContainerError::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Reads a container, checking the expected magic.
pub fn read_container<P: AsRef<Path>>(path: P, magic: &[u8; 4]) -> Result<Container> {
    let data = fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };

    let got = r.take(4, "magic")?;
    if got != magic {
        return Err(ContainerError::Format {
            offset: 0,
            reason: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion { version });
    }
    let config_len = u32::from_le_bytes(r.take(4, "config length")?.try_into().unwrap()) as usize;
    let config = r.take(config_len, "config block")?.to_vec();
    let count = u32::from_le_bytes(r.take(4, "tensor count")?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "tensor name length")?.try_into().unwrap());
        let name_offset = r.pos;
        let name = String::from_utf8(r.take(name_len as usize, "tensor name")?.to_vec())
            .map_err(|_| ContainerError::Format {
                offset: name_offset as u64,
                reason: "tensor name is not valid UTF-8".into(),
            })?;
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(r.take(4, "tensor dim")?.try_into().unwrap()));
        }
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let payload = r.take(len * 8, "tensor payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(TensorEntry { name, dims, data });
    }
    if r.pos != data.len() {
        return Err(ContainerError::Format {
            offset: r.pos as u64,
            reason: format!("{} trailing bytes", data.len() - r.pos),
        });
    }
    Ok(Container { config, tensors })
}
