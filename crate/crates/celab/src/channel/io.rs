//! Dataset persistence.
//!
//! Little-endian binary layout, byte-exact:
//!
//! | field          | type                 | notes                          |
//! |----------------|----------------------|--------------------------------|
//! | magic          | 4 bytes `"CEST"`     |                                |
//! | version        | u16                  | currently 1                    |
//! | flags          | u16                  | bit 0: cluster draws present   |
//! | M              | u32                  | antennas                       |
//! | N              | u32                  | samples                        |
//! | P              | u32                  | clusters                       |
//! | split_tag      | u8                   | 0 = train, 1 = test            |
//! | seed           | u64                  |                                |
//! | angular_spread | f64                  | radians                        |
//! | samples        | N*M * (f32, f32)     | (re, im) pairs, row-major      |
//! | deltas         | N * (P f64 + P f64)  | gains then angles, if flagged  |
//!
//! Any structural problem (bad magic, unknown version or flags, truncation,
//! trailing bytes) is reported with the byte offset where it was detected.

use super::{ChannelDataset, ChannelError, ClusterParams, Result, ScenarioConfig, SplitTag};
use num_complex::Complex32;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CEST";
const VERSION: u16 = 1;
const FLAG_DELTAS: u16 = 1;

/// Serializes a dataset to the documented binary format.
pub fn save_dataset<P: AsRef<Path>>(dataset: &ChannelDataset, path: P) -> Result<()> {
    let cfg = dataset.config();
    let n = dataset.len();
    let m = cfg.antennas;
    let p = cfg.clusters;
    let has_deltas = dataset.deltas().is_some();

    let mut buf = Vec::with_capacity(33 + n * m * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(if has_deltas { FLAG_DELTAS } else { 0u16 }).to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.push(match dataset.split() {
        SplitTag::Train => 0,
        SplitTag::Test => 1,
    });
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&cfg.angular_spread.to_le_bytes());
    for v in dataset.raw_samples() {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
    if let Some(deltas) = dataset.deltas() {
        for d in deltas {
            for &g in d.gains() {
                buf.extend_from_slice(&g.to_le_bytes());
            }
            for &a in d.angles() {
                buf.extend_from_slice(&a.to_le_bytes());
            }
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
            return Err(ChannelError::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Loads a dataset written by [`save_dataset`]. The quadrature node count is
/// not persisted; the loaded config carries the `16 * M` default.
pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<ChannelDataset> {
    let data = fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(ChannelError::Format {
            offset: 0,
            reason: format!("bad magic {magic:02x?}, expected \"CEST\""),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(ChannelError::UnsupportedVersion { version });
    }
    let flags_offset = r.pos;
    let flags = r.u16("flags")?;
    if flags & !FLAG_DELTAS != 0 {
        return Err(ChannelError::Format {
            offset: flags_offset as u64,
            reason: format!("unknown flag bits {:#06x}", flags & !FLAG_DELTAS),
        });
    }
    let m = r.u32("antennas")? as usize;
    let n = r.u32("sample count")? as usize;
    let p = r.u32("clusters")? as usize;
    let split_offset = r.pos;
    let split = match r.u8("split tag")? {
        0 => SplitTag::Train,
        1 => SplitTag::Test,
        other => {
            return Err(ChannelError::Format {
                offset: split_offset as u64,
                reason: format!("invalid split tag {other}"),
            })
        }
    };
    let seed = r.u64("seed")?;
    let angular_spread = r.f64("angular spread")?;
    if m == 0 || n == 0 {
        return Err(ChannelError::Format {
            offset: 10,
            reason: format!("degenerate dimensions M={m}, N={n}"),
        });
    }

    let mut samples = Vec::with_capacity(n * m);
    for _ in 0..n * m {
        let re = r.f32("sample real part")?;
        let im = r.f32("sample imaginary part")?;
        samples.push(Complex32::new(re, im));
    }

    let deltas = if flags & FLAG_DELTAS != 0 {
        let mut list = Vec::with_capacity(n);
        for _ in 0..n {
            let mut gains = Vec::with_capacity(p);
            for _ in 0..p {
                gains.push(r.f64("cluster gain")?);
            }
            let mut angles = Vec::with_capacity(p);
            for _ in 0..p {
                angles.push(r.f64("cluster angle")?);
            }
            list.push(ClusterParams::new(gains, angles)?);
        }
        Some(list)
    } else {
        None
    };

    if r.pos != data.len() {
        return Err(ChannelError::Format {
            offset: r.pos as u64,
            reason: format!("{} trailing bytes", data.len() - r.pos),
        });
    }

    let config = ScenarioConfig {
        antennas: m,
        clusters: p,
        angular_spread,
        quadrature_points: 16 * m,
        seed,
    };
    ChannelDataset::from_parts(samples, config, deltas, split)
}
