//! CVDC checkpoint files: named f64 tensors, rng state, and a config
//! snapshot, all little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CvdError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CVDC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized training state. Tensor iteration order (name order) is the
/// on-disk order, so equal states produce byte-equal files.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub rng: RngSnapshot,
    pub config_text: String,
}

/// ChaCha8 streams captured as (seed, word position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSnapshot {
    pub graph_seed: [u8; 32],
    pub graph_pos: u128,
    pub loop_seed: [u8; 32],
    pub loop_pos: u128,
}

const RNG_BLOB_LEN: usize = 96;

impl RngSnapshot {
    fn to_bytes(&self) -> [u8; RNG_BLOB_LEN] {
        let mut b = [0u8; RNG_BLOB_LEN];
        b[..32].copy_from_slice(&self.graph_seed);
        b[32..48].copy_from_slice(&self.graph_pos.to_le_bytes());
        b[48..80].copy_from_slice(&self.loop_seed);
        b[80..96].copy_from_slice(&self.loop_pos.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> RngSnapshot {
        RngSnapshot {
            graph_seed: b[..32].try_into().unwrap(),
            graph_pos: u128::from_le_bytes(b[32..48].try_into().unwrap()),
            loop_seed: b[48..80].try_into().unwrap(),
            loop_pos: u128::from_le_bytes(b[80..96].try_into().unwrap()),
        }
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&ck.step.to_le_bytes())?;
    w.write_all(&(ck.tensors.len() as u32).to_le_bytes())?;
    for (name, (shape, data)) in &ck.tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let rng = ck.rng.to_bytes();
    w.write_all(&(rng.len() as u32).to_le_bytes())?;
    w.write_all(&rng)?;
    let cfg = ck.config_text.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg)?;
    w.flush()?;
    Ok(())
}

struct TrackedReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> TrackedReader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| CvdError::Format {
            offset: at,
            msg: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = TrackedReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CvdError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CvdError::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let step = r.u64("step")?;
    let n_tensors = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u16("name length")? as usize;
        let mut name = vec![0u8; name_len];
        let name_at = r.offset;
        r.take(&mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| CvdError::Format {
            offset: name_at,
            msg: "tensor name is not UTF-8".into(),
        })?;
        let mut rank = [0u8; 1];
        r.take(&mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        let data_at = r.offset;
        r.take(&mut buf, "tensor data")?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CvdError::Format {
                offset: data_at + i as u64 * 8,
                msg: format!("non-finite value in tensor '{name}'"),
            });
        }
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(CvdError::Format {
                offset: name_at,
                msg: format!("duplicate tensor '{name}'"),
            });
        }
    }
    let rng_len = r.u32("rng state length")? as usize;
    if rng_len != RNG_BLOB_LEN {
        return Err(CvdError::Format {
            offset: r.offset - 4,
            msg: format!("rng state is {rng_len} bytes, expected {RNG_BLOB_LEN}"),
        });
    }
    let mut rng = [0u8; RNG_BLOB_LEN];
    r.take(&mut rng, "rng state")?;
    let cfg_len = r.u32("config length")? as usize;
    let mut cfg = vec![0u8; cfg_len];
    let cfg_at = r.offset;
    r.take(&mut cfg, "config snapshot")?;
    let config_text = String::from_utf8(cfg).map_err(|_| CvdError::Format {
        offset: cfg_at,
        msg: "config snapshot is not UTF-8".into(),
    })?;
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(CvdError::Format {
            offset: r.offset,
            msg: "trailing bytes after config snapshot".into(),
        });
    }
    Ok(Checkpoint {
        step,
        tensors,
        rng: RngSnapshot::from_bytes(&rng),
        config_text,
    })
}
