//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic, format version, config hash, step
//! counter, RNG state, then named f64 tensors grouped into sections
//! (one per network plus optimizer state). f64 payloads are stored as raw
//! bits, so save/load round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CITGANCK";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<f64>);

/// Serialized RNG state of the training loop's ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub rng: RngState,
    pub sections: Vec<(String, Vec<NamedTensor>)>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Result<&[NamedTensor]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| Error::Checkpoint {
                path: "<memory>".into(),
                message: format!("missing section `{name}`"),
            })
    }

    /// Concatenate a section's tensors into one flat vector, in stored
    /// order. Matches the `Params::to_flat` convention.
    pub fn section_flat(&self, name: &str) -> Result<Vec<f64>> {
        let tensors = self.section(name)?;
        let mut out = Vec::new();
        for (_, _, data) in tensors {
            out.extend_from_slice(data);
        }
        Ok(out)
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(self.corrupt("implausible string length"));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }
    fn corrupt(&self, msg: &str) -> Error {
        Error::Checkpoint {
            path: self.path.into(),
            message: format!("corrupt file at offset {}: {msg}", self.pos),
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(&ckpt.config_hash);
    w.u64(ckpt.step);
    w.bytes(&ckpt.rng.seed);
    w.u64(ckpt.rng.stream);
    w.u128(ckpt.rng.word_pos);
    w.u32(ckpt.sections.len() as u32);
    for (name, tensors) in &ckpt.sections {
        w.str(name);
        w.u32(tensors.len() as u32);
        for (tname, shape, data) in tensors {
            w.str(tname);
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u64(d as u64);
            }
            w.u64(data.len() as u64);
            for &v in data {
                w.u64(v.to_bits());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&w.buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            path: path.into(),
            message: "bad magic (not a checkpoint file)".into(),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32)?);
    let step = r.u64()?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let nsec = r.u32()? as usize;
    let mut sections = Vec::with_capacity(nsec);
    for _ in 0..nsec {
        let name = r.str()?;
        let nt = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(nt);
        for _ in 0..nt {
            let tname = r.str()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.corrupt("implausible tensor rank"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len = r.u64()? as usize;
            let expect: usize = shape.iter().product();
            if len != expect {
                return Err(r.corrupt("tensor length does not match shape"));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(r.u64()?));
            }
            tensors.push((tname, shape, data));
        }
        sections.push((name, tensors));
    }
    if r.pos != buf.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        config_hash,
        step,
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
        sections,
    })
}
