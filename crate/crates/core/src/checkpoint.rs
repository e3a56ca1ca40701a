//! Named-array container shared by training state, probe heads and
//! exported encoders.
//!
//! Little-endian layout:
//!
//! ```text
//! b"RCL1" | version u16
//! repeated until end of file:
//!     name_len u16 | name bytes | rank u8 | rank × extent u32 | f32 payload
//! ```
//!
//! Integer metadata (`u64`) is stored as a `[4]` array of 16-bit chunks,
//! each exactly representable in `f32`.

use std::io::{Read, Write};
use std::path::Path;

use crate::ndiff::Array;

pub const MAGIC: &[u8; 4] = b"RCL1";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint config digest {found:016x} does not match run config {expected:016x}")]
    DigestMismatch { found: u64, expected: u64 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e.to_string())
    }
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Ordered named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Records(pub Vec<(String, Array<f32>)>);

impl Records {
    pub fn push(&mut self, name: impl Into<String>, array: Array<f32>) {
        self.0.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&Array<f32>> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Like [`Records::get`], but a missing record means the file was cut
    /// short or written by something else.
    pub fn require(&self, name: &str) -> Result<&Array<f32>> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Io(format!("truncated checkpoint: record {name:?} missing")))
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: u64) {
        self.push(name, encode_u64(v));
    }

    pub fn require_u64(&self, name: &str) -> Result<u64> {
        decode_u64(self.require(name)?)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for (name, array) in &self.0 {
            let bytes = name.as_bytes();
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
            out.write_all(&[array.rank() as u8])?;
            for &e in array.shape() {
                out.write_all(&(e as u32).to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(array.len() * 4);
            for v in array.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&payload)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let mut records = Records::default();
        loop {
            let mut len = [0u8; 2];
            // a clean end of file is only allowed between records
            match r.read(&mut len[..1])? {
                0 => break,
                _ => r.read_exact(&mut len[1..])?,
            }
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Format(e.to_string()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut e = [0u8; 4];
                r.read_exact(&mut e)?;
                shape.push(u32::from_le_bytes(e) as usize);
            }
            let n: usize = shape.iter().product();
            let mut payload = vec![0u8; n * 4];
            r.read_exact(&mut payload)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let array = Array::new(&shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            records.push(name, array);
        }
        Ok(records)
    }

    /// Writes to `path` through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp)?;
            self.write(std::io::BufWriter::new(file))?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}

pub fn encode_u64(v: u64) -> Array<f32> {
    let chunks = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
    Array::new(&[4], chunks).expect("shape")
}

pub fn decode_u64(a: &Array<f32>) -> Result<u64> {
    if a.shape() != [4] {
        return Err(CheckpointError::Format(format!("u64 record has shape {:?}", a.shape())));
    }
    let mut v = 0u64;
    for (i, &c) in a.data().iter().enumerate() {
        if !(0.0..=65535.0).contains(&c) || c.fract() != 0.0 {
            return Err(CheckpointError::Format(format!("bad u64 chunk {c}")));
        }
        v |= (c as u64) << (16 * i);
    }
    Ok(v)
}
