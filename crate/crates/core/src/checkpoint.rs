//! Binary checkpoint of a model and its input scaler.
//!
//! ```text
//! magic  b"SSCK"
//! u32    format version
//! ---- payload ----
//! u32    config length, then the architecture config as JSON
//! u32    tensor count
//! per tensor:
//!   u32 name length, name (UTF-8), u8 rank, u64 extent * rank,
//!   f64 * numel (row-major)
//! ---- end payload ----
//! u32    CRC32 of the payload
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::data::FeatureScaler;
use crate::error::{Error, Result};
use crate::io::{read, write_atomic};
use crate::model::{ArchitectureConfig, ModelParams};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"SSCK";
pub const VERSION: u32 = 1;
const HEADER: usize = 8;

pub const SCALER_MEAN: &str = "scaler.mean";
pub const SCALER_STD: &str = "scaler.std";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub scaler: FeatureScaler,
}

impl Checkpoint {
    pub fn new(params: ModelParams, scaler: FeatureScaler) -> Self {
        Checkpoint { params, scaler }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let config = serde_json::to_vec(&self.params.config).expect("config serializes");
        put_u32(&mut payload, config.len());
        payload.extend_from_slice(&config);
        let mut tensors = self.params.named_tensors();
        tensors.push((SCALER_MEAN.into(), &self.scaler.mean));
        tensors.push((SCALER_STD.into(), &self.scaler.std));
        put_u32(&mut payload, tensors.len());
        for (name, t) in tensors {
            payload.extend_from_slice(&encode_record(&name, t));
        }
        let mut out = Vec::with_capacity(HEADER + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, records) = parse(bytes)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut params = ModelParams::init(&config, &mut rng)
            .map_err(|e| corrupt(format!("stored config is invalid: {e}")))?;
        let mut scaler = FeatureScaler::identity(config.num_features);
        let mut seen = std::collections::HashSet::new();
        {
            let mut slots = params.named_tensors_mut();
            slots.push((SCALER_MEAN.into(), &mut scaler.mean));
            slots.push((SCALER_STD.into(), &mut scaler.std));
            if records.len() != slots.len() {
                return Err(corrupt(format!(
                    "{} tensors stored, model needs {}",
                    records.len(),
                    slots.len()
                )));
            }
            for rec in records {
                let (_, slot) = slots
                    .iter_mut()
                    .find(|(n, _)| *n == rec.name)
                    .ok_or_else(|| corrupt(format!("unexpected tensor {:?}", rec.name)))?;
                if !seen.insert(rec.name.clone()) {
                    return Err(corrupt(format!("tensor {:?} stored twice", rec.name)));
                }
                if slot.shape() != rec.tensor.shape() {
                    return Err(corrupt(format!(
                        "tensor {:?} has shape {:?}, config implies {:?}",
                        rec.name,
                        rec.tensor.shape(),
                        slot.shape()
                    )));
                }
                **slot = rec.tensor;
            }
        }
        Ok(Checkpoint { params, scaler })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?).map_err(|e| match e {
            Error::CorruptCheckpoint(msg) => {
                Error::CorruptCheckpoint(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }
}

/// One stored tensor with the exact bytes of its record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
    pub bytes: Vec<u8>,
}

/// Validates framing and checksum and returns the config and every record
/// in stored order.
pub fn parse(bytes: &[u8]) -> Result<(ArchitectureConfig, Vec<Record>)> {
    if bytes.len() < HEADER + 4 {
        return Err(corrupt(format!("{} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let (payload, crc) = bytes[HEADER..].split_at(bytes.len() - HEADER - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(corrupt(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let len = r.u32()? as usize;
    let config: ArchitectureConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| corrupt(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        if rank > MAX_RANK {
            return Err(corrupt(format!("tensor {name:?} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| corrupt(format!("tensor {name:?} extents {shape:?} overrun the file")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| corrupt(e.to_string()))?;
        records.push(Record {
            name,
            tensor,
            bytes: payload[start..r.pos].to_vec(),
        });
    }
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing payload bytes", r.remaining())));
    }
    Ok((config, records))
}

pub fn encode_record(name: &str, t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + name.len() + 1 + 8 * t.rank() + 8 * t.numel());
    put_u32(&mut out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn corrupt(msg: String) -> Error {
    Error::CorruptCheckpoint(msg)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(corrupt(format!("truncated at byte {}", HEADER + self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Checkpoint {
        let cfg = ArchitectureConfig {
            kernels_per_branch: 2,
            hidden_width: 3,
            num_tasks: 2,
            ..ArchitectureConfig::new(12, 2)
        };
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut scaler = FeatureScaler::identity(12);
        scaler.mean.data_mut()[4] = -0.25;
        Checkpoint::new(params, scaler)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = small();
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn every_flipped_payload_byte_is_detected() {
        let bytes = small().to_bytes();
        for i in (HEADER..bytes.len()).step_by(7) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(
                matches!(Checkpoint::from_bytes(&b), Err(Error::CorruptCheckpoint(_))),
                "byte {i}"
            );
        }
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = small().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::CorruptCheckpoint(_))));
    }
}
