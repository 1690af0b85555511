//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! "WDCK" | u32 version | u32 len + UTF-8 JSON config
//! u32 section count, each: u32 len + tag | tensor table
//!   tensor table: u32 count, each: u32 len + name | u8 dtype (0 = f32)
//!                 | u32 rank | u64 dims... | f32 payload
//! u8 has_state [ u64 step | f64 loss_ema | u64 loss_count
//!                | 32-byte RNG seed | u64 stream | u128 word position
//!                | u8 has_loader [ u64 len | u64 cursor | u64 order... ] ]
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::dataset::Loader;
use super::{put_string, read_file, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WDCK";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub const PARAMS: &str = "params";
pub const EMA: &str = "ema";
pub const ADAM_M: &str = "adam_m";
pub const ADAM_V: &str = "adam_v";

/// A named tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything besides tensors needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainCounters {
    pub step: u64,
    pub loss_ema: f64,
    pub loss_count: u64,
    pub rng: RngState,
    pub loader: Option<Loader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON run configuration, preserved byte-for-byte.
    pub config: String,
    pub sections: Vec<Section>,
    pub state: Option<TrainCounters>,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_string(&mut out, &self.config);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for section in &self.sections {
            put_string(&mut out, &section.name);
            out.extend_from_slice(&(section.tensors.len() as u32).to_le_bytes());
            for (name, t) in &section.tensors {
                put_string(&mut out, name);
                out.push(DTYPE_F32);
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        match &self.state {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                out.extend_from_slice(&s.loss_ema.to_le_bytes());
                out.extend_from_slice(&s.loss_count.to_le_bytes());
                out.extend_from_slice(&s.rng.seed);
                out.extend_from_slice(&s.rng.stream.to_le_bytes());
                out.extend_from_slice(&s.rng.word_pos.to_le_bytes());
                match &s.loader {
                    None => out.push(0),
                    Some(l) => {
                        out.push(1);
                        out.extend_from_slice(&(l.order.len() as u64).to_le_bytes());
                        out.extend_from_slice(&(l.cursor as u64).to_le_bytes());
                        for &i in &l.order {
                            out.extend_from_slice(&(i as u64).to_le_bytes());
                        }
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(
                path,
                format!("CRC mismatch (stored {stored:08x}, computed {actual:08x}); refusing to load"),
            ));
        }
        let mut r = ByteReader::new(body, path);
        r.bytes(4)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = r.string()?;
            let count = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..count {
                tensors.push(read_tensor(&mut r)?);
            }
            sections.push(Section { name, tensors });
        }
        let state = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let loss_ema = r.f64()?;
                let loss_count = r.u64()?;
                let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = r.u128()?;
                let loader = match r.u8()? {
                    0 => None,
                    1 => {
                        let len = r.u64()? as usize;
                        let cursor = r.u64()? as usize;
                        if len.saturating_mul(8) > r.remaining() || cursor > len {
                            return Err(r.fail("corrupt loader state"));
                        }
                        let order = (0..len).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
                        Some(Loader { order, cursor })
                    }
                    f => return Err(r.fail(format!("bad loader flag {f}"))),
                };
                Some(TrainCounters {
                    step,
                    loss_ema,
                    loss_count,
                    rng: RngState { seed, stream, word_pos },
                    loader,
                })
            }
            f => return Err(r.fail(format!("bad state flag {f}"))),
        };
        if r.remaining() != 0 {
            return Err(r.fail(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { config, sections, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}

fn read_tensor(r: &mut ByteReader<'_>) -> Result<(String, Tensor<f32>)> {
    let name = r.string()?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(r.fail(format!("tensor {name}: unsupported dtype tag {dtype}")));
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(r.fail(format!("tensor {name}: bad rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|n| n.saturating_mul(4) <= r.remaining())
        .ok_or_else(|| r.fail(format!("tensor {name}: dims {shape:?} exceed the file")))?;
    let at = r.position();
    let data = (0..numel).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let t = Tensor::new(&shape, data).map_err(|e| r.fail(format!("tensor {name} at {at}: {e}")))?;
    Ok((name, t))
}
