//! Versioned binary checkpoint: run config, named parameter arrays
//! with shapes, Adam moments, epoch counter, and the training RNG
//! state. save -> load -> save reproduces identical bytes, and a
//! restored state continues the training trajectory bit-for-bit.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::util::write_atomic;

const MAGIC: &[u8; 4] = b"DDCK";
const VERSION: u32 = 1;

/// Serialized ChaCha state: seed, word position, stream id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> RngState {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub rng: RngState,
    /// (name, shape, values, adam_m, adam_v, ema) per parameter, in
    /// model order. `ema` is the exponential moving average used for
    /// sampling.
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub ema: Vec<f64>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let config = ck.config.to_toml()?;
    put_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(config.as_bytes());
    put_u64(&mut buf, ck.epoch as u64);
    put_u64(&mut buf, ck.adam_step);
    buf.extend_from_slice(&ck.rng.seed);
    buf.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    put_u64(&mut buf, ck.rng.stream);
    put_u32(&mut buf, ck.params.len() as u32);
    for p in &ck.params {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.shape.len() as u32);
        for &d in &p.shape {
            put_u32(&mut buf, d as u32);
        }
        put_f64s(&mut buf, &p.data);
        put_f64s(&mut buf, &p.adam_m);
        put_f64s(&mut buf, &p.adam_v);
        put_f64s(&mut buf, &p.ema);
    }
    write_atomic(path, &buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_str = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
    let config = RunConfig::from_toml(config_str)?;
    let epoch = r.u64()? as usize;
    let adam_step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let stream = r.u64()?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64_vec(numel)?;
        let adam_m = r.f64_vec(numel)?;
        let adam_v = r.f64_vec(numel)?;
        let ema = r.f64_vec(numel)?;
        params.push(ParamRecord {
            name,
            shape,
            data,
            adam_m,
            adam_v,
            ema,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        epoch,
        adam_step,
        rng: RngState {
            seed,
            word_pos,
            stream,
        },
        params,
    })
}
