//! Binary checkpoint format: magic "CITR", version, config echo, trainer
//! step, RNG state, named tensor table, optimizer state. Canonical layout so
//! save -> load -> save is byte-identical.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{CitrinetModel, InitMode};
use crate::optim::Novograd;
use crate::rng::{rng_from_state, rng_state, Rng};

const MAGIC: &[u8; 4] = b"CITR";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint: truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serialize the training state. The optimizer is optional so decode-only
/// checkpoints stay possible.
pub fn checkpoint_bytes(
    model: &CitrinetModel,
    optim: Option<&Novograd>,
    rng: &Rng,
    step: u64,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let cfg = model.config.to_text();
    w.u32(cfg.len() as u32);
    w.bytes(cfg.as_bytes());
    w.u64(step);
    let (seed, pos) = rng_state(rng);
    w.bytes(&seed);
    w.bytes(&pos.to_le_bytes());
    let table = model.params();
    w.u32(table.entries.len() as u32);
    for (name, tensor, _) in &table.entries {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(tensor.shape().len() as u32);
        for &e in tensor.shape() {
            w.u32(e as u32);
        }
        for &v in tensor.data().iter() {
            w.f64(v);
        }
    }
    match optim {
        None => w.u8(0),
        Some(o) => {
            w.u8(1);
            let (m, v, ostep) = o.state();
            w.u64(ostep);
            w.u32(m.len() as u32);
            for (mi, vi) in m.iter().zip(v) {
                match vi {
                    Some(val) => {
                        w.u8(1);
                        w.f64(*val);
                    }
                    None => w.u8(0),
                }
                w.u64(mi.len() as u64);
                for &x in mi {
                    w.f64(x);
                }
            }
        }
    }
    w.buf
}

pub struct LoadedCheckpoint {
    pub model: CitrinetModel,
    pub optim: Option<Novograd>,
    pub rng: Rng,
    pub step: u64,
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Format("checkpoint: config not utf-8".into()))?;
    let config = ModelConfig::parse(cfg_text)?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let rng = rng_from_state(seed, pos);
    let model = CitrinetModel::build(&config, InitMode::Zeros)?;
    let table = model.params();
    let n = r.u32()? as usize;
    if n != table.entries.len() {
        return Err(Error::Format(format!(
            "checkpoint: {n} tensors stored, model has {}",
            table.entries.len()
        )));
    }
    for (name, tensor, _) in &table.entries {
        let name_len = r.u32()? as usize;
        let stored = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("checkpoint: tensor name not utf-8".into()))?;
        if stored != name {
            return Err(Error::Format(format!(
                "checkpoint: tensor order mismatch: stored {stored:?}, expected {name:?}"
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint: shape mismatch for {name}: stored {shape:?}, expected {:?}",
                tensor.shape()
            )));
        }
        let mut data = vec![0.0; tensor.numel()];
        for v in data.iter_mut() {
            *v = r.f64()?;
        }
        tensor.set_data(&data);
    }
    let optim = if r.u8()? == 1 {
        let ostep = r.u64()?;
        let count = r.u32()? as usize;
        let trainable = table.trainable().count();
        if count != trainable {
            return Err(Error::Format(format!(
                "checkpoint: optimizer covers {count} tensors, model has {trainable}"
            )));
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(if r.u8()? == 1 { Some(r.f64()?) } else { None });
            let len = r.u64()? as usize;
            let mut buf = vec![0.0; len];
            for x in buf.iter_mut() {
                *x = r.f64()?;
            }
            m.push(buf);
        }
        let mut opt = Novograd::new(
            &table,
            crate::optim::NOVOGRAD_BETA1,
            crate::optim::NOVOGRAD_BETA2,
            config.weight_decay,
        );
        opt.restore(m, v, ostep);
        Some(opt)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Format("checkpoint: trailing bytes".into()));
    }
    Ok(LoadedCheckpoint {
        model,
        optim,
        rng,
        step,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &CitrinetModel,
    optim: Option<&Novograd>,
    rng: &Rng,
    step: u64,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, optim, rng, step))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    parse_checkpoint(&std::fs::read(path)?)
}
