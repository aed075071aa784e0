//! Named parameter blocks, the Adam optimizer and the MSCTWTS1 weights file.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use msct_core::numeric::fnv1a64;

use crate::error::{NeuralError, Result};
use crate::tape::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"MSCTWTS1";
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
    /// Running statistics and other buffers are stored but not optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|i| &self.blocks[i].value)
    }

    pub fn block(&self, i: usize) -> &ParamBlock {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut ParamBlock {
        &mut self.blocks[i]
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> usize {
        if let Some(i) = self.find(name) {
            self.blocks[i].value = value;
            self.blocks[i].trainable = trainable;
            return i;
        }
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), self.blocks.len() - 1);
        self.blocks.len() - 1
    }

    pub fn trainable_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.trainable).map(|b| b.value.len()).sum()
    }

    /// Hash of every block's name, shape and role; identifies an architecture.
    pub fn fingerprint(&self) -> u64 {
        let mut s = String::new();
        for b in &self.blocks {
            s.push_str(&format!("{}:{:?}:{};", b.name, b.value.shape, b.trainable));
        }
        fnv1a64(s.as_bytes())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&self.fingerprint().to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(u8::from(b.trainable));
            out.push(b.value.shape.len() as u8);
            for &d in &b.value.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &b.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != WEIGHTS_MAGIC {
            return Err(NeuralError::Format("not an MSCTWTS1 weights file".into()));
        }
        let fingerprint = r.u64()?;
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NeuralError::Format("block name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let trainable = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = match dtype {
                DTYPE_F64 => r.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                DTYPE_F32 => r
                    .take(count * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                d => return Err(NeuralError::Format(format!("unknown dtype {d} in block {name}"))),
            };
            store.insert(&name, Tensor::new(shape, data)?, trainable);
        }
        if r.pos != bytes.len() {
            return Err(NeuralError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if store.fingerprint() != fingerprint {
            return Err(NeuralError::Format("stored fingerprint does not match the blocks".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| NeuralError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.encode()).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| NeuralError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// Loads weights and rejects them unless they fit `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: u64) -> Result<Self> {
        let store = Self::load(path)?;
        let found = store.fingerprint();
        if found != expected {
            return Err(NeuralError::Fingerprint { expected, found });
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NeuralError::Format("truncated weights file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || store.blocks().iter().map(|b| vec![0.0; b.value.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from `(block index, gradient)` pairs; untouched blocks keep their moments.
    pub fn step<'g>(&mut self, store: &mut ParamStore, grads: impl IntoIterator<Item = (usize, &'g [f64])>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, g) in grads {
            let block = store.block_mut(i);
            if !block.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                block.value.data[k] -= c.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![2, 1, 3], vec![1.0, -2.0, 3.5, 1e-300, f64::MAX, -0.0]).unwrap(), true);
        s.insert("a.rm", Tensor::filled(&[2], 0.25), false);
        s
    }

    #[test]
    fn weights_round_trip_exactly() {
        let s = sample();
        let back = ParamStore::decode(&s.encode()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn corrupted_or_foreign_weights_are_rejected() {
        let s = sample();
        let mut bytes = s.encode();
        bytes.truncate(bytes.len() - 1);
        assert!(ParamStore::decode(&bytes).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        s.save(&p).unwrap();
        assert!(matches!(ParamStore::load_for(&p, 1), Err(NeuralError::Fingerprint { .. })));
        assert!(ParamStore::load_for(&p, s.fingerprint()).is_ok());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = sample();
        let mut opt = Adam::new(&s, AdamConfig::with_lr(0.1));
        let g = vec![1.0, -1.0, 2.0, 0.5, -3.0, 1.0];
        let before = s.get("a.w").unwrap().data.clone();
        opt.step(&mut s, [(0usize, g.as_slice()), (1usize, &[1.0, 1.0][..])]);
        let after = &s.get("a.w").unwrap().data;
        for k in 0..6 {
            let d = after[k] - before[k];
            if before[k].abs() < 1e10 {
                assert!((d + 0.1 * g[k].signum()).abs() < 1e-6, "{k}: {d}");
            }
        }
        assert_eq!(s.get("a.rm").unwrap().data, vec![0.25, 0.25]);
    }
}
