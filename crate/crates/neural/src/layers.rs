//! Parameter binding and the composite layers shared by the networks.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NeuralError, Result};
use crate::params::ParamStore;
use crate::tape::{BatchStats, ConvSpec, NodeId, Tape, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std sqrt(2 / fan_in).
    He { fan_in: usize },
    Zero,
    Const(f64),
}

impl Init {
    fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Init::He { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                let n = shape.iter().product();
                Tensor {
                    shape: shape.to_vec(),
                    data: (0..n).map(|_| normal.sample(rng)).collect(),
                }
            }
            Init::Zero => Tensor::zeros(shape),
            Init::Const(v) => Tensor::filled(shape, v),
        }
    }
}

enum Source<'a> {
    Fixed(&'a ParamStore),
    Init(&'a mut ParamStore, &'a mut ChaCha8Rng),
}

/// A tape plus the parameters it reads. In init mode missing blocks are
/// created; otherwise every block must already exist with the right shape.
pub struct Builder<'a> {
    pub tape: Tape,
    source: Source<'a>,
    train: bool,
    param_grads: bool,
    cache: HashMap<String, NodeId>,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'a> Builder<'a> {
    /// Forward with fixed weights. `train` selects batch statistics in batch
    /// norm; `param_grads` marks trainable parameters for the reverse pass.
    pub fn new(store: &'a ParamStore, train: bool, param_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            source: Source::Fixed(store),
            train,
            param_grads,
            cache: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn init(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            source: Source::Init(store, rng),
            train: true,
            param_grads: false,
            cache: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.train
    }

    fn bind(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<(usize, Tensor, bool)> {
        match &mut self.source {
            Source::Fixed(store) => {
                let i = store.find(name).ok_or_else(|| NeuralError::MissingParameter(name.to_string()))?;
                let b = store.block(i);
                if b.value.shape != shape {
                    return Err(NeuralError::shape(name, format!("{shape:?}"), &b.value.shape));
                }
                Ok((i, b.value.clone(), b.trainable))
            }
            Source::Init(store, rng) => {
                if let Some(i) = store.find(name) {
                    let b = store.block(i);
                    if b.value.shape != shape {
                        return Err(NeuralError::shape(name, format!("{shape:?}"), &b.value.shape));
                    }
                    return Ok((i, b.value.clone(), b.trainable));
                }
                let t = init.sample(shape, rng);
                let i = store.insert(name, t.clone(), trainable);
                Ok((i, t, trainable))
            }
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let (i, t, trainable) = self.bind(name, shape, init, true)?;
        let id = self.tape.param(i, t, trainable && self.param_grads);
        self.cache.insert(name.to_string(), id);
        Ok(id)
    }

    fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Vec<f64>> {
        Ok(self.bind(name, shape, init, false)?.1.data)
    }

    /// Batch statistics gathered by training-mode batch norms, keyed by layer.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Moves running statistics toward the batch statistics of one step.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BatchStats)]) {
    for (layer, s) in stats {
        for (suffix, v) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            if let Some(i) = store.find(&format!("{layer}.{suffix}")) {
                let data = &mut store.block_mut(i).value.data;
                for (d, x) in data.iter_mut().zip(v) {
                    *d = (1.0 - BN_MOMENTUM) * *d + BN_MOMENTUM * x;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    He,
    Zero,
}

/// Convolution `name.w` (+ `name.b`) with `co` outputs over the spatial axes
/// of `x`; `spec` defaults to same padding.
pub fn conv(
    b: &mut Builder,
    name: &str,
    x: NodeId,
    co: usize,
    kernel: &[usize],
    spec: Option<ConvSpec>,
    bias: bool,
    init: WeightInit,
) -> Result<NodeId> {
    let xs = b.tape.shape(x);
    if xs.len() != kernel.len() + 2 {
        return Err(NeuralError::shape(name, format!("input with {} spatial axes", kernel.len()), xs));
    }
    let ci = xs[1];
    let mut shape = vec![co, ci];
    shape.extend_from_slice(kernel);
    let fan_in = ci * kernel.iter().product::<usize>();
    let w_init = match init {
        WeightInit::He => Init::He { fan_in },
        WeightInit::Zero => Init::Zero,
    };
    let w = b.param(&format!("{name}.w"), &shape, w_init)?;
    let bias = if bias { Some(b.param(&format!("{name}.b"), &[co], Init::Zero)?) } else { None };
    let spec = spec.unwrap_or_else(|| ConvSpec::same(kernel));
    b.tape.conv(name, x, w, bias, &spec)
}

pub fn conv_relu(b: &mut Builder, name: &str, x: NodeId, co: usize, kernel: &[usize]) -> Result<NodeId> {
    let y = conv(b, name, x, co, kernel, None, true, WeightInit::He)?;
    Ok(b.tape.relu(y))
}

pub fn batch_norm(b: &mut Builder, name: &str, x: NodeId) -> Result<NodeId> {
    let c = b.tape.shape(x)[1];
    let gamma = b.param(&format!("{name}.gamma"), &[c], Init::Const(1.0))?;
    let beta = b.param(&format!("{name}.beta"), &[c], Init::Zero)?;
    let rm = b.buffer(&format!("{name}.running_mean"), &[c], Init::Zero)?;
    let rv = b.buffer(&format!("{name}.running_var"), &[c], Init::Const(1.0))?;
    if b.train {
        let (y, stats) = b.tape.batch_norm(x, gamma, beta, None)?;
        if let Some(s) = stats {
            b.bn_stats.push((name.to_string(), s));
        }
        Ok(y)
    } else {
        Ok(b.tape.batch_norm(x, gamma, beta, Some((&rm, &rv)))?.0)
    }
}

/// Channel attention followed by spatial attention on `x [N, C, L]`.
pub fn cbam(b: &mut Builder, name: &str, x: NodeId, reduction: usize) -> Result<NodeId> {
    let xs = b.tape.shape(x).to_vec();
    if xs.len() != 3 || xs[1] == 0 {
        return Err(NeuralError::shape(name, "[N, C ≥ 1, L]", &xs));
    }
    let c = xs[1];
    let hidden = (c / reduction.max(1)).max(1);
    let mx = b.tape.max_axis(x, 2);
    let av = b.tape.mean_axis(x, 2);
    let mlp = |b: &mut Builder, z: NodeId| -> Result<NodeId> {
        let h = conv(b, &format!("{name}.mlp1"), z, hidden, &[1], None, true, WeightInit::He)?;
        let h = b.tape.relu(h);
        conv(b, &format!("{name}.mlp2"), h, c, &[1], None, true, WeightInit::He)
    };
    let (om, oa) = (mlp(b, mx)?, mlp(b, av)?);
    let logits = b.tape.add(om, oa)?;
    let ca = b.tape.sigmoid(logits);
    let x1 = b.tape.mul(x, ca)?;
    let smx = b.tape.max_axis(x1, 1);
    let sav = b.tape.mean_axis(x1, 1);
    let pooled = b.tape.concat(&[smx, sav])?;
    let s = conv(b, &format!("{name}.spatial"), pooled, 1, &[7], None, true, WeightInit::He)?;
    let sa = b.tape.sigmoid(s);
    b.tape.mul(x1, sa)
}

/// Low-frequency channel count for `channels` and `alpha`.
pub fn octave_split(channels: usize, alpha: f64) -> (usize, usize) {
    let low = (alpha * channels as f64).round() as usize;
    (channels - low, low)
}

/// One 1-D octave convolution: four paths, summed per destination.
/// `high [N, Ch, L]`, `low [N, Cl, ceil(L/2)]`; no activation.
pub fn octave(
    b: &mut Builder,
    name: &str,
    high: NodeId,
    low: NodeId,
    out: (usize, usize),
    kernel: usize,
) -> Result<(NodeId, NodeId)> {
    let lh = b.tape.shape(high)[2];
    let ll = b.tape.shape(low)[2];
    if ll != lh.div_ceil(2) {
        return Err(NeuralError::shape(name, format!("low length {}", lh.div_ceil(2)), ll));
    }
    let k = [kernel];
    let hh = conv(b, &format!("{name}.hh"), high, out.0, &k, None, true, WeightInit::He)?;
    let hl = conv(b, &format!("{name}.hl"), high, out.1, &k, None, false, WeightInit::He)?;
    let hl = b.tape.avg_pool2(hl);
    let lhc = conv(b, &format!("{name}.lh"), low, out.0, &k, None, false, WeightInit::He)?;
    let lhu = b.tape.upsample2(lhc, lh)?;
    let ll_ = conv(b, &format!("{name}.ll"), low, out.1, &k, None, true, WeightInit::He)?;
    Ok((b.tape.add(hh, lhu)?, b.tape.add(hl, ll_)?))
}

/// Three sequential convolutions along the last, first and middle spatial
/// axes of `x [N, C, O, R, W]`.
pub fn sepconv(b: &mut Builder, name: &str, x: NodeId, co: usize, kernel: usize) -> Result<NodeId> {
    let y = conv(b, &format!("{name}.w"), x, co, &[1, 1, kernel], None, true, WeightInit::He)?;
    let y = conv(b, &format!("{name}.o"), y, co, &[kernel, 1, 1], None, false, WeightInit::He)?;
    conv(b, &format!("{name}.r"), y, co, &[1, kernel, 1], None, false, WeightInit::He)
}
