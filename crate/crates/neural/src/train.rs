//! MSE training with Adam, best-validation selection and early stopping.

use std::fmt::Write as _;

use msct_core::classical::NormalizedStack;
use msct_core::numeric::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::layers::{update_running_stats, Builder};
use crate::models::{line_batch, predict, ArchConfig, DnCnn, HsiNet, LineRef, ModelKind, Network, VideoNet};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::tape::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_videonet: f64,
    pub lr_hsinet: f64,
    /// Defaults to a tenth of `lr_hsinet`.
    pub lr_combiner: Option<f64>,
    pub lr_dncnn: f64,
    pub n_nearest_neighbors: usize,
    pub k_adjacent_bands: usize,
    pub n_denoise_blocks: usize,
    pub n_octave_blocks: usize,
    pub alpha_octave: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Training lines drawn per epoch; 0 uses every line.
    pub samples_per_epoch: usize,
    /// Validation lines evaluated per epoch; 0 uses every line.
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_videonet: 1.5e-2,
            lr_hsinet: 2.33e-5,
            lr_combiner: None,
            lr_dncnn: 1e-3,
            n_nearest_neighbors: 5,
            k_adjacent_bands: 64,
            n_denoise_blocks: 6,
            n_octave_blocks: 6,
            alpha_octave: 0.1,
            batch_size: 16,
            max_epochs: 30,
            patience: 3,
            samples_per_epoch: 0,
            val_samples: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_videonet, self.lr_hsinet, self.lr_combiner(), self.lr_dncnn];
        if lrs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(NeuralError::Config("learning rates must be positive".into()));
        }
        if !(self.alpha_octave > 0.0 && self.alpha_octave < 1.0) {
            return Err(NeuralError::Config(format!("alpha_octave {} outside (0, 1)", self.alpha_octave)));
        }
        let counts = [
            self.n_nearest_neighbors,
            self.k_adjacent_bands,
            self.n_denoise_blocks,
            self.batch_size,
            self.max_epochs,
            self.patience,
        ];
        if counts.contains(&0) {
            return Err(NeuralError::Config("neighbour, band, block, batch, epoch and patience counts must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_combiner(&self) -> f64 {
        self.lr_combiner.unwrap_or(self.lr_hsinet / 10.0)
    }

    pub fn lr_for(&self, kind: ModelKind) -> f64 {
        match kind {
            ModelKind::HsiNet => self.lr_hsinet,
            ModelKind::VideoNet => self.lr_videonet,
            ModelKind::Combiner => self.lr_combiner(),
            ModelKind::DnCnn => self.lr_dncnn,
        }
    }

    pub fn hsinet(&self, arch: &ArchConfig) -> Result<HsiNet> {
        let net = HsiNet {
            k_bands: self.k_adjacent_bands,
            channels: arch.hsinet_channels,
            extractor_channels: arch.extractor_channels,
            n_blocks: self.n_denoise_blocks,
            n_octave_blocks: self.n_octave_blocks.min(self.n_denoise_blocks),
            alpha: self.alpha_octave,
            cbam_reduction: arch.cbam_reduction,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn videonet(&self, arch: &ArchConfig) -> VideoNet {
        let mut patch = arch.patch;
        patch.n_neighbors = self.n_nearest_neighbors;
        VideoNet {
            patch,
            angular_neighbors: arch.angular_neighbors,
            channels: arch.videonet_channels,
            n_sepconv: arch.n_sepconv,
            tail_channels: arch.tail_channels,
            n_tail_convs: arch.n_tail_convs,
        }
    }

    pub fn dncnn(&self, arch: &ArchConfig) -> DnCnn {
        DnCnn {
            channels: arch.dncnn_channels,
            hidden: arch.dncnn_hidden,
        }
    }
}

/// Noisy and ground-truth normalized stacks, one pair per slice.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub noisy: Vec<NormalizedStack>,
    pub gt: Vec<NormalizedStack>,
}

impl Dataset {
    pub fn new(noisy: Vec<NormalizedStack>, gt: Vec<NormalizedStack>) -> Result<Self> {
        if noisy.len() != gt.len() || noisy.iter().zip(&gt).any(|(a, b)| a.dims() != b.dims()) {
            return Err(NeuralError::shape("dataset", "matching noisy and GT stacks", (noisy.len(), gt.len())));
        }
        Ok(Self { noisy, gt })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Epoch 0 is the untrained network.
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_val(&self) -> f64 {
        self.history[self.best_epoch].val_mse
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for e in &self.history {
            let _ = writeln!(s, "{},{:e},{:e}", e.epoch, e.train_mse, e.val_mse);
        }
        s
    }
}

/// Mean squared error of `net` over `items`, in evaluation mode.
pub fn evaluate(net: &dyn Network, store: &ParamStore, data: &Dataset, items: &[LineRef], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in items.chunks(batch.max(1)) {
        let (out, _) = predict(net, store, net.inputs(&data.noisy, chunk)?)?;
        let gt = line_batch(&data.gt, chunk)?;
        sum += out.data.iter().zip(&gt.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += out.len();
    }
    Ok(sum / count.max(1) as f64)
}

fn subsample(items: &[LineRef], n: usize, rng: &mut ChaCha8Rng) -> Vec<LineRef> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    if n > 0 {
        v.truncate(n);
    }
    v
}

/// Trains `store` in place and leaves the best-validation weights in it.
/// Stops after `patience` epochs without a validation improvement.
pub fn train(
    net: &dyn Network,
    store: &mut ParamStore,
    data: &Dataset,
    train_items: &[LineRef],
    val_items: &[LineRef],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_items.is_empty() || val_items.is_empty() {
        return Err(NeuralError::Config("training needs non-empty train and validation sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[net.kind() as u64]));
    let val = subsample(val_items, cfg.val_samples, &mut rng);
    let probe = subsample(train_items, val.len(), &mut rng);
    let mut history = vec![EpochLoss {
        epoch: 0,
        train_mse: evaluate(net, store, data, &probe, cfg.batch_size)?,
        val_mse: evaluate(net, store, data, &val, cfg.batch_size)?,
    }];
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut bad = 0;
    let mut opt = Adam::new(store, AdamConfig::with_lr(cfg.lr_for(net.kind())));
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[net.kind() as u64, epoch as u64]));
        let items = subsample(train_items, cfg.samples_per_epoch, &mut erng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in items.chunks(cfg.batch_size).enumerate() {
            let inputs = net.inputs(&data.noisy, chunk)?;
            let target = line_batch(&data.gt, chunk)?;
            let (loss, grads, stats) = {
                let mut b = Builder::new(store, true, true);
                let ids: Vec<NodeId> = inputs.into_iter().map(|t| b.tape.input(t)).collect();
                let out = net.forward(&mut b, &ids)?;
                let t = b.tape.input(target);
                let loss_id = b.tape.mse(out.out, t)?;
                let loss = b.tape.value(loss_id).data[0];
                if !loss.is_finite() {
                    return Err(NeuralError::NonFiniteLoss { epoch, batch: bi });
                }
                let g = b.tape.backward(loss_id);
                let grads: Vec<(usize, Vec<f64>)> = g.params().map(|(i, g)| (i, g.to_vec())).collect();
                (loss, grads, b.take_batch_stats())
            };
            opt.step(store, grads.iter().map(|(i, g)| (*i, g.as_slice())));
            update_running_stats(store, &stats);
            loss_sum += loss;
            batches += 1;
        }
        let val_mse = evaluate(net, store, data, &val, cfg.batch_size)?;
        if !val_mse.is_finite() {
            return Err(NeuralError::NonFiniteLoss { epoch, batch: batches });
        }
        history.push(EpochLoss {
            epoch,
            train_mse: loss_sum / batches.max(1) as f64,
            val_mse,
        });
        if val_mse < history[best_epoch].val_mse {
            best_epoch = epoch;
            best = store.clone();
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    *store = best;
    Ok(TrainOutcome {
        history,
        best_epoch,
        stopped_early,
    })
}
