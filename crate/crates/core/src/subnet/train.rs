use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    adam_step, AdamConfig, AdamState, InputChannel, InputNorm, SubnetConfig, SubnetParams,
};
use crate::error::{Error, Result};
use crate::evidential::{beliefs, EvidenceField, SubnetId};
use crate::kv::{KvFile, KvReader};
use crate::losses::{LossBreakdown, LossConfig};
use crate::volume::{Dims, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Multiplier applied every `decay_every_epochs` epochs.
    pub lr_decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    /// Slices per optimizer step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    /// Seed of the slice shuffling stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.01,
            lr_decay_factor: 0.95,
            decay_every_epochs: 5,
            epochs: 60,
            batch_size: 8,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.decay_every_epochs == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "decay_every_epochs, epochs and batch_size must be positive",
            ));
        }
        self.adam.validate()?;
        self.loss.validate()
    }

    /// Reads any subset of the keys written by [`TrainConfig::to_kv`];
    /// absent keys keep their defaults.
    pub fn from_kv(r: &KvReader<'_>) -> Result<Self> {
        Self::from_kv_over(r, TrainConfig::default())
    }

    /// As [`TrainConfig::from_kv`], with absent keys taken from `d`.
    pub fn from_kv_over(r: &KvReader<'_>, d: TrainConfig) -> Result<Self> {
        let cfg = TrainConfig {
            initial_lr: r.get_or("initial_lr", d.initial_lr)?,
            lr_decay_factor: r.get_or("lr_decay_factor", d.lr_decay_factor)?,
            decay_every_epochs: r.get_or("decay_every_epochs", d.decay_every_epochs)?,
            epochs: r.get_or("epochs", d.epochs)?,
            batch_size: r.get_or("batch_size", d.batch_size)?,
            adam: AdamConfig {
                beta1: r.get_or("adam_beta1", d.adam.beta1)?,
                beta2: r.get_or("adam_beta2", d.adam.beta2)?,
                eps: r.get_or("adam_eps", d.adam.eps)?,
            },
            loss: LossConfig {
                lambda: r.get_or("lambda", d.loss.lambda)?,
                lambda_kl: r.get_or("lambda_kl", d.loss.lambda_kl)?,
                epsilon_dice: r.get_or("epsilon_dice", d.loss.epsilon_dice)?,
            },
            seed: r.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut f = KvFile::new();
        f.set("initial_lr", self.initial_lr);
        f.set("lr_decay_factor", self.lr_decay_factor);
        f.set("decay_every_epochs", self.decay_every_epochs);
        f.set("epochs", self.epochs);
        f.set("batch_size", self.batch_size);
        f.set("adam_beta1", self.adam.beta1);
        f.set("adam_beta2", self.adam.beta2);
        f.set("adam_eps", self.adam.eps);
        f.set("lambda", self.loss.lambda);
        f.set("lambda_kl", self.loss.lambda_kl);
        f.set("epsilon_dice", self.loss.epsilon_dice);
        f.set("seed", self.seed);
        f
    }
}

/// `initial_lr * decay_factor ^ floor(epoch / decay_every_epochs)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / cfg.decay_every_epochs.max(1)) as i32;
    cfg.initial_lr * cfg.lr_decay_factor.powi(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub train: LossBreakdown,
    pub validation: Option<LossBreakdown>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingRecord {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Everything except wall-clock time, for reproducibility checks.
    pub fn losses(&self) -> Vec<(usize, f64, LossBreakdown, Option<LossBreakdown>)> {
        self.epochs
            .iter()
            .map(|e| (e.epoch, e.lr, e.train, e.validation))
            .collect()
    }

    /// One `key = value` line per epoch and term. Timing is optional so
    /// that the text can be hashed across runs.
    pub fn to_kv(&self, timing: bool) -> String {
        let mut out = String::new();
        let terms = |b: &LossBreakdown| {
            format!(
                "dice={:.9e} rce={:.9e} kl={:.9e} edl={:.9e} total={:.9e}",
                b.dice, b.rce, b.kl, b.edl, b.total
            )
        };
        for e in &self.epochs {
            out.push_str(&format!("epoch.{}.lr = {:.9e}\n", e.epoch, e.lr));
            out.push_str(&format!("epoch.{}.train = {}\n", e.epoch, terms(&e.train)));
            if let Some(v) = &e.validation {
                out.push_str(&format!("epoch.{}.validation = {}\n", e.epoch, terms(v)));
            }
            if timing {
                out.push_str(&format!("epoch.{}.seconds = {:.3}\n", e.epoch, e.seconds));
            }
        }
        out
    }
}

/// Raw values of one channel of a parameter volume.
pub fn channel_values(volume: &Volume<f32>, channel: InputChannel) -> Result<&[f32]> {
    let c = channel.index();
    if c >= volume.channels() {
        return Err(Error::shape(format!(
            "channel {channel} needs {} input channels, volume has {}",
            c + 1,
            volume.channels()
        )));
    }
    Ok(volume.channel(c))
}

/// One channel mapped through `norm`.
pub fn normalize_channel(
    volume: &Volume<f32>,
    channel: InputChannel,
    norm: InputNorm,
) -> Result<Vec<f32>> {
    Ok(channel_values(volume, channel)?
        .iter()
        .map(|&v| norm.apply(v))
        .collect())
}

struct Prepared<'a> {
    dims: Dims,
    input: Vec<f32>,
    labels: &'a LabelMap,
}

impl Prepared<'_> {
    fn slice(&self, z: usize) -> (&[f32], &[u16]) {
        let n = self.dims.slice_len();
        (&self.input[z * n..(z + 1) * n], self.labels.axial_slice(z))
    }
}

fn prepare<'a>(
    set: &'a [(Volume<f32>, LabelMap)],
    channel: InputChannel,
    norm: InputNorm,
    config: &SubnetConfig,
    plane: Option<(usize, usize)>,
) -> Result<Vec<Prepared<'a>>> {
    set.iter()
        .map(|(v, lm)| {
            if v.dims() != lm.dims() {
                return Err(Error::shape(format!(
                    "volume {} and labelmap {} differ",
                    v.dims(),
                    lm.dims()
                )));
            }
            if lm.num_classes() != config.num_classes {
                return Err(Error::shape(format!(
                    "labelmap has {} classes, subnet expects {}",
                    lm.num_classes(),
                    config.num_classes
                )));
            }
            if let Some((nx, ny)) = plane {
                if (v.dims().nx, v.dims().ny) != (nx, ny) {
                    return Err(Error::shape(format!(
                        "volume {} does not share the {nx}x{ny} slice size",
                        v.dims()
                    )));
                }
            }
            Ok(Prepared {
                dims: v.dims(),
                input: normalize_channel(v, channel, norm)?,
                labels: lm,
            })
        })
        .collect()
}

/// Slices of every volume in a fresh random order, interleaved across
/// volumes.
fn round_robin(volumes: &[Prepared<'_>], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let perms: Vec<Vec<usize>> = volumes
        .iter()
        .map(|p| {
            let mut zs: Vec<usize> = (0..p.dims.nz).collect();
            zs.shuffle(rng);
            zs
        })
        .collect();
    let longest = perms.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::new();
    for i in 0..longest {
        for (v, perm) in perms.iter().enumerate() {
            if let Some(&z) = perm.get(i) {
                order.push((v, z));
            }
        }
    }
    order
}

fn evaluate(
    net: &SubnetParams,
    volumes: &[Prepared<'_>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut parts = Vec::new();
    for p in volumes {
        let zs: Vec<usize> = (0..p.dims.nz).collect();
        for chunk in zs.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&z| p.slice(z)).collect();
            parts.push(net.loss(&batch, p.dims.ny, p.dims.nx, &cfg.loss)?);
        }
    }
    Ok(LossBreakdown::mean(&parts))
}

/// Trains one subnetwork on a single input channel.
pub fn train(
    train_set: &[(Volume<f32>, LabelMap)],
    validation: &[(Volume<f32>, LabelMap)],
    channel: InputChannel,
    config: &SubnetConfig,
    cfg: &TrainConfig,
) -> Result<(SubnetParams, TrainingRecord)> {
    cfg.validate()?;
    config.validate()?;
    if config.input_channels != 1 {
        return Err(Error::config(
            "channel subnetworks take exactly one input channel",
        ));
    }
    let first = train_set
        .first()
        .ok_or_else(|| Error::EmptyDataset("no training volumes".into()))?;
    let plane = (first.0.dims().nx, first.0.dims().ny);
    let raw = train_set
        .iter()
        .map(|(v, _)| channel_values(v, channel))
        .collect::<Result<Vec<_>>>()?;
    let norm = InputNorm::fit(&raw)?;
    let volumes = prepare(train_set, channel, norm, config, Some(plane))?;
    let held_out = prepare(validation, channel, norm, config, Some(plane))?;
    let (h, w) = (plane.1, plane.0);

    let mut net = SubnetParams::init(
        config.clone(),
        SubnetId::new(channel.name()),
        first.1.names().to_vec(),
    )?
    .with_input_norm(norm)?;
    let mut adam = AdamState::new(net.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut record = TrainingRecord::default();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);
        let order = round_robin(&volumes, &mut rng);
        let mut parts = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&(v, z)| volumes[v].slice(z)).collect();
            let (loss, grad) = net.loss_and_gradient(&batch, h, w, &cfg.loss)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Domain(format!(
                    "non-finite loss or gradient in epoch {epoch}"
                )));
            }
            adam_step(net.params_mut(), &grad, &mut adam, lr, &cfg.adam)?;
            parts.push(loss);
        }
        let validation = if held_out.is_empty() {
            None
        } else {
            Some(evaluate(&net, &held_out, cfg)?)
        };
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train: LossBreakdown::mean(&parts),
            validation,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((net, record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubnetPrediction {
    pub evidence: EvidenceField,
    pub labels: LabelMap,
    pub uncertainty: Volume<f32>,
}

/// Slice-wise forward pass over every axial slice of `volume`.
pub fn predict_subnet(
    net: &SubnetParams,
    volume: &Volume<f32>,
    channel: InputChannel,
) -> Result<SubnetPrediction> {
    let dims = volume.dims();
    let input = normalize_channel(volume, channel, net.input_norm())?;
    let n = dims.slice_len();
    let classes = net.num_classes();
    let slices = (0..dims.nz)
        .into_par_iter()
        .map(|z| net.forward(&input[z * n..(z + 1) * n], dims.ny, dims.nx))
        .collect::<Result<Vec<_>>>()?;
    let voxels = dims.voxels();
    let mut data = vec![0f32; classes * voxels];
    for (z, e) in slices.iter().enumerate() {
        for c in 0..classes {
            data[c * voxels + z * n..c * voxels + (z + 1) * n]
                .copy_from_slice(&e[c * n..(c + 1) * n]);
        }
    }
    let evidence = EvidenceField::new(
        Volume::new(dims, classes, volume.voxel_size(), data)?,
        net.subnet_id().clone(),
    )?;
    let b = beliefs(&evidence)?;
    let argmax = b.labelmap(net.class_names().to_vec())?;
    let labels = LabelMap::with_voxel_size(
        dims,
        volume.voxel_size(),
        argmax.labels().to_vec(),
        argmax.names().to_vec(),
    )?;
    let uncertainty = b
        .uncertainty_volume()?
        .cast::<f32>()?
        .with_voxel_size(volume.voxel_size())?;
    Ok(SubnetPrediction {
        evidence,
        labels,
        uncertainty,
    })
}
