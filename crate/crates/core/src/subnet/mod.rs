//! Per-channel evidential subnetwork: a small slice-wise CNN with a
//! softplus evidence head, its Adam trainer and checkpoint format.

mod adam;
mod checkpoint;
mod net;
mod train;

use std::fmt;
use std::str::FromStr;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use net::{ConvNet, ForwardCache, Geometry, LayerShape, Scalar};
pub use train::{
    channel_values, lr_at_epoch, normalize_channel, predict_subnet, train, EpochRecord,
    SubnetPrediction, TrainConfig, TrainingRecord,
};

use crate::error::{Error, Result};

/// Trained network weights in storage precision.
pub type SubnetParams = ConvNet<f32>;

/// The five tensor-derived maps, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputChannel {
    Fa,
    Md,
    E1,
    E2,
    E3,
}

impl InputChannel {
    pub const ALL: [InputChannel; 5] = [
        InputChannel::Fa,
        InputChannel::Md,
        InputChannel::E1,
        InputChannel::E2,
        InputChannel::E3,
    ];

    /// Position of this map in a parameter volume.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            InputChannel::Fa => "fa",
            InputChannel::Md => "md",
            InputChannel::E1 => "e1",
            InputChannel::E2 => "e2",
            InputChannel::E3 => "e3",
        }
    }
}

impl fmt::Display for InputChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InputChannel::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown channel {s:?}, expected one of fa, md, e1, e2, e3"
                ))
            })
    }
}

/// Affine map `(v - mean) * scale` applied to a raw channel before it
/// enters a subnetwork. Fitted once on the training volumes, so a voxel's
/// input does not depend on what else its volume contains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: f64,
    pub scale: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm {
            mean: 0.0,
            scale: 1.0,
        }
    }
}

impl InputNorm {
    /// Mean and inverse standard deviation over every voxel of the given
    /// maps. A constant input keeps unit scale.
    pub fn fit(maps: &[&[f32]]) -> Result<Self> {
        let n: usize = maps.iter().map(|m| m.len()).sum();
        if n == 0 {
            return Err(Error::EmptyDataset(
                "no voxels to fit the input normalization".into(),
            ));
        }
        let nf = n as f64;
        let mean = maps
            .iter()
            .flat_map(|m| m.iter())
            .map(|&v| v as f64)
            .sum::<f64>()
            / nf;
        let var = maps
            .iter()
            .flat_map(|m| m.iter())
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / nf;
        let std = var.sqrt();
        let scale = if std > 1e-12 * mean.abs().max(f64::MIN_POSITIVE) {
            1.0 / std
        } else {
            1.0
        };
        Ok(InputNorm { mean, scale })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_finite() && self.scale.is_finite() && self.scale > 0.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "invalid input normalization {self:?}"
            )))
        }
    }

    pub fn apply(&self, v: f32) -> f32 {
        ((v as f64 - self.mean) * self.scale) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub out_channels: usize,
    /// Square kernel side; odd, padded to preserve the slice size.
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubnetConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl SubnetConfig {
    /// Default `[16, 16, N]` stack of 3x3 convolutions.
    pub fn new(num_classes: usize, seed: u64) -> Self {
        Self::with_hidden(num_classes, &[16, 16], seed)
    }

    pub fn with_hidden(num_classes: usize, hidden: &[usize], seed: u64) -> Self {
        let layers = hidden
            .iter()
            .copied()
            .chain(std::iter::once(num_classes))
            .map(|out_channels| LayerSpec {
                out_channels,
                kernel: 3,
            })
            .collect();
        SubnetConfig {
            input_channels: 1,
            num_classes,
            layers,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("subnet needs at least one input channel"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "subnet needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::config("subnet has no layers"))?;
        if last.out_channels != self.num_classes {
            return Err(Error::config(format!(
                "final layer has {} outputs for {} classes",
                last.out_channels, self.num_classes
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 {
                return Err(Error::config(format!("layer {i} has no output channels")));
            }
            if l.kernel % 2 == 0 {
                return Err(Error::config(format!(
                    "layer {i} kernel {} is not odd",
                    l.kernel
                )));
            }
        }
        Ok(())
    }

    /// Largest kernel radius, i.e. the padding width of activation planes.
    pub fn max_radius(&self) -> usize {
        self.layers.iter().map(|l| l.kernel / 2).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layers() {
        let c = SubnetConfig::new(6, 1);
        let outs: Vec<usize> = c.layers.iter().map(|l| l.out_channels).collect();
        assert_eq!(outs, [16, 16, 6]);
        assert!(c.validate().is_ok());
        assert_eq!(c.max_radius(), 1);
    }

    #[test]
    fn invalid_configs() {
        let mut c = SubnetConfig::new(3, 0);
        c.layers[2].out_channels = 4;
        assert!(c.validate().is_err());
        let mut c = SubnetConfig::new(3, 0);
        c.layers[0].kernel = 4;
        assert!(c.validate().is_err());
        assert!(SubnetConfig::new(1, 0).validate().is_err());
    }

    #[test]
    fn channel_names() {
        for c in InputChannel::ALL {
            assert_eq!(c.name().parse::<InputChannel>().unwrap(), c);
        }
        assert_eq!("FA".parse::<InputChannel>().unwrap(), InputChannel::Fa);
        assert!("t1".parse::<InputChannel>().is_err());
        assert_eq!(InputChannel::E3.index(), 4);
    }
}
