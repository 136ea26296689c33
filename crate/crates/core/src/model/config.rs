use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::conv_output_dim;
use crate::projection::PAIR_CHANNELS;

pub const CONV_LAYERS: usize = 6;
pub const LSTM_LAYERS: usize = 4;

/// Network hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Input channels followed by the output channels of the six conv layers.
    pub channels: [usize; CONV_LAYERS + 1],
    /// `(vertical, horizontal)` stride per conv layer.
    pub strides: [(usize, usize); CONV_LAYERS],
    pub kernel: usize,
    /// `(vertical zero, horizontal circular)` padding per conv layer.
    pub padding: (usize, usize),
    pub embed: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub bidirectional: bool,
    pub dropout: f64,
    pub seq_len: usize,
}

const DEFAULT_STRIDES: [(usize, usize); CONV_LAYERS] = [(2, 2), (1, 2), (2, 2), (1, 2), (2, 2), (1, 1)];

impl Default for ModelConfig {
    /// Full-size network for 64×900 images.
    fn default() -> Self {
        Self {
            height: 64,
            width: 900,
            channels: [PAIR_CHANNELS, 32, 64, 128, 128, 256, 256],
            strides: DEFAULT_STRIDES,
            kernel: 3,
            padding: (1, 1),
            embed: 1024,
            hidden: 512,
            lstm_layers: LSTM_LAYERS,
            bidirectional: true,
            dropout: 0.5,
            seq_len: 4,
        }
    }
}

impl ModelConfig {
    /// Small network on 16×64 images that trains in seconds.
    pub fn desk() -> Self {
        Self {
            height: 16,
            width: 64,
            channels: [PAIR_CHANNELS, 8, 16, 16, 32, 32, 32],
            embed: 32,
            hidden: 16,
            ..Self::default()
        }
    }

    /// Smallest network used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            height: 16,
            width: 64,
            channels: [PAIR_CHANNELS, 8, 8, 8, 8, 8, 8],
            embed: 8,
            hidden: 8,
            seq_len: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels[0] != PAIR_CHANNELS {
            return Err(Error::Config(format!(
                "model.channels[0] must be {PAIR_CHANNELS} (stacked frame pair), got {}",
                self.channels[0]
            )));
        }
        if self.channels.contains(&0) || self.kernel == 0 {
            return Err(Error::Config("model.channels and model.kernel must be positive".into()));
        }
        for (i, (sv, sh)) in self.strides.iter().enumerate() {
            let last = i + 1 == CONV_LAYERS;
            if *sv == 0 || (!last && *sh < 2) || (last && *sh != 1) {
                return Err(Error::Config(format!(
                    "model.strides: conv{} has stride ({sv}, {sh}); horizontal stride must exceed 1 \
                     for conv1-conv5 and equal 1 for conv6",
                    i + 1
                )));
            }
        }
        if self.lstm_layers != LSTM_LAYERS || !self.bidirectional {
            return Err(Error::Config(format!(
                "model needs a bidirectional LSTM with {LSTM_LAYERS} layers"
            )));
        }
        if self.embed == 0 || self.hidden == 0 {
            return Err(Error::Config("model.embed and model.hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} not in [0, 1)", self.dropout)));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("model.seq_len must be at least 1".into()));
        }
        layer_shapes(self).map(|_| ())
    }

    /// Length of the flattened CNN feature vector.
    pub fn flat_features(&self) -> Result<usize> {
        let shapes = layer_shapes(self)?;
        Ok(shapes.last().expect("six conv layers").numel())
    }
}

/// Per-image activation shape after a pipeline stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Shapes after the width-halving pool and after each conv layer.
pub fn layer_shapes(cfg: &ModelConfig) -> Result<Vec<LayerShape>> {
    let pooled = cfg.width / 2;
    if cfg.height == 0 || pooled == 0 {
        return Err(Error::Config(format!(
            "input {}x{} collapses to zero at maxpool",
            cfg.height, cfg.width
        )));
    }
    let mut out = vec![LayerShape {
        name: "maxpool".into(),
        channels: cfg.channels[0],
        height: cfg.height,
        width: pooled,
    }];
    let (pv, ph) = cfg.padding;
    for i in 0..CONV_LAYERS {
        let prev = out.last().unwrap();
        let (sv, sh) = cfg.strides[i];
        let name = format!("conv{}", i + 1);
        let h = conv_output_dim(prev.height, cfg.kernel, sv, pv);
        let w = conv_output_dim(prev.width, cfg.kernel, sh, ph);
        let (Some(h), Some(w)) = (h, w) else {
            return Err(Error::Config(format!(
                "spatial size {}x{} collapses to zero at {name}",
                prev.height, prev.width
            )));
        };
        if ph > prev.width {
            return Err(Error::Config(format!(
                "{name}: circular padding {ph} exceeds input width {}",
                prev.width
            )));
        }
        out.push(LayerShape {
            name,
            channels: cfg.channels[i + 1],
            height: h,
            width: w,
        });
    }
    Ok(out)
}

/// Which steps of a window contribute to the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    AllSteps,
    LastStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub rot_weight: f64,
    pub seed: u64,
    /// Epochs between checkpoints; 0 writes only the initial and final ones.
    pub checkpoint_interval: usize,
    pub loss_reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.0005,
            epochs: 400,
            rot_weight: 100.0,
            seed: 0,
            checkpoint_interval: 10,
            loss_reduction: LossReduction::AllSteps,
        }
    }
}

impl TrainConfig {
    /// Settings for fitting a handful of synthetic windows at desk scale.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 0.01,
            epochs: 500,
            checkpoint_interval: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(
                "train.learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(self.rot_weight.is_finite() && self.rot_weight > 0.0) {
            return Err(Error::Config("train.rot_weight must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let shapes = layer_shapes(&ModelConfig::default()).unwrap();
        assert_eq!((shapes[0].height, shapes[0].width), (64, 450));
        let last = shapes.last().unwrap();
        assert_eq!((last.channels, last.height, last.width), (256, 8, 15));
        assert_eq!(ModelConfig::default().flat_features().unwrap(), 30720);
    }

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::default(), ModelConfig::desk(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
        }
        TrainConfig::default().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn stride_rule_is_enforced() {
        let mut cfg = ModelConfig::default();
        cfg.strides[2] = (2, 1);
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("conv3")));
        let mut cfg = ModelConfig::default();
        cfg.strides[5] = (1, 2);
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("conv6")));
    }

    #[test]
    fn collapse_names_the_layer() {
        let cfg = ModelConfig {
            height: 2,
            width: 8,
            padding: (0, 0),
            ..ModelConfig::default()
        };
        let err = layer_shapes(&cfg).unwrap_err();
        assert!(err.to_string().contains("conv1"), "{err}");
    }
}
