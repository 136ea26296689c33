use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{layer_shapes, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, BUFFER_PREFIX};
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{dropout, BatchNorm2d, Conv2d, Linear};
use crate::nn::lstm::BiLstm;
use crate::nn::params::{LayerState, Mode, TensorStore};
use crate::nn::tensor::{Real, Tensor};

pub const PARAM_PREFIX: &str = "param/";

/// Layer wiring of the odometry network. Parameters live separately in a
/// [`LayerState`] so the same wiring drives `f32` training and `f64` checks.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    convs: Vec<(Conv2d, BatchNorm2d)>,
    embed: Linear,
    lstm: BiLstm,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub state: LayerState<T>,
}

/// Builds the network with parameters drawn from `seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let shapes = layer_shapes(cfg)?;
    for s in &shapes {
        debug!("{:>8}: {}x{}x{}", s.name, s.channels, s.height, s.width);
    }
    let flat = shapes.last().expect("conv layers").numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = LayerState::new();
    let k = (cfg.kernel, cfg.kernel);
    let mut convs = Vec::with_capacity(cfg.strides.len());
    for (i, stride) in cfg.strides.iter().enumerate() {
        // Batch norm removes any per-channel offset, so the conv needs no bias.
        let conv = Conv2d::new(
            &mut state,
            &format!("conv{}", i + 1),
            cfg.channels[i],
            cfg.channels[i + 1],
            k,
            *stride,
            cfg.padding,
            false,
            &mut rng,
        )?;
        let bn = BatchNorm2d::new(&mut state, &format!("bn{}", i + 1), cfg.channels[i + 1])?;
        convs.push((conv, bn));
    }
    let embed = Linear::new(&mut state, "embed", flat, cfg.embed, &mut rng)?;
    let lstm = BiLstm::new(&mut state, "lstm", cfg.embed, cfg.hidden, cfg.lstm_layers, &mut rng)?;
    let head = Linear::new(&mut state, "head", 2 * cfg.hidden, 6, &mut rng)?;
    let model = Model {
        net: Network {
            config: cfg.clone(),
            convs,
            embed,
            lstm,
            head,
        },
        state,
    };
    info!(
        "model: {} parameters, flattened CNN features {flat}",
        model.parameter_count()
    );
    Ok(model)
}

impl Network {
    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let c = &self.config;
        if shape.len() != 5
            || shape[2] != c.channels[0]
            || shape[3] != c.height
            || shape[4] != c.width
            || shape[0] == 0
            || shape[1] == 0
        {
            return Err(Error::Shape(format!(
                "network expects [B, S, {}, {}, {}], got {shape:?}",
                c.channels[0], c.height, c.width
            )));
        }
        Ok((shape[0], shape[1]))
    }

    /// CNN stage on `[N, 10, H, W]` images, returning the last conv
    /// activation `[N, C, h, w]`.
    pub fn conv_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        buffers: &mut TensorStore<T>,
        images: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut x = g.maxpool2d(images, (1, 2), (1, 2))?;
        g.ensure_finite(x, "maxpool")?;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            let y = conv.forward(g, p, x)?;
            let y = bn.forward(g, p, buffers, y, mode)?;
            x = g.relu(y);
            g.ensure_finite(x, &format!("conv{}", i + 1))?;
        }
        Ok(x)
    }

    /// `[B, S, 10, H, W] -> [B, S, 6]`. The CNN is shared across steps.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real, R: Rng>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        buffers: &mut TensorStore<T>,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (b, s) = self.check_input(g.shape(input))?;
        let c = &self.config;
        let images = g.reshape(input, vec![b * s, c.channels[0], c.height, c.width])?;
        let features = self.conv_features(g, p, buffers, images, mode)?;
        let flat = g.value(features).numel() / (b * s);
        let flat = g.reshape(features, vec![b, s, flat])?;
        let embedded = self.embed.forward(g, p, flat)?;
        g.ensure_finite(embedded, "embed")?;
        let time_major = g.swap_axes01(embedded)?;
        let hidden = self.lstm.forward(g, p, time_major)?;
        g.ensure_finite(hidden, "lstm")?;
        let hidden = dropout(g, hidden, c.dropout, mode, rng)?;
        let out = self.head.forward(g, p, hidden)?;
        g.ensure_finite(out, "head")?;
        g.swap_axes01(out)
    }

    pub fn head_ids(&self) -> (usize, usize) {
        (self.head.weight.0, self.head.bias.0)
    }
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn parameter_count(&self) -> usize {
        self.state.parameters.numel()
    }

    /// Runs the network without recording gradients. Training mode updates
    /// the batch-norm running statistics.
    pub fn predict<R: Rng>(&mut self, input: Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.state.bind(&mut g);
        let x = g.constant(input);
        let y = self.net.forward(&mut g, &p, &mut self.state.buffers, x, mode, rng)?;
        Ok(g.value(y).clone())
    }

    /// Inference-mode prediction of the last step of every window, `[B, 6]`.
    pub fn predict_last(&mut self, input: Tensor<T>) -> Result<Vec<[f64; 6]>> {
        let (b, s) = self.net.check_input(input.shape())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.predict(input, Mode::Inference, &mut rng)?.to_f64_vec();
        Ok((0..b)
            .map(|i| {
                let o = (i * s + s - 1) * 6;
                y[o..o + 6].try_into().unwrap()
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_store(PARAM_PREFIX, &self.state.parameters);
        ck.push_store(BUFFER_PREFIX, &self.state.buffers);
        ck
    }

    /// Loads parameters and buffers, reporting every shape mismatch.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut params = self.state.parameters.clone();
        let mut buffers = self.state.buffers.clone();
        let a = ck.load_store(PARAM_PREFIX, &mut params);
        let b = ck.load_store(BUFFER_PREFIX, &mut buffers);
        match (a, b) {
            (Ok(()), Ok(())) => {
                self.state.parameters = params;
                self.state.buffers = buffers;
                Ok(())
            }
            (Err(e), Ok(())) | (Ok(()), Err(e)) => Err(e),
            (Err(Error::Shape(x)), Err(Error::Shape(y))) => Err(Error::Shape(format!("{x}; {y}"))),
            (Err(e), Err(_)) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::layer_shapes;

    fn random_input(cfg: &ModelConfig, b: usize, s: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * s * cfg.channels[0] * cfg.height * cfg.width;
        Tensor::new(
            vec![b, s, cfg.channels[0], cfg.height, cfg.width],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_window_output_shape() {
        let cfg = ModelConfig {
            seq_len: 1,
            ..ModelConfig::desk()
        };
        let mut m = build_model::<f64>(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = m
            .predict(random_input(&cfg, 1, 1, 2), Mode::Inference, &mut rng)
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 6]);
        assert!(y.all_finite());
    }

    #[test]
    fn training_mode_returns_every_step() {
        let cfg = ModelConfig::desk();
        let mut m = build_model::<f32>(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = m
            .predict(random_input(&cfg, 2, 4, 5).cast(), Mode::Training, &mut rng)
            .unwrap();
        assert_eq!(y.shape(), &[2, 4, 6]);
        assert!(y.all_finite());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::desk();
        let a = build_model::<f32>(&cfg, 9).unwrap();
        let b = build_model::<f32>(&cfg, 9).unwrap();
        let c = build_model::<f32>(&cfg, 10).unwrap();
        assert_eq!(a.state, b.state);
        assert_ne!(a.state, c.state);
    }

    #[test]
    fn zero_head_outputs_bias() {
        let cfg = ModelConfig::desk();
        let mut m = build_model::<f64>(&cfg, 4).unwrap();
        let (w, b) = m.net.head_ids();
        m.state.parameters.get_mut(w).data_mut().fill(0.0);
        let bias = [0.1, -0.2, 0.3, -0.4, 0.5, -0.6];
        m.state.parameters.get_mut(b).data_mut().copy_from_slice(&bias);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [Mode::Training, Mode::Inference] {
            let y = m.predict(random_input(&cfg, 2, 4, 6), mode, &mut rng).unwrap();
            for chunk in y.data().chunks(6) {
                assert_eq!(chunk, &bias);
            }
        }
    }

    #[test]
    fn duplicates_agree_in_inference() {
        let cfg = ModelConfig::desk();
        let mut m = build_model::<f64>(&cfg, 4).unwrap();
        let one = random_input(&cfg, 1, 4, 8);
        let mut twice = one.data().to_vec();
        twice.extend_from_slice(one.data());
        let mut shape = one.shape().to_vec();
        shape[0] = 2;
        let y = m.predict_last(Tensor::new(shape, twice).unwrap()).unwrap();
        assert_eq!(y[0], y[1]);
        let alone = m.predict_last(one).unwrap();
        assert_eq!(alone[0], y[0]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = ModelConfig::desk();
        let mut m = build_model::<f64>(&cfg, 4).unwrap();
        let bad = Tensor::zeros(vec![1, 4, 10, 16, 32]);
        assert!(matches!(m.predict_last(bad), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_features_match_shape_inference() {
        let cfg = ModelConfig::desk();
        let mut m = build_model::<f64>(&cfg, 4).unwrap();
        let x = random_input(&cfg, 1, 2, 1).reshaped(vec![2, 10, 16, 64]).unwrap();
        let mut g = Graph::new();
        let p = m.state.bind(&mut g);
        let xv = g.constant(x);
        let f = m
            .net
            .conv_features(&mut g, &p, &mut m.state.buffers, xv, Mode::Inference)
            .unwrap();
        let last = layer_shapes(&cfg).unwrap().pop().unwrap();
        assert_eq!(g.shape(f), &[2, last.channels, last.height, last.width]);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = ModelConfig::desk();
        let a = build_model::<f32>(&cfg, 1).unwrap();
        let mut b = build_model::<f32>(&cfg, 2).unwrap();
        b.load_checkpoint(&a.to_checkpoint()).unwrap();
        assert_eq!(a.state, b.state);

        let other = ModelConfig {
            hidden: 8,
            ..ModelConfig::desk()
        };
        let mut c = build_model::<f32>(&other, 1).unwrap();
        let err = c.load_checkpoint(&a.to_checkpoint()).unwrap_err().to_string();
        assert!(
            err.contains("lstm.l0.fwd.w_hh: expected [32, 8], found [64, 16]"),
            "{err}"
        );
    }
}
