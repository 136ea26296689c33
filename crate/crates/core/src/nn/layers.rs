//! Parameterized layers. Each layer owns ids into a [`LayerState`] and
//! builds its computation on a [`Graph`] from the bound parameter vars.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{BufferId, LayerState, Mode, ParamId, TensorStore};
use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

pub(crate) fn uniform<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| lit::<T>(if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2d {
    /// He-uniform weights (`±√(6/fan_in)`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        state: &mut LayerState<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
        let weight = state.add_param(
            format!("{name}.weight"),
            uniform(
                rng,
                vec![out_channels, in_channels, kernel.0, kernel.1],
                (6.0 / fan_in).sqrt(),
            ),
        )?;
        let bias = if with_bias {
            Some(state.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_channels]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p[self.weight.0],
            self.bias.map(|b| p[b.0]),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(state: &mut LayerState<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: state.add_param(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()))?,
            beta: state.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels]))?,
            running_mean: state.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels]))?,
            running_var: state.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one()))?,
        })
    }

    /// Training mode normalizes with batch statistics and folds them into
    /// the running averages; inference mode uses the running averages.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        buffers: &mut TensorStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (gamma, beta) = (p[self.gamma.0], p[self.beta.0]);
        match mode {
            Mode::Training => {
                let (y, stats) = g.batchnorm2d_train(x, gamma, beta, BATCHNORM_EPS)?;
                let m: T = lit(BATCHNORM_MOMENTUM);
                let keep = T::one() - m;
                for (buf, batch) in [
                    (self.running_mean, &stats.mean),
                    (self.running_var, &stats.var_unbiased),
                ] {
                    for (r, b) in buffers.get_mut(buf.0).data_mut().iter_mut().zip(batch) {
                        *r = keep * *r + m * *b;
                    }
                }
                Ok(y)
            }
            Mode::Inference => {
                let mean = buffers.get(self.running_mean.0).data().to_vec();
                let var = buffers.get(self.running_var.0).data().to_vec();
                g.batchnorm2d_eval(x, gamma, beta, &mean, &var, BATCHNORM_EPS)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±√(3/fan_in)` weights and `±1/√fan_in` bias.
    pub fn new<T: Real, R: Rng>(
        state: &mut LayerState<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_features as f64;
        let weight = state.add_param(
            format!("{name}.weight"),
            uniform(rng, vec![out_features, in_features], (3.0 / fan_in).sqrt()),
        )?;
        let bias = state.add_param(
            format!("{name}.bias"),
            uniform(rng, vec![out_features], 1.0 / fan_in.sqrt()),
        )?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.weight.0], Some(p[self.bias.0]))
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-p)` during training and
/// inference is the identity.
pub fn dropout<T: Real, R: Rng>(g: &mut Graph<T>, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
    }
    if mode == Mode::Inference || p == 0.0 {
        return Ok(x);
    }
    let scale: T = lit(1.0 / (1.0 - p));
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
        .collect();
    g.dropout_mask(x, mask)
}
