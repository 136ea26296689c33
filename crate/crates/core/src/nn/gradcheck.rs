//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{GradFault, Graph, Var};
use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::lstm::BiLstm;
use super::params::{LayerState, Mode};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely: with a relative
/// threshold of 1e-4 they must agree to 1e-9, which is the roundoff level
/// of 64-bit central differences on the losses checked here.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// Step, denominator floor and optional gradient corruption of a check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    pub floor: f64,
    pub fault: Option<GradFault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: RELATIVE_FLOOR,
            fault: None,
        }
    }
}

impl CheckOptions {
    pub fn with_fault(fault: Option<GradFault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }
}

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], fault: Option<GradFault>) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Maximum relative error between analytic and central-difference
/// gradients over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = CheckOptions {
        step,
        ..CheckOptions::default()
    };
    grad_check_report(f, inputs, &opts).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(f: F, inputs: &[Tensor<f64>], opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let step = opts.step;
    let (g, vars, out) = evaluate(&f, inputs, opts.fault)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.numel()))
        .collect();
    drop(g);

    let scalar = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, out) = evaluate(&f, perturbed, None)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = scalar(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = scalar(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i][j];
            let err = relative_error(a, numeric, opts.floor);
            report.coordinates += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report = GradCheckReport {
                    max_rel_error: err,
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    coordinates: report.coordinates,
                };
            }
        }
    }
    Ok(report)
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

fn coeffs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Layer-level operations covered by [`check_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckedOp {
    Conv2d,
    BatchNorm2d,
    MaxPool2d,
    BiLstm,
    Linear,
    Relu,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 6] = [
        CheckedOp::Conv2d,
        CheckedOp::BatchNorm2d,
        CheckedOp::MaxPool2d,
        CheckedOp::BiLstm,
        CheckedOp::Linear,
        CheckedOp::Relu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedOp::Conv2d => "conv2d_circular",
            CheckedOp::BatchNorm2d => "batchnorm2d",
            CheckedOp::MaxPool2d => "maxpool2d",
            CheckedOp::BiLstm => "bilstm",
            CheckedOp::Linear => "linear",
            CheckedOp::Relu => "relu",
        }
    }

    pub fn graph_kind(self) -> super::graph::OpKind {
        use super::graph::OpKind;
        match self {
            CheckedOp::Conv2d => OpKind::Conv2d,
            CheckedOp::BatchNorm2d => OpKind::BatchNorm2d,
            CheckedOp::MaxPool2d => OpKind::MaxPool2d,
            // Every LSTM gate product flows through elementwise multiplication.
            CheckedOp::BiLstm => OpKind::Mul,
            CheckedOp::Linear => OpKind::Linear,
            CheckedOp::Relu => OpKind::Relu,
        }
    }
}

/// Runs the gradient check of one operation on a randomized small problem
/// drawn from `seed`. The input and all parameters are checked.
pub fn check_op(op: CheckedOp, seed: u64, fault: Option<GradFault>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let opts = CheckOptions::with_fault(fault);
    match op {
        CheckedOp::Conv2d => {
            let n = rng.gen_range(1..=2);
            let c = rng.gen_range(1..=3);
            let o = rng.gen_range(1..=3);
            let h = rng.gen_range(3..=5);
            let w = rng.gen_range(3..=7);
            let stride = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let kernel = if rng.gen_bool(0.5) { (3, 3) } else { (1, 3) };
            let padding = (kernel.0 / 2, 1);
            let mut state = LayerState::new();
            let conv = Conv2d::new(&mut state, "conv", c, o, kernel, stride, padding, true, &mut rng)?;
            for t in state.parameters.tensors_mut() {
                *t = random_tensor(&mut rng, t.shape().to_vec(), 1.0);
            }
            let x = random_tensor(&mut rng, vec![n, c, h, w], 1.0);
            let out_len = {
                let mut g = Graph::new();
                let p = state.bind(&mut g);
                let xv = g.constant(x.clone());
                let y = conv.forward(&mut g, &p, xv)?;
                g.value(y).numel()
            };
            let k = coeffs(&mut rng, out_len);
            let mut inputs = vec![x];
            inputs.extend(state.parameters.tensors().cloned());
            grad_check_report(
                |g, v| {
                    let y = conv.forward(g, &v[1..], v[0])?;
                    g.dot_const(y, k.clone())
                },
                &inputs,
                &opts,
            )
        }
        CheckedOp::BatchNorm2d => {
            let shape = if seed == 0 {
                vec![2, 3, 4, 4]
            } else {
                vec![
                    rng.gen_range(1..=3),
                    rng.gen_range(1..=3),
                    rng.gen_range(2..=4),
                    rng.gen_range(1..=4),
                ]
            };
            let c = shape[1];
            let mut state = LayerState::new();
            let bn = BatchNorm2d::new(&mut state, "bn", c)?;
            for t in state.parameters.tensors_mut() {
                *t = random_tensor(&mut rng, t.shape().to_vec(), 1.5);
            }
            let x = random_tensor(&mut rng, shape.clone(), 2.0);
            let k = coeffs(&mut rng, x.numel());
            let buffers = state.buffers.clone();
            let mut inputs = vec![x];
            inputs.extend(state.parameters.tensors().cloned());
            grad_check_report(
                |g, v| {
                    let mut buf = buffers.clone();
                    let y = bn.forward(g, &v[1..], &mut buf, v[0], Mode::Training)?;
                    g.dot_const(y, k.clone())
                },
                &inputs,
                &opts,
            )
        }
        CheckedOp::MaxPool2d => {
            let n = rng.gen_range(1..=2);
            let c = rng.gen_range(1..=2);
            let h = rng.gen_range(1..=3);
            let w = 2 * rng.gen_range(1..=4);
            let numel = n * c * h * w;
            // Well-separated distinct values keep every window's argmax stable
            // under the finite-difference step.
            let mut values: Vec<f64> = (0..numel).map(|i| i as f64 * 0.05).collect();
            for i in (1..numel).rev() {
                values.swap(i, rng.gen_range(0..=i));
            }
            let values = values.iter().map(|v| v + rng.gen_range(0.0..0.01)).collect();
            let x = Tensor::new(vec![n, c, h, w], values)?;
            let k = coeffs(&mut rng, numel / 2);
            grad_check_report(
                |g, v| {
                    let y = g.maxpool2d(v[0], (1, 2), (1, 2))?;
                    g.dot_const(y, k.clone())
                },
                &[x],
                &opts,
            )
        }
        CheckedOp::BiLstm => {
            let (steps, batch, features, hidden, layers) = (3, 2, 4, 3, 2);
            let mut state = LayerState::new();
            let lstm = BiLstm::new(&mut state, "lstm", features, hidden, layers, &mut rng)?;
            let x = random_tensor(&mut rng, vec![steps, batch, features], 1.0);
            let k = coeffs(&mut rng, steps * batch * 2 * hidden);
            let mut inputs = vec![x];
            inputs.extend(state.parameters.tensors().cloned());
            grad_check_report(
                |g, v| {
                    let y = lstm.forward(g, &v[1..], v[0])?;
                    g.dot_const(y, k.clone())
                },
                &inputs,
                &opts,
            )
        }
        CheckedOp::Linear => {
            let (rows, fin, fout) = if seed == 0 {
                (2, 5, 3)
            } else {
                (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=4))
            };
            let mut state = LayerState::new();
            let lin = Linear::new(&mut state, "fc", fin, fout, &mut rng)?;
            let x = random_tensor(&mut rng, vec![rows, fin], 1.0);
            let k = coeffs(&mut rng, rows * fout);
            let mut inputs = vec![x];
            inputs.extend(state.parameters.tensors().cloned());
            grad_check_report(
                |g, v| {
                    let y = lin.forward(g, &v[1..], v[0])?;
                    g.dot_const(y, k.clone())
                },
                &inputs,
                &opts,
            )
        }
        CheckedOp::Relu => {
            let n = rng.gen_range(1..=12);
            let data = (0..n)
                .map(|_| {
                    let mag = rng.gen_range(0.1..2.0);
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let x = Tensor::new(vec![n], data)?;
            let k = coeffs(&mut rng, n);
            grad_check_report(
                |g, v| {
                    let y = g.relu(v[0]);
                    g.dot_const(y, k.clone())
                },
                &[x],
                &opts,
            )
        }
    }
}
