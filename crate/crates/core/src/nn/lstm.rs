//! Stacked bidirectional LSTM built from primitive graph ops, so
//! backpropagation through time falls out of the tape.

use rand::Rng;

use super::graph::{Graph, Var};
use super::layers::uniform;
use super::params::{LayerState, ParamId};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Weights of one direction of one layer. Gate order is input, forget,
/// cell, output.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub input_size: usize,
    pub hidden: usize,
    pub layers: Vec<[LstmDirection; 2]>,
}

impl BiLstm {
    /// All weights and biases uniform in `±1/√hidden`.
    pub fn new<T: Real, R: Rng>(
        state: &mut LayerState<T>,
        name: &str,
        input_size: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_layers == 0 || hidden == 0 {
            return Err(Error::Config(
                "LSTM needs at least one layer and one hidden unit".into(),
            ));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let in_size = if l == 0 { input_size } else { 2 * hidden };
            let mut dir = |suffix: &str| -> Result<LstmDirection> {
                let prefix = format!("{name}.l{l}.{suffix}");
                Ok(LstmDirection {
                    w_ih: state.add_param(format!("{prefix}.w_ih"), uniform(rng, vec![4 * hidden, in_size], bound))?,
                    w_hh: state.add_param(format!("{prefix}.w_hh"), uniform(rng, vec![4 * hidden, hidden], bound))?,
                    bias: state.add_param(format!("{prefix}.bias"), uniform(rng, vec![4 * hidden], bound))?,
                })
            };
            let fwd = dir("fwd")?;
            let bwd = dir("bwd")?;
            layers.push([fwd, bwd]);
        }
        Ok(Self {
            input_size,
            hidden,
            layers,
        })
    }

    /// `[S, B, F] -> [S, B, 2·hidden]`, zero initial state per call.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_size || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "LSTM expects [S>=1, B, {}], got {shape:?}",
                self.input_size
            )));
        }
        let mut h = x;
        for [fwd, bwd] in &self.layers {
            let a = self.direction(g, p, h, fwd, false)?;
            let b = self.direction(g, p, h, bwd, true)?;
            h = g.concat_last(&[a, b])?;
        }
        Ok(h)
    }

    fn direction<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, w: &LstmDirection, reverse: bool) -> Result<Var> {
        let steps = g.shape(x)[0];
        let hd = self.hidden;
        let projected = g.linear(x, p[w.w_ih.0], Some(p[w.bias.0]))?;
        let mut outputs: Vec<Option<Var>> = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let mut gates = g.index(projected, t)?;
            if let Some((h_prev, _)) = state {
                let rec = g.linear(h_prev, p[w.w_hh.0], None)?;
                gates = g.add(gates, rec)?;
            }
            let i_pre = g.slice_last(gates, 0, hd)?;
            let f_pre = g.slice_last(gates, hd, hd)?;
            let c_pre = g.slice_last(gates, 2 * hd, hd)?;
            let o_pre = g.slice_last(gates, 3 * hd, hd)?;
            let i = g.sigmoid(i_pre);
            let f = g.sigmoid(f_pre);
            let c_cand = g.tanh(c_pre);
            let o = g.sigmoid(o_pre);
            let mut c = g.mul(i, c_cand)?;
            if let Some((_, c_prev)) = state {
                let kept = g.mul(f, c_prev)?;
                c = g.add(kept, c)?;
            }
            let c_act = g.tanh(c);
            let h = g.mul(o, c_act)?;
            outputs[t] = Some(h);
            state = Some((h, c));
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step visited")).collect();
        g.stack(&outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(input: usize, hidden: usize, layers: usize, seed: u64) -> (LayerState<f64>, BiLstm) {
        let mut state = LayerState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = BiLstm::new(&mut state, "lstm", input, hidden, layers, &mut rng).unwrap();
        (state, lstm)
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let (mut state, lstm) = build(3, 4, 4, 0);
        state.parameters.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut g = Graph::new();
        let p = state.bind(&mut g);
        let x = g.constant(Tensor::from_f64(vec![2, 1, 3], &[1.0, -2.0, 0.5, 3.0, 0.1, -1.0]).unwrap());
        let y = lstm.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 8]);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_directions_are_independent_cells() {
        let (state, lstm) = build(2, 3, 1, 5);
        let input = Tensor::from_f64(vec![1, 1, 2], &[0.3, -0.7]).unwrap();
        let mut g = Graph::new();
        let p = state.bind(&mut g);
        let x = g.constant(input.clone());
        let y = lstm.forward(&mut g, &p, x).unwrap();
        let out = g.value(y).data().to_vec();

        // One step from zero state: h = σ(o)·tanh(σ(i)·tanh(g)).
        let cell = |dir: &LstmDirection| -> Vec<f64> {
            let w = state.parameters.get(dir.w_ih.0).data();
            let b = state.parameters.get(dir.bias.0).data();
            let pre: Vec<f64> = (0..12).map(|r| b[r] + w[r * 2] * 0.3 + w[r * 2 + 1] * -0.7).collect();
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            (0..3)
                .map(|k| sig(pre[9 + k]) * (sig(pre[k]) * pre[6 + k].tanh()).tanh())
                .collect()
        };
        let mut expected = cell(&lstm.layers[0][0]);
        expected.extend(cell(&lstm.layers[0][1]));
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_wrong_feature_size() {
        let (state, lstm) = build(3, 2, 1, 0);
        let mut g = Graph::new();
        let p = state.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![2, 1, 4]));
        assert!(matches!(lstm.forward(&mut g, &p, x), Err(Error::Shape(_))));
    }
}
