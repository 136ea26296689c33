//! Gradient-check suite over every differentiable operation of the network
//! and the tiny end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LossReduction, ModelConfig};
use super::loss::weighted_mse_loss;
use super::network::build_model;
use crate::error::Result;
use crate::nn::gradcheck::{check_op, grad_check_report, random_tensor, CheckOptions, CheckedOp, GradCheckReport};
use crate::nn::graph::{GradFault, OpKind};
use crate::nn::params::Mode;
use crate::nn::tensor::Tensor;

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
pub const SUITE_SEEDS: u64 = 20;
/// Finite-difference step of the end-to-end check.
pub const END_TO_END_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SuiteCheck {
    Op(CheckedOp),
    WeightedLoss,
    EndToEnd,
}

impl SuiteCheck {
    pub fn all() -> Vec<SuiteCheck> {
        let mut v: Vec<SuiteCheck> = CheckedOp::ALL.iter().map(|o| SuiteCheck::Op(*o)).collect();
        v.push(SuiteCheck::WeightedLoss);
        v.push(SuiteCheck::EndToEnd);
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            SuiteCheck::Op(op) => op.name(),
            SuiteCheck::WeightedLoss => "weighted_mse_loss",
            SuiteCheck::EndToEnd => "end_to_end_tiny",
        }
    }

    pub fn from_name(name: &str) -> Option<SuiteCheck> {
        SuiteCheck::all().into_iter().find(|c| c.name() == name)
    }

    /// Graph operation whose backward pass a fault for this check corrupts.
    pub fn fault_kind(self) -> OpKind {
        match self {
            SuiteCheck::Op(op) => op.graph_kind(),
            SuiteCheck::WeightedLoss => OpKind::SquaredError,
            SuiteCheck::EndToEnd => OpKind::Linear,
        }
    }

    pub fn run(self, seed: u64, fault: Option<GradFault>) -> Result<GradCheckReport> {
        match self {
            SuiteCheck::Op(op) => check_op(op, seed, fault),
            SuiteCheck::WeightedLoss => check_weighted_loss(seed, fault),
            SuiteCheck::EndToEnd => check_end_to_end(seed, fault),
        }
    }
}

/// Loss gradient with respect to a random `[B, S, 6]` prediction.
pub fn check_weighted_loss(seed: u64, fault: Option<GradFault>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let b = rng.gen_range(1..=3);
    let s = rng.gen_range(1..=4);
    let reduction = if rng.gen_bool(0.5) {
        LossReduction::AllSteps
    } else {
        LossReduction::LastStep
    };
    let pred = random_tensor(&mut rng, vec![b, s, 6], 1.0);
    let target: Vec<f64> = (0..b * s * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    grad_check_report(
        |g, v| weighted_mse_loss(g, v[0], &target, 100.0, reduction),
        &[pred],
        // The loss is quadratic in the prediction, so central differences
        // are exact at any step; a large one keeps roundoff negligible.
        &CheckOptions {
            step: 1e-3,
            ..CheckOptions::with_fault(fault)
        },
    )
}

/// Weighted loss of the tiny network in training mode with respect to every
/// parameter. The dropout mask is fixed per seed.
pub fn check_end_to_end(seed: u64, fault: Option<GradFault>) -> Result<GradCheckReport> {
    check_end_to_end_with(
        seed,
        &CheckOptions {
            step: END_TO_END_STEP,
            fault,
            ..CheckOptions::default()
        },
    )
}

pub fn check_end_to_end_with(seed: u64, opts: &CheckOptions) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let model = build_model::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc2b2_ae35);
    let (b, s) = (1, cfg.seq_len);
    let n = b * s * cfg.channels[0] * cfg.height * cfg.width;
    let input = Tensor::new(
        vec![b, s, cfg.channels[0], cfg.height, cfg.width],
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let target: Vec<f64> = (0..b * s * 6).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let dropout_seed: u64 = rng.gen();
    let params: Vec<Tensor<f64>> = model.state.parameters.tensors().cloned().collect();
    let buffers = model.state.buffers.clone();
    let net = model.net;
    grad_check_report(
        |g, v| {
            let mut buf = buffers.clone();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let x = g.constant(input.clone());
            let pred = net.forward(g, v, &mut buf, x, Mode::Training, &mut drop_rng)?;
            weighted_mse_loss(g, pred, &target, 100.0, LossReduction::AllSteps)
        },
        &params,
        opts,
    )
}

/// Worst result of one check across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckSummary {
    pub check: SuiteCheck,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub failing_seeds: Vec<u64>,
    pub coordinates: usize,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.failing_seeds.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub threshold: f64,
    pub checks: Vec<CheckSummary>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckSummary::passed)
    }
}

pub fn run_check(check: SuiteCheck, seeds: u64, fault: Option<GradFault>) -> Result<CheckSummary> {
    let mut summary = CheckSummary {
        check,
        seeds,
        max_rel_error: 0.0,
        worst_seed: 0,
        failing_seeds: Vec::new(),
        coordinates: 0,
    };
    for seed in 0..seeds {
        let r = check.run(seed, fault)?;
        summary.coordinates += r.coordinates;
        if !(r.max_rel_error < GRADCHECK_THRESHOLD) {
            summary.failing_seeds.push(seed);
        }
        if r.max_rel_error > summary.max_rel_error || r.max_rel_error.is_nan() {
            summary.max_rel_error = r.max_rel_error;
            summary.worst_seed = seed;
        }
    }
    Ok(summary)
}

/// Runs every check over `seeds` seeds.
pub fn run_suite(seeds: u64, fault: Option<GradFault>) -> Result<SuiteReport> {
    let checks = SuiteCheck::all()
        .into_iter()
        .map(|c| run_check(c, seeds, fault))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        threshold: GRADCHECK_THRESHOLD,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let all = SuiteCheck::all();
        for c in &all {
            assert_eq!(SuiteCheck::from_name(c.name()), Some(*c));
        }
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn loss_check_passes_and_detects_faults() {
        for seed in 0..5 {
            assert!(check_weighted_loss(seed, None).unwrap().max_rel_error < GRADCHECK_THRESHOLD);
        }
        let fault = GradFault {
            kind: OpKind::SquaredError,
            scale: 1.01,
        };
        assert!(check_weighted_loss(0, Some(fault)).unwrap().max_rel_error > 1e-3);
    }
}
