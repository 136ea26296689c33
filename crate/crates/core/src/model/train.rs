use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TrainConfig};
use super::loss::{loss_parts, weighted_mse_loss};
use super::network::{build_model, Model};
use super::samples::{batch_inputs, batch_targets, SequenceSample};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, META_PREFIX, OPTIMIZER_PREFIX};
use crate::nn::graph::Graph;
use crate::nn::optim::Adagrad;
use crate::nn::params::{Mode, TensorStore};
use crate::nn::tensor::Tensor;

pub const CHECKPOINT_EXTENSION: &str = "lrck";
pub const LATEST_CHECKPOINT: &str = "latest.lrck";

/// Per-epoch training statistics, averaged over samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub translation_loss: f64,
    pub rotation_loss: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,translation_loss,rotation_loss,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.3}",
            self.epoch, self.mean_loss, self.translation_loss, self.rotation_loss, self.wall_seconds
        )
    }
}

/// SplitMix64 finalizer over the combined inputs. Every epoch and batch
/// draws from its own stream, so a resumed run replays the same randomness.
pub fn stream_seed(seed: u64, epoch: u64, batch: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ batch.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Model, optimizer state and the number of completed epochs.
#[derive(Clone, Debug)]
pub struct TrainSession {
    pub model: Model<f32>,
    pub optimizer: Adagrad<f32>,
    pub epoch: usize,
}

impl TrainSession {
    pub fn new(model: Model<f32>, cfg: &TrainConfig) -> Self {
        let optimizer = Adagrad::new(&model.state.parameters, cfg.learning_rate);
        Self {
            model,
            optimizer,
            epoch: 0,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let params = &self.model.state.parameters;
        for (i, acc) in self.optimizer.accumulators.iter().enumerate() {
            let t = Tensor::new(params.get(i).shape().to_vec(), acc.clone()).expect("accumulator shape");
            ck.push(format!("{OPTIMIZER_PREFIX}{}", params.name(i)), &t);
        }
        ck.push(format!("{META_PREFIX}epoch"), &Tensor::scalar(self.epoch as f64));
        ck
    }

    /// Rebuilds a session from a checkpoint written by [`Self::checkpoint`].
    pub fn resume(model_cfg: &ModelConfig, cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = build_model::<f32>(model_cfg, 0)?;
        model.load_checkpoint(ck)?;
        let mut accumulators = TensorStore::new();
        for (name, t) in model.state.parameters.iter() {
            accumulators.insert(name, Tensor::<f32>::zeros(t.shape().to_vec()))?;
        }
        ck.load_store(OPTIMIZER_PREFIX, &mut accumulators)?;
        let epoch = ck
            .get(&format!("{META_PREFIX}epoch"))
            .map(|r| r.to_tensor::<f64>().data()[0])
            .ok_or_else(|| Error::Config("checkpoint has no epoch counter".into()))?;
        let mut optimizer = Adagrad::new(&model.state.parameters, cfg.learning_rate);
        optimizer.accumulators = accumulators.tensors().map(|t| t.data().to_vec()).collect();
        Ok(Self {
            model,
            optimizer,
            epoch: epoch as usize,
        })
    }

    /// Loss of one batch in training mode, without updating anything.
    pub fn batch_loss(&self, batch: &[&SequenceSample], cfg: &TrainConfig, rng_seed: u64) -> Result<f64> {
        let mut model = self.model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let pred = model.predict(batch_inputs(batch)?, Mode::Training, &mut rng)?;
        let parts = loss_parts(
            &pred.to_f64_vec(),
            pred.shape(),
            &batch_targets(batch),
            cfg.rot_weight,
            cfg.loss_reduction,
        )?;
        Ok(parts.total)
    }

    /// One optimizer step on `batch`, returning the pre-step loss parts.
    pub fn step(
        &mut self,
        batch: &[&SequenceSample],
        cfg: &TrainConfig,
        rng_seed: u64,
    ) -> Result<super::loss::LossParts> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let targets = batch_targets(batch);
        let mut g = Graph::new();
        let p = self.model.state.bind(&mut g);
        let x = g.constant(batch_inputs(batch)?);
        let pred = self
            .model
            .net
            .forward(&mut g, &p, &mut self.model.state.buffers, x, Mode::Training, &mut rng)?;
        let parts = loss_parts(
            &g.value(pred).to_f64_vec(),
            g.shape(pred),
            &targets,
            cfg.rot_weight,
            cfg.loss_reduction,
        )?;
        let loss = weighted_mse_loss(&mut g, pred, &targets, cfg.rot_weight, cfg.loss_reduction)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {value} at epoch {}",
                self.epoch + 1
            )));
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Vec<f32>> = p
            .iter()
            .zip(self.model.state.parameters.tensors())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        self.optimizer.lr = cfg.learning_rate;
        self.optimizer.step(&mut self.model.state.parameters, &grads)?;
        Ok(parts)
    }

    /// One pass over `samples` in a seeded shuffled order.
    pub fn run_epoch(&mut self, samples: &[SequenceSample], cfg: &TrainConfig) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch as u64 + 1;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, u64::MAX)));
        let mut sums = [0.0f64; 3];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|i| &samples[*i]).collect();
            let parts = self.step(&batch, cfg, stream_seed(cfg.seed, epoch, b as u64))?;
            let n = batch.len() as f64;
            sums[0] += parts.total * n;
            sums[1] += parts.translation * n;
            sums[2] += parts.rotation * n;
        }
        self.epoch += 1;
        let n = samples.len() as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            mean_loss: sums[0] / n,
            translation_loss: sums[1] / n,
            rotation_loss: sums[2] / n,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ck = self.checkpoint();
        let path = dir.join(format!("epoch_{:04}.{CHECKPOINT_EXTENSION}", self.epoch));
        ck.write(&path)?;
        ck.write(dir.join(LATEST_CHECKPOINT))?;
        Ok(path)
    }
}

/// Trains until `cfg.epochs` epochs are complete. Checkpoints go to
/// `checkpoint_dir` initially, every `checkpoint_interval` epochs and at the
/// end. A failing epoch leaves the previously written checkpoints intact.
pub fn train(
    session: &mut TrainSession,
    samples: &[SequenceSample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut saved_at = None;
    if let Some(dir) = checkpoint_dir {
        if session.epoch == 0 {
            session.save(dir)?;
            saved_at = Some(0);
        }
    }
    let mut log = Vec::new();
    while session.epoch < cfg.epochs {
        let record = match session.run_epoch(samples, cfg) {
            Ok(r) => r,
            Err(e) => {
                warn!("training aborted during epoch {}: {e}", session.epoch + 1);
                return Err(e);
            }
        };
        info!(
            "epoch {:>4}  loss {:.6e}  (translation {:.3e}, rotation {:.3e})",
            record.epoch, record.mean_loss, record.translation_loss, record.rotation_loss
        );
        on_epoch(&record);
        log.push(record);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_interval > 0 && session.epoch.is_multiple_of(cfg.checkpoint_interval) {
                session.save(dir)?;
                saved_at = Some(session.epoch);
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        if saved_at != Some(session.epoch) {
            session.save(dir)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::model::samples::make_samples;
    use crate::projection::FrameChannels;
    use rand::Rng;
    use std::sync::Arc;

    pub(crate) fn toy_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<SequenceSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = 5 * cfg.height * cfg.width;
        let frames: Vec<Arc<FrameChannels>> = (0..n + cfg.seq_len)
            .map(|_| {
                Arc::new(FrameChannels {
                    height: cfg.height,
                    width: cfg.width,
                    data: (0..len).map(|_| rng.gen_range(0.0..1.0)).collect(),
                })
            })
            .collect();
        let poses: Vec<Pose> = (0..frames.len())
            .map(|i| Pose::from_translation(i as f64 * 0.5, (i as f64 * 0.3).sin(), 0.0))
            .collect();
        make_samples(&frames, &poses, cfg.seq_len).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = ModelConfig::desk();
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::desk()
        };
        let samples = toy_samples(&cfg, 6, 1);
        let model = build_model::<f32>(&cfg, 1).unwrap();
        let before = model.state.parameters.clone();
        let mut s = TrainSession::new(model, &tcfg);
        train(&mut s, &samples, &tcfg, None, |_| {}).unwrap();
        assert_eq!(s.model.state.parameters, before);
    }

    #[test]
    fn session_checkpoint_round_trip() {
        let cfg = ModelConfig::desk();
        let tcfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::desk()
        };
        let samples = toy_samples(&cfg, 4, 2);
        let mut s = TrainSession::new(build_model::<f32>(&cfg, 1).unwrap(), &tcfg);
        train(&mut s, &samples, &tcfg, None, |_| {}).unwrap();
        let r = TrainSession::resume(&cfg, &tcfg, &s.checkpoint()).unwrap();
        assert_eq!(r.epoch, 2);
        assert_eq!(r.model.state, s.model.state);
        assert_eq!(r.optimizer, s.optimizer);
    }

    #[test]
    fn stream_seeds_differ() {
        let a = stream_seed(1, 1, 0);
        assert_ne!(a, stream_seed(1, 1, 1));
        assert_ne!(a, stream_seed(1, 2, 0));
        assert_ne!(a, stream_seed(2, 1, 0));
        assert_eq!(a, stream_seed(1, 1, 0));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = ModelConfig::desk();
        let tcfg = TrainConfig::desk();
        let mut s = TrainSession::new(build_model::<f32>(&cfg, 1).unwrap(), &tcfg);
        assert!(train(&mut s, &[], &tcfg, None, |_| {}).is_err());
    }
}
