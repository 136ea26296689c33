//! Run configuration: a preset, an optional TOML file and command-line
//! overrides, merged in that order.

use std::fs;
use std::path::{Path, PathBuf};

use lorcon::dataset_io::{sequence_split, SequenceId, SplitConfig};
use lorcon::evaluation::EvalConfig;
use lorcon::model::{ModelConfig, TrainConfig};
use lorcon::projection::ProjectionConfig;
use lorcon::synthetic::Motion;
use lorcon::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 64×900 images and the full-size network.
    #[default]
    Paper,
    /// 16×64 images and a small network that trains in seconds.
    Desk,
}

/// Parameters of `lorcon synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub motion: Motion,
    /// Meters between consecutive poses.
    pub step: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            motion: Motion::Arc,
            step: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// KITTI odometry root with `sequences/` and `poses/`.
    pub dataset: PathBuf,
    /// Receives cache/, checkpoints/, logs/, reports/ and trajectories/.
    pub output: PathBuf,
    pub projection: ProjectionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                preset,
                dataset: PathBuf::from("data/kitti"),
                output: PathBuf::from("runs/paper"),
                projection: ProjectionConfig::default(),
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                eval: EvalConfig::default(),
                split: SplitConfig::default(),
                synth: SynthConfig::default(),
            },
            Preset::Desk => {
                let model = ModelConfig::desk();
                Self {
                    preset,
                    dataset: PathBuf::from("data/synthetic"),
                    output: PathBuf::from("runs/desk"),
                    projection: ProjectionConfig {
                        height: model.height,
                        width: model.width,
                        ..ProjectionConfig::default()
                    },
                    model,
                    train: TrainConfig::desk(),
                    eval: EvalConfig {
                        lengths: vec![10.0, 20.0, 30.0, 40.0],
                        ..EvalConfig::default()
                    },
                    split: SplitConfig {
                        train: vec![SequenceId(0)],
                        test: vec![SequenceId(1)],
                    },
                    synth: SynthConfig {
                        frames: 24,
                        ..SynthConfig::default()
                    },
                }
            }
        }
    }

    /// Merges `file` and then `overrides` over the selected preset. The
    /// preset itself may come from either source.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut user = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut user, key, value.clone())?;
        }
        let preset = match user.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut merged = Value::try_from(RunConfig::preset(preset))
            .map_err(|e| Error::Config(e.to_string()))?
            .as_table()
            .cloned()
            .expect("config serializes to a table");
        merge(&mut merged, user);
        let cfg = RunConfig::deserialize(Value::Table(merged)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        sequence_split(&self.split)?;
        if (self.projection.height, self.projection.width) != (self.model.height, self.model.width) {
            return Err(Error::Config(format!(
                "projection is {}×{} but the model expects {}×{}",
                self.projection.height, self.projection.width, self.model.height, self.model.width
            )));
        }
        if self.synth.frames < 2 {
            return Err(Error::Config("synth.frames must be at least 2".into()));
        }
        Ok(())
    }

    /// Train then test sequences, sorted and de-duplicated.
    pub fn sequences(&self) -> Vec<SequenceId> {
        let (train, test) = sequence_split(&self.split).expect("validated split");
        let mut all: Vec<SequenceId> = train.into_iter().chain(test).collect();
        all.sort();
        all
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output.join("cache")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output.join("checkpoints")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.output.join("logs")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output.join("reports")
    }

    pub fn trajectory_dir(&self) -> PathBuf {
        self.output.join("trajectories")
    }

    /// Writes the merged configuration into the output directory.
    pub fn write_effective(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output).map_err(|e| Error::Io {
            path: self.output.clone(),
            source: e,
        })?;
        let path = self.output.join(EFFECTIVE_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

/// Parses `KEY=VALUE`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn parse_override(arg: &str) -> std::result::Result<(String, Value), String> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {arg:?}"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("invalid key {key:?}"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = table;
    for (i, p) in parts.iter().enumerate() {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", parts[..=i].join("."))))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
