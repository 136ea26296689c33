//! Preprocessed frame cache: one blob per scan, LiDAR-frame poses and a
//! manifest with a checksum per sequence.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use lorcon::dataset_io::{read_kitti_poses, read_velodyne_bin, write_kitti_poses, KittiLayout, SequenceId};
use lorcon::projection::{project_cloud, FrameChannels, ProjectionConfig};
use lorcon::{Error, Pose, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const POSES_FILE: &str = "poses.txt";
const BLOB_EXTENSION: &str = "lrcf";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub sequence: SequenceId,
    pub frames: usize,
    /// SHA-256 over the frame blobs in order, then the pose file.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub projection: ProjectionConfig,
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn entry(&self, seq: SequenceId) -> Option<&SequenceEntry> {
        self.sequences.iter().find(|e| e.sequence == seq)
    }
}

pub fn sequence_dir(cache: &Path, seq: SequenceId) -> PathBuf {
    cache.join(seq.to_string())
}

pub fn blob_path(cache: &Path, seq: SequenceId, frame: usize) -> PathBuf {
    sequence_dir(cache, seq).join(format!("{frame:06}.{BLOB_EXTENSION}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Projects every scan of one sequence and writes its blobs and poses.
pub fn preprocess_sequence(
    layout: &KittiLayout,
    cache: &Path,
    seq: SequenceId,
    cfg: &ProjectionConfig,
) -> Result<SequenceEntry> {
    let scans = layout.scan_paths(seq)?;
    let poses = layout.lidar_poses(seq)?;
    for (i, path) in scans.iter().enumerate() {
        let expected = format!("{i:06}.bin");
        if path.file_name().is_none_or(|n| n != expected.as_str()) {
            return Err(Error::Format {
                path: layout.velodyne_dir(seq),
                message: format!("sequence {seq}: frame {i:06} is missing (found {})", path.display()),
            });
        }
    }
    if scans.len() != poses.len() {
        return Err(Error::Format {
            path: layout.poses_path(seq),
            message: format!("sequence {seq}: {} scans but {} poses", scans.len(), poses.len()),
        });
    }
    let blobs: Vec<Vec<u8>> = scans
        .par_iter()
        .map(|p| {
            let (cloud, _) = read_velodyne_bin(p)?;
            Ok(project_cloud(&cloud, cfg).channels().to_bytes())
        })
        .collect::<Result<_>>()?;
    let dir = sequence_dir(cache, seq);
    create_dir(&dir)?;
    let mut hash = Sha256::new();
    for (i, blob) in blobs.iter().enumerate() {
        write(&blob_path(cache, seq, i), blob)?;
        hash.update(blob);
    }
    let pose_path = dir.join(POSES_FILE);
    write_kitti_poses(&pose_path, &poses)?;
    hash.update(fs::read(&pose_path).map_err(|e| Error::Io {
        path: pose_path.clone(),
        source: e,
    })?);
    info!("sequence {seq}: {} frames cached", blobs.len());
    Ok(SequenceEntry {
        sequence: seq,
        frames: blobs.len(),
        sha256: hex::encode(hash.finalize()),
    })
}

/// Preprocesses every configured sequence and writes the manifest.
pub fn preprocess(cfg: &RunConfig) -> Result<Manifest> {
    if !cfg.dataset.is_dir() {
        return Err(Error::Io {
            path: cfg.dataset.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        });
    }
    let layout = KittiLayout::new(&cfg.dataset);
    let cache = cfg.cache_dir();
    create_dir(&cache)?;
    let sequences = cfg
        .sequences()
        .into_iter()
        .map(|seq| preprocess_sequence(&layout, &cache, seq, &cfg.projection))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        projection: cfg.projection,
        sequences,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(&cache.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// Reuses the cache when its manifest covers every configured sequence at
/// the configured projection, and rebuilds it otherwise.
pub fn ensure(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.cache_dir().join(MANIFEST);
    if path.is_file() {
        let m = Manifest::read(&path)?;
        if m.projection == cfg.projection && cfg.sequences().iter().all(|s| m.entry(*s).is_some()) {
            return Ok(m);
        }
        info!("cache at {} is stale; rebuilding", path.display());
    } else {
        info!("no cache at {}; preprocessing", path.display());
    }
    preprocess(cfg)
}

/// Frames and LiDAR-frame poses of one cached sequence, verified against
/// the manifest checksum.
pub fn load_sequence(
    cfg: &RunConfig,
    manifest: &Manifest,
    seq: SequenceId,
) -> Result<(Vec<Arc<FrameChannels>>, Vec<Pose>)> {
    let cache = cfg.cache_dir();
    let entry = manifest
        .entry(seq)
        .ok_or_else(|| Error::Config(format!("sequence {seq} is not in the preprocessed cache")))?;
    let mut hash = Sha256::new();
    let frames = (0..entry.frames)
        .map(|i| {
            let path = blob_path(&cache, seq, i);
            let bytes = fs::read(&path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            hash.update(&bytes);
            Ok(Arc::new(FrameChannels::from_bytes(&bytes, &path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let pose_path = sequence_dir(&cache, seq).join(POSES_FILE);
    hash.update(fs::read(&pose_path).map_err(|e| Error::Io {
        path: pose_path.clone(),
        source: e,
    })?);
    if hex::encode(hash.finalize()) != entry.sha256 {
        return Err(Error::Format {
            path: sequence_dir(&cache, seq),
            message: format!("sequence {seq}: cache checksum mismatch; rerun preprocess"),
        });
    }
    let poses = read_kitti_poses(&pose_path)?;
    Ok((frames, poses))
}
