use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use lorcon::dataset_io::{read_kitti_poses, SequenceId};
use lorcon::evaluation::{
    export_trajectory, format_motions_csv, format_table, instantaneous_csv, segment_errors, segment_report_csv,
    summary_line, Aggregation, EvalConfig, TrajectoryFormat,
};
use lorcon::geometry::{accumulate, consecutive_motions};
use lorcon::model::gradcheck::{run_check, SuiteCheck, GRADCHECK_THRESHOLD};
use lorcon::model::train::LATEST_CHECKPOINT;
use lorcon::model::{build_model, infer_sequence, make_samples, train, EpochRecord, TrainSession};
use lorcon::nn::{Checkpoint, GradFault};
use lorcon::synthetic::{generate_trajectory, simulate_scan, write_kitti_sequence, LidarModel, World};
use lorcon::{Error, Pose, Result};

use crate::cache;
use crate::config::RunConfig;

pub const TRAIN_LOG: &str = "train.csv";
pub const GRADCHECK_REPORT: &str = "gradcheck.csv";

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    io(path, fs::create_dir_all(path))
}

pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let manifest = cache::preprocess(cfg)?;
    for e in &manifest.sequences {
        println!("sequence {}  frames {:>6}  sha256 {}", e.sequence, e.frames, e.sha256);
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let lidar = LidarModel::matching(&cfg.projection);
    let s = &cfg.synth;
    for seq in cfg.sequences() {
        let seed = s.seed.wrapping_mul(1000).wrapping_add(u64::from(seq.0));
        let world = World::random(seed);
        let poses = generate_trajectory(s.frames, s.motion, s.step, seed)?;
        let clouds: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut c = simulate_scan(&world, p, &lidar);
                c.frame_index = i;
                c
            })
            .collect();
        write_kitti_sequence(&cfg.dataset, seq, &clouds, &poses)?;
        let points: usize = clouds.iter().map(|c| c.len()).sum();
        println!("sequence {seq}  frames {:>6}  points {points}", clouds.len());
    }
    println!("wrote {}", cfg.dataset.display());
    Ok(())
}

pub struct TrainArgs {
    pub resume: bool,
}

pub fn train_cmd(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let manifest = cache::ensure(cfg)?;
    let (train_seqs, _) = lorcon::dataset_io::sequence_split(&cfg.split)?;
    let mut samples = Vec::new();
    for seq in &train_seqs {
        let (frames, poses) = cache::load_sequence(cfg, &manifest, *seq)?;
        samples.extend(make_samples(&frames, &poses, cfg.model.seq_len)?);
    }
    info!("{} training windows from {} sequences", samples.len(), train_seqs.len());
    let ck_dir = cfg.checkpoint_dir();
    let latest = ck_dir.join(LATEST_CHECKPOINT);
    let mut session = if args.resume && latest.is_file() {
        let s = TrainSession::resume(&cfg.model, &cfg.train, &Checkpoint::read(&latest)?)?;
        info!("resuming from {} at epoch {}", latest.display(), s.epoch);
        s
    } else {
        TrainSession::new(build_model::<f32>(&cfg.model, cfg.train.seed)?, &cfg.train)
    };
    let log_dir = cfg.log_dir();
    create_dir(&log_dir)?;
    let log_path = log_dir.join(TRAIN_LOG);
    let append = args.resume && session.epoch > 0 && log_path.is_file();
    let mut log = io(
        &log_path,
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&log_path),
    )?;
    if !append {
        io(&log_path, writeln!(log, "{}", EpochRecord::CSV_HEADER))?;
    }
    let mut write_err = None;
    let records = train(&mut session, &samples, &cfg.train, Some(&ck_dir), |r| {
        if let Err(e) = writeln!(log, "{}", r.csv_row()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::Io {
            path: log_path,
            source: e,
        });
    }
    match (records.first(), records.last()) {
        (Some(first), Some(last)) => println!(
            "final loss {:.6e} at epoch {} ({:.2}% of epoch {})",
            last.mean_loss,
            last.epoch,
            100.0 * last.mean_loss / first.mean_loss,
            first.epoch
        ),
        _ => println!("no epochs run; checkpoint at epoch {}", session.epoch),
    }
    println!("checkpoints in {}", ck_dir.display());
    Ok(())
}

pub struct InferArgs {
    pub checkpoint: Option<PathBuf>,
    pub sequences: Vec<SequenceId>,
}

pub fn infer(cfg: &RunConfig, args: &InferArgs) -> Result<()> {
    let ck_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.checkpoint_dir().join(LATEST_CHECKPOINT));
    let mut model = build_model::<f32>(&cfg.model, 0)?;
    model.load_checkpoint(&Checkpoint::read(&ck_path)?)?;
    let manifest = cache::ensure(cfg)?;
    let sequences = if args.sequences.is_empty() {
        lorcon::dataset_io::sequence_split(&cfg.split)?.1
    } else {
        args.sequences.clone()
    };
    let dir = cfg.trajectory_dir();
    create_dir(&dir)?;
    for seq in sequences {
        let (frames, _) = cache::load_sequence(cfg, &manifest, seq)?;
        let motions = infer_sequence(&mut model, &frames)?;
        let trajectory = accumulate(&Pose::identity(), &motions);
        let csv = dir.join(format!("{seq}_motions.csv"));
        io(&csv, fs::write(&csv, format_motions_csv(&motions)))?;
        let txt = dir.join(format!("{seq}.txt"));
        export_trajectory(&trajectory, &txt, TrajectoryFormat::Kitti)?;
        println!(
            "sequence {seq}  relative poses {:>6}  trajectory poses {:>6}  -> {}",
            motions.len(),
            trajectory.len(),
            txt.display()
        );
    }
    Ok(())
}

pub struct EvalArgs {
    pub gt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
}

/// Writes `<name>_segments.csv` and `<name>_instantaneous.csv` and prints
/// the configured aggregation.
pub fn evaluate_pair(gt: &[Pose], pred: &[Pose], eval: &EvalConfig, reports: &Path, name: &str) -> Result<String> {
    let mean = segment_errors(
        gt,
        pred,
        &EvalConfig {
            aggregation: Aggregation::Mean,
            ..eval.clone()
        },
    )?;
    let rmse = segment_errors(
        gt,
        pred,
        &EvalConfig {
            aggregation: Aggregation::Rmse,
            ..eval.clone()
        },
    )?;
    let inst = lorcon::evaluation::instantaneous_rmse(&consecutive_motions(gt), &consecutive_motions(pred))?;
    create_dir(reports)?;
    let seg_path = reports.join(format!("{name}_segments.csv"));
    io(&seg_path, fs::write(&seg_path, segment_report_csv(&[&mean, &rmse])))?;
    let inst_path = reports.join(format!("{name}_instantaneous.csv"));
    io(&inst_path, fs::write(&inst_path, instantaneous_csv(&inst)))?;
    let shown = match eval.aggregation {
        Aggregation::Mean => &mean,
        Aggregation::Rmse => &rmse,
    };
    print!("{name}\n{}", format_table(shown));
    println!(
        "instantaneous rmse: translation {:.6} m, rotation {:.6} rad over {} pairs",
        inst.translation_rmse, inst.rotation_rmse, inst.count
    );
    let line = summary_line(shown);
    println!("{line}");
    Ok(line)
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let reports = cfg.report_dir();
    match (&args.gt, &args.pred) {
        (Some(gt), Some(pred)) => {
            let name = pred
                .file_stem()
                .map_or("pred".into(), |s| s.to_string_lossy().into_owned());
            evaluate_pair(
                &read_kitti_poses(gt)?,
                &read_kitti_poses(pred)?,
                &cfg.eval,
                &reports,
                &name,
            )?;
        }
        _ => {
            let (_, test) = lorcon::dataset_io::sequence_split(&cfg.split)?;
            for seq in test {
                let gt = read_kitti_poses(cache::sequence_dir(&cfg.cache_dir(), seq).join(cache::POSES_FILE))?;
                let pred = read_kitti_poses(cfg.trajectory_dir().join(format!("{seq}.txt")))?;
                evaluate_pair(&gt, &pred, &cfg.eval, &reports, &seq.to_string())?;
            }
        }
    }
    Ok(())
}

pub struct GradcheckArgs {
    pub seeds: u64,
    pub checks: Vec<SuiteCheck>,
    pub fault: Option<SuiteCheck>,
    pub fault_scale: f64,
}

pub fn gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<()> {
    let checks = if args.checks.is_empty() {
        SuiteCheck::all()
    } else {
        args.checks.clone()
    };
    let fault = args.fault.map(|c| GradFault {
        kind: c.fault_kind(),
        scale: args.fault_scale,
    });
    if let Some(f) = fault {
        println!("injecting fault: {:?} gradients scaled by {}", f.kind, f.scale);
    }
    let mut csv = String::from("check,seeds,max_rel_error,worst_seed,coordinates,passed\n");
    let mut failures = Vec::new();
    for check in checks {
        let s = run_check(check, args.seeds, fault)?;
        println!(
            "{:<20} max rel error {:.3e}  (worst seed {:>2}, {} coordinates)  {}",
            check.name(),
            s.max_rel_error,
            s.worst_seed,
            s.coordinates,
            if s.passed() { "PASS" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{:e},{},{},{}\n",
            check.name(),
            s.seeds,
            s.max_rel_error,
            s.worst_seed,
            s.coordinates,
            s.passed()
        ));
        if !s.passed() {
            failures.push(format!("{} (seeds {:?})", check.name(), s.failing_seeds));
        }
    }
    let reports = cfg.report_dir();
    create_dir(&reports)?;
    let path = reports.join(GRADCHECK_REPORT);
    io(&path, fs::write(&path, csv))?;
    if failures.is_empty() {
        println!("all checks below {GRADCHECK_THRESHOLD:e}");
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check above {GRADCHECK_THRESHOLD:e}: {}",
            failures.join(", ")
        )))
    }
}
