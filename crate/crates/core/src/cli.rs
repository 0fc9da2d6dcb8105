//! Subcommand implementations behind the `refquery` binary.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{generate_synthetic, list_clips, load_clip, save_clip, write_prediction, FeatureClip, PredictionFile};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, parallel_map, MetricReport};
use crate::io::write_atomic;
use crate::model::Model;
use crate::selfcheck::{run_selfcheck, SelfCheckReport};
use crate::tensor::OpKind;
use crate::training::{loss_csv, Checkpoint, LossBreakdown, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";

/// Worker count for inference and evaluation: `REFQUERY_THREADS` if set,
/// otherwise the available parallelism.
pub fn thread_budget() -> Result<usize> {
    match std::env::var("REFQUERY_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("REFQUERY_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn load_clips(root: &Path) -> Result<Vec<FeatureClip>> {
    list_clips(root)?.iter().map(|p| load_clip(p)).collect()
}

/// Writes `synthetic.clips` generated clips under `out`, one directory per
/// clip. Clip `i` uses seed `synthetic.spec.seed + i`.
pub fn gen_synthetic(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    if cfg.synthetic.clips == 0 {
        return Err(Error::Config("synthetic.clips must be >= 1".into()));
    }
    (0..cfg.synthetic.clips as u64)
        .map(|i| {
            let mut spec = cfg.synthetic.spec.clone();
            spec.seed = spec.seed.wrapping_add(i);
            let clip = generate_synthetic(&spec)?;
            save_clip(&clip, &out.join(&clip.clip_id))
        })
        .collect()
}

pub struct TrainOutcome {
    pub history: Vec<LossBreakdown>,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

/// Trains on the clips under `data` and writes `checkpoint.bin` and
/// `loss.csv` into `out`. With `resume`, training continues from that
/// checkpoint, whose embedded setup must match `cfg` apart from the
/// iteration count.
pub fn train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    log: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let clips = load_clips(data)?;
    let mut trainer = match resume {
        None => Trainer::new(cfg.setup())?,
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut saved = ckpt.setup()?;
            saved.train.iterations = cfg.train.iterations;
            if saved != cfg.setup() {
                let a = serde_json::to_value(&saved).expect("setup serializes");
                let b = serde_json::to_value(cfg.setup()).expect("setup serializes");
                return Err(Error::Checkpoint(format!(
                    "{} was written with a different setup: {}",
                    p.display(),
                    crate::training::checkpoint::differing_keys(&a, &b, "config").join(", ")
                )));
            }
            Trainer::resume(&ckpt, Some(cfg.train.iterations))?
        }
    };
    trainer.run(&clips, log)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint)?;
    let loss_path = out.join(LOSS_FILE);
    write_atomic(&loss_path, loss_csv(&trainer.history).as_bytes())?;
    Ok(TrainOutcome {
        history: trainer.history,
        checkpoint,
        loss_csv: loss_path,
    })
}

/// Builds the model described by `cfg` and loads checkpoint weights into it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    ckpt.load_params(&mut model)?;
    Ok(model)
}

/// Writes one prediction file per clip under `out`.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, threads: usize) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let clips = load_clips(data)?;
    let threshold = cfg.eval.threshold;
    let results = parallel_map(clips.len(), threads, |i| {
        model
            .segment(&clips[i], threshold)
            .map(|m| PredictionFile::from_masks(&clips[i].clip_id, &m))
    });
    results
        .into_iter()
        .map(|p| write_prediction(out, &p?))
        .collect()
}

/// Scores predictions and optionally writes the CSV and table next to them.
pub fn eval(pred: &Path, data: &Path, report_dir: Option<&Path>, threads: usize) -> Result<MetricReport> {
    let clips = load_clips(data)?;
    let report = evaluate_dataset(pred, &clips, threads)?;
    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("metrics.csv"), report.to_csv().as_bytes())?;
        write_atomic(&dir.join("metrics.txt"), report.to_table().as_bytes())?;
    }
    Ok(report)
}

pub fn selfcheck(corrupt: Option<&str>) -> Result<SelfCheckReport> {
    let fault = match corrupt {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown op {name:?}; expected one of {}", known.join(", ")))
        })?),
    };
    Ok(run_selfcheck(fault))
}
