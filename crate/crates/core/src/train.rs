//! Full-batch SGD training, checkpointing and dataset evaluation.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{OptimizerConfig, RunConfig};
use crate::detector::{DecodeParams, LossBreakdown};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, GroundTruthBox};
use crate::model::Detector;
use crate::params::ModuleParams;
use crate::synth::Dataset;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor4;

pub const CHECKPOINT_FILE: &str = "checkpoint.sodm";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const CONFIG_COPY_FILE: &str = "config.json";
pub const LOSS_LOG_HEADER: &str = "iteration,total,class,box";

const VELOCITY_PREFIX: &str = "optimizer.velocity.";
const ITERATION_ENTRY: &str = "optimizer.iteration";
const EVAL_CHUNK: usize = 8;

/// Loss of the step with one-based index `iteration`, measured before its
/// parameter update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.iteration, self.loss.total, self.loss.class, self.loss.bbox
        )
    }

    pub fn parse_row(line: &str) -> Option<Self> {
        let mut it = line.trim().split(',');
        let iteration = it.next()?.parse().ok()?;
        let mut next = || it.next().and_then(|v| v.parse::<f64>().ok());
        let loss = LossBreakdown {
            total: next()?,
            class: next()?,
            bbox: next()?,
        };
        Some(LossRecord { iteration, loss })
    }
}

/// Parameters, momentum buffers and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModuleParams<f32>,
    /// Aligned with `params`; `None` for entries that are not learnable.
    pub velocity: Vec<Option<Tensor4<f32>>>,
    pub iteration: usize,
}

impl TrainState {
    pub fn fresh(model: &Detector, seed: u64) -> Result<Self> {
        let params = model.init_params::<f32>(seed)?;
        let velocity = params
            .entries()
            .iter()
            .map(|e| e.learnable.then(|| Tensor4::zeros(e.tensor.dims())))
            .collect();
        Ok(TrainState {
            params,
            velocity,
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<f32>> {
        let mut c = Checkpoint::from_params(&self.params);
        for (e, v) in self.params.entries().iter().zip(&self.velocity) {
            if let Some(v) = v {
                c.push(format!("{VELOCITY_PREFIX}{}", e.name), v.clone())?;
            }
        }
        c.push(ITERATION_ENTRY, Tensor4::scalar(self.iteration as f32))?;
        Ok(c)
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`] for `model`.
    pub fn from_checkpoint(model: &Detector, ckpt: &Checkpoint<f32>) -> Result<Self> {
        let mut state = TrainState::fresh(model, 0)?;
        ckpt.restore_params(&mut state.params, &[VELOCITY_PREFIX, ITERATION_ENTRY])?;
        for (e, v) in state.params.entries().iter().zip(state.velocity.iter_mut()) {
            if let Some(v) = v {
                let name = format!("{VELOCITY_PREFIX}{}", e.name);
                let saved = ckpt
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing momentum buffer {name}")))?;
                if saved.dims() != v.dims() {
                    return Err(Error::shape(format!("momentum buffer {name} is {}", saved.dims())));
                }
                *v = saved.clone();
            }
        }
        let it = ckpt
            .get(ITERATION_ENTRY)
            .ok_or_else(|| Error::Checkpoint(format!("missing {ITERATION_ENTRY}")))?;
        state.iteration = it.data()[0] as usize;
        Ok(state)
    }
}

/// Loads model parameters from a checkpoint, ignoring optimizer entries.
pub fn load_params(model: &Detector, path: &Path) -> Result<ModuleParams<f32>> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    let mut params = model.init_params::<f32>(0)?;
    ckpt.restore_params(&mut params, &[VELOCITY_PREFIX, ITERATION_ENTRY])?;
    Ok(params)
}

/// One model and its full training batch.
pub struct Trainer {
    pub model: Detector,
    pub optimizer: OptimizerConfig,
    images: Tensor4<f32>,
    gts: Vec<Vec<GroundTruthBox>>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let (images, gts) = data.batch::<f32>()?;
        if let Some(b) = gts.iter().flatten().find(|b| b.class_id >= cfg.model.num_classes) {
            return Err(Error::Config(format!(
                "annotation class {} but the model has {} classes",
                b.class_id, cfg.model.num_classes
            )));
        }
        Ok(Trainer {
            model: Detector::new(&cfg.model)?,
            optimizer: cfg.optimizer.clone(),
            images,
            gts,
        })
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        TrainState::fresh(&self.model, self.optimizer.seed)
    }

    /// Runs one momentum-SGD step and returns the loss measured before it.
    pub fn step(&self, state: &mut TrainState) -> Result<LossRecord> {
        let iteration = state.iteration + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { iteration },
            other => other,
        };
        let mut tape = Tape::new(Mode::Train);
        let pass = self
            .model
            .forward(&mut tape, &state.params, &self.images)
            .map_err(diverged)?;
        let (loss, parts) = self.model.loss(&mut tape, &pass, &self.gts).map_err(diverged)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let mut grads = tape.backward(loss, &Tensor4::scalar(1.0)).map_err(diverged)?;
        let grads = pass.bound.collect_grads(&state.params, &mut grads)?;
        state.params.apply_stat_updates(&pass.bound, &tape)?;

        let lr = self.optimizer.learning_rate_at(state.iteration) as f32;
        let momentum = self.optimizer.momentum as f32;
        for ((entry, vel), grad) in state
            .params
            .entries_mut()
            .iter_mut()
            .zip(&mut state.velocity)
            .zip(grads)
        {
            let (Some(vel), Some(grad)) = (vel.as_mut(), grad) else {
                continue;
            };
            let mut v = vel.data().to_vec();
            let mut p = entry.tensor.data().to_vec();
            for ((v, p), &g) in v.iter_mut().zip(p.iter_mut()).zip(grad.data()) {
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { iteration });
            }
            *vel = Tensor4::from_vec(vel.dims(), v)?;
            entry.tensor = Tensor4::from_vec(entry.tensor.dims(), p)?;
        }
        state.iteration = iteration;
        Ok(LossRecord { iteration, loss: parts })
    }

    pub fn evaluate(&self, params: &ModuleParams<f32>, decode: &DecodeParams) -> Result<EvalResult> {
        evaluate_batch(&self.model, params, &self.images, &self.gts, decode)
    }
}

fn evaluate_batch(
    model: &Detector,
    params: &ModuleParams<f32>,
    images: &Tensor4<f32>,
    gts: &[Vec<GroundTruthBox>],
    decode: &DecodeParams,
) -> Result<EvalResult> {
    let dets = model.detect(params, images, decode)?;
    let flat_dets: Vec<_> = dets.into_iter().flatten().collect();
    let flat_gts: Vec<_> = gts.iter().flatten().copied().collect();
    Ok(evaluate(&flat_dets, &flat_gts))
}

/// Detects on every image of `data` and scores the result against its boxes.
pub fn evaluate_dataset(
    model: &Detector,
    params: &ModuleParams<f32>,
    data: &Dataset,
    decode: &DecodeParams,
) -> Result<EvalResult> {
    model.check_params(params)?;
    let mut dets = Vec::new();
    for (ci, chunk) in data.scenes.chunks(EVAL_CHUNK).enumerate() {
        let part = Dataset { scenes: chunk.to_vec() };
        let (images, _) = part.batch::<f32>()?;
        for (i, per_image) in model.detect(params, &images, decode)?.into_iter().enumerate() {
            let image_id = ci * EVAL_CHUNK + i;
            dets.extend(per_image.into_iter().map(|mut d| {
                d.image_id = image_id;
                d
            }));
        }
    }
    Ok(evaluate(&dets, &data.ground_truth()))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Stop once this many total iterations have completed.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<LossRecord>,
    pub state: TrainState,
    pub checkpoint: PathBuf,
}

fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    state.to_checkpoint()?.save(path)
}

/// Reads a loss log, skipping the header.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut offset = 0;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let len = line.len() + 1;
        if i == 0 {
            if line.trim() != LOSS_LOG_HEADER {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    offset,
                    msg: format!("expected header `{LOSS_LOG_HEADER}`"),
                });
            }
        } else if !line.trim().is_empty() {
            records.push(LossRecord::parse_row(&line).ok_or_else(|| Error::Parse {
                file: path.to_path_buf(),
                offset,
                msg: format!("malformed loss row `{line}`"),
            })?);
        }
        offset += len;
    }
    Ok(records)
}

fn open_log(path: &Path, keep_rows: Option<usize>) -> Result<fs::File> {
    match keep_rows {
        None => {
            fs::write(path, format!("{LOSS_LOG_HEADER}\n")).map_err(|e| Error::io(path, e))?;
        }
        Some(keep) => {
            // rows past the checkpoint belong to steps that will be redone
            let records = read_loss_log(path)?;
            if records.len() < keep {
                return Err(Error::Checkpoint(format!(
                    "loss log has {} rows but the checkpoint is at iteration {keep}",
                    records.len()
                )));
            }
            let mut text = format!("{LOSS_LOG_HEADER}\n");
            for r in &records[..keep] {
                text.push_str(&r.csv_row());
                text.push('\n');
            }
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
    }
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Trains per `cfg`, writing `checkpoint.sodm`, `loss.csv` and a copy of the
/// config into `out`. On divergence the last saved checkpoint is left intact.
pub fn run_training(cfg: &RunConfig, data: &Dataset, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let trainer = Trainer::new(cfg, data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOSS_LOG_FILE);
    cfg.save(&out.join(CONFIG_COPY_FILE))?;

    let mut state = if opts.resume {
        TrainState::from_checkpoint(&trainer.model, &Checkpoint::load(&ckpt_path)?)?
    } else {
        trainer.initial_state()?
    };
    let mut log = open_log(&log_path, opts.resume.then_some(state.iteration))?;
    let total = cfg.optimizer.iterations;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let every = cfg.optimizer.checkpoint_every;
    let mut records = Vec::new();
    while state.iteration < stop {
        let record = trainer.step(&mut state)?;
        writeln!(log, "{}", record.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        records.push(record);
        if every > 0 && state.iteration % every == 0 {
            save_state(&state, &ckpt_path)?;
        }
    }
    save_state(&state, &ckpt_path)?;
    Ok(TrainSummary {
        records,
        state,
        checkpoint: ckpt_path,
    })
}
