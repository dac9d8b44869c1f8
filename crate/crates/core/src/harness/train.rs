use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{batch_tensors, Dataset, Split};
use super::{Outputs, RunConfig};
use crate::autodiff::optim::{adam_step, AdamConfig, AdamState};
use crate::autodiff::BnMode;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{loss_total, LossReport, LossWeights, TargetTensors};
use crate::network::{ForwardGraph, Model, SliceInputs};
use crate::tensor::Tensor;
use crate::volume::TileTriple;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// One line of the training log: the loss before the update of `step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub bin: f64,
    pub edge: f64,
    pub ms: f64,
    pub total: f64,
}

impl LogRecord {
    fn new(step: u64, r: &LossReport) -> Self {
        LogRecord {
            step,
            bin: r.bin,
            edge: r.edge,
            ms: r.ms,
            total: r.total,
        }
    }
}

/// Fails with the name of the first non-finite loss term.
pub fn check_report(step: u64, r: &LossReport) -> Result<()> {
    for (term, value) in [("bin", r.bin), ("edge", r.edge), ("ms", r.ms), ("total", r.total)] {
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                term: term.into(),
                value,
            });
        }
    }
    Ok(())
}

/// Model, optimizer state and a train-mode loss graph built once for a
/// fixed batch and tile size.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    fg: ForwardGraph,
}

impl Trainer {
    pub fn new(
        model: Model,
        adam: AdamState,
        optimizer: AdamConfig,
        weights: LossWeights,
        batch: usize,
        tile: usize,
    ) -> Result<Self> {
        let fg = model.build(batch, tile, BnMode::Train, Some(&weights))?;
        Ok(Trainer {
            model,
            adam,
            optimizer,
            weights,
            fg,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.fg.batch
    }

    /// Forward, backward and one Adam update; returns the loss before the update.
    pub fn step(&mut self, batch: &[&TileTriple]) -> Result<LossReport> {
        let (inputs, targets) = batch_tensors(batch)?;
        self.step_tensors(&inputs, &targets)
    }

    pub fn step_tensors(
        &mut self,
        inputs: &SliceInputs,
        targets: &TargetTensors,
    ) -> Result<LossReport> {
        let step = self.adam.step;
        let loss = self.fg.loss.expect("trainer graph has a loss");
        let b = self.model.bindings(&self.fg, inputs, Some(targets))?;
        match self.fg.graph.evaluate(loss, &b) {
            Ok(_) => {}
            Err(Error::NumericFault { node, op }) => {
                return Err(self.diagnose(step, node, op, &b, targets))
            }
            Err(e) => return Err(e),
        }
        let outputs = Model::read_outputs(&self.fg)?;
        let report = loss_total(&outputs, targets, &self.weights, &self.model.config)?;
        check_report(step, &report)?;
        let grads = self.fg.graph.backward(loss, &Tensor::scalar(1.0))?;
        adam_step(&mut self.model.params, &grads, &mut self.adam, &self.optimizer)?;
        self.model.update_running_stats(&self.fg);
        Ok(report)
    }

    /// Names the loss term behind a non-finite node, or the network node when
    /// the fault happened before any loss term.
    fn diagnose(
        &mut self,
        step: u64,
        node: usize,
        op: &'static str,
        b: &crate::autodiff::Bindings,
        targets: &TargetTensors,
    ) -> Error {
        let body = Error::Diverged {
            step,
            term: format!("network ({op} at node {node})"),
            value: f64::NAN,
        };
        if node <= self.fg.outputs_root.index() {
            return body;
        }
        if self.fg.graph.evaluate(self.fg.outputs_root, b).is_err() {
            return body;
        }
        let report = Model::read_outputs(&self.fg)
            .and_then(|o| loss_total(&o, targets, &self.weights, &self.model.config));
        match report.and_then(|r| check_report(step, &r)) {
            Err(e) => e,
            Ok(()) => Error::Diverged {
                step,
                term: format!("total ({op} at node {node})"),
                value: f64::NAN,
            },
        }
    }

    /// Runs steps `adam.step .. until`, calling `on_step` after each update.
    pub fn train(
        &mut self,
        samples: &[&TileTriple],
        seed: u64,
        until: u64,
        on_step: &mut dyn FnMut(u64, &LossReport, &Trainer) -> Result<()>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::usage("no training samples"));
        }
        while self.adam.step < until {
            let step = self.adam.step;
            let batch = sample_batch(seed, step, samples, self.batch_size());
            let report = self.step(&batch)?;
            on_step(step, &report, self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.adam, extra)
    }
}

/// The batch for `step` depends only on the seed and the step, so resumed
/// runs draw the same batches as uninterrupted ones.
fn sample_batch<'a>(seed: u64, step: u64, samples: &[&'a TileTriple], n: usize) -> Vec<&'a TileTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(2));
    if samples.len() >= n {
        sample(&mut rng, samples.len(), n)
            .into_iter()
            .map(|i| samples[i])
            .collect()
    } else {
        (0..n).map(|_| samples[rng.gen_range(0..samples.len())]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub first: Option<LossReport>,
    pub last: Option<LossReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub periodic: Vec<PathBuf>,
}

fn checkpoint_extra(cfg: &RunConfig, step: u64) -> serde_json::Value {
    serde_json::json!({ "step": step, "seed": cfg.seed })
}

/// Trains on the train split of the prepared dataset, writing the log, the
/// periodic checkpoints and `model.ckpt` under `paths.out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.paths.data_dir)?;
    let tile = ds.manifest.tile;
    let m = cfg.network.tile_multiple();
    if tile % m != 0 {
        return Err(Error::usage(format!(
            "dataset tiles are {tile}x{tile} but encoder depth {} needs multiples of {m}; re-run prepare",
            cfg.network.encoder_depth
        )));
    }
    let train = ds.split_samples(Split::Train);

    let (model, adam) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != cfg.network {
                return Err(Error::usage(format!(
                    "checkpoint {} was trained with a different network config",
                    p.display()
                )));
            }
            (ck.to_model()?, ck.adam)
        }
        None => (Model::new(cfg.network.clone())?, AdamState::default()),
    };
    let start = adam.step;
    if start > cfg.schedule.steps {
        return Err(Error::usage(format!(
            "checkpoint is at step {start}, past the scheduled {} steps",
            cfg.schedule.steps
        )));
    }

    let dir = &cfg.paths.out_dir;
    let log_path = dir.join(LOG_FILE);
    let mut lines: Vec<String> = match (resume, std::fs::read_to_string(&log_path)) {
        (Some(_), Ok(text)) => text
            .lines()
            .filter(|l| {
                serde_json::from_str::<LogRecord>(l).is_ok_and(|r| r.step < start)
            })
            .map(str::to_string)
            .collect(),
        _ => Vec::new(),
    };

    let mut out = Outputs::new();
    out.create_dir(dir)?;
    out.write(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    let mut trainer = Trainer::new(
        model,
        adam,
        cfg.optimizer.clone(),
        cfg.loss.clone(),
        cfg.schedule.batch_size,
        tile,
    )?;
    let sched = &cfg.schedule;
    let mut first = None;
    let mut last = None;
    let mut periodic = Vec::new();
    trainer.train(&train, cfg.seed, sched.steps, &mut |step, report, tr| {
        first.get_or_insert(*report);
        last = Some(*report);
        if step % sched.log_interval == 0 || step + 1 == sched.steps {
            let rec = LogRecord::new(step, report);
            lines.push(serde_json::to_string(&rec).expect("record serializes"));
            on_log(&rec);
        }
        let done = step + 1;
        if sched.checkpoint_interval > 0 && done % sched.checkpoint_interval == 0 {
            let p = dir.join("checkpoints").join(format!("step_{done:06}.ckpt"));
            out.write(&p, &tr.checkpoint(checkpoint_extra(cfg, done)).to_bytes())?;
            periodic.push(p);
        }
        Ok(())
    })?;

    let ckpt = dir.join(FINAL_CHECKPOINT);
    out.write(
        &ckpt,
        &trainer.checkpoint(checkpoint_extra(cfg, trainer.adam.step)).to_bytes(),
    )?;
    let mut log = lines.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    out.write(&log_path, log.as_bytes())?;
    out.commit();
    Ok(TrainSummary {
        start_step: start,
        end_step: trainer.adam.step,
        first,
        last,
        checkpoint: ckpt,
        log: log_path,
        periodic,
    })
}
