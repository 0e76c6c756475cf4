//! Training loop, run directories, evaluation and inference.
//!
//! A run directory holds `config.json`, the stage stack (`stack.json` plus
//! `stageN/`), `state.json` and `optim/` for the stage in progress, and
//! `train_log.jsonl` with one loss line per iteration.

mod eval;
mod optim;

pub use eval::{
    displacement_blob_name, evaluate, evaluate_sequences, infer, infer_run, load_stack, stage_label, strain_blob_name,
    strain_image_name, strain_to_gray, EvalItem, InferSummary, SplitReport, StrainWindow, INFER_INDEX,
};
pub use optim::{clip_scale, Adam, AdamConfig, Plateau, PlateauPolicy};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::diff::loss_terms;
use crate::losses::{LossBreakdown, LossConfig};
use crate::multistage::{stage_seed, stage_tensors, StageStack};
use crate::network::params::param_seed;
use crate::network::{NetworkConfig, UsseNet};
use crate::rfdata::{load_sequence, read_json, write_json, DatasetManifest, RfSequence, Split};

pub const RUN_FORMAT_VERSION: u32 = 1;

const CONFIG_FILE: &str = "config.json";
const STATE_FILE: &str = "state.json";
const DATA_FILE: &str = "data.json";
const LOG_FILE: &str = "train_log.jsonl";
const OPTIM_DIR: &str = "optim";
const DUMP_FILE: &str = "divergence.json";

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs1() -> usize {
    150
}
fn default_epochs2() -> usize {
    100
}
fn default_one() -> usize {
    1
}
fn default_stages() -> usize {
    2
}
fn default_clip() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_policy: PlateauPolicy,
    #[serde(default = "default_epochs1")]
    pub epochs_stage1: usize,
    #[serde(default = "default_epochs2")]
    pub epochs_stage2: usize,
    #[serde(default = "default_one")]
    pub batch_size: usize,
    /// Post frames used per sequence.
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossConfig,
    pub network: NetworkConfig,
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Per-stage cap on optimizer steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Full-schedule defaults for a given network.
    pub fn new(network: NetworkConfig) -> Self {
        Self {
            learning_rate: default_lr(),
            lr_policy: PlateauPolicy::default(),
            epochs_stage1: default_epochs1(),
            epochs_stage2: default_epochs2(),
            batch_size: 1,
            frames: network.frames,
            seed: 0,
            loss: LossConfig::default(),
            network,
            stages: default_stages(),
            max_iterations: None,
            clip_norm: default_clip(),
            adam: AdamConfig::default(),
        }
    }

    /// Small CPU configuration: four levels, 8 base channels, `T = 3`,
    /// 200 steps per stage.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            epochs_stage1: 10_000,
            epochs_stage2: 10_000,
            max_iterations: Some(200),
            ..Self::new(NetworkConfig::new(4, 8, 3))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Configuration(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size != 1 {
            return Err(Error::Configuration(format!(
                "batch size must be 1, got {}",
                self.batch_size
            )));
        }
        if self.frames == 0 || self.frames != self.network.frames {
            return Err(Error::Configuration(format!(
                "T = {} must be positive and match the network's T = {}",
                self.frames, self.network.frames
            )));
        }
        if self.stages == 0 {
            return Err(Error::Configuration("at least one stage is required".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Configuration(format!("clip norm {} must be positive", self.clip_norm)));
        }
        self.lr_policy.validate()?;
        self.adam.validate()?;
        self.loss.validate().map_err(|e| Error::Configuration(e.to_string()))?;
        self.network.validate()
    }

    pub fn epochs_for(&self, m: usize) -> usize {
        if m == 1 {
            self.epochs_stage1
        } else {
            self.epochs_stage2
        }
    }
}

/// One training sequence as tensors: `pre` is `(H, W)`, `posts` the first
/// `T` post frames.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub pre: Tensor,
    pub posts: Vec<Tensor>,
}

impl Sample {
    pub fn from_sequence(seq: &RfSequence, frames: usize, device: &Device) -> Result<Self> {
        let seq = seq.truncated(frames)?;
        let t = |g: &crate::fieldops::Grid| crate::fieldops::diff::grid_to_tensor(g, DType::F32, device);
        Ok(Self {
            name: seq.source_id.clone(),
            pre: t(&seq.pre.samples)?,
            posts: seq.posts.iter().map(|p| t(&p.samples)).collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainingData {
    pub fn from_sequences(train: &[RfSequence], val: &[RfSequence], frames: usize) -> Result<Self> {
        let dev = Device::Cpu;
        let conv = |v: &[RfSequence]| v.iter().map(|s| Sample::from_sequence(s, frames, &dev)).collect::<Result<Vec<_>>>();
        let data = Self {
            train: conv(train)?,
            val: conv(val)?,
        };
        if data.train.is_empty() {
            return Err(Error::NoData("no training sequences".into()));
        }
        Ok(data)
    }

    /// Loads the train and val splits of `manifest`.
    pub fn load(manifest: &DatasetManifest, frames: usize) -> Result<Self> {
        let load = |split| {
            manifest
                .split(split)
                .map(|e| load_sequence(&e.path))
                .collect::<Result<Vec<_>>>()
        };
        Self::from_sequences(&load(Split::Train)?, &load(Split::Val)?, frames)
    }

    /// Validation set, falling back to the training set when no val split
    /// exists.
    pub fn validation(&self) -> &[Sample] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

/// Serializable progress of the stage being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format_version: u32,
    pub stage: usize,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    /// Optimizer steps taken in `stage`.
    pub iteration: u64,
    pub learning_rate: f64,
    pub plateau: Plateau,
    pub adam_step: u64,
    /// Mean training loss of `stage` before its first step.
    pub initial_loss: f64,
    pub complete: bool,
    /// Seed from which each epoch's visiting order is derived together with
    /// the stage and epoch numbers.
    pub order_seed: u64,
}

impl RunState {
    fn start(m: usize, cfg: &TrainConfig, initial_loss: f64) -> Self {
        Self {
            format_version: RUN_FORMAT_VERSION,
            stage: m,
            epoch: 0,
            iteration: 0,
            learning_rate: cfg.learning_rate,
            plateau: Plateau::default(),
            adam_step: 0,
            initial_loss,
            complete: false,
            order_seed: cfg.seed,
        }
    }
}

/// Visiting order of the `n` training sequences in `epoch` of stage `m`.
pub fn epoch_order(seed: u64, m: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &format!("order.stage{m}.epoch{epoch}")));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub stage: usize,
    pub epoch: usize,
    pub iter: u64,
    pub sequence: String,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub epochs: usize,
    pub iterations: u64,
    pub initial_loss: f64,
    /// Mean training loss after the last step; `None` while incomplete.
    pub final_loss: Option<f64>,
    pub best_val: Option<f64>,
    pub learning_rate: f64,
    /// Records produced by this call only.
    pub records: Vec<IterationRecord>,
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stack: StageStack,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Return after this many epochs have run in this call, leaving the run
    /// resumable.
    pub stop_after_epochs: Option<usize>,
}

/// Loss of stage `m` on one sample, with the graph attached.
pub fn stage_loss(
    stack: &StageStack,
    m: usize,
    sample: &Sample,
    cfg: &LossConfig,
) -> Result<crate::losses::diff::LossTerms> {
    let steps = stage_tensors(stack, m, &sample.pre, &sample.posts)?;
    let pre_n = stack.stage(m)?.net.prepare(&sample.pre)?;
    let warped: Vec<Tensor> = steps.iter().map(|s| s.warped.clone()).collect();
    let strains: Vec<Tensor> = steps.iter().map(|s| s.strain.clone()).collect();
    let disps: Vec<(Tensor, Tensor)> = steps.iter().map(|s| (s.d_y.clone(), s.d_x.clone())).collect();
    loss_terms(&pre_n, &warped, &strains, &disps, cfg)
}

/// Mean total loss of stage `m` over `samples`.
pub fn mean_loss(stack: &StageStack, m: usize, samples: &[Sample], cfg: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoData("no sequences to evaluate".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        sum += stage_loss(stack, m, s, cfg)?.breakdown()?.l_total;
    }
    Ok(sum / samples.len() as f64)
}

struct RunDir<'a> {
    dir: &'a Path,
}

impl RunDir<'_> {
    fn checkpoint(&self, stack: &StageStack, state: &RunState, adam: &Adam) -> Result<()> {
        stack.save(self.dir)?;
        let od = self.dir.join(OPTIM_DIR);
        if od.exists() {
            fs::remove_dir_all(&od).map_err(|e| Error::io(&od, e))?;
        }
        adam.save(&od)?;
        write_json(&self.dir.join(STATE_FILE), state)
    }

    fn log(&self, record: &IterationRecord, cfg: &LossConfig) -> Result<()> {
        let mut line: serde_json::Value = serde_json::from_str(&record.losses.trace_line(record.iter, &cfg.weights))?;
        line["stage"] = record.stage.into();
        line["epoch"] = record.epoch.into();
        line["lr"] = record.learning_rate.into();
        line["grad_norm"] = record.grad_norm.into();
        line["sequence"] = record.sequence.clone().into();
        let path = self.dir.join(LOG_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    /// Drops log lines written after the last checkpoint.
    fn trim_log(&self, state: &RunState) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        if !path.is_file() {
            return Ok(());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kept = String::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let stage = v["stage"].as_u64().unwrap_or(0) as usize;
            let iter = v["iter"].as_u64().unwrap_or(0);
            if stage < state.stage || (stage == state.stage && iter <= state.iteration) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))
    }

    fn dump(&self, state: &RunState, record: &IterationRecord) -> Result<()> {
        let fmt = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let l = &record.losses;
        let dump = serde_json::json!({
            "stage": record.stage,
            "epoch": record.epoch,
            "iter": record.iter,
            "sequence": record.sequence,
            "lr": record.learning_rate,
            "grad_norm": record.grad_norm.to_string(),
            "l_sim": l.l_sim.to_string(),
            "l_con": l.l_con.to_string(),
            "l_smooth": l.l_smooth.to_string(),
            "l_total": l.l_total.to_string(),
            "per_t_sim": fmt(&l.per_t_sim),
            "per_t_con": fmt(&l.per_t_con),
            "per_t_smooth": fmt(&l.per_t_smooth),
            "last_checkpoint_iteration": state.iteration,
        });
        write_json(&self.dir.join(DUMP_FILE), &dump)
    }
}

fn diverged(run: Option<&RunDir<'_>>, state: &RunState, record: &IterationRecord, why: String) -> Error {
    if let Some(r) = run {
        if let Err(e) = r.dump(state, record) {
            log::error!("could not write divergence dump: {e}");
        }
    }
    Error::Divergence(format!(
        "stage {} iteration {} on {}: {why}",
        record.stage, record.iter, record.sequence
    ))
}

fn run_stage(
    stack: &mut StageStack,
    m: usize,
    data: &TrainingData,
    cfg: &TrainConfig,
    run: Option<&RunDir<'_>>,
    resume: Option<(RunState, Adam)>,
    opts: TrainOptions,
) -> Result<StageSummary> {
    stack.check_trainable(m)?;
    let (mut state, mut adam) = match resume {
        Some(r) => r,
        None => (
            RunState::start(m, cfg, mean_loss(stack, m, &data.train, &cfg.loss)?),
            Adam::new(cfg.adam),
        ),
    };
    let params = stack.stage(m)?.net.params().clone();
    let epochs = cfg.epochs_for(m);
    let cap = cfg.max_iterations.unwrap_or(u64::MAX);
    let mut records = Vec::new();
    let mut ran = 0usize;
    while !state.complete && state.epoch < epochs && state.iteration < cap {
        for i in epoch_order(state.order_seed, m, state.epoch, data.train.len()) {
            if state.iteration >= cap {
                break;
            }
            let sample = &data.train[i];
            let terms = stage_loss(stack, m, sample, &cfg.loss)?;
            let mut record = IterationRecord {
                stage: m,
                epoch: state.epoch + 1,
                iter: state.iteration + 1,
                sequence: sample.name.clone(),
                learning_rate: state.learning_rate,
                grad_norm: f64::NAN,
                losses: terms.breakdown()?,
            };
            if !record.losses.is_finite() {
                return Err(diverged(run, &state, &record, "non-finite loss".into()));
            }
            let grads = terms.l_total.backward()?;
            record.grad_norm = match adam.step(&params, &grads, state.learning_rate, cfg.clip_norm) {
                Ok(n) => n,
                Err(Error::Divergence(why)) => return Err(diverged(run, &state, &record, why)),
                Err(e) => return Err(e),
            };
            state.iteration += 1;
            if let Some(r) = run {
                r.log(&record, &cfg.loss)?;
            }
            records.push(record);
        }
        state.epoch += 1;
        let val = mean_loss(stack, m, data.validation(), &cfg.loss)?;
        if !val.is_finite() {
            let why = format!("stage {m} epoch {}: validation loss {val}", state.epoch);
            return Err(match records.last() {
                Some(last) => diverged(run, &state, last, why),
                None => Error::Divergence(why),
            });
        }
        state.learning_rate = state.plateau.observe(val, state.learning_rate, &cfg.lr_policy);
        state.adam_step = adam.step;
        log::info!(
            "stage {m} epoch {} iter {} val {val:.6} lr {:.3e}",
            state.epoch,
            state.iteration,
            state.learning_rate
        );
        ran += 1;
        let finished = state.epoch >= epochs || state.iteration >= cap;
        if !finished {
            if let Some(r) = run {
                r.checkpoint(stack, &state, &adam)?;
            }
            if opts.stop_after_epochs.is_some_and(|k| ran >= k) {
                return Ok(summary(&state, records, None));
            }
        }
    }
    state.complete = true;
    state.adam_step = adam.step;
    let final_loss = mean_loss(stack, m, &data.train, &cfg.loss)?;
    stack.set_frozen(m, true)?;
    if let Some(r) = run {
        r.checkpoint(stack, &state, &adam)?;
    }
    Ok(summary(&state, records, Some(final_loss)))
}

fn summary(state: &RunState, records: Vec<IterationRecord>, final_loss: Option<f64>) -> StageSummary {
    StageSummary {
        stage: state.stage,
        epochs: state.epoch,
        iterations: state.iteration,
        initial_loss: state.initial_loss,
        final_loss,
        best_val: state.plateau.best,
        learning_rate: state.learning_rate,
        records,
        complete: state.complete,
    }
}

/// Trains stage `m` of `stack` in memory with a fresh optimizer; every
/// earlier stage must already be frozen. Stage `m` is frozen on return.
pub fn train_stage(stack: &mut StageStack, m: usize, data: &TrainingData, cfg: &TrainConfig) -> Result<StageSummary> {
    cfg.validate()?;
    run_stage(stack, m, data, cfg, None, None, TrainOptions::default())
}

fn new_stack(cfg: &TrainConfig) -> Result<StageStack> {
    StageStack::init(&cfg.network, cfg.stages, cfg.seed, DType::F32, &Device::Cpu)
}

fn train_from(
    mut stack: StageStack,
    first: usize,
    resume: Option<(RunState, Adam)>,
    data: &TrainingData,
    cfg: &TrainConfig,
    run: Option<&RunDir<'_>>,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    let mut stages = Vec::new();
    let mut resume = resume;
    for m in first..=cfg.stages {
        let s = run_stage(&mut stack, m, data, cfg, run, resume.take(), opts)?;
        let done = s.complete;
        stages.push(s);
        if !done {
            break;
        }
    }
    Ok(TrainOutcome { stack, stages })
}

/// Trains every stage in order, in memory.
pub fn train_in_memory(cfg: &TrainConfig, data: &TrainingData) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_from(new_stack(cfg)?, 1, None, data, cfg, None, TrainOptions::default())
}

/// Trains every stage, writing artifacts to `run_dir`. `manifest_path` is
/// recorded so the run can be resumed or extended later.
pub fn train(cfg: &TrainConfig, manifest_path: &Path, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let data = TrainingData::load(&manifest, cfg.frames)?;
    let abs = fs::canonicalize(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    train_with_data(cfg, &data, run_dir, Some(&abs), TrainOptions::default())
}

/// As [`train`] with data already in memory.
pub fn train_with_data(
    cfg: &TrainConfig,
    data: &TrainingData,
    run_dir: &Path,
    manifest_path: Option<&Path>,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write_json(&run_dir.join(CONFIG_FILE), cfg)?;
    if let Some(p) = manifest_path {
        write_json(&run_dir.join(DATA_FILE), &DataFile { manifest: p.to_path_buf() })?;
    }
    let log = run_dir.join(LOG_FILE);
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    let run = RunDir { dir: run_dir };
    train_from(new_stack(cfg)?, 1, None, data, cfg, Some(&run), opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataFile {
    manifest: PathBuf,
}

/// Everything persisted in a run directory.
#[derive(Debug, Clone)]
pub struct RunCheckpoint {
    pub config: TrainConfig,
    pub stack: StageStack,
    pub state: RunState,
    pub adam: Adam,
}

impl RunCheckpoint {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let cfg_path = run_dir.join(CONFIG_FILE);
        if !cfg_path.is_file() {
            return Err(Error::Checkpoint(format!("missing {}", cfg_path.display())));
        }
        let config = TrainConfig::load(&cfg_path)?;
        let stack = StageStack::load(run_dir, DType::F32, &Device::Cpu)?;
        let state_path = run_dir.join(STATE_FILE);
        if !state_path.is_file() {
            return Err(Error::Checkpoint(format!("missing {}", state_path.display())));
        }
        let state: RunState = read_json(&state_path)?;
        if state.format_version != RUN_FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "run format {} (expected {RUN_FORMAT_VERSION})",
                state.format_version
            )));
        }
        let net = &stack.stage(state.stage)?.net;
        let adam = Adam::load(
            &run_dir.join(OPTIM_DIR),
            config.adam,
            state.adam_step,
            &net.params().shapes(),
            net.dtype(),
            net.device(),
        )?;
        Ok(Self {
            config,
            stack,
            state,
            adam,
        })
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        write_json(&run_dir.join(CONFIG_FILE), &self.config)?;
        RunDir { dir: run_dir }.checkpoint(&self.stack, &self.state, &self.adam)
    }
}

fn recorded_data(run_dir: &Path, frames: usize) -> Result<TrainingData> {
    let p = run_dir.join(DATA_FILE);
    if !p.is_file() {
        return Err(Error::NoData(format!("run {} records no dataset manifest", run_dir.display())));
    }
    let f: DataFile = read_json(&p)?;
    TrainingData::load(&DatasetManifest::load(&f.manifest)?, frames)
}

/// Continues an interrupted run from its last checkpoint.
pub fn resume(run_dir: &Path, data: Option<&TrainingData>, opts: TrainOptions) -> Result<TrainOutcome> {
    let ck = RunCheckpoint::load(run_dir)?;
    let loaded;
    let data = match data {
        Some(d) => d,
        None => {
            loaded = recorded_data(run_dir, ck.config.frames)?;
            &loaded
        }
    };
    let run = RunDir { dir: run_dir };
    run.trim_log(&ck.state)?;
    let m = ck.state.stage;
    if ck.state.complete {
        return train_from(ck.stack, m + 1, None, data, &ck.config, Some(&run), opts);
    }
    train_from(ck.stack, m, Some((ck.state, ck.adam)), data, &ck.config, Some(&run), opts)
}

/// Trains stage `m` of an existing run with a fresh optimizer, appending a
/// new stage when the stack has only `m - 1`. Earlier stages must be frozen;
/// `unfreeze` allows retraining a stage that was already frozen.
pub fn train_run_stage(
    run_dir: &Path,
    m: usize,
    unfreeze: bool,
    data: Option<&TrainingData>,
) -> Result<StageSummary> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    if !cfg_path.is_file() {
        return Err(Error::Checkpoint(format!("missing {}", cfg_path.display())));
    }
    let cfg = TrainConfig::load(&cfg_path)?;
    let mut stack = StageStack::load(run_dir, DType::F32, &Device::Cpu)?;
    if m == stack.len() + 1 {
        stack.push(UsseNet::new(cfg.network.clone(), stage_seed(cfg.seed, m), DType::F32, &Device::Cpu)?);
    }
    if unfreeze {
        stack.set_frozen(m, false)?;
    }
    stack.check_trainable(m)?;
    let loaded;
    let data = match data {
        Some(d) => d,
        None => {
            loaded = recorded_data(run_dir, cfg.frames)?;
            &loaded
        }
    };
    let run = RunDir { dir: run_dir };
    run_stage(&mut stack, m, data, &cfg, Some(&run), None, TrainOptions::default())
}

/// Parses `train_log.jsonl`.
pub fn read_train_log(run_dir: &Path) -> Result<Vec<serde_json::Value>> {
    let path = run_dir.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests;
