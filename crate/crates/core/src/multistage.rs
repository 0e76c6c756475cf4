//! Residual stage stacking. Stage `m` sees the pre frame and the previous
//! stage's estimated pre frame, predicts a residual displacement and adds it
//! to the running total. Earlier stages stay frozen while a later one trains.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldops::diff::lsqse_strain;
use crate::fieldops::{self, compose_residual, DisplacementField, StrainMap};
use crate::network::{NetworkConfig, StepTensors, UsseNet};
use crate::rfdata::{read_json, write_json, RfFrame, RfSequence};

pub use crate::harness::train_stage;

pub const STACK_FORMAT_VERSION: u32 = 1;

/// Default relative displacement change below which another stage is not
/// worth adding.
pub const DEFAULT_TAU_REL: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Stage {
    pub net: UsseNet,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct StageStack {
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackEntry {
    dir: String,
    frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackFile {
    format_version: u32,
    stages: Vec<StackEntry>,
}

/// Stage directory name for 1-based stage `m`.
pub fn stage_dir_name(m: usize) -> String {
    format!("stage{m}")
}

/// Seed used to initialize stage `m` of a run seeded with `seed`.
pub fn stage_seed(seed: u64, m: usize) -> u64 {
    seed.wrapping_add((m as u64 - 1).wrapping_mul(0x5851_f42d_4c95_7f2d))
}

/// FNV-1a over the `f32` bytes of every parameter, in name order.
pub fn param_checksum(net: &UsseNet) -> Result<u64> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, var) in net.params().iter() {
        let vals: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for b in name.bytes().chain(vals.iter().flat_map(|v| v.to_le_bytes())) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    Ok(h)
}

impl StageStack {
    pub fn new(first: UsseNet) -> Self {
        Self {
            stages: vec![Stage {
                net: first,
                frozen: false,
            }],
        }
    }

    /// A freshly initialized `m`-stage stack sharing one configuration.
    pub fn init(cfg: &NetworkConfig, stages: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Configuration("stack needs at least one stage".into()));
        }
        let stages = (1..=stages)
            .map(|m| {
                Ok(Stage {
                    net: UsseNet::new(cfg.clone(), stage_seed(seed, m), dtype, device)?,
                    frozen: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn push(&mut self, net: UsseNet) {
        self.stages.push(Stage { net, frozen: false });
    }

    fn index(&self, m: usize) -> Result<usize> {
        if m == 0 || m > self.stages.len() {
            return Err(Error::Configuration(format!(
                "stage {m} outside 1..={}",
                self.stages.len()
            )));
        }
        Ok(m - 1)
    }

    pub fn stage(&self, m: usize) -> Result<&Stage> {
        Ok(&self.stages[self.index(m)?])
    }

    pub fn set_frozen(&mut self, m: usize, frozen: bool) -> Result<()> {
        let i = self.index(m)?;
        self.stages[i].frozen = frozen;
        Ok(())
    }

    /// Stage `m` may train only if it is unfrozen and every earlier stage is
    /// frozen.
    pub fn check_trainable(&self, m: usize) -> Result<()> {
        let i = self.index(m)?;
        if self.stages[i].frozen {
            return Err(Error::FreezeViolation(format!("stage {m} is frozen")));
        }
        if let Some(k) = self.stages[..i].iter().position(|s| !s.frozen) {
            return Err(Error::FreezeViolation(format!(
                "stage {} must be frozen before stage {m} trains",
                k + 1
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Configuration("empty stage stack".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let name = stage_dir_name(i + 1);
            s.net.save(&dir.join(&name))?;
            entries.push(StackEntry {
                dir: name,
                frozen: s.frozen,
            });
        }
        write_json(
            &dir.join("stack.json"),
            &StackFile {
                format_version: STACK_FORMAT_VERSION,
                stages: entries,
            },
        )
    }

    /// Writes only stage `m` and the stack index.
    pub fn save_stage(&self, dir: &Path, m: usize) -> Result<()> {
        let i = self.index(m)?;
        self.stages[i].net.save(&dir.join(stage_dir_name(m)))?;
        self.save_index(dir)
    }

    pub fn save_index(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(
            &dir.join("stack.json"),
            &StackFile {
                format_version: STACK_FORMAT_VERSION,
                stages: self
                    .stages
                    .iter()
                    .enumerate()
                    .map(|(i, s)| StackEntry {
                        dir: stage_dir_name(i + 1),
                        frozen: s.frozen,
                    })
                    .collect(),
            },
        )
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let path = dir.join("stack.json");
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("missing {}", path.display())));
        }
        let file: StackFile = read_json(&path)?;
        if file.format_version != STACK_FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "stack format {} (expected {STACK_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let stages = file
            .stages
            .iter()
            .map(|e| {
                let p: PathBuf = dir.join(&e.dir);
                Ok(Stage {
                    net: UsseNet::load(&p, dtype, device)?,
                    frozen: e.frozen,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stack = Self { stages };
        stack.validate()?;
        Ok(stack)
    }
}

/// One stage at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStep {
    /// Composed displacement `D^{t,m}`.
    pub displacement: DisplacementField,
    pub residual: DisplacementField,
    pub strain: StrainMap,
    /// Frame the stage consumed as its post frame.
    pub input_post: RfFrame,
    /// Stage input warped by the residual: the stage's estimated pre frame.
    pub warped: RfFrame,
}

/// `stages[m - 1][t - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub stages: Vec<Vec<StageStep>>,
}

impl StageOutput {
    pub fn final_stage(&self) -> &[StageStep] {
        self.stages.last().expect("non-empty stack")
    }

    pub fn displacements(&self, m: usize) -> Vec<DisplacementField> {
        self.stages[m - 1].iter().map(|s| s.displacement.clone()).collect()
    }

    /// Mean `|D^{t,m} - D^{t,m-1}|` per step, for `m >= 2`.
    pub fn stage_change(&self, m: usize) -> Vec<f64> {
        self.stages[m - 1]
            .iter()
            .zip(&self.stages[m - 2])
            .map(|(a, b)| a.displacement.mean_abs_difference(&b.displacement))
            .collect()
    }
}

pub fn musse_forward(seq: &RfSequence, stack: &StageStack) -> Result<StageOutput> {
    stack.validate()?;
    seq.validate()?;
    let (h, w) = seq.shape();
    let mut inputs: Vec<RfFrame> = seq.posts.clone();
    let mut totals = vec![DisplacementField::zeros(h, w); seq.len()];
    let mut stages = Vec::with_capacity(stack.len());
    for (i, stage) in stack.stages.iter().enumerate() {
        let stage_seq = RfSequence {
            pre: seq.pre.clone(),
            posts: inputs.clone(),
            ground_truth: None,
            source_id: seq.source_id.clone(),
        };
        let out = stage.net.forward(&stage_seq)?;
        let mut steps = Vec::with_capacity(seq.len());
        for (t, step) in out.steps.into_iter().enumerate() {
            let displacement = if i == 0 {
                step.displacement.clone()
            } else {
                compose_residual(&totals[t], &step.displacement)?
            };
            let strain = if i == 0 {
                step.strain
            } else {
                fieldops::lsqse_strain(&displacement.d_y, stage.net.config().lsqse)?
            };
            totals[t] = displacement.clone();
            steps.push(StageStep {
                displacement,
                residual: step.displacement,
                strain,
                input_post: inputs[t].clone(),
                warped: step.warped,
            });
        }
        inputs = steps.iter().map(|s| s.warped.clone()).collect();
        stages.push(steps);
    }
    Ok(StageOutput { stages })
}

/// Differentiable outputs of stage `m`; earlier stages run detached.
/// `warped` is stage `m`'s input warped by its residual, `d_y`/`d_x` the
/// composed displacement and `strain` its LSQSE strain.
pub fn stage_tensors(stack: &StageStack, m: usize, pre: &Tensor, posts: &[Tensor]) -> Result<Vec<StepTensors>> {
    let idx = stack.index(m)?;
    let mut inputs: Vec<Tensor> = posts.to_vec();
    let mut base: Option<Vec<(Tensor, Tensor)>> = None;
    for stage in &stack.stages[..idx] {
        let out = stage.net.forward_tensors(pre, &inputs)?;
        inputs = out.iter().map(|s| s.warped.detach()).collect();
        base = Some(match base {
            None => out.iter().map(|s| (s.d_y.detach(), s.d_x.detach())).collect(),
            Some(prev) => prev
                .iter()
                .zip(&out)
                .map(|((by, bx), s)| Ok(((by + s.d_y.detach())?, (bx + s.d_x.detach())?)))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    let net = &stack.stages[idx].net;
    let out = net.forward_tensors(pre, &inputs)?;
    match base {
        None => Ok(out),
        Some(base) => out
            .into_iter()
            .zip(base)
            .map(|(s, (by, bx))| {
                let d_y = (by + &s.d_y)?;
                let d_x = (bx + &s.d_x)?;
                Ok(StepTensors {
                    strain: lsqse_strain(&d_y, net.config().lsqse)?,
                    d_y,
                    d_x,
                    warped: s.warped,
                    increments: s.increments,
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSelection {
    pub m_opt: usize,
    /// False when no stage met the threshold and `M` was returned.
    pub converged: bool,
    /// Relative change of stage `m` over `m - 1`, for `m = 2..=M`.
    pub relative_changes: Vec<f64>,
}

/// Smallest `m` whose mean displacement change relative to the previous
/// stage is below `tau_rel`.
pub fn select_m_opt(per_stage_disps: &[Vec<DisplacementField>], tau_rel: f64) -> Result<StageSelection> {
    let big_m = per_stage_disps.len();
    if big_m < 2 {
        return Err(Error::InsufficientStages(format!(
            "need at least 2 stages, got {big_m}"
        )));
    }
    if !(tau_rel > 0.0) {
        return Err(Error::Parameter(format!("tau_rel {tau_rel} must be positive")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut changes = Vec::new();
    for m in 2..=big_m {
        let (cur, prev) = (&per_stage_disps[m - 1], &per_stage_disps[m - 2]);
        if cur.len() != prev.len() || cur.is_empty() {
            return Err(Error::Shape(format!(
                "stage {m} has {} fields, stage {} has {}",
                cur.len(),
                m - 1,
                prev.len()
            )));
        }
        let diff = mean(&cur.iter().zip(prev).map(|(a, b)| a.mean_abs_difference(b)).collect::<Vec<_>>());
        let mag = mean(&cur.iter().map(|d| d.mean_abs()).collect::<Vec<_>>());
        let rel = diff / mag.max(1e-12);
        changes.push(rel);
        if rel < tau_rel {
            return Ok(StageSelection {
                m_opt: m,
                converged: true,
                relative_changes: changes,
            });
        }
    }
    log::warn!("no stage change fell below tau_rel={tau_rel}; using M={big_m}");
    Ok(StageSelection {
        m_opt: big_m,
        converged: false,
        relative_changes: changes,
    })
}
