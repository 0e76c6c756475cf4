//! Unsupervised training losses: patchwise normalized cross-correlation
//! similarity, temporal strain consistency and second-order displacement
//! smoothness, combined by fixed coupling weights.
//!
//! This module evaluates the losses on plain grids. [`diff`] builds the same
//! quantities as differentiable tensors for training.

pub mod diff;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldops::{warp_grid, DisplacementField, Grid, StrainMap};
use crate::rfdata::RfFrame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
    pub epsilon: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: 9,
            stride: 9,
            epsilon: 1e-5,
        }
    }
}

impl PatchSpec {
    pub fn new(patch_size: usize, epsilon: f64) -> Self {
        Self {
            patch_size,
            stride: patch_size,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size % 2 == 0 {
            return Err(Error::Parameter(format!(
                "patch size {} must be odd and >= 3",
                self.patch_size
            )));
        }
        if self.stride == 0 {
            return Err(Error::Parameter("patch stride must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-2) {
            return Err(Error::Parameter(format!(
                "epsilon {} outside (0, 1e-2]",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Top-left corners of the tiled patches along an axis of length `n`.
    pub fn starts(&self, n: usize) -> Vec<usize> {
        if n < self.patch_size {
            return Vec::new();
        }
        (0..=n - self.patch_size).step_by(self.stride).collect()
    }

    /// Patch corners for an `h x w` grid, row-major.
    pub fn corners(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let rows = self.starts(h);
        let cols = self.starts(w);
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::Shape(format!(
                "no {0}x{0} patch fits in {h}x{w}",
                self.patch_size
            )));
        }
        Ok(rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.2,
            gamma: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Parameter(format!(
                "loss weights {all:?} must be non-negative with a positive sum"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossConfig {
    #[serde(default)]
    pub patch: PatchSpec,
    #[serde(default)]
    pub weights: LossWeights,
    /// Use `lncc` itself instead of `1 - lncc` as the per-step consistency
    /// term.
    #[serde(default)]
    pub literal_consistency: bool,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sim: f64,
    pub l_con: f64,
    pub l_smooth: f64,
    pub l_total: f64,
    pub per_t_sim: Vec<f64>,
    /// Entry 0 is always 0: the first step has no predecessor.
    pub per_t_con: Vec<f64>,
    pub per_t_smooth: Vec<f64>,
}

impl LossBreakdown {
    /// Weighted per-step contributions.
    pub fn per_t_total(&self, w: &LossWeights) -> Vec<f64> {
        (0..self.per_t_sim.len())
            .map(|t| {
                total_loss(
                    self.per_t_sim[t],
                    self.per_t_con.get(t).copied().unwrap_or(0.0),
                    self.per_t_smooth.get(t).copied().unwrap_or(0.0),
                    w,
                )
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        [self.l_sim, self.l_con, self.l_smooth, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// One JSON trace line (no trailing newline).
    pub fn trace_line(&self, iter: u64, w: &LossWeights) -> String {
        serde_json::json!({
            "iter": iter,
            "t": self.per_t_total(w),
            "l_sim": self.l_sim,
            "l_con": self.l_con,
            "l_smooth": self.l_smooth,
            "l_total": self.l_total,
        })
        .to_string()
    }
}

fn patch_correlation(a: &Grid, b: &Grid, r0: usize, c0: usize, p: usize, eps: f64) -> f64 {
    let n = (p * p) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for r in r0..r0 + p {
        for c in c0..c0 + p {
            sa += a[[r, c]];
            sb += b[[r, c]];
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for r in r0..r0 + p {
        for c in c0..c0 + p {
            let x = a[[r, c]] - ma;
            let y = b[[r, c]] - mb;
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
    }
    ab / ((aa + eps * eps).sqrt() * (bb + eps * eps).sqrt())
}

/// Mean over tiled patches of the normalized correlation of zero-meaned
/// patches.
pub fn lncc(a: &Grid, b: &Grid, spec: &PatchSpec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("lncc of {:?} and {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    let corners = spec.corners(h, w)?;
    let sum: f64 = corners
        .iter()
        .map(|&(r, c)| patch_correlation(a, b, r, c, spec.patch_size, spec.epsilon))
        .sum();
    Ok(sum / corners.len() as f64)
}

fn nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Shape(format!("{what}: empty sequence")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn similarity_loss(pre: &RfFrame, warped_posts: &[RfFrame], spec: &PatchSpec) -> Result<(f64, Vec<f64>)> {
    nonempty(warped_posts, "similarity loss")?;
    let per_t = warped_posts
        .iter()
        .map(|f| Ok(1.0 - lncc(&f.samples, &pre.samples, spec)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((mean(&per_t), per_t))
}

fn consistency_term(rho: f64, literal: bool) -> f64 {
    if literal {
        rho
    } else {
        1.0 - rho
    }
}

/// Each strain map is warped with its own displacement field before the
/// comparison with its predecessor.
pub fn consistency_loss(
    strains: &[StrainMap],
    disps: &[DisplacementField],
    spec: &PatchSpec,
    literal: bool,
) -> Result<(f64, Vec<f64>)> {
    if strains.len() != disps.len() {
        return Err(Error::Shape(format!(
            "{} strain maps for {} displacement fields",
            strains.len(),
            disps.len()
        )));
    }
    nonempty(strains, "consistency loss")?;
    let compensated = strains
        .iter()
        .zip(disps)
        .map(|(z, d)| warp_grid(&z.z, d))
        .collect::<Result<Vec<_>>>()?;
    let mut per_t = vec![0.0; strains.len()];
    for t in 1..strains.len() {
        per_t[t] = consistency_term(lncc(&compensated[t], &compensated[t - 1], spec)?, literal);
    }
    let total = if strains.len() < 2 {
        0.0
    } else {
        mean(&per_t[1..])
    };
    Ok((total, per_t))
}

/// Mean over the interior of `|d2x| + |dxdy| + |d2y| + |dydx|` for one
/// component.
pub fn second_order_magnitude(d: &Grid) -> Result<f64> {
    let (h, w) = d.dim();
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("smoothness needs at least 3x3, got {h}x{w}")));
    }
    let mut sum = 0.0;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let dxx = d[[r, c + 1]] - 2.0 * d[[r, c]] + d[[r, c - 1]];
            let dyy = d[[r + 1, c]] - 2.0 * d[[r, c]] + d[[r - 1, c]];
            let gx = |rr: usize| (d[[rr, c + 1]] - d[[rr, c - 1]]) / 2.0;
            let gy = |cc: usize| (d[[r + 1, cc]] - d[[r - 1, cc]]) / 2.0;
            let dxy = (gx(r + 1) - gx(r - 1)) / 2.0;
            let dyx = (gy(c + 1) - gy(c - 1)) / 2.0;
            sum += dxx.abs() + dxy.abs() + dyy.abs() + dyx.abs();
        }
    }
    Ok(sum / ((h - 2) * (w - 2)) as f64)
}

pub fn smoothness_loss(disps: &[DisplacementField]) -> Result<(f64, Vec<f64>)> {
    nonempty(disps, "smoothness loss")?;
    let per_t = disps
        .iter()
        .map(|d| {
            d.validate()?;
            Ok((second_order_magnitude(&d.d_y)? + second_order_magnitude(&d.d_x)?) / 2.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mean(&per_t), per_t))
}

pub fn total_loss(l_sim: f64, l_con: f64, l_smooth: f64, w: &LossWeights) -> f64 {
    w.alpha * l_sim + w.beta * l_con + w.gamma * l_smooth
}

/// All three losses and their total for one sequence.
pub fn evaluate_losses(
    pre: &RfFrame,
    warped_posts: &[RfFrame],
    strains: &[StrainMap],
    disps: &[DisplacementField],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let (l_sim, per_t_sim) = similarity_loss(pre, warped_posts, &cfg.patch)?;
    let (l_con, per_t_con) = consistency_loss(strains, disps, &cfg.patch, cfg.literal_consistency)?;
    let (l_smooth, per_t_smooth) = smoothness_loss(disps)?;
    Ok(LossBreakdown {
        l_sim,
        l_con,
        l_smooth,
        l_total: total_loss(l_sim, l_con, l_smooth, &cfg.weights),
        per_t_sim,
        per_t_con,
        per_t_smooth,
    })
}
