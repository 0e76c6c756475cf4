//! Differentiable tensor versions of the losses. Every map is a 2-D `(H, W)`
//! tensor; scalar results are rank-0 tensors.

use candle_core::{DType, Tensor};

use super::{LossBreakdown, LossConfig, PatchSpec};
use crate::error::{Error, Result};
use crate::fieldops::diff::warp;

fn patch_indices(h: usize, w: usize, spec: &PatchSpec) -> Result<(Vec<u32>, usize)> {
    let corners = spec.corners(h, w)?;
    let p = spec.patch_size;
    let mut idx = Vec::with_capacity(corners.len() * p * p);
    for &(r0, c0) in &corners {
        for r in r0..r0 + p {
            for c in c0..c0 + p {
                idx.push((r * w + c) as u32);
            }
        }
    }
    Ok((idx, corners.len()))
}

fn patches(t: &Tensor, idx: &Tensor, n: usize, pp: usize) -> Result<Tensor> {
    let flat = t.flatten_all()?.index_select(idx, 0)?.reshape((n, pp))?;
    Ok(flat.broadcast_sub(&flat.mean_keepdim(1)?)?)
}

pub fn lncc(a: &Tensor, b: &Tensor, spec: &PatchSpec) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("lncc of {:?} and {:?}", a.dims(), b.dims())));
    }
    let (h, w) = a.dims2()?;
    let (idx, n) = patch_indices(h, w, spec)?;
    let pp = spec.patch_size * spec.patch_size;
    let idx = Tensor::from_vec(idx, n * pp, a.device())?;
    let a0 = patches(a, &idx, n, pp)?;
    let b0 = patches(b, &idx, n, pp)?;
    let eps2 = spec.epsilon * spec.epsilon;
    let num = (&a0 * &b0)?.sum(1)?;
    let da = a0.sqr()?.sum(1)?.affine(1.0, eps2)?.sqrt()?;
    let db = b0.sqr()?.sum(1)?.affine(1.0, eps2)?.sqrt()?;
    Ok((num / (da * db)?)?.mean_all()?)
}

fn stack_mean(items: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::stack(items, 0)?.mean_all()?)
}

pub fn similarity_loss(pre: &Tensor, warped_posts: &[Tensor], spec: &PatchSpec) -> Result<(Tensor, Vec<Tensor>)> {
    if warped_posts.is_empty() {
        return Err(Error::Shape("similarity loss: empty sequence".into()));
    }
    let per_t = warped_posts
        .iter()
        .map(|f| Ok(lncc(f, pre, spec)?.affine(-1.0, 1.0)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((stack_mean(&per_t)?, per_t))
}

/// Each strain map is warped by its own `(d_y, d_x)`. The first entry of the
/// per-step list is a constant zero.
pub fn consistency_loss(
    strains: &[Tensor],
    disps: &[(Tensor, Tensor)],
    spec: &PatchSpec,
    literal: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    if strains.len() != disps.len() || strains.is_empty() {
        return Err(Error::Shape(format!(
            "{} strain maps for {} displacement fields",
            strains.len(),
            disps.len()
        )));
    }
    let compensated = strains
        .iter()
        .zip(disps)
        .map(|(z, (dy, dx))| warp(z, dy, dx))
        .collect::<Result<Vec<_>>>()?;
    let zero = Tensor::zeros((), strains[0].dtype(), strains[0].device())?;
    let mut per_t = vec![zero.clone()];
    for t in 1..strains.len() {
        let rho = lncc(&compensated[t], &compensated[t - 1], spec)?;
        per_t.push(if literal { rho } else { rho.affine(-1.0, 1.0)? });
    }
    let total = if per_t.len() < 2 {
        zero
    } else {
        stack_mean(&per_t[1..])?
    };
    Ok((total, per_t))
}

pub fn second_order_magnitude(d: &Tensor) -> Result<Tensor> {
    let (h, w) = d.dims2()?;
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("smoothness needs at least 3x3, got {h}x{w}")));
    }
    let (hi, wi) = (h - 2, w - 2);
    let at = |r: usize, c: usize| -> Result<Tensor> { Ok(d.narrow(0, r, hi)?.narrow(1, c, wi)?) };
    let centre = at(1, 1)?;
    let dxx = ((at(1, 2)? + at(1, 0)?)? - centre.affine(2.0, 0.0)?)?;
    let dyy = ((at(2, 1)? + at(0, 1)?)? - centre.affine(2.0, 0.0)?)?;
    let gx = (d.narrow(1, 2, wi)? - d.narrow(1, 0, wi)?)?.affine(0.5, 0.0)?;
    let dxy = (gx.narrow(0, 2, hi)? - gx.narrow(0, 0, hi)?)?.affine(0.5, 0.0)?;
    let gy = (d.narrow(0, 2, hi)? - d.narrow(0, 0, hi)?)?.affine(0.5, 0.0)?;
    let dyx = (gy.narrow(1, 2, wi)? - gy.narrow(1, 0, wi)?)?.affine(0.5, 0.0)?;
    let sum = (((dxx.abs()? + dxy.abs()?)? + dyy.abs()?)? + dyx.abs()?)?;
    Ok(sum.mean_all()?)
}

pub fn smoothness_loss(disps: &[(Tensor, Tensor)]) -> Result<(Tensor, Vec<Tensor>)> {
    if disps.is_empty() {
        return Err(Error::Shape("smoothness loss: empty sequence".into()));
    }
    let per_t = disps
        .iter()
        .map(|(dy, dx)| Ok((second_order_magnitude(dy)? + second_order_magnitude(dx)?)?.affine(0.5, 0.0)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((stack_mean(&per_t)?, per_t))
}

pub struct LossTerms {
    pub l_sim: Tensor,
    pub l_con: Tensor,
    pub l_smooth: Tensor,
    pub l_total: Tensor,
    pub per_t_sim: Vec<Tensor>,
    pub per_t_con: Vec<Tensor>,
    pub per_t_smooth: Vec<Tensor>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn scalars(ts: &[Tensor]) -> Result<Vec<f64>> {
    ts.iter().map(scalar).collect()
}

impl LossTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            l_sim: scalar(&self.l_sim)?,
            l_con: scalar(&self.l_con)?,
            l_smooth: scalar(&self.l_smooth)?,
            l_total: scalar(&self.l_total)?,
            per_t_sim: scalars(&self.per_t_sim)?,
            per_t_con: scalars(&self.per_t_con)?,
            per_t_smooth: scalars(&self.per_t_smooth)?,
        })
    }
}

pub fn loss_terms(
    pre: &Tensor,
    warped_posts: &[Tensor],
    strains: &[Tensor],
    disps: &[(Tensor, Tensor)],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let (l_sim, per_t_sim) = similarity_loss(pre, warped_posts, &cfg.patch)?;
    let (l_con, per_t_con) = consistency_loss(strains, disps, &cfg.patch, cfg.literal_consistency)?;
    let (l_smooth, per_t_smooth) = smoothness_loss(disps)?;
    let w = cfg.weights;
    let l_total = ((l_sim.affine(w.alpha, 0.0)? + l_con.affine(w.beta, 0.0)?)? + l_smooth.affine(w.gamma, 0.0)?)?;
    Ok(LossTerms {
        l_sim,
        l_con,
        l_smooth,
        l_total,
        per_t_sim,
        per_t_con,
        per_t_smooth,
    })
}
