//! Differentiable tensor versions of the field operations.
//!
//! Frames, strain maps and displacement components are 2-D `(H, W)` tensors.
//! Gradients flow through sample values and through the fractional
//! interpolation weights; the integer cell indices are treated as constants.

use candle_core::{DType, Device, Tensor};

use super::{Grid, LsqseConfig};
use crate::error::{Error, Result};

pub fn grid_to_tensor(grid: &Grid, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = grid.dim();
    let data: Vec<f64> = grid.iter().copied().collect();
    Ok(Tensor::from_vec(data, (h, w), device)?.to_dtype(dtype)?)
}

/// Converts a tensor with exactly two non-unit trailing dims into a grid.
pub fn tensor_to_grid(t: &Tensor) -> Result<Grid> {
    let dims = t.dims();
    if dims.len() < 2 || dims[..dims.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::Shape(format!("expected a single 2-D map, got {dims:?}")));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let data: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(Grid::from_shape_vec((h, w), data).expect("element count"))
}

fn matrix(data: Vec<f64>, rows: usize, cols: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), like.device())?.to_dtype(like.dtype())?)
}

/// Row-wise linear interpolation weights of source coordinate `u` on an
/// `n`-node axis, written into `row`.
fn put_linear(row: &mut [f64], u: f64) {
    let n = row.len();
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n.saturating_sub(2));
    let frac = u - i0 as f64;
    row[i0] += 1.0 - frac;
    if n > 1 {
        row[i0 + 1] += frac;
    }
}

/// `((n-1)f+1) x n` align-corners interpolation matrix.
pub fn align_corners_matrix(n: usize, factor: usize) -> (Vec<f64>, usize) {
    let rows = (n - 1) * factor + 1;
    let mut data = vec![0.0; rows * n];
    for i in 0..rows {
        put_linear(&mut data[i * n..(i + 1) * n], i as f64 / factor as f64);
    }
    (data, rows)
}

/// `(n f) x n` half-pixel interpolation matrix (fine pixel centers at
/// `(i + 0.5) / f - 0.5` in coarse coordinates).
pub fn half_pixel_matrix(n: usize, factor: usize) -> Vec<f64> {
    let rows = n * factor;
    let mut data = vec![0.0; rows * n];
    for i in 0..rows {
        let u = (i as f64 + 0.5) / factor as f64 - 0.5;
        put_linear(&mut data[i * n..(i + 1) * n], u);
    }
    data
}

/// Align-corners bilinear upsampling of an `(H, W)` map.
pub fn upsample_align_corners(map: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if factor == 1 {
        return Ok(map.clone());
    }
    let (uh, hf) = align_corners_matrix(h, factor);
    let (uw, wf) = align_corners_matrix(w, factor);
    let uh = matrix(uh, hf, h, map)?;
    let uw_t = matrix(uw, wf, w, map)?.t()?;
    Ok(uh.matmul(map)?.matmul(&uw_t)?)
}

/// Half-pixel bilinear upsampling over the last two dims of `(.., h, w)`.
pub fn upsample_half_pixel(t: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(t.clone());
    }
    let dims = t.dims().to_vec();
    let rank = dims.len();
    if rank < 2 {
        return Err(Error::Shape(format!("cannot upsample a rank-{rank} tensor")));
    }
    let (h, w) = (dims[rank - 2], dims[rank - 1]);
    let lead: usize = dims[..rank - 2].iter().product();
    let uh = matrix(half_pixel_matrix(h, factor), h * factor, h, t)?;
    let uw_t = matrix(half_pixel_matrix(w, factor), w * factor, w, t)?.t()?;
    let x = t.reshape((lead, h, w))?;
    let y = uh.broadcast_matmul(&x)?.broadcast_matmul(&uw_t)?;
    let mut out_dims = dims;
    out_dims[rank - 2] = h * factor;
    out_dims[rank - 1] = w * factor;
    Ok(y.reshape(out_dims)?)
}

fn coordinate_grids(h: usize, w: usize, like: &Tensor) -> Result<(Tensor, Tensor)> {
    let rows: Vec<f64> = (0..h * w).map(|i| (i / w) as f64).collect();
    let cols: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
    Ok((matrix(rows, h, w, like)?, matrix(cols, h, w, like)?))
}

/// Bilinear gather from `src` `(Hs, Ws)` at fractional coordinates `ys`, `xs`
/// (any common shape), clamped to the border of `src`.
pub fn sample_bilinear(src: &Tensor, ys: &Tensor, xs: &Tensor) -> Result<Tensor> {
    let (hs, ws) = src.dims2()?;
    if ys.dims() != xs.dims() {
        return Err(Error::Shape(format!(
            "coordinate shapes differ: {:?} vs {:?}",
            ys.dims(),
            xs.dims()
        )));
    }
    let shape = ys.dims().to_vec();
    let ys = ys.clamp(0f64, (hs - 1) as f64)?;
    let xs = xs.clamp(0f64, (ws - 1) as f64)?;
    let yv: Vec<f64> = ys.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let xv: Vec<f64> = xs.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let n = yv.len();
    let (mut y0, mut x0) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut idx = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    let dy_step = if hs > 1 { ws } else { 0 };
    let dx_step = usize::from(ws > 1);
    for (&y, &x) in yv.iter().zip(xv.iter()) {
        let iy = (y.floor() as usize).min(hs.saturating_sub(2));
        let ix = (x.floor() as usize).min(ws.saturating_sub(2));
        y0.push(iy as f64);
        x0.push(ix as f64);
        let base = iy * ws + ix;
        idx[0].push(base as u32);
        idx[1].push((base + dx_step) as u32);
        idx[2].push((base + dy_step) as u32);
        idx[3].push((base + dy_step + dx_step) as u32);
    }
    let device = src.device();
    let dtype = src.dtype();
    let y0 = Tensor::from_vec(y0, shape.as_slice(), device)?.to_dtype(dtype)?;
    let x0 = Tensor::from_vec(x0, shape.as_slice(), device)?.to_dtype(dtype)?;
    let wy = (ys - y0)?;
    let wx = (xs - x0)?;
    let one_wy = wy.affine(-1.0, 1.0)?;
    let one_wx = wx.affine(-1.0, 1.0)?;
    let flat = src.flatten_all()?;
    let gather = |ix: Vec<u32>| -> Result<Tensor> {
        let ix = Tensor::from_vec(ix, n, device)?;
        Ok(flat.index_select(&ix, 0)?.reshape(shape.as_slice())?)
    };
    let [i00, i01, i10, i11] = idx;
    let v00 = gather(i00)?;
    let v01 = gather(i01)?;
    let v10 = gather(i10)?;
    let v11 = gather(i11)?;
    let top = ((v00 * &one_wx)? + (v01 * &wx)?)?;
    let bottom = ((v10 * &one_wx)? + (v11 * &wx)?)?;
    Ok(((top * one_wy)? + (bottom * wy)?)?)
}

fn check_same(frame: &Tensor, d_y: &Tensor, d_x: &Tensor) -> Result<(usize, usize)> {
    let hw = frame.dims2()?;
    if d_y.dims() != frame.dims() || d_x.dims() != frame.dims() {
        return Err(Error::Shape(format!(
            "frame {:?}, d_y {:?}, d_x {:?}",
            frame.dims(),
            d_y.dims(),
            d_x.dims()
        )));
    }
    Ok(hw)
}

/// `out(r, c) = frame(r + d_y, c + d_x)`.
pub fn warp(frame: &Tensor, d_y: &Tensor, d_x: &Tensor) -> Result<Tensor> {
    let (h, w) = check_same(frame, d_y, d_x)?;
    let (rows, cols) = coordinate_grids(h, w, frame)?;
    sample_bilinear(frame, &(rows + d_y)?, &(cols + d_x)?)
}

/// Upsampled warping. Only the fine nodes that survive the align-corners
/// resize back to `(H, W)` are evaluated; at those nodes the upsampled
/// displacement equals `factor * d`, so the fine sample position is
/// `factor * (r + d_y)`.
pub fn warp_upsampled(frame: &Tensor, d_y: &Tensor, d_x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Parameter("upsample factor must be >= 1".into()));
    }
    let (h, w) = check_same(frame, d_y, d_x)?;
    if factor == 1 {
        return warp(frame, d_y, d_x);
    }
    let fine = upsample_align_corners(frame, factor)?;
    let (rows, cols) = coordinate_grids(h, w, frame)?;
    let f = factor as f64;
    let ys = (rows + d_y)?.affine(f, 0.0)?;
    let xs = (cols + d_x)?.affine(f, 0.0)?;
    sample_bilinear(&fine, &ys, &xs)
}

/// Banded `H x H` operator whose product with `d_y` gives the per-column
/// least-squares slope.
pub fn lsqse_operator(h: usize, cfg: LsqseConfig) -> Result<Vec<f64>> {
    cfg.validate(h)?;
    let k = cfg.window;
    let half = (k / 2) as f64;
    let denom: f64 = (0..k).map(|i| (i as f64 - half).powi(2)).sum();
    let mut data = vec![0.0; h * h];
    for r in 0..h {
        let start = cfg.window_start(r, h);
        for i in 0..k {
            data[r * h + start + i] = (i as f64 - half) / denom;
        }
    }
    Ok(data)
}

pub fn lsqse_slope(d_y: &Tensor, cfg: LsqseConfig) -> Result<Tensor> {
    let (h, _) = d_y.dims2()?;
    let op = matrix(lsqse_operator(h, cfg)?, h, h, d_y)?;
    Ok(op.matmul(d_y)?)
}

/// Compression-positive axial strain, `-slope`.
pub fn lsqse_strain(d_y: &Tensor, cfg: LsqseConfig) -> Result<Tensor> {
    Ok(lsqse_slope(d_y, cfg)?.neg()?)
}
