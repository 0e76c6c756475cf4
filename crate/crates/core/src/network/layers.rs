//! Functional layers over a [`ParamSet`]. Feature maps are `(1, C, H, W)`.

use candle_core::{DType, Device, Tensor};

use super::params::ParamSet;
use crate::error::Result;

pub(crate) struct Builder<'a> {
    pub params: &'a mut ParamSet,
    pub seed: u64,
    pub dtype: DType,
    pub device: &'a Device,
}

impl Builder<'_> {
    /// `(cout, cin, k, k)` weight with He-normal scale times `gain`, plus an
    /// optional zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool, gain: f64) -> Result<()> {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        self.params
            .init_normal(&format!("{name}.weight"), &[cout, cin, k, k], std, self.seed, self.dtype, self.device)?;
        if bias {
            self.params
                .init_constant(&format!("{name}.bias"), &[cout], 0.0, self.dtype, self.device)?;
        }
        Ok(())
    }

    /// 2x2 stride-2 transposed convolution, weight `(cin, cout, 2, 2)`.
    pub fn tconv(&mut self, name: &str, cin: usize, cout: usize) -> Result<()> {
        let std = (2.0 / cin as f64).sqrt();
        self.params
            .init_normal(&format!("{name}.weight"), &[cin, cout, 2, 2], std, self.seed, self.dtype, self.device)?;
        self.params
            .init_constant(&format!("{name}.bias"), &[cout], 0.0, self.dtype, self.device)
    }
}

fn add_bias(ps: &ParamSet, name: &str, y: Tensor) -> Result<Tensor> {
    let key = format!("{name}.bias");
    if !ps.contains(&key) {
        return Ok(y);
    }
    let b = ps.get(&key)?;
    let c = b.dims1()?;
    Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
}

pub(crate) fn conv(ps: &ParamSet, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.weight"))?;
    let k = w.dims()[2];
    let y = x.conv2d(w, k / 2, stride, 1, 1)?;
    add_bias(ps, name, y)
}

pub(crate) fn tconv(ps: &ParamSet, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.weight"))?;
    let (cin, cout, _, _) = w.dims4()?;
    let (_, _, h, wd) = x.dims4()?;
    let cols = x.reshape((cin, h * wd))?;
    let y = w.reshape((cin, cout * 4))?.t()?.matmul(&cols)?;
    let y = y
        .reshape((cout, 2, 2, h, wd))?
        .permute((0, 3, 1, 4, 2))?
        .contiguous()?
        .reshape((1, cout, 2 * h, 2 * wd))?;
    add_bias(ps, name, y)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn act(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tconv_matches_direct_scatter() {
        let dev = Device::Cpu;
        let mut ps = ParamSet::new();
        let mut b = Builder {
            params: &mut ps,
            seed: 3,
            dtype: DType::F64,
            device: &dev,
        };
        b.tconv("up", 3, 2).unwrap();
        let x = Tensor::arange(0f64, 3.0 * 2.0 * 4.0, &dev).unwrap().reshape((1, 3, 2, 4)).unwrap();
        let y = tconv(&ps, "up", &x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 8]);
        let wv: Vec<f64> = ps.get("up.weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yv: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        for co in 0..2 {
            for oy in 0..4 {
                for ox in 0..8 {
                    let (i, a, j, bb) = (oy / 2, oy % 2, ox / 2, ox % 2);
                    let mut s = 0.0;
                    for ci in 0..3 {
                        s += xv[ci * 8 + i * 4 + j] * wv[((ci * 2 + co) * 2 + a) * 2 + bb];
                    }
                    assert!((yv[(co * 4 + oy) * 8 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_normalizes() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1000f64, 0.0, -3.0], [0.1, 0.2, 0.3]], &dev).unwrap();
        let s = softmax(&x, 1).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let g = sigmoid(&Tensor::new(&[-1e4f64, 0.0, 1e4], &dev).unwrap()).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g, vec![0.0, 0.5, 1.0]);
    }
}
