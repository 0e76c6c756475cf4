//! Field mathematics on plain `f64` grids: bilinear warping, upsampled
//! warping, residual composition and the least-squares strain estimator.
//!
//! Conventions: row index is axial (`y`), column index is lateral (`x`).
//! Warping is backward (gather) sampling, `out(r, c) = frame(r + d_y, c + d_x)`,
//! with sample coordinates clamped to the frame border.
//!
//! [`diff`] holds the differentiable tensor counterparts used by training.

pub mod diff;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfdata::RfFrame;

pub type Grid = Array2<f64>;

/// Sanity bound on plausible strain magnitudes.
pub const STRAIN_SANITY_BOUND: f64 = 0.2;

/// Axial and lateral displacement in pixels. Axial is positive toward
/// increasing row index.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub d_y: Grid,
    pub d_x: Grid,
}

impl DisplacementField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            d_y: Grid::zeros((h, w)),
            d_x: Grid::zeros((h, w)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.d_y.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_y.dim() != self.d_x.dim() {
            return Err(Error::Shape(format!(
                "d_y {:?} and d_x {:?} differ",
                self.d_y.dim(),
                self.d_x.dim()
            )));
        }
        if self.d_y.iter().chain(self.d_x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::CorruptData("displacement contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn mean_abs_difference(&self, other: &Self) -> f64 {
        let n = (self.d_y.len() * 2) as f64;
        let sum: f64 = self
            .d_y
            .iter()
            .zip(other.d_y.iter())
            .chain(self.d_x.iter().zip(other.d_x.iter()))
            .map(|(a, b)| (a - b).abs())
            .sum();
        sum / n
    }

    pub fn mean_abs(&self) -> f64 {
        let n = (self.d_y.len() * 2) as f64;
        self.d_y.iter().chain(self.d_x.iter()).map(|v| v.abs()).sum::<f64>() / n
    }
}

/// Axial strain, positive under compression.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainMap {
    pub z: Grid,
}

impl StrainMap {
    pub fn shape(&self) -> (usize, usize) {
        self.z.dim()
    }

    pub fn is_plausible(&self) -> bool {
        self.z
            .iter()
            .all(|v| v.is_finite() && v.abs() <= STRAIN_SANITY_BOUND)
    }
}

/// Least-squares strain estimator window (axial samples).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsqseConfig {
    pub window: usize,
}

impl Default for LsqseConfig {
    fn default() -> Self {
        Self { window: 15 }
    }
}

impl LsqseConfig {
    pub fn validate(&self, h: usize) -> Result<()> {
        let k = self.window;
        if k < 3 || k % 2 == 0 || k > h {
            return Err(Error::Parameter(format!(
                "LSQSE window must be odd with 3 <= k <= {h}, got {k}"
            )));
        }
        Ok(())
    }

    /// First row of the full window used for output row `r`. Rows near the
    /// borders reuse the nearest full window.
    pub fn window_start(&self, r: usize, h: usize) -> usize {
        let half = self.window / 2;
        r.saturating_sub(half).min(h - self.window)
    }
}

fn check_shape(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Bilinear sample at fractional `(y, x)`, clamped to the border.
pub fn sample_bilinear(grid: &Grid, y: f64, x: f64) -> f64 {
    let (h, w) = grid.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let wy = y - y0 as f64;
    let wx = x - x0 as f64;
    grid[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
        + grid[[y0, x1]] * (1.0 - wy) * wx
        + grid[[y1, x0]] * wy * (1.0 - wx)
        + grid[[y1, x1]] * wy * wx
}

pub fn warp_grid(grid: &Grid, disp: &DisplacementField) -> Result<Grid> {
    check_shape("warp", grid.dim(), disp.shape())?;
    let mut out = Grid::zeros(grid.dim());
    Zip::indexed(&mut out)
        .and(&disp.d_y)
        .and(&disp.d_x)
        .for_each(|(r, c), o, &dy, &dx| {
            *o = sample_bilinear(grid, r as f64 + dy, c as f64 + dx);
        });
    Ok(out)
}

pub fn warp_bilinear(frame: &RfFrame, disp: &DisplacementField) -> Result<RfFrame> {
    Ok(frame.with_samples(warp_grid(&frame.samples, disp)?))
}

/// Align-corners bilinear upsampling to `((H-1)f+1, (W-1)f+1)`; fine node
/// `(i, j)` sits at coarse coordinate `(i/f, j/f)`.
pub fn upsample_bilinear(grid: &Grid, factor: usize) -> Grid {
    let (h, w) = grid.dim();
    let f = factor as f64;
    Grid::from_shape_fn(((h - 1) * factor + 1, (w - 1) * factor + 1), |(i, j)| {
        sample_bilinear(grid, i as f64 / f, j as f64 / f)
    })
}

/// Align-corners bilinear resize from the fine grid back to `(h, w)`. The
/// source coordinates are integers, so this picks every `factor`-th node.
pub fn downsample_bilinear(fine: &Grid, factor: usize, h: usize, w: usize) -> Grid {
    Grid::from_shape_fn((h, w), |(r, c)| fine[[r * factor, c * factor]])
}

/// Upsample frame and displacement, warp at the fine resolution (displacement
/// values rescaled to fine pixels), then resize back.
pub fn warp_grid_upsampled(grid: &Grid, disp: &DisplacementField, factor: usize) -> Result<Grid> {
    if factor < 1 {
        return Err(Error::Parameter("upsample factor must be >= 1".into()));
    }
    check_shape("warp_upsampled", grid.dim(), disp.shape())?;
    if factor == 1 {
        return warp_grid(grid, disp);
    }
    let (h, w) = grid.dim();
    let f = factor as f64;
    let fine = upsample_bilinear(grid, factor);
    let fine_disp = DisplacementField {
        d_y: upsample_bilinear(&disp.d_y, factor).mapv(|v| v * f),
        d_x: upsample_bilinear(&disp.d_x, factor).mapv(|v| v * f),
    };
    let warped = warp_grid(&fine, &fine_disp)?;
    Ok(downsample_bilinear(&warped, factor, h, w))
}

pub fn warp_upsampled(frame: &RfFrame, disp: &DisplacementField, factor: usize) -> Result<RfFrame> {
    Ok(frame.with_samples(warp_grid_upsampled(&frame.samples, disp, factor)?))
}

/// `base + residual`, elementwise.
pub fn compose_residual(
    base: &DisplacementField,
    residual: &DisplacementField,
) -> Result<DisplacementField> {
    check_shape("compose_residual", base.shape(), residual.shape())?;
    Ok(DisplacementField {
        d_y: &base.d_y + &residual.d_y,
        d_x: &base.d_x + &residual.d_x,
    })
}

/// Per-column least-squares slope of `d_y` against row index over a sliding
/// window of `cfg.window` rows.
pub fn lsqse_slope(d_y: &Grid, cfg: LsqseConfig) -> Result<Grid> {
    let (h, w) = d_y.dim();
    cfg.validate(h)?;
    let k = cfg.window;
    let half = (k / 2) as f64;
    let denom: f64 = (0..k).map(|i| (i as f64 - half).powi(2)).sum();
    let mut out = Grid::zeros((h, w));
    for r in 0..h {
        let start = cfg.window_start(r, h);
        for c in 0..w {
            let mut acc = 0.0;
            for i in 0..k {
                acc += (i as f64 - half) * d_y[[start + i, c]];
            }
            out[[r, c]] = acc / denom;
        }
    }
    Ok(out)
}

/// Axial strain from axial displacement: the negated least-squares slope, so
/// compression (displacement decreasing with depth) gives positive strain.
pub fn lsqse_strain(d_y: &Grid, cfg: LsqseConfig) -> Result<StrainMap> {
    Ok(StrainMap {
        z: lsqse_slope(d_y, cfg)?.mapv(|v| -v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, a: f64, b: f64, g: f64) -> Grid {
        Grid::from_shape_fn((h, w), |(r, c)| a * r as f64 + b * c as f64 + g)
    }

    fn pseudo_random(h: usize, w: usize, seed: u64) -> Grid {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Grid::from_shape_fn((h, w), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn zero_displacement_is_bit_identity() {
        let g = pseudo_random(20, 17, 3);
        let out = warp_grid(&g, &DisplacementField::zeros(20, 17)).unwrap();
        for (a, b) in g.iter().zip(out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn integer_shift_clamps_at_the_border() {
        let (h, w) = (16, 16);
        let g = ramp(h, w, 1.0, 0.0, 0.0);
        let disp = DisplacementField {
            d_y: Grid::from_elem((h, w), 1.0),
            d_x: Grid::zeros((h, w)),
        };
        let out = warp_grid(&g, &disp).unwrap();
        for ((r, _), v) in out.indexed_iter() {
            assert_eq!(*v, ((r + 1).min(h - 1)) as f64);
        }
    }

    #[test]
    fn half_pixel_shift_is_exact_on_a_ramp() {
        let (h, w) = (16, 16);
        let g = ramp(h, w, 1.0, 0.0, 0.0);
        let disp = DisplacementField {
            d_y: Grid::from_elem((h, w), 0.5),
            d_x: Grid::zeros((h, w)),
        };
        let out = warp_grid(&g, &disp).unwrap();
        for r in 0..h - 1 {
            assert_eq!(out[[r, 3]], r as f64 + 0.5);
        }
    }

    #[test]
    fn warp_shape_mismatch() {
        let g = Grid::zeros((16, 16));
        assert!(matches!(
            warp_grid(&g, &DisplacementField::zeros(16, 17)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn upsampled_factor_one_matches_plain_warp() {
        let g = pseudo_random(16, 20, 1);
        let disp = DisplacementField {
            d_y: pseudo_random(16, 20, 2).mapv(|v| 2.0 * v),
            d_x: pseudo_random(16, 20, 3),
        };
        assert_eq!(
            warp_grid(&g, &disp).unwrap(),
            warp_grid_upsampled(&g, &disp, 1).unwrap()
        );
        assert!(matches!(
            warp_grid_upsampled(&g, &disp, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn upsampled_identity_round_trip() {
        let g = pseudo_random(24, 16, 5);
        let out = warp_grid_upsampled(&g, &DisplacementField::zeros(24, 16), 4).unwrap();
        let err = (&out - &g).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn compose_identities() {
        let a = DisplacementField {
            d_y: pseudo_random(16, 16, 7),
            d_x: pseudo_random(16, 16, 8),
        };
        let z = DisplacementField::zeros(16, 16);
        assert_eq!(compose_residual(&a, &z).unwrap(), a);
        assert_eq!(compose_residual(&z, &a).unwrap(), a);
        assert!(compose_residual(&a, &DisplacementField::zeros(16, 15)).is_err());
    }

    #[test]
    fn lsqse_linear_and_constant() {
        let cfg = LsqseConfig { window: 7 };
        let lin = ramp(32, 4, 0.013, 0.0, 2.0);
        let slope = lsqse_slope(&lin, cfg).unwrap();
        assert!(slope.iter().all(|v| (v - 0.013).abs() < 1e-15));
        let strain = lsqse_strain(&lin, cfg).unwrap();
        assert!(strain.z.iter().all(|v| (v + 0.013).abs() < 1e-15));
        let flat = Grid::from_elem((32, 4), 3.0);
        assert!(lsqse_slope(&flat, cfg).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn lsqse_rejects_bad_windows() {
        let g = Grid::zeros((16, 4));
        for k in [1, 4, 17] {
            assert!(matches!(
                lsqse_slope(&g, LsqseConfig { window: k }),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn lsqse_midpoint_property_on_quadratics() {
        let cfg = LsqseConfig { window: 9 };
        let (h, w) = (40, 3);
        let q = Grid::from_shape_fn((h, w), |(r, _)| 0.002 * (r as f64).powi(2) + 0.1 * r as f64);
        let slope = lsqse_slope(&q, cfg).unwrap();
        for r in 4..h - 4 {
            let analytic = 0.004 * r as f64 + 0.1;
            assert!((slope[[r, 1]] - analytic).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn bilinear_reproduces_affine_images(
            a in -2.0f64..2.0, b in -2.0f64..2.0, g in -5.0f64..5.0,
            dy in -3.0f64..3.0, dx in -3.0f64..3.0,
        ) {
            let (h, w) = (20, 20);
            let img = ramp(h, w, a, b, g);
            let disp = DisplacementField {
                d_y: Grid::from_elem((h, w), dy),
                d_x: Grid::from_elem((h, w), dx),
            };
            let out = warp_grid(&img, &disp).unwrap();
            for r in 4..h - 4 {
                for c in 4..w - 4 {
                    let exact = a * (r as f64 + dy) + b * (c as f64 + dx) + g;
                    prop_assert!((out[[r, c]] - exact).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn warp_is_linear_in_the_frame(s in -3.0f64..3.0, t in -3.0f64..3.0, seed in 0u64..1000) {
            let f = pseudo_random(16, 16, seed);
            let g = pseudo_random(16, 16, seed + 1);
            let disp = DisplacementField {
                d_y: pseudo_random(16, 16, seed + 2).mapv(|v| 3.0 * v),
                d_x: pseudo_random(16, 16, seed + 3).mapv(|v| 3.0 * v),
            };
            let lhs = warp_grid(&(&f * s + &g * t), &disp).unwrap();
            let rhs = warp_grid(&f, &disp).unwrap() * s + warp_grid(&g, &disp).unwrap() * t;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn composition_is_commutative_and_associative(seed in 0u64..1000) {
            let f = |k| DisplacementField {
                d_y: pseudo_random(16, 16, seed + k),
                d_x: pseudo_random(16, 16, seed + k + 100),
            };
            let (a, b, c) = (f(0), f(1), f(2));
            prop_assert_eq!(compose_residual(&a, &b).unwrap(), compose_residual(&b, &a).unwrap());
            let left = compose_residual(&compose_residual(&a, &b).unwrap(), &c).unwrap();
            let right = compose_residual(&a, &compose_residual(&b, &c).unwrap()).unwrap();
            for (x, y) in left.d_y.iter().zip(right.d_y.iter()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
