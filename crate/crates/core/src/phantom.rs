//! Synthetic RF phantoms with analytic ground truth.
//!
//! Point scatterers are placed uniformly, displaced by a piecewise-analytic
//! axial compression field and rendered through a separable point-spread
//! function (Gaussian-windowed cosine axially, Gaussian laterally). An
//! optional circular inclusion strains less than the background, with a
//! raised-cosine radial ramp between the two.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldops::{sample_bilinear, DisplacementField, Grid, StrainMap};
use crate::rfdata::{RfFrame, RfSequence, MIN_FRAME_EXTENT};

/// Accumulated strain limit `ε·T`.
pub const MAX_TOTAL_STRAIN: f64 = 0.05;

/// PSF support in standard deviations.
const PSF_SUPPORT_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    /// (row, col) in pixels.
    pub center: (f64, f64),
    pub radius: f64,
    /// Inclusion strain over background strain, in (0, 1).
    pub strain_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    /// Carrier frequency in cycles per axial sample.
    pub center_frequency: f64,
    /// Axial Gaussian envelope sigma, samples.
    pub bandwidth_sigma: f64,
    /// Lateral Gaussian sigma, scan lines.
    pub lateral_sigma: f64,
}

impl Default for PulseSpec {
    fn default() -> Self {
        Self {
            center_frequency: 0.125,
            bandwidth_sigma: 3.0,
            lateral_sigma: 1.0,
        }
    }
}

fn default_blend_width() -> f64 {
    3.0
}

fn default_axial_spacing() -> f64 {
    // 1540 m/s at 40 MHz sampling, two-way.
    1.925e-5
}

fn default_lateral_spacing() -> f64 {
    2.0e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    /// Scatterers per pixel area.
    pub scatterer_density: f64,
    #[serde(default)]
    pub inclusion: Option<Inclusion>,
    /// Background strain added per post frame.
    pub strain_per_step: f64,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(default)]
    pub pulse: PulseSpec,
    #[serde(default)]
    pub seed: u64,
    /// Width of the inclusion boundary ramp in pixels.
    #[serde(default = "default_blend_width")]
    pub blend_width: f64,
    #[serde(default = "default_axial_spacing")]
    pub axial_spacing: f64,
    #[serde(default = "default_lateral_spacing")]
    pub lateral_spacing: f64,
}

impl PhantomSpec {
    /// Uniform background, no inclusion.
    pub fn uniform(height: usize, width: usize, strain_per_step: f64, frames: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            scatterer_density: 0.6,
            inclusion: None,
            strain_per_step,
            frames,
            pulse: PulseSpec::default(),
            seed,
            blend_width: default_blend_width(),
            axial_spacing: default_axial_spacing(),
            lateral_spacing: default_lateral_spacing(),
        }
    }

    pub fn with_inclusion(mut self, inclusion: Inclusion) -> Self {
        self.inclusion = Some(inclusion);
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: Self = crate::rfdata::read_json(path.as_ref())?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h < MIN_FRAME_EXTENT || w < MIN_FRAME_EXTENT {
            return Err(Error::Configuration(format!("phantom {h}x{w} is too small")));
        }
        if self.frames == 0 {
            return Err(Error::Configuration("phantom needs T >= 1".into()));
        }
        if !(self.scatterer_density > 0.0 && self.scatterer_density.is_finite()) {
            return Err(Error::Configuration("scatterer density must be positive".into()));
        }
        if !(self.strain_per_step >= 0.0)
            || self.strain_per_step * self.frames as f64 > MAX_TOTAL_STRAIN + 1e-12
        {
            return Err(Error::Configuration(format!(
                "strain per step {} over {} frames exceeds {MAX_TOTAL_STRAIN}",
                self.strain_per_step, self.frames
            )));
        }
        let p = &self.pulse;
        if !(p.center_frequency > 0.0 && 2.0 * p.center_frequency < 1.0) {
            return Err(Error::Configuration(format!(
                "center frequency {} cycles/sample violates Nyquist",
                p.center_frequency
            )));
        }
        if !(p.bandwidth_sigma > 0.0 && p.lateral_sigma > 0.0) {
            return Err(Error::Configuration("pulse sigmas must be positive".into()));
        }
        if !(self.blend_width >= 0.0) {
            return Err(Error::Configuration("blend width must be non-negative".into()));
        }
        if !(self.axial_spacing > 0.0 && self.lateral_spacing > 0.0) {
            return Err(Error::Configuration("spacings must be positive".into()));
        }
        if let Some(inc) = &self.inclusion {
            let (r, c) = inc.center;
            if !(inc.radius > 0.0)
                || r - inc.radius < 0.0
                || c - inc.radius < 0.0
                || r + inc.radius > (h - 1) as f64
                || c + inc.radius > (w - 1) as f64
            {
                return Err(Error::Configuration(
                    "inclusion circle must lie inside the frame".into(),
                ));
            }
            if !(inc.strain_ratio > 0.0 && inc.strain_ratio < 1.0) {
                return Err(Error::Configuration("strain ratio must be in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Fraction of the inclusion contrast applied at `(row, col)`: 1 inside,
    /// 0 outside, raised cosine across the blend ramp.
    pub fn inclusion_weight(&self, row: f64, col: f64) -> f64 {
        let Some(inc) = &self.inclusion else {
            return 0.0;
        };
        let rho = ((row - inc.center.0).powi(2) + (col - inc.center.1).powi(2)).sqrt();
        let half = self.blend_width / 2.0;
        let inner = inc.radius - half;
        if rho <= inner {
            1.0
        } else if rho >= inc.radius + half {
            0.0
        } else {
            0.5 * (1.0 + (PI * (rho - inner) / self.blend_width).cos())
        }
    }

    /// Per-step local strain at `(row, col)`.
    pub fn local_strain(&self, row: f64, col: f64) -> f64 {
        let ratio = self.inclusion.map_or(1.0, |i| i.strain_ratio);
        self.strain_per_step * (1.0 - (1.0 - ratio) * self.inclusion_weight(row, col))
    }

    /// True where `(row, col)` is off the blend ramp (strain locally constant).
    pub fn is_smooth_at(&self, row: f64, col: f64) -> bool {
        match &self.inclusion {
            None => true,
            Some(inc) => {
                let rho = ((row - inc.center.0).powi(2) + (col - inc.center.1).powi(2)).sqrt();
                (rho - inc.radius).abs() > self.blend_width / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scatterer {
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScattererField {
    pub scatterers: Vec<Scatterer>,
}

impl ScattererField {
    pub fn len(&self) -> usize {
        self.scatterers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scatterers.is_empty()
    }
}

/// Analytic displacement and strain for every post frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBundle {
    pub displacements: Vec<DisplacementField>,
    pub strains: Vec<StrainMap>,
}

pub fn generate_scatterers(spec: &PhantomSpec) -> Result<ScattererField> {
    spec.validate()?;
    let (h, w) = (spec.height as f64, spec.width as f64);
    let count = (spec.scatterer_density * h * w).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scatterers = (0..count)
        .map(|_| {
            let row = rng.random_range(0.0..h);
            let col = rng.random_range(0.0..w);
            let amplitude: f64 = rng.sample(StandardNormal);
            Scatterer { row, col, amplitude }
        })
        .collect();
    Ok(ScattererField { scatterers })
}

// 5-point Gauss-Legendre on [-1, 1].
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683,
    0.538_469_310_105_683,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
    0.236_926_885_056_189,
];

/// Longest quadrature piece, in pixels.
const MAX_PIECE: f64 = 0.25;

/// Rows where the column `col` enters or leaves the blend ramp; the strain is
/// smooth between consecutive breakpoints.
fn ramp_breakpoints(spec: &PhantomSpec, col: f64) -> Vec<f64> {
    let Some(inc) = &spec.inclusion else {
        return Vec::new();
    };
    let dc = col - inc.center.1;
    let half = spec.blend_width / 2.0;
    let mut out = Vec::new();
    for rho in [inc.radius - half, inc.radius + half] {
        if rho > dc.abs() {
            let du = (rho * rho - dc * dc).sqrt();
            out.push(inc.center.0 - du);
            out.push(inc.center.0 + du);
        }
    }
    out
}

fn integrate_column(spec: &PhantomSpec, col: f64, from: f64, to: f64) -> f64 {
    if spec.inclusion.is_none() {
        return spec.strain_per_step * (to - from);
    }
    let (lo, hi, sign) = if from <= to { (from, to, 1.0) } else { (to, from, -1.0) };
    let mut knots = vec![lo, hi];
    knots.extend(ramp_breakpoints(spec, col).into_iter().filter(|&u| u > lo && u < hi));
    knots.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    for seg in knots.windows(2) {
        let span = seg[1] - seg[0];
        if span <= 0.0 {
            continue;
        }
        let pieces = (span / MAX_PIECE).ceil().max(1.0) as usize;
        let h = span / pieces as f64;
        for p in 0..pieces {
            let mid = seg[0] + (p as f64 + 0.5) * h;
            let sum: f64 = GL_NODES
                .iter()
                .zip(GL_WEIGHTS.iter())
                .map(|(x, wgt)| wgt * spec.local_strain(mid + 0.5 * h * x, col))
                .sum();
            acc += sum * 0.5 * h;
        }
    }
    sign * acc
}

/// Axial displacement at an arbitrary position for step `t`:
/// `-t * integral_0^row eps_local(u, col) du`.
pub fn axial_displacement_at(spec: &PhantomSpec, t: usize, row: f64, col: f64) -> f64 {
    -(t as f64) * integrate_column(spec, col, 0.0, row)
}

pub fn analytic_displacement(spec: &PhantomSpec, t: usize) -> Result<(DisplacementField, StrainMap)> {
    spec.validate()?;
    if t == 0 || t > spec.frames {
        return Err(Error::Step(format!(
            "step {t} outside 1..={}",
            spec.frames
        )));
    }
    let (h, w) = (spec.height, spec.width);
    let tf = t as f64;
    let mut d_y = Grid::zeros((h, w));
    for c in 0..w {
        let col = c as f64;
        let mut acc = 0.0;
        for r in 1..h {
            acc += integrate_column(spec, col, (r - 1) as f64, r as f64);
            d_y[[r, c]] = -tf * acc;
        }
    }
    let z = Grid::from_shape_fn((h, w), |(r, c)| tf * spec.local_strain(r as f64, c as f64));
    Ok((
        DisplacementField {
            d_y,
            d_x: Grid::zeros((h, w)),
        },
        StrainMap { z },
    ))
}

/// Renders a frame. Each scatterer is moved by the displacement sampled at its
/// own position, then splatted through the PSF. Samples are rounded to `f32`
/// precision so the in-memory frame equals its on-disk blob.
pub fn render_rf(
    scatterers: &ScattererField,
    displacement: Option<&DisplacementField>,
    spec: &PhantomSpec,
) -> Result<RfFrame> {
    let (h, w) = (spec.height, spec.width);
    if let Some(d) = displacement {
        d.validate()?;
        if d.shape() != (h, w) {
            return Err(Error::Shape(format!(
                "displacement {:?} for a {h}x{w} phantom",
                d.shape()
            )));
        }
    }
    let p = spec.pulse;
    let reach_r = PSF_SUPPORT_SIGMAS * p.bandwidth_sigma;
    let reach_c = PSF_SUPPORT_SIGMAS * p.lateral_sigma;
    let two_sp = 2.0 * p.bandwidth_sigma * p.bandwidth_sigma;
    let two_sl = 2.0 * p.lateral_sigma * p.lateral_sigma;
    let omega = 2.0 * PI * p.center_frequency;
    let mut out = Grid::zeros((h, w));
    let mut lateral = Vec::new();
    for s in &scatterers.scatterers {
        let (mut row, mut col) = (s.row, s.col);
        if let Some(d) = displacement {
            row += sample_bilinear(&d.d_y, s.row, s.col);
            col += sample_bilinear(&d.d_x, s.row, s.col);
        }
        let r_lo = (row - reach_r).ceil().max(0.0) as usize;
        let r_hi = (row + reach_r).floor().min((h - 1) as f64);
        let c_lo = (col - reach_c).ceil().max(0.0) as usize;
        let c_hi = (col + reach_c).floor().min((w - 1) as f64);
        if r_hi < 0.0 || c_hi < 0.0 {
            continue;
        }
        let (r_hi, c_hi) = (r_hi as usize, c_hi as usize);
        lateral.clear();
        lateral.extend((c_lo..=c_hi).map(|c| {
            let dc = c as f64 - col;
            (-dc * dc / two_sl).exp()
        }));
        for r in r_lo..=r_hi {
            let dr = r as f64 - row;
            let axial = s.amplitude * (omega * dr).cos() * (-dr * dr / two_sp).exp();
            for (c, lw) in (c_lo..=c_hi).zip(lateral.iter()) {
                out[[r, c]] += axial * lw;
            }
        }
    }
    out.mapv_inplace(|v| v as f32 as f64);
    RfFrame::new(out, spec.axial_spacing, spec.lateral_spacing)
}

/// Pre frame from undisplaced scatterers, post frame `t` under the analytic
/// step-`t` displacement. The returned sequence carries the ground truth.
pub fn simulate_sequence(spec: &PhantomSpec) -> Result<(RfSequence, GroundTruthBundle)> {
    spec.validate()?;
    let scatterers = generate_scatterers(spec)?;
    let pre = render_rf(&scatterers, None, spec)?;
    let mut posts = Vec::with_capacity(spec.frames);
    let mut displacements = Vec::with_capacity(spec.frames);
    let mut strains = Vec::with_capacity(spec.frames);
    for t in 1..=spec.frames {
        let (mut disp, strain) = analytic_displacement(spec, t)?;
        posts.push(render_rf(&scatterers, Some(&disp), spec)?);
        // Stored ground truth is f32, like every other blob.
        disp.d_y.mapv_inplace(|v| v as f32 as f64);
        displacements.push(disp);
        strains.push(strain);
    }
    let seq = RfSequence::new(
        pre,
        posts,
        Some(displacements.clone()),
        format!("phantom-seed{}", spec.seed),
    )?;
    Ok((
        seq,
        GroundTruthBundle {
            displacements,
            strains,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldops::{lsqse_strain, warp_grid, LsqseConfig};

    fn inclusion_spec() -> PhantomSpec {
        PhantomSpec::uniform(64, 64, 0.01, 3, 11).with_inclusion(Inclusion {
            center: (32.0, 32.0),
            radius: 12.0,
            strain_ratio: 0.5,
        })
    }

    #[test]
    fn scatterer_count_and_determinism() {
        let mut spec = PhantomSpec::uniform(100, 100, 0.0, 1, 7);
        spec.scatterer_density = 0.05;
        let a = generate_scatterers(&spec).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(a, generate_scatterers(&spec).unwrap());
        spec.seed = 8;
        let b = generate_scatterers(&spec).unwrap();
        let key = |f: &ScattererField| {
            let mut v: Vec<(u64, u64)> = f
                .scatterers
                .iter()
                .map(|s| (s.row.to_bits(), s.col.to_bits()))
                .collect();
            v.sort();
            v
        };
        assert_ne!(key(&a), key(&b));
        assert!(a
            .scatterers
            .iter()
            .all(|s| (0.0..100.0).contains(&s.row) && (0.0..100.0).contains(&s.col)));
    }

    #[test]
    fn uniform_compression_is_linear() {
        let spec = PhantomSpec::uniform(32, 24, 0.01, 3, 0);
        let (d, z) = analytic_displacement(&spec, 2).unwrap();
        for ((r, _), v) in d.d_y.indexed_iter() {
            assert!((v + 0.02 * r as f64).abs() < 1e-12);
        }
        assert!(d.d_x.iter().all(|&v| v == 0.0));
        assert!(z.z.iter().all(|v| (v - 0.02).abs() < 1e-15));
    }

    #[test]
    fn step_zero_and_overflow_are_rejected() {
        let spec = PhantomSpec::uniform(32, 32, 0.01, 3, 0);
        assert!(matches!(analytic_displacement(&spec, 0), Err(Error::Step(_))));
        assert!(matches!(analytic_displacement(&spec, 4), Err(Error::Step(_))));
    }

    #[test]
    fn inclusion_strain_levels() {
        let spec = PhantomSpec::uniform(64, 64, 0.01, 1, 0).with_inclusion(Inclusion {
            center: (32.0, 32.0),
            radius: 12.0,
            strain_ratio: 0.5,
        });
        let (_, z) = analytic_displacement(&spec, 1).unwrap();
        assert!((z.z[[32, 32]] - 0.005).abs() < 1e-15);
        assert!((z.z[[2, 2]] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn strain_is_the_axial_derivative_of_displacement() {
        let spec = inclusion_spec();
        let (_, z) = analytic_displacement(&spec, 2).unwrap();
        let h = 1e-3;
        for &(r, c) in &[(10usize, 32usize), (32, 32), (25, 30), (40, 20), (50, 50)] {
            let (rf, cf) = (r as f64, c as f64);
            assert!(spec.is_smooth_at(rf, cf));
            let slope = (axial_displacement_at(&spec, 2, rf + h, cf)
                - axial_displacement_at(&spec, 2, rf - h, cf))
                / (2.0 * h);
            assert!((-slope - z.z[[r, c]]).abs() < 1e-6, "({r},{c}) {slope}");
        }
    }

    #[test]
    fn lsqse_of_ground_truth_reproduces_analytic_strain() {
        let spec = inclusion_spec();
        let cfg = LsqseConfig::default();
        let (d, z) = analytic_displacement(&spec, 3).unwrap();
        let est = lsqse_strain(&d.d_y, cfg).unwrap();
        let mut checked = 0;
        for r in 0..64 {
            for c in 0..64 {
                let start = cfg.window_start(r, 64);
                // Window must sit entirely on one side of the ramp.
                let constant = (start..start + cfg.window).all(|u| {
                    let a = spec.local_strain(u as f64, c as f64);
                    let b = spec.local_strain(r as f64, c as f64);
                    spec.is_smooth_at(u as f64, c as f64) && a == b
                });
                if constant {
                    assert!((est.z[[r, c]] - z.z[[r, c]]).abs() < 1e-4);
                    checked += 1;
                }
            }
        }
        assert!(checked > 2000, "{checked}");
    }

    #[test]
    fn single_scatterer_peaks_at_its_position() {
        let spec = PhantomSpec::uniform(32, 32, 0.0, 1, 0);
        let field = ScattererField {
            scatterers: vec![Scatterer {
                row: 14.0,
                col: 9.0,
                amplitude: 1.0,
            }],
        };
        let frame = render_rf(&field, None, &spec).unwrap();
        let (best, _) = frame
            .samples
            .indexed_iter()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        assert_eq!(best, (14, 9));
        let zero = DisplacementField::zeros(32, 32);
        assert_eq!(render_rf(&field, Some(&zero), &spec).unwrap(), frame);
    }

    #[test]
    fn axial_spectrum_peaks_at_center_frequency() {
        let (h, w) = (256, 128);
        let spec = PhantomSpec::uniform(h, w, 0.0, 1, 3);
        let frame = simulate_sequence(&spec).unwrap().0.pre;
        // Column periodograms by direct DFT, averaged, then box-smoothed.
        let mut power = vec![0.0; h / 2];
        for c in 0..w {
            for (k, p) in power.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for r in 0..h {
                    let phase = -2.0 * PI * (k * r) as f64 / h as f64;
                    re += frame.samples[[r, c]] * phase.cos();
                    im += frame.samples[[r, c]] * phase.sin();
                }
                *p += re * re + im * im;
            }
        }
        let smooth: Vec<f64> = (0..h / 2)
            .map(|k| power[k.saturating_sub(3)..(k + 4).min(h / 2)].iter().sum())
            .collect();
        let peak = (0..h / 2).max_by(|&a, &b| smooth[a].total_cmp(&smooth[b])).unwrap();
        let f = peak as f64 / h as f64;
        assert!((f - spec.pulse.center_frequency).abs() <= 0.02, "peak at {f}");
    }

    #[test]
    fn zero_strain_post_equals_pre() {
        let spec = PhantomSpec::uniform(32, 32, 0.0, 1, 5);
        let (seq, gt) = simulate_sequence(&spec).unwrap();
        assert_eq!(seq.posts[0], seq.pre);
        assert!(gt.displacements[0].d_y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nine_steps_span_half_to_four_and_half_percent() {
        let spec = PhantomSpec::uniform(32, 32, 0.005, 9, 5);
        let (seq, gt) = simulate_sequence(&spec).unwrap();
        assert_eq!(seq.len(), 9);
        assert!((gt.strains[0].z[[5, 5]] - 0.005).abs() < 1e-12);
        assert!((gt.strains[8].z[[5, 5]] - 0.045).abs() < 1e-12);
    }

    #[test]
    fn warping_post_with_ground_truth_recovers_pre() {
        let spec = PhantomSpec::uniform(64, 64, 0.015, 3, 21);
        let (seq, gt) = simulate_sequence(&spec).unwrap();
        let m = 5;
        for t in 0..3 {
            let warped = warp_grid(&seq.posts[t].samples, &gt.displacements[t]).unwrap();
            let a = warped.slice(ndarray::s![m..64 - m, m..64 - m]).to_owned();
            let b = seq.pre.samples.slice(ndarray::s![m..64 - m, m..64 - m]).to_owned();
            let (ma, mb) = (a.mean().unwrap(), b.mean().unwrap());
            let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let da: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let db: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            let ncc = num / (da * db).sqrt();
            assert!(ncc >= 0.95, "t={} ncc={ncc}", t + 1);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = inclusion_spec();
        let a = simulate_sequence(&spec).unwrap();
        let b = simulate_sequence(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs() {
        let mut s = PhantomSpec::uniform(32, 32, 0.02, 3, 0);
        assert!(s.validate().is_err());
        s.strain_per_step = 0.01;
        s.pulse.center_frequency = 0.5;
        assert!(s.validate().is_err());
        s.pulse.center_frequency = 0.1;
        s.inclusion = Some(Inclusion {
            center: (5.0, 16.0),
            radius: 8.0,
            strain_ratio: 0.5,
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = inclusion_spec();
        let text = serde_json::to_string(&spec).unwrap();
        let back: PhantomSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let minimal = r#"{"H": 32, "W": 32, "scatterer_density": 0.5, "strain_per_step": 0.01, "T": 2}"#;
        let parsed: PhantomSpec = serde_json::from_str(minimal).unwrap();
        parsed.validate().unwrap();
        assert_eq!(parsed.blend_width, 3.0);
    }
}
