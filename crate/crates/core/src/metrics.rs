//! Strain image quality metrics over elliptical regions of interest, and
//! displacement error against ground truth. All values are plain ratios or
//! percentages, never decibels. Standard deviations are population SDs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldops::{DisplacementField, Grid, StrainMap};
use crate::rfdata::{RoiKind, RoiPair, RoiSpec};

/// Smallest region, in pixels, accepted for statistics.
pub const MIN_ROI_PIXELS: usize = 16;

const SIGMA_FLOOR: f64 = 1e-12;

pub const DEFAULT_MASK_EPS: f64 = 1e-3;

/// Population mean and SD of `values`.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

pub fn region_stats(z: &StrainMap, roi: &RoiSpec) -> Result<RegionStats> {
    let (h, w) = z.shape();
    let values: Vec<f64> = roi.pixels(h, w).into_iter().map(|p| z.z[p]).collect();
    if values.len() < MIN_ROI_PIXELS {
        return Err(Error::DegenerateRoi(format!(
            "ROI holds {} pixels, need {MIN_ROI_PIXELS}",
            values.len()
        )));
    }
    let (mean, sd) = mean_sd(&values);
    Ok(RegionStats {
        mean,
        sd,
        n: values.len(),
    })
}

fn region_snr(z: &StrainMap, roi: &RoiSpec, kind: RoiKind) -> Result<f64> {
    if roi.kind != kind {
        return Err(Error::Parameter(format!("expected a {kind:?} ROI, got {:?}", roi.kind)));
    }
    let s = region_stats(z, roi)?;
    if s.sd < SIGMA_FLOOR {
        return Err(Error::DegenerateRoi(format!("{kind:?} ROI is constant")));
    }
    Ok(s.mean / s.sd)
}

pub fn snr_target(z: &StrainMap, roi: &RoiSpec) -> Result<f64> {
    region_snr(z, roi, RoiKind::Target)
}

pub fn snr_background(z: &StrainMap, roi: &RoiSpec) -> Result<f64> {
    region_snr(z, roi, RoiKind::Background)
}

/// Whole-image mean over SD.
pub fn snr_e(z: &StrainMap) -> Result<f64> {
    let values: Vec<f64> = z.z.iter().copied().collect();
    if values.is_empty() {
        return Err(Error::DegenerateMap("empty strain map".into()));
    }
    let (mean, sd) = mean_sd(&values);
    if sd < SIGMA_FLOOR {
        return Err(Error::DegenerateMap("strain map is constant".into()));
    }
    Ok(mean / sd)
}

pub fn cnr(z: &StrainMap, target: &RoiSpec, background: &RoiSpec) -> Result<f64> {
    let t = region_stats(z, target)?;
    let b = region_stats(z, background)?;
    let (h, w) = z.shape();
    if target.pixels(h, w).iter().any(|&(r, c)| background.contains(r, c)) {
        return Err(Error::Parameter("target and background ROIs overlap".into()));
    }
    if t.sd < SIGMA_FLOOR && b.sd < SIGMA_FLOOR {
        return Err(Error::DegenerateRoi("both ROIs are constant".into()));
    }
    Ok((2.0 * (b.mean - t.mean).powi(2) / (b.sd * b.sd + t.sd * t.sd)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NrmseNorm {
    /// RMS of the per-pixel relative error over pixels with `|gt| > mask_eps`.
    #[default]
    Literal,
    /// RMS error divided by the RMS of the ground truth, all pixels.
    GtRms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nrmse {
    pub percent: f64,
    pub excluded_fraction: f64,
}

pub fn nrmse(w_gt: &Grid, w_est: &Grid, mask_eps: f64, norm: NrmseNorm) -> Result<Nrmse> {
    if w_gt.dim() != w_est.dim() {
        return Err(Error::Shape(format!(
            "ground truth {:?} vs estimate {:?}",
            w_gt.dim(),
            w_est.dim()
        )));
    }
    let total = w_gt.len();
    match norm {
        NrmseNorm::Literal => {
            let mut sum = 0.0;
            let mut n = 0usize;
            for (&g, &e) in w_gt.iter().zip(w_est.iter()) {
                if g.abs() > mask_eps {
                    sum += ((g - e) / g).powi(2);
                    n += 1;
                }
            }
            if n == 0 {
                return Err(Error::EmptySupport(format!(
                    "no ground-truth pixel exceeds {mask_eps}"
                )));
            }
            Ok(Nrmse {
                percent: 100.0 * (sum / n as f64).sqrt(),
                excluded_fraction: (total - n) as f64 / total as f64,
            })
        }
        NrmseNorm::GtRms => {
            let err: f64 = w_gt.iter().zip(w_est.iter()).map(|(g, e)| (g - e).powi(2)).sum();
            let gt: f64 = w_gt.iter().map(|g| g * g).sum();
            if gt <= 0.0 || total == 0 {
                return Err(Error::EmptySupport("ground truth is identically zero".into()));
            }
            Ok(Nrmse {
                percent: 100.0 * (err / gt).sqrt(),
                excluded_fraction: 0.0,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub mask_eps: f64,
    pub norm: NrmseNorm,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mask_eps: DEFAULT_MASK_EPS,
            norm: NrmseNorm::Literal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        Self { mean, sd }
    }
}

impl std::fmt::Display for MeanSd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub snr_t: f64,
    pub snr_bg: f64,
    pub cnr: f64,
    pub snr_e: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nrmse_percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nrmse_excluded_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub snr_t: MeanSd,
    pub snr_bg: MeanSd,
    pub cnr: MeanSd,
    pub snr_e: MeanSd,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nrmse_percent: Option<MeanSd>,
    pub roi: RoiPair,
    pub n_pairs: usize,
    pub per_pair: Vec<PairMetrics>,
}

pub fn pair_metrics(
    z: &StrainMap,
    est: &DisplacementField,
    gt: Option<&DisplacementField>,
    rois: &RoiPair,
    cfg: &MetricsConfig,
) -> Result<PairMetrics> {
    let (h, w) = z.shape();
    rois.validate(h, w)?;
    let nr = gt
        .map(|g| nrmse(&g.d_y, &est.d_y, cfg.mask_eps, cfg.norm))
        .transpose()?;
    Ok(PairMetrics {
        snr_t: snr_target(z, &rois.target)?,
        snr_bg: snr_background(z, &rois.background)?,
        cnr: cnr(z, &rois.target, &rois.background)?,
        snr_e: snr_e(z)?,
        nrmse_percent: nr.map(|n| n.percent),
        nrmse_excluded_fraction: nr.map(|n| n.excluded_fraction),
    })
}

/// Per-pair metrics, then mean and SD across pairs.
pub fn evaluate_pairwise(
    label: &str,
    strains: &[StrainMap],
    disps: &[DisplacementField],
    gts: Option<&[DisplacementField]>,
    rois: &RoiPair,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    if strains.len() != disps.len() || gts.is_some_and(|g| g.len() != strains.len()) {
        return Err(Error::Shape(format!(
            "{} strain maps, {} estimates, {} ground-truth fields",
            strains.len(),
            disps.len(),
            gts.map_or(0, |g| g.len())
        )));
    }
    if strains.is_empty() {
        return Err(Error::NoData("no pairs to evaluate".into()));
    }
    let per_pair = strains
        .iter()
        .zip(disps)
        .enumerate()
        .map(|(i, (z, d))| pair_metrics(z, d, gts.map(|g| &g[i]), rois, cfg))
        .collect::<Result<Vec<_>>>()?;
    report_from_pairs(label, per_pair, rois)
}

pub fn report_from_pairs(label: &str, per_pair: Vec<PairMetrics>, rois: &RoiPair) -> Result<MetricsReport> {
    if per_pair.is_empty() {
        return Err(Error::NoData("no pairs to evaluate".into()));
    }
    let col = |f: fn(&PairMetrics) -> f64| MeanSd::of(&per_pair.iter().map(f).collect::<Vec<_>>());
    let nrmse_values: Vec<f64> = per_pair.iter().filter_map(|p| p.nrmse_percent).collect();
    let report = MetricsReport {
        label: label.to_string(),
        snr_t: col(|p| p.snr_t),
        snr_bg: col(|p| p.snr_bg),
        cnr: col(|p| p.cnr),
        snr_e: col(|p| p.snr_e),
        nrmse_percent: (nrmse_values.len() == per_pair.len()).then(|| MeanSd::of(&nrmse_values)),
        roi: *rois,
        n_pairs: per_pair.len(),
        per_pair,
    };
    let finite = [report.snr_t, report.snr_bg, report.cnr, report.snr_e]
        .iter()
        .chain(report.nrmse_percent.iter())
        .all(|m| m.mean.is_finite() && m.sd.is_finite());
    if !finite {
        return Err(Error::DegenerateMap("non-finite metric".into()));
    }
    Ok(report)
}

/// Aligned text table, one row per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let headers = ["Model", "SNR_t", "SNR_bg", "CNR", "NRMSE (%)", "SNR_e"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.snr_t.to_string(),
                r.snr_bg.to_string(),
                r.cnr.to_string(),
                r.nrmse_percent.map_or_else(|| "-".to_string(), |m| m.to_string()),
                r.snr_e.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..6)
        .map(|i| {
            rows.iter()
                .map(|r| r[i].chars().count())
                .chain(std::iter::once(headers[i].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(headers.to_vec());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rois() -> RoiPair {
        RoiPair {
            target: RoiSpec::new((16.0, 16.0), (6.0, 6.0), RoiKind::Target),
            background: RoiSpec::new((16.0, 44.0), (6.0, 6.0), RoiKind::Background),
        }
    }

    fn random_map(seed: u64, lo: f64, hi: f64) -> StrainMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StrainMap {
            z: Grid::from_shape_fn((32, 64), |_| rng.random_range(lo..hi)),
        }
    }

    #[test]
    fn snr_arithmetic() {
        let roi = rois().target;
        let mut z = StrainMap {
            z: Grid::from_elem((32, 64), 0.02),
        };
        assert!(matches!(snr_target(&z, &roi), Err(Error::DegenerateRoi(_))));
        // Two-valued region: mean 0.02, SD 0.001.
        let px = roi.pixels(32, 64);
        let mut flip = false;
        for (r, c) in px.iter().copied() {
            z.z[[r, c]] = if flip { 0.021 } else { 0.019 };
            flip = !flip;
        }
        if px.len() % 2 == 1 {
            z.z[px[px.len() - 1]] = 0.02;
        }
        let s = region_stats(&z, &roi).unwrap();
        let expect = s.mean / s.sd;
        assert!((snr_target(&z, &roi).unwrap() - expect).abs() < 1e-9);
        if px.len() % 2 == 0 {
            assert!((expect - 20.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cnr_arithmetic() {
        let v: f64 = 2.0 * (0.03f64 - 0.01).powi(2) / (0.005f64.powi(2) * 2.0);
        assert!((v.sqrt() - 4.0).abs() < 1e-12);
        let z = random_map(1, 0.0, 1.0);
        let r = rois();
        let shifted = StrainMap { z: &z.z + 3.0 };
        let scaled = StrainMap { z: &z.z * 2.5 };
        let base = cnr(&z, &r.target, &r.background).unwrap();
        assert!((cnr(&shifted, &r.target, &r.background).unwrap() - base).abs() < 1e-9);
        assert!((cnr(&scaled, &r.target, &r.background).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn background_of_target_geometry_matches_target() {
        let z = random_map(2, 0.0, 1.0);
        let t = rois().target;
        let b = RoiSpec { kind: RoiKind::Background, ..t };
        assert_eq!(snr_target(&z, &t).unwrap(), snr_background(&z, &b).unwrap());
        assert!(matches!(snr_target(&z, &b), Err(Error::Parameter(_))));
    }

    #[test]
    fn snr_e_cases() {
        let z = StrainMap {
            z: Grid::from_elem((8, 8), 0.01),
        };
        assert!(matches!(snr_e(&z), Err(Error::DegenerateMap(_))));
        let sym = StrainMap {
            z: Grid::from_shape_fn((8, 8), |(r, c)| if (r + c) % 2 == 0 { 0.01 } else { -0.01 }),
        };
        assert!(snr_e(&sym).unwrap().abs() < 1e-12);
    }

    #[test]
    fn nrmse_cases() {
        let gt = Grid::from_elem((8, 8), 2.0);
        assert_eq!(nrmse(&gt, &gt, 1e-3, NrmseNorm::Literal).unwrap().percent, 0.0);
        let est = Grid::from_elem((8, 8), 1.8);
        assert!((nrmse(&gt, &est, 1e-3, NrmseNorm::Literal).unwrap().percent - 10.0).abs() < 1e-9);
        assert!((nrmse(&gt, &est, 1e-3, NrmseNorm::GtRms).unwrap().percent - 10.0).abs() < 1e-9);
        let zero = Grid::zeros((8, 8));
        assert!(matches!(
            nrmse(&zero, &est, 1e-3, NrmseNorm::Literal),
            Err(Error::EmptySupport(_))
        ));
        let mut half = gt.clone();
        half.slice_mut(ndarray::s![..4, ..]).fill(0.0);
        let r = nrmse(&half, &est, 1e-3, NrmseNorm::Literal).unwrap();
        assert!((r.excluded_fraction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pairwise_aggregation() {
        let r = rois();
        let pair = |snr: f64| PairMetrics {
            snr_t: snr,
            snr_bg: 1.0,
            cnr: 1.0,
            snr_e: 1.0,
            nrmse_percent: None,
            nrmse_excluded_fraction: None,
        };
        let rep = report_from_pairs("x", vec![pair(10.0), pair(20.0)], &r).unwrap();
        assert_eq!((rep.snr_t.mean, rep.snr_t.sd), (15.0, 5.0));
        assert!(rep.nrmse_percent.is_none());
        let one = report_from_pairs("x", vec![pair(12.0)], &r).unwrap();
        assert_eq!((one.snr_t.mean, one.snr_t.sd), (12.0, 0.0));

        let z = random_map(3, 0.01, 0.03);
        let d = DisplacementField {
            d_y: Grid::from_elem((32, 64), 1.0),
            d_x: Grid::zeros((32, 64)),
        };
        let rep = evaluate_pairwise("USSE", &[z.clone()], &[d.clone()], Some(&[d]), &r, &MetricsConfig::default()).unwrap();
        assert_eq!(rep.nrmse_percent.unwrap().mean, 0.0);
        let table = format_table(&[rep]);
        for h in ["SNR_t", "SNR_bg", "CNR", "NRMSE", "SNR_e", "USSE"] {
            assert!(table.contains(h));
        }
        let json = serde_json::to_value(report_from_pairs("x", vec![pair(1.0)], &r).unwrap()).unwrap();
        assert!(json.get("snr_bg").is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn nrmse_scale_invariant(seed in 0u64..500, k in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = Grid::from_shape_fn((8, 8), |_| rng.random_range(0.5..2.0));
            let est = Grid::from_shape_fn((8, 8), |_| rng.random_range(0.5..2.0));
            for norm in [NrmseNorm::Literal, NrmseNorm::GtRms] {
                let a = nrmse(&gt, &est, 1e-3, norm).unwrap().percent;
                let b = nrmse(&(&gt * k), &(&est * k), 1e-3, norm).unwrap().percent;
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
        }

        #[test]
        fn cnr_shift_and_scale_invariant(seed in 0u64..500, c in -1.0f64..1.0, s in 0.1f64..10.0) {
            let z = random_map(seed, 0.0, 0.05);
            let r = rois();
            let base = cnr(&z, &r.target, &r.background).unwrap();
            let moved = StrainMap { z: z.z.mapv(|v| s * v + c) };
            prop_assert!((cnr(&moved, &r.target, &r.background).unwrap() - base).abs() <= 1e-8 * base.max(1.0));
        }
    }
}
