use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldops::StrainMap;
use crate::metrics::{pair_metrics, report_from_pairs, MetricsConfig, MetricsReport};
use crate::multistage::{musse_forward, select_m_opt, StageStack, DEFAULT_TAU_REL};
use crate::rfdata::{load_sequence, write_grid_blob, write_json, DatasetManifest, RfSequence, RoiPair, Split};

/// Row label for stage `m`.
pub fn stage_label(m: usize) -> String {
    if m == 1 {
        "USSE-Net".to_string()
    } else {
        format!("MUSSE-Net (stage {m})")
    }
}

/// A sequence to evaluate with the ROIs that apply to it.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub sequence: RfSequence,
    pub rois: RoiPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    /// One row per stage, stage 1 first.
    pub reports: Vec<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_opt: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub relative_changes: Vec<f64>,
}

/// Stagewise metrics pooled over every frame pair of `items`.
pub fn evaluate_sequences(stack: &StageStack, items: &[EvalItem], cfg: &MetricsConfig) -> Result<Vec<MetricsReport>> {
    evaluate_items(stack, items, cfg).map(|(r, _)| r)
}

type StageDisps = Vec<Vec<crate::fieldops::DisplacementField>>;

fn evaluate_items(stack: &StageStack, items: &[EvalItem], cfg: &MetricsConfig) -> Result<(Vec<MetricsReport>, StageDisps)> {
    if items.is_empty() {
        return Err(Error::NoData("no sequences to evaluate".into()));
    }
    let big_m = stack.len();
    let mut pairs = vec![Vec::new(); big_m];
    let mut disps = vec![Vec::new(); big_m];
    for item in items {
        let out = musse_forward(&item.sequence, stack)?;
        let gts = item.sequence.ground_truth.as_deref();
        for (m, steps) in out.stages.iter().enumerate() {
            for (t, s) in steps.iter().enumerate() {
                let gt = gts.map(|g| &g[t]);
                pairs[m].push(pair_metrics(&s.strain, &s.displacement, gt, &item.rois, cfg)?);
                disps[m].push(s.displacement.clone());
            }
        }
    }
    let reports = pairs
        .into_iter()
        .enumerate()
        .map(|(m, p)| report_from_pairs(&stage_label(m + 1), p, &items[0].rois))
        .collect::<Result<Vec<_>>>()?;
    Ok((reports, disps))
}

/// Evaluates every split present in `manifest`. Entries without their own
/// ROIs use `default_rois`.
pub fn evaluate(
    stack: &StageStack,
    manifest: &DatasetManifest,
    default_rois: Option<&RoiPair>,
    cfg: &MetricsConfig,
) -> Result<Vec<SplitReport>> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let items = manifest
            .split(split)
            .map(|e| {
                let rois = e.rois.or(default_rois.copied()).ok_or_else(|| {
                    Error::Configuration(format!("no ROIs for {}", e.path.display()))
                })?;
                Ok(EvalItem {
                    name: e.path.display().to_string(),
                    sequence: load_sequence(&e.path)?,
                    rois,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            continue;
        }
        let (reports, disps) = evaluate_items(stack, &items, cfg)?;
        let (m_opt, relative_changes) = if disps.len() >= 2 {
            let sel = select_m_opt(&disps, DEFAULT_TAU_REL)?;
            (Some(sel.m_opt), sel.relative_changes)
        } else {
            (None, Vec::new())
        };
        out.push(SplitReport {
            split,
            reports,
            m_opt,
            relative_changes,
        });
    }
    if out.is_empty() {
        return Err(Error::NoData("manifest has no entries".into()));
    }
    Ok(out)
}

/// Strain range mapped linearly onto 0..=255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrainWindow {
    pub low: f64,
    pub high: f64,
}

impl StrainWindow {
    pub fn symmetric(a: f64) -> Self {
        Self { low: -a, high: a }
    }

    /// `[0, 1.5 * median]`, or a symmetric window around zero when the median
    /// is not positive.
    pub fn default_for(z: &StrainMap) -> Self {
        let mut v: Vec<f64> = z.z.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Self::symmetric(1e-3);
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        if median > 0.0 {
            return Self {
                low: 0.0,
                high: 1.5 * median,
            };
        }
        let a = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Self::symmetric(if a > 0.0 { a } else { 1e-3 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.high > self.low) {
            return Err(Error::Configuration(format!("invalid strain window {self:?}")));
        }
        Ok(())
    }
}

pub fn strain_to_gray(z: &StrainMap, window: StrainWindow) -> Result<GrayImage> {
    window.validate()?;
    let (h, w) = z.shape();
    let span = window.high - window.low;
    Ok(GrayImage::from_fn(w as u32, h as u32, |c, r| {
        let v = ((z.z[[r as usize, c as usize]] - window.low) / span).clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    }))
}

pub fn displacement_blob_name(t: usize) -> String {
    format!("displacement_{t:04}.f32")
}

pub fn strain_blob_name(t: usize) -> String {
    format!("strain_{t:04}.f32")
}

pub fn strain_image_name(t: usize) -> String {
    format!("strain_{t:04}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub stages: usize,
    pub windows: Vec<StrainWindow>,
    pub files: Vec<PathBuf>,
}

pub const INFER_INDEX: &str = "infer.json";

/// Runs the full stack on `seq` and writes, per step `t`, the displacement
/// blob (`d_y` then `d_x`), the strain blob and an 8-bit strain image, plus
/// an `infer.json` index.
pub fn infer(stack: &StageStack, seq: &RfSequence, out_dir: &Path, window: Option<StrainWindow>) -> Result<InferSummary> {
    if let Some(w) = window {
        w.validate()?;
    }
    let out = musse_forward(seq, stack)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = seq.shape();
    let mut files = Vec::new();
    let mut windows = Vec::new();
    for (i, step) in out.final_stage().iter().enumerate() {
        let t = i + 1;
        let d = out_dir.join(displacement_blob_name(t));
        write_grid_blob(&d, &[&step.displacement.d_y, &step.displacement.d_x])?;
        let z = out_dir.join(strain_blob_name(t));
        write_grid_blob(&z, &[&step.strain.z])?;
        let win = window.unwrap_or_else(|| StrainWindow::default_for(&step.strain));
        let png = out_dir.join(strain_image_name(t));
        strain_to_gray(&step.strain, win)?.save(&png)?;
        files.extend([d, z, png]);
        windows.push(win);
    }
    let summary = InferSummary {
        height: h,
        width: w,
        frames: seq.len(),
        stages: stack.len(),
        windows,
        files,
    };
    write_json(&out_dir.join(INFER_INDEX), &summary)?;
    Ok(summary)
}

/// Stage stack stored in a run directory, as `f32` on the CPU.
pub fn load_stack(run_dir: &Path) -> Result<StageStack> {
    StageStack::load(run_dir, DType::F32, &Device::Cpu)
}

/// Loads the stack from `run_dir` and infers on the sequence in `seq_dir`.
pub fn infer_run(run_dir: &Path, seq_dir: &Path, out_dir: &Path, window: Option<StrainWindow>) -> Result<InferSummary> {
    let stack = load_stack(run_dir)?;
    infer(&stack, &load_sequence(seq_dir)?, out_dir, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldops::Grid;
    use crate::network::NetworkConfig;
    use crate::phantom::{simulate_sequence, PhantomSpec};
    use crate::rfdata::{read_grid_blob, RoiKind, RoiSpec};

    fn rois() -> RoiPair {
        RoiPair {
            target: RoiSpec::new((16.0, 16.0), (6.0, 6.0), RoiKind::Target),
            background: RoiSpec::new((16.0, 5.0), (4.0, 3.0), RoiKind::Background),
        }
    }

    fn stack(m: usize) -> StageStack {
        StageStack::init(&NetworkConfig::new(4, 8, 2), m, 1, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn default_window_and_mapping() {
        let z = StrainMap {
            z: Grid::from_shape_fn((2, 2), |(r, c)| 0.01 * (r * 2 + c + 1) as f64),
        };
        let w = StrainWindow::default_for(&z);
        assert_eq!(w.low, 0.0);
        assert!((w.high - 1.5 * 0.025).abs() < 1e-15);
        let img = strain_to_gray(&z, w).unwrap();
        assert_eq!(img.get_pixel(0, 0).0[0], (0.01 / 0.0375 * 255.0f64).round() as u8);
        assert_eq!(img.get_pixel(1, 1).0[0], 255);
    }

    #[test]
    fn zero_strain_is_mid_gray() {
        let z = StrainMap {
            z: Grid::zeros((4, 5)),
        };
        for w in [StrainWindow::symmetric(0.02), StrainWindow::default_for(&z)] {
            let img = strain_to_gray(&z, w).unwrap();
            assert!(img.pixels().all(|p| p.0[0] == 128));
        }
        assert!(strain_to_gray(&z, StrainWindow { low: 1.0, high: 1.0 }).is_err());
    }

    #[test]
    fn one_stage_gives_one_row_and_gt_gives_nrmse() {
        let (seq, _) = simulate_sequence(&PhantomSpec::uniform(32, 32, 0.01, 2, 3)).unwrap();
        let item = EvalItem {
            name: "a".into(),
            sequence: seq.clone(),
            rois: rois(),
        };
        let r = evaluate_sequences(&stack(1), &[item.clone()], &MetricsConfig::default()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].label, "USSE-Net");
        assert!(r[0].nrmse_percent.is_some());
        assert_eq!(r[0].n_pairs, 2);
        let again = evaluate_sequences(&stack(1), &[item.clone()], &MetricsConfig::default()).unwrap();
        assert_eq!(r, again);

        let mut no_gt = item;
        no_gt.sequence.ground_truth = None;
        let r = evaluate_sequences(&stack(2), &[no_gt], &MetricsConfig::default()).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|x| x.nrmse_percent.is_none() && x.snr_e.mean.is_finite()));
    }

    #[test]
    fn infer_writes_blobs_and_images() {
        let (seq, _) = simulate_sequence(&PhantomSpec::uniform(32, 32, 0.005, 5, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = infer(&stack(2), &seq, dir.path(), None).unwrap();
        assert_eq!(s.frames, 5);
        for t in 1..=5 {
            assert!(dir.path().join(strain_image_name(t)).is_file());
            let path = dir.path().join(displacement_blob_name(t));
            let bytes = fs::read(&path).unwrap();
            let grids = read_grid_blob(&path, 32, 32, 2).unwrap();
            let copy = dir.path().join("copy.f32");
            write_grid_blob(&copy, &[&grids[0], &grids[1]]).unwrap();
            assert_eq!(bytes, fs::read(&copy).unwrap());
            let img = image::open(dir.path().join(strain_image_name(t))).unwrap().to_luma8();
            assert_eq!(img.dimensions(), (32, 32));
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 5 * 3 + 2);
    }

    #[test]
    fn missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let err = infer_run(dir.path(), dir.path(), dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
