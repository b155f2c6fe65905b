//! Evaluation metrics: EPE, resolution-normalized EPE (RNE), strict/relaxed
//! accuracy scores, class-split reporting, and motion-segmentation scores.
//!
//! RNE divides each point's end-point error by the ratio of the radar's
//! spatial resolution at that point to a reference LiDAR resolution, so
//! errors are judged against what the sensor could possibly resolve. The
//! reference LiDAR resolution is configurable (the comparison constant is
//! not standardized); all tests pin it explicitly.

use thiserror::Error;

use crate::geometry::{point_resolution, GeometryError, SphericalResolution};
use crate::types::{RadarFrame, SceneFlow};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone)]
pub struct MetricConfig {
    pub radar_res: SphericalResolution,
    /// Reference resolution the RNE denominator is measured against.
    pub lidar_res: SphericalResolution,
    pub sas_abs: f64,
    pub sas_rel: f64,
    pub ras_abs: f64,
    pub ras_rel: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            radar_res: SphericalResolution::new(0.2, 1.6f64.to_radians(), 1.0f64.to_radians()),
            lidar_res: SphericalResolution::new(0.02, 0.08f64.to_radians(), 0.4f64.to_radians()),
            sas_abs: 0.1,
            sas_rel: 0.10,
            ras_abs: 0.2,
            ras_rel: 0.20,
        }
    }
}

/// Flat evaluation summary. Class-split fields are `None` when the class is
/// empty in the ground truth (serialized as `undefined`, never NaN).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub avg_epe: f64,
    pub avg_rne: f64,
    pub stat_rne: Option<f64>,
    pub mov_rne: Option<f64>,
    pub fifty_fifty_rne: Option<f64>,
    pub sas: f64,
    pub ras: f64,
    pub seg_accuracy: f64,
    pub seg_miou: f64,
    pub seg_sensitivity: f64,
}

/// Renders a value with 6 significant digits.
fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).clamp(0, 17) as usize;
    format!("{v:.decimals$}")
}

impl EvalReport {
    /// Serializes to the flat key-value text format, one `key value` line
    /// per metric, 6 significant digits.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), sig6);
        format!(
            "avg_epe {}\navg_rne {}\nstat_rne {}\nmov_rne {}\nfifty_fifty_rne {}\nsas {}\nras {}\nseg_accuracy {}\nseg_miou {}\nseg_sensitivity {}\n",
            sig6(self.avg_epe),
            sig6(self.avg_rne),
            opt(self.stat_rne),
            opt(self.mov_rne),
            opt(self.fifty_fifty_rne),
            sig6(self.sas),
            sig6(self.ras),
            sig6(self.seg_accuracy),
            sig6(self.seg_miou),
            sig6(self.seg_sensitivity),
        )
    }
}

/// Per-point end-point error ‖sᵢ − s_gt,i‖.
pub fn epe(flow: &SceneFlow, gt: &SceneFlow) -> Result<Vec<f64>, MetricError> {
    if flow.len() != gt.len() {
        return Err(MetricError::LengthMismatch(flow.len(), gt.len()));
    }
    Ok(flow
        .vectors
        .iter()
        .zip(&gt.vectors)
        .map(|(s, g)| {
            let d = [s[0] - g[0], s[1] - g[1], s[2] - g[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect())
}

/// Per-point RNE: EPE divided by the radar-to-reference resolution ratio at
/// each source point.
pub fn rne(frame: &RadarFrame, epe: &[f64], cfg: &MetricConfig) -> Result<Vec<f64>, MetricError> {
    if frame.len() != epe.len() {
        return Err(MetricError::LengthMismatch(frame.len(), epe.len()));
    }
    frame
        .points
        .iter()
        .zip(epe)
        .map(|(p, &e)| {
            let radar = point_resolution(p.position, &cfg.radar_res)?;
            let lidar = point_resolution(p.position, &cfg.lidar_res)?;
            Ok(e / (radar / lidar))
        })
        .collect()
}

fn score(rne: &[f64], gt_norm: &[f64], abs_thr: f64, rel_thr: f64) -> f64 {
    if rne.is_empty() {
        return 0.0;
    }
    let hits = rne
        .iter()
        .zip(gt_norm)
        .filter(|(&r, &n)| r <= abs_thr || (n > 0.0 && r / n <= rel_thr))
        .count();
    hits as f64 / rne.len() as f64
}

/// Strict and relaxed accuracy scores. A point passes if its RNE is under
/// the absolute threshold or under the relative threshold of its gt-flow
/// norm; zero-norm gt points use the absolute branch only.
pub fn accuracy_scores(rne: &[f64], gt_norm: &[f64], cfg: &MetricConfig) -> Result<(f64, f64), MetricError> {
    if rne.len() != gt_norm.len() {
        return Err(MetricError::LengthMismatch(rne.len(), gt_norm.len()));
    }
    Ok((
        score(rne, gt_norm, cfg.sas_abs, cfg.sas_rel),
        score(rne, gt_norm, cfg.ras_abs, cfg.ras_rel),
    ))
}

/// Motion segmentation quality: overall accuracy, mean IoU over the moving
/// and static classes, and moving-class recall (sensitivity). Empty classes
/// contribute IoU 1 (vacuously perfect); sensitivity with no gt movers is 1.
pub fn segmentation_scores(pred_moving: &[bool], gt_moving: &[bool]) -> Result<(f64, f64, f64), MetricError> {
    if pred_moving.len() != gt_moving.len() {
        return Err(MetricError::LengthMismatch(pred_moving.len(), gt_moving.len()));
    }
    let n = pred_moving.len();
    let (mut tp, mut fp, mut fne, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred_moving.iter().zip(gt_moving) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let accuracy = if n == 0 { 1.0 } else { (tp + tn) as f64 / n as f64 };
    let iou = |inter: usize, union: usize| if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let miou = 0.5 * (iou(tp, tp + fp + fne) + iou(tn, tn + fp + fne));
    let sensitivity = if tp + fne == 0 { 1.0 } else { tp as f64 / (tp + fne) as f64 };
    Ok((accuracy, miou, sensitivity))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for x in v {
        sum += x;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Builds the full report from per-point errors, labels, and the predicted
/// motion segmentation. Points flagged invalid (ghost outliers) are excluded
/// from all scores; the average RNE is the pooled mean, not the class
/// average.
#[allow(clippy::too_many_arguments)]
pub fn class_split_report(
    epe_vals: &[f64],
    rne_vals: &[f64],
    gt_flow: &SceneFlow,
    gt_moving: &[bool],
    valid: &[bool],
    pred_moving: &[bool],
    cfg: &MetricConfig,
) -> Result<EvalReport, MetricError> {
    let n = epe_vals.len();
    for len in [rne_vals.len(), gt_flow.len(), gt_moving.len(), valid.len(), pred_moving.len()] {
        if len != n {
            return Err(MetricError::LengthMismatch(n, len));
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    let epe_k: Vec<f64> = keep.iter().map(|&i| epe_vals[i]).collect();
    let rne_k: Vec<f64> = keep.iter().map(|&i| rne_vals[i]).collect();
    let norm_k: Vec<f64> = keep
        .iter()
        .map(|&i| {
            let g = gt_flow.vectors[i];
            (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
        })
        .collect();
    let stat_rne = mean(keep.iter().filter(|&&i| !gt_moving[i]).map(|&i| rne_vals[i]));
    let mov_rne = mean(keep.iter().filter(|&&i| gt_moving[i]).map(|&i| rne_vals[i]));
    let fifty_fifty_rne = match (stat_rne, mov_rne) {
        (Some(s), Some(m)) => Some(0.5 * (s + m)),
        _ => None,
    };
    let (sas, ras) = accuracy_scores(&rne_k, &norm_k, cfg)?;
    let pred_k: Vec<bool> = keep.iter().map(|&i| pred_moving[i]).collect();
    let gt_k: Vec<bool> = keep.iter().map(|&i| gt_moving[i]).collect();
    let (seg_accuracy, seg_miou, seg_sensitivity) = segmentation_scores(&pred_k, &gt_k)?;
    Ok(EvalReport {
        avg_epe: mean(epe_k.iter().copied()).unwrap_or(0.0),
        avg_rne: mean(rne_k.iter().copied()).unwrap_or(0.0),
        stat_rne,
        mov_rne,
        fifty_fifty_rne,
        sas,
        ras,
        seg_accuracy,
        seg_miou,
        seg_sensitivity,
    })
}
