//! Detection metrics: 3D average precision inside the evaluation region,
//! per-domain report containers, and radar occupancy statistics.
//!
//! AP ranks detections globally across frames by confidence, matches each
//! one greedily to the best still-unmatched ground-truth box of its frame
//! at the given IoU threshold, and integrates the precision envelope over
//! recall with all-point interpolation. All-point integration is the least
//! lossy choice and is stated here so numbers stay comparable.
//!
//! Occupancy statistics answer a different question: how often does at
//! least one radar point land inside a ground-truth box, per distance bin,
//! with the ego's own cloud versus the union of every agent's cloud.

use crate::geometry::{iou_3d, Box3};
use crate::detection::Detection;
use crate::math;
use crate::sensing::PointCloud;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalError {
    InvalidRegion,
    InvalidBins,
    /// Detections and ground truth must come in equal-length frame lists.
    FrameCountMismatch,
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::InvalidRegion => write!(f, "evaluation region bounds are not ordered"),
            EvalError::InvalidBins => write!(f, "distance bin edges must increase"),
            EvalError::FrameCountMismatch => {
                write!(f, "detection and ground-truth frame counts differ")
            }
        }
    }
}

impl core::error::Error for EvalError {}

/// Where detections count, in the ego sensor frame. The angular gate is a
/// stand-in for a forward camera's field of view; at the default 90 degree
/// half-angle it reduces to the front half-space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRegion {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub fov_half_angle_deg: f64,
}

impl Default for EvalRegion {
    fn default() -> Self {
        EvalRegion { x_range: [0.0, 140.0], y_range: [-40.0, 40.0], fov_half_angle_deg: 90.0 }
    }
}

impl EvalRegion {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.x_range[0] < self.x_range[1]
            && self.y_range[0] < self.y_range[1]
            && self.fov_half_angle_deg > 0.0
        {
            Ok(())
        } else {
            Err(EvalError::InvalidRegion)
        }
    }

    /// Whether a box center is inside the bands and the angular gate.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if x < self.x_range[0] || x > self.x_range[1] || y < self.y_range[0] || y > self.y_range[1]
        {
            return false;
        }
        let half = self.fov_half_angle_deg.to_radians();
        // atan2(0, 0) is 0, so a box at the origin counts as in front.
        math::abs(math::atan2(y, x)) <= half + 1e-12
    }
}

/// Keeps the boxes whose center lies in the region.
pub fn region_filter(boxes: &[Box3], region: &EvalRegion) -> Vec<Box3> {
    boxes
        .iter()
        .filter(|b| region.contains(b.center.x, b.center.y))
        .cloned()
        .collect()
}

/// Same gate applied to scored detections.
pub fn region_filter_detections(dets: &[Detection], region: &EvalRegion) -> Vec<Detection> {
    dets.iter()
        .filter(|d| region.contains(d.bbox.center.x, d.bbox.center.y))
        .cloned()
        .collect()
}

/// One point of the precision-recall curve, recorded after each ranked
/// detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

fn ranked_matches(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Box3>],
    iou_thresh: f64,
) -> Result<Vec<(f64, bool)>, EvalError> {
    if detections.len() != ground_truth.len() {
        return Err(EvalError::FrameCountMismatch);
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (f, dets) in detections.iter().enumerate() {
        for d in 0..dets.len() {
            ranked.push((f, d));
        }
    }
    ranked.sort_by(|a, b| {
        let sa = detections[a.0][a.1].score;
        let sb = detections[b.0][b.1].score;
        sb.partial_cmp(&sa).unwrap_or(core::cmp::Ordering::Equal)
    });

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(ranked.len());
    for (f, d) in ranked {
        let det = &detections[f][d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth[f].iter().enumerate() {
            if matched[f][g] {
                continue;
            }
            let iou = iou_3d(&det.bbox, gt).unwrap_or(0.0);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        let is_tp = if let Some((g, _)) = best {
            matched[f][g] = true;
            true
        } else {
            false
        };
        out.push((det.score, is_tp));
    }
    Ok(out)
}

/// Raw precision-recall points in rank order. Empty when there are no
/// detections or no ground truth.
pub fn pr_curve(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Box3>],
    iou_thresh: f64,
) -> Result<Vec<PrPoint>, EvalError> {
    let n_gt: usize = ground_truth.iter().map(|g| g.len()).sum();
    let marks = ranked_matches(detections, ground_truth, iou_thresh)?;
    if n_gt == 0 {
        return Ok(Vec::new());
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(marks.len());
    for (rank, (score, is_tp)) in marks.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        points.push(PrPoint {
            recall: tp as f64 / n_gt as f64,
            precision: tp as f64 / (rank + 1) as f64,
            score: *score,
        });
    }
    Ok(points)
}

/// Average precision at one IoU threshold: the area under the interpolated
/// precision-recall curve, where interpolated precision at recall r is the
/// maximum raw precision at any recall >= r.
///
/// Conventions for degenerate inputs: no ground truth and no detections is
/// a perfect 1.0; detections against no ground truth score 0.0; ground
/// truth with no detections scores 0.0.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Box3>],
    iou_thresh: f64,
) -> Result<f64, EvalError> {
    let n_gt: usize = ground_truth.iter().map(|g| g.len()).sum();
    let n_det: usize = detections.iter().map(|d| d.len()).sum();
    if detections.len() != ground_truth.len() {
        return Err(EvalError::FrameCountMismatch);
    }
    if n_gt == 0 {
        return Ok(if n_det == 0 { 1.0 } else { 0.0 });
    }
    let points = pr_curve(detections, ground_truth, iou_thresh)?;
    if points.is_empty() {
        return Ok(0.0);
    }
    // Precision envelope from the right, then sum rectangle areas over
    // recall increments.
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len() - 1).rev() {
        if envelope[i + 1] > envelope[i] {
            envelope[i] = envelope[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        if p.recall > last_recall {
            ap += (p.recall - last_recall) * env;
            last_recall = p.recall;
        }
    }
    Ok(ap)
}

/// Per-domain slice of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    /// AP per IoU threshold, aligned with [`EvalReport::ious`].
    pub ap: Vec<f64>,
    pub frames: usize,
    pub gt_boxes: usize,
    pub detections: usize,
}

/// Mean per-frame communication cost over an evaluated split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub mean_elements: f64,
    pub mean_volume_log2: f64,
    pub mean_latency_ms: f64,
}

/// The full evaluation artifact: AP per weather domain and IoU threshold,
/// plus the communication summary when agents cooperated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ious: Vec<f64>,
    pub domains: Vec<DomainReport>,
    pub comm: Option<CommSummary>,
}

/// Occupancy of one distance bin: how many ground-truth boxes fell in it,
/// how many contained at least one radar point, and the mean point count
/// per box. Bins that saw no boxes are omitted entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyBin {
    pub range: [f64; 2],
    pub boxes: usize,
    pub occupied: usize,
    pub mean_points: f64,
}

impl OccupancyBin {
    pub fn rate(&self) -> f64 {
        self.occupied as f64 / self.boxes as f64
    }
}

/// Radar coverage of ground-truth boxes by radial distance from the ego.
///
/// Every frame supplies the agents' radar clouds (ego's first) and the
/// ground-truth boxes, all already expressed in the ego frame. Ego-only
/// mode reads just the first cloud; cooperative mode unions them all.
pub fn occupancy_stats(
    frames: &[(Vec<PointCloud>, Vec<Box3>)],
    bin_edges: &[f64],
    cooperative: bool,
) -> Result<Vec<OccupancyBin>, EvalError> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidBins);
    }
    let n_bins = bin_edges.len() - 1;
    let mut boxes = vec![0usize; n_bins];
    let mut occupied = vec![0usize; n_bins];
    let mut points_sum = vec![0usize; n_bins];
    for (clouds, gts) in frames {
        let used: &[PointCloud] = if cooperative { clouds } else { &clouds[..clouds.len().min(1)] };
        for gt in gts {
            let dist = math::hypot(gt.center.x, gt.center.y);
            let Some(bin) = bin_edges.windows(2).position(|w| dist >= w[0] && dist < w[1]) else {
                continue;
            };
            let mut inside = 0usize;
            for cloud in used {
                inside += cloud.points.iter().filter(|p| gt.contains(**p)).count();
            }
            boxes[bin] += 1;
            if inside > 0 {
                occupied[bin] += 1;
            }
            points_sum[bin] += inside;
        }
    }
    Ok((0..n_bins)
        .filter(|&i| boxes[i] > 0)
        .map(|i| OccupancyBin {
            range: [bin_edges[i], bin_edges[i + 1]],
            boxes: boxes[i],
            occupied: occupied[i],
            mean_points: points_sum[i] as f64 / boxes[i] as f64,
        })
        .collect())
}
