//! Box prediction on the fused BEV grid: the two-branch head, target
//! assignment, the detection losses, and greedy NMS.
//!
//! The head is anchor-free and single-class. Every grid cell predicts one
//! score logit and eight regression channels; the cell containing a box
//! center is the positive for that box. Classification trains with a focal
//! loss over every cell, localization with a smooth-L1 over positive cells
//! only, and the combined objective adds the externally supplied feature
//! denoising term:
//!
//!   total = beta_cls * L_cls + beta_loc * L_loc + denoising term.

use crate::bev::GridSpec;
use crate::geometry::{iou_3d, Box3, Vec3};
use crate::math;
use crate::nn::{Gradients, Graph, NnError, ParamId, ParamStore, Tensor4, Trace};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum DetectionError {
    InvalidConfig(String),
    ShapeMismatch,
    /// A loss or gradient went NaN/infinite; training must stop.
    NonFinite,
    Engine(NnError),
}

impl core::fmt::Display for DetectionError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DetectionError::InvalidConfig(m) => write!(f, "invalid detection config: {m}"),
            DetectionError::ShapeMismatch => write!(f, "prediction/target shapes differ"),
            DetectionError::NonFinite => write!(f, "non-finite detection loss"),
            DetectionError::Engine(e) => write!(f, "graph engine: {e}"),
        }
    }
}

impl core::error::Error for DetectionError {}

impl From<NnError> for DetectionError {
    fn from(e: NnError) -> Self {
        DetectionError::Engine(e)
    }
}

/// One decoded box with its confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3,
    pub score: f64,
}

/// Loss weights and shapes. The published work defers the numeric weights
/// to supplementary material, so these follow common single-stage detector
/// practice and stay configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionLossConfig {
    pub beta_cls: f64,
    pub beta_loc: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_delta: f64,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        DetectionLossConfig {
            beta_cls: 1.0,
            beta_loc: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_delta: 1.0 / 9.0,
        }
    }
}

impl DetectionLossConfig {
    pub fn validate(&self) -> Result<(), DetectionError> {
        if self.beta_cls < 0.0 || self.beta_loc < 0.0 {
            return Err(DetectionError::InvalidConfig("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(DetectionError::InvalidConfig("bad focal parameters".into()));
        }
        if !(self.smooth_l1_delta > 0.0) {
            return Err(DetectionError::InvalidConfig("smooth-L1 delta must be positive".into()));
        }
        Ok(())
    }
}

/// Number of regression channels per cell: dx, dy, z, log sizes, sin/cos
/// of the heading.
pub const REG_CHANNELS: usize = 8;

/// Score logit that makes a fresh head predict ~10% foreground, keeping
/// the focal loss stable at the start of training.
pub const SCORE_BIAS_INIT: f64 = -2.19;

/// The two 1x1-conv branches reading the fused grid.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    score_graph: Graph,
    reg_graph: Graph,
    pub score_w: ParamId,
    pub score_b: ParamId,
    pub reg_w: ParamId,
    pub reg_b: ParamId,
    pub channels: usize,
}

impl DetectionHead {
    pub fn build(
        store: &mut ParamStore,
        channels: usize,
        prefix: &str,
        seed: u64,
    ) -> Result<Self, DetectionError> {
        if channels == 0 {
            return Err(DetectionError::InvalidConfig("channels must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let std = math::sqrt(1.0 / channels as f64);
        let score_w = store.add(
            &format!("{prefix}.score.w"),
            Tensor4::randn([1, channels, 1, 1], std, &mut rng),
        )?;
        let mut sb = Tensor4::zeros([1, 1, 1, 1]);
        sb.fill(SCORE_BIAS_INIT);
        let score_b = store.add(&format!("{prefix}.score.b"), sb)?;
        let reg_w = store.add(
            &format!("{prefix}.reg.w"),
            Tensor4::randn([REG_CHANNELS, channels, 1, 1], std, &mut rng),
        )?;
        let reg_b = store.add(&format!("{prefix}.reg.b"), Tensor4::zeros([1, REG_CHANNELS, 1, 1]))?;

        let mut score_graph = Graph::new();
        let x = score_graph.input(0);
        score_graph.conv1x1(x, score_w, Some(score_b));
        let mut reg_graph = Graph::new();
        let x = reg_graph.input(0);
        reg_graph.conv1x1(x, reg_w, Some(reg_b));
        Ok(DetectionHead { score_graph, reg_graph, score_w, score_b, reg_w, reg_b, channels })
    }

    /// Score logits `[1,1,H,W]` and regression maps `[1,8,H,W]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        fused: &Tensor4,
    ) -> Result<(Trace, Trace), DetectionError> {
        let score = self.score_graph.forward(store, &[fused], 0.0)?;
        let reg = self.reg_graph.forward(store, &[fused], 0.0)?;
        Ok((score, reg))
    }

    /// Backpropagates both branches; returns the summed gradient on the
    /// fused grid.
    pub fn backward(
        &self,
        store: &ParamStore,
        traces: &(Trace, Trace),
        grad_score: &Tensor4,
        grad_reg: &Tensor4,
        grads: &mut Gradients,
    ) -> Result<Tensor4, DetectionError> {
        let gs = self.score_graph.backward(store, &traces.0, grad_score, grads)?;
        let gr = self.reg_graph.backward(store, &traces.1, grad_reg, grads)?;
        let mut g = gs.into_iter().next().ok_or(DetectionError::ShapeMismatch)?;
        let r = gr.into_iter().next().ok_or(DetectionError::ShapeMismatch)?;
        g.add_scaled(&r, 1.0).map_err(DetectionError::Engine)?;
        Ok(g)
    }
}

/// Per-cell supervision: binary labels, regression targets, and the list
/// of positive cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub cls: Tensor4,
    pub reg: Tensor4,
    pub positives: Vec<(usize, usize)>,
}

/// Marks the cell under each box center positive and writes its regression
/// targets: center offset from the cell center, absolute z, log sizes, and
/// the sine/cosine of the doubled heading. Doubling folds the angle over
/// the box's half-turn symmetry, so traffic moving in opposite directions
/// shares one target instead of pulling the head toward two. Boxes whose
/// center falls outside the grid are skipped; if two centers share a cell
/// the later box wins.
pub fn assign_targets(gt_boxes: &[Box3], spec: &GridSpec) -> Targets {
    let (h, w) = (spec.height(), spec.width());
    let mut cls = Tensor4::zeros([1, 1, h, w]);
    let mut reg = Tensor4::zeros([1, REG_CHANNELS, h, w]);
    let mut positives = Vec::new();
    for b in gt_boxes {
        let Some((ix, iy)) = spec.cell_index(b.center.x, b.center.y) else {
            continue;
        };
        let (cx, cy) = spec.cell_center(ix, iy);
        if cls.at(0, 0, iy, ix) == 0.0 {
            positives.push((iy, ix));
        }
        *cls.at_mut(0, 0, iy, ix) = 1.0;
        let t = [
            b.center.x - cx,
            b.center.y - cy,
            b.center.z,
            math::ln(b.size.x),
            math::ln(b.size.y),
            math::ln(b.size.z),
            math::sin(2.0 * b.yaw),
            math::cos(2.0 * b.yaw),
        ];
        for (c, v) in t.iter().enumerate() {
            *reg.at_mut(0, c, iy, ix) = *v;
        }
    }
    Targets { cls, reg, positives }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + math::exp(-z))
}

/// Loss components; `total` already includes the caller-supplied denoising
/// term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub denoising: f64,
}

/// Focal + smooth-L1 objective. Classification sums over every cell and
/// normalizes by the positive count (min 1); localization averages over
/// the positive cells' regression channels. `denoising_term` is added to
/// the total as-is.
pub fn detection_loss(
    score_logits: &Tensor4,
    reg_preds: &Tensor4,
    targets: &Targets,
    cfg: &DetectionLossConfig,
    denoising_term: f64,
) -> Result<DetectionLoss, DetectionError> {
    let (loss, _, _) = loss_with_grads(score_logits, reg_preds, targets, cfg, denoising_term, false)?;
    Ok(loss)
}

/// Loss plus gradients with respect to the score logits and regression
/// maps.
pub fn detection_loss_grad(
    score_logits: &Tensor4,
    reg_preds: &Tensor4,
    targets: &Targets,
    cfg: &DetectionLossConfig,
    denoising_term: f64,
) -> Result<(DetectionLoss, Tensor4, Tensor4), DetectionError> {
    let (loss, gs, gr) =
        loss_with_grads(score_logits, reg_preds, targets, cfg, denoising_term, true)?;
    Ok((loss, gs.unwrap(), gr.unwrap()))
}

#[allow(clippy::type_complexity)]
fn loss_with_grads(
    score_logits: &Tensor4,
    reg_preds: &Tensor4,
    targets: &Targets,
    cfg: &DetectionLossConfig,
    denoising_term: f64,
    with_grads: bool,
) -> Result<(DetectionLoss, Option<Tensor4>, Option<Tensor4>), DetectionError> {
    cfg.validate()?;
    if score_logits.shape() != targets.cls.shape() || reg_preds.shape() != targets.reg.shape() {
        return Err(DetectionError::ShapeMismatch);
    }
    let norm = targets.positives.len().max(1) as f64;
    let (alpha, gamma) = (cfg.focal_alpha, cfg.focal_gamma);

    let mut cls_sum = 0.0;
    let mut grad_score = if with_grads { Some(Tensor4::zeros(score_logits.shape())) } else { None };
    for (i, (&z, &y)) in score_logits.data().iter().zip(targets.cls.data()).enumerate() {
        let p = sigmoid(z);
        let (l, dz) = if y > 0.5 {
            // -alpha (1-p)^gamma ln p, clamped away from ln(0).
            let lp = math::ln(p.max(1e-12));
            let l = -alpha * math::powf(1.0 - p, gamma) * lp;
            let dz = alpha * math::powf(1.0 - p, gamma) * (gamma * p * lp - (1.0 - p));
            (l, dz)
        } else {
            let lq = math::ln((1.0 - p).max(1e-12));
            let l = -(1.0 - alpha) * math::powf(p, gamma) * lq;
            let dz = (1.0 - alpha) * math::powf(p, gamma) * (p - gamma * (1.0 - p) * lq);
            (l, dz)
        };
        cls_sum += l;
        if let Some(g) = &mut grad_score {
            g.data_mut()[i] = cfg.beta_cls * dz / norm;
        }
    }
    let cls = cls_sum / norm;

    let mut loc_sum = 0.0;
    let mut grad_reg = if with_grads { Some(Tensor4::zeros(reg_preds.shape())) } else { None };
    let n_loc = (targets.positives.len() * REG_CHANNELS).max(1) as f64;
    let delta = cfg.smooth_l1_delta;
    for &(iy, ix) in &targets.positives {
        for c in 0..REG_CHANNELS {
            let d = reg_preds.at(0, c, iy, ix) - targets.reg.at(0, c, iy, ix);
            let (l, dd) = if math::abs(d) < delta {
                (0.5 * d * d / delta, d / delta)
            } else {
                (math::abs(d) - 0.5 * delta, if d >= 0.0 { 1.0 } else { -1.0 })
            };
            loc_sum += l;
            if let Some(g) = &mut grad_reg {
                *g.at_mut(0, c, iy, ix) = cfg.beta_loc * dd / n_loc;
            }
        }
    }
    let loc = loc_sum / n_loc;

    let total = cfg.beta_cls * cls + cfg.beta_loc * loc + denoising_term;
    if !total.is_finite() {
        return Err(DetectionError::NonFinite);
    }
    Ok((DetectionLoss { total, cls, loc, denoising: denoising_term }, grad_score, grad_reg))
}

/// Inverts the target encoding at one cell.
fn decode_cell(reg: &Tensor4, spec: &GridSpec, iy: usize, ix: usize) -> Box3 {
    let (cx, cy) = spec.cell_center(ix, iy);
    let r = |c: usize| reg.at(0, c, iy, ix);
    Box3::new(
        Vec3::new(cx + r(0), cy + r(1), r(2)),
        Vec3::new(math::exp(r(3)), math::exp(r(4)), math::exp(r(5))),
        0.5 * math::atan2(r(6), r(7)),
    )
}

/// Thresholds scores, decodes boxes, and runs greedy NMS by descending
/// confidence: a box survives only if its 3D IoU with every survivor so
/// far stays at or below `iou_thresh`. The result is score-sorted.
pub fn decode_and_nms(
    score_logits: &Tensor4,
    reg_preds: &Tensor4,
    spec: &GridSpec,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>, DetectionError> {
    let (h, w) = (spec.height(), spec.width());
    if score_logits.shape() != [1, 1, h, w] || reg_preds.shape() != [1, REG_CHANNELS, h, w] {
        return Err(DetectionError::ShapeMismatch);
    }
    let mut candidates = Vec::new();
    for iy in 0..h {
        for ix in 0..w {
            let score = sigmoid(score_logits.at(0, 0, iy, ix));
            if score >= score_thresh {
                candidates.push(Detection { bbox: decode_cell(reg_preds, spec, iy, ix), score });
            }
        }
    }
    candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(core::cmp::Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    'outer: for c in candidates {
        for k in &kept {
            let iou = iou_3d(&c.bbox, &k.bbox)
                .map_err(|_| DetectionError::InvalidConfig("degenerate decoded box".into()))?;
            if iou > iou_thresh {
                continue 'outer;
            }
        }
        kept.push(c);
    }
    Ok(kept)
}
