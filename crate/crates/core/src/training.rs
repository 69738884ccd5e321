//! End-to-end training of the multi-modality fusion pipeline.
//!
//! One sample is one frame: every agent's weathered clouds, an optional
//! clean copy of the same clouds for the denoising target, and the
//! ground-truth boxes in the ego sensor frame. The forward pass mirrors
//! the inference pipeline step for step while keeping the traces the
//! hand-rolled backward sweep needs, and a test pins the two paths to
//! identical outputs so they cannot drift apart.
//!
//! Gradients flow from the detection loss through the head, the modal mix,
//! the full reverse-diffusion chain (including the noising gain on its
//! input), the cross-agent attention, the warp adjoints, and finally into
//! each agent's pillar encoder. Updates are per-frame Adam steps; the
//! denoising term's weight follows the epoch-indexed decay schedule.

use crate::bev::BevGrid;
use crate::detection::{
    assign_targets, detection_loss_grad, DetectionError, DetectionHead, DetectionLoss,
    DetectionLossConfig,
};
use crate::geometry::Box3;
use crate::math;
use crate::mdd::{
    diffuse, diffuse_input_gain, denoise_loop_backward, denoise_loop_training, mdd_loss_grad,
    MddError, MddLossConfig,
};
use crate::nn::{adam_step, AdamConfig, AdamState, Gradients, NnError, ParamStore, Tensor4, Trace};
use crate::perception::{
    encode_backward, encode_bev, fuse_agents, fuse_agents_backward, AgentFrameInput,
    AgentFusionTrace, BevEncoding, EncoderParams, FusionStrategy, PerceptionError, PipelineConfig,
    PipelineModel, WarpPlan, LIDAR_INTENSITY_SCALE,
};
use crate::sensing::{CloudFrame, Modality};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum TrainError {
    InvalidConfig(String),
    Perception(PerceptionError),
    Denoising(MddError),
    Detection(DetectionError),
    Engine(NnError),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::InvalidConfig(m) => write!(f, "bad training config: {m}"),
            TrainError::Perception(e) => write!(f, "pipeline: {e}"),
            TrainError::Denoising(e) => write!(f, "denoising: {e}"),
            TrainError::Detection(e) => write!(f, "detection: {e}"),
            TrainError::Engine(e) => write!(f, "engine: {e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<PerceptionError> for TrainError {
    fn from(e: PerceptionError) -> Self {
        TrainError::Perception(e)
    }
}

impl From<MddError> for TrainError {
    fn from(e: MddError) -> Self {
        TrainError::Denoising(e)
    }
}

impl From<DetectionError> for TrainError {
    fn from(e: DetectionError) -> Self {
        TrainError::Detection(e)
    }
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Engine(e)
    }
}

impl From<crate::bev::BevError> for TrainError {
    fn from(e: crate::bev::BevError) -> Self {
        TrainError::Perception(PerceptionError::Grid(e))
    }
}

/// One training frame. `clean` carries the same agents' clouds rendered
/// without weather; when absent, the denoising target falls back to the
/// pre-noising feature, which still teaches the denoiser to undo its own
/// forward noising.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub inputs: Vec<AgentFrameInput>,
    pub clean: Option<Vec<AgentFrameInput>>,
    /// Ground truth in the ego sensor frame.
    pub gt: Vec<Box3>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub detection: DetectionLossConfig,
    pub denoising: MddLossConfig,
    /// Base seed for the per-frame diffusion draws.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            adam: AdamConfig::default(),
            detection: DetectionLossConfig::default(),
            denoising: MddLossConfig::default(),
            seed: 0,
        }
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub frames: usize,
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub denoising: f64,
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct ModalityPass {
    encodings: Vec<BevEncoding>,
    aligned: Vec<BevGrid>,
    trace: AgentFusionTrace,
    fused: BevGrid,
}

struct DenoisePass {
    /// Fused LiDAR grid before noising, kept for the input-gain chain.
    pre: BevGrid,
    traces: Vec<Trace>,
    denoised: Tensor4,
}

struct ForwardPass {
    /// Indices into the sample's agent list that made the range cut.
    active: Vec<usize>,
    plans: Vec<Option<WarpPlan>>,
    lidar: Option<ModalityPass>,
    radar: Option<ModalityPass>,
    denoise: Option<DenoisePass>,
    fuse_trace: Option<Trace>,
    /// Final features handed to the head. Read by the tests that pin this
    /// forward pass to the inference pipeline, hence allowed to idle in
    /// release builds.
    #[allow(dead_code)]
    fused: Tensor4,
    head: (Trace, Trace),
}

fn encode_one(
    a: &AgentFrameInput,
    modality: Modality,
    cfg: &PipelineConfig,
    store: &ParamStore,
    enc: &EncoderParams,
) -> Result<BevEncoding, TrainError> {
    let (cloud, scale) = match modality {
        Modality::Lidar => (&a.lidar, LIDAR_INTENSITY_SCALE),
        Modality::Radar => (&a.radar, cfg.radar_velocity_scale),
    };
    if cloud.modality != modality || cloud.frame != (CloudFrame::Sensor { agent: a.agent }) {
        return Err(TrainError::InvalidConfig(format!(
            "agent {} supplied a mislabeled {modality:?} cloud",
            a.agent
        )));
    }
    Ok(encode_bev(cloud, &cfg.grid, cfg.height_range, a.lidar_height, scale, store, enc)?)
}

fn encode_and_fuse(
    agents: &[&AgentFrameInput],
    plans: &[Option<WarpPlan>],
    modality: Modality,
    ego_frame: CloudFrame,
    cfg: &PipelineConfig,
    store: &ParamStore,
    enc: &EncoderParams,
) -> Result<ModalityPass, TrainError> {
    let mut encodings = Vec::with_capacity(agents.len());
    let mut aligned = Vec::with_capacity(agents.len());
    for (a, plan) in agents.iter().zip(plans) {
        let e = encode_one(a, modality, cfg, store, enc)?;
        aligned.push(match plan {
            Some(p) => p.apply(&e.grid, ego_frame)?,
            None => e.grid.clone(),
        });
        encodings.push(e);
    }
    let refs: Vec<&BevGrid> = aligned.iter().collect();
    let (fused, trace) = fuse_agents(&refs)?;
    Ok(ModalityPass { encodings, aligned, trace, fused })
}

/// Forward pass of one frame with every trace retained. Arithmetic matches
/// the inference pipeline exactly; `seed` fixes the diffusion draw.
fn forward_frame(
    sample: &TrainSample,
    cfg: &PipelineConfig,
    model: &PipelineModel,
    head: &DetectionHead,
    store: &ParamStore,
    seed: u64,
) -> Result<ForwardPass, TrainError> {
    cfg.validate()?;
    if cfg.strategy != FusionStrategy::Sm2Mm {
        return Err(TrainError::InvalidConfig(
            "training drives the share-modalities strategy; the per-agent variant is inference-only"
                .into(),
        ));
    }
    let Some(ego) = sample.inputs.first() else {
        return Err(TrainError::Perception(PerceptionError::EmptyAgentList));
    };
    let ego_pos = ego.reported_pose.position;
    let mut active = alloc::vec![0usize];
    for (i, a) in sample.inputs.iter().enumerate().skip(1) {
        let p = a.reported_pose.position;
        if math::hypot(p.x - ego_pos.x, p.y - ego_pos.y) <= cfg.broadcast_range_m {
            active.push(i);
        }
    }
    let ego_frame = CloudFrame::Sensor { agent: ego.agent };
    let plans: Vec<Option<WarpPlan>> = active
        .iter()
        .map(|&i| {
            if i == 0 {
                Ok(None)
            } else {
                WarpPlan::build(
                    &cfg.grid,
                    &ego.reported_pose,
                    &sample.inputs[i].reported_pose,
                    cfg.warp,
                )
                .map(Some)
            }
        })
        .collect::<Result<_, _>>()?;
    let agents: Vec<&AgentFrameInput> = active.iter().map(|&i| &sample.inputs[i]).collect();

    let lidar = match &model.enc_lidar {
        Some(enc) => {
            Some(encode_and_fuse(&agents, &plans, Modality::Lidar, ego_frame, cfg, store, enc)?)
        }
        None => None,
    };
    let radar = match &model.enc_radar {
        Some(enc) => {
            Some(encode_and_fuse(&agents, &plans, Modality::Radar, ego_frame, cfg, store, enc)?)
        }
        None => None,
    };

    let mut denoise = None;
    let lidar_features: Option<Tensor4> = match &lidar {
        Some(l) if cfg.mdd => {
            let unet = model.denoiser.as_ref().ok_or_else(|| {
                TrainError::InvalidConfig("denoising enabled without a denoiser".into())
            })?;
            let cond = match &radar {
                Some(r) => r.fused.clone(),
                None => BevGrid::zeros(cfg.grid, ego_frame)?,
            };
            let noisy = diffuse(&l.fused, &model.schedule, seed);
            let (denoised, traces) =
                denoise_loop_training(unet, store, &noisy.data, &cond.data, &model.schedule)?;
            let out = denoised.clone();
            denoise = Some(DenoisePass { pre: l.fused.clone(), traces, denoised });
            Some(out)
        }
        Some(l) => Some(l.fused.data.clone()),
        None => None,
    };

    let mut fuse_trace = None;
    let fused = match (&lidar_features, &radar) {
        (Some(l), Some(r)) => {
            let fuse = model.fuse.as_ref().ok_or_else(|| {
                TrainError::InvalidConfig("two modalities but no modal mix".into())
            })?;
            let trace = fuse.forward(store, l, &r.fused.data)?;
            let out = trace.output().clone();
            fuse_trace = Some(trace);
            out
        }
        (Some(l), None) => l.clone(),
        (None, Some(r)) => r.fused.data.clone(),
        (None, None) => return Err(TrainError::InvalidConfig("no modality enabled".into())),
    };

    let head_traces = head.forward(store, &fused)?;
    Ok(ForwardPass { active, plans, lidar, radar, denoise, fuse_trace, fused, head: head_traces })
}

/// Clean-geometry denoising target: the clean clouds pushed through the
/// same encode, warp, and attention stages, forward only. When no clean
/// copy exists the pre-noising weathered feature stands in.
fn denoising_target(
    sample: &TrainSample,
    pass: &ForwardPass,
    cfg: &PipelineConfig,
    model: &PipelineModel,
    store: &ParamStore,
) -> Result<Tensor4, TrainError> {
    let denoise = pass.denoise.as_ref().expect("target requested without denoising");
    let Some(clean) = &sample.clean else {
        return Ok(denoise.pre.data.clone());
    };
    if clean.len() != sample.inputs.len() {
        return Err(TrainError::InvalidConfig(
            "clean clouds must cover the same agents as the weathered ones".into(),
        ));
    }
    let enc = model
        .enc_lidar
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("denoising target needs a lidar encoder".into()))?;
    let ego_frame = CloudFrame::Sensor { agent: sample.inputs[0].agent };
    let agents: Vec<&AgentFrameInput> = pass.active.iter().map(|&i| &clean[i]).collect();
    let clean_pass =
        encode_and_fuse(&agents, &pass.plans, Modality::Lidar, ego_frame, cfg, store, enc)?;
    Ok(clean_pass.fused.data)
}

/// Loss of one frame plus gradients for every parameter that touched it.
/// `epoch` feeds the denoising weight schedule; `seed` fixes the noise
/// draw. The denoising target is treated as a constant: gradients pull the
/// prediction toward it, never the other way around.
pub fn frame_loss(
    sample: &TrainSample,
    cfg: &PipelineConfig,
    train: &TrainConfig,
    model: &PipelineModel,
    head: &DetectionHead,
    store: &ParamStore,
    epoch: f64,
    seed: u64,
) -> Result<(DetectionLoss, Gradients), TrainError> {
    frame_loss_impl(sample, cfg, train, model, head, store, epoch, seed, None)
}

#[allow(clippy::too_many_arguments)]
fn frame_loss_impl(
    sample: &TrainSample,
    cfg: &PipelineConfig,
    train: &TrainConfig,
    model: &PipelineModel,
    head: &DetectionHead,
    store: &ParamStore,
    epoch: f64,
    seed: u64,
    frozen_target: Option<&Tensor4>,
) -> Result<(DetectionLoss, Gradients), TrainError> {
    let pass = forward_frame(sample, cfg, model, head, store, seed)?;
    let mut grads = Gradients::for_store(store);

    let denoising = match &pass.denoise {
        Some(d) => {
            let computed;
            let target = match frozen_target {
                Some(t) => t,
                None => {
                    computed = denoising_target(sample, &pass, cfg, model, store)?;
                    &computed
                }
            };
            let (loss, grad) = mdd_loss_grad(&d.denoised, target, epoch, &train.denoising)?;
            Some((loss, grad))
        }
        None => None,
    };
    let denoising_term = denoising.as_ref().map_or(0.0, |(l, _)| *l);

    let targets = assign_targets(&sample.gt, &cfg.grid);
    let (loss, grad_score, grad_reg) = detection_loss_grad(
        pass.head.0.output(),
        pass.head.1.output(),
        &targets,
        &train.detection,
        denoising_term,
    )?;

    let grad_fused = head.backward(store, &pass.head, &grad_score, &grad_reg, &mut grads)?;

    // Split the fused gradient back onto the modality features.
    let (grad_lidar_feat, mut grad_radar_feat) = match (&pass.fuse_trace, &model.fuse) {
        (Some(trace), Some(fuse)) => {
            let (gl, gr) = fuse.backward(store, trace, &grad_fused, &mut grads)?;
            (Some(gl), Some(gr))
        }
        _ => match (&pass.lidar, &pass.radar) {
            (Some(_), None) => (Some(grad_fused), None),
            (None, Some(_)) => (None, Some(grad_fused)),
            _ => return Err(TrainError::InvalidConfig("fusion stage mismatch".into())),
        },
    };

    // Through the reverse-diffusion chain back to the pre-noising feature.
    let grad_lidar_fused = match (&pass.denoise, grad_lidar_feat) {
        (Some(d), Some(mut g)) => {
            if let Some((_, dn_grad)) = &denoising {
                g.add_scaled(dn_grad, 1.0)?;
            }
            let unet = model.denoiser.as_ref().expect("denoise pass without denoiser");
            let (mut g_term, g_cond) =
                denoise_loop_backward(unet, store, &d.traces, &g, &mut grads)?;
            g_term.scale(diffuse_input_gain(&model.schedule));
            match &mut grad_radar_feat {
                Some(gr) => gr.add_scaled(&g_cond, 1.0)?,
                None => {}
            }
            Some(g_term)
        }
        (None, g) => g,
        (Some(_), None) => return Err(TrainError::InvalidConfig("fusion stage mismatch".into())),
    };

    for (pass_m, grad_m, enc) in [
        (&pass.lidar, grad_lidar_fused, &model.enc_lidar),
        (&pass.radar, grad_radar_feat, &model.enc_radar),
    ] {
        let (Some(m), Some(g), Some(enc)) = (pass_m, grad_m, enc) else { continue };
        let refs: Vec<&BevGrid> = m.aligned.iter().collect();
        let per_agent = fuse_agents_backward(&refs, &m.trace, &g)?;
        for ((grad_aligned, plan), encoding) in
            per_agent.iter().zip(&pass.plans).zip(&m.encodings)
        {
            let grad_own = match plan {
                Some(p) => p.apply_transpose(grad_aligned)?,
                None => grad_aligned.clone(),
            };
            encode_backward(encoding, &grad_own, store, enc, &mut grads)?;
        }
    }

    Ok((loss, grads))
}

/// Mean squared error between the denoised LiDAR feature and its clean
/// target for one frame, with no update. Tracking this before and after
/// optimization is how denoiser training is judged.
pub fn denoising_mse(
    sample: &TrainSample,
    cfg: &PipelineConfig,
    model: &PipelineModel,
    head: &DetectionHead,
    store: &ParamStore,
    seed: u64,
) -> Result<f64, TrainError> {
    let pass = forward_frame(sample, cfg, model, head, store, seed)?;
    let Some(d) = &pass.denoise else {
        return Err(TrainError::InvalidConfig("denoising is not enabled".into()));
    };
    let target = denoising_target(sample, &pass, cfg, model, store)?;
    Ok(d.denoised.mse(&target)?)
}

/// One optimizer update on one frame; returns the frame's losses.
pub fn train_step(
    sample: &TrainSample,
    cfg: &PipelineConfig,
    train: &TrainConfig,
    model: &PipelineModel,
    head: &DetectionHead,
    store: &mut ParamStore,
    opt: &mut AdamState,
    epoch: f64,
    seed: u64,
) -> Result<DetectionLoss, TrainError> {
    let (loss, grads) = frame_loss(sample, cfg, train, model, head, store, epoch, seed)?;
    adam_step(store, &grads, opt, &train.adam)?;
    Ok(loss)
}

/// Full training run: per-frame Adam steps, one pass over the samples per
/// epoch, a fresh diffusion draw per frame and epoch. Deterministic for a
/// fixed config and sample order.
pub fn train(
    samples: &[TrainSample],
    cfg: &PipelineConfig,
    train_cfg: &TrainConfig,
    model: &PipelineModel,
    head: &DetectionHead,
    store: &mut ParamStore,
) -> Result<Vec<EpochStats>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::InvalidConfig("no training samples".into()));
    }
    if train_cfg.epochs == 0 {
        return Err(TrainError::InvalidConfig("epochs must be positive".into()));
    }
    let mut opt = AdamState::for_store(store);
    let mut stats = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (i, sample) in samples.iter().enumerate() {
            let seed = mix_seed(train_cfg.seed, (epoch as u64) << 32 | i as u64);
            let loss = train_step(
                sample,
                cfg,
                train_cfg,
                model,
                head,
                store,
                &mut opt,
                epoch as f64,
                seed,
            )?;
            sums.0 += loss.total;
            sums.1 += loss.cls;
            sums.2 += loss.loc;
            sums.3 += loss.denoising;
        }
        let n = samples.len() as f64;
        stats.push(EpochStats {
            epoch,
            frames: samples.len(),
            total: sums.0 / n,
            cls: sums.1 / n,
            loc: sums.2 / n,
            denoising: sums.3 / n,
        });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::GridSpec;
    use crate::detection::DetectionHead;
    use crate::geometry::{Pose3, Vec3};
    use crate::perception::{run_pipeline, ModalityMix};
    use crate::sensing::PointCloud;
    use alloc::vec;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const SENSOR_H: f64 = 1.9;

    fn spec(channels: usize) -> GridSpec {
        GridSpec { x_range: [0.0, 8.0], y_range: [-4.0, 4.0], cell_size: 1.0, channels }
    }

    fn cloud(seed: u64, modality: Modality, agent: usize, n: usize) -> PointCloud {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let s = spec(2);
        let points: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(s.x_range[0] + 0.5..s.x_range[1] - 0.5),
                    rng.random_range(s.y_range[0] + 0.5..s.y_range[1] - 0.5),
                    rng.random_range(-1.4..1.8),
                )
            })
            .collect();
        let attr = (0..n).map(|_| rng.random_range(0.0..80.0)).collect();
        PointCloud {
            modality,
            frame: CloudFrame::Sensor { agent },
            points,
            attr,
            mask: vec![false; n],
        }
    }

    fn agent(idx: usize, seed: u64, x: f64, y: f64, yaw: f64) -> AgentFrameInput {
        AgentFrameInput {
            agent: idx,
            lidar: cloud(seed, Modality::Lidar, idx, 40),
            radar: cloud(seed ^ 7, Modality::Radar, idx, 12),
            lidar_height: SENSOR_H,
            reported_pose: Pose3::flat(x, y, SENSOR_H, yaw),
        }
    }

    fn sample(seed: u64) -> TrainSample {
        let inputs = vec![agent(0, seed, 0.0, 0.0, 0.0), agent(1, seed + 100, 1.0, 0.5, 0.15)];
        let clean = inputs
            .iter()
            .map(|a| AgentFrameInput {
                lidar: cloud(seed ^ 0xc1ea, Modality::Lidar, a.agent, 40),
                ..a.clone()
            })
            .collect();
        TrainSample {
            inputs,
            clean: Some(clean),
            gt: vec![
                Box3::new(Vec3::new(3.5, 0.5, 0.8), Vec3::new(1.8, 1.2, 1.5), 0.3),
                Box3::new(Vec3::new(6.0, -2.0, 0.7), Vec3::new(1.6, 1.1, 1.4), -0.5),
            ],
        }
    }

    fn pipeline_cfg(channels: usize, mdd: bool, modality: ModalityMix) -> PipelineConfig {
        PipelineConfig {
            grid: spec(channels),
            mdd,
            modality,
            ..PipelineConfig::default()
        }
    }

    fn build_all(
        cfg: &PipelineConfig,
        seed: u64,
    ) -> (ParamStore, PipelineModel, DetectionHead) {
        let mut store = ParamStore::new();
        let model = PipelineModel::build(&mut store, cfg, seed).unwrap();
        let head = DetectionHead::build(&mut store, cfg.grid.channels, "head", seed ^ 0xdead).unwrap();
        (store, model, head)
    }

    #[test]
    fn training_forward_matches_the_inference_pipeline() {
        for (mdd, modality) in [
            (false, ModalityMix::Lidar),
            (false, ModalityMix::LidarRadar),
            (true, ModalityMix::LidarRadar),
        ] {
            let cfg = pipeline_cfg(2, mdd, modality);
            let (store, model, head) = build_all(&cfg, 5);
            let s = sample(11);
            let pass = forward_frame(&s, &cfg, &model, &head, &store, 77).unwrap();
            let out = run_pipeline(&s.inputs, &cfg, &model, &store, 77).unwrap();
            let d: f64 = pass
                .fused
                .data()
                .iter()
                .zip(out.fused.data.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert_eq!(d, 0.0, "mdd={mdd} modality={modality:?} diverged by {d}");
        }
    }

    #[test]
    fn out_of_range_peer_is_ignored_like_at_inference() {
        let cfg = pipeline_cfg(2, false, ModalityMix::LidarRadar);
        let (store, model, head) = build_all(&cfg, 5);
        let mut s = sample(11);
        s.inputs[1].reported_pose = Pose3::flat(500.0, 0.0, SENSOR_H, 0.0);
        let pass = forward_frame(&s, &cfg, &model, &head, &store, 3).unwrap();
        assert_eq!(pass.active, vec![0]);
        let out = run_pipeline(&s.inputs, &cfg, &model, &store, 3).unwrap();
        assert_eq!(pass.fused.data(), out.fused.data.data());
    }

    #[test]
    fn full_chain_gradients_match_finite_differences() {
        let cfg = pipeline_cfg(2, true, ModalityMix::LidarRadar);
        let (mut store, model, head) = build_all(&cfg, 9);
        let train_cfg = TrainConfig::default();
        let s = sample(21);
        // The denoising target is a stop-gradient constant, so freeze it
        // before differencing; otherwise the finite difference would also
        // pick up the target's own dependence on the encoder.
        let pass = forward_frame(&s, &cfg, &model, &head, &store, 55).unwrap();
        let target = denoising_target(&s, &pass, &cfg, &model, &store).unwrap();
        let loss_at = |store: &ParamStore| {
            frame_loss_impl(&s, &cfg, &train_cfg, &model, &head, store, 1.0, 55, Some(&target))
                .unwrap()
                .0
                .total
        };
        let (_, grads) =
            frame_loss_impl(&s, &cfg, &train_cfg, &model, &head, &store, 1.0, 55, Some(&target))
                .unwrap();

        let eps = 1e-5;
        for name in [
            "enc.lidar.w",
            "enc.lidar.b",
            "enc.radar.w",
            "fuse.w",
            "mdd.stem.w",
            "mdd.l1.r1.c1.w",
            "mdd.out.w",
            "head.score.w",
            "head.score.b",
            "head.reg.w",
        ] {
            let id = store.id(name).unwrap();
            let n = store.get(id).len();
            let probe = [0, n / 2, n - 1];
            for &i in probe.iter().take(if n > 2 { 3 } else { 1 }) {
                let base = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = base + eps;
                let lp = loss_at(&store);
                store.get_mut(id).data_mut()[i] = base - eps;
                let lm = loss_at(&store);
                store.get_mut(id).data_mut()[i] = base;
                let fd = (lp - lm) / (2.0 * eps);
                let an = grads.get(id).map_or(0.0, |g| g.data()[i]);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{name}[{i}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn lidar_only_gradients_match_finite_differences() {
        let cfg = pipeline_cfg(2, false, ModalityMix::Lidar);
        let (mut store, model, head) = build_all(&cfg, 13);
        let train_cfg = TrainConfig::default();
        let s = sample(31);
        let (_, grads) = frame_loss(&s, &cfg, &train_cfg, &model, &head, &store, 0.0, 1).unwrap();
        let eps = 1e-5;
        for name in ["enc.lidar.w", "head.score.w", "head.reg.b"] {
            let id = store.id(name).unwrap();
            let i = 0;
            let base = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = base + eps;
            let (lp, _) = frame_loss(&s, &cfg, &train_cfg, &model, &head, &store, 0.0, 1).unwrap();
            store.get_mut(id).data_mut()[i] = base - eps;
            let (lm, _) = frame_loss(&s, &cfg, &train_cfg, &model, &head, &store, 0.0, 1).unwrap();
            store.get_mut(id).data_mut()[i] = base;
            let fd = (lp.total - lm.total) / (2.0 * eps);
            let an = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(((fd - an) / denom).abs() < 1e-4, "{name}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn a_few_epochs_reduce_the_loss() {
        let cfg = pipeline_cfg(2, true, ModalityMix::LidarRadar);
        let (mut store, model, head) = build_all(&cfg, 3);
        let samples = vec![sample(41), sample(42), sample(43)];
        let train_cfg = TrainConfig {
            epochs: 8,
            adam: AdamConfig { lr: 5e-3, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let stats = train(&samples, &cfg, &train_cfg, &model, &head, &mut store).unwrap();
        assert_eq!(stats.len(), 8);
        let first = stats.first().unwrap().total;
        let last = stats.last().unwrap().total;
        assert!(last < first, "loss went {first} -> {last}");
        assert!(stats.iter().all(|s| s.total.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = pipeline_cfg(2, true, ModalityMix::LidarRadar);
        let samples = vec![sample(51), sample(52)];
        let train_cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let run = || {
            let (mut store, model, head) = build_all(&cfg, 17);
            let stats = train(&samples, &cfg, &train_cfg, &model, &head, &mut store).unwrap();
            (stats, crate::nn::encode_params(&store))
        };
        let (s1, p1) = run();
        let (s2, p2) = run();
        assert_eq!(s1, s2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn denoising_target_prefers_clean_clouds() {
        let cfg = pipeline_cfg(2, true, ModalityMix::LidarRadar);
        let (store, model, head) = build_all(&cfg, 23);
        let s = sample(61);
        let pass = forward_frame(&s, &cfg, &model, &head, &store, 5).unwrap();
        let with_clean = denoising_target(&s, &pass, &cfg, &model, &store).unwrap();
        let mut bare = s.clone();
        bare.clean = None;
        let fallback = denoising_target(&bare, &pass, &cfg, &model, &store).unwrap();
        // The clean clouds differ from the weathered ones, so the targets do.
        assert!(with_clean.mse(&fallback).unwrap() > 0.0);
        assert_eq!(fallback.data(), pass.denoise.as_ref().unwrap().pre.data.data());
    }

    #[test]
    fn initial_denoising_error_is_the_noised_feature_error() {
        // The zero-initialized output layer makes the untrained reverse
        // loop an identity, so the starting error must equal the distance
        // between the noised weathered feature and the clean target.
        let cfg = pipeline_cfg(2, true, ModalityMix::LidarRadar);
        let (store, model, head) = build_all(&cfg, 29);
        let s = sample(81);
        let mse = denoising_mse(&s, &cfg, &model, &head, &store, 7).unwrap();
        let pass = forward_frame(&s, &cfg, &model, &head, &store, 7).unwrap();
        let target = denoising_target(&s, &pass, &cfg, &model, &store).unwrap();
        let noisy = diffuse(&pass.denoise.as_ref().unwrap().pre, &model.schedule, 7);
        let expect = noisy.data.mse(&target).unwrap();
        assert!((mse - expect).abs() < 1e-12, "{mse} vs {expect}");
        assert!(mse > 0.0);
    }

    #[test]
    fn per_agent_strategy_is_rejected_for_training() {
        let mut cfg = pipeline_cfg(2, false, ModalityMix::LidarRadar);
        cfg.strategy = FusionStrategy::Sa2Ma;
        let (store, model, head) = build_all(&pipeline_cfg(2, false, ModalityMix::LidarRadar), 3);
        let err = forward_frame(&sample(71), &cfg, &model, &head, &store, 0);
        assert!(matches!(err, Err(TrainError::InvalidConfig(_))));
    }
}
