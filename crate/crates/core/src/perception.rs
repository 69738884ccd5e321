//! Cooperative BEV perception: pillar encoding, feature alignment between
//! agents, attention fusion across agents, and concat fusion across
//! modalities.
//!
//! The pipeline runs in stages. Every agent encodes each of its point
//! clouds into a sparse bird's-eye-view feature grid with a shared
//! per-modality encoder. Peer grids travel to the ego vehicle (the comms
//! module prices that), get resampled into the ego frame using the
//! self-reported sensor poses, and are merged per cell by scaled
//! dot-product attention with the ego cell as the query. LiDAR and radar
//! grids finally merge through a learned 1x1 mix.
//!
//! Two orchestrations exist: merge agents first within each modality and
//! fuse modalities once at the ego (`Sm2Mm`), or fuse modalities on every
//! agent and merge the finished grids (`Sa2Ma`). Feature denoising, when
//! enabled, sits between agent fusion and modal fusion in the first
//! ordering and runs per agent in the second.

use crate::bev::{BevError, BevGrid, GridSpec};
use crate::comms::{count_report, CommReport};
use crate::geometry::{Pose3, Vec3};
use crate::math;
use crate::mdd::{
    denoise_loop, diffuse, Denoiser, DiffusionSchedule, MddError, UnetDenoiser, DEFAULT_BETAS,
};
use crate::nn::{Gradients, Graph, NnError, ParamId, ParamStore, Tensor4, Trace};
use crate::sensing::{CloudFrame, Modality, PointCloud};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum PerceptionError {
    InvalidConfig(String),
    /// A cloud or grid carried the wrong frame tag for the operation.
    FrameMismatch,
    /// Grids that must share spec, frame, or shape do not.
    SpecMismatch,
    EmptyAgentList,
    Engine(NnError),
    Grid(BevError),
    Denoising(MddError),
}

impl core::fmt::Display for PerceptionError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PerceptionError::InvalidConfig(m) => write!(f, "invalid pipeline config: {m}"),
            PerceptionError::FrameMismatch => write!(f, "wrong coordinate frame tag"),
            PerceptionError::SpecMismatch => write!(f, "grid spec/frame mismatch"),
            PerceptionError::EmptyAgentList => write!(f, "need at least one agent"),
            PerceptionError::Engine(e) => write!(f, "graph engine: {e}"),
            PerceptionError::Grid(e) => write!(f, "grid: {e}"),
            PerceptionError::Denoising(e) => write!(f, "denoising: {e}"),
        }
    }
}

impl core::error::Error for PerceptionError {}

impl From<NnError> for PerceptionError {
    fn from(e: NnError) -> Self {
        PerceptionError::Engine(e)
    }
}

impl From<BevError> for PerceptionError {
    fn from(e: BevError) -> Self {
        PerceptionError::Grid(e)
    }
}

impl From<MddError> for PerceptionError {
    fn from(e: MddError) -> Self {
        PerceptionError::Denoising(e)
    }
}

/// Who gets merged first: agents within a modality, or modalities within
/// an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Single-agent multi-modal pipeline extended with an agent-fusion
    /// stage: each agent fuses its own modalities, then agents merge.
    Sa2Ma,
    /// Multi-agent single-modal pipeline extended with a modal-fusion
    /// stage: agents merge per modality, then modalities merge at the ego.
    Sm2Mm,
}

/// Which sensors feed the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMix {
    Lidar,
    Radar,
    LidarRadar,
}

impl ModalityMix {
    pub fn uses_lidar(self) -> bool {
        matches!(self, ModalityMix::Lidar | ModalityMix::LidarRadar)
    }

    pub fn uses_radar(self) -> bool {
        matches!(self, ModalityMix::Radar | ModalityMix::LidarRadar)
    }
}

/// Resampling kernel for cross-agent feature alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    /// Four-tap interpolation; sub-cell pose errors degrade gracefully.
    Bilinear,
    /// Single-tap rounding; cheaper and exactly sparse.
    Nearest,
}

/// Everything the pipeline needs to know that is not a learned weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub strategy: FusionStrategy,
    pub grid: GridSpec,
    /// Height band above the road surface that survives pillarization,
    /// meters. The lower bound drops ground returns; the upper bound drops
    /// overhead structure.
    pub height_range: [f64; 2],
    /// Radial velocities are divided by this before entering the pillar
    /// statistics, putting them on the same footing as unit intensities.
    pub radar_velocity_scale: f64,
    pub modality: ModalityMix,
    pub warp: WarpMode,
    /// Enables feature denoising on the LiDAR branch.
    pub mdd: bool,
    /// Diffusion betas used when `mdd` is on.
    pub betas: Vec<f64>,
    pub broadcast_range_m: f64,
    pub zero_tol: f64,
    pub bandwidth_bps: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            strategy: FusionStrategy::Sm2Mm,
            grid: GridSpec::default(),
            height_range: [0.3, 4.0],
            radar_velocity_scale: 15.0,
            modality: ModalityMix::LidarRadar,
            warp: WarpMode::Bilinear,
            mdd: false,
            betas: DEFAULT_BETAS.to_vec(),
            broadcast_range_m: crate::comms::DEFAULT_BROADCAST_RANGE_M,
            zero_tol: crate::comms::DEFAULT_ZERO_TOL,
            bandwidth_bps: crate::comms::DEFAULT_BANDWIDTH_BPS,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        self.grid.validate().map_err(PerceptionError::Grid)?;
        if !(self.height_range[0] < self.height_range[1]) {
            return Err(PerceptionError::InvalidConfig("height_range must be ordered".into()));
        }
        if !(self.radar_velocity_scale > 0.0) {
            return Err(PerceptionError::InvalidConfig(
                "radar_velocity_scale must be positive".into(),
            ));
        }
        if !(self.broadcast_range_m >= 0.0) || !(self.bandwidth_bps > 0.0) {
            return Err(PerceptionError::InvalidConfig(
                "broadcast range and bandwidth must be non-negative/positive".into(),
            ));
        }
        if self.mdd && self.modality == ModalityMix::Radar {
            return Err(PerceptionError::InvalidConfig(
                "feature denoising targets the LiDAR branch; enable LiDAR".into(),
            ));
        }
        Ok(())
    }
}

/// Intensities arrive in 0..=255; dividing by this maps them to unit scale
/// for the pillar statistics.
pub const LIDAR_INTENSITY_SCALE: f64 = 255.0;

/// Statistics computed per occupied pillar, in channel order: log point
/// count, max height, mean height, mean scaled attribute, occupancy flag.
pub const PILLAR_STATS: usize = 5;

/// The learned per-cell projection from pillar statistics to C feature
/// channels. One instance per modality, shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderParams {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
}

impl EncoderParams {
    /// Registers `prefix.w` `[C, 5, 1, 1]` and `prefix.b` `[1, C, 1, 1]`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        seed: u64,
    ) -> Result<Self, PerceptionError> {
        if channels == 0 {
            return Err(PerceptionError::InvalidConfig("channels must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let std = math::sqrt(1.0 / PILLAR_STATS as f64);
        let w = store.add(
            &format!("{prefix}.w"),
            Tensor4::randn([channels, PILLAR_STATS, 1, 1], std, &mut rng),
        )?;
        let b = store.add(&format!("{prefix}.b"), Tensor4::zeros([1, channels, 1, 1]))?;
        Ok(EncoderParams { w, b, channels })
    }
}

/// A pillarized cloud: the projected feature grid plus the raw statistics
/// and occupancy needed to backpropagate into the encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BevEncoding {
    pub grid: BevGrid,
    /// `[1, PILLAR_STATS, H, W]`; zero on unoccupied cells.
    pub stats: Tensor4,
    /// `(iy, ix)` of every cell holding at least one point.
    pub occupied: Vec<(usize, usize)>,
}

/// Pillarizes a sensor-frame cloud and projects each occupied cell through
/// the learned encoder. Unoccupied cells stay exactly zero, which is what
/// makes the transmitted packets sparse.
///
/// Heights are measured above the road by adding `sensor_height`, so the
/// same encoder serves roof-mounted and mast-mounted sensors. Corruption
/// masks are ignored here: at inference nobody knows which points are
/// weather. Callers building clean targets strip masked points first.
pub fn encode_bev(
    cloud: &PointCloud,
    spec: &GridSpec,
    height_range: [f64; 2],
    sensor_height: f64,
    attr_scale: f64,
    store: &ParamStore,
    enc: &EncoderParams,
) -> Result<BevEncoding, PerceptionError> {
    let CloudFrame::Sensor { .. } = cloud.frame else {
        return Err(PerceptionError::FrameMismatch);
    };
    spec.validate().map_err(PerceptionError::Grid)?;
    if spec.channels != enc.channels {
        return Err(PerceptionError::SpecMismatch);
    }
    if !(attr_scale > 0.0) || !(height_range[0] < height_range[1]) {
        return Err(PerceptionError::InvalidConfig("bad encoder scaling".into()));
    }
    let (h, w) = (spec.height(), spec.width());
    let cells = h * w;
    let mut count = vec![0u32; cells];
    let mut max_h = vec![f64::NEG_INFINITY; cells];
    let mut sum_h = vec![0.0f64; cells];
    let mut sum_a = vec![0.0f64; cells];
    for (i, p) in cloud.points.iter().enumerate() {
        let height = p.z + sensor_height;
        if height < height_range[0] || height > height_range[1] {
            continue;
        }
        let Some((ix, iy)) = spec.cell_index(p.x, p.y) else {
            continue;
        };
        let idx = iy * w + ix;
        count[idx] += 1;
        if height > max_h[idx] {
            max_h[idx] = height;
        }
        sum_h[idx] += height;
        sum_a[idx] += cloud.attr[i];
    }

    let mut stats = Tensor4::zeros([1, PILLAR_STATS, h, w]);
    let mut occupied = Vec::new();
    for iy in 0..h {
        for ix in 0..w {
            let idx = iy * w + ix;
            if count[idx] == 0 {
                continue;
            }
            let n = count[idx] as f64;
            *stats.at_mut(0, 0, iy, ix) = math::ln(1.0 + n);
            *stats.at_mut(0, 1, iy, ix) = max_h[idx];
            *stats.at_mut(0, 2, iy, ix) = sum_h[idx] / n;
            *stats.at_mut(0, 3, iy, ix) = sum_a[idx] / n / attr_scale;
            *stats.at_mut(0, 4, iy, ix) = 1.0;
            occupied.push((iy, ix));
        }
    }

    let mut grid = BevGrid::zeros(*spec, cloud.frame)?;
    let wt = store.get(enc.w);
    let bt = store.get(enc.b);
    for &(iy, ix) in &occupied {
        for c in 0..enc.channels {
            let mut v = bt.at(0, c, 0, 0);
            for k in 0..PILLAR_STATS {
                v += wt.at(c, k, 0, 0) * stats.at(0, k, iy, ix);
            }
            *grid.data.at_mut(0, c, iy, ix) = v;
        }
    }
    Ok(BevEncoding { grid, stats, occupied })
}

/// Accumulates encoder weight gradients for one encoded cloud. The pillar
/// statistics are data, so gradients stop here.
pub fn encode_backward(
    encoding: &BevEncoding,
    grad: &Tensor4,
    store: &ParamStore,
    enc: &EncoderParams,
    grads: &mut Gradients,
) -> Result<(), PerceptionError> {
    if grad.shape() != encoding.grid.data.shape() {
        return Err(PerceptionError::SpecMismatch);
    }
    let c_n = enc.channels;
    let mut dw = vec![0.0f64; c_n * PILLAR_STATS];
    let mut db = vec![0.0f64; c_n];
    for &(iy, ix) in &encoding.occupied {
        for c in 0..c_n {
            let g = grad.at(0, c, iy, ix);
            db[c] += g;
            for k in 0..PILLAR_STATS {
                dw[c * PILLAR_STATS + k] += g * encoding.stats.at(0, k, iy, ix);
            }
        }
    }
    let gw = grads.slot_mut(store, enc.w);
    for (slot, d) in gw.data_mut().iter_mut().zip(&dw) {
        *slot += d;
    }
    let gb = grads.slot_mut(store, enc.b);
    for (slot, d) in gb.data_mut().iter_mut().zip(&db) {
        *slot += d;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    dst: u32,
    src: u32,
    w: f64,
}

/// A precomputed resampling of one agent's grid into another's frame.
/// Linear in the features, so the transpose is the exact adjoint used in
/// the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpPlan {
    taps: Vec<Tap>,
    cells: usize,
}

impl WarpPlan {
    /// Plan mapping `src_pose`'s grid onto `dst_pose`'s grid. Both poses
    /// are world poses of the respective sensors; only their planar offset
    /// and heading matter. Cells that land outside the source extent read
    /// zero.
    pub fn build(
        spec: &GridSpec,
        dst_pose: &Pose3,
        src_pose: &Pose3,
        mode: WarpMode,
    ) -> Result<WarpPlan, PerceptionError> {
        spec.validate().map_err(PerceptionError::Grid)?;
        let rel = src_pose.inverse().compose(dst_pose);
        let (h, w) = (spec.height(), spec.width());
        let mut taps = Vec::new();
        for iy in 0..h {
            for ix in 0..w {
                let (cx, cy) = spec.cell_center(ix, iy);
                let s = rel.transform_point(Vec3::new(cx, cy, 0.0));
                let (fx, fy) = spec.fractional_index(s.x, s.y);
                let dst = (iy * w + ix) as u32;
                match mode {
                    WarpMode::Bilinear => {
                        let (x0, y0) = (math::floor(fx), math::floor(fy));
                        let (dx, dy) = (fx - x0, fy - y0);
                        let corners = [
                            (y0, x0, (1.0 - dx) * (1.0 - dy)),
                            (y0, x0 + 1.0, dx * (1.0 - dy)),
                            (y0 + 1.0, x0, (1.0 - dx) * dy),
                            (y0 + 1.0, x0 + 1.0, dx * dy),
                        ];
                        for (jy, jx, weight) in corners {
                            if weight < 1e-12 {
                                continue;
                            }
                            if jx < 0.0 || jy < 0.0 || jx >= w as f64 || jy >= h as f64 {
                                continue;
                            }
                            let src = (jy as usize * w + jx as usize) as u32;
                            taps.push(Tap { dst, src, w: weight });
                        }
                    }
                    WarpMode::Nearest => {
                        let (jx, jy) = (math::round(fx), math::round(fy));
                        if jx >= 0.0 && jy >= 0.0 && jx < w as f64 && jy < h as f64 {
                            let src = (jy as usize * w + jx as usize) as u32;
                            taps.push(Tap { dst, src, w: 1.0 });
                        }
                    }
                }
            }
        }
        Ok(WarpPlan { taps, cells: h * w })
    }

    /// The do-nothing plan for the ego's own grid.
    pub fn identity(spec: &GridSpec) -> WarpPlan {
        let cells = spec.height() * spec.width();
        let taps =
            (0..cells as u32).map(|i| Tap { dst: i, src: i, w: 1.0 }).collect();
        WarpPlan { taps, cells }
    }

    /// Resamples `src` into the destination frame.
    pub fn apply(&self, src: &BevGrid, dst_frame: CloudFrame) -> Result<BevGrid, PerceptionError> {
        if src.spec.height() * src.spec.width() != self.cells {
            return Err(PerceptionError::SpecMismatch);
        }
        let mut out = BevGrid::zeros(src.spec, dst_frame)?;
        for c in 0..src.spec.channels {
            let sp = src.data.plane(0, c).to_vec();
            let dp = out.data.plane_mut(0, c);
            for t in &self.taps {
                dp[t.dst as usize] += t.w * sp[t.src as usize];
            }
        }
        Ok(out)
    }

    /// Adjoint of [`WarpPlan::apply`]: pulls a destination-frame gradient
    /// back onto the source grid.
    pub fn apply_transpose(&self, grad_dst: &Tensor4) -> Result<Tensor4, PerceptionError> {
        let [_, ch, h, w] = grad_dst.shape();
        if h * w != self.cells {
            return Err(PerceptionError::SpecMismatch);
        }
        let mut out = Tensor4::zeros(grad_dst.shape());
        for c in 0..ch {
            let gp = grad_dst.plane(0, c).to_vec();
            let sp = out.plane_mut(0, c);
            for t in &self.taps {
                sp[t.src as usize] += t.w * gp[t.dst as usize];
            }
        }
        Ok(out)
    }
}

/// Per-cell attention weights kept for the backward pass, laid out as
/// `[cell * num_agents + agent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFusionTrace {
    pub num_agents: usize,
    pub alphas: Vec<f64>,
}

/// Merges ego-frame grids from several agents. Each cell stacks the agent
/// feature vectors and runs scaled dot-product attention with no learned
/// projections; the ego (index 0) row is the query and the output. With a
/// single agent the output equals the input bit for bit.
pub fn fuse_agents(grids: &[&BevGrid]) -> Result<(BevGrid, AgentFusionTrace), PerceptionError> {
    let Some(first) = grids.first() else {
        return Err(PerceptionError::EmptyAgentList);
    };
    for g in grids {
        first.same_spec(g).map_err(|_| PerceptionError::SpecMismatch)?;
        if g.frame != first.frame {
            return Err(PerceptionError::FrameMismatch);
        }
    }
    let a_n = grids.len();
    let c_n = first.spec.channels;
    let cells = first.spec.height() * first.spec.width();
    let scale = 1.0 / math::sqrt(c_n as f64);

    let planes: Vec<Vec<&[f64]>> = grids
        .iter()
        .map(|g| (0..c_n).map(|c| g.data.plane(0, c)).collect())
        .collect();

    let mut out = BevGrid::zeros(first.spec, first.frame)?;
    let mut alphas = vec![0.0f64; cells * a_n];
    let mut scores = vec![0.0f64; a_n];
    for i in 0..cells {
        for (a, score) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..c_n {
                dot += planes[0][c][i] * planes[a][c][i];
            }
            *score = dot * scale;
        }
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| if s > m { s } else { m });
        let mut z = 0.0;
        let alpha = &mut alphas[i * a_n..(i + 1) * a_n];
        for (a, &s) in scores.iter().enumerate() {
            let e = math::exp(s - max);
            alpha[a] = e;
            z += e;
        }
        for v in alpha.iter_mut() {
            *v /= z;
        }
        for c in 0..c_n {
            let mut acc = 0.0;
            for a in 0..a_n {
                acc += alpha[a] * planes[a][c][i];
            }
            out.data.data_mut()[c * cells + i] = acc;
        }
    }
    Ok((out, AgentFusionTrace { num_agents: a_n, alphas }))
}

/// Gradients of [`fuse_agents`] with respect to every input grid.
///
/// With ego features x_0 as query and x_a as keys/values, the output is
/// sum_a alpha_a x_a with alpha = softmax(x_0 . x_a / sqrt(C)). The value
/// path contributes alpha_a g; the score path routes through the softmax
/// Jacobian u_a = alpha_a (g . x_a - sum_b alpha_b g . x_b) and splits onto
/// the query (u_a x_a / sqrt(C)) and the key (u_a x_0 / sqrt(C)).
pub fn fuse_agents_backward(
    grids: &[&BevGrid],
    trace: &AgentFusionTrace,
    grad_out: &Tensor4,
) -> Result<Vec<Tensor4>, PerceptionError> {
    let Some(first) = grids.first() else {
        return Err(PerceptionError::EmptyAgentList);
    };
    let a_n = grids.len();
    let c_n = first.spec.channels;
    let cells = first.spec.height() * first.spec.width();
    if trace.num_agents != a_n
        || trace.alphas.len() != cells * a_n
        || grad_out.shape() != first.data.shape()
    {
        return Err(PerceptionError::SpecMismatch);
    }
    let scale = 1.0 / math::sqrt(c_n as f64);
    let planes: Vec<Vec<&[f64]>> = grids
        .iter()
        .map(|g| (0..c_n).map(|c| g.data.plane(0, c)).collect())
        .collect();
    let gplanes: Vec<&[f64]> = (0..c_n).map(|c| grad_out.plane(0, c)).collect();

    let mut out: Vec<Tensor4> = (0..a_n).map(|_| Tensor4::zeros(first.data.shape())).collect();
    let mut d = vec![0.0f64; a_n];
    for i in 0..cells {
        let alpha = &trace.alphas[i * a_n..(i + 1) * a_n];
        let mut mean_d = 0.0;
        for (a, da) in d.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..c_n {
                dot += gplanes[c][i] * planes[a][c][i];
            }
            *da = dot;
            mean_d += alpha[a] * dot;
        }
        for a in 0..a_n {
            let u = alpha[a] * (d[a] - mean_d);
            for c in 0..c_n {
                let idx = c * cells + i;
                // Value path.
                out[a].data_mut()[idx] += alpha[a] * gplanes[c][i];
                // Score path: query and key roles. When a = 0 both land on
                // the ego grid, giving the quadratic term's factor of two.
                out[0].data_mut()[idx] += u * scale * planes[a][c][i];
                out[a].data_mut()[idx] += u * scale * planes[0][c][i];
            }
        }
    }
    Ok(out)
}

/// Learned channel mix joining the LiDAR and radar grids: concat to 2C,
/// then a bias-free 1x1 convolution back to C. Zero inputs stay zero.
#[derive(Debug, Clone)]
pub struct ModalFuse {
    pub graph: Graph,
    pub w: ParamId,
    pub channels: usize,
}

impl ModalFuse {
    /// Registers `prefix.w` `[C, 2C, 1, 1]`, initialized to average the two
    /// halves channel for channel.
    pub fn build(
        store: &mut ParamStore,
        channels: usize,
        prefix: &str,
    ) -> Result<Self, PerceptionError> {
        if channels == 0 {
            return Err(PerceptionError::InvalidConfig("channels must be positive".into()));
        }
        let mut init = Tensor4::zeros([channels, 2 * channels, 1, 1]);
        for c in 0..channels {
            *init.at_mut(c, c, 0, 0) = 0.5;
            *init.at_mut(c, channels + c, 0, 0) = 0.5;
        }
        let w = store.add(&format!("{prefix}.w"), init)?;
        let mut graph = Graph::new();
        let lidar = graph.input(0);
        let radar = graph.input(1);
        let cat = graph.concat(lidar, radar);
        graph.conv1x1(cat, w, None);
        Ok(ModalFuse { graph, w, channels })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        lidar: &Tensor4,
        radar: &Tensor4,
    ) -> Result<Trace, PerceptionError> {
        Ok(self.graph.forward(store, &[lidar, radar], 0.0)?)
    }

    /// Returns gradients for the LiDAR and radar inputs; the weight
    /// gradient accumulates into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        trace: &Trace,
        grad_out: &Tensor4,
        grads: &mut Gradients,
    ) -> Result<(Tensor4, Tensor4), PerceptionError> {
        let mut inputs = self.graph.backward(store, trace, grad_out, grads)?.into_iter();
        let gl = inputs.next().ok_or(PerceptionError::SpecMismatch)?;
        let gr = inputs.next().ok_or(PerceptionError::SpecMismatch)?;
        Ok((gl, gr))
    }
}

/// All learned pieces of the fusion pipeline (the detection head lives
/// with the detector). Which pieces exist follows the config: encoders per
/// active modality, the modal mix only when both modalities run, the
/// denoiser only when denoising is on.
#[derive(Debug, Clone)]
pub struct PipelineModel {
    pub enc_lidar: Option<EncoderParams>,
    pub enc_radar: Option<EncoderParams>,
    pub fuse: Option<ModalFuse>,
    pub denoiser: Option<UnetDenoiser>,
    pub schedule: DiffusionSchedule,
}

impl PipelineModel {
    pub fn build(
        store: &mut ParamStore,
        cfg: &PipelineConfig,
        seed: u64,
    ) -> Result<Self, PerceptionError> {
        cfg.validate()?;
        if cfg.mdd {
            let (h, w) = (cfg.grid.height(), cfg.grid.width());
            if h % 2 != 0 || w % 2 != 0 {
                return Err(PerceptionError::InvalidConfig(format!(
                    "the denoiser halves the grid once; cell counts must be even, got {h}x{w}"
                )));
            }
        }
        let c = cfg.grid.channels;
        let enc_lidar = if cfg.modality.uses_lidar() {
            Some(EncoderParams::register(store, "enc.lidar", c, seed ^ 0x4c49)?)
        } else {
            None
        };
        let enc_radar = if cfg.modality.uses_radar() {
            Some(EncoderParams::register(store, "enc.radar", c, seed ^ 0x5241)?)
        } else {
            None
        };
        let fuse = if cfg.modality == ModalityMix::LidarRadar {
            Some(ModalFuse::build(store, c, "fuse")?)
        } else {
            None
        };
        let denoiser = if cfg.mdd {
            Some(UnetDenoiser::build(store, c, "mdd", seed ^ 0x4d44)?)
        } else {
            None
        };
        let schedule = DiffusionSchedule::new(&cfg.betas)?;
        Ok(PipelineModel { enc_lidar, enc_radar, fuse, denoiser, schedule })
    }
}

/// One agent's contribution to a frame. The radar cloud is expressed in
/// the agent's LiDAR frame (the dataset convention), so a single reported
/// sensor pose and height serve both clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrameInput {
    pub agent: usize,
    pub lidar: PointCloud,
    pub radar: PointCloud,
    /// LiDAR height above the road, from the agent's own calibration.
    pub lidar_height: f64,
    /// World pose of the LiDAR per the agent's (possibly noisy) localizer.
    pub reported_pose: Pose3,
}

/// What kind of grid went over the air.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Lidar,
    Radar,
    Fused,
}

/// One transmitted grid: who sent it and how many non-zero elements it
/// carried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTransmission {
    pub sender: usize,
    pub kind: GridKind,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Final fused grid in the ego sensor frame, ready for the detector.
    pub fused: BevGrid,
    pub report: CommReport,
    pub transmitted: Vec<GridTransmission>,
}

struct ActiveAgent<'a> {
    input: &'a AgentFrameInput,
    is_ego: bool,
}

fn encode_agent_modality(
    a: &AgentFrameInput,
    modality: Modality,
    cfg: &PipelineConfig,
    store: &ParamStore,
    enc: &EncoderParams,
) -> Result<BevEncoding, PerceptionError> {
    let (cloud, scale) = match modality {
        Modality::Lidar => (&a.lidar, LIDAR_INTENSITY_SCALE),
        Modality::Radar => (&a.radar, cfg.radar_velocity_scale),
    };
    if cloud.modality != modality {
        return Err(PerceptionError::InvalidConfig(format!(
            "agent {} supplied the wrong cloud for its {modality:?} slot",
            a.agent
        )));
    }
    if cloud.frame != (CloudFrame::Sensor { agent: a.agent }) {
        return Err(PerceptionError::FrameMismatch);
    }
    encode_bev(cloud, &cfg.grid, cfg.height_range, a.lidar_height, scale, store, enc)
}

fn denoise_grid(
    grid: BevGrid,
    cond: &BevGrid,
    model: &PipelineModel,
    store: &ParamStore,
    seed: u64,
) -> Result<BevGrid, PerceptionError> {
    let unet = model
        .denoiser
        .as_ref()
        .ok_or_else(|| PerceptionError::InvalidConfig("denoising enabled without a denoiser".into()))?;
    let noisy = diffuse(&grid, &model.schedule, seed);
    let den = Denoiser::Learned(unet.clone());
    Ok(denoise_loop(&noisy, cond, &den, store, &model.schedule)?)
}

/// Runs the full fusion pipeline for one frame at inference.
///
/// The first input is the ego; peers beyond the broadcast range are
/// dropped before anything is encoded. `seed` fixes the diffusion draw
/// when denoising is on, making the whole call deterministic.
pub fn run_pipeline(
    inputs: &[AgentFrameInput],
    cfg: &PipelineConfig,
    model: &PipelineModel,
    store: &ParamStore,
    seed: u64,
) -> Result<PipelineOutput, PerceptionError> {
    cfg.validate()?;
    let Some(ego) = inputs.first() else {
        return Err(PerceptionError::EmptyAgentList);
    };
    let ego_pos = ego.reported_pose.position;
    let mut active: Vec<ActiveAgent> = vec![ActiveAgent { input: ego, is_ego: true }];
    for a in &inputs[1..] {
        let p = a.reported_pose.position;
        if math::hypot(p.x - ego_pos.x, p.y - ego_pos.y) <= cfg.broadcast_range_m {
            active.push(ActiveAgent { input: a, is_ego: false });
        }
    }

    let ego_frame = CloudFrame::Sensor { agent: ego.agent };
    let plans: Vec<Option<WarpPlan>> = active
        .iter()
        .map(|a| {
            if a.is_ego {
                Ok(None)
            } else {
                WarpPlan::build(&cfg.grid, &ego.reported_pose, &a.input.reported_pose, cfg.warp)
                    .map(Some)
            }
        })
        .collect::<Result<_, _>>()?;

    let mut transmitted = Vec::new();
    let fused = match cfg.strategy {
        FusionStrategy::Sm2Mm => {
            let mut per_modality: Vec<(Modality, BevGrid)> = Vec::new();
            for modality in [Modality::Lidar, Modality::Radar] {
                let enc = match modality {
                    Modality::Lidar => &model.enc_lidar,
                    Modality::Radar => &model.enc_radar,
                };
                let Some(enc) = enc else { continue };
                let mut aligned = Vec::new();
                for (a, plan) in active.iter().zip(&plans) {
                    let e = encode_agent_modality(a.input, modality, cfg, store, enc)?;
                    if let Some(plan) = plan {
                        transmitted.push(GridTransmission {
                            sender: a.input.agent,
                            kind: match modality {
                                Modality::Lidar => GridKind::Lidar,
                                Modality::Radar => GridKind::Radar,
                            },
                            elements: e.grid.non_zero_count(cfg.zero_tol),
                        });
                        aligned.push(plan.apply(&e.grid, ego_frame)?);
                    } else {
                        aligned.push(e.grid);
                    }
                }
                let refs: Vec<&BevGrid> = aligned.iter().collect();
                let (fused_m, _) = fuse_agents(&refs)?;
                per_modality.push((modality, fused_m));
            }
            let mut lidar = None;
            let mut radar = None;
            for (m, g) in per_modality {
                match m {
                    Modality::Lidar => lidar = Some(g),
                    Modality::Radar => radar = Some(g),
                }
            }
            let lidar = match (cfg.mdd, lidar) {
                (true, Some(l)) => {
                    let cond = match &radar {
                        Some(r) => r.clone(),
                        None => BevGrid::zeros(cfg.grid, ego_frame)?,
                    };
                    Some(denoise_grid(l, &cond, model, store, seed)?)
                }
                (_, l) => l,
            };
            match (lidar, radar) {
                (Some(l), Some(r)) => {
                    let fuse = model.fuse.as_ref().ok_or_else(|| {
                        PerceptionError::InvalidConfig("two modalities but no modal mix".into())
                    })?;
                    let trace = fuse.forward(store, &l.data, &r.data)?;
                    BevGrid::from_tensor(cfg.grid, ego_frame, trace.output().clone())?
                }
                (Some(l), None) => l,
                (None, Some(r)) => r,
                (None, None) => {
                    return Err(PerceptionError::InvalidConfig("no modality enabled".into()))
                }
            }
        }
        FusionStrategy::Sa2Ma => {
            let mut aligned = Vec::new();
            for (a, plan) in active.iter().zip(&plans) {
                let own_frame = CloudFrame::Sensor { agent: a.input.agent };
                let lidar = match &model.enc_lidar {
                    Some(enc) => {
                        Some(encode_agent_modality(a.input, Modality::Lidar, cfg, store, enc)?.grid)
                    }
                    None => None,
                };
                let radar = match &model.enc_radar {
                    Some(enc) => {
                        Some(encode_agent_modality(a.input, Modality::Radar, cfg, store, enc)?.grid)
                    }
                    None => None,
                };
                let lidar = match (cfg.mdd, lidar) {
                    (true, Some(l)) => {
                        let cond = match &radar {
                            Some(r) => r.clone(),
                            None => BevGrid::zeros(cfg.grid, own_frame)?,
                        };
                        // Distinct diffusion draws per agent.
                        let agent_seed = seed ^ (a.input.agent as u64).wrapping_mul(0x9e37_79b9);
                        Some(denoise_grid(l, &cond, model, store, agent_seed)?)
                    }
                    (_, l) => l,
                };
                let (agent_grid, kind) = match (lidar, radar) {
                    (Some(l), Some(r)) => {
                        let fuse = model.fuse.as_ref().ok_or_else(|| {
                            PerceptionError::InvalidConfig("two modalities but no modal mix".into())
                        })?;
                        let trace = fuse.forward(store, &l.data, &r.data)?;
                        (
                            BevGrid::from_tensor(cfg.grid, own_frame, trace.output().clone())?,
                            GridKind::Fused,
                        )
                    }
                    (Some(l), None) => (l, GridKind::Lidar),
                    (None, Some(r)) => (r, GridKind::Radar),
                    (None, None) => {
                        return Err(PerceptionError::InvalidConfig("no modality enabled".into()))
                    }
                };
                if let Some(plan) = plan {
                    transmitted.push(GridTransmission {
                        sender: a.input.agent,
                        kind,
                        elements: agent_grid.non_zero_count(cfg.zero_tol),
                    });
                    aligned.push(plan.apply(&agent_grid, ego_frame)?);
                } else {
                    aligned.push(agent_grid);
                }
            }
            let refs: Vec<&BevGrid> = aligned.iter().collect();
            fuse_agents(&refs)?.0
        }
    };

    let counts: Vec<(usize, usize)> =
        transmitted.iter().map(|t| (t.sender, t.elements)).collect();
    let report = count_report(&counts, cfg.bandwidth_bps)
        .map_err(|e| PerceptionError::InvalidConfig(format!("comm accounting: {e}")))?;
    Ok(PipelineOutput { fused, report, transmitted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scenario, ScenarioConfig};
    use crate::sensing::{raycast_lidar, raycast_radar, LidarConfig, RadarConfig};
    use rand::RngExt;

    const SENSOR_H: f64 = 1.9;

    fn small_spec(channels: usize) -> GridSpec {
        GridSpec { x_range: [0.0, 8.0], y_range: [-4.0, 4.0], cell_size: 1.0, channels }
    }

    fn cloud(points: &[(f64, f64, f64, f64)], modality: Modality, agent: usize) -> PointCloud {
        PointCloud {
            modality,
            frame: CloudFrame::Sensor { agent },
            points: points.iter().map(|&(x, y, z, _)| Vec3::new(x, y, z)).collect(),
            attr: points.iter().map(|&(_, _, _, a)| a).collect(),
            mask: vec![false; points.len()],
        }
    }

    fn scatter_cloud(n: usize, spec: &GridSpec, seed: u64, agent: usize) -> PointCloud {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64, f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(spec.x_range[0] + 1.0..spec.x_range[1] - 1.0),
                    rng.random_range(spec.y_range[0] + 1.0..spec.y_range[1] - 1.0),
                    rng.random_range(-1.0..1.5),
                    rng.random_range(0.0..200.0),
                )
            })
            .collect();
        cloud(&pts, Modality::Lidar, agent)
    }

    fn random_grid(spec: GridSpec, frame: CloudFrame, seed: u64) -> BevGrid {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut g = BevGrid::zeros(spec, frame).unwrap();
        for v in g.data.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        g
    }

    fn test_encoder(channels: usize, seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let enc = EncoderParams::register(&mut store, "enc.test", channels, seed).unwrap();
        (store, enc)
    }

    #[test]
    fn empty_cloud_encodes_to_exact_zero() {
        let spec = small_spec(4);
        let (store, enc) = test_encoder(4, 1);
        let c = PointCloud::empty(Modality::Lidar, CloudFrame::Sensor { agent: 0 });
        let e = encode_bev(&c, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, &store, &enc)
            .unwrap();
        assert!(e.occupied.is_empty());
        assert_eq!(e.grid.data.max_abs(), 0.0);
        assert_eq!(e.grid.non_zero_count(0.0), 0);
    }

    #[test]
    fn single_point_touches_exactly_one_cell() {
        let spec = small_spec(3);
        let (store, enc) = test_encoder(3, 2);
        let c = cloud(&[(3.4, 1.2, -0.9, 127.5)], Modality::Lidar, 0);
        let e = encode_bev(&c, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, &store, &enc)
            .unwrap();
        assert_eq!(e.occupied, vec![(5, 3)]);
        // Pillar statistics are exact for a one-point cell.
        let height = -0.9 + SENSOR_H;
        assert_eq!(e.stats.at(0, 0, 5, 3), math::ln(2.0));
        assert_eq!(e.stats.at(0, 1, 5, 3), height);
        assert_eq!(e.stats.at(0, 2, 5, 3), height);
        assert_eq!(e.stats.at(0, 3, 5, 3), 0.5);
        assert_eq!(e.stats.at(0, 4, 5, 3), 1.0);
        // Only that cell's channels are populated.
        assert_eq!(e.grid.non_zero_count(0.0), 3);
        for c_i in 0..3 {
            assert_ne!(e.grid.data.at(0, c_i, 5, 3), 0.0);
        }
    }

    #[test]
    fn height_band_drops_ground_and_sky() {
        let spec = small_spec(2);
        let (store, enc) = test_encoder(2, 3);
        // Ground return (height ~0), in-band return, overhead gantry.
        let c = cloud(
            &[(2.5, 0.5, -SENSOR_H, 40.0), (2.5, 0.5, -0.5, 40.0), (2.5, 0.5, 3.0, 40.0)],
            Modality::Lidar,
            0,
        );
        let e = encode_bev(&c, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, &store, &enc)
            .unwrap();
        assert_eq!(e.occupied.len(), 1);
        let (iy, ix) = e.occupied[0];
        // Heights land at 0.0 (ground, below the band), 1.4 (kept) and 4.9
        // (above the band): exactly one point survives.
        assert_eq!(e.stats.at(0, 0, iy, ix), math::ln(2.0));
        assert_eq!(e.stats.at(0, 1, iy, ix), -0.5 + SENSOR_H);
    }

    #[test]
    fn shifting_the_cloud_by_one_cell_shifts_the_grid() {
        let spec = small_spec(4);
        let (store, enc) = test_encoder(4, 4);
        let c = scatter_cloud(60, &spec, 5, 0);
        let mut shifted = c.clone();
        for p in &mut shifted.points {
            p.x += spec.cell_size;
        }
        let e1 = encode_bev(&c, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, &store, &enc)
            .unwrap();
        let e2 =
            encode_bev(&shifted, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, &store, &enc)
                .unwrap();
        assert!(!e1.occupied.is_empty());
        for &(iy, ix) in &e1.occupied {
            for ch in 0..4 {
                assert_eq!(
                    e2.grid.data.at(0, ch, iy, ix + 1),
                    e1.grid.data.at(0, ch, iy, ix),
                    "cell ({iy},{ix}) channel {ch}"
                );
            }
        }
    }

    #[test]
    fn wrong_frame_tag_is_rejected() {
        let spec = small_spec(2);
        let (store, enc) = test_encoder(2, 6);
        let mut c = cloud(&[(1.0, 0.0, 0.0, 1.0)], Modality::Lidar, 0);
        c.frame = CloudFrame::Ego;
        let r = encode_bev(&c, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, &store, &enc);
        assert_eq!(r, Err(PerceptionError::FrameMismatch));
    }

    #[test]
    fn masked_points_encode_like_real_ones_until_stripped() {
        let spec = small_spec(2);
        let (store, enc) = test_encoder(2, 7);
        let mut c = cloud(
            &[(2.5, 0.5, -0.5, 40.0), (5.5, -1.5, -0.5, 40.0)],
            Modality::Lidar,
            0,
        );
        c.mask[1] = true;
        let noisy = encode_bev(&c, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, &store, &enc)
            .unwrap();
        assert_eq!(noisy.occupied.len(), 2);
        let clean = encode_bev(
            &c.without_masked(),
            &spec,
            [0.3, 4.0],
            SENSOR_H,
            LIDAR_INTENSITY_SCALE,
            &store,
            &enc,
        )
        .unwrap();
        assert_eq!(clean.occupied.len(), 1);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let spec = small_spec(3);
        let (mut store, enc) = test_encoder(3, 8);
        let c = scatter_cloud(25, &spec, 9, 0);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let cells = spec.height() * spec.width();
        let weights: Vec<f64> = (0..3 * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |store: &ParamStore| -> f64 {
            let e =
                encode_bev(&c, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, store, &enc)
                    .unwrap();
            e.grid.data.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let e = encode_bev(&c, &spec, [0.3, 4.0], SENSOR_H, LIDAR_INTENSITY_SCALE, &store, &enc)
            .unwrap();
        let grad = Tensor4::from_vec([1, 3, spec.height(), spec.width()], weights.clone()).unwrap();
        let mut grads = Gradients::for_store(&store);
        encode_backward(&e, &grad, &store, &enc, &mut grads).unwrap();
        let eps = 1e-6;
        for id in [enc.w, enc.b] {
            let g = grads.get(id).unwrap().clone();
            for idx in 0..g.len() {
                let orig = store.get(id).data()[idx];
                store.get_mut(id).data_mut()[idx] = orig + eps;
                let up = loss(&store);
                store.get_mut(id).data_mut()[idx] = orig - eps;
                let down = loss(&store);
                store.get_mut(id).data_mut()[idx] = orig;
                let num = (up - down) / (2.0 * eps);
                let a = g.data()[idx];
                assert!(
                    (a - num).abs() <= 1e-6 * a.abs().max(num.abs()).max(1.0),
                    "param {id} elem {idx}: {a} vs {num}"
                );
            }
        }
    }

    #[test]
    fn warp_between_identical_poses_copies_exactly() {
        let spec = small_spec(3);
        let pose = Pose3::flat(12.0, -3.0, 1.9, 0.7);
        let plan = WarpPlan::build(&spec, &pose, &pose, WarpMode::Bilinear).unwrap();
        let src = random_grid(spec, CloudFrame::Sensor { agent: 1 }, 11);
        let out = plan.apply(&src, CloudFrame::Sensor { agent: 0 }).unwrap();
        assert_eq!(out.data, src.data);
        let id = WarpPlan::identity(&spec);
        let out2 = id.apply(&src, CloudFrame::Sensor { agent: 0 }).unwrap();
        assert_eq!(out2.data, src.data);
    }

    #[test]
    fn one_cell_translation_shifts_the_grid() {
        let spec = small_spec(2);
        // Destination sensor sits one cell ahead of the source sensor, so
        // destination cell ix reads source cell ix+1.
        let src_pose = Pose3::flat(0.0, 0.0, 1.9, 0.0);
        let dst_pose = Pose3::flat(spec.cell_size, 0.0, 1.9, 0.0);
        let plan = WarpPlan::build(&spec, &dst_pose, &src_pose, WarpMode::Bilinear).unwrap();
        let src = random_grid(spec, CloudFrame::Sensor { agent: 1 }, 12);
        let out = plan.apply(&src, CloudFrame::Sensor { agent: 0 }).unwrap();
        let w = spec.width();
        for ch in 0..2 {
            for iy in 0..spec.height() {
                for ix in 0..w - 1 {
                    assert_eq!(out.data.at(0, ch, iy, ix), src.data.at(0, ch, iy, ix + 1));
                }
                // The last column reads past the source extent.
                assert_eq!(out.data.at(0, ch, iy, w - 1), 0.0);
            }
        }
    }

    #[test]
    fn half_cell_translation_averages_neighbors() {
        let spec = small_spec(1);
        let src_pose = Pose3::flat(0.0, 0.0, 1.9, 0.0);
        let dst_pose = Pose3::flat(0.5 * spec.cell_size, 0.0, 1.9, 0.0);
        let plan = WarpPlan::build(&spec, &dst_pose, &src_pose, WarpMode::Bilinear).unwrap();
        let mut src = BevGrid::zeros(spec, CloudFrame::Sensor { agent: 1 }).unwrap();
        *src.data.at_mut(0, 0, 4, 5) = 2.0;
        let out = plan.apply(&src, CloudFrame::Sensor { agent: 0 }).unwrap();
        assert!((out.data.at(0, 0, 4, 4) - 1.0).abs() < 1e-12);
        assert!((out.data.at(0, 0, 4, 5) - 1.0).abs() < 1e-12);
        assert_eq!(out.data.at(0, 0, 4, 6), 0.0);

        // Nearest mode picks a single source cell instead.
        let plan_n = WarpPlan::build(&spec, &dst_pose, &src_pose, WarpMode::Nearest).unwrap();
        let out_n = plan_n.apply(&src, CloudFrame::Sensor { agent: 0 }).unwrap();
        assert_eq!(out_n.data.data().iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn warp_transpose_is_the_exact_adjoint() {
        let spec = small_spec(3);
        let dst_pose = Pose3::flat(1.3, -0.4, 1.9, 0.35);
        let src_pose = Pose3::flat(0.2, 0.6, 1.9, -0.1);
        for mode in [WarpMode::Bilinear, WarpMode::Nearest] {
            let plan = WarpPlan::build(&spec, &dst_pose, &src_pose, mode).unwrap();
            let x = random_grid(spec, CloudFrame::Sensor { agent: 1 }, 13);
            let y = random_grid(spec, CloudFrame::Sensor { agent: 0 }, 14);
            let ax = plan.apply(&x, CloudFrame::Sensor { agent: 0 }).unwrap();
            let aty = plan.apply_transpose(&y.data).unwrap();
            let lhs: f64 = ax.data.data().iter().zip(y.data.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{mode:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn far_pose_warps_to_an_empty_grid() {
        let spec = small_spec(2);
        let dst_pose = Pose3::flat(500.0, 0.0, 1.9, 0.0);
        let src_pose = Pose3::identity();
        let plan = WarpPlan::build(&spec, &dst_pose, &src_pose, WarpMode::Bilinear).unwrap();
        let src = random_grid(spec, CloudFrame::Sensor { agent: 1 }, 15);
        let out = plan.apply(&src, CloudFrame::Sensor { agent: 0 }).unwrap();
        assert_eq!(out.data.max_abs(), 0.0);
    }

    #[test]
    fn single_agent_attention_is_the_identity() {
        let g = random_grid(small_spec(4), CloudFrame::Sensor { agent: 0 }, 16);
        let (out, trace) = fuse_agents(&[&g]).unwrap();
        assert_eq!(out.data, g.data);
        assert!(trace.alphas.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn identical_agents_attend_to_their_common_value() {
        let g = random_grid(small_spec(4), CloudFrame::Sensor { agent: 0 }, 17);
        let (out, _) = fuse_agents(&[&g, &g, &g]).unwrap();
        for (a, b) in out.data.data().iter().zip(g.data.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn peer_content_reaches_an_empty_ego_cell() {
        let spec = small_spec(4);
        let ego = BevGrid::zeros(spec, CloudFrame::Sensor { agent: 0 }).unwrap();
        let mut peer = BevGrid::zeros(spec, CloudFrame::Sensor { agent: 0 }).unwrap();
        for c in 0..4 {
            *peer.data.at_mut(0, c, 2, 3) = 1.0 + c as f64;
        }
        let (out, _) = fuse_agents(&[&ego, &peer]).unwrap();
        // Ego features are zero, so both scores vanish and attention
        // splits evenly: the output is half the peer value.
        for c in 0..4 {
            assert!((out.data.at(0, c, 2, 3) - 0.5 * (1.0 + c as f64)).abs() < 1e-12);
        }
        assert_eq!(out.data.at(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn attention_ignores_peer_order() {
        let spec = small_spec(4);
        let a = random_grid(spec, CloudFrame::Sensor { agent: 0 }, 18);
        let b = random_grid(spec, CloudFrame::Sensor { agent: 0 }, 19);
        let c = random_grid(spec, CloudFrame::Sensor { agent: 0 }, 20);
        let (out1, _) = fuse_agents(&[&a, &b, &c]).unwrap();
        let (out2, _) = fuse_agents(&[&a, &c, &b]).unwrap();
        for (x, y) in out1.data.data().iter().zip(out2.data.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let spec = GridSpec { x_range: [0.0, 3.0], y_range: [0.0, 2.0], cell_size: 1.0, channels: 3 };
        let frame = CloudFrame::Sensor { agent: 0 };
        let grids = [
            random_grid(spec, frame, 21),
            random_grid(spec, frame, 22),
            random_grid(spec, frame, 23),
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let weights: Vec<f64> =
            (0..grids[0].data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |gs: &[BevGrid]| -> f64 {
            let refs: Vec<&BevGrid> = gs.iter().collect();
            let (out, _) = fuse_agents(&refs).unwrap();
            out.data.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let refs: Vec<&BevGrid> = grids.iter().collect();
        let (_, trace) = fuse_agents(&refs).unwrap();
        let grad_out = Tensor4::from_vec(grids[0].data.shape(), weights.clone()).unwrap();
        let input_grads = fuse_agents_backward(&refs, &trace, &grad_out).unwrap();
        let eps = 1e-6;
        for a in 0..3 {
            for idx in 0..grids[0].data.len() {
                let mut up = grids.to_vec();
                up[a].data.data_mut()[idx] += eps;
                let mut dn = grids.to_vec();
                dn[a].data.data_mut()[idx] -= eps;
                let num = (loss(&up) - loss(&dn)) / (2.0 * eps);
                let an = input_grads[a].data()[idx];
                assert!(
                    (an - num).abs() <= 1e-5 * an.abs().max(num.abs()).max(1.0),
                    "agent {a} elem {idx}: {an} vs {num}"
                );
            }
        }
    }

    #[test]
    fn modal_mix_zero_in_zero_out_and_identity_halves() {
        let mut store = ParamStore::new();
        let fuse = ModalFuse::build(&mut store, 3, "fuse.test").unwrap();
        let z = Tensor4::zeros([1, 3, 4, 5]);
        let t = fuse.forward(&store, &z, &z).unwrap();
        assert_eq!(t.output().max_abs(), 0.0);

        let l = Tensor4::randn([1, 3, 4, 5], 1.0, &mut ChaCha12Rng::seed_from_u64(25));
        let r = Tensor4::randn([1, 3, 4, 5], 1.0, &mut ChaCha12Rng::seed_from_u64(26));
        // Default initialization averages the halves.
        let t = fuse.forward(&store, &l, &r).unwrap();
        for ((o, a), b) in t.output().data().iter().zip(l.data()).zip(r.data()) {
            assert!((o - 0.5 * (a + b)).abs() < 1e-12);
        }
        // Reprogram the mix to take only the LiDAR half.
        {
            let w = store.get_mut(fuse.w);
            w.fill(0.0);
            for c in 0..3 {
                *w.at_mut(c, c, 0, 0) = 1.0;
            }
        }
        let t = fuse.forward(&store, &l, &r).unwrap();
        assert_eq!(t.output(), &l);
    }

    #[test]
    fn radar_features_are_sparser_than_lidar_features() {
        let scn = build_scenario(&ScenarioConfig::default(), 42).unwrap();
        let frame = scn.frame_ground_truth(0);
        let lidar = raycast_lidar(&scn, &frame, 0, &LidarConfig::default(), 1).unwrap();
        let radar = raycast_radar(&scn, &frame, 0, &RadarConfig::default(), 2).unwrap();
        let mut store = ParamStore::new();
        let enc_l = EncoderParams::register(&mut store, "enc.lidar", 8, 3).unwrap();
        let enc_r = EncoderParams::register(&mut store, "enc.radar", 8, 4).unwrap();
        let spec = GridSpec::default();
        let h = scn.agents[0].lidar_mount.position.z;
        let el = encode_bev(&lidar, &spec, [0.3, 4.0], h, LIDAR_INTENSITY_SCALE, &store, &enc_l)
            .unwrap();
        let er = encode_bev(&radar, &spec, [0.3, 4.0], h, 15.0, &store, &enc_r).unwrap();
        assert!(el.grid.non_zero_count(1e-6) > 0);
        assert!(er.grid.non_zero_count(1e-6) > 0);
        assert!(
            er.grid.non_zero_count(1e-6) < el.grid.non_zero_count(1e-6),
            "radar {} vs lidar {}",
            er.grid.non_zero_count(1e-6),
            el.grid.non_zero_count(1e-6)
        );
    }

    fn synthetic_agent(agent: usize, x: f64, seed: u64) -> AgentFrameInput {
        let spec = small_spec(4);
        let mut lidar = scatter_cloud(40, &spec, seed, agent);
        lidar.modality = Modality::Lidar;
        let radar = PointCloud {
            modality: Modality::Radar,
            frame: CloudFrame::Sensor { agent },
            points: vec![Vec3::new(3.3, 0.4, -0.6), Vec3::new(5.6, -1.2, -0.4)],
            attr: vec![-4.0, 2.5],
            mask: vec![false; 2],
        };
        AgentFrameInput {
            agent,
            lidar,
            radar,
            lidar_height: SENSOR_H,
            reported_pose: Pose3::flat(x, 0.0, SENSOR_H, 0.0),
        }
    }

    fn test_cfg() -> PipelineConfig {
        PipelineConfig { grid: small_spec(4), ..PipelineConfig::default() }
    }

    #[test]
    fn single_agent_pipeline_matches_stage_composition() {
        let cfg = test_cfg();
        let mut store = ParamStore::new();
        let model = PipelineModel::build(&mut store, &cfg, 30).unwrap();
        let inputs = vec![synthetic_agent(0, 0.0, 31)];
        let out = run_pipeline(&inputs, &cfg, &model, &store, 0).unwrap();
        assert!(out.report.links.is_empty());
        assert_eq!(out.report.total_elements, 0);
        assert!(out.transmitted.is_empty());

        let el = encode_bev(
            &inputs[0].lidar,
            &cfg.grid,
            cfg.height_range,
            SENSOR_H,
            LIDAR_INTENSITY_SCALE,
            &store,
            model.enc_lidar.as_ref().unwrap(),
        )
        .unwrap();
        let er = encode_bev(
            &inputs[0].radar,
            &cfg.grid,
            cfg.height_range,
            SENSOR_H,
            cfg.radar_velocity_scale,
            &store,
            model.enc_radar.as_ref().unwrap(),
        )
        .unwrap();
        let t = model.fuse.as_ref().unwrap().forward(&store, &el.grid.data, &er.grid.data).unwrap();
        assert_eq!(out.fused.data, *t.output());
        assert_eq!(out.fused.frame, CloudFrame::Sensor { agent: 0 });
    }

    #[test]
    fn out_of_range_peer_changes_nothing() {
        let cfg = test_cfg();
        let mut store = ParamStore::new();
        let model = PipelineModel::build(&mut store, &cfg, 32).unwrap();
        let solo = vec![synthetic_agent(0, 0.0, 33)];
        let with_far = vec![synthetic_agent(0, 0.0, 33), synthetic_agent(1, 100.0, 34)];
        let a = run_pipeline(&solo, &cfg, &model, &store, 0).unwrap();
        let b = run_pipeline(&with_far, &cfg, &model, &store, 0).unwrap();
        assert_eq!(a.fused, b.fused);
        assert!(b.report.links.is_empty());
    }

    #[test]
    fn near_peer_is_fused_and_accounted() {
        let cfg = test_cfg();
        let mut store = ParamStore::new();
        let model = PipelineModel::build(&mut store, &cfg, 35).unwrap();
        let inputs = vec![synthetic_agent(0, 0.0, 36), synthetic_agent(1, 2.0, 37)];
        let out = run_pipeline(&inputs, &cfg, &model, &store, 0).unwrap();
        // One LiDAR grid and one radar grid from the peer.
        assert_eq!(out.transmitted.len(), 2);
        assert!(out.transmitted.iter().all(|t| t.sender == 1));
        assert!(out.transmitted.iter().any(|t| t.kind == GridKind::Lidar));
        assert!(out.transmitted.iter().any(|t| t.kind == GridKind::Radar));
        assert_eq!(out.report.links.len(), 2);
        assert_eq!(
            out.report.total_elements,
            out.transmitted.iter().map(|t| t.elements).sum::<usize>()
        );
        assert!(out.report.total_elements > 0);

        let solo = run_pipeline(&inputs[..1], &cfg, &model, &store, 0).unwrap();
        let diff: f64 = out
            .fused
            .data
            .data()
            .iter()
            .zip(solo.fused.data.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "peer features must reach the fused grid");
    }

    #[test]
    fn the_two_orchestrations_disagree_in_general() {
        let cfg = test_cfg();
        let mut store = ParamStore::new();
        let model = PipelineModel::build(&mut store, &cfg, 38).unwrap();
        let inputs = vec![synthetic_agent(0, 0.0, 39), synthetic_agent(1, 1.5, 40)];
        let sm = run_pipeline(&inputs, &cfg, &model, &store, 0).unwrap();
        let cfg_sa = PipelineConfig { strategy: FusionStrategy::Sa2Ma, ..cfg };
        let sa = run_pipeline(&inputs, &cfg_sa, &model, &store, 0).unwrap();
        assert_eq!(sa.fused.data.shape(), sm.fused.data.shape());
        assert!(sa.fused.data.is_finite() && sm.fused.data.is_finite());
        // Per-agent transmission drops to one fused grid.
        assert_eq!(sa.transmitted.len(), 1);
        assert_eq!(sa.transmitted[0].kind, GridKind::Fused);
        let diff: f64 = sa
            .fused
            .data
            .data()
            .iter()
            .zip(sm.fused.data.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9, "orders of fusion should not commute in general");
    }

    #[test]
    fn denoising_runs_deterministically_in_both_orchestrations() {
        for strategy in [FusionStrategy::Sm2Mm, FusionStrategy::Sa2Ma] {
            let cfg = PipelineConfig { mdd: true, strategy, ..test_cfg() };
            let mut store = ParamStore::new();
            let model = PipelineModel::build(&mut store, &cfg, 41).unwrap();
            assert!(model.denoiser.is_some());
            let inputs = vec![synthetic_agent(0, 0.0, 42), synthetic_agent(1, 1.0, 43)];
            let a = run_pipeline(&inputs, &cfg, &model, &store, 7).unwrap();
            let b = run_pipeline(&inputs, &cfg, &model, &store, 7).unwrap();
            assert_eq!(a.fused, b.fused);
            let c = run_pipeline(&inputs, &cfg, &model, &store, 8).unwrap();
            let diff: f64 = a
                .fused
                .data
                .data()
                .iter()
                .zip(c.fused.data.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff > 0.0, "{strategy:?}: diffusion draw must follow the seed");
        }
    }

    #[test]
    fn lidar_only_denoising_works_and_radar_only_is_rejected() {
        let cfg = PipelineConfig { mdd: true, modality: ModalityMix::Lidar, ..test_cfg() };
        let mut store = ParamStore::new();
        let model = PipelineModel::build(&mut store, &cfg, 44).unwrap();
        let inputs = vec![synthetic_agent(0, 0.0, 45)];
        let out = run_pipeline(&inputs, &cfg, &model, &store, 1).unwrap();
        assert!(out.fused.data.is_finite());

        let bad = PipelineConfig { mdd: true, modality: ModalityMix::Radar, ..test_cfg() };
        assert!(matches!(bad.validate(), Err(PerceptionError::InvalidConfig(_))));
    }
}
