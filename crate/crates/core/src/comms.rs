//! The V2X transport layer: who can talk to whom, how well they know where
//! they are, and what shipping their features costs.
//!
//! Feature grids travel as sparse packets listing only non-zero cells,
//! which is what makes BEV encodings cheap to share: empty pillars encode
//! to exact zeros and never hit the air. Costs are reported per link as a
//! log2 volume in 4-byte units plus a latency at a fixed link bandwidth.
//!
//! Localization noise perturbs the *reported* pose attached to a packet.
//! The receiver warps the sender's grid using that reported pose, so pose
//! error smears features; ground truth stays clean for evaluation.

use crate::bev::{BevGrid, GridSpec};
use crate::geometry::Pose3;
use crate::math;
use crate::nn::Tensor4;
use crate::scene::{AgentRole, SceneFrame};
use crate::sensing::CloudFrame;
use alloc::string::String;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommsError {
    InvalidConfig(String),
    /// Packet indices fall outside the grid declared by its spec.
    CorruptPacket,
}

impl core::fmt::Display for CommsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CommsError::InvalidConfig(m) => write!(f, "invalid comms config: {m}"),
            CommsError::CorruptPacket => write!(f, "packet payload does not fit its grid spec"),
        }
    }
}

impl core::error::Error for CommsError {}

/// Pose-report error model. Horizontal error is the experimental variable;
/// altitude, heading and speed errors are fixed properties of the
/// positioning hardware, with the roadside unit's altitude channel much
/// worse than a vehicle's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationNoiseConfig {
    /// Std of the x and y errors, meters. Swept 0 to 0.6 in experiments.
    pub xy_std: f64,
    pub vehicle_alt_std: f64,
    pub rsu_alt_std: f64,
    pub heading_std_deg: f64,
    pub speed_std: f64,
}

impl Default for LocalizationNoiseConfig {
    fn default() -> Self {
        LocalizationNoiseConfig {
            xy_std: 0.0,
            vehicle_alt_std: 0.001,
            rsu_alt_std: 0.05,
            heading_std_deg: 0.1,
            speed_std: 0.2,
        }
    }
}

impl LocalizationNoiseConfig {
    pub fn validate(&self) -> Result<(), CommsError> {
        let all = [
            self.xy_std,
            self.vehicle_alt_std,
            self.rsu_alt_std,
            self.heading_std_deg,
            self.speed_std,
        ];
        if all.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(CommsError::InvalidConfig("stds must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One agent's feature grid on the wire: sparse payload plus the metadata
/// the receiver needs to reconstruct and warp it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePacket {
    pub sender: usize,
    pub role: AgentRole,
    /// Pose the sender claims to be at; possibly noise-perturbed.
    pub reported_pose: Pose3,
    pub spec: GridSpec,
    pub frame: CloudFrame,
    /// Flat indices into the dense C*H*W block, ascending.
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl FeaturePacket {
    /// Number of scalars actually transmitted.
    pub fn element_count(&self) -> usize {
        self.values.len()
    }
}

/// Cost accounting for one packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCost {
    pub sender: usize,
    pub elements: usize,
    /// log2 of the element count in 4-byte units; 0 for empty packets.
    pub volume_log2: f64,
    pub latency_ms: f64,
}

/// Cost accounting for a set of packets on one shared link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub bandwidth_bps: f64,
    pub links: Vec<LinkCost>,
    pub total_elements: usize,
    pub total_volume_log2: f64,
    pub total_latency_ms: f64,
}

/// Default link bandwidth, bits per second.
pub const DEFAULT_BANDWIDTH_BPS: f64 = 27e6;
/// Default broadcast range between agents, meters.
pub const DEFAULT_BROADCAST_RANGE_M: f64 = 70.0;
/// Magnitudes at or below this count as zero when sparsifying.
pub const DEFAULT_ZERO_TOL: f64 = 1e-6;

/// Agents (other than ego) whose ground-plane distance to ego is within the
/// broadcast range, in index order.
pub fn select_peers(frame: &SceneFrame, ego: usize, range_m: f64) -> Vec<usize> {
    let Some(ego_state) = frame.agents.get(ego) else {
        return Vec::new();
    };
    let e = ego_state.pose.position;
    frame
        .agents
        .iter()
        .enumerate()
        .filter(|(i, a)| {
            *i != ego && math::hypot(a.pose.position.x - e.x, a.pose.position.y - e.y) <= range_m
        })
        .map(|(i, _)| i)
        .collect()
}

/// Draws a noisy pose report. The standard normal draws happen in a fixed
/// order (x, y, z, yaw), so two roles with the same seed share the exact
/// same unit perturbations and differ only by the configured stds.
pub fn perturb_pose(
    true_pose: &Pose3,
    cfg: &LocalizationNoiseConfig,
    role: AgentRole,
    seed: u64,
) -> Result<Pose3, CommsError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let nx = draw();
    let ny = draw();
    let nz = draw();
    let nyaw = draw();
    let alt_std = match role {
        AgentRole::Rsu => cfg.rsu_alt_std,
        AgentRole::Ego | AgentRole::Cav => cfg.vehicle_alt_std,
    };
    let mut p = *true_pose;
    p.position.x += cfg.xy_std * nx;
    p.position.y += cfg.xy_std * ny;
    p.position.z += alt_std * nz;
    p.yaw += cfg.heading_std_deg.to_radians() * nyaw;
    Ok(p)
}

/// Draws a noisy speed report with the configured speed std.
pub fn perturb_speed(true_speed: f64, cfg: &LocalizationNoiseConfig, seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: f64 = StandardNormal.sample(&mut rng);
    true_speed + cfg.speed_std * n
}

/// Sparsifies a grid into a packet: cells with |value| <= zero_tol are
/// dropped, everything else is kept bit-exactly.
pub fn packetize(
    grid: &BevGrid,
    sender: usize,
    role: AgentRole,
    reported_pose: Pose3,
    zero_tol: f64,
) -> FeaturePacket {
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, &v) in grid.data.data().iter().enumerate() {
        if v.abs() > zero_tol {
            indices.push(i as u32);
            values.push(v);
        }
    }
    FeaturePacket {
        sender,
        role,
        reported_pose,
        spec: grid.spec,
        frame: grid.frame,
        indices,
        values,
    }
}

/// Rebuilds the dense grid a packet was cut from; dropped cells come back
/// as zeros.
pub fn depacketize(packet: &FeaturePacket) -> Result<BevGrid, CommsError> {
    let mut grid = BevGrid::zeros(packet.spec, packet.frame)
        .map_err(|_| CommsError::CorruptPacket)?;
    let len = grid.data.data().len();
    if packet.indices.len() != packet.values.len() {
        return Err(CommsError::CorruptPacket);
    }
    for (&i, &v) in packet.indices.iter().zip(&packet.values) {
        let i = i as usize;
        if i >= len {
            return Err(CommsError::CorruptPacket);
        }
        grid.data.data_mut()[i] = v;
    }
    Ok(grid)
}

fn packet_cost(sender: usize, elements: usize, bandwidth_bps: f64) -> LinkCost {
    let volume_log2 = if elements == 0 { 0.0 } else { math::log2(elements as f64) };
    let latency_ms = elements as f64 * 4.0 * 8.0 / bandwidth_bps * 1000.0;
    LinkCost { sender, elements, volume_log2, latency_ms }
}

/// Volume/latency table for a set of packets at the given link bandwidth.
pub fn link_report(packets: &[FeaturePacket], bandwidth_bps: f64) -> Result<CommReport, CommsError> {
    if !(bandwidth_bps > 0.0) {
        return Err(CommsError::InvalidConfig("bandwidth must be positive".into()));
    }
    let links: Vec<LinkCost> = packets
        .iter()
        .map(|p| packet_cost(p.sender, p.element_count(), bandwidth_bps))
        .collect();
    Ok(report_from_links(links, bandwidth_bps))
}

/// Same accounting when only the element counts are known.
pub fn count_report(counts: &[(usize, usize)], bandwidth_bps: f64) -> Result<CommReport, CommsError> {
    if !(bandwidth_bps > 0.0) {
        return Err(CommsError::InvalidConfig("bandwidth must be positive".into()));
    }
    let links: Vec<LinkCost> =
        counts.iter().map(|&(sender, n)| packet_cost(sender, n, bandwidth_bps)).collect();
    Ok(report_from_links(links, bandwidth_bps))
}

fn report_from_links(links: Vec<LinkCost>, bandwidth_bps: f64) -> CommReport {
    let total_elements: usize = links.iter().map(|l| l.elements).sum();
    let total_latency_ms: f64 = links.iter().map(|l| l.latency_ms).sum();
    let total_volume_log2 =
        if total_elements == 0 { 0.0 } else { math::log2(total_elements as f64) };
    CommReport { bandwidth_bps, links, total_elements, total_volume_log2, total_latency_ms }
}

/// Convenience used by tests and the pipeline: dense tensor in, sparse count out.
pub fn non_zero_elements(t: &Tensor4, zero_tol: f64) -> usize {
    t.data().iter().filter(|v| v.abs() > zero_tol).count()
}
