//! Ray-cast sensor models: spinning LiDAR and forward 4D radar.
//!
//! Both sensors march rays from their mount pose through the scene (ground
//! plane, actor boxes, obstacle boxes) and keep the nearest hit. The LiDAR
//! covers a full turn with many elevation channels, adds Gaussian range noise
//! and reports an intensity derived from surface reflectivity and incidence
//! angle, quantized to [0, 255]. The radar sweeps a coarser forward grid,
//! keeps each hit with a fixed detection probability, and reports the radial
//! relative velocity instead of intensity; its points are re-expressed in the
//! same agent's LiDAR frame so the two clouds can be fused without further
//! calibration. Radar ignores the ground plane: slow clutter is assumed
//! filtered out before the interface, the way a moving-target stage would.
//!
//! Clouds remember their frame and modality, and every point carries a mask
//! bit which stays `false` here; weather corruption flips it for points it
//! injects.

use crate::geometry::{Box3, Pose3, Vec3};
use crate::math;
use crate::scene::{Scenario, SceneFrame};
use alloc::string::String;
use alloc::vec::Vec;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SensingError {
    InvalidConfig(String),
    /// Agent index outside the scenario.
    UnknownAgent(usize),
}

impl core::fmt::Display for SensingError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SensingError::InvalidConfig(m) => write!(f, "invalid sensor config: {m}"),
            SensingError::UnknownAgent(i) => write!(f, "agent {i} does not exist"),
        }
    }
}

impl core::error::Error for SensingError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Lidar,
    Radar,
}

/// Which coordinate frame a cloud's points live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudFrame {
    /// The LiDAR frame of the given agent (radar clouds are delivered here too).
    Sensor { agent: usize },
    Ego,
    World,
}

/// Struct-of-arrays point cloud. `attr` is intensity in [0, 255] for LiDAR
/// and radial relative velocity in m/s for radar (negative while closing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub modality: Modality,
    pub frame: CloudFrame,
    pub points: Vec<Vec3>,
    pub attr: Vec<f64>,
    /// `true` marks points that were injected by corruption rather than
    /// returned by a surface.
    pub mask: Vec<bool>,
}

impl PointCloud {
    pub fn empty(modality: Modality, frame: CloudFrame) -> Self {
        PointCloud { modality, frame, points: Vec::new(), attr: Vec::new(), mask: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn push(&mut self, p: Vec3, attr: f64, mask: bool) {
        self.points.push(p);
        self.attr.push(attr);
        self.mask.push(mask);
    }

    /// Same points expressed in another frame; `pose` maps this cloud's frame
    /// into the target frame. Intensity and radial velocity are invariant
    /// under rigid motion of the coordinates, so `attr` is copied.
    pub fn transformed(&self, pose: &Pose3, frame: CloudFrame) -> PointCloud {
        let r = pose.rotation();
        PointCloud {
            modality: self.modality,
            frame,
            points: self.points.iter().map(|&p| r.mul_vec(p) + pose.position).collect(),
            attr: self.attr.clone(),
            mask: self.mask.clone(),
        }
    }

    /// Number of weather-injected points.
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy without the weather-injected points: the clean-geometry part of a
    /// corrupted cloud (attenuation effects on surviving points remain).
    pub fn without_masked(&self) -> PointCloud {
        let mut out = PointCloud::empty(self.modality, self.frame);
        for i in 0..self.len() {
            if !self.mask[i] {
                out.push(self.points[i], self.attr[i], false);
            }
        }
        out
    }
}

/// Spinning LiDAR parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub channels: usize,
    /// Vertical field of view, degrees, low to high.
    pub vfov_deg: [f64; 2],
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    /// Gaussian sigma added along the ray, meters.
    pub range_noise_std: f64,
    pub ground_reflectivity: f64,
    pub obstacle_reflectivity: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            channels: 64,
            vfov_deg: [-25.0, 2.0],
            azimuth_step_deg: 0.2,
            max_range: 120.0,
            range_noise_std: 0.02,
            ground_reflectivity: 0.2,
            obstacle_reflectivity: 0.45,
        }
    }
}

impl LidarConfig {
    fn validate(&self) -> Result<(), SensingError> {
        let bad = |m: &str| Err(SensingError::InvalidConfig(m.into()));
        if self.channels == 0 {
            return bad("lidar needs at least one channel");
        }
        if !(self.azimuth_step_deg > 0.0 && self.azimuth_step_deg <= 360.0) {
            return bad("azimuth step must lie in (0, 360]");
        }
        if !(self.max_range > 0.0) {
            return bad("max range must be positive");
        }
        if self.range_noise_std < 0.0 {
            return bad("range noise must be non-negative");
        }
        if self.vfov_deg[0] > self.vfov_deg[1] {
            return bad("vertical fov must be ordered low..high");
        }
        Ok(())
    }
}

/// Forward 4D radar parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarConfig {
    /// Full horizontal field of view, degrees, centered on the mount x axis.
    pub hfov_deg: f64,
    /// Full vertical field of view, degrees.
    pub vfov_deg: f64,
    pub azimuth_step_deg: f64,
    pub elevation_step_deg: f64,
    pub max_range: f64,
    /// Probability that a geometric hit is actually reported.
    pub detection_prob: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        RadarConfig {
            hfov_deg: 120.0,
            vfov_deg: 30.0,
            azimuth_step_deg: 1.0,
            elevation_step_deg: 3.0,
            max_range: 150.0,
            detection_prob: 0.35,
        }
    }
}

impl RadarConfig {
    fn validate(&self) -> Result<(), SensingError> {
        let bad = |m: &str| Err(SensingError::InvalidConfig(m.into()));
        if !(self.hfov_deg > 0.0 && self.hfov_deg <= 360.0 && self.vfov_deg > 0.0) {
            return bad("radar fov must be positive");
        }
        if !(self.azimuth_step_deg > 0.0 && self.elevation_step_deg > 0.0) {
            return bad("angular steps must be positive");
        }
        if !(self.max_range > 0.0) {
            return bad("max range must be positive");
        }
        if !(0.0..=1.0).contains(&self.detection_prob) {
            return bad("detection probability must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A surface hit along a ray.
struct Hit {
    t: f64,
    /// Outward unit normal in world coordinates.
    normal: Vec3,
    /// Index into `SceneFrame::actors`, or `None` for static geometry.
    actor: Option<usize>,
    reflectivity: f64,
}

/// Slab intersection of a world-space ray with an upright yawed box.
/// Returns the entry distance and the face normal.
fn ray_box(origin: Vec3, dir: Vec3, b: &Box3) -> Option<(f64, Vec3)> {
    let (s, c) = (math::sin(b.yaw), math::cos(b.yaw));
    let rel = origin - b.center;
    // Rotate into the box frame (inverse yaw).
    let o = Vec3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
    let d = Vec3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
    let half = [0.5 * b.size.x, 0.5 * b.size.y, 0.5 * b.size.z];
    let ob = [o.x, o.y, o.z];
    let db = [d.x, d.y, d.z];

    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = 0usize;
    let mut enter_sign = 1.0;
    for i in 0..3 {
        if math::abs(db[i]) < 1e-12 {
            if math::abs(ob[i]) > half[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / db[i];
        let mut t1 = (-half[i] - ob[i]) * inv;
        let mut t2 = (half[i] - ob[i]) * inv;
        let mut sign = -1.0; // entering through the -face
        if t1 > t2 {
            core::mem::swap(&mut t1, &mut t2);
            sign = 1.0;
        }
        if t1 > t_enter {
            t_enter = t1;
            enter_axis = i;
            enter_sign = sign;
        }
        t_exit = t_exit.min(t2);
    }
    if t_exit < t_enter || t_enter <= 1e-6 {
        return None;
    }
    // Face normal back in world coordinates.
    let local = match enter_axis {
        0 => Vec3::new(enter_sign, 0.0, 0.0),
        1 => Vec3::new(0.0, enter_sign, 0.0),
        _ => Vec3::new(0.0, 0.0, enter_sign),
    };
    let world = Vec3::new(c * local.x - s * local.y, s * local.x + c * local.y, local.z);
    Some((t_enter, world))
}

/// Nearest surface along a world ray, or nothing within `max_range`.
fn trace_ray(
    origin: Vec3,
    dir: Vec3,
    scn: &Scenario,
    frame: &SceneFrame,
    max_range: f64,
    with_ground: bool,
    ground_reflectivity: f64,
    obstacle_reflectivity: f64,
) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |hit: Hit| {
        if hit.t <= max_range && best.as_ref().map_or(true, |b| hit.t < b.t) {
            best = Some(hit);
        }
    };

    if with_ground && dir.z < -1e-12 && origin.z > 0.0 {
        consider(Hit {
            t: -origin.z / dir.z,
            normal: Vec3::new(0.0, 0.0, 1.0),
            actor: None,
            reflectivity: ground_reflectivity,
        });
    }
    for (i, a) in frame.actors.iter().enumerate() {
        if let Some((t, normal)) = ray_box(origin, dir, &a.bbox) {
            consider(Hit { t, normal, actor: Some(i), reflectivity: scn.actors[i].reflectivity });
        }
    }
    for ob in &scn.obstacles {
        if let Some((t, normal)) = ray_box(origin, dir, ob) {
            consider(Hit { t, normal, actor: None, reflectivity: obstacle_reflectivity });
        }
    }
    best
}

/// World pose of an agent's LiDAR at this frame.
pub fn lidar_pose(scn: &Scenario, frame: &SceneFrame, agent: usize) -> Pose3 {
    frame.agents[agent].pose.compose(&scn.agents[agent].lidar_mount)
}

/// World pose of an agent's radar at this frame.
pub fn radar_pose(scn: &Scenario, frame: &SceneFrame, agent: usize) -> Pose3 {
    frame.agents[agent].pose.compose(&scn.agents[agent].radar_mount)
}

/// Casts one full LiDAR sweep for `agent`. Points come back in that agent's
/// LiDAR frame; identical inputs and seed reproduce the cloud bit for bit.
pub fn raycast_lidar(
    scn: &Scenario,
    frame: &SceneFrame,
    agent: usize,
    cfg: &LidarConfig,
    seed: u64,
) -> Result<PointCloud, SensingError> {
    cfg.validate()?;
    if agent >= frame.agents.len() {
        return Err(SensingError::UnknownAgent(agent));
    }
    let pose = lidar_pose(scn, frame, agent);
    let rot = pose.rotation();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cloud = PointCloud::empty(Modality::Lidar, CloudFrame::Sensor { agent });

    let n_az = (360.0 / cfg.azimuth_step_deg) as usize;
    let deg = core::f64::consts::PI / 180.0;
    for ch in 0..cfg.channels {
        let el = if cfg.channels == 1 {
            0.5 * (cfg.vfov_deg[0] + cfg.vfov_deg[1])
        } else {
            cfg.vfov_deg[0]
                + (cfg.vfov_deg[1] - cfg.vfov_deg[0]) * ch as f64 / (cfg.channels - 1) as f64
        } * deg;
        let (sel, cel) = (math::sin(el), math::cos(el));
        for j in 0..n_az {
            let az = j as f64 * cfg.azimuth_step_deg * deg;
            let local = Vec3::new(cel * math::cos(az), cel * math::sin(az), sel);
            let world_dir = rot.mul_vec(local);
            let Some(hit) = trace_ray(
                pose.position,
                world_dir,
                scn,
                frame,
                cfg.max_range,
                scn.ground,
                cfg.ground_reflectivity,
                cfg.obstacle_reflectivity,
            ) else {
                continue;
            };
            let noise: f64 = rng.sample(StandardNormal);
            let r = hit.t + cfg.range_noise_std * noise;
            if r <= 0.0 {
                continue;
            }
            let incidence = math::abs(world_dir.dot(hit.normal));
            let intensity = math::round(hit.reflectivity * incidence * 255.0).clamp(0.0, 255.0);
            cloud.push(local.scaled(r), intensity, false);
        }
    }
    Ok(cloud)
}

/// Casts one radar frame for `agent`: forward angular grid, Bernoulli
/// detection, radial relative velocity. Points are converted into the same
/// agent's LiDAR frame before being returned.
pub fn raycast_radar(
    scn: &Scenario,
    frame: &SceneFrame,
    agent: usize,
    cfg: &RadarConfig,
    seed: u64,
) -> Result<PointCloud, SensingError> {
    cfg.validate()?;
    if agent >= frame.agents.len() {
        return Err(SensingError::UnknownAgent(agent));
    }
    let pose = radar_pose(scn, frame, agent);
    let rot = pose.rotation();
    let sensor_vel = frame.agents[agent].velocity;
    // radar frame -> lidar frame, so returned points line up with the LiDAR.
    let to_lidar = scn.agents[agent]
        .lidar_mount
        .inverse()
        .compose(&scn.agents[agent].radar_mount);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cloud = PointCloud::empty(Modality::Radar, CloudFrame::Sensor { agent });
    let deg = core::f64::consts::PI / 180.0;
    let n_az = (cfg.hfov_deg / cfg.azimuth_step_deg) as usize + 1;
    let n_el = (cfg.vfov_deg / cfg.elevation_step_deg) as usize + 1;
    for ei in 0..n_el {
        let el = (-0.5 * cfg.vfov_deg + ei as f64 * cfg.elevation_step_deg) * deg;
        let (sel, cel) = (math::sin(el), math::cos(el));
        for ai in 0..n_az {
            let az = (-0.5 * cfg.hfov_deg + ai as f64 * cfg.azimuth_step_deg) * deg;
            let local = Vec3::new(cel * math::cos(az), cel * math::sin(az), sel);
            let world_dir = rot.mul_vec(local);
            // Radar sees through fog and snow but not through walls; ground
            // clutter is filtered before this interface.
            let Some(hit) = trace_ray(
                pose.position,
                world_dir,
                scn,
                frame,
                cfg.max_range,
                false,
                0.0,
                1.0,
            ) else {
                continue;
            };
            if rng.random::<f64>() >= cfg.detection_prob {
                continue;
            }
            let target_vel = hit.actor.map_or(Vec3::ZERO, |i| frame.actors[i].velocity);
            let radial = (target_vel - sensor_vel).dot(world_dir);
            let in_radar = local.scaled(hit.t);
            cloud.push(to_lidar.transform_point(in_radar), radial, false);
        }
    }
    Ok(cloud)
}
