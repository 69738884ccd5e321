//! Parametric scene generation and per-frame ground truth.
//!
//! A scenario is a small stretch of two-way road: lanes parallel to the x
//! axis, vehicles (actors) driving or parked on them, box obstacles off to
//! the sides, and two to five sensing agents: the ego vehicle, cooperating
//! vehicles, and optionally a roadside unit on a tall mast. Everything is
//! sampled deterministically from a seed, and ground truth at any frame is a
//! pure function of the scenario, so two builds from the same config and seed
//! agree exactly.
//!
//! Agents are sensor platforms only; they do not carry collision boxes and do
//! not appear among the detection targets. Actors are the targets.

use crate::geometry::{iou_3d, Box3, Pose3, Vec3};
use crate::math;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SceneError {
    /// A config field failed validation; the message names it.
    InvalidConfig(String),
    /// Could not place an actor without overlap within the retry budget.
    PlacementFailed { actor: usize },
}

impl core::fmt::Display for SceneError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SceneError::InvalidConfig(m) => write!(f, "invalid scenario config: {m}"),
            SceneError::PlacementFailed { actor } => {
                write!(f, "could not place actor {actor} without overlap")
            }
        }
    }
}

impl core::error::Error for SceneError {}

/// What a sensing agent is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Ego,
    Cav,
    Rsu,
}

/// Piecewise-linear path traversed at constant speed. A single waypoint (or
/// zero speed) means the object never moves; once the path is exhausted the
/// object stops at the final waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Vec3>,
    pub speed: f64,
    /// Heading used while stationary; moving objects face along their path.
    #[serde(default)]
    pub base_yaw: f64,
}

impl Trajectory {
    pub fn fixed(p: Vec3, yaw: f64) -> Self {
        Trajectory { waypoints: alloc::vec![p], speed: 0.0, base_yaw: yaw }
    }

    fn total_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Position, heading and velocity at time `t`.
    pub fn sample(&self, t: f64) -> (Vec3, f64, Vec3) {
        if self.waypoints.len() < 2 || self.speed <= 0.0 {
            return (self.waypoints[0], self.base_yaw, Vec3::ZERO);
        }
        let total = self.total_length();
        let arrived = self.speed * t >= total;
        let mut s = (self.speed * t).clamp(0.0, total);
        let n = self.waypoints.len();
        for i in 0..n - 1 {
            let a = self.waypoints[i];
            let seg = self.waypoints[i + 1] - a;
            let len = seg.norm();
            if s <= len || i == n - 2 {
                let dir = if len > 0.0 { seg.scaled(1.0 / len) } else { Vec3::ZERO };
                let pos = a + dir.scaled(s.min(len));
                let yaw = if len > 0.0 { math::atan2(dir.y, dir.x) } else { self.base_yaw };
                let vel = if arrived { Vec3::ZERO } else { dir.scaled(self.speed) };
                return (pos, yaw, vel);
            }
            s -= len;
        }
        unreachable!("loop always returns on the final segment")
    }
}

/// A sensing platform: where its body sits over time and where the two
/// sensors are bolted on (poses relative to the body origin, which rides at
/// ground level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role: AgentRole,
    pub trajectory: Trajectory,
    pub lidar_mount: Pose3,
    pub radar_mount: Pose3,
}

/// A detection target: an upright box following a trajectory. Waypoints are
/// box-center ground positions; the box floats at half its height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSpec {
    pub size: Vec3,
    pub trajectory: Trajectory,
    /// Surface reflectivity seen by the LiDAR intensity model.
    pub reflectivity: f64,
}

/// Fully-instantiated scene, ready to be sampled per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub agents: Vec<AgentSpec>,
    pub actors: Vec<ActorSpec>,
    /// Static occluders (masts, walls, parked trailers off the road).
    pub obstacles: Vec<Box3>,
    /// Whether the ground plane z = 0 returns LiDAR hits.
    pub ground: bool,
    pub n_frames: usize,
    pub period: f64,
}

/// Agent body pose and velocity at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub role: AgentRole,
    pub pose: Pose3,
    pub velocity: Vec3,
}

/// Actor box (world frame) and velocity at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorState {
    pub bbox: Box3,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub index: usize,
    pub time: f64,
    pub agents: Vec<AgentState>,
    pub actors: Vec<ActorState>,
}

/// Half-open ranges used all over the generator config.
pub type Range2 = [f64; 2];

/// Knobs for the procedural road scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub frames: usize,
    /// Seconds between frames.
    pub period: f64,
    /// Total sensing agents including ego, 2 to 5.
    pub agents: usize,
    /// Replace the last cooperating vehicle by a roadside unit on a mast.
    pub rsu: bool,
    pub actors: usize,
    /// Fraction of actors that are parked (speed zero).
    pub parked_ratio: f64,
    /// Lane center y coordinates; negative-y lanes head +x, positive-y -x.
    pub lanes: Vec<f64>,
    /// Actor start positions along x.
    pub x_range: Range2,
    pub speed_range: Range2,
    pub actor_length: Range2,
    pub actor_width: Range2,
    pub actor_height: Range2,
    pub actor_reflectivity: f64,
    /// Probability that a moving actor changes lanes mid-path.
    pub lane_change_prob: f64,
    pub obstacles: usize,
    /// Obstacles sit at |y| inside this band, clear of the lanes.
    pub obstacle_band: Range2,
    pub obstacle_length: Range2,
    pub obstacle_width: Range2,
    pub obstacle_height: Range2,
    pub ground: bool,
    pub ego_speed: f64,
    /// CAV start positions along x.
    pub cav_x_range: Range2,
    /// LiDAR mount height on vehicles.
    pub lidar_height: f64,
    /// Radar mount height on vehicles (slightly forward, lower).
    pub radar_height: f64,
    /// Mast height for the roadside unit's sensors.
    pub rsu_mast_height: f64,
    /// Roadside unit x position.
    pub rsu_x: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            frames: 10,
            period: 0.1,
            agents: 3,
            rsu: true,
            actors: 10,
            parked_ratio: 0.2,
            lanes: alloc::vec![-20.0, -12.0, -4.0, 4.0, 12.0, 20.0],
            x_range: [8.0, 120.0],
            speed_range: [3.0, 12.0],
            actor_length: [3.8, 5.3],
            actor_width: [1.7, 2.1],
            actor_height: [1.4, 1.9],
            actor_reflectivity: 0.5,
            lane_change_prob: 0.3,
            obstacles: 4,
            obstacle_band: [26.0, 38.0],
            obstacle_length: [6.0, 14.0],
            obstacle_width: [4.0, 8.0],
            obstacle_height: [3.0, 6.0],
            ground: true,
            ego_speed: 8.0,
            cav_x_range: [12.0, 60.0],
            lidar_height: 1.9,
            radar_height: 1.2,
            rsu_mast_height: 4.5,
            rsu_x: 55.0,
        }
    }
}

impl ScenarioConfig {
    fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.into()));
        if self.frames == 0 {
            return bad("frames must be at least 1");
        }
        if !(self.period > 0.0) {
            return bad("period must be positive");
        }
        if !(2..=5).contains(&self.agents) {
            return bad("agents must lie in 2..=5");
        }
        if self.lanes.is_empty() {
            return bad("at least one lane is required");
        }
        for (name, r) in [
            ("x_range", self.x_range),
            ("speed_range", self.speed_range),
            ("actor_length", self.actor_length),
            ("actor_width", self.actor_width),
            ("actor_height", self.actor_height),
            ("obstacle_band", self.obstacle_band),
            ("obstacle_length", self.obstacle_length),
            ("obstacle_width", self.obstacle_width),
            ("obstacle_height", self.obstacle_height),
            ("cav_x_range", self.cav_x_range),
        ] {
            if !(r[0] <= r[1]) {
                return Err(SceneError::InvalidConfig(format!("{name} is not ordered")));
            }
        }
        if self.speed_range[0] < 0.0 || self.actor_length[0] <= 0.0 || self.actor_width[0] <= 0.0
            || self.actor_height[0] <= 0.0
        {
            return bad("sizes must be positive and speeds non-negative");
        }
        if !(0.0..=1.0).contains(&self.parked_ratio) {
            return bad("parked_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

fn sample_range<R: rand::Rng>(rng: &mut R, r: Range2) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Direction of travel for a lane: right-hand traffic along x.
fn lane_heading(lane_y: f64) -> f64 {
    if lane_y < 0.0 {
        0.0
    } else {
        core::f64::consts::PI
    }
}

/// Builds a concrete scene from the config; identical (seed, config) pairs
/// produce identical scenarios.
pub fn build_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let horizon = cfg.frames as f64 * cfg.period;

    let vehicle_mounts = |yaw_fwd: f64| {
        (
            Pose3::flat(0.0, 0.0, cfg.lidar_height, yaw_fwd),
            Pose3::flat(0.8, 0.0, cfg.radar_height, yaw_fwd),
        )
    };

    let mut agents = Vec::new();
    {
        // Ego drives straight down its lane from the origin.
        let (lidar, radar) = vehicle_mounts(0.0);
        let far = cfg.ego_speed * horizon + 20.0;
        agents.push(AgentSpec {
            role: AgentRole::Ego,
            trajectory: Trajectory {
                waypoints: alloc::vec![Vec3::ZERO, Vec3::new(far.max(20.0), 0.0, 0.0)],
                speed: cfg.ego_speed,
                base_yaw: 0.0,
            },
            lidar_mount: lidar,
            radar_mount: radar,
        });
    }
    let n_cavs = cfg.agents - 1 - usize::from(cfg.rsu);
    for _ in 0..n_cavs {
        let lane = cfg.lanes[rng.random_range(0..cfg.lanes.len())];
        let yaw = lane_heading(lane);
        let x = sample_range(&mut rng, cfg.cav_x_range);
        let speed = sample_range(&mut rng, cfg.speed_range);
        let dir = Vec3::new(math::cos(yaw), math::sin(yaw), 0.0);
        let start = Vec3::new(x, lane, 0.0);
        let (lidar, radar) = vehicle_mounts(0.0);
        agents.push(AgentSpec {
            role: AgentRole::Cav,
            trajectory: Trajectory {
                waypoints: alloc::vec![start, start + dir.scaled(speed * horizon + 20.0)],
                speed,
                base_yaw: yaw,
            },
            lidar_mount: lidar,
            radar_mount: radar,
        });
    }
    if cfg.rsu {
        // Mast beside the road, sensors looking back along the corridor.
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let y = side * (cfg.lanes.iter().fold(0.0f64, |m, v| m.max(math::abs(*v))) + 4.0);
        let pos = Vec3::new(cfg.rsu_x, y, 0.0);
        let yaw = if side > 0.0 { -2.5 } else { 2.5 };
        agents.push(AgentSpec {
            role: AgentRole::Rsu,
            trajectory: Trajectory::fixed(pos, yaw),
            lidar_mount: Pose3::flat(0.0, 0.0, cfg.rsu_mast_height, 0.0),
            radar_mount: Pose3::flat(0.0, 0.0, cfg.rsu_mast_height - 0.3, 0.0),
        });
    }

    // Actors, rejection-sampled so the opening frame has no interpenetration.
    let mut actors: Vec<ActorSpec> = Vec::new();
    let mut frame0_boxes: Vec<Box3> = Vec::new();
    for i in 0..cfg.actors {
        let parked = rng.random::<f64>() < cfg.parked_ratio;
        let mut placed = false;
        for _try in 0..100 {
            let size = Vec3::new(
                sample_range(&mut rng, cfg.actor_length),
                sample_range(&mut rng, cfg.actor_width),
                sample_range(&mut rng, cfg.actor_height),
            );
            let lane_idx = rng.random_range(0..cfg.lanes.len());
            let lane = cfg.lanes[lane_idx];
            let yaw = lane_heading(lane);
            let x = sample_range(&mut rng, cfg.x_range);
            let start = Vec3::new(x, lane, 0.0);
            let candidate = Box3::new(start + Vec3::new(0.0, 0.0, size.z * 0.5), size, yaw);
            let clear = frame0_boxes
                .iter()
                .all(|b| iou_3d(b, &candidate).map(|v| v == 0.0).unwrap_or(false));
            if !clear {
                continue;
            }

            let trajectory = if parked {
                Trajectory::fixed(start, yaw)
            } else {
                let speed = sample_range(&mut rng, cfg.speed_range);
                let dir = Vec3::new(math::cos(yaw), math::sin(yaw), 0.0);
                let total = speed * horizon + 20.0;
                let mut waypoints = alloc::vec![start];
                if rng.random::<f64>() < cfg.lane_change_prob && cfg.lanes.len() > 1 {
                    // Drift one lane over partway through, then carry on.
                    let adj = if lane_idx + 1 < cfg.lanes.len()
                        && (cfg.lanes[lane_idx + 1] < 0.0) == (lane < 0.0)
                    {
                        lane_idx + 1
                    } else if lane_idx > 0 && (cfg.lanes[lane_idx - 1] < 0.0) == (lane < 0.0) {
                        lane_idx - 1
                    } else {
                        lane_idx
                    };
                    if adj != lane_idx {
                        let d1 = total * rng.random_range(0.2..0.5);
                        let mid = start + dir.scaled(d1) + Vec3::new(0.0, cfg.lanes[adj] - lane, 0.0);
                        waypoints.push(mid);
                        waypoints.push(mid + dir.scaled(total - d1));
                    } else {
                        waypoints.push(start + dir.scaled(total));
                    }
                } else {
                    waypoints.push(start + dir.scaled(total));
                }
                Trajectory { waypoints, speed, base_yaw: yaw }
            };

            actors.push(ActorSpec { size, trajectory, reflectivity: cfg.actor_reflectivity });
            frame0_boxes.push(candidate);
            placed = true;
            break;
        }
        if !placed {
            return Err(SceneError::PlacementFailed { actor: i });
        }
    }

    // Obstacles live outside the lane band, so they cannot collide with
    // traffic; still checked against frame zero below.
    let mut obstacles = Vec::new();
    for _ in 0..cfg.obstacles {
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let y = side * sample_range(&mut rng, cfg.obstacle_band);
        let x = sample_range(&mut rng, cfg.x_range);
        let size = Vec3::new(
            sample_range(&mut rng, cfg.obstacle_length),
            sample_range(&mut rng, cfg.obstacle_width),
            sample_range(&mut rng, cfg.obstacle_height),
        );
        obstacles.push(Box3::new(Vec3::new(x, y, size.z * 0.5), size, 0.0));
    }
    for ob in &obstacles {
        for b in &frame0_boxes {
            if iou_3d(ob, b).map(|v| v > 0.0).unwrap_or(true) {
                return Err(SceneError::PlacementFailed { actor: usize::MAX });
            }
        }
    }

    Ok(Scenario {
        agents,
        actors,
        obstacles,
        ground: cfg.ground,
        n_frames: cfg.frames,
        period: cfg.period,
    })
}

impl Scenario {
    /// Ground truth at frame `index` (must be `< n_frames`). Velocities are
    /// finite differences of positions over one period: forward differences,
    /// backward at the final frame, so a constant-velocity trajectory reports
    /// the same value everywhere.
    pub fn frame_ground_truth(&self, index: usize) -> SceneFrame {
        assert!(index < self.n_frames, "frame {index} out of {}", self.n_frames);
        let t = index as f64 * self.period;
        let (ta, tb) = if self.n_frames == 1 || index + 1 < self.n_frames {
            (t, t + self.period)
        } else {
            (t - self.period, t)
        };

        let agents = self
            .agents
            .iter()
            .map(|a| {
                let (pos, yaw, _) = a.trajectory.sample(t);
                let (pa, _, _) = a.trajectory.sample(ta);
                let (pb, _, _) = a.trajectory.sample(tb);
                AgentState {
                    role: a.role,
                    pose: Pose3::flat(pos.x, pos.y, pos.z, yaw),
                    velocity: (pb - pa).scaled(1.0 / self.period),
                }
            })
            .collect();

        let actors = self
            .actors
            .iter()
            .map(|a| {
                let (pos, yaw, _) = a.trajectory.sample(t);
                let (pa, _, _) = a.trajectory.sample(ta);
                let (pb, _, _) = a.trajectory.sample(tb);
                ActorState {
                    bbox: Box3::new(pos + Vec3::new(0.0, 0.0, a.size.z * 0.5), a.size, yaw),
                    velocity: (pb - pa).scaled(1.0 / self.period),
                }
            })
            .collect();

        SceneFrame { index, time: t, agents, actors }
    }
}
