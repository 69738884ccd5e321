//! Fog and snow corruption for LiDAR point clouds.
//!
//! Both models act per point on a sensor-frame cloud and mark every point
//! they inject with `mask = true` so later stages can tell real surface
//! returns from weather clutter.
//!
//! Fog attenuates each return's intensity by `exp(-2 * alpha * range)` (the
//! beam crosses the medium twice). Returns that fall below the detection
//! floor are either replaced by a near-range backscatter point on the same
//! ray, with probability `1 - exp(-alpha * range)`, or dropped.
//!
//! Snow models airborne particles with density `snowfall_rate /
//! terminal_velocity`. A ray is intercepted early with probability
//! `1 - exp(-density * beam_divergence * range)`; intercepted returns
//! relocate to one of `num_intervals` equal slices of the ray (midpoint of
//! the chosen slice, so relocated range is always strictly below the
//! original) with a random low intensity. Surviving returns keep their
//! position and lose a little intensity.
//!
//! Radar clouds are deliberately rejected: millimeter-wave radar is treated
//! as weather-immune here, which is the asymmetry the fusion stack exploits.

use crate::math;
use crate::sensing::{Modality, PointCloud};
use alloc::string::String;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeatherError {
    InvalidConfig(String),
    /// Corruption is defined for LiDAR clouds only.
    UnsupportedModality,
}

impl core::fmt::Display for WeatherError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            WeatherError::InvalidConfig(m) => write!(f, "invalid weather config: {m}"),
            WeatherError::UnsupportedModality => {
                write!(f, "weather corruption applies to lidar clouds only")
            }
        }
    }
}

impl core::error::Error for WeatherError {}

/// How the fog detection floor is derived from the config scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseVariant {
    /// Floor = `noise * gamma * max_intensity` (the default calibration).
    Gamma,
    /// Floor = `noise`, read directly in intensity units; a much harsher
    /// cutoff kept for compatibility with configs that use it.
    V2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FogConfig {
    /// Receiver sensitivity scale applied to `max_intensity`.
    pub gamma: f64,
    /// Extinction coefficient, 1/m. 0.06 is a dense fog.
    pub alpha: f64,
    /// Noise scale: backscatter points draw intensity from U(0, noise) and
    /// the detection floor is built from it (see `noise_variant`).
    pub noise: f64,
    /// Range band for backscatter points, meters, low..high.
    pub r_noise: [f64; 2],
    pub max_intensity: f64,
    pub noise_variant: NoiseVariant,
}

impl Default for FogConfig {
    fn default() -> Self {
        FogConfig {
            gamma: 1e-6,
            alpha: 0.06,
            noise: 10.0,
            r_noise: [1.0, 20.0],
            max_intensity: 255.0,
            noise_variant: NoiseVariant::Gamma,
        }
    }
}

impl FogConfig {
    /// Minimum received intensity that still registers as a return.
    pub fn detection_floor(&self) -> f64 {
        match self.noise_variant {
            NoiseVariant::Gamma => self.noise * self.gamma * self.max_intensity,
            NoiseVariant::V2 => self.noise,
        }
    }

    fn validate(&self) -> Result<(), WeatherError> {
        let bad = |m: &str| Err(WeatherError::InvalidConfig(m.into()));
        if self.alpha < 0.0 {
            return bad("alpha must be non-negative");
        }
        if !(self.r_noise[0] > 0.0 && self.r_noise[0] <= self.r_noise[1]) {
            return bad("r_noise bounds must be positive and ordered");
        }
        if self.gamma < 0.0 || self.noise < 0.0 {
            return bad("gamma and noise must be non-negative");
        }
        if !(self.max_intensity > 0.0) {
            return bad("max_intensity must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnowConfig {
    /// Precipitation rate; particle density is snowfall_rate / terminal_velocity.
    pub snowfall_rate: f64,
    /// Fall speed of the particles, m/s.
    pub terminal_velocity: f64,
    /// Relocated points draw intensity from U(0, noise_floor * max_intensity).
    pub noise_floor: f64,
    /// Beam cross-section term in the interception probability, rad.
    pub beam_divergence: f64,
    /// The ray is split into this many equal slices for relocation.
    pub num_intervals: u32,
    /// Fix the relocation slice; `None` draws it uniformly from
    /// 1..=num_intervals per intercepted point.
    pub interval_index: Option<u32>,
    pub max_intensity: f64,
}

impl Default for SnowConfig {
    fn default() -> Self {
        SnowConfig {
            snowfall_rate: 0.5,
            terminal_velocity: 0.2,
            noise_floor: 0.7,
            beam_divergence: 0.003,
            num_intervals: 64,
            interval_index: None,
            max_intensity: 255.0,
        }
    }
}

impl SnowConfig {
    fn validate(&self) -> Result<(), WeatherError> {
        let bad = |m: &str| Err(WeatherError::InvalidConfig(m.into()));
        if self.snowfall_rate < 0.0 {
            return bad("snowfall_rate must be non-negative");
        }
        if !(self.terminal_velocity > 0.0) {
            return bad("terminal_velocity must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise_floor) {
            return bad("noise_floor must lie in [0, 1]");
        }
        if self.beam_divergence < 0.0 {
            return bad("beam_divergence must be non-negative");
        }
        if self.num_intervals == 0 {
            return bad("num_intervals must be at least 1");
        }
        if let Some(k) = self.interval_index {
            if k == 0 || k > self.num_intervals {
                return bad("interval_index must lie in 1..=num_intervals");
            }
        }
        if !(self.max_intensity > 0.0) {
            return bad("max_intensity must be positive");
        }
        Ok(())
    }
}

fn expect_lidar(cloud: &PointCloud) -> Result<(), WeatherError> {
    if cloud.modality != Modality::Lidar {
        return Err(WeatherError::UnsupportedModality);
    }
    Ok(())
}

/// Fog corruption. Surviving points keep their position with attenuated
/// intensity; sub-floor returns either become masked near-range backscatter
/// on the same ray or vanish. Deterministic in (cloud, cfg, seed).
pub fn apply_fog(
    cloud: &PointCloud,
    cfg: &FogConfig,
    seed: u64,
) -> Result<PointCloud, WeatherError> {
    cfg.validate()?;
    expect_lidar(cloud)?;
    let floor = cfg.detection_floor();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = PointCloud::empty(cloud.modality, cloud.frame);
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        let r = p.norm();
        if r <= 0.0 {
            continue;
        }
        let attenuated = cloud.attr[i] * math::exp(-2.0 * cfg.alpha * r);
        if attenuated >= floor {
            out.points.push(p);
            out.attr.push(attenuated);
            out.mask.push(cloud.mask[i]);
            continue;
        }
        // Lost to the medium: maybe the fog itself answers instead.
        let p_backscatter = 1.0 - math::exp(-cfg.alpha * r);
        if rng.random::<f64>() < p_backscatter {
            let rs = rng.random_range(cfg.r_noise[0]..=cfg.r_noise[1]);
            let intensity = rng.random_range(0.0..=cfg.noise);
            out.points.push(p.scaled(rs / r));
            out.attr.push(intensity);
            out.mask.push(true);
        }
    }
    Ok(out)
}

/// Snow corruption. Intercepted rays return early from a particle in one of
/// `num_intervals` slices; the rest keep their position with mild
/// attenuation. Deterministic in (cloud, cfg, seed).
pub fn apply_snow(
    cloud: &PointCloud,
    cfg: &SnowConfig,
    seed: u64,
) -> Result<PointCloud, WeatherError> {
    cfg.validate()?;
    expect_lidar(cloud)?;
    let density = cfg.snowfall_rate / cfg.terminal_velocity;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = PointCloud::empty(cloud.modality, cloud.frame);
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        let r = p.norm();
        if r <= 0.0 {
            continue;
        }
        let p_early = 1.0 - math::exp(-density * cfg.beam_divergence * r);
        if rng.random::<f64>() < p_early {
            let k = match cfg.interval_index {
                Some(k) => k,
                None => rng.random_range(1..=cfg.num_intervals),
            };
            // Midpoint of slice k, which is always strictly inside the ray.
            let rs = r * (k as f64 - 0.5) / cfg.num_intervals as f64;
            let intensity = rng.random_range(0.0..=cfg.noise_floor * cfg.max_intensity);
            out.points.push(p.scaled(rs / r));
            out.attr.push(intensity);
            out.mask.push(true);
        } else {
            let keep = math::exp(-0.002 * density * r);
            out.points.push(p);
            out.attr.push(cloud.attr[i] * keep);
            out.mask.push(cloud.mask[i]);
        }
    }
    Ok(out)
}
