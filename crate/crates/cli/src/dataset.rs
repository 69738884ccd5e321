//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   splits.yaml                train/test scenario name lists
//!   weather.yaml               which weather domain the clouds carry
//!   scenario_0000/
//!     agent_0/
//!       calib.yaml             role plus body-to-sensor mounts
//!       lidar/0000.pcd         x y z intensity, LiDAR sensor frame
//!       radar/0000.pcd         x y z velocity, same LiDAR frame
//!       labels/0000.yaml       lidar world pose, height, gt boxes
//! ```
//!
//! Radar clouds are stored in the agent's LiDAR frame so one calibration
//! pose serves both files. Label boxes are in the same frame, ready to be
//! detection targets when that agent acts as ego. Frame indices must be
//! dense from zero; import verifies that and names the offending path on
//! any gap or parse failure.

use crate::pcd::{read_pcd_as, write_pcd};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use v2x_core::geometry::{Box3, Pose3};
use v2x_core::scene::AgentRole;
use v2x_core::sensing::{Modality, PointCloud};

/// Per-agent sensor calibration, stored once per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCalib {
    pub role: AgentRole,
    pub lidar_mount: Pose3,
    pub radar_mount: Pose3,
}

/// Per-frame annotation for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub index: usize,
    /// World pose of the LiDAR at this frame (ground truth).
    pub lidar_pose: Pose3,
    /// Sensor height above the road, meters.
    pub lidar_height: f64,
    /// Ground-truth boxes in this agent's LiDAR frame.
    pub boxes: Vec<Box3>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherTag {
    /// `normal`, `fog`, or `snow`.
    pub domain: String,
}

/// Everything one agent contributes to one imported frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub agent: usize,
    pub role: AgentRole,
    pub lidar: PointCloud,
    pub radar: PointCloud,
    pub lidar_pose: Pose3,
    pub lidar_height: f64,
    pub boxes: Vec<Box3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub scenario: String,
    pub frame: usize,
    pub agents: Vec<AgentRecord>,
}

pub fn scenario_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scenario_{index:04}"))
}

pub fn agent_dir(scenario: &Path, agent: usize) -> PathBuf {
    scenario.join(format!("agent_{agent}"))
}

fn frame_file(dir: &Path, kind: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(kind).join(format!("{index:04}.{ext}"))
}

fn write_yaml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let doc = serde_yaml::to_string(value)
        .with_context(|| format!("encoding {}", path.display()))?;
    std::fs::write(path, doc).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_yaml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let doc =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_yaml::from_str(&doc).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_splits(root: &Path, splits: &Splits) -> Result<()> {
    write_yaml(splits, &root.join("splits.yaml"))
}

pub fn read_splits(root: &Path) -> Result<Splits> {
    read_yaml(&root.join("splits.yaml"))
}

pub fn write_weather_tag(root: &Path, domain: &str) -> Result<()> {
    write_yaml(&WeatherTag { domain: domain.to_string() }, &root.join("weather.yaml"))
}

pub fn read_weather_tag(root: &Path) -> Result<WeatherTag> {
    read_yaml(&root.join("weather.yaml"))
}

pub fn write_calib(agent_dir: &Path, calib: &AgentCalib) -> Result<()> {
    write_yaml(calib, &agent_dir.join("calib.yaml"))
}

/// Writes one agent-frame triple: both clouds and the label.
pub fn write_frame(
    agent_dir: &Path,
    index: usize,
    lidar: &PointCloud,
    radar: &PointCloud,
    label: &FrameLabel,
) -> Result<()> {
    for sub in ["lidar", "radar", "labels"] {
        std::fs::create_dir_all(agent_dir.join(sub))
            .with_context(|| format!("creating {}", agent_dir.join(sub).display()))?;
    }
    write_pcd(lidar, &frame_file(agent_dir, "lidar", index, "pcd"))?;
    write_pcd(radar, &frame_file(agent_dir, "radar", index, "pcd"))?;
    write_yaml(label, &frame_file(agent_dir, "labels", index, "yaml"))
}

/// Sorted scenario directory names under a dataset root.
pub fn list_scenarios(root: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let entries =
        std::fs::read_dir(root).with_context(|| format!("listing {}", root.display()))?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_dir() && name.starts_with("scenario_") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn list_agents(scenario: &Path) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    let entries =
        std::fs::read_dir(scenario).with_context(|| format!("listing {}", scenario.display()))?;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("agent_") {
            if entry.file_type()?.is_dir() {
                ids.push(
                    id.parse::<usize>()
                        .with_context(|| format!("bad agent directory name {name:?}"))?,
                );
            }
        }
    }
    ids.sort_unstable();
    if ids.is_empty() {
        bail!("{}: no agent directories", scenario.display());
    }
    for (want, got) in ids.iter().enumerate() {
        if want != *got {
            bail!("{}: agent indices must be dense, missing agent_{want}", scenario.display());
        }
    }
    Ok(ids)
}

fn frame_count(agent: &Path) -> Result<usize> {
    let labels = agent.join("labels");
    let entries =
        std::fs::read_dir(&labels).with_context(|| format!("listing {}", labels.display()))?;
    Ok(entries.count())
}

/// Loads every frame of one scenario. Frame indices must be dense and
/// agree across agents and file kinds.
pub fn import_scenario(root: &Path, name: &str) -> Result<Vec<FrameRecord>> {
    let dir = root.join(name);
    let agents = list_agents(&dir)?;
    let n_frames = frame_count(&agent_dir(&dir, 0))?;
    if n_frames == 0 {
        bail!("{}: agent_0 has no labeled frames", dir.display());
    }
    let mut frames = Vec::with_capacity(n_frames);
    let mut calibs = Vec::with_capacity(agents.len());
    for &a in &agents {
        let adir = agent_dir(&dir, a);
        let got = frame_count(&adir)?;
        if got != n_frames {
            bail!(
                "{}: has {got} labeled frames while agent_0 has {n_frames}",
                adir.display()
            );
        }
        calibs.push(read_yaml::<AgentCalib>(&adir.join("calib.yaml"))?);
    }
    for f in 0..n_frames {
        let mut records = Vec::with_capacity(agents.len());
        for &a in &agents {
            let adir = agent_dir(&dir, a);
            let label: FrameLabel = read_yaml(&frame_file(&adir, "labels", f, "yaml"))?;
            if label.index != f {
                bail!(
                    "{}: declares index {} but sits at frame {f}",
                    frame_file(&adir, "labels", f, "yaml").display(),
                    label.index
                );
            }
            let lidar = read_pcd_as(&frame_file(&adir, "lidar", f, "pcd"), Modality::Lidar)?;
            let radar = read_pcd_as(&frame_file(&adir, "radar", f, "pcd"), Modality::Radar)?;
            records.push(AgentRecord {
                agent: a,
                role: calibs[a].role,
                lidar,
                radar,
                lidar_pose: label.lidar_pose,
                lidar_height: label.lidar_height,
                boxes: label.boxes,
            });
        }
        frames.push(FrameRecord { scenario: name.to_string(), frame: f, agents: records });
    }
    Ok(frames)
}

/// Loads the named scenarios, or every scenario when `names` is `None`.
pub fn import_dataset(root: &Path, names: Option<&[String]>) -> Result<Vec<FrameRecord>> {
    let owned;
    let names = match names {
        Some(n) => n,
        None => {
            owned = list_scenarios(root)?;
            &owned
        }
    };
    let mut all = Vec::new();
    for name in names {
        all.extend(import_scenario(root, name)?);
    }
    if all.is_empty() {
        bail!("{}: dataset holds no frames", root.display());
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use v2x_core::geometry::Vec3;
    use v2x_core::sensing::CloudFrame;

    fn cloud(modality: Modality, agent: usize, n: usize) -> PointCloud {
        let mut c = PointCloud::empty(modality, CloudFrame::Sensor { agent });
        for i in 0..n {
            c.points.push(Vec3::new(i as f64 * 0.5, 1.0 - i as f64, 0.25));
            c.attr.push(i as f64 * 3.0);
            c.mask.push(false);
        }
        c
    }

    fn label(index: usize) -> FrameLabel {
        FrameLabel {
            index,
            lidar_pose: Pose3::flat(1.5, -2.25, 1.9, 0.3),
            lidar_height: 1.9,
            boxes: vec![
                Box3::new(Vec3::new(10.123456, -3.5, 0.75), Vec3::new(4.2, 1.9, 1.6), 0.7071),
            ],
        }
    }

    fn export_small(root: &Path, scenarios: usize, agents: usize, frames: usize) {
        for s in 0..scenarios {
            let sdir = scenario_dir(root, s);
            for a in 0..agents {
                let adir = agent_dir(&sdir, a);
                std::fs::create_dir_all(&adir).unwrap();
                write_calib(
                    &adir,
                    &AgentCalib {
                        role: if a == 0 { AgentRole::Ego } else { AgentRole::Cav },
                        lidar_mount: Pose3::flat(0.0, 0.0, 1.9, 0.0),
                        radar_mount: Pose3::flat(1.2, 0.0, 1.2, 0.0),
                    },
                )
                .unwrap();
                for f in 0..frames {
                    write_frame(
                        &adir,
                        f,
                        &cloud(Modality::Lidar, a, 5),
                        &cloud(Modality::Radar, a, 2),
                        &label(f),
                    )
                    .unwrap();
                }
            }
        }
    }

    #[test]
    fn export_obeys_the_file_count_law() {
        let dir = tempfile::tempdir().unwrap();
        export_small(dir.path(), 1, 2, 3);
        let count = |kind: &str| {
            let mut n = 0;
            for a in 0..2 {
                let d = agent_dir(&scenario_dir(dir.path(), 0), a).join(kind);
                n += std::fs::read_dir(d).unwrap().count();
            }
            n
        };
        assert_eq!(count("lidar"), 6);
        assert_eq!(count("radar"), 6);
        assert_eq!(count("labels"), 6);
    }

    #[test]
    fn import_reproduces_boxes_and_poses() {
        let dir = tempfile::tempdir().unwrap();
        export_small(dir.path(), 2, 2, 3);
        let frames = import_dataset(dir.path(), None).unwrap();
        assert_eq!(frames.len(), 6);
        let rec = &frames[0].agents[1];
        assert_eq!(rec.role, AgentRole::Cav);
        let want = label(0);
        assert_eq!(rec.lidar_pose, want.lidar_pose);
        let (got, exp) = (&rec.boxes[0], &want.boxes[0]);
        assert!((got.center.x - exp.center.x).abs() < 1e-6);
        assert!((got.yaw - exp.yaw).abs() < 1e-6);
        // Clouds come back at f32 precision in the declared frame.
        assert_eq!(rec.lidar.frame, CloudFrame::Sensor { agent: 1 });
        assert_eq!(rec.lidar.len(), 5);
    }

    #[test]
    fn scenario_listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        export_small(dir.path(), 3, 1, 1);
        std::fs::create_dir(dir.path().join("not_a_scenario")).unwrap();
        let names = list_scenarios(dir.path()).unwrap();
        assert_eq!(names, vec!["scenario_0000", "scenario_0001", "scenario_0002"]);
    }

    #[test]
    fn corrupted_label_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        export_small(dir.path(), 1, 1, 2);
        let victim = agent_dir(&scenario_dir(dir.path(), 0), 0).join("labels/0001.yaml");
        std::fs::write(&victim, "boxes: [not, a, label").unwrap();
        let err = import_dataset(dir.path(), None).unwrap_err();
        assert!(format!("{err:#}").contains("0001.yaml"), "{err:#}");
    }

    #[test]
    fn frame_gaps_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        export_small(dir.path(), 1, 2, 3);
        let adir = agent_dir(&scenario_dir(dir.path(), 0), 1);
        std::fs::remove_file(adir.join("labels/0002.yaml")).unwrap();
        let err = import_dataset(dir.path(), None).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("agent_1"), "{msg}");
    }

    #[test]
    fn splits_and_weather_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let splits = Splits {
            train: vec!["scenario_0000".into()],
            test: vec!["scenario_0001".into()],
        };
        write_splits(dir.path(), &splits).unwrap();
        assert_eq!(read_splits(dir.path()).unwrap(), splits);
        write_weather_tag(dir.path(), "fog").unwrap();
        assert_eq!(read_weather_tag(dir.path()).unwrap().domain, "fog");
    }
}
