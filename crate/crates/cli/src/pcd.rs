//! ASCII PCD v0.7 point-cloud files.
//!
//! LiDAR clouds carry the fields `x y z intensity`, radar clouds
//! `x y z velocity`; the field list is how a reader tells the modalities
//! apart. Values are stored as 32-bit floats printed in their shortest
//! round-trip form, so reading a file back yields bit-identical `f32`
//! values and re-writing an imported file reproduces it byte for byte.
//!
//! The PCD header has no notion of a coordinate frame, so the frame tag
//! rides in a comment line (`# frame sensor 3`, `# frame ego`,
//! `# frame world`) that this module writes and parses; files from other
//! tools default to the world frame. Corruption masks are runtime
//! metadata and are not persisted.

use anyhow::{bail, Context, Result};
use std::fmt::Write as _;
use std::path::Path;
use v2x_core::geometry::Vec3;
use v2x_core::sensing::{CloudFrame, Modality, PointCloud};

const LIDAR_FIELDS: &str = "x y z intensity";
const RADAR_FIELDS: &str = "x y z velocity";

fn frame_comment(frame: CloudFrame) -> String {
    match frame {
        CloudFrame::Sensor { agent } => format!("# frame sensor {agent}"),
        CloudFrame::Ego => "# frame ego".to_string(),
        CloudFrame::World => "# frame world".to_string(),
    }
}

fn parse_frame_comment(line: &str) -> Option<CloudFrame> {
    let rest = line.strip_prefix("# frame ")?.trim();
    if rest == "ego" {
        return Some(CloudFrame::Ego);
    }
    if rest == "world" {
        return Some(CloudFrame::World);
    }
    let agent = rest.strip_prefix("sensor ")?.trim().parse().ok()?;
    Some(CloudFrame::Sensor { agent })
}

/// Renders a cloud as an ASCII PCD document.
pub fn pcd_to_string(cloud: &PointCloud) -> Result<String> {
    let fields = match cloud.modality {
        Modality::Lidar => LIDAR_FIELDS,
        Modality::Radar => RADAR_FIELDS,
    };
    let n = cloud.len();
    let mut out = String::with_capacity(256 + 40 * n);
    out.push_str("# .PCD v0.7 - Point Cloud Data file format\n");
    out.push_str(&frame_comment(cloud.frame));
    out.push('\n');
    out.push_str("VERSION 0.7\n");
    let _ = writeln!(out, "FIELDS {fields}");
    out.push_str("SIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\n");
    let _ = writeln!(out, "WIDTH {n}");
    out.push_str("HEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\n");
    let _ = writeln!(out, "POINTS {n}");
    out.push_str("DATA ascii\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let a = cloud.attr[i];
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && a.is_finite()) {
            bail!("point {i} has non-finite coordinates or attribute");
        }
        let _ = writeln!(out, "{} {} {} {}", p.x as f32, p.y as f32, p.z as f32, a as f32);
    }
    Ok(out)
}

pub fn write_pcd(cloud: &PointCloud, path: &Path) -> Result<()> {
    let doc = pcd_to_string(cloud)
        .with_context(|| format!("encoding point cloud for {}", path.display()))?;
    std::fs::write(path, doc).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Parses an ASCII PCD document. The modality comes from the field list.
pub fn pcd_from_str(doc: &str) -> Result<PointCloud> {
    let mut lines = doc.lines().enumerate();
    let mut frame = CloudFrame::World;
    let mut modality = None;
    let mut declared_points: Option<usize> = None;
    let mut width: Option<usize> = None;
    let mut saw_data = false;
    let mut data_start = 0usize;

    for (ln, line) in lines.by_ref() {
        let line = line.trim_end();
        if line.starts_with('#') {
            if let Some(f) = parse_frame_comment(line) {
                frame = f;
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let rest = line[key.len()..].trim();
        match key {
            "VERSION" => {
                if rest != "0.7" {
                    bail!("line {}: unsupported PCD version {rest:?}", ln + 1);
                }
            }
            "FIELDS" => {
                modality = Some(match rest {
                    LIDAR_FIELDS => Modality::Lidar,
                    RADAR_FIELDS => Modality::Radar,
                    other => bail!(
                        "line {}: unrecognized field list {other:?} (expected {LIDAR_FIELDS:?} or {RADAR_FIELDS:?})",
                        ln + 1
                    ),
                });
            }
            "SIZE" | "TYPE" | "COUNT" | "HEIGHT" | "VIEWPOINT" => {}
            "WIDTH" => {
                width = Some(rest.parse().with_context(|| format!("line {}: bad WIDTH", ln + 1))?)
            }
            "POINTS" => {
                declared_points =
                    Some(rest.parse().with_context(|| format!("line {}: bad POINTS", ln + 1))?)
            }
            "DATA" => {
                if rest != "ascii" {
                    bail!("line {}: only ascii DATA is supported, got {rest:?}", ln + 1);
                }
                saw_data = true;
                data_start = ln + 1;
                break;
            }
            other => bail!("line {}: unexpected header entry {other:?}", ln + 1),
        }
    }
    if !saw_data {
        bail!("malformed header: no DATA line");
    }
    let Some(modality) = modality else {
        bail!("malformed header: no FIELDS line");
    };
    let Some(declared) = declared_points else {
        bail!("malformed header: no POINTS line");
    };
    if let Some(w) = width {
        if w != declared {
            bail!("WIDTH {w} disagrees with POINTS {declared}");
        }
    }

    let mut cloud = PointCloud::empty(modality, frame);
    cloud.frame = frame;
    let mut points = Vec::with_capacity(declared);
    let mut attr = Vec::with_capacity(declared);
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 4 {
            bail!("line {}: expected 4 values, found {}", ln + 1, vals.len());
        }
        let mut parsed = [0.0f32; 4];
        for (slot, v) in parsed.iter_mut().zip(&vals) {
            *slot = v.parse().with_context(|| format!("line {}: bad float {v:?}", ln + 1))?;
        }
        points.push(Vec3::new(parsed[0] as f64, parsed[1] as f64, parsed[2] as f64));
        attr.push(parsed[3] as f64);
    }
    if points.len() != declared {
        bail!(
            "POINTS declares {declared} but the data section (from line {}) holds {}",
            data_start + 1,
            points.len()
        );
    }
    let n = points.len();
    cloud.points = points;
    cloud.attr = attr;
    cloud.mask = vec![false; n];
    Ok(cloud)
}

pub fn read_pcd(path: &Path) -> Result<PointCloud> {
    let doc =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    pcd_from_str(&doc).with_context(|| format!("parsing {}", path.display()))
}

/// Reads a cloud and insists on its modality, e.g. a radar file read where
/// LiDAR is expected fails loudly instead of feeding velocities to an
/// intensity pipeline.
pub fn read_pcd_as(path: &Path, modality: Modality) -> Result<PointCloud> {
    let cloud = read_pcd(path)?;
    if cloud.modality != modality {
        bail!(
            "{}: expected a {modality:?} cloud but the fields declare {:?}",
            path.display(),
            cloud.modality
        );
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lidar_cloud() -> PointCloud {
        PointCloud {
            modality: Modality::Lidar,
            frame: CloudFrame::Sensor { agent: 2 },
            points: vec![
                Vec3::new(1.25, -3.5, 0.125),
                Vec3::new(10.062, 4.75, -1.1),
                Vec3::new(0.0, 0.0, 0.0),
            ],
            attr: vec![17.0, 250.0, 0.0],
            mask: vec![false; 3],
        }
    }

    #[test]
    fn lidar_round_trip_is_exact_at_f32() {
        let c = lidar_cloud();
        let doc = pcd_to_string(&c).unwrap();
        let back = pcd_from_str(&doc).unwrap();
        assert_eq!(back.modality, Modality::Lidar);
        assert_eq!(back.frame, c.frame);
        assert_eq!(back.len(), 3);
        for i in 0..3 {
            assert_eq!(back.points[i].x, c.points[i].x as f32 as f64);
            assert_eq!(back.points[i].y, c.points[i].y as f32 as f64);
            assert_eq!(back.points[i].z, c.points[i].z as f32 as f64);
            assert_eq!(back.attr[i], c.attr[i] as f32 as f64);
        }
        // Re-encoding the imported cloud reproduces the document exactly.
        assert_eq!(pcd_to_string(&back).unwrap(), doc);
    }

    #[test]
    fn empty_cloud_round_trips() {
        let c = PointCloud::empty(Modality::Radar, CloudFrame::Ego);
        let doc = pcd_to_string(&c).unwrap();
        assert!(doc.contains("POINTS 0"));
        assert!(doc.contains("FIELDS x y z velocity"));
        let back = pcd_from_str(&doc).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn modality_expectations_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("radar.pcd");
        let mut c = PointCloud::empty(Modality::Radar, CloudFrame::Sensor { agent: 0 });
        c.points.push(Vec3::new(1.0, 2.0, 0.5));
        c.attr.push(-3.5);
        c.mask.push(false);
        write_pcd(&c, &path).unwrap();
        assert_eq!(read_pcd_as(&path, Modality::Radar).unwrap().len(), 1);
        let err = read_pcd_as(&path, Modality::Lidar).unwrap_err();
        assert!(err.to_string().contains("expected a Lidar cloud"), "{err}");
    }

    #[test]
    fn malformed_documents_are_rejected_with_line_numbers() {
        let c = lidar_cloud();
        let doc = pcd_to_string(&c).unwrap();
        let truncated = doc.rsplit_once('\n').unwrap().0.rsplit_once('\n').unwrap().0;
        let err = pcd_from_str(truncated).unwrap_err();
        assert!(format!("{err:#}").contains("POINTS declares 3"), "{err:#}");

        let bad_fields = doc.replace("x y z intensity", "x y z rgb");
        assert!(pcd_from_str(&bad_fields).is_err());

        let short_row = doc.replace("1.25 -3.5 0.125 17", "1.25 -3.5 0.125");
        let err = pcd_from_str(&short_row).unwrap_err();
        assert!(format!("{err:#}").contains("expected 4 values"), "{err:#}");

        assert!(pcd_from_str("DATA ascii\n").is_err());
    }

    #[test]
    fn non_finite_points_refuse_to_serialize() {
        let mut c = lidar_cloud();
        c.points[1].z = f64::NAN;
        assert!(pcd_to_string(&c).is_err());
    }

    #[test]
    fn unmarked_files_default_to_the_world_frame() {
        let c = lidar_cloud();
        let doc = pcd_to_string(&c).unwrap();
        let stripped: String =
            doc.lines().filter(|l| !l.starts_with("# frame")).collect::<Vec<_>>().join("\n");
        let back = pcd_from_str(&stripped).unwrap();
        assert_eq!(back.frame, CloudFrame::World);
    }
}
