//! Report files: metrics as JSON and CSV, detections as JSON lines.
//!
//! Every writer here is deterministic: fixed field order, `Display`
//! float formatting, one trailing newline. Identical inputs produce
//! byte-identical files, which is itself an acceptance requirement.

use anyhow::{Context, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;
use v2x_core::comms::CommReport;
use v2x_core::detection::Detection;
use v2x_core::evaluation::{EvalReport, OccupancyBin, PrPoint};
use v2x_core::training::EpochStats;

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut doc = serde_json::to_string_pretty(value).context("encoding JSON")?;
    doc.push('\n');
    std::fs::write(path, doc).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_text(doc: String, path: &Path) -> Result<()> {
    std::fs::write(path, doc).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `domain,iou,ap,frames,gt_boxes,detections` rows, one per domain and
/// IoU threshold.
pub fn eval_report_csv(report: &EvalReport) -> String {
    let mut out = String::from("domain,iou,ap,frames,gt_boxes,detections\n");
    for d in &report.domains {
        for (iou, ap) in report.ious.iter().zip(&d.ap) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                d.domain, iou, ap, d.frames, d.gt_boxes, d.detections
            );
        }
    }
    out
}

pub fn write_eval_report(report: &EvalReport, dir: &Path) -> Result<()> {
    write_json(report, &dir.join("report.json"))?;
    write_text(eval_report_csv(report), &dir.join("report.csv"))
}

/// `mode,bin_lo,bin_hi,boxes,occupied,rate,mean_points` rows for the
/// ego-only and cooperative passes.
pub fn occupancy_csv(ego: &[OccupancyBin], coop: &[OccupancyBin]) -> String {
    let mut out = String::from("mode,bin_lo,bin_hi,boxes,occupied,rate,mean_points\n");
    for (mode, bins) in [("ego", ego), ("cooperative", coop)] {
        for b in bins {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                mode,
                b.range[0],
                b.range[1],
                b.boxes,
                b.occupied,
                b.rate(),
                b.mean_points
            );
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct OccupancyReport<'a> {
    pub ego: &'a [OccupancyBin],
    pub cooperative: &'a [OccupancyBin],
}

pub fn write_occupancy(ego: &[OccupancyBin], coop: &[OccupancyBin], dir: &Path) -> Result<()> {
    write_json(&OccupancyReport { ego, cooperative: coop }, &dir.join("occupancy.json"))?;
    write_text(occupancy_csv(ego, coop), &dir.join("occupancy.csv"))
}

/// `epoch,frames,total,cls,loc,denoising` rows.
pub fn loss_curve_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,frames,total,cls,loc,denoising\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.epoch, s.frames, s.total, s.cls, s.loc, s.denoising
        );
    }
    out
}

pub fn write_loss_curve(stats: &[EpochStats], path: &Path) -> Result<()> {
    write_text(loss_curve_csv(stats), path)
}

/// Per-frame link table: `frame,sender,elements,volume_log2,latency_ms`,
/// then one `total` row per frame.
pub fn comm_csv(reports: &[(usize, CommReport)]) -> String {
    let mut out = String::from("frame,sender,elements,volume_log2,latency_ms\n");
    for (frame, r) in reports {
        for l in &r.links {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                frame, l.sender, l.elements, l.volume_log2, l.latency_ms
            );
        }
        let _ = writeln!(
            out,
            "{},total,{},{},{}",
            frame, r.total_elements, r.total_volume_log2, r.total_latency_ms
        );
    }
    out
}

pub fn write_comm_table(reports: &[(usize, CommReport)], dir: &Path) -> Result<()> {
    let frames: Vec<serde_json::Value> = reports
        .iter()
        .map(|(frame, r)| {
            serde_json::json!({
                "frame": frame,
                "report": r,
            })
        })
        .collect();
    write_json(&frames, &dir.join("comm.json"))?;
    write_text(comm_csv(reports), &dir.join("comm.csv"))
}

/// One detection per line: `{"frame":..,"score":..,"box":{..}}`.
pub fn detections_jsonl(frames: &[(usize, Vec<Detection>)]) -> Result<String> {
    let mut out = String::new();
    for (frame, dets) in frames {
        for d in dets {
            let line = serde_json::json!({
                "frame": frame,
                "score": d.score,
                "box": d.bbox,
            });
            let _ = writeln!(out, "{line}");
        }
    }
    Ok(out)
}

pub fn write_detections(frames: &[(usize, Vec<Detection>)], path: &Path) -> Result<()> {
    write_text(detections_jsonl(frames)?, path)
}

/// `recall,precision,score` rows for one PR curve.
pub fn pr_curve_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("recall,precision,score\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.recall, p.precision, p.score);
    }
    out
}

pub fn write_pr_curve(points: &[PrPoint], path: &Path) -> Result<()> {
    write_text(pr_curve_csv(points), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use v2x_core::evaluation::DomainReport;

    #[test]
    fn eval_csv_rows_follow_domain_and_iou_order() {
        let report = EvalReport {
            ious: vec![0.3, 0.5],
            domains: vec![
                DomainReport {
                    domain: "normal".into(),
                    ap: vec![0.9, 0.8],
                    frames: 10,
                    gt_boxes: 40,
                    detections: 40,
                },
                DomainReport {
                    domain: "fog".into(),
                    ap: vec![0.7, 0.5],
                    frames: 10,
                    gt_boxes: 40,
                    detections: 38,
                },
            ],
            comm: None,
        };
        let csv = eval_report_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "normal,0.3,0.9,10,40,40");
        assert_eq!(lines[4], "fog,0.5,0.5,10,40,38");
    }

    #[test]
    fn writers_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let stats = vec![EpochStats {
            epoch: 0,
            frames: 3,
            total: 1.25,
            cls: 1.0,
            loc: 0.125,
            denoising: 0.125,
        }];
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_loss_curve(&stats, &a).unwrap();
        write_loss_curve(&stats, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn detection_lines_parse_back_as_json() {
        use v2x_core::geometry::{Box3, Vec3};
        let frames = vec![(
            4usize,
            vec![Detection {
                bbox: Box3::new(Vec3::new(1.0, 2.0, 0.5), Vec3::new(4.0, 2.0, 1.5), 0.2),
                score: 0.75,
            }],
        )];
        let doc = detections_jsonl(&frames).unwrap();
        let line: serde_json::Value = serde_json::from_str(doc.lines().next().unwrap()).unwrap();
        assert_eq!(line["frame"], 4);
        assert_eq!(line["score"], 0.75);
        assert!(line["box"]["center"].is_object() || line["box"]["center"].is_array());
    }
}
