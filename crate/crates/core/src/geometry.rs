//! Rigid transforms and oriented boxes.
//!
//! World and sensor frames are right-handed with z up. A [`Pose3`] stores a
//! translation plus intrinsic yaw/pitch/roll (applied as Rz * Ry * Rx), which
//! keeps ground-vehicle poses readable: yaw carries almost all of the
//! rotation, pitch and roll stay near zero. Detection boxes ([`Box3`]) are
//! upright and carry yaw only.
//!
//! Overlap between rotated boxes is computed exactly: the footprints are
//! convex quads, so the intersection footprint comes from Sutherland-Hodgman
//! clipping, and the vertical extent is a plain interval overlap.

use crate::math;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Geometry failure modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryError {
    /// A box with a non-positive extent was handed to a volume or overlap query.
    DegenerateBox,
}

impl core::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GeometryError::DegenerateBox => write!(f, "box has a non-positive extent"),
        }
    }
}

impl core::error::Error for GeometryError {}

/// Three-component vector, also used for sizes and velocities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    #[inline]
    pub fn norm(self) -> f64 {
        math::sqrt(self.dot(self))
    }

    /// Length of the ground-plane projection.
    #[inline]
    pub fn norm_xy(self) -> f64 {
        math::hypot(self.x, self.y)
    }

    #[inline]
    pub fn scaled(self, s: f64) -> Vec3 {
        Vec3 { x: self.x * s, y: self.y * s, z: self.z * s }
    }

    /// Unit vector in the same direction; zero stays zero.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self.scaled(1.0 / n)
        } else {
            self
        }
    }
}

impl core::ops::Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl core::ops::Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl core::ops::Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub m: [[f64; 3]; 3],
}

impl Mat3 {
    pub fn identity() -> Self {
        Mat3 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    /// Intrinsic Rz(yaw) * Ry(pitch) * Rx(roll).
    pub fn from_euler(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sy, cy) = (math::sin(yaw), math::cos(yaw));
        let (sp, cp) = (math::sin(pitch), math::cos(pitch));
        let (sr, cr) = (math::sin(roll), math::cos(roll));
        Mat3 {
            m: [
                [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
                [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
                [-sp, cp * sr, cp * cr],
            ],
        }
    }

    #[inline]
    pub fn transpose(&self) -> Mat3 {
        let m = &self.m;
        Mat3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3 {
            x: m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            y: m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            z: m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        }
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        Mat3 { m: r }
    }

    /// Recovers (yaw, pitch, roll) for the Rz * Ry * Rx convention.
    pub fn to_euler(&self) -> (f64, f64, f64) {
        let m = &self.m;
        let pitch = math::asin((-m[2][0]).clamp(-1.0, 1.0));
        // Gimbal lock (|pitch| = 90 deg) cannot arise from vehicle poses; fall
        // back to a yaw-only split there anyway so the result stays finite.
        if math::abs(m[2][0]) > 1.0 - 1e-12 {
            let yaw = math::atan2(-m[0][1], m[1][1]);
            (yaw, pitch, 0.0)
        } else {
            let yaw = math::atan2(m[1][0], m[0][0]);
            let roll = math::atan2(m[2][1], m[2][2]);
            (yaw, pitch, roll)
        }
    }
}

/// Rigid transform: rotation (yaw/pitch/roll) followed by translation.
///
/// `transform_point` maps local coordinates into the parent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub position: Vec3,
    pub yaw: f64,
    #[serde(default)]
    pub pitch: f64,
    #[serde(default)]
    pub roll: f64,
}

impl Default for Pose3 {
    fn default() -> Self {
        Pose3::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Pose3 { position: Vec3::ZERO, yaw: 0.0, pitch: 0.0, roll: 0.0 }
    }

    pub fn new(position: Vec3, yaw: f64, pitch: f64, roll: f64) -> Self {
        Pose3 { position, yaw, pitch, roll }
    }

    /// Ground-vehicle constructor: position plus heading.
    pub fn flat(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose3 { position: Vec3::new(x, y, z), yaw, pitch: 0.0, roll: 0.0 }
    }

    pub fn rotation(&self) -> Mat3 {
        Mat3::from_euler(self.yaw, self.pitch, self.roll)
    }

    /// Local -> parent.
    #[inline]
    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.rotation().mul_vec(p) + self.position
    }

    /// Parent -> local.
    #[inline]
    pub fn inverse_transform_point(&self, p: Vec3) -> Vec3 {
        self.rotation().transpose().mul_vec(p - self.position)
    }

    /// Rotates a direction without translating it (velocities, ray directions).
    #[inline]
    pub fn rotate_dir(&self, d: Vec3) -> Vec3 {
        self.rotation().mul_vec(d)
    }

    /// `self` then `child`: the pose of `child` expressed in `self`'s parent.
    pub fn compose(&self, child: &Pose3) -> Pose3 {
        let r = self.rotation().mul_mat(&child.rotation());
        let (yaw, pitch, roll) = r.to_euler();
        Pose3 { position: self.transform_point(child.position), yaw, pitch, roll }
    }

    pub fn inverse(&self) -> Pose3 {
        let rt = self.rotation().transpose();
        let (yaw, pitch, roll) = rt.to_euler();
        Pose3 { position: rt.mul_vec(-self.position), yaw, pitch, roll }
    }
}

/// Applies `pose` to every point (local -> parent).
pub fn transform_points(pose: &Pose3, points: &[Vec3]) -> Vec<Vec3> {
    let r = pose.rotation();
    points.iter().map(|&p| r.mul_vec(p) + pose.position).collect()
}

/// Upright oriented box: center, extents (length along local x, width along
/// local y, height along z) and heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
}

impl Box3 {
    pub fn new(center: Vec3, size: Vec3, yaw: f64) -> Self {
        Box3 { center, size, yaw }
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    fn is_degenerate(&self) -> bool {
        !(self.size.x > 0.0 && self.size.y > 0.0 && self.size.z > 0.0)
    }

    /// Footprint corners in the parent frame, counter-clockwise.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = (math::sin(self.yaw), math::cos(self.yaw));
        let hx = 0.5 * self.size.x;
        let hy = 0.5 * self.size.y;
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        let mut out = [[0.0; 2]; 4];
        for (o, l) in out.iter_mut().zip(local.iter()) {
            o[0] = self.center.x + c * l[0] - s * l[1];
            o[1] = self.center.y + s * l[0] + c * l[1];
        }
        out
    }

    /// Vertical interval `[bottom, top]`.
    pub fn z_interval(&self) -> (f64, f64) {
        let h = 0.5 * self.size.z;
        (self.center.z - h, self.center.z + h)
    }

    /// Point containment, boundary inclusive.
    pub fn contains(&self, p: Vec3) -> bool {
        let d = p - self.center;
        let (s, c) = (math::sin(self.yaw), math::cos(self.yaw));
        let lx = c * d.x + s * d.y;
        let ly = -s * d.x + c * d.y;
        math::abs(lx) <= 0.5 * self.size.x
            && math::abs(ly) <= 0.5 * self.size.y
            && math::abs(d.z) <= 0.5 * self.size.z
    }

    /// The eight corners in the parent frame.
    pub fn corners(&self) -> [Vec3; 8] {
        let bev = self.corners_bev();
        let (lo, hi) = self.z_interval();
        let mut out = [Vec3::ZERO; 8];
        for i in 0..4 {
            out[i] = Vec3::new(bev[i][0], bev[i][1], lo);
            out[i + 4] = Vec3::new(bev[i][0], bev[i][1], hi);
        }
        out
    }
}

/// Vertices closer than this collapse to one point when polygons are clipped;
/// it also pads the inside test so shared edges do not flicker.
const CLIP_EPS: f64 = 1e-12;

fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * math::abs(acc)
}

fn dedup_vertices(pts: &mut Vec<[f64; 2]>) {
    let mut i = 0;
    while pts.len() >= 2 && i < pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        if math::abs(a[0] - b[0]) < CLIP_EPS && math::abs(a[1] - b[1]) < CLIP_EPS {
            pts.remove((i + 1) % pts.len());
        } else {
            i += 1;
        }
    }
}

/// Clips convex polygon `subject` by the half-plane left of `a -> b`.
fn clip_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(subject.len() + 1);
    let ex = b[0] - a[0];
    let ey = b[1] - a[1];
    let side = |p: [f64; 2]| ex * (p[1] - a[1]) - ey * (p[0] - a[0]);
    for i in 0..subject.len() {
        let cur = subject[i];
        let nxt = subject[(i + 1) % subject.len()];
        let sc = side(cur);
        let sn = side(nxt);
        if sc >= -CLIP_EPS {
            out.push(cur);
        }
        if (sc > CLIP_EPS && sn < -CLIP_EPS) || (sc < -CLIP_EPS && sn > CLIP_EPS) {
            let t = sc / (sc - sn);
            out.push([cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])]);
        }
    }
    out
}

/// Exact area of the intersection of two box footprints.
fn bev_intersection_area(a: &Box3, b: &Box3) -> f64 {
    let clip = b.corners_bev();
    let mut poly: Vec<[f64; 2]> = a.corners_bev().to_vec();
    for i in 0..4 {
        if poly.len() < 3 {
            return 0.0;
        }
        poly = clip_edge(&poly, clip[i], clip[(i + 1) % 4]);
    }
    dedup_vertices(&mut poly);
    polygon_area(&poly)
}

/// Volumetric intersection-over-union of two upright oriented boxes.
///
/// Exact up to floating point: polygon clipping in the ground plane times an
/// interval overlap in z. Returns an error for non-positive extents.
pub fn iou_3d(a: &Box3, b: &Box3) -> Result<f64, GeometryError> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    let area = bev_intersection_area(a, b);
    let (alo, ahi) = a.z_interval();
    let (blo, bhi) = b.z_interval();
    let dz = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Footprint-only intersection-over-union, ignoring the vertical extents.
pub fn iou_bev(a: &Box3, b: &Box3) -> Result<f64, GeometryError> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    let inter = bev_intersection_area(a, b);
    let ua = a.size.x * a.size.y;
    let ub = b.size.x * b.size.y;
    Ok((inter / (ua + ub - inter)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    /// Monte-Carlo overlap estimate: sample uniformly inside `a`, measure the
    /// fraction landing in `b`. Slow but assumption-free; the exact routine is
    /// checked against it.
    fn iou_monte_carlo(a: &Box3, b: &Box3, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        for _ in 0..samples {
            let local = Vec3::new(
                (rng.random::<f64>() - 0.5) * a.size.x,
                (rng.random::<f64>() - 0.5) * a.size.y,
                (rng.random::<f64>() - 0.5) * a.size.z,
            );
            let (s, c) = (a.yaw.sin(), a.yaw.cos());
            let world = Vec3::new(
                a.center.x + c * local.x - s * local.y,
                a.center.y + s * local.x + c * local.y,
                a.center.z + local.z,
            );
            if b.contains(world) {
                hits += 1;
            }
        }
        let inter = a.volume() * hits as f64 / samples as f64;
        inter / (a.volume() + b.volume() - inter)
    }

    fn random_box(rng: &mut ChaCha12Rng) -> Box3 {
        Box3::new(
            Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.0..1.0),
            ),
            Vec3::new(
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..3.0),
            ),
            rng.random_range(-core::f64::consts::PI..core::f64::consts::PI),
        )
    }

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = Box3::new(Vec3::new(3.0, -1.0, 0.5), Vec3::new(4.2, 1.8, 1.5), 0.7);
        approx(iou_3d(&b, &b).unwrap(), 1.0, 1e-12);
    }

    #[test]
    fn axis_aligned_overlap_matches_closed_form() {
        let a = Box3::new(Vec3::ZERO, Vec3::new(2.0, 2.0, 2.0), 0.0);
        let b = Box3::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 2.0, 2.0), 0.0);
        // Overlap 1 x 2 x 2 = 4, union 12.
        approx(iou_3d(&a, &b).unwrap(), 4.0 / 12.0, 1e-12);
    }

    #[test]
    fn rotation_by_quarter_turn_is_footprint_symmetry() {
        let a = Box3::new(Vec3::ZERO, Vec3::new(3.0, 3.0, 1.0), 0.0);
        let b = Box3::new(Vec3::ZERO, Vec3::new(3.0, 3.0, 1.0), core::f64::consts::FRAC_PI_2);
        approx(iou_3d(&a, &b).unwrap(), 1.0, 1e-9);
    }

    #[test]
    fn nested_box_iou_is_volume_ratio() {
        let outer = Box3::new(Vec3::ZERO, Vec3::new(4.0, 4.0, 4.0), 0.3);
        let inner = Box3::new(Vec3::ZERO, Vec3::new(2.0, 1.0, 1.0), 1.1);
        approx(iou_3d(&outer, &inner).unwrap(), 2.0 / 64.0, 1e-9);
    }

    #[test]
    fn face_touching_boxes_do_not_overlap() {
        let a = Box3::new(Vec3::ZERO, Vec3::new(2.0, 2.0, 2.0), 0.0);
        let b = Box3::new(Vec3::new(2.0, 0.0, 0.0), Vec3::new(2.0, 2.0, 2.0), 0.0);
        approx(iou_3d(&a, &b).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn vertical_separation_kills_overlap() {
        let a = Box3::new(Vec3::ZERO, Vec3::new(2.0, 2.0, 1.0), 0.4);
        let b = Box3::new(Vec3::new(0.0, 0.0, 5.0), Vec3::new(2.0, 2.0, 1.0), 0.4);
        approx(iou_3d(&a, &b).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        let good = Box3::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), 0.0);
        let flat = Box3::new(Vec3::ZERO, Vec3::new(1.0, 0.0, 1.0), 0.0);
        assert_eq!(iou_3d(&good, &flat), Err(GeometryError::DegenerateBox));
        assert_eq!(iou_3d(&flat, &good), Err(GeometryError::DegenerateBox));
        assert_eq!(iou_bev(&flat, &good), Err(GeometryError::DegenerateBox));
    }

    #[test]
    fn bev_iou_ignores_height() {
        let a = Box3::new(Vec3::ZERO, Vec3::new(2.0, 2.0, 1.0), 0.0);
        let b = Box3::new(Vec3::new(0.0, 0.0, 10.0), Vec3::new(2.0, 2.0, 7.0), 0.0);
        approx(iou_bev(&a, &b).unwrap(), 1.0, 1e-12);
        approx(iou_3d(&a, &b).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn exact_iou_tracks_monte_carlo_sampling() {
        let mut rng = ChaCha12Rng::seed_from_u64(0x0b0e);
        for case in 0..60 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let exact = iou_3d(&a, &b).unwrap();
            let mc = iou_monte_carlo(&a, &b, 200_000, 1000 + case);
            approx(exact, mc, 1e-2);
        }
    }

    #[test]
    fn box_corners_are_contained() {
        let b = Box3::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 2.0, 1.5), 0.9);
        for c in b.corners() {
            // Nudge inward so floating point on the boundary cannot flake.
            let inward = c + (b.center - c).scaled(1e-9);
            assert!(b.contains(inward));
        }
        assert!(!b.contains(b.center + Vec3::new(0.0, 0.0, 0.76)));
    }

    proptest! {
        #[test]
        fn rotation_matrices_are_orthonormal(
            yaw in -3.2f64..3.2, pitch in -1.2f64..1.2, roll in -1.2f64..1.2
        ) {
            let r = Mat3::from_euler(yaw, pitch, roll);
            let rrt = r.mul_mat(&r.transpose());
            let id = Mat3::identity();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((rrt.m[i][j] - id.m[i][j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn pose_roundtrip_recovers_points(
            x in -50.0f64..50.0, y in -50.0f64..50.0, z in -10.0f64..10.0,
            yaw in -3.1f64..3.1, pitch in -0.4f64..0.4, roll in -0.4f64..0.4,
            px in -30.0f64..30.0, py in -30.0f64..30.0, pz in -5.0f64..5.0
        ) {
            let pose = Pose3::new(Vec3::new(x, y, z), yaw, pitch, roll);
            let p = Vec3::new(px, py, pz);
            let back = pose.inverse_transform_point(pose.transform_point(p));
            prop_assert!((back - p).norm() < 1e-9);
            // The explicit inverse pose must agree with the inverse transform.
            let via_inverse = pose.inverse().transform_point(pose.transform_point(p));
            prop_assert!((via_inverse - p).norm() < 1e-9);
        }

        #[test]
        fn compose_matches_sequential_application(
            ax in -20.0f64..20.0, ay in -20.0f64..20.0, ayaw in -3.1f64..3.1,
            bx in -20.0f64..20.0, by in -20.0f64..20.0, byaw in -3.1f64..3.1,
            bp in -0.3f64..0.3, br in -0.3f64..0.3,
            px in -10.0f64..10.0, py in -10.0f64..10.0, pz in -3.0f64..3.0
        ) {
            let a = Pose3::flat(ax, ay, 0.3, ayaw);
            let b = Pose3::new(Vec3::new(bx, by, 0.0), byaw, bp, br);
            let p = Vec3::new(px, py, pz);
            let direct = a.compose(&b).transform_point(p);
            let nested = a.transform_point(b.transform_point(p));
            prop_assert!((direct - nested).norm() < 1e-9);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            cx in -3.0f64..3.0, cy in -3.0f64..3.0,
            yaw_a in -3.1f64..3.1, yaw_b in -3.1f64..3.1,
            lx in 0.5f64..4.0, ly in 0.5f64..4.0, lz in 0.5f64..3.0
        ) {
            let a = Box3::new(Vec3::ZERO, Vec3::new(lx, ly, lz), yaw_a);
            let b = Box3::new(Vec3::new(cx, cy, 0.0), Vec3::new(ly, lx, lz), yaw_b);
            let ab = iou_3d(&a, &b).unwrap();
            let ba = iou_3d(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
