//! Synthetic hands, primitive objects, and analytic grasp demonstrations.
//!
//! Hands come from parametric templates (a two-finger planar gripper, a
//! three-finger tripod, and a bare three-link chain used by solver tests),
//! emitted as URDF text plus per-link point clouds so the rest of the
//! pipeline treats them exactly like external assets. Demonstrations are
//! closed-form pinch or tripod grasps on primitive objects: contact points
//! are placed analytically on the surface with an inward approach, joint
//! values come from a planar two-link closed form cross-checked by the
//! module's own IK solver, and every demo is verified by its
//! fingertip-to-surface distance before it is emitted. Everything is
//! deterministic per seed.

use crate::graph::{
    build_link_nodes, GeomEncoderParams, GraphMeta, LinkPoseSource, TroGraph, GEOM_ENCODER_SEED,
};
use crate::kinematics::{forward_kinematics, parse_urdf, KinematicHand, LinkClouds};
use crate::pointcloud::{object_patch_features, PointCloud};
use crate::se3::{self, TransformMatrix};
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Fingertip-to-surface distance below which a demonstration is accepted.
pub const DEMO_SURFACE_TOL: f64 = 2e-3;
/// Points in a generated object cloud.
pub const OBJECT_CLOUD_POINTS: usize = 384;

/// Hand templates the generator knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandTemplate {
    /// Palm plus two opposing two-phalanx fingers: 5 links, 4 revolute
    /// joints, antipodal pinches.
    TwoFingerPlanar,
    /// Palm plus three two-phalanx fingers at 120 degrees: 7 links, 6
    /// revolute joints, tripod grasps on spheres.
    ThreeFingerSpatial,
    /// Palm plus one two-phalanx finger: the minimal 3-link chain used by
    /// solver round-trip tests. No demonstrations.
    ThreeLinkChain,
}

impl HandTemplate {
    pub fn name(self) -> &'static str {
        match self {
            HandTemplate::TwoFingerPlanar => "planar2f",
            HandTemplate::ThreeFingerSpatial => "tripod3f",
            HandTemplate::ThreeLinkChain => "chain3",
        }
    }
}

/// Primitive object shapes, dimensions in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObjectShape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

impl ObjectShape {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ObjectShape::Sphere { radius } => *radius > 0.0 && radius.is_finite(),
            ObjectShape::Box { half_extents } => {
                half_extents.iter().all(|h| *h > 0.0 && h.is_finite())
            }
            ObjectShape::Cylinder { radius, half_height } => {
                *radius > 0.0 && *half_height > 0.0 && radius.is_finite() && half_height.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("object dimensions must be positive: {self:?}")))
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ObjectShape::Sphere { .. } => "sphere",
            ObjectShape::Box { .. } => "box",
            ObjectShape::Cylinder { .. } => "cylinder",
        }
    }

    /// Signed distance from `p` to the surface, negative inside.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            ObjectShape::Sphere { radius } => p.norm() - radius,
            ObjectShape::Box { half_extents } => {
                let q = Vector3::new(
                    p.x.abs() - half_extents[0],
                    p.y.abs() - half_extents[1],
                    p.z.abs() - half_extents[2],
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            ObjectShape::Cylinder { radius, half_height } => {
                let dr = (p.x * p.x + p.y * p.y).sqrt() - radius;
                let dz = p.z.abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                let inside = dr.max(dz).min(0.0);
                outside + inside
            }
        }
    }
}

/// One dataset request: a hand template at some scale, a list of objects,
/// and how many demonstrations to attempt per object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub template: HandTemplate,
    pub scale: f64,
    pub objects: Vec<ObjectShape>,
    pub demos_per_object: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("hand scale must be positive, got {}", self.scale)));
        }
        if self.demos_per_object == 0 {
            return Err(Error::invalid("at least one demo per object is required"));
        }
        if self.objects.is_empty() {
            return Err(Error::invalid("at least one object is required"));
        }
        for o in &self.objects {
            o.validate()?;
        }
        Ok(())
    }
}

/// A fingertip: a link name plus the tip point in that link's local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingertip {
    pub link: String,
    pub offset: [f64; 3],
}

/// A generated hand: the parsed tree, its URDF source, per-link clouds,
/// and the grasp metadata the rest of the pipeline needs.
#[derive(Debug, Clone)]
pub struct SynthHand {
    pub hand: KinematicHand,
    pub urdf: String,
    pub clouds: LinkClouds,
    pub palm_link: String,
    pub fingertips: Vec<Fingertip>,
}

impl SynthHand {
    /// Distance between the first two fingertips at the zero configuration.
    pub fn fingertip_span(&self) -> Result<f64> {
        if self.fingertips.len() < 2 {
            return Err(Error::invalid("hand has fewer than two fingertips"));
        }
        let fk = forward_kinematics(&self.hand, &vec![0.0; self.hand.dof()])?;
        let tip = |f: &Fingertip| -> Result<Vector3<f64>> {
            let idx = self
                .hand
                .link_index(&f.link)
                .ok_or_else(|| Error::validation(format!("fingertip link {:?} missing", f.link)))?;
            let local = Vector3::new(f.offset[0], f.offset[1], f.offset[2]);
            Ok(fk[idx].rotation * local + fk[idx].translation)
        };
        Ok((tip(&self.fingertips[0])? - tip(&self.fingertips[1])?).norm())
    }
}

// Template dimensions at scale 1, meters.
const PALM_HALF: [f64; 3] = [0.03, 0.012, 0.01];
const ROOT_RADIUS: f64 = 0.025;
const ROOT_HEIGHT: f64 = 0.01;
const PROX_LEN: f64 = 0.04;
const DIST_LEN: f64 = 0.03;
const PROX_HALF: [f64; 3] = [0.006, 0.006, 0.02];
const DIST_HALF: [f64; 3] = [0.005, 0.005, 0.015];
const BASE_LIMIT: f64 = 1.9;
const MID_LIMIT: f64 = 2.4;

/// Deterministic surface cloud of an axis-aligned box: an n-by-n grid of
/// cell centers on each face.
fn box_surface_cloud(half: [f64; 3], center: [f64; 3], n: usize) -> PointCloud {
    let mut points = Vec::with_capacity(6 * n * n);
    let grid: Vec<f64> = (0..n).map(|i| -1.0 + (2.0 * i as f64 + 1.0) / n as f64).collect();
    for axis in 0..3 {
        for &side in &[-1.0, 1.0] {
            for &u in &grid {
                for &v in &grid {
                    let mut p = [0.0; 3];
                    p[axis] = side * half[axis];
                    p[(axis + 1) % 3] = u * half[(axis + 1) % 3];
                    p[(axis + 2) % 3] = v * half[(axis + 2) % 3];
                    points.push(Vector3::new(
                        p[0] + center[0],
                        p[1] + center[1],
                        p[2] + center[2],
                    ));
                }
            }
        }
    }
    PointCloud { points }
}

fn finger_urdf(
    out: &mut String,
    prefix: &str,
    parent: &str,
    root: [f64; 3],
    yaw: f64,
    axis: &str,
    s: f64,
) {
    let prox = format!("{prefix}_prox");
    let dist = format!("{prefix}_dist");
    out.push_str(&format!("  <link name=\"{prox}\"/>\n  <link name=\"{dist}\"/>\n"));
    out.push_str(&format!(
        "  <joint name=\"{prefix}_base\" type=\"revolute\">\n    <parent link=\"{parent}\"/>\n    <child link=\"{prox}\"/>\n    <origin xyz=\"{} {} {}\" rpy=\"0 0 {yaw}\"/>\n    <axis xyz=\"{axis}\"/>\n    <limit lower=\"{}\" upper=\"{BASE_LIMIT}\"/>\n  </joint>\n",
        root[0], root[1], root[2], -BASE_LIMIT
    ));
    out.push_str(&format!(
        "  <joint name=\"{prefix}_mid\" type=\"revolute\">\n    <parent link=\"{prox}\"/>\n    <child link=\"{dist}\"/>\n    <origin xyz=\"0 0 {}\" rpy=\"0 0 0\"/>\n    <axis xyz=\"{axis}\"/>\n    <limit lower=\"{}\" upper=\"{MID_LIMIT}\"/>\n  </joint>\n",
        PROX_LEN * s,
        -MID_LIMIT
    ));
}

/// Builds a hand from a template. Deterministic per (template, scale): the
/// link clouds are grid samples of each link's box, scaled uniformly, so a
/// scaled variant has every link length exactly `scale` times the original.
pub fn generate_hand(template: HandTemplate, scale: f64) -> Result<SynthHand> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("hand scale must be positive, got {scale}")));
    }
    let s = scale;
    let name = template.name();
    let mut urdf = format!("<robot name=\"{name}\">\n  <link name=\"palm\"/>\n");
    let mut clouds: LinkClouds = LinkClouds::new();
    let palm_half = [PALM_HALF[0] * s, PALM_HALF[1] * s, PALM_HALF[2] * s];
    clouds.insert("palm".into(), box_surface_cloud(palm_half, [0.0; 3], 6));

    // The two opposed fingers keep identity mount orientation and oppose
    // through negated joint axes instead of a half-turn yaw: a pi yaw
    // would pin every mirrored link pair's relative rotation at exactly a
    // half turn (a half-turn composed with rotations about orthogonal
    // axes stays a half-turn), which the pose logarithm refuses. With
    // identity mounts and +-x axes the singular set is measure zero. The
    // tripod's relative mount yaws are +-2pi/3, never a half turn.
    let finger_roots: Vec<(String, [f64; 3], f64, &str)> = match template {
        HandTemplate::TwoFingerPlanar => vec![
            ("f1".into(), [0.0, ROOT_RADIUS * s, ROOT_HEIGHT * s], 0.0, "1 0 0"),
            ("f2".into(), [0.0, -ROOT_RADIUS * s, ROOT_HEIGHT * s], 0.0, "-1 0 0"),
        ],
        HandTemplate::ThreeFingerSpatial => (0..3)
            .map(|k| {
                let yaw = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                (
                    format!("f{}", k + 1),
                    [ROOT_RADIUS * s * yaw.cos(), ROOT_RADIUS * s * yaw.sin(), ROOT_HEIGHT * s],
                    yaw,
                    "0 1 0",
                )
            })
            .collect(),
        HandTemplate::ThreeLinkChain => {
            vec![("f1".into(), [0.0, ROOT_RADIUS * s, ROOT_HEIGHT * s], 0.0, "1 0 0")]
        }
    };

    let mut fingertips = Vec::new();
    for (prefix, root, yaw, axis) in &finger_roots {
        finger_urdf(&mut urdf, prefix, "palm", *root, *yaw, axis, s);
        let prox_half = [PROX_HALF[0] * s, PROX_HALF[1] * s, PROX_HALF[2] * s];
        let dist_half = [DIST_HALF[0] * s, DIST_HALF[1] * s, DIST_HALF[2] * s];
        clouds.insert(
            format!("{prefix}_prox"),
            box_surface_cloud(prox_half, [0.0, 0.0, PROX_LEN * s / 2.0], 5),
        );
        clouds.insert(
            format!("{prefix}_dist"),
            box_surface_cloud(dist_half, [0.0, 0.0, DIST_LEN * s / 2.0], 5),
        );
        fingertips.push(Fingertip {
            link: format!("{prefix}_dist"),
            offset: [0.0, 0.0, DIST_LEN * s],
        });
    }
    urdf.push_str("</robot>\n");

    let hand = parse_urdf(&urdf)?;
    Ok(SynthHand { hand, urdf, clouds, palm_link: "palm".into(), fingertips })
}

/// Deterministic surface cloud of a primitive object in its own frame.
pub fn sample_object_cloud(shape: &ObjectShape, points: usize) -> Result<PointCloud> {
    shape.validate()?;
    if points < 8 {
        return Err(Error::invalid("object clouds need at least 8 points"));
    }
    let cloud = match shape {
        ObjectShape::Sphere { radius } => {
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            let pts = (0..points)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / points as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * i as f64;
                    Vector3::new(radius * r * phi.cos(), radius * r * phi.sin(), radius * z)
                })
                .collect();
            PointCloud { points: pts }
        }
        ObjectShape::Box { half_extents } => {
            let n = ((points as f64 / 6.0).sqrt().round() as usize).max(2);
            box_surface_cloud(*half_extents, [0.0; 3], n)
        }
        ObjectShape::Cylinder { radius, half_height } => {
            let mut pts = Vec::new();
            let around = 18;
            let along = ((points / (2 * around)).max(3)).min(24);
            for iz in 0..along {
                let z = -half_height + (2.0 * half_height) * (iz as f64 + 0.5) / along as f64;
                for ia in 0..around {
                    let th = 2.0 * std::f64::consts::PI * ia as f64 / around as f64;
                    pts.push(Vector3::new(radius * th.cos(), radius * th.sin(), z));
                }
            }
            for &side in &[-1.0, 1.0] {
                for ring in 0..3 {
                    let rr = radius * (ring as f64 + 1.0) / 3.0;
                    for ia in 0..12 {
                        let th = 2.0 * std::f64::consts::PI * (ia as f64 + 0.5 * ring as f64)
                            / 12.0;
                        pts.push(Vector3::new(
                            rr * th.cos(),
                            rr * th.sin(),
                            side * half_height,
                        ));
                    }
                }
            }
            PointCloud { points: pts }
        }
    };
    Ok(cloud)
}

/// One verified grasp demonstration. The base transform places the hand
/// base in the object frame; `q` is in document joint order.
#[derive(Debug, Clone)]
pub struct GraspDemo {
    pub q: Vec<f64>,
    pub base: TransformMatrix,
    /// Largest fingertip-to-surface distance, meters.
    pub fingertip_error: f64,
}

/// Demos for one object plus the count of attempts that were skipped as
/// unreachable for this hand and object size.
#[derive(Debug, Clone)]
pub struct DemoBatch {
    pub object: PointCloud,
    pub demos: Vec<GraspDemo>,
    pub skipped: usize,
}

/// In-plane description of one finger: the plane holds the palm axis, x is
/// the outward radial coordinate of that finger, z points along the palm
/// normal. Angles follow the URDF joints (rotation about the plane normal,
/// zero pointing along +z).
struct FingerPlane {
    root_x: f64,
    root_z: f64,
    lp: f64,
    ld: f64,
    limits: [(f64, f64); 2],
}

/// Closed-form two-link solve for a fingertip contact in the finger plane.
/// Tries both elbow branches and returns the first whose joints respect
/// the limits and whose tip direction opposes the outward surface normal.
fn solve_finger(
    plane: &FingerPlane,
    contact: (f64, f64),
    normal: (f64, f64),
) -> Option<(f64, f64)> {
    let dx = contact.0 - plane.root_x;
    let dz = contact.1 - plane.root_z;
    let d2 = dx * dx + dz * dz;
    let c2 = (d2 - plane.lp * plane.lp - plane.ld * plane.ld) / (2.0 * plane.lp * plane.ld);
    if !(-0.999..=0.999).contains(&c2) {
        return None;
    }
    for elbow in [-1.0, 1.0] {
        let b = elbow * c2.acos();
        let a = dx.atan2(dz) - (plane.ld * b.sin()).atan2(plane.lp + plane.ld * b.cos());
        let a = wrap_angle(a);
        if a < plane.limits[0].0 || a > plane.limits[0].1 {
            continue;
        }
        if b < plane.limits[1].0 || b > plane.limits[1].1 {
            continue;
        }
        let tip = a + b;
        // Inward approach: the fingertip direction must oppose the surface
        // normal at the contact.
        if tip.sin() * normal.0 + tip.cos() * normal.1 > -0.25 {
            continue;
        }
        return Some((a, b));
    }
    None
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

fn axis_rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Contact geometry of one attempt, in the object frame: two antipodal
/// pinch points on the `+-x` walls of the shape. The outward normals are
/// `+-x` by construction, so only the points are carried.
struct ContactSet {
    points: Vec<Vector3<f64>>,
}

fn pinch_contacts(shape: &ObjectShape, rng: &mut ChaCha8Rng) -> Option<ContactSet> {
    match shape {
        ObjectShape::Sphere { radius } => Some(ContactSet {
            points: vec![Vector3::new(*radius, 0.0, 0.0), Vector3::new(-*radius, 0.0, 0.0)],
        }),
        ObjectShape::Box { half_extents } => {
            let y = (rng.gen::<f64>() - 0.5) * 0.8 * half_extents[1];
            let z = (rng.gen::<f64>() - 0.5) * 0.8 * half_extents[2];
            Some(ContactSet {
                points: vec![
                    Vector3::new(half_extents[0], y, z),
                    Vector3::new(-half_extents[0], y, z),
                ],
            })
        }
        ObjectShape::Cylinder { radius, half_height } => {
            let z = (rng.gen::<f64>() - 0.5) * 1.2 * half_height;
            Some(ContactSet {
                points: vec![
                    Vector3::new(*radius, 0.0, z),
                    Vector3::new(-*radius, 0.0, z),
                ],
            })
        }
    }
}

/// Generates up to `n` verified demonstrations of `hand` grasping `shape`.
/// Attempts whose contact geometry is unreachable for the hand are skipped
/// and counted, never fabricated.
pub fn generate_demos(
    hand: &SynthHand,
    shape: &ObjectShape,
    n: usize,
    seed: u64,
) -> Result<DemoBatch> {
    shape.validate()?;
    if n == 0 {
        return Err(Error::invalid("at least one demo must be requested"));
    }
    let template = match hand.fingertips.len() {
        2 => HandTemplate::TwoFingerPlanar,
        3 => HandTemplate::ThreeFingerSpatial,
        _ => {
            return Err(Error::invalid(
                "demonstrations need a two- or three-fingered hand",
            ))
        }
    };
    if template == HandTemplate::ThreeFingerSpatial
        && !matches!(shape, ObjectShape::Sphere { .. })
    {
        return Err(Error::invalid(
            "the tripod hand only has analytic grasps for spheres",
        ));
    }

    // Recover the scale from the first proximal link length (the joint
    // offset between the base and mid joints of finger 1).
    let (lo, hi) = hand.hand.limit_bounds();
    let mid_joint = hand
        .hand
        .joints
        .iter()
        .find(|j| j.name == "f1_mid")
        .ok_or_else(|| Error::validation("hand does not follow the template joint naming"))?;
    let s = mid_joint.origin_xyz.z / PROX_LEN;
    let plane = FingerPlane {
        root_x: ROOT_RADIUS * s,
        root_z: ROOT_HEIGHT * s,
        lp: PROX_LEN * s,
        ld: DIST_LEN * s,
        limits: [(lo[0], hi[0]), (lo[1], hi[1])],
    };

    let object = sample_object_cloud(shape, OBJECT_CLOUD_POINTS)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demos = Vec::new();
    let mut skipped = 0usize;

    for _ in 0..n {
        match attempt_demo(hand, shape, template, &plane, &mut rng)? {
            Some(demo) => demos.push(demo),
            None => skipped += 1,
        }
    }
    Ok(DemoBatch { object, demos, skipped })
}

fn attempt_demo(
    hand: &SynthHand,
    shape: &ObjectShape,
    template: HandTemplate,
    plane: &FingerPlane,
    rng: &mut ChaCha8Rng,
) -> Result<Option<GraspDemo>> {
    let s = plane.lp / PROX_LEN;
    // Object roll about the grasp axis and the tripod latitude are the
    // per-demo diversity; the contact offsets add more for boxes and
    // cylinders.
    let roll = (rng.gen::<f64>() - 0.5) * 5.0;
    let zc_jitter = rng.gen::<f64>();

    let (contacts, q, zc) = match template {
        HandTemplate::TwoFingerPlanar => {
            let Some(contacts) = pinch_contacts(shape, rng) else { return Ok(None) };
            let sep = (contacts.points[0] - contacts.points[1]).norm();
            let Some((q2, zc)) = scan_height(plane, sep / 2.0, (1.0, 0.0), s, zc_jitter) else {
                return Ok(None);
            };
            // Both fingers solve the same in-plane problem; their joint
            // axes point along +x for finger 1 and -x for finger 2, and a
            // plane angle `a` (tip toward plane +x) is a rotation of -a
            // about the finger's own axis in either case.
            let q = vec![-q2.0, -q2.1, -q2.0, -q2.1];
            (contacts, q, zc)
        }
        HandTemplate::ThreeFingerSpatial => {
            let ObjectShape::Sphere { radius } = shape else { unreachable!() };
            let lat = 0.15 + 0.25 * rng.gen::<f64>();
            let contact_r = radius * lat.cos();
            let normal = (lat.cos(), lat.sin());
            let Some((q2, zc_center)) = scan_height(plane, contact_r, normal, s, zc_jitter)
            else {
                return Ok(None);
            };
            // scan_height placed the contact at height zc; the sphere
            // center sits below it by the latitude offset.
            let zc = zc_center - radius * lat.sin();
            let mut points = Vec::new();
            for k in 0..3 {
                let yaw = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                let dir = Vector3::new(yaw.cos() * lat.cos(), yaw.sin() * lat.cos(), lat.sin());
                points.push(dir * *radius);
            }
            let q = vec![q2.0, q2.1, q2.0, q2.1, q2.0, q2.1];
            (ContactSet { points }, q, zc)
        }
        HandTemplate::ThreeLinkChain => return Ok(None),
    };

    // Place the object in the hand frame: the contact midpoint goes to
    // (0, 0, zc) and the object's contact axis (+x) aligns with the hand's
    // grasp axis (+y, the line between the two finger mounts). For the
    // tripod the contacts already sit in the finger planes once the
    // object's symmetry axis aligns with the palm axis. The roll spins the
    // object freely about the grasp axis.
    let (q_obj, c_obj) = match template {
        HandTemplate::TwoFingerPlanar => {
            let mid = (contacts.points[0] + contacts.points[1]) * 0.5;
            let rot = axis_rotation(Vector3::y(), roll)
                * axis_rotation(Vector3::z(), std::f64::consts::FRAC_PI_2);
            let c = Vector3::new(0.0, 0.0, zc) - rot * mid;
            (rot, c)
        }
        HandTemplate::ThreeFingerSpatial => {
            let rot = axis_rotation(Vector3::z(), roll);
            let c = Vector3::new(0.0, 0.0, zc);
            (rot, c)
        }
        HandTemplate::ThreeLinkChain => unreachable!(),
    };

    // Verify with the full kinematics: every fingertip must land on the
    // surface within tolerance.
    let fk = forward_kinematics(&hand.hand, &q)?;
    let mut worst = 0.0f64;
    for tip in &hand.fingertips {
        let idx = hand.hand.link_index(&tip.link).expect("fingertip link exists");
        let local = Vector3::new(tip.offset[0], tip.offset[1], tip.offset[2]);
        let world = fk[idx].rotation * local + fk[idx].translation;
        let in_obj = q_obj.transpose() * (world - c_obj);
        worst = worst.max(shape.signed_distance(&in_obj).abs());
    }
    if worst > DEMO_SURFACE_TOL {
        return Ok(None);
    }

    let base = TransformMatrix {
        rotation: q_obj.transpose(),
        translation: -(q_obj.transpose() * c_obj),
    };
    // Every link pose must admit a pose-vector logarithm, or the demo
    // cannot become a graph; poses that land on the half-turn singular set
    // are skipped like any other unreachable attempt.
    for t in &fk {
        if se3::log_map(&se3::compose(&base, t)).is_err() {
            return Ok(None);
        }
    }
    Ok(Some(GraspDemo { q, base, fingertip_error: worst }))
}

/// Scans palm-axis heights for one where the in-plane finger solve
/// succeeds, with a jittered start for per-demo diversity. Returns the
/// joint pair and the height at which the contact sits.
fn scan_height(
    plane: &FingerPlane,
    contact_x: f64,
    normal: (f64, f64),
    s: f64,
    jitter: f64,
) -> Option<((f64, f64), f64)> {
    let lo = 0.03 * s;
    let hi = 0.095 * s;
    let steps = 16;
    let step = (hi - lo) / steps as f64;
    for i in 0..steps {
        let zc = lo + step * (i as f64 + jitter);
        if let Some(q2) = solve_finger(plane, (contact_x, zc), normal) {
            return Some((q2, zc));
        }
    }
    None
}

/// Builds the relative-transform graph for one demonstration.
pub fn demo_graph(
    hand: &SynthHand,
    object: &PointCloud,
    q: &[f64],
    base: &TransformMatrix,
    p: usize,
    l_pad: usize,
    seed: u64,
) -> Result<TroGraph> {
    let objects = object_patch_features(object, p, seed)?;
    let encoder = GeomEncoderParams::seeded(GEOM_ENCODER_SEED);
    let links = build_link_nodes(
        &hand.hand,
        &hand.clouds,
        LinkPoseSource::Joints { q, base: *base },
        l_pad,
        &encoder,
    )?;
    let meta = GraphMeta { hand_name: hand.hand.name.clone(), p, l_pad, seed };
    TroGraph::new(objects, links, meta)
}

/// On-disk demo record; the base rotation is stored as a row-major matrix
/// to stay exact for any rotation angle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoRecord {
    pub schema_version: u32,
    pub hand: String,
    pub object: String,
    pub q: Vec<f64>,
    pub base_rotation: [f64; 9],
    pub base_translation: [f64; 3],
    pub fingertip_error: f64,
}

impl DemoRecord {
    pub fn from_demo(hand: &str, object: &str, demo: &GraspDemo) -> Self {
        let r = &demo.base.rotation;
        DemoRecord {
            schema_version: 1,
            hand: hand.into(),
            object: object.into(),
            q: demo.q.clone(),
            base_rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            base_translation: [
                demo.base.translation.x,
                demo.base.translation.y,
                demo.base.translation.z,
            ],
            fingertip_error: demo.fingertip_error,
        }
    }

    pub fn base(&self) -> Result<TransformMatrix> {
        let m = &self.base_rotation;
        TransformMatrix::new(
            Matrix3::new(m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8]),
            Vector3::new(
                self.base_translation[0],
                self.base_translation[1],
                self.base_translation[2],
            ),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let record: DemoRecord = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if record.schema_version != 1 {
            return Err(Error::Structure(format!(
                "demo schema version {} is not 1",
                record.schema_version
            )));
        }
        Ok(record)
    }
}

/// Hand metadata sidecar stored next to the URDF.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct HandSidecar {
    schema_version: u32,
    palm_link: String,
    fingertips: Vec<Fingertip>,
}

/// What [`write_dataset`] produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub hand: String,
    pub objects: Vec<String>,
    pub demos: usize,
    pub skipped: usize,
}

/// Writes a complete dataset: the hand (URDF, metadata sidecar, link
/// clouds), one cloud per object, and one JSON record per demonstration.
///
/// Layout under `root`:
/// `hands/<name>/hand.urdf`, `hands/<name>/hand.json`,
/// `hands/<name>/links/<link>.xyz`, `objects/<object>.xyz`,
/// `demos/<object>_<index>.json`.
pub fn write_dataset(root: &Path, spec: &SynthSpec) -> Result<DatasetSummary> {
    spec.validate()?;
    let hand = generate_hand(spec.template, spec.scale)?;
    let name = spec.template.name();

    write_hand_dir(root, &hand, name)?;
    std::fs::create_dir_all(root.join("objects"))?;
    std::fs::create_dir_all(root.join("demos"))?;

    let mut objects = Vec::new();
    let mut total_demos = 0usize;
    let mut total_skipped = 0usize;
    for (oi, shape) in spec.objects.iter().enumerate() {
        let object_name = format!("{}_{oi:03}", shape.kind_name());
        let batch = generate_demos(
            &hand,
            shape,
            spec.demos_per_object,
            spec.seed.wrapping_add(oi as u64),
        )?;
        crate::pointcloud::save_xyz(
            &batch.object,
            &root.join("objects").join(format!("{object_name}.xyz")),
        )?;
        for (di, demo) in batch.demos.iter().enumerate() {
            let record = DemoRecord::from_demo(name, &object_name, demo);
            record.save(&root.join("demos").join(format!("{object_name}_{di:03}.json")))?;
        }
        total_demos += batch.demos.len();
        total_skipped += batch.skipped;
        objects.push(object_name);
    }

    Ok(DatasetSummary { hand: name.into(), objects, demos: total_demos, skipped: total_skipped })
}

/// Writes one hand directory (`hands/<name>/`) under `root` and returns
/// its path.
pub fn write_hand_dir(root: &Path, hand: &SynthHand, name: &str) -> Result<PathBuf> {
    let hand_dir = root.join("hands").join(name);
    let links_dir = hand_dir.join("links");
    std::fs::create_dir_all(&links_dir)?;
    std::fs::write(hand_dir.join("hand.urdf"), &hand.urdf)?;
    let sidecar = HandSidecar {
        schema_version: 1,
        palm_link: hand.palm_link.clone(),
        fingertips: hand.fingertips.clone(),
    };
    std::fs::write(hand_dir.join("hand.json"), serde_json::to_string_pretty(&sidecar)?)?;
    for (link, cloud) in &hand.clouds {
        crate::pointcloud::save_xyz(cloud, &links_dir.join(format!("{link}.xyz")))?;
    }
    Ok(hand_dir)
}

/// Reads a hand directory written by [`write_dataset`] (or assembled by
/// hand in the same layout). The `hand.json` metadata sidecar is optional:
/// without it the root link stands in for the palm and no fingertips are
/// known, which downstream guidance and demo verification will notice.
pub fn load_hand_dir(dir: &Path) -> Result<SynthHand> {
    let urdf = std::fs::read_to_string(dir.join("hand.urdf"))?;
    let hand = parse_urdf(&urdf)?;
    let sidecar_path = dir.join("hand.json");
    let (palm_link, fingertips) = if sidecar_path.exists() {
        let sidecar: HandSidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?;
        if sidecar.schema_version != 1 {
            return Err(Error::Structure(format!(
                "hand sidecar schema version {} is not 1",
                sidecar.schema_version
            )));
        }
        (sidecar.palm_link, sidecar.fingertips)
    } else {
        (hand.links[hand.root].name.clone(), Vec::new())
    };
    let mut clouds = LinkClouds::new();
    for link in &hand.links {
        let path = dir.join("links").join(format!("{}.xyz", link.name));
        clouds.insert(link.name.clone(), crate::pointcloud::load_xyz(&path)?);
    }
    if hand.link_index(&palm_link).is_none() {
        return Err(Error::validation(format!(
            "palm link {palm_link:?} not present in the hand"
        )));
    }
    for tip in &fingertips {
        if hand.link_index(&tip.link).is_none() {
            return Err(Error::validation(format!(
                "fingertip link {:?} not present in the hand",
                tip.link
            )));
        }
    }
    Ok(SynthHand { hand, urdf, clouds, palm_link, fingertips })
}

/// Demo file paths under a dataset root, sorted by name for determinism.
pub fn list_demo_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root.join("demos"))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iksolver::{solve_ik, IkProblem};
    use crate::kinematics::embodiment_similarity;
    use crate::se3::Pose6;

    #[test]
    fn two_finger_hand_has_advertised_shape() {
        let hand = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).unwrap();
        assert_eq!(hand.hand.link_count(), 5);
        assert_eq!(hand.hand.dof(), 4);
        assert_eq!(hand.fingertips.len(), 2);
        assert_eq!(hand.clouds.len(), 5);
        let span = hand.fingertip_span().unwrap();
        assert!((span - 2.0 * ROOT_RADIUS).abs() < 1e-12, "span {span}");
        // The same call is bit-deterministic.
        let again = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).unwrap();
        assert_eq!(hand.urdf, again.urdf);
        assert_eq!(
            hand.clouds["palm"].points,
            again.clouds["palm"].points
        );
    }

    #[test]
    fn three_finger_and_chain_templates_parse() {
        let tri = generate_hand(HandTemplate::ThreeFingerSpatial, 1.0).unwrap();
        assert_eq!(tri.hand.link_count(), 7);
        assert_eq!(tri.hand.dof(), 6);
        assert_eq!(tri.fingertips.len(), 3);

        let chain = generate_hand(HandTemplate::ThreeLinkChain, 1.0).unwrap();
        assert_eq!(chain.hand.link_count(), 3);
        assert_eq!(chain.hand.dof(), 2);
    }

    #[test]
    fn scaled_variant_scores_the_expected_similarity() {
        let a = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).unwrap();
        let b = generate_hand(HandTemplate::TwoFingerPlanar, 1.2).unwrap();
        let (sl, sj) = embodiment_similarity(&a.hand, &a.clouds, &b.hand, &b.clouds).unwrap();
        assert!((sl - 0.8).abs() < 1e-12, "link similarity {sl}");
        assert!((sj - 1.0).abs() < 1e-12, "joint similarity {sj}");
    }

    #[test]
    fn centered_sphere_pinch_verifies_on_the_surface() {
        let hand = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).unwrap();
        let radius = hand.fingertip_span().unwrap() / 2.0;
        let batch = generate_demos(&hand, &ObjectShape::Sphere { radius }, 4, 7).unwrap();
        assert_eq!(batch.demos.len(), 4, "skipped {} of 4", batch.skipped);
        for demo in &batch.demos {
            assert!(demo.fingertip_error < DEMO_SURFACE_TOL);
            assert_eq!(demo.q.len(), 4);
            assert_eq!(demo.q[2], demo.q[0]);
            assert_eq!(demo.q[3], demo.q[1]);
        }
    }

    #[test]
    fn box_cylinder_and_tripod_demos_verify() {
        let hand = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).unwrap();
        let shapes = [
            ObjectShape::Box { half_extents: [0.018, 0.02, 0.025] },
            ObjectShape::Cylinder { radius: 0.016, half_height: 0.03 },
        ];
        for shape in &shapes {
            let batch = generate_demos(&hand, shape, 3, 11).unwrap();
            assert!(!batch.demos.is_empty(), "no demos for {shape:?}");
            for demo in &batch.demos {
                assert!(demo.fingertip_error < DEMO_SURFACE_TOL);
            }
        }

        let tripod = generate_hand(HandTemplate::ThreeFingerSpatial, 1.0).unwrap();
        let batch =
            generate_demos(&tripod, &ObjectShape::Sphere { radius: 0.02 }, 3, 13).unwrap();
        assert!(!batch.demos.is_empty());
        for demo in &batch.demos {
            assert!(demo.fingertip_error < DEMO_SURFACE_TOL);
            assert_eq!(demo.q.len(), 6);
        }
        // Tripods on boxes have no analytic closure.
        assert!(generate_demos(
            &tripod,
            &ObjectShape::Box { half_extents: [0.02; 3] },
            1,
            1
        )
        .is_err());
    }

    #[test]
    fn demos_are_deterministic_per_seed() {
        let hand = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).unwrap();
        let shape = ObjectShape::Cylinder { radius: 0.018, half_height: 0.028 };
        let a = generate_demos(&hand, &shape, 5, 99).unwrap();
        let b = generate_demos(&hand, &shape, 5, 99).unwrap();
        assert_eq!(a.demos.len(), b.demos.len());
        for (x, y) in a.demos.iter().zip(&b.demos) {
            assert_eq!(x.q, y.q);
            assert_eq!(x.base.rotation, y.base.rotation);
            assert_eq!(x.base.translation, y.base.translation);
        }
        let c = generate_demos(&hand, &shape, 5, 100).unwrap();
        assert!(
            a.demos.iter().zip(&c.demos).any(|(x, y)| x.q != y.q),
            "different seeds should give different demos"
        );
    }

    #[test]
    fn oversized_objects_are_skipped_with_a_count() {
        let hand = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).unwrap();
        let batch = generate_demos(&hand, &ObjectShape::Sphere { radius: 0.2 }, 3, 5).unwrap();
        assert!(batch.demos.is_empty());
        assert_eq!(batch.skipped, 3);
    }

    #[test]
    fn demo_converts_to_a_consistent_graph_and_ik_round_trips() {
        let hand = generate_hand(HandTemplate::TwoFingerPlanar, 1.0).unwrap();
        let shape = ObjectShape::Sphere { radius: 0.022 };
        let batch = generate_demos(&hand, &shape, 2, 21).unwrap();
        assert!(!batch.demos.is_empty());
        for demo in &batch.demos {
            let graph =
                demo_graph(&hand, &batch.object, &demo.q, &demo.base, 6, 6, 42).unwrap();
            graph.verify_edges().unwrap();
            assert_eq!(graph.link_nodes.real_count(), 5);

            // The stored joint vector is recoverable from the link poses.
            let fk = forward_kinematics(&hand.hand, &demo.q).unwrap();
            let targets: Vec<Pose6> = fk
                .iter()
                .map(|t| se3::log_map(&se3::compose(&demo.base, t)).unwrap())
                .collect();
            let mask = vec![true; targets.len()];
            let problem = IkProblem::new(hand.hand.clone(), targets, mask).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let sol = solve_ik(&problem, None, &mut rng).unwrap();
            assert!(sol.residual < 1e-10, "residual {}", sol.residual);
            for (a, b) in sol.q.iter().zip(&demo.q) {
                assert!((a - b).abs() < 1e-6, "ik joint {a} vs demo {b}");
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            template: HandTemplate::TwoFingerPlanar,
            scale: 1.0,
            objects: vec![
                ObjectShape::Sphere { radius: 0.02 },
                ObjectShape::Box { half_extents: [0.016, 0.02, 0.022] },
            ],
            demos_per_object: 2,
            seed: 31,
        };
        let summary = write_dataset(dir.path(), &spec).unwrap();
        assert_eq!(summary.objects.len(), 2);
        assert!(summary.demos > 0);

        let hand = load_hand_dir(&dir.path().join("hands").join("planar2f")).unwrap();
        assert_eq!(hand.hand.link_count(), 5);
        assert_eq!(hand.fingertips.len(), 2);

        let demo_files = list_demo_files(dir.path()).unwrap();
        assert_eq!(demo_files.len(), summary.demos);
        let record = DemoRecord::load(&demo_files[0]).unwrap();
        let object = crate::pointcloud::load_xyz(
            &dir.path().join("objects").join(format!("{}.xyz", record.object)),
        )
        .unwrap();
        let base = record.base().unwrap();
        let graph = demo_graph(&hand, &object, &record.q, &base, 6, 6, 7).unwrap();
        graph.verify_edges().unwrap();
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = SynthSpec {
            template: HandTemplate::TwoFingerPlanar,
            scale: 1.0,
            objects: vec![ObjectShape::Sphere { radius: 0.02 }],
            demos_per_object: 1,
            seed: 0,
        };
        assert!(base.validate().is_ok());
        assert!(SynthSpec { demos_per_object: 0, ..base.clone() }.validate().is_err());
        assert!(SynthSpec { scale: 0.0, ..base.clone() }.validate().is_err());
        assert!(SynthSpec { objects: vec![], ..base.clone() }.validate().is_err());
        assert!(SynthSpec {
            objects: vec![ObjectShape::Sphere { radius: -0.1 }],
            ..base
        }
        .validate()
        .is_err());
        assert!(generate_hand(HandTemplate::TwoFingerPlanar, -1.0).is_err());
    }
}
