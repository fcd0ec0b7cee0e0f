//! Joint-tree kinematics over a URDF subset.
//!
//! The parser accepts `link` elements plus `revolute`, `prismatic`, and
//! `fixed` joints with `origin` (xyz + rpy), `axis`, and `limit` children.
//! RPY angles follow the URDF convention `R = Rz(yaw) Ry(pitch) Rx(roll)`.
//! Anything outside that subset is a parse or validation error; actuated
//! joints without limits are rejected outright because every consumer in
//! this crate (IK, demo synthesis, similarity) needs the intervals.
//!
//! Link geometry is not part of the URDF here. Local point clouds arrive
//! through a side channel keyed by link name (see [`LinkClouds`]), which is
//! how the dataset layout stores them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::pointcloud::PointCloud;
use crate::se3::{self, TransformMatrix};
use crate::{Error, Result};

/// Local link point clouds keyed by link name.
pub type LinkClouds = BTreeMap<String, PointCloud>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

impl JointKind {
    pub fn is_actuated(self) -> bool {
        !matches!(self, JointKind::Fixed)
    }

    fn as_str(self) -> &'static str {
        match self {
            JointKind::Revolute => "revolute",
            JointKind::Prismatic => "prismatic",
            JointKind::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent_link: usize,
    pub child_link: usize,
    /// Raw origin fields as parsed, kept so serialization round-trips.
    pub origin_xyz: Vector3<f64>,
    pub origin_rpy: Vector3<f64>,
    /// Unit motion axis in the joint frame (normalized at parse time).
    pub axis: Vector3<f64>,
    /// `(lower, upper)`, present exactly when the joint is actuated.
    pub limits: Option<(f64, f64)>,
}

impl Joint {
    /// Fixed transform from the parent link frame to the joint frame.
    pub fn origin(&self) -> TransformMatrix {
        TransformMatrix {
            rotation: rpy_to_rotation(&self.origin_rpy),
            translation: self.origin_xyz,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    /// Index into `joints` of the joint whose child this link is; `None`
    /// only for the root.
    pub parent_joint: Option<usize>,
}

/// A validated kinematic tree. Laid out so the joint vector is simply the
/// actuated joints in document order.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicHand {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub root: usize,
    /// Actuated joint indices in document order; defines the q layout.
    pub actuated: Vec<usize>,
    /// Joint indices ordered parent-before-child for one-pass FK.
    topo: Vec<usize>,
}

impl KinematicHand {
    pub fn dof(&self) -> usize {
        self.actuated.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Lower and upper limits in q layout order.
    pub fn limit_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.dof());
        let mut hi = Vec::with_capacity(self.dof());
        for &j in &self.actuated {
            let (l, u) = self.joints[j].limits.expect("actuated joints carry limits");
            lo.push(l);
            hi.push(u);
        }
        (lo, hi)
    }

    /// Indices of joint coordinates outside their limits. Out-of-limit
    /// values are legal FK inputs (diffusion output may violate them before
    /// IK projects back), so this is a flag, not an error.
    pub fn limit_violations(&self, q: &[f64]) -> Vec<usize> {
        let (lo, hi) = self.limit_bounds();
        q.iter()
            .enumerate()
            .filter(|&(i, &v)| i < lo.len() && (v < lo[i] || v > hi[i]))
            .map(|(i, _)| i)
            .collect()
    }
}

/// A joint configuration checked against its hand's limits. IK solutions
/// and stored demos use this; raw FK accepts plain slices.
#[derive(Debug, Clone, PartialEq)]
pub struct JointVector {
    values: Vec<f64>,
}

impl JointVector {
    pub fn new(hand: &KinematicHand, values: Vec<f64>) -> Result<Self> {
        if values.len() != hand.dof() {
            return Err(Error::invalid(format!(
                "joint vector has {} entries, hand has {} actuated joints",
                values.len(),
                hand.dof()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("joint vector contains non-finite values"));
        }
        let violations = hand.limit_violations(&values);
        if !violations.is_empty() {
            return Err(Error::invalid(format!(
                "joint vector violates limits at indices {violations:?}"
            )));
        }
        Ok(JointVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `R = Rz(yaw) Ry(pitch) Rx(roll)` for `rpy = (roll, pitch, yaw)`.
pub fn rpy_to_rotation(rpy: &Vector3<f64>) -> Matrix3<f64> {
    let rx = se3::so3_exp(&Vector3::new(rpy.x, 0.0, 0.0));
    let ry = se3::so3_exp(&Vector3::new(0.0, rpy.y, 0.0));
    let rz = se3::so3_exp(&Vector3::new(0.0, 0.0, rpy.z));
    rz * ry * rx
}

fn parse_triple(s: &str, what: &str, line: usize) -> Result<Vector3<f64>> {
    let fields: Vec<&str> = s.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line,
            message: format!("{what} needs 3 numbers, found {}", fields.len()),
        });
    }
    let mut v = [0.0f64; 3];
    for (k, f) in fields.iter().enumerate() {
        v[k] = f.parse().map_err(|e| Error::Parse {
            line,
            message: format!("{what} component {f:?}: {e}"),
        })?;
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

/// Parses and validates a URDF document.
///
/// Validation enforces tree shape: unique names, resolvable parent/child
/// references, at most one parent per link, exactly one root, and full
/// reachability from that root (which together exclude cycles).
pub fn parse_urdf(source: &str) -> Result<KinematicHand> {
    let doc = roxmltree::Document::parse(source).map_err(|e| Error::Parse {
        line: e.pos().row as usize,
        message: e.to_string(),
    })?;
    let line_of = |node: &roxmltree::Node| doc.text_pos_at(node.range().start).row as usize;

    let robot = doc.root_element();
    if robot.tag_name().name() != "robot" {
        return Err(Error::Parse {
            line: line_of(&robot),
            message: format!("expected <robot> root, found <{}>", robot.tag_name().name()),
        });
    }
    let name = robot.attribute("name").unwrap_or("unnamed").to_string();

    let mut links: Vec<Link> = Vec::new();
    let mut link_lines: Vec<usize> = Vec::new();
    for node in robot.children().filter(|n| n.has_tag_name("link")) {
        let lname = node.attribute("name").ok_or_else(|| Error::Parse {
            line: line_of(&node),
            message: "link without name attribute".into(),
        })?;
        if links.iter().any(|l| l.name == lname) {
            return Err(Error::Structure(format!("duplicate link name {lname:?}")));
        }
        links.push(Link { name: lname.to_string(), parent_joint: None });
        link_lines.push(line_of(&node));
    }
    if links.is_empty() {
        return Err(Error::Structure("document defines no links".into()));
    }

    let mut joints: Vec<Joint> = Vec::new();
    for node in robot.children().filter(|n| n.has_tag_name("joint")) {
        let line = line_of(&node);
        let jname = node.attribute("name").ok_or_else(|| Error::Parse {
            line,
            message: "joint without name attribute".into(),
        })?;
        if joints.iter().any(|j| j.name == jname) {
            return Err(Error::Structure(format!("duplicate joint name {jname:?}")));
        }
        let kind = match node.attribute("type") {
            Some("revolute") => JointKind::Revolute,
            Some("prismatic") => JointKind::Prismatic,
            Some("fixed") => JointKind::Fixed,
            Some(other) => {
                return Err(Error::Parse {
                    line,
                    message: format!("unsupported joint type {other:?}"),
                })
            }
            None => {
                return Err(Error::Parse {
                    line,
                    message: format!("joint {jname:?} has no type attribute"),
                })
            }
        };
        let child_elem = |tag: &str| node.children().find(|c| c.has_tag_name(tag));
        let link_ref = |tag: &str| -> Result<usize> {
            let elem = child_elem(tag).ok_or_else(|| Error::Parse {
                line,
                message: format!("joint {jname:?} missing <{tag}>"),
            })?;
            let target = elem.attribute("link").ok_or_else(|| Error::Parse {
                line: line_of(&elem),
                message: format!("<{tag}> missing link attribute"),
            })?;
            links
                .iter()
                .position(|l| l.name == target)
                .ok_or_else(|| Error::Structure(format!(
                    "joint {jname:?} references unknown link {target:?}"
                )))
        };
        let parent_link = link_ref("parent")?;
        let child_link = link_ref("child")?;

        let (origin_xyz, origin_rpy) = match child_elem("origin") {
            Some(o) => {
                let oline = line_of(&o);
                let xyz = match o.attribute("xyz") {
                    Some(s) => parse_triple(s, "origin xyz", oline)?,
                    None => Vector3::zeros(),
                };
                let rpy = match o.attribute("rpy") {
                    Some(s) => parse_triple(s, "origin rpy", oline)?,
                    None => Vector3::zeros(),
                };
                (xyz, rpy)
            }
            None => (Vector3::zeros(), Vector3::zeros()),
        };

        let axis = match child_elem("axis") {
            Some(a) => {
                let aline = line_of(&a);
                let raw = match a.attribute("xyz") {
                    Some(s) => parse_triple(s, "axis xyz", aline)?,
                    None => Vector3::x(),
                };
                let n = raw.norm();
                if kind.is_actuated() && n < 1e-12 {
                    return Err(Error::validation(format!(
                        "joint {jname:?} has a zero-length axis"
                    )));
                }
                if n < 1e-12 { Vector3::x() } else { raw / n }
            }
            None => Vector3::x(),
        };

        let limits = match child_elem("limit") {
            Some(l) => {
                let lline = line_of(&l);
                let get = |attr: &str| -> Result<f64> {
                    let s = l.attribute(attr).ok_or_else(|| Error::Parse {
                        line: lline,
                        message: format!("<limit> missing {attr}"),
                    })?;
                    s.parse().map_err(|e| Error::Parse {
                        line: lline,
                        message: format!("limit {attr}={s:?}: {e}"),
                    })
                };
                let lower = get("lower")?;
                let upper = get("upper")?;
                if lower > upper {
                    return Err(Error::validation(format!(
                        "joint {jname:?} has lower limit {lower} above upper {upper}"
                    )));
                }
                Some((lower, upper))
            }
            None => None,
        };
        if kind.is_actuated() && limits.is_none() {
            return Err(Error::validation(format!(
                "actuated joint {jname:?} has no <limit>"
            )));
        }

        joints.push(Joint {
            name: jname.to_string(),
            kind,
            parent_link,
            child_link,
            origin_xyz,
            origin_rpy,
            axis,
            limits,
        });
    }

    // Tree-shape validation.
    for (ji, joint) in joints.iter().enumerate() {
        let child = &mut links[joint.child_link];
        if let Some(prev) = child.parent_joint {
            return Err(Error::Structure(format!(
                "link {:?} has two parent joints ({:?} and {:?})",
                child.name, joints[prev].name, joint.name
            )));
        }
        child.parent_joint = Some(ji);
    }
    let roots: Vec<usize> = links
        .iter()
        .enumerate()
        .filter(|(_, l)| l.parent_joint.is_none())
        .map(|(i, _)| i)
        .collect();
    let root = match roots.as_slice() {
        [r] => *r,
        [] => return Err(Error::Structure("no root link: joint graph forms a cycle".into())),
        many => {
            let names: Vec<&str> = many.iter().map(|&i| links[i].name.as_str()).collect();
            return Err(Error::Structure(format!(
                "multiple root links {names:?}: tree is disconnected"
            )));
        }
    };
    // Reachability walk doubles as cycle detection for components that
    // kept exactly one parentless link.
    let mut topo = Vec::with_capacity(joints.len());
    let mut visited = vec![false; links.len()];
    visited[root] = true;
    let mut frontier = vec![root];
    while let Some(link) = frontier.pop() {
        for (ji, joint) in joints.iter().enumerate() {
            if joint.parent_link == link {
                if visited[joint.child_link] {
                    return Err(Error::Structure(format!(
                        "joint {:?} revisits link {:?}",
                        joint.name, links[joint.child_link].name
                    )));
                }
                visited[joint.child_link] = true;
                topo.push(ji);
                frontier.push(joint.child_link);
            }
        }
    }
    if let Some(stranded) = visited.iter().position(|v| !v) {
        return Err(Error::Structure(format!(
            "link {:?} is unreachable from root {:?}",
            links[stranded].name, links[root].name
        )));
    }
    // Parent-first order independent of the stack walk order above.
    topo.sort_by_key(|&ji| link_depth(&links, &joints, joints[ji].child_link));

    let actuated = joints
        .iter()
        .enumerate()
        .filter(|(_, j)| j.kind.is_actuated())
        .map(|(i, _)| i)
        .collect();

    Ok(KinematicHand { name, links, joints, root, actuated, topo })
}

fn link_depth(links: &[Link], joints: &[Joint], mut link: usize) -> usize {
    let mut depth = 0;
    while let Some(pj) = links[link].parent_joint {
        depth += 1;
        link = joints[pj].parent_link;
    }
    depth
}

/// Writes a hand back to URDF text. `parse_urdf(serialize_urdf(h)) == h`
/// because the raw numeric fields are preserved and printed with shortest
/// round-trip decimals.
pub fn serialize_urdf(hand: &KinematicHand) -> String {
    let mut out = String::new();
    out.push_str(&format!("<robot name=\"{}\">\n", hand.name));
    for link in &hand.links {
        out.push_str(&format!("  <link name=\"{}\"/>\n", link.name));
    }
    for joint in &hand.joints {
        out.push_str(&format!(
            "  <joint name=\"{}\" type=\"{}\">\n",
            joint.name,
            joint.kind.as_str()
        ));
        out.push_str(&format!(
            "    <parent link=\"{}\"/>\n",
            hand.links[joint.parent_link].name
        ));
        out.push_str(&format!(
            "    <child link=\"{}\"/>\n",
            hand.links[joint.child_link].name
        ));
        out.push_str(&format!(
            "    <origin xyz=\"{} {} {}\" rpy=\"{} {} {}\"/>\n",
            joint.origin_xyz.x, joint.origin_xyz.y, joint.origin_xyz.z,
            joint.origin_rpy.x, joint.origin_rpy.y, joint.origin_rpy.z,
        ));
        out.push_str(&format!(
            "    <axis xyz=\"{} {} {}\"/>\n",
            joint.axis.x, joint.axis.y, joint.axis.z
        ));
        if let Some((lo, hi)) = joint.limits {
            out.push_str(&format!("    <limit lower=\"{lo}\" upper=\"{hi}\"/>\n"));
        }
        out.push_str("  </joint>\n");
    }
    out.push_str("</robot>\n");
    out
}

fn joint_motion(joint: &Joint, q: f64) -> TransformMatrix {
    match joint.kind {
        JointKind::Revolute => TransformMatrix {
            rotation: se3::so3_exp(&(joint.axis * q)),
            translation: Vector3::zeros(),
        },
        JointKind::Prismatic => TransformMatrix::from_translation(joint.axis * q),
        JointKind::Fixed => TransformMatrix::identity(),
    }
}

/// Per-link poses in the hand-base frame for joint values `q` (one entry
/// per actuated joint, document order). Out-of-limit values are accepted;
/// use [`KinematicHand::limit_violations`] to flag them.
pub fn forward_kinematics(hand: &KinematicHand, q: &[f64]) -> Result<Vec<TransformMatrix>> {
    if q.len() != hand.dof() {
        return Err(Error::invalid(format!(
            "q has {} entries, hand has {} actuated joints",
            q.len(),
            hand.dof()
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("q contains non-finite values"));
    }
    let mut poses = vec![TransformMatrix::identity(); hand.links.len()];
    for &ji in &hand.topo {
        let joint = &hand.joints[ji];
        let qv = hand
            .actuated
            .iter()
            .position(|&a| a == ji)
            .map(|slot| q[slot])
            .unwrap_or(0.0);
        let parent = poses[joint.parent_link];
        poses[joint.child_link] =
            se3::compose(&se3::compose(&parent, &joint.origin()), &joint_motion(joint, qv));
    }
    Ok(poses)
}

/// Geometric Jacobian of one link pose with respect to q: a `6 x dof`
/// matrix, translational velocity rows first, angular velocity rows last,
/// both expressed in the hand-base frame.
pub fn fk_jacobian(hand: &KinematicHand, q: &[f64], link: usize) -> Result<DMatrix<f64>> {
    if link >= hand.links.len() {
        return Err(Error::invalid(format!(
            "link index {link} out of range for {} links",
            hand.links.len()
        )));
    }
    let poses = forward_kinematics(hand, q)?;
    let target_pos = poses[link].translation;
    let mut jac = DMatrix::zeros(6, hand.dof());

    // Walk up from the target link; only joints on that chain contribute.
    let mut cursor = link;
    while let Some(ji) = hand.links[cursor].parent_joint {
        let joint = &hand.joints[ji];
        if let Some(slot) = hand.actuated.iter().position(|&a| a == ji) {
            let joint_frame = se3::compose(&poses[joint.parent_link], &joint.origin());
            let axis_world = joint_frame.rotation * joint.axis;
            match joint.kind {
                JointKind::Revolute => {
                    let v = axis_world.cross(&(target_pos - joint_frame.translation));
                    for r in 0..3 {
                        jac[(r, slot)] = v[r];
                        jac[(r + 3, slot)] = axis_world[r];
                    }
                }
                JointKind::Prismatic => {
                    for r in 0..3 {
                        jac[(r, slot)] = axis_world[r];
                    }
                }
                JointKind::Fixed => unreachable!("fixed joints are never actuated"),
            }
        }
        cursor = joint.parent_link;
    }
    Ok(jac)
}

/// Link-length and joint-interval similarity between two hands of matching
/// topology (same link count, same actuated joint count, compared in
/// document order).
///
/// * `s_l = 1 - mean(|l_b - l_a| / l_a)` over links, where a link's length
///   is the bounding-box diagonal of its local cloud.
/// * `s_j` = mean Jaccard overlap of actuated joint intervals.
///
/// Returns `(s_l, s_j)`.
pub fn embodiment_similarity(
    hand_a: &KinematicHand,
    clouds_a: &LinkClouds,
    hand_b: &KinematicHand,
    clouds_b: &LinkClouds,
) -> Result<(f64, f64)> {
    if hand_a.link_count() != hand_b.link_count() || hand_a.dof() != hand_b.dof() {
        return Err(Error::invalid(format!(
            "topology mismatch: {} links / {} dof vs {} links / {} dof",
            hand_a.link_count(),
            hand_a.dof(),
            hand_b.link_count(),
            hand_b.dof()
        )));
    }

    let length_of = |hand: &KinematicHand, clouds: &LinkClouds, i: usize| -> Result<f64> {
        let name = &hand.links[i].name;
        let cloud = clouds.get(name).ok_or_else(|| {
            Error::validation(format!("no point cloud for link {name:?}"))
        })?;
        let len = cloud.bounding_box_diagonal();
        if len <= 0.0 {
            return Err(Error::validation(format!(
                "link {name:?} has zero-length geometry; similarity undefined"
            )));
        }
        Ok(len)
    };

    let mut s_l = 0.0;
    for i in 0..hand_a.link_count() {
        let la = length_of(hand_a, clouds_a, i)?;
        let lb = length_of(hand_b, clouds_b, i)?;
        s_l += (lb - la).abs() / la;
    }
    let s_l = 1.0 - s_l / hand_a.link_count() as f64;

    let s_j = if hand_a.dof() == 0 {
        1.0
    } else {
        let mut total = 0.0;
        for (&ja, &jb) in hand_a.actuated.iter().zip(&hand_b.actuated) {
            let (alo, ahi) = hand_a.joints[ja].limits.expect("actuated");
            let (blo, bhi) = hand_b.joints[jb].limits.expect("actuated");
            let inter = (ahi.min(bhi) - alo.max(blo)).max(0.0);
            let union = (ahi.max(bhi) - alo.min(blo)).max(0.0);
            // Two identical zero-width intervals overlap perfectly.
            total += if union == 0.0 { 1.0 } else { inter / union };
        }
        total / hand_a.dof() as f64
    };

    Ok((s_l, s_j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    const PLANAR_CHAIN: &str = r#"
<robot name="planar3">
  <link name="base"/>
  <link name="mid"/>
  <link name="tip"/>
  <joint name="j1" type="revolute">
    <parent link="base"/>
    <child link="mid"/>
    <origin xyz="1 0 0" rpy="0 0 0"/>
    <axis xyz="0 0 1"/>
    <limit lower="-1.5707963267948966" upper="1.5707963267948966"/>
  </joint>
  <joint name="j2" type="revolute">
    <parent link="mid"/>
    <child link="tip"/>
    <origin xyz="1 0 0" rpy="0 0 0"/>
    <axis xyz="0 0 1"/>
    <limit lower="-1.5707963267948966" upper="1.5707963267948966"/>
  </joint>
</robot>
"#;

    fn cube_cloud(side: f64) -> PointCloud {
        let mut points = Vec::new();
        for i in 0..8 {
            points.push(Vector3::new(
                (i % 2) as f64 * side,
                ((i / 2) % 2) as f64 * side,
                (i / 4) as f64 * side,
            ));
        }
        PointCloud { points }
    }

    #[test]
    fn fixed_joint_pair_parses_with_zero_dof() {
        let src = r#"
<robot name="pair">
  <link name="a"/>
  <link name="b"/>
  <joint name="weld" type="fixed">
    <parent link="a"/>
    <child link="b"/>
    <origin xyz="0 0 0.5"/>
  </joint>
</robot>
"#;
        let hand = parse_urdf(src).unwrap();
        assert_eq!(hand.link_count(), 2);
        assert_eq!(hand.dof(), 0);
        assert_eq!(hand.links[hand.root].name, "a");
    }

    #[test]
    fn planar_chain_parses_with_two_actuated() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        assert_eq!(hand.link_count(), 3);
        assert_eq!(hand.dof(), 2);
        let (lo, hi) = hand.limit_bounds();
        assert_eq!(lo, vec![-FRAC_PI_2, -FRAC_PI_2]);
        assert_eq!(hi, vec![FRAC_PI_2, FRAC_PI_2]);
    }

    #[test]
    fn double_parent_is_a_structure_error() {
        let src = r#"
<robot name="bad">
  <link name="a"/>
  <link name="b"/>
  <link name="c"/>
  <joint name="j1" type="fixed"><parent link="a"/><child link="c"/></joint>
  <joint name="j2" type="fixed"><parent link="b"/><child link="c"/></joint>
</robot>
"#;
        assert!(matches!(parse_urdf(src), Err(Error::Structure(_))));
    }

    #[test]
    fn unknown_reference_and_cycle_are_structure_errors() {
        let unknown = r#"
<robot name="bad">
  <link name="a"/>
  <joint name="j" type="fixed"><parent link="a"/><child link="ghost"/></joint>
</robot>
"#;
        assert!(matches!(parse_urdf(unknown), Err(Error::Structure(_))));

        let cycle = r#"
<robot name="bad">
  <link name="a"/>
  <link name="b"/>
  <joint name="j1" type="fixed"><parent link="a"/><child link="b"/></joint>
  <joint name="j2" type="fixed"><parent link="b"/><child link="a"/></joint>
</robot>
"#;
        assert!(matches!(parse_urdf(cycle), Err(Error::Structure(_))));
    }

    #[test]
    fn missing_limit_on_actuated_joint_is_validation_error() {
        let src = r#"
<robot name="bad">
  <link name="a"/>
  <link name="b"/>
  <joint name="j" type="revolute">
    <parent link="a"/><child link="b"/><axis xyz="0 0 1"/>
  </joint>
</robot>
"#;
        assert!(matches!(parse_urdf(src), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_xml_reports_a_line() {
        let src = "<robot name=\"x\">\n  <link name=\"a\">\n</robot>\n";
        match parse_urdf(src) {
            Err(Error::Parse { line, .. }) => assert!(line >= 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn fk_at_zero_is_the_product_of_origins() {
        let src = r#"
<robot name="origins">
  <link name="a"/>
  <link name="b"/>
  <link name="c"/>
  <joint name="j1" type="fixed">
    <parent link="a"/><child link="b"/>
    <origin xyz="1 0 0" rpy="0 0 1.5707963267948966"/>
  </joint>
  <joint name="j2" type="fixed">
    <parent link="b"/><child link="c"/>
    <origin xyz="0 1 0"/>
  </joint>
</robot>
"#;
        let hand = parse_urdf(src).unwrap();
        let poses = forward_kinematics(&hand, &[]).unwrap();
        // c = trans(1,0,0) * Rz(90deg) * trans(0,1,0): the second offset
        // rotates onto -x and cancels the first.
        let c = poses[hand.link_index("c").unwrap()];
        assert!(c.translation.abs().max() < 1e-12);
        let expected_rot = se3::so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert!((c.rotation - expected_rot).abs().max() < 1e-12);
    }

    #[test]
    fn revolute_quarter_turn_swings_offset_link() {
        let src = r#"
<robot name="swing">
  <link name="base"/>
  <link name="arm"/>
  <link name="tip"/>
  <joint name="hinge" type="revolute">
    <parent link="base"/><child link="arm"/>
    <axis xyz="0 0 1"/>
    <limit lower="-3.14" upper="3.14"/>
  </joint>
  <joint name="reach" type="fixed">
    <parent link="arm"/><child link="tip"/>
    <origin xyz="1 0 0"/>
  </joint>
</robot>
"#;
        let hand = parse_urdf(src).unwrap();
        let poses = forward_kinematics(&hand, &[FRAC_PI_2]).unwrap();
        let tip = poses[hand.link_index("tip").unwrap()].translation;
        assert!((tip - Vector3::new(0.0, 1.0, 0.0)).abs().max() < 1e-12);
    }

    #[test]
    fn fixed_joints_ignore_q_entirely() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        let a = forward_kinematics(&hand, &[0.3, -0.2]).unwrap();
        let b = forward_kinematics(&hand, &[0.3, -0.2]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            forward_kinematics(&hand, &[0.1]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn out_of_limit_q_is_flagged_not_rejected() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        assert!(forward_kinematics(&hand, &[3.0, 0.0]).is_ok());
        assert_eq!(hand.limit_violations(&[3.0, 0.0]), vec![0]);
        assert!(JointVector::new(&hand, vec![3.0, 0.0]).is_err());
        assert!(JointVector::new(&hand, vec![0.5, -0.5]).is_ok());
    }

    #[test]
    fn jacobian_of_lever_arm_has_documented_rows() {
        let src = r#"
<robot name="lever">
  <link name="base"/>
  <link name="arm"/>
  <link name="tip"/>
  <joint name="hinge" type="revolute">
    <parent link="base"/><child link="arm"/>
    <axis xyz="0 0 1"/>
    <limit lower="-3" upper="3"/>
  </joint>
  <joint name="reach" type="fixed">
    <parent link="arm"/><child link="tip"/>
    <origin xyz="0.75 0 0"/>
  </joint>
</robot>
"#;
        let hand = parse_urdf(src).unwrap();
        let tip = hand.link_index("tip").unwrap();
        let jac = fk_jacobian(&hand, &[0.0], tip).unwrap();
        // Lever arm r = 0.75 about z: translational column (0, r, 0),
        // angular column equals the axis.
        assert!((jac[(0, 0)] - 0.0).abs() < 1e-12);
        assert!((jac[(1, 0)] - 0.75).abs() < 1e-12);
        assert!((jac[(2, 0)] - 0.0).abs() < 1e-12);
        assert_eq!(
            (jac[(3, 0)], jac[(4, 0)], jac[(5, 0)]),
            (0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn prismatic_jacobian_has_zero_rotation_rows() {
        let src = r#"
<robot name="slider">
  <link name="base"/>
  <link name="slide"/>
  <joint name="rail" type="prismatic">
    <parent link="base"/><child link="slide"/>
    <axis xyz="0 1 0"/>
    <limit lower="-1" upper="1"/>
  </joint>
</robot>
"#;
        let hand = parse_urdf(src).unwrap();
        let jac = fk_jacobian(&hand, &[0.4], 1).unwrap();
        assert_eq!((jac[(3, 0)], jac[(4, 0)], jac[(5, 0)]), (0.0, 0.0, 0.0));
        assert!((jac[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        let tip = hand.link_index("tip").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = 1e-6;
        for _ in 0..100 {
            let q: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let jac = fk_jacobian(&hand, &q, tip).unwrap();
            for k in 0..2 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h;
                qm[k] -= h;
                let fp = forward_kinematics(&hand, &qp).unwrap()[tip];
                let fm = forward_kinematics(&hand, &qm).unwrap()[tip];
                // Translational rows against position differences.
                let v = (fp.translation - fm.translation) / (2.0 * h);
                // Angular rows against vee((dR/dq) R^T).
                let f0 = forward_kinematics(&hand, &q).unwrap()[tip];
                let dr = (fp.rotation - fm.rotation) / (2.0 * h);
                let w_mat = dr * f0.rotation.transpose();
                let w = Vector3::new(w_mat[(2, 1)], w_mat[(0, 2)], w_mat[(1, 0)]);
                for r in 0..3 {
                    let rel_v = (jac[(r, k)] - v[r]).abs() / v.norm().max(1e-6);
                    let rel_w = (jac[(r + 3, k)] - w[r]).abs() / w.norm().max(1e-6);
                    assert!(rel_v < 1e-5, "translation row {r} col {k} rel err {rel_v:.3e}");
                    assert!(rel_w < 1e-5, "rotation row {r} col {k} rel err {rel_w:.3e}");
                }
            }
        }
    }

    #[test]
    fn similarity_of_identical_hands_is_exactly_one() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        let mut clouds = LinkClouds::new();
        for link in &hand.links {
            clouds.insert(link.name.clone(), cube_cloud(0.1));
        }
        let (s_l, s_j) = embodiment_similarity(&hand, &clouds, &hand, &clouds).unwrap();
        assert_eq!(s_l, 1.0);
        assert_eq!(s_j, 1.0);
    }

    #[test]
    fn halved_joint_ranges_score_half_jaccard() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        let halved_src = PLANAR_CHAIN.replace(
            "lower=\"-1.5707963267948966\" upper=\"1.5707963267948966\"",
            "lower=\"-1.5707963267948966\" upper=\"0\"",
        );
        let halved = parse_urdf(&halved_src).unwrap();
        let mut clouds = LinkClouds::new();
        for link in &hand.links {
            clouds.insert(link.name.clone(), cube_cloud(0.1));
        }
        let (s_l, s_j) = embodiment_similarity(&hand, &clouds, &halved, &clouds).unwrap();
        assert_eq!(s_l, 1.0);
        assert!((s_j - 0.5).abs() < 1e-12, "s_j = {s_j}");
    }

    #[test]
    fn scaled_links_score_point_eight() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        let mut clouds_a = LinkClouds::new();
        let mut clouds_b = LinkClouds::new();
        for link in &hand.links {
            clouds_a.insert(link.name.clone(), cube_cloud(0.1));
            let scaled = PointCloud {
                points: cube_cloud(0.1).points.iter().map(|p| p * 1.2).collect(),
            };
            clouds_b.insert(link.name.clone(), scaled);
        }
        let (s_l, s_j) = embodiment_similarity(&hand, &clouds_a, &hand, &clouds_b).unwrap();
        assert!((s_l - 0.8).abs() < 1e-12, "s_l = {s_l}");
        assert_eq!(s_j, 1.0);
    }

    #[test]
    fn similarity_rejects_topology_mismatch_and_degenerate_links() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        let other = parse_urdf(
            r#"
<robot name="pair">
  <link name="a"/>
  <link name="b"/>
  <joint name="weld" type="fixed"><parent link="a"/><child link="b"/></joint>
</robot>
"#,
        )
        .unwrap();
        let clouds = LinkClouds::new();
        assert!(matches!(
            embodiment_similarity(&hand, &clouds, &other, &clouds),
            Err(Error::InvalidArgument(_))
        ));

        let mut degenerate = LinkClouds::new();
        for link in &hand.links {
            degenerate.insert(
                link.name.clone(),
                PointCloud { points: vec![Vector3::zeros(); 4] },
            );
        }
        assert!(matches!(
            embodiment_similarity(&hand, &degenerate, &hand, &degenerate),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn parse_serialize_parse_round_trips() {
        let hand = parse_urdf(PLANAR_CHAIN).unwrap();
        let text = serialize_urdf(&hand);
        let back = parse_urdf(&text).unwrap();
        assert_eq!(hand, back);
    }
}
