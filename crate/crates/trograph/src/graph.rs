//! The object/link graph: per-patch object tokens, per-link pose and
//! geometry tokens, and relative-transform edges between everything.
//!
//! Edges are never free-standing state: they are a pure function of the
//! node sets. `object_link[i][j]` is the twist of `inverse(T_obj_i) *
//! T_link_j`, where `T_obj_i` translates to patch center `i` with identity
//! rotation and `T_link_j` is the exponential of link pose row `j`.
//! `link_link` stores the strict upper triangle of the pairwise link
//! twists; the lower triangle is the exact negation (the inverse of an
//! exponential is the exponential of the negated twist) and the diagonal is
//! zero. Every constructor and deserializer rebuilds or verifies edges, so
//! a graph in hand is always self-consistent.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::kinematics::{KinematicHand, LinkClouds};
use crate::pointcloud::{self, BasisPointSet};
use crate::se3::{self, Pose6, TransformMatrix};
use crate::{Error, Result};

/// Width of the per-link geometry embedding.
pub const GEOM_EMBED_DIM: usize = 128;

/// Fixed seed for the default geometry-encoder parameters.
pub const GEOM_ENCODER_SEED: u64 = 128_001;

/// Current on-disk schema for graph JSON documents.
pub const GRAPH_SCHEMA_VERSION: u32 = 1;

/// Absolute tolerance when verifying stored edges against recomputed ones.
pub const EDGE_CONSISTENCY_TOL: f64 = 1e-9;

/// Per-patch object tokens: `P` patch centers, one shared object scale, and
/// a 64-dim shape feature per patch. Concatenated row-wise these are the
/// object-side node features `[center, scale, feature]` of width 3 + 1 + 64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNodeSet {
    /// Patch centers, meters, object frame. Row-major `P x 3`.
    pub centers: Vec<[f64; 3]>,
    /// Largest distance of any object point from the object centroid.
    pub scale: f64,
    /// Per-patch shape descriptors, row-major `P x 64`.
    pub features: Vec<Vec<f64>>,
}

impl ObjectNodeSet {
    pub fn patch_count(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::validation("object node set has zero patches"));
        }
        if self.features.len() != self.centers.len() {
            return Err(Error::validation(format!(
                "object node set has {} centers but {} feature rows",
                self.centers.len(),
                self.features.len()
            )));
        }
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::validation(format!(
                "object scale {} is not a finite non-negative number",
                self.scale
            )));
        }
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != pointcloud::OBJECT_FEATURE_DIM {
                return Err(Error::validation(format!(
                    "object feature row {i} has width {}, expected {}",
                    row.len(),
                    pointcloud::OBJECT_FEATURE_DIM
                )));
            }
        }
        let finite = self
            .centers
            .iter()
            .flat_map(|c| c.iter())
            .chain(self.features.iter().flat_map(|r| r.iter()))
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::validation("object node set contains non-finite values"));
        }
        Ok(())
    }
}

/// Per-link tokens padded to a fixed slot count: pose twists, geometry
/// embeddings, local-cloud centers and scales, and the row mask. Rows with
/// `mask[j] == false` are padding and must be exactly zero everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkNodeSet {
    /// Pose twists `[rho, theta]` in the object frame, `l_pad x 6`.
    pub poses: Vec<[f64; 6]>,
    /// Geometry embeddings, `l_pad x 128`.
    pub geom_embed: Vec<Vec<f64>>,
    /// Local-cloud centroids (link frame), `l_pad x 3`.
    pub centers: Vec<[f64; 3]>,
    /// Local-cloud scales (largest centroid distance), `l_pad`.
    pub scales: Vec<f64>,
    /// True for real links, false for padding.
    pub mask: Vec<bool>,
}

impl LinkNodeSet {
    pub fn slot_count(&self) -> usize {
        self.mask.len()
    }

    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.mask.len();
        if self.poses.len() != l
            || self.geom_embed.len() != l
            || self.centers.len() != l
            || self.scales.len() != l
        {
            return Err(Error::validation(format!(
                "link node set row counts disagree: poses {}, geom {}, centers {}, scales {}, mask {}",
                self.poses.len(),
                self.geom_embed.len(),
                self.centers.len(),
                self.scales.len(),
                l
            )));
        }
        if self.real_count() == 0 {
            return Err(Error::validation("link node set has no unmasked links"));
        }
        for (j, row) in self.geom_embed.iter().enumerate() {
            if row.len() != GEOM_EMBED_DIM {
                return Err(Error::validation(format!(
                    "geometry embedding row {j} has width {}, expected {GEOM_EMBED_DIM}",
                    row.len()
                )));
            }
        }
        for j in 0..l {
            let finite = self.poses[j].iter().all(|x| x.is_finite())
                && self.geom_embed[j].iter().all(|x| x.is_finite())
                && self.centers[j].iter().all(|x| x.is_finite())
                && self.scales[j].is_finite();
            if !finite {
                return Err(Error::validation(format!(
                    "link node row {j} contains non-finite values"
                )));
            }
            if !self.mask[j] {
                let zero = self.poses[j].iter().all(|&x| x == 0.0)
                    && self.geom_embed[j].iter().all(|&x| x == 0.0)
                    && self.centers[j].iter().all(|&x| x == 0.0)
                    && self.scales[j] == 0.0;
                if !zero {
                    return Err(Error::validation(format!(
                        "masked link row {j} is not all-zero"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the link-geometry perceptron: two 128-wide layers with a
/// tanh in between, applied to `[bps(124), centroid(3), scale(1)]`.
///
/// The default parameters are drawn from a fixed seed so that every run of
/// the pipeline embeds geometry identically; stored graphs depend on it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeomEncoderParams {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

impl GeomEncoderParams {
    pub const INPUT_DIM: usize = pointcloud::LINK_BPS_SIZE + 4;

    pub fn seeded(seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            let scale = 1.0 / (cols as f64).sqrt();
            (0..rows)
                .map(|_| {
                    (0..cols)
                        .map(|_| {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            g * scale
                        })
                        .collect()
                })
                .collect()
        };
        let w1 = matrix(GEOM_EMBED_DIM, Self::INPUT_DIM);
        let b1 = vec![0.0; GEOM_EMBED_DIM];
        let w2 = matrix(GEOM_EMBED_DIM, GEOM_EMBED_DIM);
        let b2 = vec![0.0; GEOM_EMBED_DIM];
        GeomEncoderParams { w1, b1, w2, b2 }
    }

    pub fn encode(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != Self::INPUT_DIM {
            return Err(Error::invalid(format!(
                "geometry encoder expects {} inputs, got {}",
                Self::INPUT_DIM,
                input.len()
            )));
        }
        let hidden: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| {
                let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                z.tanh()
            })
            .collect();
        Ok(self
            .w2
            .iter()
            .zip(&self.b2)
            .map(|(row, b)| row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect())
    }
}

/// Where link poses come from when building link nodes.
pub enum LinkPoseSource<'a> {
    /// Joint values (document order) plus the hand-base pose in the object
    /// frame; link poses are `base * fk(q)`.
    Joints { q: &'a [f64], base: TransformMatrix },
    /// Explicit per-link poses in the object frame, one per hand link.
    Poses(&'a [TransformMatrix]),
}

/// Builds the link node set for a hand: poses from FK or given transforms,
/// geometry rows from each link's local cloud through the encoder.
pub fn build_link_nodes(
    hand: &KinematicHand,
    clouds: &LinkClouds,
    source: LinkPoseSource,
    l_pad: usize,
    encoder: &GeomEncoderParams,
) -> Result<LinkNodeSet> {
    let l = hand.link_count();
    if l > l_pad {
        return Err(Error::invalid(format!(
            "hand has {l} links but only {l_pad} slots"
        )));
    }
    let poses_world: Vec<TransformMatrix> = match source {
        LinkPoseSource::Joints { q, base } => {
            base.validate()?;
            crate::kinematics::forward_kinematics(hand, q)?
                .into_iter()
                .map(|t| se3::compose(&base, &t))
                .collect()
        }
        LinkPoseSource::Poses(list) => {
            if list.len() != l {
                return Err(Error::invalid(format!(
                    "{} poses supplied for {l} links",
                    list.len()
                )));
            }
            for t in list {
                t.validate()?;
            }
            list.to_vec()
        }
    };

    let basis = BasisPointSet::generate(pointcloud::LINK_BPS_SIZE, pointcloud::LINK_BASIS_SEED);
    let mut poses = vec![[0.0; 6]; l_pad];
    let mut geom_embed = vec![vec![0.0; GEOM_EMBED_DIM]; l_pad];
    let mut centers = vec![[0.0; 3]; l_pad];
    let mut scales = vec![0.0; l_pad];
    let mut mask = vec![false; l_pad];

    for (j, link) in hand.links.iter().enumerate() {
        let cloud = clouds.get(&link.name).ok_or_else(|| {
            Error::validation(format!("no point cloud for link {:?}", link.name))
        })?;
        if cloud.is_empty() {
            return Err(Error::validation(format!(
                "link {:?} has an empty point cloud",
                link.name
            )));
        }
        let psi = se3::log_map(&poses_world[j])?;
        poses[j] = [
            psi.rho.x, psi.rho.y, psi.rho.z,
            psi.theta.x, psi.theta.y, psi.theta.z,
        ];
        let centroid = cloud.centroid();
        let scale = cloud.max_radius_from(&centroid);
        let bps = pointcloud::bps_encode(cloud, &basis)?;
        let mut input = Vec::with_capacity(GeomEncoderParams::INPUT_DIM);
        input.extend_from_slice(&bps);
        input.extend_from_slice(&[centroid.x, centroid.y, centroid.z, scale]);
        geom_embed[j] = encoder.encode(&input)?;
        centers[j] = [centroid.x, centroid.y, centroid.z];
        scales[j] = scale;
        mask[j] = true;
    }

    let nodes = LinkNodeSet { poses, geom_embed, centers, scales, mask };
    nodes.validate()?;
    Ok(nodes)
}

/// Relative-transform edge tensors; see module docs for layout and signs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSet {
    /// `object_link[i][j]`: twist from patch frame `i` to link `j`.
    pub object_link: Vec<Vec<[f64; 6]>>,
    /// Strict upper triangle of pairwise link twists, row-major by
    /// `(j, k), j < k`.
    pub link_link: Vec<[f64; 6]>,
}

/// Index into the flattened strict upper triangle for `j < k`.
pub fn rr_index(j: usize, k: usize, l_pad: usize) -> usize {
    debug_assert!(j < k && k < l_pad);
    j * (2 * l_pad - j - 1) / 2 + (k - j - 1)
}

impl EdgeSet {
    /// The ordered-pair link twist for any `(j, k)`: stored value above the
    /// diagonal, exact negation below it, zero on it.
    pub fn rr_ordered(&self, j: usize, k: usize, l_pad: usize) -> [f64; 6] {
        use std::cmp::Ordering;
        match j.cmp(&k) {
            Ordering::Less => self.link_link[rr_index(j, k, l_pad)],
            Ordering::Equal => [0.0; 6],
            Ordering::Greater => {
                let mut e = self.link_link[rr_index(k, j, l_pad)];
                for x in &mut e {
                    *x = -*x;
                }
                e
            }
        }
    }
}

/// Recomputes the edge tensors from the node sets.
///
/// The per-link rotation log is shared across all patch edges for that
/// link, so the object-link block costs one matrix-vector product per pair
/// rather than a full log.
pub fn build_edges(objects: &ObjectNodeSet, links: &LinkNodeSet) -> Result<EdgeSet> {
    let p = objects.patch_count();
    let l_pad = links.slot_count();

    struct LinkFrame {
        theta: [f64; 3],
        v_inv: nalgebra::Matrix3<f64>,
        transform: TransformMatrix,
    }
    let mut frames: Vec<Option<LinkFrame>> = Vec::with_capacity(l_pad);
    for j in 0..l_pad {
        if !links.mask[j] {
            frames.push(None);
            continue;
        }
        let psi = Pose6::from_slice(&links.poses[j]);
        let transform = se3::exp_map(&psi)?;
        // Re-deriving theta through the log keeps stored edges identical to
        // what a fresh consistency check recomputes.
        let theta = se3::so3_log(&transform.rotation)?;
        frames.push(Some(LinkFrame {
            theta: [theta.x, theta.y, theta.z],
            v_inv: se3::so3_left_jacobian_inv(&theta),
            transform,
        }));
    }

    let mut object_link = vec![vec![[0.0; 6]; l_pad]; p];
    for (i, center) in objects.centers.iter().enumerate() {
        let c = Vector3::new(center[0], center[1], center[2]);
        for (j, frame) in frames.iter().enumerate() {
            let Some(frame) = frame else { continue };
            // inverse(translate(c)) * T_link has the link rotation and
            // translation t_link - c, so only the rho block depends on i.
            let rho = frame.v_inv * (frame.transform.translation - c);
            object_link[i][j] = [
                rho.x, rho.y, rho.z,
                frame.theta[0], frame.theta[1], frame.theta[2],
            ];
        }
    }

    let mut link_link = vec![[0.0; 6]; l_pad * (l_pad.saturating_sub(1)) / 2];
    for j in 0..l_pad {
        for k in (j + 1)..l_pad {
            let (Some(fj), Some(fk)) = (&frames[j], &frames[k]) else { continue };
            let rel = se3::compose(&se3::inverse(&fj.transform), &fk.transform);
            let psi = se3::log_map(&rel)?;
            link_link[rr_index(j, k, l_pad)] = [
                psi.rho.x, psi.rho.y, psi.rho.z,
                psi.theta.x, psi.theta.y, psi.theta.z,
            ];
        }
    }

    Ok(EdgeSet { object_link, link_link })
}

/// Provenance carried alongside a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub hand_name: String,
    pub p: usize,
    pub l_pad: usize,
    pub seed: u64,
}

/// The full graph: object nodes, link nodes, and their derived edges.
#[derive(Debug, Clone, PartialEq)]
pub struct TroGraph {
    pub object_nodes: ObjectNodeSet,
    pub link_nodes: LinkNodeSet,
    pub edges: EdgeSet,
    pub meta: GraphMeta,
}

impl TroGraph {
    /// Validates both node sets and derives the edges.
    pub fn new(
        object_nodes: ObjectNodeSet,
        link_nodes: LinkNodeSet,
        meta: GraphMeta,
    ) -> Result<Self> {
        object_nodes.validate()?;
        link_nodes.validate()?;
        if meta.p != object_nodes.patch_count() {
            return Err(Error::validation(format!(
                "meta says {} patches, object nodes have {}",
                meta.p,
                object_nodes.patch_count()
            )));
        }
        if meta.l_pad != link_nodes.slot_count() {
            return Err(Error::validation(format!(
                "meta says {} link slots, link nodes have {}",
                meta.l_pad,
                link_nodes.slot_count()
            )));
        }
        let edges = build_edges(&object_nodes, &link_nodes)?;
        Ok(TroGraph { object_nodes, link_nodes, edges, meta })
    }

    /// A copy of this graph with new pose rows (masked rows forced to
    /// zero) and freshly derived edges. Everything else is shared state:
    /// geometry embeddings, centers, scales, and the mask never change
    /// during diffusion.
    pub fn with_poses(&self, poses: &[[f64; 6]]) -> Result<Self> {
        if poses.len() != self.link_nodes.slot_count() {
            return Err(Error::invalid(format!(
                "{} pose rows for {} slots",
                poses.len(),
                self.link_nodes.slot_count()
            )));
        }
        let mut link_nodes = self.link_nodes.clone();
        for (j, row) in poses.iter().enumerate() {
            link_nodes.poses[j] = if link_nodes.mask[j] { *row } else { [0.0; 6] };
        }
        link_nodes.validate()?;
        let edges = build_edges(&self.object_nodes, &link_nodes)?;
        Ok(TroGraph {
            object_nodes: self.object_nodes.clone(),
            link_nodes,
            edges,
            meta: self.meta.clone(),
        })
    }

    /// Confirms the stored edges match freshly recomputed ones within
    /// [`EDGE_CONSISTENCY_TOL`].
    pub fn verify_edges(&self) -> Result<()> {
        let fresh = build_edges(&self.object_nodes, &self.link_nodes)?;
        let mut worst = 0.0f64;
        for (a, b) in self
            .edges
            .object_link
            .iter()
            .flatten()
            .zip(fresh.object_link.iter().flatten())
        {
            for k in 0..6 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
        for (a, b) in self.edges.link_link.iter().zip(&fresh.link_link) {
            for k in 0..6 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
        if worst > EDGE_CONSISTENCY_TOL {
            return Err(Error::Integrity(format!(
                "stored edges deviate from node-derived edges by {worst:.3e}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GraphDoc {
            schema_version: GRAPH_SCHEMA_VERSION,
            meta: self.meta.clone(),
            object_nodes: self.object_nodes.clone(),
            link_nodes: self.link_nodes.clone(),
            edges: self.edges.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses a graph document, re-validating nodes and verifying the
    /// stored edges against recomputation. Tampered or stale edges fail
    /// with an integrity error rather than being silently rebuilt.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        if doc.schema_version != GRAPH_SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "graph schema version {} unsupported (expected {GRAPH_SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        doc.object_nodes.validate()?;
        doc.link_nodes.validate()?;
        let graph = TroGraph {
            object_nodes: doc.object_nodes,
            link_nodes: doc.link_nodes,
            edges: doc.edges,
            meta: doc.meta,
        };
        graph.verify_edges()?;
        Ok(graph)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    schema_version: u32,
    meta: GraphMeta,
    object_nodes: ObjectNodeSet,
    link_nodes: LinkNodeSet,
    edges: EdgeSet,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::parse_urdf;
    use crate::pointcloud::{object_patch_features, PointCloud};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HAND: &str = r#"
<robot name="minihand">
  <link name="palm"/>
  <link name="finger_a"/>
  <link name="finger_b"/>
  <joint name="ja" type="revolute">
    <parent link="palm"/><child link="finger_a"/>
    <origin xyz="0 0.02 0"/><axis xyz="0 0 1"/>
    <limit lower="-1.57" upper="1.57"/>
  </joint>
  <joint name="jb" type="revolute">
    <parent link="palm"/><child link="finger_b"/>
    <origin xyz="0 -0.02 0"/><axis xyz="0 0 -1"/>
    <limit lower="-1.57" upper="1.57"/>
  </joint>
</robot>
"#;

    fn hand_clouds(hand: &KinematicHand) -> LinkClouds {
        let mut clouds = LinkClouds::new();
        for (i, link) in hand.links.iter().enumerate() {
            let shift = i as f64 * 0.25;
            let points = (0..12)
                .map(|k| {
                    Vector3::new(
                        (k % 3) as f64 * 0.01 + shift,
                        ((k / 3) % 2) as f64 * 0.01,
                        (k / 6) as f64 * 0.01,
                    )
                })
                .collect();
            clouds.insert(link.name.clone(), PointCloud { points });
        }
        clouds
    }

    fn object_nodes(p: usize) -> ObjectNodeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = PointCloud {
            points: (0..120)
                .map(|_| {
                    Vector3::new(
                        rng.gen::<f64>() * 0.06 - 0.03,
                        rng.gen::<f64>() * 0.06 - 0.03,
                        rng.gen::<f64>() * 0.06 - 0.03,
                    )
                })
                .collect(),
        };
        object_patch_features(&cloud, p, 4).unwrap()
    }

    fn meta(p: usize, l_pad: usize) -> GraphMeta {
        GraphMeta { hand_name: "minihand".into(), p, l_pad, seed: 42 }
    }

    fn identity_graph(l_pad: usize) -> TroGraph {
        let hand = parse_urdf(HAND).unwrap();
        let clouds = hand_clouds(&hand);
        let encoder = GeomEncoderParams::seeded(GEOM_ENCODER_SEED);
        let links = build_link_nodes(
            &hand,
            &clouds,
            LinkPoseSource::Joints { q: &[0.0, 0.0], base: TransformMatrix::identity() },
            l_pad,
            &encoder,
        )
        .unwrap();
        TroGraph::new(object_nodes(6), links, meta(6, l_pad)).unwrap()
    }

    #[test]
    fn base_at_identity_gives_finite_small_pose_rows() {
        let g = identity_graph(5);
        // The palm sits at the origin, so its pose row is exactly zero;
        // finger rows are the pure joint-origin offsets.
        assert_eq!(g.link_nodes.poses[0], [0.0; 6]);
        assert!((g.link_nodes.poses[1][1] - 0.02).abs() < 1e-15);
        assert!((g.link_nodes.poses[2][1] + 0.02).abs() < 1e-15);
    }

    #[test]
    fn geometry_rows_do_not_depend_on_joint_values() {
        let hand = parse_urdf(HAND).unwrap();
        let clouds = hand_clouds(&hand);
        let encoder = GeomEncoderParams::seeded(GEOM_ENCODER_SEED);
        let build = |q: &[f64]| {
            build_link_nodes(
                &hand,
                &clouds,
                LinkPoseSource::Joints { q, base: TransformMatrix::identity() },
                4,
                &encoder,
            )
            .unwrap()
        };
        let a = build(&[0.0, 0.0]);
        let b = build(&[0.9, -1.2]);
        assert_eq!(a.geom_embed, b.geom_embed);
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.scales, b.scales);
        assert_ne!(a.poses, b.poses);
    }

    #[test]
    fn geometry_encoder_has_documented_input_width() {
        assert_eq!(GeomEncoderParams::INPUT_DIM, 128);
        let enc = GeomEncoderParams::seeded(GEOM_ENCODER_SEED);
        assert!(enc.encode(&vec![0.0; 127]).is_err());
        let out = enc.encode(&vec![0.1; 128]).unwrap();
        assert_eq!(out.len(), GEOM_EMBED_DIM);
        // Same seed, same parameters.
        let enc2 = GeomEncoderParams::seeded(GEOM_ENCODER_SEED);
        assert_eq!(enc, enc2);
    }

    #[test]
    fn object_edge_of_identity_link_is_negated_center() {
        let g = identity_graph(5);
        // Link 0 (palm) sits at identity, so inverse(translate(c)) * I has
        // twist rho = -c, theta = 0.
        for (i, c) in g.object_nodes.centers.iter().enumerate() {
            let e = g.edges.object_link[i][0];
            assert!((e[0] + c[0]).abs() < 1e-15);
            assert!((e[1] + c[1]).abs() < 1e-15);
            assert!((e[2] + c[2]).abs() < 1e-15);
            assert_eq!(&e[3..6], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn default_shapes_are_25_by_25() {
        let hand = parse_urdf(HAND).unwrap();
        let clouds = hand_clouds(&hand);
        let encoder = GeomEncoderParams::seeded(GEOM_ENCODER_SEED);
        let links = build_link_nodes(
            &hand,
            &clouds,
            LinkPoseSource::Joints { q: &[0.2, 0.1], base: TransformMatrix::identity() },
            25,
            &encoder,
        )
        .unwrap();
        let g = TroGraph::new(object_nodes(25), links, meta(25, 25)).unwrap();
        assert_eq!(g.edges.object_link.len(), 25);
        assert!(g.edges.object_link.iter().all(|row| row.len() == 25));
        assert_eq!(g.edges.link_link.len(), 25 * 24 / 2);
    }

    #[test]
    fn lower_triangle_is_the_inverse_twist() {
        let hand = parse_urdf(HAND).unwrap();
        let clouds = hand_clouds(&hand);
        let encoder = GeomEncoderParams::seeded(GEOM_ENCODER_SEED);
        let links = build_link_nodes(
            &hand,
            &clouds,
            LinkPoseSource::Joints { q: &[0.7, -0.4], base: TransformMatrix::identity() },
            4,
            &encoder,
        )
        .unwrap();
        let g = TroGraph::new(object_nodes(6), links, meta(6, 4)).unwrap();
        let e12 = g.edges.rr_ordered(1, 2, 4);
        let e21 = g.edges.rr_ordered(2, 1, 4);
        // Materialize through the group operations and compare.
        let t = se3::exp_map(&Pose6::from_slice(&e12)).unwrap();
        let back = se3::log_map(&se3::inverse(&t)).unwrap().to_vector();
        for k in 0..6 {
            assert!((e21[k] - back[k]).abs() < 1e-12);
            assert_eq!(e21[k], -e12[k]);
        }
        assert_eq!(g.edges.rr_ordered(2, 2, 4), [0.0; 6]);
    }

    #[test]
    fn masked_rows_produce_zero_edges_and_padding_is_neutral() {
        let narrow = identity_graph(4);
        let wide = identity_graph(9);
        // Real-link edges are unaffected by how much padding follows.
        for i in 0..narrow.object_nodes.patch_count() {
            for j in 0..3 {
                assert_eq!(narrow.edges.object_link[i][j], wide.edges.object_link[i][j]);
            }
            for j in 3..4 {
                assert_eq!(narrow.edges.object_link[i][j], [0.0; 6]);
            }
        }
        for j in 0..3 {
            for k in (j + 1)..3 {
                assert_eq!(
                    narrow.edges.link_link[rr_index(j, k, 4)],
                    wide.edges.link_link[rr_index(j, k, 9)]
                );
            }
        }
        assert_eq!(wide.edges.rr_ordered(5, 7, 9), [0.0; 6]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let g = identity_graph(5);
        let text = g.to_json().unwrap();
        let back = TroGraph::from_json(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn tampered_edges_fail_integrity() {
        let g = identity_graph(5);
        let mut doc: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        doc["edges"]["object_link"][0][0][0] = serde_json::json!(0.5);
        let text = serde_json::to_string(&doc).unwrap();
        match TroGraph::from_json(&text) {
            Err(Error::Integrity(_)) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn all_masked_graph_is_rejected() {
        let g = identity_graph(5);
        let mut doc: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        doc["link_nodes"]["mask"] = serde_json::json!([false, false, false, false, false]);
        // Zero the now-masked rows so only the empty-mask rule can trip.
        for j in 0..5 {
            doc["link_nodes"]["poses"][j] = serde_json::json!(vec![0.0; 6]);
            doc["link_nodes"]["geom_embed"][j] = serde_json::json!(vec![0.0; GEOM_EMBED_DIM]);
            doc["link_nodes"]["centers"][j] = serde_json::json!(vec![0.0; 3]);
            doc["link_nodes"]["scales"][j] = serde_json::json!(0.0);
        }
        let text = serde_json::to_string(&doc).unwrap();
        assert!(matches!(TroGraph::from_json(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn unsupported_schema_version_is_rejected() {
        let g = identity_graph(5);
        let mut doc: serde_json::Value = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        doc["schema_version"] = serde_json::json!(99);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(matches!(TroGraph::from_json(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn replace_poses_rebuilds_consistent_edges() {
        let g = identity_graph(5);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let poses: Vec<[f64; 6]> = (0..5)
            .map(|_| {
                let mut row = [0.0; 6];
                for x in &mut row {
                    *x = rng.gen::<f64>() * 0.4 - 0.2;
                }
                row
            })
            .collect();
        let moved = g.with_poses(&poses).unwrap();
        moved.verify_edges().unwrap();
        // Masked rows stay pinned to zero no matter what was supplied.
        assert_eq!(moved.link_nodes.poses[3], [0.0; 6]);
        assert_eq!(moved.link_nodes.poses[4], [0.0; 6]);
        assert_ne!(moved.edges, g.edges);
    }
}

