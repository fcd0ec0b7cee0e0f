//! Point-cloud utilities: farthest-point sampling, patch partitions,
//! basis-point distance encodings, and the two on-disk cloud formats.
//!
//! The basis-point encoding (BPS) describes a cloud by its distances to a
//! fixed set of reference points: the cloud is first normalized into the
//! unit sphere (centered on its centroid, scaled by its largest centroid
//! distance), then `feature[j] = min_i |p_i - b_j|` over the normalized
//! points. Two clouds differing only by translation or uniform scale
//! therefore encode identically.

use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::ObjectNodeSet;
use crate::{Error, Result};

/// Basis size for link-geometry encodings.
pub const LINK_BPS_SIZE: usize = 124;
/// Basis size for per-patch object encodings, projected down afterwards.
pub const OBJECT_BPS_SIZE: usize = 61;
/// Width of the per-patch object feature after random projection.
pub const OBJECT_FEATURE_DIM: usize = 64;

/// Fixed seeds for the shared bases and the object-feature projection.
/// These are arbitrary but frozen: every consumer of the encodings must see
/// the same reference geometry or stored features stop matching.
pub const LINK_BASIS_SEED: u64 = 124_001;
pub const OBJECT_BASIS_SEED: u64 = 61_001;
pub const OBJECT_PROJECTION_SEED: u64 = 64_001;

/// Magic bytes opening a binary `.xyzb` cloud file.
pub const XYZB_MAGIC: &[u8; 4] = b"XYZB";

/// An unordered set of 3D points, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        let sum: Vector3<f64> = self.points.iter().sum();
        sum / self.points.len() as f64
    }

    /// Largest distance of any point from `origin`.
    pub fn max_radius_from(&self, origin: &Vector3<f64>) -> f64 {
        self.points
            .iter()
            .map(|p| (p - origin).norm())
            .fold(0.0f64, f64::max)
    }

    /// Diagonal of the axis-aligned bounding box; the link-"length" proxy
    /// used by the embodiment similarity score.
    pub fn bounding_box_diagonal(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (hi - lo).norm()
    }
}

/// A frozen set of reference points inside the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisPointSet {
    pub points: Vec<Vector3<f64>>,
}

impl BasisPointSet {
    /// Samples `size` points uniformly inside the unit sphere. The same
    /// `(size, seed)` pair always reproduces the same basis bit for bit.
    pub fn generate(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(size);
        while points.len() < size {
            let p = Vector3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            if p.norm_squared() <= 1.0 {
                points.push(p);
            }
        }
        BasisPointSet { points }
    }

    /// Wraps caller-provided basis points, rejecting any outside the unit
    /// sphere (allowing a hair of round-off on the boundary).
    pub fn from_points(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("basis point set is empty"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|x| x.is_finite()) || p.norm() > 1.0 + 1e-12 {
                return Err(Error::invalid(format!(
                    "basis point {i} lies outside the unit sphere"
                )));
            }
        }
        Ok(BasisPointSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Greedy farthest-point sampling.
///
/// The first index is drawn uniformly from a generator seeded with `seed`;
/// every following pick maximizes the distance to the already-chosen set,
/// breaking ties toward the lowest index. Requires `1 <= k <= cloud.len()`.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "farthest_point_sample: k = {k} outside 1..={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut chosen = Vec::with_capacity(k);
    chosen.push(first);
    // min_dist[i] tracks the distance from point i to its nearest chosen
    // point; each new pick only needs one update pass.
    let mut min_dist: Vec<f64> = cloud
        .points
        .iter()
        .map(|p| (p - cloud.points[first]).norm())
        .collect();
    while chosen.len() < k {
        let mut best = 0usize;
        let mut best_dist = -1.0f64;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_dist {
                best = i;
                best_dist = d;
            }
        }
        chosen.push(best);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = (cloud.points[i] - cloud.points[best]).norm();
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// Assigns every point to its nearest center, ties toward the lowest center
/// index. `centers` are indices into `cloud`.
pub fn partition_patches(cloud: &PointCloud, centers: &[usize]) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(Error::invalid("partition_patches: no centers"));
    }
    for &c in centers {
        if c >= cloud.len() {
            return Err(Error::invalid(format!(
                "partition_patches: center index {c} out of range for {} points",
                cloud.len()
            )));
        }
    }
    let labels = cloud
        .points
        .iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for (label, &c) in centers.iter().enumerate() {
                let d = (p - cloud.points[c]).norm_squared();
                if d < best_dist {
                    best = label;
                    best_dist = d;
                }
            }
            best
        })
        .collect();
    Ok(labels)
}

/// Basis-point encoding of a cloud (see module docs for the normalization).
/// A degenerate cloud whose points all coincide normalizes to the origin,
/// so its features are the basis-point norms themselves.
pub fn bps_encode(cloud: &PointCloud, basis: &BasisPointSet) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::invalid("bps_encode: empty cloud"));
    }
    let centroid = cloud.centroid();
    let scale = cloud.max_radius_from(&centroid);
    if scale < 1e-12 {
        return Ok(basis.points.iter().map(|b| b.norm()).collect());
    }
    let normalized: Vec<Vector3<f64>> = cloud
        .points
        .iter()
        .map(|p| (p - centroid) / scale)
        .collect();
    Ok(basis
        .points
        .iter()
        .map(|b| {
            normalized
                .iter()
                .map(|p| (p - b).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// The fixed random projection taking a 61-entry object BPS vector to the
/// 64-dim patch feature. Entries are standard normal scaled by
/// `1/sqrt(OBJECT_BPS_SIZE)`; row-major `64 x 61`.
fn object_projection() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(OBJECT_PROJECTION_SEED);
    let scale = 1.0 / (OBJECT_BPS_SIZE as f64).sqrt();
    (0..OBJECT_FEATURE_DIM)
        .map(|_| {
            (0..OBJECT_BPS_SIZE)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    g * scale
                })
                .collect()
        })
        .collect()
}

/// Splits an object cloud into `patch_count` patches by farthest-point
/// sampling and encodes each patch into a 64-dim feature.
///
/// Per patch: normalize the member points into the unit sphere, take a
/// 61-point BPS descriptor against a fixed-seed basis, then project to 64
/// dims with a fixed random matrix shared across patches. A patch left
/// empty by tie-breaking keeps its center and gets a zero feature. The
/// object scale is the largest centroid distance over the whole cloud.
pub fn object_patch_features(
    cloud: &PointCloud,
    patch_count: usize,
    seed: u64,
) -> Result<ObjectNodeSet> {
    let center_idx = farthest_point_sample(cloud, patch_count, seed)?;
    let labels = partition_patches(cloud, &center_idx)?;
    let basis = BasisPointSet::generate(OBJECT_BPS_SIZE, OBJECT_BASIS_SEED);
    let projection = object_projection();

    let mut features = Vec::with_capacity(patch_count);
    for patch in 0..patch_count {
        let members: Vec<Vector3<f64>> = cloud
            .points
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == patch)
            .map(|(p, _)| *p)
            .collect();
        if members.is_empty() {
            features.push(vec![0.0; OBJECT_FEATURE_DIM]);
            continue;
        }
        let patch_cloud = PointCloud { points: members };
        let bps = bps_encode(&patch_cloud, &basis)?;
        let projected = projection
            .iter()
            .map(|row| row.iter().zip(&bps).map(|(w, f)| w * f).sum())
            .collect();
        features.push(projected);
    }

    let centroid = cloud.centroid();
    let nodes = ObjectNodeSet {
        centers: center_idx
            .iter()
            .map(|&i| {
                let p = cloud.points[i];
                [p.x, p.y, p.z]
            })
            .collect(),
        scale: cloud.max_radius_from(&centroid),
        features,
    };
    nodes.validate()?;
    Ok(nodes)
}

/// Reads a whitespace text cloud: one `x y z` triple per line, blank lines
/// skipped. Reports the 1-based line number of the first malformed line.
pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut points = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut coords = [0.0f64; 3];
        for (k, f) in fields.iter().enumerate() {
            coords[k] = f.parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("bad coordinate {f:?}: {e}"),
            })?;
        }
        points.push(Vector3::new(coords[0], coords[1], coords[2]));
    }
    PointCloud::new(points)
}

/// Writes the text format read by [`load_xyz`]. Coordinates use the
/// shortest decimal that round-trips the value exactly.
pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for p in &cloud.points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the binary format: magic `XYZB`, little-endian u32 count, then
/// `count` packed xyz triples of little-endian f32.
pub fn load_xyzb(path: &Path) -> Result<PointCloud> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != XYZB_MAGIC {
        return Err(Error::validation(format!(
            "bad xyzb magic {magic:?}, expected {XYZB_MAGIC:?}"
        )));
    }
    let count = file.read_u32::<LittleEndian>()? as usize;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = file.read_f32::<LittleEndian>()? as f64;
        let y = file.read_f32::<LittleEndian>()? as f64;
        let z = file.read_f32::<LittleEndian>()? as f64;
        points.push(Vector3::new(x, y, z));
    }
    PointCloud::new(points)
}

/// Writes the binary format read by [`load_xyzb`]. Coordinates narrow to
/// f32, so one save/load cycle is lossy but every later cycle is exact.
pub fn save_xyzb(cloud: &PointCloud, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(XYZB_MAGIC)?;
    w.write_u32::<LittleEndian>(cloud.len() as u32)?;
    for p in &cloud.points {
        w.write_f32::<LittleEndian>(p.x as f32)?;
        w.write_f32::<LittleEndian>(p.y as f32)?;
        w.write_f32::<LittleEndian>(p.z as f32)?;
    }
    w.flush()?;
    Ok(())
}
