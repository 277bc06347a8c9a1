//! Point-cloud containers, rigid transforms, sampling and neighbourhood
//! construction.
//!
//! Everything here is a pure function of its inputs. Nearest-neighbour
//! queries are brute force, which is adequate for the few thousand points
//! an object-level scan carries.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const NORMAL_TOL: f64 = 1e-6;
const ROTATION_TOL: f64 = 1e-9;

/// An ordered set of 3D points with optional unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} is not finite")));
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        cloud.set_normals(normals)?;
        Ok(cloud)
    }

    pub fn set_normals(&mut self, normals: Vec<Vec3>) -> Result<()> {
        if normals.len() != self.points.len() {
            return Err(invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some(i) = normals
            .iter()
            .position(|n| (n.norm() - 1.0).abs() > NORMAL_TOL)
        {
            return Err(invalid(format!("normal {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(())
    }

    pub fn clear_normals(&mut self) {
        self.normals = None;
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    /// Copy translated so that the centroid sits at the origin.
    pub fn centered(&self) -> (PointCloud, Vec3) {
        let c = self.centroid();
        let points = self.points.iter().map(|p| p - c).collect();
        (
            PointCloud {
                points,
                normals: self.normals.clone(),
            },
            c,
        )
    }

    /// Sub-cloud made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!(
                "index {bad} out of range for {} points",
                self.len()
            )));
        }
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| indices.iter().map(|&i| n[i]).collect());
        let mut out = PointCloud::new(points)?;
        out.normals = normals;
        Ok(out)
    }
}

/// A rotation plus translation; maps `p` to `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validated constructor: the rotation must be orthonormal with det +1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if ortho > ROTATION_TOL {
            return Err(invalid(format!(
                "rotation is not orthonormal (deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(invalid(format!("rotation determinant is {det}, expected +1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis: Vec3, angle_rad: f64, translation: Vec3) -> Self {
        let rotation = if axis.norm() == 0.0 || angle_rad == 0.0 {
            Mat3::identity()
        } else {
            Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad).into_inner()
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Rotation angle in radians, from the trace.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Row-major rotation followed by translation.
    pub fn to_row12(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row12(v: &[f64; 12]) -> Result<Self> {
        let rotation = Mat3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Vec3::new(v[9], v[10], v[11]))
    }
}

/// Applies `t` to every point (and rotates normals).
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
    }
}

/// Draws a transform whose rotation axis is uniform on the sphere, whose
/// angle is uniform in `rot_range_deg` and whose translation components are
/// uniform in `trans_range`.
pub fn random_se3<R: Rng + ?Sized>(
    rot_range_deg: (f64, f64),
    trans_range: (f64, f64),
    rng: &mut R,
) -> Result<RigidTransform> {
    let (rlo, rhi) = rot_range_deg;
    if !(0.0..=180.0).contains(&rlo) || !(0.0..=180.0).contains(&rhi) || rlo > rhi {
        return Err(invalid(format!(
            "rotation range [{rlo}, {rhi}] must satisfy 0 <= lo <= hi <= 180"
        )));
    }
    let (tlo, thi) = trans_range;
    if !(tlo.is_finite() && thi.is_finite()) || tlo > thi {
        return Err(invalid(format!("translation range [{tlo}, {thi}] is invalid")));
    }
    let axis = random_unit_vector(rng);
    let angle = if rlo == rhi {
        rlo
    } else {
        rng.random_range(rlo..=rhi)
    };
    let mut sample = |lo: f64, hi: f64| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let translation = Vec3::new(sample(tlo, thi), sample(tlo, thi), sample(tlo, thi));
    Ok(RigidTransform::from_axis_angle(
        axis,
        angle.to_radians(),
        translation,
    ))
}

/// Uniform direction on the unit sphere (normalised Gaussian).
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Greedy max-min subset selection starting from `start_index`. Ties go to
/// the lower index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, start_index: usize) -> Result<Vec<usize>> {
    farthest_point_sample_points(cloud.points(), k, start_index)
}

pub(crate) fn farthest_point_sample_points(
    points: &[Vec3],
    k: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(invalid(format!("cannot sample {k} of {n} points")));
    }
    if start_index >= n {
        return Err(invalid(format!(
            "start index {start_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start_index;
    for _ in 0..k {
        selected.push(current);
        let c = points[current];
        min_d2[current] = f64::NEG_INFINITY;
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = min_d2[i];
            if d == f64::NEG_INFINITY {
                continue;
            }
            let d = d.min((p - c).norm_squared());
            min_d2[i] = d;
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(selected)
}

/// Neighbour lists for a set of centre points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    pub center_indices: Vec<usize>,
    /// Row-major `centers × k` matrix of neighbour indices.
    pub neighbor_indices: Vec<usize>,
    pub k: usize,
}

impl NeighborGraph {
    pub fn num_centers(&self) -> usize {
        self.center_indices.len()
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.neighbor_indices[row * self.k..(row + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.center_indices
            .iter()
            .copied()
            .zip(self.neighbor_indices.chunks(self.k.max(1)))
    }
}

/// `k` nearest neighbours (self excluded) of each centre, by Euclidean
/// distance with ties broken by lower index. Rows are sorted nearest first.
pub fn knn_graph(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<NeighborGraph> {
    knn_graph_points(cloud.points(), centers, k)
}

pub(crate) fn knn_graph_points(points: &[Vec3], centers: &[usize], k: usize) -> Result<NeighborGraph> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(invalid(format!(
            "knn needs 1 <= k < N, got k = {k} with N = {n}"
        )));
    }
    let mut neighbor_indices = Vec::with_capacity(centers.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in centers {
        if c >= n {
            return Err(invalid(format!("center {c} out of range for {n} points")));
        }
        nearest_into(points, &points[c], Some(c), k, &mut scratch);
        neighbor_indices.extend(scratch.iter().map(|&(_, i)| i));
    }
    Ok(NeighborGraph {
        center_indices: centers.to_vec(),
        neighbor_indices,
        k,
    })
}

/// Fills `out` with the `k` nearest points to `query` sorted by
/// (distance, index), skipping `exclude`.
pub(crate) fn nearest_into(
    points: &[Vec3],
    query: &Vec3,
    exclude: Option<usize>,
    k: usize,
    out: &mut Vec<(f64, usize)>,
) {
    out.clear();
    out.extend(
        points
            .iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != exclude)
            .map(|(i, p)| ((p - query).norm_squared(), i)),
    );
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(out.len());
    if k < out.len() {
        out.select_nth_unstable_by(k, cmp);
        out.truncate(k);
    }
    out.sort_unstable_by(cmp);
}

/// Index of the nearest point to `query` (ties to the lower index).
pub(crate) fn nearest_index(points: &[Vec3], query: &Vec3) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - query).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Result of normal estimation, with the indices whose neighbourhood had a
/// vanishing covariance and therefore received the fallback normal.
#[derive(Debug, Clone)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub degenerate: Vec<usize>,
}

pub const FALLBACK_NORMAL: Vec3 = Vec3::new(0.0, 0.0, 1.0);

/// PCA normals from each point and its `k` nearest neighbours, oriented
/// towards the coordinate origin.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> PointCloud {
    estimate_normals_with_diagnostics(cloud, k).cloud
}

pub fn estimate_normals_with_diagnostics(cloud: &PointCloud, k: usize) -> NormalEstimate {
    let points = cloud.points();
    let n = points.len();
    let k = k.min(n.saturating_sub(1));
    let mut normals = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    let mut scratch = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        nearest_into(points, p, Some(i), k, &mut scratch);
        let count = (scratch.len() + 1) as f64;
        let mean = (p + scratch.iter().map(|&(_, j)| points[j]).sum::<Vec3>()) / count;
        let mut cov = (p - mean) * (p - mean).transpose();
        for &(_, j) in &scratch {
            let d = points[j] - mean;
            cov += d * d.transpose();
        }
        cov /= count;
        let scale = mean.norm_squared().max(1.0);
        if cov.abs().max() <= 1e-24 * scale {
            degenerate.push(i);
            normals.push(FALLBACK_NORMAL);
            continue;
        }
        let eig = SymmetricEigen::new(cov);
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (j, &v)| if v < acc.1 { (j, v) } else { acc });
        let mut nrm: Vec3 = eig.eigenvectors.column(imin).into_owned();
        nrm /= nrm.norm();
        if nrm.dot(&(-p)) < 0.0 {
            nrm = -nrm;
        }
        normals.push(nrm);
    }
    if !degenerate.is_empty() {
        log::debug!(
            "normal estimation: {} degenerate neighbourhoods used the fallback normal",
            degenerate.len()
        );
    }
    let mut out = cloud.clone();
    out.normals = Some(normals);
    NormalEstimate {
        cloud: out,
        degenerate,
    }
}

/// Angle between two vectors through a clamped arccos; zero if either is
/// the zero vector.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn identity_leaves_cube_unchanged() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(Vec3::new(x, y, z));
                }
            }
        }
        let cube = PointCloud::new(pts).unwrap();
        assert_eq!(apply_transform(&cube, &RigidTransform::identity()), cube);
    }

    #[test]
    fn quarter_turn_about_z() {
        let c = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let t = RigidTransform::from_axis_angle(Vec3::z(), FRAC_PI_2, Vec3::zeros());
        let out = apply_transform(&c, &t);
        assert!((out.points()[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(200, 1);
        for _ in 0..20 {
            let t = random_se3((0.0, 180.0), (-0.5, 0.5), &mut rng).unwrap();
            let back = apply_transform(&apply_transform(&cloud, &t), &t.inverse());
            for (a, b) in back.points().iter().zip(cloud.points()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn random_se3_fixed_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_se3((0.0, 0.0), (0.0, 0.0), &mut rng).unwrap();
        assert_eq!(t.rotation, Mat3::identity());
        assert_eq!(t.translation, Vec3::zeros());
        for _ in 0..10 {
            let t = random_se3((45.0, 45.0), (-0.5, 0.5), &mut rng).unwrap();
            assert!((t.angle().to_degrees() - 45.0).abs() < 1e-9);
            assert!(RigidTransform::new(t.rotation, t.translation).is_ok());
        }
        assert!(random_se3((10.0, 190.0), (0.0, 0.0), &mut rng).is_err());
        assert!(random_se3((50.0, 40.0), (0.0, 0.0), &mut rng).is_err());
        assert!(random_se3((0.0, 10.0), (1.0, 0.0), &mut rng).is_err());
    }

    #[test]
    fn random_axis_octants_are_uniform() {
        // Chi-square over the 8 octants of the rotation axis; 7 dof critical
        // value at p = 0.01 is 18.475.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 8];
        let samples = 10_000;
        for _ in 0..samples {
            let t = random_se3((0.0, 180.0), (0.0, 0.0), &mut rng).unwrap();
            let r = t.rotation;
            // axis from the skew part; angle 0 or 180 makes it ill-defined
            let axis = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
            if axis.norm() < 1e-9 {
                continue;
            }
            let oct = (axis.x > 0.0) as usize | ((axis.y > 0.0) as usize) << 1 | ((axis.z > 0.0) as usize) << 2;
            counts[oct] += 1;
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 18.475, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn fps_square_picks_opposite_corner() {
        let sq = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ])
        .unwrap();
        assert_eq!(farthest_point_sample(&sq, 2, 0).unwrap(), vec![0, 2]);
        let mut all = farthest_point_sample(&sq, 4, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&sq, 5, 0).is_err());
        assert!(farthest_point_sample(&sq, 2, 4).is_err());
    }

    #[test]
    fn knn_colinear_and_ties() {
        let line = PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ])
        .unwrap();
        let g = knn_graph(&line, &[1], 2).unwrap();
        let mut row = g.neighbors(0).to_vec();
        row.sort();
        assert_eq!(row, vec![0, 2]);

        let sq = PointCloud::new(vec![
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(-1.0, 1.0, 0.0),
            Vec3::new(-1.0, -1.0, 0.0),
            Vec3::new(1.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, 0.0),
        ])
        .unwrap();
        let g = knn_graph(&sq, &[4], 1).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
        assert!(knn_graph(&sq, &[0], 5).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let cloud = random_cloud(512, 5);
        let centers: Vec<usize> = (0..cloud.len()).collect();
        let g = knn_graph(&cloud, &centers, 16).unwrap();
        let pts = cloud.points();
        for (row, (c, nbrs)) in g.rows().enumerate() {
            assert_eq!(row, c);
            let mut all: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&j| j != c)
                .map(|j| ((pts[j] - pts[c]).norm(), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all[..16].iter().map(|x| x.1).collect();
            assert_eq!(nbrs, &expect[..]);
        }
    }

    #[test]
    fn plane_normals_face_origin() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(Vec3::new(i as f64 * 0.1 - 0.45, j as f64 * 0.1 - 0.45, 1.0));
            }
        }
        let cloud = estimate_normals(&PointCloud::new(pts).unwrap(), 8);
        for n in cloud.normals().unwrap() {
            assert!((n - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn sphere_normals_point_inward() {
        // Fibonacci sphere, 2000 points.
        let n = 2000;
        let ga = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = i as f64 * ga;
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        let cloud = estimate_normals(&PointCloud::new(pts).unwrap(), 8);
        for (p, nrm) in cloud.points().iter().zip(cloud.normals().unwrap()) {
            let ang = angle_between(nrm, &(-p)).to_degrees();
            assert!(ang < 5.0, "angle {ang}");
        }
    }

    #[test]
    fn repeated_point_falls_back() {
        let cloud = PointCloud::new(vec![Vec3::new(0.3, 0.2, 0.1); 6]).unwrap();
        let est = estimate_normals_with_diagnostics(&cloud, 4);
        assert_eq!(est.degenerate.len(), 6);
        for n in est.cloud.normals().unwrap() {
            assert_eq!(*n, FALLBACK_NORMAL);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
        assert!(PointCloud::with_normals(vec![Vec3::zeros()], vec![Vec3::new(0.0, 0.0, 2.0)]).is_err());
        let reflect = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vec3::zeros()).is_err());
    }
}
