//! Handcrafted rotation-invariant point features (RRI, PPF, FPFH) and the
//! raw coordinate features XYZ / ΔXYZ, all returned as [`FeatureMatrix`].

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::geom::{angle_between, knn_graph, NeighborGraph, PointCloud, Vec3};

/// Channel layout of a feature block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayout {
    /// `(r_i, r_ij, θ_ij, φ_ij)` for each of `neighbors` neighbours.
    Rri { neighbors: usize },
    /// One point-pair quadruple per row (rows are graph edges).
    Ppf4,
    Fpfh33,
    Xyz3,
    /// Relative offsets to `k` neighbours, three channels each.
    Dxyz { k: usize },
    Concat,
}

impl FeatureLayout {
    pub fn channels(&self) -> Option<usize> {
        match *self {
            FeatureLayout::Rri { neighbors } => Some(4 * neighbors),
            FeatureLayout::Ppf4 => Some(4),
            FeatureLayout::Fpfh33 => Some(FPFH_CHANNELS),
            FeatureLayout::Xyz3 => Some(3),
            FeatureLayout::Dxyz { k } => Some(3 * k),
            FeatureLayout::Concat => None,
        }
    }
}

/// Row-major `rows × cols` block of per-point (or per-edge) features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    rows: usize,
    cols: usize,
    layout: FeatureLayout,
}

impl FeatureMatrix {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize, layout: FeatureLayout) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(invalid(format!(
                "{} values for a {rows}x{cols} feature matrix",
                values.len()
            )));
        }
        if let Some(c) = layout.channels() {
            if c != cols {
                return Err(invalid(format!("layout {layout:?} needs {c} channels, got {cols}")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
        Ok(Self {
            values,
            rows,
            cols,
            layout,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Regroups per-edge rows into per-point rows (`rows / points` edges per
    /// point, concatenated). Per-point matrices are returned unchanged.
    pub fn per_point(&self, points: usize) -> Result<FeatureMatrix> {
        if points == 0 || self.rows % points != 0 {
            return Err(invalid(format!(
                "{} rows cannot be grouped over {points} points",
                self.rows
            )));
        }
        let group = self.rows / points;
        Ok(FeatureMatrix {
            values: self.values.clone(),
            rows: points,
            cols: self.cols * group,
            layout: if group == 1 {
                self.layout
            } else {
                FeatureLayout::Concat
            },
        })
    }

    /// Column-wise concatenation of blocks with equal row counts.
    pub fn concat(blocks: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let rows = blocks.first().map(|b| b.rows).unwrap_or(0);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(invalid("concatenated feature blocks differ in row count"));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                values.extend_from_slice(b.row(r));
            }
        }
        Ok(FeatureMatrix {
            values,
            rows,
            cols,
            layout: FeatureLayout::Concat,
        })
    }

    /// CSV with header `index,c0,...,c{C-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index");
        for c in 0..self.cols {
            let _ = write!(out, ",c{c}");
        }
        out.push('\n');
        for r in 0..self.rows {
            let _ = write!(out, "{r}");
            for v in self.row(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Point-pair feature of two oriented points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpfQuadruple {
    pub dist: f64,
    pub angle_n1_d: f64,
    pub angle_n2_d: f64,
    pub angle_n1_n2: f64,
}

impl PpfQuadruple {
    pub fn to_array(&self) -> [f64; 4] {
        [self.dist, self.angle_n1_d, self.angle_n2_d, self.angle_n1_n2]
    }
}

/// `(‖d‖, ∠(d, n1), ∠(d, n2), ∠(n1, n2))` with `d = p2 − p1`.
pub fn ppf_pair(p1: &Vec3, n1: &Vec3, p2: &Vec3, n2: &Vec3) -> PpfQuadruple {
    let d = p2 - p1;
    let dist = d.norm();
    let (a1, a2) = if dist == 0.0 {
        (0.0, 0.0)
    } else {
        (angle_between(&d, n1), angle_between(&d, n2))
    };
    PpfQuadruple {
        dist,
        angle_n1_d: a1,
        angle_n2_d: a2,
        angle_n1_n2: angle_between(n1, n2),
    }
}

/// One PPF quadruple per graph edge, rows ordered centre-major.
pub fn ppf_features(cloud: &PointCloud, graph: &NeighborGraph) -> Result<FeatureMatrix> {
    let normals = cloud
        .normals()
        .ok_or_else(|| invalid("PPF features need normals"))?;
    let pts = cloud.points();
    let mut values = Vec::with_capacity(graph.neighbor_indices.len() * 4);
    for (c, nbrs) in graph.rows() {
        for &j in nbrs {
            values.extend_from_slice(&ppf_pair(&pts[c], &normals[c], &pts[j], &normals[j]).to_array());
        }
    }
    FeatureMatrix::new(
        values,
        graph.num_centers() * graph.k,
        4,
        FeatureLayout::Ppf4,
    )
}

/// RRI features from the `k` spatial nearest neighbours of each point. On
/// clouds with fewer than `k + 1` points the neighbour list wraps around.
pub fn rri_features(cloud: &PointCloud, k: usize) -> Result<FeatureMatrix> {
    if k < 2 {
        return Err(invalid(format!("RRI needs at least two neighbours, got {k}")));
    }
    let n = cloud.len();
    if n < 2 {
        return Err(invalid("RRI needs at least two points"));
    }
    let k_eff = k.min(n - 1);
    let centers: Vec<usize> = (0..n).collect();
    let graph = knn_graph(cloud, &centers, k_eff)?;
    let neighbor_indices = (0..n)
        .flat_map(|row| {
            let nb = graph.neighbors(row);
            (0..k).map(move |j| nb[j % k_eff])
        })
        .collect();
    let wrapped = NeighborGraph {
        center_indices: centers,
        neighbor_indices,
        k,
    };
    rri_from_graph(cloud.points(), &wrapped)
}

/// RRI features for every centre of `graph` using its neighbour lists.
pub fn rri_from_graph(points: &[Vec3], graph: &NeighborGraph) -> Result<FeatureMatrix> {
    let k = graph.k;
    if k < 2 {
        return Err(invalid(format!("RRI needs at least two neighbours, got {k}")));
    }
    let mut values = Vec::with_capacity(graph.num_centers() * 4 * k);
    let mut at_origin = 0usize;
    let mut scratch: Vec<(f64, usize, Vec3)> = Vec::with_capacity(k);
    for (c, nbrs) in graph.rows() {
        let p = points[c];
        let r = p.norm();
        if r == 0.0 {
            at_origin += 1;
        }
        scratch.clear();
        scratch.extend(nbrs.iter().map(|&j| {
            let q = points[j];
            let theta = if r == 0.0 { 0.0 } else { angle_between(&p, &q) };
            (theta, j, q)
        }));
        scratch.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let axis = if r == 0.0 { Vec3::zeros() } else { p / r };
        let project = |q: &Vec3| q - axis * q.dot(&axis);
        let reference = project(&scratch[0].2);
        for (theta, _, q) in &scratch {
            let phi = if r == 0.0 {
                0.0
            } else {
                signed_azimuth(&reference, &project(q), &axis)
            };
            values.extend_from_slice(&[r, q.norm(), *theta, phi]);
        }
    }
    if at_origin > 0 {
        log::debug!("RRI: {at_origin} points at the origin got zero angles");
    }
    FeatureMatrix::new(
        values,
        graph.num_centers(),
        4 * k,
        FeatureLayout::Rri { neighbors: k },
    )
}

/// Signed angle from `a` to `b` about `axis`, in (−π, π]; zero when either
/// projection vanishes.
fn signed_azimuth(a: &Vec3, b: &Vec3, axis: &Vec3) -> f64 {
    let scale = a.norm() * b.norm();
    if scale <= 1e-300 {
        return 0.0;
    }
    let phi = axis.dot(&a.cross(b)).atan2(a.dot(b));
    if phi <= -PI {
        PI
    } else {
        phi
    }
}

pub const FPFH_BINS: usize = 11;
pub const FPFH_CHANNELS: usize = 3 * FPFH_BINS;
const FPFH_DIST_FLOOR: f64 = 1e-12;

/// Darboux-frame angles `(θ, α, φ)` of an oriented point pair, with the
/// source chosen as the point whose normal is closer to the connecting line.
/// Returns `None` for coincident points or a normal parallel to the line.
pub fn darboux_angles(p1: &Vec3, n1: &Vec3, p2: &Vec3, n2: &Vec3) -> Option<(f64, f64, f64)> {
    let mut d = p2 - p1;
    let len = d.norm();
    if len == 0.0 {
        return None;
    }
    d /= len;
    let c1 = n1.dot(&d);
    let c2 = n2.dot(&d);
    let (u, nt, phi) = if c1.abs().clamp(0.0, 1.0).acos() > c2.abs().clamp(0.0, 1.0).acos() {
        d = -d;
        (*n2, *n1, -c2)
    } else {
        (*n1, *n2, c1)
    };
    let v = d.cross(&u);
    let vn = v.norm();
    if vn == 0.0 {
        return None;
    }
    let v = v / vn;
    let w = u.cross(&v);
    let alpha = v.dot(&nt);
    let (wn, un) = (w.dot(&nt), u.dot(&nt));
    // atan2(±0, −1) is ±π depending on the sign of a rounding residue; both
    // name the same angle, so pin it to +π to keep the histogram bin stable
    let theta = if wn.abs() < 1e-12 && un < 0.0 { PI } else { wn.atan2(un) };
    Some((theta, alpha, phi))
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = ((value - lo) / (hi - lo) * FPFH_BINS as f64).floor();
    (b.max(0.0) as usize).min(FPFH_BINS - 1)
}

/// Fast point feature histograms over `k` nearest neighbours: 11 bins per
/// Darboux angle, each block normalised to sum 100.
pub fn fpfh_features(cloud: &PointCloud, k: usize) -> Result<FeatureMatrix> {
    if k < 5 {
        return Err(invalid(format!("FPFH needs k >= 5, got {k}")));
    }
    let normals = cloud
        .normals()
        .ok_or_else(|| invalid("FPFH features need normals"))?;
    if normals.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
        return Err(Error::Degenerate("FPFH normals must be unit length".into()));
    }
    let n = cloud.len();
    let centers: Vec<usize> = (0..n).collect();
    let graph = knn_graph(cloud, &centers, k.min(n.saturating_sub(1)).max(1))?;
    let pts = cloud.points();
    let kk = graph.k;

    let mut spfh = vec![0.0; n * FPFH_CHANNELS];
    let incr = 100.0 / kk as f64;
    for (i, nbrs) in graph.rows() {
        let h = &mut spfh[i * FPFH_CHANNELS..(i + 1) * FPFH_CHANNELS];
        for &j in nbrs {
            let (theta, alpha, phi) =
                darboux_angles(&pts[i], &normals[i], &pts[j], &normals[j]).unwrap_or((0.0, 0.0, 0.0));
            h[bin(theta, -PI, PI)] += incr;
            h[FPFH_BINS + bin(alpha, -1.0, 1.0)] += incr;
            h[2 * FPFH_BINS + bin(phi, -1.0, 1.0)] += incr;
        }
    }

    let mut values = vec![0.0; n * FPFH_CHANNELS];
    for (i, nbrs) in graph.rows() {
        let out = &mut values[i * FPFH_CHANNELS..(i + 1) * FPFH_CHANNELS];
        out.copy_from_slice(&spfh[i * FPFH_CHANNELS..(i + 1) * FPFH_CHANNELS]);
        for &j in nbrs {
            let w = 1.0 / ((pts[i] - pts[j]).norm().max(FPFH_DIST_FLOOR) * kk as f64);
            for (o, s) in out.iter_mut().zip(&spfh[j * FPFH_CHANNELS..(j + 1) * FPFH_CHANNELS]) {
                *o += w * s;
            }
        }
        for block in out.chunks_mut(FPFH_BINS) {
            let sum: f64 = block.iter().sum();
            if sum > 0.0 {
                block.iter_mut().for_each(|v| *v *= 100.0 / sum);
            }
        }
    }
    FeatureMatrix::new(values, n, FPFH_CHANNELS, FeatureLayout::Fpfh33)
}

/// Absolute coordinates, one row per point.
pub fn xyz_features(cloud: &PointCloud) -> FeatureMatrix {
    let values = cloud.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    FeatureMatrix {
        values,
        rows: cloud.len(),
        cols: 3,
        layout: FeatureLayout::Xyz3,
    }
}

/// Offsets `p_j − p_i` to every neighbour, concatenated per centre.
pub fn dxyz_features(cloud: &PointCloud, graph: &NeighborGraph) -> Result<FeatureMatrix> {
    let pts = cloud.points();
    if graph
        .center_indices
        .iter()
        .chain(&graph.neighbor_indices)
        .any(|&i| i >= pts.len())
    {
        return Err(invalid("graph index out of range for cloud"));
    }
    let values = graph
        .rows()
        .flat_map(|(c, nbrs)| {
            nbrs.iter().flat_map(move |&j| {
                let d = pts[j] - pts[c];
                [d.x, d.y, d.z]
            })
        })
        .collect();
    FeatureMatrix::new(
        values,
        graph.num_centers(),
        3 * graph.k,
        FeatureLayout::Dxyz { k: graph.k },
    )
}

pub fn xyz_dxyz_features(
    cloud: &PointCloud,
    graph: &NeighborGraph,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    Ok((xyz_features(cloud), dxyz_features(cloud, graph)?))
}
