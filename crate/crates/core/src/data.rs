//! Synthetic meshes, surface sampling, virtual depth scans, partial crops,
//! noise, and registration pair assembly with overlap filtering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::geom::{
    apply_transform, farthest_point_sample_points, nearest_into, random_se3, random_unit_vector,
    PointCloud, RigidTransform, Vec3,
};
use crate::io;

/// Triangle mesh with outward (counter-clockwise) winding.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

const MIN_AREA: f64 = 1e-14;

impl TriMesh {
    /// Validates indices and drops zero-area triangles.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(invalid(format!("triangle {t:?} indexes past {n} vertices")));
        }
        let mut mesh = Self {
            vertices,
            triangles,
        };
        mesh.triangles.retain(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            (b - a).cross(&(c - a)).norm() * 0.5 > MIN_AREA
        });
        if mesh.triangles.is_empty() {
            return Err(invalid("mesh has no triangles with positive area"));
        }
        Ok(mesh)
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a)).norm() * 0.5
    }

    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn transformed(&self, t: &RigidTransform) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| t.apply_point(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    fn append(&mut self, other: &TriMesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| t.map(|i| i + off)));
    }

    /// Centres the bounding box at the origin and scales the farthest vertex
    /// onto the unit sphere.
    fn normalize_to_unit_sphere(&mut self) {
        let (lo, hi) = self.vertices.iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), v| (lo.inf(v), hi.sup(v)),
        );
        let c = (lo + hi) * 0.5;
        let r = self
            .vertices
            .iter()
            .map(|v| (v - c).norm())
            .fold(0.0, f64::max);
        for v in &mut self.vertices {
            *v = (*v - c) / r;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Box,
    Cylinder,
    Torus,
    Capsule,
    Composite,
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(ShapeKind::Box),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "torus" => Ok(ShapeKind::Torus),
            "capsule" => Ok(ShapeKind::Capsule),
            "composite" => Ok(ShapeKind::Composite),
            _ => Err(invalid(format!("unknown shape kind {s:?}"))),
        }
    }
}

/// Dimensions for [`make_shape`]; each kind reads the fields it needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    /// Box edge lengths.
    pub extents: Vec3,
    /// Cylinder / capsule radius, torus tube radius.
    pub radius: f64,
    /// Cylinder height / capsule straight length, torus ring radius.
    pub length: f64,
    /// Segments around the axis (torus: around the ring).
    pub segments: usize,
    /// Rings along the profile (torus: around the tube; capsule: per cap).
    pub rings: usize,
    /// Number of primitives in a composite.
    pub parts: usize,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            extents: Vec3::new(1.0, 1.0, 1.0),
            radius: 0.15,
            length: 0.4,
            segments: 32,
            rings: 16,
            parts: 4,
        }
    }
}

fn box_mesh(e: Vec3) -> Result<TriMesh> {
    let h = e * 0.5;
    let vertices = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            )
        })
        .collect();
    let quads = [
        [0, 2, 3, 1], // z−
        [4, 5, 7, 6], // z+
        [0, 1, 5, 4], // y−
        [2, 6, 7, 3], // y+
        [0, 4, 6, 2], // x−
        [1, 3, 7, 5], // x+
    ];
    let triangles = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriMesh::new(vertices, triangles)
}

/// Surface of revolution about z from a profile of `(radius, z)` points
/// running from the bottom pole/rim to the top; closes flat ends with fans.
fn revolve(profile: &[(f64, f64)], segments: usize) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let rings = profile.len();
    for &(r, z) in profile {
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push(Vec3::new(r * a.cos(), r * a.sin(), z));
        }
    }
    let idx = |ring: usize, s: usize| ring * segments + s % segments;
    for ring in 0..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (idx(ring, s), idx(ring, s + 1), idx(ring + 1, s + 1), idx(ring + 1, s));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let bottom = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, profile[0].1));
    let top = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, profile[rings - 1].1));
    if profile[0].0 > 0.0 {
        for s in 0..segments {
            triangles.push([bottom, idx(0, s + 1), idx(0, s)]);
        }
    }
    if profile[rings - 1].0 > 0.0 {
        for s in 0..segments {
            triangles.push([top, idx(rings - 1, s), idx(rings - 1, s + 1)]);
        }
    }
    TriMesh::new(vertices, triangles)
}

fn cylinder_mesh(radius: f64, height: f64, segments: usize) -> Result<TriMesh> {
    revolve(&[(radius, -height / 2.0), (radius, height / 2.0)], segments)
}

fn capsule_mesh(radius: f64, length: f64, segments: usize, rings: usize) -> Result<TriMesh> {
    let mut profile = Vec::new();
    let half = length / 2.0;
    for i in 0..=rings {
        let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::FRAC_PI_2 * i as f64 / rings as f64;
        profile.push((radius * a.cos(), -half + radius * a.sin()));
    }
    for i in 0..=rings {
        let a = std::f64::consts::FRAC_PI_2 * i as f64 / rings as f64;
        profile.push((radius * a.cos(), half + radius * a.sin()));
    }
    // drop the zero-radius poles; the end fans close the caps instead
    profile.retain(|&(r, _)| r > 1e-12);
    let mut mesh = revolve(&profile, segments)?;
    let n = mesh.vertices.len();
    mesh.vertices[n - 2].z = -half - radius;
    mesh.vertices[n - 1].z = half + radius;
    Ok(mesh)
}

fn torus_mesh(ring: f64, tube: f64, u: usize, v: usize) -> Result<TriMesh> {
    let mut vertices = Vec::with_capacity(u * v);
    for i in 0..u {
        let a = std::f64::consts::TAU * i as f64 / u as f64;
        for j in 0..v {
            let b = std::f64::consts::TAU * j as f64 / v as f64;
            let r = ring + tube * b.cos();
            vertices.push(Vec3::new(r * a.cos(), r * a.sin(), tube * b.sin()));
        }
    }
    let idx = |i: usize, j: usize| (i % u) * v + j % v;
    let mut triangles = Vec::with_capacity(2 * u * v);
    for i in 0..u {
        for j in 0..v {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    TriMesh::new(vertices, triangles)
}

/// Random union of primitives in random poses; generically asymmetric.
fn composite_mesh(p: &ShapeParams, rng: &mut ChaCha8Rng) -> Result<TriMesh> {
    let mut mesh = TriMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    for part in 0..p.parts.max(1) {
        let prim = match rng.random_range(0..4) {
            0 => box_mesh(Vec3::new(
                rng.random_range(0.2..0.9),
                rng.random_range(0.15..0.6),
                rng.random_range(0.1..0.5),
            ))?,
            1 => cylinder_mesh(rng.random_range(0.08..0.25), rng.random_range(0.3..0.9), 20)?,
            2 => {
                let ring = rng.random_range(0.2..0.35);
                torus_mesh(ring, rng.random_range(0.05f64..0.1).min(ring * 0.5), 24, 12)?
            }
            _ => capsule_mesh(rng.random_range(0.08..0.2), rng.random_range(0.2..0.6), 20, 6)?,
        };
        let offset = if part == 0 {
            Vec3::zeros()
        } else {
            random_unit_vector(rng) * rng.random_range(0.2..0.5)
        };
        let pose = random_se3((0.0, 180.0), (0.0, 0.0), rng)?;
        let pose = RigidTransform {
            translation: offset,
            ..pose
        };
        mesh.append(&prim.transformed(&pose));
    }
    TriMesh::new(mesh.vertices, mesh.triangles)
}

/// Watertight primitive (or union of primitives) scaled into the unit sphere.
pub fn make_shape(kind: ShapeKind, params: &ShapeParams, seed: u64) -> Result<TriMesh> {
    let p = params;
    let positive = |v: f64, name: &str| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("{name} must be positive, got {v}")))
        }
    };
    let mut mesh = match kind {
        ShapeKind::Box => {
            for c in p.extents.iter() {
                positive(*c, "box extent")?;
            }
            box_mesh(p.extents)?
        }
        ShapeKind::Cylinder => {
            positive(p.radius, "radius")?;
            positive(p.length, "height")?;
            if p.segments < 3 {
                return Err(invalid("cylinder needs at least 3 segments"));
            }
            cylinder_mesh(p.radius, p.length, p.segments)?
        }
        ShapeKind::Torus => {
            positive(p.radius, "tube radius")?;
            positive(p.length, "ring radius")?;
            if p.radius >= p.length || p.segments < 3 || p.rings < 3 {
                return Err(invalid("torus needs tube < ring radius and >= 3 segments each way"));
            }
            torus_mesh(p.length, p.radius, p.segments, p.rings)?
        }
        ShapeKind::Capsule => {
            positive(p.radius, "radius")?;
            positive(p.length, "length")?;
            if p.segments < 3 || p.rings < 1 {
                return Err(invalid("capsule needs >= 3 segments and >= 1 ring"));
            }
            capsule_mesh(p.radius, p.length, p.segments, p.rings)?
        }
        ShapeKind::Composite => {
            if p.parts == 0 {
                return Err(invalid("composite needs at least one part"));
            }
            composite_mesh(p, &mut ChaCha8Rng::seed_from_u64(seed))?
        }
    };
    mesh.normalize_to_unit_sphere();
    Ok(mesh)
}

/// Area-weighted uniform surface samples with face normals.
pub fn surface_sample(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(invalid("surface_sample needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.area(t);
        cdf.push(acc);
    }
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random_range(0.0..acc);
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.corners(t);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        points.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
        normals.push(mesh.face_normal(t));
    }
    PointCloud::with_normals(points, normals)
}

/// Index of the triangle each surface sample came from is not kept; this
/// helper recovers per-triangle counts for tests and diagnostics.
pub fn triangle_of_point(mesh: &TriMesh, p: &Vec3) -> Option<usize> {
    (0..mesh.triangles.len()).find(|&t| point_in_triangle(mesh, t, p, 1e-9))
}

pub fn point_in_triangle(mesh: &TriMesh, t: usize, p: &Vec3, tol: f64) -> bool {
    let [a, b, c] = mesh.corners(t);
    let n = (b - a).cross(&(c - a));
    let area2 = n.norm();
    if ((p - a).dot(&n) / area2).abs() > tol {
        return false;
    }
    let w_a = (c - b).cross(&(p - b)).dot(&n) / (area2 * area2);
    let w_b = (a - c).cross(&(p - c)).dot(&n) / (area2 * area2);
    let w_c = 1.0 - w_a - w_b;
    w_a >= -tol && w_b >= -tol && w_c >= -tol
}

/// Pinhole camera: pose maps camera to model coordinates; the camera looks
/// along its local +z axis.
#[derive(Debug, Clone, Copy)]
pub struct ScanParams {
    pub width: usize,
    pub height: usize,
    /// Half of the vertical field of view, radians.
    pub half_fov: f64,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            width: 160,
            height: 160,
            half_fov: 32f64.to_radians(),
        }
    }
}

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let [a, b, c] = tri;
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-9).then_some(t)
}

fn pixel_ray(camera: &RigidTransform, params: &ScanParams, px: usize, py: usize) -> Vec3 {
    let f = (params.height as f64 / 2.0) / params.half_fov.tan();
    let x = (px as f64 + 0.5 - params.width as f64 / 2.0) / f;
    let y = (py as f64 + 0.5 - params.height as f64 / 2.0) / f;
    camera.apply_vector(&Vec3::new(x, y, 1.0)).normalize()
}

/// Nearest hit per pixel as a `width×height` buffer of model-frame points.
/// Each triangle is tested only against pixels inside its projected
/// bounding box, which gives the same result as testing every pixel.
pub fn depth_hits(mesh: &TriMesh, camera: &RigidTransform, params: &ScanParams) -> Result<Vec<Option<Vec3>>> {
    let (w, h) = (params.width, params.height);
    let centre = camera.translation;
    let radius = mesh.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if centre.norm() <= radius {
        return Err(invalid("camera must lie outside the mesh bounding sphere"));
    }
    let to_cam = camera.inverse();
    let f = (h as f64 / 2.0) / params.half_fov.tan();
    let mut depth = vec![f64::INFINITY; w * h];
    let mut hits: Vec<Option<Vec3>> = vec![None; w * h];
    for t in 0..mesh.triangles.len() {
        let tri = mesh.corners(t);
        let cam: Vec<Vec3> = tri.iter().map(|v| to_cam.apply_point(v)).collect();
        if cam.iter().any(|v| v.z <= 1e-9) {
            continue;
        }
        let proj: Vec<(f64, f64)> = cam
            .iter()
            .map(|v| (v.x / v.z * f + w as f64 / 2.0, v.y / v.z * f + h as f64 / 2.0))
            .collect();
        let (xmin, xmax) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (ymin, ymax) = proj.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        let x0 = (xmin - 1.0).floor().max(0.0) as usize;
        let y0 = (ymin - 1.0).floor().max(0.0) as usize;
        let x1 = ((xmax + 1.0).ceil().max(0.0) as usize).min(w);
        let y1 = ((ymax + 1.0).ceil().max(0.0) as usize).min(h);
        for py in y0..y1 {
            for px in x0..x1 {
                let dir = pixel_ray(camera, params, px, py);
                if let Some(d) = ray_triangle(&centre, &dir, &tri) {
                    let k = py * w + px;
                    if d < depth[k] {
                        depth[k] = d;
                        hits[k] = Some(centre + dir * d);
                    }
                }
            }
        }
    }
    Ok(hits)
}

/// Ray-cast depth scan back-projected to model coordinates, then reduced
/// to `n_out` points by FPS.
pub fn virtual_scan(
    mesh: &TriMesh,
    camera: &RigidTransform,
    params: &ScanParams,
    n_out: usize,
) -> Result<PointCloud> {
    if params.width < 32 || params.height < 32 {
        return Err(invalid("scan resolution must be at least 32x32"));
    }
    let hits: Vec<Vec3> = depth_hits(mesh, camera, params)?.into_iter().flatten().collect();
    if hits.len() < n_out || hits.is_empty() {
        return Err(Error::Degenerate(format!(
            "view from {:?} hit {} pixels, fewer than the {n_out} points requested",
            camera.translation.as_slice(),
            hits.len()
        )));
    }
    let idx = farthest_point_sample_points(&hits, n_out, 0)?;
    PointCloud::new(idx.iter().map(|&i| hits[i]).collect())
}

/// Camera looking from `centre` at the origin.
pub fn look_at_origin(centre: Vec3) -> RigidTransform {
    let z = -centre.normalize();
    let up = if z.z.abs() > 0.99 { Vec3::x() } else { Vec3::z() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let rotation = crate::geom::Mat3::from_columns(&[x, y, z]);
    RigidTransform {
        rotation,
        translation: centre,
    }
}

pub const CAMERA_RADIUS: f64 = 2.0;

/// `count` cameras on a radius-2 sphere (offset Fibonacci lattice; two
/// cameras sit at opposite poles), each looking at the origin.
pub fn camera_ring(count: usize) -> Result<Vec<RigidTransform>> {
    if count < 2 {
        return Err(invalid("camera ring needs at least 2 cameras"));
    }
    if count == 2 {
        return Ok(vec![
            look_at_origin(Vec3::z() * CAMERA_RADIUS),
            look_at_origin(-Vec3::z() * CAMERA_RADIUS),
        ]);
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    Ok((0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            look_at_origin(Vec3::new(r * a.cos(), r * a.sin(), z) * CAMERA_RADIUS)
        })
        .collect())
}

/// Keeps the `keep` points nearest to `anchor`; returns the sub-cloud and
/// the kept indices (nearest first).
pub fn crop_nearest(cloud: &PointCloud, anchor: &Vec3, keep: usize) -> Result<(PointCloud, Vec<usize>)> {
    if keep == 0 || keep > cloud.len() {
        return Err(invalid(format!("cannot keep {keep} of {} points", cloud.len())));
    }
    let mut scratch = Vec::with_capacity(cloud.len());
    nearest_into(cloud.points(), anchor, None, keep, &mut scratch);
    let idx: Vec<usize> = scratch.iter().map(|&(_, i)| i).collect();
    Ok((cloud.select(&idx)?, idx))
}

pub const CROP_ANCHOR_RADIUS: f64 = 1.1;

/// Partial view made of the `keep` points nearest to a random anchor on a
/// radius-1.1 sphere.
pub fn crop_partial(cloud: &PointCloud, keep: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if keep >= cloud.len() {
        return Err(invalid(format!("keep = {keep} must be below N = {}", cloud.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = random_unit_vector(&mut rng) * CROP_ANCHOR_RADIUS;
    crop_nearest(cloud, &anchor, keep)
}

/// Adds clipped i.i.d. Gaussian noise to every coordinate and drops normals.
pub fn add_noise<R: Rng + ?Sized>(cloud: &PointCloud, sigma: f64, clip: f64, rng: &mut R) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !(clip >= 0.0) {
        return Err(invalid("noise sigma and clip must be non-negative"));
    }
    let pts = if sigma == 0.0 {
        cloud.points().to_vec()
    } else {
        let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
        cloud
            .points()
            .iter()
            .map(|p| p + Vec3::from_fn(|_, _| normal.sample(rng).clamp(-clip, clip)))
            .collect()
    };
    PointCloud::new(pts)
}

pub const OVERLAP_TAU: f64 = 0.05;

/// Fraction of `aligned_source` points with a `target` point within `tau`.
pub fn overlap_ratio(aligned_source: &PointCloud, target: &PointCloud, tau: f64) -> f64 {
    let t2 = tau * tau;
    let tp = target.points();
    let hits = aligned_source
        .points()
        .iter()
        .filter(|p| tp.iter().any(|q| (*p - q).norm_squared() <= t2))
        .count();
    hits as f64 / aligned_source.len() as f64
}

/// Source, target and the ground-truth transform mapping source onto target.
#[derive(Debug, Clone)]
pub struct RegPair {
    pub id: String,
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: RigidTransform,
    pub overlap_ratio: f64,
    pub shape_id: String,
    pub category: String,
    pub seed: u64,
}

/// Settings of the virtual-scan pair protocol.
#[derive(Debug, Clone, Copy)]
pub struct ScanProtocol {
    pub scan: ScanParams,
    pub cameras: usize,
    pub points: usize,
    pub tau: f64,
    pub min_overlap: f64,
    pub rot_range_deg: (f64, f64),
    pub trans_range: (f64, f64),
}

impl Default for ScanProtocol {
    fn default() -> Self {
        Self {
            scan: ScanParams::default(),
            cameras: 26,
            points: 2048,
            tau: OVERLAP_TAU,
            min_overlap: 0.4,
            rot_range_deg: (0.0, 180.0),
            trans_range: (-0.5, 0.5),
        }
    }
}

/// Scans each mesh from `views_per_mesh` distinct ring cameras, poses every
/// observation with its own random transform and keeps the view pairs whose
/// overlap reaches `min_overlap`.
pub fn build_pairs(
    meshes: &[(String, String, TriMesh)],
    views_per_mesh: usize,
    protocol: &ScanProtocol,
    seed: u64,
) -> Result<Vec<RegPair>> {
    if views_per_mesh < 2 {
        return Err(invalid("pairs need at least 2 views per mesh"));
    }
    if views_per_mesh > protocol.cameras {
        return Err(invalid(format!(
            "{views_per_mesh} views requested but the ring has {} cameras",
            protocol.cameras
        )));
    }
    let ring = camera_ring(protocol.cameras)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (shape_id, category, mesh) in meshes {
        let mut cams: Vec<usize> = (0..ring.len()).collect();
        for i in 0..views_per_mesh {
            let j = rng.random_range(i..cams.len());
            cams.swap(i, j);
        }
        let mut views = Vec::with_capacity(views_per_mesh);
        for &c in &cams[..views_per_mesh] {
            let scan = virtual_scan(mesh, &ring[c], &protocol.scan, protocol.points)?;
            let pose = random_se3(protocol.rot_range_deg, protocol.trans_range, &mut rng)?;
            views.push((c, scan, pose));
        }
        let before = pairs.len();
        for a in 0..views.len() {
            for b in a + 1..views.len() {
                let (ca, sa, pa) = &views[a];
                let (cb, sb, pb) = &views[b];
                let gt = pb.compose(&pa.inverse());
                let overlap = overlap_ratio(sa, sb, protocol.tau);
                if overlap < protocol.min_overlap {
                    continue;
                }
                let pair_seed = rng.random();
                pairs.push(RegPair {
                    id: format!("{shape_id}_v{ca}_v{cb}"),
                    source: apply_transform(sa, pa),
                    target: apply_transform(sb, pb),
                    gt,
                    overlap_ratio: overlap,
                    shape_id: shape_id.clone(),
                    category: category.clone(),
                    seed: pair_seed,
                });
            }
        }
        if pairs.len() == before {
            log::warn!("mesh {shape_id}: no view pair reached overlap {}", protocol.min_overlap);
        }
    }
    Ok(pairs)
}

/// Settings of the sampled-and-cropped pair protocol.
#[derive(Debug, Clone, Copy)]
pub struct CropProtocol {
    pub samples: usize,
    pub keep: usize,
    pub rot_range_deg: (f64, f64),
    pub trans_range: (f64, f64),
    /// Noise sigma and clip; `None` for clean pairs.
    pub noise: Option<(f64, f64)>,
}

impl Default for CropProtocol {
    fn default() -> Self {
        Self {
            samples: 1024,
            keep: 768,
            rot_range_deg: (0.0, 180.0),
            trans_range: (-0.5, 0.5),
            noise: None,
        }
    }
}

/// One pair from a mesh: sample the surface, crop two partial views around
/// independent anchors, and move the second by a random transform.
pub fn crop_pair(mesh: &TriMesh, shape_id: &str, protocol: &CropProtocol, seed: u64) -> Result<RegPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = surface_sample(mesh, protocol.samples, rng.random())?;
    let (src, _) = crop_partial(&full, protocol.keep, rng.random())?;
    let (tgt, _) = crop_partial(&full, protocol.keep, rng.random())?;
    let gt = random_se3(protocol.rot_range_deg, protocol.trans_range, &mut rng)?;
    let tgt = apply_transform(&tgt, &gt);
    let overlap = overlap_ratio(&apply_transform(&src, &gt), &tgt, OVERLAP_TAU);
    let (source, target) = match protocol.noise {
        Some((sigma, clip)) => (
            add_noise(&src, sigma, clip, &mut rng)?,
            add_noise(&tgt, sigma, clip, &mut rng)?,
        ),
        None => (src, tgt),
    };
    Ok(RegPair {
        id: format!("{shape_id}_s{seed}"),
        source,
        target,
        gt,
        overlap_ratio: overlap,
        shape_id: shape_id.to_string(),
        category: "crop".into(),
        seed,
    })
}

/// Deterministic set of composite shapes named `shape000`, `shape001`, ...
pub fn composite_corpus(count: usize, seed: u64) -> Result<Vec<(String, TriMesh)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let params = ShapeParams {
                parts: rng.random_range(3..=5),
                ..ShapeParams::default()
            };
            Ok((format!("shape{i:03}"), make_shape(ShapeKind::Composite, &params, rng.random())?))
        })
        .collect()
}

/// Writes `pairs/<id>/{source.pcb,target.pcb,gt.txt,meta.txt}` and a
/// top-level `manifest.csv`.
pub fn write_dataset(dir: &Path, pairs: &[RegPair]) -> Result<()> {
    let root = dir.join("pairs");
    fs::create_dir_all(&root)?;
    let mut manifest = String::from("id,shape,category,overlap,n_source,n_target,seed\n");
    for p in pairs {
        let d = root.join(&p.id);
        fs::create_dir_all(&d)?;
        io::save_cloud(&d.join("source.pcb"), &p.source)?;
        io::save_cloud(&d.join("target.pcb"), &p.target)?;
        io::write_transform(&d.join("gt.txt"), &p.gt)?;
        fs::write(
            d.join("meta.txt"),
            format!(
                "shape={}\ncategory={}\noverlap={}\nseed={}\n",
                p.shape_id, p.category, p.overlap_ratio, p.seed
            ),
        )?;
        let _ = writeln!(
            manifest,
            "{},{},{},{:.6},{},{},{}",
            p.id,
            p.shape_id,
            p.category,
            p.overlap_ratio,
            p.source.len(),
            p.target.len(),
            p.seed
        );
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`], in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<RegPair>> {
    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut pairs = Vec::new();
    for (lineno, line) in manifest.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("manifest line {}: expected 7 fields", lineno + 1)));
        }
        let d = dir.join("pairs").join(f[0]);
        let parse_err = |what: &str| Error::Format(format!("manifest line {}: bad {what}", lineno + 1));
        pairs.push(RegPair {
            id: f[0].to_string(),
            source: io::load_cloud(&d.join("source.pcb"))?,
            target: io::load_cloud(&d.join("target.pcb"))?,
            gt: io::read_transform(&d.join("gt.txt"))?,
            overlap_ratio: f[3].parse().map_err(|_| parse_err("overlap"))?,
            shape_id: f[1].to_string(),
            category: f[2].to_string(),
            seed: f[6].parse().map_err(|_| parse_err("seed"))?,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_counts_and_normalisation() {
        let b = make_shape(ShapeKind::Box, &ShapeParams::default(), 0).unwrap();
        assert_eq!((b.vertices.len(), b.triangles.len()), (8, 12));
        let t = make_shape(
            ShapeKind::Torus,
            &ShapeParams {
                length: 0.4,
                radius: 0.15,
                segments: 32,
                rings: 16,
                ..ShapeParams::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(t.triangles.len(), 2 * 32 * 16);
        for kind in [ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Torus, ShapeKind::Capsule, ShapeKind::Composite] {
            let m = make_shape(kind, &ShapeParams::default(), 3).unwrap();
            assert!(m.vertices.iter().all(|v| v.norm() <= 1.0 + 1e-9), "{kind:?}");
        }
        assert!(make_shape(ShapeKind::Cylinder, &ShapeParams { radius: -1.0, ..ShapeParams::default() }, 0).is_err());
    }

    #[test]
    fn outward_winding() {
        for kind in [ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Capsule] {
            let m = make_shape(kind, &ShapeParams::default(), 0).unwrap();
            // for convex shapes centred at the origin every face points away from it
            for t in 0..m.triangles.len() {
                let [a, b, c] = m.corners(t);
                let centre = (a + b + c) / 3.0;
                assert!(m.face_normal(t).dot(&centre) > 0.0, "{kind:?} face {t}");
            }
        }
    }

    #[test]
    fn camera_ring_geometry() {
        let two = camera_ring(2).unwrap();
        assert!((two[0].translation + two[1].translation).norm() < 1e-12);
        let ring = camera_ring(26).unwrap();
        let mut min_angle = f64::INFINITY;
        for (i, a) in ring.iter().enumerate() {
            let axis = a.rotation.column(2).into_owned();
            // optical axis passes through the origin
            assert!(a.translation.cross(&axis).norm() < 1e-9);
            assert!(a.translation.dot(&axis) < 0.0);
            assert!((a.rotation.determinant() - 1.0).abs() < 1e-12);
            for b in &ring[i + 1..] {
                min_angle = min_angle.min(crate::geom::angle_between(&a.translation, &b.translation));
            }
        }
        assert!(min_angle.to_degrees() > 25.0, "{}", min_angle.to_degrees());
    }

    #[test]
    fn crop_and_noise_contracts() {
        let mesh = make_shape(ShapeKind::Composite, &ShapeParams::default(), 1).unwrap();
        let cloud = surface_sample(&mesh, 300, 2).unwrap();
        let (a, ia) = crop_partial(&cloud, 200, 9).unwrap();
        let (_, ib) = crop_partial(&cloud, 200, 9).unwrap();
        assert_eq!(ia, ib);
        assert_eq!(a.len(), 200);
        assert!(crop_partial(&cloud, 300, 0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = add_noise(&cloud, 0.0, 0.05, &mut rng).unwrap();
        assert_eq!(same.points(), cloud.points());
        assert!(!same.has_normals());
    }

    #[test]
    fn dataset_round_trip() {
        let mesh = make_shape(ShapeKind::Composite, &ShapeParams::default(), 4).unwrap();
        let proto = CropProtocol {
            samples: 200,
            keep: 150,
            ..CropProtocol::default()
        };
        let pairs: Vec<RegPair> = (0..2).map(|s| crop_pair(&mesh, "m", &proto, s).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &pairs).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].id, pairs[1].id);
        assert!((back[1].gt.rotation - pairs[1].gt.rotation).abs().max() < 1e-12);
        assert_eq!(back[0].source.len(), 150);
    }
}
