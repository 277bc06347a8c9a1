#![allow(dead_code)]

use gmcnet::geom::{PointCloud, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform points in the cube `[-1, 1]^3`.
pub fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
        .collect()
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    PointCloud::new(random_points(n, seed)).unwrap()
}

/// Random points with random unit normals.
pub fn random_oriented_cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = rng(seed ^ 0xabcdef);
    let normals = (0..n)
        .map(|_| gmcnet::geom::random_unit_vector(&mut r))
        .collect();
    PointCloud::with_normals(random_points(n, seed), normals).unwrap()
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix, computed with the
/// largest-diagonal branch so it is stable for every angle.
pub fn quaternion(m: &gmcnet::geom::Mat3) -> [f64; 4] {
    let tr = m.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Geodesic angle between two rotations from the relative quaternion.
pub fn quaternion_angle(a: &gmcnet::geom::Mat3, b: &gmcnet::geom::Mat3) -> f64 {
    let q = quaternion(&(a.transpose() * b));
    let v = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    2.0 * v.atan2(q[0].abs())
}

/// Proptest settings for integration tests: no regression files.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    }
}
