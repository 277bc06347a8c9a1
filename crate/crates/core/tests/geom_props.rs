mod common;

use gmcnet::geom::{
    apply_transform, farthest_point_sample, knn_graph, random_se3, PointCloud, RigidTransform, Vec3,
};
use proptest::prelude::*;

fn greedy_fps_oracle(points: &[Vec3], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = (usize::MAX, -1.0);
        for (i, p) in points.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| (p - points[c]).norm_squared())
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen.push(best.0);
    }
    chosen
}

#[test]
fn fps_matches_greedy_oracle_on_1024_points() {
    let cloud = common::random_cloud(1024, 3);
    let mut got = farthest_point_sample(&cloud, 448, 0).unwrap();
    let mut want = greedy_fps_oracle(cloud.points(), 448, 0);
    got.sort_unstable();
    want.sort_unstable();
    assert_eq!(got, want);
}

#[test]
fn fps_full_size_selects_everything() {
    let cloud = common::random_cloud(57, 4);
    let mut got = farthest_point_sample(&cloud, 57, 9).unwrap();
    got.sort_unstable();
    assert_eq!(got, (0..57).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(common::proptest_config(64))]

    #[test]
    fn transform_then_inverse_restores_cloud(seed in 0u64..10_000, angle in 0.0f64..180.0, tx in -2.0f64..2.0) {
        let cloud = common::random_cloud(40, seed);
        let mut r = common::rng(seed);
        let t = random_se3((angle, angle), (tx, tx), &mut r).unwrap();
        let back = apply_transform(&apply_transform(&cloud, &t), &t.inverse());
        for (a, b) in cloud.points().iter().zip(back.points()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn random_se3_respects_ranges(seed in 0u64..10_000, lo in 0.0f64..180.0, width in 0.0f64..180.0) {
        let hi = (lo + width).min(180.0);
        let mut r = common::rng(seed);
        let t = random_se3((lo, hi), (-0.5, 0.5), &mut r).unwrap();
        let deg = t.angle().to_degrees();
        prop_assert!(deg >= lo - 1e-6 && deg <= hi + 1e-6, "{deg} not in [{lo}, {hi}]");
        prop_assert!(t.translation.iter().all(|v| v.abs() <= 0.5));
        prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compose_agrees_with_sequential_application(seed in 0u64..10_000) {
        let mut r = common::rng(seed);
        let a = random_se3((0.0, 180.0), (-1.0, 1.0), &mut r).unwrap();
        let b = random_se3((0.0, 180.0), (-1.0, 1.0), &mut r).unwrap();
        let p = Vec3::new(0.3, -0.7, 0.2);
        let ab: RigidTransform = a.compose(&b);
        prop_assert!((ab.apply_point(&p) - a.apply_point(&b.apply_point(&p))).norm() < 1e-12);
    }

    #[test]
    fn knn_matches_sorted_brute_force(seed in 0u64..10_000, n in 3usize..60, k_frac in 0.0f64..1.0) {
        let pts = common::random_points(n, seed);
        // Snap to a coarse grid so distance ties actually occur.
        let pts: Vec<Vec3> = pts.iter().map(|p| (p * 4.0).map(f64::round) / 4.0).collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let k = 1 + ((n - 2) as f64 * k_frac) as usize;
        let centers: Vec<usize> = (0..n).collect();
        let g = knn_graph(&cloud, &centers, k).unwrap();
        for c in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != c)
                .map(|j| ((pts[j] - pts[c]).norm_squared(), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..k].iter().map(|x| x.1).collect();
            prop_assert_eq!(g.neighbors(c), &want[..]);
        }
    }
}
