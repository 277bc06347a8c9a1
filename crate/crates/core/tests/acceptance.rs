//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Pass criterion numbers as arguments
//! to run a subset, e.g. `cargo test --test acceptance -- 1 4`.

mod common;

use std::time::Instant;

use gmcnet::data::{
    build_pairs, camera_ring, composite_corpus, crop_pair, depth_hits, look_at_origin, make_shape, surface_sample,
    CropProtocol, RegPair, ScanParams, ScanProtocol, ShapeKind, ShapeParams,
};
use gmcnet::diffcore::Adam;
use gmcnet::eval::{
    icp_baseline, median, noise_sweep, rmse_error, rotation_error, similarity_sweep, FeatureKind, MetricReport,
    NoiseOptions, SweepMode, SweepOptions,
};
use gmcnet::geom::{apply_transform, farthest_point_sample, random_se3, PointCloud, RigidTransform, Vec3};
use gmcnet::matching::{init_assignment, sinkhorn, weighted_procrustes, Correspondences, MatchMatrix};
use gmcnet::net::{init_params, HgmConfig, RiKind};
use gmcnet::train::{crop_epoch_pairs, pair_loss, pair_loss_and_grads, train_epoch, validate, TrainConfig};
use gmcnet::diffcore::Tensor;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn clouds(count: usize, n: usize, seed: u64) -> Vec<PointCloud> {
    composite_corpus(count, seed)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, (_, m))| surface_sample(m, n, seed + i as u64).unwrap())
        .collect()
}

fn series<'a>(curve: &'a gmcnet::eval::RobustnessCurve, name: &str) -> &'a [f64] {
    &curve.series.iter().find(|(n, _)| n == name).unwrap().1
}

fn ri_invariance() -> Outcome {
    let corpus = clouds(50, 256, 100);
    let mags: Vec<f64> = (0..20).map(|i| 9.0 * (i + 1) as f64).collect();
    let kinds = [FeatureKind::Rri, FeatureKind::Ppf, FeatureKind::Fpfh];
    let opts = SweepOptions {
        seed: 1,
        ..SweepOptions::default()
    };
    let curve = similarity_sweep(&corpus, &kinds, &mags, SweepMode::RotationOnly, &opts).unwrap();
    let worst: Vec<(String, f64)> = curve
        .series
        .iter()
        .map(|(n, s)| (n.clone(), s.iter().copied().fold(f64::INFINITY, f64::min)))
        .collect();
    let pass = worst.iter().all(|(_, v)| *v >= 0.999999);
    outcome(pass, format!("min similarity {worst:?}"))
}

fn se3_degradation() -> Outcome {
    let corpus = clouds(20, 512, 200);
    let mags: Vec<f64> = (0..=12).map(|i| 15.0 * i as f64).collect();
    let opts = SweepOptions {
        seed: 2,
        ..SweepOptions::default()
    };
    let curve = similarity_sweep(&corpus, &[FeatureKind::Rri, FeatureKind::Ppf], &mags, SweepMode::Se3, &opts).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for name in ["RRI-SE3", "PPF-SE3"] {
        let s = series(&curve, name);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let spread = s.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        pass &= s.iter().all(|v| *v < 0.999) && spread <= 0.01;
        detail.push(format!("{name} mean {mean:.4} max deviation {spread:.2e}"));
    }
    outcome(pass, detail.join(", "))
}

fn noise_ordering() -> Outcome {
    let corpus = clouds(10, 512, 300);
    let kinds = [FeatureKind::Xyz, FeatureKind::Dxyz, FeatureKind::Rri, FeatureKind::Ppf, FeatureKind::Fpfh];
    let sigmas = [0.0, 0.06, 0.1];
    let opts = NoiseOptions {
        seed: 3,
        ..NoiseOptions::default()
    };
    let a = noise_sweep(&corpus, &kinds, &sigmas, &opts).unwrap();
    let b = noise_sweep(&corpus, &kinds, &sigmas, &opts).unwrap();
    let mut pass = a == b;
    let mut detail = Vec::new();
    for si in 1..sigmas.len() {
        let v = |n: &str| series(&a, n)[si];
        let ri = v("RRI").min(v("PPF")).min(v("FPFH"));
        pass &= v("XYZ") < v("dXYZ") && v("dXYZ") < ri;
        detail.push(format!(
            "sigma {}: XYZ {:.4} dXYZ {:.4} RRI {:.4} PPF {:.4} FPFH {:.4}",
            sigmas[si],
            v("XYZ"),
            v("dXYZ"),
            v("RRI"),
            v("PPF"),
            v("FPFH")
        ));
    }
    outcome(pass, detail.join("; "))
}

fn identity_correspondences(target: &PointCloud) -> Correspondences {
    Correspondences {
        targets: target.points().to_vec(),
        confidences: vec![1.0; target.len()],
        valid: vec![true; target.len()],
    }
}

fn procrustes_exactness() -> Outcome {
    let mut rng = common::rng(4);
    let (mut max_r, mut max_t) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let n = rng.random_range(3..200);
        let src = common::random_cloud(n, 10_000 + i);
        let gt = random_se3((0.0, 180.0), (-0.5, 0.5), &mut rng).unwrap();
        let est = weighted_procrustes(&src, &identity_correspondences(&apply_transform(&src, &gt))).unwrap();
        max_r = max_r.max(rotation_error(&gt.rotation, &est.rotation));
        max_t = max_t.max((gt.translation - est.translation).norm());
    }
    let mut reflections = 0;
    for _ in 0..100 {
        let pts: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let mirrored: Vec<Vec3> = pts.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let src = PointCloud::new(pts).unwrap();
        let est = weighted_procrustes(&src, &identity_correspondences(&PointCloud::new(mirrored).unwrap())).unwrap();
        if (est.rotation.determinant() - 1.0).abs() > 1e-9 {
            reflections += 1;
        }
    }
    let pass = max_r < 1e-7 && max_t < 1e-9 && reflections == 0;
    outcome(pass, format!("max L_R {max_r:.2e} rad, max L_t {max_t:.2e}, reflections {reflections}"))
}

/// Diagonal scalings `diag(u) K diag(v)`, updating `u` then `v`.
fn ipf(k: &[f64], n: usize, iters: usize) -> Vec<f64> {
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    for _ in 0..iters {
        for i in 0..n {
            u[i] = 1.0 / (0..n).map(|j| k[i * n + j] * v[j]).sum::<f64>();
        }
        for j in 0..n {
            v[j] = 1.0 / (0..n).map(|i| k[i * n + j] * u[i]).sum::<f64>();
        }
    }
    (0..n * n).map(|e| u[e / n] * k[e] * v[e % n]).collect()
}

fn sinkhorn_oracle() -> Outcome {
    let mut rng = common::rng(5);
    let (mut marginal, mut entry) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let k: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..1.0)).collect();
        let out = sinkhorn(&MatchMatrix::new(k.clone(), 8, 8, false).unwrap(), 100).unwrap();
        for i in 0..8 {
            marginal = marginal.max((out.row_sum(i) - 1.0).abs()).max((out.col_sum(i) - 1.0).abs());
        }
        for (a, b) in out.weights().iter().zip(ipf(&k, 8, 100)) {
            entry = entry.max((a - b).abs());
        }
    }
    let mut worst_outlier = 0.0f64;
    for trial in 0..20 {
        let mut cost = Tensor::matrix(8, 8, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let row = trial % 8;
        for j in 0..8 {
            cost.data_mut()[row * 8 + j] = 50.0;
        }
        let m = sinkhorn(&init_assignment(&cost, true, 1.0).unwrap(), 20).unwrap();
        worst_outlier = worst_outlier.max((0..8).map(|j| m.get(row, j)).sum());
    }
    let pass = marginal < 1e-6 && entry < 1e-6 && worst_outlier < 0.1;
    outcome(
        pass,
        format!("marginal error {marginal:.2e}, oracle error {entry:.2e}, outlier mass {worst_outlier:.2e}"),
    )
}

fn gradient_integrity() -> Outcome {
    let cfg = HgmConfig {
        levels: [32, 16, 8],
        k: 6,
        ri_kind: RiKind::Ppf,
        cu: 8,
        cs: [8, 8, 8],
        r1: 2,
        r2: 4,
        ..HgmConfig::default()
    };
    let proto = CropProtocol {
        samples: 48,
        keep: 32,
        ..CropProtocol::default()
    };
    let (id, mesh) = composite_corpus(1, 6).unwrap().remove(0);
    let pair = crop_pair(&mesh, &id, &proto, 6).unwrap();
    let store = init_params(&cfg, 6).unwrap();
    let reg = gmcnet::matching::RegisterConfig {
        sinkhorn_iters: 5,
        ..Default::default()
    };
    let omega = 0.01;
    let (_, grads, _) = pair_loss_and_grads(&store, &cfg, &reg, omega, &pair).unwrap();
    let names: Vec<(String, usize)> = store.iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut rng = common::rng(6);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let (mut vanishing, mut worst_abs) = (0, 0.0f64);
    for _ in 0..50 {
        let (name, len) = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..*len);
        let mut plus = store.clone();
        plus.get_mut(name).unwrap().data_mut()[idx] += h;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().data_mut()[idx] -= h;
        let fd = (pair_loss(&plus, &cfg, &reg, omega, &pair).unwrap().total
            - pair_loss(&minus, &cfg, &reg, omega, &pair).unwrap().total)
            / (2.0 * h);
        let an = grads.get(name).map_or(0.0, |g| g.data()[idx]);
        // gradients that vanish by symmetry (a bias shared by every logit
        // of a softmax) leave only round-off in the difference quotient, so
        // they are judged by absolute error
        let scale = fd.abs().max(an.abs());
        if scale < 1e-6 {
            vanishing += 1;
            worst_abs = worst_abs.max((fd - an).abs());
            continue;
        }
        let rel = (fd - an).abs() / scale;
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{idx}]");
        }
    }
    outcome(
        worst < 1e-4 && worst_abs < 1e-7,
        format!(
            "max relative error {worst:.2e} ({worst_at}) over {} parameters; {vanishing} vanishing gradients within {worst_abs:.1e}",
            50 - vanishing
        ),
    )
}

struct Trained {
    held_out: Vec<RegPair>,
    model: MetricReport,
}

fn train_toy_model() -> Trained {
    let meshes = composite_corpus(40, 2024).unwrap();
    let (train, test) = meshes.split_at(20);
    let proto = CropProtocol::default();
    let held_out: Vec<RegPair> = test
        .iter()
        .enumerate()
        .map(|(i, (id, m))| crop_pair(m, id, &proto, 10_000 + i as u64).unwrap())
        .collect();
    let hgm = HgmConfig {
        cu: 32,
        cs: [32; 3],
        ri_kind: RiKind::Ppf,
        ..HgmConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut store = init_params(&hgm, 0).unwrap();
    let mut adam = Adam::new(cfg.lr);
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let pairs = crop_epoch_pairs(train, &proto, 7, epoch).unwrap();
        let stats = train_epoch(&pairs, &mut store, &mut adam, &hgm, &cfg).unwrap();
        if epoch % 20 == 0 {
            eprintln!("  epoch {epoch}: loss {:.4} ({:.0}s)", stats.loss, start.elapsed().as_secs_f64());
        }
    }
    let model = validate(&held_out, &store, &hgm, &cfg.register).unwrap();
    Trained { held_out, model }
}

fn toy_registration(t: &Trained) -> Outcome {
    let s = t.model.summary();
    let pass = s.median_lr_deg < 5.0 && s.median_lrmse < 0.05;
    outcome(
        pass,
        format!(
            "held-out median L_R {:.3} deg, median L_RMSE {:.2e} (mean L_R {:.3} deg)",
            s.median_lr_deg, s.median_lrmse, s.mean_lr_deg
        ),
    )
}

fn baseline_separation(t: &Trained) -> Outcome {
    let mut icp = MetricReport::default();
    for p in &t.held_out {
        let pred = icp_baseline(&p.source, &p.target, 50, 1e-8).unwrap();
        icp.push(&p.id, &p.source, &p.gt, &pred);
    }
    let (icp_mean, model_mean) = (icp.summary().mean_lr_deg, t.model.summary().mean_lr_deg);
    outcome(
        icp_mean >= 10.0 * model_mean,
        format!("ICP mean L_R {icp_mean:.2} deg vs model {model_mean:.3} deg ({:.1}x)", icp_mean / model_mean),
    )
}

/// Mean distance to the 5 nearest other points, over points on the `z = face` plane.
fn face_spacing(hits: &[Vec3], face: f64) -> f64 {
    let on_face: Vec<Vec3> = hits.iter().copied().filter(|p| (p.z - face).abs() < 1e-9).collect();
    let total: f64 = on_face
        .iter()
        .map(|p| {
            let mut d: Vec<f64> = on_face.iter().map(|q| (p - q).norm()).filter(|d| *d > 0.0).collect();
            d.sort_by(f64::total_cmp);
            d[..5].iter().sum::<f64>() / 5.0
        })
        .sum();
    total / on_face.len() as f64
}

fn protocol_fidelity() -> Outcome {
    let meshes: Vec<(String, String, gmcnet::data::TriMesh)> = composite_corpus(6, 900)
        .unwrap()
        .into_iter()
        .map(|(id, m)| (id, "composite".to_string(), m))
        .collect();
    let protocol = ScanProtocol::default();
    let pairs = build_pairs(&meshes, 8, &protocol, 9).unwrap();
    let per_pair: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let aligned = apply_transform(&p.source, &p.gt);
            let tp = p.target.points();
            let d: Vec<f64> = aligned
                .points()
                .iter()
                .map(|q| tp.iter().map(|t| (q - t).norm()).fold(f64::INFINITY, f64::min))
                .collect();
            median(&d)
        })
        .collect();
    let nn = median(&per_pair);

    let ring = camera_ring(26).unwrap();
    let mut sep = f64::INFINITY;
    for (i, a) in ring.iter().enumerate() {
        for b in &ring[i + 1..] {
            sep = sep.min(gmcnet::geom::angle_between(&a.translation, &b.translation).to_degrees());
        }
    }

    let cloud = clouds(1, 2048, 901).remove(0);
    let fps_same = farthest_point_sample(&cloud, 512, 0).unwrap() == farthest_point_sample(&cloud, 512, 0).unwrap()
        && build_pairs(&meshes[..1], 4, &protocol, 3).unwrap().iter().zip(build_pairs(&meshes[..1], 4, &protocol, 3).unwrap()).all(|(a, b)| {
            a.source == b.source && a.target == b.target
        });

    let cube = make_shape(ShapeKind::Box, &ShapeParams::default(), 0).unwrap();
    let face = 1.0 / 3f64.sqrt();
    let params = ScanParams::default();
    let view = |c: RigidTransform| -> Vec<Vec3> { depth_hits(&cube, &c, &params).unwrap().into_iter().flatten().collect() };
    let head_on = face_spacing(&view(look_at_origin(Vec3::new(0.0, 0.0, 2.0))), face);
    let tilt = 70f64.to_radians();
    let grazing = face_spacing(&view(look_at_origin(Vec3::new(2.0 * tilt.sin(), 0.0, 2.0 * tilt.cos()))), face);
    let ratio = grazing / head_on;

    let pass = nn < 2.0 * protocol.tau && sep > 25.0 && fps_same && ratio >= 1.5;
    outcome(
        pass,
        format!(
            "{} pairs, median aligned NN {nn:.4} (2 tau = {}), ring separation {sep:.1} deg, FPS deterministic {fps_same}, density ratio {ratio:.2}",
            pairs.len(),
            2.0 * protocol.tau
        ),
    )
}

fn metric_fidelity() -> Outcome {
    let mut rng = common::rng(10);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a = random_se3((0.0, 180.0), (0.0, 0.0), &mut rng).unwrap().rotation;
        let b = random_se3((0.0, 180.0), (0.0, 0.0), &mut rng).unwrap().rotation;
        worst = worst.max((rotation_error(&a, &b) - common::quaternion_angle(&a, &b)).abs());
    }
    let mut rmse_worst = 0.0f64;
    for i in 0..100 {
        let src = common::random_cloud(rng.random_range(1..500), 20_000 + i);
        let gt = random_se3((0.0, 180.0), (-0.5, 0.5), &mut rng).unwrap();
        let pred = random_se3((0.0, 180.0), (-0.5, 0.5), &mut rng).unwrap();
        let sum: f64 = src
            .points()
            .iter()
            .map(|p| {
                let d = (gt.rotation * p + gt.translation) - (pred.rotation * p + pred.translation);
                d.x * d.x + d.y * d.y + d.z * d.z
            })
            .sum();
        let direct = sum.sqrt() / src.len() as f64;
        rmse_worst = rmse_worst.max((rmse_error(&src, &gt, &pred) - direct).abs());
    }
    let pass = worst < 1e-9 && rmse_worst < 1e-12;
    outcome(pass, format!("rotation error vs quaternion {worst:.2e}, L_RMSE vs direct {rmse_worst:.2e}"))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {n:>2} {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    };
    report(1, "rotation invariance of RI features", &mut ri_invariance);
    report(2, "SE(3) degradation of RRI and PPF", &mut se3_degradation);
    report(3, "noise robustness ordering", &mut noise_ordering);
    report(4, "Procrustes exactness", &mut procrustes_exactness);
    report(5, "Sinkhorn oracle equivalence", &mut sinkhorn_oracle);
    report(6, "gradient integrity", &mut gradient_integrity);
    report(9, "dataset protocol fidelity", &mut protocol_fidelity);
    report(10, "metric formula fidelity", &mut metric_fidelity);
    if wanted(7) || wanted(8) {
        let start = Instant::now();
        let trained = train_toy_model();
        eprintln!("  toy training finished in {:.0}s", start.elapsed().as_secs_f64());
        report(7, "toy full-range registration", &mut || toy_registration(&trained));
        report(8, "ICP baseline separation", &mut || baseline_separation(&trained));
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
