//! Registration metrics, the feature robustness sweeps and a point-to-point
//! ICP baseline.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{add_noise, crop_partial};
use crate::error::{invalid, Error, Result};
use crate::geom::{
    apply_transform, estimate_normals, knn_graph, nearest_index, random_unit_vector, Mat3,
    NeighborGraph, PointCloud, RigidTransform, Vec3,
};
use crate::matching::{weighted_procrustes, Correspondences};
use crate::rifeat::{dxyz_features, fpfh_features, ppf_features, rri_features, xyz_features, FeatureMatrix};

/// Isotropic rotation error in radians, `arccos((tr(R_gtᵀ R_pred) − 1) / 2)`.
pub fn rotation_error(r_gt: &Mat3, r_pred: &Mat3) -> f64 {
    let c = ((r_gt.transpose() * r_pred).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

pub fn translation_error(t_gt: &Vec3, t_pred: &Vec3) -> f64 {
    (t_gt - t_pred).norm()
}

/// `(1/N)·sqrt(Σ‖T_gt(x) − T_pred(x)‖²)` over all source points; the `1/N`
/// sits outside the root.
pub fn rmse_error(source: &PointCloud, gt: &RigidTransform, pred: &RigidTransform) -> f64 {
    let sum: f64 = source
        .points()
        .iter()
        .map(|p| (gt.apply_point(p) - pred.apply_point(p)).norm_squared())
        .sum();
    sum.sqrt() / source.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub pair_id: String,
    pub lr_deg: f64,
    pub lt: f64,
    pub lrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub pairs: usize,
    pub mean_lr_deg: f64,
    pub mean_lt: f64,
    pub mean_lrmse: f64,
    pub median_lr_deg: f64,
    pub median_lt: f64,
    pub median_lrmse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

impl MetricReport {
    pub fn push(&mut self, pair_id: &str, source: &PointCloud, gt: &RigidTransform, pred: &RigidTransform) {
        self.rows.push(MetricRow {
            pair_id: pair_id.to_string(),
            lr_deg: rotation_error(&gt.rotation, &pred.rotation).to_degrees(),
            lt: translation_error(&gt.translation, &pred.translation),
            lrmse: rmse_error(source, gt, pred),
        });
    }

    fn column(&self, f: impl Fn(&MetricRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    pub fn summary(&self) -> MetricSummary {
        let lr = self.column(|r| r.lr_deg);
        let lt = self.column(|r| r.lt);
        let rm = self.column(|r| r.lrmse);
        MetricSummary {
            pairs: self.rows.len(),
            mean_lr_deg: mean(&lr),
            mean_lt: mean(&lt),
            mean_lrmse: mean(&rm),
            median_lr_deg: median(&lr),
            median_lt: median(&lt),
            median_lrmse: median(&rm),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,LR_deg,Lt,LRMSE\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.pair_id, r.lr_deg, r.lt, r.lrmse);
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }
}

/// Sweep results: one series per feature, sampled at strictly increasing
/// magnitudes (rotation degrees or noise sigma).
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub variable: String,
    pub magnitudes: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

impl RobustnessCurve {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.series.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// CSV with header `magnitude,<feature1>,<feature2>,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("magnitude");
        for (name, _) in &self.series {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, m) in self.magnitudes.iter().enumerate() {
            let _ = write!(out, "{m}");
            for (_, v) in &self.series {
                let _ = write!(out, ",{}", v[i]);
            }
            out.push('\n');
        }
        out
    }
}

fn check_sweep(m: &[f64]) -> Result<()> {
    if m.is_empty() || m.windows(2).any(|w| !(w[0] < w[1])) || m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("sweep magnitudes must be finite and strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Rri,
    Ppf,
    Fpfh,
    Xyz,
    Dxyz,
}

impl FeatureKind {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureKind::Rri => "RRI",
            FeatureKind::Ppf => "PPF",
            FeatureKind::Fpfh => "FPFH",
            FeatureKind::Xyz => "XYZ",
            FeatureKind::Dxyz => "dXYZ",
        }
    }

    fn needs_normals(&self) -> bool {
        matches!(self, FeatureKind::Ppf | FeatureKind::Fpfh)
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rri" => Ok(FeatureKind::Rri),
            "ppf" => Ok(FeatureKind::Ppf),
            "fpfh" => Ok(FeatureKind::Fpfh),
            "xyz" => Ok(FeatureKind::Xyz),
            "dxyz" => Ok(FeatureKind::Dxyz),
            _ => Err(invalid(format!(
                "unknown feature kind {s:?} (valid: rri, ppf, fpfh, xyz, dxyz)"
            ))),
        }
    }
}

/// Per-point features of `cloud`; normals are estimated when the feature
/// needs them and the cloud has none.
pub fn point_features(cloud: &PointCloud, kind: FeatureKind, k: usize, normal_k: usize) -> Result<FeatureMatrix> {
    let owned;
    let cloud = if kind.needs_normals() && !cloud.has_normals() {
        owned = estimate_normals(cloud, normal_k);
        &owned
    } else {
        cloud
    };
    let all: Vec<usize> = (0..cloud.len()).collect();
    match kind {
        FeatureKind::Rri => rri_features(cloud, k),
        FeatureKind::Ppf => ppf_features(cloud, &knn_graph(cloud, &all, k)?)?.per_point(cloud.len()),
        FeatureKind::Fpfh => fpfh_features(cloud, k),
        FeatureKind::Xyz => Ok(xyz_features(cloud)),
        FeatureKind::Dxyz => dxyz_features(cloud, &knn_graph(cloud, &all, k)?),
    }
}

/// Cosine similarity; two zero vectors count as identical.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na > 0.0, nb > 0.0) {
        (true, true) => dot / (na * nb),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Rotate the complete cloud about the origin; normals are transported.
    RotationOnly,
    /// Crop a partial view, rotate and translate it, then re-estimate
    /// normals and (for RRI) recentre on the crop.
    Se3,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub k: usize,
    pub normal_k: usize,
    /// Random rotations per cloud and magnitude.
    pub trials: usize,
    /// Fixed rotation axis; `None` draws one per cloud and trial.
    pub axis: Option<Vec3>,
    pub trans_range: (f64, f64),
    /// Fraction of the cloud kept by the crop in SE(3) mode.
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            k: 16,
            normal_k: 16,
            trials: 1,
            axis: None,
            trans_range: (-0.5, 0.5),
            keep_fraction: 0.75,
            seed: 0,
        }
    }
}

fn mean_row_similarity(before: &FeatureMatrix, after: &FeatureMatrix, rows: &[usize]) -> f64 {
    rows.iter()
        .enumerate()
        .map(|(i, &r)| cosine_similarity(before.row(r), after.row(i)))
        .sum::<f64>()
        / rows.len() as f64
}

/// Mean per-point cosine similarity between features before and after a
/// rotation of growing magnitude, averaged over points, then trials and
/// clouds. Random draws depend only on the seed, the cloud and the trial,
/// so every magnitude sees the same axes, crops and translations.
pub fn similarity_sweep(
    corpus: &[PointCloud],
    kinds: &[FeatureKind],
    magnitudes_deg: &[f64],
    mode: SweepMode,
    opts: &SweepOptions,
) -> Result<RobustnessCurve> {
    check_sweep(magnitudes_deg)?;
    if corpus.is_empty() || opts.trials == 0 {
        return Err(invalid("similarity sweep needs clouds and at least one trial"));
    }
    let mut series = Vec::new();
    for &kind in kinds {
        let mut sums = vec![0.0; magnitudes_deg.len()];
        for (ci, cloud) in corpus.iter().enumerate() {
            let base_cloud = match mode {
                SweepMode::RotationOnly => cloud.clone(),
                SweepMode::Se3 if kind == FeatureKind::Rri => cloud.centered().0,
                SweepMode::Se3 => cloud.clone(),
            };
            let before = point_features(&base_cloud, kind, opts.k, opts.normal_k)?;
            for trial in 0..opts.trials {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((ci as u64) << 32) ^ trial as u64);
                let axis = opts.axis.unwrap_or_else(|| random_unit_vector(&mut rng));
                let crop_seed: u64 = rng.random();
                let t = Vec3::from_fn(|_, _| rng.random_range(opts.trans_range.0..=opts.trans_range.1));
                let (subject, rows) = match mode {
                    SweepMode::RotationOnly => (cloud.clone(), (0..cloud.len()).collect::<Vec<_>>()),
                    SweepMode::Se3 => {
                        let keep = ((cloud.len() as f64) * opts.keep_fraction).round() as usize;
                        let (mut crop, idx) = crop_partial(cloud, keep.clamp(1, cloud.len() - 1), crop_seed)?;
                        crop.clear_normals();
                        (crop, idx)
                    }
                };
                for (mi, &deg) in magnitudes_deg.iter().enumerate() {
                    let translation = if mode == SweepMode::Se3 { t } else { Vec3::zeros() };
                    let pose = RigidTransform::from_axis_angle(axis, deg.to_radians(), translation);
                    let mut moved = apply_transform(&subject, &pose);
                    if mode == SweepMode::Se3 && kind == FeatureKind::Rri {
                        moved = moved.centered().0;
                    }
                    let after = point_features(&moved, kind, opts.k, opts.normal_k)?;
                    sums[mi] += mean_row_similarity(&before, &after, &rows);
                }
            }
        }
        let denom = (corpus.len() * opts.trials) as f64;
        let name = match mode {
            SweepMode::RotationOnly => kind.name().to_string(),
            SweepMode::Se3 => format!("{}-SE3", kind.name()),
        };
        series.push((name, sums.into_iter().map(|s| s / denom).collect()));
    }
    Ok(RobustnessCurve {
        variable: "rotation_deg".into(),
        magnitudes: magnitudes_deg.to_vec(),
        series,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseOptions {
    pub k: usize,
    pub normal_k: usize,
    pub clip: f64,
    /// Divide each channel by its min-max range over the clean corpus.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        Self {
            k: 16,
            normal_k: 16,
            clip: 0.05,
            normalize: true,
            seed: 0,
        }
    }
}

/// Mean absolute per-channel difference between features of clean and
/// noised clouds. Normals are re-estimated on both sides so that zero noise
/// gives zero error.
pub fn noise_sweep(
    corpus: &[PointCloud],
    kinds: &[FeatureKind],
    sigmas: &[f64],
    opts: &NoiseOptions,
) -> Result<RobustnessCurve> {
    if sigmas.first().is_some_and(|s| *s < 0.0) {
        return Err(invalid("noise sigma must be non-negative"));
    }
    check_sweep(sigmas)?;
    if corpus.is_empty() {
        return Err(invalid("noise sweep needs at least one cloud"));
    }
    let bare: Vec<PointCloud> = corpus
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.clear_normals();
            c
        })
        .collect();
    let mut series = Vec::new();
    for &kind in kinds {
        // ΔXYZ is compared edge by edge, so the noised cloud reuses the
        // clean neighbour graph; every other feature is recomputed from
        // the noised points alone
        let graphs: Vec<Option<NeighborGraph>> = bare
            .iter()
            .map(|c| {
                let all: Vec<usize> = (0..c.len()).collect();
                (kind == FeatureKind::Dxyz).then(|| knn_graph(c, &all, opts.k)).transpose()
            })
            .collect::<Result<_>>()?;
        let features = |cloud: &PointCloud, ci: usize| match &graphs[ci] {
            Some(g) => dxyz_features(cloud, g),
            None => point_features(cloud, kind, opts.k, opts.normal_k),
        };
        let clean: Vec<FeatureMatrix> = bare
            .iter()
            .enumerate()
            .map(|(ci, c)| features(c, ci))
            .collect::<Result<_>>()?;
        let cols = clean[0].cols();
        let mut lo = vec![f64::INFINITY; cols];
        let mut hi = vec![f64::NEG_INFINITY; cols];
        for f in &clean {
            for r in 0..f.rows() {
                for (c, v) in f.row(r).iter().enumerate() {
                    lo[c] = lo[c].min(*v);
                    hi[c] = hi[c].max(*v);
                }
            }
        }
        let scale: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if !opts.normalize { 1.0 } else if h > l { 1.0 / (h - l) } else { 0.0 })
            .collect();
        let mut curve = Vec::with_capacity(sigmas.len());
        for (si, &sigma) in sigmas.iter().enumerate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for (ci, cloud) in bare.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((ci as u64) << 32) ^ si as u64);
                let noisy = add_noise(cloud, sigma, opts.clip, &mut rng)?;
                let f = features(&noisy, ci)?;
                let g = &clean[ci];
                for (a, (b, c)) in f.values().iter().zip(g.values().iter().zip(scale.iter().cycle())) {
                    total += (a - b).abs() * c;
                }
                count += g.values().len();
            }
            curve.push(total / count as f64);
        }
        series.push((kind.name().to_string(), curve));
    }
    Ok(RobustnessCurve {
        variable: "noise_sigma".into(),
        magnitudes: sigmas.to_vec(),
        series,
    })
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
}

/// Point-to-point ICP from the identity with nearest-neighbour matching and
/// an SVD update; stops once the update moves less than `tol` (rotation
/// angle plus translation norm) or after `max_iters` iterations.
pub fn icp_with_stats(source: &PointCloud, target: &PointCloud, max_iters: usize, tol: f64) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(invalid("ICP needs non-empty clouds"));
    }
    let mut current = RigidTransform::identity();
    let mut iterations = 0;
    let tp = target.points();
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let targets = source
            .points()
            .iter()
            .map(|p| tp[nearest_index(tp, &current.apply_point(p)).0])
            .collect();
        let corr = Correspondences {
            targets,
            confidences: vec![1.0; source.len()],
            valid: vec![true; source.len()],
        };
        let next = weighted_procrustes(source, &corr)?;
        let step = next.compose(&current.inverse());
        current = next;
        if step.angle() + step.translation.norm() < tol {
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        iterations,
    })
}

pub fn icp_baseline(source: &PointCloud, target: &PointCloud, max_iters: usize, tol: f64) -> Result<RigidTransform> {
    Ok(icp_with_stats(source, target, max_iters, tol)?.transform)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let r = RigidTransform::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7, Vec3::zeros()).rotation;
        assert_eq!(rotation_error(&r, &r), 0.0);
        let flip = RigidTransform::from_axis_angle(Vec3::new(0.3, -1.0, 0.2), std::f64::consts::PI, Vec3::zeros());
        assert!((rotation_error(&r, &(r * flip.rotation)) - std::f64::consts::PI).abs() < 1e-7);
        assert_eq!(translation_error(&Vec3::zeros(), &Vec3::new(3.0, 4.0, 0.0)), 5.0);
        let one = PointCloud::new(vec![Vec3::new(0.2, 0.1, -0.4)]).unwrap();
        let d = Vec3::new(0.1, -0.2, 0.3);
        let e = rmse_error(&one, &RigidTransform::identity(), &RigidTransform::from_translation(d));
        assert!((e - d.norm()).abs() < 1e-15);
    }

    #[test]
    fn report_serialization() {
        let mut rep = MetricReport::default();
        let c = PointCloud::new(vec![Vec3::x(), Vec3::y()]).unwrap();
        rep.push("a", &c, &RigidTransform::identity(), &RigidTransform::identity());
        assert_eq!(rep.to_csv(), "pair_id,LR_deg,Lt,LRMSE\na,0,0,0\n");
        assert!(rep.summary_json().contains("\"mean_lr_deg\": 0.0"));
    }

    #[test]
    fn curve_csv_and_validation() {
        let c = RobustnessCurve {
            variable: "x".into(),
            magnitudes: vec![0.0, 1.0],
            series: vec![("A".into(), vec![1.0, 0.5]), ("B".into(), vec![0.0, 2.0])],
        };
        assert_eq!(c.to_csv(), "magnitude,A,B\n0,1,0\n1,0.5,2\n");
        assert!(check_sweep(&[0.0, 0.0]).is_err());
        assert!("sift".parse::<FeatureKind>().is_err());
    }

    #[test]
    fn icp_identical_clouds_stop_after_one_iteration() {
        let pts = (0..50)
            .map(|i| {
                let a = i as f64 * 0.37;
                Vec3::new(a.cos(), (1.3 * a).sin(), (0.1 * i as f64).sin() * 0.5)
            })
            .collect();
        let c = PointCloud::new(pts).unwrap();
        let r = icp_with_stats(&c, &c, 30, 1e-9).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.transform.angle() < 1e-9);
    }
}
