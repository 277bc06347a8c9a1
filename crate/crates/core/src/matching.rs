//! Descriptor matching: feature-distance cost, Sinkhorn normalisation with
//! an outlier slack row/column, soft correspondences and the weighted
//! Procrustes solve.
//!
//! Each stage has a plain function on values and a tape variant used for
//! training and by [`register`]; both compute the same quantities.

use std::fmt::Write as _;
use std::rc::Rc;

use crate::diffcore::{kabsch_rotation, ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::geom::{Mat3, PointCloud, RigidTransform, Vec3};
use crate::net::{hgm_forward_tape, Descriptor, DescriptorVars, HgmConfig, HgmGeometry};

/// Non-negative soft assignment, `(N+1)×(M+1)` when `slack` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    weights: Vec<f64>,
    rows: usize,
    cols: usize,
    slack: bool,
}

impl MatchMatrix {
    /// `weights` is row-major over the full (possibly slack-padded) matrix.
    pub fn new(weights: Vec<f64>, rows: usize, cols: usize, slack: bool) -> Result<Self> {
        if weights.len() != rows * cols || rows < 1 + slack as usize || cols < 1 + slack as usize {
            return Err(invalid(format!(
                "{} weights for a {rows}x{cols} match matrix",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("match weights must be finite and non-negative"));
        }
        Ok(Self {
            weights,
            rows,
            cols,
            slack,
        })
    }

    pub fn has_slack(&self) -> bool {
        self.slack
    }

    /// Number of source points (non-slack rows).
    pub fn n(&self) -> usize {
        self.rows - self.slack as usize
    }

    /// Number of target points (non-slack columns).
    pub fn m(&self) -> usize {
        self.cols - self.slack as usize
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn full_rows(&self) -> usize {
        self.rows
    }

    pub fn full_cols(&self) -> usize {
        self.cols
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        (0..self.m()).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.n()).map(|i| self.get(i, j)).sum()
    }

    /// `i,j,weight` lines for non-slack weights above `threshold`.
    pub fn to_csv(&self, threshold: f64) -> String {
        let mut out = String::from("i,j,weight\n");
        for i in 0..self.n() {
            for j in 0..self.m() {
                let w = self.get(i, j);
                if w > threshold {
                    let _ = writeln!(out, "{i},{j},{w}");
                }
            }
        }
        out
    }
}

/// Mapped targets and inlier confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub targets: Vec<Vec3>,
    pub confidences: Vec<f64>,
    /// False where a row carried no mass and the barycentre is undefined.
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisterConfig {
    pub sinkhorn_iters: usize,
    pub slack: bool,
    /// Slack entries start at `exp(−alpha)`.
    pub alpha: f64,
    pub lambda_u: f64,
    pub lambda_s: [f64; 3],
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            sinkhorn_iters: 5,
            slack: true,
            alpha: 1.0,
            lambda_u: 1.0,
            lambda_s: [1.0; 3],
        }
    }
}

impl RegisterConfig {
    fn block_weights(&self, channels: &[usize]) -> Result<Vec<f64>> {
        if channels.len() != 4 {
            return Err(invalid(format!("expected 4 descriptor blocks, got {}", channels.len())));
        }
        let lambdas = [self.lambda_u, self.lambda_s[0], self.lambda_s[1], self.lambda_s[2]];
        Ok(lambdas
            .iter()
            .zip(channels)
            .map(|(l, &c)| l / (c as f64).sqrt())
            .collect())
    }
}

/// Row-major `N×M` matrix of `Σ_b λ_b ‖A_b,i − B_b,j‖² / √|C_b|`.
pub fn match_cost(desc_x: &Descriptor, desc_y: &Descriptor, cfg: &RegisterConfig) -> Result<Tensor> {
    let cx = desc_x.block_channels();
    if cx != desc_y.block_channels() {
        return Err(Error::ConfigMismatch(format!(
            "descriptor layouts differ: {cx:?} vs {:?}",
            desc_y.block_channels()
        )));
    }
    let weights = cfg.block_weights(&cx)?;
    let (n, m) = (desc_x.rows(), desc_y.rows());
    let mut cost = vec![0.0; n * m];
    for ((bx, by), w) in desc_x.blocks().into_iter().zip(desc_y.blocks()).zip(&weights) {
        for i in 0..n {
            let a = bx.row(i);
            for j in 0..m {
                let d: f64 = a.iter().zip(by.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                cost[i * m + j] += w * d;
            }
        }
    }
    Tensor::matrix(n, m, cost)
}

/// Cost matrix on a tape, expanded as `‖a‖² + ‖b‖² − 2·a·b` over the
/// block-weighted concatenation.
pub fn match_cost_tape(
    tape: &mut Tape,
    dx: &DescriptorVars,
    dy: &DescriptorVars,
    cfg: &RegisterConfig,
) -> Result<Var> {
    let channels: Vec<usize> = dx.blocks().iter().map(|&b| tape.value(b).cols()).collect();
    let cy: Vec<usize> = dy.blocks().iter().map(|&b| tape.value(b).cols()).collect();
    if channels != cy {
        return Err(Error::ConfigMismatch(format!("descriptor layouts differ: {channels:?} vs {cy:?}")));
    }
    let weights = cfg.block_weights(&channels)?;
    let weighted = |tape: &mut Tape, d: &DescriptorVars| -> Result<Var> {
        let parts: Vec<Var> = d
            .blocks()
            .iter()
            .zip(&weights)
            .map(|(&b, w)| tape.scale(b, w.sqrt()))
            .collect();
        tape.concat_cols(&parts)
    };
    let a = weighted(tape, dx)?;
    let b = weighted(tape, dy)?;
    let bt = tape.transpose(b);
    let cross = tape.matmul(a, bt)?;
    let cross = tape.scale(cross, -2.0);
    let a2 = tape.mul(a, a)?;
    let a2 = tape.sum_cols(a2);
    let b2 = tape.mul(b, b)?;
    let b2 = tape.sum_cols(b2);
    let b2 = tape.transpose(b2);
    let e = tape.add_row(cross, b2)?;
    tape.add_col(e, a2)
}

/// `exp(−E)` with an optional slack row/column at `exp(−alpha)`.
pub fn init_assignment(cost: &Tensor, slack: bool, alpha: f64) -> Result<MatchMatrix> {
    if cost.data().iter().any(|c| c.is_nan()) {
        return Err(Error::NonFinite("match cost".into()));
    }
    let (n, m) = (cost.rows(), cost.cols());
    if !slack {
        let w = cost.data().iter().map(|c| (-c).exp()).collect();
        return MatchMatrix::new(w, n, m, false);
    }
    let s = (-alpha).exp();
    let mut w = Vec::with_capacity((n + 1) * (m + 1));
    for i in 0..n {
        w.extend(cost.row(i).iter().map(|c| (-c).exp()));
        w.push(s);
    }
    w.extend(std::iter::repeat_n(s, m + 1));
    MatchMatrix::new(w, n + 1, m + 1, true)
}

/// Alternating row/column normalisation. With slack, rows are normalised
/// over all columns except the slack row itself, columns over all rows
/// except the slack column, and finally any non-slack row whose non-slack
/// mass exceeds 1 is scaled back to 1.
pub fn sinkhorn(m: &MatchMatrix, iters: usize) -> Result<MatchMatrix> {
    if iters == 0 {
        return Err(invalid("sinkhorn needs at least one iteration"));
    }
    let (r, c) = (m.rows, m.cols);
    let mut w = m.weights.clone();
    let row_end = m.n();
    let col_end = m.m();
    let mut fallback = 0usize;
    for _ in 0..iters {
        for i in 0..row_end {
            let row = &mut w[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                fallback += 1;
                row.iter_mut().for_each(|v| *v = 1.0 / c as f64);
            }
        }
        for j in 0..col_end {
            let s: f64 = (0..r).map(|i| w[i * c + j]).sum();
            if s > 0.0 {
                for i in 0..r {
                    w[i * c + j] /= s;
                }
            }
        }
    }
    if m.slack {
        for i in 0..row_end {
            let s: f64 = w[i * c..i * c + col_end].iter().sum();
            if s > 1.0 {
                w[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    if fallback > 0 {
        log::warn!("sinkhorn: {fallback} all-zero rows replaced by a uniform row");
    }
    MatchMatrix::new(w, r, c, m.slack)
}

/// Log-domain Sinkhorn on a tape from `logits = −E` (`N×M`). Returns the
/// log of the normalised (possibly slack-padded) matrix.
pub fn sinkhorn_tape(tape: &mut Tape, logits: Var, iters: usize, slack: bool, alpha: f64) -> Result<Var> {
    if iters == 0 {
        return Err(invalid("sinkhorn needs at least one iteration"));
    }
    let mut x = if slack { tape.pad_slack(logits, -alpha) } else { logits };
    x = tape.log_sinkhorn(x, iters, slack);
    if slack {
        x = tape.log_cap_rows(x);
    }
    Ok(x)
}

/// The non-slack `N×M` block of an exponentiated log match matrix.
pub fn match_block(tape: &mut Tape, log_m: Var, n: usize, m: usize, slack: bool) -> Result<Var> {
    let e = tape.exp(log_m);
    if !slack {
        return Ok(e);
    }
    let rows = tape.gather_rows(e, Rc::new((0..n).collect()))?;
    tape.slice_cols(rows, 0, m)
}

pub fn soft_correspondences(m: &MatchMatrix, target: &PointCloud) -> Result<Correspondences> {
    if target.len() != m.m() {
        return Err(invalid(format!(
            "match matrix has {} targets, cloud has {}",
            m.m(),
            target.len()
        )));
    }
    let pts = target.points();
    let mut targets = Vec::with_capacity(m.n());
    let mut confidences = Vec::with_capacity(m.n());
    let mut valid = Vec::with_capacity(m.n());
    for i in 0..m.n() {
        let mut s = 0.0;
        let mut acc = Vec3::zeros();
        for (j, p) in pts.iter().enumerate() {
            let w = m.get(i, j);
            s += w;
            acc += p * w;
        }
        confidences.push(s);
        if s > 0.0 {
            targets.push(acc / s);
            valid.push(true);
        } else {
            targets.push(Vec3::zeros());
            valid.push(false);
        }
    }
    Ok(Correspondences {
        targets,
        confidences,
        valid,
    })
}

/// Confidence-weighted rigid fit mapping `source` onto the corresponding
/// targets.
pub fn weighted_procrustes(source: &PointCloud, corr: &Correspondences) -> Result<RigidTransform> {
    let n = source.len();
    if corr.targets.len() != n || corr.confidences.len() != n {
        return Err(invalid("correspondence count differs from source size"));
    }
    let weights: Vec<f64> = corr
        .confidences
        .iter()
        .zip(&corr.valid)
        .map(|(c, v)| if *v { *c } else { 0.0 })
        .collect();
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(invalid("confidences must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all correspondence confidences are zero".into()));
    }
    let xs = source.points();
    let xbar = xs.iter().zip(&weights).map(|(p, w)| p * *w).sum::<Vec3>() / total;
    let ybar = corr.targets.iter().zip(&weights).map(|(p, w)| p * *w).sum::<Vec3>() / total;
    let mut h = Mat3::zeros();
    for ((x, y), w) in xs.iter().zip(&corr.targets).zip(&weights) {
        h += (x - xbar) * (y - ybar).transpose() * (*w / total);
    }
    let (r, _) = kabsch_rotation(&h)?;
    RigidTransform::new(r, ybar - r * xbar)
}

/// Rotation (3×3) and translation (1×3) on a tape from an `N×M` match
/// block and constant source/target coordinates.
pub fn procrustes_tape(tape: &mut Tape, m_block: Var, source: &PointCloud, target: &PointCloud) -> Result<(Var, Var)> {
    let x = tape.constant(points_tensor(source));
    let y = tape.constant(points_tensor(target));
    let c = tape.sum_cols(m_block);
    let total = tape.sum_all(c);
    let inv = tape.reciprocal(total);
    let my = tape.matmul(m_block, y)?;
    let ct = tape.transpose(c);
    let cx = tape.matmul(ct, x)?;
    let xbar = tape.mul_scalar(cx, inv)?;
    let ysum = tape.sum_rows(my);
    let ybar = tape.mul_scalar(ysum, inv)?;
    let xt = tape.transpose(x);
    let h = tape.matmul(xt, my)?;
    let xbar_t = tape.transpose(xbar);
    let outer = tape.matmul(xbar_t, ysum)?;
    let h = tape.sub(h, outer)?;
    let r = tape.polar_rotation(h)?;
    let rt = tape.transpose(r);
    let rx = tape.matmul(xbar, rt)?;
    let t = tape.sub(ybar, rx)?;
    Ok((r, t))
}

pub fn points_tensor(cloud: &PointCloud) -> Tensor {
    let data = cloud.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Tensor::matrix(cloud.len(), 3, data).expect("3 values per point")
}

pub fn transform_from_tape(tape: &Tape, r: Var, t: Var) -> Result<RigidTransform> {
    let rm = Mat3::from_row_slice(tape.value(r).data());
    let tv = tape.value(t).data();
    RigidTransform::new(rm, Vec3::new(tv[0], tv[1], tv[2]))
}

/// One direction of the matching head on a tape: cost → Sinkhorn →
/// Procrustes. Returns `(log m*, R, t)`.
pub struct DirectionOutput {
    pub log_match: Var,
    pub block: Var,
    pub rotation: Var,
    pub translation: Var,
}

pub fn match_direction(
    tape: &mut Tape,
    cost: Var,
    source: &PointCloud,
    target: &PointCloud,
    cfg: &RegisterConfig,
) -> Result<DirectionOutput> {
    let logits = tape.scale(cost, -1.0);
    let log_match = sinkhorn_tape(tape, logits, cfg.sinkhorn_iters, cfg.slack, cfg.alpha)?;
    let block = match_block(tape, log_match, source.len(), target.len(), cfg.slack)?;
    let (rotation, translation) = procrustes_tape(tape, block, source, target)?;
    Ok(DirectionOutput {
        log_match,
        block,
        rotation,
        translation,
    })
}

/// One-shot registration of `source` onto `target`: both clouds are encoded
/// independently with shared weights, then matched and solved.
pub fn register(
    source: &PointCloud,
    target: &PointCloud,
    params: &ParamStore,
    hgm: &HgmConfig,
    cfg: &RegisterConfig,
) -> Result<(RigidTransform, MatchMatrix)> {
    let gx = HgmGeometry::prepare(source, hgm)?;
    let gy = HgmGeometry::prepare(target, hgm)?;
    let mut tape = Tape::new();
    let dx = hgm_forward_tape(&mut tape, params, hgm, &gx)?;
    let dy = hgm_forward_tape(&mut tape, params, hgm, &gy)?;
    let cost = match_cost_tape(&mut tape, &dx, &dy, cfg)?;
    let out = match_direction(&mut tape, cost, source, target, cfg)?;
    let t = transform_from_tape(&tape, out.rotation, out.translation)?;
    let lm = tape.value(out.log_match);
    let m = MatchMatrix::new(
        lm.data().iter().map(|v| v.exp()).collect(),
        lm.rows(),
        lm.cols(),
        cfg.slack,
    )?;
    Ok((t, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_transform, random_se3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(rng: &mut ChaCha8Rng, n: usize, ch: [usize; 4]) -> Descriptor {
        let mut t = |c: usize| Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        Descriptor {
            unary: t(ch[0]),
            smooth: vec![t(ch[1]), t(ch[2]), t(ch[3])],
        }
    }

    #[test]
    fn cost_identical_descriptors_zero_diagonal_and_tape_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = desc(&mut rng, 5, [4, 3, 2, 5]);
        let cfg = RegisterConfig::default();
        let c = match_cost(&d, &d, &cfg).unwrap();
        for i in 0..5 {
            assert_eq!(c.at(i, i), 0.0);
        }
        let e = desc(&mut rng, 6, [4, 3, 2, 5]);
        let c = match_cost(&d, &e, &cfg).unwrap();
        let mut tape = Tape::new();
        let v = |tape: &mut Tape, d: &Descriptor| DescriptorVars {
            unary: tape.constant(d.unary.clone()),
            smooth: d.smooth.iter().map(|s| tape.constant(s.clone())).collect(),
        };
        let (dv, ev) = (v(&mut tape, &d), v(&mut tape, &e));
        let ct = match_cost_tape(&mut tape, &dv, &ev, &cfg).unwrap();
        for (a, b) in c.data().iter().zip(tape.value(ct).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = desc(&mut rng, 5, [4, 3, 2, 6]);
        assert!(matches!(match_cost(&d, &bad, &cfg), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn init_assignment_saturates_without_nan() {
        let cost = Tensor::matrix(2, 2, vec![0.0, 1e6, 2.0, 0.0]).unwrap();
        let m = init_assignment(&cost, true, 1.0).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert!((m.get(1, 0) - (-2.0f64).exp()).abs() < 1e-15);
        assert!((m.get(2, 2) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sinkhorn_uniform_and_tape_agreement() {
        let ones = MatchMatrix::new(vec![1.0; 16], 4, 4, false).unwrap();
        let s = sinkhorn(&ones, 10).unwrap();
        assert!(s.weights().iter().all(|w| (w - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cost = Tensor::matrix(5, 7, (0..35).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
        for slack in [false, true] {
            let plain = sinkhorn(&init_assignment(&cost, slack, 1.0).unwrap(), 5).unwrap();
            let mut tape = Tape::new();
            let c = tape.constant(cost.clone());
            let l = tape.scale(c, -1.0);
            let lm = sinkhorn_tape(&mut tape, l, 5, slack, 1.0).unwrap();
            for (a, b) in plain.weights().iter().zip(tape.value(lm).data()) {
                assert!((a - b.exp()).abs() < 1e-12);
            }
            if slack {
                for i in 0..5 {
                    assert!(plain.row_sum(i) <= 1.0 + 1e-12);
                }
                for j in 0..7 {
                    assert!(plain.col_sum(j) <= 1.0 + 1e-12);
                }
            }
        }
        let zero = MatchMatrix::new(vec![0.0; 4], 2, 2, false).unwrap();
        let s = sinkhorn(&zero, 1).unwrap();
        assert!(s.weights().iter().all(|w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn correspondences_and_identity_procrustes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..10).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let mut w = vec![0.0; 100];
        for i in 0..10 {
            w[i * 10 + i] = 1.0;
        }
        w[9 * 10 + 9] = 0.0;
        w.iter_mut().skip(90).for_each(|v| *v = 0.1);
        let m = MatchMatrix::new(w, 10, 10, false).unwrap();
        let corr = soft_correspondences(&m, &cloud).unwrap();
        assert_eq!(corr.targets[3], pts[3]);
        assert_eq!(corr.confidences[3], 1.0);
        let centroid = pts.iter().sum::<Vec3>() / 10.0;
        assert!((corr.targets[9] - centroid).norm() < 1e-12);

        let exact = Correspondences {
            targets: pts.clone(),
            confidences: vec![1.0; 10],
            valid: vec![true; 10],
        };
        let t = weighted_procrustes(&cloud, &exact).unwrap();
        assert!((t.rotation - Mat3::identity()).abs().max() < 1e-9);
        assert!(t.translation.norm() < 1e-9);

        let g = random_se3((0.0, 180.0), (-0.5, 0.5), &mut rng).unwrap();
        let moved = apply_transform(&cloud, &g);
        let corr = Correspondences {
            targets: moved.points().to_vec(),
            ..exact
        };
        let t = weighted_procrustes(&cloud, &corr).unwrap();
        assert!((t.rotation - g.rotation).abs().max() < 1e-9);
        assert!((t.translation - g.translation).norm() < 1e-9);
    }

    #[test]
    fn procrustes_tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src: Vec<Vec3> = (0..8).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let tgt: Vec<Vec3> = (0..6).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let (src, tgt) = (PointCloud::new(src).unwrap(), PointCloud::new(tgt).unwrap());
        let w: Vec<f64> = (0..48).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = MatchMatrix::new(w.clone(), 8, 6, false).unwrap();
        let plain = weighted_procrustes(&src, &soft_correspondences(&m, &tgt).unwrap()).unwrap();
        let mut tape = Tape::new();
        let mv = tape.constant(Tensor::matrix(8, 6, w).unwrap());
        let (r, t) = procrustes_tape(&mut tape, mv, &src, &tgt).unwrap();
        let tt = transform_from_tape(&tape, r, t).unwrap();
        assert!((tt.rotation - plain.rotation).abs().max() < 1e-10);
        assert!((tt.translation - plain.translation).norm() < 1e-10);
    }
}
