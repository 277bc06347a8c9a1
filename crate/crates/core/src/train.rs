//! Training objective (bidirectional registration loss plus inlier loss),
//! batched Adam epochs and validation.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{crop_pair, CropProtocol, RegPair, TriMesh};
use crate::diffcore::{write_checkpoint, Adam, GradMap, ParamStore, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::eval::MetricReport;
use crate::geom::{PointCloud, RigidTransform};
use crate::matching::{match_cost_tape, match_direction, points_tensor, register, MatchMatrix, RegisterConfig};
use crate::net::{hgm_forward_tape, HgmConfig, HgmGeometry};

/// Mean over points of `‖T_pred(x) − T_gt(x)‖₁`.
pub fn registration_loss(source: &PointCloud, pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    let sum: f64 = source
        .points()
        .iter()
        .map(|p| (pred.apply_point(p) - gt.apply_point(p)).abs().sum())
        .sum();
    sum / source.len() as f64
}

/// `(1/M)Σ_j(1 − Σ_i m_ij) + (1/N)Σ_i(1 − Σ_j m_ij)` over the non-slack block.
pub fn inlier_loss(m: &MatchMatrix) -> f64 {
    let (n, k) = (m.n(), m.m());
    let cols: f64 = (0..k).map(|j| 1.0 - m.col_sum(j)).sum();
    let rows: f64 = (0..n).map(|i| 1.0 - m.row_sum(i)).sum();
    cols / k as f64 + rows / n as f64
}

/// Registration loss on a tape; `rotation` is 3×3 and `translation` 1×3.
pub fn registration_loss_tape(
    tape: &mut Tape,
    source: &PointCloud,
    rotation: Var,
    translation: Var,
    gt: &RigidTransform,
) -> Result<Var> {
    let x = tape.constant(points_tensor(source));
    let rt = tape.transpose(rotation);
    let moved = tape.matmul(x, rt)?;
    let moved = tape.add_row(moved, translation)?;
    let want = tape.constant(points_tensor(&crate::geom::apply_transform(source, gt)));
    let diff = tape.sub(moved, want)?;
    let diff = tape.abs(diff);
    let s = tape.sum_all(diff);
    Ok(tape.scale(s, 1.0 / source.len() as f64))
}

/// Inlier loss on a tape from the `N×M` non-slack block.
pub fn inlier_loss_tape(tape: &mut Tape, block: Var) -> Result<Var> {
    let (n, m) = {
        let b = tape.value(block);
        (b.rows() as f64, b.cols() as f64)
    };
    let s = tape.sum_all(block);
    let s = tape.scale(s, -(1.0 / n + 1.0 / m));
    Ok(tape.add_scalar(s, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub registration: f64,
    pub inlier: f64,
}

/// Builds `L_reg^XY + L_reg^YX + ω(L_in^XY + L_in^YX)` for one pair.
///
/// Each cloud is encoded once; the reverse direction runs its own Sinkhorn
/// and Procrustes on the transposed cost, which equals the cost of a fresh
/// encoding pass with the clouds swapped.
pub fn pair_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    hgm: &HgmConfig,
    reg: &RegisterConfig,
    omega: f64,
    pair: &RegPair,
) -> Result<(Var, LossParts)> {
    let gx = HgmGeometry::prepare(&pair.source, hgm)?;
    let gy = HgmGeometry::prepare(&pair.target, hgm)?;
    let dx = hgm_forward_tape(tape, store, hgm, &gx)?;
    let dy = hgm_forward_tape(tape, store, hgm, &gy)?;
    let cost = match_cost_tape(tape, &dx, &dy, reg)?;
    let cost_rev = tape.transpose(cost);

    let xy = match_direction(tape, cost, &pair.source, &pair.target, reg)?;
    let yx = match_direction(tape, cost_rev, &pair.target, &pair.source, reg)?;
    let reg_xy = registration_loss_tape(tape, &pair.source, xy.rotation, xy.translation, &pair.gt)?;
    let reg_yx = registration_loss_tape(tape, &pair.target, yx.rotation, yx.translation, &pair.gt.inverse())?;
    let il_xy = inlier_loss_tape(tape, xy.block)?;
    let il_yx = inlier_loss_tape(tape, yx.block)?;

    let l_rg = tape.add(reg_xy, reg_yx)?;
    let l_il = tape.add(il_xy, il_yx)?;
    let weighted = tape.scale(l_il, omega);
    let total = tape.add(l_rg, weighted)?;
    let parts = LossParts {
        total: tape.value(total).data()[0],
        registration: tape.value(l_rg).data()[0],
        inlier: tape.value(l_il).data()[0],
    };
    Ok((total, parts))
}

/// Loss value and parameter gradients of one pair.
pub fn pair_loss_and_grads(
    store: &ParamStore,
    hgm: &HgmConfig,
    reg: &RegisterConfig,
    omega: f64,
    pair: &RegPair,
) -> Result<(LossParts, GradMap, usize)> {
    let mut tape = Tape::new();
    let (loss, parts) = pair_loss_tape(&mut tape, store, hgm, reg, omega, pair)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("loss of pair {}", pair.id)));
    }
    let grads = tape.backward(loss)?;
    Ok((parts, tape.param_grads(store, &grads), tape.clamped_polar_count()))
}

/// Loss value only.
pub fn pair_loss(store: &ParamStore, hgm: &HgmConfig, reg: &RegisterConfig, omega: f64, pair: &RegPair) -> Result<LossParts> {
    let mut tape = Tape::new();
    Ok(pair_loss_tape(&mut tape, store, hgm, reg, omega, pair)?.1)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub omega: f64,
    pub rot_range_deg: (f64, f64),
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub register: RegisterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            omega: 0.01,
            rot_range_deg: (0.0, 180.0),
            noise_sigma: 0.0,
            noise_clip: 0.05,
            seed: 0,
            checkpoint_every: 0,
            register: RegisterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.rot_range_deg;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        if !(self.omega >= 0.0) {
            return Err(invalid("inlier weight must be non-negative"));
        }
        if !(0.0 <= a && a <= b && b <= 180.0) {
            return Err(invalid(format!("rotation range [{a}, {b}] must lie in [0, 180]")));
        }
        if self.batch_size == 0 || !(self.noise_sigma >= 0.0) {
            return Err(invalid("batch size must be positive and noise non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub loss_rg: f64,
    pub loss_il: f64,
    /// Rotation-gradient clamps triggered during the epoch.
    pub clamped: usize,
}

/// One pass over `pairs` in order: gradients are averaged over each batch
/// before a single Adam step.
pub fn train_epoch(
    pairs: &[RegPair],
    store: &mut ParamStore,
    adam: &mut Adam,
    hgm: &HgmConfig,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    if pairs.is_empty() {
        return Err(invalid("training epoch needs at least one pair"));
    }
    let mut sums = [0.0; 3];
    let mut clamped = 0;
    for batch in pairs.chunks(cfg.batch_size) {
        let mut acc = GradMap::default();
        for pair in batch {
            let (parts, grads, c) = pair_loss_and_grads(store, hgm, &cfg.register, cfg.omega, pair)?;
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("gradient of pair {}", pair.id)));
            }
            acc.add_assign(&grads)?;
            sums[0] += parts.total;
            sums[1] += parts.registration;
            sums[2] += parts.inlier;
            clamped += c;
        }
        acc.scale(1.0 / batch.len() as f64);
        adam.step(store, &acc)?;
    }
    let n = pairs.len() as f64;
    Ok(EpochStats {
        loss: sums[0] / n,
        loss_rg: sums[1] / n,
        loss_il: sums[2] / n,
        clamped,
    })
}

/// Registers every pair and scores the predictions.
pub fn validate(pairs: &[RegPair], store: &ParamStore, hgm: &HgmConfig, reg: &RegisterConfig) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for p in pairs {
        let (t, _) = register(&p.source, &p.target, store, hgm, reg)?;
        report.push(&p.id, &p.source, &p.gt, &t);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_rg: f64,
    pub loss_il: f64,
    pub val_lr_deg: f64,
    pub val_lt: f64,
    pub val_rmse: f64,
}

pub const RECORD_HEADER: &str = "epoch,loss,loss_rg,loss_il,val_LR,val_Lt,val_RMSE";

impl TrainRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.loss, self.loss_rg, self.loss_il, self.val_lr_deg, self.val_lt, self.val_rmse
        )
    }
}

pub fn records_to_csv(records: &[TrainRecord]) -> String {
    let mut out = format!("{RECORD_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Fresh crop pairs for one epoch: every mesh yields one pair whose seed
/// depends on the run seed, the epoch and the mesh index.
pub fn crop_epoch_pairs(
    meshes: &[(String, TriMesh)],
    protocol: &CropProtocol,
    seed: u64,
    epoch: usize,
) -> Result<Vec<RegPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut pairs: Vec<RegPair> = meshes
        .iter()
        .map(|(id, mesh)| crop_pair(mesh, id, protocol, rng.random()))
        .collect::<Result<_>>()?;
    // Fisher-Yates so batches mix shapes differently every epoch
    for i in (1..pairs.len()).rev() {
        let j = rng.random_range(0..=i);
        pairs.swap(i, j);
    }
    Ok(pairs)
}

/// Runs `cfg.epochs` epochs. `epoch_pairs` supplies the training pairs for
/// each epoch; validation metrics are computed on `val` after every epoch
/// when it is non-empty (otherwise they are NaN). `on_epoch` sees each
/// record as it is produced.
pub fn fit(
    store: &mut ParamStore,
    hgm: &HgmConfig,
    cfg: &TrainConfig,
    mut epoch_pairs: impl FnMut(usize) -> Result<Vec<RegPair>>,
    val: &[RegPair],
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    hgm.validate()?;
    let mut adam = Adam::new(cfg.lr);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let pairs = epoch_pairs(epoch)?;
        let stats = train_epoch(&pairs, store, &mut adam, hgm, cfg).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
            other => other,
        })?;
        if stats.clamped > 0 {
            log::debug!("epoch {epoch}: {} rotation-gradient clamps", stats.clamped);
        }
        let summary = if val.is_empty() {
            None
        } else {
            Some(validate(val, store, hgm, &cfg.register)?.summary())
        };
        let rec = TrainRecord {
            epoch,
            loss: stats.loss,
            loss_rg: stats.loss_rg,
            loss_il: stats.loss_il,
            val_lr_deg: summary.as_ref().map_or(f64::NAN, |s| s.mean_lr_deg),
            val_lt: summary.as_ref().map_or(f64::NAN, |s| s.mean_lt),
            val_rmse: summary.as_ref().map_or(f64::NAN, |s| s.mean_lrmse),
        };
        on_epoch(&rec);
        records.push(rec);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let f = File::create(dir.join(format!("epoch{epoch:04}.gmc")))?;
                write_checkpoint(BufWriter::new(f), store)?;
            }
        }
    }
    Ok(records)
}

/// Adds clipped noise to both clouds of every pair; used for noisy training.
pub fn noisy_pairs(pairs: &[RegPair], sigma: f64, clip: f64, seed: u64) -> Result<Vec<RegPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs
        .iter()
        .map(|p| {
            Ok(RegPair {
                source: crate::data::add_noise(&p.source, sigma, clip, &mut rng)?,
                target: crate::data::add_noise(&p.target, sigma, clip, &mut rng)?,
                ..p.clone()
            })
        })
        .collect()
}
