mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmcnet::data::{
    build_pairs, composite_corpus, crop_pair, make_shape, read_dataset, surface_sample, write_dataset, CropProtocol,
    RegPair, ScanParams, ScanProtocol, ShapeKind, ShapeParams, TriMesh,
};
use gmcnet::diffcore::{read_checkpoint, write_checkpoint};
use gmcnet::eval::{
    icp_baseline, noise_sweep, similarity_sweep, FeatureKind, MetricReport, NoiseOptions, RobustnessCurve,
    SweepMode, SweepOptions,
};
use gmcnet::geom::{apply_transform, random_se3, PointCloud, RigidTransform};
use gmcnet::io::{load_cloud, read_transform, save_cloud, write_transform};
use gmcnet::matching::{register, RegisterConfig};
use gmcnet::net::{init_params, HgmConfig};
use gmcnet::train::{fit, records_to_csv, TrainConfig, RECORD_HEADER};
use gmcnet::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "gmcnet", version, about = "Rotation-invariant partial-to-partial point-cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Output directory; `run.config` is written here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a registration dataset or a cloud corpus.
    Gen(GenArgs),
    /// Feature robustness sweeps over a cloud corpus.
    Analyze(AnalyzeArgs),
    /// Train the network on a dataset.
    Train(TrainArgs),
    /// Register a cloud pair or every pair of a dataset.
    Register(RegisterArgs),
    /// Score predictions and/or the ICP baseline against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// scan (virtual depth scans), crop (sampled and cropped) or corpus (complete clouds)
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    shapes: Option<usize>,
    /// box, cylinder, torus, capsule, composite or mixed
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    min_overlap: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Depth image width and height in pixels.
    #[arg(long)]
    resolution: Option<usize>,
    /// Noise sigma for the crop protocol.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of .pcb/.xyz clouds (or a `clouds/` subdirectory, or a dataset).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated subset of rri, ppf, fpfh, xyz, dxyz.
    #[arg(long)]
    features: Option<String>,
    /// rotation, se3, noise or all
    #[arg(long)]
    mode: Option<String>,
    /// Rotation magnitudes in degrees, comma separated.
    #[arg(long)]
    magnitudes: Option<String>,
    /// Noise sigmas, comma separated.
    #[arg(long)]
    sigmas: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Optional validation dataset scored after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Extra random rotation of each target per epoch, degrees `lo,hi`;
    /// `0,0` (the default) disables augmentation.
    #[arg(long)]
    rot_range: Option<String>,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Network config; defaults to `model.config` next to the checkpoint.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Register every pair of a dataset instead of a single pair.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Also write `i,j,weight` correspondences.
    #[arg(long)]
    emit_matches: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory of `<pair id>.txt` transforms.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// `icp` to also score the point-to-point ICP baseline.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::InvalidArgument(_) | Error::Format(_) => 2,
        Error::NonFinite(_) | Error::Degenerate(_) => 3,
        Error::ConfigMismatch(_) => 4,
        Error::Shape { .. } => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Train(a) => cmd_train(a),
        Command::Register(a) => cmd_register(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Defaults, then the config file, then flags, then `--set` overrides.
fn resolve(
    defaults: &[(&str, &str)],
    common: &Common,
    flags: impl FnOnce(&mut RunConfig) -> Result<()>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(defaults);
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    cfg.flag("out", common.out.as_ref().map(|p| p.display()))?;
    cfg.flag("seed", common.seed)?;
    flags(&mut cfg)?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn required_path(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    match cfg.raw(key) {
        "" => Err(Error::InvalidArgument(format!("--{} is required", key.replace('_', "-")))),
        v => Ok(PathBuf::from(v)),
    }
}

fn optional_path(cfg: &RunConfig, key: &str) -> Option<PathBuf> {
    match cfg.raw(key) {
        "" => None,
        v => Some(PathBuf::from(v)),
    }
}

fn range(cfg: &RunConfig, key: &str) -> Result<(f64, f64)> {
    match cfg.list::<f64>(key)?[..] {
        [lo, hi] => Ok((lo, hi)),
        _ => Err(Error::InvalidArgument(format!("{key} expects lo,hi"))),
    }
}

fn existing_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} does not exist", path.display()),
        )))
    }
}

/// Order-preserving map over `items` on up to `threads` scoped threads.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

fn shape_meshes(kind: &str, count: usize, seed: u64) -> Result<Vec<(String, String, TriMesh)>> {
    if kind == "composite" {
        return Ok(composite_corpus(count, seed)?
            .into_iter()
            .map(|(id, m)| (id, "composite".to_string(), m))
            .collect());
    }
    let kinds: Vec<&str> = if kind == "mixed" {
        vec!["box", "cylinder", "torus", "capsule", "composite"]
    } else {
        vec![kind]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let name = kinds[i % kinds.len()];
            let k: ShapeKind = name.parse()?;
            let params = ShapeParams {
                extents: gmcnet::geom::Vec3::new(
                    rng.random_range(0.5..1.5),
                    rng.random_range(0.5..1.5),
                    rng.random_range(0.5..1.5),
                ),
                radius: rng.random_range(0.1..0.25),
                length: rng.random_range(0.3..0.6),
                parts: rng.random_range(3..=5),
                ..ShapeParams::default()
            };
            Ok((format!("shape{i:03}"), name.to_string(), make_shape(k, &params, rng.random())?))
        })
        .collect()
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = resolve(
        &[
            ("out", ""),
            ("seed", "0"),
            ("protocol", "scan"),
            ("shapes", "20"),
            ("kind", "composite"),
            ("views", "8"),
            ("cameras", "26"),
            ("min_overlap", "0.4"),
            ("points", "2048"),
            ("resolution", "160"),
            ("rot_range", "0,180"),
            ("trans_range", "-0.5,0.5"),
            ("crop_samples", "1024"),
            ("crop_keep", "768"),
            ("pairs_per_shape", "1"),
            ("noise", "0"),
            ("noise_clip", "0.05"),
        ],
        &a.common,
        |c| {
            c.flag("protocol", a.protocol)?;
            c.flag("shapes", a.shapes)?;
            c.flag("kind", a.kind)?;
            c.flag("views", a.views)?;
            c.flag("min_overlap", a.min_overlap)?;
            c.flag("points", a.points)?;
            c.flag("resolution", a.resolution)?;
            c.flag("noise", a.noise)
        },
    )?;
    let out = required_path(&cfg, "out")?;
    let seed: u64 = cfg.get("seed")?;
    let shapes: usize = cfg.get("shapes")?;
    let kind = cfg.raw("kind").to_string();
    if kind != "mixed" {
        kind.parse::<ShapeKind>()?;
    }
    let protocol = cfg.raw("protocol").to_string();
    // Validate cheap arguments before any expensive meshing.
    let views: usize = cfg.get("views")?;
    if protocol == "scan" && views < 2 {
        return Err(Error::InvalidArgument("pairs need at least 2 views (--views >= 2)".into()));
    }
    fs::create_dir_all(&out)?;
    cfg.write(&out)?;
    let meshes = shape_meshes(&kind, shapes, seed)?;
    let pairs: Vec<RegPair> = match protocol.as_str() {
        "scan" => {
            let res: usize = cfg.get("resolution")?;
            let proto = ScanProtocol {
                scan: ScanParams {
                    width: res,
                    height: res,
                    ..ScanParams::default()
                },
                cameras: cfg.get("cameras")?,
                points: cfg.get("points")?,
                min_overlap: cfg.get("min_overlap")?,
                rot_range_deg: range(&cfg, "rot_range")?,
                trans_range: range(&cfg, "trans_range")?,
                ..ScanProtocol::default()
            };
            build_pairs(&meshes, views, &proto, seed ^ 0x5ca9)?
        }
        "crop" => {
            let sigma: f64 = cfg.get("noise")?;
            let proto = CropProtocol {
                samples: cfg.get("crop_samples")?,
                keep: cfg.get("crop_keep")?,
                rot_range_deg: range(&cfg, "rot_range")?,
                trans_range: range(&cfg, "trans_range")?,
                noise: (sigma > 0.0).then(|| cfg.get("noise_clip")).transpose()?.map(|c| (sigma, c)),
            };
            let per: usize = cfg.get("pairs_per_shape")?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pairs = Vec::new();
            for (id, _, mesh) in &meshes {
                for _ in 0..per {
                    pairs.push(crop_pair(mesh, id, &proto, rng.random())?);
                }
            }
            pairs
        }
        "corpus" => {
            let points: usize = cfg.get("points")?;
            let dir = out.join("clouds");
            fs::create_dir_all(&dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (id, _, mesh) in &meshes {
                save_cloud(&dir.join(format!("{id}.pcb")), &surface_sample(mesh, points, rng.random())?)?;
            }
            println!("clouds: {} written to {}", meshes.len(), dir.display());
            return Ok(());
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown protocol {other:?} (valid: scan, crop, corpus)"
            )))
        }
    };
    write_dataset(&out, &pairs)?;
    let mean_overlap = pairs.iter().map(|p| p.overlap_ratio).sum::<f64>() / pairs.len().max(1) as f64;
    println!("pairs: {}", pairs.len());
    println!("mean overlap: {mean_overlap:.4}");
    Ok(())
}

fn is_cloud_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pcb" | "xyz"))
}

fn load_corpus(dir: &Path) -> Result<Vec<PointCloud>> {
    existing_dir(dir, "corpus")?;
    let list = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = fs::read_dir(d)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file() && is_cloud_file(p));
        files.sort();
        Ok(files)
    };
    let mut files = list(dir)?;
    if files.is_empty() && dir.join("clouds").is_dir() {
        files = list(&dir.join("clouds"))?;
    }
    if files.is_empty() && dir.join("manifest.csv").is_file() {
        return Ok(read_dataset(dir)?.into_iter().map(|p| p.source).collect());
    }
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("corpus {} contains no clouds", dir.display())));
    }
    files.iter().map(|p| load_cloud(p)).collect()
}

fn write_curve(out: &Path, name: &str, curve: &RobustnessCurve) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, curve.to_csv())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg = resolve(
        &[
            ("out", "."),
            ("seed", "0"),
            ("corpus", ""),
            ("features", "rri,ppf,fpfh,xyz,dxyz"),
            ("mode", "all"),
            ("magnitudes", "0,15,30,45,60,75,90,105,120,135,150,165,180"),
            ("sigmas", "0,0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.1"),
            ("trials", "1"),
            ("k", "16"),
            ("normal_k", "16"),
            ("keep_fraction", "0.75"),
            ("trans_range", "-0.5,0.5"),
            ("noise_clip", "0.05"),
            ("normalize", "true"),
            ("limit", "0"),
        ],
        &a.common,
        |c| {
            c.flag("corpus", a.corpus.as_ref().map(|p| p.display()))?;
            c.flag("features", a.features)?;
            c.flag("mode", a.mode)?;
            c.flag("magnitudes", a.magnitudes)?;
            c.flag("sigmas", a.sigmas)?;
            c.flag("trials", a.trials)
        },
    )?;
    let kinds: Vec<FeatureKind> = cfg.list("features").map_err(|_| {
        Error::InvalidArgument(format!(
            "unknown feature in {:?} (valid: rri, ppf, fpfh, xyz, dxyz)",
            cfg.raw("features")
        ))
    })?;
    let mode = cfg.raw("mode").to_string();
    if !matches!(mode.as_str(), "rotation" | "se3" | "noise" | "all") {
        return Err(Error::InvalidArgument(format!(
            "unknown mode {mode:?} (valid: rotation, se3, noise, all)"
        )));
    }
    let mut corpus = load_corpus(&required_path(&cfg, "corpus")?)?;
    let limit: usize = cfg.get("limit")?;
    if limit > 0 {
        corpus.truncate(limit);
    }
    let out = required_path(&cfg, "out")?;
    cfg.write(&out)?;
    let seed: u64 = cfg.get("seed")?;
    let k: usize = cfg.get("k")?;
    let normal_k: usize = cfg.get("normal_k")?;
    let sweep = SweepOptions {
        k,
        normal_k,
        trials: cfg.get("trials")?,
        trans_range: range(&cfg, "trans_range")?,
        keep_fraction: cfg.get("keep_fraction")?,
        seed,
        ..SweepOptions::default()
    };
    let mags: Vec<f64> = cfg.list("magnitudes")?;
    if mode == "rotation" || mode == "all" {
        let curve = similarity_sweep(&corpus, &kinds, &mags, SweepMode::RotationOnly, &sweep)?;
        write_curve(&out, "rotation.csv", &curve)?;
    }
    if mode == "se3" || mode == "all" {
        let curve = similarity_sweep(&corpus, &kinds, &mags, SweepMode::Se3, &sweep)?;
        write_curve(&out, "rotation_se3.csv", &curve)?;
    }
    if mode == "noise" || mode == "all" {
        let opts = NoiseOptions {
            k,
            normal_k,
            clip: cfg.get("noise_clip")?,
            normalize: cfg.get("normalize")?,
            seed,
        };
        let curve = noise_sweep(&corpus, &kinds, &cfg.list::<f64>("sigmas")?, &opts)?;
        write_curve(&out, "noise.csv", &curve)?;
    }
    Ok(())
}

fn register_defaults() -> Vec<(&'static str, &'static str)> {
    vec![("sinkhorn_iters", "5"), ("slack", "true")]
}

fn register_config(cfg: &RunConfig) -> Result<RegisterConfig> {
    Ok(RegisterConfig {
        sinkhorn_iters: cfg.get("sinkhorn_iters")?,
        slack: cfg.get("slack")?,
        ..RegisterConfig::default()
    })
}

/// Applies a random rotation about the origin to every target, composing
/// it into the ground truth.
fn augment(pairs: &[RegPair], rot_range: (f64, f64), rng: &mut ChaCha8Rng) -> Result<Vec<RegPair>> {
    pairs
        .iter()
        .map(|p| {
            let g = random_se3(rot_range, (0.0, 0.0), rng)?;
            Ok(RegPair {
                target: apply_transform(&p.target, &g),
                gt: g.compose(&p.gt),
                ..p.clone()
            })
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let model_text = HgmConfig::default().to_config_string();
    let model_keys: Vec<(String, String)> = model_text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (format!("model.{k}"), v.to_string()))
        .collect();
    let mut defaults: Vec<(&str, &str)> = vec![
        ("out", ""),
        ("seed", "0"),
        ("dataset", ""),
        ("val", ""),
        ("epochs", "200"),
        ("batch_size", "8"),
        ("lr", "0.001"),
        ("omega", "0.01"),
        ("checkpoint_every", "0"),
        ("rot_range", "0,0"),
        ("noise", "0"),
        ("noise_clip", "0.05"),
    ];
    defaults.extend(register_defaults());
    defaults.extend(model_keys.iter().map(|(k, v)| (k.as_str(), v.as_str())));
    let cfg = resolve(&defaults, &a.common, |c| {
        c.flag("dataset", a.dataset.as_ref().map(|p| p.display()))?;
        c.flag("val", a.val.as_ref().map(|p| p.display()))?;
        c.flag("epochs", a.epochs)?;
        c.flag("batch_size", a.batch_size)?;
        c.flag("lr", a.lr)?;
        c.flag("omega", a.omega)?;
        c.flag("checkpoint_every", a.checkpoint_every)?;
        c.flag("rot_range", a.rot_range)
    })?;
    let mut hgm = HgmConfig::default();
    for (k, _) in &model_keys {
        hgm.set(&k["model.".len()..], cfg.raw(k))?;
    }
    hgm.validate()?;
    let seed: u64 = cfg.get("seed")?;
    let tc = TrainConfig {
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        lr: cfg.get("lr")?,
        omega: cfg.get("omega")?,
        rot_range_deg: range(&cfg, "rot_range")?,
        noise_sigma: cfg.get("noise")?,
        noise_clip: cfg.get("noise_clip")?,
        seed,
        checkpoint_every: cfg.get("checkpoint_every")?,
        register: register_config(&cfg)?,
    };
    tc.validate()?;
    if tc.lr == 0.0 {
        log::warn!("learning rate is 0: parameters will not change and the loss curve stays flat");
    }
    let dataset_dir = required_path(&cfg, "dataset")?;
    existing_dir(&dataset_dir, "dataset")?;
    let train_pairs = read_dataset(&dataset_dir)?;
    if train_pairs.is_empty() {
        return Err(Error::InvalidArgument("training dataset has no pairs".into()));
    }
    let val = match optional_path(&cfg, "val") {
        Some(d) => read_dataset(&d)?,
        None => Vec::new(),
    };
    let out = required_path(&cfg, "out")?;
    cfg.write(&out)?;
    fs::write(out.join("model.config"), hgm.to_config_string())?;

    let mut store = init_params(&hgm, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let epoch_pairs = |_epoch: usize| -> Result<Vec<RegPair>> {
        let mut pairs = if tc.rot_range_deg == (0.0, 0.0) {
            train_pairs.clone()
        } else {
            augment(&train_pairs, tc.rot_range_deg, &mut rng)?
        };
        if tc.noise_sigma > 0.0 {
            pairs = gmcnet::train::noisy_pairs(&pairs, tc.noise_sigma, tc.noise_clip, rng.random())?;
        }
        for i in (1..pairs.len()).rev() {
            pairs.swap(i, rng.random_range(0..=i));
        }
        Ok(pairs)
    };
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, format!("{RECORD_HEADER}\n"))?;
    let records = fit(&mut store, &hgm, &tc, epoch_pairs, &val, Some(&out), |r| {
        log::info!(
            "epoch {} loss {:.5} (reg {:.5}, inlier {:.5})",
            r.epoch,
            r.loss,
            r.loss_rg,
            r.loss_il
        );
        // Append as we go so an interrupted run keeps its curve.
        if let Ok(mut f) = fs::OpenOptions::new().append(true).open(&log_path) {
            use std::io::Write;
            let _ = writeln!(f, "{}", r.csv_line());
        }
    })?;
    fs::write(&log_path, records_to_csv(&records))?;
    let f = fs::File::create(out.join("model.gmc"))?;
    write_checkpoint(std::io::BufWriter::new(f), &store)?;
    println!("wrote {}", out.join("model.gmc").display());
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(gmcnet::diffcore::ParamStore, HgmConfig)> {
    let ckpt = required_path(cfg, "checkpoint")?;
    let model_cfg = optional_path(cfg, "model_config").unwrap_or_else(|| {
        ckpt.parent()
            .map(|d| d.join("model.config"))
            .unwrap_or_else(|| PathBuf::from("model.config"))
    });
    let hgm = HgmConfig::parse(&fs::read_to_string(&model_cfg)?)?;
    let store = read_checkpoint(std::io::BufReader::new(fs::File::open(&ckpt)?))?;
    store.check_layout(&init_params(&hgm, 0)?)?;
    Ok((store, hgm))
}

fn cmd_register(a: RegisterArgs) -> Result<()> {
    let mut defaults = vec![
        ("out", "."),
        ("seed", "0"),
        ("checkpoint", ""),
        ("model_config", ""),
        ("source", ""),
        ("target", ""),
        ("dataset", ""),
        ("emit_matches", "false"),
        ("match_threshold", "0.001"),
        ("threads", "1"),
    ];
    defaults.extend(register_defaults());
    let cfg = resolve(&defaults, &a.common, |c| {
        c.flag("checkpoint", a.checkpoint.as_ref().map(|p| p.display()))?;
        c.flag("model_config", a.model_config.as_ref().map(|p| p.display()))?;
        c.flag("source", a.source.as_ref().map(|p| p.display()))?;
        c.flag("target", a.target.as_ref().map(|p| p.display()))?;
        c.flag("dataset", a.dataset.as_ref().map(|p| p.display()))?;
        c.flag("emit_matches", a.emit_matches.then_some(true))?;
        c.flag("threads", a.threads)
    })?;
    let (store, hgm) = load_model(&cfg)?;
    let reg = register_config(&cfg)?;
    let emit: bool = cfg.get("emit_matches")?;
    let threshold: f64 = cfg.get("match_threshold")?;
    let out = required_path(&cfg, "out")?;
    if let Some(dir) = optional_path(&cfg, "dataset") {
        existing_dir(&dir, "dataset")?;
        let pairs = read_dataset(&dir)?;
        cfg.write(&out)?;
        let pred_dir = out.join("predictions");
        fs::create_dir_all(&pred_dir)?;
        if emit {
            fs::create_dir_all(out.join("matches"))?;
        }
        let results = par_map(&pairs, cfg.get("threads")?, |p| {
            register(&p.source, &p.target, &store, &hgm, &reg)
        })?;
        for (p, (t, m)) in pairs.iter().zip(&results) {
            write_transform(&pred_dir.join(format!("{}.txt", p.id)), t)?;
            if emit {
                fs::write(out.join("matches").join(format!("{}.csv", p.id)), m.to_csv(threshold))?;
            }
        }
        println!("registered {} pairs into {}", pairs.len(), pred_dir.display());
        return Ok(());
    }
    let source = load_cloud(&required_path(&cfg, "source")?)?;
    let target = load_cloud(&required_path(&cfg, "target")?)?;
    cfg.write(&out)?;
    let (t, m) = register(&source, &target, &store, &hgm, &reg)?;
    write_transform(&out.join("transform.txt"), &t)?;
    if emit {
        fs::write(out.join("matches.csv"), m.to_csv(threshold))?;
    }
    println!("rotation angle: {:.4} deg", t.angle().to_degrees());
    println!("wrote {}", out.join("transform.txt").display());
    Ok(())
}

fn write_report(out: &Path, prefix: &str, report: &MetricReport) -> Result<()> {
    fs::write(out.join(format!("{prefix}metrics.csv")), report.to_csv())?;
    fs::write(out.join(format!("{prefix}summary.json")), report.summary_json())?;
    let s = report.summary();
    println!(
        "{}: {} pairs, mean L_R {:.4} deg, mean L_t {:.5}, mean L_RMSE {:.6}",
        if prefix.is_empty() { "model" } else { prefix.trim_end_matches('_') },
        s.pairs,
        s.mean_lr_deg,
        s.mean_lt,
        s.mean_lrmse
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve(
        &[
            ("out", "."),
            ("seed", "0"),
            ("dataset", ""),
            ("predictions", ""),
            ("baseline", ""),
            ("icp_iters", "50"),
            ("icp_tol", "1e-8"),
            ("threads", "1"),
        ],
        &a.common,
        |c| {
            c.flag("dataset", a.dataset.as_ref().map(|p| p.display()))?;
            c.flag("predictions", a.predictions.as_ref().map(|p| p.display()))?;
            c.flag("baseline", a.baseline)?;
            c.flag("threads", a.threads)
        },
    )?;
    let baseline = cfg.raw("baseline").to_string();
    if !(baseline.is_empty() || baseline == "icp") {
        return Err(Error::InvalidArgument(format!("unknown baseline {baseline:?} (valid: icp)")));
    }
    let preds_dir = optional_path(&cfg, "predictions");
    if preds_dir.is_none() && baseline.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate: pass --predictions and/or --baseline icp".into()));
    }
    let dataset_dir = required_path(&cfg, "dataset")?;
    existing_dir(&dataset_dir, "dataset")?;
    let pairs = read_dataset(&dataset_dir)?;
    let predictions: Option<Vec<RigidTransform>> = match &preds_dir {
        Some(d) => {
            existing_dir(d, "predictions")?;
            Some(
                pairs
                    .iter()
                    .map(|p| read_transform(&d.join(format!("{}.txt", p.id))))
                    .collect::<Result<_>>()?,
            )
        }
        None => None,
    };
    let out = required_path(&cfg, "out")?;
    cfg.write(&out)?;
    if let Some(preds) = predictions {
        let mut report = MetricReport::default();
        for (p, t) in pairs.iter().zip(&preds) {
            report.push(&p.id, &p.source, &p.gt, t);
        }
        write_report(&out, "", &report)?;
    }
    if baseline == "icp" {
        let iters: usize = cfg.get("icp_iters")?;
        let tol: f64 = cfg.get("icp_tol")?;
        let icp = par_map(&pairs, cfg.get("threads")?, |p| icp_baseline(&p.source, &p.target, iters, tol))?;
        let mut report = MetricReport::default();
        for (p, t) in pairs.iter().zip(&icp) {
            report.push(&p.id, &p.source, &p.gt, t);
        }
        write_report(&out, "icp_", &report)?;
    }
    Ok(())
}
