//! The transformation-robust point transformer (TPT) layer and the
//! hierarchical descriptor network (HGM) built from it.
//!
//! A cloud is first turned into an [`HgmGeometry`]: the neighbour graphs,
//! FPS subsets, per-edge positional inputs and upsampling maps of every
//! level. Those depend only on the points, so they are computed once per
//! cloud and the differentiable part runs on a [`Tape`].

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::geom::{
    estimate_normals, farthest_point_sample_points, knn_graph_points, NeighborGraph, PointCloud,
    Vec3,
};
use crate::rifeat::{darboux_angles, fpfh_features, ppf_pair, rri_from_graph, FeatureMatrix, FeatureLayout};

/// Which rotation-invariant feature drives the unary term and the RI part
/// of the positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiKind {
    Rri,
    Ppf,
    Fpfh,
}

impl RiKind {
    pub fn needs_normals(self) -> bool {
        !matches!(self, RiKind::Rri)
    }
}

impl FromStr for RiKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rri" => Ok(RiKind::Rri),
            "ppf" => Ok(RiKind::Ppf),
            "fpfh" => Ok(RiKind::Fpfh),
            _ => Err(invalid(format!("unknown ri_kind {s:?} (expected rri, ppf or fpfh)"))),
        }
    }
}

impl fmt::Display for RiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiKind::Rri => "rri",
            RiKind::Ppf => "ppf",
            RiKind::Fpfh => "fpfh",
        })
    }
}

/// Inputs of the positional encoder η for an edge `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosLayout {
    pub ri: bool,
    pub xyz: bool,
    pub dxyz: bool,
}

impl PosLayout {
    pub const RI_ONLY: PosLayout = PosLayout {
        ri: true,
        xyz: false,
        dxyz: false,
    };

    pub fn channels(&self) -> usize {
        4 * self.ri as usize + 3 * self.xyz as usize + 3 * self.dxyz as usize
    }
}

impl FromStr for PosLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut out = PosLayout {
            ri: false,
            xyz: false,
            dxyz: false,
        };
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "ri" => out.ri = true,
                "xyz" => out.xyz = true,
                "dxyz" => out.dxyz = true,
                _ => return Err(invalid(format!("unknown positional input {part:?}"))),
            }
        }
        if out.channels() == 0 {
            return Err(invalid("positional layout is empty"));
        }
        Ok(out)
    }
}

impl fmt::Display for PosLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.ri, "ri"), (self.xyz, "xyz"), (self.dxyz, "dxyz")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&parts.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TptConfig {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Hidden width of γ is `c_out / r1`.
    pub r1: usize,
    /// Each attention weight is shared by `r2` consecutive channels.
    pub r2: usize,
    pub pos: PosLayout,
    /// Adds the input features to the aggregate (requires `c_in == c_out`).
    pub residual: bool,
}

impl TptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.c_in == 0 || self.c_out == 0 {
            return Err(invalid("TPT sizes must be positive"));
        }
        if self.r1 == 0 || self.r2 == 0 || self.c_out % self.r1 != 0 || self.c_out % self.r2 != 0 {
            return Err(invalid(format!(
                "c_out = {} must be divisible by r1 = {} and r2 = {}",
                self.c_out, self.r1, self.r2
            )));
        }
        if self.residual && self.c_in != self.c_out {
            return Err(invalid("residual TPT needs c_in == c_out"));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.c_out / self.r2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HgmConfig {
    /// Nominal point counts `N1 > N2 > N3`; level 1 always uses every input
    /// point, coarser levels use `min(N_l, size of the previous level)`.
    pub levels: [usize; 3],
    pub k: usize,
    pub ri_kind: RiKind,
    pub cu: usize,
    pub cs: [usize; 3],
    pub r1: usize,
    pub r2: usize,
    pub pos: PosLayout,
    /// Neighbourhood size for normal estimation when a cloud has none.
    pub normal_k: usize,
    /// Layer-normalise each descriptor block (followed by a learned gain).
    pub desc_norm: bool,
}

impl Default for HgmConfig {
    fn default() -> Self {
        Self {
            levels: [768, 384, 192],
            k: 16,
            ri_kind: RiKind::Ppf,
            cu: 64,
            cs: [64, 64, 64],
            r1: 4,
            r2: 8,
            pos: PosLayout::RI_ONLY,
            normal_k: 16,
            desc_norm: true,
        }
    }
}

impl HgmConfig {
    pub fn validate(&self) -> Result<()> {
        let [n1, n2, n3] = self.levels;
        if !(n1 > n2 && n2 > n3 && n3 >= 8) {
            return Err(invalid(format!(
                "levels must satisfy N1 > N2 > N3 >= 8, got {:?}",
                self.levels
            )));
        }
        if self.k < 2 {
            return Err(invalid("k must be at least 2"));
        }
        if self.cu == 0 || self.cs.contains(&0) {
            return Err(invalid("channel sizes must be positive"));
        }
        if self.normal_k < 3 {
            return Err(invalid("normal_k must be at least 3"));
        }
        if matches!(self.ri_kind, RiKind::Fpfh) && self.k < 5 {
            return Err(invalid("FPFH needs k >= 5"));
        }
        for l in 0..3 {
            self.tpt(l).validate()?;
        }
        Ok(())
    }

    pub fn tpt(&self, level: usize) -> TptConfig {
        let c_in = if level == 0 { self.cu } else { self.cs[level - 1] };
        TptConfig {
            k: self.k,
            c_in,
            c_out: self.cs[level],
            r1: self.r1,
            r2: self.r2,
            pos: self.pos,
            residual: c_in == self.cs[level],
        }
    }

    /// Channel count of the concatenated descriptor.
    pub fn descriptor_channels(&self) -> usize {
        self.cu + self.cs.iter().sum::<usize>()
    }

    /// `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = HgmConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Format(format!("{key}: {v:?} is not a count")))
        }
        match key {
            "levels" => {
                let vals: Vec<usize> = value
                    .split(',')
                    .map(|v| num(key, v.trim()))
                    .collect::<Result<_>>()?;
                self.levels = vals
                    .try_into()
                    .map_err(|_| Error::Format("levels needs three comma-separated counts".into()))?;
            }
            "k" => self.k = num(key, value)?,
            "ri_kind" => self.ri_kind = value.parse()?,
            "cu" => self.cu = num(key, value)?,
            "cs1" => self.cs[0] = num(key, value)?,
            "cs2" => self.cs[1] = num(key, value)?,
            "cs3" => self.cs[2] = num(key, value)?,
            "r1" => self.r1 = num(key, value)?,
            "r2" => self.r2 = num(key, value)?,
            "pos" => self.pos = value.parse()?,
            "normal_k" => self.normal_k = num(key, value)?,
            "desc_norm" => {
                self.desc_norm = value
                    .parse()
                    .map_err(|_| Error::Format(format!("desc_norm: {value:?} is not a bool")))?
            }
            _ => return Err(Error::Format(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "levels={},{},{}\nk={}\nri_kind={}\ncu={}\ncs1={}\ncs2={}\ncs3={}\nr1={}\nr2={}\npos={}\nnormal_k={}\ndesc_norm={}\n",
            self.levels[0],
            self.levels[1],
            self.levels[2],
            self.k,
            self.ri_kind,
            self.cu,
            self.cs[0],
            self.cs[1],
            self.cs[2],
            self.r1,
            self.r2,
            self.pos,
            self.normal_k,
            self.desc_norm
        )
    }

    fn unary_in(&self) -> usize {
        match self.ri_kind {
            RiKind::Fpfh => crate::rifeat::FPFH_CHANNELS,
            RiKind::Rri | RiKind::Ppf => 4,
        }
    }
}

/// Registers the weights of one TPT layer under `prefix`.
pub fn init_tpt_params(store: &mut ParamStore, prefix: &str, cfg: &TptConfig) -> Result<()> {
    cfg.validate()?;
    let (ci, co) = (cfg.c_in, cfg.c_out);
    let p = cfg.pos.channels();
    let hid = co / cfg.r1;
    store.init_linear(&format!("{prefix}.beta.w"), ci, co)?;
    store.init_const(&format!("{prefix}.beta.b"), &[1, co], 0.0)?;
    store.init_linear(&format!("{prefix}.zeta.w"), ci, co)?;
    store.init_linear(&format!("{prefix}.xi.w"), ci, co)?;
    store.init_linear(&format!("{prefix}.eta1.w"), p, co)?;
    store.init_const(&format!("{prefix}.eta1.b"), &[1, co], 0.0)?;
    store.init_linear(&format!("{prefix}.eta2.w"), co, co)?;
    store.init_const(&format!("{prefix}.eta2.b"), &[1, co], 0.0)?;
    store.init_linear(&format!("{prefix}.gamma1.w"), co, hid)?;
    store.init_const(&format!("{prefix}.gamma1.b"), &[1, hid], 0.0)?;
    store.init_linear(&format!("{prefix}.gamma2.w"), hid, cfg.groups())?;
    store.init_const(&format!("{prefix}.gamma2.b"), &[1, cfg.groups()], 0.0)?;
    Ok(())
}

/// Zeroes the value path (β and η output) so that a residual TPT layer
/// returns its input unchanged.
pub fn zero_tpt_values(store: &mut ParamStore, prefix: &str) -> Result<()> {
    for name in ["beta.w", "beta.b", "eta2.w", "eta2.b"] {
        let t = store
            .get_mut(&format!("{prefix}.{name}"))
            .ok_or_else(|| invalid(format!("missing parameter {prefix}.{name}")))?;
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// Fresh parameters for an HGM network.
pub fn init_params(cfg: &HgmConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed);
    let ui = cfg.unary_in();
    store.init_linear("unary1.w", ui, cfg.cu)?;
    store.init_const("unary1.b", &[1, cfg.cu], 0.0)?;
    store.init_linear("unary2.w", cfg.cu, cfg.cu)?;
    store.init_const("unary2.b", &[1, cfg.cu], 0.0)?;
    for l in 0..3 {
        init_tpt_params(&mut store, &format!("tpt{}", l + 1), &cfg.tpt(l))?;
    }
    if cfg.desc_norm {
        store.init_const("gain.unary", &[1, 1], 1.0)?;
        for l in 0..3 {
            store.init_const(&format!("gain.s{}", l + 1), &[1, 1], 1.0)?;
        }
    }
    Ok(store)
}

/// Per-edge positional inputs `ρ_ij` for the centres of `graph`; rows are
/// edges in centre-major order. Indices of `graph` address `points`.
pub fn edge_positional(
    points: &[Vec3],
    normals: Option<&[Vec3]>,
    graph: &NeighborGraph,
    ri_kind: RiKind,
    layout: PosLayout,
) -> Result<Tensor> {
    let need_normals = layout.ri && ri_kind.needs_normals();
    if need_normals && normals.is_none() {
        return Err(invalid(format!("{ri_kind} positional features need normals")));
    }
    let c = layout.channels();
    let mut data = Vec::with_capacity(graph.neighbor_indices.len() * c);
    for (i, nbrs) in graph.rows() {
        let p = points[i];
        for &j in nbrs {
            let q = points[j];
            if layout.ri {
                data.extend_from_slice(&edge_ri(&p, &q, normals.map(|n| (n[i], n[j])), ri_kind));
            }
            if layout.xyz {
                data.extend_from_slice(&[q.x, q.y, q.z]);
            }
            if layout.dxyz {
                let d = q - p;
                data.extend_from_slice(&[d.x, d.y, d.z]);
            }
        }
    }
    Tensor::matrix(graph.neighbor_indices.len(), c, data)
}

fn edge_ri(p: &Vec3, q: &Vec3, normals: Option<(Vec3, Vec3)>, kind: RiKind) -> [f64; 4] {
    let dist = (q - p).norm();
    match (kind, normals) {
        (RiKind::Ppf, Some((n1, n2))) => ppf_pair(p, &n1, q, &n2).to_array(),
        (RiKind::Fpfh, Some((n1, n2))) => {
            let (t, a, f) = darboux_angles(p, &n1, q, &n2).unwrap_or((0.0, 0.0, 0.0));
            [dist, t, a, f]
        }
        _ => [p.norm(), q.norm(), crate::geom::angle_between(p, q), dist],
    }
}

/// For every point, the row of its nearest sampled point in `coarse`
/// (ties to the lower point index).
pub fn upsample_map(points: &[Vec3], coarse: &[usize]) -> Result<Vec<usize>> {
    if coarse.is_empty() {
        return Err(invalid("upsampling from an empty coarse set"));
    }
    if let Some(&bad) = coarse.iter().find(|&&i| i >= points.len()) {
        return Err(invalid(format!("coarse index {bad} out of range")));
    }
    Ok(points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, usize::MAX, 0usize);
            for (row, &ci) in coarse.iter().enumerate() {
                let d = (points[ci] - p).norm_squared();
                if d < best.0 || (d == best.0 && ci < best.1) {
                    best = (d, ci, row);
                }
            }
            best.2
        })
        .collect())
}

/// Copies each coarse row to the full-resolution points nearest to it.
pub fn upsample_features(coarse: &Tensor, coarse_indices: &[usize], full_cloud: &PointCloud) -> Result<Tensor> {
    if coarse.rows() != coarse_indices.len() {
        return Err(invalid(format!(
            "{} coarse rows for {} coarse indices",
            coarse.rows(),
            coarse_indices.len()
        )));
    }
    let map = upsample_map(full_cloud.points(), coarse_indices)?;
    let c = coarse.cols();
    let data = map.iter().flat_map(|&r| coarse.row(r).iter().copied()).collect();
    Tensor::matrix(map.len(), c, data)
}

/// Graph-dependent inputs of one TPT layer.
#[derive(Debug, Clone)]
pub struct LevelGeometry {
    /// Point indices (into the full cloud) of this level's nodes.
    pub indices: Vec<usize>,
    /// Rows of the previous level that this level's nodes come from.
    pub parent_rows: Rc<Vec<usize>>,
    /// Row `i` repeated `k` times, for gathering centre features per edge.
    pub centers: Rc<Vec<usize>>,
    /// Flattened local neighbour rows, centre-major.
    pub neighbors: Rc<Vec<usize>>,
    pub pos: Tensor,
    /// For each full-resolution point, the row of this level it copies.
    pub upsample: Rc<Vec<usize>>,
}

/// Everything about a cloud that the network needs besides parameters.
#[derive(Debug, Clone)]
pub struct HgmGeometry {
    pub n: usize,
    /// Centred copy of the input with normals.
    pub cloud: PointCloud,
    pub unary_input: Tensor,
    /// Neighbours per point in `unary_input` rows (1 for per-point input).
    pub unary_group: usize,
    pub levels: Vec<LevelGeometry>,
}

impl HgmGeometry {
    pub fn prepare(cloud: &PointCloud, cfg: &HgmConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cloud.len();
        if n < cfg.levels[2] || n <= cfg.k {
            return Err(invalid(format!(
                "cloud of {n} points is too small for levels {:?} with k = {}",
                cfg.levels, cfg.k
            )));
        }
        let (mut centred, _) = cloud.centered();
        if cfg.ri_kind.needs_normals() && !centred.has_normals() {
            centred = estimate_normals(&centred, cfg.normal_k);
        }
        let points = centred.points().to_vec();
        let normals = centred.normals().map(|n| n.to_vec());

        let all: Vec<usize> = (0..n).collect();
        let g1 = knn_graph_points(&points, &all, cfg.k)?;
        let (unary_input, unary_group) = match cfg.ri_kind {
            RiKind::Ppf => {
                let t = edge_positional(&points, normals.as_deref(), &g1, RiKind::Ppf, PosLayout::RI_ONLY)?;
                (t, cfg.k)
            }
            RiKind::Rri => {
                let f = rri_from_graph(&points, &g1)?;
                let t = Tensor::matrix(n * cfg.k, 4, f.values().to_vec())?;
                (t, cfg.k)
            }
            RiKind::Fpfh => {
                let f = fpfh_features(&centred, cfg.k)?;
                (Tensor::matrix(n, f.cols(), f.values().to_vec())?, 1)
            }
        };

        let mut levels = Vec::with_capacity(3);
        let mut prev: Vec<usize> = all.clone();
        for l in 0..3 {
            let (indices, parent_rows) = if l == 0 {
                (all.clone(), (0..n).collect::<Vec<_>>())
            } else {
                let m = cfg.levels[l].min(prev.len());
                let sub_pts: Vec<Vec3> = prev.iter().map(|&i| points[i]).collect();
                let rows = farthest_point_sample_points(&sub_pts, m, 0)?;
                (rows.iter().map(|&r| prev[r]).collect(), rows)
            };
            let local_pts: Vec<Vec3> = indices.iter().map(|&i| points[i]).collect();
            let local_normals: Option<Vec<Vec3>> =
                normals.as_ref().map(|ns| indices.iter().map(|&i| ns[i]).collect());
            let m = indices.len();
            if m <= cfg.k {
                return Err(invalid(format!(
                    "level {} has {m} points, not enough for k = {}",
                    l + 1,
                    cfg.k
                )));
            }
            let local_all: Vec<usize> = (0..m).collect();
            let graph = if l == 0 {
                g1.clone()
            } else {
                knn_graph_points(&local_pts, &local_all, cfg.k)?
            };
            let pos = edge_positional(&local_pts, local_normals.as_deref(), &graph, cfg.ri_kind, cfg.pos)?;
            let centers = (0..m).flat_map(|i| std::iter::repeat_n(i, cfg.k)).collect();
            let upsample = if l == 0 {
                all.clone()
            } else {
                upsample_map(&points, &indices)?
            };
            levels.push(LevelGeometry {
                indices: indices.clone(),
                parent_rows: Rc::new(parent_rows),
                centers: Rc::new(centers),
                neighbors: Rc::new(graph.neighbor_indices.clone()),
                pos,
                upsample: Rc::new(upsample),
            });
            prev = indices;
        }
        Ok(Self {
            n,
            cloud: centred,
            unary_input,
            unary_group,
            levels,
        })
    }
}

fn linear(tape: &mut Tape, store: &ParamStore, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let y = tape.matmul(x, w)?;
    if bias {
        let b = tape.param(store, &format!("{name}.b"))?;
        tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

/// One TPT layer on a tape. `x` holds `N×c_in` node features, `pos` the
/// `E×P` positional inputs with `E = N·k` edges in centre-major order.
pub fn tpt_layer(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &TptConfig,
    x: Var,
    centers: &Rc<Vec<usize>>,
    neighbors: &Rc<Vec<usize>>,
    pos: Var,
) -> Result<Var> {
    cfg.validate()?;
    let n = tape.value(x).rows();
    if tape.value(x).cols() != cfg.c_in || neighbors.len() != n * cfg.k || centers.len() != n * cfg.k {
        return Err(Error::Shape {
            op: "tpt_forward",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![neighbors.len(), cfg.k, cfg.c_in],
        });
    }
    if tape.value(pos).rows() != neighbors.len() || tape.value(pos).cols() != cfg.pos.channels() {
        return Err(Error::Shape {
            op: "tpt_forward",
            lhs: tape.value(pos).shape().to_vec(),
            rhs: vec![neighbors.len(), cfg.pos.channels()],
        });
    }
    let beta = linear(tape, store, x, &format!("{prefix}.beta"), true)?;
    let zeta = linear(tape, store, x, &format!("{prefix}.zeta"), false)?;
    let xi = linear(tape, store, x, &format!("{prefix}.xi"), false)?;
    let beta_j = tape.gather_rows(beta, neighbors.clone())?;
    let zeta_i = tape.gather_rows(zeta, centers.clone())?;
    let xi_j = tape.gather_rows(xi, neighbors.clone())?;

    let h = linear(tape, store, pos, &format!("{prefix}.eta1"), true)?;
    let h = tape.relu(h);
    let eta = linear(tape, store, h, &format!("{prefix}.eta2"), true)?;

    let rel = tape.sub(zeta_i, xi_j)?;
    let rel = tape.add(rel, eta)?;
    let a = linear(tape, store, rel, &format!("{prefix}.gamma1"), true)?;
    let a = tape.relu(a);
    let a = linear(tape, store, a, &format!("{prefix}.gamma2"), true)?;
    let w = tape.group_softmax(a, cfg.k)?;
    let w = if cfg.r2 > 1 { tape.repeat_cols(w, cfg.r2)? } else { w };

    let v = tape.add(beta_j, eta)?;
    let vw = tape.mul(v, w)?;
    let out = tape.group_sum(vw, cfg.k)?;
    if cfg.residual {
        tape.add(out, x)
    } else {
        Ok(out)
    }
}

/// Stand-alone TPT evaluation: builds positional inputs from `cloud` and
/// `graph` (whose centres must be `0..N` in order) and runs the layer.
pub fn tpt_forward(
    features: &Tensor,
    cloud: &PointCloud,
    graph: &NeighborGraph,
    cfg: &TptConfig,
    ri_kind: RiKind,
    store: &ParamStore,
    prefix: &str,
) -> Result<Tensor> {
    if graph.k != cfg.k || graph.center_indices.iter().enumerate().any(|(r, &c)| r != c) {
        return Err(invalid("TPT graph must list every point as a centre, in order, with cfg.k neighbours"));
    }
    let pos = edge_positional(cloud.points(), cloud.normals(), graph, ri_kind, cfg.pos)?;
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let p = tape.constant(pos);
    let centers = Rc::new(graph.center_indices.iter().flat_map(|&c| std::iter::repeat_n(c, cfg.k)).collect());
    let neighbors = Rc::new(graph.neighbor_indices.clone());
    let y = tpt_layer(&mut tape, store, prefix, cfg, x, &centers, &neighbors, p)?;
    Ok(tape.value(y).clone())
}

/// Descriptor blocks on a tape: unary `N×cu` and three smoothness blocks,
/// each `N×cs_l` after upsampling.
#[derive(Debug, Clone)]
pub struct DescriptorVars {
    pub unary: Var,
    pub smooth: Vec<Var>,
}

impl DescriptorVars {
    pub fn blocks(&self) -> Vec<Var> {
        std::iter::once(self.unary).chain(self.smooth.iter().copied()).collect()
    }
}

/// Evaluated descriptor Θ of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub unary: Tensor,
    pub smooth: Vec<Tensor>,
}

impl Descriptor {
    pub fn from_tape(tape: &Tape, vars: &DescriptorVars) -> Self {
        Self {
            unary: tape.value(vars.unary).clone(),
            smooth: vars.smooth.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.unary.rows()
    }

    pub fn blocks(&self) -> Vec<&Tensor> {
        std::iter::once(&self.unary).chain(&self.smooth).collect()
    }

    pub fn block_channels(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.cols()).collect()
    }

    pub fn concat(&self) -> Result<FeatureMatrix> {
        let n = self.rows();
        let c: usize = self.block_channels().iter().sum();
        let mut values = Vec::with_capacity(n * c);
        for r in 0..n {
            for b in self.blocks() {
                values.extend_from_slice(b.row(r));
            }
        }
        FeatureMatrix::new(values, n, c, FeatureLayout::Concat)
    }
}

/// Runs the HGM network for one cloud on `tape`.
pub fn hgm_forward_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &HgmConfig,
    geo: &HgmGeometry,
) -> Result<DescriptorVars> {
    let ui = tape.constant(geo.unary_input.clone());
    let h = linear(tape, store, ui, "unary1", true)?;
    let h = tape.relu(h);
    let h = linear(tape, store, h, "unary2", true)?;
    let unary = if geo.unary_group > 1 {
        tape.group_max(h, geo.unary_group)?
    } else {
        h
    };

    let mut feats = unary;
    let mut smooth = Vec::with_capacity(3);
    for (l, lg) in geo.levels.iter().enumerate() {
        let x = if l == 0 {
            feats
        } else {
            tape.gather_rows(feats, lg.parent_rows.clone())?
        };
        let pos = tape.constant(lg.pos.clone());
        let y = tpt_layer(
            tape,
            store,
            &format!("tpt{}", l + 1),
            &cfg.tpt(l),
            x,
            &lg.centers,
            &lg.neighbors,
            pos,
        )?;
        let up = if l == 0 {
            y
        } else {
            tape.gather_rows(y, lg.upsample.clone())?
        };
        smooth.push(up);
        feats = y;
    }

    if !cfg.desc_norm {
        return Ok(DescriptorVars { unary, smooth });
    }
    let mut normed = Vec::with_capacity(4);
    for (b, name) in std::iter::once(unary)
        .chain(smooth.iter().copied())
        .zip(["gain.unary", "gain.s1", "gain.s2", "gain.s3"])
    {
        let z = tape.layer_norm(b, 1e-6);
        let g = tape.param(store, name)?;
        normed.push(tape.mul_scalar(z, g)?);
    }
    Ok(DescriptorVars {
        unary: normed[0],
        smooth: normed[1..].to_vec(),
    })
}

/// Descriptor of one cloud.
pub fn hgm_forward(cloud: &PointCloud, cfg: &HgmConfig, params: &ParamStore) -> Result<Descriptor> {
    let geo = HgmGeometry::prepare(cloud, cfg)?;
    let mut tape = Tape::new();
    let vars = hgm_forward_tape(&mut tape, params, cfg, &geo)?;
    Ok(Descriptor::from_tape(&tape, &vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::knn_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn config_round_trip_and_rejects_unknown_keys() {
        let cfg = HgmConfig {
            ri_kind: RiKind::Rri,
            pos: "ri+dxyz".parse().unwrap(),
            cs: [32, 32, 16],
            ..HgmConfig::default()
        };
        let back = HgmConfig::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(HgmConfig::parse("depth=3\n").is_err());
        assert!(HgmConfig::parse("levels=10,20,5\n").is_err());
    }

    #[test]
    fn single_neighbour_attention_passes_values_through() {
        let cloud = estimate_normals(&random_cloud(6, 1), 3);
        let cfg = TptConfig {
            k: 1,
            c_in: 4,
            c_out: 8,
            r1: 2,
            r2: 4,
            pos: PosLayout::RI_ONLY,
            residual: false,
        };
        let mut store = ParamStore::new(3);
        init_tpt_params(&mut store, "t", &cfg).unwrap();
        let graph = knn_graph(&cloud, &(0..6).collect::<Vec<_>>(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = tpt_forward(&feats, &cloud, &graph, &cfg, RiKind::Ppf, &store, "t").unwrap();

        // β(x_j) + η(ρ_ij) evaluated by hand
        let pos = edge_positional(cloud.points(), cloud.normals(), &graph, RiKind::Ppf, cfg.pos).unwrap();
        let lin = |x: &[f64], w: &Tensor, b: Option<&Tensor>| -> Vec<f64> {
            (0..w.cols())
                .map(|o| {
                    x.iter().enumerate().map(|(i, v)| v * w.at(i, o)).sum::<f64>()
                        + b.map(|b| b.data()[o]).unwrap_or(0.0)
                })
                .collect()
        };
        let g = |n: &str| store.get(&format!("t.{n}")).unwrap();
        for i in 0..6 {
            let j = graph.neighbors(i)[0];
            let beta = lin(feats.row(j), g("beta.w"), Some(g("beta.b")));
            let h: Vec<f64> = lin(pos.row(i), g("eta1.w"), Some(g("eta1.b"))).iter().map(|v| v.max(0.0)).collect();
            let eta = lin(&h, g("eta2.w"), Some(g("eta2.b")));
            for c in 0..8 {
                assert!((out.at(i, c) - beta[c] - eta[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_initialised_hierarchy_copies_unary() {
        let cloud = random_cloud(40, 4);
        let cfg = HgmConfig {
            levels: [40, 39, 38],
            k: 4,
            ri_kind: RiKind::Rri,
            cu: 8,
            cs: [8, 8, 8],
            r1: 2,
            r2: 4,
            desc_norm: false,
            ..HgmConfig::default()
        };
        // every level keeps all points when N2 = N3 = N
        let mut cfg_full = cfg.clone();
        cfg_full.levels = [40, 40, 40];
        let mut store = init_params(&cfg, 5).unwrap();
        for l in 1..=3 {
            zero_tpt_values(&mut store, &format!("tpt{l}")).unwrap();
        }
        let geo = {
            let mut g = HgmGeometry::prepare(&cloud, &cfg).unwrap();
            let full = HgmGeometry::prepare(&cloud, &HgmConfig { levels: [40, 39, 38], ..cfg_full.clone() }).unwrap();
            // widen levels 2 and 3 to every point
            for l in 1..3 {
                let all: Vec<usize> = (0..40).collect();
                g.levels[l] = full.levels[0].clone();
                g.levels[l].parent_rows = Rc::new(all);
            }
            g
        };
        let mut tape = Tape::new();
        let d = hgm_forward_tape(&mut tape, &store, &cfg, &geo).unwrap();
        let d = Descriptor::from_tape(&tape, &d);
        for s in &d.smooth {
            assert_eq!(s, &d.unary);
        }
        assert_eq!(d.concat().unwrap().cols(), 32);
    }

    #[test]
    fn upsample_cases() {
        let cloud = random_cloud(30, 6);
        let t = Tensor::matrix(30, 2, (0..60).map(|v| v as f64).collect()).unwrap();
        let all: Vec<usize> = (0..30).collect();
        assert_eq!(upsample_features(&t, &all, &cloud).unwrap(), t);
        let one = Tensor::matrix(1, 2, vec![7.0, 8.0]).unwrap();
        let up = upsample_features(&one, &[3], &cloud).unwrap();
        assert!((0..30).all(|r| up.row(r) == [7.0, 8.0]));
        assert!(upsample_features(&Tensor::zeros(&[0, 2]), &[], &cloud).is_err());
    }
}
