//! Cross-representation attention.
//!
//! Master-representation queries (anchor boxes or center points) attend over
//! auxiliary keypoint keys. Per head `g`, the weight of key `j` for query `i`
//! is `softmax_j(S^A_ij + S^G_ijg)`: a scaled dot product of projected
//! features plus a geometry bias computed from the key-minus-query offset by
//! a sinusoidal embedding and a two-layer MLP. The weighted per-head value
//! projections are concatenated and added to the query feature.
//!
//! The geometry bias is computed either per pair ([`geometry_term_direct`])
//! or by bilinear lookup into a precomputed [`SharedLocationMap`]
//! ([`geometry_term_shared`]).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::geometry::PointKind;
use crate::numerics::{sinusoid_into, DenseArray, ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationConfig {
    /// Feature dim `C` of queries and keys.
    pub channels: usize,
    /// Head count `G`.
    pub heads: usize,
    /// Sinusoidal embedding dim `d0`.
    pub embed_dim: usize,
    /// Geometry MLP inner dim `d1`.
    pub hidden_dim: usize,
    /// Shared map resolution `M` (bins per axis).
    pub map_size: usize,
    /// Unit length as a fraction of the level stride (`U = ratio·S`).
    pub unit_ratio: f64,
}

impl RelationConfig {
    /// Full-scale settings: 8 heads, 512-d embedding and MLP, 400×400 map,
    /// `U = S/2`.
    pub fn full_scale(channels: usize) -> Self {
        Self { channels, heads: 8, embed_dim: 512, hidden_dim: 512, map_size: 400, unit_ratio: 0.5 }
    }

    pub fn toy() -> Self {
        Self { channels: 64, heads: 4, embed_dim: 64, hidden_dim: 64, map_size: 64, unit_ratio: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.heads, self.embed_dim, self.hidden_dim, self.map_size];
        if dims.contains(&0) {
            return config_err(format!("relation dims must be positive: {self:?}"));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return config_err(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return config_err(format!("embed_dim {} must be divisible by 4", self.embed_dim));
        }
        if !self.map_size.is_multiple_of(2) {
            return config_err(format!("map_size {} must be even", self.map_size));
        }
        if !(self.unit_ratio > 0.0 && self.unit_ratio.is_finite()) {
            return config_err("unit_ratio must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn unit_length(&self, stride: usize) -> f64 {
        stride as f64 * self.unit_ratio
    }

    /// Half-range of offsets covered by the shared map, in pixels.
    pub fn coverage(&self, stride: usize) -> f64 {
        self.map_size as f64 / 2.0 * self.unit_length(stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryMode {
    Direct,
    Shared,
    Off,
}

/// Parameter name suffixes under a module prefix.
pub const PARAM_SUFFIXES: [&str; 7] = ["query", "key", "value", "geo.w1", "geo.b1", "geo.w2", "geo.b2"];

/// Tape handles for one attention module's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub geo: GeometryParams,
}

#[derive(Debug, Clone, Copy)]
pub struct GeometryParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn normal_array(rng: &mut impl Rng, shape: &[usize], std: f64) -> DenseArray {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    DenseArray::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("consistent shape")
}

impl AttentionParams {
    /// Adds freshly initialized parameters under `prefix` to `store`.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &RelationConfig, rng: &mut impl Rng) {
        let c = cfg.channels;
        let proj_std = 1.0 / (c as f64).sqrt();
        store.insert(format!("{prefix}.query"), normal_array(rng, &[c, c], proj_std));
        store.insert(format!("{prefix}.key"), normal_array(rng, &[c, c], proj_std));
        store.insert(format!("{prefix}.value"), normal_array(rng, &[c, c], proj_std));
        GeometryParams::init(store, prefix, cfg, rng);
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            query: store.bind(tape, &format!("{prefix}.query"))?,
            key: store.bind(tape, &format!("{prefix}.key"))?,
            value: store.bind(tape, &format!("{prefix}.value"))?,
            geo: GeometryParams::bind(tape, store, prefix)?,
        })
    }
}

impl GeometryParams {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &RelationConfig, rng: &mut impl Rng) {
        let (d0, d1, g) = (cfg.embed_dim, cfg.hidden_dim, cfg.heads);
        store.insert(format!("{prefix}.geo.w1"), normal_array(rng, &[d0, d1], (2.0 / d0 as f64).sqrt()));
        store.insert(format!("{prefix}.geo.b1"), DenseArray::zeros(&[d1]));
        store.insert(format!("{prefix}.geo.w2"), normal_array(rng, &[d1, g], (1.0 / d1 as f64).sqrt()));
        store.insert(format!("{prefix}.geo.b2"), DenseArray::zeros(&[g]));
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.bind(tape, &format!("{prefix}.geo.w1"))?,
            b1: store.bind(tape, &format!("{prefix}.geo.b1"))?,
            w2: store.bind(tape, &format!("{prefix}.geo.w2"))?,
            b2: store.bind(tape, &format!("{prefix}.geo.b2"))?,
        })
    }
}

/// Master-representation instances entering the attention as queries.
#[derive(Debug, Clone, Copy)]
pub struct QuerySet {
    /// `N×C` features.
    pub features: Var,
    /// `N×2` query points `(x, y)` in image pixels.
    pub points: Var,
    /// Stride of the level the queries live on.
    pub stride: usize,
}

/// Provenance and decoded position of one selected key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub kind: PointKind,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub x: f64,
    pub y: f64,
}

/// Auxiliary-representation keys. May be empty.
#[derive(Debug, Clone, Default)]
pub struct KeySet {
    /// `(features K'×C, locations K'×2)`; `None` when empty.
    pub tensors: Option<(Var, Var)>,
    pub records: Vec<KeyRecord>,
}

impl KeySet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A `G`-channel grid of geometry-bias values over quantized offsets.
/// Bin `(p, q)` holds the bias for offset `((q − M/2)·U, (p − M/2)·U)`.
#[derive(Debug, Clone, Copy)]
pub struct SharedLocationMap {
    /// `M×M×G`.
    pub grid: Var,
    pub unit: f64,
    pub size: usize,
}

/// Embedding of an offset given in map units (pixels / U).
pub fn sinusoidal_embed(dx: f64, dy: f64, dim: usize) -> Vec<f64> {
    assert!(dim > 0 && dim.is_multiple_of(4), "embedding dim must be a positive multiple of 4");
    let mut out = vec![0.0; dim];
    sinusoid_into(dx, dy, &mut out);
    out
}

fn check_points(tape: &Tape, v: Var, what: &str) -> Result<usize> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != 2 {
        return config_err(format!("{what} points must be N×2, got {s:?}"));
    }
    Ok(s[0])
}

/// Geometry MLP applied per pair. Returns `N×K×G`.
pub fn geometry_term_direct(
    tape: &mut Tape,
    query_points: Var,
    key_points: Var,
    geo: &GeometryParams,
    cfg: &RelationConfig,
    unit: f64,
) -> Result<Var> {
    let n = check_points(tape, query_points, "query")?;
    let k = check_points(tape, key_points, "key")?;
    let offsets = tape.pairwise_offsets(query_points, key_points)?;
    let emb = tape.sinusoidal_embed(offsets, cfg.embed_dim, 1.0 / unit)?;
    let hidden = tape.linear(emb, geo.w1, geo.b1, true)?;
    let out = tape.linear(hidden, geo.w2, geo.b2, false)?;
    tape.reshape(out, &[n, k, cfg.heads])
}

/// Evaluates the geometry MLP on the `M×M` lattice of offsets, with unit
/// length `U = unit_ratio·stride`.
pub fn build_shared_map(
    tape: &mut Tape,
    geo: &GeometryParams,
    cfg: &RelationConfig,
    stride: usize,
) -> Result<SharedLocationMap> {
    cfg.validate()?;
    let m = cfg.map_size;
    let unit = cfg.unit_length(stride);
    let half = (m / 2) as f64;
    let mut lattice = Vec::with_capacity(m * m * 2);
    for p in 0..m {
        for q in 0..m {
            lattice.push((q as f64 - half) * unit);
            lattice.push((p as f64 - half) * unit);
        }
    }
    let center = tape.constant(DenseArray::zeros(&[1, 2]));
    let bins = tape.constant(DenseArray::new(vec![m * m, 2], lattice)?);
    let offsets = tape.pairwise_offsets(center, bins)?;
    let emb = tape.sinusoidal_embed(offsets, cfg.embed_dim, 1.0 / unit)?;
    let hidden = tape.linear(emb, geo.w1, geo.b1, true)?;
    let out = tape.linear(hidden, geo.w2, geo.b2, false)?;
    let grid = tape.reshape(out, &[m, m, cfg.heads])?;
    Ok(SharedLocationMap { grid, unit, size: m })
}

/// Same map grid reinterpreted for another stride (the grid is expressed in
/// map units, so only the unit length changes).
pub fn map_for_stride(map: &SharedLocationMap, cfg: &RelationConfig, stride: usize) -> SharedLocationMap {
    SharedLocationMap { unit: cfg.unit_length(stride), ..*map }
}

/// Bilinear lookup of the shared map for every pair. Returns `N×K×G`.
pub fn geometry_term_shared(
    tape: &mut Tape,
    query_points: Var,
    key_points: Var,
    map: &SharedLocationMap,
) -> Result<Var> {
    check_points(tape, query_points, "query")?;
    check_points(tape, key_points, "key")?;
    tape.map_sample(map.grid, query_points, key_points, 1.0 / map.unit, (map.size / 2) as f64)
}

/// How the geometry bias is obtained for one attention call.
#[derive(Debug, Clone, Copy)]
pub enum Geometry<'a> {
    Off,
    Direct,
    Shared(&'a SharedLocationMap),
}

impl Geometry<'_> {
    pub fn mode(&self) -> GeometryMode {
        match self {
            Geometry::Off => GeometryMode::Off,
            Geometry::Direct => GeometryMode::Direct,
            Geometry::Shared(_) => GeometryMode::Shared,
        }
    }
}

/// Attention contributions before the residual add.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `N×C` weighted value sum, heads concatenated.
    pub residual: Var,
    /// `G×N×K'` softmax weights.
    pub weights: Var,
}

/// Attention of `queries` over `keys` without the residual add.
/// Returns `None` when the key set is empty.
pub fn bvr_residual(
    tape: &mut Tape,
    queries: &QuerySet,
    keys: &KeySet,
    params: &AttentionParams,
    cfg: &RelationConfig,
    geometry: Geometry<'_>,
    appearance: bool,
) -> Result<Option<AttentionOutput>> {
    if !appearance && matches!(geometry, Geometry::Off) {
        return config_err("attention needs the appearance term, the geometry term, or both");
    }
    let qs = tape.shape(queries.features).to_vec();
    if qs.len() != 2 || qs[1] != cfg.channels {
        return config_err(format!("query features {qs:?} do not match C = {}", cfg.channels));
    }
    if check_points(tape, queries.points, "query")? != qs[0] {
        return config_err("query points and features disagree on N");
    }
    let Some((kf, kp)) = keys.tensors else {
        return Ok(None);
    };
    let ks = tape.shape(kf).to_vec();
    if ks.len() != 2 || ks[1] != cfg.channels {
        return config_err(format!("key features {ks:?} do not match C = {}", cfg.channels));
    }
    if check_points(tape, kp, "key")? != ks[0] {
        return config_err("key locations and features disagree on K'");
    }
    let (n, k, g, d) = (qs[0], ks[0], cfg.heads, cfg.head_dim());

    let split_heads = |tape: &mut Tape, x: Var, rows: usize| -> Result<Var> {
        let r = tape.reshape(x, &[rows, g, d])?;
        tape.permute(r, [1, 0, 2])
    };

    let v = tape.matmul(kf, params.value, false)?;
    let v = split_heads(tape, v, k)?;

    let appearance_logits = if appearance {
        let q = tape.matmul(queries.features, params.query, false)?;
        let q = split_heads(tape, q, n)?;
        let kk = tape.matmul(kf, params.key, false)?;
        let kk = split_heads(tape, kk, k)?;
        let dots = tape.batch_matmul(q, kk, true)?;
        Some(tape.scale(dots, 1.0 / (d as f64).sqrt())?)
    } else {
        None
    };
    let unit = cfg.unit_length(queries.stride);
    let geometry_logits = match geometry {
        Geometry::Off => None,
        Geometry::Direct => Some(geometry_term_direct(tape, queries.points, kp, &params.geo, cfg, unit)?),
        Geometry::Shared(map) => {
            if (map.unit - unit).abs() > 1e-12 * unit {
                return Err(Error::Config(format!(
                    "shared map built for unit {} but queries need unit {unit}",
                    map.unit
                )));
            }
            Some(geometry_term_shared(tape, queries.points, kp, map)?)
        }
    };
    let geometry_logits = match geometry_logits {
        Some(sg) => Some(tape.permute(sg, [2, 0, 1])?),
        None => None,
    };
    let logits = match (appearance_logits, geometry_logits) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("checked above"),
    };
    let weights = tape.softmax(logits, 2)?;
    let heads = tape.batch_matmul(weights, v, false)?;
    let merged = tape.permute(heads, [1, 0, 2])?;
    let residual = tape.reshape(merged, &[n, cfg.channels])?;
    Ok(Some(AttentionOutput { residual, weights }))
}

/// Enhanced query features `f^q + Σ_j w_ij·T_v(f^k_j)`. An empty key set
/// returns the query features unchanged.
pub fn bvr_attend(
    tape: &mut Tape,
    queries: &QuerySet,
    keys: &KeySet,
    params: &AttentionParams,
    cfg: &RelationConfig,
    geometry: Geometry<'_>,
    appearance: bool,
) -> Result<Var> {
    match bvr_residual(tape, queries, keys, params, cfg, geometry, appearance)? {
        Some(out) => tape.add(queries.features, out.residual),
        None => Ok(queries.features),
    }
}

/// Plain-loop evaluation of the attention, independent of the tape. Used as
/// a test oracle.
pub mod reference {
    use super::RelationConfig;
    use crate::numerics::ParamStore;

    fn embed(dx: f64, dy: f64, dim: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(dim);
        for coord in [dx, dy] {
            for i in 0..dim / 4 {
                let angle = coord / 1000f64.powf(4.0 * i as f64 / dim as f64);
                out.push(angle.sin());
                out.push(angle.cos());
            }
        }
        out
    }

    /// Geometry bias for one pair, one value per head.
    pub fn geometry(store: &ParamStore, prefix: &str, cfg: &RelationConfig, dx: f64, dy: f64) -> Vec<f64> {
        let get = |s: &str| store.get(&format!("{prefix}.geo.{s}")).expect("geometry parameter").data();
        let (w1, b1, w2, b2) = (get("w1"), get("b1"), get("w2"), get("b2"));
        let (d0, d1, g) = (cfg.embed_dim, cfg.hidden_dim, cfg.heads);
        let e = embed(dx, dy, d0);
        let mut h = vec![0.0; d1];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = b1[j];
            for i in 0..d0 {
                acc += e[i] * w1[i * d1 + j];
            }
            *hj = acc.max(0.0);
        }
        (0..g)
            .map(|k| {
                let mut acc = b2[k];
                for j in 0..d1 {
                    acc += h[j] * w2[j * g + k];
                }
                acc
            })
            .collect()
    }

    /// Enhanced features for row-major `queries` (N×C) at `qpts` against
    /// `keys` (K×C) at `kpts`, with the geometry term evaluated per pair.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        store: &ParamStore,
        prefix: &str,
        cfg: &RelationConfig,
        queries: &[f64],
        qpts: &[(f64, f64)],
        keys: &[f64],
        kpts: &[(f64, f64)],
        unit: f64,
        appearance: bool,
        geometry_on: bool,
    ) -> Vec<f64> {
        let c = cfg.channels;
        let (g, d) = (cfg.heads, cfg.head_dim());
        let proj = |name: &str, x: &[f64]| -> Vec<f64> {
            let w = store.get(&format!("{prefix}.{name}")).expect("projection").data();
            (0..c).map(|o| (0..c).map(|i| x[i] * w[i * c + o]).sum()).collect()
        };
        let mut out = queries.to_vec();
        if kpts.is_empty() {
            return out;
        }
        let kproj: Vec<Vec<f64>> = (0..kpts.len()).map(|j| proj("key", &keys[j * c..(j + 1) * c])).collect();
        let vproj: Vec<Vec<f64>> = (0..kpts.len()).map(|j| proj("value", &keys[j * c..(j + 1) * c])).collect();
        for (i, &(qx, qy)) in qpts.iter().enumerate() {
            let q = proj("query", &queries[i * c..(i + 1) * c]);
            let geo: Vec<Vec<f64>> = kpts
                .iter()
                .map(|&(kx, ky)| geometry(store, prefix, cfg, (kx - qx) / unit, (ky - qy) / unit))
                .collect();
            for h in 0..g {
                let mut logits = Vec::with_capacity(kpts.len());
                for j in 0..kpts.len() {
                    let mut l = 0.0;
                    if appearance {
                        let dot: f64 = (0..d).map(|t| q[h * d + t] * kproj[j][h * d + t]).sum();
                        l += dot / (d as f64).sqrt();
                    }
                    if geometry_on {
                        l += geo[j][h];
                    }
                    logits.push(l);
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    let w = (l - m).exp() / z;
                    for t in 0..d {
                        out[i * c + h * d + t] += w * vproj[j][h * d + t];
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_param_entries;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        cfg: RelationConfig,
        store: ParamStore,
        qf: Vec<f64>,
        qp: Vec<(f64, f64)>,
        kf: Vec<f64>,
        kp: Vec<(f64, f64)>,
    }

    fn random_instance(seed: u64, n: usize, k: usize, c: usize, g: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = RelationConfig { channels: c, heads: g, embed_dim: 8, hidden_dim: 6, map_size: 16, unit_ratio: 0.5 };
        let mut store = ParamStore::new();
        AttentionParams::init(&mut store, "m", &cfg, &mut rng);
        let mut pts = |m: usize| (0..m).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
        let (qp, kp) = (pts(n), pts(k));
        let qf = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kf = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Instance { cfg, store, qf, qp, kf, kp }
    }

    fn flat(p: &[(f64, f64)]) -> Vec<f64> {
        p.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    fn run(inst: &Instance, geometry: GeometryMode, appearance: bool) -> (DenseArray, Option<DenseArray>) {
        let (c, n, k) = (inst.cfg.channels, inst.qp.len(), inst.kp.len());
        let mut t = Tape::new();
        let p = AttentionParams::bind(&mut t, &inst.store, "m").unwrap();
        let qf = t.constant(DenseArray::new(vec![n, c], inst.qf.clone()).unwrap());
        let qp = t.constant(DenseArray::new(vec![n, 2], flat(&inst.qp)).unwrap());
        let keys = if k == 0 {
            KeySet::empty()
        } else {
            let kf = t.constant(DenseArray::new(vec![k, c], inst.kf.clone()).unwrap());
            let kp = t.constant(DenseArray::new(vec![k, 2], flat(&inst.kp)).unwrap());
            let rec = KeyRecord { kind: PointKind::Center, level: 0, row: 0, col: 0, score: 1.0, x: 0.0, y: 0.0 };
            KeySet { tensors: Some((kf, kp)), records: vec![rec; k] }
        };
        let q = QuerySet { features: qf, points: qp, stride: 4 };
        let map;
        let geo = match geometry {
            GeometryMode::Off => Geometry::Off,
            GeometryMode::Direct => Geometry::Direct,
            GeometryMode::Shared => {
                map = build_shared_map(&mut t, &p.geo, &inst.cfg, 4).unwrap();
                Geometry::Shared(&map)
            }
        };
        let res = bvr_residual(&mut t, &q, &keys, &p, &inst.cfg, geo, appearance).unwrap();
        let out = bvr_attend(&mut t, &q, &keys, &p, &inst.cfg, geo, appearance).unwrap();
        (t.value(out).clone(), res.map(|r| t.value(r.weights).clone()))
    }

    #[test]
    fn attention_matches_double_loop() {
        for seed in 0..6 {
            let inst = random_instance(seed, 5, 7, 16, 4);
            for (geo, app) in [(GeometryMode::Direct, true), (GeometryMode::Off, true), (GeometryMode::Direct, false)] {
                let (got, _) = run(&inst, geo, app);
                let want = reference::attend(
                    &inst.store, "m", &inst.cfg, &inst.qf, &inst.qp, &inst.kf, &inst.kp, 2.0, app,
                    geo != GeometryMode::Off,
                );
                let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff <= 1e-10, "seed {seed}: {diff}");
            }
        }
    }

    #[test]
    fn weights_are_normalized() {
        let inst = random_instance(9, 4, 6, 8, 2);
        let (_, w) = run(&inst, GeometryMode::Shared, true);
        let w = w.unwrap();
        for row in w.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_key_adds_projected_value() {
        let inst = random_instance(4, 3, 1, 8, 2);
        let (got, _) = run(&inst, GeometryMode::Direct, true);
        let w = inst.store.get("m.value").unwrap().data();
        for i in 0..3 {
            for o in 0..8 {
                let v: f64 = (0..8).map(|j| inst.kf[j] * w[j * 8 + o]).sum();
                assert!((got.data()[i * 8 + o] - inst.qf[i * 8 + o] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_keys_act_like_one() {
        let one = random_instance(5, 3, 1, 8, 4);
        let mut many = random_instance(5, 3, 1, 8, 4);
        many.kf = one.kf.repeat(4);
        many.kp = one.kp.repeat(4);
        let (a, _) = run(&one, GeometryMode::Direct, true);
        let (b, _) = run(&many, GeometryMode::Direct, true);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn key_permutation_invariance() {
        let inst = random_instance(6, 4, 5, 8, 2);
        let mut perm = random_instance(6, 4, 5, 8, 2);
        let order = [3, 0, 4, 1, 2];
        perm.kp = order.iter().map(|&j| inst.kp[j]).collect();
        perm.kf = order.iter().flat_map(|&j| inst.kf[j * 8..(j + 1) * 8].to_vec()).collect();
        for mode in [GeometryMode::Direct, GeometryMode::Shared] {
            let (a, _) = run(&inst, mode, true);
            let (b, _) = run(&perm, mode, true);
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut inst = random_instance(7, 4, 5, 8, 2);
        inst.store.get_mut("m.value").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let (out, _) = run(&inst, GeometryMode::Direct, true);
        assert_eq!(out.data(), &inst.qf[..]);
    }

    fn geometry_pair(inst: &Instance, q: &[f64], k: &[f64], shared: bool, stride: usize) -> DenseArray {
        let mut t = Tape::new();
        let p = AttentionParams::bind(&mut t, &inst.store, "m").unwrap();
        let qv = t.constant(DenseArray::new(vec![q.len() / 2, 2], q.to_vec()).unwrap());
        let kv = t.constant(DenseArray::new(vec![k.len() / 2, 2], k.to_vec()).unwrap());
        let out = if shared {
            let map = build_shared_map(&mut t, &p.geo, &inst.cfg, stride).unwrap();
            geometry_term_shared(&mut t, qv, kv, &map).unwrap()
        } else {
            geometry_term_direct(&mut t, qv, kv, &p.geo, &inst.cfg, inst.cfg.unit_length(stride)).unwrap()
        };
        t.value(out).clone()
    }

    #[test]
    fn translation_leaves_geometry_unchanged() {
        let inst = random_instance(8, 0, 0, 8, 2);
        let q = [3.0, 7.0, 20.0, 1.0];
        let k = [10.0, 12.0, 0.0, 30.0, 5.0, 5.0];
        let shift = |v: &[f64]| v.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { 17.0 } else { -9.0 }).collect::<Vec<_>>();
        for shared in [false, true] {
            let a = geometry_pair(&inst, &q, &k, shared, 4);
            let b = geometry_pair(&inst, &shift(&q), &shift(&k), shared, 4);
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn shared_map_matches_direct_on_every_bin() {
        let mut inst = random_instance(10, 0, 0, 8, 2);
        inst.cfg.map_size = 8;
        inst.cfg.unit_ratio = 1.0;
        let mut t = Tape::new();
        let p = AttentionParams::bind(&mut t, &inst.store, "m").unwrap();
        let map = build_shared_map(&mut t, &p.geo, &inst.cfg, 1).unwrap();
        let grid = t.value(map.grid).clone();
        assert_eq!(grid.shape(), &[8, 8, 2]);
        for pr in 0..8 {
            for q in 0..8 {
                let want = reference::geometry(&inst.store, "m", &inst.cfg, q as f64 - 4.0, pr as f64 - 4.0);
                for h in 0..2 {
                    assert!((grid.at(&[pr, q, h]) - want[h]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shared_sampling_agrees_on_lattice_and_clamps() {
        let mut inst = random_instance(11, 0, 0, 8, 2);
        inst.cfg.unit_ratio = 1.0;
        let q = [5.0, 5.0];
        let k = [5.0, 5.0, 8.0, 2.0, -2.0, 11.0, 12.0, 0.0];
        let direct = geometry_pair(&inst, &q, &k, false, 1);
        let shared = geometry_pair(&inst, &q, &k, true, 1);
        assert!(direct.max_abs_diff(&shared) <= 1e-9);
        // beyond coverage (+8 bins) the border row/column is used
        let far = geometry_pair(&inst, &q, &[500.0, 5.0], true, 1);
        let edge = reference::geometry(&inst.store, "m", &inst.cfg, 7.0, 0.0);
        assert!((far.data()[0] - edge[0]).abs() < 1e-12 && (far.data()[1] - edge[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_gradients_pass_finite_differences() {
        let inst = random_instance(12, 3, 4, 8, 2);
        let weights: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        for mode in [GeometryMode::Direct, GeometryMode::Shared] {
            let build = |t: &mut Tape, store: &ParamStore| -> Result<Var> {
                let p = AttentionParams::bind(t, store, "m")?;
                let qf = t.constant(DenseArray::new(vec![3, 8], inst.qf.clone())?);
                let qp = t.constant(DenseArray::new(vec![3, 2], flat(&inst.qp))?);
                let kf = t.constant(DenseArray::new(vec![4, 8], inst.kf.clone())?);
                let kp = t.constant(DenseArray::new(vec![4, 2], flat(&inst.kp))?);
                let keys = KeySet { tensors: Some((kf, kp)), records: vec![] };
                let q = QuerySet { features: qf, points: qp, stride: 4 };
                let map;
                let geo = if mode == GeometryMode::Shared {
                    map = build_shared_map(t, &p.geo, &inst.cfg, 4)?;
                    Geometry::Shared(&map)
                } else {
                    Geometry::Direct
                };
                let out = bvr_attend(t, &q, &keys, &p, &inst.cfg, geo, true)?;
                let r = t.constant(DenseArray::new(vec![3, 8], weights.clone())?);
                let prod = t.mul(out, r)?;
                t.sum(prod)
            };
            let entries: Vec<(String, usize)> = PARAM_SUFFIXES
                .iter()
                .flat_map(|s| {
                    let name = format!("m.{s}");
                    let len = inst.store.get(&name).unwrap().len();
                    [0, 3, 5].map(move |i| (name.clone(), i % len))
                })
                .collect();
            for e in check_param_entries(build, &inst.store, &entries, 1e-4).unwrap() {
                if e.name.ends_with("geo.b2") {
                    // a per-head constant shifts every logit equally
                    assert!(e.analytic.abs() < 1e-12 && e.numeric.abs() < 1e-9);
                    continue;
                }
                assert!(e.rel_error <= 1e-5, "{mode:?} {} [{}]: {} vs {}", e.name, e.index, e.analytic, e.numeric);
            }
        }
    }

    fn tiny_cfg() -> RelationConfig {
        RelationConfig { channels: 8, heads: 2, embed_dim: 8, hidden_dim: 6, map_size: 16, unit_ratio: 0.5 }
    }

    #[test]
    fn embedding_of_zero_offset() {
        let e = sinusoidal_embed(0.0, 0.0, 16);
        for (i, v) in e.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn embedding_halves_are_separable() {
        let e = sinusoidal_embed(7.25, 0.0, 12);
        assert_eq!(&e[6..], &sinusoidal_embed(0.0, 0.0, 12)[6..]);
    }

    #[test]
    fn embedding_hand_evaluated() {
        // sin/cos of 3 and 3/sqrt(1000), then of -1 and -1/sqrt(1000)
        let want = [
            0.1411200080598672,
            -0.9899924966004454,
            0.09472609133274612,
            0.9955033739876628,
            -0.8414709848078965,
            0.5403023058681398,
            -0.03161750640243371,
            0.9995000416652778,
        ];
        let got = sinusoidal_embed(3.0, -1.0, 8);
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        assert!(RelationConfig { heads: 3, ..tiny_cfg() }.validate().is_err());
        assert!(RelationConfig { embed_dim: 6, ..tiny_cfg() }.validate().is_err());
        assert!(RelationConfig { map_size: 15, ..tiny_cfg() }.validate().is_err());
        let full = RelationConfig::full_scale(256);
        assert_eq!(full.coverage(8), 800.0);
    }

    #[test]
    fn geometry_term_single_pair_by_hand() {
        let cfg = RelationConfig { channels: 4, heads: 1, embed_dim: 4, hidden_dim: 2, map_size: 8, unit_ratio: 0.5 };
        let mut store = ParamStore::new();
        let a = |s: &[usize], d: &[f64]| DenseArray::new(s.to_vec(), d.to_vec()).unwrap();
        store.insert("m.geo.w1", a(&[4, 2], &[0.5, -0.25, 0.1, 0.2, -0.3, 0.4, 0.05, 0.0]));
        store.insert("m.geo.b1", a(&[2], &[0.1, -0.2]));
        store.insert("m.geo.w2", a(&[2, 1], &[0.7, -0.6]));
        store.insert("m.geo.b2", a(&[1], &[0.05]));
        let mut t = Tape::new();
        let geo = GeometryParams::bind(&mut t, &store, "m").unwrap();
        let q = t.constant(a(&[1, 2], &[1.0, 1.0]));
        let k = t.constant(a(&[1, 2], &[3.0, 1.0]));
        let sg = geometry_term_direct(&mut t, q, k, &geo, &cfg, 1.0).unwrap();
        assert_eq!(t.shape(sg), &[1, 1, 1]);
        assert!((t.value(sg).data()[0] - 0.44412382083068863).abs() < 1e-15);
    }

    #[test]
    fn zero_mlp_gives_zero_geometry() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        GeometryParams::init(&mut store, "m", &cfg, &mut rng);
        for (_, v) in store.iter_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut t = Tape::new();
        let geo = GeometryParams::bind(&mut t, &store, "m").unwrap();
        let q = t.constant(DenseArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = t.constant(DenseArray::new(vec![3, 2], vec![0.0, 5.0, 2.0, 2.0, 9.0, 1.0]).unwrap());
        let sg = geometry_term_direct(&mut t, q, k, &geo, &cfg, 2.0).unwrap();
        assert_eq!(t.shape(sg), &[2, 3, 2]);
        assert!(t.value(sg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn both_terms_off_is_rejected() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        AttentionParams::init(&mut store, "m", &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut t = Tape::new();
        let p = AttentionParams::bind(&mut t, &store, "m").unwrap();
        let f = t.constant(DenseArray::zeros(&[1, 8]));
        let pts = t.constant(DenseArray::zeros(&[1, 2]));
        let q = QuerySet { features: f, points: pts, stride: 4 };
        let err = bvr_attend(&mut t, &q, &KeySet::empty(), &p, &cfg, Geometry::Off, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_keys_leave_queries_unchanged() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        AttentionParams::init(&mut store, "m", &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let mut t = Tape::new();
        let p = AttentionParams::bind(&mut t, &store, "m").unwrap();
        let f = t.constant(DenseArray::filled(&[3, 8], 0.7));
        let pts = t.constant(DenseArray::zeros(&[3, 2]));
        let q = QuerySet { features: f, points: pts, stride: 4 };
        let out = bvr_attend(&mut t, &q, &KeySet::empty(), &p, &cfg, Geometry::Direct, true).unwrap();
        assert_eq!(t.value(out), t.value(f));
    }
}
