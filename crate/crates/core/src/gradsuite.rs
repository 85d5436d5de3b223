//! Seeded finite-difference suites over the differentiable kernels, the
//! attention module, the point head and a subset of the full detector loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{image_loss, init_params, BatchMaps, DetectorConfig, QueryMode};
use crate::error::{config_err, Result};
use crate::geometry::{Box, LevelSpec};
use crate::keypoints::{
    assign_targets, init_point_head, point_head_forward, point_losses, select_keys, KeyBudget, KeySharing,
    PointHeadParams,
};
use crate::numerics::{check_param_entries_with, stencil, DenseArray, EntryCheck, Kernel, ParamStore, Tape, Var};
use crate::relation::{
    build_shared_map, bvr_residual, AttentionParams, Geometry, GeometryMode, KeySet, QuerySet, RelationConfig,
};
use crate::synthdata::{generate, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Kernels,
    Relation,
    Keypoints,
    End2endSubset,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Kernels, Scope::Relation, Scope::Keypoints, Scope::End2endSubset];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Kernels => "kernels",
            Scope::Relation => "relation",
            Scope::Keypoints => "keypoints",
            Scope::End2endSubset => "end2end-subset",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Finite-difference step. The full detector crosses many ReLU kinks,
    /// so it gets a smaller step and the looser tolerance absorbs the
    /// extra roundoff.
    pub fn step(self) -> f64 {
        match self {
            Scope::End2endSubset => 1e-6,
            _ => 1e-4,
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Scope::End2endSubset => 1e-4,
            _ => 1e-5,
        }
    }
}

/// Random instances per kernel or attention configuration.
pub const INSTANCES: usize = 10;
/// Floor on the relative-error denominator. Near it the stencil's
/// roundoff (up to 1e-10 here) dominates, so tiny entries are held to an
/// absolute error of `tolerance · GRAD_FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub name: String,
    pub entries: usize,
    /// Entries skipped because a kink lies within the stencil.
    pub nonsmooth: usize,
    pub worst: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeReport {
    pub scope: Scope,
    pub seed: u64,
    pub tolerance: f64,
    pub items: Vec<ItemResult>,
    pub worst: f64,
    pub passed: bool,
}

impl ScopeReport {
    fn new(scope: Scope, seed: u64, items: Vec<ItemResult>) -> Self {
        let worst = items.iter().map(|i| i.worst).fold(0.0, f64::max);
        let entries: usize = items.iter().map(|i| i.entries).sum();
        let skipped: usize = items.iter().map(|i| i.nonsmooth).sum();
        let passed = items.iter().all(|i| i.passed) && skipped as f64 <= MAX_NONSMOOTH * entries as f64;
        Self { scope, seed, tolerance: scope.tolerance(), items, worst, passed }
    }

    pub fn failing(&self) -> Vec<&str> {
        self.items.iter().filter(|i| !i.passed).map(|i| i.name.as_str()).collect()
    }
}

/// Relative error of one entry, or `None` when the numeric side is invalid.
type Entry = Option<f64>;

fn entry_error(analytic: f64, numeric: f64, smooth: bool) -> Entry {
    smooth.then(|| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR))
}

/// At most this fraction of a scope's entries may be skipped as non-smooth.
pub const MAX_NONSMOOTH: f64 = 0.05;

fn item(name: String, errors: impl IntoIterator<Item = Entry>, tol: f64) -> ItemResult {
    let (mut n, mut skipped) = (0, 0);
    let mut worst: f64 = 0.0;
    for e in errors {
        n += 1;
        match e {
            Some(e) => worst = worst.max(if e.is_nan() { f64::INFINITY } else { e }),
            None => skipped += 1,
        }
    }
    ItemResult { name, entries: n, nonsmooth: skipped, worst, passed: worst <= tol }
}

fn from_checks(name: String, checks: &[EntryCheck], tol: f64) -> ItemResult {
    item(name, checks.iter().map(|c| entry_error(c.analytic, c.numeric, c.smooth)), tol)
}

pub fn run_scope(scope: Scope, seed: u64, fault: Option<Kernel>) -> Result<ScopeReport> {
    let items = match scope {
        Scope::Kernels => kernels(seed, fault)?,
        Scope::Relation => relation(seed, fault)?,
        Scope::Keypoints => keypoints(seed, fault)?,
        Scope::End2endSubset => end2end(seed, fault)?,
    };
    Ok(ScopeReport::new(scope, seed, items))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    let n = shape.iter().product();
    DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("consistent shape")
}

/// Values bounded away from zero, for inputs that meet a kink at 0.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseArray {
    let mut a = uniform(rng, shape, 0.1, 2.0);
    a.data_mut().iter_mut().for_each(|v| {
        if rng.gen_bool(0.5) {
            *v = -*v
        }
    });
    a
}

/// Random weighted sum, so every output entry reaches the scalar with a
/// distinct coefficient.
fn reduce(t: &mut Tape, y: Var, rng_weights: &DenseArray) -> Result<Var> {
    let w = t.constant(rng_weights.clone());
    let p = t.mul(y, w)?;
    t.sum(p)
}

type Build = std::boxed::Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Checks every entry of every input of one kernel instance.
fn check_inputs(build: &Build, inputs: &[DenseArray], weights: &DenseArray, fault: Option<Kernel>) -> Result<Vec<Entry>> {
    let eval = |inputs: &[DenseArray], fault: Option<Kernel>| -> Result<(Tape, Var, Vec<Var>)> {
        let mut t = Tape::new();
        if let Some(k) = fault {
            t = t.with_fault(k);
        }
        let vars = inputs
            .iter()
            .enumerate()
            .map(|(i, a)| t.param(format!("in{i}"), a.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = build(&mut t, &vars)?;
        let s = reduce(&mut t, y, weights)?;
        Ok((t, s, vars))
    };
    let value = |inputs: &[DenseArray]| -> Result<f64> {
        let (t, s, _) = eval(inputs, None)?;
        Ok(t.value(s).item().expect("scalar"))
    };
    let (t, s, _) = eval(inputs, fault)?;
    let grads = t.backward(s)?;
    let mut errs = Vec::new();
    for (i, a) in inputs.iter().enumerate() {
        let g = grads.get(&format!("in{i}")).expect("registered input");
        for j in 0..a.len() {
            let st = stencil(
                |d| {
                    let mut p = inputs.to_vec();
                    p[i].data_mut()[j] += d;
                    value(&p)
                },
                Scope::Kernels.step(),
            )?;
            errs.push(entry_error(g.data()[j], st.derivative, st.smooth));
        }
    }
    Ok(errs)
}

/// One random instance of `kernel`: its inputs and a builder over them.
fn kernel_instance(kernel: Kernel, rng: &mut ChaCha8Rng, i: usize) -> (Vec<DenseArray>, Build) {
    let odd = i % 2 == 1;
    match kernel {
        Kernel::MatMul => {
            let a = uniform(rng, &[3, 4], -1.0, 1.0);
            let b = if odd { uniform(rng, &[5, 4], -1.0, 1.0) } else { uniform(rng, &[4, 5], -1.0, 1.0) };
            (vec![a, b], std::boxed::Box::new(move |t, v| t.matmul(v[0], v[1], odd)))
        }
        Kernel::BatchMatMul => {
            let a = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let b = if odd { uniform(rng, &[2, 3, 4], -1.0, 1.0) } else { uniform(rng, &[2, 4, 3], -1.0, 1.0) };
            (vec![a, b], std::boxed::Box::new(move |t, v| t.batch_matmul(v[0], v[1], odd)))
        }
        Kernel::Linear => {
            let x = uniform(rng, &[3, 4], -1.0, 1.0);
            let w = uniform(rng, &[4, 5], -1.0, 1.0);
            let b = uniform(rng, &[5], -1.0, 1.0);
            (vec![x, w, b], std::boxed::Box::new(move |t, v| t.linear(v[0], v[1], v[2], odd)))
        }
        Kernel::Add => {
            let a = uniform(rng, &[3, 4], -1.0, 1.0);
            let b = if odd { uniform(rng, &[4], -1.0, 1.0) } else { uniform(rng, &[3, 4], -1.0, 1.0) };
            (vec![a, b], std::boxed::Box::new(|t, v| t.add(v[0], v[1])))
        }
        Kernel::Mul => {
            let a = uniform(rng, &[3, 4], -1.0, 1.0);
            let b = uniform(rng, &[3, 4], -1.0, 1.0);
            (vec![a, b], std::boxed::Box::new(|t, v| t.mul(v[0], v[1])))
        }
        Kernel::Scale => {
            let f = rng.gen_range(-2.0..2.0);
            (vec![uniform(rng, &[3, 4], -1.0, 1.0)], std::boxed::Box::new(move |t, v| t.scale(v[0], f)))
        }
        Kernel::Relu => (vec![off_zero(rng, &[3, 4])], std::boxed::Box::new(|t, v| t.relu(v[0]))),
        Kernel::Sigmoid => (vec![uniform(rng, &[3, 4], -3.0, 3.0)], std::boxed::Box::new(|t, v| t.sigmoid(v[0]))),
        Kernel::Softmax => {
            let axis = i % 3;
            (vec![uniform(rng, &[2, 3, 4], -2.0, 2.0)], std::boxed::Box::new(move |t, v| t.softmax(v[0], axis)))
        }
        Kernel::Conv3x3 => {
            let x = uniform(rng, &[4, 5, 2], -1.0, 1.0);
            let w = uniform(rng, &[3, 3, 2, 3], -1.0, 1.0);
            let b = uniform(rng, &[3], -1.0, 1.0);
            (vec![x, w, b], std::boxed::Box::new(|t, v| t.conv3x3(v[0], v[1], v[2])))
        }
        Kernel::MaxPool3x3 => (vec![uniform(rng, &[4, 5, 2], -1.0, 1.0)], std::boxed::Box::new(|t, v| t.maxpool3x3(v[0]))),
        Kernel::AvgPool2x2 => (vec![uniform(rng, &[4, 6, 2], -1.0, 1.0)], std::boxed::Box::new(|t, v| t.avgpool2x2(v[0]))),
        Kernel::Concat => {
            let (a, b, axis) = if odd {
                (uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0), 1)
            } else {
                (uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[4, 3], -1.0, 1.0), 0)
            };
            (vec![a, b], std::boxed::Box::new(move |t, v| t.concat(&[v[0], v[1]], axis)))
        }
        Kernel::Gather => {
            let rows: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
            (vec![uniform(rng, &[5, 3], -1.0, 1.0)], std::boxed::Box::new(move |t, v| t.gather(v[0], &rows)))
        }
        Kernel::SliceLast => {
            let start = rng.gen_range(0..3);
            (vec![uniform(rng, &[3, 6], -1.0, 1.0)], std::boxed::Box::new(move |t, v| t.slice_last(v[0], start, 3)))
        }
        Kernel::Bilinear => {
            let grid = uniform(rng, &[4, 5, 2], -1.0, 1.0);
            let coords: Vec<f64> = (0..6).flat_map(|_| [rng.gen_range(0.05..3.95), rng.gen_range(0.05..2.95)]).collect();
            let coords = DenseArray::new(vec![6, 2], coords).expect("6×2");
            (vec![grid, coords], std::boxed::Box::new(|t, v| t.bilinear(v[0], v[1])))
        }
        Kernel::Reshape => (vec![uniform(rng, &[3, 4], -1.0, 1.0)], std::boxed::Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        Kernel::Permute => {
            let mut perm = [0, 1, 2];
            perm.shuffle(rng);
            (vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], std::boxed::Box::new(move |t, v| t.permute(v[0], perm)))
        }
        Kernel::PairwiseOffsets => {
            let q = uniform(rng, &[3, 2], -4.0, 4.0);
            let k = uniform(rng, &[4, 2], -4.0, 4.0);
            (vec![q, k], std::boxed::Box::new(|t, v| t.pairwise_offsets(v[0], v[1])))
        }
        Kernel::SinusoidalEmbed => {
            let s = rng.gen_range(0.2..1.0);
            (vec![uniform(rng, &[3, 2], -5.0, 5.0)], std::boxed::Box::new(move |t, v| t.sinusoidal_embed(v[0], 8, s)))
        }
        Kernel::MapSample => {
            let map = uniform(rng, &[6, 6, 2], -1.0, 1.0);
            let q = uniform(rng, &[3, 2], 0.0, 4.0);
            let k = uniform(rng, &[4, 2], 0.0, 4.0);
            (vec![map, q, k], std::boxed::Box::new(|t, v| t.map_sample(v[0], v[1], v[2], 0.5, 2.5)))
        }
        Kernel::Sum => (vec![uniform(rng, &[3, 4], -1.0, 1.0)], std::boxed::Box::new(|t, v| t.sum(v[0]))),
        Kernel::FocalLoss => {
            let p = uniform(rng, &[12], 0.05, 0.95);
            let targets: Vec<f64> = (0..12).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
            let weights: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..1.0)).collect();
            (vec![p], std::boxed::Box::new(move |t, v| t.focal_loss(v[0], &targets, &weights, 0.25, 2.0)))
        }
        Kernel::SmoothL1 => {
            let x = uniform(rng, &[12], -2.0, 2.0);
            // keep |x − target| clear of the transition at beta
            let targets: Vec<f64> = x
                .data()
                .iter()
                .map(|&v| {
                    let d = rng.gen_range(0.05..0.4) + if rng.gen_bool(0.5) { 0.6 } else { 0.0 };
                    if rng.gen_bool(0.5) {
                        v + d
                    } else {
                        v - d
                    }
                })
                .collect();
            let weights: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..1.0)).collect();
            (vec![x], std::boxed::Box::new(move |t, v| t.smooth_l1(v[0], &targets, &weights, 0.5)))
        }
    }
}

fn kernels(seed: u64, fault: Option<Kernel>) -> Result<Vec<ItemResult>> {
    let tol = Scope::Kernels.tolerance();
    let mut out = Vec::new();
    for kernel in Kernel::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(Kernel::ALL.iter().position(|k| *k == kernel).expect("listed") as u64 + 1);
        let mut errs = Vec::new();
        for i in 0..INSTANCES {
            let (inputs, build) = kernel_instance(kernel, &mut rng, i);
            let mut probe = Tape::new();
            let vars = inputs
                .iter()
                .map(|a| Ok(probe.constant(a.clone())))
                .collect::<Result<Vec<_>>>()?;
            let y = build(&mut probe, &vars)?;
            let weights = uniform(&mut rng, probe.shape(y), 0.5, 1.5);
            errs.extend(check_inputs(&build, &inputs, &weights, fault)?);
        }
        out.push(item(kernel.name().to_string(), errs, tol));
    }
    Ok(out)
}

struct AttentionCase {
    name: &'static str,
    appearance: bool,
    geometry: GeometryMode,
}

const ATTENTION_CASES: [AttentionCase; 4] = [
    AttentionCase { name: "appearance+direct", appearance: true, geometry: GeometryMode::Direct },
    AttentionCase { name: "appearance+shared", appearance: true, geometry: GeometryMode::Shared },
    AttentionCase { name: "geometry-only", appearance: false, geometry: GeometryMode::Shared },
    AttentionCase { name: "appearance-only", appearance: true, geometry: GeometryMode::Off },
];

fn relation(seed: u64, fault: Option<Kernel>) -> Result<Vec<ItemResult>> {
    let tol = Scope::Relation.tolerance();
    let mut out = Vec::new();
    for (ci, case) in ATTENTION_CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + ci as u64);
        let mut checks = Vec::new();
        for i in 0..INSTANCES {
            let heads = [1, 2, 4][i % 3];
            let cfg = RelationConfig { channels: 8, heads, embed_dim: 8, hidden_dim: 8, map_size: 8, unit_ratio: 0.5 };
            let (n, k, stride) = (3, 4, 4);
            let mut store = ParamStore::new();
            AttentionParams::init(&mut store, "m", &cfg, &mut rng);
            store.insert("q.features", uniform(&mut rng, &[n, 8], -1.0, 1.0));
            store.insert("k.features", uniform(&mut rng, &[k, 8], -1.0, 1.0));
            // offsets stay within the map's coverage of ±8 px
            store.insert("q.points", uniform(&mut rng, &[n, 2], 10.0, 16.0));
            store.insert("k.points", uniform(&mut rng, &[k, 2], 10.0, 16.0));
            let weights = uniform(&mut rng, &[n, 8], 0.5, 1.5);
            let build = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
                let p = AttentionParams::bind(t, s, "m")?;
                let q = QuerySet { features: s.bind(t, "q.features")?, points: s.bind(t, "q.points")?, stride };
                let keys =
                    KeySet { tensors: Some((s.bind(t, "k.features")?, s.bind(t, "k.points")?)), records: vec![] };
                let map;
                let geo = match case.geometry {
                    GeometryMode::Off => Geometry::Off,
                    GeometryMode::Direct => Geometry::Direct,
                    GeometryMode::Shared => {
                        map = build_shared_map(t, &p.geo, &cfg, stride)?;
                        Geometry::Shared(&map)
                    }
                };
                let r = bvr_residual(t, &q, &keys, &p, &cfg, geo, case.appearance)?.expect("non-empty keys");
                reduce(t, r.residual, &weights)
            };
            let mut entries = Vec::new();
            for (name, a) in store.iter() {
                let used = case.geometry != GeometryMode::Off || !name.contains(".geo.");
                if used {
                    entries.extend((0..a.len()).map(|j| (name.clone(), j)));
                }
            }
            checks.extend(check_param_entries_with(build, &store, &entries, Scope::Relation.step(), fault)?);
        }
        out.push(from_checks(case.name.to_string(), &checks, tol));
    }
    Ok(out)
}

fn keypoint_levels() -> [LevelSpec; 2] {
    [LevelSpec { stride: 4, height: 4, width: 4 }, LevelSpec { stride: 8, height: 2, width: 2 }]
}

fn keypoints(seed: u64, fault: Option<Kernel>) -> Result<Vec<ItemResult>> {
    let tol = Scope::Keypoints.tolerance();
    let levels = keypoint_levels();
    let c = 4;
    let mut head_checks = Vec::new();
    let mut key_checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(200);
    for i in 0..INSTANCES {
        let mut store = ParamStore::new();
        init_point_head(&mut store, "point", c, &mut rng);
        // lift the branches off the near-constant prior
        for (name, v) in store.iter_mut() {
            if !name.contains("shared") {
                v.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.8..0.8));
            }
        }
        for (l, spec) in levels.iter().enumerate() {
            store.insert(format!("feat{l}"), uniform(&mut rng, &[spec.height, spec.width, c], -1.0, 1.0));
        }
        let x0 = rng.gen_range(0.0..6.0);
        let y0 = rng.gen_range(0.0..6.0);
        let b = Box::new(x0, y0, x0 + rng.gen_range(4.0..9.0), y0 + rng.gen_range(4.0..9.0))?;
        let targets = assign_targets(&[b], &levels)?;
        let forward = |t: &mut Tape, s: &ParamStore| -> Result<Vec<crate::keypoints::LevelPoints>> {
            let p = PointHeadParams::bind(t, s, "point")?;
            let feats = levels
                .iter()
                .enumerate()
                .map(|(l, spec)| Ok((s.bind(t, &format!("feat{l}"))?, *spec)))
                .collect::<Result<Vec<_>>>()?;
            point_head_forward(t, &feats, &p)
        };
        let loss = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
            let preds = forward(t, s)?;
            let l = point_losses(t, &preds, &targets)?;
            let sum = t.add(l.score, l.offset)?;
            t.scale(sum, 100.0)
        };
        let entries: Vec<(String, usize)> =
            store.iter().flat_map(|(n, a)| (0..a.len()).map(move |j| (n.clone(), j))).collect();
        head_checks.extend(check_param_entries_with(loss, &store, &entries, Scope::Keypoints.step(), fault)?);

        let budget = KeyBudget { k: 3, sharing: if i % 2 == 0 { KeySharing::Shared } else { KeySharing::PerLevel } };
        let keyed = |t: &mut Tape, s: &ParamStore| -> Result<Var> {
            let preds = forward(t, s)?;
            let sets = select_keys(t, &preds, &budget, true)?;
            let mut total = t.constant(DenseArray::scalar(0.0));
            for set in &sets {
                if let Some((f, p)) = set.tensors {
                    for v in [f, p] {
                        let n = t.value(v).len();
                        let w = (0..n).map(|j| 0.5 + ((j * 7) % 11) as f64 / 10.0).collect();
                        let w = DenseArray::new(t.shape(v).to_vec(), w)?;
                        let r = reduce(t, v, &w)?;
                        total = t.add(total, r)?;
                    }
                }
            }
            Ok(total)
        };
        key_checks.extend(check_param_entries_with(keyed, &store, &entries, Scope::Keypoints.step(), fault)?);
    }
    Ok(vec![from_checks("point-losses".into(), &head_checks, tol), from_checks("key-features".into(), &key_checks, tol)])
}

/// Detector variants covered by the end-to-end subset.
fn end2end_configs() -> Vec<(&'static str, DetectorConfig)> {
    let base = DetectorConfig {
        image_size: 32,
        stem_channels: 4,
        channels: 8,
        relation: RelationConfig { channels: 8, heads: 2, embed_dim: 8, hidden_dim: 8, map_size: 16, unit_ratio: 0.5 },
        keys: KeyBudget { k: 4, sharing: KeySharing::Shared },
        ..DetectorConfig::default()
    };
    vec![
        ("anchor-shared", base.clone()),
        ("anchor-direct", DetectorConfig { geometry: GeometryMode::Direct, ..base.clone() }),
        ("center-shared", DetectorConfig { query_mode: QueryMode::Center, ..base }),
    ]
}

pub const END2END_MODULES: [&str; 8] =
    ["backbone", "cls_tower", "reg_tower", "cls_out", "reg_out", "point", "cls_bvr", "reg_bvr"];

/// Three seeded entries per module and variant. Item names record the
/// chosen `parameter[index]`.
fn end2end(seed: u64, fault: Option<Kernel>) -> Result<Vec<ItemResult>> {
    let tol = Scope::End2endSubset.tolerance();
    let mut out = Vec::new();
    for (vi, (label, cfg)) in end2end_configs().into_iter().enumerate() {
        let mut store = init_params(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(300 + vi as u64);
        // zero biases over dead inputs sit exactly on ReLU kinks
        for (name, v) in store.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".b1") {
                v.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
            }
        }
        let spec = SceneSpec { height: 32, width: 32, min_size: 8, max_size: 20, max_objects: 3, seed, ..SceneSpec::default() };
        let sample = generate(&spec, 1)?.samples.remove(0);
        let mut entries = Vec::new();
        for module in END2END_MODULES {
            let mut names: Vec<&String> = store.iter().map(|(n, _)| n).filter(|n| n.starts_with(module)).collect();
            if names.is_empty() {
                return config_err(format!("no parameters for module `{module}`"));
            }
            names.sort();
            names.shuffle(&mut rng);
            for name in names.into_iter().take(3) {
                let len = store.get(name).expect("listed").len();
                entries.push((name.clone(), rng.gen_range(0..len)));
            }
        }
        let build = |t: &mut Tape, p: &ParamStore| -> Result<Var> {
            let (_, l) = image_loss(t, p, &cfg, &sample, &BatchMaps::default())?;
            Ok(l.total)
        };
        for c in check_param_entries_with(build, &store, &entries, Scope::End2endSubset.step(), fault)? {
            let name = format!("{label}/{}[{}]", c.name, c.index);
            out.push(item(name, [entry_error(c.analytic, c.numeric, c.smooth)], tol));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_passes() {
        let r = run_scope(Scope::Kernels, 5, None).unwrap();
        assert_eq!(r.items.len(), Kernel::ALL.len());
        assert!(r.passed, "{:?}", r.items.iter().filter(|i| !i.passed).collect::<Vec<_>>());
        assert!(r.items.iter().all(|i| i.entries >= INSTANCES));
    }

    #[test]
    fn corrupted_backward_is_named() {
        let r = run_scope(Scope::Kernels, 5, Some(Kernel::Conv3x3)).unwrap();
        assert_eq!(r.failing(), vec!["conv3x3"]);
    }

    #[test]
    fn same_seed_same_worst_error() {
        let a = run_scope(Scope::Relation, 9, None).unwrap();
        let b = run_scope(Scope::Relation, 9, None).unwrap();
        assert_eq!(a, b);
        assert!(a.passed, "{:?}", a.items);
    }

    #[test]
    fn keypoint_paths_pass() {
        let r = run_scope(Scope::Keypoints, 3, None).unwrap();
        assert!(r.passed, "{:?}", r.items);
    }

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(Scope::from_name(s.name()), Some(s));
        }
    }
}
