//! Cost of the geometry term: closed-form time/memory for the per-pair and
//! shared-map computations, and a bridge to the instrumented counts.
//!
//! Time is in multiply-accumulates, memory in array elements.

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{DenseArray, OpCounter, ParamStore, Tape, BYTES_PER_ELEMENT};
use crate::relation::{build_shared_map, geometry_term_direct, geometry_term_shared, GeometryParams, RelationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostQuery {
    pub d0: u64,
    pub d1: u64,
    pub g: u64,
    pub k: u64,
    pub h: u64,
    pub w: u64,
    pub m: u64,
}

impl CostQuery {
    /// `d0 = d1 = 512`, `G = 8`, `K = 50`, `M = 400`.
    pub fn paper_defaults(h: u64, w: u64) -> Self {
        Self { d0: 512, d1: 512, g: 8, k: 50, h, w, m: 400 }
    }

    /// Per-pair MLP cost `d0 + d0·d1 + d1·G`.
    pub fn mlp_macs(&self) -> BigUint {
        BigUint::from(self.d0) + BigUint::from(self.d0) * self.d1 + BigUint::from(self.d1) * self.g
    }

    /// Per-pair activation footprint `2 + d0 + d1 + G`.
    pub fn mlp_elements(&self) -> BigUint {
        BigUint::from(2u64) + self.d0 + self.d1 + self.g
    }

    pub fn pairs(&self) -> BigUint {
        BigUint::from(self.k) * self.h * self.w
    }

    pub fn map_bins(&self) -> BigUint {
        BigUint::from(self.m) * self.m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub time: BigUint,
    pub memory: BigUint,
}

impl Cost {
    pub fn memory_bytes(&self) -> BigUint {
        &self.memory * BYTES_PER_ELEMENT
    }
}

pub fn cost_direct(q: &CostQuery) -> Cost {
    Cost { time: q.mlp_macs() * q.pairs(), memory: q.mlp_elements() * q.pairs() }
}

pub fn cost_shared(q: &CostQuery) -> Cost {
    let sampling = BigUint::from(q.g) * q.pairs();
    Cost { time: q.mlp_macs() * q.map_bins() + &sampling, memory: q.mlp_elements() * q.map_bins() + sampling }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub query: CostQuery,
    pub direct: Cost,
    pub shared: Cost,
    /// Instrumented MAC counts, filled by [`validate_against_counter`].
    pub measured_direct: Option<u64>,
    pub measured_shared: Option<u64>,
}

impl CostReport {
    pub fn new(query: CostQuery) -> Self {
        Self { query, direct: cost_direct(&query), shared: cost_shared(&query), measured_direct: None, measured_shared: None }
    }

    /// `direct_time / shared_time`; infinite when the shared cost is zero.
    pub fn ratio(&self) -> f64 {
        let d = self.direct.time.to_f64().unwrap_or(f64::INFINITY);
        let s = self.shared.time.to_f64().unwrap_or(f64::INFINITY);
        if s == 0.0 {
            f64::INFINITY
        } else {
            d / s
        }
    }
}

pub const CSV_HEADER: &str = "d0,d1,G,K,H,W,M,direct_time,shared_time,direct_mem,shared_mem,ratio";

pub fn csv_row(r: &CostReport) -> String {
    let q = &r.query;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{:.6}",
        q.d0, q.d1, q.g, q.k, q.h, q.w, q.m, r.direct.time, r.shared.time, r.direct.memory, r.shared.memory,
        r.ratio()
    )
}

pub fn to_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&csv_row(r));
        s.push('\n');
    }
    s
}

/// Smallest `H·W` at which the shared path is at least `factor` times
/// cheaper in time, or `None` if it never is.
pub fn crossover_area(q: &CostQuery, factor: u64) -> Option<BigUint> {
    // factor·(mlp·M² + G·K·A) ≤ mlp·K·A  ⇔  A·K·(mlp − factor·G) ≥ factor·mlp·M²
    let mlp = q.mlp_macs();
    let fg = BigUint::from(factor) * q.g;
    if q.k == 0 || mlp <= fg {
        return None;
    }
    let per_area = (&mlp - fg) * q.k;
    let need = BigUint::from(factor) * &mlp * q.map_bins();
    Some((need + &per_area - 1u32) / per_area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Direct,
    Shared,
}

/// One line of the model-versus-counter reconciliation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRow {
    pub kernel: String,
    pub counted_macs: u64,
    pub counted_elements: u64,
    /// The formula term this kernel accounts for.
    pub term: String,
    /// Counted MACs per unit of that term.
    pub factor: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub mode: CostMode,
    pub model: Cost,
    pub counted_macs: u64,
    pub counted_elements: u64,
    pub items: Vec<ItemRow>,
}

fn term_of(kernel: &str, mode: CostMode) -> (&'static str, u64) {
    match (kernel, mode) {
        ("map_sample", _) => ("G·K·H·W (4 taps per channel per pair)", 4),
        (_, CostMode::Direct) => ("(d0 + d0·d1 + d1·G)·K·H·W", 1),
        (_, CostMode::Shared) => ("(d0 + d0·d1 + d1·G)·M²", 1),
    }
}

fn itemize(counter: &OpCounter, mode: CostMode) -> Vec<ItemRow> {
    counter
        .per_kernel()
        .iter()
        .map(|(name, c)| {
            let (term, factor) = term_of(name, mode);
            ItemRow {
                kernel: name.to_string(),
                counted_macs: c.macs,
                counted_elements: c.elements,
                term: term.to_string(),
                factor,
            }
        })
        .collect()
}

/// Runs the real geometry-term kernels on a random instance of `q` (one
/// query per bin of an `H×W` level, `K` keys) and checks the counted MACs
/// and elements against the formulas. The shared path's sampling term is
/// counted at 4 MACs per channel per pair and reconciled by that factor.
pub fn validate_against_counter(q: &CostQuery, mode: CostMode, seed: u64) -> Result<Validation> {
    let extents = [q.d0, q.d1, q.g, q.k, q.h, q.w, q.m];
    if extents.contains(&0) {
        return config_err(format!("validation needs positive extents: {q:?}"));
    }
    if extents.iter().map(|&e| e as f64).product::<f64>() > 1e6 {
        return config_err(format!("validation query too large: {q:?}"));
    }
    let cfg = RelationConfig {
        channels: q.g as usize,
        heads: q.g as usize,
        embed_dim: q.d0 as usize,
        hidden_dim: q.d1 as usize,
        map_size: q.m as usize,
        unit_ratio: 0.5,
    };
    cfg.validate()?;
    let stride = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    GeometryParams::init(&mut store, "geo", &cfg, &mut rng);
    let (h, w, k) = (q.h as usize, q.w as usize, q.k as usize);
    let queries: Vec<f64> =
        (0..h * w).flat_map(|i| [((i % w) as f64 + 0.5) * stride as f64, ((i / w) as f64 + 0.5) * stride as f64]).collect();
    let keys: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(0.0..(h.max(w) * stride) as f64)).collect();

    let mut tape = Tape::new();
    let geo = GeometryParams::bind(&mut tape, &store, "geo")?;
    let qv = tape.constant(DenseArray::new(vec![h * w, 2], queries)?);
    let kv = tape.constant(DenseArray::new(vec![k, 2], keys)?);
    tape.reset_counter();
    match mode {
        CostMode::Direct => {
            geometry_term_direct(&mut tape, qv, kv, &geo, &cfg, cfg.unit_length(stride))?;
        }
        CostMode::Shared => {
            let map = build_shared_map(&mut tape, &geo, &cfg, stride)?;
            geometry_term_shared(&mut tape, qv, kv, &map)?;
        }
    }
    let counter = tape.counter();
    let model = match mode {
        CostMode::Direct => cost_direct(q),
        CostMode::Shared => cost_shared(q),
    };
    let v = Validation {
        mode,
        model: model.clone(),
        counted_macs: counter.macs(),
        counted_elements: counter.elements(),
        items: itemize(counter, mode),
    };
    let sampling = BigUint::from(q.g) * q.pairs();
    let expected_macs = match mode {
        CostMode::Direct => model.time.clone(),
        CostMode::Shared => &model.time + sampling * 3u32,
    };
    if BigUint::from(v.counted_macs) != expected_macs || BigUint::from(v.counted_elements) != model.memory {
        let detail: Vec<String> = v
            .items
            .iter()
            .map(|r| format!("{}: {} MACs, {} elements", r.kernel, r.counted_macs, r.counted_elements))
            .collect();
        return Err(Error::Contract(format!(
            "{mode:?} cost mismatch: model time {} (expected count {expected_macs}) memory {}, counted {} MACs {} elements [{}]",
            model.time,
            model.memory,
            v.counted_macs,
            v.counted_elements,
            detail.join("; ")
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CostQuery {
        CostQuery { d0: 4, d1: 4, g: 2, k: 3, h: 2, w: 2, m: 4 }
    }

    #[test]
    fn hand_values() {
        let d = cost_direct(&tiny());
        assert_eq!(d.time, BigUint::from(336u32));
        assert_eq!(d.memory, BigUint::from(144u32));
        assert_eq!(cost_shared(&tiny()).time, BigUint::from(472u32));
        let empty = CostQuery { k: 0, ..tiny() };
        assert_eq!(cost_direct(&empty), Cost { time: 0u32.into(), memory: 0u32.into() });
        let s = cost_shared(&empty);
        assert_eq!((s.time, s.memory), (448u32.into(), 192u32.into()));
    }

    #[test]
    fn full_scale_per_pair_cost() {
        let q = CostQuery::paper_defaults(3, 7);
        assert_eq!(cost_direct(&q).time, BigUint::from(266752u64 * 50 * 21));
    }

    #[test]
    fn doubling_height_doubles_direct_time() {
        let a = cost_direct(&tiny()).time;
        let b = cost_direct(&CostQuery { h: 4, ..tiny() }).time;
        assert_eq!(b, a * 2u32);
    }

    #[test]
    fn crossover_is_tight() {
        let q = CostQuery::paper_defaults(1, 1);
        let a = crossover_area(&q, 10).unwrap().to_u64().unwrap();
        let at = |area: u64| CostReport::new(CostQuery { h: area, w: 1, ..q });
        assert!(at(a).ratio() >= 10.0);
        assert!(at(a - 1).ratio() < 10.0);
    }

    #[test]
    fn counted_macs_match_formulas() {
        for mode in [CostMode::Direct, CostMode::Shared] {
            let v = validate_against_counter(&tiny(), mode, 1).unwrap();
            assert_eq!(BigUint::from(v.counted_elements), v.model.memory);
            if mode == CostMode::Direct {
                assert_eq!(BigUint::from(v.counted_macs), v.model.time);
            }
            let again = validate_against_counter(&tiny(), mode, 1).unwrap();
            assert_eq!(v, again);
        }
    }

    #[test]
    fn sampling_term_is_itemized() {
        let v = validate_against_counter(&tiny(), CostMode::Shared, 2).unwrap();
        let row = v.items.iter().find(|r| r.kernel == "map_sample").unwrap();
        assert_eq!(row.counted_macs, 4 * 2 * 3 * 4);
        assert_eq!(row.factor, 4);
    }

    #[test]
    fn csv_shape() {
        let csv = to_csv(&[CostReport::new(tiny())]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("4,4,2,3,2,2,4,336,472,144,"));
        assert_eq!(to_csv(&[]), format!("{CSV_HEADER}\n"));
    }
}
