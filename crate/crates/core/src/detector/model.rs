use crate::error::{config_err, Result};
use crate::geometry::{extract_point, LevelSpec, PointKind};
use crate::keypoints::{point_head_forward, select_keys, LevelPoints, PointHeadParams};
use crate::numerics::{DenseArray, ParamStore, Tape, Var};
use crate::relation::{
    build_shared_map, bvr_attend, bvr_residual, map_for_stride, AttentionParams, Geometry, GeometryMode,
    GeometryParams, KeySet, QuerySet, SharedLocationMap,
};

use super::{build_anchors, DetectorConfig, QueryMode};

/// Precomputed shared-map grids, one per attention module. `None` builds
/// the map on the forward tape itself.
#[derive(Debug, Clone, Default)]
pub struct BatchMaps {
    pub cls: Option<DenseArray>,
    pub reg: Option<DenseArray>,
}

impl BatchMaps {
    pub const CLS_NAME: &'static str = "cls_bvr.map";
    pub const REG_NAME: &'static str = "reg_bvr.map";

    /// Builds the grids needed by `cfg` on `tape` from the geometry MLPs in
    /// `store`. Returns the values and their tape handles by leaf name.
    pub fn build(tape: &mut Tape, store: &ParamStore, cfg: &DetectorConfig) -> Result<(Self, Vec<(&'static str, Var)>)> {
        let mut maps = Self::default();
        let mut vars = Vec::new();
        if cfg.geometry != GeometryMode::Shared {
            return Ok((maps, vars));
        }
        for (on, prefix, name) in [(cfg.cls_bvr, "cls_bvr", Self::CLS_NAME), (cfg.reg_bvr, "reg_bvr", Self::REG_NAME)] {
            if !on {
                continue;
            }
            let geo = GeometryParams::bind(tape, store, prefix)?;
            let map = build_shared_map(tape, &geo, &cfg.relation, super::BASE_STRIDE)?;
            let value = tape.value(map.grid).clone();
            if prefix == "cls_bvr" {
                maps.cls = Some(value);
            } else {
                maps.reg = Some(value);
            }
            vars.push((name, map.grid));
        }
        Ok((maps, vars))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub spec: LevelSpec,
    /// Class probabilities `H·W × (A·classes)`, position-major.
    pub cls_prob: Var,
    /// Box regression `(A·H·W) × 4`, anchor-major.
    pub reg: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Box corners extracted to serve as regression queries.
    pub corner_extractions: usize,
    pub keys: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub levels: Vec<LevelOutput>,
    pub points: Vec<LevelPoints>,
    pub keys: Option<[KeySet; 3]>,
    pub stats: ForwardStats,
}

fn conv_relu(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = store.bind(tape, &format!("{name}.w"))?;
    let b = store.bind(tape, &format!("{name}.b"))?;
    let y = tape.conv3x3(x, w, b)?;
    tape.relu(y)
}

fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = store.bind(tape, &format!("{name}.w"))?;
    let b = store.bind(tape, &format!("{name}.b"))?;
    tape.linear(x, w, b, false)
}

fn points_const(tape: &mut Tape, pts: Vec<f64>) -> Result<Var> {
    let n = pts.len() / 2;
    Ok(tape.constant(DenseArray::new(vec![n, 2], pts)?))
}

fn shared_map(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DetectorConfig,
    prefix: &str,
    leaf: Option<&DenseArray>,
    name: &str,
) -> Result<Option<SharedLocationMap>> {
    if cfg.geometry != GeometryMode::Shared {
        return Ok(None);
    }
    match leaf {
        Some(v) => {
            let m = cfg.relation.map_size;
            if v.shape() != [m, m, cfg.relation.heads] {
                return config_err(format!("map grid {:?} does not match the relation config", v.shape()));
            }
            let grid = match tape.param_var(name) {
                Some(g) => g,
                None => tape.param(name, v.clone())?,
            };
            Ok(Some(SharedLocationMap { grid, unit: cfg.relation.unit_length(super::BASE_STRIDE), size: m }))
        }
        None => {
            let geo = GeometryParams::bind(tape, store, prefix)?;
            Ok(Some(build_shared_map(tape, &geo, &cfg.relation, super::BASE_STRIDE)?))
        }
    }
}

fn geometry_for<'a>(
    cfg: &DetectorConfig,
    map: &'a Option<SharedLocationMap>,
    level_map: &'a mut Option<SharedLocationMap>,
    stride: usize,
) -> Geometry<'a> {
    match cfg.geometry {
        GeometryMode::Off => Geometry::Off,
        GeometryMode::Direct => Geometry::Direct,
        GeometryMode::Shared => {
            let m = map.as_ref().expect("shared map prepared");
            *level_map = Some(map_for_stride(m, &cfg.relation, stride));
            Geometry::Shared(level_map.as_ref().expect("just set"))
        }
    }
}

pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DetectorConfig,
    image: &DenseArray,
    maps: &BatchMaps,
) -> Result<ForwardOutput> {
    let n = cfg.image_size;
    if image.shape() != [n, n, cfg.in_channels] {
        return config_err(format!("image {:?} does not match configured {n}x{n}x{}", image.shape(), cfg.in_channels));
    }
    let specs = cfg.level_specs();
    let x = tape.constant(image.clone());
    let x = conv_relu(tape, store, "backbone.stem", x)?;
    let x = tape.avgpool2x2(x)?;
    let x = conv_relu(tape, store, "backbone.c1", x)?;
    let mut x = tape.avgpool2x2(x)?;
    let mut pyramid = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        if l > 0 {
            x = tape.avgpool2x2(x)?;
        }
        x = conv_relu(tape, store, &format!("backbone.level{l}"), x)?;
        pyramid.push((x, specs[l]));
    }

    let mut stats = ForwardStats::default();
    let (points, keys) = if cfg.any_bvr() {
        let head = PointHeadParams::bind(tape, store, "point")?;
        let pts = point_head_forward(tape, &pyramid, &head)?;
        let keys = select_keys(tape, &pts, &cfg.keys, cfg.subpixel)?;
        for (i, k) in keys.iter().enumerate() {
            stats.keys[i] = k.len();
        }
        (pts, Some(keys))
    } else {
        (Vec::new(), None)
    };
    let cls_att = if cfg.cls_bvr { Some(AttentionParams::bind(tape, store, "cls_bvr")?) } else { None };
    let reg_att = if cfg.reg_bvr { Some(AttentionParams::bind(tape, store, "reg_bvr")?) } else { None };
    let cls_map = if cfg.cls_bvr {
        shared_map(tape, store, cfg, "cls_bvr", maps.cls.as_ref(), BatchMaps::CLS_NAME)?
    } else {
        None
    };
    let reg_map = if cfg.reg_bvr {
        shared_map(tape, store, cfg, "reg_bvr", maps.reg.as_ref(), BatchMaps::REG_NAME)?
    } else {
        None
    };

    let a = cfg.anchors_per_position();
    let anchors = match cfg.query_mode {
        QueryMode::Anchor => Some(build_anchors(&specs, &cfg.anchor_scales, &cfg.anchor_ratios)?),
        QueryMode::Center => None,
    };
    let c = cfg.channels;
    let mut levels = Vec::with_capacity(cfg.levels);
    for (l, &(feat, spec)) in pyramid.iter().enumerate() {
        let hw = spec.bins();
        let centers: Vec<f64> = (0..hw)
            .flat_map(|p| {
                let pt = spec.bin_center(p / spec.width, p % spec.width);
                [pt.x, pt.y]
            })
            .collect();

        let mut cls = feat;
        for i in 0..cfg.head_convs {
            cls = conv_relu(tape, store, &format!("cls_tower.{i}"), cls)?;
        }
        let mut cls = tape.reshape(cls, &[hw, c])?;
        if let Some(att) = &cls_att {
            let keys = keys.as_ref().expect("keys selected when attention is on");
            let pts = points_const(tape, centers.clone())?;
            let q = QuerySet { features: cls, points: pts, stride: spec.stride };
            let mut lm = None;
            let geo = geometry_for(cfg, &cls_map, &mut lm, spec.stride);
            cls = bvr_attend(tape, &q, &keys[PointKind::Center.index()], att, &cfg.relation, geo, cfg.appearance)?;
        }
        let logits = linear(tape, store, "cls_out", cls)?;
        let cls_prob = tape.sigmoid(logits)?;

        let mut reg = feat;
        for i in 0..cfg.head_convs {
            reg = conv_relu(tape, store, &format!("reg_tower.{i}"), reg)?;
        }
        let reg = tape.reshape(reg, &[hw, c])?;
        let mut outs = Vec::with_capacity(a);
        for ai in 0..a {
            let mut enhanced = reg;
            if let Some(att) = &reg_att {
                let keys = keys.as_ref().expect("keys selected when attention is on");
                for kind in [PointKind::TopLeft, PointKind::BottomRight] {
                    let qpts = match &anchors {
                        Some(anchors) => {
                            stats.corner_extractions += hw;
                            (0..hw)
                                .flat_map(|p| {
                                    let pt = extract_point(&anchors[l][p * a + ai], kind);
                                    [pt.x, pt.y]
                                })
                                .collect()
                        }
                        None => centers.clone(),
                    };
                    let pts = points_const(tape, qpts)?;
                    let q = QuerySet { features: reg, points: pts, stride: spec.stride };
                    let mut lm = None;
                    let geo = geometry_for(cfg, &reg_map, &mut lm, spec.stride);
                    if let Some(r) = bvr_residual(tape, &q, &keys[kind.index()], att, &cfg.relation, geo, cfg.appearance)? {
                        enhanced = tape.add(enhanced, r.residual)?;
                    }
                }
            }
            outs.push(linear(tape, store, &format!("reg_out.{ai}"), enhanced)?);
        }
        let reg = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? };
        levels.push(LevelOutput { spec, cls_prob, reg });
    }
    Ok(ForwardOutput { levels, points, keys, stats })
}
