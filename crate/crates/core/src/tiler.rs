//! Tiling planner.
//!
//! A node (single layer or fused PW+DW pair) is tiled along output rows and
//! output channels only; input channels are never split, so every tile
//! produces final accumulator values. For each candidate tiling the planner
//! evaluates a closed-form footprint and traffic model and keeps the
//! cheapest tiling that fits L1.
//!
//! Traffic model. Tiles are visited in `loop_order`; an input tile or a
//! weight block is loaded from L2 only when it is not the one already held in
//! L1. Halo rows are re-fetched by every tile that needs them. Output tiles
//! are stored exactly once. An unfused depthwise layer pays one HWC to CHW
//! reorder pass over every input tile it loads; the fused kernel writes its
//! intermediate buffer channel-major and pays none.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{FusedConfig, Window};
use crate::memsim::{check_fit, Footprint, MemoryConfig, TrafficLedger};
use crate::netir::{LayerDesc, LayerKind, TensorShape};

/// Weights below this fraction of L1 (1/20) may be pinned for the whole node.
pub const PIN_FRACTION_DENOM: u64 = 20;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Layer(String),
    Fused { pw: String, dw: String },
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Layer(id) => write!(f, "{id}"),
            Target::Fused { pw, dw } => write!(f, "{pw}+{dw}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopOrder {
    KOuter,
    SpatialOuter,
}

/// Operator class as seen by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Pw,
    Dw,
    Conv,
    Linear,
    Avgpool,
    Fused,
}

/// Shapes and per-channel parameter sizes of one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeGeom {
    pub target: Target,
    pub kind: NodeKind,
    pub input: TensorShape,
    pub output: TensorShape,
    pub stride: usize,
    pub pad: usize,
    /// Weight bytes per output channel (both layers for a fused pair).
    pub weight_bytes_per_k: u64,
    /// Bias bytes per output channel (both layers for a fused pair).
    pub bias_bytes_per_k: u64,
}

impl NodeGeom {
    pub fn single(layer: &LayerDesc, input: &TensorShape) -> Result<Self> {
        let output = layer.output_shape(input)?;
        let c = layer.c_in as u64;
        let (kind, wpk) = match layer.kind {
            LayerKind::Pw => (NodeKind::Pw, c),
            LayerKind::Dw3x3 => (NodeKind::Dw, 9),
            LayerKind::Conv3x3 => (NodeKind::Conv, 9 * c),
            LayerKind::Linear => (NodeKind::Linear, c),
            LayerKind::AvgpoolGlobal => (NodeKind::Avgpool, 0),
        };
        Ok(NodeGeom {
            target: Target::Layer(layer.id.clone()),
            kind,
            input: *input,
            output,
            stride: layer.stride,
            pad: layer.pad,
            weight_bytes_per_k: wpk,
            bias_bytes_per_k: layer.kind.bias_bytes(1) as u64,
        })
    }

    pub fn fused(pw: &LayerDesc, dw: &LayerDesc, input: &TensorShape) -> Result<Self> {
        if pw.kind != LayerKind::Pw || dw.kind != LayerKind::Dw3x3 || pw.c_out != dw.c_in {
            return Err(Error::shape(format!(
                "`{}`+`{}` is not a fusable pw+dw3x3 pair",
                pw.id, dw.id
            )));
        }
        let mid = pw.output_shape(input)?;
        let output = dw.output_shape(&mid)?;
        Ok(NodeGeom {
            target: Target::Fused {
                pw: pw.id.clone(),
                dw: dw.id.clone(),
            },
            kind: NodeKind::Fused,
            input: *input,
            output,
            stride: dw.stride,
            pad: dw.pad,
            weight_bytes_per_k: pw.c_in as u64 + 9,
            bias_bytes_per_k: 8,
        })
    }

    pub fn k(&self) -> usize {
        self.output.c
    }

    pub fn oh(&self) -> usize {
        self.output.h
    }

    /// Whether the input tile depends on the output-channel block.
    pub fn input_follows_k(&self) -> bool {
        matches!(self.kind, NodeKind::Dw | NodeKind::Avgpool)
    }

    /// Full-image input rows `(first, count)` for output rows `oy0 .. oy0 + n`.
    pub fn input_rows(&self, oy0: usize, n: usize) -> (usize, usize) {
        match self.kind {
            NodeKind::Dw | NodeKind::Conv | NodeKind::Fused => {
                Window::input_rows_for(self.input.h, self.stride, self.pad, oy0, n)
            }
            NodeKind::Pw => (oy0, n),
            NodeKind::Linear => (0, 1),
            NodeKind::Avgpool => (0, self.input.h),
        }
    }

    /// Bytes of one input row restricted to `kt` output channels.
    pub fn input_row_bytes(&self, kt: usize) -> u64 {
        let ch = if self.input_follows_k() { kt } else { self.input.c };
        (self.input.w * ch) as u64
    }

    pub fn total_param_bytes(&self) -> u64 {
        self.k() as u64 * (self.weight_bytes_per_k + self.bias_bytes_per_k)
    }

    /// Spatial tile ranges `(first_out_row, rows)` for `rows_out` rows per tile.
    pub fn spatial_tiles(&self, rows_out: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let oh = self.oh();
        (0..oh).step_by(rows_out).map(move |y| (y, rows_out.min(oh - y)))
    }

    /// Channel blocks `(first_channel, count)` for `k_tile` channels per block.
    pub fn k_tiles(&self, k_tile: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.k();
        (0..k).step_by(k_tile).map(move |b| (b, k_tile.min(k - b)))
    }

    fn pin_eligible(&self, cfg: &MemoryConfig) -> bool {
        let w = self.total_param_bytes();
        w > 0 && w * PIN_FRACTION_DENOM < cfg.l1_bytes
    }

    /// MACs of the node's layers (halo recomputation not included).
    pub fn logical_macs(&self) -> u64 {
        let (h, w, c) = (self.input.h as u64, self.input.w as u64, self.input.c as u64);
        let (oh, ow, k) = (self.output.h as u64, self.output.w as u64, self.output.c as u64);
        match self.kind {
            NodeKind::Pw => h * w * c * k,
            NodeKind::Dw => oh * ow * k * 9,
            NodeKind::Conv => oh * ow * k * c * 9,
            NodeKind::Linear => k * c,
            NodeKind::Avgpool => h * w * c,
            NodeKind::Fused => h * w * c * k + oh * ow * k * 9,
        }
    }
}

/// L1 buffer sizes of one tiling. Every buffer is sized for the largest tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BufferSizes {
    pub input: u64,
    pub output: u64,
    pub weights: u64,
    pub bias: u64,
    /// CHW staging copy of the input tile (unfused depthwise only).
    pub staging: u64,
    /// Fused intermediate buffer, `rows_in * w * fb`.
    pub intermediate: u64,
}

impl BufferSizes {
    pub fn footprint(&self) -> Footprint {
        Footprint {
            streamed: self.input + self.output,
            resident: self.weights + self.bias + self.staging + self.intermediate,
        }
    }
}

/// A tiling decision for one node plus its modelled cost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub target: Target,
    pub rows_out: usize,
    pub k_tile: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fb: Option<usize>,
    pub loop_order: LoopOrder,
    pub pin_weights: bool,
    pub n_tiles: usize,
    /// Largest input-tile row count, halo included.
    pub rows_in: usize,
    pub buffers: BufferSizes,
    pub footprint_bytes: u64,
    pub predicted: TrafficLedger,
}

/// One point of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiling {
    pub rows_out: usize,
    pub k_tile: usize,
    pub loop_order: LoopOrder,
    pub pin_weights: bool,
    /// Requested fused batch; clamped to `k_tile`.
    pub fb: Option<usize>,
}

impl Tiling {
    pub fn untiled(geom: &NodeGeom) -> Self {
        Tiling {
            rows_out: geom.oh(),
            k_tile: geom.k(),
            loop_order: LoopOrder::KOuter,
            pin_weights: false,
            fb: (geom.kind == NodeKind::Fused).then(|| FusedConfig::DEFAULT_FB.min(geom.k())),
        }
    }
}

/// Caller-tunable planner inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanOptions {
    /// Fused-batch candidates; each is clamped to `[1, K]`.
    pub fb_candidates: Vec<usize>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            fb_candidates: vec![FusedConfig::DEFAULT_FB],
        }
    }
}

impl PlanOptions {
    pub fn with_fb(fb: usize) -> Self {
        PlanOptions {
            fb_candidates: vec![fb],
        }
    }
}

/// `(sum of input rows over spatial tiles, largest input rows)` for `rows_out`.
fn fused_pw_macs_per_row(geom: &NodeGeom) -> u64 {
    (geom.input.w * geom.input.c * geom.k()) as u64
}

fn row_stats(geom: &NodeGeom, rows_out: usize) -> (u64, usize) {
    geom.spatial_tiles(rows_out)
        .map(|(y, n)| geom.input_rows(y, n).1)
        .fold((0, 0), |(s, m), r| (s + r as u64, m.max(r)))
}

fn buffer_sizes(geom: &NodeGeom, t: &Tiling, max_rows_in: usize) -> BufferSizes {
    let kt = t.k_tile as u64;
    let k_res = if t.pin_weights { geom.k() as u64 } else { kt };
    let input = max_rows_in as u64 * geom.input_row_bytes(t.k_tile);
    let ow = geom.output.w as u64;
    BufferSizes {
        input,
        output: t.rows_out as u64 * ow * kt,
        weights: k_res * geom.weight_bytes_per_k,
        bias: k_res * geom.bias_bytes_per_k,
        staging: if geom.kind == NodeKind::Dw { input } else { 0 },
        intermediate: match (geom.kind, t.fb) {
            (NodeKind::Fused, Some(fb)) => (max_rows_in * geom.input.w * fb) as u64,
            _ => 0,
        },
    }
}

fn closed_form_traffic(geom: &NodeGeom, t: &Tiling, rows_in_sum: u64) -> TrafficLedger {
    let oh = geom.oh();
    let s_tiles = oh.div_ceil(t.rows_out) as u64;
    let k_tiles = geom.k().div_ceil(t.k_tile) as u64;
    let k = geom.k() as u64;
    let w = geom.input.w as u64;

    let input_once = if geom.input_follows_k() {
        rows_in_sum * w * k
    } else {
        rows_in_sum * w * geom.input.c as u64
    };
    let input = match t.loop_order {
        LoopOrder::KOuter if !geom.input_follows_k() && s_tiles > 1 => k_tiles * input_once,
        _ => input_once,
    };
    let params = geom.total_param_bytes();
    let weights = match t.loop_order {
        _ if t.pin_weights => params,
        LoopOrder::SpatialOuter if k_tiles > 1 => s_tiles * params,
        _ => params,
    };
    let store = (geom.output.h * geom.output.w) as u64 * k;
    TrafficLedger {
        load_bytes: input + weights,
        store_bytes: store,
        reorder_bytes: if geom.kind == NodeKind::Dw { input } else { 0 },
        peak_l1_bytes: 0,
    }
}

/// Normalizes a tiling and evaluates it. Returns `None` when it does not fit.
pub fn evaluate(geom: &NodeGeom, tiling: Tiling, cfg: &MemoryConfig) -> Option<TilePlan> {
    let mut t = tiling;
    if t.rows_out == 0 || t.rows_out > geom.oh() || t.k_tile == 0 || t.k_tile > geom.k() {
        return None;
    }
    if t.pin_weights && !geom.pin_eligible(cfg) {
        return None;
    }
    t.fb = match geom.kind {
        NodeKind::Fused => Some(t.fb.unwrap_or(FusedConfig::DEFAULT_FB).clamp(1, t.k_tile)),
        _ => None,
    };
    let (rows_in_sum, max_rows_in) = row_stats(geom, t.rows_out);
    let buffers = buffer_sizes(geom, &t, max_rows_in);
    let fp = buffers.footprint();
    if !check_fit(&fp, cfg) {
        return None;
    }
    let footprint_bytes = fp.effective(cfg.double_buffer);
    let mut predicted = closed_form_traffic(geom, &t, rows_in_sum);
    predicted.peak_l1_bytes = footprint_bytes;
    let n_tiles = geom.oh().div_ceil(t.rows_out) * geom.k().div_ceil(t.k_tile);
    Some(TilePlan {
        target: geom.target.clone(),
        rows_out: t.rows_out,
        k_tile: t.k_tile,
        fb: t.fb,
        loop_order: t.loop_order,
        pin_weights: t.pin_weights,
        n_tiles,
        rows_in: max_rows_in,
        buffers,
        footprint_bytes,
        predicted,
    })
}

/// Closed-form traffic of an existing plan.
pub fn predict_traffic(plan: &TilePlan, geom: &NodeGeom, cfg: &MemoryConfig) -> Result<TrafficLedger> {
    let t = plan.tiling();
    evaluate(geom, t, cfg)
        .map(|p| p.predicted)
        .ok_or_else(|| Error::infeasible(plan.target.to_string(), "plan does not fit L1"))
}

impl TilePlan {
    pub fn tiling(&self) -> Tiling {
        Tiling {
            rows_out: self.rows_out,
            k_tile: self.k_tile,
            loop_order: self.loop_order,
            pin_weights: self.pin_weights,
            fb: self.fb,
        }
    }

    pub fn spatial_tile_count(&self, geom: &NodeGeom) -> usize {
        geom.oh().div_ceil(self.rows_out)
    }

    /// Extra PW MACs a fused plan spends recomputing halo rows.
    pub fn halo_recompute_macs(&self, geom: &NodeGeom) -> u64 {
        if geom.kind != NodeKind::Fused {
            return 0;
        }
        let (rows_in_sum, _) = row_stats(geom, self.rows_out);
        let (_, used) = geom.input_rows(0, geom.oh());
        (rows_in_sum - used as u64) * fused_pw_macs_per_row(geom)
    }

    /// MACs the kernels issue under this plan. A fused node recomputes halo
    /// rows and skips input rows no output depends on.
    pub fn executed_macs(&self, geom: &NodeGeom) -> u64 {
        if geom.kind != NodeKind::Fused {
            return geom.logical_macs();
        }
        let (rows_in_sum, _) = row_stats(geom, self.rows_out);
        let dw = (geom.oh() * geom.output.w * geom.k() * 9) as u64;
        rows_in_sum * fused_pw_macs_per_row(geom) + dw
    }

    /// Re-evaluates this plan for `geom` and checks it is still consistent.
    pub fn revalidate(&self, geom: &NodeGeom, cfg: &MemoryConfig) -> Result<TilePlan> {
        if self.target != geom.target {
            return Err(Error::Schema(format!(
                "plan target `{}` does not match node `{}`",
                self.target, geom.target
            )));
        }
        evaluate(geom, self.tiling(), cfg).ok_or_else(|| {
            Error::infeasible(
                geom.target.to_string(),
                format!(
                    "tiling rows_out={} k_tile={} does not fit {} bytes of L1",
                    self.rows_out, self.k_tile, cfg.l1_bytes
                ),
            )
        })
    }
}

/// Tie-break order: cheaper, then larger rows, larger channel blocks,
/// k-outer, unpinned, larger fb.
fn better(a: &TilePlan, b: &TilePlan) -> bool {
    let key = |p: &TilePlan| {
        (
            p.predicted.cost(),
            std::cmp::Reverse(p.rows_out),
            std::cmp::Reverse(p.k_tile),
            p.loop_order != LoopOrder::KOuter,
            p.pin_weights,
            std::cmp::Reverse(p.fb.unwrap_or(0)),
        )
    };
    key(a) < key(b)
}

/// Exhaustive search over rows, channel blocks, loop orders, pinning and fb.
pub fn plan_node(geom: &NodeGeom, cfg: &MemoryConfig, opts: &PlanOptions) -> Result<TilePlan> {
    let fbs: Vec<Option<usize>> = if geom.kind == NodeKind::Fused {
        let mut v: Vec<usize> = opts.fb_candidates.iter().map(|&f| f.clamp(1, geom.k())).collect();
        if v.is_empty() {
            v.push(FusedConfig::DEFAULT_FB.min(geom.k()));
        }
        v.sort_unstable();
        v.dedup();
        v.into_iter().map(Some).collect()
    } else {
        vec![None]
    };
    let pins: &[bool] = if geom.pin_eligible(cfg) {
        &[false, true]
    } else {
        &[false]
    };
    let mut best: Option<TilePlan> = None;
    for rows_out in 1..=geom.oh() {
        for k_tile in 1..=geom.k() {
            for loop_order in [LoopOrder::KOuter, LoopOrder::SpatialOuter] {
                for &pin_weights in pins {
                    for &fb in &fbs {
                        let t = Tiling {
                            rows_out,
                            k_tile,
                            loop_order,
                            pin_weights,
                            fb,
                        };
                        if let Some(p) = evaluate(geom, t, cfg) {
                            if best.as_ref().is_none_or(|b| better(&p, b)) {
                                best = Some(p);
                            }
                        }
                    }
                }
            }
        }
    }
    best.ok_or_else(|| {
        Error::infeasible(
            geom.target.to_string(),
            format!("no tile fits {} bytes of L1", cfg.l1_bytes),
        )
    })
}

/// Plans `layer`, fused with `fuse_next` when given.
pub fn plan_layer(
    layer: &LayerDesc,
    in_shape: &TensorShape,
    cfg: &MemoryConfig,
    fuse_next: Option<&LayerDesc>,
    opts: &PlanOptions,
) -> Result<TilePlan> {
    let geom = match fuse_next {
        Some(dw) => NodeGeom::fused(layer, dw, in_shape)?,
        None => NodeGeom::single(layer, in_shape)?,
    };
    plan_node(&geom, cfg, opts)
}
