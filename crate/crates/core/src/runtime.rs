//! Fusion pass, tiled executor and the untiled golden path.
//!
//! Activations live in simulated L2 in HWC order between nodes. Each node
//! runs tile by tile: input rows and weight blocks are copied into L1
//! buffers (counted as loads), the kernel runs on the L1 copies, and the
//! output tile is written back into the L2 activation (counted as a store).
//! Stores of channel-major kernel outputs scatter straight into the HWC
//! activation, so only the unfused depthwise input reorder is counted as an
//! in-L1 layout pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, FusedParams, Tensor, Window};
use crate::memsim::{Direction, L1Arena, MemoryConfig, TrafficLedger};
use crate::netir::{LayerKind, Layout, Network, TensorShape};
use crate::par::Exec;
use crate::tiler::{self, LoopOrder, NodeGeom, NodeKind, PlanOptions, Target, TilePlan};

/// What a graph node computes, as indices into the manifest's layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOp {
    Single(usize),
    Fused { pw: usize, dw: usize },
}

impl NodeOp {
    pub fn is_fused(&self) -> bool {
        matches!(self, NodeOp::Fused { .. })
    }

    pub fn first_layer(&self) -> usize {
        match *self {
            NodeOp::Single(i) => i,
            NodeOp::Fused { pw, .. } => pw,
        }
    }

    pub fn last_layer(&self) -> usize {
        match *self {
            NodeOp::Single(i) => i,
            NodeOp::Fused { dw, .. } => dw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub op: NodeOp,
    pub geom: NodeGeom,
    pub plan: Option<TilePlan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionGraph {
    pub nodes: Vec<GraphNode>,
}

/// Groups every adjacent `pw -> dw3x3` pair into a fused node when `enable`
/// is set. Scanning left to right, a `pw` fuses with the layer right after
/// it, so in `[pw, pw, dw3x3]` the second `pw` takes the `dw3x3`.
pub fn fusion_pass(net: &Network, enable: bool) -> Result<ExecutionGraph> {
    let layers = net.layers();
    let mut nodes = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let input = net.layer_input_shape(i);
        let fusable = enable
            && layers[i].kind == LayerKind::Pw
            && layers
                .get(i + 1)
                .is_some_and(|n| n.kind == LayerKind::Dw3x3 && n.c_in == layers[i].c_out);
        if fusable {
            nodes.push(GraphNode {
                op: NodeOp::Fused { pw: i, dw: i + 1 },
                geom: NodeGeom::fused(&layers[i], &layers[i + 1], &input)?,
                plan: None,
            });
            i += 2;
        } else {
            nodes.push(GraphNode {
                op: NodeOp::Single(i),
                geom: NodeGeom::single(&layers[i], &input)?,
                plan: None,
            });
            i += 1;
        }
    }
    Ok(ExecutionGraph { nodes })
}

/// Serialized planning result consumed by `run`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFile {
    pub network: String,
    pub fuse: bool,
    pub memory: MemoryConfig,
    pub nodes: Vec<TilePlan>,
}

impl ExecutionGraph {
    /// Plans every node with the exhaustive planner.
    pub fn plan_all(&mut self, cfg: &MemoryConfig, opts: &PlanOptions) -> Result<()> {
        for node in &mut self.nodes {
            node.plan = Some(tiler::plan_node(&node.geom, cfg, opts)?);
        }
        Ok(())
    }

    /// Installs externally supplied plans after re-checking them against `cfg`.
    pub fn apply_plans(&mut self, plans: &[TilePlan], cfg: &MemoryConfig) -> Result<()> {
        if plans.len() != self.nodes.len() {
            return Err(Error::Schema(format!(
                "plan has {} nodes, graph has {}",
                plans.len(),
                self.nodes.len()
            )));
        }
        for (node, plan) in self.nodes.iter_mut().zip(plans) {
            node.plan = Some(plan.revalidate(&node.geom, cfg)?);
        }
        Ok(())
    }

    pub fn plans(&self) -> Vec<TilePlan> {
        self.nodes.iter().filter_map(|n| n.plan.clone()).collect()
    }

    pub fn to_plan_file(&self, net: &Network, fuse: bool, cfg: &MemoryConfig) -> PlanFile {
        PlanFile {
            network: net.manifest.name.clone(),
            fuse,
            memory: *cfg,
            nodes: self.plans(),
        }
    }

    pub fn fused_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_fused()).count()
    }
}

impl PlanFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("plan file: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReport {
    pub target: Target,
    pub fused: bool,
    pub n_tiles: usize,
    /// MACs of the node's layers.
    pub macs: u64,
    /// MACs actually issued by the kernels, including fused halo recomputation.
    pub executed_macs: u64,
    pub intermediate_bytes: u64,
    pub ledger: TrafficLedger,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub network: String,
    pub nodes: Vec<NodeReport>,
    pub totals: TrafficLedger,
    pub total_macs: u64,
    pub total_executed_macs: u64,
    pub peak_l1_bytes: u64,
    pub peak_l2_bytes: u64,
}

impl TrafficReport {
    fn from_nodes(network: String, nodes: Vec<NodeReport>, peak_l2_bytes: u64) -> Self {
        let mut totals = TrafficLedger::default();
        for n in &nodes {
            totals.merge(&n.ledger);
        }
        TrafficReport {
            network,
            total_macs: nodes.iter().map(|n| n.macs).sum(),
            total_executed_macs: nodes.iter().map(|n| n.executed_macs).sum(),
            peak_l1_bytes: totals.peak_l1_bytes,
            peak_l2_bytes,
            totals,
            nodes,
        }
    }
}

/// Runs `graph` tile by tile. Every node must carry a plan.
pub fn execute(
    net: &Network,
    graph: &ExecutionGraph,
    input: &Tensor,
    cfg: &MemoryConfig,
    exec: Exec,
) -> Result<(Tensor, TrafficReport)> {
    cfg.validate()?;
    let in_shape = net.input_shape();
    if input.shape.layout != Layout::Hwc || !input.shape.same_dims(&in_shape) {
        return Err(Error::shape(format!(
            "input is {}x{}x{} {:?}, network expects {}x{}x{} HWC",
            input.shape.h, input.shape.w, input.shape.c, input.shape.layout, in_shape.h, in_shape.w, in_shape.c
        )));
    }
    let blob_bytes = net.blob().len() as u64;
    let mut act = input.data.clone();
    let mut reports = Vec::with_capacity(graph.nodes.len());
    let mut peak_l2 = 0;
    for node in &graph.nodes {
        let plan = node
            .plan
            .as_ref()
            .ok_or_else(|| Error::infeasible(node.geom.target.to_string(), "node has no tile plan"))?;
        let out_len = node.geom.output.numel();
        let l2_live = blob_bytes + act.len() as u64 + out_len as u64;
        if l2_live > cfg.l2_bytes {
            return Err(Error::infeasible(
                node.geom.target.to_string(),
                format!("L2 needs {l2_live} bytes, capacity {}", cfg.l2_bytes),
            ));
        }
        peak_l2 = peak_l2.max(l2_live);
        let mut out = vec![0i8; out_len];
        let rep = run_node(net, node, plan, &act, &mut out, cfg, exec)?;
        reports.push(rep);
        act = out;
    }
    let out_shape = graph.nodes.last().map(|n| n.geom.output).unwrap_or(in_shape);
    let report = TrafficReport::from_nodes(net.manifest.name.clone(), reports, peak_l2);
    Ok((Tensor::new(out_shape, act)?, report))
}

/// Parameters of a node in a uniform form.
struct NodeParams<'a> {
    weights: &'a [i8],
    bias: &'a [i32],
    /// Second layer of a fused pair.
    dw_weights: &'a [i8],
    dw_bias: &'a [i32],
}

struct Buffers {
    input: Vec<i8>,
    staging: Vec<i8>,
    weights: Vec<i8>,
    dw_weights: Vec<i8>,
    bias: Vec<i32>,
    dw_bias: Vec<i32>,
    intermediate: Vec<i8>,
    output: Vec<i8>,
}

fn run_node(
    net: &Network,
    node: &GraphNode,
    plan: &TilePlan,
    act: &[i8],
    out: &mut [i8],
    cfg: &MemoryConfig,
    exec: Exec,
) -> Result<NodeReport> {
    let g = &node.geom;
    let owner = g.target.to_string();
    let (first, last) = (node.op.first_layer(), node.op.last_layer());
    let q_first = net.layers()[first].quant;
    let q_last = net.layers()[last].quant;
    let params = match node.op {
        NodeOp::Single(i) => NodeParams {
            weights: &net.params(i).weights,
            bias: &net.params(i).bias,
            dw_weights: &[],
            dw_bias: &[],
        },
        NodeOp::Fused { pw, dw } => NodeParams {
            weights: &net.params(pw).weights,
            bias: &net.params(pw).bias,
            dw_weights: &net.params(dw).weights,
            dw_bias: &net.params(dw).bias,
        },
    };
    let (c, w, h) = (g.input.c, g.input.w, g.input.h);
    let (ow, k) = (g.output.w, g.output.c);
    let wpk = match g.kind {
        NodeKind::Fused => c,
        NodeKind::Pw | NodeKind::Linear => c,
        NodeKind::Conv => 9 * c,
        NodeKind::Dw => 9,
        NodeKind::Avgpool => 0,
    };

    // Static L1 allocation for the whole node, sized by the plan.
    let b = &plan.buffers;
    let io_copies = if cfg.double_buffer { 2 } else { 1 };
    let mut arena = L1Arena::new(cfg.l1_bytes);
    for _ in 0..io_copies {
        arena.alloc(&owner, "input", b.input)?;
        arena.alloc(&owner, "output", b.output)?;
    }
    arena.alloc(&owner, "weights", b.weights)?;
    arena.alloc(&owner, "bias", b.bias)?;
    arena.alloc(&owner, "staging", b.staging)?;
    arena.alloc(&owner, "intermediate", b.intermediate)?;

    let k_res = if plan.pin_weights { k } else { plan.k_tile };
    let mut bufs = Buffers {
        input: vec![0; b.input as usize],
        staging: vec![0; b.staging as usize],
        weights: vec![0; k_res * wpk],
        dw_weights: vec![0; if g.kind == NodeKind::Fused { k_res * 9 } else { 0 }],
        bias: vec![0; if g.kind == NodeKind::Avgpool { 0 } else { k_res }],
        dw_bias: vec![0; if g.kind == NodeKind::Fused { k_res } else { 0 }],
        intermediate: vec![0; b.intermediate as usize],
        output: vec![0; b.output as usize],
    };

    let mut ledger = TrafficLedger::default();
    let load_params = |bufs: &mut Buffers, ledger: &mut TrafficLedger, k0: usize, kn: usize| {
        bufs.weights[..kn * wpk].copy_from_slice(&params.weights[k0 * wpk..(k0 + kn) * wpk]);
        let mut bytes = kn * wpk;
        if !bufs.bias.is_empty() {
            bufs.bias[..kn].copy_from_slice(&params.bias[k0..k0 + kn]);
            bytes += 4 * kn;
        }
        if g.kind == NodeKind::Fused {
            bufs.dw_weights[..kn * 9].copy_from_slice(&params.dw_weights[k0 * 9..(k0 + kn) * 9]);
            bufs.dw_bias[..kn].copy_from_slice(&params.dw_bias[k0..k0 + kn]);
            bytes += 9 * kn + 4 * kn;
        }
        ledger.record_transfer(Direction::Load, bytes as u64);
    };
    if plan.pin_weights {
        load_params(&mut bufs, &mut ledger, 0, k);
    }

    let spatial: Vec<(usize, usize)> = g.spatial_tiles(plan.rows_out).collect();
    let kblocks: Vec<(usize, usize)> = g.k_tiles(plan.k_tile).collect();
    let order: Vec<(usize, usize)> = match plan.loop_order {
        LoopOrder::SpatialOuter => (0..spatial.len())
            .flat_map(|i| (0..kblocks.len()).map(move |j| (i, j)))
            .collect(),
        LoopOrder::KOuter => (0..kblocks.len())
            .flat_map(|j| (0..spatial.len()).map(move |i| (i, j)))
            .collect(),
    };

    let follows_k = g.input_follows_k();
    let mut resident_input: Option<(usize, usize)> = None;
    let mut resident_weights: Option<usize> = None;
    let mut executed_macs = 0u64;
    let mut intermediate_used = 0usize;
    let mut in_rows_cur = (0usize, 0usize);

    for (i, j) in order {
        let (y0, n) = spatial[i];
        let (k0, kn) = kblocks[j];
        let key = (i, if follows_k { j } else { 0 });
        if resident_input != Some(key) {
            let (lo, rows) = g.input_rows(y0, n);
            let ch = if follows_k { kn } else { c };
            let dst = &mut bufs.input[..rows * w * ch];
            for r in 0..rows {
                for x in 0..w {
                    let src = ((lo + r) * w + x) * c + if follows_k { k0 } else { 0 };
                    dst[(r * w + x) * ch..][..ch].copy_from_slice(&act[src..src + ch]);
                }
            }
            ledger.record_transfer(Direction::Load, (rows * w * ch) as u64);
            if g.kind == NodeKind::Dw {
                kernels::hwc_chw_permute(dst, &mut bufs.staging[..rows * w * ch], rows * w, ch, Layout::Chw);
                ledger.record_transfer(Direction::Reorder, (rows * w * ch) as u64);
            }
            resident_input = Some(key);
            in_rows_cur = (lo, rows);
        }
        let wk0 = if plan.pin_weights {
            k0
        } else {
            if resident_weights != Some(j) {
                load_params(&mut bufs, &mut ledger, k0, kn);
                resident_weights = Some(j);
            }
            0
        };
        let (lo, rows) = in_rows_cur;
        let win = Window {
            h_full: h,
            w,
            in_row0: lo,
            in_rows: rows,
            stride: g.stride,
            pad: g.pad,
        };
        let weights = &bufs.weights[wk0 * wpk..(wk0 + kn) * wpk];
        let bias = if bufs.bias.is_empty() {
            &[][..]
        } else {
            &bufs.bias[wk0..wk0 + kn]
        };
        let q = q_first;
        let o = &mut bufs.output[..n * ow * kn];
        let chw_out = match g.kind {
            NodeKind::Pw | NodeKind::Linear => {
                executed_macs += kernels::pw_core(exec, &bufs.input[..rows * w * c], c, weights, bias, q, o);
                false
            }
            NodeKind::Conv => {
                executed_macs +=
                    kernels::conv_core(exec, &bufs.input[..rows * w * c], c, &win, weights, bias, q, y0, n, o);
                false
            }
            NodeKind::Dw => {
                executed_macs += kernels::dw_core(
                    exec,
                    &bufs.staging[..rows * w * kn],
                    kn,
                    &win,
                    weights,
                    bias,
                    q,
                    y0,
                    n,
                    o,
                );
                true
            }
            NodeKind::Avgpool => {
                executed_macs += kernels::avgpool_core(&bufs.input[..rows * w * kn], kn, q, o);
                false
            }
            NodeKind::Fused => {
                let fp = FusedParams {
                    pw_weights: weights,
                    pw_bias: bias,
                    pw_quant: q_first,
                    dw_weights: &bufs.dw_weights[wk0 * 9..(wk0 + kn) * 9],
                    dw_bias: &bufs.dw_bias[wk0..wk0 + kn],
                    dw_quant: q_last,
                };
                let fb = plan.fb.unwrap_or(kernels::FusedConfig::DEFAULT_FB).min(kn);
                if rows * w * fb > bufs.intermediate.len() {
                    return Err(Error::infeasible(&owner, "fused intermediate buffer too small"));
                }
                let st = kernels::fused_core(
                    exec,
                    &bufs.input[..rows * w * c],
                    c,
                    &win,
                    &fp,
                    fb,
                    y0,
                    n,
                    o,
                    &mut bufs.intermediate,
                );
                executed_macs += st.macs;
                intermediate_used = intermediate_used.max(st.intermediate_bytes);
                true
            }
        };
        // Store the tile into the HWC activation.
        for r in 0..n {
            for x in 0..ow {
                let dst = ((y0 + r) * ow + x) * k + k0;
                for kk in 0..kn {
                    let v = if chw_out {
                        o[(kk * n + r) * ow + x]
                    } else {
                        o[(r * ow + x) * kn + kk]
                    };
                    out[dst + kk] = v;
                }
            }
        }
        ledger.record_transfer(Direction::Store, (n * ow * kn) as u64);
    }
    ledger.peak_l1_bytes = arena.peak();
    arena.free_all();

    Ok(NodeReport {
        target: g.target.clone(),
        fused: node.op.is_fused(),
        n_tiles: spatial.len() * kblocks.len(),
        macs: g.logical_macs(),
        executed_macs,
        intermediate_bytes: intermediate_used as u64,
        ledger,
    })
}

/// Untiled, unfused execution with the whole-tensor kernels.
pub fn golden(net: &Network, input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    for (i, layer) in net.layers().iter().enumerate() {
        let p = net.params(i);
        let q = layer.quant;
        x = match layer.kind {
            LayerKind::Pw => kernels::pw_conv_with(Exec::Sequential, &x, &p.weights, &p.bias, q)?.0,
            LayerKind::Conv3x3 => {
                kernels::conv3x3_with(Exec::Sequential, &x, &p.weights, &p.bias, layer.stride, layer.pad, q)?.0
            }
            LayerKind::Dw3x3 => {
                let (chw, _) = kernels::layout_convert(&x, Layout::Chw);
                let (y, _) =
                    kernels::dw_conv3x3_with(Exec::Sequential, &chw, &p.weights, &p.bias, layer.stride, layer.pad, q)?;
                kernels::layout_convert(&y, Layout::Hwc).0
            }
            LayerKind::Linear => kernels::linear(&x, &p.weights, &p.bias, q)?.0,
            LayerKind::AvgpoolGlobal => kernels::avgpool_global(&x, q)?.0,
        };
    }
    Ok(x)
}

/// Builds, plans and executes in one call.
pub fn run_network(
    net: &Network,
    input: &Tensor,
    fuse: bool,
    cfg: &MemoryConfig,
    opts: &PlanOptions,
    exec: Exec,
) -> Result<(Tensor, TrafficReport, ExecutionGraph)> {
    let mut graph = fusion_pass(net, fuse)?;
    graph.plan_all(cfg, opts)?;
    let (out, rep) = execute(net, &graph, input, cfg, exec)?;
    Ok((out, rep, graph))
}

/// Reads a raw int8 HWC activation file.
pub fn read_activation(path: &Path, shape: TensorShape) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    Tensor::new(
        shape.with_layout(Layout::Hwc),
        bytes.into_iter().map(|b| b as i8).collect(),
    )
}

pub fn write_activation(path: &Path, t: &Tensor) -> Result<()> {
    let (hwc, _) = kernels::layout_convert(t, Layout::Hwc);
    std::fs::write(path, hwc.data.iter().map(|&v| v as u8).collect::<Vec<u8>>())?;
    Ok(())
}
