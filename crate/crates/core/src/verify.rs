//! Cross-checks the tiled executor against the golden path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures;
use crate::kernels::Tensor;
use crate::memsim::MemoryConfig;
use crate::netir::Network;
use crate::par::{self, Exec};
use crate::runtime::{self, fusion_pass, ExecutionGraph};
use crate::tiler::{self, LoopOrder, NodeGeom, NodeKind, PlanOptions, TilePlan, Tiling};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathResult {
    pub path: String,
    pub matches: bool,
    /// Index of the first differing output element.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_mismatch: Option<usize>,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub network: String,
    pub seed: u64,
    pub paths: Vec<PathResult>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub cfg: MemoryConfig,
    pub fb_sweep: Vec<usize>,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            cfg: MemoryConfig::default(),
            fb_sweep: vec![1, 3, 8],
            seed: 0,
            exec: Exec::default(),
        }
    }
}

/// A feasible tiling of `geom` with at least two tiles when one exists,
/// falling back to the planner's choice.
pub fn forced_multi_tile(geom: &NodeGeom, cfg: &MemoryConfig, fb: usize) -> Result<TilePlan> {
    let (oh, k) = (geom.oh(), geom.k());
    let fb = (geom.kind == NodeKind::Fused).then_some(fb);
    let mut candidates = Vec::new();
    for rows in [oh.div_ceil(2), oh.div_ceil(3), 2, 1] {
        for kt in [k, k.div_ceil(2), k.div_ceil(3), 1] {
            for order in [LoopOrder::KOuter, LoopOrder::SpatialOuter] {
                candidates.push(Tiling {
                    rows_out: rows.max(1),
                    k_tile: kt.max(1),
                    loop_order: order,
                    pin_weights: false,
                    fb,
                });
            }
        }
    }
    candidates
        .into_iter()
        .filter_map(|t| tiler::evaluate(geom, t, cfg))
        .find(|p| p.n_tiles >= 2)
        .map(Ok)
        .unwrap_or_else(|| tiler::plan_node(geom, cfg, &PlanOptions::with_fb(fb.unwrap_or(8))))
}

fn compare(path: String, golden: &Tensor, got: &Tensor, total_bytes: u64) -> PathResult {
    let first_mismatch = if golden.shape.same_dims(&got.shape) {
        golden.data.iter().zip(&got.data).position(|(a, b)| a != b)
    } else {
        Some(0)
    };
    PathResult {
        path,
        matches: first_mismatch.is_none(),
        first_mismatch,
        total_bytes,
    }
}

/// Executes `candidate` along every path and compares each output to the
/// golden path of `reference`. Both networks must share a manifest shape.
pub fn verify_against(reference: &Network, candidate: &Network, opts: &VerifyOptions) -> Result<VerifyReport> {
    let input = fixtures::random_input(reference.input_shape(), opts.seed);
    let golden = runtime::golden(reference, &input)?;

    enum Mode {
        Planned,
        Forced,
    }
    let mut variants: Vec<(String, bool, usize, Mode)> = vec![("unfused".into(), false, 8, Mode::Planned)];
    variants.push(("unfused/tiled".into(), false, 8, Mode::Forced));
    for &fb in &opts.fb_sweep {
        variants.push((format!("fused/fb={fb}"), true, fb, Mode::Planned));
        variants.push((format!("fused/fb={fb}/tiled"), true, fb, Mode::Forced));
    }

    let results = par::map(opts.exec, &variants, |(name, fuse, fb, mode)| -> Result<PathResult> {
        let mut graph: ExecutionGraph = fusion_pass(candidate, *fuse)?;
        match mode {
            Mode::Planned => graph.plan_all(&opts.cfg, &PlanOptions::with_fb(*fb))?,
            Mode::Forced => {
                for node in &mut graph.nodes {
                    node.plan = Some(forced_multi_tile(&node.geom, &opts.cfg, *fb)?);
                }
            }
        }
        let (out, rep) = runtime::execute(candidate, &graph, &input, &opts.cfg, Exec::Sequential)?;
        Ok(compare(name.clone(), &golden, &out, rep.totals.transfer_bytes()))
    });
    let paths = results.into_iter().collect::<Result<Vec<_>>>()?;
    let passed = paths.iter().all(|p| p.matches);
    Ok(VerifyReport {
        network: reference.manifest.name.clone(),
        seed: opts.seed,
        paths,
        passed,
    })
}

pub fn verify(net: &Network, opts: &VerifyOptions) -> Result<VerifyReport> {
    verify_against(net, net, opts)
}

impl VerifyReport {
    pub fn into_result(self) -> Result<VerifyReport> {
        if self.passed {
            Ok(self)
        } else {
            let bad: Vec<&str> = self
                .paths
                .iter()
                .filter(|p| !p.matches)
                .map(|p| p.path.as_str())
                .collect();
            Err(Error::Mismatch(format!("paths differ from golden: {}", bad.join(", "))))
        }
    }
}
