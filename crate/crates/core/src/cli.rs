//! Command-line front end: `plan`, `run`, `compare`, `verify`, plus fixture
//! and input generators.
//!
//! Exit codes: 0 ok, 1 usage or schema error, 2 infeasible plan,
//! 3 verification mismatch.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixtures;
use crate::kernels::FusedConfig;
use crate::memsim::{MemoryConfig, TrafficLedger, DEFAULT_L1_BYTES, DEFAULT_L2_BYTES};
use crate::netir::Network;
use crate::par::Exec;
use crate::runtime::{self, fusion_pass, NodeOp, PlanFile};
use crate::tiler::PlanOptions;
use crate::verify::{self, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "l1fuse",
    version,
    about = "Tiled int8 CNN execution over a simulated L1/L2 hierarchy"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct MemFlags {
    /// L1 scratchpad size in bytes.
    #[arg(long, default_value_t = DEFAULT_L1_BYTES)]
    pub l1: u64,
    /// L2 memory size in bytes.
    #[arg(long, default_value_t = DEFAULT_L2_BYTES)]
    pub l2: u64,
    /// Fuse pw+dw3x3 pairs (default).
    #[arg(long, overrides_with = "no_fuse")]
    pub fuse: bool,
    /// Run every layer as its own node.
    #[arg(long = "no-fuse", overrides_with = "fuse")]
    pub no_fuse: bool,
    /// Fused batch: pw output channels per fused pass.
    #[arg(long, default_value_t = FusedConfig::DEFAULT_FB)]
    pub fb: usize,
    /// Double the input/output tile buffers.
    #[arg(long = "double-buffer")]
    pub double_buffer: bool,
}

impl MemFlags {
    pub fn memory(&self) -> Result<MemoryConfig> {
        let cfg = MemoryConfig {
            l1_bytes: self.l1,
            l2_bytes: self.l2,
            double_buffer: self.double_buffer,
        };
        cfg.validate()?;
        if self.fb == 0 {
            return Err(Error::Config("--fb must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn fuse(&self) -> bool {
        !self.no_fuse
    }

    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions::with_fb(self.fb)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan every node and emit the plan JSON.
    Plan {
        manifest: PathBuf,
        #[command(flatten)]
        mem: MemFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a network on a raw int8 HWC input file.
    Run {
        manifest: PathBuf,
        input: PathBuf,
        #[command(flatten)]
        mem: MemFlags,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fused vs unfused traffic table.
    Compare {
        manifest: PathBuf,
        #[command(flatten)]
        mem: MemFlags,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check golden, fused and tiled paths for bit-identical outputs.
    Verify {
        manifest: PathBuf,
        #[command(flatten)]
        mem: MemFlags,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a generated fixture network (manifest + blob).
    Fixture {
        /// One of: mobilenet_v1_025, pw_dw_pair, pw_dw_stack.
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded random input file for a manifest.
    Input {
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::PlanInfeasible { .. } => EXIT_INFEASIBLE,
        Error::Mismatch(_) => EXIT_MISMATCH,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Plan { manifest, mem, out } => {
            let plan = cmd_plan(&Network::load(&manifest)?, &mem)?;
            write_json(&plan, out.as_deref())
        }
        Command::Run {
            manifest,
            input,
            mem,
            plan,
            out,
            report,
        } => {
            let net = Network::load(&manifest)?;
            let plan = plan.as_deref().map(PlanFile::load).transpose()?;
            let x = runtime::read_activation(&input, net.input_shape())?;
            let (y, rep) = cmd_run(&net, &x, plan.as_ref(), &mem)?;
            runtime::write_activation(&out, &y)?;
            write_json(&rep, report.as_deref())
        }
        Command::Compare {
            manifest,
            mem,
            seed,
            report,
        } => {
            let rep = cmd_compare(&Network::load(&manifest)?, &mem, seed)?;
            print!("{}", rep.table());
            if let Some(p) = report {
                write_json(&rep, Some(&p))?;
            }
            Ok(())
        }
        Command::Verify {
            manifest,
            mem,
            seed,
            report,
        } => {
            let rep = cmd_verify(&Network::load(&manifest)?, &mem, seed)?;
            for p in &rep.paths {
                println!("{:<24} {}", p.path, if p.matches { "ok" } else { "MISMATCH" });
            }
            if let Some(p) = report {
                write_json(&rep, Some(&p))?;
            }
            rep.into_result().map(|_| ())
        }
        Command::Fixture { name, seed, out } => {
            let net = fixtures::by_name(&name, seed).ok_or_else(|| {
                Error::Schema(format!(
                    "unknown fixture `{name}`; known: {}",
                    fixtures::NAMES.join(", ")
                ))
            })??;
            let mut manifest = net.manifest.clone();
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("net");
            manifest.weights_file = format!("{stem}.bin");
            Network::new(manifest, net.blob().to_vec())?.save(&out)
        }
        Command::Input { manifest, seed, out } => {
            let net = Network::load(&manifest)?;
            runtime::write_activation(&out, &fixtures::random_input(net.input_shape(), seed))
        }
    }
}

pub fn cmd_plan(net: &Network, mem: &MemFlags) -> Result<PlanFile> {
    let cfg = mem.memory()?;
    let mut graph = fusion_pass(net, mem.fuse())?;
    graph.plan_all(&cfg, &mem.plan_options())?;
    Ok(graph.to_plan_file(net, mem.fuse(), &cfg))
}

pub fn cmd_run(
    net: &Network,
    input: &crate::kernels::Tensor,
    plan: Option<&PlanFile>,
    mem: &MemFlags,
) -> Result<(crate::kernels::Tensor, runtime::TrafficReport)> {
    let cfg = mem.memory()?;
    let fuse = plan.map_or(mem.fuse(), |p| p.fuse);
    let mut graph = fusion_pass(net, fuse)?;
    match plan {
        Some(p) => graph.apply_plans(&p.nodes, &cfg)?,
        None => graph.plan_all(&cfg, &mem.plan_options())?,
    }
    runtime::execute(net, &graph, input, &cfg, Exec::default())
}

/// Load/store/reorder byte triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bytes {
    pub load: u64,
    pub store: u64,
    pub reorder: u64,
    pub total: u64,
}

impl From<&TrafficLedger> for Bytes {
    fn from(l: &TrafficLedger) -> Self {
        Bytes {
            load: l.load_bytes,
            store: l.store_bytes,
            reorder: l.reorder_bytes,
            total: l.cost(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Delta {
    pub load_pct: f64,
    pub store_pct: f64,
    pub reorder_pct: f64,
    pub total_pct: f64,
}

fn pct(fused: u64, unfused: u64) -> f64 {
    if unfused == 0 {
        0.0
    } else {
        (fused as f64 - unfused as f64) / unfused as f64 * 100.0
    }
}

impl Delta {
    fn of(fused: &Bytes, unfused: &Bytes) -> Self {
        Delta {
            load_pct: pct(fused.load, unfused.load),
            store_pct: pct(fused.store, unfused.store),
            reorder_pct: pct(fused.reorder, unfused.reorder),
            total_pct: pct(fused.total, unfused.total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub target: String,
    pub fused_node: bool,
    pub fused: Bytes,
    pub unfused: Bytes,
    pub delta: Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub network: String,
    pub memory: MemoryConfig,
    pub fb: usize,
    pub rows: Vec<CompareRow>,
    pub total_fused: Bytes,
    pub total_unfused: Bytes,
    pub total_delta: Delta,
}

impl CompareReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}",
            "node", "load", "store", "reorder", "load*", "store*", "reorder*", "delta%"
        );
        let mut line = |name: &str, f: &Bytes, u: &Bytes, d: &Delta| {
            let _ = writeln!(
                s,
                "{:<18} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9.2}",
                name, f.load, f.store, f.reorder, u.load, u.store, u.reorder, d.total_pct
            );
        };
        for r in &self.rows {
            line(&r.target, &r.fused, &r.unfused, &r.delta);
        }
        line("TOTAL", &self.total_fused, &self.total_unfused, &self.total_delta);
        s.push_str("(columns without * are fused; * are unfused)\n");
        s
    }
}

pub fn cmd_compare(net: &Network, mem: &MemFlags, seed: u64) -> Result<CompareReport> {
    let cfg = mem.memory()?;
    let opts = mem.plan_options();
    let input = fixtures::random_input(net.input_shape(), seed);
    let (_, fused_rep, fused_graph) = runtime::run_network(net, &input, true, &cfg, &opts, Exec::default())?;
    let (_, unfused_rep, _) = runtime::run_network(net, &input, false, &cfg, &opts, Exec::default())?;
    // the unfused graph has one node per layer, in layer order
    let rows: Vec<CompareRow> = fused_graph
        .nodes
        .iter()
        .zip(&fused_rep.nodes)
        .map(|(node, frep)| {
            let mut u = TrafficLedger::default();
            for l in node.op.first_layer()..=node.op.last_layer() {
                u.merge(&unfused_rep.nodes[l].ledger);
            }
            let fused = Bytes::from(&frep.ledger);
            let unfused = Bytes::from(&u);
            CompareRow {
                target: node.geom.target.to_string(),
                fused_node: matches!(node.op, NodeOp::Fused { .. }),
                delta: Delta::of(&fused, &unfused),
                fused,
                unfused,
            }
        })
        .collect();
    let total_fused = Bytes::from(&fused_rep.totals);
    let total_unfused = Bytes::from(&unfused_rep.totals);
    Ok(CompareReport {
        network: net.manifest.name.clone(),
        memory: cfg,
        fb: mem.fb,
        rows,
        total_delta: Delta::of(&total_fused, &total_unfused),
        total_fused,
        total_unfused,
    })
}

pub fn cmd_verify(net: &Network, mem: &MemFlags, seed: u64) -> Result<verify::VerifyReport> {
    let cfg = mem.memory()?;
    let mut fb_sweep = vec![1, 3, 8];
    if !fb_sweep.contains(&mem.fb) {
        fb_sweep.push(mem.fb);
    }
    verify::verify(
        net,
        &VerifyOptions {
            cfg,
            fb_sweep,
            seed,
            exec: Exec::default(),
        },
    )
}
