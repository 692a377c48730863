//! Tile-loop simulation oracle shared by the planner and acceptance tests.
//!
//! The oracle walks the tiles in loop order, tracks which input tile and
//! weight block sit in L1, and counts bytes as it goes. It recomputes input
//! rows and buffer sizes from the layer definitions without the planner's
//! helpers.
#![allow(dead_code)]

use l1fuse::fixtures::{push_random, rng};
use l1fuse::memsim::{MemoryConfig, TrafficLedger};
use l1fuse::netir::{
    Activation, BlobRef, LayerDesc, LayerKind, LayerSpec, Network, NetworkBuilder, QuantParams, TensorShape,
};
use l1fuse::tiler::{LoopOrder, NodeGeom};
use rand::Rng;

pub fn layer(id: &str, kind: LayerKind, c_in: usize, c_out: usize, stride: usize, pad: usize) -> LayerDesc {
    LayerDesc {
        id: id.into(),
        kind,
        c_in,
        c_out,
        stride,
        pad,
        quant: QuantParams::IDENTITY,
        weights_ref: BlobRef { offset: 0, length: 0 },
        bias_ref: BlobRef { offset: 0, length: 0 },
    }
}

/// Node description used by the oracle.
#[derive(Clone, Debug)]
pub struct Node {
    pub kind: &'static str, // "pw" | "dw" | "conv" | "fused"
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Node {
    pub fn out_hw(&self) -> (usize, usize) {
        match self.kind {
            "pw" => (self.h, self.w),
            _ => (
                (self.h + 2 * self.pad - 3) / self.stride + 1,
                (self.w + 2 * self.pad - 3) / self.stride + 1,
            ),
        }
    }

    /// Clipped input rows used by output rows `[y0, y0 + n)`.
    pub fn rows(&self, y0: usize, n: usize) -> usize {
        if self.kind == "pw" {
            return n;
        }
        let used: Vec<usize> = (y0..y0 + n)
            .flat_map(|y| (0..3).map(move |d| (y * self.stride + d) as isize - self.pad as isize))
            .filter(|&r| r >= 0 && (r as usize) < self.h)
            .map(|r| r as usize)
            .collect();
        used.iter().max().unwrap() - used.iter().min().unwrap() + 1
    }

    pub fn params_per_k(&self) -> usize {
        match self.kind {
            "pw" => self.c + 4,
            "dw" => 9 + 4,
            "conv" => 9 * self.c + 4,
            _ => self.c + 9 + 8,
        }
    }

    pub fn geom(&self) -> NodeGeom {
        let s = TensorShape::hwc(self.h, self.w, self.c);
        match self.kind {
            "pw" => NodeGeom::single(&layer("l", LayerKind::Pw, self.c, self.k, 1, 0), &s),
            "dw" => NodeGeom::single(&layer("l", LayerKind::Dw3x3, self.c, self.c, self.stride, self.pad), &s),
            "conv" => NodeGeom::single(
                &layer("l", LayerKind::Conv3x3, self.c, self.k, self.stride, self.pad),
                &s,
            ),
            _ => NodeGeom::fused(
                &layer("p", LayerKind::Pw, self.c, self.k, 1, 0),
                &layer("d", LayerKind::Dw3x3, self.k, self.k, self.stride, self.pad),
                &s,
            ),
        }
        .unwrap()
    }
}

/// `(footprint, traffic)` of one tiling, or `None` if it does not fit.
pub fn simulate(
    n: &Node,
    r: usize,
    kt: usize,
    order: LoopOrder,
    pin: bool,
    fb: usize,
    cfg: &MemoryConfig,
) -> Option<(u64, TrafficLedger)> {
    let (oh, ow) = n.out_hw();
    let k = if n.kind == "dw" { n.c } else { n.k };
    let per_channel_input = n.kind == "dw";
    let total_params = k * n.params_per_k();
    if pin && total_params * 20 >= cfg.l1_bytes as usize {
        return None;
    }
    let sp: Vec<(usize, usize)> = (0..oh).step_by(r).map(|y| (y, r.min(oh - y))).collect();
    let kb: Vec<(usize, usize)> = (0..k).step_by(kt).map(|b| (b, kt.min(k - b))).collect();
    let max_rows = sp.iter().map(|&(y, m)| n.rows(y, m)).max().unwrap();
    let in_ch = if per_channel_input { kt } else { n.c };
    let in_buf = max_rows * n.w * in_ch;
    let out_buf = r * ow * kt;
    let w_buf = if pin { total_params } else { kt * n.params_per_k() };
    let staging = if n.kind == "dw" { in_buf } else { 0 };
    let inter = if n.kind == "fused" {
        max_rows * n.w * fb.min(kt)
    } else {
        0
    };
    let io = (in_buf + out_buf) * if cfg.double_buffer { 2 } else { 1 };
    let fp = (io + w_buf + staging + inter) as u64;
    if fp > cfg.l1_bytes {
        return None;
    }

    let mut led = TrafficLedger::default();
    let visits: Vec<(usize, usize)> = match order {
        LoopOrder::SpatialOuter => (0..sp.len()).flat_map(|i| (0..kb.len()).map(move |j| (i, j))).collect(),
        LoopOrder::KOuter => (0..kb.len()).flat_map(|j| (0..sp.len()).map(move |i| (i, j))).collect(),
    };
    let mut in_res = None;
    let mut w_res = None;
    if pin {
        led.load_bytes += total_params as u64;
    }
    for (i, j) in visits {
        let key = if per_channel_input { (i, j) } else { (i, usize::MAX) };
        if in_res != Some(key) {
            let ch = if per_channel_input { kb[j].1 } else { n.c };
            let b = (n.rows(sp[i].0, sp[i].1) * n.w * ch) as u64;
            led.load_bytes += b;
            if n.kind == "dw" {
                led.reorder_bytes += b;
            }
            in_res = Some(key);
        }
        if !pin && w_res != Some(j) {
            led.load_bytes += (kb[j].1 * n.params_per_k()) as u64;
            w_res = Some(j);
        }
        led.store_bytes += (sp[i].1 * ow * kb[j].1) as u64;
    }
    led.peak_l1_bytes = fp;
    Some((fp, led))
}

pub fn brute_min(n: &Node, cfg: &MemoryConfig, fb: usize) -> Option<u64> {
    let (oh, _) = n.out_hw();
    let k = if n.kind == "dw" { n.c } else { n.k };
    let mut best: Option<u64> = None;
    for r in 1..=oh {
        for kt in 1..=k {
            for order in [LoopOrder::KOuter, LoopOrder::SpatialOuter] {
                for pin in [false, true] {
                    if let Some((_, l)) = simulate(n, r, kt, order, pin, fb, cfg) {
                        let c = l.load_bytes + l.store_bytes + l.reorder_bytes;
                        best = Some(best.map_or(c, |b: u64| b.min(c)));
                    }
                }
            }
        }
    }
    best
}

/// Random linear chain of pw/dw/conv layers, sometimes with a pooled head.
pub fn random_chain(seed: u64) -> Network {
    let mut r = rng(seed);
    let h = r.gen_range(5..=14);
    let w = r.gen_range(3..=12);
    let mut c = r.gen_range(1..=8);
    let mut b = NetworkBuilder::new(format!("rand{seed}"), TensorShape::hwc(h, w, c));
    let (mut hh, mut ww) = (h, w);
    for i in 0..r.gen_range(2..=6) {
        let kind = [LayerKind::Pw, LayerKind::Dw3x3, LayerKind::Conv3x3][r.gen_range(0..3)];
        let k = if kind == LayerKind::Dw3x3 {
            c
        } else {
            r.gen_range(1..=12)
        };
        let mut spec = LayerSpec::new(format!("l{i}"), kind, c, k);
        if kind != LayerKind::Pw {
            let m = hh.min(ww);
            let stride = if m >= 6 { r.gen_range(1..=2) } else { 1 };
            spec = spec
                .stride(stride)
                .pad(r.gen_range(0..=1).max(if m < 5 { 1 } else { 0 }));
            hh = (hh + 2 * spec.pad - 3) / spec.stride + 1;
            ww = (ww + 2 * spec.pad - 3) / spec.stride + 1;
        }
        push_random(&mut b, &mut r, spec, Activation::Relu);
        c = k;
    }
    if r.gen_bool(0.5) {
        push_random(
            &mut b,
            &mut r,
            LayerSpec::new("pool", LayerKind::AvgpoolGlobal, c, c),
            Activation::None,
        );
        push_random(
            &mut b,
            &mut r,
            LayerSpec::new("fc", LayerKind::Linear, c, 3),
            Activation::None,
        );
    }
    b.build().unwrap()
}
