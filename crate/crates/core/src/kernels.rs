//! Bit-exact int8 reference kernels.
//!
//! Every kernel accumulates int8 x int8 products in int32, adds the int32
//! bias, and requantizes once per output element. The window kernels
//! (`dw3x3`, `conv3x3`) and the fused kernel are written against a row
//! window of the full input so the executor can run them on L1 tiles; the
//! whole-tensor entry points are the same code with a window covering every
//! row.

use crate::error::{Error, Result};
use crate::netir::{Activation, Layout, QuantParams, TensorShape};
use crate::par::{self, Exec};

/// An activation tensor with an explicit layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<i8>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<i8>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "tensor data has {} elements, shape {}x{}x{} needs {}",
                data.len(),
                shape.h,
                shape.w,
                shape.c,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Tensor {
            shape,
            data: vec![0; shape.numel()],
        }
    }

    /// Builds a tensor by evaluating `f(y, x, c)` for every element.
    pub fn from_fn(shape: TensorShape, mut f: impl FnMut(usize, usize, usize) -> i8) -> Self {
        let mut t = Tensor::zeros(shape);
        for y in 0..shape.h {
            for x in 0..shape.w {
                for c in 0..shape.c {
                    let i = t.index(y, x, c);
                    t.data[i] = f(y, x, c);
                }
            }
        }
        t
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        let s = &self.shape;
        match s.layout {
            Layout::Hwc => (y * s.w + x) * s.c + c,
            Layout::Chw => (c * s.h + y) * s.w + x,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> i8 {
        self.data[self.index(y, x, c)]
    }
}

/// Work and memory counters reported by every kernel call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KernelStats {
    pub macs: u64,
    /// Size of the fused kernel's intermediate buffer, 0 for other kernels.
    pub intermediate_bytes: usize,
}

impl std::ops::AddAssign for KernelStats {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.intermediate_bytes = self.intermediate_bytes.max(rhs.intermediate_bytes);
    }
}

/// Fused-batch configuration: PW output channels produced per pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedConfig {
    pub fb: usize,
}

impl FusedConfig {
    pub const DEFAULT_FB: usize = 8;

    pub fn new(fb: usize) -> Self {
        FusedConfig { fb }
    }

    fn check(&self, k: usize) -> Result<()> {
        if self.fb < 1 || self.fb > k {
            return Err(Error::Config(format!("fb must be in [1, {k}], got {}", self.fb)));
        }
        Ok(())
    }
}

impl Default for FusedConfig {
    fn default() -> Self {
        FusedConfig { fb: Self::DEFAULT_FB }
    }
}

/// Maps an int32 accumulator to int8 with a multiplier and a rounding right shift.
#[inline]
pub fn requantize(acc: i32, q: QuantParams) -> i8 {
    let mut v = acc as i64 * q.mult as i64;
    if q.shift > 0 {
        v = (v + (1i64 << (q.shift - 1))) >> q.shift;
    }
    let lo = match q.activation {
        Activation::None => i8::MIN as i64,
        Activation::Relu => 0,
    };
    v.clamp(lo, i8::MAX as i64) as i8
}

/// Row window of a 3x3 operator: the buffer holds rows
/// `in_row0 .. in_row0 + in_rows` of an image of height `h_full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub h_full: usize,
    pub w: usize,
    pub in_row0: usize,
    pub in_rows: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn full(h: usize, w: usize, stride: usize, pad: usize) -> Self {
        Window {
            h_full: h,
            w,
            in_row0: 0,
            in_rows: h,
            stride,
            pad,
        }
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - 3) / self.stride + 1
    }

    pub fn out_h(&self) -> usize {
        (self.h_full + 2 * self.pad - 3) / self.stride + 1
    }

    /// Buffer row for full-image row `oy * stride + d - pad`, or `None` for padding.
    #[inline]
    fn row(&self, oy: usize, d: usize) -> Option<usize> {
        let iy = (oy * self.stride + d).checked_sub(self.pad)?;
        if iy >= self.h_full {
            return None;
        }
        let r = iy - self.in_row0;
        debug_assert!(r < self.in_rows, "row {iy} outside tile window");
        Some(r)
    }

    #[inline]
    fn col(&self, ox: usize, d: usize) -> Option<usize> {
        let ix = (ox * self.stride + d).checked_sub(self.pad)?;
        (ix < self.w).then_some(ix)
    }

    /// Full-image input rows needed for output rows `oy0 .. oy0 + n`.
    pub fn input_rows_for(h: usize, stride: usize, pad: usize, oy0: usize, n: usize) -> (usize, usize) {
        let lo = (oy0 * stride).saturating_sub(pad);
        let hi = ((oy0 + n - 1) * stride + 3 - pad).min(h);
        (lo, hi - lo)
    }

    fn check(&self, out_row0: usize, out_rows: usize) -> Result<()> {
        if self.w + 2 * self.pad < 3 || self.h_full + 2 * self.pad < 3 {
            return Err(Error::shape("3x3 window larger than padded input"));
        }
        if out_row0 + out_rows > self.out_h() {
            return Err(Error::shape("output rows exceed output height"));
        }
        if out_rows > 0 {
            let (lo, n) = Window::input_rows_for(self.h_full, self.stride, self.pad, out_row0, out_rows);
            if lo < self.in_row0 || lo + n > self.in_row0 + self.in_rows {
                return Err(Error::shape("tile window does not cover required input rows"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Row-window cores (used directly by the executor on L1 tiles)
// ---------------------------------------------------------------------------

/// Pointwise conv on `rows * w` HWC pixels, writing HWC `[pixels][k]`.
pub(crate) fn pw_core(
    exec: Exec,
    input: &[i8],
    c: usize,
    weights: &[i8],
    bias: &[i32],
    q: QuantParams,
    out: &mut [i8],
) -> u64 {
    let k = bias.len();
    let pixels = input.len() / c;
    par::for_each_chunk(exec, out, k, |p, o| {
        let px = &input[p * c..(p + 1) * c];
        for (kk, ov) in o.iter_mut().enumerate() {
            let wr = &weights[kk * c..(kk + 1) * c];
            let acc = px.iter().zip(wr).fold(bias[kk], |a, (&x, &w)| a + x as i32 * w as i32);
            *ov = requantize(acc, q);
        }
    });
    (pixels * c * k) as u64
}

/// Pointwise conv on HWC pixels writing channel-major `[k][pixels]`.
pub(crate) fn pw_core_chw(
    exec: Exec,
    input: &[i8],
    c: usize,
    weights: &[i8],
    bias: &[i32],
    q: QuantParams,
    out: &mut [i8],
) -> u64 {
    let pixels = input.len() / c;
    let k = bias.len();
    par::for_each_chunk(exec, &mut out[..k * pixels], pixels, |kk, o| {
        let wr = &weights[kk * c..(kk + 1) * c];
        for (p, ov) in o.iter_mut().enumerate() {
            let px = &input[p * c..(p + 1) * c];
            let acc = px.iter().zip(wr).fold(bias[kk], |a, (&x, &w)| a + x as i32 * w as i32);
            *ov = requantize(acc, q);
        }
    });
    (pixels * c * k) as u64
}

/// Depthwise 3x3 over a CHW window buffer `[c][in_rows][w]`, writing CHW
/// `[c][out_rows][ow]` for output rows `out_row0 ..`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dw_core(
    exec: Exec,
    input: &[i8],
    c: usize,
    win: &Window,
    weights: &[i8],
    bias: &[i32],
    q: QuantParams,
    out_row0: usize,
    out_rows: usize,
    out: &mut [i8],
) -> u64 {
    let ow = win.out_w();
    let plane_in = win.in_rows * win.w;
    par::for_each_chunk(exec, &mut out[..c * out_rows * ow], out_rows * ow, |ch, o| {
        let src = &input[ch * plane_in..(ch + 1) * plane_in];
        let wk = &weights[ch * 9..ch * 9 + 9];
        for r in 0..out_rows {
            let oy = out_row0 + r;
            for ox in 0..ow {
                let mut acc = bias[ch];
                for dy in 0..3 {
                    let Some(row) = win.row(oy, dy) else { continue };
                    for dx in 0..3 {
                        let Some(col) = win.col(ox, dx) else { continue };
                        acc += src[row * win.w + col] as i32 * wk[dy * 3 + dx] as i32;
                    }
                }
                o[r * ow + ox] = requantize(acc, q);
            }
        }
    });
    (c * out_rows * ow * 9) as u64
}

/// Standard 3x3 conv over an HWC window buffer `[in_rows][w][c]`, writing
/// HWC `[out_rows][ow][k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_core(
    exec: Exec,
    input: &[i8],
    c: usize,
    win: &Window,
    weights: &[i8],
    bias: &[i32],
    q: QuantParams,
    out_row0: usize,
    out_rows: usize,
    out: &mut [i8],
) -> u64 {
    let k = bias.len();
    let ow = win.out_w();
    par::for_each_chunk(exec, &mut out[..out_rows * ow * k], ow * k, |r, o| {
        let oy = out_row0 + r;
        for ox in 0..ow {
            for kk in 0..k {
                let wk = &weights[kk * c * 9..(kk + 1) * c * 9];
                let mut acc = bias[kk];
                for dy in 0..3 {
                    let Some(row) = win.row(oy, dy) else { continue };
                    for dx in 0..3 {
                        let Some(col) = win.col(ox, dx) else { continue };
                        let px = &input[(row * win.w + col) * c..][..c];
                        for (ci, &x) in px.iter().enumerate() {
                            acc += x as i32 * wk[ci * 9 + dy * 3 + dx] as i32;
                        }
                    }
                }
                o[ox * k + kk] = requantize(acc, q);
            }
        }
    });
    (out_rows * ow * k * c * 9) as u64
}

/// Parameters of the fused pointwise+depthwise pair.
#[derive(Debug, Clone, Copy)]
pub struct FusedParams<'a> {
    pub pw_weights: &'a [i8],
    pub pw_bias: &'a [i32],
    pub pw_quant: QuantParams,
    pub dw_weights: &'a [i8],
    pub dw_bias: &'a [i32],
    pub dw_quant: QuantParams,
}

/// Fused PW+DW over an HWC window buffer `[in_rows][w][c]`, writing CHW
/// `[k][out_rows][ow]`. `scratch` is the intermediate buffer and must hold
/// at least `in_rows * w * fb` bytes; only that prefix is used.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fused_core(
    exec: Exec,
    input: &[i8],
    c: usize,
    win: &Window,
    p: &FusedParams<'_>,
    fb: usize,
    out_row0: usize,
    out_rows: usize,
    out: &mut [i8],
    scratch: &mut [i8],
) -> KernelStats {
    let k = p.pw_bias.len();
    let ow = win.out_w();
    let plane = win.in_rows * win.w;
    let buf = &mut scratch[..plane * fb];
    let out_plane = out_rows * ow;
    let mut macs = 0;
    let mut b = 0;
    while b < k {
        let n = fb.min(k - b);
        macs += pw_core_chw(
            exec,
            input,
            c,
            &p.pw_weights[b * c..(b + n) * c],
            &p.pw_bias[b..b + n],
            p.pw_quant,
            buf,
        );
        macs += dw_core(
            exec,
            buf,
            n,
            win,
            &p.dw_weights[b * 9..(b + n) * 9],
            &p.dw_bias[b..b + n],
            p.dw_quant,
            out_row0,
            out_rows,
            &mut out[b * out_plane..(b + n) * out_plane],
        );
        b += n;
    }
    KernelStats {
        macs,
        intermediate_bytes: buf.len(),
    }
}

// ---------------------------------------------------------------------------
// Whole-tensor kernels
// ---------------------------------------------------------------------------

fn expect_layout(t: &Tensor, layout: Layout, what: &str) -> Result<()> {
    if t.shape.layout != layout {
        return Err(Error::shape(format!("{what} expects {layout:?} input")));
    }
    Ok(())
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!("{what}: expected {want} elements, got {got}")));
    }
    Ok(())
}

/// Pointwise conv: HWC `[h,w,C]` with weights `[K,C]` to HWC `[h,w,K]`.
pub fn pw_conv(input: &Tensor, weights: &[i8], bias: &[i32], q: QuantParams) -> Result<(Tensor, KernelStats)> {
    pw_conv_with(Exec::default(), input, weights, bias, q)
}

pub fn pw_conv_with(
    exec: Exec,
    input: &Tensor,
    weights: &[i8],
    bias: &[i32],
    q: QuantParams,
) -> Result<(Tensor, KernelStats)> {
    expect_layout(input, Layout::Hwc, "pw_conv")?;
    let s = input.shape;
    let k = bias.len();
    if k == 0 {
        return Err(Error::shape("pw_conv: no output channels"));
    }
    expect_len(weights.len(), k * s.c, "pw_conv weights")?;
    let mut out = Tensor::zeros(TensorShape::hwc(s.h, s.w, k));
    let macs = pw_core(exec, &input.data, s.c, weights, bias, q, &mut out.data);
    Ok((
        out,
        KernelStats {
            macs,
            ..Default::default()
        },
    ))
}

/// Depthwise 3x3: CHW `[C,h,w]` with weights `[C,3,3]` to CHW `[C,oh,ow]`.
pub fn dw_conv3x3(
    input: &Tensor,
    weights: &[i8],
    bias: &[i32],
    stride: usize,
    pad: usize,
    q: QuantParams,
) -> Result<(Tensor, KernelStats)> {
    dw_conv3x3_with(Exec::default(), input, weights, bias, stride, pad, q)
}

pub fn dw_conv3x3_with(
    exec: Exec,
    input: &Tensor,
    weights: &[i8],
    bias: &[i32],
    stride: usize,
    pad: usize,
    q: QuantParams,
) -> Result<(Tensor, KernelStats)> {
    expect_layout(input, Layout::Chw, "dw_conv3x3")?;
    check_stride_pad(stride, pad)?;
    let s = input.shape;
    expect_len(weights.len(), s.c * 9, "dw_conv3x3 weights")?;
    expect_len(bias.len(), s.c, "dw_conv3x3 bias")?;
    let win = Window::full(s.h, s.w, stride, pad);
    win.check(0, 0)?;
    let (oh, ow) = (win.out_h(), win.out_w());
    let mut out = Tensor::zeros(TensorShape::chw(s.c, oh, ow));
    let macs = dw_core(exec, &input.data, s.c, &win, weights, bias, q, 0, oh, &mut out.data);
    Ok((
        out,
        KernelStats {
            macs,
            ..Default::default()
        },
    ))
}

/// Standard 3x3 conv: HWC `[h,w,C]` with weights `[K,C,3,3]` to HWC `[oh,ow,K]`.
pub fn conv3x3(
    input: &Tensor,
    weights: &[i8],
    bias: &[i32],
    stride: usize,
    pad: usize,
    q: QuantParams,
) -> Result<(Tensor, KernelStats)> {
    conv3x3_with(Exec::default(), input, weights, bias, stride, pad, q)
}

pub fn conv3x3_with(
    exec: Exec,
    input: &Tensor,
    weights: &[i8],
    bias: &[i32],
    stride: usize,
    pad: usize,
    q: QuantParams,
) -> Result<(Tensor, KernelStats)> {
    expect_layout(input, Layout::Hwc, "conv3x3")?;
    check_stride_pad(stride, pad)?;
    let s = input.shape;
    let k = bias.len();
    if k == 0 {
        return Err(Error::shape("conv3x3: no output channels"));
    }
    expect_len(weights.len(), k * s.c * 9, "conv3x3 weights")?;
    let win = Window::full(s.h, s.w, stride, pad);
    win.check(0, 0)?;
    let (oh, ow) = (win.out_h(), win.out_w());
    let mut out = Tensor::zeros(TensorShape::hwc(oh, ow, k));
    let macs = conv_core(exec, &input.data, s.c, &win, weights, bias, q, 0, oh, &mut out.data);
    Ok((
        out,
        KernelStats {
            macs,
            ..Default::default()
        },
    ))
}

/// Fully connected layer on a 1x1xC HWC tensor.
pub fn linear(input: &Tensor, weights: &[i8], bias: &[i32], q: QuantParams) -> Result<(Tensor, KernelStats)> {
    let s = input.shape;
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape("linear expects a 1x1 input"));
    }
    pw_conv_with(
        Exec::Sequential,
        &Tensor {
            shape: s.with_layout(Layout::Hwc),
            data: input.data.clone(),
        },
        weights,
        bias,
        q,
    )
}

/// Global average pool of an HWC tensor to 1x1xC, rounding half up.
pub fn avgpool_global(input: &Tensor, q: QuantParams) -> Result<(Tensor, KernelStats)> {
    expect_layout(input, Layout::Hwc, "avgpool_global")?;
    let s = input.shape;
    let mut out = Tensor::zeros(TensorShape::hwc(1, 1, s.c));
    let macs = avgpool_core(&input.data, s.c, q, &mut out.data);
    Ok((
        out,
        KernelStats {
            macs,
            ..Default::default()
        },
    ))
}

/// Per-channel rounded mean over HWC pixels.
pub(crate) fn avgpool_core(input: &[i8], c: usize, q: QuantParams, out: &mut [i8]) -> u64 {
    let n = (input.len() / c) as i64;
    let mut sums = vec![0i64; c];
    for px in input.chunks_exact(c) {
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += v as i64;
        }
    }
    for (o, s) in out.iter_mut().zip(&sums) {
        let avg = (2 * s + n).div_euclid(2 * n);
        *o = requantize(avg as i32, q);
    }
    input.len() as u64
}

/// Permutes a tensor into `target` layout. Returns the tensor and the number
/// of bytes touched by the pass (0 when no conversion is needed).
pub fn layout_convert(input: &Tensor, target: Layout) -> (Tensor, usize) {
    if input.shape.layout == target {
        return (input.clone(), 0);
    }
    let s = input.shape;
    let mut out = Tensor::zeros(s.with_layout(target));
    hwc_chw_permute(&input.data, &mut out.data, s.h * s.w, s.c, target);
    (out, s.numel())
}

/// Raw permutation between `[pixels][c]` and `[c][pixels]`.
pub(crate) fn hwc_chw_permute(src: &[i8], dst: &mut [i8], pixels: usize, c: usize, target: Layout) {
    match target {
        Layout::Chw => {
            for p in 0..pixels {
                for ch in 0..c {
                    dst[ch * pixels + p] = src[p * c + ch];
                }
            }
        }
        Layout::Hwc => {
            for ch in 0..c {
                for p in 0..pixels {
                    dst[p * c + ch] = src[ch * pixels + p];
                }
            }
        }
    }
}

/// The fused pointwise+depthwise kernel on a whole HWC input, producing CHW output.
pub fn fused_pw_dw(
    input: &Tensor,
    params: &FusedParams<'_>,
    stride: usize,
    pad: usize,
    cfg: FusedConfig,
) -> Result<(Tensor, KernelStats)> {
    fused_pw_dw_with(Exec::default(), input, params, stride, pad, cfg)
}

pub fn fused_pw_dw_with(
    exec: Exec,
    input: &Tensor,
    params: &FusedParams<'_>,
    stride: usize,
    pad: usize,
    cfg: FusedConfig,
) -> Result<(Tensor, KernelStats)> {
    expect_layout(input, Layout::Hwc, "fused_pw_dw")?;
    check_stride_pad(stride, pad)?;
    let s = input.shape;
    let k = params.pw_bias.len();
    if k == 0 {
        return Err(Error::shape("fused_pw_dw: no output channels"));
    }
    cfg.check(k)?;
    expect_len(params.pw_weights.len(), k * s.c, "fused pw weights")?;
    expect_len(params.dw_weights.len(), k * 9, "fused dw weights")?;
    expect_len(params.dw_bias.len(), k, "fused dw bias")?;
    let mut win = Window::full(s.h, s.w, stride, pad);
    win.check(0, 0)?;
    let (oh, ow) = (win.out_h(), win.out_w());
    // trailing rows no output reads are never expanded
    let (_, rows) = Window::input_rows_for(s.h, stride, pad, 0, oh);
    win.in_rows = rows;
    let mut out = Tensor::zeros(TensorShape::chw(k, oh, ow));
    let mut scratch = vec![0i8; rows * s.w * cfg.fb];
    let used = &input.data[..rows * s.w * s.c];
    let stats = fused_core(
        exec,
        used,
        s.c,
        &win,
        params,
        cfg.fb,
        0,
        oh,
        &mut out.data,
        &mut scratch,
    );
    Ok((out, stats))
}

fn check_stride_pad(stride: usize, pad: usize) -> Result<()> {
    if !matches!(stride, 1 | 2) || !matches!(pad, 0 | 1) {
        return Err(Error::shape(format!("unsupported stride {stride} / pad {pad}")));
    }
    Ok(())
}
