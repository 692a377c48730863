//! Seeded network generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::Tensor;
use crate::netir::{Activation, LayerKind, LayerSpec, Network, NetworkBuilder, QuantParams, TensorShape};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_i8(rng: &mut impl Rng, n: usize, lo: i8, hi: i8) -> Vec<i8> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Uniform int8 HWC tensor.
pub fn random_input(shape: TensorShape, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::new(shape, random_i8(&mut r, shape.numel(), i8::MIN, i8::MAX)).expect("sized")
}

/// Requantization that keeps outputs of a `fan_in`-term dot product with
/// weights in `[-32, 31]` roughly inside the int8 range.
pub fn scaled_quant(rng: &mut impl Rng, fan_in: usize, activation: Activation) -> QuantParams {
    // accumulator spread is about 18 * sqrt(fan_in) times the input spread
    let shift = (0.5 * (fan_in.max(1) as f64).log2() + 5.0).round() as u32;
    QuantParams::new(rng.gen_range(1..=3), shift, activation)
}

/// Appends one layer with random parameters scaled for its fan-in.
pub fn push_random(b: &mut NetworkBuilder, rng: &mut impl Rng, spec: LayerSpec, activation: Activation) {
    let fan_in = match spec.kind {
        LayerKind::Conv3x3 => 9 * spec.c_in,
        LayerKind::Dw3x3 => 9,
        LayerKind::Pw | LayerKind::Linear => spec.c_in,
        LayerKind::AvgpoolGlobal => 1,
    };
    let quant = match spec.kind {
        LayerKind::AvgpoolGlobal => QuantParams::new(1, 0, activation),
        _ => scaled_quant(rng, fan_in, activation),
    };
    let weights = random_i8(rng, spec.kind.weight_count(spec.c_in, spec.c_out), -32, 31);
    let bias: Vec<i32> = (0..spec.kind.bias_bytes(spec.c_out) / 4)
        .map(|_| rng.gen_range(-512..=512))
        .collect();
    b.push(spec.quant(quant), &weights, &bias);
}

/// MobileNetV1 with width multiplier 0.25 on a 96x96 greyscale input and a
/// 4-value regression head: a stride-2 3x3 stem, 13 depthwise-separable
/// blocks, global average pool and a linear layer.
pub fn mobilenet_v1_025(seed: u64) -> Result<Network> {
    let mut r = rng(seed);
    let mut b =
        NetworkBuilder::new("mobilenet_v1_025", TensorShape::hwc(96, 96, 1)).weights_file("mobilenet_v1_025.bin");
    push_random(
        &mut b,
        &mut r,
        LayerSpec::new("conv0", LayerKind::Conv3x3, 1, 8).stride(2),
        Activation::Relu,
    );
    // (dw stride, pw output channels) at full width, divided by 4
    let blocks = [
        (1, 64),
        (2, 128),
        (1, 128),
        (2, 256),
        (1, 256),
        (2, 512),
        (1, 512),
        (1, 512),
        (1, 512),
        (1, 512),
        (1, 512),
        (2, 1024),
        (1, 1024),
    ];
    let mut c = 8;
    for (i, (stride, k)) in blocks.into_iter().enumerate() {
        let k = k / 4;
        push_random(
            &mut b,
            &mut r,
            LayerSpec::new(format!("dw{}", i + 1), LayerKind::Dw3x3, c, c).stride(stride),
            Activation::Relu,
        );
        push_random(
            &mut b,
            &mut r,
            LayerSpec::new(format!("pw{}", i + 1), LayerKind::Pw, c, k),
            Activation::Relu,
        );
        c = k;
    }
    push_random(
        &mut b,
        &mut r,
        LayerSpec::new("pool", LayerKind::AvgpoolGlobal, c, c),
        Activation::None,
    );
    push_random(
        &mut b,
        &mut r,
        LayerSpec::new("fc", LayerKind::Linear, c, 4),
        Activation::None,
    );
    b.build()
}

/// A single `pw(16->32) -> dw3x3` pair over a 32x32 input.
pub fn pw_dw_pair(seed: u64) -> Result<Network> {
    let mut r = rng(seed);
    let mut b = NetworkBuilder::new("pw_dw_pair", TensorShape::hwc(32, 32, 16)).weights_file("pw_dw_pair.bin");
    push_random(
        &mut b,
        &mut r,
        LayerSpec::new("pw", LayerKind::Pw, 16, 32),
        Activation::Relu,
    );
    push_random(
        &mut b,
        &mut r,
        LayerSpec::new("dw", LayerKind::Dw3x3, 32, 32),
        Activation::Relu,
    );
    b.build()
}

/// Depthwise-separable blocks in PW->DW order, the pattern the fused kernel targets.
pub fn pw_dw_stack(seed: u64) -> Result<Network> {
    let mut r = rng(seed);
    let mut b = NetworkBuilder::new("pw_dw_stack", TensorShape::hwc(48, 48, 4)).weights_file("pw_dw_stack.bin");
    let cfg = [(16, 1), (32, 2), (32, 1), (64, 2)];
    let mut c = 4;
    for (i, (k, s)) in cfg.into_iter().enumerate() {
        push_random(
            &mut b,
            &mut r,
            LayerSpec::new(format!("pw{i}"), LayerKind::Pw, c, k),
            Activation::Relu,
        );
        push_random(
            &mut b,
            &mut r,
            LayerSpec::new(format!("dw{i}"), LayerKind::Dw3x3, k, k).stride(s),
            Activation::Relu,
        );
        c = k;
    }
    b.build()
}

/// Every fixture shipped with the CLI, by name.
pub fn by_name(name: &str, seed: u64) -> Option<Result<Network>> {
    match name {
        "mobilenet_v1_025" => Some(mobilenet_v1_025(seed)),
        "pw_dw_pair" => Some(pw_dw_pair(seed)),
        "pw_dw_stack" => Some(pw_dw_stack(seed)),
        _ => None,
    }
}

pub const NAMES: [&str; 3] = ["mobilenet_v1_025", "pw_dw_pair", "pw_dw_stack"];
