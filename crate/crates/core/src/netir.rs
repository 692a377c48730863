//! Network intermediate representation: a JSON manifest describing a linear
//! chain of quantized layers plus a raw little-endian weight blob.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "HWC")]
    Hwc,
    #[serde(rename = "CHW")]
    Chw,
}

/// Activation tensor shape. `h` is the row count, `w` the column count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub layout: Layout,
}

impl TensorShape {
    pub fn hwc(h: usize, w: usize, c: usize) -> Self {
        TensorShape {
            h,
            w,
            c,
            layout: Layout::Hwc,
        }
    }

    pub fn chw(c: usize, h: usize, w: usize) -> Self {
        TensorShape {
            h,
            w,
            c,
            layout: Layout::Chw,
        }
    }

    pub fn numel(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn with_layout(self, layout: Layout) -> Self {
        TensorShape { layout, ..self }
    }

    pub fn same_dims(&self, other: &TensorShape) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

/// Requantization parameters: `out = clamp((acc * mult) >> shift)` with
/// round-half-up, followed by the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantParams {
    pub mult: i32,
    pub shift: u32,
    pub activation: Activation,
}

impl QuantParams {
    pub const IDENTITY: QuantParams = QuantParams {
        mult: 1,
        shift: 0,
        activation: Activation::None,
    };

    pub fn new(mult: i32, shift: u32, activation: Activation) -> Self {
        QuantParams {
            mult,
            shift,
            activation,
        }
    }

    fn validate(&self, id: &str) -> Result<()> {
        if self.mult < 1 {
            return Err(Error::Schema(format!("layer `{id}`: quant.mult must be >= 1")));
        }
        if self.shift > 31 {
            return Err(Error::Schema(format!("layer `{id}`: quant.shift must be in [0, 31]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "conv3x3")]
    Conv3x3,
    #[serde(rename = "dw3x3")]
    Dw3x3,
    #[serde(rename = "pw")]
    Pw,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "avgpool_global")]
    AvgpoolGlobal,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Dw3x3 => "dw3x3",
            LayerKind::Pw => "pw",
            LayerKind::Linear => "linear",
            LayerKind::AvgpoolGlobal => "avgpool_global",
        }
    }

    /// Number of int8 weights for the given channel counts.
    pub fn weight_count(self, c_in: usize, c_out: usize) -> usize {
        match self {
            LayerKind::Conv3x3 => c_out * c_in * 9,
            LayerKind::Dw3x3 => c_in * 9,
            LayerKind::Pw | LayerKind::Linear => c_out * c_in,
            LayerKind::AvgpoolGlobal => 0,
        }
    }

    /// Bytes of int32 bias for `c_out` output channels.
    pub fn bias_bytes(self, c_out: usize) -> usize {
        match self {
            LayerKind::AvgpoolGlobal => 0,
            _ => 4 * c_out,
        }
    }

    pub fn has_spatial_window(self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Dw3x3)
    }
}

/// A byte range inside the weight blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub offset: usize,
    pub length: usize,
}

impl BlobRef {
    pub fn end(&self) -> usize {
        self.offset + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDesc {
    pub id: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub quant: QuantParams,
    pub weights_ref: BlobRef,
    pub bias_ref: BlobRef,
}

impl LayerDesc {
    /// Output shape for an HWC input, or a shape error.
    pub fn output_shape(&self, input: &TensorShape) -> Result<TensorShape> {
        if input.c != self.c_in {
            return Err(Error::shape(format!(
                "layer `{}` expects {} input channels, got {}",
                self.id, self.c_in, input.c
            )));
        }
        let (h, w) = match self.kind {
            LayerKind::Conv3x3 | LayerKind::Dw3x3 => (
                window_out(input.h, self.stride, self.pad),
                window_out(input.w, self.stride, self.pad),
            ),
            LayerKind::Pw => (Some(input.h), Some(input.w)),
            LayerKind::AvgpoolGlobal => (Some(1), Some(1)),
            LayerKind::Linear => {
                if input.h != 1 || input.w != 1 {
                    return Err(Error::shape(format!(
                        "linear layer `{}` needs a 1x1 input, got {}x{}",
                        self.id, input.h, input.w
                    )));
                }
                (Some(1), Some(1))
            }
        };
        match (h, w) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => Ok(TensorShape::hwc(h, w, self.c_out)),
            _ => Err(Error::shape(format!(
                "layer `{}` output vanishes for input {}x{}",
                self.id, input.h, input.w
            ))),
        }
    }

    /// Multiply-accumulate count of the whole layer on `input`.
    pub fn macs(&self, input: &TensorShape, output: &TensorShape) -> u64 {
        let (ih, iw, c) = (input.h as u64, input.w as u64, input.c as u64);
        let (oh, ow, k) = (output.h as u64, output.w as u64, output.c as u64);
        match self.kind {
            LayerKind::Pw => ih * iw * c * k,
            LayerKind::Dw3x3 => oh * ow * k * 9,
            LayerKind::Conv3x3 => oh * ow * k * c * 9,
            LayerKind::Linear => k * c,
            LayerKind::AvgpoolGlobal => ih * iw * c,
        }
    }

    pub fn weight_bytes(&self) -> usize {
        self.kind.weight_count(self.c_in, self.c_out)
    }

    pub fn bias_bytes(&self) -> usize {
        self.kind.bias_bytes(self.c_out)
    }

    fn validate_local(&self) -> Result<()> {
        let id = &self.id;
        if id.is_empty() {
            return Err(Error::Schema("layer id must be non-empty".into()));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Schema(format!("layer `{id}`: channel counts must be >= 1")));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Schema(format!("layer `{id}`: stride must be 1 or 2")));
        }
        if !matches!(self.pad, 0 | 1) {
            return Err(Error::Schema(format!("layer `{id}`: pad must be 0 or 1")));
        }
        self.quant.validate(id)?;
        match self.kind {
            LayerKind::Dw3x3 | LayerKind::AvgpoolGlobal if self.c_in != self.c_out => Err(Error::shape(format!(
                "layer `{id}`: {} requires c_in == c_out (got {} and {})",
                self.kind.name(),
                self.c_in,
                self.c_out
            ))),
            LayerKind::Pw | LayerKind::Linear | LayerKind::AvgpoolGlobal if self.stride != 1 || self.pad != 0 => {
                Err(Error::shape(format!(
                    "layer `{id}`: {} requires stride 1 and pad 0",
                    self.kind.name()
                )))
            }
            _ => Ok(()),
        }
    }
}

fn window_out(n: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= 3).then(|| (padded - 3) / stride + 1)
}

/// The JSON manifest document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkManifest {
    pub name: String,
    pub input: TensorShape,
    pub layers: Vec<LayerDesc>,
    pub weights_file: String,
}

impl NetworkManifest {
    /// Canonical text form: pretty JSON with a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn layer(&self, id: &str) -> Option<&LayerDesc> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }
}

/// Per-output-shape propagation along the chain. Entry `i` is the output of layer `i`.
pub fn propagate_shapes(net: &NetworkManifest) -> Result<Vec<TensorShape>> {
    let mut cur = net.input.with_layout(Layout::Hwc);
    let mut out = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        cur = layer.output_shape(&cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Decoded parameters of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerParams {
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
}

/// A validated manifest together with its weight blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    pub manifest: NetworkManifest,
    blob: Vec<u8>,
    params: Vec<LayerParams>,
    shapes: Vec<TensorShape>,
}

impl Network {
    /// Validates `manifest` against `blob` and decodes every layer's parameters.
    pub fn new(manifest: NetworkManifest, blob: Vec<u8>) -> Result<Self> {
        validate_schema(&manifest)?;
        let shapes = propagate_shapes(&manifest)?;
        validate_blob(&manifest, &blob)?;
        let params = manifest
            .layers
            .iter()
            .map(|l| LayerParams {
                weights: blob[l.weights_ref.offset..l.weights_ref.end()]
                    .iter()
                    .map(|&b| b as i8)
                    .collect(),
                bias: blob[l.bias_ref.offset..l.bias_ref.end()]
                    .chunks_exact(4)
                    .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            })
            .collect();
        Ok(Network {
            manifest,
            blob,
            params,
            shapes,
        })
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    pub fn params(&self, layer: usize) -> &LayerParams {
        &self.params[layer]
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.manifest.layers
    }

    pub fn input_shape(&self) -> TensorShape {
        self.manifest.input.with_layout(Layout::Hwc)
    }

    /// Output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> TensorShape {
        self.shapes[i]
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> TensorShape {
        if i == 0 {
            self.input_shape()
        } else {
            self.shapes[i - 1]
        }
    }

    pub fn final_shape(&self) -> TensorShape {
        *self.shapes.last().expect("validated manifest has layers")
    }

    pub fn total_macs(&self) -> u64 {
        self.manifest
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.macs(&self.layer_input_shape(i), &self.output_shape(i)))
            .sum()
    }

    /// Parameter count as stored in the blob (weights plus bias entries).
    pub fn parameter_count(&self) -> usize {
        self.manifest
            .layers
            .iter()
            .map(|l| l.weight_bytes() + l.bias_bytes() / 4)
            .sum()
    }

    /// Returns a copy of this network with a different blob, re-validated.
    pub fn with_blob(&self, blob: Vec<u8>) -> Result<Self> {
        Network::new(self.manifest.clone(), blob)
    }

    /// Reads a manifest and the weight file it references (relative to the manifest).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path)?;
        let manifest = parse_document(&text)?;
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let blob = fs::read(dir.join(&manifest.weights_file))?;
        Network::new(manifest, blob)
    }

    /// Writes the canonical manifest to `manifest_path` and the blob next to it.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        fs::write(manifest_path, self.manifest.to_canonical_json())?;
        fs::write(dir.join(&self.manifest.weights_file), &self.blob)?;
        Ok(())
    }
}

/// Parses manifest text and validates it against `blob`.
pub fn parse_manifest(text: &str, blob: Vec<u8>) -> Result<Network> {
    Network::new(parse_document(text)?, blob)
}

fn parse_document(text: &str) -> Result<NetworkManifest> {
    serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
}

fn validate_schema(net: &NetworkManifest) -> Result<()> {
    let inp = &net.input;
    if inp.h == 0 || inp.w == 0 || inp.c == 0 {
        return Err(Error::Schema("input dimensions must be >= 1".into()));
    }
    if inp.layout != Layout::Hwc {
        return Err(Error::Schema("network input must use the HWC layout".into()));
    }
    if net.layers.is_empty() {
        return Err(Error::Schema("manifest has no layers".into()));
    }
    let mut seen = HashSet::new();
    for l in &net.layers {
        if !seen.insert(l.id.as_str()) {
            return Err(Error::Schema(format!("duplicate layer id `{}`", l.id)));
        }
        l.validate_local()?;
    }
    Ok(())
}

fn validate_blob(net: &NetworkManifest, blob: &[u8]) -> Result<()> {
    let mut extents = Vec::with_capacity(2 * net.layers.len());
    for l in &net.layers {
        let expect = [
            ("weights", l.weights_ref, l.weight_bytes()),
            ("bias", l.bias_ref, l.bias_bytes()),
        ];
        for (what, r, len) in expect {
            if r.length != len {
                return Err(Error::Blob(format!(
                    "layer `{}`: {what} length {} does not match expected {len}",
                    l.id, r.length
                )));
            }
            if r.end() > blob.len() {
                return Err(Error::Blob(format!(
                    "layer `{}`: {what} range {}..{} exceeds blob of {} bytes",
                    l.id,
                    r.offset,
                    r.end(),
                    blob.len()
                )));
            }
            if r.length > 0 {
                extents.push((r.offset, r.end(), l.id.as_str()));
            }
        }
    }
    extents.sort_unstable();
    for pair in extents.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Blob(format!(
                "ranges of `{}` and `{}` overlap",
                pair[0].2, pair[1].2
            )));
        }
    }
    let total: usize = extents.iter().map(|(s, e, _)| e - s).sum();
    if total != blob.len() {
        return Err(Error::Blob(format!(
            "blob has {} bytes but layers reference {total}",
            blob.len()
        )));
    }
    Ok(())
}

/// Incrementally builds a [`Network`], laying weights and biases out back to back.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    name: String,
    input: TensorShape,
    layers: Vec<LayerDesc>,
    blob: Vec<u8>,
    weights_file: String,
}

/// Layer specification for [`NetworkBuilder::push`].
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub quant: QuantParams,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, c_in: usize, c_out: usize) -> Self {
        let (stride, pad) = match kind {
            LayerKind::Conv3x3 | LayerKind::Dw3x3 => (1, 1),
            _ => (1, 0),
        };
        LayerSpec {
            id: id.into(),
            kind,
            c_in,
            c_out,
            stride,
            pad,
            quant: QuantParams::IDENTITY,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn quant(mut self, quant: QuantParams) -> Self {
        self.quant = quant;
        self
    }
}

impl NetworkBuilder {
    pub fn new(name: impl Into<String>, input: TensorShape) -> Self {
        let name = name.into();
        NetworkBuilder {
            weights_file: format!("{name}.bin"),
            name,
            input,
            layers: Vec::new(),
            blob: Vec::new(),
        }
    }

    pub fn weights_file(mut self, file: impl Into<String>) -> Self {
        self.weights_file = file.into();
        self
    }

    /// Appends a layer. Weight and bias lengths are checked by [`Self::build`].
    pub fn push(&mut self, spec: LayerSpec, weights: &[i8], bias: &[i32]) -> &mut Self {
        let weights_ref = BlobRef {
            offset: self.blob.len(),
            length: weights.len(),
        };
        self.blob.extend(weights.iter().map(|&w| w as u8));
        let bias_ref = BlobRef {
            offset: self.blob.len(),
            length: bias.len() * 4,
        };
        for b in bias {
            self.blob.extend_from_slice(&b.to_le_bytes());
        }
        self.layers.push(LayerDesc {
            id: spec.id,
            kind: spec.kind,
            c_in: spec.c_in,
            c_out: spec.c_out,
            stride: spec.stride,
            pad: spec.pad,
            quant: spec.quant,
            weights_ref,
            bias_ref,
        });
        self
    }

    pub fn build(self) -> Result<Network> {
        let manifest = NetworkManifest {
            name: self.name,
            input: self.input,
            layers: self.layers,
            weights_file: self.weights_file,
        };
        Network::new(manifest, self.blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pw_text() -> String {
        r#"{
  "name": "tiny",
  "input": { "h": 1, "w": 1, "c": 1, "layout": "HWC" },
  "layers": [
    {
      "id": "pw0", "kind": "pw", "c_in": 1, "c_out": 1, "stride": 1, "pad": 0,
      "quant": { "mult": 1, "shift": 0, "activation": "none" },
      "weights_ref": { "offset": 0, "length": 1 },
      "bias_ref": { "offset": 1, "length": 4 }
    }
  ],
  "weights_file": "tiny.bin"
}"#
        .to_string()
    }

    #[test]
    fn minimal_pw_manifest_parses() {
        let net = parse_manifest(&single_pw_text(), vec![3, 0, 0, 0, 0]).unwrap();
        assert_eq!(net.layers().len(), 1);
        assert_eq!(net.params(0).weights, vec![3]);
        assert_eq!(net.params(0).bias, vec![0]);
        assert_eq!(net.final_shape(), TensorShape::hwc(1, 1, 1));
    }

    #[test]
    fn dw_channel_mismatch_is_shape_error() {
        let mut b = NetworkBuilder::new("bad", TensorShape::hwc(4, 4, 8));
        b.push(LayerSpec::new("dw", LayerKind::Dw3x3, 8, 16), &[0; 72], &[0; 16]);
        assert!(matches!(b.build(), Err(Error::Shape(_))));
    }

    #[test]
    fn malformed_document_is_schema_error() {
        assert!(matches!(parse_manifest("{ not json", vec![]), Err(Error::Schema(_))));
        let text = single_pw_text().replace("\"pw\"", "\"pw5\"");
        assert!(matches!(parse_manifest(&text, vec![0; 5]), Err(Error::Schema(_))));
        let text = single_pw_text().replace("\"shift\": 0", "\"shift\": 32");
        assert!(matches!(parse_manifest(&text, vec![0; 5]), Err(Error::Schema(_))));
        let text = single_pw_text().replace("\"mult\": 1", "\"mult\": 0");
        assert!(matches!(parse_manifest(&text, vec![0; 5]), Err(Error::Schema(_))));
    }

    #[test]
    fn blob_violations() {
        // too short
        assert!(matches!(
            parse_manifest(&single_pw_text(), vec![0; 4]),
            Err(Error::Blob(_))
        ));
        // trailing bytes
        assert!(matches!(
            parse_manifest(&single_pw_text(), vec![0; 6]),
            Err(Error::Blob(_))
        ));
        // overlap
        let text = single_pw_text().replace("\"offset\": 1", "\"offset\": 0");
        assert!(matches!(parse_manifest(&text, vec![0; 5]), Err(Error::Blob(_))));
        // wrong weight length
        let text = single_pw_text().replace("\"offset\": 0, \"length\": 1", "\"offset\": 0, \"length\": 2");
        assert!(matches!(parse_manifest(&text, vec![0; 6]), Err(Error::Blob(_))));
    }

    #[test]
    fn chain_mismatch_is_shape_error() {
        let mut b = NetworkBuilder::new("bad", TensorShape::hwc(4, 4, 3));
        b.push(LayerSpec::new("a", LayerKind::Pw, 3, 8), &[0; 24], &[0; 8]);
        b.push(LayerSpec::new("b", LayerKind::Pw, 4, 8), &[0; 32], &[0; 8]);
        assert!(matches!(b.build(), Err(Error::Shape(_))));
    }

    #[test]
    fn pw_with_stride_rejected() {
        let mut b = NetworkBuilder::new("bad", TensorShape::hwc(4, 4, 3));
        b.push(LayerSpec::new("a", LayerKind::Pw, 3, 8).stride(2), &[0; 24], &[0; 8]);
        assert!(matches!(b.build(), Err(Error::Shape(_))));
    }

    #[test]
    fn shape_arithmetic() {
        let pw = LayerDesc {
            id: "p".into(),
            kind: LayerKind::Pw,
            c_in: 8,
            c_out: 32,
            stride: 1,
            pad: 0,
            quant: QuantParams::IDENTITY,
            weights_ref: BlobRef { offset: 0, length: 0 },
            bias_ref: BlobRef { offset: 0, length: 0 },
        };
        let s = TensorShape::hwc(16, 16, 8);
        assert_eq!(pw.output_shape(&s).unwrap(), TensorShape::hwc(16, 16, 32));
        let dw = LayerDesc {
            kind: LayerKind::Dw3x3,
            c_out: 8,
            stride: 2,
            pad: 1,
            ..pw.clone()
        };
        assert_eq!(dw.output_shape(&s).unwrap(), TensorShape::hwc(8, 8, 8));
        let tiny = TensorShape::hwc(2, 2, 8);
        let dw0 = LayerDesc { pad: 0, ..dw };
        assert!(matches!(dw0.output_shape(&tiny), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_needs_flat_input() {
        let mut b = NetworkBuilder::new("bad", TensorShape::hwc(2, 2, 3));
        b.push(LayerSpec::new("fc", LayerKind::Linear, 3, 4), &[0; 12], &[0; 4]);
        assert!(matches!(b.build(), Err(Error::Shape(_))));
    }

    #[test]
    fn canonical_round_trip() {
        let net = parse_manifest(&single_pw_text(), vec![3, 0, 0, 0, 0]).unwrap();
        let canon = net.manifest.to_canonical_json();
        let again = parse_manifest(&canon, net.blob().to_vec()).unwrap();
        assert_eq!(again.manifest.to_canonical_json(), canon);
    }
}
