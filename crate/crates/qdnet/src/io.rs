//! The `.qdk` binary container for float and quantized models.
//!
//! Layout (all multi-byte values little-endian):
//!
//! ```text
//! magic "QDK1" | version u8 | flags u8 (bit0: quantized) | family u8
//! num_classes u16 | width_multiplier f32 | layer_count u16
//! [quantized only] input (S: f64, Z: u8)
//! layer records...
//! ```
//!
//! Float layer records carry f32 parameters verbatim (bit-exact round trip).
//! Quantized records carry u8 weights, i32 biases, the weight and output
//! (S, Z) pairs, and the (m0_fixed, shift) requant pair; each layer's input
//! parameters are the previous layer's output parameters, so they are not
//! stored.

use std::path::Path;

use crate::error::{QdError, Result};
use crate::int8::{QLayer, QuantizedModel};
use crate::nn::{
    BatchNormLayer, Conv2dLayer, DenseLayer, FusedConvLayer, Layer, Model, ModelFamily,
};
use crate::quant::{QuantParams, RequantMultiplier};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"QDK1";
pub const VERSION: u8 = 1;
const FLAG_QUANTIZED: u8 = 0x01;

#[derive(Clone, Debug)]
pub enum LoadedModel {
    Float(Model),
    Quantized(QuantizedModel),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for &v in vs {
            self.f32(v);
        }
    }
    fn dims(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u16(d as u16);
        }
    }
    fn qparams(&mut self, qp: QuantParams) {
        self.f64(qp.scale);
        self.u8(qp.zero_point);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(QdError::Parse {
                offset: self.pos,
                message: format!("truncated file reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn err<T>(&self, message: String) -> Result<T> {
        Err(QdError::Parse {
            offset: self.pos,
            message,
        })
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn tensor(&mut self, shape: Vec<usize>, what: &str) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, self.f32s(n, what)?)
    }

    fn dims(&mut self, what: &str) -> Result<Vec<usize>> {
        let rank = self.u8(what)? as usize;
        if rank == 0 || rank > 4 {
            return self.err(format!("{what}: rank {rank} out of range"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u16(what)? as usize;
            if d == 0 {
                return self.err(format!("{what}: zero dimension"));
            }
            dims.push(d);
        }
        Ok(dims)
    }

    fn qparams(&mut self, what: &str) -> Result<QuantParams> {
        let scale = self.f64(what)?;
        let zero_point = self.u8(what)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return self.err(format!("{what}: non-positive scale {scale}"));
        }
        Ok(QuantParams { scale, zero_point })
    }
}

const KIND_CONV: u8 = 0;
const KIND_BN: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_GAP: u8 = 3;
const KIND_DROPOUT: u8 = 4;
const KIND_DENSE: u8 = 5;
const KIND_FUSED: u8 = 6;

fn write_conv_body(w: &mut Writer, conv: &Conv2dLayer) {
    w.u8(conv.depthwise as u8);
    w.u8(conv.stride as u8);
    w.u8(conv.padding as u8);
    w.dims(conv.weight.shape());
    w.f32s(conv.weight.data());
    w.f32s(conv.bias.data());
}

fn read_conv_body(r: &mut Reader) -> Result<Conv2dLayer> {
    let depthwise = r.u8("conv depthwise")? != 0;
    let stride = r.u8("conv stride")? as usize;
    let padding = r.u8("conv padding")? as usize;
    if stride == 0 {
        return r.err("conv stride 0".into());
    }
    let shape = r.dims("conv weight shape")?;
    if shape.len() != 4 {
        return r.err(format!("conv weight rank {} != 4", shape.len()));
    }
    let out_ch = shape[0];
    let weight = r.tensor(shape, "conv weight")?;
    let bias = r.tensor(vec![out_ch], "conv bias")?;
    Ok(Conv2dLayer {
        weight,
        bias,
        stride,
        padding,
        depthwise,
    })
}

fn write_float_layer(w: &mut Writer, layer: &Layer) {
    match layer {
        Layer::Conv(conv) => {
            w.u8(KIND_CONV);
            write_conv_body(w, conv);
        }
        Layer::BatchNorm(bn) => {
            w.u8(KIND_BN);
            w.u16(bn.gamma.numel() as u16);
            w.f32(bn.epsilon);
            w.f32(bn.momentum);
            w.u8(bn.frozen as u8);
            w.f32s(bn.gamma.data());
            w.f32s(bn.beta.data());
            w.f32s(bn.running_mean.data());
            w.f32s(bn.running_var.data());
        }
        Layer::Relu => w.u8(KIND_RELU),
        Layer::GlobalAvgPool => w.u8(KIND_GAP),
        Layer::Dropout { p } => {
            w.u8(KIND_DROPOUT);
            w.f32(*p);
        }
        Layer::Dense(d) => {
            w.u8(KIND_DENSE);
            w.dims(d.weight.shape());
            w.f32s(d.weight.data());
            w.f32s(d.bias.data());
        }
        Layer::FusedConv(f) => {
            w.u8(KIND_FUSED);
            w.u8(f.relu as u8);
            write_conv_body(w, &f.conv);
        }
    }
}

fn read_float_layer(r: &mut Reader) -> Result<Layer> {
    let kind = r.u8("layer kind")?;
    Ok(match kind {
        KIND_CONV => Layer::Conv(read_conv_body(r)?),
        KIND_BN => {
            let c = r.u16("batchnorm channels")? as usize;
            if c == 0 {
                return r.err("batchnorm with 0 channels".into());
            }
            let epsilon = r.f32("batchnorm epsilon")?;
            let momentum = r.f32("batchnorm momentum")?;
            let frozen = r.u8("batchnorm frozen")? != 0;
            let gamma = r.tensor(vec![c], "batchnorm gamma")?;
            let beta = r.tensor(vec![c], "batchnorm beta")?;
            let running_mean = r.tensor(vec![c], "batchnorm running mean")?;
            let running_var = r.tensor(vec![c], "batchnorm running var")?;
            if running_var.data().iter().any(|&v| v < 0.0) {
                return r.err("negative running variance".into());
            }
            Layer::BatchNorm(BatchNormLayer {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
                momentum,
                frozen,
            })
        }
        KIND_RELU => Layer::Relu,
        KIND_GAP => Layer::GlobalAvgPool,
        KIND_DROPOUT => Layer::Dropout {
            p: r.f32("dropout p")?,
        },
        KIND_DENSE => {
            let shape = r.dims("dense weight shape")?;
            if shape.len() != 2 {
                return r.err(format!("dense weight rank {} != 2", shape.len()));
            }
            let out = shape[0];
            let weight = r.tensor(shape, "dense weight")?;
            let bias = r.tensor(vec![out], "dense bias")?;
            Layer::Dense(DenseLayer { weight, bias })
        }
        KIND_FUSED => {
            let relu = r.u8("fused relu flag")? != 0;
            Layer::FusedConv(FusedConvLayer {
                conv: read_conv_body(r)?,
                relu,
            })
        }
        other => return r.err(format!("unknown layer kind {other}")),
    })
}

const QKIND_CONV: u8 = 0;
const QKIND_DENSE: u8 = 1;
const QKIND_GAP: u8 = 2;

fn write_qlayer(w: &mut Writer, layer: &QLayer) {
    match layer {
        QLayer::Conv {
            weight,
            weight_shape,
            bias,
            weight_qp,
            out_qp,
            rm,
            stride,
            padding,
            depthwise,
            relu,
            ..
        } => {
            w.u8(QKIND_CONV);
            // bit0 depthwise, bit1 relu, bits2-3 stride-1, bits4-5 padding
            let meta = (*depthwise as u8)
                | ((*relu as u8) << 1)
                | (((*stride as u8) - 1) << 2)
                | ((*padding as u8) << 4);
            w.u8(meta);
            w.dims(weight_shape);
            w.qparams(*weight_qp);
            w.qparams(*out_qp);
            w.i32(rm.m0_fixed);
            w.u8(rm.shift as u8);
            w.buf.extend_from_slice(weight);
            for &b in bias {
                w.i32(b);
            }
        }
        QLayer::Dense {
            weight,
            weight_shape,
            bias,
            weight_qp,
            out_qp,
            rm,
            ..
        } => {
            w.u8(QKIND_DENSE);
            w.dims(weight_shape);
            w.qparams(*weight_qp);
            w.qparams(*out_qp);
            w.i32(rm.m0_fixed);
            w.u8(rm.shift as u8);
            w.buf.extend_from_slice(weight);
            for &b in bias {
                w.i32(b);
            }
        }
        QLayer::GlobalAvgPool => w.u8(QKIND_GAP),
    }
}

fn read_qlayer(r: &mut Reader, in_qp: QuantParams) -> Result<QLayer> {
    let kind = r.u8("quantized layer kind")?;
    match kind {
        QKIND_CONV => {
            let meta = r.u8("conv meta")?;
            let depthwise = meta & 1 != 0;
            let relu = meta & 2 != 0;
            let stride = ((meta >> 2) & 3) as usize + 1;
            let padding = ((meta >> 4) & 3) as usize;
            let weight_shape = r.dims("qconv weight shape")?;
            if weight_shape.len() != 4 {
                return r.err(format!("qconv weight rank {} != 4", weight_shape.len()));
            }
            let weight_qp = r.qparams("qconv weight params")?;
            let out_qp = r.qparams("qconv output params")?;
            let rm = read_rm(r, "qconv")?;
            let n: usize = weight_shape.iter().product();
            let weight = r.take(n, "qconv weight bytes")?.to_vec();
            let mut bias = Vec::with_capacity(weight_shape[0]);
            for _ in 0..weight_shape[0] {
                bias.push(r.i32("qconv bias")?);
            }
            Ok(QLayer::Conv {
                weight,
                weight_shape,
                bias,
                in_qp,
                weight_qp,
                out_qp,
                rm,
                stride,
                padding,
                depthwise,
                relu,
            })
        }
        QKIND_DENSE => {
            let weight_shape = r.dims("qdense weight shape")?;
            if weight_shape.len() != 2 {
                return r.err(format!("qdense weight rank {} != 2", weight_shape.len()));
            }
            let weight_qp = r.qparams("qdense weight params")?;
            let out_qp = r.qparams("qdense output params")?;
            let rm = read_rm(r, "qdense")?;
            let n: usize = weight_shape.iter().product();
            let weight = r.take(n, "qdense weight bytes")?.to_vec();
            let mut bias = Vec::with_capacity(weight_shape[0]);
            for _ in 0..weight_shape[0] {
                bias.push(r.i32("qdense bias")?);
            }
            Ok(QLayer::Dense {
                weight,
                weight_shape,
                bias,
                in_qp,
                weight_qp,
                out_qp,
                rm,
            })
        }
        QKIND_GAP => Ok(QLayer::GlobalAvgPool),
        other => r.err(format!("unknown quantized layer kind {other}")),
    }
}

fn read_rm(r: &mut Reader, what: &str) -> Result<RequantMultiplier> {
    let m0_fixed = r.i32("requant multiplier")?;
    let shift = r.u8("requant shift")? as u32;
    if m0_fixed < 1 << 30 || shift > 31 {
        return r.err(format!(
            "{what}: requant multiplier out of range (m0 {m0_fixed}, shift {shift})"
        ));
    }
    Ok(RequantMultiplier { m0_fixed, shift })
}

fn write_header(
    w: &mut Writer,
    quantized: bool,
    family: ModelFamily,
    num_classes: usize,
    width_multiplier: f32,
    layer_count: usize,
) {
    w.buf.extend_from_slice(&MAGIC);
    w.u8(VERSION);
    w.u8(if quantized { FLAG_QUANTIZED } else { 0 });
    w.u8(match family {
        ModelFamily::Teacher => 0,
        ModelFamily::Student => 1,
    });
    w.u16(num_classes as u16);
    w.f32(width_multiplier);
    w.u16(layer_count as u16);
}

pub fn serialize_model(model: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    write_header(
        &mut w,
        false,
        model.family,
        model.num_classes,
        model.width_multiplier,
        model.layers.len(),
    );
    for layer in &model.layers {
        write_float_layer(&mut w, layer);
    }
    w.buf
}

pub fn serialize_qmodel(model: &QuantizedModel) -> Vec<u8> {
    let mut w = Writer::new();
    write_header(
        &mut w,
        true,
        ModelFamily::Student,
        model.num_classes,
        model.width_multiplier,
        model.layers.len(),
    );
    w.qparams(model.input_qp);
    for layer in &model.layers {
        write_qlayer(&mut w, layer);
    }
    w.buf
}

pub fn deserialize(bytes: &[u8]) -> Result<LoadedModel> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(QdError::Parse {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected \"QDK1\""),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return r.err(format!("unsupported version {version}"));
    }
    let flags = r.u8("flags")?;
    let family = match r.u8("family")? {
        0 => ModelFamily::Teacher,
        1 => ModelFamily::Student,
        other => return r.err(format!("unknown family {other}")),
    };
    let num_classes = r.u16("num_classes")? as usize;
    if num_classes == 0 {
        return r.err("num_classes is 0".into());
    }
    let width_multiplier = r.f32("width_multiplier")?;
    let layer_count = r.u16("layer_count")? as usize;

    let loaded = if flags & FLAG_QUANTIZED != 0 {
        let input_qp = r.qparams("input params")?;
        let mut layers = Vec::with_capacity(layer_count);
        let mut chain_qp = input_qp;
        for _ in 0..layer_count {
            let layer = read_qlayer(&mut r, chain_qp)?;
            if let QLayer::Conv { out_qp, .. } | QLayer::Dense { out_qp, .. } = &layer {
                chain_qp = *out_qp;
            }
            layers.push(layer);
        }
        let model = QuantizedModel {
            input_qp,
            layers,
            num_classes,
            width_multiplier,
        };
        model.validate()?;
        LoadedModel::Quantized(model)
    } else {
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            layers.push(read_float_layer(&mut r)?);
        }
        LoadedModel::Float(Model {
            layers,
            family,
            width_multiplier,
            num_classes,
        })
    };
    if r.pos != bytes.len() {
        return r.err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(loaded)
}

/// Returns the number of bytes written.
pub fn save_model(model: &Model, path: &Path) -> Result<usize> {
    let bytes = serialize_model(model);
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

/// Returns the number of bytes written.
pub fn save_qmodel(model: &QuantizedModel, path: &Path) -> Result<usize> {
    let bytes = serialize_qmodel(model);
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load(path: &Path) -> Result<LoadedModel> {
    deserialize(&std::fs::read(path)?)
}

pub fn load_float(path: &Path) -> Result<Model> {
    match load(path)? {
        LoadedModel::Float(m) => Ok(m),
        LoadedModel::Quantized(_) => Err(QdError::Config(format!(
            "{} holds a quantized model where a float model is required",
            path.display()
        ))),
    }
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    match load(path)? {
        LoadedModel::Quantized(m) => Ok(m),
        LoadedModel::Float(_) => Err(QdError::Config(format!(
            "{} holds a float model where a quantized model is required",
            path.display()
        ))),
    }
}
