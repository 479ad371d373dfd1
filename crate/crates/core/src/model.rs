//! Wind-conditioned cyclic UNet: encoder-decoder with skip connections, the
//! conditioning code injected at every scale through a learned linear map
//! wrapped in 1x1 convolutions. Looping is architectural: the network sees
//! time only through the periodic code, so shifting time by whole periods
//! cannot change the output.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::ConditioningCode;
use crate::error::{Error, Result};
use crate::graph::{GraphBase, NodeId};
use crate::imageio::NormalMap;
use crate::tensor::{Scalar, Tensor, TensorBase};

pub const LEAKY_SLOPE: f64 = 0.2;
const CHECKPOINT_MAGIC: &[u8; 4] = b"CGNW";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Full-size channel widths per scale; actual widths divide by `divisor`.
    pub base_channels: Vec<usize>,
    pub divisor: usize,
    pub code_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: channels [8, 16, 32, 64, 128] for 32x32 inputs.
    pub fn desk() -> Self {
        ModelConfig {
            base_channels: vec![64, 128, 256, 512, 1024],
            divisor: 8,
            code_dim: 12,
            in_channels: 3,
            out_channels: 3,
        }
    }

    /// Full-size configuration (divisor 1).
    pub fn full() -> Self {
        ModelConfig {
            divisor: 1,
            ..ModelConfig::desk()
        }
    }

    /// Two scales, four channels: the gradient-check model.
    pub fn tiny() -> Self {
        ModelConfig {
            base_channels: vec![4, 8],
            divisor: 1,
            code_dim: 12,
            in_channels: 3,
            out_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels.is_empty() {
            return Err(Error::Validation("model needs at least one scale".into()));
        }
        if self.divisor < 1 {
            return Err(Error::Validation("channel divisor must be >= 1".into()));
        }
        for pair in self.base_channels.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(Error::Validation(format!(
                    "channels must double per scale, got {:?}",
                    self.base_channels
                )));
            }
        }
        for c in &self.base_channels {
            if c % self.divisor != 0 || c / self.divisor == 0 {
                return Err(Error::Validation(format!(
                    "divisor {} does not divide channel width {}",
                    self.divisor, c
                )));
            }
        }
        if self.code_dim < 3 {
            return Err(Error::Validation(
                "code dimension must cover at least one harmonic plus wind".into(),
            ));
        }
        Ok(())
    }

    pub fn scales(&self) -> usize {
        self.base_channels.len()
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels[scale] / self.divisor
    }

    /// Spatial extents must divide this for a plain forward pass.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.scales() - 1)
    }

    pub fn ensure_matches(&self, other: &ModelConfig) -> Result<()> {
        if self != other {
            return Err(Error::Format(format!(
                "model configuration mismatch: checkpoint has {}, run expects {}",
                serde_json::to_string(self).unwrap_or_default(),
                serde_json::to_string(other).unwrap_or_default()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParamBase<T: Scalar> {
    pub weight: TensorBase<T>,
    pub bias: TensorBase<T>,
}

pub type ConvParam = ConvParamBase<f32>;

impl ConvParamBase<f32> {
    fn init(cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvParamBase {
            weight: Tensor::he_uniform(vec![cout, cin, k, k], cin * k * k, rng),
            bias: Tensor::zeros(vec![cout]),
        }
    }

    /// Identity 1x1 convolution (for tests and null injections).
    pub fn identity_1x1(channels: usize) -> Self {
        let mut weight = Tensor::zeros(vec![channels, channels, 1, 1]);
        for c in 0..channels {
            weight.data_mut()[c * channels + c] = 1.0;
        }
        ConvParamBase {
            weight,
            bias: Tensor::zeros(vec![channels]),
        }
    }
}

impl<T: Scalar> ConvParamBase<T> {
    pub fn cast<U: Scalar>(&self) -> ConvParamBase<U> {
        ConvParamBase {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Per-scale conditioning injection: a linear map of the code plus the 1x1
/// convolutions around the additive combination.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectParamBase<T: Scalar> {
    /// [channels, code_dim]
    pub map: TensorBase<T>,
    pub pre: ConvParamBase<T>,
    pub post: ConvParamBase<T>,
}

pub type InjectParam = InjectParamBase<f32>;

impl<T: Scalar> InjectParamBase<T> {
    pub fn cast<U: Scalar>(&self) -> InjectParamBase<U> {
        InjectParamBase {
            map: self.map.cast(),
            pre: self.pre.cast(),
            post: self.post.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParametersBase<T: Scalar> {
    pub stem: ConvParamBase<T>,
    pub down: Vec<ConvParamBase<T>>,
    pub refine: Vec<ConvParamBase<T>>,
    pub inject: Vec<InjectParamBase<T>>,
    pub up: Vec<ConvParamBase<T>>,
    pub fuse: Vec<ConvParamBase<T>>,
    pub head: ConvParamBase<T>,
}

pub type ModelParameters = ModelParametersBase<f32>;

impl ModelParameters {
    /// He-style init of every kernel, zero biases, deterministic in the seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.scales();
        let stem = ConvParam::init(cfg.channels(0), cfg.in_channels, 3, &mut rng);
        let mut down = Vec::new();
        let mut refine = Vec::new();
        for i in 1..s {
            down.push(ConvParam::init(cfg.channels(i), cfg.channels(i - 1), 3, &mut rng));
            refine.push(ConvParam::init(cfg.channels(i), cfg.channels(i), 3, &mut rng));
        }
        let mut inject = Vec::new();
        for i in 0..s {
            let c = cfg.channels(i);
            inject.push(InjectParam {
                map: Tensor::he_uniform(vec![c, cfg.code_dim], cfg.code_dim, &mut rng),
                pre: ConvParam::init(c, c, 1, &mut rng),
                post: ConvParam::init(c, c, 1, &mut rng),
            });
        }
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for i in (0..s - 1).rev() {
            up.push(ConvParam::init(cfg.channels(i), cfg.channels(i + 1), 3, &mut rng));
            fuse.push(ConvParam::init(cfg.channels(i), 2 * cfg.channels(i), 3, &mut rng));
        }
        up.reverse();
        fuse.reverse();
        let head = ConvParam::init(cfg.out_channels, cfg.channels(0), 3, &mut rng);
        Ok(ModelParameters {
            stem,
            down,
            refine,
            inject,
            up,
            fuse,
            head,
        })
    }
}

impl<T: Scalar> ModelParametersBase<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParametersBase<U> {
        ModelParametersBase {
            stem: self.stem.cast(),
            down: self.down.iter().map(|c| c.cast()).collect(),
            refine: self.refine.iter().map(|c| c.cast()).collect(),
            inject: self.inject.iter().map(|c| c.cast()).collect(),
            up: self.up.iter().map(|c| c.cast()).collect(),
            fuse: self.fuse.iter().map(|c| c.cast()).collect(),
            head: self.head.cast(),
        }
    }

    /// Canonical (name, tensor) order used by the optimizer, checkpoint and
    /// gradient collection.
    pub fn flatten(&self) -> Vec<(String, &TensorBase<T>)> {
        let mut out: Vec<(String, &TensorBase<T>)> = Vec::new();
        macro_rules! conv {
            ($name:expr, $c:expr) => {
                out.push((format!("{}.weight", $name), &$c.weight));
                out.push((format!("{}.bias", $name), &$c.bias));
            };
        }
        conv!("stem", self.stem);
        for (i, c) in self.down.iter().enumerate() {
            conv!(format!("down{i}"), *c);
        }
        for (i, c) in self.refine.iter().enumerate() {
            conv!(format!("refine{i}"), *c);
        }
        for (i, inj) in self.inject.iter().enumerate() {
            out.push((format!("inject{i}.map"), &inj.map));
            conv!(format!("inject{i}.pre"), inj.pre);
            conv!(format!("inject{i}.post"), inj.post);
        }
        for (i, c) in self.up.iter().enumerate() {
            conv!(format!("up{i}"), *c);
        }
        for (i, c) in self.fuse.iter().enumerate() {
            conv!(format!("fuse{i}"), *c);
        }
        conv!("head", self.head);
        out
    }

    /// Mutable counterpart of [`Self::flatten`], same order.
    pub fn flatten_mut(&mut self) -> Vec<(String, &mut TensorBase<T>)> {
        let mut out: Vec<(String, &mut TensorBase<T>)> = Vec::new();
        macro_rules! conv {
            ($name:expr, $c:expr) => {
                out.push((format!("{}.weight", $name), &mut $c.weight));
                out.push((format!("{}.bias", $name), &mut $c.bias));
            };
        }
        conv!("stem", self.stem);
        for (i, c) in self.down.iter_mut().enumerate() {
            conv!(format!("down{i}"), *c);
        }
        for (i, c) in self.refine.iter_mut().enumerate() {
            conv!(format!("refine{i}"), *c);
        }
        for (i, inj) in self.inject.iter_mut().enumerate() {
            out.push((format!("inject{i}.map"), &mut inj.map));
            conv!(format!("inject{i}.pre"), inj.pre);
            conv!(format!("inject{i}.post"), inj.post);
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            conv!(format!("up{i}"), *c);
        }
        for (i, c) in self.fuse.iter_mut().enumerate() {
            conv!(format!("fuse{i}"), *c);
        }
        conv!("head", self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.flatten().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph node ids of every parameter, mirroring the structure.
pub struct ConvIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

pub struct InjectIds {
    pub map: NodeId,
    pub pre: ConvIds,
    pub post: ConvIds,
}

pub struct ModelIds {
    pub stem: ConvIds,
    pub down: Vec<ConvIds>,
    pub refine: Vec<ConvIds>,
    pub inject: Vec<InjectIds>,
    pub up: Vec<ConvIds>,
    pub fuse: Vec<ConvIds>,
    pub head: ConvIds,
}

impl ModelIds {
    /// Node ids in [`ModelParametersBase::flatten`] order.
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<NodeId>, c: &ConvIds| {
            out.push(c.weight);
            out.push(c.bias);
        };
        conv(&mut out, &self.stem);
        for c in &self.down {
            conv(&mut out, c);
        }
        for c in &self.refine {
            conv(&mut out, c);
        }
        for inj in &self.inject {
            out.push(inj.map);
            conv(&mut out, &inj.pre);
            conv(&mut out, &inj.post);
        }
        for c in &self.up {
            conv(&mut out, c);
        }
        for c in &self.fuse {
            conv(&mut out, c);
        }
        conv(&mut out, &self.head);
        out
    }
}

/// Register every parameter tensor as a graph leaf.
pub fn register_params<T: Scalar>(
    g: &mut GraphBase<T>,
    p: &ModelParametersBase<T>,
) -> ModelIds {
    let conv = |g: &mut GraphBase<T>, c: &ConvParamBase<T>| ConvIds {
        weight: g.param(&c.weight),
        bias: g.param(&c.bias),
    };
    ModelIds {
        stem: conv(g, &p.stem),
        down: p.down.iter().map(|c| conv(g, c)).collect(),
        refine: p.refine.iter().map(|c| conv(g, c)).collect(),
        inject: p
            .inject
            .iter()
            .map(|inj| InjectIds {
                map: g.param(&inj.map),
                pre: conv(g, &inj.pre),
                post: conv(g, &inj.post),
            })
            .collect(),
        up: p.up.iter().map(|c| conv(g, c)).collect(),
        fuse: p.fuse.iter().map(|c| conv(g, c)).collect(),
        head: conv(g, &p.head),
    }
}

/// feature' = conv1x1_post( conv1x1_pre(feature) + broadcast(map . code) ):
/// the projected code enters as a per-channel bias across all pixels.
pub fn inject_conditioning<T: Scalar>(
    g: &mut GraphBase<T>,
    feature: NodeId,
    code: NodeId,
    inj: &InjectIds,
) -> Result<NodeId> {
    let pre = g.conv2d(feature, inj.pre.weight, Some(inj.pre.bias), 1, 0)?;
    let proj = g.linear(inj.map, code)?;
    let combined = g.bias_channels(pre, proj)?;
    g.conv2d(combined, inj.post.weight, Some(inj.post.bias), 1, 0)
}

/// Wire the full forward pass; returns the raw (unnormalized) prediction.
pub fn build_forward<T: Scalar>(
    g: &mut GraphBase<T>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    input: NodeId,
    code: NodeId,
) -> Result<NodeId> {
    let scales = cfg.scales();
    let [_, _, h, w] = g.value(input).dims4()?;
    let m = cfg.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!(
            "input {}x{} not divisible by {} (pad first)",
            h, w, m
        )));
    }

    let mut feats = Vec::with_capacity(scales);
    let stem = g.conv2d(input, ids.stem.weight, Some(ids.stem.bias), 1, 1)?;
    let mut x = g.leaky_relu(stem, LEAKY_SLOPE);
    feats.push(x);
    for i in 0..scales - 1 {
        let d = g.conv2d(x, ids.down[i].weight, Some(ids.down[i].bias), 2, 1)?;
        let d = g.leaky_relu(d, LEAKY_SLOPE);
        let r = g.conv2d(d, ids.refine[i].weight, Some(ids.refine[i].bias), 1, 1)?;
        x = g.leaky_relu(r, LEAKY_SLOPE);
        feats.push(x);
    }

    let injected: Vec<NodeId> = feats
        .iter()
        .enumerate()
        .map(|(i, f)| inject_conditioning(g, *f, code, &ids.inject[i]))
        .collect::<Result<_>>()?;

    let mut y = injected[scales - 1];
    for i in (0..scales - 1).rev() {
        let up = g.upsample_nearest2(y)?;
        let uc = g.conv2d(up, ids.up[i].weight, Some(ids.up[i].bias), 1, 1)?;
        let uc = g.leaky_relu(uc, LEAKY_SLOPE);
        let cat = g.concat_channels(uc, injected[i])?;
        let f = g.conv2d(cat, ids.fuse[i].weight, Some(ids.fuse[i].bias), 1, 1)?;
        y = g.leaky_relu(f, LEAKY_SLOPE);
    }
    g.conv2d(y, ids.head.weight, Some(ids.head.bias), 1, 1)
}

/// Inference-oriented bundle of configuration and parameters.
#[derive(Debug, Clone)]
pub struct CycleNet {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl CycleNet {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, seed)?;
        Ok(CycleNet { config, params })
    }

    /// Raw prediction for a [1, 3, H, W] input and a code tensor.
    pub fn forward_raw(&self, input: &Tensor, code: &Tensor) -> Result<Tensor> {
        if code.shape() != [1, self.config.code_dim] {
            return Err(Error::Shape(format!(
                "code tensor must be [1, {}], got {:?}",
                self.config.code_dim,
                code.shape()
            )));
        }
        let mut g = GraphBase::<f32>::new();
        let ids = register_params(&mut g, &self.params);
        let input_id = g.input(input);
        let code_id = g.input(code);
        let out = build_forward(&mut g, &ids, &self.config, input_id, code_id)?;
        Ok(g.value(out).clone())
    }

    /// Predict the normal map at residual time described by `code`,
    /// renormalized to unit length. Input extents must divide the scale
    /// pyramid; see [`Self::infer`] for arbitrary sizes.
    pub fn forward(&self, input: &NormalMap, code: &ConditioningCode) -> Result<NormalMap> {
        let raw = self.forward_raw(&input.to_tensor(), &code.to_tensor(1))?;
        NormalMap::from_raw_tensor(&raw)
    }

    /// Forward with reflect-padding up to the pyramid multiple and cropping
    /// back, for inputs of arbitrary size.
    pub fn infer(&self, input: &NormalMap, code: &ConditioningCode) -> Result<NormalMap> {
        let t = input.to_tensor();
        let (padded, h, w) = t.reflect_pad_to_multiple(self.config.spatial_multiple())?;
        let raw = self.forward_raw(&padded, &code.to_tensor(1))?;
        NormalMap::from_raw_tensor(&raw.crop(h, w)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Write magic, version, JSON header (config + tensor index) and raw
/// little-endian f32 blobs in index order.
pub fn save_checkpoint(params: &ModelParameters, config: &ModelConfig, path: &Path) -> Result<()> {
    let flat = params.flatten();
    let mut tensors = Vec::with_capacity(flat.len());
    let mut offset = 0u64;
    for (name, t) in &flat {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len() as u64,
        });
        offset += 4 * t.len() as u64;
    }
    let header = CheckpointHeader {
        config: config.clone(),
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {}", e)))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    for (_, t) in &flat {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read a checkpoint back; the inverse of [`save_checkpoint`], bit-exact.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParameters, ModelConfig)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: truncated before magic", path.display())))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?} at offset 0, expected {:?}",
            path.display(),
            magic,
            CHECKPOINT_MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)
        .map_err(|_| Error::Format(format!("{}: truncated version", path.display())))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {} (expected {})",
            path.display(),
            version,
            CHECKPOINT_VERSION
        )));
    }
    file.read_exact(&mut u32buf)
        .map_err(|_| Error::Format(format!("{}: truncated header length", path.display())))?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("{}: header decode: {}", path.display(), e)))?;

    let mut blob = Vec::new();
    file.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;

    let mut params = ModelParameters::init(&header.config, 0)?;
    let mut flat = params.flatten_mut();
    if flat.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "{}: checkpoint has {} tensors, model expects {}",
            path.display(),
            header.tensors.len(),
            flat.len()
        )));
    }
    for ((name, tensor), entry) in flat.iter_mut().zip(&header.tensors) {
        if *name != entry.name || tensor.shape() != &entry.shape[..] {
            return Err(Error::Format(format!(
                "{}: tensor {} (shape {:?}) does not match checkpoint entry {} (shape {:?})",
                path.display(),
                name,
                tensor.shape(),
                entry.name,
                entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + 4 * entry.len as usize;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "{}: truncated payload: tensor {} needs bytes {}..{}, blob has {}",
                path.display(),
                name,
                start,
                end,
                blob.len()
            )));
        }
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            let o = start + 4 * i;
            *v = f32::from_le_bytes([blob[o], blob[o + 1], blob[o + 2], blob[o + 3]]);
        }
    }
    Ok((params, header.config))
}

/// Load a checkpoint and require its configuration to match `expected`.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(ModelParameters, ModelConfig)> {
    let (params, config) = load_checkpoint(path)?;
    config.ensure_matches(expected)?;
    Ok((params, config))
}
