//! Convolutional backbone, embedding projection and the normalized cosine head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor, ARCCOS_EPS};
use crate::dsp::{MelConfig, Waveform};
use crate::error::{Error, Result};
use crate::features::{
    stack_node, temporal_attention_node, tgram_node, FeatureExtractor, FeatureStack, TgramConfig,
    TgramNodes, TgramParams,
};
use crate::nn::{channel_norm, declare_params, glorot_uniform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            channels: vec![32, 64, 128, 128],
            embedding_dim: 128,
            slope: 0.01,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Conv stack weights (`[C_out, C_in, 3, 3]`, no bias) and the linear map to
/// the embedding. The per-channel normalization after each conv removes any
/// constant offset, so the convs carry no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub conv_weights: Vec<Tensor>,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

/// Class centers, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub weight: Tensor,
}

impl ProjectionHead {
    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Unnormalized backbone output.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn normalized(&self) -> Result<Embedding> {
        Ok(Embedding(unit(&self.0)?))
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Tensor(format!("cannot normalize a vector of norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosines and angles between `h` and every class center.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineLogits {
    pub cos: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Normalizes both sides, clamps the cosines to `[-1+ε, 1-ε]` and takes arccos.
pub fn cosine_logits(h: &Embedding, head: &ProjectionHead) -> Result<CosineLogits> {
    let d = h.0.len();
    let shape = head.weight.shape();
    if shape[1] != d {
        return Err(Error::Tensor(format!(
            "embedding of length {d} does not match head {shape:?}"
        )));
    }
    let hn = unit(&h.0)?;
    let mut cos = Vec::with_capacity(shape[0]);
    for row in head.weight.data().chunks(d) {
        let w = unit(row)?;
        let c: f64 = w.iter().zip(&hn).map(|(a, b)| a * b).sum();
        cos.push(c.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS));
    }
    let theta = cos.iter().map(|c| c.acos()).collect();
    Ok(CosineLogits { cos, theta })
}

/// Sizes needed to allocate a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub mel: MelConfig,
    pub tgram: TgramConfig,
    pub backbone: BackboneConfig,
    pub n_classes: usize,
}

impl ModelDims {
    pub fn new(mel: MelConfig, n_classes: usize) -> Self {
        ModelDims {
            tgram: TgramConfig::for_mel(&mel),
            backbone: BackboneConfig::default(),
            mel,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.tgram.check_against(&self.mel)?;
        self.backbone.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Every trainable tensor of the system.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub tgram: TgramParams,
    pub backbone: Backbone,
    pub head: ProjectionHead,
}

/// Graph nodes of a declared [`Backbone`].
#[derive(Clone, Debug)]
pub struct BackboneNodes {
    convs: Vec<NodeId>,
    proj_weight: NodeId,
    proj_bias: NodeId,
}

/// Graph nodes of a declared [`Model`].
#[derive(Clone, Debug)]
pub struct ModelNodes {
    pub tgram: TgramNodes,
    pub backbone: BackboneNodes,
    pub head: NodeId,
}

pub fn init_backbone(rng: &mut ChaCha8Rng, config: BackboneConfig) -> Backbone {
    let mut conv_weights = Vec::with_capacity(config.channels.len());
    let mut c_in = config.in_channels;
    for &c_out in &config.channels {
        conv_weights.push(glorot_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9, c_out * 9));
        c_in = c_out;
    }
    let d = config.embedding_dim;
    Backbone {
        proj_weight: glorot_uniform(rng, &[d, c_in], c_in, d),
        proj_bias: Tensor::zeros(&[d, 1]),
        conv_weights,
        config,
    }
}

/// Rows uniform on the unit sphere (normalized gaussians).
pub fn init_head(rng: &mut ChaCha8Rng, n_classes: usize, d: usize) -> ProjectionHead {
    let mut data = Vec::with_capacity(n_classes * d);
    for _ in 0..n_classes {
        let row: Vec<f64> = loop {
            let r: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            if let Ok(u) = unit(&r) {
                break u;
            }
        };
        data.extend(row);
    }
    ProjectionHead {
        weight: Tensor::new(vec![n_classes, d], data).expect("sized"),
    }
}

pub fn init_params(seed: u64, dims: &ModelDims) -> Result<Model> {
    dims.validate()?;
    let tgram = TgramParams::init(seed, dims.tgram.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let backbone = init_backbone(&mut rng, dims.backbone.clone());
    let head = init_head(&mut rng, dims.n_classes, dims.backbone.embedding_dim);
    Ok(Model {
        dims: dims.clone(),
        tgram,
        backbone,
        head,
    })
}

impl Backbone {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .conv_weights
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("backbone.conv{i}.weight"), w))
            .collect();
        out.push(("backbone.proj.weight".into(), &self.proj_weight));
        out.push(("backbone.proj.bias".into(), &self.proj_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .conv_weights
            .iter_mut()
            .enumerate()
            .map(|(i, w)| (format!("backbone.conv{i}.weight"), w))
            .collect();
        out.push(("backbone.proj.weight".into(), &mut self.proj_weight));
        out.push(("backbone.proj.bias".into(), &mut self.proj_bias));
        out
    }

    pub fn declare(&self, g: &mut Graph, differentiable: bool) -> Result<BackboneNodes> {
        let ids = declare_params(g, self.named_tensors(), differentiable)?;
        let n = self.conv_weights.len();
        Ok(BackboneNodes {
            convs: ids[..n].to_vec(),
            proj_weight: ids[n],
            proj_bias: ids[n + 1],
        })
    }
}

pub const HEAD_WEIGHT: &str = "head.weight";

impl Model {
    /// Parameters in their canonical order (also the checkpoint order).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.tgram.named_tensors();
        out.extend(self.backbone.named_tensors());
        out.push((HEAD_WEIGHT.into(), &self.head.weight));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.tgram.named_tensors_mut();
        out.extend(self.backbone.named_tensors_mut());
        out.push((HEAD_WEIGHT.into(), &mut self.head.weight));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn declare(&self, g: &mut Graph, differentiable: bool) -> Result<ModelNodes> {
        Ok(ModelNodes {
            tgram: self.tgram.declare(g, differentiable)?,
            backbone: self.backbone.declare(g, differentiable)?,
            head: g.input(HEAD_WEIGHT, self.head.weight.shape(), differentiable)?,
        })
    }

    pub fn bind<'a>(&'a self, b: &mut Bindings<'a>) {
        for (name, t) in self.named_tensors() {
            b.insert(name, t);
        }
    }

    /// Embedding and cosines for one clip, without gradients.
    pub fn infer(&self, fx: &FeatureExtractor, w: &Waveform) -> Result<(Embedding, CosineLogits)> {
        let stack = fx.stack(w, &self.tgram)?;
        let h = backbone_forward(&stack, &self.backbone)?;
        let c = cosine_logits(&h, &self.head)?;
        Ok((h, c))
    }
}

/// Backbone over `x: [C_in, F, T]`, returning the `[d, 1]` embedding.
pub fn backbone_node(g: &mut Graph, x: NodeId, cfg: &BackboneConfig, p: &BackboneNodes) -> Result<NodeId> {
    let mut x = x;
    for &w in &p.convs {
        let c = g.conv2d(x, w, 2, 1)?;
        let s = g.shape(c).to_vec();
        let flat = g.reshape(c, &[s[0], s[1] * s[2]])?;
        let n = channel_norm(g, flat)?;
        let a = g.leaky_relu(n, cfg.slope)?;
        x = g.reshape(a, &s)?;
    }
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let pooled = g.mean(flat, 1)?;
    let z = g.matmul(p.proj_weight, pooled)?;
    g.add(z, p.proj_bias)
}

/// Clamped cosines `[K, 1]` between `h: [d, 1]` and the rows of `w: [K, d]`.
pub fn cosine_node(g: &mut Graph, h: NodeId, w: NodeId) -> Result<NodeId> {
    let hh = g.mul(h, h)?;
    let hs = g.sum_all(hh)?;
    let hn = g.sqrt(hs)?;
    let hu = g.div(h, hn)?;
    let ww = g.mul(w, w)?;
    let rs = g.sum(ww, 1)?;
    let rn = g.sqrt(rs)?;
    let wu = g.div(w, rn)?;
    let c = g.matmul(wu, hu)?;
    g.clamp(c, -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS)
}

/// Full forward graph from waveform to cosines for clips of `samples` samples.
/// Inputs: `wave` `[1, D]`, `mel` `[F, T]`, and the model parameters.
pub struct ForwardGraph {
    pub graph: Graph,
    pub nodes: ModelNodes,
    pub stack: NodeId,
    pub embedding: NodeId,
    pub cos: NodeId,
}

pub const MEL_INPUT: &str = "mel";

impl ForwardGraph {
    pub fn build(model: &Model, samples: usize, differentiable: bool) -> Result<Self> {
        let mut g = Graph::new();
        let frames = model.dims.tgram.frames(samples);
        let wave = g.input(crate::features::WAVE_INPUT, &[1, samples], false)?;
        let mel = g.input(MEL_INPUT, &[model.dims.mel.n_mels, frames], false)?;
        let nodes = model.declare(&mut g, differentiable)?;
        let t = tgram_node(&mut g, wave, &model.dims.tgram, &nodes.tgram)?;
        let (_, ta) = temporal_attention_node(&mut g, mel)?;
        let stack = stack_node(&mut g, ta, mel, t)?;
        let embedding = backbone_node(&mut g, stack, &model.dims.backbone, &nodes.backbone)?;
        let cos = cosine_node(&mut g, embedding, nodes.head)?;
        Ok(ForwardGraph {
            graph: g,
            nodes,
            stack,
            embedding,
            cos,
        })
    }
}

/// Unnormalized embedding of a feature stack.
pub fn backbone_forward(stack: &FeatureStack, b: &Backbone) -> Result<Embedding> {
    let shape = stack.tensor().shape();
    if shape[0] != b.config.in_channels {
        return Err(Error::Tensor(format!(
            "stack has {} channels, backbone expects {}",
            shape[0], b.config.in_channels
        )));
    }
    let mut g = Graph::new();
    let x = g.input("stack", shape, false)?;
    let nodes = b.declare(&mut g, false)?;
    let h = backbone_node(&mut g, x, &b.config, &nodes)?;
    let mut bind = Bindings::new().with("stack", stack.tensor());
    for (name, t) in b.named_tensors() {
        bind.insert(name, t);
    }
    Ok(Embedding(g.evaluate(&bind, h)?.into_data()))
}
