//! Classifier input: a temporal CNN over the raw waveform (Tgram), a
//! temporally attended log-mel spectrogram (TAgram), and their stacking with
//! the plain log-mel spectrogram.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::dsp::{MelConfig, Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::nn::{channel_norm, declare_params, glorot_uniform};

/// Layer recipe of the waveform network. The front convolution mirrors the
/// STFT framing so its output lines up with the log-mel frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TgramConfig {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub blocks: usize,
    pub slope: f64,
}

impl TgramConfig {
    pub fn for_mel(mel: &MelConfig) -> Self {
        TgramConfig {
            kernel: mel.n_fft,
            stride: mel.hop,
            channels: mel.n_mels,
            blocks: 3,
            slope: 0.01,
        }
    }

    /// The output must have the log-mel shape: same framing, one channel per
    /// mel bin.
    pub fn check_against(&self, mel: &MelConfig) -> Result<()> {
        if self.kernel != mel.n_fft || self.stride != mel.hop || self.channels != mel.n_mels {
            return Err(Error::Config(format!(
                "tgram kernel/stride/channels {}/{}/{} do not match n_fft/hop/n_mels {}/{}/{}",
                self.kernel, self.stride, self.channels, mel.n_fft, mel.hop, mel.n_mels
            )));
        }
        if self.kernel % 2 != 0 {
            return Err(Error::Config(format!("tgram kernel {} must be even", self.kernel)));
        }
        Ok(())
    }

    /// Frames produced for a waveform of `samples` samples.
    pub fn frames(&self, samples: usize) -> usize {
        samples / self.stride + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TgramParams {
    pub config: TgramConfig,
    pub front_weight: Tensor,
    pub front_bias: Tensor,
    pub block_weights: Vec<Tensor>,
    pub block_biases: Vec<Tensor>,
}

/// Graph nodes for the Tgram parameters.
#[derive(Clone, Debug)]
pub struct TgramNodes {
    front_weight: NodeId,
    front_bias: NodeId,
    blocks: Vec<(NodeId, NodeId)>,
}

impl TgramParams {
    pub fn init(seed: u64, config: TgramConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let c = config.channels;
        let front_weight = glorot_uniform(&mut rng, &[c, 1, config.kernel], config.kernel, c * config.kernel);
        let block_weights = (0..config.blocks)
            .map(|_| glorot_uniform(&mut rng, &[c, c, 3], c * 3, c * 3))
            .collect();
        TgramParams {
            front_bias: Tensor::zeros(&[c, 1]),
            block_biases: vec![Tensor::zeros(&[c, 1]); config.blocks],
            front_weight,
            block_weights,
            config,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tgram.front.weight".to_string(), &self.front_weight),
            ("tgram.front.bias".to_string(), &self.front_bias),
        ];
        for (i, (w, b)) in self.block_weights.iter().zip(&self.block_biases).enumerate() {
            out.push((format!("tgram.block{i}.weight"), w));
            out.push((format!("tgram.block{i}.bias"), b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tgram.front.weight".to_string(), &mut self.front_weight),
            ("tgram.front.bias".to_string(), &mut self.front_bias),
        ];
        for (i, (w, b)) in self
            .block_weights
            .iter_mut()
            .zip(self.block_biases.iter_mut())
            .enumerate()
        {
            out.push((format!("tgram.block{i}.weight"), w));
            out.push((format!("tgram.block{i}.bias"), b));
        }
        out
    }

    pub fn declare(&self, g: &mut Graph, differentiable: bool) -> Result<TgramNodes> {
        let ids = declare_params(g, self.named_tensors(), differentiable)?;
        Ok(TgramNodes {
            front_weight: ids[0],
            front_bias: ids[1],
            blocks: ids[2..].chunks(2).map(|c| (c[0], c[1])).collect(),
        })
    }

    pub fn bind<'a>(&'a self, b: &mut Bindings<'a>) {
        for (name, t) in self.named_tensors() {
            b.insert(name, t);
        }
    }
}

/// Tgram network over `wave: [1, D]`, producing `[channels, D/stride + 1]`.
pub fn tgram_node(g: &mut Graph, wave: NodeId, cfg: &TgramConfig, p: &TgramNodes) -> Result<NodeId> {
    let front = g.conv1d(wave, p.front_weight, cfg.stride, cfg.kernel / 2)?;
    let mut x = g.add(front, p.front_bias)?;
    for &(w, b) in &p.blocks {
        let n = channel_norm(g, x)?;
        let a = g.leaky_relu(n, cfg.slope)?;
        let c = g.conv1d(a, w, 1, 1)?;
        x = g.add(c, b)?;
    }
    Ok(x)
}

/// Name of the waveform input in graphs built by [`tgram_graph`].
pub const WAVE_INPUT: &str = "wave";

/// A standalone Tgram graph for waveforms of `samples` samples.
pub fn tgram_graph(p: &TgramParams, samples: usize, differentiable: bool) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let wave = g.input(WAVE_INPUT, &[1, samples], false)?;
    let nodes = p.declare(&mut g, differentiable)?;
    let out = tgram_node(&mut g, wave, &p.config, &nodes)?;
    Ok((g, out))
}

pub fn waveform_tensor(w: &Waveform) -> Tensor {
    Tensor::new(vec![1, w.len()], w.samples().to_vec()).expect("non-empty waveform")
}

/// Temporal features learned from the raw waveform, `F × T`.
pub fn tgram(w: &Waveform, p: &TgramParams, mel: &MelConfig) -> Result<Tensor> {
    p.config.check_against(mel)?;
    if w.sample_rate() != mel.sample_rate {
        return Err(Error::Config(format!(
            "waveform sample rate {} differs from {}",
            w.sample_rate(),
            mel.sample_rate
        )));
    }
    let (g, out) = tgram_graph(p, w.len(), false)?;
    let wave = waveform_tensor(w);
    let mut b = Bindings::new().with(WAVE_INPUT, &wave);
    p.bind(&mut b);
    let t = g.evaluate(&b, out)?;
    debug_assert_eq!(t.shape(), &[mel.n_mels, mel.frames(w.len())]);
    Ok(t)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-frame gate `σ(mean_f x[:, t] + max_f x[:, t])` and the gated
/// spectrogram `x_TA[f, t] = gate[t] · x[f, t]`.
pub fn temporal_attention(x_mel: &Spectrogram) -> (Vec<f64>, Tensor) {
    attend(&x_mel.values)
}

pub(crate) fn attend(x: &Tensor) -> (Vec<f64>, Tensor) {
    let (f, t) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let weights: Vec<f64> = (0..t)
        .map(|col| {
            let column = (0..f).map(|row| d[row * t + col]);
            let avg = column.clone().sum::<f64>() / f as f64;
            let max = column.fold(f64::NEG_INFINITY, f64::max);
            sigmoid(avg + max)
        })
        .collect();
    let gated = d
        .iter()
        .enumerate()
        .map(|(i, &v)| v * weights[i % t])
        .collect();
    (weights, Tensor::new(vec![f, t], gated).expect("same shape"))
}

/// Graph form of [`temporal_attention`] for `x: [F, T]`; returns the
/// `[1, T]` gate and the `[F, T]` gated map.
pub fn temporal_attention_node(g: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId)> {
    let avg = g.mean(x, 0)?;
    let max = g.max(x, 0)?;
    let pooled = g.add(avg, max)?;
    let gate = g.sigmoid(pooled)?;
    let gated = g.mul(x, gate)?;
    Ok((gate, gated))
}

/// The 3-channel classifier input, channels ordered (TAgram, Sgram, Tgram).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    tensor: Tensor,
}

impl FeatureStack {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// `(F, T)`
    pub fn dims(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }
}

pub fn stack_features(x_ta: &Tensor, x_mel: &Tensor, x_t: &Tensor) -> Result<FeatureStack> {
    let shape = x_mel.shape();
    if shape.len() != 2 || x_ta.shape() != shape || x_t.shape() != shape {
        return Err(Error::Config(format!(
            "feature shapes differ: TA {:?}, S {:?}, T {:?}",
            x_ta.shape(),
            shape,
            x_t.shape()
        )));
    }
    let mut data = Vec::with_capacity(3 * x_mel.numel());
    for part in [x_ta, x_mel, x_t] {
        data.extend_from_slice(part.data());
    }
    Ok(FeatureStack {
        tensor: Tensor::new(vec![3, shape[0], shape[1]], data)?,
    })
}

/// Graph form of [`stack_features`].
pub fn stack_node(g: &mut Graph, x_ta: NodeId, x_mel: NodeId, x_t: NodeId) -> Result<NodeId> {
    let shape = g.shape(x_mel).to_vec();
    let mut parts = Vec::with_capacity(3);
    for x in [x_ta, x_mel, x_t] {
        let mut s = vec![1];
        s.extend_from_slice(g.shape(x));
        if g.shape(x) != shape.as_slice() {
            return Err(Error::Config(format!(
                "feature shape {:?} differs from {:?}",
                g.shape(x),
                shape
            )));
        }
        parts.push(g.reshape(x, &s)?);
    }
    g.concat(&parts, 0)
}

/// Full feature extraction for one clip.
pub struct FeatureExtractor {
    mel: crate::dsp::MelExtractor,
}

impl FeatureExtractor {
    pub fn new(mel: MelConfig) -> Result<Self> {
        Ok(FeatureExtractor {
            mel: crate::dsp::MelExtractor::new(mel)?,
        })
    }

    pub fn mel_config(&self) -> &MelConfig {
        self.mel.config()
    }

    /// Parameter-free channels: `(x_TA, x_mel)`.
    pub fn static_channels(&self, w: &Waveform) -> Result<(Tensor, Tensor)> {
        let spec = self.mel.log_mel(w)?;
        let (_, ta) = temporal_attention(&spec);
        Ok((ta, spec.values))
    }

    pub fn stack(&self, w: &Waveform, p: &TgramParams) -> Result<FeatureStack> {
        let (ta, mel) = self.static_channels(w)?;
        let t = tgram(w, p, self.mel.config())?;
        stack_features(&ta, &mel, &t)
    }
}
