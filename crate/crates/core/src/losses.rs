//! Mixup sampling and the four angular training objectives.
//!
//! Each loss exists twice: as plain `f64` code over a cosine vector, and as a
//! graph builder used for training. Tests pin one against the other.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Ce,
    Arcface,
    Arcmix,
    NoisyArcmix,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Ce,
        LossVariant::Arcface,
        LossVariant::Arcmix,
        LossVariant::NoisyArcmix,
    ];

    pub fn uses_mixup(self) -> bool {
        matches!(self, LossVariant::Arcmix | LossVariant::NoisyArcmix)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::Arcface => "arcface",
            LossVariant::Arcmix => "arcmix",
            LossVariant::NoisyArcmix => "noisy_arcmix",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss variant {s:?}; expected ce, arcface, arcmix or noisy_arcmix"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin: f64,
    pub scale: f64,
    pub alpha: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.7,
            scale: 30.0,
            alpha: 0.5,
            variant: LossVariant::NoisyArcmix,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin {} outside [0, pi/2]",
                self.margin
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }
}

/// Probability vector over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("soft label must be non-negative and finite".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("soft label sums to {total}")));
        }
        Ok(SoftLabel(p))
    }

    pub fn one_hot(k: usize, y: usize) -> Self {
        let mut p = vec![0.0; k];
        p[y] = 1.0;
        SoftLabel(p)
    }

    /// `λ·onehot(y_i) + (1-λ)·onehot(y_j)`.
    pub fn mixed(k: usize, yi: usize, yj: usize, lambda: f64) -> Self {
        let mut p = vec![0.0; k];
        p[yi] += lambda;
        p[yj] += 1.0 - lambda;
        SoftLabel(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// One mixing coefficient and partner assignment for a minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    pub partner: Vec<usize>,
}

/// `g1 / (g1 + g2)`; Beta(α, α) when both are Gamma(α, 1).
pub fn beta_from_gammas(g1: f64, g2: f64) -> f64 {
    let total = g1 + g2;
    if total > 0.0 {
        g1 / total
    } else {
        // both draws underflowed; the distribution is symmetric
        0.5
    }
}

pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Config(format!("alpha {alpha}: {e}")))?;
    let g1 = gamma.sample(rng);
    let g2 = gamma.sample(rng);
    Ok(beta_from_gammas(g1, g2))
}

/// λ first, then a uniform shuffle of `0..batch` (fixed points allowed).
pub fn draw_mixup<R: Rng + ?Sized>(alpha: f64, batch: usize, rng: &mut R) -> Result<MixupDraw> {
    let lambda = sample_lambda(alpha, rng)?;
    let mut partner: Vec<usize> = (0..batch).collect();
    partner.shuffle(rng);
    Ok(MixupDraw { lambda, partner })
}

pub fn mixup(xi: &Tensor, xj: &Tensor, lambda: f64) -> Result<Tensor> {
    if xi.shape() != xj.shape() {
        return Err(Error::Tensor(format!(
            "cannot mix {:?} with {:?}",
            xi.shape(),
            xj.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let data = xi
        .data()
        .iter()
        .zip(xj.data())
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Tensor::new(xi.shape().to_vec(), data)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `-log softmax(logits)_k` for every k, as `(max - l_k) + ln(1 + rest)` where
/// `rest` sums the exponentials of every non-maximal entry relative to the max.
fn neg_log_softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits
        .iter()
        .enumerate()
        .fold(0, |best, (k, &l)| if l > logits[best] { k } else { best });
    let m = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != top)
        .map(|(_, l)| (l - m).exp())
        .sum();
    logits.iter().map(|l| (m - l) + rest.ln_1p()).collect()
}

/// `-Σ y_k log softmax(logits)_k`.
pub fn cross_entropy(logits: &[f64], y: &SoftLabel) -> f64 {
    neg_log_softmax(logits)
        .iter()
        .zip(y.probs())
        .map(|(n, p)| p * n)
        .sum()
}

pub fn cross_entropy_index(logits: &[f64], y: usize) -> f64 {
    neg_log_softmax(logits)[y]
}

/// `s·cos(θ_k + m·[k = y])`, with the target term expanded by angle addition.
pub fn margin_logits(cos: &[f64], y: usize, cfg: &LossConfig) -> Vec<f64> {
    let (sm, cm) = cfg.margin.sin_cos();
    cos.iter()
        .enumerate()
        .map(|(k, &c)| {
            if k == y {
                let sin = (1.0 - c * c).max(0.0).sqrt();
                cfg.scale * (c * cm - sin * sm)
            } else {
                cfg.scale * c
            }
        })
        .collect()
}

/// Margin-free baseline: cross-entropy on `s·cosθ`.
pub fn ce_loss(cos: &[f64], y: usize, cfg: &LossConfig) -> f64 {
    let logits: Vec<f64> = cos.iter().map(|c| cfg.scale * c).collect();
    cross_entropy_index(&logits, y)
}

pub fn arcface_loss(cos: &[f64], y: usize, cfg: &LossConfig) -> f64 {
    cross_entropy_index(&margin_logits(cos, y, cfg), y)
}

pub fn arcmix_loss(cos: &[f64], yi: usize, yj: usize, lambda: f64, cfg: &LossConfig) -> f64 {
    lambda * arcface_loss(cos, yi, cfg) + (1.0 - lambda) * arcface_loss(cos, yj, cfg)
}

/// Margin on `y_i` only; soft target mixes both labels.
pub fn noisy_arcmix_loss(cos: &[f64], yi: usize, yj: usize, lambda: f64, cfg: &LossConfig) -> f64 {
    let logits = margin_logits(cos, yi, cfg);
    cross_entropy(&logits, &SoftLabel::mixed(cos.len(), yi, yj, lambda))
}

/// Dispatch on `cfg.variant`. `yj` and `lambda` are ignored by ce and arcface.
pub fn loss(cos: &[f64], yi: usize, yj: usize, lambda: f64, cfg: &LossConfig) -> f64 {
    match cfg.variant {
        LossVariant::Ce => ce_loss(cos, yi, cfg),
        LossVariant::Arcface => arcface_loss(cos, yi, cfg),
        LossVariant::Arcmix => arcmix_loss(cos, yi, yj, lambda, cfg),
        LossVariant::NoisyArcmix => noisy_arcmix_loss(cos, yi, yj, lambda, cfg),
    }
}

/// Label inputs of a loss graph: one-hot columns `[K, 1]` and λ as `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct LabelNodes {
    pub onehot_i: NodeId,
    pub onehot_j: NodeId,
    pub lambda: NodeId,
}

pub const ONEHOT_I: &str = "onehot_i";
pub const ONEHOT_J: &str = "onehot_j";
pub const LAMBDA: &str = "lambda";

pub fn declare_labels(g: &mut Graph, n_classes: usize) -> Result<LabelNodes> {
    Ok(LabelNodes {
        onehot_i: g.input(ONEHOT_I, &[n_classes, 1], false)?,
        onehot_j: g.input(ONEHOT_J, &[n_classes, 1], false)?,
        lambda: g.input(LAMBDA, &[1], false)?,
    })
}

pub fn one_hot_column(k: usize, y: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k, 1]);
    t.data_mut()[y] = 1.0;
    t
}

fn margin_logits_node(g: &mut Graph, cos: NodeId, onehot: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let (sm, cm) = cfg.margin.sin_cos();
    let sq = g.mul(cos, cos)?;
    let one_minus = g.affine(sq, -1.0, 1.0)?;
    let sin = g.sqrt(one_minus)?;
    let a = g.scale(cos, cm)?;
    let b = g.scale(sin, sm)?;
    let shifted = g.sub(a, b)?;
    let delta = g.sub(shifted, cos)?;
    let masked = g.mul(delta, onehot)?;
    let c = g.add(cos, masked)?;
    g.scale(c, cfg.scale)
}

fn soft_ce_node(g: &mut Graph, logits: NodeId, target: NodeId) -> Result<NodeId> {
    g.softmax_cross_entropy(logits, target)
}

/// Scalar loss graph over clamped cosines `cos: [K, 1]`.
pub fn loss_node(g: &mut Graph, cos: NodeId, labels: &LabelNodes, cfg: &LossConfig) -> Result<NodeId> {
    match cfg.variant {
        LossVariant::Ce => {
            let logits = g.scale(cos, cfg.scale)?;
            soft_ce_node(g, logits, labels.onehot_i)
        }
        LossVariant::Arcface => {
            let logits = margin_logits_node(g, cos, labels.onehot_i, cfg)?;
            soft_ce_node(g, logits, labels.onehot_i)
        }
        LossVariant::Arcmix => {
            let li = margin_logits_node(g, cos, labels.onehot_i, cfg)?;
            let ci = soft_ce_node(g, li, labels.onehot_i)?;
            let lj = margin_logits_node(g, cos, labels.onehot_j, cfg)?;
            let cj = soft_ce_node(g, lj, labels.onehot_j)?;
            let wi = g.mul(ci, labels.lambda)?;
            let rest = g.affine(labels.lambda, -1.0, 1.0)?;
            let wj = g.mul(cj, rest)?;
            g.add(wi, wj)
        }
        LossVariant::NoisyArcmix => {
            let logits = margin_logits_node(g, cos, labels.onehot_i, cfg)?;
            let ti = g.mul(labels.onehot_i, labels.lambda)?;
            let rest = g.affine(labels.lambda, -1.0, 1.0)?;
            let tj = g.mul(labels.onehot_j, rest)?;
            let target = g.add(ti, tj)?;
            soft_ce_node(g, logits, target)
        }
    }
}
