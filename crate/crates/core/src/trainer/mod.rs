//! Seeded minibatch training with AdamW.
//!
//! A step runs in three phases so the waveform network is evaluated once per
//! clip even though each clip can appear in two mixed pairs:
//! 1. Tgram forward for every clip of the batch, keeping the evaluations;
//! 2. per pair, the classifier graph over the mixed stack, which yields
//!    parameter gradients and the upstream gradient for each Tgram output;
//! 3. Tgram backward per clip seeded with its accumulated upstream gradient.
//!
//! Reduction follows batch order, so a run is a pure function of its inputs.

mod adamw;
mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adamw::{adamw_step, AdamHyper, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorMeta, FORMAT_VERSION,
    MAGIC,
};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};
use crate::data::{make_batches, Manifest, Split};
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::features::{stack_node, tgram_graph, waveform_tensor, FeatureExtractor, WAVE_INPUT};
use crate::losses::{
    declare_labels, draw_mixup, loss_node, one_hot_column, LossConfig, MixupDraw, LAMBDA, ONEHOT_I,
    ONEHOT_J,
};
use crate::model::{backbone_node, cosine_node, init_params, Model, ModelDims, HEAD_WEIGHT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = AdamHyper::default();
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            learning_rate: h.lr,
            weight_decay: h.weight_decay,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        for (name, v) in [
            ("learning rate", self.learning_rate),
            ("weight decay", self.weight_decay),
            ("eps", self.eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// A train clip with its parameter-free channels precomputed.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub record: usize,
    pub class: usize,
    pub wave: Tensor,
    pub ta: Tensor,
    pub mel: Tensor,
}

#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub samples: usize,
    pub clips: Vec<PreparedClip>,
}

/// Loads every train clip. All clips must share one length, because graphs
/// are built for a fixed shape.
pub fn prepare(manifest: &Manifest, fx: &FeatureExtractor) -> Result<PreparedSet> {
    let mut clips = Vec::new();
    let mut samples = None;
    for (i, r) in manifest.records.iter().enumerate() {
        if r.split != Split::Train {
            continue;
        }
        let w = r.load(&manifest.base_dir)?;
        match samples {
            None => samples = Some(w.len()),
            Some(n) if n != w.len() => {
                return Err(Error::Config(format!(
                    "train clips must share one length: found {n} and {} samples",
                    w.len()
                )))
            }
            _ => {}
        }
        let (ta, mel) = fx.static_channels(&w)?;
        clips.push(PreparedClip {
            record: i,
            class: manifest.class_of(r)?,
            wave: waveform_tensor(&w),
            ta,
            mel,
        });
    }
    let samples = samples.ok_or_else(|| Error::Config("manifest has no train records".into()))?;
    Ok(PreparedSet { samples, clips })
}

const SIDES: [&str; 2] = ["i", "j"];

fn side_name(channel: &str, side: &str) -> String {
    format!("{channel}_{side}")
}

/// Mixed-input classifier and loss for one pair of clips.
struct ClassifierGraph {
    graph: Graph,
    loss: NodeId,
    mixing: bool,
}

impl ClassifierGraph {
    fn build(model: &Model, f: usize, t: usize, cfg: &LossConfig) -> Result<Self> {
        let mixing = cfg.variant.uses_mixup();
        let mut g = Graph::new();
        let labels = declare_labels(&mut g, model.dims.n_classes)?;
        let sides = if mixing { &SIDES[..] } else { &SIDES[..1] };
        let mut stacks = Vec::new();
        for side in sides {
            let ta = g.input(&side_name("ta", side), &[f, t], false)?;
            let mel = g.input(&side_name("mel", side), &[f, t], false)?;
            let tg = g.input(&side_name("tgram", side), &[f, t], true)?;
            stacks.push(stack_node(&mut g, ta, mel, tg)?);
        }
        let x = if mixing {
            let a = g.mul(stacks[0], labels.lambda)?;
            let rest = g.affine(labels.lambda, -1.0, 1.0)?;
            let b = g.mul(stacks[1], rest)?;
            g.add(a, b)?
        } else {
            stacks[0]
        };
        let nodes = model.backbone.declare(&mut g, true)?;
        let head = g.input(HEAD_WEIGHT, model.head.weight.shape(), true)?;
        let h = backbone_node(&mut g, x, &model.dims.backbone, &nodes)?;
        let cos = cosine_node(&mut g, h, head)?;
        let loss = loss_node(&mut g, cos, &labels, cfg)?;
        Ok(ClassifierGraph {
            graph: g,
            loss,
            mixing,
        })
    }
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, name: &str, g: &Tensor) {
    match into.get_mut(name) {
        Some(t) => t.add_assign(g),
        None => {
            into.insert(name.to_string(), g.clone());
        }
    }
}

/// Loss sum over the batch and the gradient of the batch-mean loss.
fn batch_gradients(
    model: &Model,
    set: &PreparedSet,
    tgram: &(Graph, NodeId),
    cg: &ClassifierGraph,
    members: &[usize],
    draw: Option<&MixupDraw>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let b = members.len();
    let k = model.dims.n_classes;

    let mut evals = Vec::with_capacity(b);
    for &m in members {
        let mut bind = Bindings::new().with(WAVE_INPUT, &set.clips[m].wave);
        model.tgram.bind(&mut bind);
        evals.push(tgram.0.forward(&bind)?);
    }
    let out_shape = tgram.0.shape(tgram.1).to_vec();
    let mut upstream: Vec<Tensor> = (0..b).map(|_| Tensor::zeros(&out_shape)).collect();

    let mut grads = BTreeMap::new();
    let mut loss_sum = 0.0;
    let seed = Tensor::scalar(1.0 / b as f64);
    for slot in 0..b {
        let partner = draw.map_or(slot, |d| d.partner[slot]);
        let (ci, cj) = (&set.clips[members[slot]], &set.clips[members[partner]]);
        let onehot_i = one_hot_column(k, ci.class);
        let onehot_j = one_hot_column(k, cj.class);
        let lambda = Tensor::scalar(draw.map_or(1.0, |d| d.lambda));
        let mut bind = Bindings::new()
            .with(ONEHOT_I, &onehot_i)
            .with(ONEHOT_J, &onehot_j)
            .with(LAMBDA, &lambda)
            .with(HEAD_WEIGHT, &model.head.weight);
        for (name, t) in model.backbone.named_tensors() {
            bind.insert(name, t);
        }
        let pair = [(slot, ci), (partner, cj)];
        let used = if cg.mixing { &pair[..] } else { &pair[..1] };
        for (&(at, clip), side) in used.iter().zip(SIDES) {
            bind.insert(side_name("ta", side), &clip.ta);
            bind.insert(side_name("mel", side), &clip.mel);
            bind.insert(side_name("tgram", side), evals[at].value(tgram.1));
        }
        let eval = cg.graph.forward(&bind)?;
        loss_sum += eval.value(cg.loss).item();
        let mut g = eval.backward(cg.loss, &seed)?;
        for (&(at, _), side) in used.iter().zip(SIDES) {
            let up = g.remove(&side_name("tgram", side)).expect("tgram input is differentiable");
            upstream[at].add_assign(&up);
        }
        for (name, t) in g.iter() {
            accumulate(&mut grads, name, t);
        }
    }

    for (eval, up) in evals.iter().zip(&upstream) {
        let g = eval.backward(tgram.1, up)?;
        for (name, t) in g.iter() {
            accumulate(&mut grads, name, t);
        }
    }
    Ok((loss_sum, grads))
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
    /// Mixing coefficient of every batch in order; empty without mixup.
    pub lambdas: Vec<f64>,
    pub rng_digest: String,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut h = Sha256::new();
    h.update(rng.get_seed());
    h.update(rng.get_stream().to_le_bytes());
    h.update(rng.get_word_pos().to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

const MIXUP_STREAM: u64 = 3;

/// Trains `model` in place on a prepared set.
pub fn train_on(
    mut model: Model,
    manifest: &Manifest,
    set: &PreparedSet,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let (f, t) = (set.clips[0].mel.shape()[0], set.clips[0].mel.shape()[1]);
    let tgram = tgram_graph(&model.tgram, set.samples, true)?;
    if tgram.0.shape(tgram.1) != [f, t] {
        return Err(Error::Config(format!(
            "Tgram output {:?} does not match the log-mel shape [{f}, {t}]",
            tgram.0.shape(tgram.1)
        )));
    }
    let cg = ClassifierGraph::build(&model, f, t, &config.loss)?;
    let by_record: BTreeMap<usize, usize> =
        set.clips.iter().enumerate().map(|(p, c)| (c.record, p)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(MIXUP_STREAM);
    let hyper = config.hyper();
    let mut state = AdamState::default();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut lambdas = Vec::new();

    for epoch in 0..config.epochs {
        let batches = make_batches(manifest, config.batch_size, epoch_seed(config.seed, epoch))?;
        let mut total = 0.0;
        let mut count = 0;
        for (bi, batch) in batches.iter().enumerate() {
            let members: Vec<usize> = batch
                .items
                .iter()
                .map(|(r, _)| {
                    by_record
                        .get(r)
                        .copied()
                        .ok_or_else(|| Error::Config(format!("record {r} was not prepared")))
                })
                .collect::<Result<_>>()?;
            let draw = if config.loss.variant.uses_mixup() {
                let d = draw_mixup(config.loss.alpha, members.len(), &mut rng)?;
                lambdas.push(d.lambda);
                Some(d)
            } else {
                None
            };
            let non_finite = Error::NonFiniteLoss { epoch, batch: bi };
            let (loss_sum, grads) =
                match batch_gradients(&model, set, &tgram, &cg, &members, draw.as_ref()) {
                    Err(Error::NonFinite { .. }) => return Err(non_finite),
                    other => other?,
                };
            if !loss_sum.is_finite() {
                return Err(non_finite);
            }
            adamw_step(model.named_tensors_mut(), &grads, &mut state, &hyper)?;
            total += loss_sum;
            count += members.len();
        }
        let mean = total / count as f64;
        log::info!("epoch {} mean loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        model,
        epoch_losses,
        lambdas,
        rng_digest: rng_digest(&rng),
    })
}

/// Initializes from `config.seed`, trains, and packs a checkpoint.
pub fn train_with_dims(
    manifest: &Manifest,
    dims: &ModelDims,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    if dims.n_classes != manifest.n_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, manifest {}",
            dims.n_classes,
            manifest.n_classes()
        )));
    }
    let fx = FeatureExtractor::new(dims.mel.clone())?;
    let set = prepare(manifest, &fx)?;
    let model = init_params(config.seed, dims)?;
    let report = train_on(model, manifest, &set, config)?;
    let ckpt = Checkpoint::from_model(
        &report.model,
        manifest.class_map.clone(),
        config.clone(),
        report.rng_digest.clone(),
    );
    Ok((ckpt, report))
}

/// Default architecture for `mel`, one class per manifest machine.
pub fn train(manifest: &Manifest, mel: MelConfig, config: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    train_with_dims(manifest, &ModelDims::new(mel, manifest.n_classes()), config)
}

/// `epoch,mean_loss` with 1-based epochs.
pub fn write_loss_log(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_loss"])?;
    for (e, l) in losses.iter().enumerate() {
        w.write_record([(e + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
