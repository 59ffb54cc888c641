//! Graph building blocks shared by the Tgram network and the backbone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Variance floor of the per-channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Normalize each row of `x: [C, P]` to zero mean and unit variance.
pub fn channel_norm(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let mean = g.mean(x, 1)?;
    let centered = g.sub(x, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean(sq, 1)?;
    let shifted = g.affine(var, 1.0, NORM_EPS)?;
    let std = g.sqrt(shifted)?;
    g.div(centered, std)
}

/// Glorot-uniform tensor: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Declare an input for every named tensor, in order.
pub fn declare_params<'t>(
    g: &mut Graph,
    params: impl IntoIterator<Item = (String, &'t Tensor)>,
    differentiable: bool,
) -> Result<Vec<NodeId>> {
    params
        .into_iter()
        .map(|(name, t)| g.input(&name, t.shape(), differentiable))
        .collect()
}
