//! The invertible harmonization architecture.
//!
//! Forward: per level, squeeze space into channels, then hierarchical
//! subtractive coupling (h_1 = x - a_1, h_i = h_{i-1} - a_i) against an
//! affine tensor predicted by a small conv net; the splits are concatenated
//! into the level output. Artefact-aware normalization (AAN) re-styles the
//! top latent toward a target embedding. Reverse: additive coupling
//! h_n = a_n + b_n, h_i = alpha*(a_i + b_i) + (1-alpha)*h_{i+1}, then
//! unsqueeze, per level in reverse order. With AAN bypassed and alpha forced
//! to one the composition is the identity up to rounding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::shuffle::{squeeze, unsqueeze};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// alpha = sigmoid(rho), one trainable rho per level.
    Learnable,
    /// alpha = 1 exactly; the reverse recurrence collapses to a_i + b_i.
    /// Exists for invertibility verification.
    ForcedOne,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub levels: usize,
    pub splits: usize,
    pub squeeze_factor: usize,
    pub affine_hidden: usize,
    pub aan_hidden: usize,
    pub epsilon: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            levels: 2,
            splits: 3,
            squeeze_factor: 2,
            affine_hidden: 32,
            aan_hidden: 64,
            epsilon: 1e-5,
            alpha_mode: AlphaMode::Learnable,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("flow levels must be >= 1".into()));
        }
        if self.splits < 2 {
            return Err(Error::Config(
                "flow splits must be >= 2 (n = 1 degenerates the hierarchy)".into(),
            ));
        }
        if self.squeeze_factor < 1 {
            return Err(Error::Config("squeeze factor must be >= 1".into()));
        }
        if self.affine_hidden < 1 || self.aan_hidden < 1 {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }

    /// Channels entering each level before its squeeze.
    pub fn level_input_channels(&self) -> Vec<usize> {
        let r2 = self.squeeze_factor * self.squeeze_factor;
        let mut c = INPUT_CHANNELS;
        let mut out = Vec::with_capacity(self.levels);
        for _ in 0..self.levels {
            out.push(c);
            c = c * r2 * self.splits;
        }
        out
    }

    /// Channel count of the top latent.
    pub fn top_channels(&self) -> usize {
        let r2 = self.squeeze_factor * self.squeeze_factor;
        let mut c = INPUT_CHANNELS;
        for _ in 0..self.levels {
            c = c * r2 * self.splits;
        }
        c
    }

    /// Spatial divisibility required of model inputs.
    pub fn required_divisor(&self) -> usize {
        self.squeeze_factor.pow(self.levels as u32)
    }
}

/// Trainable tensors of one flow level: the two-layer affine net plus the
/// raw fusion parameter rho (alpha = sigmoid(rho)).
#[derive(Clone, Debug)]
pub struct LevelParams<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub rho: Tensor<T>,
}

/// AAN heads: target projection, source content head, and the two parallel
/// linear heads emitting per-channel residual gains g_sigma / g_mu.
#[derive(Clone, Debug)]
pub struct AanParams<T> {
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub content_w: Tensor<T>,
    pub content_b: Tensor<T>,
    pub sigma_head_w: Tensor<T>,
    pub sigma_head_b: Tensor<T>,
    pub mu_head_w: Tensor<T>,
    pub mu_head_b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FlowParams<T> {
    pub levels: Vec<LevelParams<T>>,
    pub aan: AanParams<T>,
}

const RHO_INIT: f64 = 3.0; // alpha ~ 0.95 at start

fn he_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + 0.2 * 0.2) * fan_in as f64)).sqrt()
}

impl<T: Scalar> FlowParams<T> {
    /// Training initialization: the final affine-net layers and the AAN
    /// heads start at zero, so the flow begins as the identity map.
    pub fn init(config: &FlowConfig, embedding_len: usize, seed: u64) -> Self {
        Self::build(config, embedding_len, seed, true)
    }

    /// Fully randomized parameters (nonzero coupling), for invertibility and
    /// gradient-check exercises away from the structured identity start.
    pub fn random_init(config: &FlowConfig, embedding_len: usize, seed: u64) -> Self {
        Self::build(config, embedding_len, seed, false)
    }

    fn build(config: &FlowConfig, embedding_len: usize, seed: u64, identity_start: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r2 = config.squeeze_factor * config.squeeze_factor;
        let n = config.splits;
        let hidden = config.affine_hidden;
        let mut levels = Vec::with_capacity(config.levels);
        for c_in in config.level_input_channels() {
            let c_sq = c_in * r2;
            let conv1_w = Tensor::rand_normal(&[hidden, c_sq, 3, 3], he_std(c_sq * 9), &mut rng);
            let conv2_shape = [n * c_sq, hidden, 3, 3];
            let conv2_w = if identity_start {
                // rand state still advances so both inits share a stream shape
                let _ = Tensor::<T>::rand_normal(&conv2_shape, 1.0, &mut rng);
                Tensor::zeros(&conv2_shape)
            } else {
                Tensor::rand_normal(&conv2_shape, he_std(hidden * 9), &mut rng)
            };
            levels.push(LevelParams {
                conv1_w,
                conv1_b: Tensor::zeros(&[hidden]),
                conv2_w,
                conv2_b: Tensor::zeros(&[n * c_sq]),
                rho: Tensor::scalar(T::of_f64(RHO_INIT)),
            });
        }

        let c_top = config.top_channels();
        let ah = config.aan_hidden;
        let proj_w = Tensor::rand_normal(&[ah, embedding_len], (1.0 / embedding_len as f64).sqrt(), &mut rng);
        let content_w = Tensor::rand_normal(&[ah, c_top], (1.0 / c_top as f64).sqrt(), &mut rng);
        let head_shape = [c_top, 2 * ah];
        let (sigma_head_w, mu_head_w) = if identity_start {
            let _ = Tensor::<T>::rand_normal(&head_shape, 1.0, &mut rng);
            let _ = Tensor::<T>::rand_normal(&head_shape, 1.0, &mut rng);
            (Tensor::zeros(&head_shape), Tensor::zeros(&head_shape))
        } else {
            let std = (1.0 / (2 * ah) as f64).sqrt() * 0.5;
            (
                Tensor::rand_normal(&head_shape, std, &mut rng),
                Tensor::rand_normal(&head_shape, std, &mut rng),
            )
        };
        FlowParams {
            levels,
            aan: AanParams {
                proj_w,
                proj_b: Tensor::zeros(&[ah]),
                content_w,
                content_b: Tensor::zeros(&[ah]),
                sigma_head_w,
                sigma_head_b: Tensor::zeros(&[c_top]),
                mu_head_w,
                mu_head_b: Tensor::zeros(&[c_top]),
            },
        }
    }

    /// Stable (name, tensor) enumeration used by the optimizer, checkpoints
    /// and gradient extraction. Order is fixed.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, lvl) in self.levels.iter().enumerate() {
            out.push((format!("level{i}.conv1_w"), &lvl.conv1_w));
            out.push((format!("level{i}.conv1_b"), &lvl.conv1_b));
            out.push((format!("level{i}.conv2_w"), &lvl.conv2_w));
            out.push((format!("level{i}.conv2_b"), &lvl.conv2_b));
            out.push((format!("level{i}.rho"), &lvl.rho));
        }
        let a = &self.aan;
        out.push(("aan.proj_w".into(), &a.proj_w));
        out.push(("aan.proj_b".into(), &a.proj_b));
        out.push(("aan.content_w".into(), &a.content_w));
        out.push(("aan.content_b".into(), &a.content_b));
        out.push(("aan.sigma_head_w".into(), &a.sigma_head_w));
        out.push(("aan.sigma_head_b".into(), &a.sigma_head_b));
        out.push(("aan.mu_head_w".into(), &a.mu_head_w));
        out.push(("aan.mu_head_b".into(), &a.mu_head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for lvl in self.levels.iter_mut() {
            out.push(&mut lvl.conv1_w);
            out.push(&mut lvl.conv1_b);
            out.push(&mut lvl.conv2_w);
            out.push(&mut lvl.conv2_b);
            out.push(&mut lvl.rho);
        }
        let a = &mut self.aan;
        out.push(&mut a.proj_w);
        out.push(&mut a.proj_b);
        out.push(&mut a.content_w);
        out.push(&mut a.content_b);
        out.push(&mut a.sigma_head_w);
        out.push(&mut a.sigma_head_b);
        out.push(&mut a.mu_head_w);
        out.push(&mut a.mu_head_b);
        out
    }

    pub fn cast<U: Scalar>(&self) -> FlowParams<U> {
        FlowParams {
            levels: self
                .levels
                .iter()
                .map(|l| LevelParams {
                    conv1_w: l.conv1_w.cast(),
                    conv1_b: l.conv1_b.cast(),
                    conv2_w: l.conv2_w.cast(),
                    conv2_b: l.conv2_b.cast(),
                    rho: l.rho.cast(),
                })
                .collect(),
            aan: AanParams {
                proj_w: self.aan.proj_w.cast(),
                proj_b: self.aan.proj_b.cast(),
                content_w: self.aan.content_w.cast(),
                content_b: self.aan.content_b.cast(),
                sigma_head_w: self.aan.sigma_head_w.cast(),
                sigma_head_b: self.aan.sigma_head_b.cast(),
                mu_head_w: self.aan.mu_head_w.cast(),
                mu_head_b: self.aan.mu_head_b.cast(),
            },
        }
    }
}

/// Node ids of all parameters after placing them on a tape; `ordered`
/// matches `FlowParams::named_tensors` order.
pub struct FlowBinding {
    pub levels: Vec<[NodeId; 5]>,
    pub aan: [NodeId; 8],
    pub ordered: Vec<NodeId>,
}

pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &FlowParams<T>) -> FlowBinding {
    let mut ordered = Vec::new();
    let mut levels = Vec::new();
    for lvl in &params.levels {
        let ids = [
            tape.leaf(lvl.conv1_w.clone()),
            tape.leaf(lvl.conv1_b.clone()),
            tape.leaf(lvl.conv2_w.clone()),
            tape.leaf(lvl.conv2_b.clone()),
            tape.leaf(lvl.rho.clone()),
        ];
        ordered.extend_from_slice(&ids);
        levels.push(ids);
    }
    let a = &params.aan;
    let aan = [
        tape.leaf(a.proj_w.clone()),
        tape.leaf(a.proj_b.clone()),
        tape.leaf(a.content_w.clone()),
        tape.leaf(a.content_b.clone()),
        tape.leaf(a.sigma_head_w.clone()),
        tape.leaf(a.sigma_head_b.clone()),
        tape.leaf(a.mu_head_w.clone()),
        tape.leaf(a.mu_head_b.clone()),
    ];
    ordered.extend_from_slice(&aan);
    FlowBinding { levels, aan, ordered }
}

/// Per-level cached affine components from one forward pass, needed by the
/// matching reverse pass.
pub struct FlowCache {
    tape_id: u64,
    pub levels: Vec<LevelCache>,
}

pub struct LevelCache {
    pub affine_parts: Vec<NodeId>,
    pub squeezed_channels: usize,
}

/// Subtractive coupling against an injected affine tensor; exposed so tests
/// can drive the recurrence with hand-picked components.
pub fn ihf_forward_with_affine<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    affine: NodeId,
    splits: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let c = tape.value(x).shape()[0];
    let ca = tape.value(affine).shape()[0];
    if ca != splits * c {
        return Err(Error::Shape(format!(
            "affine tensor must have n*C = {} channels, got {ca}",
            splits * c
        )));
    }
    let mut parts = Vec::with_capacity(splits);
    let mut hs = Vec::with_capacity(splits);
    let mut prev = x;
    for i in 0..splits {
        let a_i = tape.narrow(affine, i * c, c)?;
        let h_i = tape.sub(prev, a_i)?;
        parts.push(a_i);
        hs.push(h_i);
        prev = h_i;
    }
    let z = tape.concat(&hs)?;
    Ok((z, parts))
}

/// One level's forward coupling: affine net then subtractive recurrence.
pub fn ihf_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    level: &[NodeId; 5],
    splits: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let slope = T::of_f64(0.2);
    let c1 = tape.conv2d(x, level[0], level[1], 1, 1)?;
    let h = tape.leaky_relu(c1, slope);
    let affine = tape.conv2d(h, level[2], level[3], 1, 1)?;
    ihf_forward_with_affine(tape, x, affine, splits)
}

/// Additive reverse coupling. `alpha` is `Some(node)` for learnable fusion
/// and `None` when alpha is forced to exactly one.
pub fn ihf_reverse<T: Scalar>(
    tape: &mut Tape<T>,
    b: NodeId,
    affine_parts: &[NodeId],
    alpha: Option<NodeId>,
) -> Result<NodeId> {
    let n = affine_parts.len();
    if n < 2 {
        return Err(Error::Shape("reverse coupling needs n >= 2 splits".into()));
    }
    let c = tape.value(affine_parts[0]).shape()[0];
    let cb = tape.value(b).shape()[0];
    if cb != n * c {
        return Err(Error::Shape(format!(
            "reverse input must have n*C = {} channels, got {cb}",
            n * c
        )));
    }
    let one_minus = match alpha {
        Some(a) => {
            let neg = tape.mul_scalar(a, -T::one());
            Some(tape.add_scalar(neg, T::one()))
        }
        None => None,
    };
    let b_last = tape.narrow(b, (n - 1) * c, c)?;
    let mut h = tape.add(affine_parts[n - 1], b_last)?;
    for i in (0..n - 1).rev() {
        let b_i = tape.narrow(b, i * c, c)?;
        let s = tape.add(affine_parts[i], b_i)?;
        h = match (alpha, one_minus) {
            (Some(a), Some(om)) => {
                let sa = tape.scale_by_node(s, a)?;
                let ho = tape.scale_by_node(h, om)?;
                tape.add(sa, ho)?
            }
            _ => s,
        };
    }
    Ok(h)
}

/// Forward composition over all levels: squeeze then coupling, per level.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    binding: &FlowBinding,
    config: &FlowConfig,
) -> Result<(NodeId, FlowCache)> {
    config.validate()?;
    let (c, h, w) = tape.value(x).dims3()?;
    if c != INPUT_CHANNELS {
        return Err(Error::Shape(format!(
            "model input must have {INPUT_CHANNELS} channels, got {c}"
        )));
    }
    let div = config.required_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "model input {h}x{w} must be divisible by {div} (r^L)"
        )));
    }
    let mut cache = FlowCache {
        tape_id: tape.id(),
        levels: Vec::with_capacity(config.levels),
    };
    let mut cur = x;
    for level_ids in &binding.levels {
        let squeezed = tape.squeeze(cur, config.squeeze_factor)?;
        let c_sq = tape.value(squeezed).shape()[0];
        let (z, parts) = ihf_forward(tape, squeezed, level_ids, config.splits)?;
        cache.levels.push(LevelCache {
            affine_parts: parts,
            squeezed_channels: c_sq,
        });
        cur = z;
    }
    Ok((cur, cache))
}

/// Reverse composition: coupling inverse then unsqueeze, levels in reverse.
pub fn model_reverse<T: Scalar>(
    tape: &mut Tape<T>,
    z: NodeId,
    cache: &FlowCache,
    binding: &FlowBinding,
    config: &FlowConfig,
) -> Result<NodeId> {
    if cache.tape_id != tape.id() {
        return Err(Error::Config(
            "flow cache does not belong to this forward pass".into(),
        ));
    }
    if cache.levels.len() != binding.levels.len() {
        return Err(Error::Shape(format!(
            "cache has {} levels, model has {}",
            cache.levels.len(),
            binding.levels.len()
        )));
    }
    let mut cur = z;
    for (level_cache, level_ids) in cache.levels.iter().zip(&binding.levels).rev() {
        let cb = tape.value(cur).shape()[0];
        if cb != config.splits * level_cache.squeezed_channels {
            return Err(Error::Shape(format!(
                "latent has {cb} channels, cache expects {}",
                config.splits * level_cache.squeezed_channels
            )));
        }
        let alpha = match config.alpha_mode {
            AlphaMode::ForcedOne => None,
            AlphaMode::Learnable => Some(tape.sigmoid(level_ids[4])),
        };
        let h = ihf_reverse(tape, cur, &level_cache.affine_parts, alpha)?;
        cur = tape.unsqueeze(h, config.squeeze_factor)?;
    }
    Ok(cur)
}

/// Whiten-then-affine core of AAN with explicit modulation vectors:
/// `(z - mu(z)) / (sigma(z) + eps) * aga_sigma + aga_mu`.
pub fn aan_modulate<T: Scalar>(
    tape: &mut Tape<T>,
    z: NodeId,
    aga_sigma: NodeId,
    aga_mu: NodeId,
    eps: T,
) -> Result<NodeId> {
    let mu = tape.channel_mean(z)?;
    let sigma = tape.channel_std(z, eps)?;
    let shifted = tape.bcast_sub(z, mu)?;
    let denom = tape.add_scalar(sigma, eps);
    let normed = tape.bcast_div(shifted, denom)?;
    let scaled = tape.bcast_mul(normed, aga_sigma)?;
    tape.bcast_add(scaled, aga_mu)
}

/// Artefact-aware normalization. With `bypass` the input node is returned
/// untouched (bit-exact identity).
pub fn aan<T: Scalar>(
    tape: &mut Tape<T>,
    z: NodeId,
    z_s: NodeId,
    aan_ids: &[NodeId; 8],
    eps: T,
    bypass: bool,
) -> Result<NodeId> {
    if bypass {
        return Ok(z);
    }
    let mu = tape.channel_mean(z)?;
    let sigma = tape.channel_std(z, eps)?;

    let gap = tape.channel_mean(z)?;
    let content = tape.linear(gap, aan_ids[2], aan_ids[3])?;
    let proj = tape.linear(z_s, aan_ids[0], aan_ids[1])?;
    let joint = tape.concat(&[content, proj])?;
    let g_sigma = tape.linear(joint, aan_ids[4], aan_ids[5])?;
    let g_mu = tape.linear(joint, aan_ids[6], aan_ids[7])?;

    // residual parameterization around (sigma(z), mu(z))
    let gain = tape.add_scalar(g_sigma, T::one());
    let aga_sigma = tape.mul(sigma, gain)?;
    let aga_mu = tape.add(mu, g_mu)?;

    let shifted = tape.bcast_sub(z, mu)?;
    let denom = tape.add_scalar(sigma, eps);
    let normed = tape.bcast_div(shifted, denom)?;
    let scaled = tape.bcast_mul(normed, aga_sigma)?;
    let out = tape.bcast_add(scaled, aga_mu)?;
    tape.value(out).check_finite("aan output")?;
    Ok(out)
}

/// Full harmonization graph: forward, AAN restyling, reverse, final clamp to
/// the model's [-1, 1] intensity range.
pub fn harmonize_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    z_s: NodeId,
    binding: &FlowBinding,
    config: &FlowConfig,
    bypass_aan: bool,
) -> Result<NodeId> {
    let (z, cache) = model_forward(tape, x, binding, config)?;
    let restyled = aan(tape, z, z_s, &binding.aan, T::of_f64(config.epsilon), bypass_aan)?;
    let xh = model_reverse(tape, restyled, &cache, binding, config)?;
    Ok(tape.clamp(xh, -T::one(), T::one()))
}

/// Config plus parameters: the inference-facing bundle.
pub struct FlowModel<T> {
    pub config: FlowConfig,
    pub params: FlowParams<T>,
}

impl<T: Scalar> FlowModel<T> {
    /// Harmonizes one normalized slice toward the target embedding.
    pub fn harmonize(
        &self,
        x: &Tensor<T>,
        z_s: &Tensor<T>,
        bypass_aan: bool,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let binding = bind_params(&mut tape, &self.params);
        let xid = tape.leaf(x.clone());
        let zs = tape.leaf(z_s.clone());
        let out = harmonize_on_tape(&mut tape, xid, zs, &binding, &self.config, bypass_aan)?;
        Ok(tape.value(out).clone())
    }

    /// Round trip without AAN and with alpha forced to one; the residual is
    /// pure floating-point noise when the architecture is healthy.
    pub fn reconstruction_residual(&self, x: &Tensor<T>) -> Result<T> {
        let mut cfg = self.config.clone();
        cfg.alpha_mode = AlphaMode::ForcedOne;
        let model = FlowModel {
            config: cfg,
            params: self.params.clone(),
        };
        let xh = model.harmonize(x, &Tensor::zeros(&[1]), true)?;
        Ok(xh.max_abs_diff(x))
    }
}
