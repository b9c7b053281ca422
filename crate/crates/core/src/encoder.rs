//! Frozen multi-stage convolutional feature extractor.
//!
//! A seeded random pyramid stands in for a pretrained backbone: weights are
//! drawn once (variance-preserving scaling for the leaky-relu gain) from a
//! recorded seed and never updated. Gradients flow *through* the encoder to
//! its input; the weights themselves receive no updates.
//!
//! Stage widths default to [16, 32, 64, 128] with spatial strides
//! [1, 2, 2, 2], i.e. total downsampling [1, 2, 4, 8].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_ENCODER_SEED: u64 = 1337;
pub const DEFAULT_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const LEAKY_SLOPE: f64 = 0.2;

/// Concatenated per-stage channel means followed by channel standard
/// deviations; length `2 * sum(widths)` (480 for the default encoder).
pub type ArtefactEmbedding<T> = Tensor<T>;

/// Stage feature maps f1..f4 of one encoded image.
#[derive(Debug)]
pub struct EncoderStages<T> {
    pub features: Vec<Tensor<T>>,
}

impl<T: Scalar> EncoderStages<T> {
    /// 1-based stage accessor matching the usual naming (stage 1 = finest).
    pub fn stage(&self, i: usize) -> &Tensor<T> {
        &self.features[i - 1]
    }
}

pub struct Encoder<T> {
    seed: u64,
    widths: Vec<usize>,
    /// (weight [C_out,C_in,3,3], bias [C_out]) per stage.
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(seed: u64) -> Self {
        Self::with_widths(seed, &DEFAULT_WIDTHS)
    }

    pub fn with_widths(seed: u64, widths: &[usize]) -> Self {
        assert!(!widths.is_empty(), "encoder needs at least one stage");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = 3usize;
        for &cout in widths {
            // variance-preserving gain for leaky-relu(0.2)
            let fan_in = (cin * 9) as f64;
            let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
            let w = Tensor::rand_normal(&[cout, cin, 3, 3], std, &mut rng);
            let b = Tensor::zeros(&[cout]);
            layers.push((w, b));
            cin = cout;
        }
        Encoder {
            seed,
            widths: widths.to_vec(),
            layers,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn embedding_len(&self) -> usize {
        2 * self.widths.iter().sum::<usize>()
    }

    /// Raw weight blobs, exposed for frozen-weight assertions.
    pub fn weight_data(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.data(), b.data()])
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [3, h, w] if h % 8 == 0 && w % 8 == 0 => Ok(()),
            [3, h, w] => Err(Error::Shape(format!(
                "encoder input spatial size {h}x{w} must be divisible by 8"
            ))),
            other => Err(Error::Shape(format!(
                "encoder expects [3,H,W], got {other:?}"
            ))),
        }
    }

    /// Records stages 1..=`upto` on the tape and returns their node ids.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        image: NodeId,
        upto: usize,
    ) -> Result<Vec<NodeId>> {
        self.check_input(tape.value(image).shape())?;
        if upto == 0 || upto > self.layers.len() {
            return Err(Error::Config(format!(
                "stage count {upto} outside 1..={}",
                self.layers.len()
            )));
        }
        let slope = T::of_f64(LEAKY_SLOPE);
        let mut stages = Vec::with_capacity(upto);
        let mut x = image;
        for (i, (w, b)) in self.layers.iter().take(upto).enumerate() {
            let wid = tape.leaf(w.clone());
            let bid = tape.leaf(b.clone());
            let stride = if i == 0 { 1 } else { 2 };
            let conv = tape.conv2d(x, wid, bid, stride, 1)?;
            let act = tape.leaky_relu(conv, slope);
            stages.push(act);
            x = act;
        }
        Ok(stages)
    }

    /// Stage features of one image (pure function of seed and input).
    pub fn encode_stages(&self, image: &Tensor<T>) -> Result<EncoderStages<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let ids = self.encode_on_tape(&mut tape, x, self.num_stages())?;
        Ok(EncoderStages {
            features: ids.iter().map(|&id| tape.value(id).clone()).collect(),
        })
    }

    /// Artefact embedding on the tape: all stage channel means, then all
    /// stage channel standard deviations.
    pub fn artefact_embedding_on_tape(&self, tape: &mut Tape<T>, image: NodeId) -> Result<NodeId> {
        let stages = self.encode_on_tape(tape, image, self.num_stages())?;
        let mut mus = Vec::with_capacity(stages.len());
        let mut sigmas = Vec::with_capacity(stages.len());
        for &s in &stages {
            mus.push(tape.channel_mean(s)?);
            sigmas.push(tape.channel_std(s, T::zero())?);
        }
        mus.extend(sigmas);
        tape.concat(&mus)
    }

    pub fn artefact_embedding(&self, image: &Tensor<T>) -> Result<ArtefactEmbedding<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let id = self.artefact_embedding_on_tape(&mut tape, x)?;
        Ok(tape.value(id).clone())
    }

    /// Element-wise mean of per-image embeddings: the per-site target
    /// template used at inference.
    pub fn template_embedding(&self, images: &[Tensor<T>]) -> Result<ArtefactEmbedding<T>> {
        if images.is_empty() {
            return Err(Error::Data("template embedding of an empty image list".into()));
        }
        let mut acc = Tensor::<T>::zeros(&[self.embedding_len()]);
        for img in images {
            let e = self.artefact_embedding(img)?;
            for (a, &v) in acc.data_mut().iter_mut().zip(e.data()) {
                *a += v;
            }
        }
        let inv = T::one() / T::of_usize(images.len());
        Ok(acc.map(|v| v * inv))
    }
}
