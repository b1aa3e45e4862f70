//! Symmetric encoder-decoder with per-scale feature extraction.
//!
//! For an `I x I` input with `L = log2 I`:
//! * stem: 3x3 conv to `base` channels at full resolution;
//! * encoder block `b = 1..=L`: a stride-2 conv doubling the channels, then
//!   `k - 1` stride-1 convs. Block `L` ends at `1 x 1`;
//! * decoder block `b = L..=1`: input is `e_L` (for `b = L`) or the channel
//!   concatenation of the previous decoder output with `e_b`; `k - 1`
//!   stride-1 convs then a stride-2 deconv that halves the channels;
//! * `2L + 1` scale extractors (raw image, every encoder and every decoder
//!   output), each a 3x3 conv to one map, batch-normalized and replicated up
//!   to `I x I`;
//! * two 1x1 heads over the stacked maps: a `C`-channel embedding (followed
//!   by a non-affine batch norm) and a 2-channel classifier + softmax.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormParams, BatchStats, BnMode, ConvParams};
use crate::rng::{random_normal, Rng};
use crate::tensor::Tensor;

/// Which tensor the classification head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    Stack,
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub base_channels: usize,
    pub convs_per_block: usize,
    pub embedding_dim: usize,
    pub ce_head_input: HeadInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            input_channels: 3,
            base_channels: 8,
            convs_per_block: 2,
            embedding_dim: 16,
            ce_head_input: HeadInput::Stack,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad =
            |field: &str, reason: String| Err(Error::config(format!("model.{field}"), reason));
        if self.input_size < 8 || !self.input_size.is_power_of_two() {
            return bad(
                "input_size",
                format!("must be a power of two >= 8, got {}", self.input_size),
            );
        }
        if self.input_channels != 3 {
            return bad(
                "input_channels",
                format!("must be 3, got {}", self.input_channels),
            );
        }
        if self.base_channels == 0 {
            return bad("base_channels", "must be >= 1".into());
        }
        if self.convs_per_block == 0 {
            return bad("convs_per_block", "must be >= 1".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim", "must be >= 1".into());
        }
        if self.base_channels << self.levels() > 1 << 16 {
            return bad("base_channels", "channel ladder overflows".into());
        }
        Ok(())
    }

    /// Number of encoder (and decoder) blocks, `log2(input_size)`.
    pub fn levels(&self) -> usize {
        self.input_size.trailing_zeros() as usize
    }

    pub fn scale_count(&self) -> usize {
        2 * self.levels() + 1
    }

    /// Channel width after encoder block `b` (`b = 0` is the stem).
    pub fn channels(&self, b: usize) -> usize {
        self.base_channels << b
    }
}

/// Convolutional layer count along the trunk: stem, `k` layers per encoder
/// and decoder block (the decoder's deconv included), the raw-image scale
/// extractor and the two heads. Extractors branching off block outputs are
/// side outputs and are not counted.
pub fn depth(config: &ModelConfig) -> usize {
    2 * config.levels() * config.convs_per_block + 4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    Stem,
    Encoder { block: usize },
    Decoder { block: usize },
    Upsample { block: usize },
    Extractor { scale: usize },
    EmbeddingHead,
    CeHead,
}

impl LayerRole {
    /// Whether the layer is counted by [`depth`].
    pub fn on_trunk(self) -> bool {
        !matches!(self, LayerRole::Extractor { scale } if scale > 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub role: LayerRole,
    pub transposed: bool,
    pub conv: ConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
    pub relu: bool,
    /// Standard deviation the weights were drawn with.
    pub init_std: f64,
}

impl<T: Element> Layer<T> {
    fn tensors(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        let bn = self.bn.as_ref();
        [
            Some(("weight", &self.conv.weight)),
            Some(("bias", &self.conv.bias)),
            bn.and_then(|b| b.gamma.as_ref()).map(|g| ("bn.gamma", g)),
            bn.and_then(|b| b.beta.as_ref()).map(|g| ("bn.beta", g)),
        ]
        .into_iter()
        .flatten()
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor<T>)> {
        let (gamma, beta) = match self.bn.as_mut() {
            Some(bn) => (bn.gamma.as_mut(), bn.beta.as_mut()),
            None => (None, None),
        };
        [
            Some(("weight", &mut self.conv.weight)),
            Some(("bias", &mut self.conv.bias)),
            gamma.map(|g| ("bn.gamma", g)),
            beta.map(|g| ("bn.beta", g)),
        ]
        .into_iter()
        .flatten()
    }
}

/// All model parameters plus the configuration they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct MEnetParams<T> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
struct LayerVars {
    w: Var,
    b: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
}

/// Parameters registered on a tape, in [`MEnetParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    layers: Vec<LayerVars>,
}

impl ParamVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [Some(l.w), Some(l.b), l.gamma, l.beta])
            .flatten()
            .collect()
    }
}

/// Tape nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// One `N x 1 x I x I` map per scale: raw image, encoder, decoder.
    pub scales: Vec<Var>,
    pub stack: Var,
    pub embedding: Var,
    pub logits: Var,
    pub probs: Var,
    /// `(layer index, statistics)` for every batch norm run in train mode.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

/// Values of a forward pass, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub scales: Vec<Tensor<T>>,
    pub stack: Tensor<T>,
    pub embedding: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

struct Builder<'a> {
    rng: &'a Rng,
    layers: Vec<Layer<f64>>,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: String,
        role: LayerRole,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        transposed: bool,
        bn: Option<bool>,
        relu: bool,
    ) {
        // deconv: each output sees on average cin * k^2 / stride^2 inputs
        let fan_in = if transposed {
            cin * k * k / (stride * stride)
        } else {
            cin * k * k
        };
        let gain = if relu { 2.0 } else { 1.0 };
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let shape = if transposed {
            [cin, cout, k, k]
        } else {
            [cout, cin, k, k]
        };
        let mut rng = self.rng.split(self.layers.len() as u64);
        let weight = random_normal(&mut rng, &shape, 0.0, std).expect("std is non-negative");
        self.layers.push(Layer {
            name,
            role,
            transposed,
            conv: ConvParams {
                weight,
                bias: Tensor::zeros(&[cout]),
                stride,
                padding: k / 2,
            },
            bn: bn.map(|affine| BatchNormParams::new(cout, affine)),
            relu,
            init_std: std,
        });
    }
}

impl<T: Element> MEnetParams<T> {
    /// Draw fresh parameters: fan-in scaled normal weights, zero biases,
    /// `gamma = 1`, `beta = 0`.
    pub fn build(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        config.validate()?;
        let (l, k) = (config.levels(), config.convs_per_block);
        let ch = |b| config.channels(b);
        let mut bld = Builder {
            rng,
            layers: Vec::new(),
        };
        bld.push(
            "stem".into(),
            LayerRole::Stem,
            config.input_channels,
            ch(0),
            3,
            1,
            false,
            Some(true),
            true,
        );
        for b in 1..=l {
            bld.push(
                format!("enc{b}.0"),
                LayerRole::Encoder { block: b },
                ch(b - 1),
                ch(b),
                3,
                2,
                false,
                Some(true),
                true,
            );
            for j in 1..k {
                bld.push(
                    format!("enc{b}.{j}"),
                    LayerRole::Encoder { block: b },
                    ch(b),
                    ch(b),
                    3,
                    1,
                    false,
                    Some(true),
                    true,
                );
            }
        }
        for b in (1..=l).rev() {
            let mut cin = if b == l { ch(l) } else { 2 * ch(b) };
            for j in 0..k - 1 {
                bld.push(
                    format!("dec{b}.{j}"),
                    LayerRole::Decoder { block: b },
                    cin,
                    ch(b),
                    3,
                    1,
                    false,
                    Some(true),
                    true,
                );
                cin = ch(b);
            }
            bld.push(
                format!("dec{b}.up"),
                LayerRole::Upsample { block: b },
                cin,
                ch(b - 1),
                3,
                2,
                true,
                Some(true),
                true,
            );
        }
        bld.push(
            "ext0".into(),
            LayerRole::Extractor { scale: 0 },
            config.input_channels,
            1,
            3,
            1,
            false,
            Some(true),
            false,
        );
        for s in 1..=2 * l {
            let cin = if s <= l { ch(s) } else { ch(2 * l - s) };
            bld.push(
                format!("ext{s}"),
                LayerRole::Extractor { scale: s },
                cin,
                1,
                3,
                1,
                false,
                Some(true),
                false,
            );
        }
        let scales = config.scale_count();
        bld.push(
            "embed".into(),
            LayerRole::EmbeddingHead,
            scales,
            config.embedding_dim,
            1,
            1,
            false,
            Some(false),
            false,
        );
        let ce_in = match config.ce_head_input {
            HeadInput::Stack => scales,
            HeadInput::Embedding => config.embedding_dim,
        };
        bld.push(
            "ce".into(),
            LayerRole::CeHead,
            ce_in,
            2,
            1,
            1,
            false,
            None,
            false,
        );
        let layers = bld.layers.into_iter().map(|l| l.cast()).collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn cast<U: Element>(&self) -> MEnetParams<U> {
        MEnetParams {
            config: self.config.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Trainable tensors as `(name, tensor)` in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.tensors()
                    .map(move |(n, t)| (format!("{}.{n}", l.name), t))
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut().map(|(_, t)| t))
            .collect()
    }

    /// Batch-norm running statistics as `(name, tensor)`.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(bn) = &l.bn {
                out.push((format!("{}.bn.running_mean", l.name), &bn.running_mean));
                out.push((format!("{}.bn.running_var", l.name), &bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Put every trainable tensor on `tape` as a leaf.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
                let w = leaf(&l.conv.weight);
                let b = leaf(&l.conv.bias);
                let bn = l.bn.as_ref();
                let gamma = bn.and_then(|bn| bn.gamma.as_ref()).map(&mut leaf);
                let beta = bn.and_then(|bn| bn.beta.as_ref()).map(&mut leaf);
                LayerVars { w, b, gamma, beta }
            })
            .collect();
        ParamVars { layers }
    }

    fn apply(
        &self,
        tape: &mut Tape<T>,
        idx: usize,
        x: Var,
        vars: &ParamVars,
        mode: BnMode,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let layer = &self.layers[idx];
        let v = vars.layers[idx];
        let c = &layer.conv;
        let mut y = if layer.transposed {
            nn::deconv2d(tape, x, v.w, Some(v.b), c.stride, c.padding)?
        } else {
            nn::conv2d(tape, x, v.w, Some(v.b), c.stride, c.padding)?
        };
        if let Some(bn) = &layer.bn {
            let (out, s) = nn::batch_norm(tape, y, v.gamma, v.beta, bn, mode)?;
            y = out;
            if let Some(s) = s {
                stats.push((idx, s));
            }
        }
        if layer.relu {
            y = nn::relu(tape, y)?;
        }
        Ok(y)
    }

    /// Record the forward pass of `image` (`N x 3 x I x I`).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        vars: &ParamVars,
        mode: BnMode,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let size = cfg.input_size;
        let (n, c, h, w) = tape.value(image).dims4()?;
        if (c, h, w) != (cfg.input_channels, size, size) {
            return Err(Error::Shape {
                op: "menet forward",
                expected: vec![n, cfg.input_channels, size, size],
                actual: tape.value(image).shape().to_vec(),
            });
        }
        if vars.layers.len() != self.layers.len() {
            return Err(Error::contract(
                "parameter vars were registered for a different model",
            ));
        }
        let (l, k) = (cfg.levels(), cfg.convs_per_block);
        let mut stats = Vec::new();
        let mut idx = 0;
        let mut next = |tape: &mut Tape<T>, x: Var, stats: &mut Vec<_>| {
            let y = self.apply(tape, idx, x, vars, mode, stats);
            idx += 1;
            y
        };

        let mut h = next(tape, image, &mut stats)?;
        let mut enc = Vec::with_capacity(l);
        for _ in 1..=l {
            for _ in 0..k {
                h = next(tape, h, &mut stats)?;
            }
            enc.push(h);
        }
        let mut dec = Vec::with_capacity(l);
        for b in (1..=l).rev() {
            let mut u = if b == l {
                enc[l - 1]
            } else {
                nn::concat_channels(tape, &[h, enc[b - 1]])?
            };
            for _ in 0..k {
                u = next(tape, u, &mut stats)?;
            }
            h = u;
            dec.push(h);
        }

        let sources: Vec<Var> = std::iter::once(image).chain(enc).chain(dec).collect();
        let mut scales = Vec::with_capacity(sources.len());
        for src in sources {
            let m = next(tape, src, &mut stats)?;
            let side = tape.value(m).shape()[2];
            scales.push(nn::replicate_upsample(tape, m, size / side)?);
        }
        let stack = nn::concat_channels(tape, &scales)?;
        let embedding = next(tape, stack, &mut stats)?;
        let ce_in = match cfg.ce_head_input {
            HeadInput::Stack => stack,
            HeadInput::Embedding => embedding,
        };
        let logits = next(tape, ce_in, &mut stats)?;
        let probs = nn::softmax2(tape, logits)?;
        Ok(ForwardVars {
            scales,
            stack,
            embedding,
            logits,
            probs,
            bn_stats: stats,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, image: &Tensor<T>, mode: BnMode) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.forward_on_tape(&mut tape, x, &vars, mode)?;
        Ok(ForwardOutput {
            scales: f.scales.iter().map(|&v| tape.value(v).clone()).collect(),
            stack: tape.value(f.stack).clone(),
            embedding: tape.value(f.embedding).clone(),
            logits: tape.value(f.logits).clone(),
            probs: tape.value(f.probs).clone(),
        })
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (idx, s) in stats {
            if let Some(bn) = self.layers[*idx].bn.as_mut() {
                bn.update_running(s);
            }
        }
    }
}

impl<T: Element> Layer<T> {
    fn cast<U: Element>(&self) -> Layer<U> {
        Layer {
            name: self.name.clone(),
            role: self.role,
            transposed: self.transposed,
            conv: ConvParams {
                weight: self.conv.weight.cast(),
                bias: self.conv.bias.cast(),
                stride: self.conv.stride,
                padding: self.conv.padding,
            },
            bn: self.bn.as_ref().map(|bn| BatchNormParams {
                gamma: bn.gamma.as_ref().map(Tensor::cast),
                beta: bn.beta.as_ref().map(Tensor::cast),
                running_mean: bn.running_mean.cast(),
                running_var: bn.running_var.cast(),
                eps: bn.eps,
                momentum: bn.momentum,
            }),
            relu: self.relu,
            init_std: self.init_std,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            base_channels: 2,
            convs_per_block: 1,
            embedding_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn desk_config_has_thirteen_scales() {
        assert_eq!(ModelConfig::default().scale_count(), 13);
    }

    #[test]
    fn four_convs_per_block_depth_is_52() {
        let cfg = ModelConfig {
            convs_per_block: 4,
            ..ModelConfig::default()
        };
        assert_eq!(depth(&cfg), 52);
        assert_eq!(depth(&ModelConfig::default()), 28);
    }

    #[test]
    fn depth_matches_built_layer_walk() {
        for cfg in [small(), ModelConfig::default()] {
            let p = MEnetParams::<f32>::build(&cfg, &Rng::new(0, 0)).unwrap();
            assert_eq!(
                p.layers.iter().filter(|l| l.role.on_trunk()).count(),
                depth(&cfg)
            );
            assert_eq!(p.layers.len() - depth(&cfg), 2 * cfg.levels());
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        for size in [0, 4, 12, 48] {
            let cfg = ModelConfig {
                input_size: size,
                ..ModelConfig::default()
            };
            assert!(MEnetParams::<f32>::build(&cfg, &Rng::new(0, 0)).is_err());
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MEnetParams::<f32>::build(&small(), &Rng::new(5, 1)).unwrap();
        let b = MEnetParams::<f32>::build(&small(), &Rng::new(5, 1)).unwrap();
        assert_eq!(a, b);
        let c = MEnetParams::<f32>::build(&small(), &Rng::new(6, 1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_shapes_and_probabilities() {
        let cfg = ModelConfig::default();
        let p = MEnetParams::<f32>::build(&cfg, &Rng::new(1, 0)).unwrap();
        let x = Tensor::full(&[1, 3, 64, 64], 0.5f32);
        let out = p.forward(&x, BnMode::Inference).unwrap();
        assert_eq!(out.scales.len(), 13);
        assert_eq!(out.stack.shape(), &[1, 13, 64, 64]);
        assert_eq!(out.embedding.shape(), &[1, 16, 64, 64]);
        assert_eq!(out.probs.shape(), &[1, 2, 64, 64]);
        let hw = 64 * 64;
        for i in 0..hw {
            let s = out.probs.data()[i] + out.probs.data()[hw + i];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_network_gives_zero_embedding_and_even_odds() {
        let mut p = MEnetParams::<f64>::build(&small(), &Rng::new(1, 0)).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = p
            .forward(&Tensor::zeros(&[2, 3, 8, 8]), BnMode::Inference)
            .unwrap();
        assert!(out.embedding.data().iter().all(|&v| v == 0.0));
        assert!(out.probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bottleneck_is_one_by_one() {
        let cfg = small();
        let p = MEnetParams::<f64>::build(&cfg, &Rng::new(1, 0)).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let x = tape.constant(Tensor::full(&[1, 3, 8, 8], 0.3));
        p.forward_on_tape(&mut tape, x, &vars, BnMode::Inference)
            .unwrap();
        // the last encoder layer output is the smallest activation on the tape
        let sizes: Vec<usize> = (0..tape.len())
            .filter_map(|i| {
                let v = tape.value(crate::autodiff::Var::from_index(i));
                (v.shape().len() == 4 && v.shape()[0] == 1).then(|| v.shape()[2])
            })
            .collect();
        assert_eq!(sizes.iter().min(), Some(&1));
    }

    #[test]
    fn init_std_follows_fan_in() {
        let p = MEnetParams::<f64>::build(&ModelConfig::default(), &Rng::new(2, 0)).unwrap();
        for l in p.layers.iter().filter(|l| l.conv.weight.numel() >= 500) {
            let w = l.conv.weight.data();
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(
                (std / l.init_std - 1.0).abs() < 0.1,
                "{} {} {}",
                l.name,
                std,
                l.init_std
            );
        }
    }
}
