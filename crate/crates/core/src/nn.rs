//! Trainable layers: linear, 3-D convolution, batch norm, residual
//! blocks, and the volumetric / clinical encoders.
//!
//! Layers are plain value objects. Weights are He-uniform, biases zero,
//! batch-norm gamma one and beta zero. Mutation happens only through
//! the optimizer on a single training thread.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cbam::CbamBlock;
use crate::error::{Error, Result};
use crate::tensor::{elem, Element, PoolKind, Tape, Tensor};

/// Batch-norm behavior switch: train mode normalizes by batch statistics
/// and updates running stats; eval mode uses running stats only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn he_uniform<T: Element>(rng: &mut ChaCha8Rng, fan_in: usize, shape: Vec<usize>) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| elem::<T>(rng.random_range(-limit..limit))).collect();
    Tensor::new_unchecked(shape, data).with_grad()
}

/// Fully connected layer computing `x · Wᵀ + b`.
#[derive(Clone)]
pub struct LinearLayer<T: Element> {
    pub weight: Tensor<T>, // [out, in]
    pub bias: Tensor<T>,   // [out]
}

impl<T: Element> LinearLayer<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            weight: he_uniform(rng, in_features, vec![out_features, in_features]),
            bias: Tensor::zeros(vec![out_features]).with_grad(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[1] != self.in_features() {
            return Err(Error::shape(
                "linear_forward",
                format!("input {:?} vs weight {:?}", x.shape(), self.weight.shape()),
            ));
        }
        let wt = tape.transpose(&self.weight)?;
        let xw = tape.matmul(x, &wt)?;
        tape.bias_add_rows(&xw, &self.bias)
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// 3-D convolution layer (cross-correlation, zero padding).
#[derive(Clone)]
pub struct Conv3dLayer<T: Element> {
    pub weight: Tensor<T>, // [out, in, k, k, k]
    pub bias: Tensor<T>,   // [out]
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv3dLayer<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel * kernel;
        Conv3dLayer {
            weight: he_uniform(rng, fan_in, vec![out_channels, in_channels, kernel, kernel, kernel]),
            bias: Tensor::zeros(vec![out_channels]).with_grad(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tape.conv3d(x, &self.weight, &self.bias, self.stride, self.padding)
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Per-channel batch normalization over `[N,C,D,H,W]`.
#[derive(Clone)]
pub struct BatchNorm3d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: Mode,
}

impl<T: Element> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Tensor::ones(vec![channels]).with_grad(),
            beta: Tensor::zeros(vec![channels]).with_grad(),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: elem(0.1),
            eps: elem(1e-5),
            mode: Mode::Train,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
                let keep = T::one() - self.momentum;
                for c in 0..self.running_mean.len() {
                    self.running_mean[c] = keep * self.running_mean[c] + self.momentum * mean[c];
                    self.running_var[c] = keep * self.running_var[c] + self.momentum * var[c];
                }
                Ok(y)
            }
            Mode::Eval => {
                tape.batch_norm_eval(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var, self.eps)
            }
        }
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }

    pub(crate) fn visit_stats<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((format!("{prefix}.running_mean"), &self.running_mean));
        out.push((format!("{prefix}.running_var"), &self.running_var));
    }

    pub(crate) fn visit_stats_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((format!("{prefix}.running_mean"), &mut self.running_mean));
        out.push((format!("{prefix}.running_var"), &mut self.running_var));
    }
}

/// Two 3x3x3 convolutions with batch norm, plus an optional 1x1x1
/// projection on the skip path when channels or stride change.
/// Forward is `relu(main + skip)`.
#[derive(Clone)]
pub struct ResidualBlock<T: Element> {
    pub conv1: Conv3dLayer<T>,
    pub bn1: BatchNorm3d<T>,
    pub conv2: Conv3dLayer<T>,
    pub bn2: BatchNorm3d<T>,
    pub proj: Option<Conv3dLayer<T>>,
}

impl<T: Element> ResidualBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = (stride != 1 || in_channels != out_channels)
            .then(|| Conv3dLayer::new(in_channels, out_channels, 1, stride, 0, rng));
        ResidualBlock {
            conv1: Conv3dLayer::new(in_channels, out_channels, 3, stride, 1, rng),
            bn1: BatchNorm3d::new(out_channels),
            conv2: Conv3dLayer::new(out_channels, out_channels, 3, 1, 1, rng),
            bn2: BatchNorm3d::new(out_channels),
            proj,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, &y)?;
        let y = tape.relu(&y)?;
        let y = self.conv2.forward(tape, &y)?;
        let main = self.bn2.forward(tape, &y)?;
        let skip = match &self.proj {
            Some(p) => p.forward(tape, x)?,
            None => x.clone(),
        };
        let sum = tape.add(&main, &skip)?;
        tape.relu(&sum)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.bn1.mode = mode;
        self.bn2.mode = mode;
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), out);
        self.bn1.visit_params(&format!("{prefix}.bn1"), out);
        self.conv2.visit_params(&format!("{prefix}.conv2"), out);
        self.bn2.visit_params(&format!("{prefix}.bn2"), out);
        if let Some(p) = &self.proj {
            p.visit_params(&format!("{prefix}.proj"), out);
        }
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.conv1.visit_params_mut(&format!("{prefix}.conv1"), out);
        self.bn1.visit_params_mut(&format!("{prefix}.bn1"), out);
        self.conv2.visit_params_mut(&format!("{prefix}.conv2"), out);
        self.bn2.visit_params_mut(&format!("{prefix}.bn2"), out);
        if let Some(p) = &mut self.proj {
            p.visit_params_mut(&format!("{prefix}.proj"), out);
        }
    }

    pub(crate) fn visit_stats<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.bn1.visit_stats(&format!("{prefix}.bn1"), out);
        self.bn2.visit_stats(&format!("{prefix}.bn2"), out);
    }

    pub(crate) fn visit_stats_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.bn1.visit_stats_mut(&format!("{prefix}.bn1"), out);
        self.bn2.visit_stats_mut(&format!("{prefix}.bn2"), out);
    }
}

/// Volumetric encoder: 7x7x7 stride-2 stem with batch norm, relu and
/// 2x2x2 max pooling, staged residual blocks, optional attention block
/// on the final feature map, global average pooling, and a linear
/// projection to the shared embedding width.
pub struct VolumeEncoder<T: Element> {
    pub stem: Conv3dLayer<T>,
    pub stem_bn: BatchNorm3d<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub cbam: Option<CbamBlock<T>>,
    pub proj: LinearLayer<T>,
    pub min_input: usize,
}

impl<T: Element> VolumeEncoder<T> {
    /// `widths[i]` is the channel count of stage `i`; `blocks_per[i]`
    /// its block count. Stage 0 keeps spatial extent, later stages
    /// halve it.
    pub fn new(
        widths: &[usize],
        blocks_per: &[usize],
        embed_dim: usize,
        cbam: Option<CbamBlock<T>>,
        min_input: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.is_empty() || widths.len() != blocks_per.len() {
            return Err(Error::ConfigError(format!(
                "encoder stage widths {widths:?} and block counts {blocks_per:?} must be non-empty and equal length"
            )));
        }
        let mut blocks = Vec::new();
        let mut in_ch = widths[0];
        for (stage, (&w, &count)) in widths.iter().zip(blocks_per).enumerate() {
            if count == 0 {
                return Err(Error::ConfigError("every stage needs at least one block".into()));
            }
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(in_ch, w, stride, rng));
                in_ch = w;
            }
        }
        Ok(VolumeEncoder {
            stem: Conv3dLayer::new(1, widths[0], 7, 2, 3, rng),
            stem_bn: BatchNorm3d::new(widths[0]),
            blocks,
            cbam,
            proj: LinearLayer::new(in_ch, embed_dim, rng),
            min_input,
        })
    }

    /// Embeds `[N,1,D,H,W]` into `[N,m]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match x.shape() {
            [_, 1, d, h, w] => {
                if *d < self.min_input || *h < self.min_input || *w < self.min_input {
                    return Err(Error::InputTooSmall {
                        got: vec![*d, *h, *w],
                        min: self.min_input,
                    });
                }
            }
            s => {
                return Err(Error::shape(
                    "encode_volume",
                    format!("expected [N,1,D,H,W], got {s:?}"),
                ))
            }
        }
        let y = self.stem.forward(tape, x)?;
        let y = self.stem_bn.forward(tape, &y)?;
        let y = tape.relu(&y)?;
        let mut y = tape.pool3d(PoolKind::Max, &y, 2, 2)?;
        for blk in &mut self.blocks {
            y = blk.forward(tape, &y)?;
        }
        if let Some(cbam) = &self.cbam {
            y = cbam.forward(tape, &y)?;
        }
        let pooled = tape.global_pool(PoolKind::Avg, &y)?;
        self.proj.forward(tape, &pooled)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.stem_bn.mode = mode;
        for blk in &mut self.blocks {
            blk.set_mode(mode);
        }
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.stem.visit_params(&format!("{prefix}.stem"), out);
        self.stem_bn.visit_params(&format!("{prefix}.stem_bn"), out);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit_params(&format!("{prefix}.block{i}"), out);
        }
        if let Some(cbam) = &self.cbam {
            cbam.visit_params(&format!("{prefix}.cbam"), out);
        }
        self.proj.visit_params(&format!("{prefix}.proj"), out);
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.stem.visit_params_mut(&format!("{prefix}.stem"), out);
        self.stem_bn.visit_params_mut(&format!("{prefix}.stem_bn"), out);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_params_mut(&format!("{prefix}.block{i}"), out);
        }
        if let Some(cbam) = &mut self.cbam {
            cbam.visit_params_mut(&format!("{prefix}.cbam"), out);
        }
        self.proj.visit_params_mut(&format!("{prefix}.proj"), out);
    }

    pub(crate) fn visit_stats<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.stem_bn.visit_stats(&format!("{prefix}.stem_bn"), out);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.visit_stats(&format!("{prefix}.block{i}"), out);
        }
    }

    pub(crate) fn visit_stats_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.stem_bn.visit_stats_mut(&format!("{prefix}.stem_bn"), out);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_stats_mut(&format!("{prefix}.block{i}"), out);
        }
    }
}

/// Encoder for the clinical feature vector: a stack of linear layers
/// with relu after every layer (a single identity layer therefore
/// yields `relu(x)`).
#[derive(Clone)]
pub struct ClinicalEncoder<T: Element> {
    pub layers: Vec<LinearLayer<T>>,
}

impl<T: Element> ClinicalEncoder<T> {
    /// Default shape: one hidden layer of width `2 * embed_dim`.
    pub fn new(features: usize, embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_hidden(features, &[2 * embed_dim], embed_dim, rng)
    }

    pub fn with_hidden(features: usize, hidden: &[usize], embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut prev = features;
        for &h in hidden {
            layers.push(LinearLayer::new(prev, h, rng));
            prev = h;
        }
        layers.push(LinearLayer::new(prev, embed_dim, rng));
        ClinicalEncoder { layers }
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for layer in &self.layers {
            let lin = layer.forward(tape, &y)?;
            y = tape.relu(&lin)?;
        }
        Ok(y)
    }

    pub(crate) fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&format!("{prefix}.layer{i}"), out);
        }
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("{prefix}.layer{i}"), out);
        }
    }
}
