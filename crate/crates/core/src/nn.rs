//! Gated convolutional classifier.
//!
//! Every conv output channel is multiplied by a trainable scalar gate. The
//! gate stands in for its whole filter: its gradient times its value is the
//! filter's first-order saliency, and masking it to zero is equivalent to
//! removing the filter.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"PLDG";
const CHECKPOINT_VERSION: u32 = 1;

/// Where the gate sits relative to the ReLU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePlacement {
    /// conv -> relu -> gate
    #[default]
    AfterActivation,
    /// conv -> gate -> relu
    BeforeActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels per conv block.
    pub channels: Vec<usize>,
    /// Square kernel size per conv block.
    pub kernel_sizes: Vec<usize>,
    pub n_classes: usize,
    pub gate_placement: GatePlacement,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 16,
            width: 16,
            channels: vec![16, 32, 32],
            kernel_sizes: vec![3, 3, 3],
            n_classes: 4,
            gate_placement: GatePlacement::AfterActivation,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("architecture: {msg}")));
        if self.channels.is_empty() {
            return bad("at least one conv block required".into());
        }
        if self.channels.len() != self.kernel_sizes.len() {
            return bad(format!(
                "{} channel counts but {} kernel sizes",
                self.channels.len(),
                self.kernel_sizes.len()
            ));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c < 2) {
            return bad(format!("every block needs at least 2 channels, got {c}"));
        }
        if self.in_channels == 0 || self.n_classes < 2 {
            return bad("need at least one input channel and two classes".into());
        }
        let (mut h, mut w) = (self.height, self.width);
        for &k in &self.kernel_sizes {
            if k == 0 || k > h || k > w {
                return bad(format!("kernel {k} does not fit a {h}x{w} feature map"));
            }
            h = h - k + 1;
            w = w - k + 1;
        }
        Ok(())
    }

    /// Total number of filters M.
    pub fn total_filters(&self) -> usize {
        self.channels.iter().sum()
    }
}

/// Index of one filter: conv block and output channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FilterId {
    pub layer: usize,
    pub channel: usize,
}

impl FilterId {
    pub fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

/// Per-channel gates of one conv block with their pruned flags.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector<S> {
    values: Vec<S>,
    pruned: Vec<bool>,
}

impl<S: Scalar> GateVector<S> {
    pub fn ones(n: usize) -> Self {
        Self {
            values: vec![S::one(); n],
            pruned: vec![false; n],
        }
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn pruned_mask(&self) -> &[bool] {
        &self.pruned
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.pruned.iter().filter(|&&p| !p).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<S> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
    pub gates: GateVector<S>,
}

/// Identifies one parameter tensor in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamId {
    Kernel(usize),
    Bias(usize),
    Gates(usize),
    HeadWeight,
    HeadBias,
}

/// Tape handles of every parameter registered for one forward pass.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub kernels: Vec<Var>,
    pub biases: Vec<Var>,
    pub gates: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ParamVars {
    pub fn var(&self, id: ParamId) -> Var {
        match id {
            ParamId::Kernel(l) => self.kernels[l],
            ParamId::Bias(l) => self.biases[l],
            ParamId::Gates(l) => self.gates[l],
            ParamId::HeadWeight => self.head_weight,
            ParamId::HeadBias => self.head_bias,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub params: ParamVars,
    /// Pooled penultimate features `[B, C_last]`.
    pub features: Var,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedModel<S> {
    arch: ArchConfig,
    blocks: Vec<ConvBlock<S>>,
    head_weight: Tensor<S>,
    head_bias: Tensor<S>,
}

impl<S: Scalar> GatedModel<S> {
    /// Deterministic initialization: He-normal kernels, zero biases, unit gates.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(arch.channels.len());
        let mut in_ch = arch.in_channels;
        for (&out_ch, &k) in arch.channels.iter().zip(&arch.kernel_sizes) {
            let fan_in = in_ch * k * k;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let values = (0..out_ch * fan_in).map(|_| S::of(normal.sample(&mut rng))).collect();
            blocks.push(ConvBlock {
                kernel: Tensor::new(vec![out_ch, in_ch, k, k], values)?,
                bias: Tensor::zeros(vec![out_ch]),
                gates: GateVector::ones(out_ch),
            });
            in_ch = out_ch;
        }
        let normal = Normal::new(0.0, (1.0 / in_ch as f64).sqrt()).expect("finite std");
        let head = (0..arch.n_classes * in_ch).map(|_| S::of(normal.sample(&mut rng))).collect();
        Ok(Self {
            arch: arch.clone(),
            blocks,
            head_weight: Tensor::new(vec![arch.n_classes, in_ch], head)?,
            head_bias: Tensor::zeros(vec![arch.n_classes]),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn blocks(&self) -> &[ConvBlock<S>] {
        &self.blocks
    }

    pub fn gates(&self, layer: usize) -> &GateVector<S> {
        &self.blocks[layer].gates
    }

    pub fn total_filters(&self) -> usize {
        self.blocks.iter().map(|b| b.gates.len()).sum()
    }

    pub fn remaining_filters(&self) -> usize {
        self.blocks.iter().map(|b| b.gates.remaining()).sum()
    }

    pub fn remaining_in_layer(&self, layer: usize) -> usize {
        self.blocks[layer].gates.remaining()
    }

    pub fn remaining_ratio(&self) -> f64 {
        self.remaining_filters() as f64 / self.total_filters() as f64
    }

    pub fn is_pruned(&self, id: FilterId) -> bool {
        self.blocks[id.layer].gates.pruned[id.channel]
    }

    /// All filters in (layer, channel) order.
    pub fn filter_ids(&self) -> impl Iterator<Item = FilterId> + '_ {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| (0..b.gates.len()).map(move |c| FilterId::new(l, c)))
    }

    fn check_id(&self, id: FilterId) -> Result<()> {
        if id.layer >= self.blocks.len() || id.channel >= self.blocks[id.layer].gates.len() {
            return Err(Error::FilterOutOfRange {
                layer: id.layer,
                channel: id.channel,
            });
        }
        Ok(())
    }

    /// Prunes a filter: gate set to zero and frozen.
    pub fn mask_filter(&mut self, id: FilterId) -> Result<()> {
        self.check_id(id)?;
        let gates = &mut self.blocks[id.layer].gates;
        if gates.pruned[id.channel] {
            return Err(Error::AlreadyPruned {
                layer: id.layer,
                channel: id.channel,
            });
        }
        gates.pruned[id.channel] = true;
        gates.values[id.channel] = S::zero();
        Ok(())
    }

    pub fn gate_value(&self, id: FilterId) -> Result<S> {
        self.check_id(id)?;
        Ok(self.blocks[id.layer].gates.values[id.channel])
    }

    /// Overwrites an unpruned gate value.
    pub fn set_gate(&mut self, id: FilterId, value: S) -> Result<()> {
        self.check_id(id)?;
        if self.is_pruned(id) {
            return Err(Error::PrunedFilter {
                layer: id.layer,
                channel: id.channel,
            });
        }
        self.blocks[id.layer].gates.values[id.channel] = value;
        Ok(())
    }

    /// Parameter tensors in declaration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(3 * self.blocks.len() + 2);
        for l in 0..self.blocks.len() {
            ids.extend([ParamId::Kernel(l), ParamId::Bias(l), ParamId::Gates(l)]);
        }
        ids.extend([ParamId::HeadWeight, ParamId::HeadBias]);
        ids
    }

    pub fn param_values(&self, id: ParamId) -> &[S] {
        match id {
            ParamId::Kernel(l) => self.blocks[l].kernel.values(),
            ParamId::Bias(l) => self.blocks[l].bias.values(),
            ParamId::Gates(l) => &self.blocks[l].gates.values,
            ParamId::HeadWeight => self.head_weight.values(),
            ParamId::HeadBias => self.head_bias.values(),
        }
    }

    /// Mutable view of a parameter. Pruned gate entries must stay zero; the
    /// optimizer goes through [`GatedModel::apply_update`] instead.
    pub fn param_values_mut(&mut self, id: ParamId) -> &mut [S] {
        match id {
            ParamId::Kernel(l) => self.blocks[l].kernel.values_mut(),
            ParamId::Bias(l) => self.blocks[l].bias.values_mut(),
            ParamId::Gates(l) => &mut self.blocks[l].gates.values,
            ParamId::HeadWeight => self.head_weight.values_mut(),
            ParamId::HeadBias => self.head_bias.values_mut(),
        }
    }

    /// Adds `delta` to a parameter, skipping pruned gate entries.
    pub fn apply_update(&mut self, id: ParamId, delta: &[S]) {
        if let ParamId::Gates(l) = id {
            let gates = &mut self.blocks[l].gates;
            for ((v, &p), &d) in gates.values.iter_mut().zip(&gates.pruned).zip(delta) {
                if !p {
                    *v += d;
                }
            }
            return;
        }
        for (v, &d) in self.param_values_mut(id).iter_mut().zip(delta) {
            *v += d;
        }
    }

    /// Kernels, biases, head parameters and the unpruned gate entries.
    pub fn trainable_parameters(&self) -> Vec<(ParamId, Tensor<S>)> {
        let mut out = Vec::new();
        for id in self.param_ids() {
            match id {
                ParamId::Gates(l) => {
                    let g = &self.blocks[l].gates;
                    let live: Vec<S> = g.values.iter().zip(&g.pruned).filter(|(_, &p)| !p).map(|(&v, _)| v).collect();
                    if !live.is_empty() {
                        let n = live.len();
                        out.push((id, Tensor::new(vec![n], live).expect("1-d")));
                    }
                }
                ParamId::Kernel(l) => out.push((id, self.blocks[l].kernel.clone())),
                ParamId::Bias(l) => out.push((id, self.blocks[l].bias.clone())),
                ParamId::HeadWeight => out.push((id, self.head_weight.clone())),
                ParamId::HeadBias => out.push((id, self.head_bias.clone())),
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_ids().iter().map(|&id| self.param_values(id).len()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        if shape.len() != 4 || shape[1] != a.in_channels || shape[2] != a.height || shape[3] != a.width {
            return Err(Error::shape(
                "forward",
                "input does not match architecture",
                shape,
                &[0, a.in_channels, a.height, a.width],
            ));
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape<S>, t: &Tensor<S>, track: bool) -> Var {
        if track {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    }

    fn run(&self, tape: &mut Tape<S>, images: Var, track: bool) -> Result<ForwardPass> {
        self.check_input(tape.shape(images))?;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut gates = Vec::new();
        let mut h = images;
        for block in &self.blocks {
            let k = self.register(tape, &block.kernel, track);
            let b = self.register(tape, &block.bias, track);
            let gate_tensor = Tensor::new(vec![block.gates.len()], block.gates.values.clone())?;
            let g = self.register(tape, &gate_tensor, track);
            let conv = tape.conv2d(h, k, b)?;
            h = match self.arch.gate_placement {
                GatePlacement::AfterActivation => {
                    let a = tape.relu(conv);
                    tape.channel_scale(a, g)?
                }
                GatePlacement::BeforeActivation => {
                    let s = tape.channel_scale(conv, g)?;
                    tape.relu(s)
                }
            };
            kernels.push(k);
            biases.push(b);
            gates.push(g);
        }
        let features = tape.global_avg_pool(h)?;
        let head_weight = self.register(tape, &self.head_weight, track);
        let head_bias = self.register(tape, &self.head_bias, track);
        let logits = tape.linear(features, head_weight, head_bias)?;
        Ok(ForwardPass {
            params: ParamVars {
                kernels,
                biases,
                gates,
                head_weight,
                head_bias,
            },
            features,
            logits,
        })
    }

    /// Records a differentiable forward pass; every parameter is a gradient leaf.
    pub fn forward_on_tape(&self, tape: &mut Tape<S>, images: Var) -> Result<ForwardPass> {
        self.run(tape, images, true)
    }

    /// Inference-only forward pass returning `[B, K]` logits.
    pub fn forward(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let pass = self.run(&mut tape, x, false)?;
        Ok(tape.tensor(pass.logits).clone().with_grad(false))
    }

    /// Top-1 predictions.
    pub fn predict(&self, images: &Tensor<S>) -> Result<Vec<usize>> {
        let logits = self.forward(images)?;
        let k = self.arch.n_classes;
        Ok(logits
            .values()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Serializes to the versioned `PLDG` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(a.in_channels as u32);
        w.u32(a.height as u32);
        w.u32(a.width as u32);
        w.u32(a.n_classes as u32);
        w.u8(match a.gate_placement {
            GatePlacement::AfterActivation => 0,
            GatePlacement::BeforeActivation => 1,
        });
        w.u32(a.channels.len() as u32);
        for (&c, &k) in a.channels.iter().zip(&a.kernel_sizes) {
            w.u32(c as u32);
            w.u32(k as u32);
        }
        for id in self.param_ids() {
            w.f64s(self.param_values(id).iter().map(|v| v.to_f64_lossy()));
        }
        for block in &self.blocks {
            w.bitmap(&block.gates.pruned);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let in_channels = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let gate_placement = match r.u8()? {
            0 => GatePlacement::AfterActivation,
            1 => GatePlacement::BeforeActivation,
            other => return Err(Error::Corrupt(format!("unknown gate placement tag {other}"))),
        };
        let n_blocks = r.u32()? as usize;
        if n_blocks > 1024 {
            return Err(Error::Corrupt(format!("implausible block count {n_blocks}")));
        }
        let mut channels = Vec::with_capacity(n_blocks);
        let mut kernel_sizes = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            channels.push(r.u32()? as usize);
            kernel_sizes.push(r.u32()? as usize);
        }
        let arch = ArchConfig {
            in_channels,
            height,
            width,
            channels,
            kernel_sizes,
            n_classes,
            gate_placement,
        };
        arch.validate().map_err(|e| Error::Corrupt(format!("architecture descriptor: {e}")))?;
        let mut model = Self::build(&arch, 0)?;
        for id in model.param_ids() {
            let n = model.param_values(id).len();
            let vals = r.f64s(n)?;
            for (dst, v) in model.param_values_mut(id).iter_mut().zip(vals) {
                *dst = S::of(v);
            }
        }
        for block in &mut model.blocks {
            block.gates.pruned = r.bitmap(block.gates.len())?;
            if block.gates.values.iter().zip(&block.gates.pruned).any(|(&v, &p)| p && v != S::zero()) {
                return Err(Error::Corrupt("pruned gate with nonzero value".into()));
            }
        }
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
