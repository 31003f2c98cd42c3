//! Channel and temporal attention.
//!
//! Feature maps are `N×C×H×W` with `H` the sensor axes and `W` time.
//!
//! * Channel attention squeezes each channel to its global average and
//!   global maximum, runs both vectors through one shared bottleneck MLP
//!   (`C → hidden → C`, ReLU between), adds the two results and applies a
//!   sigmoid, giving one weight per channel.
//! * Temporal attention squeezes the channel axis to an average plane and a
//!   maximum plane, stacks them as two channels, and convolves with a
//!   `1×kt` kernel along time (same padding) followed by a sigmoid, giving
//!   one weight per sensor-axis/time cell.
//!
//! Dual variants apply one gate, then compute the other gate on the
//! rescaled map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, PoolKind, Var};
use crate::kernels::Padding;
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_TEMPORAL_KERNEL: usize = 7;
/// Smallest bottleneck width the channel MLP is allowed to shrink to.
pub const MIN_HIDDEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    None,
    ChannelOnly,
    TemporalOnly,
    ChannelThenTemporal,
    TemporalThenChannel,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::None,
        AttentionVariant::ChannelOnly,
        AttentionVariant::TemporalOnly,
        AttentionVariant::ChannelThenTemporal,
        AttentionVariant::TemporalThenChannel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::None => "none",
            AttentionVariant::ChannelOnly => "channel_only",
            AttentionVariant::TemporalOnly => "temporal_only",
            AttentionVariant::ChannelThenTemporal => "channel_then_temporal",
            AttentionVariant::TemporalThenChannel => "temporal_then_channel",
        }
    }

    pub fn uses_channel(self) -> bool {
        matches!(
            self,
            AttentionVariant::ChannelOnly
                | AttentionVariant::ChannelThenTemporal
                | AttentionVariant::TemporalThenChannel
        )
    }

    pub fn uses_temporal(self) -> bool {
        matches!(
            self,
            AttentionVariant::TemporalOnly
                | AttentionVariant::ChannelThenTemporal
                | AttentionVariant::TemporalThenChannel
        )
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attention variant '{s}' (expected one of none, channel_only, temporal_only, channel_then_temporal, temporal_then_channel)"
                ))
            })
    }
}

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

fn default_temporal_kernel() -> usize {
    DEFAULT_TEMPORAL_KERNEL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "default_temporal_kernel")]
    pub temporal_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::ChannelThenTemporal,
            reduction: DEFAULT_REDUCTION,
            temporal_kernel: DEFAULT_TEMPORAL_KERNEL,
        }
    }
}

impl AttentionConfig {
    pub fn with_variant(variant: AttentionVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("attention reduction ratio must be positive".into()));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "temporal attention kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        Ok(())
    }

    /// Attention parameters added to one block of width `channels`.
    pub fn param_count(&self, channels: usize) -> usize {
        let mut count = 0;
        if self.variant.uses_channel() {
            let h = hidden_width(channels, self.reduction);
            count += 2 * channels * h + h + channels;
        }
        if self.variant.uses_temporal() {
            count += 2 * self.temporal_kernel + 1;
        }
        count
    }
}

/// Bottleneck width of the channel MLP: `max(floor(C / r), 4)`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(MIN_HIDDEN)
}

fn uniform_tensor<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Shared bottleneck MLP of channel attention. `w1: hidden×C`, `w2: C×hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub reduction: usize,
}

impl ChannelAttentionParams {
    /// All-zero parameters: the gate is exactly 0.5 for every channel.
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let h = hidden_width(channels, reduction);
        Self {
            w1: Tensor::zeros([h, channels]),
            b1: Tensor::zeros([h]),
            w2: Tensor::zeros([channels, h]),
            b2: Tensor::zeros([channels]),
            reduction,
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let h = hidden_width(channels, reduction);
        Self {
            w1: uniform_tensor(&[h, channels], 1.0 / (channels as f64).sqrt(), rng),
            b1: Tensor::zeros([h]),
            w2: uniform_tensor(&[channels, h], 1.0 / (h as f64).sqrt(), rng),
            b2: Tensor::zeros([channels]),
            reduction,
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ChannelAttentionVars {
        let mut leaf = |t: &Tensor| g.leaf(t.clone().with_requires_grad(trainable));
        ChannelAttentionVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    /// Channel weights `N×C` for a concrete feature map.
    pub fn weights(&self, a: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let a = g.constant(a.clone());
        let w = channel_attention(&mut g, a, &vars)?;
        Ok(g.value(w).clone())
    }
}

/// Convolution kernel of temporal attention, stored as `1×2×1×kt`
/// (output channel, pooled input channel, sensor extent, time extent).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttentionParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl TemporalAttentionParams {
    pub fn zeros(kt: usize) -> Self {
        Self {
            kernel: Tensor::zeros([1, 2, 1, kt]),
            bias: Tensor::zeros([1]),
        }
    }

    pub fn init<R: Rng>(kt: usize, rng: &mut R) -> Self {
        Self {
            kernel: uniform_tensor(&[1, 2, 1, kt], 1.0 / ((2 * kt) as f64).sqrt(), rng),
            bias: Tensor::zeros([1]),
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> TemporalAttentionVars {
        TemporalAttentionVars {
            kernel: g.leaf(self.kernel.clone().with_requires_grad(trainable)),
            bias: g.leaf(self.bias.clone().with_requires_grad(trainable)),
        }
    }

    /// Temporal weights `N×1×H×W` for a concrete feature map.
    pub fn weights(&self, a: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let a = g.constant(a.clone());
        let w = temporal_attention(&mut g, a, &vars)?;
        Ok(g.value(w).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelAttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalAttentionVars {
    pub kernel: Var,
    pub bias: Var,
}

/// `W_C = σ(mlp(avg(A)) + mlp(max(A)))`, shape `N×C`.
pub fn channel_attention(g: &mut Graph, a: Var, p: &ChannelAttentionVars) -> Result<Var> {
    let channels = g.shape(a).get(1).copied().unwrap_or(0);
    if g.shape(p.w1).get(1) != Some(&channels) || g.shape(p.w2).first() != Some(&channels) {
        return Err(Error::shape(
            "channel_attention",
            format!(
                "parameters sized for {:?}/{:?} but feature map is {:?}",
                g.shape(p.w1),
                g.shape(p.w2),
                g.shape(a)
            ),
        ));
    }
    let branch = |g: &mut Graph, kind| -> Result<Var> {
        let pooled = g.pool_channelwise(a, kind)?;
        let hidden = g.dense(pooled, p.w1, Some(p.b1))?;
        let hidden = g.relu(hidden)?;
        g.dense(hidden, p.w2, Some(p.b2))
    };
    let avg = branch(g, PoolKind::Avg)?;
    let max = branch(g, PoolKind::Max)?;
    let logits = g.add(avg, max)?;
    g.sigmoid(logits)
}

/// `W_T = σ(conv_{1×kt}([avg_c(A); max_c(A)]))`, shape `N×1×H×W`.
pub fn temporal_attention(g: &mut Graph, a: Var, p: &TemporalAttentionVars) -> Result<Var> {
    let ks = g.shape(p.kernel).to_vec();
    let &[1, 2, 1, kt] = ks.as_slice() else {
        return Err(Error::shape(
            "temporal_attention",
            format!("kernel must be 1×2×1×kt, got {ks:?}"),
        ));
    };
    if kt % 2 == 0 {
        return Err(Error::Config(format!("temporal attention kernel must be odd, got {kt}")));
    }
    let avg = g.pool_across_channels(a, PoolKind::Avg)?;
    let max = g.pool_across_channels(a, PoolKind::Max)?;
    let stacked = g.concat(&[avg, max], 1)?;
    let logits = g.conv2d_padded(stacked, p.kernel, Some(p.bias), (1, 1), Padding::same_width(kt))?;
    g.sigmoid(logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Channel,
    Temporal,
}

/// Attention weights captured at one site during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub batch: usize,
    pub kind: AttentionKind,
    /// `N×C` for channel weights, `N×1×H×W` for temporal weights.
    pub weights: Tensor,
}

/// Sink for attention weights; the caller advances `batch` between passes.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub batch: usize,
    pub records: Vec<AttentionRecord>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, layer: usize, kind: AttentionKind, weights: Tensor) {
        debug_assert!(weights.data().iter().all(|&w| w > 0.0 && w < 1.0));
        self.records.push(AttentionRecord {
            layer,
            batch: self.batch,
            kind,
            weights,
        });
    }

    pub fn of_kind(&self, kind: AttentionKind) -> impl Iterator<Item = &AttentionRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn last_layer(&self) -> Option<usize> {
        self.records.iter().map(|r| r.layer).max()
    }
}

/// Gates `a` according to `variant`. Missing parameters for an enabled
/// submodule are a configuration error.
pub fn apply_attention(
    g: &mut Graph,
    a: Var,
    variant: AttentionVariant,
    channel: Option<&ChannelAttentionVars>,
    temporal: Option<&TemporalAttentionVars>,
    mut trace: Option<(&mut AttentionTrace, usize)>,
) -> Result<Var> {
    let need = |present: bool, what: &str| {
        if present {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "attention variant {variant} needs {what} attention parameters"
            )))
        }
    };
    if variant.uses_channel() {
        need(channel.is_some(), "channel")?;
    }
    if variant.uses_temporal() {
        need(temporal.is_some(), "temporal")?;
    }

    let gate_channel = |g: &mut Graph, x: Var, trace: &mut Option<(&mut AttentionTrace, usize)>| -> Result<Var> {
        let p = channel.expect("checked above");
        let w = channel_attention(g, x, p)?;
        if let Some((sink, layer)) = trace {
            sink.push(*layer, AttentionKind::Channel, g.value(w).clone());
        }
        let (n, c) = (g.shape(w)[0], g.shape(w)[1]);
        let w = g.reshape(w, &[n, c, 1, 1])?;
        g.mul(x, w)
    };
    let gate_temporal = |g: &mut Graph, x: Var, trace: &mut Option<(&mut AttentionTrace, usize)>| -> Result<Var> {
        let p = temporal.expect("checked above");
        let w = temporal_attention(g, x, p)?;
        if let Some((sink, layer)) = trace {
            sink.push(*layer, AttentionKind::Temporal, g.value(w).clone());
        }
        g.mul(x, w)
    };

    match variant {
        AttentionVariant::None => Ok(a),
        AttentionVariant::ChannelOnly => gate_channel(g, a, &mut trace),
        AttentionVariant::TemporalOnly => gate_temporal(g, a, &mut trace),
        AttentionVariant::ChannelThenTemporal => {
            let x = gate_channel(g, a, &mut trace)?;
            gate_temporal(g, x, &mut trace)
        }
        AttentionVariant::TemporalThenChannel => {
            let x = gate_temporal(g, a, &mut trace)?;
            gate_channel(g, x, &mut trace)
        }
    }
}

/// Attention parameters for one site, holding only the submodules a variant uses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionParams {
    pub channel: Option<ChannelAttentionParams>,
    pub temporal: Option<TemporalAttentionParams>,
}

impl AttentionParams {
    pub fn init<R: Rng>(channels: usize, config: &AttentionConfig, rng: &mut R) -> Self {
        Self {
            channel: config
                .variant
                .uses_channel()
                .then(|| ChannelAttentionParams::init(channels, config.reduction, rng)),
            temporal: config
                .variant
                .uses_temporal()
                .then(|| TemporalAttentionParams::init(config.temporal_kernel, rng)),
        }
    }

    /// Eagerly gates a concrete feature map.
    pub fn apply(
        &self,
        a: &Tensor,
        variant: AttentionVariant,
        trace: Option<(&mut AttentionTrace, usize)>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let channel = self.channel.as_ref().map(|p| p.bind(&mut g, false));
        let temporal = self.temporal.as_ref().map(|p| p.bind(&mut g, false));
        let x = g.constant(a.clone());
        let out = apply_attention(&mut g, x, variant, channel.as_ref(), temporal.as_ref(), trace)?;
        Ok(g.value(out).clone())
    }
}
