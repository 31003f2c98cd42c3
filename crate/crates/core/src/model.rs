//! Convolutional and residual backbones with per-block attention.
//!
//! Each building block is
//!
//! ```text
//! conv(1×k) → BN → ReLU → conv(1×k) → BN → [+ skip] → ReLU → attention → maxpool(1×p)
//! ```
//!
//! where the skip exists only for the residual backbone and is a 1×1
//! projection whenever the block changes width. Convolutions run along the
//! time axis only, with same padding and no bias (batch normalization
//! follows every one of them). The classifier is a single dense layer over
//! the flattened final feature map.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_attention, AttentionConfig, AttentionTrace, ChannelAttentionParams, ChannelAttentionVars,
    TemporalAttentionParams, TemporalAttentionVars,
};
use crate::error::{Error, Result, ResultExt};
use crate::graph::{BatchMoments, Graph, Mode, RunningStats, Var};
use crate::kernels::Padding;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Plain,
    Residual,
}

pub const DEFAULT_CHANNEL_PLAN: [usize; 6] = [128, 128, 256, 256, 384, 384];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Conv output widths; consecutive pairs form one building block.
    pub channel_plan: Vec<usize>,
    /// Temporal extent of backbone convolutions.
    pub conv_kernel: usize,
    /// Temporal max-pool extent applied after every block.
    pub pool: usize,
    pub num_classes: usize,
    pub sensor_axes: usize,
    pub window_length: usize,
    pub attention: AttentionConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Residual,
            channel_plan: DEFAULT_CHANNEL_PLAN.to_vec(),
            conv_kernel: 6,
            pool: 2,
            num_classes: 6,
            sensor_axes: 3,
            window_length: 200,
            attention: AttentionConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_blocks(&self) -> usize {
        self.channel_plan.len() / 2
    }

    /// Window length left after every block's pooling.
    pub fn final_width(&self) -> usize {
        (0..self.num_blocks()).fold(self.window_length, |w, _| w / self.pool.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let plan = &self.channel_plan;
        if plan.is_empty() || !plan.len().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "channel plan must hold an even, non-zero number of widths, got {plan:?}"
            )));
        }
        if plan.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.conv_kernel == 0 || self.pool == 0 {
            return Err(Error::Config("conv kernel and pool extent must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.sensor_axes == 0 {
            return Err(Error::Config("sensor axes must be positive".into()));
        }
        if self.final_width() == 0 {
            return Err(Error::Config(format!(
                "window length {} is too short for {} poolings of extent {}",
                self.window_length,
                self.num_blocks(),
                self.pool
            )));
        }
        self.attention.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Trainable tensors in registration order, each under a unique name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamRegistry {
    fn add(&mut self, name: String, tensor: Tensor) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNormIds {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ChannelIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct TemporalIds {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv1: ParamId,
    bn1: BatchNormIds,
    conv2: ParamId,
    bn2: BatchNormIds,
    skip: Option<ParamId>,
    channel: Option<ChannelIds>,
    temporal: Option<TemporalIds>,
}

/// Graph handles for every registered parameter, in registry order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamRegistry,
    stats: Vec<(String, RunningStats)>,
    blocks: Vec<Block>,
    classifier: (ParamId, ParamId),
}

fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

fn lecun_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl Model {
    /// Builds a freshly initialized model. Backbone, skip projections and
    /// attention draw from separate random streams, so models that differ
    /// only in attention variant or backbone kind share their common weights.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut backbone_rng = rng::stream(config.seed, Stream::Init);
        let mut skip_rng = rng::stream(config.seed, Stream::SkipInit);
        let mut attention_rng = rng::stream(config.seed, Stream::AttentionInit);
        let mut params = ParamRegistry::default();
        let mut stats = Vec::new();
        let mut blocks = Vec::new();
        let k = config.conv_kernel;

        let mut batchnorm = |params: &mut ParamRegistry, prefix: String, c: usize| {
            let ids = BatchNormIds {
                gamma: params.add(format!("{prefix}.gamma"), Tensor::ones([c])),
                beta: params.add(format!("{prefix}.beta"), Tensor::zeros([c])),
                stats: stats.len(),
            };
            stats.push((prefix, RunningStats::new(c)));
            ids
        };

        let mut in_ch = 1;
        for (i, pair) in config.channel_plan.chunks(2).enumerate() {
            let (mid, out) = (pair[0], pair[1]);
            let conv1 = params.add(
                format!("block{i}.conv1.weight"),
                kaiming_uniform(&[mid, in_ch, 1, k], in_ch * k, &mut backbone_rng),
            );
            let bn1 = batchnorm(&mut params, format!("block{i}.bn1"), mid);
            let conv2 = params.add(
                format!("block{i}.conv2.weight"),
                kaiming_uniform(&[out, mid, 1, k], mid * k, &mut backbone_rng),
            );
            let bn2 = batchnorm(&mut params, format!("block{i}.bn2"), out);
            let skip = (config.backbone == Backbone::Residual && in_ch != out).then(|| {
                params.add(
                    format!("block{i}.skip.weight"),
                    kaiming_uniform(&[out, in_ch, 1, 1], in_ch, &mut skip_rng),
                )
            });
            let att = &config.attention;
            let channel = att.variant.uses_channel().then(|| {
                let p = ChannelAttentionParams::init(out, att.reduction, &mut attention_rng);
                ChannelIds {
                    w1: params.add(format!("block{i}.channel_att.w1"), p.w1),
                    b1: params.add(format!("block{i}.channel_att.b1"), p.b1),
                    w2: params.add(format!("block{i}.channel_att.w2"), p.w2),
                    b2: params.add(format!("block{i}.channel_att.b2"), p.b2),
                }
            });
            let temporal = att.variant.uses_temporal().then(|| {
                let p = TemporalAttentionParams::init(att.temporal_kernel, &mut attention_rng);
                TemporalIds {
                    kernel: params.add(format!("block{i}.temporal_att.kernel"), p.kernel),
                    bias: params.add(format!("block{i}.temporal_att.bias"), p.bias),
                }
            });
            blocks.push(Block {
                conv1,
                bn1,
                conv2,
                bn2,
                skip,
                channel,
                temporal,
            });
            in_ch = out;
        }

        let features = in_ch * config.sensor_axes * config.final_width();
        let classifier = (
            params.add(
                "classifier.weight".into(),
                lecun_uniform(&[config.num_classes, features], features, &mut backbone_rng),
            ),
            params.add("classifier.bias".into(), Tensor::zeros([config.num_classes])),
        );

        Ok(Self {
            config,
            params,
            stats,
            blocks,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn attention_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| is_attention_param(name))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.param_count() - self.attention_param_count()
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn running_stats_mut(&mut self, prefix: &str) -> Option<&mut RunningStats> {
        self.stats.iter_mut().find(|(n, _)| n == prefix).map(|(_, s)| s)
    }

    /// Every persisted tensor: parameters in registry order, then batch
    /// normalization running statistics.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false)))
            .collect();
        for (prefix, s) in &self.stats {
            let c = s.mean.len();
            out.push((format!("{prefix}.running_mean"), Tensor::from_parts(vec![c], s.mean.clone())));
            out.push((format!("{prefix}.running_var"), Tensor::from_parts(vec![c], s.var.clone())));
        }
        out
    }

    /// Overwrites every persisted tensor. Names and shapes must match
    /// [`Model::state`] exactly, in order.
    pub fn load_state(&mut self, state: Vec<(String, Tensor)>) -> Result<()> {
        let expected = self.state();
        if expected.len() != state.len() {
            return Err(Error::Manifest(format!(
                "expected {} tensors, found {}",
                expected.len(),
                state.len()
            )));
        }
        for ((en, et), (gn, gt)) in expected.iter().zip(&state) {
            if en != gn || et.shape() != gt.shape() {
                return Err(Error::Manifest(format!(
                    "expected {en} {:?}, found {gn} {:?}",
                    et.shape(),
                    gt.shape()
                )));
            }
        }
        let n_params = self.params.len();
        let mut iter = state.into_iter();
        for t in self.params.tensors_mut() {
            let (_, loaded) = iter.next().expect("length checked");
            *t = loaded.with_requires_grad(true);
        }
        for (_, s) in &mut self.stats {
            s.mean = iter.next().expect("length checked").1.into_data();
            s.var = iter.next().expect("length checked").1.into_data();
        }
        debug_assert!(n_params == self.params.len());
        Ok(())
    }

    /// Records every parameter on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| g.leaf(t.clone().with_requires_grad(trainable)))
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            &[n, 1, h, w] if n > 0 && h == c.sensor_axes && w == c.window_length => Ok(()),
            _ => Err(Error::shape(
                "forward",
                format!(
                    "expected N×1×{}×{} input, got {shape:?}",
                    c.sensor_axes, c.window_length
                ),
            )),
        }
    }

    /// Runs the network on `g`. Train mode returns each batch-norm layer's
    /// batch statistics alongside the logits, without applying them.
    pub fn run(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        input: Var,
        mode: Mode,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<(Var, Vec<(usize, BatchMoments)>)> {
        self.check_input(g.shape(input))?;
        let k = self.config.conv_kernel;
        let mut moments = Vec::new();
        let mut h = input;
        for (i, block) in self.blocks.iter().enumerate() {
            let mut bn = |g: &mut Graph, x: Var, ids: &BatchNormIds| -> Result<Var> {
                let (y, m) = g.batchnorm(x, p.get(ids.gamma), p.get(ids.beta), &self.stats[ids.stats].1, mode)?;
                if let Some(m) = m {
                    moments.push((ids.stats, m));
                }
                Ok(y)
            };
            let mut step = |g: &mut Graph, trace: Option<&mut AttentionTrace>| -> Result<Var> {
                let x = g.conv2d_padded(h, p.get(block.conv1), None, (1, 1), Padding::same_width(k))?;
                let x = bn(g, x, &block.bn1)?;
                let x = g.relu(x)?;
                let x = g.conv2d_padded(x, p.get(block.conv2), None, (1, 1), Padding::same_width(k))?;
                let mut x = bn(g, x, &block.bn2)?;
                if self.config.backbone == Backbone::Residual {
                    let skip = match block.skip {
                        Some(w) => g.conv2d(h, p.get(w), None, (1, 1), (0, 0))?,
                        None => h,
                    };
                    x = g.add(x, skip)?;
                }
                let x = g.relu(x)?;
                let channel = block.channel.as_ref().map(|c| ChannelAttentionVars {
                    w1: p.get(c.w1),
                    b1: p.get(c.b1),
                    w2: p.get(c.w2),
                    b2: p.get(c.b2),
                });
                let temporal = block.temporal.as_ref().map(|t| TemporalAttentionVars {
                    kernel: p.get(t.kernel),
                    bias: p.get(t.bias),
                });
                let x = apply_attention(
                    g,
                    x,
                    self.config.attention.variant,
                    channel.as_ref(),
                    temporal.as_ref(),
                    trace.map(|t| (t, i)),
                )?;
                g.max_pool2d(x, (1, self.config.pool))
            };
            h = step(g, trace.as_deref_mut()).context(|| format!("block {i}"))?;
        }
        let shape = g.shape(h).to_vec();
        let flat = g.reshape(h, &[shape[0], shape[1..].iter().product()])?;
        let logits = g
            .dense(flat, p.get(self.classifier.0), Some(p.get(self.classifier.1)))
            .context(|| "classifier".to_string())?;
        Ok((logits, moments))
    }

    pub fn apply_moments(&mut self, moments: &[(usize, BatchMoments)]) {
        for (idx, m) in moments {
            self.stats[*idx].1.update(m);
        }
    }

    /// One forward pass. Train mode folds batch statistics into the running
    /// statistics; eval mode leaves the model untouched.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode, trace: Option<&mut AttentionTrace>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let (logits, moments) = self.run(&mut g, &p, x, mode, trace)?;
        self.apply_moments(&moments);
        Ok(g.value(logits).clone())
    }

    /// Eval-mode forward pass; a pure function of parameters and input.
    pub fn predict(&self, batch: &Tensor, trace: Option<&mut AttentionTrace>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let (logits, _) = self.run(&mut g, &p, x, Mode::Eval, trace)?;
        Ok(g.value(logits).clone())
    }
}

pub fn is_attention_param(name: &str) -> bool {
    name.contains(".channel_att.") || name.contains(".temporal_att.")
}
