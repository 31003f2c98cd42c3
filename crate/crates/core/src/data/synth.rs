use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Provenance, WindowedDataset};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const LOW_FREQUENCY: f64 = 0.08;
const HIGH_FREQUENCY: f64 = 0.25;
const BACKGROUND_FREQUENCY: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// The class signature fills the whole window.
    #[default]
    Full,
    /// The signature occupies a random quarter of the window over a shared
    /// low-frequency background.
    Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
    pub axes: usize,
    pub width: usize,
    #[serde(default)]
    pub mode: EmbedMode,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.3
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 4,
            per_class: 250,
            axes: 3,
            width: 64,
            mode: EmbedMode::Full,
            noise: default_noise(),
        }
    }
}

impl SynthConfig {
    /// Signature frequency of class `k`, in cycles per sample.
    pub fn frequency(&self, k: usize) -> f64 {
        let span = (self.num_classes - 1).max(1) as f64;
        LOW_FREQUENCY + (HIGH_FREQUENCY - LOW_FREQUENCY) * k as f64 / span
    }

    /// Phase of class `k` on axis `a`, relative to the window's random shift.
    pub fn phase(&self, k: usize, a: usize) -> f64 {
        TAU * ((0.618_034 * ((k + 1) * (a + 2)) as f64).fract())
    }

    pub fn segment_len(&self) -> usize {
        (self.width / 4).max(1)
    }
}

/// Class-conditional sinusoids plus Gaussian noise. Window `i` belongs to
/// class `i mod K`.
pub fn synth_generate(config: &SynthConfig) -> Result<WindowedDataset> {
    if config.num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", config.num_classes)));
    }
    if config.axes == 0 || config.width == 0 {
        return Err(Error::Config("synthetic windows need positive axes and width".into()));
    }
    let noise = Normal::new(0.0, config.noise)
        .map_err(|e| Error::Config(format!("noise level {}: {e}", config.noise)))?;
    let mut rng = rng::stream(config.seed, Stream::Synth);
    let (k_total, h, w) = (config.num_classes, config.axes, config.width);
    let n = k_total * config.per_class;
    let class_names = (0..k_total).map(|k| format!("class{k}")).collect();
    let mut out = WindowedDataset::empty(h, w, class_names);
    out.windows.reserve(n * h * w);
    let mut segments = Vec::new();
    for i in 0..n {
        let k = i % k_total;
        let shift: f64 = rng.random_range(0.0..TAU);
        let (start, end) = match config.mode {
            EmbedMode::Full => (0, w),
            EmbedMode::Segment => {
                let len = config.segment_len();
                let start = rng.random_range(0..=w - len);
                (start, start + len)
            }
        };
        let background: f64 = rng.random_range(0.0..TAU);
        let f = config.frequency(k);
        for a in 0..h {
            for t in 0..w {
                let clean = if (start..end).contains(&t) {
                    (TAU * f * t as f64 + config.phase(k, a) + shift).sin()
                } else {
                    (TAU * BACKGROUND_FREQUENCY * t as f64 + background + a as f64).sin()
                };
                out.windows.push(clean + noise.sample(&mut rng));
            }
        }
        out.labels.push(k);
        out.provenance.push(Provenance {
            subject: "synthetic".into(),
            source: format!("synth:{}", config.seed),
            offset: i,
        });
        segments.push((start, end));
    }
    if config.mode == EmbedMode::Segment {
        out.segments = Some(segments);
    }
    out.validate()?;
    Ok(out)
}
