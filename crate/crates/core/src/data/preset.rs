use serde::{Deserialize, Serialize};

use super::{LabelPolicy, SplitPolicy};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 5] = ["wisdm", "unimib", "pamap2", "opportunity", "weak"];

/// Windowing and optimization recipe for a public dataset layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPreset {
    pub name: String,
    /// Sample rate after decimation, in Hz.
    pub sample_rate: f64,
    /// Keep every n-th raw sample before windowing.
    pub decimate: usize,
    pub width: usize,
    pub step: usize,
    pub label_policy: LabelPolicy,
    pub split: SplitPolicy,
    pub batch_size: usize,
    pub base_lr: f64,
}

impl DatasetPreset {
    pub fn overlap(&self) -> f64 {
        1.0 - self.step as f64 / self.width as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.step == 0 || self.step > self.width {
            return Err(Error::Config(format!(
                "preset {} needs 0 < step <= width, got {}/{}",
                self.name, self.step, self.width
            )));
        }
        Ok(())
    }
}

/// Window width in samples for a duration, and the step for an overlap
/// fraction; both round to the nearest sample.
pub fn seconds_to_window(seconds: f64, rate: f64, overlap: f64) -> (usize, usize) {
    let width = (seconds * rate).round() as usize;
    let step = (width as f64 * (1.0 - overlap)).round() as usize;
    (width, step)
}

pub fn preset(name: &str) -> Result<DatasetPreset> {
    let random = SplitPolicy::Random { fraction: 0.7, seed: 0 };
    let p = match name {
        "wisdm" => {
            let (width, step) = seconds_to_window(10.0, 20.0, 0.95);
            DatasetPreset {
                name: name.into(),
                sample_rate: 20.0,
                decimate: 1,
                width,
                step,
                label_policy: LabelPolicy::Majority,
                split: random,
                batch_size: 210,
                base_lr: 1e-3,
            }
        }
        "unimib" => DatasetPreset {
            name: name.into(),
            sample_rate: 50.0,
            decimate: 1,
            width: 151,
            step: 151,
            label_policy: LabelPolicy::Majority,
            split: random,
            batch_size: 128,
            base_lr: 1e-3,
        },
        "pamap2" => {
            let (width, step) = seconds_to_window(5.12, 33.3, 0.78);
            DatasetPreset {
                name: name.into(),
                sample_rate: 33.3,
                decimate: 3,
                width,
                step,
                label_policy: LabelPolicy::Majority,
                split: SplitPolicy::BySubject {
                    test_subjects: vec!["5".into(), "6".into()],
                },
                batch_size: 300,
                base_lr: 5e-4,
            }
        }
        "opportunity" => DatasetPreset {
            name: name.into(),
            sample_rate: 30.0,
            decimate: 1,
            width: 64,
            step: 8,
            label_policy: LabelPolicy::Majority,
            split: SplitPolicy::BySubject {
                test_subjects: [1, 2, 3]
                    .iter()
                    .flat_map(|s| [2, 4, 5].map(|r| format!("{s}-{r}")))
                    .collect(),
            },
            batch_size: 300,
            base_lr: 1e-4,
        },
        "weak" => DatasetPreset {
            name: name.into(),
            sample_rate: 50.0,
            decimate: 1,
            width: 2048,
            step: 1024,
            label_policy: LabelPolicy::Sequence,
            split: random,
            batch_size: 200,
            base_lr: 1e-3,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    p.validate()?;
    Ok(p)
}
