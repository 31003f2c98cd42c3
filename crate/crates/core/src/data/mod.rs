//! Sensor series, sliding windows, splits and normalization.

mod archive;
mod ingest;
mod preset;
mod split;
mod synth;

pub use archive::{load_archive, save_archive, ARCHIVE_MAGIC};
pub use ingest::{decimate, load_csv, CsvData, CsvSchema};
pub use preset::{preset, DatasetPreset, PRESET_NAMES};
pub use split::{normalize, split, NormStats, SplitPolicy, STD_FLOOR};
pub use synth::{synth_generate, EmbedMode, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum SeriesLabels {
    /// One class index per timestep.
    PerStep(Vec<usize>),
    /// One class index for the whole series.
    Sequence(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub subject: String,
    pub source: String,
    /// `d` rows of `T` readings.
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub labels: SeriesLabels,
}

impl LabeledSeries {
    pub fn new(
        subject: impl Into<String>,
        source: impl Into<String>,
        channels: Vec<Vec<f64>>,
        sample_rate: f64,
        labels: SeriesLabels,
    ) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.is_empty() || channels.iter().any(|c| c.len() != len) {
            return Err(Error::Config("series channels must be non-empty and equally long".into()));
        }
        if !sample_rate.is_finite() || sample_rate <= 0.0 {
            return Err(Error::Config(format!("sample rate must be positive, got {sample_rate}")));
        }
        if let SeriesLabels::PerStep(l) = &labels {
            if l.len() != len {
                return Err(Error::Config(format!("{} labels for {len} timesteps", l.len())));
            }
        }
        Ok(Self {
            subject: subject.into(),
            source: source.into(),
            channels,
            sample_rate,
            labels,
        })
    }

    pub fn axes(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    /// Modal per-timestep label; ties go to the lowest class index.
    #[default]
    Majority,
    /// The series label.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: String,
    pub source: String,
    pub offset: usize,
}

/// Windows stored as a dense `N×1×H×W` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    pub axes: usize,
    pub width: usize,
    pub windows: Vec<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub norm: Option<NormStats>,
    /// Ground-truth active interval `[start, end)` per window, when known.
    pub segments: Option<Vec<(usize, usize)>>,
}

impl WindowedDataset {
    pub fn empty(axes: usize, width: usize, class_names: Vec<String>) -> Self {
        Self {
            axes,
            width,
            windows: Vec::new(),
            labels: Vec::new(),
            class_names,
            provenance: Vec::new(),
            norm: None,
            segments: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn window_size(&self) -> usize {
        self.axes * self.width
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let s = self.window_size();
        &self.windows[i * s..(i + 1) * s]
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.windows.len() != n * self.window_size() || self.provenance.len() != n {
            return Err(Error::Manifest("window, label and provenance counts disagree".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::Manifest(format!(
                "label {bad} out of range for {} classes",
                self.num_classes()
            )));
        }
        if let Some(seg) = &self.segments {
            if seg.len() != n {
                return Err(Error::Manifest("segment count disagrees with window count".into()));
            }
        }
        Ok(())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Gathers windows into an `n×1×H×W` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.window_size());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            data.extend_from_slice(self.window(i));
        }
        Tensor::new([indices.len(), 1, self.axes, self.width], data)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.axes, self.width, self.class_names.clone());
        out.norm = self.norm.clone();
        let mut segments = self.segments.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            out.windows.extend_from_slice(self.window(i));
            out.labels.push(self.labels[i]);
            out.provenance.push(self.provenance[i].clone());
            if let (Some(dst), Some(src)) = (segments.as_mut(), self.segments.as_ref()) {
                dst.push(src[i]);
            }
        }
        out.segments = segments;
        out
    }

    /// Appends `other`, which must share dimensions and classes.
    pub fn extend(&mut self, other: WindowedDataset) -> Result<()> {
        if other.axes != self.axes || other.width != self.width || other.class_names != self.class_names {
            return Err(Error::Config("cannot merge datasets with different dims or classes".into()));
        }
        self.segments = match (self.segments.take(), other.segments) {
            (Some(mut a), Some(b)) => {
                a.extend(b);
                Some(a)
            }
            (None, None) => None,
            _ => return Err(Error::Config("cannot merge datasets with and without segments".into())),
        };
        self.windows.extend(other.windows);
        self.labels.extend(other.labels);
        self.provenance.extend(other.provenance);
        Ok(())
    }
}

fn modal_label(labels: &[usize]) -> usize {
    let top = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; top + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0)
}

/// Cuts one series into windows `[i·step, i·step + width)`.
pub fn sliding_windows(
    series: &LabeledSeries,
    width: usize,
    step: usize,
    policy: LabelPolicy,
    class_names: &[String],
) -> Result<WindowedDataset> {
    if width == 0 || step == 0 {
        return Err(Error::Config(format!("window width and step must be positive, got {width}/{step}")));
    }
    let mut out = WindowedDataset::empty(series.axes(), width, class_names.to_vec());
    let t = series.len();
    if width > t {
        log::warn!(
            "series {}/{} has {t} samples, shorter than window width {width}; no windows produced",
            series.source,
            series.subject
        );
        return Ok(out);
    }
    let sequence_label = match (&series.labels, policy) {
        (SeriesLabels::Sequence(l), _) => Some(*l),
        (SeriesLabels::PerStep(l), LabelPolicy::Sequence) => {
            if l.iter().any(|&x| x != l[0]) {
                return Err(Error::Config(format!(
                    "sequence labelling needs a single label per series; {}/{} has several",
                    series.source, series.subject
                )));
            }
            Some(l[0])
        }
        (SeriesLabels::PerStep(_), LabelPolicy::Majority) => None,
    };
    let count = (t - width) / step + 1;
    out.windows.reserve(count * width * series.axes());
    for i in 0..count {
        let start = i * step;
        for row in &series.channels {
            out.windows.extend_from_slice(&row[start..start + width]);
        }
        let label = match (&series.labels, sequence_label) {
            (_, Some(l)) => l,
            (SeriesLabels::PerStep(l), None) => modal_label(&l[start..start + width]),
            (SeriesLabels::Sequence(l), None) => *l,
        };
        out.labels.push(label);
        out.provenance.push(Provenance {
            subject: series.subject.clone(),
            source: series.source.clone(),
            offset: start,
        });
    }
    out.validate()?;
    Ok(out)
}

/// Windows every series and concatenates the results in input order.
pub fn window_all(
    series: &[LabeledSeries],
    width: usize,
    step: usize,
    policy: LabelPolicy,
    class_names: &[String],
) -> Result<WindowedDataset> {
    let axes = series.first().map_or(0, LabeledSeries::axes);
    let mut out = WindowedDataset::empty(axes, width, class_names.to_vec());
    for s in series {
        out.extend(sliding_windows(s, width, step, policy, class_names)?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn series(t: usize, labels: SeriesLabels) -> LabeledSeries {
        let ch = vec![(0..t).map(|i| i as f64).collect(), (0..t).map(|i| -(i as f64)).collect()];
        LabeledSeries::new("s1", "mem", ch, 20.0, labels).unwrap()
    }

    #[test]
    fn window_count_formula() {
        let s = series(1000, SeriesLabels::Sequence(0));
        let d = sliding_windows(&s, 200, 10, LabelPolicy::Sequence, &names(1)).unwrap();
        assert_eq!(d.len(), 81);
        assert_eq!(d.provenance[80].offset, 800);
        assert_eq!(d.window(1)[0], 10.0);
        assert_eq!(d.window(1)[200], -10.0);
    }

    #[test]
    fn majority_label_and_ties() {
        let s = series(3, SeriesLabels::PerStep(vec![0, 0, 1]));
        let d = sliding_windows(&s, 3, 1, LabelPolicy::Majority, &names(2)).unwrap();
        assert_eq!(d.labels, vec![0]);
        let s = series(4, SeriesLabels::PerStep(vec![1, 1, 0, 0]));
        let d = sliding_windows(&s, 4, 1, LabelPolicy::Majority, &names(2)).unwrap();
        assert_eq!(d.labels, vec![0]);
    }

    #[test]
    fn too_wide_is_empty_and_zero_step_is_error() {
        let s = series(10, SeriesLabels::Sequence(0));
        assert!(sliding_windows(&s, 11, 1, LabelPolicy::Sequence, &names(1)).unwrap().is_empty());
        assert!(matches!(
            sliding_windows(&s, 5, 0, LabelPolicy::Sequence, &names(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sequence_policy_rejects_mixed_labels() {
        let s = series(4, SeriesLabels::PerStep(vec![0, 1, 1, 1]));
        assert!(sliding_windows(&s, 2, 1, LabelPolicy::Sequence, &names(2)).is_err());
    }

    #[test]
    fn batch_and_subset() {
        let s = series(10, SeriesLabels::PerStep((0..10).map(|i| i % 2).collect()));
        let d = sliding_windows(&s, 4, 2, LabelPolicy::Majority, &names(2)).unwrap();
        let b = d.batch(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 1, 2, 4]);
        assert_eq!(b.data()[0], 4.0);
        let sub = d.subset(&[1, 3]);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.provenance[1].offset, 6);
        assert!(matches!(d.batch(&[99]), Err(Error::IndexOutOfRange { index: 99, .. })));
    }
}
