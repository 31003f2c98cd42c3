use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::WindowedDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// `fraction` of the windows, chosen by a seeded shuffle, go to train.
    Random { fraction: f64, seed: u64 },
    /// Windows from the listed subjects go to test, the rest to train.
    BySubject { test_subjects: Vec<String> },
}

/// Partitions `dataset` into `(train, test)`. Both sides keep the original
/// window order.
pub fn split(dataset: &WindowedDataset, policy: &SplitPolicy) -> Result<(WindowedDataset, WindowedDataset)> {
    let n = dataset.len();
    let mut is_test = vec![false; n];
    match policy {
        SplitPolicy::Random { fraction, seed } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(Error::Config(format!("train fraction must lie in (0, 1), got {fraction}")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::stream(*seed, Stream::Split));
            let n_train = (fraction * n as f64).round() as usize;
            for &i in &order[n_train..] {
                is_test[i] = true;
            }
        }
        SplitPolicy::BySubject { test_subjects } => {
            for s in test_subjects {
                if !dataset.provenance.iter().any(|p| &p.subject == s) {
                    return Err(Error::UnknownSubject(s.clone()));
                }
            }
            for (flag, p) in is_test.iter_mut().zip(&dataset.provenance) {
                *flag = test_subjects.contains(&p.subject);
            }
        }
    }
    let train: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..n).filter(|&i| is_test[i]).collect();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Per-axis statistics pooled over every window and timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(dataset: &WindowedDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Config("cannot fit normalization on an empty dataset".into()));
        }
        let (h, w) = (dataset.axes, dataset.width);
        let count = (dataset.len() * w) as f64;
        let mut mean = vec![0.0; h];
        for i in 0..dataset.len() {
            for (a, row) in dataset.window(i).chunks_exact(w).enumerate() {
                mean[a] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; h];
        for i in 0..dataset.len() {
            for (a, row) in dataset.window(i).chunks_exact(w).enumerate() {
                var[a] += row.iter().map(|v| (v - mean[a]).powi(2)).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, dataset: &mut WindowedDataset) -> Result<()> {
        if self.mean.len() != dataset.axes {
            return Err(Error::Config(format!(
                "normalization has {} axes, dataset has {}",
                self.mean.len(),
                dataset.axes
            )));
        }
        let w = dataset.width;
        for (k, row) in dataset.windows.chunks_exact_mut(w).enumerate() {
            let a = k % dataset.axes;
            row.iter_mut().for_each(|v| *v = (*v - self.mean[a]) / self.std[a]);
        }
        dataset.norm = Some(self.clone());
        Ok(())
    }
}

/// Standardizes both sets with statistics fitted on `train`.
pub fn normalize(
    train: &WindowedDataset,
    test: &WindowedDataset,
) -> Result<(WindowedDataset, WindowedDataset, NormStats)> {
    let stats = NormStats::fit(train)?;
    let (mut a, mut b) = (train.clone(), test.clone());
    stats.apply(&mut a)?;
    stats.apply(&mut b)?;
    Ok((a, b, stats))
}
