//! Run configuration: file format, preset defaults and flag overrides.

use std::path::{Path, PathBuf};

use danhar::data::{preset, CsvSchema, DatasetPreset, EmbedMode, LabelPolicy, SplitPolicy};
use danhar::model::DEFAULT_CHANNEL_PLAN;
use danhar::train::TrainConfig;
use danhar::{AttentionConfig, AttentionVariant, Backbone, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default = "four")]
        num_classes: usize,
        #[serde(default = "per_class")]
        per_class: usize,
        #[serde(default = "three")]
        axes: usize,
        #[serde(default = "sixty_four")]
        width: usize,
        #[serde(default)]
        mode: EmbedMode,
    },
    Archive {
        path: PathBuf,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

fn four() -> usize {
    4
}
fn three() -> usize {
    3
}
fn per_class() -> usize {
    250
}
fn sixty_four() -> usize {
    64
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            num_classes: 4,
            per_class: 250,
            axes: 3,
            width: 64,
            mode: EmbedMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub width: usize,
    pub step: usize,
    pub label_policy: LabelPolicy,
    pub decimate: usize,
}

/// Model settings that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Backbone,
    pub channel_plan: Vec<usize>,
    pub conv_kernel: usize,
    pub pool: usize,
    pub attention: AttentionConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: Backbone::Residual,
            channel_plan: DEFAULT_CHANNEL_PLAN.to_vec(),
            conv_kernel: 6,
            pool: 2,
            attention: AttentionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            decay_factor: t.decay_factor,
            decay_interval: t.decay_interval,
            shuffle: t.shuffle,
        }
    }
}

/// Fully resolved run configuration; this is what lands in `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Option<String>,
    pub data: DataSource,
    pub window: Option<WindowSpec>,
    pub split: SplitPolicy,
    pub normalize: bool,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ablation_seeds: Vec<u64>,
    pub out: PathBuf,
}

/// Config file contents; every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub data: Option<DataSource>,
    pub window: Option<PartialWindow>,
    pub split: Option<SplitPolicy>,
    pub normalize: Option<bool>,
    pub model: Option<PartialModel>,
    pub train: Option<PartialTrain>,
    pub ablation_seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialWindow {
    pub width: Option<usize>,
    pub step: Option<usize>,
    pub label_policy: Option<LabelPolicy>,
    pub decimate: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialModel {
    pub backbone: Option<Backbone>,
    pub channel_plan: Option<Vec<usize>>,
    pub conv_kernel: Option<usize>,
    pub pool: Option<usize>,
    pub attention: Option<PartialAttention>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialAttention {
    pub variant: Option<AttentionVariant>,
    pub reduction: Option<usize>,
    pub temporal_kernel: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialTrain {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_interval: Option<usize>,
    pub shuffle: Option<bool>,
}

/// Command-line overrides; they win over the file and the preset.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub attention: Option<AttentionVariant>,
    pub backbone: Option<Backbone>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn read_file(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn resolve(file: RunConfigFile, flags: &Overrides) -> Result<Self> {
        let seed = flags.seed.or(file.seed).unwrap_or(0);
        let preset: Option<DatasetPreset> = file.preset.as_deref().map(preset).transpose()?;

        let mut window = preset.as_ref().map(|p| WindowSpec {
            width: p.width,
            step: p.step,
            label_policy: p.label_policy,
            decimate: p.decimate,
        });
        if let Some(w) = file.window {
            let base = window.get_or_insert(WindowSpec {
                width: 0,
                step: 0,
                label_policy: LabelPolicy::Majority,
                decimate: 1,
            });
            set(&mut base.width, w.width);
            set(&mut base.step, w.step);
            set(&mut base.label_policy, w.label_policy);
            set(&mut base.decimate, w.decimate);
        }

        let mut split = file
            .split
            .or_else(|| preset.as_ref().map(|p| p.split.clone()))
            .unwrap_or(SplitPolicy::Random { fraction: 0.8, seed });
        if let SplitPolicy::Random { seed: s, .. } = &mut split {
            *s = seed;
        }

        let mut model = ModelSection::default();
        if let Some(m) = file.model {
            set(&mut model.backbone, m.backbone);
            set(&mut model.channel_plan, m.channel_plan);
            set(&mut model.conv_kernel, m.conv_kernel);
            set(&mut model.pool, m.pool);
            if let Some(a) = m.attention {
                set(&mut model.attention.variant, a.variant);
                set(&mut model.attention.reduction, a.reduction);
                set(&mut model.attention.temporal_kernel, a.temporal_kernel);
            }
        }
        set(&mut model.attention.variant, flags.attention);
        set(&mut model.backbone, flags.backbone);

        let mut train = TrainSection::default();
        if let Some(p) = &preset {
            train.batch_size = p.batch_size;
            train.base_lr = p.base_lr;
        }
        if let Some(t) = file.train {
            set(&mut train.epochs, t.epochs);
            set(&mut train.batch_size, t.batch_size);
            set(&mut train.base_lr, t.base_lr);
            set(&mut train.decay_factor, t.decay_factor);
            set(&mut train.decay_interval, t.decay_interval);
            set(&mut train.shuffle, t.shuffle);
        }
        set(&mut train.epochs, flags.epochs);
        set(&mut train.batch_size, flags.batch_size);
        set(&mut train.base_lr, flags.lr);

        let config = Self {
            seed,
            preset: preset.map(|p| p.name),
            data: file.data.unwrap_or_default(),
            window,
            split,
            normalize: file.normalize.unwrap_or(true),
            model,
            train,
            ablation_seeds: file.ablation_seeds.unwrap_or_else(|| vec![seed]),
            out: flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("runs/default")),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Csv { .. } = self.data {
            match &self.window {
                None => return Err(Error::Config("csv data needs a preset or a window section".into())),
                Some(w) if w.width == 0 || w.step == 0 || w.step > w.width || w.decimate == 0 => {
                    return Err(Error::Config(format!(
                        "window needs 0 < step <= width and decimate >= 1, got {}/{} decimate {}",
                        w.width, w.step, w.decimate
                    )))
                }
                _ => {}
            }
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation_seeds must not be empty".into()));
        }
        self.model.attention.validate()?;
        self.train_config(1).validate()
    }

    pub fn train_config(&self, threads: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.base_lr,
            decay_factor: self.train.decay_factor,
            decay_interval: self.train.decay_interval,
            seed: self.seed,
            shuffle: self.train.shuffle,
            threads,
        }
    }

    /// The same run under a different seed; random splits follow the seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        if let SplitPolicy::Random { seed: s, .. } = &mut c.split {
            *s = seed;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_resolve() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let config = RunConfig::resolve(read_file(&path).unwrap(), &Overrides::default()).unwrap();
            assert!(config.out.starts_with("runs"), "{}", path.display());
            seen += 1;
        }
        assert!(seen >= 3);
    }

    fn parse(json: &str) -> RunConfigFile {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::resolve(RunConfigFile::default(), &Overrides::default()).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.train.epochs, 500);
        assert_eq!(c.model.channel_plan, DEFAULT_CHANNEL_PLAN.to_vec());
        assert!(matches!(c.data, DataSource::Synthetic { num_classes: 4, .. }));
    }

    #[test]
    fn flag_beats_file_beats_preset() {
        let file = parse(r#"{"preset": "wisdm", "train": {"batch_size": 64}, "seed": 3}"#);
        let c = RunConfig::resolve(file.clone(), &Overrides::default()).unwrap();
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.base_lr, 1e-3);
        assert_eq!(c.window.as_ref().unwrap().width, 200);
        assert_eq!(c.split, SplitPolicy::Random { fraction: 0.7, seed: 3 });
        let flags = Overrides {
            batch_size: Some(16),
            seed: Some(9),
            attention: Some(AttentionVariant::None),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(file, &flags).unwrap();
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.attention.variant, AttentionVariant::None);
    }

    #[test]
    fn resolved_config_reloads_to_itself() {
        let file = parse(
            r#"{"preset": "pamap2", "data": {"source": "csv", "path": "x.csv"}, "model": {"channel_plan": [8, 8]}}"#,
        );
        let c = RunConfig::resolve(file, &Overrides::default()).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let again = RunConfig::resolve(serde_json::from_str(&json).unwrap(), &Overrides::default()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(serde_json::from_str::<RunConfigFile>(r#"{"epochs": 3}"#).is_err());
        let bad = parse(r#"{"train": {"epochs": 0}}"#);
        assert!(matches!(RunConfig::resolve(bad, &Overrides::default()), Err(Error::Config(_))));
        let csv = parse(r#"{"data": {"source": "csv", "path": "x.csv"}}"#);
        assert!(RunConfig::resolve(csv, &Overrides::default()).is_err());
        let unknown = parse(r#"{"preset": "mnist"}"#);
        assert!(RunConfig::resolve(unknown, &Overrides::default()).is_err());
    }
}
