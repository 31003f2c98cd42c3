use std::fs;
use std::path::{Path, PathBuf};

use danhar::attention::AttentionKind;
use danhar::checkpoint::{load_checkpoint, save_checkpoint};
use danhar::data::{
    decimate, load_archive, load_csv, normalize, preset, save_archive, split, synth_generate, window_all, CsvSchema,
    EmbedMode, LabelPolicy, NormStats, SynthConfig, WindowedDataset,
};
use danhar::train::{evaluate_with_threads, train, write_history, Metrics};
use danhar::{AttentionTrace, AttentionVariant, Error, Model, ModelConfig, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{DataSource, RunConfig};

pub const ARCHIVE_FILE: &str = "dataset.danhar";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))
}

pub fn load_dataset(config: &RunConfig) -> Result<WindowedDataset> {
    match &config.data {
        DataSource::Synthetic {
            num_classes,
            per_class,
            axes,
            width,
            mode,
        } => synth_generate(&SynthConfig {
            seed: config.seed,
            num_classes: *num_classes,
            per_class: *per_class,
            axes: *axes,
            width: *width,
            mode: *mode,
            ..SynthConfig::default()
        }),
        DataSource::Archive { path } => load_archive(path),
        DataSource::Csv { path, schema } => {
            let w = config.window.as_ref().expect("validated");
            window_csv(path, schema, w.width, w.step, w.label_policy, w.decimate)
        }
    }
}

fn window_csv(
    path: &Path,
    schema: &CsvSchema,
    width: usize,
    step: usize,
    policy: LabelPolicy,
    factor: usize,
) -> Result<WindowedDataset> {
    let csv = load_csv(path, schema)?;
    let series = if factor > 1 {
        csv.series.iter().map(|s| decimate(s, factor)).collect::<Result<Vec<_>>>()?
    } else {
        csv.series
    };
    window_all(&series, width, step, policy, &csv.class_names)
}

/// Train/test sets with train-fitted normalization applied.
pub fn prepare_split(config: &RunConfig, data: &WindowedDataset) -> Result<(WindowedDataset, WindowedDataset, Option<NormStats>)> {
    let (train_set, test_set) = split(data, &config.split)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config(format!(
            "split left {} train and {} test windows; both must be non-empty",
            train_set.len(),
            test_set.len()
        )));
    }
    if config.normalize && data.norm.is_none() {
        let (a, b, stats) = normalize(&train_set, &test_set)?;
        Ok((a, b, Some(stats)))
    } else {
        Ok((train_set, test_set, None))
    }
}

pub fn model_config(config: &RunConfig, data: &WindowedDataset, variant: AttentionVariant) -> ModelConfig {
    let mut attention = config.model.attention;
    attention.variant = variant;
    ModelConfig {
        backbone: config.model.backbone,
        channel_plan: config.model.channel_plan.clone(),
        conv_kernel: config.model.conv_kernel,
        pool: config.model.pool,
        num_classes: data.num_classes(),
        sensor_axes: data.axes,
        window_length: data.width,
        attention,
        seed: config.seed,
    }
}

pub struct PrepareArgs {
    pub input: Option<PathBuf>,
    pub preset: Option<String>,
    pub width: Option<usize>,
    pub step: Option<usize>,
    pub decimate: Option<usize>,
    pub label_policy: Option<LabelPolicy>,
    pub synthetic: bool,
    pub classes: usize,
    pub per_class: usize,
    pub axes: usize,
    pub mode: EmbedMode,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn prepare(args: PrepareArgs) -> Result<serde_json::Value> {
    let data = match (&args.input, args.synthetic) {
        (Some(_), true) => return Err(Error::Config("give either --input or --synthetic, not both".into())),
        (None, false) => return Err(Error::Config("prepare needs --input <csv> or --synthetic".into())),
        (None, true) => synth_generate(&SynthConfig {
            seed: args.seed,
            num_classes: args.classes,
            per_class: args.per_class,
            axes: args.axes,
            width: args.width.unwrap_or(64),
            mode: args.mode,
            ..SynthConfig::default()
        })?,
        (Some(path), false) => {
            let p = args.preset.as_deref().map(preset).transpose()?;
            let width = args.width.or(p.as_ref().map(|p| p.width));
            let step = args.step.or(p.as_ref().map(|p| p.step));
            let (Some(width), Some(step)) = (width, step) else {
                return Err(Error::Config("csv input needs --preset or both --width and --step".into()));
            };
            let policy = args
                .label_policy
                .or(p.as_ref().map(|p| p.label_policy))
                .unwrap_or_default();
            let factor = args.decimate.or(p.as_ref().map(|p| p.decimate)).unwrap_or(1);
            window_csv(path, &CsvSchema::default(), width, step, policy, factor)?
        }
    };
    if data.is_empty() {
        return Err(Error::Config("no windows produced; every series is shorter than the window".into()));
    }
    create_dir(&args.out)?;
    save_archive(&data, &args.out.join(ARCHIVE_FILE))?;
    let summary = json!({
        "num_windows": data.len(),
        "class_histogram": data.class_names.iter().zip(data.class_histogram()).collect::<std::collections::BTreeMap<_, _>>(),
        "class_names": data.class_names,
        "dims": [data.axes, data.width],
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Serialize)]
struct RunMetrics<'a> {
    #[serde(rename = "final")]
    final_metrics: &'a Metrics,
    #[serde(rename = "best")]
    best_metrics: &'a Metrics,
    best_epoch: usize,
    params: usize,
    attention_params: usize,
    train_windows: usize,
    test_windows: usize,
}

pub fn train_run(config: &RunConfig, threads: usize) -> Result<serde_json::Value> {
    let out = &config.out;
    create_dir(out)?;
    write_json(&out.join("config.json"), config)?;
    let data = load_dataset(config)?;
    let (train_set, test_set, stats) = prepare_split(config, &data)?;
    let model = Model::build(model_config(config, &data, config.model.attention.variant))?;
    log::info!(
        "training {} parameters on {} windows, evaluating on {}",
        model.param_count(),
        train_set.len(),
        test_set.len()
    );
    let (params, attention_params) = (model.param_count(), model.attention_param_count());
    let outcome = train(model, &train_set, &test_set, &config.train_config(threads))?;
    write_history(&outcome.history, &out.join("history.csv"))?;
    save_checkpoint(&outcome.final_model, &out.join("final.ckpt"))?;
    save_checkpoint(&outcome.best_model, &out.join("best.ckpt"))?;
    if let Some(stats) = &stats {
        write_json(&out.join("normalization.json"), stats)?;
    }
    let final_metrics = evaluate_with_threads(&outcome.final_model, &test_set, threads)?;
    let best_metrics = evaluate_with_threads(&outcome.best_model, &test_set, threads)?;
    let metrics = RunMetrics {
        final_metrics: &final_metrics,
        best_metrics: &best_metrics,
        best_epoch: outcome.best_epoch,
        params,
        attention_params,
        train_windows: train_set.len(),
        test_windows: test_set.len(),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    Ok(json!({
        "out": out,
        "final_acc": final_metrics.accuracy,
        "best_acc": best_metrics.accuracy,
        "best_epoch": outcome.best_epoch,
    }))
}

fn apply_normalization(data: &mut WindowedDataset, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::from(e).context(format!("reading {}", p.display())))?;
            let stats: NormStats = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            stats.apply(data)
        }
        None => Ok(()),
    }
}

fn check_compatible(model: &Model, data: &WindowedDataset) -> Result<()> {
    let c = model.config();
    if (c.sensor_axes, c.window_length, c.num_classes) != (data.axes, data.width, data.num_classes()) {
        return Err(Error::Config(format!(
            "checkpoint expects {}×{} windows and {} classes, archive has {}×{} and {}",
            c.sensor_axes,
            c.window_length,
            c.num_classes,
            data.axes,
            data.width,
            data.num_classes()
        )));
    }
    Ok(())
}

pub struct EvaluateArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub normalization: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Evaluates a checkpoint on an archive, or, without `--data`, on the test
/// split that `config` reproduces.
pub fn evaluate(args: EvaluateArgs, config: Option<&RunConfig>, threads: usize) -> Result<Metrics> {
    let (model, test_set) = match (&args.data, config) {
        (Some(path), _) => {
            let ckpt = args
                .checkpoint
                .clone()
                .ok_or_else(|| Error::Config("--data needs --checkpoint".into()))?;
            let mut data = load_archive(path)?;
            apply_normalization(&mut data, args.normalization.as_deref())?;
            (load_checkpoint(&ckpt)?, data)
        }
        (None, Some(config)) => {
            let ckpt = args.checkpoint.clone().unwrap_or_else(|| config.out.join("best.ckpt"));
            let data = load_dataset(config)?;
            let (_, test_set, _) = prepare_split(config, &data)?;
            (load_checkpoint(&ckpt)?, test_set)
        }
        (None, None) => return Err(Error::Config("evaluate needs --data or --config".into())),
    };
    check_compatible(&model, &test_set)?;
    let metrics = evaluate_with_threads(&model, &test_set, threads)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    Ok(metrics)
}

pub struct AblationRow {
    pub seed: u64,
    pub variant: AttentionVariant,
    pub outcome: std::result::Result<(usize, f64, f64), String>,
}

fn run_variant(config: &RunConfig, data: &WindowedDataset, variant: AttentionVariant) -> Result<(usize, f64, f64)> {
    let (train_set, test_set, _) = prepare_split(config, data)?;
    let model = Model::build(model_config(config, data, variant))?;
    let params = model.param_count();
    let out = train(model, &train_set, &test_set, &config.train_config(1))?;
    let final_acc = evaluate_with_threads(&out.final_model, &test_set, 1)?.accuracy;
    let best_acc = evaluate_with_threads(&out.best_model, &test_set, 1)?.accuracy;
    Ok((params, final_acc, best_acc))
}

/// Trains every attention variant for every seed. Jobs are spread over
/// `threads` workers; each job is deterministic on its own.
pub fn ablate(config: &RunConfig, threads: usize) -> Result<Vec<AblationRow>> {
    create_dir(&config.out)?;
    write_json(&config.out.join("config.json"), config)?;
    let mut jobs = Vec::new();
    for &seed in &config.ablation_seeds {
        let seeded = config.with_seed(seed);
        let data = load_dataset(&seeded);
        for variant in AttentionVariant::ALL {
            jobs.push((seeded.clone(), variant, data.as_ref().map_err(ToString::to_string).cloned()));
        }
    }
    let run = |(cfg, variant, data): &(RunConfig, AttentionVariant, std::result::Result<WindowedDataset, String>)| {
        let outcome = match data {
            Ok(d) => run_variant(cfg, d, *variant).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        if let Err(e) = &outcome {
            log::warn!("variant {variant} seed {} failed: {e}", cfg.seed);
        } else {
            log::info!("variant {variant} seed {} done", cfg.seed);
        }
        AblationRow {
            seed: cfg.seed,
            variant: *variant,
            outcome,
        }
    };
    let threads = threads.clamp(1, jobs.len());
    let rows: Vec<AblationRow> = if threads == 1 {
        jobs.iter().map(run).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let mut slots: Vec<Option<AblationRow>> = (0..jobs.len()).map(|_| None).collect();
        let done = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let row = run(&jobs[i]);
                    done.lock().expect("no poisoned workers")[i] = Some(row);
                });
            }
        });
        slots.into_iter().map(|r| r.expect("every job ran")).collect()
    };
    write_ablation(&rows, &config.out.join("ablation.csv"))?;
    Ok(rows)
}

pub fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "variant", "params", "final_acc", "best_acc"])?;
    for r in rows {
        let seed = r.seed.to_string();
        match &r.outcome {
            Ok((params, f, b)) => {
                w.write_record([seed, r.variant.to_string(), params.to_string(), f.to_string(), b.to_string()])?
            }
            Err(_) => w.write_record([seed, r.variant.to_string(), String::new(), "failed".into(), "failed".into()])?,
        }
    }
    for variant in AttentionVariant::ALL {
        let ok: Vec<_> = rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        let record = if ok.is_empty() {
            vec!["mean".into(), variant.to_string(), String::new(), "failed".into(), "failed".into()]
        } else {
            let n = ok.len() as f64;
            vec![
                "mean".into(),
                variant.to_string(),
                ok[0].0.to_string(),
                (ok.iter().map(|o| o.1).sum::<f64>() / n).to_string(),
                (ok.iter().map(|o| o.2).sum::<f64>() / n).to_string(),
            ]
        };
        w.write_record(record)?;
    }
    w.flush()?;
    Ok(())
}

pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub normalization: Option<PathBuf>,
    pub windows: Vec<usize>,
    pub out: PathBuf,
}

/// Writes `temporal_<i>.csv` and `channel_<i>.csv` for each selected window.
pub fn export_attention(args: ExportArgs) -> Result<Vec<PathBuf>> {
    let model = load_checkpoint(&args.checkpoint)?;
    let mut data = load_archive(&args.data)?;
    apply_normalization(&mut data, args.normalization.as_deref())?;
    check_compatible(&model, &data)?;
    if args.windows.is_empty() {
        return Err(Error::Config("no windows selected".into()));
    }
    for &i in &args.windows {
        if i >= data.len() {
            return Err(Error::IndexOutOfRange { index: i, len: data.len() });
        }
    }
    create_dir(&args.out)?;
    let mut written = Vec::new();
    for &i in &args.windows {
        let mut trace = AttentionTrace::new();
        model.predict(&data.batch(&[i])?, Some(&mut trace))?;
        let tpath = args.out.join(format!("temporal_{i}.csv"));
        let mut t = csv::Writer::from_path(&tpath)?;
        t.write_record(["layer", "h", "w", "weight"])?;
        for rec in trace.of_kind(AttentionKind::Temporal) {
            let (h, w) = (rec.weights.shape()[2], rec.weights.shape()[3]);
            for r in 0..h {
                for c in 0..w {
                    let v = rec.weights.data()[r * w + c];
                    t.write_record([rec.layer.to_string(), r.to_string(), c.to_string(), v.to_string()])?;
                }
            }
        }
        t.flush()?;
        let cpath = args.out.join(format!("channel_{i}.csv"));
        let mut c = csv::Writer::from_path(&cpath)?;
        c.write_record(["layer", "channel", "weight"])?;
        for rec in trace.of_kind(AttentionKind::Channel) {
            for (ch, v) in rec.weights.data().iter().enumerate() {
                c.write_record([rec.layer.to_string(), ch.to_string(), v.to_string()])?;
            }
        }
        c.flush()?;
        written.push(tpath);
        written.push(cpath);
    }
    Ok(written)
}
