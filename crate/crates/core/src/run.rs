//! Run configuration, run-directory layout and the command implementations
//! the CLI (and the C API) are built from.
//!
//! A run directory is named `<timestamp>-<confighash8>` unless a `--run-id`
//! is supplied, and holds `config.json`, `history.csv`, `checkpoint.bin`,
//! `metrics.json` and, for ablation runs, `ablation.csv`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    assemble, balanced_sample, ingest, interpolate, split, synth_generate, GenConfig, GenSummary,
    NormStats, PreparedDataset, SplitRefs,
};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::train::{
    ablate, evaluate, train, write_ablation_csv, write_history_csv, AblationGrid, AblationResult,
    MetricReport, TrainConfig,
};

/// Independent seeds for the data-side stages; the training seed lives in
/// [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub gen: u64,
    pub sample: u64,
    pub split: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            gen: 1,
            sample: 2,
            split: 3,
        }
    }
}

/// The single configuration artifact: generator, model and training
/// settings plus seeds and split ratios. Paths are command-line arguments,
/// not configuration, so one config file reproduces a run anywhere.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Seeds,
    pub split_ratios: SplitRatios,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl RunConfig {
    /// Load from a JSON file; missing fields take defaults, unknown keys are
    /// rejected.
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let file = File::open(path)?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().into()
    }

    pub fn hash_prefix(&self) -> String {
        hex_prefix(&self.hash(), 8)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::new();
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Resolve the run directory: explicit id, or timestamp + config hash.
pub fn run_dir(out_root: &Path, config: &RunConfig, run_id: Option<&str>) -> PathBuf {
    let name = match run_id {
        Some(id) => id.to_string(),
        None => format!(
            "{}-{}",
            chrono::Utc::now().format("%Y%m%d%H%M%S"),
            config.hash_prefix()
        ),
    };
    out_root.join(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

// ---- prepared-dataset manifest --------------------------------------------------

/// Everything `prepare` decided: where the data lives, how it was sampled
/// and split, and the sample ids per partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub data_dir: String,
    pub seeds: Seeds,
    pub split_ratios: SplitRatios,
    pub lookback: usize,
    pub horizon_minutes: u32,
    pub subgraph_radius: usize,
    pub refs: SplitRefs,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepareSummary {
    pub total: usize,
    pub positives: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub warnings: Vec<String>,
}

/// Generate a synthetic bundle under `out_dir`.
pub fn cmd_synth(config: &RunConfig, out_dir: &Path) -> Result<GenSummary> {
    config.gen.validate()?;
    synth_generate(&config.gen, config.seeds.gen, out_dir)
}

/// Ingest, interpolate, sample, split; write `manifest.json` and
/// `norm_stats.json` under `out_dir`.
pub fn cmd_prepare(data_dir: &Path, out_dir: &Path, config: &RunConfig) -> Result<PrepareSummary> {
    config.model.validate()?;
    let store = ingest(data_dir)?;
    let filled = interpolate(&store.speeds)?;
    let sampled = balanced_sample(
        &store,
        config.model.lookback,
        config.model.horizon_minutes,
        config.seeds.sample,
    )?;
    let ratios = config.split_ratios;
    let refs = split(
        &sampled.samples,
        (ratios.train, ratios.val, ratios.test),
        config.seeds.split,
    )?;
    let prepared = assemble(&store, &filled, &refs, &config.model)?;

    std::fs::create_dir_all(out_dir)?;
    let manifest = Manifest {
        data_dir: data_dir.to_string_lossy().into_owned(),
        seeds: config.seeds.clone(),
        split_ratios: ratios,
        lookback: config.model.lookback,
        horizon_minutes: config.model.horizon_minutes,
        subgraph_radius: config.model.subgraph_radius,
        refs: refs.clone(),
        warnings: sampled.warnings.clone(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    write_json(&out_dir.join("norm_stats.json"), &prepared.stats)?;

    let positives = refs
        .train
        .iter()
        .chain(&refs.val)
        .chain(&refs.test)
        .filter(|r| r.label == 1)
        .count();
    Ok(PrepareSummary {
        total: refs.total(),
        positives,
        train: refs.train.len(),
        val: refs.val.len(),
        test: refs.test.len(),
        warnings: sampled.warnings,
    })
}

/// Re-assemble a prepared dataset from its manifest for a given model
/// geometry.
pub fn load_prepared(prepared_dir: &Path, model: &ModelConfig) -> Result<(PreparedDataset, Manifest)> {
    let manifest: Manifest = read_json(&prepared_dir.join("manifest.json"))?;
    let data_dir = PathBuf::from(&manifest.data_dir);
    let store = ingest(&data_dir)?;
    let filled = interpolate(&store.speeds)?;
    let prepared = assemble(&store, &filled, &manifest.refs, model)?;
    Ok((prepared, manifest))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub val_metrics: MetricReport,
}

/// Train against a prepared dataset; write `config.json`, `history.csv`,
/// `checkpoint.bin` and `metrics.json` (best-epoch validation metrics) into
/// the run directory.
pub fn cmd_train(
    prepared_dir: &Path,
    out_root: &Path,
    run_id: Option<&str>,
    config: &RunConfig,
) -> Result<TrainSummary> {
    config.validate()?;
    let (prepared, _) = load_prepared(prepared_dir, &config.model)?;
    let (params, history) = train(&prepared.train, &prepared.val, &config.model, &config.train)?;
    let val_metrics = evaluate(&params, &prepared.val, &config.model, config.model.threshold)?;

    let dir = run_dir(out_root, config, run_id);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), config)?;
    let mut hist = BufWriter::new(File::create(dir.join("history.csv"))?);
    write_history_csv(&mut hist, &history)?;
    hist.flush()?;
    let ckpt = BufWriter::new(File::create(dir.join("checkpoint.bin"))?);
    save_checkpoint(ckpt, &params, &config.model)?;
    write_json(&dir.join("metrics.json"), &val_metrics)?;

    Ok(TrainSummary {
        run_dir: dir,
        epochs_run: history.epochs.len(),
        best_epoch: history.best_epoch,
        stopped_early: history.stopped_early,
        val_metrics,
    })
}

/// Which partition an evaluation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!(
                "unknown partition '{other}' (expected train, val or test)"
            ))),
        }
    }
}

/// Load a checkpoint and evaluate one partition; write `config.json` and
/// `metrics.json` into the run directory and return the report.
pub fn cmd_eval(
    checkpoint: &Path,
    prepared_dir: &Path,
    partition: Partition,
    threshold: Option<f64>,
    out_root: &Path,
    run_id: Option<&str>,
    config: &RunConfig,
) -> Result<MetricReport> {
    if !checkpoint.exists() {
        return Err(Error::MissingArtifact(checkpoint.to_path_buf()));
    }
    let (params, model_config): (ModelParams, ModelConfig) =
        load_checkpoint(BufReader::new(File::open(checkpoint)?))?;
    let (prepared, _) = load_prepared(prepared_dir, &model_config)?;
    let batch = match partition {
        Partition::Train => &prepared.train,
        Partition::Val => &prepared.val,
        Partition::Test => &prepared.test,
    };
    let threshold = threshold.unwrap_or(model_config.threshold);
    let report = evaluate(&params, batch, &model_config, threshold)?;

    let dir = run_dir(out_root, config, run_id);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), config)?;
    write_json(&dir.join("metrics.json"), &report)?;
    Ok(report)
}

/// Run the ablation grid; write `config.json` and `ablation.csv`.
pub fn cmd_ablate(
    prepared_dir: &Path,
    out_root: &Path,
    run_id: Option<&str>,
    grid: AblationGrid,
    seeds: &[u64],
    config: &RunConfig,
) -> Result<(AblationResult, PathBuf)> {
    config.validate()?;
    let manifest: Manifest = read_json(&prepared_dir.join("manifest.json"))?;
    let data_dir = PathBuf::from(&manifest.data_dir);
    let store = ingest(&data_dir)?;
    let filled = interpolate(&store.speeds)?;
    let result = ablate(
        &store,
        &filled,
        &manifest.refs,
        &config.model,
        &config.train,
        seeds,
        grid,
    )?;

    let dir = run_dir(out_root, config, run_id);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), config)?;
    let mut f = BufWriter::new(File::create(dir.join("ablation.csv"))?);
    write_ablation_csv(&mut f, &result)?;
    f.flush()?;
    Ok((result, dir))
}

/// Expose the normalization statistics a prepared dataset was built with.
pub fn load_norm_stats(prepared_dir: &Path) -> Result<NormStats> {
    read_json(&prepared_dir.join("norm_stats.json"))
}
