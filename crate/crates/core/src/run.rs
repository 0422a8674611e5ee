//! Run directories.
//!
//! A training run writes, into its output directory:
//!
//! - `manifest.json`: resolved config, dataset paths, generator metadata, artifact names, tool version;
//! - `metrics.jsonl`: one JSON object per outer loop, flushed as each loop finishes;
//! - `summary.json`: final accuracies and diagnostics;
//! - `checkpoint.txt`: final parameters in the text checkpoint format of [`crate::model`].
//!
//! Feeding `manifest.json` back into [`execute`] reproduces the run bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratorMeta};
use crate::trainer::{TrainConfig, TrainOutcome, Trainer};
use crate::Result;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
/// Written by dataset generation next to the CSVs.
pub const DATASET_MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub metrics: String,
    pub summary: String,
    pub checkpoint: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self {
            metrics: METRICS_FILE.into(),
            summary: SUMMARY_FILE.into(),
            checkpoint: CHECKPOINT_FILE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub source: PathBuf,
    pub target: PathBuf,
    pub generator: Option<GeneratorMeta>,
    pub artifacts: Artifacts,
}

/// Written by dataset generation: metadata plus the two CSV file names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool_version: String,
    pub generator: GeneratorMeta,
    pub source: String,
    pub target: String,
}

impl RunManifest {
    pub fn new(config: TrainConfig, source: &Path, target: &Path) -> Self {
        let generator = source
            .parent()
            .map(|d| d.join(DATASET_MANIFEST_FILE))
            .and_then(|p| std::fs::read_to_string(p).ok())
            .and_then(|s| serde_json::from_str::<DatasetManifest>(&s).ok())
            .map(|m| m.generator);
        let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            source: abs(source),
            target: abs(target),
            generator,
            artifacts: Artifacts::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Trains according to `manifest`, writing all artifacts under `out_dir`.
pub fn execute(manifest: &RunManifest, out_dir: &Path) -> Result<TrainOutcome> {
    let source = Dataset::load_csv(&manifest.source)?;
    let target = Dataset::load_csv(&manifest.target)?;
    let trainer = Trainer::new(manifest.config.clone(), &source, &target)?;

    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join(MANIFEST_FILE), manifest)?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(&manifest.artifacts.metrics))?);
    let outcome = trainer.train_with(|m| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        log::info!(
            "loop {} ce {:.4} cdd {:?} cdd_g {:?} acc {:?} ({:.2}s)",
            m.loop_index,
            m.ce_loss,
            m.cdd,
            m.cdd_g,
            m.target_accuracy,
            m.wall_time_s
        );
        Ok(())
    })?;
    write_json(&out_dir.join(&manifest.artifacts.summary), &outcome.summary)?;
    outcome.params.save(&out_dir.join(&manifest.artifacts.checkpoint))?;
    Ok(outcome)
}
