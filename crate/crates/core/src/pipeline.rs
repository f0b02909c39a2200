//! Stage orchestration over a self-contained run directory:
//!
//! ```text
//! <out>/config.toml
//! <out>/data/manifest.jsonl, images/, masks/
//! <out>/train/log.jsonl, checkpoints/, final.ckpt
//! <out>/eval/report.json, report.txt
//! <out>/cam/<id>.png, <id>_overlay.png, summary.json
//! ```
//!
//! Every stage draws its randomness from `seed::derive(run_seed, stage)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forge::{self, build_desk_corpus, load_split, DatasetManifest, FrameGroup, ManifestRecord, Split};
use crate::metrics::{self, MetricsReport};
use crate::model::Model;
use crate::seed;
use crate::train::{TrainLogRecord, TrainOutputs, Trainer, Validation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Train,
    Eval,
    Cam,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Synth, Stage::Train, Stage::Eval, Stage::Cam];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Cam => "cam",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown stage `{s}` (expected synth, train, eval or cam)")))
    }
}

/// Standard locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.jsonl")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn log(&self) -> PathBuf {
        self.train().join("log.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.train().join("checkpoints")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.train().join("final.ckpt")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("best.ckpt")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn cam(&self) -> PathBuf {
        self.root.join("cam")
    }

    /// Checkpoint used for evaluation: best-by-validation when present,
    /// otherwise the final one.
    pub fn eval_checkpoint(&self) -> Option<PathBuf> {
        [self.best_checkpoint(), self.final_checkpoint()].into_iter().find(|p| p.exists())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the procedural corpus and its manifest under `out`.
pub fn synth(config: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    build_desk_corpus(&config.data, seed::derive(config.seed, "synth"), out)
}

/// Options for re-splitting an existing manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    /// Per-group frame quotas `(real, fake)`; `None` keeps every frame.
    pub quotas: Option<(usize, usize)>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Optionally quota-samples frames per `(group, label)`, then assigns splits
/// by rank. Paths are rewritten so they resolve from `out_manifest`.
pub fn split(manifest_path: &Path, out_manifest: &Path, options: &SplitOptions) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = forge::manifest::base_dir(manifest_path);
    let out_base = forge::manifest::base_dir(out_manifest);
    let mut records = match options.quotas {
        None => manifest.records.clone(),
        Some((real, fake)) => {
            let mut groups: BTreeMap<String, FrameGroup<ManifestRecord>> = BTreeMap::new();
            for r in &manifest.records {
                groups
                    .entry(format!("{}/{}", r.group_id, r.label))
                    .or_insert_with(|| FrameGroup { fake: r.label == 1, frames: Vec::new() })
                    .frames
                    .push(r.clone());
            }
            forge::quota_sample(&groups, real, fake, seed::derive(options.seed, "split"))
                .into_iter()
                .map(|(_, r)| r)
                .collect()
        }
    };
    let splits = forge::split_by_rank(records.len(), options.n_train, options.n_test)?;
    let same_dir = fs::canonicalize(&base).ok() == fs::canonicalize(&out_base).ok();
    for (r, s) in records.iter_mut().zip(splits) {
        r.split = s;
        if !same_dir {
            for p in [&mut r.image_path, &mut r.mask_path] {
                let abs = std::path::absolute(base.join(&*p)).map_err(|e| Error::io(base.join(&*p), e))?;
                *p = abs.to_string_lossy().into_owned();
            }
        }
    }
    let out = DatasetManifest { seed: options.seed, config_hash: manifest.config_hash, records };
    out.write(out_manifest)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub records: Vec<TrainLogRecord>,
    pub best: Option<(f64, u64)>,
}

/// Trains on the manifest's train split; validates on its val split when it
/// has one. `resume` continues from a checkpoint instead of a fresh model.
pub fn train(config: &RunConfig, manifest_path: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = forge::manifest::base_dir(manifest_path);
    let channels = config.model.channels();
    let train = load_split(&manifest, &base, Split::Train, channels)?;
    if train.is_empty() {
        return Err(Error::Validation("manifest has no train samples".into()));
    }
    let val = load_split(&manifest, &base, Split::Val, channels)?;
    let data: Vec<_> = train.iter().map(|s| s.to_train_sample()).collect();

    let mut trainer = match resume {
        Some(path) => Trainer::resume(Checkpoint::load_for(path, &config.model)?, config.train.clone())?,
        None => {
            let train_seed = config.train_seed();
            let model = Model::build(config.model.clone(), seed::derive(train_seed, "init"))?;
            Trainer::new(model, config.train.clone(), train_seed)?
        }
    };
    let outputs = TrainOutputs { log: Some(out.join("log.jsonl")), checkpoint_dir: Some(out.join("checkpoints")) };
    let validation = (!val.is_empty()).then(|| Validation { samples: &val, thresholds: config.eval.thresholds() });
    let records = trainer.run(&data, &outputs, validation.as_ref())?;
    let final_checkpoint = out.join("final.ckpt");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary { final_checkpoint, records, best: trainer.best() })
}

/// Evaluates `checkpoint` on the configured split and writes
/// `report.json` and `report.txt` under `out`.
pub fn eval(config: &RunConfig, manifest_path: &Path, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    let model = Checkpoint::load_for(checkpoint, &config.model)?.model()?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = forge::manifest::base_dir(manifest_path);
    let samples = load_split(&manifest, &base, config.eval.split, config.model.channels())?;
    let report = metrics::evaluate(&model, &samples, &config.eval.thresholds())?;
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(&out.join("report.txt"), &report.to_text())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamRecord {
    pub image_path: String,
    pub mean_inside: f64,
    pub mean_outside: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamSummary {
    /// Every fake sample of the split, in manifest order.
    pub samples: Vec<CamRecord>,
    /// Share of fake samples whose mean CAM inside the mask beats the outside.
    pub inside_higher_fraction: f64,
}

/// Grad-CAM++ over the fake samples of the configured split. Heat maps are
/// rendered for the first `eval.cam_samples`; the summary covers all.
pub fn cam(config: &RunConfig, manifest_path: &Path, checkpoint: &Path, out: &Path) -> Result<CamSummary> {
    let model = Checkpoint::load_for(checkpoint, &config.model)?.model()?;
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = forge::manifest::base_dir(manifest_path);
    let records: Vec<_> = manifest.split(config.eval.split).into_iter().filter(|r| r.label == 1).collect();
    if records.is_empty() {
        return Err(Error::Validation(format!("the {} split has no fake samples", config.eval.split)));
    }
    let samples = load_split(&manifest, &base, config.eval.split, config.model.channels())?;
    let fakes: Vec<_> = samples.iter().filter(|s| s.label == 1).collect();
    let mut out_records = Vec::with_capacity(fakes.len());
    for (i, (sample, record)) in fakes.iter().zip(&records).enumerate() {
        let map = cam::grad_cam_pp(&model, &sample.image)?;
        let (mean_inside, mean_outside) = cam::inside_outside_means(&map, &sample.mask)?;
        if i < config.eval.cam_samples {
            let img = forge::io::load_image(&base.join(&record.image_path), config.model.channels())?;
            let stem = Path::new(&record.image_path)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("sample");
            cam::save_cam(&map, Some(&img), &out.join(format!("{stem}.png")))?;
        }
        out_records.push(CamRecord { image_path: record.image_path.clone(), mean_inside, mean_outside });
    }
    let higher = out_records.iter().filter(|r| r.mean_inside > r.mean_outside).count();
    let summary = CamSummary {
        inside_higher_fraction: higher as f64 / out_records.len() as f64,
        samples: out_records,
    };
    write_text(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    pub manifest: Option<DatasetManifest>,
    pub train: Option<TrainSummary>,
    pub report: Option<MetricsReport>,
    pub cam: Option<CamSummary>,
}

/// Runs `stages` (in canonical order) into the run directory `out`.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage], out: &Path) -> Result<PipelineOutcome> {
    config.validate()?;
    let mut stages = stages.to_vec();
    stages.sort_unstable();
    stages.dedup();
    let layout = RunLayout::new(out);
    let has = |s: Stage| stages.contains(&s);

    if has(Stage::Train) && !has(Stage::Synth) && !layout.manifest().exists() {
        return Err(Error::Dependency(format!(
            "train needs a manifest at {}; add the synth stage",
            layout.manifest().display()
        )));
    }
    if (has(Stage::Eval) || has(Stage::Cam)) && !has(Stage::Train) && layout.eval_checkpoint().is_none() {
        return Err(Error::Dependency(format!(
            "eval and cam need a checkpoint at {}; add the train stage",
            layout.final_checkpoint().display()
        )));
    }
    if !has(Stage::Synth) && !layout.manifest().exists() {
        return Err(Error::Dependency(format!("no manifest at {}", layout.manifest().display())));
    }

    write_text(&layout.config(), &config.to_toml()?)?;
    let mut outcome = PipelineOutcome::default();
    for stage in stages {
        match stage {
            Stage::Synth => outcome.manifest = Some(synth(config, &layout.data())?),
            Stage::Train => {
                if layout.train().exists() {
                    fs::remove_dir_all(layout.train()).map_err(|e| Error::io(layout.train(), e))?;
                }
                outcome.train = Some(train(config, &layout.manifest(), &layout.train(), None)?);
            }
            Stage::Eval => {
                let ckpt = layout.eval_checkpoint().expect("checked above");
                outcome.report = Some(eval(config, &layout.manifest(), &ckpt, &layout.eval())?);
            }
            Stage::Cam => {
                let ckpt = layout.eval_checkpoint().expect("checked above");
                outcome.cam = Some(cam(config, &layout.manifest(), &ckpt, &layout.cam())?);
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_without_checkpoint_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = run_pipeline(&RunConfig::default(), &[Stage::Eval], dir.path());
        assert!(matches!(r, Err(Error::Dependency(_))), "{r:?}");
    }

    #[test]
    fn split_applies_quotas_and_ranks() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = RunConfig::default();
        config.data = forge::CorpusConfig { samples: 20, image_size: 16, n_train: 10, n_test: 5, ..Default::default() };
        synth(&config, &dir.path().join("data")).unwrap();
        let opts = SplitOptions { quotas: Some((1, 1)), n_train: 4, n_test: 2, seed: 1 };
        let out = dir.path().join("other").join("manifest.jsonl");
        let m = split(&dir.path().join("data/manifest.jsonl"), &out, &opts).unwrap();
        // 4 groups of 5 frames, each holding both labels
        assert_eq!(m.records.len(), 8);
        assert_eq!(forge::corpus::split_counts(&m), (4, 2, 2));
        forge::verify_manifest(&m, &forge::manifest::base_dir(&out)).unwrap();
        assert!(split(&dir.path().join("data/manifest.jsonl"), &out, &SplitOptions { n_train: 30, ..opts }).is_err());
    }

    #[test]
    fn stage_names_parse() {
        assert_eq!("cam".parse::<Stage>().unwrap(), Stage::Cam);
        assert!("fit".parse::<Stage>().is_err());
    }
}
