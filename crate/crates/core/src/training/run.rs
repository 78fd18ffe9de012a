//! On-disk layout of a cross-validated, multi-seed experiment.
//!
//! ```text
//! run.json                              RunInfo
//! seed_<s>/folds.json                   FoldPlan
//! seed_<s>/fold_<k>/model.ckpt          selected-epoch checkpoint
//! seed_<s>/fold_<k>/history.json        per-epoch loss and validation RMSE
//! seed_<s>/fold_<k>/predictions_<split>.csv
//! seed_<s>/predictions_<split>.csv      mean over the seed's folds
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_fold, EpochRecord, FoldPlan, Prediction, TrainConfig};
use crate::data::{Dataset, Item, Split};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const RUN_INFO_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const FOLD_PLAN_FILE: &str = "folds.json";

/// Splits that receive prediction files, when present in the data.
pub const PREDICTED_SPLITS: [Split; 2] = [Split::Dev, Split::Eval];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub data_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub splits: Vec<Split>,
    /// Absent for runs produced by score averaging.
    pub model: Option<ModelConfig>,
    /// Source runs of an averaged run.
    #[serde(default)]
    pub parents: Vec<PathBuf>,
}

impl RunInfo {
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        write_json(&run_dir.join(RUN_INFO_FILE), self)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_INFO_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::data(format!("{} is not a run directory ({e})", run_dir.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldHistory {
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

pub fn fold_dir(run_dir: &Path, seed: u64, fold: usize) -> PathBuf {
    seed_dir(run_dir, seed).join(format!("fold_{fold}"))
}

pub fn predictions_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("predictions_{split}.csv"))
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
    w.write_record(["utterance_id", "score"]).map_err(csv_err)?;
    for p in preds {
        w.write_record([p.utterance_id.as_str(), &format!("{}", p.score)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    if !path.exists() {
        return Err(Error::data(format!("missing predictions file {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::data_at(i + 1, e.to_string()))?;
        let id = rec.get(0).unwrap_or("").to_string();
        let score: f64 = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::data_at(i + 1, format!("bad score in {}", path.display())))?;
        out.push(Prediction { utterance_id: id, score });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(e.to_string())
}

/// Fold models of one seed, in fold order.
pub fn load_fold_models(run_dir: &Path, info: &RunInfo, seed: u64) -> Result<Vec<Model>> {
    (0..info.folds)
        .map(|k| {
            let path = fold_dir(run_dir, seed, k).join(CHECKPOINT_FILE);
            if !path.exists() {
                return Err(Error::data(format!("missing checkpoint for seed {seed} fold {k} ({})", path.display())));
            }
            Model::load(&path)
        })
        .collect()
}

/// Fold-averaged predictions of one seed.
pub fn load_seed_predictions(run_dir: &Path, seed: u64, split: Split) -> Result<Vec<Prediction>> {
    let path = predictions_file(&seed_dir(run_dir, seed), split);
    if !path.exists() {
        return Err(Error::data(format!("missing {split} predictions for seed {seed} ({})", path.display())));
    }
    read_predictions(&path)
}

fn to_predictions(items: &[&Item], scores: &[f64]) -> Vec<Prediction> {
    items.iter().zip(scores).map(|(it, &s)| Prediction { utterance_id: it.row.utterance_id.clone(), score: s }).collect()
}

/// Trains `folds × seeds` models on the train split, writes every artifact
/// of the layout above and returns the run description. Fold plans for all
/// seeds are built before any training starts. Up to `jobs` folds train
/// concurrently; results do not depend on `jobs`.
pub fn run_protocol(
    dataset: &Dataset,
    data_dir: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    run_dir: &Path,
    jobs: usize,
) -> Result<RunInfo> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if seeds.is_empty() || seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(Error::Config("seeds must be a non-empty list without repeats".into()));
    }
    if dataset.feature_dim() != Some(model_cfg.input_dim) {
        return Err(Error::Config(format!(
            "model input_dim {} does not match feature width {:?}",
            model_cfg.input_dim,
            dataset.feature_dim()
        )));
    }
    let train_items = dataset.split(Split::Train);
    let splits: Vec<Split> = PREDICTED_SPLITS.into_iter().filter(|&s| !dataset.split(s).is_empty()).collect();
    let plans: Vec<FoldPlan> = seeds
        .iter()
        .map(|&s| super::grouped_kfold(train_items.iter().map(|it| it.row.scene_token.as_str()), train_cfg.folds, s))
        .collect::<Result<_>>()?;

    for (&seed, plan) in seeds.iter().zip(&plans) {
        std::fs::create_dir_all(seed_dir(run_dir, seed))?;
        write_json(&seed_dir(run_dir, seed).join(FOLD_PLAN_FILE), plan)?;
    }
    let eval_items: Vec<Vec<&Item>> = splits.iter().map(|&s| dataset.split(s)).collect();
    let tasks: Vec<(usize, usize)> = (0..seeds.len()).flat_map(|si| (0..train_cfg.folds).map(move |k| (si, k))).collect();
    let run_task = |&(si, k): &(usize, usize)| -> Result<Vec<Vec<f64>>> {
        let seed = seeds[si];
        let cfg = TrainConfig { seed, ..*train_cfg };
        let (train, val) = plans[si].split(&train_items, k)?;
        let result = train_fold(&train, &val, model_cfg, &cfg, k)?;
        log::info!("seed {seed} fold {k}: best epoch {} val rmse {:.3}", result.best_epoch, result.best_val_rmse());
        let dir = fold_dir(run_dir, seed, k);
        std::fs::create_dir_all(&dir)?;
        result.model.save(&dir.join(CHECKPOINT_FILE))?;
        write_json(&dir.join(HISTORY_FILE), &FoldHistory { best_epoch: result.best_epoch, epochs: result.history.clone() })?;
        let mut per_split = Vec::with_capacity(splits.len());
        for (split, items) in splits.iter().zip(&eval_items) {
            let scores = super::ensemble_predict(std::slice::from_ref(&result.model), items)?;
            write_predictions(&predictions_file(&dir, *split), &to_predictions(items, &scores))?;
            per_split.push(scores);
        }
        Ok(per_split)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outputs: Vec<Vec<Vec<f64>>> = pool.install(|| tasks.par_iter().map(run_task).collect::<Result<_>>())?;

    for (si, &seed) in seeds.iter().enumerate() {
        let folds = &outputs[si * train_cfg.folds..(si + 1) * train_cfg.folds];
        for (j, (split, items)) in splits.iter().zip(&eval_items).enumerate() {
            let mut sum = vec![0.0; items.len()];
            for fold in folds {
                sum.iter_mut().zip(&fold[j]).for_each(|(s, v)| *s += v);
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / train_cfg.folds as f64).collect();
            write_predictions(&predictions_file(&seed_dir(run_dir, seed), *split), &to_predictions(items, &mean))?;
        }
    }
    let info = RunInfo {
        data_dir: data_dir.to_path_buf(),
        seeds: seeds.to_vec(),
        folds: train_cfg.folds,
        splits,
        model: Some(*model_cfg),
        parents: Vec::new(),
    };
    info.save(run_dir)?;
    Ok(info)
}
