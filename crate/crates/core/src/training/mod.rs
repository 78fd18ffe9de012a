//! Loss, AdamW with decoupled weight decay, global-norm clipping, scene-grouped
//! k-fold planning, the per-fold training loop, seed ensembles and uniform
//! score averaging.

pub mod run;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Item;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Model, ModelConfig, LABEL_SCALE};
use crate::seqcore::{ParamStore, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Mixed into the seed so minibatch order is independent of initialization.
const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 1e-3, batch_size: 64, clip_norm: 1.0, epochs: 5, seed: 1, folds: 5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lr) || !positive(self.clip_norm) {
            return Err(Error::Config("lr and clip_norm must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        Ok(())
    }
}

fn sigmoid(r: f64) -> f64 {
    1.0 / (1.0 + (-r).exp())
}

/// Mean of `(σ(r) − y/100)²` over a batch of logits and 0–100 labels.
pub fn mse_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::arg("mse_loss", "empty batch"));
    }
    if logits.len() != labels.len() {
        return Err(Error::dim("mse_loss", format!("{} logits vs {} labels", logits.len(), labels.len())));
    }
    let sum: f64 = logits.iter().zip(labels).map(|(&r, &y)| (sigmoid(r) - y / LABEL_SCALE).powi(2)).sum();
    Ok(sum / logits.len() as f64)
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<F: Real = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Array2<F>>,
    pub v: BTreeMap<String, Array2<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// One AdamW update from the gradients held in `params`. Decay
/// `θ ← θ·(1 − lr·wd)` is applied separately from the bias-corrected
/// adaptive step. A missing gradient slot counts as zero. Nothing is
/// modified when any gradient is non-finite.
pub fn adamw_step<F: Real>(params: &mut ParamStore<F>, state: &mut AdamState<F>, lr: f64, weight_decay: f64) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c = |v: f64| F::from_f64(v).expect("representable");
    let (b1, b2) = (c(ADAM_BETA1), c(ADAM_BETA2));
    let (one_b1, one_b2) = (c(1.0 - ADAM_BETA1), c(1.0 - ADAM_BETA2));
    let bc1 = c(1.0 - ADAM_BETA1.powi(t));
    let bc2 = c(1.0 - ADAM_BETA2.powi(t));
    let (lr_f, eps) = (c(lr), c(ADAM_EPS));
    let decay = c(1.0 - lr * weight_decay);
    for (name, tensor) in params.iter_mut() {
        let (value, grad) = tensor.value_and_grad_mut();
        let m = state.m.entry(name.to_string()).or_insert_with(|| Array2::zeros(value.dim()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Array2::zeros(value.dim()));
        let zero = F::zero();
        let update = |theta: &mut F, g: F, m: &mut F, v: &mut F| {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta = *theta * decay - lr_f * m_hat / (v_hat.sqrt() + eps);
        };
        match grad {
            Some(g) => ndarray::Zip::from(value).and(&*g).and(m).and(v).for_each(|th, &g, m, v| update(th, g, m, v)),
            None => ndarray::Zip::from(value).and(m).and(v).for_each(|th, m, v| update(th, zero, m, v)),
        }
    }
    Ok(())
}

/// Rescales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<F: Real>(params: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = params.grad_norm().to_f64().unwrap_or(f64::INFINITY);
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm).expect("representable");
        for (_, t) in params.iter_mut() {
            if let (_, Some(g)) = t.value_and_grad_mut() {
                g.mapv_inplace(|v| v * scale);
            }
        }
    }
    norm
}

/// Assignment of scene tokens to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, token: &str) -> Result<usize> {
        self.assignment.get(token).copied().ok_or_else(|| Error::data(format!("scene token {token} is not in the fold plan")))
    }

    pub fn tokens_in(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment.iter().filter(|(_, &f)| f == fold).map(|(t, _)| t.as_str()).collect()
    }

    /// Items outside and inside `fold`, each in input order.
    pub fn split<'a>(&self, items: &[&'a Item], fold: usize) -> Result<(Vec<&'a Item>, Vec<&'a Item>)> {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for &it in items {
            if self.fold_of(&it.row.scene_token)? == fold {
                val.push(it);
            } else {
                train.push(it);
            }
        }
        Ok((train, val))
    }
}

/// Shuffles the sorted unique tokens with a seeded RNG and deals them
/// round-robin, so fold sizes differ by at most one token.
pub fn grouped_kfold<'a>(tokens: impl IntoIterator<Item = &'a str>, folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds == 0 {
        return Err(Error::Config("folds must be >= 1".into()));
    }
    let unique: BTreeSet<&str> = tokens.into_iter().collect();
    if unique.len() < folds {
        return Err(Error::data(format!("{} scene tokens cannot fill {folds} folds", unique.len())));
    }
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = order.into_iter().enumerate().map(|(i, t)| (t.to_string(), i % folds)).collect();
    Ok(FoldPlan { folds, assignment })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// On the 0–100 label scale.
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    /// Parameters from the selected epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl FoldResult {
    pub fn best_val_rmse(&self) -> f64 {
        self.history[self.best_epoch - 1].val_rmse
    }
}

/// Mean ŷ of `models` for each item.
pub fn ensemble_predict(models: &[Model], items: &[&Item]) -> Result<Vec<f64>> {
    ensemble_predict_shifted(models, items, 0)
}

/// Like [`ensemble_predict`] with `delta` extra shift steps on top of each
/// model's configured shift.
pub fn ensemble_predict_shifted(models: &[Model], items: &[&Item], delta: i64) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::Config("no checkpoints to ensemble".into()));
    }
    items
        .iter()
        .map(|it| {
            let mut sum = 0.0;
            for m in models {
                let shift = m.config.fusion.shift_steps + delta;
                sum += m.predict_shifted(&it.features, it.row.severity, shift)? as f64;
            }
            Ok(sum / models.len() as f64)
        })
        .collect()
}

fn labels(items: &[&Item]) -> Vec<f64> {
    items.iter().map(|it| it.row.label).collect()
}

/// Trains one model for `epochs` passes over `train` and keeps the epoch
/// with the lowest validation RMSE, earliest on ties. `fold` keys the
/// initialization and shuffling streams so folds of one seed differ.
pub fn train_fold(
    train: &[&Item],
    val: &[&Item],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<FoldResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data(format!("fold {fold}: empty train ({}) or validation ({}) set", train.len(), val.len())));
    }
    let mut model = Model::init(*model_cfg, cfg.seed, fold as u64)?;
    let mut state = AdamState::new();
    let val_labels = labels(val);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        rng.set_stream(((fold as u64) << 32) | epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let it = train[i];
                let (loss, grads) = model.loss_and_grads(&it.features, it.row.severity, it.row.label)?;
                loss_sum += loss as f64;
                model.params.accumulate(grads, scale)?;
            }
            clip_gradients(&mut model.params, cfg.clip_norm);
            adamw_step(&mut model.params, &mut state, cfg.lr, cfg.weight_decay)?;
        }
        model.params.zero_grads();
        let preds = ensemble_predict(std::slice::from_ref(&model), val)?;
        let val_rmse = eval::rmse(&preds, &val_labels)?;
        let train_loss = loss_sum / train.len() as f64;
        log::debug!("seed {} fold {fold} epoch {epoch}: loss {train_loss:.5} val rmse {val_rmse:.3}", cfg.seed);
        history.push(EpochRecord { epoch, train_loss, val_rmse });
        if best.as_ref().map_or(true, |(_, b, _)| val_rmse < *b) {
            best = Some((epoch, val_rmse, model.params.clone()));
        }
    }
    let (best_epoch, _, params) = best.expect("at least one epoch");
    Ok(FoldResult { model: Model { config: model.config, params }, best_epoch, history })
}

/// All fold models of one seed over the items' scene-grouped folds.
pub fn cross_validate(items: &[&Item], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Vec<FoldResult>> {
    let plan = grouped_kfold(items.iter().map(|it| it.row.scene_token.as_str()), cfg.folds, cfg.seed)?;
    (0..cfg.folds)
        .map(|k| {
            let (train, val) = plan.split(items, k)?;
            train_fold(&train, &val, model_cfg, cfg, k)
        })
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample (n − 1) standard deviation; a single value has std 0.
pub fn aggregate(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::arg("aggregate", "no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_id: String,
    pub score: f64,
}

/// Fixed half/half mixture of two prediction sets, in the order of `a`.
pub fn uniform_score_average(a: &[Prediction], b: &[Prediction]) -> Result<Vec<Prediction>> {
    let index = |p: &[Prediction], which: &str| -> Result<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        for x in p {
            if m.insert(x.utterance_id.clone(), x.score).is_some() {
                return Err(Error::data(format!("duplicate id {} in {which}", x.utterance_id)));
            }
        }
        Ok(m)
    };
    let ia = index(a, "first prediction set")?;
    let ib = index(b, "second prediction set")?;
    let only_a: Vec<&str> = ia.keys().filter(|k| !ib.contains_key(*k)).map(String::as_str).collect();
    let only_b: Vec<&str> = ib.keys().filter(|k| !ia.contains_key(*k)).map(String::as_str).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::data(format!(
            "prediction sets differ: only in first {}, only in second {}",
            preview(&only_a),
            preview(&only_b)
        )));
    }
    Ok(a.iter().map(|p| Prediction { utterance_id: p.utterance_id.clone(), score: (p.score + ib[&p.utterance_id]) / 2.0 }).collect())
}

fn preview(ids: &[&str]) -> String {
    const SHOWN: usize = 8;
    let head = ids.iter().take(SHOWN).copied().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        format!("[{head}, ... {} total]", ids.len())
    } else {
        format!("[{head}]")
    }
}
