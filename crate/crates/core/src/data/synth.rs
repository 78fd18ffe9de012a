//! Synthetic datasets with planted label structure.
//!
//! Profile `local` makes the label depend on how often short fine-stream
//! "artifact" bursts coincide with coarse-stream "word" frames. Each stream
//! alone carries no information about the overlap, so only models that
//! fuse the streams before pooling can recover it. Profile `global` makes
//! the label depend on utterance-level offsets of each stream, which pooled
//! fusion can read directly.
//!
//! Both profiles add severity offsets and per-system biases in logit space,
//! and each system also shifts the features along its own direction.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Item, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::head::Severity;
use crate::model::{EarFeatures, UtteranceFeatures, ENCODER_DIM};
use crate::seqcore::MaskedSeq;

pub const CANARY_RATE_HZ: f64 = 12.5;
pub const WAVLM_RATE_HZ: f64 = 50.0;
pub const N_SYSTEMS: usize = 9;
pub const T_C_RANGE: (usize, usize) = (20, 80);
pub const T_W_JITTER: i64 = 2;

const WORD_PROB: f64 = 0.5;
const ARTIFACT_FRACTION: f64 = 0.3;
const EVENT_AMP: f32 = 6.0;
const SYSTEM_AMP: f32 = 2.0;
const GLOBAL_AMP: f32 = 1.0;
const GLOBAL_WEIGHT: f64 = 0.8;
const LABEL_NOISE: f64 = 0.05;
const SCENE_SIZE_MAX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Global,
    Local,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Global => "global",
            Profile::Local => "local",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Profile::Global),
            "local" => Ok(Profile::Local),
            _ => Err(Error::Config(format!("unknown synthetic profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub seed: u64,
    pub profile: Profile,
    pub feature_dim: usize,
    /// When set, generation fails unless `n_items ≥ 2·folds`.
    pub require_folds: Option<usize>,
}

impl SynthConfig {
    pub fn new(n_items: usize, seed: u64, profile: Profile) -> Self {
        Self { n_items, seed, profile, feature_dim: ENCODER_DIM, require_folds: None }
    }
}

pub fn severity_offset(s: Severity) -> f64 {
    match s {
        Severity::Mild => 0.3,
        Severity::Moderate => 0.0,
        Severity::ModeratelySevere => -0.6,
    }
}

/// Logit bias of synthetic system `s`, evenly spaced in `[−0.4, 0.4]`.
pub fn system_bias(s: usize) -> f64 {
    -0.4 + 0.8 * s as f64 / (N_SYSTEMS - 1) as f64
}

pub fn system_id(s: usize) -> String {
    format!("E{:03}", s + 1)
}

/// Generating parameters of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// Noise-free label logit.
    pub latent: f64,
    pub system: usize,
    /// Artifact bursts (local profile).
    pub artifacts: usize,
    /// Artifact bursts landing on word frames (local profile).
    pub artifacts_on_words: usize,
}

impl PlantedTruth {
    /// Prediction of an oracle that knows the generating parameters.
    pub fn oracle_score(&self) -> f64 {
        100.0 * sigmoid(self.latent)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub truth: Vec<PlantedTruth>,
}

struct Directions {
    word: Array1<f32>,
    artifact: Array1<f32>,
    global_c: Array1<f32>,
    global_w: Array1<f32>,
    system_c: Vec<Array1<f32>>,
    system_w: Vec<Array1<f32>>,
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f32> {
    let v: Array1<f32> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
    let n = v.dot(&v).sqrt().max(1e-6);
    v / n
}

fn noise(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((t, d), || StandardNormal.sample(rng))
}

/// Deterministic in `(n_items, seed, profile, feature_dim)`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    if let Some(folds) = cfg.require_folds {
        if cfg.n_items < 2 * folds {
            return Err(Error::Config(format!("{} items cannot fill {folds} folds (need at least {})", cfg.n_items, 2 * folds)));
        }
    }
    if cfg.n_items == 0 || cfg.feature_dim == 0 {
        return Err(Error::Config("n_items and feature_dim must be >= 1".into()));
    }
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs = Directions {
        word: unit(&mut rng, d),
        artifact: unit(&mut rng, d),
        global_c: unit(&mut rng, d),
        global_w: unit(&mut rng, d),
        system_c: (0..N_SYSTEMS).map(|_| unit(&mut rng, d)).collect(),
        system_w: (0..N_SYSTEMS).map(|_| unit(&mut rng, d)).collect(),
    };

    let mut items = Vec::with_capacity(cfg.n_items);
    let mut truth = Vec::with_capacity(cfg.n_items);
    let mut scene = 0;
    while items.len() < cfg.n_items {
        scene += 1;
        let size = rng.gen_range(1..=SCENE_SIZE_MAX).min(cfg.n_items - items.len());
        let u: f64 = rng.gen();
        let split = if u < 0.7 {
            Split::Train
        } else if u < 0.85 {
            Split::Dev
        } else {
            Split::Eval
        };
        for _ in 0..size {
            let idx = items.len();
            let severity = Severity::ALL[rng.gen_range(0..Severity::ALL.len())];
            let system = rng.gen_range(0..N_SYSTEMS);
            let (features, mut t) = match cfg.profile {
                Profile::Local => local_item(&mut rng, &dirs, d, system)?,
                Profile::Global => global_item(&mut rng, &dirs, d, system)?,
            };
            t.latent += severity_offset(severity) + system_bias(system);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let label = 100.0 * sigmoid(t.latent + LABEL_NOISE * noise);
            let row = ManifestRow {
                utterance_id: format!("U{:05}", idx + 1),
                scene_token: format!("S{scene:05}"),
                severity,
                system_id: system_id(system),
                label,
                split,
            };
            items.push(Item { row, features });
            truth.push(t);
        }
    }
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("profile".to_string(), cfg.profile.to_string());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert("n".to_string(), cfg.n_items.to_string());
    meta.insert("dim".to_string(), d.to_string());
    Ok(SynthOutput { dataset: Dataset { meta, items }, truth })
}

fn lengths(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let t_c = rng.gen_range(T_C_RANGE.0..=T_C_RANGE.1);
    let jitter = rng.gen_range(-T_W_JITTER..=T_W_JITTER);
    (t_c, (4 * t_c as i64 + jitter) as usize)
}

fn seqs(canary: Array2<f32>, wavlm: Array2<f32>) -> Result<EarFeatures<f32>> {
    Ok(EarFeatures {
        canary: MaskedSeq::all_valid(canary, CANARY_RATE_HZ)?,
        wavlm: MaskedSeq::all_valid(wavlm, WAVLM_RATE_HZ)?,
    })
}

fn add_dir(mut row: ndarray::ArrayViewMut1<'_, f32>, dir: &Array1<f32>, amp: f32) {
    row.scaled_add(amp, dir);
}

fn local_item(rng: &mut ChaCha8Rng, dirs: &Directions, d: usize, system: usize) -> Result<(UtteranceFeatures<f32>, PlantedTruth)> {
    let (t_c, t_w) = lengths(rng);
    let words: Vec<bool> = (0..t_c).map(|_| rng.gen_bool(WORD_PROB)).collect();
    let word_slots: Vec<usize> = (0..t_c).filter(|&t| words[t]).collect();
    let gap_slots: Vec<usize> = (0..t_c).filter(|&t| !words[t]).collect();
    let k = ((ARTIFACT_FRACTION * t_c as f64).round() as usize).max(1);
    let rho: f64 = rng.gen();
    let k_on = ((rho * k as f64).round() as usize).clamp(k.saturating_sub(gap_slots.len()), k.min(word_slots.len()));
    let mut artifacts: Vec<usize> = word_slots.choose_multiple(rng, k_on).copied().collect();
    artifacts.extend(gap_slots.choose_multiple(rng, k - k_on).copied());

    let mut ears = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut c = noise(rng, t_c, d);
        let mut w = noise(rng, t_w, d);
        for t in 0..t_c {
            add_dir(c.row_mut(t), &dirs.system_c[system], SYSTEM_AMP);
            if words[t] {
                add_dir(c.row_mut(t), &dirs.word, EVENT_AMP);
            }
        }
        for t in 0..t_w {
            add_dir(w.row_mut(t), &dirs.system_w[system], SYSTEM_AMP);
        }
        for &t in &artifacts {
            for tau in (4 * t..4 * t + 4).filter(|&tau| tau < t_w) {
                add_dir(w.row_mut(tau), &dirs.artifact, EVENT_AMP);
            }
        }
        ears.push(seqs(c, w)?);
    }
    let latent = 2.0 - 4.0 * k_on as f64 / k as f64;
    let right = ears.pop().expect("two ears");
    let left = ears.pop().expect("two ears");
    Ok((UtteranceFeatures { ears: [left, right] }, PlantedTruth { latent, system, artifacts: k, artifacts_on_words: k_on }))
}

fn global_item(rng: &mut ChaCha8Rng, dirs: &Directions, d: usize, system: usize) -> Result<(UtteranceFeatures<f32>, PlantedTruth)> {
    let (t_c, t_w) = lengths(rng);
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    let mut ears = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut c = noise(rng, t_c, d);
        let mut w = noise(rng, t_w, d);
        for t in 0..t_c {
            add_dir(c.row_mut(t), &dirs.system_c[system], SYSTEM_AMP);
            add_dir(c.row_mut(t), &dirs.global_c, GLOBAL_AMP * a as f32);
        }
        for t in 0..t_w {
            add_dir(w.row_mut(t), &dirs.system_w[system], SYSTEM_AMP);
            add_dir(w.row_mut(t), &dirs.global_w, GLOBAL_AMP * b as f32);
        }
        ears.push(seqs(c, w)?);
    }
    let latent = GLOBAL_WEIGHT * (a + b);
    let right = ears.pop().expect("two ears");
    let left = ears.pop().expect("two ears");
    Ok((UtteranceFeatures { ears: [left, right] }, PlantedTruth { latent, system, artifacts: 0, artifacts_on_words: 0 }))
}
