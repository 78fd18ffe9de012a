//! Feature caches, manifests, dataset assembly and synthetic data.

pub mod cache;
pub mod manifest;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::Ear;
use crate::model::{EarFeatures, UtteranceFeatures};
use crate::seqcore::MaskedSeq;

pub use cache::{read_cache, write_cache, Backbone, CacheRecord};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRow, Split};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CACHE_FILE: &str = "features.fcache";

/// Accepted range of the fine/coarse frame-rate ratio (nominally 4).
pub const RATE_RATIO_RANGE: (f64, f64) = (3.0, 5.0);

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub row: ManifestRow,
    pub features: UtteranceFeatures<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub meta: BTreeMap<String, String>,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.row.split == split).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest { meta: self.meta.clone(), rows: self.items.iter().map(|i| i.row.clone()).collect() }
    }

    /// Cache records in manifest order: per item L-canary, L-wavlm,
    /// R-canary, R-wavlm.
    pub fn records(&self) -> Vec<CacheRecord> {
        let mut out = Vec::with_capacity(4 * self.items.len());
        for item in &self.items {
            for ear in Ear::BOTH {
                let f = item.features.ear(ear);
                for (backbone, seq) in [(Backbone::Canary, &f.canary), (Backbone::Wavlm, &f.wavlm)] {
                    out.push(CacheRecord {
                        utterance_id: item.row.utterance_id.clone(),
                        ear,
                        backbone,
                        frame_rate_hz: seq.frame_rate_hz(),
                        values: seq.values().clone(),
                    });
                }
            }
        }
        out
    }

    /// Pairs each manifest row with its four cache records.
    pub fn assemble(manifest: &Manifest, records: Vec<CacheRecord>) -> Result<Self> {
        manifest.validate()?;
        let mut slots: BTreeMap<(String, Ear, Backbone), CacheRecord> = BTreeMap::new();
        let known: BTreeSet<&str> = manifest.rows.iter().map(|r| r.utterance_id.as_str()).collect();
        let mut dim = None;
        for r in records {
            if !known.contains(r.utterance_id.as_str()) {
                return Err(Error::data(format!("cache record for unknown utterance {}", r.utterance_id)));
            }
            let d = r.values.ncols();
            if *dim.get_or_insert(d) != d {
                return Err(Error::data(format!("utterance {} has feature width {d}, expected {}", r.utterance_id, dim.unwrap())));
            }
            let key = (r.utterance_id.clone(), r.ear, r.backbone);
            if slots.insert(key, r).is_some() {
                return Err(Error::data("duplicate cache record".to_string()));
            }
        }
        let mut items = Vec::with_capacity(manifest.rows.len());
        for (i, row) in manifest.rows.iter().enumerate() {
            let mut take = |ear, backbone: Backbone| -> Result<MaskedSeq<f32>> {
                let r = slots.remove(&(row.utterance_id.clone(), ear, backbone)).ok_or_else(|| {
                    Error::data_at(i + 1, format!("{} lacks the {ear:?}/{} record", row.utterance_id, backbone.as_str()))
                })?;
                MaskedSeq::all_valid(r.values, r.frame_rate_hz)
            };
            let mut ear_features = |ear| -> Result<EarFeatures<f32>> {
                let canary = take(ear, Backbone::Canary)?;
                let wavlm = take(ear, Backbone::Wavlm)?;
                let ratio = wavlm.frame_rate_hz() / canary.frame_rate_hz();
                if !(RATE_RATIO_RANGE.0..=RATE_RATIO_RANGE.1).contains(&ratio) {
                    return Err(Error::data_at(i + 1, format!("{} frame-rate ratio {ratio:.3}", row.utterance_id)));
                }
                Ok(EarFeatures { canary, wavlm })
            };
            let features = UtteranceFeatures { ears: [ear_features(Ear::L)?, ear_features(Ear::R)?] };
            items.push(Item { row: row.clone(), features });
        }
        Ok(Dataset { meta: manifest.meta.clone(), items })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_manifest(&dir.join(MANIFEST_FILE), &self.manifest())?;
        write_cache(&dir.join(CACHE_FILE), &self.records())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let records = read_cache(&dir.join(CACHE_FILE))?;
        Self::assemble(&manifest, records)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.items.first().map(|i| i.features.ears[0].canary.dim())
    }
}

/// Outcome of checking a cache file (and optionally its manifest).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CacheReport {
    pub records: usize,
    pub utterances: usize,
    pub feature_dim: Option<usize>,
    pub errors: Vec<String>,
}

impl CacheReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks integrity and consistency without stopping at the first
/// problem; only an unreadable file aborts.
pub fn validate_cache(cache_path: &Path, manifest_path: Option<&Path>) -> Result<CacheReport> {
    let mut report = CacheReport::default();
    let records = match read_cache(cache_path) {
        Ok(r) => r,
        Err(e @ Error::Format { .. }) => {
            report.errors.push(e.to_string());
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    report.records = records.len();
    let mut per_utt: BTreeMap<&str, BTreeMap<(Ear, Backbone), f64>> = BTreeMap::new();
    let mut dims = BTreeSet::new();
    for r in &records {
        dims.insert(r.values.ncols());
        if per_utt.entry(&r.utterance_id).or_default().insert((r.ear, r.backbone), r.frame_rate_hz).is_some() {
            report.errors.push(format!("{}: duplicate {:?}/{} record", r.utterance_id, r.ear, r.backbone.as_str()));
        }
    }
    report.utterances = per_utt.len();
    match dims.len() {
        0 => {}
        1 => report.feature_dim = dims.first().copied(),
        _ => report.errors.push(format!("mixed feature widths {dims:?}")),
    }
    for (id, slots) in &per_utt {
        for ear in Ear::BOTH {
            match (slots.get(&(ear, Backbone::Canary)), slots.get(&(ear, Backbone::Wavlm))) {
                (Some(c), Some(w)) => {
                    let ratio = w / c;
                    if !(RATE_RATIO_RANGE.0..=RATE_RATIO_RANGE.1).contains(&ratio) {
                        report.errors.push(format!("{id}: {ear:?} frame-rate ratio {ratio:.3} outside [3, 5]"));
                    }
                }
                _ => report.errors.push(format!("{id}: missing {ear:?} ear record(s)")),
            }
        }
    }
    if let Some(mp) = manifest_path {
        match read_manifest(mp) {
            Ok(m) => {
                let ids: BTreeSet<&str> = m.rows.iter().map(|r| r.utterance_id.as_str()).collect();
                for id in ids.iter().filter(|id| !per_utt.contains_key(*id)) {
                    report.errors.push(format!("{id}: in manifest but not in cache"));
                }
                for id in per_utt.keys().filter(|id| !ids.contains(*id)) {
                    report.errors.push(format!("{id}: in cache but not in manifest"));
                }
            }
            Err(e @ Error::Data { .. }) => report.errors.push(format!("manifest: {e}")),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}
