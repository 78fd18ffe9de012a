//! Item manifest: one CSV row per utterance with a fixed header, optionally
//! preceded by `# key=value ...` metadata lines.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::Severity;

pub const HEADER: [&str; 6] = ["utterance_id", "scene_token", "severity", "system_id", "label", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub scene_token: String,
    pub severity: Severity,
    pub system_id: String,
    /// Percentage of words correctly identified, in `[0, 100]`.
    pub label: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Parsed `# key=value` metadata.
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Checks label bounds, id uniqueness and non-empty fields. Row numbers
    /// in errors are 1-based data rows.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            let row = i + 1;
            if !(r.label.is_finite() && (0.0..=100.0).contains(&r.label)) {
                return Err(Error::data_at(row, format!("label {} outside [0, 100]", r.label)));
            }
            if r.utterance_id.is_empty() || r.scene_token.is_empty() || r.system_id.is_empty() {
                return Err(Error::data_at(row, "empty identifier field"));
            }
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(Error::data_at(row, format!("duplicate utterance id {}", r.utterance_id)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        if !self.meta.is_empty() {
            let pairs: Vec<String> = self.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("# {}\n", pairs.join(" ")));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let label = format_label(r.label);
            w.write_record([
                r.utterance_id.as_str(),
                r.scene_token.as_str(),
                r.severity.as_str(),
                r.system_id.as_str(),
                label.as_str(),
                r.split.as_str(),
            ])
            .map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
        out.push_str(std::str::from_utf8(&body).expect("csv output is UTF-8"));
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.trim_end().strip_prefix('#') else { break };
            for pair in rest.split_whitespace() {
                let (k, v) = pair.split_once('=').ok_or_else(|| Error::data(format!("bad metadata entry {pair:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            }
            body_start += line.len();
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text[body_start..].as_bytes());
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::data(format!("manifest header must be {}", HEADER.join(","))));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::data_at(row, e.to_string()))?;
            let field = |k: usize| rec.get(k).unwrap_or("").trim();
            let label: f64 = field(4).parse().map_err(|_| Error::data_at(row, format!("label {:?} is not a number", field(4))))?;
            let severity = field(2).parse::<Severity>().map_err(|e| Error::data_at(row, e.to_string()))?;
            let split = field(5).parse::<Split>().map_err(|e| Error::data_at(row, e.to_string()))?;
            rows.push(ManifestRow {
                utterance_id: field(0).to_string(),
                scene_token: field(1).to_string(),
                severity,
                system_id: field(3).to_string(),
                label,
                split,
            });
        }
        let m = Manifest { meta, rows };
        m.validate()?;
        Ok(m)
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn format_label(v: f64) -> String {
    format!("{v}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(e.to_string())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Manifest::parse(&std::fs::read_to_string(path)?)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(path, manifest.to_csv()?)?;
    Ok(())
}
