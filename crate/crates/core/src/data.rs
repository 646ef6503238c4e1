//! News datasets, line-delimited ingestion and the source/target K-shot split.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CoolError, Result};

/// Veracity label. Serialized as the integer 0 (true) or 1 (fake).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    True = 0,
    Fake = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::True),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::from_index(v as usize).ok_or_else(|| format!("label {v} outside {{0,1}}"))
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

/// One news item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewsRecord {
    pub id: String,
    pub text: String,
    pub label: Label,
    #[serde(default)]
    pub domain: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Source => f.write_str("source"),
            Role::Target => f.write_str("target"),
        }
    }
}

impl std::str::FromStr for Role {
    type Err = CoolError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            other => Err(CoolError::Config(format!("unknown role {other:?}"))),
        }
    }
}

/// An immutable, ordered set of records with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub role: Role,
    records: Vec<NewsRecord>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, role: Role, records: Vec<NewsRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CoolError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            role,
            records,
        })
    }

    pub fn records(&self) -> &[NewsRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(true count, fake count)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let fake = self.records.iter().filter(|r| r.label == Label::Fake).count();
        (self.records.len() - fake, fake)
    }

    fn subset(&self, name: String, idx: &[usize]) -> Dataset {
        Dataset {
            name,
            role: self.role,
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// Lines that failed validation, by 1-based line number.
pub type Malformed = Vec<(usize, String)>;

fn parse_line(line: &str, default_domain: &str) -> std::result::Result<NewsRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("record is not an object")?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err("id must be a string".into()),
        None => return Err("missing key \"id\"".into()),
    };
    let text = match obj.get("text") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("text must be a string".into()),
        None => return Err("missing key \"text\"".into()),
    };
    if text.trim().is_empty() {
        return Err("text is empty".into());
    }
    let label = match obj.get("label") {
        Some(Value::Number(n)) => match n.as_u64().and_then(|l| Label::from_index(l as usize)) {
            Some(l) => l,
            None => return Err(format!("label {n} outside {{0,1}}")),
        },
        Some(_) => return Err("label must be the integer 0 or 1".into()),
        None => return Err("missing key \"label\"".into()),
    };
    let domain = match obj.get("domain") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("domain must be a string".into()),
        None => default_domain.to_string(),
    };
    Ok(NewsRecord {
        id,
        text,
        label,
        domain,
    })
}

/// Parses every line, returning the well-formed records alongside the rejects.
pub fn load_dataset_lenient(path: &Path, role: Role) -> Result<(Dataset, Malformed)> {
    let content = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut records = Vec::new();
    let mut bad = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, &name) {
            Ok(r) if !seen.insert(r.id.clone()) => {
                bad.push((i + 1, format!("duplicate id {:?}", r.id)));
            }
            Ok(r) => records.push(r),
            Err(e) => bad.push((i + 1, e)),
        }
    }
    if records.is_empty() && bad.is_empty() {
        return Err(CoolError::NoRecords {
            path: path.to_path_buf(),
        });
    }
    Ok((Dataset::new(name, role, records)?, bad))
}

/// Strict ingestion: any malformed line fails the whole load, listing every
/// offending line number.
pub fn load_dataset(path: &Path, role: Role) -> Result<Dataset> {
    let (ds, bad) = load_dataset_lenient(path, role)?;
    if !bad.is_empty() {
        return Err(CoolError::MalformedRecords {
            path: path.to_path_buf(),
            errors: bad,
        });
    }
    Ok(ds)
}

/// Writes records one JSON object per line.
pub fn write_dataset(path: &Path, records: &[NewsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reported when one class cannot supply its half of the K-shot subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Imbalance {
    /// Requested `(true, fake)` counts.
    pub requested: (usize, usize),
    /// Drawn `(true, fake)` counts.
    pub drawn: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ExperimentSplit {
    pub source_train: Dataset,
    pub target_kshot: Dataset,
    pub target_test: Dataset,
    pub k: usize,
    pub seed: u64,
    pub imbalance: Option<Imbalance>,
    pub warnings: Vec<String>,
}

/// Class-balanced K-shot draw from `target`; the remainder becomes the test set.
///
/// The true class gets `⌈K/2⌉` slots and the fake class `⌊K/2⌋`. A class that
/// cannot fill its slots cedes them to the other one and the shortfall is
/// reported in [`ExperimentSplit::imbalance`]. `K = 0` yields a source-only
/// split.
pub fn sample_k_shot(
    source: &Dataset,
    target: &Dataset,
    k: usize,
    seed: u64,
) -> Result<ExperimentSplit> {
    let n = target.len();
    if k > n {
        return Err(CoolError::Sampling(format!(
            "K = {k} exceeds target size {n}"
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in target.records().iter().enumerate() {
        by_class[r.label.index()].push(i);
    }
    let want = [k.div_ceil(2), k / 2];
    for (c, &w) in want.iter().enumerate() {
        if w > 0 && by_class[c].is_empty() {
            return Err(CoolError::Sampling(format!(
                "class {c} requested {w} sample(s) but the target has none"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in by_class.iter_mut() {
        class.shuffle(&mut rng);
    }
    let mut take = [want[0].min(by_class[0].len()), want[1].min(by_class[1].len())];
    let short = k - take[0] - take[1];
    if short > 0 {
        for c in 0..2 {
            let extra = (by_class[c].len() - take[c]).min(k - take[0] - take[1]);
            take[c] += extra;
        }
    }
    let mut warnings = Vec::new();
    let imbalance = if take != want {
        let imb = Imbalance {
            requested: (want[0], want[1]),
            drawn: (take[0], take[1]),
        };
        let msg = format!(
            "K-shot subset imbalanced: requested {:?}, drew {:?}",
            imb.requested, imb.drawn
        );
        warn!("{msg}");
        warnings.push(msg);
        Some(imb)
    } else {
        None
    };
    let mut chosen: Vec<usize> = by_class[0][..take[0]]
        .iter()
        .chain(&by_class[1][..take[1]])
        .copied()
        .collect();
    chosen.sort_unstable();
    let chosen_set: HashSet<usize> = chosen.iter().copied().collect();
    let rest: Vec<usize> = (0..n).filter(|i| !chosen_set.contains(i)).collect();
    if rest.is_empty() {
        let msg = format!("K = {k} consumes the whole target; test set is empty");
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(ExperimentSplit {
        source_train: source.clone(),
        target_kshot: target.subset(format!("{}-{k}shot", target.name), &chosen),
        target_test: target.subset(format!("{}-test", target.name), &rest),
        k,
        seed,
        imbalance,
        warnings,
    })
}

/// Training pool: every source record, then every K-shot target record.
pub fn make_training_pool(split: &ExperimentSplit) -> Vec<(&NewsRecord, Role)> {
    split
        .source_train
        .records()
        .iter()
        .map(|r| (r, Role::Source))
        .chain(split.target_kshot.records().iter().map(|r| (r, Role::Target)))
        .collect()
}
