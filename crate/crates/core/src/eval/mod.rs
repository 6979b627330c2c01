//! Layout and composition metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{flip_horizontal, BBox, Layout};

mod assignment;

pub use assignment::max_weight_assignment;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("image ids do not line up: {0}")]
    IdMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}:{line}: {source}")]
    Record {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub phrase: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        for d in &self.detections {
            if !d.bbox.is_valid() {
                return Err(EvalError::InvalidInput(format!("{}: invalid box for '{}'", self.image_id, d.phrase)));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(EvalError::InvalidInput(format!("{}: score {} outside [0, 1]", self.image_id, d.score)));
            }
        }
        Ok(())
    }

    /// Detections at or above `threshold` whose phrase relates to `phrase`.
    pub fn matching(&self, phrase: &str, threshold: f64) -> usize {
        self.detections
            .iter()
            .filter(|d| d.score >= threshold && phrases_related(&d.phrase, phrase))
            .count()
    }
}

/// Lowercase with runs of whitespace collapsed to one space.
pub fn normalize_phrase(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// True when either normalized phrase contains the other.
pub fn phrases_related(a: &str, b: &str) -> bool {
    let (a, b) = (normalize_phrase(a), normalize_phrase(b));
    !a.is_empty() && !b.is_empty() && (a.contains(&b) || b.contains(&a))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    /// Related `(gt entry, generated entry)` index pairs, each at most once.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_gen: Vec<usize>,
}

pub fn relaxed_match(gt: &Layout, generated: &Layout) -> MatchSet {
    let mut pairs = Vec::new();
    for (g, ge) in gt.entries.iter().enumerate() {
        for (k, ke) in generated.entries.iter().enumerate() {
            if phrases_related(&ge.phrase, &ke.phrase) {
                pairs.push((g, k));
            }
        }
    }
    let gt_hit: HashSet<_> = pairs.iter().map(|p| p.0).collect();
    let gen_hit: HashSet<_> = pairs.iter().map(|p| p.1).collect();
    MatchSet {
        unmatched_gt: (0..gt.entries.len()).filter(|i| !gt_hit.contains(i)).collect(),
        unmatched_gen: (0..generated.entries.len()).filter(|i| !gen_hit.contains(i)).collect(),
        pairs,
    }
}

/// Connected components of the match relation, as (gt entries, generated entries).
fn entity_groups(m: &MatchSet, gt_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    // union-find over gt nodes [0, gt_len) and generated nodes offset by gt_len
    let n = gt_len + m.pairs.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(g, k) in &m.pairs {
        let (a, b) = (find(&mut parent, g), find(&mut parent, gt_len + k));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    let mut seen = HashSet::new();
    for &(g, k) in &m.pairs {
        let root = find(&mut parent, g);
        let entry = groups.entry(root).or_default();
        if seen.insert(g) {
            entry.0.push(g);
        }
        if seen.insert(gt_len + k) {
            entry.1.push(k);
        }
    }
    groups.into_values().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    /// The horizontally flipped ground truth scored higher.
    pub flipped: bool,
    /// No related entity group carried any box; `miou` is reported as 0.
    pub empty_comparison: bool,
}

/// Sum of assigned IoUs and the number of box slots over all related groups.
fn assigned_iou(gt: &Layout, generated: &Layout, groups: &[(Vec<usize>, Vec<usize>)]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut slots = 0;
    for (gi, ki) in groups {
        let a: Vec<&BBox> = gi.iter().flat_map(|&g| &gt.entries[g].boxes).collect();
        let b: Vec<&BBox> = ki.iter().flat_map(|&k| &generated.entries[k].boxes).collect();
        slots += a.len().max(b.len());
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let w: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| x.iou(y)).collect()).collect();
        sum += max_weight_assignment(&w).iter().map(|&(r, c)| w[r][c]).sum::<f64>();
    }
    (sum, slots)
}

pub fn layout_miou(gt: &Layout, generated: &Layout) -> MiouResult {
    let m = relaxed_match(gt, generated);
    let groups = entity_groups(&m, gt.entries.len());
    let (direct, slots) = assigned_iou(gt, generated, &groups);
    if slots == 0 {
        return MiouResult {
            miou: 0.0,
            flipped: false,
            empty_comparison: true,
        };
    }
    let (mirrored, _) = assigned_iou(&flip_horizontal(gt), generated, &groups);
    let (best, flipped) = if mirrored > direct { (mirrored, true) } else { (direct, false) };
    MiouResult {
        miou: best / slots as f64,
        flipped,
        empty_comparison: false,
    }
}

/// Fraction of ground-truth entries related to at least one generated entry.
pub fn hit_rate(corpus: &[(Layout, Layout)]) -> Result<f64, EvalError> {
    let (hits, total) = corpus.iter().fold((0, 0), |(h, t), (gt, generated)| {
        let m = relaxed_match(gt, generated);
        (h + gt.entries.len() - m.unmatched_gt.len(), t + gt.entries.len())
    });
    if total == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub phrase: String,
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityList {
    pub image_id: String,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlipRate {
    pub detected: usize,
    pub total: usize,
    pub rate: f64,
}

/// Per-image `(detected, total)` entity counts.
pub fn glip_counts(
    entities: &[EntityList],
    detections: &[DetectionRecord],
    threshold: f64,
) -> Result<Vec<(usize, usize)>, EvalError> {
    let mut by_id: HashMap<&str, &DetectionRecord> = HashMap::new();
    for d in detections {
        d.validate()?;
        if by_id.insert(d.image_id.as_str(), d).is_some() {
            return Err(EvalError::IdMismatch(format!("duplicate detection record '{}'", d.image_id)));
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(entities.len());
    for list in entities {
        if !seen.insert(list.image_id.as_str()) {
            return Err(EvalError::IdMismatch(format!("duplicate entity list '{}'", list.image_id)));
        }
        let record = by_id
            .get(list.image_id.as_str())
            .ok_or_else(|| EvalError::IdMismatch(format!("no detections for '{}'", list.image_id)))?;
        let detected = list
            .entities
            .iter()
            .map(|e| record.matching(&e.phrase, threshold).min(e.count))
            .sum();
        out.push((detected, list.entities.iter().map(|e| e.count).sum()));
    }
    if let Some(extra) = by_id.keys().find(|id| !seen.contains(*id)) {
        return Err(EvalError::IdMismatch(format!("detections for unknown image '{extra}'")));
    }
    Ok(out)
}

pub fn glip_rate(entities: &[EntityList], detections: &[DetectionRecord], threshold: f64) -> Result<GlipRate, EvalError> {
    let (detected, total) = glip_counts(entities, detections, threshold)?
        .into_iter()
        .fold((0, 0), |(a, b), (d, t)| (a + d, b + t));
    if total == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(GlipRate {
        detected,
        total,
        rate: detected as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Numeral {
    Two,
    Three,
    Four,
}

impl Numeral {
    pub fn value(self) -> usize {
        match self {
            Self::Two => 2,
            Self::Three => 3,
            Self::Four => 4,
        }
    }
}

impl fmt::Display for Numeral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Two => "two",
            Self::Three => "three",
            Self::Four => "four",
        })
    }
}

impl FromStr for Numeral {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "two" | "2" => Ok(Self::Two),
            "three" | "3" => Ok(Self::Three),
            "four" | "4" => Ok(Self::Four),
            other => Err(EvalError::InvalidInput(format!("unsupported numeral '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountCase {
    pub numeral: Numeral,
    pub target_phrase: String,
    pub detections: DetectionRecord,
}

impl CountCase {
    pub fn is_correct(&self, threshold: f64) -> bool {
        self.detections.matching(&self.target_phrase, threshold) == self.numeral.value()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountStat {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Exact-count accuracy per numeral; numerals without cases are omitted.
pub fn counting_accuracy(cases: &[CountCase], threshold: f64) -> BTreeMap<Numeral, CountStat> {
    let mut tally: BTreeMap<Numeral, (usize, usize)> = BTreeMap::new();
    for case in cases {
        let t = tally.entry(case.numeral).or_default();
        t.0 += usize::from(case.is_correct(threshold));
        t.1 += 1;
    }
    tally
        .into_iter()
        .map(|(n, (correct, total))| {
            (
                n,
                CountStat {
                    correct,
                    total,
                    accuracy: correct as f64 / total as f64,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flipped: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empty_comparison: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub glip_rate: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub counting_accuracy: BTreeMap<Numeral, f64>,
    pub per_item: Vec<ItemRecord>,
}

/// One ground-truth/generated pair in a layout corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutPair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub gt: Layout,
    #[serde(rename = "gen")]
    pub generated: Layout,
}

/// One counting case in a case file; detections are joined by `image_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountCaseSpec {
    pub image_id: String,
    pub numeral: Numeral,
    pub target_phrase: String,
}

pub fn join_count_cases(specs: &[CountCaseSpec], detections: &[DetectionRecord]) -> Result<Vec<CountCase>, EvalError> {
    let by_id: HashMap<&str, &DetectionRecord> = detections.iter().map(|d| (d.image_id.as_str(), d)).collect();
    specs
        .iter()
        .map(|s| {
            let d = by_id
                .get(s.image_id.as_str())
                .ok_or_else(|| EvalError::IdMismatch(format!("no detections for '{}'", s.image_id)))?;
            Ok(CountCase {
                numeral: s.numeral,
                target_phrase: s.target_phrase.clone(),
                detections: (*d).clone(),
            })
        })
        .collect()
}

/// Parse a JSON-lines file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, source: &str) -> Result<Vec<T>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Record {
                path: source.to_string(),
                line: i + 1,
                source: e,
            })
        })
        .collect()
}
