//! Evaluation metrics and the readers for prediction and transition-log files.
//!
//! All scores are on a 0–1 scale; [`Report::to_table`] can scale them by
//! 100 for display.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::fsm::{LatencyPath, LatencyRecord, TransitionRecord};
use crate::model::{DialogueTurn, Impact, SenderChoice};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("class index {index} out of range for {k} classes")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("reference is empty")]
    EmptyReference,
    #[error("max_n must be at least 1")]
    ZeroOrder,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn same_len(left: usize, right: usize) -> Result<(), EvalError> {
    if left != right {
        return Err(EvalError::LengthMismatch { left, right });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1_micro: f64,
    pub support: u64,
    pub per_class: Vec<ClassCounts>,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Micro-averaged precision, recall and F1 over `k` classes.
pub fn micro_prf(preds: &[usize], golds: &[usize], k: usize) -> Result<MetricsReport, EvalError> {
    same_len(preds.len(), golds.len())?;
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_class = vec![ClassCounts::default(); k];
    for (&p, &g) in preds.iter().zip(golds) {
        for index in [p, g] {
            if index >= k {
                return Err(EvalError::IndexOutOfRange { index, k });
            }
        }
        if p == g {
            per_class[p].tp += 1;
        } else {
            per_class[p].fp += 1;
            per_class[g].fn_ += 1;
        }
    }
    let tp: u64 = per_class.iter().map(|c| c.tp).sum();
    let fp: u64 = per_class.iter().map(|c| c.fp).sum();
    let fn_: u64 = per_class.iter().map(|c| c.fn_).sum();
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    // Single-label: tp + fp = tp + fn = n, so P = R and F1 = P exactly.
    let f1_micro = if precision == recall {
        precision
    } else {
        f1(precision, recall)
    };
    Ok(MetricsReport {
        precision,
        recall,
        f1_micro,
        support: preds.len() as u64,
        per_class,
    })
}

fn ngrams<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuOptions {
    pub max_n: usize,
    /// Add one to clipped matches and totals for n >= 2.
    pub smoothing: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions {
            max_n: 4,
            smoothing: false,
        }
    }
}

/// Corpus BLEU with one reference per candidate.
pub fn bleu<T: AsRef<str>>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64, EvalError> {
    bleu_with(
        candidates,
        references,
        BleuOptions {
            max_n,
            smoothing: false,
        },
    )
}

pub fn bleu_with<T: AsRef<str>>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    options: BleuOptions,
) -> Result<f64, EvalError> {
    same_len(candidates.len(), references.len())?;
    if candidates.is_empty() {
        return Err(EvalError::Empty);
    }
    if options.max_n == 0 {
        return Err(EvalError::ZeroOrder);
    }
    let mut matched = vec![0u64; options.max_n];
    let mut total = vec![0u64; options.max_n];
    let (mut c, mut r) = (0u64, 0u64);
    for (cand, reference) in candidates.iter().zip(references) {
        c += cand.len() as u64;
        r += reference.len() as u64;
        for n in 1..=options.max_n {
            let ref_counts = ngrams(reference, n);
            for (gram, count) in ngrams(cand, n) {
                matched[n - 1] += count.min(ref_counts.get(&gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..options.max_n {
        let (m, t) = if options.smoothing && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    Ok(bp * (log_sum / options.max_n as f64).exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_f1<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return Ok(0.0);
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    Ok(f1(p, r))
}

/// Cohen's kappa for two raters. Computed from integer counts so that the
/// only rounding is the final division.
pub fn cohens_kappa<T: Eq + Hash>(rater_a: &[T], rater_b: &[T]) -> Result<f64, EvalError> {
    same_len(rater_a.len(), rater_b.len())?;
    if rater_a.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = rater_a.len() as i128;
    let agree = rater_a.iter().zip(rater_b).filter(|(a, b)| a == b).count() as i128;
    let mut marginals: HashMap<&T, (i128, i128)> = HashMap::new();
    for (a, b) in rater_a.iter().zip(rater_b) {
        marginals.entry(a).or_default().0 += 1;
        marginals.entry(b).or_default().1 += 1;
    }
    let chance: i128 = marginals.values().map(|(x, y)| x * y).sum();
    // kappa = (p_o - p_e) / (1 - p_e) with p_o = agree/n, p_e = chance/n^2.
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok((agree * n - chance) as f64 / denom as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChoiceStats {
    pub low_impact_count: u64,
    pub high_impact_count: u64,
    pub remediation_chosen_count: u64,
    /// Absent when there were no high-impact violations.
    pub ratio: Option<f64>,
}

impl ChoiceStats {
    fn from_counts(low: u64, high: u64, remediation: u64) -> Self {
        ChoiceStats {
            low_impact_count: low,
            high_impact_count: high,
            remediation_chosen_count: remediation,
            ratio: (high > 0).then(|| remediation as f64 / high as f64),
        }
    }
}

pub fn choice_stats(turns: &[DialogueTurn]) -> ChoiceStats {
    let (mut low, mut high, mut rem) = (0, 0, 0);
    for turn in turns {
        match turn.analysis.as_ref().and_then(|a| a.impact()) {
            Some(Impact::Low) => low += 1,
            Some(Impact::High) => {
                high += 1;
                if turn.sender_choice == Some(SenderChoice::Remediation) {
                    rem += 1;
                }
            }
            None => {}
        }
    }
    ChoiceStats::from_counts(low, high, rem)
}

pub fn latency_means(records: &[LatencyRecord]) -> BTreeMap<LatencyPath, Duration> {
    let mut sums: BTreeMap<LatencyPath, (u128, u32)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.path).or_default();
        e.0 += r.elapsed.as_nanos();
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(path, (total, count))| {
            let mean = total / count as u128;
            (path, Duration::from_nanos(mean as u64))
        })
        .collect()
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // kana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified
        | 0xAC00..=0xD7AF    // hangul
        | 0xF900..=0xFAFF
        | 0x3000..=0x303F    // CJK punctuation
        | 0xFF00..=0xFFEF    // full-width forms
        | 0x20000..=0x2FA1F)
}

/// NFC-normalises and splits on whitespace. Text without whitespace that
/// contains CJK characters is split into single code points instead.
pub fn tokenize(text: &str) -> Vec<String> {
    let text: String = text.nfc().collect();
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Vec::new();
    }
    if !trimmed.contains(char::is_whitespace) && trimmed.chars().any(is_cjk) {
        return trimmed.chars().map(String::from).collect();
    }
    trimmed.split_whitespace().map(str::to_string).collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRow {
    pub id: String,
    pub pred: String,
    pub gold: String,
}

/// Reads `id<TAB>pred<TAB>gold` lines.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRow>, EvalError> {
    data_lines(text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            match fields.as_slice() {
                [id, pred, gold] if !pred.is_empty() && !gold.is_empty() => Ok(PredictionRow {
                    id: id.to_string(),
                    pred: pred.to_string(),
                    gold: gold.to_string(),
                }),
                _ => Err(EvalError::Parse {
                    line,
                    reason: format!(
                        "expected id<TAB>pred<TAB>gold, got {} field(s)",
                        fields.len()
                    ),
                }),
            }
        })
        .collect()
}

/// Micro P/R/F1 over string labels; classes are the sorted union of labels.
pub fn evaluate_predictions(rows: &[PredictionRow]) -> Result<MetricsReport, EvalError> {
    let classes: BTreeSet<&str> = rows
        .iter()
        .flat_map(|r| [r.pred.as_str(), r.gold.as_str()])
        .collect();
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let preds: Vec<usize> = rows.iter().map(|r| index[r.pred.as_str()]).collect();
    let golds: Vec<usize> = rows.iter().map(|r| index[r.gold.as_str()]).collect();
    micro_prf(&preds, &golds, classes.len())
}

/// Reads a transition log, skipping the header line if present.
pub fn parse_transition_log(text: &str) -> Result<Vec<TransitionRecord>, EvalError> {
    data_lines(text)
        .filter(|(_, l)| *l != crate::fsm::TRANSITION_LOG_HEADER)
        .map(|(line, l)| {
            l.parse().map_err(|e: String| EvalError::Parse {
                line,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Reconstructs choice counts and latency records from transition records.
pub fn summarize_transitions(records: &[TransitionRecord]) -> (ChoiceStats, Vec<LatencyRecord>) {
    use crate::fsm::EngineState;
    let (mut low, mut high, mut rem) = (0, 0, 0);
    let mut latencies = Vec::new();
    let mut path: HashMap<(&str, u64), LatencyPath> = HashMap::new();
    for r in records {
        let key = (r.session_id.as_str(), r.turn_id.0);
        match r.event.as_str() {
            "AnalysisReady(adhered)" => {
                path.insert(key, LatencyPath::NoRemediation);
            }
            "GenerationReady(Low)" => {
                low += 1;
                path.insert(key, LatencyPath::LowImpact);
            }
            "GenerationReady(High)" => {
                high += 1;
                path.insert(key, LatencyPath::HighImpact);
            }
            "ChoiceReceived(Remediation)" => rem += 1,
            _ => {}
        }
        if r.to == EngineState::Delivering && r.from != EngineState::Delivering {
            if let Some(p) = path.remove(&key) {
                latencies.push(LatencyRecord {
                    path: p,
                    elapsed: Duration::from_millis(r.elapsed_ms),
                });
            }
        }
    }
    (ChoiceStats::from_counts(low, high, rem), latencies)
}

/// Paired generation rows: `id<TAB>candidate<TAB>reference`.
pub fn parse_generations(text: &str) -> Result<Vec<(String, String)>, EvalError> {
    parse_predictions(text).map(|rows| rows.into_iter().map(|r| (r.pred, r.gold)).collect())
}

/// Two raters' labels: `id<TAB>rater_a<TAB>rater_b`.
pub fn parse_ratings(text: &str) -> Result<(Vec<String>, Vec<String>), EvalError> {
    Ok(parse_predictions(text)?
        .into_iter()
        .map(|r| (r.pred, r.gold))
        .unzip())
}

/// Everything `eval` can report; absent sections were not requested.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choices: Option<ChoiceStats>,
    /// Mean milliseconds per latency path.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub latency_ms: BTreeMap<LatencyPath, f64>,
}

impl Report {
    pub fn set_latency(&mut self, means: &BTreeMap<LatencyPath, Duration>) {
        self.latency_ms = means
            .iter()
            .map(|(p, d)| (*p, d.as_secs_f64() * 1000.0))
            .collect();
    }

    /// Two-column text table. With `percent`, scores are shown ×100 with
    /// two decimals; otherwise with four decimals.
    pub fn to_table(&self, percent: bool) -> String {
        let score = |v: f64| {
            if percent {
                format!("{:.2}", v * 100.0)
            } else {
                format!("{v:.4}")
            }
        };
        let mut rows: Vec<(String, String)> = Vec::new();
        if let Some(m) = &self.classification {
            rows.push(("precision".into(), score(m.precision)));
            rows.push(("recall".into(), score(m.recall)));
            rows.push(("f1_micro".into(), score(m.f1_micro)));
            rows.push(("support".into(), m.support.to_string()));
        }
        if let Some(b) = self.bleu {
            rows.push(("bleu".into(), score(b)));
        }
        if let Some(r) = self.rouge_l_f1 {
            rows.push(("rouge_l_f1".into(), score(r)));
        }
        if let Some(k) = self.kappa {
            rows.push(("kappa".into(), score(k)));
        }
        if let Some(c) = &self.choices {
            rows.push(("low_impact".into(), c.low_impact_count.to_string()));
            rows.push(("high_impact".into(), c.high_impact_count.to_string()));
            rows.push((
                "remediation_chosen".into(),
                c.remediation_chosen_count.to_string(),
            ));
            rows.push((
                "remediation_ratio".into(),
                c.ratio.map(score).unwrap_or_else(|| "n/a".into()),
            ));
        }
        for (path, ms) in &self.latency_ms {
            rows.push((format!("latency_ms[{path}]"), format!("{ms:.1}")));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }
}
