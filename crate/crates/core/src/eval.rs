//! Exact-match trigger (TC) and argument (AC) classification scoring, micro-averaged.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{vote, VerdictTriple, VotePolicy};
use crate::model::{normalize, EventMention, LabeledSegment};

/// Segment id → predicted events. Sorted so reports are order-independent.
pub type Predictions = BTreeMap<String, Vec<EventMention>>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TcTuple {
    pub trigger: String,
    pub event_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AcTuple {
    pub name: String,
    pub role: String,
    pub event_type: String,
}

pub fn tc_tuples(events: &[EventMention]) -> Vec<TcTuple> {
    events
        .iter()
        .map(|e| TcTuple {
            trigger: normalize(&e.trigger),
            event_type: e.event_type.clone(),
        })
        .collect()
}

pub fn ac_tuples(events: &[EventMention]) -> Vec<AcTuple> {
    events
        .iter()
        .flat_map(|e| {
            e.arguments.iter().map(|a| AcTuple {
                name: normalize(&a.name),
                role: a.role.clone(),
                event_type: e.event_type.clone(),
            })
        })
        .collect()
}

/// Whether repeated tuples count once (set) or with multiplicity (multiset).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Multiset,
    Set,
}

/// Size of the multiset (or set) intersection of two tuple bags.
pub fn intersection<T: Eq + std::hash::Hash + Clone>(pred: &[T], gold: &[T], mode: MatchMode) -> (usize, usize, usize) {
    match mode {
        MatchMode::Multiset => {
            let mut counts: HashMap<&T, usize> = HashMap::new();
            for g in gold {
                *counts.entry(g).or_default() += 1;
            }
            let mut tp = 0;
            for p in pred {
                if let Some(c) = counts.get_mut(p).filter(|c| **c > 0) {
                    *c -= 1;
                    tp += 1;
                }
            }
            (tp, pred.len(), gold.len())
        }
        MatchMode::Set => {
            let p: HashSet<&T> = pred.iter().collect();
            let g: HashSet<&T> = gold.iter().collect();
            (p.intersection(&g).count(), p.len(), g.len())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

impl Counts {
    fn add(&mut self, (tp, n_pred, n_gold): (usize, usize, usize)) {
        self.tp += tp;
        self.n_pred += n_pred;
        self.n_gold += n_gold;
    }
}

/// P = tp/n_pred, R = tp/n_gold, F1 = harmonic mean; each 0 when undefined.
pub fn prf(tp: usize, n_pred: usize, n_gold: usize) -> Result<(f64, f64, f64)> {
    if tp > n_pred || tp > n_gold {
        return Err(Error::Contract(format!(
            "tp={tp} exceeds n_pred={n_pred} or n_gold={n_gold}"
        )));
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (p, r) = (ratio(tp, n_pred), ratio(tp, n_gold));
    Ok((p, r, f1(p, r)))
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub n_pred: usize,
    pub n_gold: usize,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(c: Counts) -> Result<Self> {
        let (p, r, f1) = prf(c.tp, c.n_pred, c.n_gold)?;
        Ok(Metrics {
            tp: c.tp,
            n_pred: c.n_pred,
            n_gold: c.n_gold,
            p,
            r,
            f1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub tc: Metrics,
    pub ac: Metrics,
    pub gated_in: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tc: Metrics,
    pub ac: Metrics,
    #[serde(default)]
    pub by_policy: BTreeMap<String, PolicyScore>,
    #[serde(default)]
    pub gated_out: usize,
    #[serde(default)]
    pub extraction_failed: usize,
    #[serde(default)]
    pub segments: usize,
}

impl ScoreReport {
    pub fn render(&self) -> String {
        let mut out = format!("{:<6}{:>6}{:>8}{:>8}{:>8}{:>8}{:>8}\n", "task", "tp", "n_pred", "n_gold", "P", "R", "F1");
        for (name, m) in [("TC", &self.tc), ("AC", &self.ac)] {
            let _ = writeln!(
                out,
                "{name:<6}{:>6}{:>8}{:>8}{:>8.1}{:>8.1}{:>8.1}",
                m.tp,
                m.n_pred,
                m.n_gold,
                100.0 * m.p,
                100.0 * m.r,
                100.0 * m.f1
            );
        }
        let _ = writeln!(
            out,
            "segments: {}  gated out: {}  extraction failed: {}",
            self.segments, self.gated_out, self.extraction_failed
        );
        out
    }
}

/// Scores predictions against gold. Gold segments without a prediction count as empty.
pub fn score(predictions: &Predictions, gold: &[LabeledSegment], mode: MatchMode) -> Result<ScoreReport> {
    let gold_ids: HashSet<&str> = gold.iter().map(|g| g.segment.id.as_str()).collect();
    if let Some(unknown) = predictions.keys().find(|id| !gold_ids.contains(id.as_str())) {
        return Err(Error::UnknownSegment(unknown.clone()));
    }
    let (mut tc, mut ac) = (Counts::default(), Counts::default());
    for g in gold {
        let pred = predictions.get(&g.segment.id).map(Vec::as_slice).unwrap_or(&[]);
        tc.add(intersection(&tc_tuples(pred), &tc_tuples(&g.gold_events), mode));
        ac.add(intersection(&ac_tuples(pred), &ac_tuples(&g.gold_events), mode));
    }
    Ok(ScoreReport {
        tc: Metrics::from_counts(tc)?,
        ac: Metrics::from_counts(ac)?,
        by_policy: BTreeMap::new(),
        gated_out: 0,
        extraction_failed: 0,
        segments: gold.len(),
    })
}

/// Keeps predictions only for segments the policy lets through.
pub fn gate_predictions(predictions: &Predictions, verdicts: &HashMap<String, VerdictTriple>, policy: VotePolicy) -> Predictions {
    predictions
        .iter()
        .filter(|(id, _)| policy == VotePolicy::None || verdicts.get(*id).is_some_and(|v| vote(v, policy)))
        .map(|(id, ev)| (id.clone(), ev.clone()))
        .collect()
}

/// Ids of `segments` admitted by `policy`.
pub fn gated_in<'a>(segments: impl IntoIterator<Item = &'a str>, verdicts: &HashMap<String, VerdictTriple>, policy: VotePolicy) -> Vec<String> {
    segments
        .into_iter()
        .filter(|id| policy == VotePolicy::None || verdicts.get(*id).is_some_and(|v| vote(v, policy)))
        .map(str::to_string)
        .collect()
}

/// One model's row: a cell per policy, `None` where that run is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub cells: BTreeMap<String, Option<PolicyScore>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub policies: Vec<VotePolicy>,
    pub rows: Vec<AblationRow>,
    /// Free-form footer lines.
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Scores each policy's predictions for one model.
pub fn run_ablation(
    model: &str,
    gold: &[LabeledSegment],
    verdicts: &HashMap<String, VerdictTriple>,
    predictions_by_policy: &BTreeMap<VotePolicy, Predictions>,
    policies: &[VotePolicy],
    mode: MatchMode,
) -> Result<AblationRow> {
    let mut cells = BTreeMap::new();
    for &policy in policies {
        let cell = match predictions_by_policy.get(&policy) {
            None => None,
            Some(preds) => {
                let report = score(preds, gold, mode)?;
                Some(PolicyScore {
                    tc: report.tc,
                    ac: report.ac,
                    gated_in: gated_in(gold.iter().map(|g| g.segment.id.as_str()), verdicts, policy).len(),
                })
            }
        };
        cells.insert(policy.label().to_string(), cell);
    }
    Ok(AblationRow {
        model: model.to_string(),
        cells,
    })
}

impl AblationTable {
    pub fn new(policies: Vec<VotePolicy>) -> Self {
        AblationTable {
            policies,
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// One table per task: rows are models, columns are policies, cells are F1 (%).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (task, pick) in [("TC", 0usize), ("AC", 1)] {
            let _ = write!(out, "{task} F1 (%)\n{:<20}", "model");
            for p in &self.policies {
                let _ = write!(out, "{:>9}", p.label());
            }
            out.push('\n');
            for row in &self.rows {
                let _ = write!(out, "{:<20}", row.model);
                for p in &self.policies {
                    match row.cells.get(p.label()).and_then(Option::as_ref) {
                        Some(s) => {
                            let m = if pick == 0 { &s.tc } else { &s.ac };
                            let _ = write!(out, "{:>9.1}", 100.0 * m.f1);
                        }
                        None => {
                            let _ = write!(out, "{:>9}", "-");
                        }
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out.push_str("gated-in segments\n");
        for row in &self.rows {
            let _ = write!(out, "{:<20}", row.model);
            for p in &self.policies {
                match row.cells.get(p.label()).and_then(Option::as_ref) {
                    Some(s) => {
                        let _ = write!(out, "{:>9}", s.gated_in);
                    }
                    None => {
                        let _ = write!(out, "{:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for note in &self.notes {
            out.push_str(note);
            out.push('\n');
        }
        out
    }
}
