//! Selection events and the labels derived from them.
//!
//! Every time a list of answers is shown, one [`SelectionEvent`] is logged;
//! when the user then picks one, a second event with the same request id
//! records the pick. Labels are computed per `(task, query, answer)` over a
//! time window: the rank label is the selection percentage, floored at 1
//! for any answer picked at least once, and the binary label says whether
//! it was ever picked.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::TaskKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub task: TaskKind,
    pub query: String,
    pub answers: Vec<String>,
    pub selected: Option<usize>,
    /// Seconds since the Unix epoch.
    pub ts: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

impl SelectionEvent {
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.selected {
            if i >= self.answers.len() {
                return Err(Error::Integrity(format!(
                    "selected index {i} but only {} answers were provided for {:?}",
                    self.answers.len(),
                    self.query
                )));
            }
        }
        if !self.ts.is_finite() {
            return Err(Error::Validation("event timestamp is not finite".into()));
        }
        Ok(())
    }

    pub fn selected_answer(&self) -> Option<&str> {
        self.selected.map(|i| self.answers[i].as_str())
    }
}

/// Half-open time interval `[from, to)` in seconds; either end may be open.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Window {
    pub from: Option<f64>,
    pub to: Option<f64>,
}

impl Window {
    pub fn all() -> Self {
        Window::default()
    }

    pub fn new(from: Option<f64>, to: Option<f64>) -> Self {
        Window { from, to }
    }

    pub fn contains(&self, ts: f64) -> bool {
        self.from.is_none_or(|f| ts >= f) && self.to.is_none_or(|t| ts < t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub task: TaskKind,
    pub query: String,
    pub answer: String,
    pub label: f64,
}

/// Merges each request's showing and its later selection into one event.
/// Events without a request id stand alone. The merged event keeps the
/// timestamp of the showing.
pub fn fold_requests(events: &[SelectionEvent]) -> Vec<SelectionEvent> {
    let mut out: Vec<SelectionEvent> = Vec::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for ev in events {
        let Some(id) = ev.request_id.as_deref() else {
            out.push(ev.clone());
            continue;
        };
        match by_id.get(id) {
            None => {
                by_id.insert(id, out.len());
                out.push(ev.clone());
            }
            Some(&i) => {
                let merged = &mut out[i];
                if merged.selected.is_none() && ev.selected.is_some() {
                    merged.selected = ev.selected;
                    merged.answers = ev.answers.clone();
                }
                merged.ts = merged.ts.min(ev.ts);
            }
        }
    }
    out
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    provided: u64,
    selected: u64,
}

type Key = (TaskKind, String, String);

fn tally(events: &[SelectionEvent], window: Window) -> Result<BTreeMap<Key, Tally>> {
    let mut counts: BTreeMap<Key, Tally> = BTreeMap::new();
    for ev in fold_requests(events) {
        ev.validate()?;
        if !window.contains(ev.ts) {
            continue;
        }
        let shown: BTreeSet<&str> = ev.answers.iter().map(String::as_str).collect();
        for answer in shown {
            counts
                .entry((ev.task, ev.query.clone(), answer.to_string()))
                .or_default()
                .provided += 1;
        }
        if let Some(answer) = ev.selected_answer() {
            counts
                .entry((ev.task, ev.query.clone(), answer.to_string()))
                .or_default()
                .selected += 1;
        }
    }
    Ok(counts)
}

/// Rank label from counts: 0 when never selected, otherwise the selection
/// percentage with a floor of 1.
pub fn rank_label(selected: u64, provided: u64) -> Result<f64> {
    if provided == 0 {
        return Err(Error::Integrity("answer referenced but never provided".into()));
    }
    if selected > provided {
        return Err(Error::Integrity(format!("selected {selected} times but provided {provided}")));
    }
    if selected == 0 {
        return Ok(0.0);
    }
    Ok((100.0 * selected as f64 / provided as f64).max(1.0))
}

/// Rank-system labels for every answer shown in `window`. Conversational
/// assistance is labeled in the binary system only and is skipped here.
pub fn compute_labels(events: &[SelectionEvent], window: Window) -> Result<Vec<RewardSample>> {
    tally(events, window)?
        .into_iter()
        .filter(|((task, _, _), _)| *task != TaskKind::ConvAssist)
        .map(|((task, query, answer), t)| {
            Ok(RewardSample {
                task,
                query,
                answer,
                label: rank_label(t.selected, t.provided)?,
            })
        })
        .collect()
}

/// Binary-system labels: 1 for answers selected at least once in `window`,
/// 0 for answers shown but never selected.
pub fn compute_binary_labels(events: &[SelectionEvent], window: Window) -> Result<Vec<RewardSample>> {
    Ok(tally(events, window)?
        .into_iter()
        .map(|((task, query, answer), t)| RewardSample {
            task,
            query,
            answer,
            label: if t.selected > 0 { 1.0 } else { 0.0 },
        })
        .collect())
}

/// Per-answer counts and both labels, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub task: TaskKind,
    pub query: String,
    pub answer: String,
    pub provided: u64,
    pub selected: u64,
    /// Absent for conversational assistance, which is binary-only.
    pub rank_label: Option<f64>,
    pub binary_label: u8,
}

pub fn label_table(events: &[SelectionEvent], window: Window) -> Result<Vec<LabelRow>> {
    tally(events, window)?
        .into_iter()
        .map(|((task, query, answer), t)| {
            let rank_label = if task == TaskKind::ConvAssist {
                None
            } else {
                Some(rank_label(t.selected, t.provided)?)
            };
            Ok(LabelRow {
                task,
                query,
                answer,
                provided: t.provided,
                selected: t.selected,
                rank_label,
                binary_label: u8::from(t.selected > 0),
            })
        })
        .collect()
}

pub fn read_events<R: BufRead>(input: R) -> Result<Vec<SelectionEvent>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: SelectionEvent = serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_event<W: Write>(mut out: W, ev: &SelectionEvent) -> Result<()> {
    let line = serde_json::to_string(ev)?;
    writeln!(out, "{line}")?;
    Ok(())
}

pub const SAMPLES_HEADER: &str = "task\tquery\tanswer\tlabel";

fn check_field(s: &str) -> Result<&str> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Validation(format!("field {s:?} contains a tab or newline")));
    }
    Ok(s)
}

pub fn write_samples<W: Write>(mut out: W, samples: &[RewardSample]) -> Result<()> {
    writeln!(out, "{SAMPLES_HEADER}")?;
    for s in samples {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            s.task,
            check_field(&s.query)?,
            check_field(&s.answer)?,
            s.label
        )?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(input: R) -> Result<Vec<RewardSample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || (i == 0 && line == SAMPLES_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(i + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let task = f[0].parse().map_err(|e: Error| Error::parse(i + 1, e.to_string()))?;
        let label: f64 = f[3]
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("bad label {:?}", f[3])))?;
        if !(0.0..=100.0).contains(&label) {
            return Err(Error::parse(i + 1, format!("label {label} outside [0, 100]")));
        }
        out.push(RewardSample {
            task,
            query: f[1].to_string(),
            answer: f[2].to_string(),
            label,
        });
    }
    Ok(out)
}
