//! Strict micro-F1 over exact-match structures.
//!
//! Predictions and golds are compared per instance as sets, so duplicate
//! structures count once. Counts are pooled across instances (and across
//! datasets, in [`aggregate`]) before precision and recall are formed.
//!
//! ```
//! use std::collections::BTreeSet;
//! use tie::codec::{Annotations, EntityAnn};
//! use tie::metrics::ent_f1;
//!
//! let ent = |l: &str, s, e| EntityAnn { label: l.into(), start: s, end: e };
//! let gold = Annotations { entities: BTreeSet::from([ent("PER", 0, 1), ent("ORG", 3, 4)]), ..Default::default() };
//! let pred = Annotations { entities: BTreeSet::from([ent("PER", 0, 1), ent("ORG", 3, 5)]), ..Default::default() };
//! let counts = ent_f1(&[pred], &[gold]).unwrap();
//! assert_eq!((counts.tp, counts.fp, counts.fn_), (1, 1, 1));
//! assert_eq!(counts.f1(), 0.5);
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{Annotations, TypedSpan};
use crate::error::{Error, Result};
use crate::schema::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ent,
    Rel,
    Trig,
    Arg,
    Senti,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Ent => "ent",
            Metric::Rel => "rel",
            Metric::Trig => "trig",
            Metric::Arg => "arg",
            Metric::Senti => "senti",
        }
    }

    /// Metrics reported for a task shape.
    pub fn for_task(task: TaskKind) -> &'static [Metric] {
        match task {
            TaskKind::Ner => &[Metric::Ent],
            TaskKind::Re => &[Metric::Ent, Metric::Rel],
            TaskKind::Ee => &[Metric::Trig, Metric::Arg],
            TaskKind::Absa => &[Metric::Senti],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn count_sets<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Counts {
    let tp = pred.intersection(gold).count();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

fn pooled<T: Ord>(preds: &[Annotations], golds: &[Annotations], key: impl Fn(&Annotations) -> BTreeSet<T>) -> Result<Counts> {
    if preds.len() != golds.len() {
        return Err(Error::Misaligned {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut total = Counts::default();
    for (p, g) in preds.iter().zip(golds) {
        total.add(count_sets(&key(p), &key(g)));
    }
    Ok(total)
}

/// Entity type and offsets match.
pub fn ent_f1(preds: &[Annotations], golds: &[Annotations]) -> Result<Counts> {
    pooled(preds, golds, |a| a.entities.clone())
}

/// Relation type, and type and offsets of both ends, match. Ends without a
/// type compare on offsets alone.
pub fn rel_f1(preds: &[Annotations], golds: &[Annotations]) -> Result<Counts> {
    pooled(preds, golds, |a| a.links.clone())
}

/// Event type and trigger offsets match.
pub fn trig_f1(preds: &[Annotations], golds: &[Annotations]) -> Result<Counts> {
    ent_f1(preds, golds)
}

/// Argument offsets, role and the trigger's event type match. With
/// `trigger_offsets` the trigger's span must match as well.
pub fn arg_f1(preds: &[Annotations], golds: &[Annotations], trigger_offsets: bool) -> Result<Counts> {
    pooled(preds, golds, |a| {
        a.links
            .iter()
            .map(|l| {
                let trigger = trigger_offsets.then_some((l.subject.start, l.subject.end));
                (l.label.clone(), l.subject.label.clone(), trigger, l.object.start, l.object.end)
            })
            .collect()
    })
}

/// Expression span, aspect span and polarity match.
pub fn senti_f1(preds: &[Annotations], golds: &[Annotations]) -> Result<Counts> {
    let spans = |t: &TypedSpan| (t.start, t.end);
    pooled(preds, golds, |a| {
        a.links
            .iter()
            .map(|l| (l.label.clone(), spans(&l.subject), spans(&l.object)))
            .collect()
    })
}

pub fn counts(metric: Metric, preds: &[Annotations], golds: &[Annotations]) -> Result<Counts> {
    match metric {
        Metric::Ent => ent_f1(preds, golds),
        Metric::Rel => rel_f1(preds, golds),
        Metric::Trig => trig_f1(preds, golds),
        Metric::Arg => arg_f1(preds, golds, false),
        Metric::Senti => senti_f1(preds, golds),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

impl From<Counts> for Score {
    fn from(c: Counts) -> Self {
        Score {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            counts: c,
        }
    }
}

/// Scores of one dataset, or of several pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub dataset: String,
    pub task: Option<TaskKind>,
    pub instances: usize,
    pub scores: BTreeMap<Metric, Score>,
}

impl ScoreReport {
    /// The model-selection score: the task's single metric, or the mean of
    /// trigger and argument F1 for EE.
    pub fn primary(&self) -> f64 {
        let get = |m| self.scores.get(&m).map_or(0.0, |s: &Score| s.f1);
        match self.task {
            Some(TaskKind::Ner) => get(Metric::Ent),
            Some(TaskKind::Re) => get(Metric::Rel),
            Some(TaskKind::Ee) => 0.5 * (get(Metric::Trig) + get(Metric::Arg)),
            Some(TaskKind::Absa) => get(Metric::Senti),
            None => {
                let f: Vec<f64> = self.scores.values().map(|s| s.f1).collect();
                if f.is_empty() {
                    0.0
                } else {
                    f.iter().sum::<f64>() / f.len() as f64
                }
            }
        }
    }
}

pub fn evaluate(dataset: &str, task: TaskKind, preds: &[Annotations], golds: &[Annotations]) -> Result<ScoreReport> {
    let mut scores = BTreeMap::new();
    for &m in Metric::for_task(task) {
        scores.insert(m, Score::from(counts(m, preds, golds)?));
    }
    Ok(ScoreReport {
        dataset: dataset.to_string(),
        task: Some(task),
        instances: golds.len(),
        scores,
    })
}

/// Micro aggregate: sums counts per metric across reports.
pub fn aggregate(reports: &[ScoreReport]) -> ScoreReport {
    let mut sums: BTreeMap<Metric, Counts> = BTreeMap::new();
    for r in reports {
        for (m, s) in &r.scores {
            sums.entry(*m).or_default().add(s.counts);
        }
    }
    let tasks: BTreeSet<_> = reports.iter().filter_map(|r| r.task).collect();
    ScoreReport {
        dataset: "all".into(),
        task: if tasks.len() == 1 { tasks.into_iter().next() } else { None },
        instances: reports.iter().map(|r| r.instances).sum(),
        scores: sums.into_iter().map(|(m, c)| (m, c.into())).collect(),
    }
}

/// Fixed-width plain-text table, one row per (dataset, metric).
pub fn render_table(reports: &[ScoreReport]) -> String {
    let width = reports.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:<6} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}",
        "dataset", "metric", "P", "R", "F1", "TP", "FP", "FN"
    );
    for r in reports {
        for (m, s) in &r.scores {
            let _ = writeln!(
                out,
                "{:<width$}  {:<6} {:>7.4} {:>7.4} {:>7.4} {:>6} {:>6} {:>6}",
                r.dataset,
                m.name(),
                s.precision,
                s.recall,
                s.f1,
                s.counts.tp,
                s.counts.fp,
                s.counts.fn_
            );
        }
    }
    out
}
