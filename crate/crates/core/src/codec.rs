//! Mapping between annotations and the `|x| × |x| × K` token-pair matrix.
//!
//! * An entity `(type, start, end)` sets cell `(start, end, type)`.
//! * A link `(rel, subject, object)` sets two cells in channel `rel`: the
//!   head-head cell `(subject.start, object.start)` and the tail-tail cell
//!   `(subject.end, object.end)`.
//!
//! Decoding thresholds sigmoid scores at `tau`. Entity cells become typed
//! spans. For RE and ABSA, a link is emitted for every pair of decoded
//! entities whose head-head and tail-tail cells both pass. For EE the object
//! is a raw span recovered from the trigger's rows (see [`decode`]).
//!
//! [`encode`] counts two kinds of degeneracy:
//!
//! * *collisions*: a cell claimed by two different structures;
//! * *ambiguities*: configurations that decode to something else, namely a
//!   linked mention sharing a boundary token with another mention, two
//!   overlapping objects under one (subject, relation), more than one object
//!   under a single-token subject in EE, or a raw-span endpoint where a
//!   typed mention is required.
//!
//! An instance with no degeneracies decodes back to exactly its own
//! annotations.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Instance, LabelSpace, MentionRef, Span, TaskKind};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A span with its entity type when one is known.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypedSpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl TypedSpan {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }

    pub fn untyped(&self) -> TypedSpan {
        TypedSpan {
            label: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityAnn {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkAnn {
    pub label: String,
    pub subject: TypedSpan,
    pub object: TypedSpan,
}

/// Canonical, order-free view of an instance's structures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    pub entities: BTreeSet<EntityAnn>,
    pub links: BTreeSet<LinkAnn>,
}

impl Annotations {
    /// Gold structures of an instance. EE objects are arguments, which carry
    /// no entity type.
    pub fn from_instance(inst: &Instance, task: TaskKind) -> Result<Self> {
        let entities = inst
            .entities
            .iter()
            .map(|m| EntityAnn {
                label: m.label.clone(),
                start: m.start,
                end: m.end,
            })
            .collect();
        let mut links = BTreeSet::new();
        for l in &inst.links {
            let typed = |r: MentionRef| -> Result<TypedSpan> {
                let (span, label) = inst.resolve(r)?;
                Ok(TypedSpan {
                    start: span.start,
                    end: span.end,
                    label: label.map(str::to_string),
                })
            };
            let mut object = typed(l.object)?;
            if task.untyped_objects() {
                object.label = None;
            }
            links.insert(LinkAnn {
                label: l.label.clone(),
                subject: typed(l.subject)?,
                object,
            });
        }
        Ok(Annotations { entities, links })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub collisions: usize,
    pub ambiguities: usize,
}

impl EncodeStats {
    pub fn is_clean(&self) -> bool {
        self.collisions == 0 && self.ambiguities == 0
    }
}

/// Binary target matrix of shape `[n, n, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldMatrix {
    pub matrix: Tensor,
    pub stats: EncodeStats,
}

impl GoldMatrix {
    pub fn nonzero(&self) -> Vec<(usize, usize, usize)> {
        let s = self.matrix.shape();
        let (n, k) = (s[0], s[2]);
        self.matrix
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| (i / (n * k), (i / k) % n, i % k))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Owner {
    Entity(usize),
    Link(usize),
}

/// Builds the gold matrix of `inst` for `task`.
pub fn encode(inst: &Instance, labels: &LabelSpace, task: TaskKind) -> Result<GoldMatrix> {
    let n = inst.len();
    let k = labels.k();
    let mut matrix = Tensor::zeros(&[n, n, k]);
    let mut owners: HashMap<(usize, usize, usize), Owner> = HashMap::new();
    let mut stats = EncodeStats::default();

    let mut claim = |cell: (usize, usize, usize), who: Owner, matrix: &mut Tensor| -> Result<()> {
        let (i, j, c) = cell;
        if i >= n || j >= n {
            return Err(Error::Index {
                op: "encode",
                index: i.max(j),
                len: n,
            });
        }
        match owners.get(&cell) {
            Some(&prev) if prev != who => stats.collisions += 1,
            Some(_) => {}
            None => {
                owners.insert(cell, who);
            }
        }
        matrix.set(&[i, j, c], 1.0);
        Ok(())
    };

    for (e, m) in inst.entities.iter().enumerate() {
        let c = labels.entity_channel(&m.label)?;
        if m.start > m.end {
            return Err(Error::Instance(format!("span start index {} exceeds end index {}", m.start, m.end)));
        }
        claim((m.start, m.end, c), Owner::Entity(e), &mut matrix)?;
    }
    for (l, link) in inst.links.iter().enumerate() {
        let c = labels.relation_channel(&link.label)?;
        let (s, _) = inst.resolve(link.subject)?;
        let (o, _) = inst.resolve(link.object)?;
        claim((s.start, o.start, c), Owner::Link(l), &mut matrix)?;
        claim((s.end, o.end, c), Owner::Link(l), &mut matrix)?;
    }
    stats.ambiguities = count_ambiguities(inst, task);
    Ok(GoldMatrix { matrix, stats })
}

fn count_ambiguities(inst: &Instance, task: TaskKind) -> usize {
    let mut count = 0;
    let boundary = |s: Span| [s.start, s.end];
    let mut linked: BTreeSet<usize> = BTreeSet::new();
    for l in &inst.links {
        let typed_endpoints: &[MentionRef] = if task.untyped_objects() {
            std::slice::from_ref(&l.subject)
        } else {
            &[l.subject, l.object][..]
        };
        for r in typed_endpoints {
            match *r {
                MentionRef::Index(i) => {
                    linked.insert(i);
                }
                MentionRef::Span(_) => count += 1,
            }
        }
    }
    for &i in &linked {
        let Some(mi) = inst.entities.get(i) else { continue };
        for (j, mj) in inst.entities.iter().enumerate() {
            if j == i || mj == mi {
                continue;
            }
            let bi = boundary(mi.span());
            if boundary(mj.span()).iter().any(|t| bi.contains(t)) {
                count += 1;
            }
        }
    }
    // objects grouped by (subject, relation)
    let mut groups: HashMap<(Span, &str), BTreeSet<Span>> = HashMap::new();
    for l in &inst.links {
        let (Ok((s, _)), Ok((o, _))) = (inst.resolve(l.subject), inst.resolve(l.object)) else {
            continue;
        };
        groups.entry((s, l.label.as_str())).or_default().insert(o);
    }
    let mut keys: Vec<_> = groups.keys().copied().collect();
    keys.sort();
    for key in keys {
        let objects: Vec<Span> = groups[&key].iter().copied().collect();
        if task.untyped_objects() && key.0.start == key.0.end && objects.len() > 1 {
            count += objects.len() - 1;
            continue;
        }
        for (a, oa) in objects.iter().enumerate() {
            for ob in &objects[a + 1..] {
                if oa.overlaps(ob) {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Maps a 0/1 matrix to `{0.01, 0.99}`, an idealized confident prediction.
pub fn lift(gold: &Tensor) -> Tensor {
    gold.map(|v| if v > 0.5 { 0.99 } else { 0.01 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    #[serde(rename = "type")]
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLink {
    #[serde(rename = "type")]
    pub label: String,
    pub subject: TypedSpan,
    pub object: TypedSpan,
    pub score: f64,
}

/// Decoded structures of one sentence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub entities: Vec<ScoredEntity>,
    pub links: Vec<ScoredLink>,
}

impl Prediction {
    pub fn annotations(&self) -> Annotations {
        Annotations {
            entities: self
                .entities
                .iter()
                .map(|e| EntityAnn {
                    label: e.label.clone(),
                    start: e.start,
                    end: e.end,
                })
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkAnn {
                    label: l.label.clone(),
                    subject: l.subject.clone(),
                    object: l.object.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entities.len() + self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.links.is_empty()
    }
}

/// Decodes a `[n, n, K']` score matrix (probabilities, `K' >= K`) using the
/// first `K` channels.
///
/// EE argument spans come from the trigger's head row `H` (row of its start)
/// and tail row `T` (row of its end). A pair `(s, e)` with `s <= e` is a
/// candidate when no column inside it is at least as confident as the pair
/// itself: no `H[c]` for `c` in `(s, e]` and no `T[c]` for `c` in `[s, e)`
/// reaches `min(H[s], T[e])`. For a single-token trigger `H` and `T` are the
/// same row, and a candidate additionally needs its two columns to be the
/// strongest of the row. Candidates are fixed by the scores alone and then
/// filtered by `tau`, so raising `tau` never adds a structure.
pub fn decode(scores: &Tensor, labels: &LabelSpace, task: TaskKind, tau: f64) -> Result<Prediction> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Threshold(tau));
    }
    let shape = scores.shape();
    if shape.len() != 3 || shape[0] != shape[1] || shape[2] < labels.k() {
        return Err(Error::Shape {
            op: "decode",
            left: shape.to_vec(),
            right: vec![shape.first().copied().unwrap_or(0), shape.first().copied().unwrap_or(0), labels.k()],
        });
    }
    let n = shape[0];
    let kk = shape[2];
    let at = |i: usize, j: usize, c: usize| scores.data()[(i * n + j) * kk + c];

    let mut pred = Prediction::default();
    for c in 0..labels.num_entity_types() {
        for i in 0..n {
            for j in i..n {
                let s = at(i, j, c);
                if s >= tau {
                    pred.entities.push(ScoredEntity {
                        label: labels.channel_name(c).to_string(),
                        start: i,
                        end: j,
                        score: s,
                    });
                }
            }
        }
    }
    let candidates: Vec<TypedSpan> = pred
        .entities
        .iter()
        .map(|e| TypedSpan {
            start: e.start,
            end: e.end,
            label: Some(e.label.clone()),
        })
        .collect();

    for c in labels.num_entity_types()..labels.k() {
        let label = labels.channel_name(c);
        for subj in &candidates {
            if task.untyped_objects() {
                let head: Vec<f64> = (0..n).map(|j| at(subj.start, j, c)).collect();
                let tail: Vec<f64> = (0..n).map(|j| at(subj.end, j, c)).collect();
                for (s, e) in argument_candidates(&head, &tail, subj.start == subj.end) {
                    let score = head[s].min(tail[e]);
                    if score >= tau {
                        pred.links.push(ScoredLink {
                            label: label.to_string(),
                            subject: subj.clone(),
                            object: TypedSpan {
                                start: s,
                                end: e,
                                label: None,
                            },
                            score,
                        });
                    }
                }
            } else {
                for obj in &candidates {
                    let score = at(subj.start, obj.start, c).min(at(subj.end, obj.end, c));
                    if score >= tau {
                        pred.links.push(ScoredLink {
                            label: label.to_string(),
                            subject: subj.clone(),
                            object: obj.clone(),
                            score,
                        });
                    }
                }
            }
        }
    }
    Ok(pred)
}

fn argument_candidates(head: &[f64], tail: &[f64], shared_row: bool) -> Vec<(usize, usize)> {
    let n = head.len();
    let mut out = Vec::new();
    for s in 0..n {
        for e in s..n {
            let m = head[s].min(tail[e]);
            let blocked = if shared_row {
                // starts and ends share one row: no other column may compete
                (0..n).filter(|&c| c != s && c != e).any(|c| head[c] >= m)
            } else {
                (s + 1..=e).any(|c| head[c] >= m) || (s..e).any(|c| tail[c] >= m)
            };
            if !blocked {
                out.push((s, e));
            }
        }
    }
    out
}
