//! Task-agnostic instances, label spaces and dataset manifests.
//!
//! Every task is stored the same way: typed token spans (`entities`) plus
//! typed links between them (`links`). Token offsets are inclusive.
//!
//! | task | entity types | relation types | link subject | link object |
//! |------|--------------|----------------|--------------|-------------|
//! | NER  | entity types | none           | -            | -           |
//! | RE   | entity types | relations      | mention      | mention     |
//! | EE   | event types  | argument roles | trigger      | raw span    |
//! | ABSA | Expression, Aspect | Positive, Negative, Neutral | expression | aspect |

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 128;

pub const ABSA_ENTITY_TYPES: [&str; 2] = ["Expression", "Aspect"];
pub const ABSA_RELATION_TYPES: [&str; 3] = ["Positive", "Negative", "Neutral"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Ner,
    Re,
    Ee,
    Absa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Ner, TaskKind::Re, TaskKind::Ee, TaskKind::Absa];

    /// Whether link objects are raw spans rather than typed mentions.
    pub fn untyped_objects(self) -> bool {
        self == TaskKind::Ee
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Ner => "NER",
            TaskKind::Re => "RE",
            TaskKind::Ee => "EE",
            TaskKind::Absa => "ABSA",
        };
        f.write_str(s)
    }
}

/// Ordered label channels of one dataset: entity types first, then relation
/// types. `K` is the total channel count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelSpace", into = "RawLabelSpace")]
pub struct LabelSpace {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawLabelSpace {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

impl TryFrom<RawLabelSpace> for LabelSpace {
    type Error = Error;
    fn try_from(raw: RawLabelSpace) -> Result<Self> {
        LabelSpace::new(raw.entity_types, raw.relation_types)
    }
}

impl From<LabelSpace> for RawLabelSpace {
    fn from(ls: LabelSpace) -> Self {
        RawLabelSpace {
            entity_types: ls.entity_types,
            relation_types: ls.relation_types,
        }
    }
}

impl LabelSpace {
    pub fn new<S: Into<String>>(
        entity_types: impl IntoIterator<Item = S>,
        relation_types: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let relation_types: Vec<String> = relation_types.into_iter().map(Into::into).collect();
        let mut index = HashMap::new();
        for (k, name) in entity_types.iter().chain(&relation_types).enumerate() {
            if name.is_empty() {
                return Err(Error::LabelSpace("empty label name".into()));
            }
            if index.insert(name.clone(), k).is_some() {
                return Err(Error::LabelSpace(format!("duplicate label `{name}`")));
            }
        }
        if index.is_empty() {
            return Err(Error::LabelSpace("at least one channel is required".into()));
        }
        Ok(LabelSpace {
            entity_types,
            relation_types,
            index,
        })
    }

    /// Expression, Aspect / Positive, Negative, Neutral.
    pub fn absa() -> Self {
        LabelSpace::new(ABSA_ENTITY_TYPES, ABSA_RELATION_TYPES).expect("fixed label space")
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    /// Channel count `K`.
    pub fn k(&self) -> usize {
        self.entity_types.len() + self.relation_types.len()
    }

    pub fn num_entity_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn channel(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn entity_channel(&self, name: &str) -> Result<usize> {
        match self.channel(name)? {
            k if k < self.entity_types.len() => Ok(k),
            _ => Err(Error::Instance(format!("`{name}` is a relation type, not an entity type"))),
        }
    }

    pub fn relation_channel(&self, name: &str) -> Result<usize> {
        match self.channel(name)? {
            k if k >= self.entity_types.len() => Ok(k),
            _ => Err(Error::Instance(format!("`{name}` is an entity type, not a relation type"))),
        }
    }

    pub fn channel_name(&self, k: usize) -> &str {
        let ne = self.entity_types.len();
        if k < ne {
            &self.entity_types[k]
        } else {
            &self.relation_types[k - ne]
        }
    }

    pub fn is_entity_channel(&self, k: usize) -> bool {
        k < self.entity_types.len()
    }

    /// Channel names in channel order.
    pub fn channels(&self) -> impl Iterator<Item = &str> {
        self.entity_types.iter().chain(&self.relation_types).map(String::as_str)
    }
}

/// Inclusive token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    /// Token count.
    pub fn width(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    #[serde(rename = "type")]
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Mention {
            label: label.into(),
            start,
            end,
        }
    }

    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// A link endpoint: an index into the instance's `entities`, or a raw span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MentionRef {
    Index(usize),
    Span(Span),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Link {
    #[serde(rename = "type")]
    pub label: String,
    pub subject: MentionRef,
    pub object: MentionRef,
}

impl Link {
    pub fn new(label: impl Into<String>, subject: MentionRef, object: MentionRef) -> Self {
        Link {
            label: label.into(),
            subject,
            object,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<Mention>,
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub dataset_id: String,
}

impl Instance {
    pub fn new(tokens: Vec<String>) -> Self {
        Instance {
            tokens,
            entities: Vec::new(),
            links: Vec::new(),
            dataset_id: String::new(),
        }
    }

    /// Builds an instance from a whitespace-separated sentence.
    pub fn from_text(text: &str) -> Self {
        Instance::new(text.split_whitespace().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Resolves a link endpoint to its span and, for mention references, its
    /// entity type.
    pub fn resolve(&self, r: MentionRef) -> Result<(Span, Option<&str>)> {
        match r {
            MentionRef::Index(i) => {
                let m = self.entities.get(i).ok_or(Error::Index {
                    op: "mention reference",
                    index: i,
                    len: self.entities.len(),
                })?;
                Ok((m.span(), Some(m.label.as_str())))
            }
            MentionRef::Span(s) => Ok((s, None)),
        }
    }

    /// Checks offsets, label names and references against `labels`.
    pub fn validate(&self, labels: &LabelSpace) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Instance("empty token list".into()));
        }
        let n = self.tokens.len();
        let check_span = |s: Span| -> Result<()> {
            if s.start > s.end {
                return Err(Error::Instance(format!(
                    "span start index {} exceeds end index {}",
                    s.start, s.end
                )));
            }
            if s.end >= n {
                return Err(Error::Index {
                    op: "span end",
                    index: s.end,
                    len: n,
                });
            }
            Ok(())
        };
        for m in &self.entities {
            check_span(m.span())?;
            labels.entity_channel(&m.label)?;
        }
        for l in &self.links {
            labels.relation_channel(&l.label)?;
            for r in [l.subject, l.object] {
                let (span, _) = self.resolve(r)?;
                check_span(span)?;
            }
        }
        Ok(())
    }
}

/// Result of reading one JSONL file.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub instances: Vec<Instance>,
    pub dropped_too_long: usize,
}

/// Reads one instance per non-blank line, validating each against `labels`.
/// Sentences longer than `max_len` tokens are dropped and counted.
pub fn load_jsonl(path: &Path, labels: &LabelSpace, max_len: usize) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let inst: Instance = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        inst.validate(labels).map_err(|e| at(e.to_string()))?;
        if inst.len() > max_len {
            report.dropped_too_long += 1;
            continue;
        }
        report.instances.push(inst);
    }
    if report.dropped_too_long > 0 {
        log::warn!(
            "{}: dropped {} sentences longer than {max_len} tokens",
            path.display(),
            report.dropped_too_long
        );
    }
    Ok(report)
}

/// Writes instances as JSONL.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("`{other}` is not one of train, dev, test"))),
        }
    }
}

/// On-disk description of a dataset. Split paths are relative to the
/// manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    pub task: TaskKind,
    pub entity_types: Vec<String>,
    #[serde(default)]
    pub relation_types: Vec<String>,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub task: TaskKind,
    pub labels: LabelSpace,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Dataset {
    /// Assembles a dataset, checking that the label space fits the task.
    pub fn new(id: impl Into<String>, task: TaskKind, labels: LabelSpace) -> Result<Self> {
        let id = id.into();
        match task {
            TaskKind::Ner if !labels.relation_types().is_empty() => {
                return Err(Error::LabelSpace(format!("NER dataset `{id}` declares relation types")));
            }
            TaskKind::Ner if labels.num_entity_types() == 0 => {
                return Err(Error::LabelSpace(format!("NER dataset `{id}` has no entity types")));
            }
            TaskKind::Absa if labels != LabelSpace::absa() => {
                return Err(Error::LabelSpace(format!(
                    "ABSA dataset `{id}` must use entity types {ABSA_ENTITY_TYPES:?} and relation types {ABSA_RELATION_TYPES:?}"
                )));
            }
            _ => {}
        }
        Ok(Dataset {
            id,
            task,
            labels,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        })
    }

    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Instance> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn load_manifest(path: &Path, max_len: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let labels = LabelSpace::new(manifest.entity_types.clone(), manifest.relation_types.clone())?;
        let mut ds = Dataset::new(manifest.id.clone(), manifest.task, labels)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (split, rel) in [
            (Split::Train, &manifest.train),
            (Split::Dev, &manifest.dev),
            (Split::Test, &manifest.test),
        ] {
            let report = load_jsonl(&base.join(rel), &ds.labels, max_len)?;
            let mut instances = report.instances;
            for inst in &mut instances {
                inst.dataset_id = ds.id.clone();
            }
            *ds.split_mut(split) = instances;
        }
        Ok(ds)
    }

    /// Writes `<dir>/<id>.json` plus one JSONL file per split.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest {
            id: self.id.clone(),
            task: self.task,
            entity_types: self.labels.entity_types().to_vec(),
            relation_types: self.labels.relation_types().to_vec(),
            train: PathBuf::new(),
            dev: PathBuf::new(),
            test: PathBuf::new(),
        };
        for (split, name) in [(Split::Train, "train"), (Split::Dev, "dev"), (Split::Test, "test")] {
            let file = PathBuf::from(format!("{}.{name}.jsonl", self.id));
            let rows: Vec<Instance> = self
                .split(split)
                .iter()
                .map(|i| Instance {
                    dataset_id: String::new(),
                    ..i.clone()
                })
                .collect();
            write_jsonl(&dir.join(&file), &rows)?;
            match split {
                Split::Train => manifest.train = file,
                Split::Dev => manifest.dev = file,
                Split::Test => manifest.test = file,
            }
        }
        let path = dir.join(format!("{}.json", self.id));
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conll03() -> LabelSpace {
        LabelSpace::new(["PER", "ORG", "LOC", "MISC"], []).unwrap()
    }

    fn write(lines: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), lines).unwrap();
        f
    }

    #[test]
    fn loads_conll_example() {
        let f = write(
            r#"{"tokens":["VICORP","restaurants","names","Sabourin","CFO","."],"entities":[{"type":"ORG","start":1,"end":1}],"links":[]}"#,
        );
        let report = load_jsonl(f.path(), &conll03(), DEFAULT_MAX_LEN).unwrap();
        assert_eq!(report.instances.len(), 1);
        let inst = &report.instances[0];
        assert_eq!(inst.entities, vec![Mention::new("ORG", 1, 1)]);
        assert_eq!(inst.tokens[1], "restaurants");
    }

    #[test]
    fn empty_file_is_empty() {
        let f = write("");
        assert!(load_jsonl(f.path(), &conll03(), 128).unwrap().instances.is_empty());
    }

    #[test]
    fn inverted_span_rejected_with_line() {
        let f = write(
            "{\"tokens\":[\"a\",\"b\"],\"entities\":[]}\n{\"tokens\":[\"a\",\"b\",\"c\"],\"entities\":[{\"type\":\"PER\",\"start\":2,\"end\":1}]}",
        );
        let err = load_jsonl(f.path(), &conll03(), 128).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("start index 2"), "{msg}");
    }

    #[test]
    fn unknown_label_is_named() {
        let f = write(r#"{"tokens":["a"],"entities":[{"type":"GPE","start":0,"end":0}]}"#);
        let msg = load_jsonl(f.path(), &conll03(), 128).unwrap_err().to_string();
        assert!(msg.contains("GPE"), "{msg}");
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let f = write("{\"tokens\":[\"a\"]}\n\n{not json");
        let err = load_jsonl(f.path(), &conll03(), 128).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn long_sentences_are_dropped_and_counted() {
        let f = write("{\"tokens\":[\"a\",\"b\",\"c\"]}\n{\"tokens\":[\"a\"]}");
        let report = load_jsonl(f.path(), &conll03(), 2).unwrap();
        assert_eq!(report.instances.len(), 1);
        assert_eq!(report.dropped_too_long, 1);
    }

    #[test]
    fn loading_is_idempotent() {
        let f = write(
            "{\"tokens\":[\"a\",\"b\"],\"entities\":[{\"type\":\"PER\",\"start\":0,\"end\":1}]}\n{\"tokens\":[\"c\"]}",
        );
        let a = load_jsonl(f.path(), &conll03(), 128).unwrap().instances;
        let b = load_jsonl(f.path(), &conll03(), 128).unwrap().instances;
        assert_eq!(a, b);
    }

    #[test]
    fn label_space_rules() {
        assert!(LabelSpace::new(["A", "B"], ["A"]).is_err());
        assert!(LabelSpace::new(Vec::<String>::new(), vec![]).is_err());
        let ls = LabelSpace::new(["PER", "ORG"], ["Work_For"]).unwrap();
        assert_eq!(ls.k(), 3);
        assert_eq!(ls.channel("Work_For").unwrap(), 2);
        assert_eq!(ls.channel_name(1), "ORG");
        assert!(Dataset::new("x", TaskKind::Ner, ls.clone()).is_err());
        assert!(Dataset::new("x", TaskKind::Re, ls).is_ok());
    }

    #[test]
    fn absa_label_space_is_fixed() {
        let swapped = LabelSpace::new(["Aspect", "Expression"], ABSA_RELATION_TYPES).unwrap();
        assert!(Dataset::new("16-res", TaskKind::Absa, swapped).is_err());
        let ds = Dataset::new("16-res", TaskKind::Absa, LabelSpace::absa()).unwrap();
        assert_eq!(ds.labels.k(), 5);
        assert_eq!(ds.labels.channel("Positive").unwrap(), 2);
    }

    #[test]
    fn every_task_shape_is_representable() {
        // EE: trigger-typed entity, role link to a raw argument span
        let line = r#"{"tokens":["rebels","attacked","the","town"],"entities":[{"type":"Attack","start":1,"end":1}],"links":[{"type":"Target","subject":0,"object":{"start":2,"end":3}}]}"#;
        let inst: Instance = serde_json::from_str(line).unwrap();
        let ls = LabelSpace::new(["Attack"], ["Attacker", "Target"]).unwrap();
        inst.validate(&ls).unwrap();
        assert_eq!(inst.links[0].object, MentionRef::Span(Span::new(2, 3)));
        assert_eq!(serde_json::to_string(&inst).unwrap(), line);

        // ABSA: expression -> aspect polarity link
        let mut inst = Instance::from_text("the restaurant was cozy");
        inst.entities = vec![Mention::new("Expression", 3, 3), Mention::new("Aspect", 1, 1)];
        inst.links = vec![Link::new("Positive", MentionRef::Index(0), MentionRef::Index(1))];
        inst.validate(&LabelSpace::absa()).unwrap();
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::new("toy", TaskKind::Ner, conll03()).unwrap();
        let mut inst = Instance::from_text("Alice met Bob");
        inst.entities.push(Mention::new("PER", 0, 0));
        inst.dataset_id = "toy".into();
        ds.train.push(inst.clone());
        ds.test.push(inst);
        let path = ds.save(dir.path()).unwrap();
        let loaded = Dataset::load_manifest(&path, 128).unwrap();
        assert_eq!(loaded, ds);
    }
}
