//! Synthetic corpora for all four task shapes.
//!
//! Sentences are stitched from small fixed lexicons, so every label is
//! recoverable from the words alone. Besides one dataset per task shape
//! there are two constructed pairs:
//!
//! * **aligned**: two NER sources labeling `PER` and `ORG` consistently,
//!   plus a target that adds `LOC`;
//! * **conflict**: two NER sources over the same sentence distribution
//!   whose `PER` and `ORG` annotations are swapped.
//!
//! [`fuzz_instance`] draws random well-formed instances over arbitrary
//! label spaces for codec testing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruction::InstructionFile;
use crate::schema::{Dataset, Instance, LabelSpace, Link, Mention, MentionRef, Span, TaskKind};

const PER: &[&str] = &[
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory", "oscar", "peggy",
    "trent", "victor", "wendy",
];
const ORG: &[&str] = &[
    "acme", "globex", "initech", "umbrella", "hooli", "vandelay", "wayne", "stark", "cyberdyne", "tyrell",
];
const ORG_SUFFIX: &[&str] = &["corp", "inc", "group"];
const LOC: &[&str] = &["paris", "berlin", "tokyo", "lima", "oslo", "cairo", "delhi", "quito"];
const FILLER: &[&str] = &[
    "the", "a", "of", "and", "then", "with", "from", "today", "yesterday", "said", "met", "saw", "called", "near",
    "about", "very", "new", "old", "report", "news", "people", "week",
];
const ATTACK: &[&str] = &["attacked", "bombed", "raided", "shelled"];
const TRANSPORT: &[&str] = &["moved", "shipped", "sent", "flew"];
const ASPECTS: &[&[&str]] = &[
    &["food"],
    &["service"],
    &["staff"],
    &["pizza"],
    &["wine", "list"],
    &["battery", "life"],
    &["screen"],
    &["decor"],
];
const POSITIVE: &[&str] = &["great", "tasty", "cozy", "friendly", "superb"];
const NEGATIVE: &[&str] = &["awful", "slow", "rude", "bland", "noisy"];
const NEUTRAL: &[&str] = &["ok", "average", "standard", "plain"];

/// Which corpora to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Ner,
    Re,
    Ee,
    Absa,
    Aligned,
    Conflict,
    All,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ner" => SynthKind::Ner,
            "re" => SynthKind::Re,
            "ee" => SynthKind::Ee,
            "absa" => SynthKind::Absa,
            "aligned" => SynthKind::Aligned,
            "conflict" => SynthKind::Conflict,
            "all" => SynthKind::All,
            other => return Err(Error::config("kind", format!("unknown synthetic kind `{other}`"))),
        })
    }
}

/// A generated dataset with its instruction templates.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub instructions: InstructionFile,
}

impl SynthDataset {
    /// Writes the manifest, split files and `<id>.instructions.json`.
    /// Returns `(manifest, instruction file)`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let manifest = self.dataset.save(dir)?;
        let instr = dir.join(format!("{}.instructions.json", self.dataset.id));
        self.instructions.save(&instr)?;
        Ok((manifest, instr))
    }
}

/// Generates `kind` with `size` training instances per dataset and
/// `max(size / 5, 1)` each for dev and test.
pub fn generate(kind: SynthKind, size: usize, seed: u64) -> Result<Vec<SynthDataset>> {
    if size == 0 {
        return Err(Error::config("size", "must be at least 1"));
    }
    let mut out = Vec::new();
    let mut stream = 0u64;
    let mut next = |id: &str, task: TaskKind, labels: LabelSpace, gen: &dyn Fn(&mut ChaCha8Rng) -> Instance| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        stream += 1;
        build(id, task, labels, size, &mut rng, gen)
    };
    let wants = |k: SynthKind| kind == k || kind == SynthKind::All;
    if wants(SynthKind::Ner) {
        out.push(next("synth_ner", TaskKind::Ner, ner_labels(true), &|r| ner_sentence(r, true, false))?);
    }
    if wants(SynthKind::Re) {
        out.push(next("synth_re", TaskKind::Re, re_labels(), &re_sentence)?);
    }
    if wants(SynthKind::Ee) {
        out.push(next("synth_ee", TaskKind::Ee, ee_labels(), &ee_sentence)?);
    }
    if wants(SynthKind::Absa) {
        out.push(next("synth_absa", TaskKind::Absa, LabelSpace::absa(), &absa_sentence)?);
    }
    if wants(SynthKind::Aligned) {
        out.push(next("aligned_a", TaskKind::Ner, ner_labels(false), &|r| ner_sentence(r, false, false))?);
        out.push(next("aligned_b", TaskKind::Ner, ner_labels(false), &|r| ner_sentence(r, false, false))?);
        out.push(next("aligned_target", TaskKind::Ner, ner_labels(true), &|r| ner_sentence(r, true, false))?);
    }
    if wants(SynthKind::Conflict) {
        out.push(next("conflict_a", TaskKind::Ner, ner_labels(false), &|r| ner_sentence(r, false, false))?);
        // Same templates as conflict_a: the datasets disagree on meaning only.
        out.push(next("conflict_b", TaskKind::Ner, ner_labels(false), &|r| ner_sentence(r, false, true))?);
    }
    Ok(out)
}

fn build(
    id: &str,
    task: TaskKind,
    labels: LabelSpace,
    size: usize,
    rng: &mut ChaCha8Rng,
    gen: &dyn Fn(&mut ChaCha8Rng) -> Instance,
) -> Result<SynthDataset> {
    let mut ds = Dataset::new(id, task, labels)?;
    let held = (size / 5).max(1);
    for (split, n) in [(&mut ds.train, size), (&mut ds.dev, held), (&mut ds.test, held)] {
        for _ in 0..n {
            let mut inst = gen(rng);
            inst.dataset_id = id.to_string();
            split.push(inst);
        }
    }
    for inst in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
        inst.validate(&ds.labels)?;
    }
    let instructions = InstructionFile {
        dataset: id.to_string(),
        templates: templates(&ds.labels, task),
    };
    Ok(SynthDataset { dataset: ds, instructions })
}

fn ner_labels(with_loc: bool) -> LabelSpace {
    let mut e = vec!["PER", "ORG"];
    if with_loc {
        e.push("LOC");
    }
    LabelSpace::new(e, vec![]).expect("fixed labels")
}

fn re_labels() -> LabelSpace {
    LabelSpace::new(["PER", "ORG", "LOC"], ["Work_For", "Live_In"]).expect("fixed labels")
}

fn ee_labels() -> LabelSpace {
    LabelSpace::new(["Attack", "Transport"], ["Attacker", "Target", "Artifact", "Destination"]).expect("fixed labels")
}

/// Five paraphrased instruction templates naming every channel once.
pub fn templates(labels: &LabelSpace, task: TaskKind) -> Vec<String> {
    let slots = |names: &[String], sep: &str| {
        names
            .iter()
            .map(|n| format!("{{{n}}}"))
            .collect::<Vec<_>>()
            .join(sep)
    };
    let ents = slots(labels.entity_types(), " , ");
    let rels = slots(labels.relation_types(), " , ");
    let (ent_word, rel_word) = match task {
        TaskKind::Ner | TaskKind::Re => ("entities", "relations"),
        TaskKind::Ee => ("events", "argument roles"),
        TaskKind::Absa => ("terms", "sentiments"),
    };
    if rels.is_empty() {
        vec![
            format!("find all {ents} {ent_word} in the sentence ."),
            format!("which spans of the text are {ents} ?"),
            format!("label the text with these types : {ents} ."),
            format!("extract every {ents} mention you can see ."),
            format!("tag each span as one of {ents} or nothing ."),
        ]
    } else {
        vec![
            format!("find {ent_word} {ents} and {rel_word} {rels} in the sentence ."),
            format!("which spans are {ents} , and which pairs hold {rels} ?"),
            format!("label {ent_word} ( {ents} ) then link them by {rels} ."),
            format!("extract {ents} spans ; connect pairs with {rels} ."),
            format!("tag {ents} and the {rel_word} {rels} between them ."),
        ]
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty lexicon")
}

fn fillers<R: Rng + ?Sized>(rng: &mut R, tokens: &mut Vec<String>, max: usize) {
    for _ in 0..rng.gen_range(0..=max) {
        tokens.push(pick(rng, FILLER).to_string());
    }
}

fn org_name<R: Rng + ?Sized>(rng: &mut R) -> Vec<String> {
    let mut name = vec![pick(rng, ORG).to_string()];
    if rng.gen_bool(0.3) {
        name.push(pick(rng, ORG_SUFFIX).to_string());
    }
    name
}

/// Pushes `words` and returns their span.
fn push(tokens: &mut Vec<String>, words: Vec<String>) -> Span {
    let start = tokens.len();
    tokens.extend(words);
    Span::new(start, tokens.len() - 1)
}

/// One to three non-overlapping entities between fillers. With `swap`,
/// person names are labeled ORG and organization names PER.
fn ner_sentence(rng: &mut ChaCha8Rng, with_loc: bool, swap: bool) -> Instance {
    let mut tokens = Vec::new();
    let mut entities = Vec::new();
    fillers(rng, &mut tokens, 2);
    let count = rng.gen_range(1..=3);
    for i in 0..count {
        let kinds = if with_loc { 3 } else { 2 };
        let (label, words) = match rng.gen_range(0..kinds) {
            0 => ("PER", vec![pick(rng, PER).to_string()]),
            1 => ("ORG", org_name(rng)),
            _ => ("LOC", vec![pick(rng, LOC).to_string()]),
        };
        let label = match (swap, label) {
            (true, "PER") => "ORG",
            (true, "ORG") => "PER",
            (_, l) => l,
        };
        let span = push(&mut tokens, words);
        entities.push(Mention::new(label, span.start, span.end));
        if i + 1 < count {
            tokens.push(pick(rng, FILLER).to_string());
            fillers(rng, &mut tokens, 1);
        }
    }
    fillers(rng, &mut tokens, 2);
    Instance {
        entities,
        ..Instance::new(tokens)
    }
}

/// One or two `PER works for ORG` / `PER lives in LOC` clauses.
fn re_sentence(rng: &mut ChaCha8Rng) -> Instance {
    let mut tokens = Vec::new();
    let mut inst_entities = Vec::new();
    let mut links = Vec::new();
    fillers(rng, &mut tokens, 1);
    let clauses = rng.gen_range(1..=2);
    for c in 0..clauses {
        if c > 0 {
            tokens.push("and".into());
        }
        let per = push(&mut tokens, vec![pick(rng, PER).to_string()]);
        inst_entities.push(Mention::new("PER", per.start, per.end));
        let subj = inst_entities.len() - 1;
        let (rel, label, words) = if rng.gen_bool(0.5) {
            tokens.extend(["works", "for"].map(String::from));
            ("Work_For", "ORG", org_name(rng))
        } else {
            tokens.extend(["lives", "in"].map(String::from));
            ("Live_In", "LOC", vec![pick(rng, LOC).to_string()])
        };
        let obj_span = push(&mut tokens, words);
        inst_entities.push(Mention::new(label, obj_span.start, obj_span.end));
        links.push(Link::new(rel, MentionRef::Index(subj), MentionRef::Index(inst_entities.len() - 1)));
    }
    fillers(rng, &mut tokens, 1);
    Instance {
        entities: inst_entities,
        links,
        ..Instance::new(tokens)
    }
}

/// `X attacked Y` or `X moved to Z`; the trigger is an event mention and
/// the arguments are raw spans.
fn ee_sentence(rng: &mut ChaCha8Rng) -> Instance {
    let mut tokens = Vec::new();
    let mut entities = Vec::new();
    let mut links = Vec::new();
    fillers(rng, &mut tokens, 1);
    let attack = rng.gen_bool(0.5);
    let arg1_words = if attack { org_name(rng) } else { vec![pick(rng, PER).to_string()] };
    let arg1 = push(&mut tokens, arg1_words);
    let (event, verb) = if attack { ("Attack", pick(rng, ATTACK)) } else { ("Transport", pick(rng, TRANSPORT)) };
    let trig = push(&mut tokens, vec![verb.to_string()]);
    entities.push(Mention::new(event, trig.start, trig.end));
    if !attack {
        tokens.push("to".into());
    }
    let arg2_words = if attack { vec![pick(rng, PER).to_string()] } else { vec![pick(rng, LOC).to_string()] };
    let arg2 = push(&mut tokens, arg2_words);
    let (r1, r2) = if attack { ("Attacker", "Target") } else { ("Artifact", "Destination") };
    links.push(Link::new(r1, MentionRef::Index(0), MentionRef::Span(arg1)));
    links.push(Link::new(r2, MentionRef::Index(0), MentionRef::Span(arg2)));
    fillers(rng, &mut tokens, 2);
    Instance {
        entities,
        links,
        ..Instance::new(tokens)
    }
}

/// `the ASPECT was OPINION` or `OPINION ASPECT`, one or two clauses.
fn absa_sentence(rng: &mut ChaCha8Rng) -> Instance {
    let mut tokens = Vec::new();
    let mut entities = Vec::new();
    let mut links = Vec::new();
    let clauses = rng.gen_range(1..=2);
    for c in 0..clauses {
        if c > 0 {
            tokens.extend(["but", "the"].map(String::from).into_iter().take(rng.gen_range(1..=2)));
        }
        let (polarity, opinion) = match rng.gen_range(0..3) {
            0 => ("Positive", pick(rng, POSITIVE)),
            1 => ("Negative", pick(rng, NEGATIVE)),
            _ => ("Neutral", pick(rng, NEUTRAL)),
        };
        let aspect_words: Vec<String> = ASPECTS.choose(rng).expect("non-empty").iter().map(|s| s.to_string()).collect();
        let (expr, aspect) = if rng.gen_bool(0.5) {
            tokens.push("the".into());
            let a = push(&mut tokens, aspect_words);
            tokens.push("was".into());
            let e = push(&mut tokens, vec![opinion.to_string()]);
            (e, a)
        } else {
            let e = push(&mut tokens, vec![opinion.to_string()]);
            let a = push(&mut tokens, aspect_words);
            (e, a)
        };
        entities.push(Mention::new("Expression", expr.start, expr.end));
        entities.push(Mention::new("Aspect", aspect.start, aspect.end));
        let n = entities.len();
        links.push(Link::new(polarity, MentionRef::Index(n - 2), MentionRef::Index(n - 1)));
    }
    tokens.push(".".into());
    Instance {
        entities,
        links,
        ..Instance::new(tokens)
    }
}

/// Random spans that share no token, within `0..n`.
fn disjoint_spans<R: Rng + ?Sized>(rng: &mut R, n: usize, count: usize, max_width: usize) -> Vec<Span> {
    let mut taken = vec![false; n];
    let mut out = Vec::new();
    for _ in 0..count * 4 {
        if out.len() == count {
            break;
        }
        let start = rng.gen_range(0..n);
        let width = rng.gen_range(1..=max_width).min(n - start);
        if taken[start..start + width].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + width].iter_mut().for_each(|t| *t = true);
        out.push(Span::new(start, start + width - 1));
    }
    out.sort();
    out
}

/// A random instance of `task` over `labels` (at least one entity type and,
/// except for NER, one relation type) that the codec reproduces exactly.
///
/// * NER: arbitrary, possibly nested, distinct typed spans.
/// * RE / ABSA: non-overlapping mentions and random links between them.
/// * EE: non-overlapping triggers; under each trigger and role, arguments
///   are non-overlapping, and a single-token trigger has at most one
///   argument per role.
pub fn fuzz_instance<R: Rng + ?Sized>(task: TaskKind, labels: &LabelSpace, rng: &mut R) -> Instance {
    let n = rng.gen_range(1..=12);
    let tokens: Vec<String> = (0..n).map(|i| format!("w{}", (i * 7 + rng.gen_range(0..5)) % 23)).collect();
    let ents = labels.entity_types();
    let rels = labels.relation_types();
    let mut inst = Instance::new(tokens);
    match task {
        TaskKind::Ner => {
            let mut seen = std::collections::BTreeSet::new();
            for _ in 0..rng.gen_range(0..=6) {
                let s = rng.gen_range(0..n);
                let e = rng.gen_range(s..n.min(s + 4));
                let label = ents.choose(rng).expect("entity types").clone();
                if seen.insert((label.clone(), s, e)) {
                    inst.entities.push(Mention::new(label, s, e));
                }
            }
        }
        TaskKind::Re | TaskKind::Absa => {
            let count = rng.gen_range(0..=5);
            for span in disjoint_spans(rng, n, count, 3) {
                let label = if task == TaskKind::Absa {
                    ["Expression", "Aspect"].choose(rng).expect("two types").to_string()
                } else {
                    ents.choose(rng).expect("entity types").clone()
                };
                inst.entities.push(Mention::new(label, span.start, span.end));
            }
            let m = inst.entities.len();
            if m >= 2 {
                for _ in 0..rng.gen_range(0..=4) {
                    let a = rng.gen_range(0..m);
                    let b = rng.gen_range(0..m);
                    if a == b {
                        continue;
                    }
                    let rel = rels.choose(rng).expect("relation types").clone();
                    let link = Link::new(rel, MentionRef::Index(a), MentionRef::Index(b));
                    if !inst.links.contains(&link) {
                        inst.links.push(link);
                    }
                }
            }
        }
        TaskKind::Ee => {
            let count = rng.gen_range(0..=3);
            for span in disjoint_spans(rng, n, count, 2) {
                let label = ents.choose(rng).expect("event types").clone();
                inst.entities.push(Mention::new(label, span.start, span.end));
            }
            for t in 0..inst.entities.len() {
                let single = inst.entities[t].start == inst.entities[t].end;
                for role in rels {
                    if !rng.gen_bool(0.4) {
                        continue;
                    }
                    let max_args = if single { 1 } else { 3 };
                    let count = rng.gen_range(1..=max_args);
                    for span in disjoint_spans(rng, n, count, 3) {
                        inst.links.push(Link::new(role.clone(), MentionRef::Index(t), MentionRef::Span(span)));
                    }
                }
            }
        }
    }
    inst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{self, Annotations};
    use crate::instruction::InstructionPool;

    #[test]
    fn every_kind_generates_valid_clean_data() {
        let sets = generate(SynthKind::All, 40, 3).unwrap();
        let ids: Vec<&str> = sets.iter().map(|s| s.dataset.id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "synth_ner",
                "synth_re",
                "synth_ee",
                "synth_absa",
                "aligned_a",
                "aligned_b",
                "aligned_target",
                "conflict_a",
                "conflict_b"
            ]
        );
        for s in &sets {
            let ds = &s.dataset;
            assert_eq!((ds.train.len(), ds.dev.len(), ds.test.len()), (40, 8, 8));
            let mut pool = InstructionPool::new();
            pool.add_file(&s.instructions, &ds.labels, true, 64).unwrap();
            assert_eq!(pool.get(&ds.id).len(), 5);
            for inst in &ds.train {
                let gold = codec::encode(inst, &ds.labels, ds.task).unwrap();
                assert!(gold.stats.is_clean(), "{}: {inst:?}", ds.id);
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(SynthKind::Re, 10, 9).unwrap();
        let b = generate(SynthKind::Re, 10, 9).unwrap();
        let c = generate(SynthKind::Re, 10, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn conflict_pair_swaps_labels_only() {
        let sets = generate(SynthKind::Conflict, 50, 1).unwrap();
        let (a, b) = (&sets[0], &sets[1]);
        assert_eq!(a.instructions.templates, b.instructions.templates);
        let owner = |ds: &Dataset, word: &str| {
            ds.train.iter().find_map(|i| {
                i.entities
                    .iter()
                    .find(|m| i.tokens[m.start] == word)
                    .map(|m| m.label.clone())
            })
        };
        for name in PER {
            if let (Some(la), Some(lb)) = (owner(&a.dataset, name), owner(&b.dataset, name)) {
                assert_eq!((la.as_str(), lb.as_str()), ("PER", "ORG"));
            }
        }
    }

    #[test]
    fn fuzz_instances_are_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spaces = [
            (TaskKind::Ner, LabelSpace::new(["A", "B"], []).unwrap()),
            (TaskKind::Re, LabelSpace::new(["A", "B"], ["r", "s"]).unwrap()),
            (TaskKind::Ee, LabelSpace::new(["E"], ["x", "y"]).unwrap()),
            (TaskKind::Absa, LabelSpace::absa()),
        ];
        for (task, labels) in &spaces {
            for _ in 0..200 {
                let inst = fuzz_instance(*task, labels, &mut rng);
                inst.validate(labels).unwrap();
                let gold = codec::encode(&inst, labels, *task).unwrap();
                assert!(gold.stats.is_clean(), "{task}: {inst:?} {:?}", gold.stats);
                let pred = codec::decode(&codec::lift(&gold.matrix), labels, *task, 0.5).unwrap();
                assert_eq!(pred.annotations(), Annotations::from_instance(&inst, *task).unwrap());
            }
        }
    }
}
