//! Instruction templates and the per-dataset instruction pool.
//!
//! A template names every label channel of its dataset exactly once with a
//! `{LABEL}` placeholder. Rendering replaces each placeholder with the
//! label's surface form (lowercased, underscores as spaces) and records the
//! position of its first token as that channel's slot.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::LabelSpace;
use crate::vocab::{tokenize, Vocabulary};

pub const DEFAULT_MAX_INSTR_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub dataset_id: String,
    pub template: String,
    pub tokens: Vec<String>,
    /// Token position of each channel's label, indexed by channel.
    pub slot_index: Vec<usize>,
}

impl Instruction {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        vocab.encode(&self.tokens)
    }
}

/// Label name as it appears inside an instruction.
pub fn surface_form(label: &str) -> String {
    label.to_lowercase().replace('_', " ")
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn split_placeholders(template: &str) -> Result<Vec<Piece<'_>>> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err(Error::Template(format!("unmatched `}}` in `{template}`")));
        }
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::Template(format!("unclosed `{{` in `{template}`")))?;
        let name = &rest[open + 1..close];
        if name.contains('{') {
            return Err(Error::Template(format!("nested `{{` in `{template}`")));
        }
        pieces.push(Piece::Text(&rest[..open]));
        pieces.push(Piece::Slot(name));
        rest = &rest[close + 1..];
    }
    pieces.push(Piece::Text(rest));
    Ok(pieces)
}

/// Renders and tokenizes `template` against `labels`.
pub fn parse_template(
    dataset_id: &str,
    template: &str,
    labels: &LabelSpace,
    lowercase: bool,
    max_instr_len: usize,
) -> Result<Instruction> {
    let mut tokens = Vec::new();
    let mut slots: Vec<Option<usize>> = vec![None; labels.k()];
    for piece in split_placeholders(template)? {
        match piece {
            Piece::Text(text) => tokens.extend(tokenize(text, lowercase)),
            Piece::Slot(name) => {
                let k = labels
                    .channel(name)
                    .map_err(|_| Error::Template(format!("unknown placeholder `{{{name}}}`")))?;
                if slots[k].is_some() {
                    return Err(Error::Template(format!("duplicate placeholder for channel `{name}`")));
                }
                let surface = tokenize(&surface_form(name), true);
                if surface.is_empty() {
                    return Err(Error::Template(format!("label `{name}` has an empty surface form")));
                }
                slots[k] = Some(tokens.len());
                tokens.extend(surface);
            }
        }
    }
    let missing: Vec<&str> = labels
        .channels()
        .zip(&slots)
        .filter(|(_, s)| s.is_none())
        .map(|(name, _)| name)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Template(format!(
            "missing placeholders for channels {missing:?} in `{template}`"
        )));
    }
    if tokens.len() > max_instr_len {
        return Err(Error::Template(format!(
            "{} tokens exceeds the instruction limit of {max_instr_len}",
            tokens.len()
        )));
    }
    Ok(Instruction {
        dataset_id: dataset_id.to_string(),
        template: template.to_string(),
        tokens,
        slot_index: slots.into_iter().map(|s| s.expect("checked above")).collect(),
    })
}

/// On-disk instruction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionFile {
    pub dataset: String,
    pub templates: Vec<String>,
}

impl InstructionFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Validated instructions keyed by dataset id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPool {
    pools: BTreeMap<String, Vec<Instruction>>,
}

impl InstructionPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses every template of `file` against `labels` and adds them.
    pub fn add_file(
        &mut self,
        file: &InstructionFile,
        labels: &LabelSpace,
        lowercase: bool,
        max_instr_len: usize,
    ) -> Result<()> {
        for t in &file.templates {
            let instr = parse_template(&file.dataset, t, labels, lowercase, max_instr_len)?;
            self.pools.entry(file.dataset.clone()).or_default().push(instr);
        }
        Ok(())
    }

    pub fn insert(&mut self, instr: Instruction) {
        self.pools.entry(instr.dataset_id.clone()).or_default().push(instr);
    }

    pub fn get(&self, dataset_id: &str) -> &[Instruction] {
        self.pools.get(dataset_id).map_or(&[], Vec::as_slice)
    }

    pub fn dataset_ids(&self) -> impl Iterator<Item = &str> {
        self.pools.keys().map(String::as_str)
    }

    /// Every token appearing in any instruction, for vocabulary building.
    pub fn all_tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = self.pools.values().flatten().flat_map(|i| i.tokens.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Fails unless each listed dataset has at least one instruction whose
    /// slots cover exactly that dataset's channels.
    pub fn validate<'a>(&self, datasets: impl IntoIterator<Item = (&'a str, &'a LabelSpace)>) -> Result<()> {
        for (id, labels) in datasets {
            let pool = self.get(id);
            if pool.is_empty() {
                return Err(Error::EmptyPool(id.to_string()));
            }
            for instr in pool {
                if instr.slot_index.len() != labels.k() {
                    return Err(Error::Template(format!(
                        "instruction for `{id}` has {} slots but the dataset has {} channels",
                        instr.slot_index.len(),
                        labels.k()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Uniform draw from the dataset's instructions.
    pub fn select<R: Rng + ?Sized>(&self, dataset_id: &str, rng: &mut R) -> Result<&Instruction> {
        let pool = self.get(dataset_id);
        if pool.is_empty() {
            return Err(Error::EmptyPool(dataset_id.to_string()));
        }
        Ok(&pool[rng.gen_range(0..pool.len())])
    }
}
