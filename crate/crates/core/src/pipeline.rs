//! End-to-end runs: load data, pretrain on sources, finetune on the target,
//! score and decode. The in-memory functions are what the file-level
//! `run_*` commands wrap.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{Annotations, Prediction, TypedSpan};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gate::StepReport;
use crate::gradcheck::{self, GradCheckOptions, GradCheckReport};
use crate::instruction::{InstructionFile, InstructionPool};
use crate::metrics::{self, ScoreReport};
use crate::model::{Model, ModelConfig};
use crate::schema::{load_jsonl, Dataset, Instance, Link, Mention, MentionRef, Split};
use crate::synth::{self, SynthKind};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{self, derived_rng, Phase, TaskData, TrainSummary, Trainer};
use crate::vocab::Vocabulary;

const PURPOSE_INIT: u64 = 3;
const PURPOSE_GRADCHECK: u64 = 4;

/// Everything a run reads from disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub sources: Vec<Dataset>,
    pub target: Option<Dataset>,
    pub instructions: Vec<InstructionFile>,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let max_len = cfg.model.max_len;
        let sources = cfg
            .sources
            .iter()
            .map(|p| Dataset::load_manifest(p, max_len))
            .collect::<Result<Vec<_>>>()?;
        let target = cfg.target.as_deref().map(|p| Dataset::load_manifest(p, max_len)).transpose()?;
        let instructions = cfg
            .instructions
            .iter()
            .map(|p| InstructionFile::load(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            sources,
            target,
            instructions,
        })
    }

    pub fn datasets(&self) -> impl Iterator<Item = &Dataset> {
        self.sources.iter().chain(self.target.iter())
    }

    /// Parses every instruction file whose dataset is part of the corpus.
    /// Files for unknown datasets are ignored with a warning.
    pub fn pool(&self, lowercase: bool, max_instr_len: usize) -> Result<InstructionPool> {
        let mut pool = InstructionPool::new();
        for file in &self.instructions {
            match self.datasets().find(|d| d.id == file.dataset) {
                Some(d) => pool.add_file(file, &d.labels, lowercase, max_instr_len)?,
                None => log::warn!("instructions for unknown dataset `{}` ignored", file.dataset),
            }
        }
        Ok(pool)
    }

    /// Vocabulary over the training splits plus every instruction token.
    pub fn vocabulary(&self, pool: &InstructionPool, min_count: usize, lowercase: bool) -> Vocabulary {
        let corpus = self.datasets().flat_map(|d| d.train.iter().map(|i| &i.tokens));
        Vocabulary::build(corpus, min_count, lowercase, &pool.all_tokens())
    }

    /// Channels the shared scorer needs: the largest label space.
    pub fn channels(&self) -> usize {
        self.datasets().map(|d| d.labels.k()).max().unwrap_or(1)
    }
}

/// A freshly initialised trainer over the whole corpus.
pub fn init_trainer(cfg: &RunConfig, corpus: &Corpus, phase: Phase) -> Result<Trainer> {
    let pool = corpus.pool(cfg.lowercase, cfg.model.max_instr_len)?;
    let vocab = corpus.vocabulary(&pool, cfg.min_count, cfg.lowercase);
    let model_cfg: ModelConfig = cfg.model.to_config(vocab.len(), corpus.channels());
    let model = Model::new(model_cfg, &mut derived_rng(cfg.seed, PURPOSE_INIT, 0, 0))?;
    let train = match phase {
        Phase::Pretrain => cfg.pretrain.clone(),
        Phase::Finetune => cfg.finetune.clone(),
    };
    Trainer::new(model, vocab, pool, train, phase, cfg.seed)
}

fn task_data(datasets: &[Dataset], vocab: &Vocabulary) -> Result<Vec<TaskData>> {
    datasets.iter().map(|d| TaskData::new(d.clone(), vocab)).collect()
}

/// Multi-dataset pretraining on the sources. `resume` continues a saved run.
pub fn pretrain(
    cfg: &RunConfig,
    corpus: &Corpus,
    resume: Option<Trainer>,
    sink: &mut dyn FnMut(&StepReport),
) -> Result<(Trainer, TrainSummary)> {
    if corpus.sources.len() < 2 {
        return Err(Error::config("sources", "pretraining needs at least two source datasets"));
    }
    let mut t = match resume {
        Some(t) => t,
        None => init_trainer(cfg, corpus, Phase::Pretrain)?,
    };
    let data = task_data(&corpus.sources, &t.vocab)?;
    let summary = t.train(&data, sink)?;
    Ok((t, summary))
}

/// Finetunes on the target. Starting from `start` (a pretrained trainer)
/// adds any missing target instructions and grows the scorer if the target
/// needs more channels; without it the model is initialised from scratch.
pub fn finetune(
    cfg: &RunConfig,
    corpus: &Corpus,
    start: Option<Trainer>,
    sink: &mut dyn FnMut(&StepReport),
) -> Result<(Trainer, TrainSummary)> {
    let target = corpus
        .target
        .as_ref()
        .ok_or_else(|| Error::config("target", "finetuning needs a target dataset"))?;
    let mut t = match start {
        None => init_trainer(cfg, corpus, Phase::Finetune)?,
        Some(mut t) => {
            if t.pool.get(&target.id).is_empty() {
                for file in corpus.instructions.iter().filter(|f| f.dataset == target.id) {
                    t.pool.add_file(file, &target.labels, t.vocab.lowercase(), t.model.config.max_instr_len)?;
                }
            }
            let k = target.labels.k();
            if k > t.model.config.channels {
                log::info!("growing the scorer from {} to {k} channels", t.model.config.channels);
                t.model.resize_channels(k, &mut derived_rng(cfg.seed, PURPOSE_INIT, 1, 0))?;
            }
            t.into_finetune(cfg.finetune.clone(), cfg.reset_optimizer)?
        }
    };
    let data = task_data(std::slice::from_ref(target), &t.vocab)?;
    let summary = t.train(&data, sink)?;
    Ok((t, summary))
}

// ---------------------------------------------------------------------------
// File-level commands

/// Files a command produced, relative to its output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub files: BTreeSet<String>,
}

fn record(out: &Path, produced: &[&str]) -> Result<()> {
    let path = out.join("manifest.json");
    let mut m: RunManifest = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => RunManifest::default(),
    };
    m.files.extend(produced.iter().map(|s| s.to_string()));
    write_json(&path, &m)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Streams step reports as JSON lines.
struct StepLog {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
    error: Option<Error>,
}

impl StepLog {
    fn create(path: PathBuf, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(StepLog {
            path,
            out: std::io::BufWriter::new(file),
            error: None,
        })
    }

    fn push(&mut self, r: &StepReport) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(r).map_err(Error::from).and_then(|l| {
            writeln!(self.out, "{l}").map_err(|e| Error::io(&self.path, e))
        });
        if let Err(e) = line {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Pretrains and writes `config.effective.json`, `pretrain.steps.jsonl`,
/// `pretrain.epochs.json` and `pretrain.ckpt` under `cfg.out`.
pub fn run_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("config.effective.json"), cfg)?;
    let corpus = Corpus::load(cfg)?;
    let start = resume.map(checkpoint::load).transpose()?;
    let mut log = StepLog::create(cfg.out.join("pretrain.steps.jsonl"), start.is_some())?;
    let (t, summary) = pretrain(cfg, &corpus, start, &mut |r| log.push(r))?;
    log.finish()?;
    write_json(&cfg.out.join("pretrain.epochs.json"), &summary)?;
    checkpoint::save(&t, &cfg.out.join("pretrain.ckpt"))?;
    record(
        &cfg.out,
        &["config.effective.json", "pretrain.steps.jsonl", "pretrain.epochs.json", "pretrain.ckpt"],
    )?;
    Ok(summary)
}

/// Final scores of a finetuned model on the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub dataset: String,
    pub tau: f64,
    pub best_dev: Option<(f64, u64)>,
    pub dev: ScoreReport,
    pub test: ScoreReport,
}

/// Finetunes (from `checkpoint` if given) and writes `finetune.steps.jsonl`,
/// `finetune.epochs.json`, `finetune.ckpt` and `metrics.json`.
pub fn run_finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<FinalMetrics> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("config.effective.json"), cfg)?;
    let corpus = Corpus::load(cfg)?;
    let start = checkpoint.map(checkpoint::load).transpose()?;
    let mut log = StepLog::create(cfg.out.join("finetune.steps.jsonl"), false)?;
    let (t, summary) = finetune(cfg, &corpus, start, &mut |r| log.push(r))?;
    log.finish()?;
    write_json(&cfg.out.join("finetune.epochs.json"), &summary)?;
    checkpoint::save(&t, &cfg.out.join("finetune.ckpt"))?;
    let target = corpus.target.as_ref().expect("finetune checked the target");
    let score = |split| trainer::evaluate(&t.model, &t.vocab, &t.pool, target, split, cfg.tau).map(|e| e.report);
    let metrics = FinalMetrics {
        dataset: target.id.clone(),
        tau: cfg.tau,
        best_dev: summary.best_dev,
        dev: score(Split::Dev)?,
        test: score(Split::Test)?,
    };
    write_json(&cfg.out.join("metrics.json"), &metrics)?;
    record(
        &cfg.out,
        &["config.effective.json", "finetune.steps.jsonl", "finetune.epochs.json", "finetune.ckpt", "metrics.json"],
    )?;
    Ok(metrics)
}

/// Scores `split` of the dataset at `manifest` with a saved model and writes
/// `eval.<dataset>.<split>.json` to `out`.
pub fn run_eval(checkpoint: &Path, manifest: &Path, split: Split, tau: f64, out: &Path) -> Result<ScoreReport> {
    let t = checkpoint::load(checkpoint)?;
    let dataset = Dataset::load_manifest(manifest, t.model.config.max_len)?;
    if dataset.labels.k() > t.model.config.channels {
        return Err(Error::config(
            "dataset",
            format!("`{}` needs {} channels; the model has {}", dataset.id, dataset.labels.k(), t.model.config.channels),
        ));
    }
    let eval = trainer::evaluate(&t.model, &t.vocab, &t.pool, &dataset, split, tau)?;
    write_eval(out, &dataset.id, split, &eval.report)?;
    Ok(eval.report)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

/// One decoded sentence in the dataset line format, so the file can be
/// scored directly. Scores run parallel to `entities` and `links`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    #[serde(flatten)]
    pub instance: Instance,
    pub entity_scores: Vec<f64>,
    pub link_scores: Vec<f64>,
}

impl Decoded {
    /// Typed link endpoints refer to the matching entity; untyped ones (EE
    /// arguments) become raw spans.
    pub fn new(dataset_id: &str, tokens: Vec<String>, p: &Prediction) -> Self {
        let entities: Vec<Mention> = p.entities.iter().map(|e| Mention::new(e.label.clone(), e.start, e.end)).collect();
        let endpoint = |t: &TypedSpan| {
            t.label
                .as_ref()
                .and_then(|label| {
                    entities
                        .iter()
                        .position(|m| m.label == *label && m.start == t.start && m.end == t.end)
                })
                .map_or(MentionRef::Span(t.span()), MentionRef::Index)
        };
        let links = p
            .links
            .iter()
            .map(|l| Link::new(l.label.clone(), endpoint(&l.subject), endpoint(&l.object)))
            .collect();
        Decoded {
            instance: Instance {
                tokens,
                entities,
                links,
                dataset_id: dataset_id.to_string(),
            },
            entity_scores: p.entities.iter().map(|e| e.score).collect(),
            link_scores: p.links.iter().map(|l| l.score).collect(),
        }
    }
}

/// Decodes every instance of the JSONL file `input` as dataset `dataset`
/// (which the checkpoint must know) and writes `predictions.jsonl`. With no
/// `dataset`, the checkpoint must know exactly one.
pub fn run_decode(checkpoint: &Path, dataset: Option<&str>, input: &Path, tau: f64, out: &Path) -> Result<Vec<Decoded>> {
    let t = checkpoint::load(checkpoint)?;
    let dataset = match dataset {
        Some(d) => d.to_string(),
        None if t.datasets.len() == 1 => t.datasets.keys().next().unwrap().clone(),
        None => {
            return Err(Error::config(
                "dataset",
                format!("the checkpoint knows {} datasets; name one", t.datasets.len()),
            ))
        }
    };
    let info = t
        .datasets
        .get(&dataset)
        .ok_or_else(|| Error::config("dataset", format!("the checkpoint was not trained on `{dataset}`")))?;
    let instr = t.pool.get(&dataset).first().ok_or_else(|| Error::EmptyPool(dataset.clone()))?;
    let report = load_jsonl(input, &info.labels, t.model.config.max_len)?;
    let decoded = report
        .instances
        .par_iter()
        .map(|inst| {
            let p = trainer::predict(&t.model, &t.vocab, instr, info, &inst.tokens, tau)?;
            Ok(Decoded::new(&dataset, inst.tokens.clone(), &p))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    crate::schema::write_jsonl(&out.join("predictions.jsonl"), &decoded)?;
    record(out, &["predictions.jsonl"])?;
    Ok(decoded)
}

/// Scores a predictions file (dataset line format, one line per gold
/// instance, same order) against `split` of the dataset at `manifest`, and
/// writes `eval.<dataset>.<split>.json` to `out`.
pub fn run_score(predictions: &Path, manifest: &Path, split: Split, out: &Path) -> Result<ScoreReport> {
    let dataset = Dataset::load_manifest(manifest, usize::MAX)?;
    let preds = load_jsonl(predictions, &dataset.labels, usize::MAX)?.instances;
    let golds = dataset.split(split);
    if preds.len() != golds.len() {
        return Err(Error::Misaligned {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let ann = |xs: &[Instance]| -> Result<Vec<Annotations>> {
        xs.iter().map(|i| Annotations::from_instance(i, dataset.task)).collect()
    };
    let report = metrics::evaluate(&dataset.id, dataset.task, &ann(&preds)?, &ann(golds)?)?;
    write_eval(out, &dataset.id, split, &report)?;
    Ok(report)
}

fn write_eval(out: &Path, dataset: &str, split: Split, report: &ScoreReport) -> Result<()> {
    create_dir(out)?;
    let name = format!("eval.{dataset}.{}.json", split_name(split));
    write_json(&out.join(&name), report)?;
    record(out, &[&name])
}

/// One gradient check of the full model on random inputs.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckCase {
    pub sentence_len: usize,
    pub channels: usize,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub seed: u64,
    pub max_rel_err: f64,
    pub pass: bool,
    pub cases: Vec<GradCheckCase>,
}

/// Checks every parameter gradient of small models (`d = 8`, one layer
/// each side, two heads) against central differences, for sentence
/// lengths and channel counts up to 6 and 5.
pub fn gradcheck_suite(seed: u64) -> Result<GradCheckSummary> {
    let shapes = [(1, 1), (3, 2), (6, 5)];
    let mut cases = Vec::new();
    for (c, &(n, k)) in shapes.iter().enumerate() {
        let mut rng = derived_rng(seed, PURPOSE_GRADCHECK, c as u64, 0);
        let config = ModelConfig {
            vocab_size: 16,
            channels: k,
            max_len: 8,
            max_instr_len: 16,
            heads: 2,
            ..ModelConfig::tiny(8)
        };
        let model = Model::new(config, &mut rng)?;
        let sentence: Vec<usize> = (0..n).map(|_| rng.gen_range(3..16)).collect();
        let instr_len = k + 3;
        let instruction: Vec<usize> = (0..instr_len).map(|_| rng.gen_range(3..16)).collect();
        let mut slots: Vec<usize> = (0..instr_len).collect();
        slots.truncate(k);
        let gold = Tensor::new(vec![n, n, k], (0..n * n * k).map(|_| rng.gen_range(0..2) as f64).collect())?;
        let params: Vec<(String, Tensor)> = model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let report = gradcheck::check(&params, GradCheckOptions::default(), |tape: &mut Tape, vars| {
            let p = model.params.rebind(vars.to_vec());
            let st = model.forward(tape, &p, &sentence, &instruction, &slots, None)?;
            trainer::loss(tape, st.logits, &gold)
        })?;
        cases.push(GradCheckCase {
            sentence_len: n,
            channels: k,
            report,
        });
    }
    let max_rel_err = cases.iter().map(|c| c.report.max_rel_err()).fold(0.0, f64::max);
    Ok(GradCheckSummary {
        seed,
        max_rel_err,
        pass: cases.iter().all(|c| c.report.pass),
        cases,
    })
}

/// Runs [`gradcheck_suite`] and writes `gradcheck.json`.
pub fn run_gradcheck(seed: u64, out: &Path) -> Result<GradCheckSummary> {
    let summary = gradcheck_suite(seed)?;
    create_dir(out)?;
    write_json(&out.join("gradcheck.json"), &summary)?;
    record(out, &["gradcheck.json"])?;
    Ok(summary)
}

/// Writes synthetic datasets with their instruction files to `out`.
/// Returns `(manifest, instruction file)` per dataset.
pub fn run_synth(kind: SynthKind, size: usize, seed: u64, out: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    create_dir(out)?;
    let sets = synth::generate(kind, size, seed)?;
    let mut written = Vec::new();
    let mut names = Vec::new();
    for s in &sets {
        let (m, i) = s.save(out)?;
        for split in ["train", "dev", "test"] {
            names.push(format!("{}.{split}.jsonl", s.dataset.id));
        }
        for p in [&m, &i] {
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
        written.push((m, i));
    }
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    record(out, &names)?;
    Ok(written)
}
