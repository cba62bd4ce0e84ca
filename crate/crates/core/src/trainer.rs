//! Training and evaluation loops.
//!
//! Pretraining walks interleaved single-dataset batches and applies the
//! gradient-sign [`Gate`]. Finetuning runs plain Adam steps on one target,
//! evaluates dev after every epoch and keeps the best parameters.
//!
//! All randomness is derived from `(seed, purpose, counters)`, never from a
//! long-lived generator: the plan of epoch `e` and the instruction and
//! dropout draws of step `t` are pure functions of the seed. Resuming from
//! a checkpoint therefore reproduces the uninterrupted run exactly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Annotations, Prediction};
use crate::error::{Error, Result};
use crate::gate::{Gate, GateMode, StepReport};
use crate::instruction::{Instruction, InstructionPool};
use crate::metrics::{self, ScoreReport};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::scheduler::{plan_epoch, PlanMode};
use crate::schema::{Dataset, Instance, LabelSpace, Split, TaskKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::Finetune => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Gate granularity during pretraining; finetuning never gates.
    #[serde(default)]
    pub gate: GateMode,
    /// Finetuning stops after this many epochs without a dev improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    codec::DEFAULT_THRESHOLD
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            gate: GateMode::PerGroup,
            patience: None,
            tau: default_tau(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between logits and a 0/1 gold matrix.
pub fn loss(tape: &mut Tape, logits: Var, gold: &Tensor) -> Result<Var> {
    tape.bce_with_logits(logits, gold)
}

const PURPOSE_PLAN: u64 = 1;
const PURPOSE_SAMPLE: u64 = 2;

/// A generator keyed by `(seed, purpose, a, b)`.
pub fn derived_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, purpose, a, b].into_iter().enumerate() {
        key[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Label space and task shape of a dataset the model knows about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub task: TaskKind,
    pub labels: LabelSpace,
}

/// Training split of one dataset, tokenized and encoded once.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub dataset: Dataset,
    pub ids: Vec<Vec<usize>>,
    pub gold: Vec<Tensor>,
}

impl TaskData {
    pub fn new(dataset: Dataset, vocab: &Vocabulary) -> Result<Self> {
        let mut ids = Vec::with_capacity(dataset.train.len());
        let mut gold = Vec::with_capacity(dataset.train.len());
        let (mut collisions, mut ambiguities) = (0, 0);
        for inst in &dataset.train {
            let g = codec::encode(inst, &dataset.labels, dataset.task)?;
            collisions += g.stats.collisions;
            ambiguities += g.stats.ambiguities;
            ids.push(vocab.encode(&inst.tokens));
            gold.push(g.matrix);
        }
        if collisions + ambiguities > 0 {
            log::warn!(
                "dataset {}: {collisions} cell collisions and {ambiguities} ambiguous structures in train",
                dataset.id
            );
        }
        Ok(TaskData { dataset, ids, gold })
    }

    pub fn info(&self) -> DatasetInfo {
        DatasetInfo {
            task: self.dataset.task,
            labels: self.dataset.labels.clone(),
        }
    }
}

/// Position of a run, enough to resume it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub seed: u64,
    pub phase: Phase,
    pub step: u64,
    pub epoch: u64,
    /// Batches of the current epoch already applied.
    pub batch: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTally {
    /// Group decisions that compared against a previous gradient.
    pub compared: u64,
    pub skipped: u64,
}

impl GateTally {
    pub fn skip_rate(&self) -> f64 {
        if self.compared == 0 {
            0.0
        } else {
            self.skipped as f64 / self.compared as f64
        }
    }

    fn record(&mut self, r: &StepReport) {
        for g in &r.groups {
            if g.dot.is_some() {
                self.compared += 1;
                if !g.updated {
                    self.skipped += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: u64,
    pub steps: u64,
    pub mean_loss: f64,
    pub skip_rate: f64,
    pub tail_violations: usize,
    pub dev: Vec<ScoreReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub gate: GateTally,
    /// Best dev score and the epoch it came from (finetuning only).
    pub best_dev: Option<(f64, u64)>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub vocab: Vocabulary,
    pub pool: InstructionPool,
    pub datasets: BTreeMap<String, DatasetInfo>,
    pub config: TrainConfig,
    pub adam: Adam,
    pub gate: Gate,
    pub state: RunState,
    pub tally: GateTally,
}

impl Trainer {
    pub fn new(
        model: Model,
        vocab: Vocabulary,
        pool: InstructionPool,
        config: TrainConfig,
        phase: Phase,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if model.config.vocab_size != vocab.len() {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} does not match the vocabulary size {}", model.config.vocab_size, vocab.len()),
            ));
        }
        let adam = Adam::new(&model.params, adam_config(&config));
        let gate = Gate::new(gate_mode(phase, &config));
        Ok(Trainer {
            model,
            vocab,
            pool,
            datasets: BTreeMap::new(),
            config,
            adam,
            gate,
            state: RunState {
                seed,
                phase,
                step: 0,
                epoch: 0,
                batch: 0,
            },
            tally: GateTally::default(),
        })
    }

    /// Switches to finetuning: gate off, counters reset. Parameters,
    /// vocabulary and instructions carry over; Adam moments only when
    /// `reset_optimizer` is false and the parameter shapes are unchanged.
    pub fn into_finetune(mut self, config: TrainConfig, reset_optimizer: bool) -> Result<Self> {
        config.validate()?;
        let shapes_match = self.adam.m.len() == self.model.params.len()
            && self.adam.m.iter().zip(self.model.params.iter()).all(|(m, p)| m.shape() == p.value.shape());
        if reset_optimizer || !shapes_match {
            self.adam = Adam::new(&self.model.params, adam_config(&config));
        } else {
            self.adam.config = adam_config(&config);
        }
        self.gate = Gate::new(GateMode::Off);
        self.config = config;
        self.state = RunState {
            phase: Phase::Finetune,
            step: 0,
            epoch: 0,
            batch: 0,
            ..self.state
        };
        self.tally = GateTally::default();
        Ok(self)
    }

    fn register(&mut self, data: &[TaskData]) -> Result<()> {
        for d in data {
            if d.dataset.labels.k() > self.model.config.channels {
                return Err(Error::config(
                    "model.channels",
                    format!(
                        "dataset {} has {} channels but the model scores {}",
                        d.dataset.id,
                        d.dataset.labels.k(),
                        self.model.config.channels
                    ),
                ));
            }
            self.pool.validate([(d.dataset.id.as_str(), &d.dataset.labels)])?;
            self.datasets.insert(d.dataset.id.clone(), d.info());
        }
        Ok(())
    }

    /// Mean loss and mean gradient (store order) over one batch.
    pub fn batch_gradient(&self, data: &TaskData, indices: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let st = self.state;
        let per_instance: Vec<Result<(f64, Vec<Tensor>)>> = indices
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut rng = derived_rng(st.seed, PURPOSE_SAMPLE + 16 * st.phase.tag(), st.step, k as u64);
                let instr = self.pool.select(&data.dataset.id, &mut rng)?;
                let instr_ids = instr.token_ids(&self.vocab);
                let mut tape = Tape::new();
                let p = self.model.params.bind(&mut tape, true);
                let fwd = self
                    .model
                    .forward(&mut tape, &p, &data.ids[i], &instr_ids, &instr.slot_index, Some(&mut rng))?;
                let l = loss(&mut tape, fwd.logits, &data.gold[i])?;
                tape.backward(l)?;
                Ok((tape.value(l).item(), p.grads(&tape)))
            })
            .collect();
        let mut total_loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for r in per_instance {
            let (l, g) = r?;
            total_loss += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let n = indices.len() as f64;
        let mut grads = grads.ok_or_else(|| Error::config("batch", "empty batch"))?;
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
        }
        Ok((total_loss / n, grads))
    }

    /// One optimizer step on `indices` of `data`.
    pub fn step_on(&mut self, data: &TaskData, indices: &[usize], same_as_previous: bool) -> Result<StepReport> {
        let (l, grads) = self.batch_gradient(data, indices)?;
        let mut report = self
            .gate
            .step(&mut self.model.params, &mut self.adam, grads, self.state.step, &data.dataset.id, l)?;
        report.same_dataset_as_previous = same_as_previous;
        self.state.step += 1;
        self.tally.record(&report);
        Ok(report)
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.map_or(true, |m| self.state.step < m)
    }

    /// Runs the rest of the current epoch, or until the step budget runs
    /// out. Returns the epoch log if the epoch finished.
    pub fn run_epoch(&mut self, data: &[TaskData], sink: &mut dyn FnMut(&StepReport)) -> Result<Option<EpochLog>> {
        self.register(data)?;
        let st = self.state;
        let sizes: Vec<usize> = data.iter().map(|d| d.ids.len()).collect();
        let mode = match st.phase {
            Phase::Pretrain => PlanMode::Pretrain,
            Phase::Finetune => PlanMode::Finetune,
        };
        let mut rng = derived_rng(st.seed, PURPOSE_PLAN + 16 * st.phase.tag(), st.epoch, 0);
        let plan = plan_epoch(&sizes, self.config.batch_size, mode, &mut rng)?;
        let before = self.tally.clone();
        let (mut loss_sum, mut steps) = (0.0, 0u64);
        for b in st.batch as usize..plan.batches.len() {
            if !self.budget_left() {
                return Ok(None);
            }
            let batch = &plan.batches[b];
            let same = b > 0 && plan.batches[b - 1].dataset == batch.dataset;
            let report = self.step_on(&data[batch.dataset], &batch.indices, same)?;
            loss_sum += report.loss;
            steps += 1;
            self.state.batch += 1;
            sink(&report);
        }
        let log = EpochLog {
            phase: st.phase,
            epoch: st.epoch,
            steps,
            mean_loss: if steps == 0 { 0.0 } else { loss_sum / steps as f64 },
            skip_rate: GateTally {
                compared: self.tally.compared - before.compared,
                skipped: self.tally.skipped - before.skipped,
            }
            .skip_rate(),
            tail_violations: plan.tail_violations,
            dev: Vec::new(),
        };
        self.state.epoch += 1;
        self.state.batch = 0;
        Ok(Some(log))
    }

    /// Dev scores of every dataset in `data`.
    pub fn evaluate_dev(&self, data: &[TaskData]) -> Result<Vec<ScoreReport>> {
        data.iter()
            .map(|d| Ok(evaluate(&self.model, &self.vocab, &self.pool, &d.dataset, Split::Dev, self.config.tau)?.report))
            .collect()
    }

    /// Trains until `epochs` epochs or `max_steps` steps have run, counting
    /// from the current state. Dev sets are scored after every epoch. When
    /// finetuning, the best-scoring parameters are kept.
    pub fn train(&mut self, data: &[TaskData], sink: &mut dyn FnMut(&StepReport)) -> Result<TrainSummary> {
        let finetune = self.state.phase == Phase::Finetune;
        let mut epochs = Vec::new();
        let mut best: Option<(f64, u64, Model)> = None;
        let mut stale = 0usize;
        while (self.state.epoch as usize) < self.config.epochs {
            let epoch = self.state.epoch;
            let finished = self.run_epoch(data, sink)?;
            let out_of_budget = finished.is_none();
            let mut log = finished.unwrap_or(EpochLog {
                phase: self.state.phase,
                epoch,
                steps: 0,
                mean_loss: 0.0,
                skip_rate: 0.0,
                tail_violations: 0,
                dev: Vec::new(),
            });
            log.dev = self.evaluate_dev(data)?;
            if finetune {
                let score = log.dev.first().map_or(0.0, ScoreReport::primary);
                if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
                    best = Some((score, epoch, self.model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            log::info!(
                "{:?} epoch {} loss {:.5} skip {:.3} dev {:?}",
                log.phase,
                log.epoch,
                log.mean_loss,
                log.skip_rate,
                log.dev.iter().map(|r| (r.dataset.clone(), r.primary())).collect::<Vec<_>>()
            );
            epochs.push(log);
            if out_of_budget || self.config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
        let best_dev = best.map(|(score, epoch, model)| {
            self.model = model;
            (score, epoch)
        });
        Ok(TrainSummary {
            epochs,
            gate: self.tally.clone(),
            best_dev,
        })
    }
}

fn adam_config(c: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: c.lr,
        ..AdamConfig::default()
    }
}

fn gate_mode(phase: Phase, c: &TrainConfig) -> GateMode {
    match phase {
        Phase::Pretrain => c.gate,
        Phase::Finetune => GateMode::Off,
    }
}

/// Decodes one sentence under `instr`.
pub fn predict(
    model: &Model,
    vocab: &Vocabulary,
    instr: &Instruction,
    info: &DatasetInfo,
    tokens: &[String],
    tau: f64,
) -> Result<Prediction> {
    let ids = vocab.encode(tokens);
    let scores = model.scores(&ids, &instr.token_ids(vocab), &instr.slot_index)?;
    codec::decode(&scores, &info.labels, info.task, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: ScoreReport,
    pub predictions: Vec<Prediction>,
}

/// Scores one split with the dataset's first instruction.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    pool: &InstructionPool,
    dataset: &Dataset,
    split: Split,
    tau: f64,
) -> Result<Evaluation> {
    let instr = pool.get(&dataset.id).first().ok_or_else(|| Error::EmptyPool(dataset.id.clone()))?;
    let info = DatasetInfo {
        task: dataset.task,
        labels: dataset.labels.clone(),
    };
    let instances: &[Instance] = dataset.split(split);
    let predictions: Vec<Prediction> = instances
        .par_iter()
        .map(|inst| predict(model, vocab, instr, &info, &inst.tokens, tau))
        .collect::<Result<_>>()?;
    let preds: Vec<Annotations> = predictions.iter().map(Prediction::annotations).collect();
    let golds: Vec<Annotations> = instances
        .iter()
        .map(|i| Annotations::from_instance(i, dataset.task))
        .collect::<Result<_>>()?;
    let report = metrics::evaluate(&dataset.id, dataset.task, &preds, &golds)?;
    Ok(Evaluation { report, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{self, SynthKind};

    fn setup(kind: SynthKind, size: usize, d: usize, seed: u64) -> (Vec<TaskData>, Trainer) {
        let sets = synth::generate(kind, size, seed).unwrap();
        let mut pool = InstructionPool::new();
        for s in &sets {
            pool.add_file(&s.instructions, &s.dataset.labels, true, 64).unwrap();
        }
        let corpus: Vec<&Vec<String>> = sets.iter().flat_map(|s| s.dataset.train.iter().map(|i| &i.tokens)).collect();
        let vocab = Vocabulary::build(corpus, 1, true, &pool.all_tokens());
        let k = sets.iter().map(|s| s.dataset.labels.k()).max().unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            channels: k,
            max_len: 32,
            max_instr_len: 32,
            ..ModelConfig::tiny(d)
        };
        let model = Model::new(config, &mut derived_rng(seed, 0, 0, 0)).unwrap();
        let data: Vec<TaskData> = sets.into_iter().map(|s| TaskData::new(s.dataset, &vocab).unwrap()).collect();
        let trainer = Trainer::new(
            model,
            vocab,
            pool,
            TrainConfig {
                batch_size: 4,
                ..Default::default()
            },
            Phase::Pretrain,
            seed,
        )
        .unwrap();
        (data, trainer)
    }

    #[test]
    fn loss_matches_formula_on_random_case() {
        let mut rng = derived_rng(1, 2, 3, 4);
        use rand::Rng;
        let z: Vec<f64> = (0..48).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let t: Vec<f64> = (0..48).map(|_| rng.gen_range(0..2) as f64).collect();
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![4, 4, 3], z.clone()).unwrap());
        let gold = Tensor::new(vec![4, 4, 3], t.clone()).unwrap();
        let l = loss(&mut tape, logits, &gold).unwrap();
        let direct: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let s = 1.0 / (1.0 + (-z).exp());
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 48.0;
        assert!((tape.value(l).item() - direct).abs() < 1e-10);
    }

    #[test]
    fn loss_trivial_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(&[2, 2, 1], -30.0));
        let l = loss(&mut tape, z, &Tensor::zeros(&[2, 2, 1])).unwrap();
        assert!(tape.value(l).item() < 1e-12);
        let z = tape.constant(Tensor::zeros(&[2, 2, 1]));
        let l = loss(&mut tape, z, &Tensor::full(&[2, 2, 1], 1.0)).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let (data, trainer) = setup(SynthKind::Ner, 8, 16, 0);
        let mut trainer = trainer.into_finetune(TrainConfig::default(), true).unwrap();
        trainer.register(&data).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let mut losses = Vec::new();
        for _ in 0..21 {
            let r = trainer.step_on(&data[0], &idx, false).unwrap();
            losses.push(r.loss);
        }
        let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 2, "{losses:?}");
        assert!(losses[20] < losses[0]);
    }

    #[test]
    fn pretraining_is_deterministic_and_gated() {
        let run = || {
            let (data, mut trainer) = setup(SynthKind::Aligned, 12, 8, 4);
            trainer.config.epochs = 2;
            let mut reports = Vec::new();
            let summary = trainer.train(&data[..2], &mut |r| reports.push(r.clone())).unwrap();
            (trainer.model, reports, summary)
        };
        let (ma, ra, sa) = run();
        let (mb, rb, sb) = run();
        assert_eq!(ma, mb);
        assert_eq!(ra, rb);
        assert_eq!(sa, sb);
        assert_eq!(ra.len(), 12);
        assert!(ra[0].groups.iter().all(|g| g.updated));
        assert!(ra.windows(2).all(|w| w[0].dataset != w[1].dataset || w[1].same_dataset_as_previous));
        assert_eq!(sa.epochs.len(), 2);
        assert_eq!(sa.epochs[0].dev.len(), 2);
    }

    #[test]
    fn step_budget_stops_mid_epoch_and_resumes() {
        let (data, mut a) = setup(SynthKind::Aligned, 12, 8, 2);
        a.config.epochs = 2;
        let mut b = a.clone();
        a.train(&data[..2], &mut |_| {}).unwrap();

        b.config.max_steps = Some(5);
        b.train(&data[..2], &mut |_| {}).unwrap();
        assert_eq!((b.state.step, b.state.epoch, b.state.batch), (5, 0, 5));
        b.config.max_steps = None;
        b.train(&data[..2], &mut |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.adam, b.adam);
    }

    #[test]
    fn finetune_keeps_best_dev_model() {
        let (data, trainer) = setup(SynthKind::Ner, 16, 8, 3);
        let mut t = trainer
            .into_finetune(
                TrainConfig {
                    epochs: 3,
                    batch_size: 4,
                    ..Default::default()
                },
                true,
            )
            .unwrap();
        let summary = t.train(&data, &mut |_| {}).unwrap();
        let (best, epoch) = summary.best_dev.unwrap();
        assert_eq!(summary.epochs[epoch as usize].dev[0].primary(), best);
        let again = evaluate(&t.model, &t.vocab, &t.pool, &data[0].dataset, Split::Dev, 0.5).unwrap();
        assert_eq!(again.report.primary(), best);
        assert_eq!(summary.gate.compared, 0);
    }

    #[test]
    fn too_few_channels_is_a_config_error() {
        let (data, mut trainer) = setup(SynthKind::Ner, 4, 8, 0);
        trainer.model.resize_channels(2, &mut derived_rng(0, 0, 0, 1)).unwrap();
        trainer.adam = Adam::new(&trainer.model.params, AdamConfig::default());
        let mut t = trainer.into_finetune(TrainConfig::default(), true).unwrap();
        assert!(t.train(&data, &mut |_| {}).is_err());
    }
}
