//! Epoch batch plans.
//!
//! Every batch holds instances of a single dataset. In pretraining, adjacent
//! batches come from different datasets whenever the remaining batch counts
//! allow it; an unavoidable repeat at the tail is kept and counted rather
//! than dropping data.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    /// At least two datasets, interleaved.
    Pretrain,
    /// Shuffled batches, no interleaving constraint.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    /// Position of the dataset in the list given to [`plan_epoch`].
    pub dataset: usize,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub batches: Vec<Batch>,
    /// Adjacent same-dataset pairs that the counts made unavoidable.
    pub tail_violations: usize,
}

impl BatchPlan {
    /// Adjacent pairs from the same dataset.
    pub fn adjacent_repeats(&self) -> usize {
        self.batches.windows(2).filter(|w| w[0].dataset == w[1].dataset).count()
    }
}

/// Plans one epoch over datasets with `sizes[d]` training instances.
///
/// Each dataset's indices are shuffled and cut into batches of
/// `batch_size` (the last may be short); the batch lists are then shuffled
/// and interleaved. In pretraining the next dataset is drawn from those
/// other than the previous one, weighted by remaining batches, except that
/// a dataset holding more than half of what remains is taken immediately
/// so the rest can still alternate.
pub fn plan_epoch<R: Rng + ?Sized>(sizes: &[usize], batch_size: usize, mode: PlanMode, rng: &mut R) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let nonempty = sizes.iter().filter(|&&n| n > 0).count();
    match mode {
        PlanMode::Pretrain if nonempty < 2 => {
            return Err(Error::config("sources", "pretraining needs at least two non-empty datasets"));
        }
        PlanMode::Finetune if nonempty < 1 => {
            return Err(Error::config("target", "finetuning needs a non-empty dataset"));
        }
        _ => {}
    }

    let mut queues: Vec<Vec<Batch>> = sizes
        .iter()
        .enumerate()
        .map(|(d, &n)| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let mut batches: Vec<Batch> = idx
                .chunks(batch_size)
                .map(|c| Batch {
                    dataset: d,
                    indices: c.to_vec(),
                })
                .collect();
            batches.shuffle(rng);
            batches
        })
        .collect();

    if mode == PlanMode::Finetune {
        let mut batches: Vec<Batch> = queues.into_iter().flatten().collect();
        batches.shuffle(rng);
        return Ok(BatchPlan {
            batch_size,
            batches,
            tail_violations: 0,
        });
    }

    let total: usize = queues.iter().map(Vec::len).sum();
    let mut batches = Vec::with_capacity(total);
    let mut prev: Option<usize> = None;
    let mut tail_violations = 0;
    for left in (1..=total).rev() {
        let candidates: Vec<usize> = (0..queues.len())
            .filter(|&d| !queues[d].is_empty() && Some(d) != prev)
            .collect();
        let d = if candidates.is_empty() {
            tail_violations += 1;
            prev.expect("some dataset still has batches")
        } else if let Some(&heavy) = candidates.iter().find(|&&d| 2 * queues[d].len() > left) {
            heavy
        } else {
            let weight: usize = candidates.iter().map(|&d| queues[d].len()).sum();
            let mut r = rng.gen_range(0..weight);
            let mut chosen = candidates[0];
            for &d in &candidates {
                if r < queues[d].len() {
                    chosen = d;
                    break;
                }
                r -= queues[d].len();
            }
            chosen
        };
        batches.push(queues[d].pop().expect("non-empty queue"));
        prev = Some(d);
    }
    Ok(BatchPlan {
        batch_size,
        batches,
        tail_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn covered(plan: &BatchPlan, sizes: &[usize]) -> bool {
        sizes.iter().enumerate().all(|(d, &n)| {
            let mut seen: Vec<usize> = plan
                .batches
                .iter()
                .filter(|b| b.dataset == d)
                .flat_map(|b| b.indices.iter().copied())
                .collect();
            seen.sort_unstable();
            seen == (0..n).collect::<Vec<_>>()
        })
    }

    #[test]
    fn two_by_two_alternates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = plan_epoch(&[4, 4], 2, PlanMode::Pretrain, &mut rng).unwrap();
        assert_eq!(plan.batches.len(), 4);
        assert_eq!(plan.adjacent_repeats(), 0);
        assert!(covered(&plan, &[4, 4]));
    }

    #[test]
    fn one_dataset_cannot_pretrain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(plan_epoch(&[10], 2, PlanMode::Pretrain, &mut rng).is_err());
        assert!(plan_epoch(&[10, 0], 2, PlanMode::Pretrain, &mut rng).is_err());
        let plan = plan_epoch(&[10], 3, PlanMode::Finetune, &mut rng).unwrap();
        assert_eq!(plan.batches.len(), 4);
        assert!(covered(&plan, &[10]));
    }

    #[test]
    fn unavoidable_tail_is_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // 1 batch vs 4 batches: at best a b a b ... leaves two repeats.
        let plan = plan_epoch(&[1, 4], 1, PlanMode::Pretrain, &mut rng).unwrap();
        assert!(covered(&plan, &[1, 4]));
        assert_eq!(plan.tail_violations, plan.adjacent_repeats());
        assert_eq!(plan.tail_violations, 2);
    }

    #[test]
    fn feasible_counts_never_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let k = rng.gen_range(2..6);
            let sizes: Vec<usize> = (0..k).map(|_| rng.gen_range(1..30)).collect();
            let b = rng.gen_range(1..5);
            let counts: Vec<usize> = sizes.iter().map(|n| n.div_ceil(b)).collect();
            let total: usize = counts.iter().sum();
            let plan = plan_epoch(&sizes, b, PlanMode::Pretrain, &mut rng).unwrap();
            assert!(covered(&plan, &sizes));
            assert_eq!(plan.adjacent_repeats(), plan.tail_violations);
            if 2 * counts.iter().max().unwrap() <= total + 1 {
                assert_eq!(plan.tail_violations, 0, "{sizes:?} b={b}");
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = plan_epoch(&[7, 9, 3], 2, PlanMode::Pretrain, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = plan_epoch(&[7, 9, 3], 2, PlanMode::Pretrain, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }
}
