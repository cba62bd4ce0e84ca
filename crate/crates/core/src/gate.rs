//! The gradient-sign gate used during multi-dataset pretraining.
//!
//! For each parameter group the gate takes the inner product of the current
//! batch gradient with the previous batch gradient. The group is updated
//! only when the product is strictly positive; otherwise the group, its Adam
//! moments and its step count stay exactly as they were. The snapshot
//! always advances to the current gradient, skipped or not. The very first
//! step has nothing to compare against and updates everything.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::{flat_dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One dot product per parameter group.
    #[default]
    PerGroup,
    /// One dot product over all parameters; all groups move together.
    Global,
    /// Plain optimizer steps.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDecision {
    pub group: String,
    /// `None` on the first step.
    pub dot: Option<f64>,
    pub sign: i8,
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub dataset: String,
    pub loss: f64,
    pub groups: Vec<GroupDecision>,
    pub skipped: usize,
    /// The batch came from the same dataset as the one before it.
    #[serde(default)]
    pub same_dataset_as_previous: bool,
}

impl StepReport {
    pub fn skip_fraction(&self) -> f64 {
        if self.groups.is_empty() {
            0.0
        } else {
            self.skipped as f64 / self.groups.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub mode: GateMode,
    /// Previous batch gradient, one tensor per parameter.
    pub snapshot: Option<Vec<Tensor>>,
}

impl Gate {
    pub fn new(mode: GateMode) -> Self {
        Gate { mode, snapshot: None }
    }

    /// Applies one gated optimizer step with gradients `grads` (store
    /// order). Fails without touching anything if a gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        adam: &mut Adam,
        grads: Vec<Tensor>,
        step: u64,
        dataset: &str,
        loss: f64,
    ) -> Result<StepReport> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: params.at(i).name.clone(),
                step,
            });
        }
        let members = params.group_members();
        let dots: Vec<Option<f64>> = match (&self.snapshot, self.mode) {
            (_, GateMode::Off) | (None, _) => vec![None; members.len()],
            (Some(prev), GateMode::PerGroup) => members
                .iter()
                .map(|(_, idx)| Some(idx.iter().map(|&i| flat_dot(grads[i].data(), prev[i].data())).sum()))
                .collect(),
            (Some(prev), GateMode::Global) => {
                let total: f64 = (0..grads.len()).map(|i| flat_dot(grads[i].data(), prev[i].data())).sum();
                vec![Some(total); members.len()]
            }
        };

        let mut groups = Vec::with_capacity(members.len());
        for ((name, idx), dot) in members.iter().zip(dots) {
            let updated = dot.map_or(true, |d| d > 0.0);
            if updated {
                for &i in idx {
                    adam.update(i, params.value_at_mut(i), &grads[i]);
                }
            }
            groups.push(GroupDecision {
                group: name.clone(),
                dot,
                sign: dot.map_or(0, |d| if d > 0.0 { 1 } else if d < 0.0 { -1 } else { 0 }),
                updated,
            });
        }
        if self.mode != GateMode::Off {
            self.snapshot = Some(grads);
        }
        let skipped = groups.iter().filter(|g| !g.updated).count();
        Ok(StepReport {
            step,
            dataset: dataset.to_string(),
            loss,
            groups,
            skipped,
            same_dataset_as_previous: false,
        })
    }
}
