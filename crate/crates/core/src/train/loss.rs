use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Label structure of the dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Independent sigmoid per class, binary cross-entropy.
    #[default]
    Multilabel,
    /// One class per sample, softmax cross-entropy.
    Multiclass,
}

impl Task {
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Multilabel => "mAP",
            Task::Multiclass => "accuracy",
        }
    }
}

/// Dense target row for a list of class indices.
pub fn target_row(labels: &[usize], classes: usize, task: Task) -> Result<Vec<f32>> {
    if task == Task::Multiclass && labels.len() != 1 {
        return Err(dim_err!(
            "multiclass samples need exactly one label, got {}",
            labels.len()
        ));
    }
    let mut row = vec![0.0; classes];
    for &l in labels {
        if l >= classes {
            return Err(dim_err!("label {l} outside {classes} classes"));
        }
        row[l] = 1.0;
    }
    Ok(row)
}

/// Mean loss of `[B, classes]` logits against dense (possibly soft) targets.
pub fn loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &Tensor<T>,
    task: Task,
) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return Err(dim_err!(
            "logits {:?} do not match targets {:?}",
            tape.shape(logits),
            targets.shape()
        ));
    }
    match task {
        Task::Multilabel => tape.bce_with_logits(logits, targets),
        Task::Multiclass => tape.softmax_cross_entropy(logits, targets),
    }
}
