//! Execution of a condensed network: forward chunks, truncated backward
//! windows, gradient accumulation over streams and plain SGD.

mod backward;
mod forward;
mod params;
mod state;
mod train;

use thiserror::Error;

use crate::condense::{condense, CondensedGraph};
use crate::kernels::{log_softmax_at, Batch, KernelError};
use crate::netdef::{validate, Activation, LayerId, NetworkDef, Role, ValidationReport};

pub use backward::BackwardState;
pub use forward::{ChunkInput, LayerInput, LayerOutput};
pub use params::{load_checkpoint, network_hash, save_checkpoint, sgd_update, GradStore, Params};
pub use state::{BpttWindow, InputEncoding, StreamState};
pub use train::{train_loop, IterationMetrics, TrainBatch, TrainConfig};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid network:\n{0}")]
    InvalidNetwork(ValidationReport),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stream cursors out of step: expected frame {expected}, found {found}")]
    CursorDesync { expected: usize, found: usize },
    #[error("frame {frame} is no longer held (oldest available frame is {oldest})")]
    MissingHistory { frame: i64, oldest: i64 },
    #[error("inconsistent window: {0}")]
    WindowInconsistent(String),
    #[error("criterion {criterion:?} does not apply to a {activation:?} output layer")]
    CriterionMismatch {
        criterion: Criterion,
        activation: Activation,
    },
    #[error("learning rate must be positive, got {0}")]
    NonPositiveLearningRate(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    /// Level by level over the condensed DAG; simple nodes process all frames
    /// of a chunk at once, recurrent nodes step frame by frame.
    #[default]
    FrameParallel,
    /// One frame at a time through every node in topological order.
    FrameSequential,
}

/// A validated network together with its condensation.
#[derive(Clone, Debug)]
pub struct Engine {
    net: NetworkDef,
    cg: CondensedGraph,
    mode: ExecMode,
}

impl Engine {
    pub fn new(net: NetworkDef) -> Result<Self, EngineError> {
        let report = validate(&net);
        if !report.is_ok() {
            return Err(EngineError::InvalidNetwork(report));
        }
        let cg = condense(&net);
        Ok(Self {
            net,
            cg,
            mode: ExecMode::default(),
        })
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn set_mode(&mut self, mode: ExecMode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn net(&self) -> &NetworkDef {
        &self.net
    }

    pub fn condensed(&self) -> &CondensedGraph {
        &self.cg
    }

    /// Fresh zero state able to hold a window of `h` frames.
    pub fn new_state(
        &self,
        streams: usize,
        h: usize,
        encoding: InputEncoding,
    ) -> Result<StreamState, EngineError> {
        StreamState::for_window(&self.net, streams, h, encoding)
    }

    /// Loss of the outputs against `targets` and the errors to inject.
    pub fn output_errors(
        &self,
        outputs: &[LayerOutput],
        targets: &[(LayerId, Target)],
    ) -> Result<(f64, Vec<(LayerId, Batch)>), EngineError> {
        let mut total = 0.0;
        let mut errors = Vec::with_capacity(targets.len());
        for (layer, target) in targets {
            let def = self.net.layer(*layer);
            if def.role != Role::Output {
                return Err(EngineError::ShapeMismatch(format!(
                    "target given for non-output layer `{}`",
                    def.name
                )));
            }
            let out = outputs.iter().find(|o| o.layer == *layer).ok_or_else(|| {
                EngineError::ShapeMismatch(format!("no output computed for `{}`", def.name))
            })?;
            let criterion = Criterion::for_activation(def.activation).ok_or(
                EngineError::CriterionMismatch {
                    criterion: Criterion::MseIdentity,
                    activation: def.activation,
                },
            )?;
            total += loss(criterion, &out.s, &out.y, target)?;
            errors.push((*layer, inject_output_error(criterion, def.activation, &out.y, target)?));
        }
        Ok((total, errors))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    /// `E = -sum d ln y` with `y = softmax(s)`.
    CrossEntropySoftmax,
    /// `E = 1/2 |d - y|^2` with `y = s`.
    MseIdentity,
}

impl Criterion {
    pub fn for_activation(f: Activation) -> Option<Criterion> {
        match f {
            Activation::Softmax => Some(Criterion::CrossEntropySoftmax),
            Activation::Identity => Some(Criterion::MseIdentity),
            _ => None,
        }
    }

    fn check(self, f: Activation) -> Result<(), EngineError> {
        if Criterion::for_activation(f) == Some(self) {
            Ok(())
        } else {
            Err(EngineError::CriterionMismatch {
                criterion: self,
                activation: f,
            })
        }
    }
}

/// Desired outputs for a chunk, in the same frame/stream layout as the outputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Dense(Batch),
    /// One class id per frame and stream (row `t * streams + n`).
    Ids(Vec<usize>),
}

impl Target {
    fn check(&self, y: &Batch) -> Result<(), EngineError> {
        let ok = match self {
            Target::Dense(d) => d.shape() == y.shape(),
            Target::Ids(ids) => ids.len() == y.columns() && ids.iter().all(|&i| i < y.width()),
        };
        if ok {
            Ok(())
        } else {
            Err(EngineError::ShapeMismatch(format!(
                "target does not fit an output of shape {:?}",
                y.shape()
            )))
        }
    }
}

/// Output error `d - y`: the negative derivative of the criterion with
/// respect to the output state (softmax) or activation (identity).
pub fn inject_output_error(
    criterion: Criterion,
    activation: Activation,
    y: &Batch,
    target: &Target,
) -> Result<Batch, EngineError> {
    criterion.check(activation)?;
    target.check(y)?;
    let mut delta = y.clone();
    match target {
        Target::Dense(d) => {
            for (e, (&dv, &yv)) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(d.as_slice().iter().zip(y.as_slice()))
            {
                *e = dv - yv;
            }
        }
        Target::Ids(ids) => {
            let w = y.width();
            for (row, &id) in delta.as_mut_slice().chunks_exact_mut(w).zip(ids) {
                for (j, e) in row.iter_mut().enumerate() {
                    *e = if j == id { 1.0 - *e } else { -*e };
                }
            }
        }
    }
    Ok(delta)
}

/// Criterion value summed over all frames and streams of the batch.
pub fn loss(criterion: Criterion, s: &Batch, y: &Batch, target: &Target) -> Result<f64, EngineError> {
    target.check(y)?;
    let w = y.width();
    let total = match (criterion, target) {
        (Criterion::CrossEntropySoftmax, Target::Ids(ids)) => s
            .as_slice()
            .chunks_exact(w)
            .zip(ids)
            .map(|(row, &id)| -log_softmax_at(row, id))
            .sum(),
        (Criterion::CrossEntropySoftmax, Target::Dense(d)) => s
            .as_slice()
            .chunks_exact(w)
            .zip(d.as_slice().chunks_exact(w))
            .map(|(row, drow)| {
                drow.iter()
                    .enumerate()
                    .filter(|(_, &dv)| dv != 0.0)
                    .map(|(j, &dv)| -dv * log_softmax_at(row, j))
                    .sum::<f64>()
            })
            .sum(),
        (Criterion::MseIdentity, Target::Dense(d)) => {
            0.5 * y
                .as_slice()
                .iter()
                .zip(d.as_slice())
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
        }
        (Criterion::MseIdentity, Target::Ids(ids)) => {
            0.5 * y
                .as_slice()
                .chunks_exact(w)
                .zip(ids)
                .map(|(row, &id)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, &v)| {
                            let d = if j == id { 1.0 } else { 0.0 };
                            (d - v) * (d - v)
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
        }
    };
    Ok(total)
}

#[cfg(test)]
mod tests;
