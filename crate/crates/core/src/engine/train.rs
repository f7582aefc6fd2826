//! BPTT(h; h') training over N streams.

use std::time::Instant;

use super::{BpttWindow, ChunkInput, Engine, EngineError, Params, StreamState, Target};
use crate::engine::sgd_update;
use crate::netdef::LayerId;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub streams: usize,
    /// Frames the error is propagated back through.
    pub h: usize,
    /// New frames per iteration; errors are injected on these.
    pub h_prime: usize,
    pub lr: f64,
    pub iterations: usize,
    /// Restart each stream's context where a new sequence begins on its tape.
    pub reset_on_sequence_boundary: bool,
}

impl TrainConfig {
    /// `h' = minibatch / N` and `h = 2h'`.
    pub fn from_minibatch(streams: usize, minibatch: usize) -> Result<Self, EngineError> {
        if streams == 0 || minibatch % streams != 0 || minibatch == 0 {
            return Err(EngineError::WindowInconsistent(format!(
                "mini-batch {minibatch} is not a positive multiple of {streams} streams"
            )));
        }
        let h_prime = minibatch / streams;
        Ok(Self {
            streams,
            h: 2 * h_prime,
            h_prime,
            lr: 0.1,
            iterations: 1,
            reset_on_sequence_boundary: false,
        })
    }

    pub fn minibatch(&self) -> usize {
        self.streams * self.h_prime
    }
}

/// One iteration's worth of data: `h'` frames for every stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub input: ChunkInput,
    pub targets: Vec<(LayerId, Target)>,
    /// `(stream, offset)` of frames that begin a new sequence.
    pub sequence_starts: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Criterion summed over the iteration's `N * h'` frames.
    pub loss: f64,
    pub frames: usize,
    pub seconds: f64,
    pub words_per_sec: f64,
}

impl IterationMetrics {
    pub fn mean_loss(&self) -> f64 {
        self.loss / self.frames as f64
    }
}

/// Runs `config.iterations` updates, pulling `h'` frames per iteration from
/// `next_batch`. `observe` sees each iteration's metrics as they happen.
pub fn train_loop(
    engine: &Engine,
    params: &mut Params,
    state: &mut StreamState,
    config: &TrainConfig,
    mut next_batch: impl FnMut(usize) -> Result<TrainBatch, EngineError>,
    mut observe: impl FnMut(&IterationMetrics),
) -> Result<Vec<IterationMetrics>, EngineError> {
    if config.h_prime == 0 || config.h_prime > config.h {
        return Err(EngineError::WindowInconsistent(format!(
            "need 1 <= h' <= h, got h = {}, h' = {}",
            config.h, config.h_prime
        )));
    }
    if state.streams() != config.streams {
        return Err(EngineError::ShapeMismatch(format!(
            "state holds {} streams, config asks for {}",
            state.streams(),
            config.streams
        )));
    }
    if state.capacity() < config.h + engine.net().max_delay() {
        return Err(EngineError::ShapeMismatch(format!(
            "history capacity {} cannot hold a window of {} frames",
            state.capacity(),
            config.h
        )));
    }
    let mut metrics = Vec::with_capacity(config.iterations);
    for iteration in 1..=config.iterations {
        let start = Instant::now();
        let mut batch = next_batch(config.h_prime)?;
        if batch.input.frames != config.h_prime {
            return Err(EngineError::ShapeMismatch(format!(
                "batch has {} frames, expected {}",
                batch.input.frames, config.h_prime
            )));
        }
        if config.reset_on_sequence_boundary {
            batch.input.resets.extend_from_slice(&batch.sequence_starts);
        }
        let outputs = engine.forward_chunk(params, state, &batch.input)?;
        let (loss, errors) = engine.output_errors(&outputs, &batch.targets)?;
        let window = BpttWindow::new(config.h, config.h_prime, state.cursor())?;
        let grads = engine.backward_window(params, state, &window, &errors)?;
        sgd_update(params, &grads, config.lr)?;
        let seconds = start.elapsed().as_secs_f64();
        let frames = config.streams * config.h_prime;
        let m = IterationMetrics {
            iteration,
            loss,
            frames,
            seconds,
            words_per_sec: frames as f64 / seconds.max(f64::MIN_POSITIVE),
        };
        observe(&m);
        metrics.push(m);
    }
    Ok(metrics)
}
