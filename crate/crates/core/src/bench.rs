//! Throughput measurement with parameter-only FLOP accounting.
//!
//! Per Dense connection of shape `R x C` and per frame: `2RC` for the
//! forward product, `2RC` for propagating errors back through the weights
//! and `2RC` for accumulating the weight gradient, so `6RC` in total.
//! Identity connections and element-wise work are not counted.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{
    train_loop, ChunkInput, Engine, EngineError, ExecMode, InputEncoding, LayerInput, Params, StreamState, Target,
    TrainBatch, TrainConfig,
};
use crate::kernels::Batch;
use crate::netdef::{Activation, NetworkDef, WeightKind};

pub const CSV_HEADER: &str = "n_streams,h,h_prime,minibatch,seconds,frames,words_per_sec,flops,gflops";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("mini-batch {minibatch} is not divisible by {streams} streams")]
    Indivisible { minibatch: usize, streams: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `6 * R * C` per Dense connection, times `frames`.
pub fn count_flops(net: &NetworkDef, frames: u64) -> u64 {
    let per_frame: u64 = net
        .connections()
        .iter()
        .filter(|c| c.weight_kind == WeightKind::Dense)
        .map(|c| 6 * net.layer(c.dst).size as u64 * net.layer(c.src).size as u64)
        .sum();
    per_frame * frames
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub n_streams: usize,
    pub h: usize,
    pub h_prime: usize,
    pub minibatch: usize,
    pub seconds: f64,
    /// Forward frames per stream.
    pub frames: u64,
    pub words_per_sec: f64,
    pub flops: u64,
    pub gflops: f64,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub minibatch: usize,
    /// Keep iterating until this much time has passed...
    pub duration: Duration,
    /// ...and at least this many timed iterations ran.
    pub min_iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: ExecMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            minibatch: 1024,
            duration: Duration::from_secs(2),
            min_iterations: 2,
            lr: 1e-3,
            seed: 1,
            mode: ExecMode::FrameParallel,
        }
    }
}

/// Random token inputs and targets; Identity outputs get random dense targets.
fn synthetic_batch(net: &NetworkDef, rng: &mut ChaCha8Rng, frames: usize, streams: usize) -> TrainBatch {
    let rows = frames * streams;
    let layers = net
        .inputs()
        .map(|l| (l.id, LayerInput::OneHot((0..rows).map(|_| rng.gen_range(0..l.size)).collect())))
        .collect();
    let targets = net
        .outputs()
        .map(|l| {
            let t = if l.activation == Activation::Softmax {
                Target::Ids((0..rows).map(|_| rng.gen_range(0..l.size)).collect())
            } else {
                let data = (0..rows * l.size).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Target::Dense(Batch::from_vec(l.size, frames, streams, data).expect("sizes agree"))
            };
            (l.id, t)
        })
        .collect();
    TrainBatch {
        input: ChunkInput::new(frames, layers),
        targets,
        sequence_starts: Vec::new(),
    }
}

/// Timed training at `h' = minibatch / streams`, `h = 2h'`.
pub fn run_bench(net: &NetworkDef, streams: usize, config: &BenchConfig) -> Result<BenchRecord, BenchError> {
    if streams == 0 || config.minibatch % streams != 0 {
        return Err(BenchError::Indivisible {
            minibatch: config.minibatch,
            streams,
        });
    }
    let mut train = TrainConfig::from_minibatch(streams, config.minibatch)?;
    train.lr = config.lr;
    train.iterations = 1;
    let engine = Engine::new(net.clone())?.with_mode(config.mode);
    let mut params = Params::init(net, config.seed);
    let mut state = engine.new_state(streams, train.h, InputEncoding::OneHot)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = |params: &mut Params, state: &mut StreamState| {
        train_loop(
            &engine,
            params,
            state,
            &train,
            |frames| Ok(synthetic_batch(net, &mut rng, frames, streams)),
            |_| {},
        )
    };
    // Warm-up fills the history window.
    step(&mut params, &mut state)?;
    let start = Instant::now();
    let mut iterations = 0usize;
    while iterations < config.min_iterations || start.elapsed() < config.duration {
        step(&mut params, &mut state)?;
        iterations += 1;
    }
    let seconds = start.elapsed().as_secs_f64();
    let frames = (iterations * train.h_prime) as u64;
    let flops = count_flops(net, frames * streams as u64);
    Ok(BenchRecord {
        n_streams: streams,
        h: train.h,
        h_prime: train.h_prime,
        minibatch: config.minibatch,
        seconds,
        frames,
        words_per_sec: (frames * streams as u64) as f64 / seconds,
        flops,
        gflops: flops as f64 / seconds / 1e9,
    })
}

pub fn write_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
