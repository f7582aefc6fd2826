//! Finite-difference gradients as an independent check on the backward pass.
//!
//! The numeric side only ever runs forward passes and evaluates the loss.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::engine::{
    BpttWindow, ChunkInput, Engine, EngineError, GradStore, InputEncoding, LayerInput, Params, Target,
};
use crate::kernels::{Batch, Matrix};
use crate::netdef::{Activation, ConnId, LayerId, NetworkDef};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("gradient sets differ: {0}")]
    ShapeMismatch(String),
}

/// Inputs and targets for every frame of a sequence, processed as one chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub input: ChunkInput,
    pub targets: Vec<(LayerId, Target)>,
    pub streams: usize,
}

impl Sequence {
    pub fn frames(&self) -> usize {
        self.input.frames
    }

    fn encoding(&self) -> InputEncoding {
        match self.input.layers.first() {
            Some((_, LayerInput::OneHot(_))) => InputEncoding::OneHot,
            _ => InputEncoding::Dense,
        }
    }
}

/// Random dense inputs in `(-1, 1)` and random targets: class ids for
/// softmax outputs, values in `(-1, 1)` otherwise.
pub fn random_sequence(net: &NetworkDef, frames: usize, streams: usize, seed: u64) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = |width: usize| {
        let data = (0..width * frames * streams).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Batch::from_vec(width, frames, streams, data).expect("sizes agree")
    };
    let layers = net
        .inputs()
        .map(|l| (l.id, LayerInput::Dense(dense(l.size))))
        .collect();
    let targets = net
        .outputs()
        .map(|l| {
            let t = match l.activation {
                Activation::Softmax => {
                    Target::Ids((0..frames * streams).map(|_| rng.gen_range(0..l.size)).collect())
                }
                _ => {
                    let data = (0..l.size * frames * streams).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    Target::Dense(Batch::from_vec(l.size, frames, streams, data).expect("sizes agree"))
                }
            };
            (l.id, t)
        })
        .collect();
    Sequence {
        input: ChunkInput::new(frames, layers),
        targets,
        streams,
    }
}

/// Total loss of the sequence from a zero initial context.
pub fn sequence_loss(engine: &Engine, params: &Params, seq: &Sequence) -> Result<f64, EngineError> {
    let mut state = engine.new_state(seq.streams, seq.frames(), seq.encoding())?;
    let outputs = engine.forward_chunk(params, &mut state, &seq.input)?;
    Ok(engine.output_errors(&outputs, &seq.targets)?.0)
}

/// Loss and backpropagated gradient over an untruncated window.
pub fn analytic_grad(
    engine: &Engine,
    params: &Params,
    seq: &Sequence,
) -> Result<(f64, GradStore), EngineError> {
    let len = seq.frames();
    let mut state = engine.new_state(seq.streams, len, seq.encoding())?;
    let outputs = engine.forward_chunk(params, &mut state, &seq.input)?;
    let (loss, errors) = engine.output_errors(&outputs, &seq.targets)?;
    let window = BpttWindow::new(len, len, len)?;
    Ok((loss, engine.backward_window(params, &state, &window, &errors)?))
}

/// Central differences `(E(w + step) - E(w - step)) / (2 step)` for every
/// Dense weight.
pub fn numeric_grad(
    engine: &Engine,
    params: &Params,
    seq: &Sequence,
    step: f64,
) -> Result<GradStore, EngineError> {
    let coords: Vec<(ConnId, usize)> = params
        .iter()
        .flat_map(|(c, w)| (0..w.as_slice().len()).map(move |i| (c, i)))
        .collect();
    let values = coords
        .par_iter()
        .map_init(
            || params.clone(),
            |p, &(c, i)| {
                let orig = p.get(c).expect("dense").as_slice()[i];
                p.get_mut(c).expect("dense").as_mut_slice()[i] = orig + step;
                let plus = sequence_loss(engine, p, seq);
                p.get_mut(c).expect("dense").as_mut_slice()[i] = orig - step;
                let minus = sequence_loss(engine, p, seq);
                p.get_mut(c).expect("dense").as_mut_slice()[i] = orig;
                Ok((plus? - minus?) / (2.0 * step))
            },
        )
        .collect::<Result<Vec<f64>, EngineError>>()?;
    let mut grads = GradStore::zeros(engine.net());
    for ((c, i), v) in coords.into_iter().zip(values) {
        grads.get_mut(c).expect("dense").as_mut_slice()[i] = v;
    }
    grads.frames = seq.frames() * seq.streams;
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnReport {
    pub conn: ConnId,
    pub shape: (usize, usize),
    pub max_rel: f64,
    pub max_abs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub connections: Vec<ConnReport>,
    pub threshold: f64,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.connections.iter().all(|c| c.pass)
    }

    pub fn max_rel(&self) -> f64 {
        self.connections.iter().fold(0.0, |m, c| m.max(c.max_rel))
    }

    pub fn failing(&self) -> impl Iterator<Item = &ConnReport> {
        self.connections.iter().filter(|c| !c.pass)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:>9}  {:>12}  {:>12}  {}", "conn", "shape", "max_rel", "max_abs", "status")?;
        for c in &self.connections {
            writeln!(
                f,
                "{:>5}  {:>9}  {:>12.3e}  {:>12.3e}  {}",
                c.conn.0,
                format!("{}x{}", c.shape.0, c.shape.1),
                c.max_rel,
                c.max_abs,
                if c.pass { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (threshold {:.0e}): {}",
            self.max_rel(),
            self.threshold,
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

pub fn compare(analytic: &GradStore, numeric: &GradStore, threshold: f64) -> Result<GradReport, GradcheckError> {
    let a: Vec<(ConnId, &Matrix)> = analytic.iter().collect();
    let n: Vec<(ConnId, &Matrix)> = numeric.iter().collect();
    if a.len() != n.len() {
        return Err(GradcheckError::ShapeMismatch(format!(
            "{} vs {} connections",
            a.len(),
            n.len()
        )));
    }
    let connections = a
        .into_iter()
        .zip(n)
        .map(|((ca, ga), (cn, gn))| {
            if ca != cn || ga.shape() != gn.shape() {
                return Err(GradcheckError::ShapeMismatch(format!(
                    "connection {} ({:?}) vs {} ({:?})",
                    ca.0,
                    ga.shape(),
                    cn.0,
                    gn.shape()
                )));
            }
            let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
            for (&x, &y) in ga.as_slice().iter().zip(gn.as_slice()) {
                max_rel = max_rel.max(relative_error(x, y));
                max_abs = max_abs.max((x - y).abs());
            }
            Ok(ConnReport {
                conn: ca,
                shape: ga.shape(),
                max_rel,
                max_abs,
                pass: max_rel < threshold,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(GradReport {
        connections,
        threshold,
    })
}

/// Analytic versus numeric gradient on one sequence.
pub fn check(
    engine: &Engine,
    params: &Params,
    seq: &Sequence,
    step: f64,
    threshold: f64,
) -> Result<GradReport, GradcheckError> {
    let (_, analytic) = analytic_grad(engine, params, seq)?;
    let numeric = numeric_grad(engine, params, seq, step)?;
    compare(&analytic, &numeric, threshold)
}
