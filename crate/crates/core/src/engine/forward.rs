//! Forward pass over a chunk of new frames.

use rayon::prelude::*;

use super::state::StreamState;
use super::{Engine, EngineError, ExecMode, InputEncoding, Params};
use crate::condense::SuperNode;
use crate::kernels::{activate_rows, add_assign, gemm, mul_assign, Batch, MatMut, MatRef, Matrix, Transpose};
use crate::netdef::{Aggregation, ConnId, LayerId, Role, WeightKind};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerInput {
    Dense(Batch),
    /// One token id per frame and stream (row `t * streams + n`).
    OneHot(Vec<usize>),
}

/// Values for the input layers over `frames` new frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkInput {
    pub frames: usize,
    pub layers: Vec<(LayerId, LayerInput)>,
    /// `(stream, offset)`: the context of `stream` restarts at the
    /// `offset`-th frame of this chunk.
    pub resets: Vec<(usize, usize)>,
}

impl ChunkInput {
    pub fn new(frames: usize, layers: Vec<(LayerId, LayerInput)>) -> Self {
        Self {
            frames,
            layers,
            resets: Vec::new(),
        }
    }
}

/// States and activations of an output layer for the frames of a chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub layer: LayerId,
    pub s: Batch,
    pub y: Batch,
}

pub(super) struct Pass<'a> {
    pub engine: &'a Engine,
    pub state: &'a StreamState,
    /// Transposed Dense weights, `src x dst`.
    pub wt: &'a [Option<Matrix>],
}

impl Pass<'_> {
    fn streams(&self) -> usize {
        self.state.streams()
    }

    /// Zeroes rows of `z` (frames `ta..=tb`) that read across a context restart.
    pub fn mask_resets(&self, z: &mut [f64], width: usize, ta: i64, tb: i64, delay: usize) {
        if delay == 0 || !self.state.has_resets() {
            return;
        }
        let n_streams = self.streams();
        for (f, t) in (ta..=tb).enumerate() {
            for n in 0..n_streams {
                if self.state.crosses_reset(n, t, delay) {
                    let row = f * n_streams + n;
                    z[row * width..(row + 1) * width].fill(0.0);
                }
            }
        }
    }

    /// `z_c(t) = W_c y_src(t - d_c)` for frames `ta..=tb`.
    pub fn compute_z(&self, c: ConnId, ta: i64, tb: i64) -> Result<Vec<f64>, EngineError> {
        let net = self.engine.net();
        let conn = net.connection(c);
        let d = conn.delay as i64;
        let src_w = net.layer(conn.src).size;
        let dst_w = net.layer(conn.dst).size;
        let (sa, sb) = (self.state.slot(ta - d)?, self.state.slot(tb - d)? + 1);
        let rows = (sb - sa) * self.streams();
        let mut z = vec![0.0; rows * dst_w];
        {
            let src = self.state.layers[conn.src.0].read();
            match conn.weight_kind {
                WeightKind::Identity => {
                    if src.y.is_one_hot() {
                        z.copy_from_slice(&src.y.dense_rows(sa, sb));
                    } else {
                        z.copy_from_slice(src.y.rows(sa, sb));
                    }
                }
                WeightKind::Dense => {
                    let wt = self.wt[c.0].as_ref().expect("dense connection has weights");
                    if src.y.is_one_hot() {
                        for (row, id) in z.chunks_exact_mut(dst_w).zip(src.y.ids(sa, sb)) {
                            if let Some(id) = id {
                                row.copy_from_slice(wt.row(*id));
                            }
                        }
                    } else {
                        gemm(
                            MatRef::new(src.y.rows(sa, sb), rows, src_w),
                            Transpose::No,
                            wt.view(),
                            Transpose::No,
                            MatMut::new(&mut z, rows, dst_w),
                        )?;
                    }
                }
            }
        }
        self.mask_resets(&mut z, dst_w, ta, tb, conn.delay);
        Ok(z)
    }

    /// Evaluates layer `k` for frames `ta..=tb`. Connection outputs found in
    /// `ready` are used as they are instead of being recomputed.
    fn eval_layer(
        &self,
        k: LayerId,
        ta: i64,
        tb: i64,
        ready: &[(ConnId, Vec<f64>)],
    ) -> Result<(), EngineError> {
        let net = self.engine.net();
        let def = net.layer(k);
        let width = def.size;
        let (a, b) = (self.state.slot(ta)?, self.state.slot(tb)? + 1);
        let len = (b - a) * self.streams() * width;

        let mut zs = Vec::with_capacity(net.incoming(k).len());
        for &c in net.incoming(k) {
            let z = match ready.iter().find(|(id, _)| *id == c) {
                Some((_, z)) => z.clone(),
                None => self.compute_z(c, ta, tb)?,
            };
            zs.push((c, z));
        }

        let mut s = match def.aggregation {
            Aggregation::Additive => vec![0.0; len],
            Aggregation::Multiplicative => vec![1.0; len],
        };
        for (_, z) in &zs {
            match def.aggregation {
                Aggregation::Additive => add_assign(&mut s, z),
                Aggregation::Multiplicative => mul_assign(&mut s, z),
            }
        }
        let mut y = vec![0.0; len];
        activate_rows(def.activation, &s, &mut y, width);

        let mut layer = self.state.layers[k.0].write();
        layer.y.rows_mut(a, b).copy_from_slice(&y);
        if let Some(hs) = layer.s.as_mut() {
            hs.rows_mut(a, b).copy_from_slice(&s);
        }
        if def.aggregation == Aggregation::Multiplicative {
            for (c, z) in zs {
                layer.z_mut(c).rows_mut(a, b).copy_from_slice(&z);
            }
        }
        Ok(())
    }

    fn eval_node(&self, node: &SuperNode, ta: i64, tb: i64) -> Result<(), EngineError> {
        let net = self.engine.net();
        match node {
            SuperNode::Simple(l) => {
                if net.layer(*l).role == Role::Input {
                    return Ok(());
                }
                self.eval_layer(*l, ta, tb, &[])
            }
            SuperNode::Recurrent { order, .. } => {
                let delayed: Vec<ConnId> = order
                    .iter()
                    .flat_map(|&m| net.incoming(m).iter().copied())
                    .filter(|&c| net.connection(c).delay > 0)
                    .collect();
                for t in ta..=tb {
                    // Delayed inputs only read earlier frames, so they are computed up front.
                    let ready = delayed
                        .par_iter()
                        .map(|&c| self.compute_z(c, t, t).map(|z| (c, z)))
                        .collect::<Result<Vec<_>, _>>()?;
                    for &m in order {
                        self.eval_layer(m, t, t, &ready)?;
                    }
                }
                Ok(())
            }
        }
    }

    fn run_parallel(&self, ta: i64, tb: i64) -> Result<(), EngineError> {
        let cg = self.engine.condensed();
        for level in cg.frontier_levels() {
            level
                .par_iter()
                .try_for_each(|&i| self.eval_node(cg.node(i), ta, tb))?;
        }
        Ok(())
    }

    fn run_sequential(&self, ta: i64, tb: i64) -> Result<(), EngineError> {
        let cg = self.engine.condensed();
        let net = self.engine.net();
        for t in ta..=tb {
            for &i in cg.topo_order() {
                for &m in cg.node(i).order() {
                    if net.layer(m).role != Role::Input {
                        self.eval_layer(m, t, t, &[])?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub(super) fn transposed_weights(params: &Params) -> Vec<Option<Matrix>> {
    (0..params.len())
        .map(|i| params.get(ConnId(i)).map(Matrix::transpose))
        .collect()
}

impl Engine {
    fn check_chunk(&self, state: &StreamState, input: &ChunkInput) -> Result<(), EngineError> {
        let net = self.net();
        let streams = state.streams();
        if input.frames == 0 {
            return Err(EngineError::ShapeMismatch("a chunk needs at least one frame".into()));
        }
        if input.frames + net.max_delay() > state.capacity() {
            return Err(EngineError::ShapeMismatch(format!(
                "chunk of {} frames plus delay {} exceeds history capacity {}",
                input.frames,
                net.max_delay(),
                state.capacity()
            )));
        }
        for l in net.inputs() {
            let given: Vec<_> = input.layers.iter().filter(|(id, _)| *id == l.id).collect();
            if given.len() != 1 {
                return Err(EngineError::ShapeMismatch(format!(
                    "input layer `{}` needs exactly one value set, got {}",
                    l.name,
                    given.len()
                )));
            }
            match &given[0].1 {
                LayerInput::Dense(b) => {
                    if state.encoding() == InputEncoding::OneHot {
                        return Err(EngineError::ShapeMismatch(format!(
                            "state expects token ids for `{}`",
                            l.name
                        )));
                    }
                    if b.shape() != (l.size, input.frames, streams) {
                        return Err(EngineError::ShapeMismatch(format!(
                            "input `{}`: expected {:?}, got {:?}",
                            l.name,
                            (l.size, input.frames, streams),
                            b.shape()
                        )));
                    }
                }
                LayerInput::OneHot(ids) => {
                    if state.encoding() == InputEncoding::Dense {
                        return Err(EngineError::ShapeMismatch(format!(
                            "state expects dense values for `{}`",
                            l.name
                        )));
                    }
                    if ids.len() != input.frames * streams {
                        return Err(EngineError::ShapeMismatch(format!(
                            "input `{}`: expected {} ids, got {}",
                            l.name,
                            input.frames * streams,
                            ids.len()
                        )));
                    }
                    if let Some(bad) = ids.iter().find(|&&i| i >= l.size) {
                        return Err(EngineError::ShapeMismatch(format!(
                            "input `{}`: id {bad} out of range for width {}",
                            l.name, l.size
                        )));
                    }
                }
            }
        }
        if input.layers.len() != net.inputs().count() {
            return Err(EngineError::ShapeMismatch("values given for non-input layers".into()));
        }
        if let Some(&(n, off)) = input
            .resets
            .iter()
            .find(|&&(n, off)| n >= streams || off >= input.frames)
        {
            return Err(EngineError::ShapeMismatch(format!(
                "reset ({n}, {off}) outside the chunk"
            )));
        }
        Ok(())
    }

    /// Advances every stream by `input.frames` frames and returns the new
    /// states and activations of all output layers.
    pub fn forward_chunk(
        &self,
        params: &Params,
        state: &mut StreamState,
        input: &ChunkInput,
    ) -> Result<Vec<LayerOutput>, EngineError> {
        params.validate_for(self.net())?;
        self.check_chunk(state, input)?;
        let first = state.cursor() + 1;
        state.advance(input.frames);
        for &(n, off) in &input.resets {
            state.reset_stream_at(n, first + off);
        }
        let (a, b) = (state.capacity() - input.frames, state.capacity());
        for (l, values) in &input.layers {
            let layer = state.layers[l.0].get_mut();
            match values {
                LayerInput::Dense(batch) => {
                    layer.y.rows_mut(a, b).copy_from_slice(batch.as_slice());
                    if let Some(s) = layer.s.as_mut() {
                        s.rows_mut(a, b).copy_from_slice(batch.as_slice());
                    }
                }
                LayerInput::OneHot(ids) => {
                    for (slot, &id) in layer.y.ids_mut(a, b).iter_mut().zip(ids) {
                        *slot = Some(id);
                    }
                }
            }
        }

        let wt = transposed_weights(params);
        let pass = Pass {
            engine: self,
            state,
            wt: &wt,
        };
        let (ta, tb) = (first as i64, state.cursor() as i64);
        match self.mode() {
            ExecMode::FrameParallel => pass.run_parallel(ta, tb)?,
            ExecMode::FrameSequential => pass.run_sequential(ta, tb)?,
        }

        let streams = state.streams();
        self.net()
            .outputs()
            .map(|l| {
                let layer = state.layers[l.id.0].read();
                let s = layer.s.as_ref().expect("output layers keep states").rows(a, b).to_vec();
                let y = layer.y.rows(a, b).to_vec();
                Ok(LayerOutput {
                    layer: l.id,
                    s: Batch::from_vec(l.size, input.frames, streams, s)?,
                    y: Batch::from_vec(l.size, input.frames, streams, y)?,
                })
            })
            .collect()
    }
}
