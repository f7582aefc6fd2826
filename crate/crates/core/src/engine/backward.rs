//! Truncated backward pass over a window of stored frames.
//!
//! `delta_k(t)` is the negative derivative of the error with respect to the
//! state of layer `k`, `eps_m(t)` the same for the output of connection `m`.
//! Both exist only for frames inside the window.

use std::collections::BTreeMap;

use parking_lot::RwLock;
use rayon::prelude::*;

use super::forward::Pass;
use super::state::{BpttWindow, StreamState};
use super::{Engine, EngineError, ExecMode, GradStore, Params};
use crate::condense::SuperNode;
use crate::kernels::{add_assign, gemm, mul_assign, scale_by_derivative, Batch, MatMut, MatRef, Matrix, Transpose};
use crate::netdef::{Activation, Aggregation, ConnId, LayerId, Role, WeightKind};

/// `delta` per layer and `eps` per connection into a multiplicative layer,
/// over the frames of one window. For connections into additive layers
/// `eps` equals the `delta` of the destination.
#[derive(Debug)]
pub struct BackwardState {
    first: usize,
    frames: usize,
    streams: usize,
    widths: Vec<usize>,
    conn_dst: Vec<LayerId>,
    delta: Vec<Option<RwLock<Vec<f64>>>>,
    eps: Vec<Option<RwLock<Vec<f64>>>>,
}

impl BackwardState {
    fn new(engine: &Engine, window: &BpttWindow, streams: usize) -> Self {
        let net = engine.net();
        let frames = window.len();
        let widths: Vec<usize> = net.layers().iter().map(|l| l.size).collect();
        let delta = net
            .layers()
            .iter()
            .map(|l| (l.role != Role::Input).then(|| RwLock::new(vec![0.0; frames * streams * l.size])))
            .collect();
        let eps = net
            .connections()
            .iter()
            .map(|c| {
                let dst = net.layer(c.dst);
                (dst.aggregation == Aggregation::Multiplicative)
                    .then(|| RwLock::new(vec![0.0; frames * streams * dst.size]))
            })
            .collect();
        Self {
            first: window.first_frame(),
            frames,
            streams,
            widths,
            conn_dst: net.connections().iter().map(|c| c.dst).collect(),
            delta,
            eps,
        }
    }

    pub fn first_frame(&self) -> usize {
        self.first
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `delta` of a layer over the window; `None` for input layers.
    pub fn delta(&self, l: LayerId) -> Option<Batch> {
        let data = self.delta[l.0].as_ref()?.read().clone();
        Batch::from_vec(self.widths[l.0], self.frames, self.streams, data).ok()
    }

    /// `eps` of a connection over the window.
    pub fn eps(&self, c: ConnId) -> Option<Batch> {
        match &self.eps[c.0] {
            Some(e) => {
                let dst = self.conn_dst[c.0];
                Batch::from_vec(self.widths[dst.0], self.frames, self.streams, e.read().clone()).ok()
            }
            None => self.delta(self.conn_dst[c.0]),
        }
    }

    /// Range of flat values holding frames `ta..=tb` for a layer of `width`.
    fn span(&self, ta: i64, tb: i64, width: usize) -> std::ops::Range<usize> {
        let row = |t: i64| (t - self.first as i64) as usize * self.streams;
        row(ta) * width..(row(tb) + self.streams) * width
    }
}

struct BackPass<'a> {
    fwd: Pass<'a>,
    params: &'a Params,
    window: BpttWindow,
    errors: &'a [(LayerId, Batch)],
    bs: &'a BackwardState,
}

impl BackPass<'_> {
    fn engine(&self) -> &Engine {
        self.fwd.engine
    }

    fn state(&self) -> &StreamState {
        self.fwd.state
    }

    /// `eps_c` for consumer frames `ua..=ub`, with rows that cross a context
    /// restart zeroed.
    fn eps_rows(&self, c: ConnId, ua: i64, ub: i64) -> Vec<f64> {
        let net = self.engine().net();
        let conn = net.connection(c);
        let width = net.layer(conn.dst).size;
        let span = self.bs.span(ua, ub, width);
        let mut e = match &self.bs.eps[c.0] {
            Some(buf) => buf.read()[span].to_vec(),
            None => self.bs.delta[conn.dst.0]
                .as_ref()
                .expect("non-input destination has delta")
                .read()[span]
                .to_vec(),
        };
        self.fwd.mask_resets(&mut e, width, ua, ub, conn.delay);
        e
    }

    fn delta_layer(&self, k: LayerId, ta: i64, tb: i64) -> Result<(), EngineError> {
        let net = self.engine().net();
        let def = net.layer(k);
        let width = def.size;
        let streams = self.state().streams();
        let t1 = self.window.t1 as i64;
        let rows = (tb - ta + 1) as usize * streams;
        let mut acc = vec![0.0; rows * width];

        for &c in net.outgoing(k) {
            let conn = net.connection(c);
            let d = conn.delay as i64;
            let (ua, ub) = (ta + d, (tb + d).min(t1));
            if ua > ub {
                continue;
            }
            let e = self.eps_rows(c, ua, ub);
            let n_rows = (ub - ua + 1) as usize * streams;
            let dst_w = net.layer(conn.dst).size;
            let target = &mut acc[..n_rows * width];
            match conn.weight_kind {
                WeightKind::Dense => {
                    let w = self.params.get(c).expect("dense connection has weights");
                    gemm(
                        MatRef::new(&e, n_rows, dst_w),
                        Transpose::No,
                        w.view(),
                        Transpose::No,
                        MatMut::new(target, n_rows, width),
                    )?;
                }
                WeightKind::Identity => add_assign(target, &e),
            }
        }

        if let Some((_, err)) = self.errors.iter().find(|(l, _)| *l == k) {
            let first_inj = self.window.first_injected() as i64;
            let lo = ta.max(first_inj);
            if lo <= tb {
                let from = (lo - first_inj) as usize * streams * width;
                let to = (tb - first_inj + 1) as usize * streams * width;
                let off = (lo - ta) as usize * streams * width;
                add_assign(&mut acc[off..off + (to - from)], &err.as_slice()[from..to]);
            }
        }

        let state = self.state();
        let (a, b) = (state.slot(ta)?, state.slot(tb)? + 1);
        let layer = state.layers[k.0].read();
        if def.activation != Activation::Softmax {
            scale_by_derivative(def.activation, layer.y.rows(a, b), &mut acc)?;
        }
        let span = self.bs.span(ta, tb, width);
        self.bs.delta[k.0]
            .as_ref()
            .expect("non-input layer has delta")
            .write()[span.clone()]
            .copy_from_slice(&acc);

        if def.aggregation == Aggregation::Multiplicative {
            let incoming = net.incoming(k);
            for &m in incoming {
                let mut e = acc.clone();
                for &n in incoming {
                    if n != m {
                        mul_assign(&mut e, layer.z(n).rows(a, b));
                    }
                }
                self.bs.eps[m.0]
                    .as_ref()
                    .expect("eps kept for multiplicative destinations")
                    .write()[span.clone()]
                    .copy_from_slice(&e);
            }
        }
        Ok(())
    }

    fn node(&self, node: &SuperNode, ta: i64, tb: i64) -> Result<(), EngineError> {
        let net = self.engine().net();
        match node {
            SuperNode::Simple(l) => {
                if net.layer(*l).role == Role::Input {
                    return Ok(());
                }
                self.delta_layer(*l, ta, tb)
            }
            SuperNode::Recurrent { order, .. } => {
                for t in (ta..=tb).rev() {
                    for &m in order.iter().rev() {
                        self.delta_layer(m, t, t)?;
                    }
                }
                Ok(())
            }
        }
    }

    fn run(&self) -> Result<(), EngineError> {
        let cg = self.engine().condensed();
        let net = self.engine().net();
        let (ta, tb) = (self.window.first_frame() as i64, self.window.t1 as i64);
        match self.engine().mode() {
            ExecMode::FrameParallel => {
                for level in cg.frontier_levels().iter().rev() {
                    level
                        .par_iter()
                        .try_for_each(|&i| self.node(cg.node(i), ta, tb))?;
                }
            }
            ExecMode::FrameSequential => {
                for t in (ta..=tb).rev() {
                    for &i in cg.topo_order().iter().rev() {
                        for &m in cg.node(i).order().iter().rev() {
                            if net.layer(m).role != Role::Input {
                                self.delta_layer(m, t, t)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// `-sum_t eps_c(t) y_src(t - d)^T`, one stream at a time in stream order.
    fn gradient(&self, c: ConnId) -> Result<Matrix, EngineError> {
        let net = self.engine().net();
        let conn = net.connection(c);
        let (src_w, dst_w) = (net.layer(conn.src).size, net.layer(conn.dst).size);
        let state = self.state();
        let streams = state.streams();
        let (ta, tb) = (self.window.first_frame() as i64, self.window.t1 as i64);
        let frames = (tb - ta + 1) as usize;
        let d = conn.delay as i64;
        let e = self.eps_rows(c, ta, tb);
        let (sa, sb) = (state.slot(ta - d)?, state.slot(tb - d)? + 1);
        let src = state.layers[conn.src.0].read();
        let mut g = Matrix::zeros(dst_w, src_w);

        if src.y.is_one_hot() {
            let ids = src.y.ids(sa, sb);
            for n in 0..streams {
                let mut cols: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for f in 0..frames {
                    let row = f * streams + n;
                    if let Some(id) = ids[row] {
                        let col = cols.entry(id).or_insert_with(|| vec![0.0; dst_w]);
                        for (p, ev) in col.iter_mut().zip(&e[row * dst_w..(row + 1) * dst_w]) {
                            *p += ev;
                        }
                    }
                }
                for (id, col) in cols {
                    for (i, p) in col.into_iter().enumerate() {
                        let v = g.get(i, id);
                        g.set(i, id, v - p);
                    }
                }
            }
        } else {
            let y = src.y.rows(sa, sb);
            let mut p = Matrix::zeros(dst_w, src_w);
            for n in 0..streams {
                p.fill(0.0);
                gemm(
                    MatRef::strided(&e[n * dst_w..], frames, dst_w, streams * dst_w),
                    Transpose::Yes,
                    MatRef::strided(&y[n * src_w..], frames, src_w, streams * src_w),
                    Transpose::No,
                    p.view_mut(),
                )?;
                for (gv, pv) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
                    *gv -= pv;
                }
            }
        }
        Ok(g)
    }
}

impl Engine {
    fn check_window(
        &self,
        state: &StreamState,
        window: &BpttWindow,
        errors: &[(LayerId, Batch)],
    ) -> Result<(), EngineError> {
        if window.t1 > state.cursor() {
            return Err(EngineError::WindowInconsistent(format!(
                "window ends at frame {} but only {} frames were computed",
                window.t1,
                state.cursor()
            )));
        }
        let needed = window.first_frame() as i64 - self.net().max_delay() as i64;
        if needed < state.oldest_frame() {
            return Err(EngineError::MissingHistory {
                frame: needed,
                oldest: state.oldest_frame(),
            });
        }
        for (l, err) in errors {
            let def = self.net().layer(*l);
            if def.role != Role::Output {
                return Err(EngineError::WindowInconsistent(format!(
                    "error injected into non-output layer `{}`",
                    def.name
                )));
            }
            let expected = (def.size, window.h_prime, state.streams());
            if err.shape() != expected {
                return Err(EngineError::ShapeMismatch(format!(
                    "error for `{}`: expected {expected:?}, got {:?}",
                    def.name,
                    err.shape()
                )));
            }
        }
        Ok(())
    }

    /// Gradients of the window's error with respect to every Dense weight.
    ///
    /// `errors` holds, per output layer, the injected error for the newest
    /// `h'` frames of the window.
    pub fn backward_window(
        &self,
        params: &Params,
        state: &StreamState,
        window: &BpttWindow,
        errors: &[(LayerId, Batch)],
    ) -> Result<GradStore, EngineError> {
        self.backward_window_with_state(params, state, window, errors)
            .map(|(g, _)| g)
    }

    pub fn backward_window_with_state(
        &self,
        params: &Params,
        state: &StreamState,
        window: &BpttWindow,
        errors: &[(LayerId, Batch)],
    ) -> Result<(GradStore, BackwardState), EngineError> {
        params.validate_for(self.net())?;
        self.check_window(state, window, errors)?;
        let bs = BackwardState::new(self, window, state.streams());
        let pass = BackPass {
            fwd: Pass {
                engine: self,
                state,
                wt: &[],
            },
            params,
            window: *window,
            errors,
            bs: &bs,
        };
        pass.run()?;
        let grads = (0..self.net().connections().len())
            .into_par_iter()
            .map(|i| {
                let c = ConnId(i);
                match params.get(c) {
                    Some(_) => pass.gradient(c).map(Some),
                    None => Ok(None),
                }
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        let frames = window.len() * state.streams();
        Ok((GradStore::from_parts(grads, frames), bs))
    }
}
