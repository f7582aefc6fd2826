//! Per-stream activation history and truncation bookkeeping.
//!
//! Each layer keeps a sliding window of the last `capacity` frames for all
//! streams. Frame `t` of stream `n` lives in row `slot(t) * streams + n`, so a
//! run of consecutive frames is one contiguous block. Advancing by `k` frames
//! shifts the window and zero-fills the new rows. Frames before the start of
//! a stream (t <= 0) read as zeros.

use parking_lot::RwLock;

use super::EngineError;
use crate::netdef::{Aggregation, ConnId, NetworkDef, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputEncoding {
    Dense,
    /// Input layers hold token ids; connections out of them gather weight columns.
    OneHot,
}

#[derive(Clone, Debug)]
pub(crate) enum HistoryData {
    Dense(Vec<f64>),
    OneHot(Vec<Option<usize>>),
}

#[derive(Clone, Debug)]
pub(crate) struct History {
    pub width: usize,
    streams: usize,
    capacity: usize,
    pub data: HistoryData,
}

impl History {
    fn dense(width: usize, streams: usize, capacity: usize) -> Self {
        Self {
            width,
            streams,
            capacity,
            data: HistoryData::Dense(vec![0.0; width * streams * capacity]),
        }
    }

    fn one_hot(width: usize, streams: usize, capacity: usize) -> Self {
        Self {
            width,
            streams,
            capacity,
            data: HistoryData::OneHot(vec![None; streams * capacity]),
        }
    }

    fn shift(&mut self, frames: usize) {
        let rows = frames * self.streams;
        match &mut self.data {
            HistoryData::Dense(v) => {
                let n = rows * self.width;
                v.copy_within(n.., 0);
                let len = v.len();
                v[len - n..].fill(0.0);
            }
            HistoryData::OneHot(v) => {
                v.copy_within(rows.., 0);
                let len = v.len();
                v[len - rows..].fill(None);
            }
        }
    }

    /// Dense rows for slots `[a, b)`.
    pub fn rows(&self, a: usize, b: usize) -> &[f64] {
        match &self.data {
            HistoryData::Dense(v) => {
                let w = self.width * self.streams;
                &v[a * w..b * w]
            }
            HistoryData::OneHot(_) => panic!("dense read of a one-hot history"),
        }
    }

    pub fn rows_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let w = self.width * self.streams;
        match &mut self.data {
            HistoryData::Dense(v) => &mut v[a * w..b * w],
            HistoryData::OneHot(_) => panic!("dense write to a one-hot history"),
        }
    }

    pub fn ids(&self, a: usize, b: usize) -> &[Option<usize>] {
        match &self.data {
            HistoryData::OneHot(v) => &v[a * self.streams..b * self.streams],
            HistoryData::Dense(_) => panic!("id read of a dense history"),
        }
    }

    pub fn ids_mut(&mut self, a: usize, b: usize) -> &mut [Option<usize>] {
        match &mut self.data {
            HistoryData::OneHot(v) => &mut v[a * self.streams..b * self.streams],
            HistoryData::Dense(_) => panic!("id write to a dense history"),
        }
    }

    pub fn is_one_hot(&self) -> bool {
        matches!(self.data, HistoryData::OneHot(_))
    }

    /// Dense rows for slots `[a, b)`, materializing one-hot rows if needed.
    pub fn dense_rows(&self, a: usize, b: usize) -> Vec<f64> {
        match &self.data {
            HistoryData::Dense(_) => self.rows(a, b).to_vec(),
            HistoryData::OneHot(_) => {
                let ids = self.ids(a, b);
                let mut out = vec![0.0; ids.len() * self.width];
                for (row, id) in ids.iter().enumerate() {
                    if let Some(id) = id {
                        out[row * self.width + id] = 1.0;
                    }
                }
                out
            }
        }
    }

    fn zero_slots(&mut self, a: usize, b: usize) {
        match &mut self.data {
            HistoryData::Dense(_) => self.rows_mut(a, b).fill(0.0),
            HistoryData::OneHot(_) => self.ids_mut(a, b).fill(None),
        }
    }

    fn interleave(parts: &[&History]) -> History {
        let streams: usize = parts.iter().map(|h| h.streams).sum();
        let (width, capacity) = (parts[0].width, parts[0].capacity);
        let data = match &parts[0].data {
            HistoryData::Dense(_) => {
                let mut out = Vec::with_capacity(width * streams * capacity);
                for slot in 0..capacity {
                    for p in parts {
                        out.extend_from_slice(p.rows(slot, slot + 1));
                    }
                }
                HistoryData::Dense(out)
            }
            HistoryData::OneHot(_) => {
                let mut out = Vec::with_capacity(streams * capacity);
                for slot in 0..capacity {
                    for p in parts {
                        out.extend_from_slice(p.ids(slot, slot + 1));
                    }
                }
                HistoryData::OneHot(out)
            }
        };
        History {
            width,
            streams,
            capacity,
            data,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerState {
    pub y: History,
    /// `None` for one-hot inputs.
    pub s: Option<History>,
    /// Incoming connection outputs, kept for multiplicative layers only.
    pub z: Vec<(ConnId, History)>,
}

impl LayerState {
    pub fn z(&self, c: ConnId) -> &History {
        &self
            .z
            .iter()
            .find(|(id, _)| *id == c)
            .expect("z history kept for every input of a multiplicative layer")
            .1
    }

    pub fn z_mut(&mut self, c: ConnId) -> &mut History {
        &mut self
            .z
            .iter_mut()
            .find(|(id, _)| *id == c)
            .expect("z history kept for every input of a multiplicative layer")
            .1
    }

    fn histories_mut(&mut self) -> impl Iterator<Item = &mut History> {
        std::iter::once(&mut self.y)
            .chain(self.s.iter_mut())
            .chain(self.z.iter_mut().map(|(_, h)| h))
    }
}

/// Activation history for `streams` independent contexts advanced in lockstep.
#[derive(Debug)]
pub struct StreamState {
    pub(crate) layers: Vec<RwLock<LayerState>>,
    cursor: usize,
    streams: usize,
    capacity: usize,
    encoding: InputEncoding,
    /// Per stream, ascending frames at which the context restarted.
    resets: Vec<Vec<usize>>,
}

impl Clone for StreamState {
    fn clone(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| RwLock::new(l.read().clone()))
                .collect(),
            cursor: self.cursor,
            streams: self.streams,
            capacity: self.capacity,
            encoding: self.encoding,
            resets: self.resets.clone(),
        }
    }
}

impl StreamState {
    /// `capacity` frames of history per layer; must exceed the largest delay.
    pub fn new(
        net: &NetworkDef,
        streams: usize,
        capacity: usize,
        encoding: InputEncoding,
    ) -> Result<Self, EngineError> {
        if streams == 0 {
            return Err(EngineError::ShapeMismatch("at least one stream is required".into()));
        }
        if capacity <= net.max_delay() {
            return Err(EngineError::ShapeMismatch(format!(
                "history capacity {capacity} must exceed the largest delay {}",
                net.max_delay()
            )));
        }
        let layers = net
            .layers()
            .iter()
            .map(|l| {
                let one_hot = l.role == Role::Input && encoding == InputEncoding::OneHot;
                let y = if one_hot {
                    History::one_hot(l.size, streams, capacity)
                } else {
                    History::dense(l.size, streams, capacity)
                };
                let s = (!one_hot).then(|| History::dense(l.size, streams, capacity));
                let z = if l.aggregation == Aggregation::Multiplicative {
                    net.incoming(l.id)
                        .iter()
                        .map(|&c| (c, History::dense(l.size, streams, capacity)))
                        .collect()
                } else {
                    Vec::new()
                };
                RwLock::new(LayerState { y, s, z })
            })
            .collect();
        Ok(Self {
            layers,
            cursor: 0,
            streams,
            capacity,
            encoding,
            resets: vec![Vec::new(); streams],
        })
    }

    /// Capacity `h + max_delay`, enough for a BPTT window of length `h`.
    pub fn for_window(
        net: &NetworkDef,
        streams: usize,
        h: usize,
        encoding: InputEncoding,
    ) -> Result<Self, EngineError> {
        Self::new(net, streams, h + net.max_delay(), encoding)
    }

    /// Newest frame computed so far (0 before the first chunk).
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn encoding(&self) -> InputEncoding {
        self.encoding
    }

    /// Oldest frame still held.
    pub fn oldest_frame(&self) -> i64 {
        self.cursor as i64 - self.capacity as i64 + 1
    }

    pub(crate) fn slot(&self, frame: i64) -> Result<usize, EngineError> {
        let oldest = self.oldest_frame();
        if frame < oldest || frame > self.cursor as i64 {
            return Err(EngineError::MissingHistory { frame, oldest });
        }
        Ok((frame - oldest) as usize)
    }

    pub(crate) fn advance(&mut self, frames: usize) {
        for layer in &mut self.layers {
            for h in layer.get_mut().histories_mut() {
                h.shift(frames);
            }
        }
        self.cursor += frames;
        let oldest = self.oldest_frame();
        for r in &mut self.resets {
            r.retain(|&f| f as i64 > oldest - 1);
        }
    }

    /// Restart the context of stream `n` at `frame`: delayed connections read
    /// zeros instead of anything computed before it.
    pub fn reset_stream_at(&mut self, n: usize, frame: usize) {
        let list = &mut self.resets[n];
        if !list.contains(&frame) {
            list.push(frame);
            list.sort_unstable();
        }
    }

    /// Restart the context of stream `n` from the next frame on.
    pub fn reset_stream(&mut self, n: usize) {
        let next = self.cursor + 1;
        self.reset_stream_at(n, next);
    }

    pub(crate) fn has_resets(&self) -> bool {
        self.resets.iter().any(|r| !r.is_empty())
    }

    /// Whether a read of `y(t - delay)` at frame `t` of stream `n` crosses a restart.
    pub(crate) fn crosses_reset(&self, n: usize, t: i64, delay: usize) -> bool {
        delay > 0
            && self.resets[n]
                .iter()
                .any(|&r| (r as i64) > t - delay as i64 && (r as i64) <= t)
    }

    /// Batches independent single-context states into one multi-stream state.
    pub fn merge(parts: Vec<StreamState>) -> Result<StreamState, EngineError> {
        let first = parts
            .first()
            .ok_or_else(|| EngineError::ShapeMismatch("nothing to merge".into()))?;
        for p in &parts {
            if p.cursor != first.cursor {
                return Err(EngineError::CursorDesync {
                    expected: first.cursor,
                    found: p.cursor,
                });
            }
            if p.capacity != first.capacity
                || p.layers.len() != first.layers.len()
                || p.encoding != first.encoding
            {
                return Err(EngineError::ShapeMismatch("states have different layouts".into()));
            }
        }
        let guards: Vec<Vec<_>> = parts
            .iter()
            .map(|p| p.layers.iter().map(|l| l.read()).collect())
            .collect();
        let layers = (0..first.layers.len())
            .map(|li| {
                let y = History::interleave(&guards.iter().map(|g| &g[li].y).collect::<Vec<_>>());
                let s = guards[0][li].s.as_ref().map(|_| {
                    History::interleave(
                        &guards
                            .iter()
                            .map(|g| g[li].s.as_ref().expect("same layout"))
                            .collect::<Vec<_>>(),
                    )
                });
                let z = guards[0][li]
                    .z
                    .iter()
                    .enumerate()
                    .map(|(zi, (c, _))| {
                        let hs: Vec<&History> = guards.iter().map(|g| &g[li].z[zi].1).collect();
                        (*c, History::interleave(&hs))
                    })
                    .collect();
                RwLock::new(LayerState { y, s, z })
            })
            .collect();
        Ok(StreamState {
            layers,
            cursor: first.cursor,
            streams: parts.iter().map(|p| p.streams).sum(),
            capacity: first.capacity,
            encoding: first.encoding,
            resets: parts.iter().flat_map(|p| p.resets.clone()).collect(),
        })
    }

    /// Activations `y` of one layer for frames `from..=to`, as a batch.
    pub fn activations(
        &self,
        layer: crate::netdef::LayerId,
        from: i64,
        to: i64,
    ) -> Result<crate::kernels::Batch, EngineError> {
        let (a, b) = (self.slot(from)?, self.slot(to)? + 1);
        let l = self.layers[layer.0].read();
        let data = l.y.dense_rows(a, b);
        Ok(crate::kernels::Batch::from_vec(l.y.width, b - a, self.streams, data)?)
    }

    /// Zeroes every stored value that a backward pass truncated at `t0`
    /// is not allowed to depend on: states and connection outputs at frames
    /// `<= t0`, and activations at frames `<= t0 - max_delay`.
    pub fn scrub_before_truncation(&mut self, t0: i64, max_delay: usize) {
        let oldest = self.oldest_frame();
        let slots_through = |frame: i64| ((frame - oldest + 1).max(0) as usize).min(self.capacity);
        let state_end = slots_through(t0);
        let act_end = slots_through(t0 - max_delay as i64);
        for layer in &mut self.layers {
            let layer = layer.get_mut();
            layer.y.zero_slots(0, act_end);
            if let Some(s) = layer.s.as_mut() {
                s.zero_slots(0, state_end);
            }
            for (_, z) in &mut layer.z {
                z.zero_slots(0, state_end);
            }
        }
    }
}

/// Truncation window of BPTT(h; h').
///
/// Gradients accumulate over frames `t0' < t <= t1` with `t0' = t1 - h`;
/// output errors are injected on the newest `h'` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BpttWindow {
    pub h: usize,
    pub h_prime: usize,
    pub t1: usize,
}

impl BpttWindow {
    pub fn new(h: usize, h_prime: usize, t1: usize) -> Result<Self, EngineError> {
        if h_prime == 0 || h_prime > h {
            return Err(EngineError::WindowInconsistent(format!(
                "need 1 <= h' <= h, got h = {h}, h' = {h_prime}"
            )));
        }
        if t1 < h_prime {
            return Err(EngineError::WindowInconsistent(format!(
                "newest frame {t1} precedes the {h_prime} injected frames"
            )));
        }
        Ok(Self { h, h_prime, t1 })
    }

    /// `t0' = t1 - h`; may be negative early in a stream.
    pub fn truncation_frame(&self) -> i64 {
        self.t1 as i64 - self.h as i64
    }

    /// First frame that receives a gradient contribution.
    pub fn first_frame(&self) -> usize {
        self.truncation_frame().max(0) as usize + 1
    }

    /// Number of frames in `(max(t0', 0), t1]`.
    pub fn len(&self) -> usize {
        self.t1 + 1 - self.first_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First injected frame, `t1 - h' + 1`.
    pub fn first_injected(&self) -> usize {
        self.t1 + 1 - self.h_prime
    }
}
