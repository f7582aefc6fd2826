//! Trainable weights, accumulated gradients, the SGD step and checkpoints.
//!
//! Sign convention: the backward pass propagates `delta = -dE/ds` and
//! `eps = -dE/dz`. A [`GradStore`] holds `-sum(eps * y^T)`, which is the plain
//! gradient `dE/dW`, so [`sgd_update`] moves against it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::EngineError;
use crate::kernels::Matrix;
use crate::netdef::{ConnId, NetworkDef, WeightKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    weights: Vec<Option<Matrix>>,
}

impl Params {
    pub fn zeros(net: &NetworkDef) -> Self {
        let weights = net
            .connections()
            .iter()
            .map(|c| match c.weight_kind {
                WeightKind::Dense => Some(Matrix::zeros(net.layer(c.dst).size, net.layer(c.src).size)),
                WeightKind::Identity => None,
            })
            .collect();
        Self { weights }
    }

    /// Uniform in `(-r, r)` with `r = 1 / sqrt(fan_in)`, connections filled in id order.
    pub fn init(net: &NetworkDef, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(net);
        for w in params.weights.iter_mut().flatten() {
            let r = 1.0 / (w.cols() as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.gen_range(-r..r);
            }
        }
        params
    }

    pub fn get(&self, c: ConnId) -> Option<&Matrix> {
        self.weights.get(c.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, c: ConnId) -> Option<&mut Matrix> {
        self.weights.get_mut(c.0).and_then(Option::as_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ConnId, &Matrix)> {
        self.weights
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.as_ref().map(|w| (ConnId(i), w)))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(|(_, w)| w.as_slice().len()).sum()
    }

    fn check_matches(&self, net: &NetworkDef) -> Result<(), EngineError> {
        if self.weights.len() != net.connections().len() {
            return Err(EngineError::ShapeMismatch(format!(
                "{} weight slots for {} connections",
                self.weights.len(),
                net.connections().len()
            )));
        }
        for c in net.connections() {
            let ok = match (&self.weights[c.id.0], c.weight_kind) {
                (Some(w), WeightKind::Dense) => {
                    w.shape() == (net.layer(c.dst).size, net.layer(c.src).size)
                }
                (None, WeightKind::Identity) => true,
                _ => false,
            };
            if !ok {
                return Err(EngineError::ShapeMismatch(format!(
                    "weights of connection {} do not match the network",
                    c.id.0
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn validate_for(&self, net: &NetworkDef) -> Result<(), EngineError> {
        self.check_matches(net)
    }
}

/// Per-connection `dE/dW` summed over window frames and streams.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    grads: Vec<Option<Matrix>>,
    /// Frames times streams that contributed.
    pub frames: usize,
}

impl GradStore {
    pub fn zeros(net: &NetworkDef) -> Self {
        Self {
            grads: Params::zeros(net).weights,
            frames: 0,
        }
    }

    pub(crate) fn from_parts(grads: Vec<Option<Matrix>>, frames: usize) -> Self {
        Self { grads, frames }
    }

    pub fn get(&self, c: ConnId) -> Option<&Matrix> {
        self.grads.get(c.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, c: ConnId) -> Option<&mut Matrix> {
        self.grads.get_mut(c.0).and_then(Option::as_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ConnId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ConnId(i), g)))
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &GradStore) -> Result<(), EngineError> {
        if self.grads.len() != other.grads.len() {
            return Err(EngineError::ShapeMismatch("gradient stores differ".into()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a, b) {
                (Some(a), Some(b)) if a.shape() == b.shape() => {
                    crate::kernels::add_assign(a.as_mut_slice(), b.as_slice())
                }
                (None, None) => {}
                _ => return Err(EngineError::ShapeMismatch("gradient stores differ".into())),
            }
        }
        self.frames += other.frames;
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.as_slice().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// True if every entry has the same bit pattern as in `other`.
    pub fn bit_identical(&self, other: &GradStore) -> bool {
        self.grads.len() == other.grads.len()
            && self.grads.iter().zip(&other.grads).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => {
                    a.shape() == b.shape()
                        && a.as_slice()
                            .iter()
                            .zip(b.as_slice())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                }
                (None, None) => true,
                _ => false,
            })
    }
}

/// `W <- W - lr * dE/dW`.
pub fn sgd_update(params: &mut Params, grads: &GradStore, lr: f64) -> Result<(), EngineError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(EngineError::NonPositiveLearningRate(lr));
    }
    if params.weights.len() != grads.grads.len() {
        return Err(EngineError::ShapeMismatch("parameters and gradients differ".into()));
    }
    for (w, g) in params.weights.iter_mut().zip(&grads.grads) {
        match (w, g) {
            (Some(w), Some(g)) if w.shape() == g.shape() => {
                for (wv, gv) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *wv -= lr * gv;
                }
            }
            (None, None) => {}
            _ => return Err(EngineError::ShapeMismatch("parameters and gradients differ".into())),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little endian):
//   magic   8 bytes  "RNNGCKPT"
//   version u32
//   hash    u64      first 8 bytes of SHA-256 over the layer/connection table
//   count   u32      number of Dense connections
//   count x { conn u32, rows u32, cols u32, rows*cols f64 (row-major) }

const MAGIC: &[u8; 8] = b"RNNGCKPT";
const VERSION: u32 = 1;

/// Stable fingerprint of the layer and connection tables.
pub fn network_hash(net: &NetworkDef) -> u64 {
    let mut h = Sha256::new();
    for l in net.layers() {
        h.update(
            format!(
                "L|{}|{}|{:?}|{:?}|{:?}\n",
                l.name, l.size, l.aggregation, l.activation, l.role
            )
            .as_bytes(),
        );
    }
    for c in net.connections() {
        h.update(format!("C|{}|{}|{}|{:?}\n", c.src.0, c.dst.0, c.delay, c.weight_kind).as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn save_checkpoint(net: &NetworkDef, params: &Params) -> Result<Vec<u8>, EngineError> {
    params.check_matches(net)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&network_hash(net).to_le_bytes());
    let dense: Vec<(ConnId, &Matrix)> = params.iter().collect();
    out.extend_from_slice(&(dense.len() as u32).to_le_bytes());
    for (id, w) in dense {
        out.extend_from_slice(&(id.0 as u32).to_le_bytes());
        out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
        for v in w.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| EngineError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EngineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, EngineError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(net: &NetworkDef, bytes: &[u8]) -> Result<Params, EngineError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(EngineError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(EngineError::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let expected = network_hash(net);
    if hash != expected {
        return Err(EngineError::Checkpoint(format!(
            "network hash mismatch: checkpoint {hash:016x}, network {expected:016x}"
        )));
    }
    let mut params = Params::zeros(net);
    let count = r.u32()? as usize;
    let dense = net.dense_connections().count();
    if count != dense {
        return Err(EngineError::Checkpoint(format!(
            "{count} weight blocks for {dense} dense connections"
        )));
    }
    for _ in 0..count {
        let id = ConnId(r.u32()? as usize);
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let w = params
            .get_mut(id)
            .ok_or_else(|| EngineError::Checkpoint(format!("connection {} is not dense", id.0)))?;
        if w.shape() != (rows, cols) {
            return Err(EngineError::Checkpoint(format!(
                "connection {}: stored {rows}x{cols}, expected {:?}",
                id.0,
                w.shape()
            )));
        }
        for v in w.as_mut_slice() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(EngineError::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}
