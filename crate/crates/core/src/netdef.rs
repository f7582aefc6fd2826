//! Network definitions: layers, connections, validation and the text file format.
//!
//! A network is a directed graph. Each layer holds a state `s` and an
//! activation `y = f(s)`; each connection `m` carries `z_m(t) = W_m y_src(t - d_m)`
//! into its destination, where the destination aggregates its incoming
//! connection outputs by summation or element-wise product.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condense::strongly_connected_components;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub usize);

impl LayerId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl ConnId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

impl fmt::Display for ConnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Additive,
    Multiplicative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Hidden,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Dense,
    /// Fixed identity matrix; never trained.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDef {
    pub id: LayerId,
    pub name: String,
    pub size: usize,
    pub aggregation: Aggregation,
    pub activation: Activation,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectionDef {
    pub id: ConnId,
    pub src: LayerId,
    pub dst: LayerId,
    /// Frames of delay `d_m`; zero for an instantaneous connection.
    pub delay: usize,
    pub weight_kind: WeightKind,
}

/// Immutable network graph with derived adjacency.
#[derive(Clone, Debug)]
pub struct NetworkDef {
    layers: Vec<LayerDef>,
    connections: Vec<ConnectionDef>,
    incoming: Vec<Vec<ConnId>>,
    outgoing: Vec<Vec<ConnId>>,
}

impl PartialEq for NetworkDef {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.connections == other.connections
    }
}

impl Eq for NetworkDef {}

impl NetworkDef {
    /// Builds the graph. Nothing is checked here; see [`validate`].
    pub fn new(layers: Vec<LayerDef>, connections: Vec<ConnectionDef>) -> Self {
        let n = layers.len();
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for c in &connections {
            if c.dst.0 < n {
                incoming[c.dst.0].push(c.id);
            }
            if c.src.0 < n {
                outgoing[c.src.0].push(c.id);
            }
        }
        for list in incoming.iter_mut().chain(outgoing.iter_mut()) {
            list.sort();
        }
        Self {
            layers,
            connections,
            incoming,
            outgoing,
        }
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    pub fn connections(&self) -> &[ConnectionDef] {
        &self.connections
    }

    pub fn layer(&self, id: LayerId) -> &LayerDef {
        &self.layers[id.0]
    }

    pub fn connection(&self, id: ConnId) -> &ConnectionDef {
        &self.connections[id.0]
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&LayerDef> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Anterior connections `A_k`, ascending by id.
    pub fn incoming(&self, id: LayerId) -> &[ConnId] {
        &self.incoming[id.0]
    }

    /// Posterior connections `P_k`, ascending by id.
    pub fn outgoing(&self, id: LayerId) -> &[ConnId] {
        &self.outgoing[id.0]
    }

    pub fn max_delay(&self) -> usize {
        self.connections.iter().map(|c| c.delay).max().unwrap_or(0)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &LayerDef> {
        self.layers.iter().filter(|l| l.role == Role::Input)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &LayerDef> {
        self.layers.iter().filter(|l| l.role == Role::Output)
    }

    pub fn dense_connections(&self) -> impl Iterator<Item = &ConnectionDef> {
        self.connections
            .iter()
            .filter(|c| c.weight_kind == WeightKind::Dense)
    }

    /// Successor lists over all connections (delayed or not); duplicates removed.
    pub fn successors(&self, delay_zero_only: bool) -> Vec<Vec<usize>> {
        let n = self.layers.len();
        let mut succ = vec![Vec::new(); n];
        for c in &self.connections {
            if delay_zero_only && c.delay != 0 {
                continue;
            }
            if c.src.0 < n && c.dst.0 < n {
                succ[c.src.0].push(c.dst.0);
            }
        }
        for s in &mut succ {
            s.sort_unstable();
            s.dedup();
        }
        succ
    }
}

/// Incremental construction helper used by the builders and tests.
#[derive(Debug, Default)]
pub struct NetBuilder {
    layers: Vec<LayerDef>,
    connections: Vec<ConnectionDef>,
}

impl NetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layer(
        &mut self,
        name: impl Into<String>,
        size: usize,
        aggregation: Aggregation,
        activation: Activation,
        role: Role,
    ) -> LayerId {
        let id = LayerId(self.layers.len());
        self.layers.push(LayerDef {
            id,
            name: name.into(),
            size,
            aggregation,
            activation,
            role,
        });
        id
    }

    pub fn connect(&mut self, src: LayerId, dst: LayerId, delay: usize, weight_kind: WeightKind) -> ConnId {
        let id = ConnId(self.connections.len());
        self.connections.push(ConnectionDef {
            id,
            src,
            dst,
            delay,
            weight_kind,
        });
        id
    }

    pub fn dense(&mut self, src: LayerId, dst: LayerId, delay: usize) -> ConnId {
        self.connect(src, dst, delay, WeightKind::Dense)
    }

    pub fn identity(&mut self, src: LayerId, dst: LayerId, delay: usize) -> ConnId {
        self.connect(src, dst, delay, WeightKind::Identity)
    }

    pub fn build(self) -> NetworkDef {
        NetworkDef::new(self.layers, self.connections)
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Subject {
    Network,
    Layer { id: LayerId, name: String },
    Connection { id: ConnId },
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Network => write!(f, "network"),
            Subject::Layer { id, name } => write!(f, "layer {} ({name:?})", id.0),
            Subject::Connection { id } => write!(f, "connection {}", id.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Empty,
    NoOutputLayer,
    IdMismatch { expected: usize, found: usize },
    DuplicateName,
    ZeroSize,
    InputWithAnterior,
    OutputWithoutAnterior,
    MultiplicativeNotIdentity(Activation),
    SoftmaxNotOutput,
    SoftmaxWithPosterior,
    UnknownLayer(LayerId),
    SizeMismatch { src: usize, dst: usize },
    AlgebraicLoop(Vec<LayerId>),
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::Empty => write!(f, "network has no layers"),
            ViolationKind::NoOutputLayer => write!(f, "network has no output layer"),
            ViolationKind::IdMismatch { expected, found } => {
                write!(f, "id {found} does not match position {expected}")
            }
            ViolationKind::DuplicateName => write!(f, "duplicate layer name"),
            ViolationKind::ZeroSize => write!(f, "layer size must be at least 1"),
            ViolationKind::InputWithAnterior => write!(f, "input layer has incoming connections"),
            ViolationKind::OutputWithoutAnterior => {
                write!(f, "output layer has no incoming connections")
            }
            ViolationKind::MultiplicativeNotIdentity(a) => write!(
                f,
                "multiplicative layer must use identity activation, found {a:?}"
            ),
            ViolationKind::SoftmaxNotOutput => write!(f, "softmax is only allowed on output layers"),
            ViolationKind::SoftmaxWithPosterior => {
                write!(f, "softmax layer cannot feed other layers")
            }
            ViolationKind::UnknownLayer(id) => write!(f, "references unknown layer {}", id.0),
            ViolationKind::SizeMismatch { src, dst } => write!(
                f,
                "size mismatch: identity connection from size {src} to size {dst}"
            ),
            ViolationKind::AlgebraicLoop(ids) => {
                let ids: Vec<String> = ids.iter().map(|l| l.0.to_string()).collect();
                write!(f, "algebraic loop through layers [{}]", ids.join(", "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub subject: Subject,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, pred: impl Fn(&ViolationKind) -> bool) -> bool {
        self.violations.iter().any(|v| pred(&v.kind))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate(net: &NetworkDef) -> ValidationReport {
    let mut violations = Vec::new();
    let layer_subject = |l: &LayerDef| Subject::Layer {
        id: l.id,
        name: l.name.clone(),
    };
    let mut push = |subject: Subject, kind: ViolationKind| violations.push(Violation { subject, kind });

    if net.layers.is_empty() {
        push(Subject::Network, ViolationKind::Empty);
        return ValidationReport { violations };
    }
    if net.outputs().next().is_none() {
        push(Subject::Network, ViolationKind::NoOutputLayer);
    }

    let mut seen: HashMap<&str, LayerId> = HashMap::new();
    for (pos, l) in net.layers.iter().enumerate() {
        if l.id.0 != pos {
            push(layer_subject(l), ViolationKind::IdMismatch { expected: pos, found: l.id.0 });
        }
        if seen.insert(l.name.as_str(), l.id).is_some() {
            push(layer_subject(l), ViolationKind::DuplicateName);
        }
        if l.size == 0 {
            push(layer_subject(l), ViolationKind::ZeroSize);
        }
        let anterior = net.incoming.get(pos).map_or(0, Vec::len);
        let posterior = net.outgoing.get(pos).map_or(0, Vec::len);
        if l.role == Role::Input && anterior > 0 {
            push(layer_subject(l), ViolationKind::InputWithAnterior);
        }
        if l.role == Role::Output && anterior == 0 {
            push(layer_subject(l), ViolationKind::OutputWithoutAnterior);
        }
        if l.aggregation == Aggregation::Multiplicative && l.activation != Activation::Identity {
            push(layer_subject(l), ViolationKind::MultiplicativeNotIdentity(l.activation));
        }
        if l.activation == Activation::Softmax {
            if l.role != Role::Output {
                push(layer_subject(l), ViolationKind::SoftmaxNotOutput);
            }
            if posterior > 0 {
                push(layer_subject(l), ViolationKind::SoftmaxWithPosterior);
            }
        }
    }

    let n = net.layers.len();
    let mut endpoints_ok = true;
    for (pos, c) in net.connections.iter().enumerate() {
        let subject = Subject::Connection { id: c.id };
        if c.id.0 != pos {
            push(subject.clone(), ViolationKind::IdMismatch { expected: pos, found: c.id.0 });
        }
        for end in [c.src, c.dst] {
            if end.0 >= n {
                push(subject.clone(), ViolationKind::UnknownLayer(end));
                endpoints_ok = false;
            }
        }
        if c.weight_kind == WeightKind::Identity && c.src.0 < n && c.dst.0 < n {
            let (src, dst) = (net.layers[c.src.0].size, net.layers[c.dst.0].size);
            if src != dst {
                push(subject, ViolationKind::SizeMismatch { src, dst });
            }
        }
    }

    if endpoints_ok {
        let succ = net.successors(true);
        for comp in strongly_connected_components(&succ) {
            let self_loop = comp.len() == 1 && succ[comp[0]].contains(&comp[0]);
            if comp.len() > 1 || self_loop {
                let mut ids: Vec<LayerId> = comp.iter().map(|&v| LayerId(v)).collect();
                ids.sort();
                push(Subject::Network, ViolationKind::AlgebraicLoop(ids));
            }
        }
    }

    ValidationReport { violations }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    /// `rows = size(dst)`, `cols = size(src)`.
    Dense { rows: usize, cols: usize },
    /// Identity of the given size; no storage.
    Identity(usize),
}

impl Shape {
    pub fn params(&self) -> usize {
        match *self {
            Shape::Dense { rows, cols } => rows * cols,
            Shape::Identity(_) => 0,
        }
    }
}

pub fn infer_shapes(net: &NetworkDef) -> Result<BTreeMap<ConnId, Shape>, NetDefError> {
    let report = validate(net);
    if !report.is_ok() {
        return Err(NetDefError::Invalid(report));
    }
    Ok(net
        .connections
        .iter()
        .map(|c| {
            let (rows, cols) = (net.layer(c.dst).size, net.layer(c.src).size);
            let shape = match c.weight_kind {
                WeightKind::Dense => Shape::Dense { rows, cols },
                WeightKind::Identity => Shape::Identity(rows),
            };
            (c.id, shape)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Error)]
pub enum NetDefError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("connection {connection}: unknown layer name {name:?}")]
    UnknownLayerName { connection: usize, name: String },
    #[error("invalid network:\n{0}")]
    Invalid(ValidationReport),
    #[error("could not serialize network: {0}")]
    Serialize(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    #[serde(default)]
    layers: Vec<LayerDoc>,
    #[serde(default)]
    connections: Vec<ConnectionDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    name: String,
    size: usize,
    aggregation: Aggregation,
    activation: Activation,
    role: Role,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConnectionDoc {
    src: String,
    dst: String,
    delay: usize,
    weight: WeightKind,
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

/// Parses and validates a network description.
pub fn load_network(text: &str) -> Result<NetworkDef, NetDefError> {
    let doc: NetworkDoc = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
        NetDefError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;

    let mut ids: HashMap<&str, LayerId> = HashMap::new();
    let layers: Vec<LayerDef> = doc
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            ids.entry(l.name.as_str()).or_insert(LayerId(i));
            LayerDef {
                id: LayerId(i),
                name: l.name.clone(),
                size: l.size,
                aggregation: l.aggregation,
                activation: l.activation,
                role: l.role,
            }
        })
        .collect();

    let mut connections = Vec::with_capacity(doc.connections.len());
    for (i, c) in doc.connections.iter().enumerate() {
        let lookup = |name: &str| {
            ids.get(name).copied().ok_or_else(|| NetDefError::UnknownLayerName {
                connection: i,
                name: name.to_string(),
            })
        };
        connections.push(ConnectionDef {
            id: ConnId(i),
            src: lookup(&c.src)?,
            dst: lookup(&c.dst)?,
            delay: c.delay,
            weight_kind: c.weight,
        });
    }

    let net = NetworkDef::new(layers, connections);
    let report = validate(&net);
    if !report.is_ok() {
        return Err(NetDefError::Invalid(report));
    }
    Ok(net)
}

/// Serializes a network; connections refer to layers by name.
pub fn save_network(net: &NetworkDef) -> Result<String, NetDefError> {
    let doc = NetworkDoc {
        layers: net
            .layers
            .iter()
            .map(|l| LayerDoc {
                name: l.name.clone(),
                size: l.size,
                aggregation: l.aggregation,
                activation: l.activation,
                role: l.role,
            })
            .collect(),
        connections: net
            .connections
            .iter()
            .map(|c| ConnectionDoc {
                src: net.layer(c.src).name.clone(),
                dst: net.layer(c.dst).name.clone(),
                delay: c.delay,
                weight: c.weight_kind,
            })
            .collect(),
    };
    toml::to_string(&doc).map_err(|e| NetDefError::Serialize(e.to_string()))
}
