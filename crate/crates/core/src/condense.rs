//! Cycle condensation and execution orders.
//!
//! Every strongly connected component that is not a plain singleton becomes a
//! recurrent supernode that has to be stepped frame by frame. What remains is
//! a DAG whose simple nodes can be evaluated for many frames at once.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt::Write;

use crate::netdef::{ConnId, LayerId, NetworkDef};

/// Tarjan's algorithm over successor lists.
///
/// Components come out in reverse topological order of the condensation
/// (sinks first); members of each component are sorted ascending.
pub fn strongly_connected_components(succ: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNVISITED: usize = usize::MAX;
    let n = succ.len();
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut components = Vec::new();
    let mut counter = 0;
    // Explicit DFS frames: (vertex, next successor position).
    let mut frames: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        frames.push((root, 0));

        while let Some(top) = frames.len().checked_sub(1) {
            let (v, pos) = frames[top];
            if pos < succ[v].len() {
                frames[top].1 += 1;
                let w = succ[v][pos];
                if index[w] == UNVISITED {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    frames.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            frames.pop();
            if let Some(&(parent, _)) = frames.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                components.push(comp);
            }
        }
    }
    components
}

/// SCCs of the full graph (delayed and instantaneous connections alike).
pub fn tarjan_scc(net: &NetworkDef) -> Vec<Vec<LayerId>> {
    strongly_connected_components(&net.successors(false))
        .into_iter()
        .map(|c| c.into_iter().map(LayerId).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SuperNode {
    Simple(LayerId),
    Recurrent {
        /// Sorted ascending.
        members: Vec<LayerId>,
        /// Topological order of the members under delay-0 connections.
        order: Vec<LayerId>,
    },
}

impl SuperNode {
    pub fn is_recurrent(&self) -> bool {
        matches!(self, SuperNode::Recurrent { .. })
    }

    pub fn members(&self) -> &[LayerId] {
        match self {
            SuperNode::Simple(l) => std::slice::from_ref(l),
            SuperNode::Recurrent { members, .. } => members,
        }
    }

    /// Members in evaluation order.
    pub fn order(&self) -> &[LayerId] {
        match self {
            SuperNode::Simple(l) => std::slice::from_ref(l),
            SuperNode::Recurrent { order, .. } => order,
        }
    }

    fn key(&self) -> LayerId {
        self.members()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CondensedGraph {
    nodes: Vec<SuperNode>,
    node_of_layer: Vec<usize>,
    edges: Vec<ConnId>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
    frontier_levels: Vec<Vec<usize>>,
}

impl CondensedGraph {
    pub fn nodes(&self) -> &[SuperNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &SuperNode {
        &self.nodes[i]
    }

    pub fn node_of(&self, layer: LayerId) -> usize {
        self.node_of_layer[layer.0]
    }

    /// Connections whose endpoints lie in different supernodes.
    pub fn edges(&self) -> &[ConnId] {
        &self.edges
    }

    pub fn predecessors(&self, node: usize) -> &[usize] {
        &self.preds[node]
    }

    pub fn successors(&self, node: usize) -> &[usize] {
        &self.succs[node]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Antichains of `topo_order` from longest-path layering.
    pub fn frontier_levels(&self) -> &[Vec<usize>] {
        &self.frontier_levels
    }

    pub fn recurrent_nodes(&self) -> impl Iterator<Item = &SuperNode> {
        self.nodes.iter().filter(|n| n.is_recurrent())
    }
}

/// Kahn's algorithm; ready vertices are released smallest key first.
fn ordered_toposort(n: usize, succ: &[Vec<usize>], key: impl Fn(usize) -> usize) -> Vec<usize> {
    let mut indeg = vec![0usize; n];
    for s in succ {
        for &w in s {
            indeg[w] += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<(usize, usize)>> = (0..n)
        .filter(|&v| indeg[v] == 0)
        .map(|v| Reverse((key(v), v)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, v))) = ready.pop() {
        order.push(v);
        for &w in &succ[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(Reverse((key(w), w)));
            }
        }
    }
    order
}

/// Groups cycles into recurrent supernodes and schedules the resulting DAG.
///
/// Expects a validated network (no instantaneous cycles).
pub fn condense(net: &NetworkDef) -> CondensedGraph {
    let n_layers = net.layers().len();
    let mut nodes = Vec::new();
    for comp in tarjan_scc(net) {
        let self_loop = comp.len() == 1
            && net
                .outgoing(comp[0])
                .iter()
                .any(|&c| net.connection(c).dst == comp[0]);
        if comp.len() == 1 && !self_loop {
            nodes.push(SuperNode::Simple(comp[0]));
            continue;
        }
        let local = |l: LayerId| comp.binary_search(&l).ok();
        let mut succ = vec![Vec::new(); comp.len()];
        for (i, &m) in comp.iter().enumerate() {
            for &c in net.outgoing(m) {
                let conn = net.connection(c);
                if conn.delay == 0 {
                    if let Some(j) = local(conn.dst) {
                        succ[i].push(j);
                    }
                }
            }
        }
        let order = ordered_toposort(comp.len(), &succ, |i| comp[i].0)
            .into_iter()
            .map(|i| comp[i])
            .collect();
        nodes.push(SuperNode::Recurrent {
            members: comp,
            order,
        });
    }
    // Tarjan emits sinks first.
    nodes.reverse();

    let mut node_of_layer = vec![usize::MAX; n_layers];
    for (i, node) in nodes.iter().enumerate() {
        for &l in node.members() {
            node_of_layer[l.0] = i;
        }
    }

    let mut edges = Vec::new();
    let mut succ_sets = vec![BTreeSet::new(); nodes.len()];
    let mut pred_sets = vec![BTreeSet::new(); nodes.len()];
    for c in net.connections() {
        let (a, b) = (node_of_layer[c.src.0], node_of_layer[c.dst.0]);
        if a != b {
            edges.push(c.id);
            succ_sets[a].insert(b);
            pred_sets[b].insert(a);
        }
    }
    let succs: Vec<Vec<usize>> = succ_sets.into_iter().map(|s| s.into_iter().collect()).collect();
    let preds: Vec<Vec<usize>> = pred_sets.into_iter().map(|s| s.into_iter().collect()).collect();

    let topo_order = ordered_toposort(nodes.len(), &succs, |v| nodes[v].key().0);

    let mut level = vec![0usize; nodes.len()];
    for &v in &topo_order {
        level[v] = preds[v].iter().map(|&p| level[p] + 1).max().unwrap_or(0);
    }
    let depth = level.iter().copied().max().map_or(0, |d| d + 1);
    let mut frontier_levels = vec![Vec::new(); depth];
    for &v in &topo_order {
        frontier_levels[level[v]].push(v);
    }

    CondensedGraph {
        nodes,
        node_of_layer,
        edges,
        preds,
        succs,
        topo_order,
        frontier_levels,
    }
}

fn node_label(net: &NetworkDef, l: LayerId) -> String {
    let layer = net.layer(l);
    format!("{} ({})", layer.name, layer.size)
}

/// Graphviz rendering: recurrent nodes become clusters, delayed connections
/// are dashed and labeled with their delay, dense connections drawn thick.
pub fn export_dot(net: &NetworkDef, cg: &CondensedGraph) -> String {
    let mut out = String::from("digraph rnn {\n");
    if cg.nodes.is_empty() {
        out.push_str("}\n");
        return out;
    }
    out.push_str("  node [shape=box];\n");
    for (i, node) in cg.nodes.iter().enumerate() {
        match node {
            SuperNode::Simple(l) => {
                let _ = writeln!(out, "  n{} [label=\"{}\"];", l.0, node_label(net, *l));
            }
            SuperNode::Recurrent { members, .. } => {
                let _ = writeln!(out, "  subgraph cluster_{i} {{");
                let _ = writeln!(out, "    label=\"recurrent {i}\";");
                out.push_str("    style=rounded;\n");
                for l in members {
                    let _ = writeln!(out, "    n{} [label=\"{}\"];", l.0, node_label(net, *l));
                }
                out.push_str("  }\n");
            }
        }
    }
    for c in net.connections() {
        let mut attrs = Vec::new();
        if c.weight_kind == crate::netdef::WeightKind::Dense {
            attrs.push("penwidth=2".to_string());
        }
        if c.delay > 0 {
            attrs.push("style=dashed".to_string());
            attrs.push(format!("label=\"{}\"", c.delay));
        }
        let attrs = if attrs.is_empty() {
            String::new()
        } else {
            format!(" [{}]", attrs.join(", "))
        };
        let _ = writeln!(out, "  n{} -> n{}{};", c.src.0, c.dst.0, attrs);
    }
    out.push_str("}\n");
    out
}

/// Plain-text listing of the execution order and frontier levels.
pub fn schedule_dump(net: &NetworkDef, cg: &CondensedGraph) -> String {
    let names = |ls: &[LayerId]| {
        ls.iter()
            .map(|l| net.layer(*l).name.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let describe = |i: usize| match &cg.nodes[i] {
        SuperNode::Simple(l) => format!("simple {}", net.layer(*l).name),
        SuperNode::Recurrent { order, .. } => format!("recurrent [{}]", names(order)),
    };
    let mut out = String::from("topo_order:\n");
    for (pos, &i) in cg.topo_order.iter().enumerate() {
        let _ = writeln!(out, "  {pos:>3}  node {i:<3} {}", describe(i));
    }
    out.push_str("frontier_levels:\n");
    for (lvl, nodes) in cg.frontier_levels.iter().enumerate() {
        let parts: Vec<String> = nodes.iter().map(|&i| describe(i)).collect();
        let _ = writeln!(out, "  {lvl:>3}  {}", parts.join(" | "));
    }
    out
}
