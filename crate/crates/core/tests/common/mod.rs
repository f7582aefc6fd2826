//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rnn_graph::engine::Params;
use rnn_graph::kernels::Matrix;
use rnn_graph::netdef::{Activation, Aggregation, NetBuilder, NetworkDef, Role};

pub const TINY_CORPUS: &str = include_str!("../data/tiny.txt");

pub fn weight(net: &NetworkDef, params: &Params, src: &str, dst: &str) -> Matrix {
    let s = net.layer_by_name(src).unwrap().id;
    let d = net.layer_by_name(dst).unwrap().id;
    let c = net
        .connections()
        .iter()
        .find(|c| c.src == s && c.dst == d)
        .unwrap_or_else(|| panic!("no connection {src} -> {dst}"));
    params.get(c.id).unwrap().clone()
}

fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sig(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Per-frame values of a textbook LSTM layer with forget gate and full
/// peephole matrices (input/forget gates see `c(t-1)`, the output gate
/// `c(t)`), biases and a softmax output.
pub struct LstmTrace {
    pub cell: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
}

pub fn lstm_oracle(net: &NetworkDef, params: &Params, xs: &[Vec<f64>]) -> LstmTrace {
    let w = |s: &str, d: &str| weight(net, params, s, d);
    let (wxg, wxi, wxf, wxo) = (
        w("input", "block_input"),
        w("input", "input_gate"),
        w("input", "forget_gate"),
        w("input", "output_gate"),
    );
    let (bg, bi, bf, bo) = (
        w("bias", "block_input"),
        w("bias", "input_gate"),
        w("bias", "forget_gate"),
        w("bias", "output_gate"),
    );
    let (pi, pf, po) = (w("cell", "input_gate"), w("cell", "forget_gate"), w("cell", "output_gate"));
    let (why, by) = (w("cell_output", "output"), w("bias", "output"));
    let col = |m: &Matrix| (0..m.rows()).map(|i| m.get(i, 0)).collect::<Vec<f64>>();
    let (bg, bi, bf, bo, by) = (col(&bg), col(&bi), col(&bf), col(&bo), col(&by));

    let n = wxg.rows();
    let mut c = vec![0.0; n];
    let mut trace = LstmTrace {
        cell: Vec::new(),
        hidden: Vec::new(),
        output: Vec::new(),
    };
    for x in xs {
        let g: Vec<f64> = add(&matvec(&wxg, x), &bg).iter().map(|v| v.tanh()).collect();
        let i = sig(&add(&add(&matvec(&wxi, x), &matvec(&pi, &c)), &bi));
        let f = sig(&add(&add(&matvec(&wxf, x), &matvec(&pf, &c)), &bf));
        c = (0..n).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
        let o = sig(&add(&add(&matvec(&wxo, x), &matvec(&po, &c)), &bo));
        let h: Vec<f64> = (0..n).map(|k| o[k] * c[k].tanh()).collect();
        let y = softmax(&add(&matvec(&why, &h), &by));
        trace.cell.push(c.clone());
        trace.hidden.push(h);
        trace.output.push(y);
    }
    trace
}

/// Components by mutual reachability (transitive closure).
pub fn brute_force_scc(succ: &[Vec<usize>]) -> BTreeSet<Vec<usize>> {
    let n = succ.len();
    let mut reach = vec![vec![false; n]; n];
    for (v, s) in succ.iter().enumerate() {
        reach[v][v] = true;
        for &w in s {
            reach[v][w] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    (0..n)
        .map(|v| (0..n).filter(|&w| reach[v][w] && reach[w][v]).collect())
        .collect()
}

/// True if repeatedly removing in-degree-zero vertices empties the graph.
pub fn kahn_acyclic(succ: &[Vec<usize>]) -> bool {
    let n = succ.len();
    let mut indeg = vec![0; n];
    for s in succ {
        for &w in s {
            indeg[w] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = ready.pop() {
        seen += 1;
        for &w in &succ[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(w);
            }
        }
    }
    seen == n
}

pub fn random_digraph(rng: &mut ChaCha8Rng, max_nodes: usize) -> Vec<Vec<usize>> {
    let n = rng.gen_range(1..=max_nodes);
    let p = rng.gen_range(0.05..0.4);
    (0..n)
        .map(|_| (0..n).filter(|_| rng.gen_bool(p)).collect())
        .collect()
}

/// A random valid network: one input, hidden layers of a common width,
/// one output. Instantaneous connections only run forward in layer order;
/// delayed ones may point anywhere except into the input.
pub fn random_network(seed: u64) -> NetworkDef {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = rng.gen_range(1..=3);
    let hidden = rng.gen_range(1..=4);
    let mut b = NetBuilder::new();
    let input = b.layer("in", rng.gen_range(1..=3), Aggregation::Additive, Activation::Identity, Role::Input);
    let mut layers = vec![input];
    for k in 0..hidden {
        let mult = k > 0 && rng.gen_bool(0.3);
        let (agg, act) = if mult {
            (Aggregation::Multiplicative, Activation::Identity)
        } else {
            let act = [Activation::Tanh, Activation::Sigmoid, Activation::Identity][rng.gen_range(0..3)];
            (Aggregation::Additive, act)
        };
        let l = b.layer(&format!("h{k}"), width, agg, act, Role::Hidden);
        if mult {
            let prev = layers[rng.gen_range(1..layers.len())];
            let other = layers[rng.gen_range(1..layers.len())];
            b.identity(prev, l, 0);
            b.identity(other, l, 1);
        } else {
            let src = layers[rng.gen_range(0..layers.len())];
            b.dense(src, l, 0);
        }
        layers.push(l);
    }
    let out_act = if rng.gen_bool(0.5) { Activation::Softmax } else { Activation::Identity };
    let out = b.layer("out", rng.gen_range(2..=3), Aggregation::Additive, out_act, Role::Output);
    b.dense(layers[rng.gen_range(1..layers.len())], out, 0);
    for _ in 0..rng.gen_range(0..4) {
        let src = layers[rng.gen_range(1..layers.len())];
        let dst = layers[rng.gen_range(1..layers.len())];
        b.dense(src, dst, rng.gen_range(1..=2));
    }
    if out_act == Activation::Identity && rng.gen_bool(0.5) {
        b.dense(out, layers[rng.gen_range(1..layers.len())], 1);
    }
    b.build()
}
