//! Constructors for the reference architectures, expressed purely as graphs.
//!
//! Biases are Dense connections out of a size-1 layer named `bias`. That layer
//! is multiplicative with no incoming connections, so its state is the empty
//! product and its activation is the constant 1.

use crate::netdef::{
    Activation, Aggregation, LayerId, NetBuilder, NetworkDef, Role, WeightKind,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElmanSpec {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub hidden_activation: Activation,
    pub bias: bool,
}

impl ElmanSpec {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_hidden,
            n_out,
            hidden_activation: Activation::Tanh,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_hidden_activation(mut self, f: Activation) -> Self {
        self.hidden_activation = f;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmSpec {
    pub n_in: usize,
    pub n_cell: usize,
    pub n_out: usize,
    pub peepholes: bool,
    pub forget_gate: bool,
    pub bias: bool,
    /// Delay on the cell → output gate peephole: 0 reads the current cell
    /// state, 1 the previous one.
    pub output_peephole_delay: usize,
}

impl LstmSpec {
    pub fn new(n_in: usize, n_cell: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_cell,
            n_out,
            peepholes: true,
            forget_gate: true,
            bias: true,
            output_peephole_delay: 0,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn without_peepholes(mut self) -> Self {
        self.peepholes = false;
        self
    }

    pub fn without_forget_gate(mut self) -> Self {
        self.forget_gate = false;
        self
    }

    pub fn with_output_peephole_delay(mut self, delay: usize) -> Self {
        self.output_peephole_delay = delay;
        self
    }
}

fn bias_layer(b: &mut NetBuilder) -> LayerId {
    b.layer("bias", 1, Aggregation::Multiplicative, Activation::Identity, Role::Hidden)
}

/// input → hidden (delay 0), hidden → hidden (delay 1), hidden → output (delay 0).
pub fn build_elman(spec: &ElmanSpec) -> NetworkDef {
    use Aggregation::Additive;
    let mut b = NetBuilder::new();
    let input = b.layer("input", spec.n_in, Additive, Activation::Identity, Role::Input);
    let hidden = b.layer("hidden", spec.n_hidden, Additive, spec.hidden_activation, Role::Hidden);
    let output = b.layer("output", spec.n_out, Additive, Activation::Softmax, Role::Output);
    b.dense(input, hidden, 0);
    b.dense(hidden, hidden, 1);
    b.dense(hidden, output, 0);
    if spec.bias {
        let bias = bias_layer(&mut b);
        b.dense(bias, hidden, 0);
        b.dense(bias, output, 0);
    }
    b.build()
}

/// LSTM layer with optional forget gate and peepholes, followed by a softmax
/// output layer. The cell output does not feed back into the gates.
pub fn build_lstm(spec: &LstmSpec) -> NetworkDef {
    use Activation::{Identity, Sigmoid, Softmax, Tanh};
    use Aggregation::{Additive, Multiplicative};
    let n = spec.n_cell;
    let mut b = NetBuilder::new();

    let input = b.layer("input", spec.n_in, Additive, Identity, Role::Input);
    let block_input = b.layer("block_input", n, Additive, Tanh, Role::Hidden);
    let input_gate = b.layer("input_gate", n, Additive, Sigmoid, Role::Hidden);
    let forget_gate = spec
        .forget_gate
        .then(|| b.layer("forget_gate", n, Additive, Sigmoid, Role::Hidden));
    let output_gate = b.layer("output_gate", n, Additive, Sigmoid, Role::Hidden);
    let input_product = b.layer("input_product", n, Multiplicative, Identity, Role::Hidden);
    let forget_product = spec
        .forget_gate
        .then(|| b.layer("forget_product", n, Multiplicative, Identity, Role::Hidden));
    let cell = b.layer("cell", n, Additive, Identity, Role::Hidden);
    let cell_activation = b.layer("cell_activation", n, Additive, Tanh, Role::Hidden);
    let cell_output = b.layer("cell_output", n, Multiplicative, Identity, Role::Hidden);
    let output = b.layer("output", spec.n_out, Additive, Softmax, Role::Output);
    let bias = spec.bias.then(|| bias_layer(&mut b));

    let units: Vec<LayerId> = [Some(block_input), Some(input_gate), forget_gate, Some(output_gate)]
        .into_iter()
        .flatten()
        .collect();
    for &u in &units {
        b.dense(input, u, 0);
    }
    if let Some(bias) = bias {
        for &u in &units {
            b.dense(bias, u, 0);
        }
    }
    if spec.peepholes {
        b.dense(cell, input_gate, 1);
        if let Some(f) = forget_gate {
            b.dense(cell, f, 1);
        }
        b.dense(cell, output_gate, spec.output_peephole_delay);
    }

    b.identity(block_input, input_product, 0);
    b.identity(input_gate, input_product, 0);
    b.identity(input_product, cell, 0);
    match (forget_gate, forget_product) {
        (Some(f), Some(fp)) => {
            b.identity(f, fp, 0);
            b.identity(cell, fp, 1);
            b.identity(fp, cell, 0);
        }
        _ => {
            b.identity(cell, cell, 1);
        }
    }
    b.identity(cell, cell_activation, 0);
    b.identity(cell_activation, cell_output, 0);
    b.identity(output_gate, cell_output, 0);

    b.dense(cell_output, output, 0);
    if let Some(bias) = bias {
        b.dense(bias, output, 0);
    }
    b.build()
}

/// Number of trainable scalars: `rows * cols` summed over Dense connections.
pub fn count_params(net: &NetworkDef) -> usize {
    net.connections()
        .iter()
        .filter(|c| c.weight_kind == WeightKind::Dense)
        .map(|c| net.layer(c.dst).size * net.layer(c.src).size)
        .sum()
}
