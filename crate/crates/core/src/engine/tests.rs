use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::builders::{build_elman, build_lstm, ElmanSpec, LstmSpec};
use crate::kernels::{sigmoid, Batch};
use crate::netdef::{Aggregation, NetBuilder, NetworkDef};

fn cumsum_net(dense: bool) -> NetworkDef {
    let mut b = NetBuilder::new();
    let x = b.layer("x", 1, Aggregation::Additive, Activation::Identity, Role::Input);
    let acc = b.layer("acc", 1, Aggregation::Additive, Activation::Identity, Role::Output);
    if dense {
        b.dense(x, acc, 0);
        b.dense(acc, acc, 1);
    } else {
        b.identity(x, acc, 0);
        b.identity(acc, acc, 1);
    }
    b.build()
}

fn input_id(net: &NetworkDef) -> LayerId {
    net.inputs().next().unwrap().id
}

fn output_id(net: &NetworkDef) -> LayerId {
    net.outputs().next().unwrap().id
}

fn random_dense(rng: &mut ChaCha8Rng, width: usize, frames: usize, streams: usize) -> Batch {
    let data = (0..width * frames * streams).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Batch::from_vec(width, frames, streams, data).unwrap()
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

/// Single stream, one chunk of `len` frames, window covering all of it.
fn full_gradient(
    engine: &Engine,
    params: &Params,
    x: LayerInput,
    target: Target,
    len: usize,
    streams: usize,
) -> (f64, GradStore) {
    let encoding = match x {
        LayerInput::Dense(_) => InputEncoding::Dense,
        LayerInput::OneHot(_) => InputEncoding::OneHot,
    };
    let net = engine.net();
    let mut state = engine.new_state(streams, len, encoding).unwrap();
    let input = ChunkInput::new(len, vec![(input_id(net), x)]);
    let outputs = engine.forward_chunk(params, &mut state, &input).unwrap();
    let (loss, errors) = engine
        .output_errors(&outputs, &[(output_id(net), target)])
        .unwrap();
    let window = BpttWindow::new(len, len, len).unwrap();
    (loss, engine.backward_window(params, &state, &window, &errors).unwrap())
}

#[test]
fn cumulative_sum() {
    let net = cumsum_net(false);
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::zeros(&net);
    for mode in [ExecMode::FrameParallel, ExecMode::FrameSequential] {
        let engine = engine.clone().with_mode(mode);
        let mut state = engine.new_state(1, 3, InputEncoding::Dense).unwrap();
        let x = Batch::from_vec(1, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let out = engine
            .forward_chunk(&params, &mut state, &ChunkInput::new(3, vec![(input_id(&net), LayerInput::Dense(x))]))
            .unwrap();
        assert_eq!(out[0].y.as_slice(), &[1.0, 3.0, 6.0]);
    }
}

#[test]
fn cumulative_sum_across_chunks_and_resets() {
    let net = cumsum_net(false);
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::zeros(&net);
    let mut state = engine.new_state(2, 2, InputEncoding::Dense).unwrap();
    let chunk = |vals: Vec<f64>, resets: Vec<(usize, usize)>| ChunkInput {
        frames: 2,
        layers: vec![(input_id(&net), LayerInput::Dense(Batch::from_vec(1, 2, 2, vals).unwrap()))],
        resets,
    };
    let a = engine.forward_chunk(&params, &mut state, &chunk(vec![1.0, 10.0, 2.0, 20.0], vec![])).unwrap();
    assert_eq!(a[0].y.as_slice(), &[1.0, 10.0, 3.0, 30.0]);
    let b = engine
        .forward_chunk(&params, &mut state, &chunk(vec![3.0, 30.0, 4.0, 40.0], vec![(1, 1)]))
        .unwrap();
    assert_eq!(b[0].y.as_slice(), &[6.0, 60.0, 10.0, 40.0]);
}

fn elman_oracle(net: &NetworkDef, params: &Params, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = |name_src: &str, name_dst: &str| {
        let s = net.layer_by_name(name_src).unwrap().id;
        let d = net.layer_by_name(name_dst).unwrap().id;
        let c = net
            .connections()
            .iter()
            .find(|c| c.src == s && c.dst == d)
            .unwrap()
            .id;
        params.get(c).unwrap().clone()
    };
    let (wih, whh, who, bh, bo) = (
        w("input", "hidden"),
        w("hidden", "hidden"),
        w("hidden", "output"),
        w("bias", "hidden"),
        w("bias", "output"),
    );
    let nh = whh.rows();
    let mut h = vec![0.0; nh];
    let mut outs = Vec::new();
    for x in xs {
        let mut hn = vec![0.0; nh];
        for i in 0..nh {
            let mut s = bh.get(i, 0);
            for (j, xv) in x.iter().enumerate() {
                s += wih.get(i, j) * xv;
            }
            for (j, hv) in h.iter().enumerate() {
                s += whh.get(i, j) * hv;
            }
            hn[i] = s.tanh();
        }
        h = hn;
        let logits: Vec<f64> = (0..who.rows())
            .map(|k| bo.get(k, 0) + (0..nh).map(|i| who.get(k, i) * h[i]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        outs.push(e.iter().map(|v| v / z).collect());
    }
    outs
}

#[test]
fn elman_matches_direct_implementation() {
    let net = build_elman(&ElmanSpec::new(2, 3, 2));
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_dense(&mut rng, 2, 9, 1);
    let xs: Vec<Vec<f64>> = (0..9).map(|t| x.column(t, 0).to_vec()).collect();
    let expected = elman_oracle(&net, &params, &xs);
    let mut state = engine.new_state(1, 9, InputEncoding::Dense).unwrap();
    // Two chunks to exercise the history window.
    let (first, second) = x.as_slice().split_at(8);
    let mut got = Vec::new();
    for (frames, vals) in [(4, first), (5, second)] {
        let b = Batch::from_vec(2, frames, 1, vals.to_vec()).unwrap();
        let out = engine
            .forward_chunk(&params, &mut state, &ChunkInput::new(frames, vec![(input_id(&net), LayerInput::Dense(b))]))
            .unwrap();
        for t in 0..frames {
            got.push(out[0].y.column(t, 0).to_vec());
        }
    }
    for (g, e) in got.iter().zip(&expected) {
        for (a, b) in g.iter().zip(e) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

fn run_forward(engine: &Engine, params: &Params, x: &Batch) -> Vec<LayerOutput> {
    let mut state = engine.new_state(x.streams(), x.frames(), InputEncoding::Dense).unwrap();
    let input = ChunkInput::new(x.frames(), vec![(input_id(engine.net()), LayerInput::Dense(x.clone()))]);
    engine.forward_chunk(params, &mut state, &input).unwrap()
}

#[test]
fn frame_parallel_equals_frame_sequential_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for net in [
        build_elman(&ElmanSpec::new(3, 5, 4)),
        build_lstm(&LstmSpec::new(3, 4, 3)),
        build_lstm(&LstmSpec::new(2, 3, 2).without_forget_gate()),
        build_lstm(&LstmSpec::new(2, 3, 2).with_output_peephole_delay(1)),
    ] {
        let params = Params::init(&net, 8);
        let x = random_dense(&mut rng, net.layer(input_id(&net)).size, 7, 3);
        let ids = random_ids(&mut rng, 21, net.layer(output_id(&net)).size);
        let par = Engine::new(net.clone()).unwrap();
        let seq = par.clone().with_mode(ExecMode::FrameSequential);
        let a = run_forward(&par, &params, &x);
        let b = run_forward(&seq, &params, &x);
        assert_eq!(a, b);
        let ga = full_gradient(&par, &params, LayerInput::Dense(x.clone()), Target::Ids(ids.clone()), 7, 3);
        let gb = full_gradient(&seq, &params, LayerInput::Dense(x.clone()), Target::Ids(ids), 7, 3);
        assert!(ga.1.bit_identical(&gb.1));
        assert_eq!(ga.0.to_bits(), gb.0.to_bits());
    }
}

fn stream_slice(x: &Batch, n: usize) -> Batch {
    let mut data = Vec::new();
    for t in 0..x.frames() {
        data.extend_from_slice(x.column(t, n));
    }
    Batch::from_vec(x.width(), x.frames(), 1, data).unwrap()
}

#[test]
fn multi_stream_gradient_is_sum_of_single_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = build_lstm(&LstmSpec::new(3, 4, 5));
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 2);
    let (len, streams) = (6, 4);
    let x = random_dense(&mut rng, 3, len, streams);
    let ids = random_ids(&mut rng, len * streams, 5);
    let (_, multi) = full_gradient(&engine, &params, LayerInput::Dense(x.clone()), Target::Ids(ids.clone()), len, streams);
    let mut sum = GradStore::zeros(&net);
    for n in 0..streams {
        let xn = stream_slice(&x, n);
        let idn: Vec<usize> = (0..len).map(|t| ids[t * streams + n]).collect();
        let (_, g) = full_gradient(&engine, &params, LayerInput::Dense(xn), Target::Ids(idn), len, 1);
        sum.accumulate(&g).unwrap();
    }
    assert!(multi.bit_identical(&sum));
    assert_eq!(multi.frames, sum.frames);
}

#[test]
fn one_hot_inputs_match_dense_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = build_elman(&ElmanSpec::new(6, 4, 6));
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 1);
    let (len, streams) = (5, 2);
    let ids = random_ids(&mut rng, len * streams, 6);
    let targets = random_ids(&mut rng, len * streams, 6);
    let mut dense = Batch::zeros(6, len, streams);
    for (row, &id) in ids.iter().enumerate() {
        dense.as_mut_slice()[row * 6 + id] = 1.0;
    }
    let a = full_gradient(&engine, &params, LayerInput::OneHot(ids), Target::Ids(targets.clone()), len, streams);
    let b = full_gradient(&engine, &params, LayerInput::Dense(dense), Target::Ids(targets), len, streams);
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a.1.bit_identical(&b.1));
}

#[test]
fn zero_error_gives_zero_gradient() {
    let net = build_lstm(&LstmSpec::new(2, 3, 2));
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_dense(&mut rng, 2, 4, 2);
    let mut state = engine.new_state(2, 4, InputEncoding::Dense).unwrap();
    engine
        .forward_chunk(&params, &mut state, &ChunkInput::new(4, vec![(input_id(&net), LayerInput::Dense(x))]))
        .unwrap();
    let zero = Batch::zeros(2, 4, 2);
    let g = engine
        .backward_window(&params, &state, &BpttWindow::new(4, 4, 4).unwrap(), &[(output_id(&net), zero)])
        .unwrap();
    assert_eq!(g.max_abs(), 0.0);
    assert_eq!(g.frames, 8);
}

#[test]
fn output_error_is_target_minus_output() {
    let y = Batch::from_vec(3, 1, 1, vec![0.2, 0.5, 0.3]).unwrap();
    let e = inject_output_error(Criterion::CrossEntropySoftmax, Activation::Softmax, &y, &Target::Ids(vec![1]))
        .unwrap();
    assert_eq!(e.as_slice(), &[-0.2, 0.5, -0.3]);
    let same = inject_output_error(Criterion::MseIdentity, Activation::Identity, &y, &Target::Dense(y.clone()))
        .unwrap();
    assert!(same.as_slice().iter().all(|&v| v == 0.0));
    assert!(matches!(
        inject_output_error(Criterion::MseIdentity, Activation::Softmax, &y, &Target::Ids(vec![0])),
        Err(EngineError::CriterionMismatch { .. })
    ));
}

#[test]
fn mse_error_is_negative_loss_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = random_dense(&mut rng, 4, 2, 1);
    let d = random_dense(&mut rng, 4, 2, 1);
    let target = Target::Dense(d);
    let e = inject_output_error(Criterion::MseIdentity, Activation::Identity, &y, &target).unwrap();
    let h = 1e-6;
    for i in 0..8 {
        let mut plus = y.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = y.clone();
        minus.as_mut_slice()[i] -= h;
        let lp = loss(Criterion::MseIdentity, &plus, &plus, &target).unwrap();
        let lm = loss(Criterion::MseIdentity, &minus, &minus, &target).unwrap();
        let numeric = -(lp - lm) / (2.0 * h);
        assert!((numeric - e.as_slice()[i]).abs() < 1e-8);
    }
}

#[test]
fn softmax_cross_entropy_uses_log_softmax() {
    let s = Batch::from_vec(2, 1, 1, vec![0.0, 0.0]).unwrap();
    let y = Batch::from_vec(2, 1, 1, vec![0.5, 0.5]).unwrap();
    let l = loss(Criterion::CrossEntropySoftmax, &s, &y, &Target::Ids(vec![0])).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn truncated_window_ignores_scrubbed_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let net = build_lstm(&LstmSpec::new(2, 3, 3));
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 4);
    let (h, hp) = (4, 2);
    let mut state = engine.new_state(2, h, InputEncoding::Dense).unwrap();
    let mut last = None;
    for _ in 0..5 {
        let x = random_dense(&mut rng, 2, hp, 2);
        let out = engine
            .forward_chunk(&params, &mut state, &ChunkInput::new(hp, vec![(input_id(&net), LayerInput::Dense(x))]))
            .unwrap();
        last = Some(out);
    }
    let ids = random_ids(&mut rng, hp * 2, 3);
    let (_, errors) = engine
        .output_errors(&last.unwrap(), &[(output_id(&net), Target::Ids(ids))])
        .unwrap();
    let window = BpttWindow::new(h, hp, state.cursor()).unwrap();
    let g = engine.backward_window(&params, &state, &window, &errors).unwrap();
    let mut scrubbed = state.clone();
    scrubbed.scrub_before_truncation(window.truncation_frame(), net.max_delay());
    let g2 = engine.backward_window(&params, &scrubbed, &window, &errors).unwrap();
    assert!(g.bit_identical(&g2));
    assert!(g.max_abs() > 0.0);
}

#[test]
fn window_needs_history() {
    let net = build_elman(&ElmanSpec::new(1, 2, 2));
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 4);
    let mut state = engine.new_state(1, 2, InputEncoding::Dense).unwrap();
    for _ in 0..3 {
        let x = Batch::filled(1, 2, 1, 0.5);
        engine
            .forward_chunk(&params, &mut state, &ChunkInput::new(2, vec![(input_id(&net), LayerInput::Dense(x))]))
            .unwrap();
    }
    let err = Batch::zeros(2, 2, 1);
    let too_long = BpttWindow::new(4, 2, 6).unwrap();
    assert!(matches!(
        engine.backward_window(&params, &state, &too_long, &[(output_id(&net), err.clone())]),
        Err(EngineError::MissingHistory { .. })
    ));
    let future = BpttWindow::new(2, 2, 7).unwrap();
    assert!(matches!(
        engine.backward_window(&params, &state, &future, &[(output_id(&net), err)]),
        Err(EngineError::WindowInconsistent(_))
    ));
}

#[test]
fn chunk_shape_is_checked() {
    let net = build_elman(&ElmanSpec::new(2, 2, 2));
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 4);
    let mut state = engine.new_state(1, 2, InputEncoding::Dense).unwrap();
    let wrong = Batch::zeros(3, 2, 1);
    assert!(matches!(
        engine.forward_chunk(&params, &mut state, &ChunkInput::new(2, vec![(input_id(&net), LayerInput::Dense(wrong))])),
        Err(EngineError::ShapeMismatch(_))
    ));
    let too_many = Batch::zeros(2, 3, 1);
    assert!(engine
        .forward_chunk(&params, &mut state, &ChunkInput::new(3, vec![(input_id(&net), LayerInput::Dense(too_many))]))
        .is_err());
    assert_eq!(state.cursor(), 0);
}

#[test]
fn invalid_network_is_rejected() {
    let mut b = NetBuilder::new();
    let x = b.layer("x", 1, Aggregation::Additive, Activation::Identity, Role::Input);
    let y = b.layer("y", 1, Aggregation::Additive, Activation::Identity, Role::Output);
    b.dense(x, y, 0);
    b.dense(y, y, 0);
    assert!(matches!(Engine::new(b.build()), Err(EngineError::InvalidNetwork(_))));
}

#[test]
fn minibatch_config() {
    let c = TrainConfig::from_minibatch(64, 1024).unwrap();
    assert_eq!((c.h_prime, c.h, c.minibatch()), (16, 32, 1024));
    let d = TrainConfig::from_minibatch(1024, 1024).unwrap();
    assert_eq!((d.h_prime, d.h), (1, 2));
    assert!(TrainConfig::from_minibatch(3, 1024).is_err());
}

#[test]
fn training_reduces_cumulative_sum_error() {
    let net = cumsum_net(true);
    let engine = Engine::new(net.clone()).unwrap();
    let mut params = Params::init(&net, 3);
    let config = TrainConfig {
        streams: 2,
        h: 6,
        h_prime: 6,
        lr: 0.02,
        iterations: 100,
        reset_on_sequence_boundary: true,
    };
    let mut state = engine.new_state(2, 6, InputEncoding::Dense).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x_id, y_id) = (input_id(&net), output_id(&net));
    let metrics = train_loop(
        &engine,
        &mut params,
        &mut state,
        &config,
        |frames| {
            let x = random_dense(&mut rng, 1, frames, 2);
            let mut d = Batch::zeros(1, frames, 2);
            for n in 0..2 {
                let mut acc = 0.0;
                for t in 0..frames {
                    acc += x.column(t, n)[0];
                    d.column_mut(t, n)[0] = acc;
                }
            }
            Ok(TrainBatch {
                input: ChunkInput::new(frames, vec![(x_id, LayerInput::Dense(x))]),
                targets: vec![(y_id, Target::Dense(d))],
                sequence_starts: vec![(0, 0), (1, 0)],
            })
        },
        |_| {},
    )
    .unwrap();
    let first = metrics[0].mean_loss();
    let tail: f64 = metrics[90..].iter().map(|m| m.mean_loss()).sum::<f64>() / 10.0;
    assert!(tail < 0.1 * first, "{first} -> {tail}");
    let w = params.get(crate::netdef::ConnId(1)).unwrap().get(0, 0);
    assert!((w - 1.0).abs() < 0.1, "recurrent weight {w}");
}

#[test]
fn merged_states_continue_like_a_batched_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = build_elman(&ElmanSpec::new(2, 3, 2));
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 6);
    let xs: Vec<Batch> = (0..2).map(|_| random_dense(&mut rng, 2, 3, 1)).collect();
    let mut singles = Vec::new();
    for x in &xs {
        let mut st = engine.new_state(1, 4, InputEncoding::Dense).unwrap();
        engine
            .forward_chunk(&params, &mut st, &ChunkInput::new(3, vec![(input_id(&net), LayerInput::Dense(x.clone()))]))
            .unwrap();
        singles.push(st);
    }
    let mut merged = StreamState::merge(singles).unwrap();
    let mut batched = engine.new_state(2, 4, InputEncoding::Dense).unwrap();
    let mut both = Vec::new();
    for t in 0..3 {
        both.extend_from_slice(xs[0].column(t, 0));
        both.extend_from_slice(xs[1].column(t, 0));
    }
    let both = Batch::from_vec(2, 3, 2, both).unwrap();
    engine
        .forward_chunk(&params, &mut batched, &ChunkInput::new(3, vec![(input_id(&net), LayerInput::Dense(both))]))
        .unwrap();
    let next = random_dense(&mut rng, 2, 1, 2);
    let input = ChunkInput::new(1, vec![(input_id(&net), LayerInput::Dense(next))]);
    let a = engine.forward_chunk(&params, &mut merged, &input).unwrap();
    let b = engine.forward_chunk(&params, &mut batched, &input).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lstm_without_peepholes_or_forget_gate_accumulates_cell() {
    // c(t) = c(t-1) + i(t) g(t)
    let net = build_lstm(&LstmSpec::new(1, 1, 1).without_forget_gate().without_peepholes().without_bias());
    let engine = Engine::new(net.clone()).unwrap();
    let params = Params::init(&net, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_dense(&mut rng, 1, 6, 1);
    let mut state = engine.new_state(1, 6, InputEncoding::Dense).unwrap();
    engine
        .forward_chunk(&params, &mut state, &ChunkInput::new(6, vec![(input_id(&net), LayerInput::Dense(x.clone()))]))
        .unwrap();
    let weight = |dst: &str| {
        let d = net.layer_by_name(dst).unwrap().id;
        let c = net.connections().iter().find(|c| c.dst == d && c.src == input_id(&net)).unwrap();
        params.get(c.id).unwrap().get(0, 0)
    };
    let (wg, wi) = (weight("block_input"), weight("input_gate"));
    let cell = state.activations(net.layer_by_name("cell").unwrap().id, 1, 6).unwrap();
    let mut c = 0.0;
    for t in 0..6 {
        let xv = x.column(t, 0)[0];
        c += sigmoid(wi * xv) * (wg * xv).tanh();
        assert!((cell.column(t, 0)[0] - c).abs() < 1e-15);
    }
}
