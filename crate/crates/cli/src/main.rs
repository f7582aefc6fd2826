//! `rnn-graph`: validate, inspect, train, gradient-check and benchmark
//! graph-defined recurrent networks.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rnn_graph::bench::{count_flops, run_bench, write_csv, BenchConfig};
use rnn_graph::builders::{build_elman, build_lstm, count_params, ElmanSpec, LstmSpec};
use rnn_graph::condense::{export_dot, schedule_dump};
use rnn_graph::data::{encode_corpus, make_streams, next_batch, read_corpus, TokenMode};
use rnn_graph::engine::{
    save_checkpoint, train_loop, Engine, ExecMode, InputEncoding, Params, TrainConfig,
};
use rnn_graph::gradcheck::{check, random_sequence};
use rnn_graph::netdef::{load_network, save_network, validate, NetworkDef};

#[derive(Parser)]
#[command(name = "rnn-graph", version, about = "Graph-defined recurrent networks trained with truncated BPTT")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network for structural errors.
    Validate(NetArgs),
    /// Print a network definition in the file format.
    Export(NetArgs),
    /// Show the recurrent nodes and execution order.
    Condense {
        #[command(flatten)]
        net: NetArgs,
        /// Graphviz output.
        #[arg(long)]
        dot: bool,
        /// Execution order and frontier levels.
        #[arg(long)]
        schedule: bool,
    },
    /// Train a language model on a text corpus (one sequence per line).
    Train(TrainArgs),
    /// Compare backpropagated gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Measure training throughput. FLOPs count 6*R*C per Dense R x C
    /// connection and frame: forward product, error propagation and
    /// gradient accumulation. Element-wise work is not counted.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Elman,
    Lstm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Parallel,
    Sequential,
}

impl From<Mode> for ExecMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Parallel => ExecMode::FrameParallel,
            Mode::Sequential => ExecMode::FrameSequential,
        }
    }
}

#[derive(Args, Clone)]
struct NetArgs {
    /// Network definition file.
    #[arg(long, conflicts_with = "arch")]
    net: Option<PathBuf>,
    /// Built-in architecture.
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    /// Layer sizes `in,hidden,out` (`in,cells,out` for lstm).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Hidden units or LSTM cells when `--sizes` is not given.
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    no_peepholes: bool,
    #[arg(long)]
    no_forget_gate: bool,
    /// Delay of the cell to output gate peephole.
    #[arg(long, default_value_t = 0)]
    output_peephole_delay: usize,
}

impl NetArgs {
    /// `io` gives input and output sizes when neither `--sizes` nor a file is used.
    fn resolve(&self, io: (usize, usize)) -> Result<NetworkDef> {
        if let Some(path) = &self.net {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return load_network(&text).with_context(|| format!("loading {}", path.display()));
        }
        let Some(arch) = self.arch else {
            bail!("one of --net or --arch is required");
        };
        let (n_in, hidden, n_out) = match &self.sizes {
            Some(s) if s.len() == 3 => (s[0], s[1], s[2]),
            Some(s) => bail!("--sizes takes three values, got {}", s.len()),
            None => (io.0, self.cells.unwrap_or(8), io.1),
        };
        if n_in == 0 || hidden == 0 || n_out == 0 {
            bail!("layer sizes must be positive");
        }
        Ok(match arch {
            Arch::Elman => {
                let mut spec = ElmanSpec::new(n_in, hidden, n_out);
                if self.no_bias {
                    spec = spec.without_bias();
                }
                build_elman(&spec)
            }
            Arch::Lstm => {
                let mut spec = LstmSpec::new(n_in, hidden, n_out).with_output_peephole_delay(self.output_peephole_delay);
                if self.no_bias {
                    spec = spec.without_bias();
                }
                if self.no_peepholes {
                    spec = spec.without_peepholes();
                }
                if self.no_forget_gate {
                    spec = spec.without_forget_gate();
                }
                build_lstm(&spec)
            }
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    net: NetArgs,
    /// UTF-8 text, one sequence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Character tokens instead of whitespace-separated words.
    #[arg(long)]
    char: bool,
    #[arg(long, default_value_t = 38_000)]
    max_vocab: usize,
    #[arg(long, default_value_t = 4)]
    streams: usize,
    /// Frames of error propagation (default 2 * h').
    #[arg(long)]
    h: Option<usize>,
    #[arg(long = "h-prime", default_value_t = 8, conflicts_with = "minibatch")]
    h_prime: usize,
    /// Frames per update over all streams; sets `h' = minibatch / streams`.
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, env = "RNN_GRAPH_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    reset_on_sequence_boundary: bool,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Print every n-th iteration.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Write the trained weights here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value_t = 12)]
    len: usize,
    #[arg(long, default_value_t = 1)]
    streams: usize,
    #[arg(long, default_value_t = rnn_graph::gradcheck::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = rnn_graph::gradcheck::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, env = "RNN_GRAPH_SEED", default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Stream counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    streams: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    minibatch: usize,
    /// Timed seconds per stream count.
    #[arg(long, default_value_t = 2.0)]
    seconds: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, env = "RNN_GRAPH_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Also write the records here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_validate(args: &NetArgs) -> Result<bool> {
    let net = args.resolve((4, 4))?;
    let report = validate(&net);
    if report.is_ok() {
        println!(
            "ok: {} layers, {} connections, {} parameters",
            net.layers().len(),
            net.connections().len(),
            count_params(&net)
        );
        Ok(true)
    } else {
        println!("{report}");
        Ok(false)
    }
}

fn cmd_export(args: &NetArgs) -> Result<()> {
    let net = args.resolve((4, 4))?;
    print!("{}", save_network(&net)?);
    Ok(())
}

fn cmd_condense(args: &NetArgs, dot: bool, schedule: bool) -> Result<()> {
    let net = args.resolve((4, 4))?;
    let engine = Engine::new(net)?;
    let (net, cg) = (engine.net(), engine.condensed());
    if dot {
        print!("{}", export_dot(net, cg));
    }
    if schedule || !dot {
        if !dot {
            println!(
                "{} supernodes ({} recurrent), {} levels",
                cg.nodes().len(),
                cg.recurrent_nodes().count(),
                cg.frontier_levels().len()
            );
        }
        print!("{}", schedule_dump(net, cg));
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
    let mode = if args.char { TokenMode::Char } else { TokenMode::Word };
    let (vocab, sequences) = encode_corpus(&read_corpus(&text, mode), args.max_vocab)?;
    let net = args.net.resolve((vocab.len(), vocab.len()))?;
    let engine = Engine::new(net)?.with_mode(args.mode.into());
    let net = engine.net();
    let inputs: Vec<_> = net.inputs().collect();
    let outputs: Vec<_> = net.outputs().collect();
    let (input, output) = match (&inputs[..], &outputs[..]) {
        ([i], [o]) => (*i, *o),
        _ => bail!("training needs exactly one input and one output layer"),
    };
    if input.size != vocab.len() || output.size != vocab.len() {
        bail!(
            "input and output layers must match the vocabulary size {} (got {} and {})",
            vocab.len(),
            input.size,
            output.size
        );
    }
    let h_prime = match args.minibatch {
        Some(mb) => TrainConfig::from_minibatch(args.streams, mb)?.h_prime,
        None => args.h_prime,
    };
    let config = TrainConfig {
        streams: args.streams,
        h: args.h.unwrap_or(2 * h_prime),
        h_prime,
        lr: args.lr,
        iterations: args.iterations,
        reset_on_sequence_boundary: args.reset_on_sequence_boundary,
    };
    let mut tapes = make_streams(&sequences, args.streams, vocab.eos(), args.seed)?;
    let mut params = Params::init(net, args.seed);
    let mut state = engine.new_state(config.streams, config.h, InputEncoding::OneHot)?;
    println!(
        "vocab {}, {} sequences, {} parameters, N = {}, BPTT({}; {})",
        vocab.len(),
        sequences.len(),
        params.num_scalars(),
        config.streams,
        config.h,
        config.h_prime
    );
    let (in_id, out_id) = (input.id, output.id);
    let log_every = args.log_every.max(1);
    let metrics = train_loop(
        &engine,
        &mut params,
        &mut state,
        &config,
        |frames| Ok(next_batch(&mut tapes, frames).into_train_batch(in_id, out_id)),
        |m| {
            if m.iteration == 1 || m.iteration % log_every == 0 {
                println!(
                    "iter {:>6}  loss {:.4}  {:.0} words/s",
                    m.iteration,
                    m.mean_loss(),
                    m.words_per_sec
                );
            }
        },
    )?;
    if let (Some(first), Some(last)) = (metrics.first(), metrics.last()) {
        println!("initial loss {:.4}, final loss {:.4}", first.mean_loss(), last.mean_loss());
    }
    if let Some(path) = &args.checkpoint {
        fs::write(path, save_checkpoint(net, &params)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let net = args.net.resolve((3, 3))?;
    let engine = Engine::new(net)?;
    let params = Params::init(engine.net(), args.seed);
    let seq = random_sequence(engine.net(), args.len, args.streams, args.seed);
    let report = check(&engine, &params, &seq, args.step, args.threshold)?;
    println!("{report}");
    Ok(report.pass())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let net = args.net.resolve((1000, 1000))?;
    let config = BenchConfig {
        minibatch: args.minibatch,
        duration: Duration::from_secs_f64(args.seconds),
        min_iterations: 2,
        lr: args.lr,
        seed: args.seed,
        mode: args.mode.into(),
    };
    eprintln!(
        "{} parameters, {} FLOPs per frame, {} threads",
        count_params(&net),
        count_flops(&net, 1),
        rayon::current_num_threads()
    );
    let mut records = Vec::new();
    let mut stdout = std::io::stdout();
    for &n in &args.streams {
        let r = run_bench(&net, n, &config)?;
        eprintln!("N = {n}: {:.0} words/s, {:.3} GFLOPS", r.words_per_sec, r.gflops);
        records.push(r);
    }
    write_csv(&mut stdout, &records)?;
    stdout.flush()?;
    if let Some(path) = &args.csv {
        write_csv(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?, &records)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Export(a) => cmd_export(a).map(|_| true),
        Command::Condense { net, dot, schedule } => cmd_condense(net, *dot, *schedule).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
