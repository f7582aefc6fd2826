//! Token corpora turned into N continuous training tapes.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{ChunkInput, LayerInput, Target, TrainBatch};
use crate::kernels::Batch;
use crate::netdef::LayerId;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("at least one stream is required")]
    NoStreams,
    #[error("no sequences to build tapes from")]
    NoSequences,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or of `<unk>` when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk(&self) -> usize {
        self.ids[UNK]
    }

    pub fn eos(&self) -> usize {
        self.ids[EOS]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// The `max_size` most frequent tokens (ties by first appearance), then
/// `<unk>` and `<eos>`.
pub fn build_vocab<I, S>(corpus: I, max_size: usize) -> Result<Vocab, DataError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for (pos, tok) in corpus.into_iter().enumerate() {
        let tok = tok.as_ref();
        if tok == UNK || tok == EOS {
            continue;
        }
        counts.entry(tok.to_string()).or_insert((0, pos)).0 += 1;
    }
    if counts.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize, usize)> =
        counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let tokens: Vec<String> = ranked
        .into_iter()
        .take(max_size)
        .map(|(t, _, _)| t)
        .chain([UNK.to_string(), EOS.to_string()])
        .collect();
    let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(Vocab { ids, tokens })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TokenMode {
    /// Whitespace-separated words.
    #[default]
    Word,
    /// Every character is a token; spaces included.
    Char,
}

/// One sequence per non-empty line.
pub fn read_corpus(text: &str, mode: TokenMode) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| match mode {
            TokenMode::Word => line.split_whitespace().map(str::to_string).collect(),
            TokenMode::Char => line.trim_end_matches('\r').chars().map(String::from).collect(),
        })
        .collect()
}

/// Builds a vocabulary over the corpus and encodes every sequence.
pub fn encode_corpus(
    sequences: &[Vec<String>],
    max_vocab: usize,
) -> Result<(Vocab, Vec<Vec<usize>>), DataError> {
    let vocab = build_vocab(sequences.iter().flatten(), max_vocab)?;
    let encoded = sequences.iter().map(|s| vocab.encode(s)).collect();
    Ok((vocab, encoded))
}

/// One stream: its sequences laid end to end, each followed by `<eos>`.
///
/// Inputs are read at the cursor and the target is the following token.
/// When the tape runs out its sequences are reshuffled into a new epoch.
#[derive(Clone, Debug)]
pub struct StreamTape {
    sequences: Vec<Vec<usize>>,
    eos: usize,
    rng: ChaCha8Rng,
    tape: Vec<usize>,
    starts: Vec<bool>,
    next: (Vec<usize>, Vec<bool>),
    cursor: usize,
    epoch: usize,
}

fn lay_out(sequences: &[Vec<usize>], order: &[usize], eos: usize) -> (Vec<usize>, Vec<bool>) {
    let mut tape = Vec::new();
    let mut starts = Vec::new();
    for &i in order {
        for (j, &tok) in sequences[i].iter().chain(std::iter::once(&eos)).enumerate() {
            tape.push(tok);
            starts.push(j == 0);
        }
    }
    (tape, starts)
}

impl StreamTape {
    fn new(sequences: Vec<Vec<usize>>, eos: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order: Vec<usize> = (0..sequences.len()).collect();
        let (tape, starts) = lay_out(&sequences, &order, eos);
        let next = Self::shuffled(&sequences, eos, &mut rng);
        Self {
            sequences,
            eos,
            rng,
            tape,
            starts,
            next,
            cursor: 0,
            epoch: 0,
        }
    }

    fn shuffled(sequences: &[Vec<usize>], eos: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<bool>) {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(rng);
        lay_out(sequences, &order, eos)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tape
    }

    pub fn len(&self) -> usize {
        self.tape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tape.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn sequence_count(&self) -> usize {
        self.sequences.len()
    }

    /// `(input, target, starts_sequence, starts_epoch)` at the cursor, then advance.
    fn step(&mut self) -> (usize, usize, bool, bool) {
        let p = self.cursor;
        let input = self.tape[p];
        let target = if p + 1 < self.tape.len() {
            self.tape[p + 1]
        } else {
            self.next.0[0]
        };
        let out = (input, target, self.starts[p], p == 0 && self.epoch > 0);
        self.cursor += 1;
        if self.cursor == self.tape.len() {
            let upcoming = Self::shuffled(&self.sequences, self.eos, &mut self.rng);
            (self.tape, self.starts) = std::mem::replace(&mut self.next, upcoming);
            self.cursor = 0;
            self.epoch += 1;
        }
        out
    }
}

/// Shuffles the sequences with `seed` and deals them round-robin to `n`
/// tapes. With fewer sequences than tapes the shuffled list is dealt again
/// until every tape has one.
pub fn make_streams(sequences: &[Vec<usize>], n: usize, eos: usize, seed: u64) -> Result<Vec<StreamTape>, DataError> {
    if n == 0 {
        return Err(DataError::NoStreams);
    }
    if sequences.is_empty() {
        return Err(DataError::NoSequences);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut rng);
    let rounds = n.div_ceil(sequences.len()).max(1);
    let dealt = if sequences.len() >= n {
        sequences.len()
    } else {
        rounds * sequences.len()
    };
    let mut per_tape: Vec<Vec<Vec<usize>>> = vec![Vec::new(); n];
    for k in 0..dealt {
        per_tape[k % n].push(sequences[order[k % order.len()]].clone());
    }
    Ok(per_tape
        .into_iter()
        .enumerate()
        .map(|(i, seqs)| StreamTape::new(seqs, eos, rng.gen::<u64>() ^ i as u64))
        .collect())
}

/// `h'` frames for every stream, rows ordered `t * streams + n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataBatch {
    pub frames: usize,
    pub streams: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// `(stream, offset)` where a sequence begins.
    pub sequence_starts: Vec<(usize, usize)>,
    /// `(stream, offset)` where a tape wrapped into a new epoch.
    pub wraps: Vec<(usize, usize)>,
}

impl DataBatch {
    /// Dense one-hot inputs.
    pub fn one_hot_inputs(&self, width: usize) -> Batch {
        one_hot(&self.inputs, width, self.frames, self.streams)
    }

    /// Engine batch on a continuous tape: no context restarts. Sequence
    /// starts are passed along for `reset_on_sequence_boundary`.
    pub fn into_train_batch(self, input: LayerId, output: LayerId) -> TrainBatch {
        TrainBatch {
            input: ChunkInput {
                frames: self.frames,
                layers: vec![(input, LayerInput::OneHot(self.inputs))],
                resets: Vec::new(),
            },
            targets: vec![(output, Target::Ids(self.targets))],
            sequence_starts: self.sequence_starts,
        }
    }
}

pub fn one_hot(ids: &[usize], width: usize, frames: usize, streams: usize) -> Batch {
    let mut b = Batch::zeros(width, frames, streams);
    for (row, &id) in ids.iter().enumerate() {
        b.as_mut_slice()[row * width + id] = 1.0;
    }
    b
}

/// Index of the largest entry of each row.
pub fn argmax_rows(b: &Batch) -> Vec<usize> {
    b.as_slice()
        .chunks_exact(b.width())
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn next_batch(tapes: &mut [StreamTape], frames: usize) -> DataBatch {
    let streams = tapes.len();
    let mut batch = DataBatch {
        frames,
        streams,
        inputs: vec![0; frames * streams],
        targets: vec![0; frames * streams],
        sequence_starts: Vec::new(),
        wraps: Vec::new(),
    };
    for (n, tape) in tapes.iter_mut().enumerate() {
        for t in 0..frames {
            let (x, y, start, wrap) = tape.step();
            batch.inputs[t * streams + n] = x;
            batch.targets[t * streams + n] = y;
            if start {
                batch.sequence_starts.push((n, t));
            }
            if wrap {
                batch.wraps.push((n, t));
            }
        }
    }
    batch.sequence_starts.sort_unstable();
    batch.wraps.sort_unstable();
    batch
}

/// Random token sequences over `0..vocab` for benchmarks.
pub fn synthetic_sequences(vocab: usize, count: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect())
        .collect()
}
