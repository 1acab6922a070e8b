//! Deterministic synthetic corpora in four byte-level domains.
//!
//! Each stream is a pure function of `(kind, seed, size)`. Calibration draws
//! come from the first half of a stream and evaluation draws from the second,
//! so the two never share bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opening of *Alice's Adventures in Wonderland* (public domain), the seed
/// text for the order-2 character chain.
const SEED_TEXT: &str = "alice was beginning to get very tired of sitting by her sister on the bank, \
and of having nothing to do: once or twice she had peeped into the book her sister was reading, \
but it had no pictures or conversations in it, and what is the use of a book, thought alice, \
without pictures or conversations? so she was considering in her own mind (as well as she could, \
for the hot day made her feel very sleepy and stupid), whether the pleasure of making a \
daisy-chain would be worth the trouble of getting up and picking the daisies, when suddenly a \
white rabbit with pink eyes ran close by her. there was nothing so very remarkable in that; nor \
did alice think it so very much out of the way to hear the rabbit say to itself, oh dear! oh \
dear! i shall be late! (when she thought it over afterwards, it occurred to her that she ought \
to have wondered at this, but at the time it all seemed quite natural); but when the rabbit \
actually took a watch out of its waistcoat-pocket, and looked at it, and then hurried on, alice \
started to her feet, for it flashed across her mind that she had never before seen a rabbit with \
either a waistcoat-pocket, or a watch to take out of it, and burning with curiosity, she ran \
across the field after it, and fortunately was just in time to see it pop down a large \
rabbit-hole under the hedge. in another moment down went alice after it, never once considering \
how in the world she was to get out again. the rabbit-hole went straight on like a tunnel for \
some way, and then dipped suddenly down, so suddenly that alice had not a moment to think about \
stopping herself before she found herself falling down a very deep well. either the well was \
very deep, or she fell very slowly, for she had plenty of time as she went down to look about \
her and to wonder what was going to happen next. first, she tried to look down and make out \
what she was coming to, but it was too dark to see anything; then she looked at the sides of \
the well, and noticed that they were filled with cupboards and book-shelves; here and there she \
saw maps and pictures hung upon pegs. ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DomainKind {
    #[serde(rename = "markov_text")]
    MarkovText,
    #[serde(rename = "arithmetic")]
    Arithmetic,
    #[serde(rename = "keyvalue")]
    KeyValue,
    #[serde(rename = "uniform")]
    Uniform,
}

impl DomainKind {
    pub const ALL: [DomainKind; 4] =
        [DomainKind::MarkovText, DomainKind::Arithmetic, DomainKind::KeyValue, DomainKind::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::MarkovText => "markov_text",
            DomainKind::Arithmetic => "arithmetic",
            DomainKind::KeyValue => "keyvalue",
            DomainKind::Uniform => "uniform",
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DomainKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub seed: u64,
    pub size: usize,
}

impl DomainSpec {
    pub fn new(kind: DomainKind, seed: u64, size: usize) -> Self {
        Self { kind, seed, size }
    }
}

/// Generates exactly `spec.size` bytes.
pub fn generate(spec: &DomainSpec) -> Result<Vec<u8>> {
    if spec.size == 0 {
        return Err(Error::Empty("corpus size"));
    }
    // Mix the kind into the seed so equal seeds give unrelated streams.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((spec.kind as u64 + 1) << 56));
    let mut out = Vec::with_capacity(spec.size + 64);
    match spec.kind {
        DomainKind::MarkovText => markov_text(&mut rng, spec.size, &mut out),
        DomainKind::Arithmetic => {
            while out.len() < spec.size {
                arithmetic_line(&mut rng, &mut out);
            }
        }
        DomainKind::KeyValue => {
            while out.len() < spec.size {
                keyvalue_section(&mut rng, &mut out);
            }
        }
        DomainKind::Uniform => out.extend((0..spec.size).map(|_| rng.random::<u8>())),
    }
    out.truncate(spec.size);
    Ok(out)
}

fn markov_text(rng: &mut ChaCha8Rng, size: usize, out: &mut Vec<u8>) {
    let seed = SEED_TEXT.as_bytes();
    let mut next: BTreeMap<(u8, u8), Vec<u8>> = BTreeMap::new();
    for w in seed.windows(3) {
        next.entry((w[0], w[1])).or_default().push(w[2]);
    }
    // Close the loop so every context has a successor.
    let n = seed.len();
    next.entry((seed[n - 2], seed[n - 1])).or_default().push(seed[0]);
    next.entry((seed[n - 1], seed[0])).or_default().push(seed[1]);

    let start = rng.random_range(0..n - 1);
    out.extend_from_slice(&seed[start..start + 2]);
    while out.len() < size {
        let ctx = (out[out.len() - 2], out[out.len() - 1]);
        let choices = &next[&ctx];
        out.push(choices[rng.random_range(0..choices.len())]);
    }
}

fn arithmetic_line(rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let line = match rng.random_range(0..3) {
        0 => {
            let (a, b) = (rng.random_range(0..1000u32), rng.random_range(0..1000u32));
            format!("{a} + {b} = {}\n", a + b)
        }
        1 => {
            let (a, b) = (rng.random_range(0..1000u32), rng.random_range(0..1000u32));
            let (a, b) = (a.max(b), a.min(b));
            format!("{a} - {b} = {}\n", a - b)
        }
        _ => {
            let (a, b) = (rng.random_range(0..100u32), rng.random_range(0..100u32));
            format!("{a} * {b} = {}\n", a * b)
        }
    };
    out.extend_from_slice(line.as_bytes());
}

const KV_WORDS: [&str; 16] = [
    "CACHE", "BUFFER", "LIMIT", "TIMEOUT", "PORT", "HOST", "RETRY", "LEVEL", "MODE", "SIZE", "USER",
    "PATH", "FLAG", "RATE", "NODE", "QUEUE",
];

fn keyvalue_section(rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let word = |rng: &mut ChaCha8Rng| KV_WORDS[rng.random_range(0..KV_WORDS.len())];
    let header = format!("[{}_{}]\n", word(rng), word(rng));
    out.extend_from_slice(header.as_bytes());
    for _ in 0..rng.random_range(2..6) {
        let line = format!("{}_{}: 0x{:04X}\n", word(rng), word(rng), rng.random::<u16>());
        out.extend_from_slice(line.as_bytes());
    }
}

fn draws(stream: &[u8], n: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u8>>> {
    if seq_len == 0 || stream.len() < seq_len {
        return Err(Error::InsufficientData(format!(
            "{} bytes for sequences of {seq_len}",
            stream.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let start = rng.random_range(0..=stream.len() - seq_len);
            stream[start..start + seq_len].to_vec()
        })
        .collect())
}

/// Byte range of a stream reserved for calibration (the first half).
pub fn calibration_range(size: usize) -> std::ops::Range<usize> {
    0..size / 2
}

/// Byte range reserved for evaluation (the second half).
pub fn eval_range(size: usize) -> std::ops::Range<usize> {
    size / 2..size
}

/// `n` random windows from the calibration half of the stream.
pub fn sample_calibration(spec: &DomainSpec, n: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u8>>> {
    let stream = generate(spec)?;
    draws(&stream[calibration_range(stream.len())], n, seq_len, seed)
}

/// `n` random windows from the evaluation half of the stream.
pub fn sample_eval(spec: &DomainSpec, n: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u8>>> {
    let stream = generate(spec)?;
    draws(&stream[eval_range(stream.len())], n, seq_len, seed)
}

/// Normalized byte histogram.
pub fn unigram(bytes: &[u8]) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &b in bytes {
        h[b as usize] += 1.0;
    }
    let n = bytes.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Total-variation distance between byte-unigram distributions.
pub fn tv_distance(a: &[u8], b: &[u8]) -> f64 {
    let (ha, hb) = (unigram(a), unigram(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Concatenates `segment`-byte chunks taken round-robin from each stream,
/// starting at `offset` in every stream.
pub fn interleave(streams: &[&[u8]], segment: usize, offset: usize) -> Vec<u8> {
    let mut out = Vec::new();
    let mut pos = offset;
    while streams.iter().all(|s| pos + segment <= s.len()) {
        for s in streams {
            out.extend_from_slice(&s[pos..pos + segment]);
        }
        pos += segment;
    }
    out
}
