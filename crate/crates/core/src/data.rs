//! Byte-level corpus handling: held-out split, chunking and window sampling.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{domain_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("reading corpus {}: {e}", path.display()),
            ))
        })?;
        Ok(Self { bytes })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Training prefix and held-out suffix; the suffix holds `ceil(len·fraction)` bytes.
    pub fn split(&self, heldout_fraction: f64) -> Result<(&[u8], &[u8])> {
        if !(0.0..1.0).contains(&heldout_fraction) {
            return Err(domain_err!(
                "held-out fraction {heldout_fraction} outside [0, 1)"
            ));
        }
        let held = (self.bytes.len() as f64 * heldout_fraction).ceil() as usize;
        let cut = self.bytes.len() - held;
        Ok((&self.bytes[..cut], &self.bytes[cut..]))
    }
}

/// Boundaries `floor(i·len/chunks)`, so every position belongs to exactly one chunk.
pub fn chunk_ranges(len: usize, chunks: usize) -> Vec<Range<usize>> {
    (0..chunks)
        .map(|i| (i * len / chunks)..((i + 1) * len / chunks))
        .collect()
}

/// `batch` random windows of `seq + 1` tokens from `data`, flattened.
pub fn sample_windows<R: Rng + ?Sized>(
    data: &[u8],
    batch: usize,
    seq: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if data.len() < seq + 1 {
        return Err(domain_err!(
            "slice of {} bytes is shorter than a window of {}",
            data.len(),
            seq + 1
        ));
    }
    let mut out = Vec::with_capacity(batch * (seq + 1));
    for _ in 0..batch {
        let start = rng.gen_range(0..=data.len() - (seq + 1));
        out.extend(data[start..start + seq + 1].iter().map(|&b| b as usize));
    }
    Ok(out)
}

/// Up to `max` non-overlapping windows of `seq + 1` tokens from the start of `data`.
pub fn sequential_windows(data: &[u8], seq: usize, max: usize) -> Vec<Vec<usize>> {
    data.chunks_exact(seq + 1)
        .take(max)
        .map(|w| w.iter().map(|&b| b as usize).collect())
        .collect()
}

const DETERMINERS: &[&str] = &["the", "a", "every", "one", "this", "that", "some"];
const NOUNS: &[&str] = &[
    "river", "market", "garden", "teacher", "engine", "window", "forest", "city", "letter",
    "bridge", "painter", "island", "doctor", "harbor", "village", "mountain", "student", "kitchen",
    "library", "farmer", "storm", "lamp", "road", "ship", "table", "child", "winter", "song",
    "horse", "castle",
];
const VERBS: &[&str] = &[
    "watches",
    "carries",
    "finds",
    "builds",
    "remembers",
    "follows",
    "crosses",
    "opens",
    "paints",
    "writes",
    "sells",
    "hears",
    "leaves",
    "keeps",
    "visits",
    "answers",
    "moves",
    "covers",
    "reaches",
    "holds",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "small", "heavy", "green", "distant", "warm", "broken", "narrow",
    "golden", "early", "tired", "careful", "empty", "strange",
];
const ADVERBS: &[&str] = &[
    "slowly", "often", "never", "again", "today", "quickly", "always",
];
const PREPOSITIONS: &[&str] = &[
    "near", "under", "behind", "across", "beside", "through", "over",
];
const CONNECTIVES: &[&str] = &["and", "but", "while", "because", "so"];

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

fn noun_phrase<R: Rng + ?Sized>(rng: &mut R, out: &mut Vec<String>) {
    out.push(pick(rng, DETERMINERS).into());
    if rng.gen_bool(0.5) {
        out.push(pick(rng, ADJECTIVES).into());
    }
    out.push(pick(rng, NOUNS).into());
}

fn clause<R: Rng + ?Sized>(rng: &mut R, out: &mut Vec<String>) {
    noun_phrase(rng, out);
    if rng.gen_bool(0.3) {
        out.push(pick(rng, ADVERBS).into());
    }
    out.push(pick(rng, VERBS).into());
    noun_phrase(rng, out);
    if rng.gen_bool(0.4) {
        out.push(pick(rng, PREPOSITIONS).into());
        noun_phrase(rng, out);
    }
}

/// Deterministic English-like text from a small probabilistic grammar.
pub fn synthetic_corpus(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(len + 256);
    let mut in_paragraph = 0;
    while text.len() < len {
        let mut words = Vec::new();
        clause(&mut rng, &mut words);
        if rng.gen_bool(0.35) {
            let last = words.pop().unwrap();
            words.push(format!("{last},"));
            words.push(pick(&mut rng, CONNECTIVES).into());
            clause(&mut rng, &mut words);
        }
        let mut sentence = words.join(" ");
        let first = sentence[..1].to_uppercase();
        sentence.replace_range(..1, &first);
        sentence.push('.');
        text.push_str(&sentence);
        in_paragraph += 1;
        if in_paragraph >= rng.gen_range(3..7) {
            text.push('\n');
            in_paragraph = 0;
        } else {
            text.push(' ');
        }
    }
    text.truncate(len);
    text.into_bytes()
}
