//! Corpus ingestion, byte tokenization and seeded batch sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"ANTK";
pub const TOKEN_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub vocab_size: usize,
    pub source: String,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Splits off the last `fraction` of the stream, e.g. for evaluation.
    pub fn split(&self, fraction: f64) -> (TokenStream, TokenStream) {
        let cut = ((1.0 - fraction.clamp(0.0, 1.0)) * self.len() as f64) as usize;
        let part = |ids: &[u32], tag: &str| TokenStream {
            ids: ids.to_vec(),
            vocab_size: self.vocab_size,
            source: format!("{}[{tag}]", self.source),
        };
        (part(&self.ids[..cut], "head"), part(&self.ids[cut..], "tail"))
    }
}

/// Identity byte → id map (vocab 256).
pub fn byte_tokenize(text: &[u8]) -> TokenStream {
    TokenStream {
        ids: text.iter().map(|&b| b as u32).collect(),
        vocab_size: 256,
        source: "bytes".into(),
    }
}

/// Inverse of [`byte_tokenize`].
pub fn byte_decode(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| u8::try_from(i).map_err(|_| Error::invalid(format!("id {i} is not a byte"))))
        .collect()
}

/// Reads a UTF-8 text file as bytes.
pub fn load_text_file(path: &Path) -> Result<TokenStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if std::str::from_utf8(&bytes).is_err() {
        return Err(Error::Format(format!("{} is not valid UTF-8", path.display())));
    }
    let mut s = byte_tokenize(&bytes);
    s.source = path.display().to_string();
    Ok(s)
}

pub fn encode_tokens(stream: &TokenStream) -> Result<Vec<u8>> {
    let vocab = u32::try_from(stream.vocab_size).map_err(|_| Error::invalid("vocab_size exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * stream.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    out.extend_from_slice(&vocab.to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for &id in &stream.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tokens(bytes: &[u8], source: &str) -> Result<TokenStream> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "token file header truncated: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != TOKEN_MAGIC {
        return Err(Error::Format("bad token file magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != TOKEN_VERSION {
        return Err(Error::Format(format!("unsupported token file version {version}")));
    }
    let vocab = u32_at(8);
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    let found = payload.len() / 4;
    if (found as u64) < count || payload.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "token payload truncated: expected {count} tokens, found {found}"
        )));
    }
    if found as u64 > count {
        return Err(Error::Format(format!(
            "token payload has {found} tokens, header declares {count}"
        )));
    }
    let ids: Vec<u32> = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some((pos, id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab) {
        return Err(Error::Format(format!(
            "token {id} at position {pos} is not below vocab_size {vocab}"
        )));
    }
    Ok(TokenStream {
        ids,
        vocab_size: vocab as usize,
        source: source.to_string(),
    })
}

pub fn load_token_file(path: &Path) -> Result<TokenStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tokens(&bytes, &path.display().to_string())
}

pub fn save_token_file(path: &Path, stream: &TokenStream) -> Result<()> {
    std::fs::write(path, encode_tokens(stream)?).map_err(|e| Error::io(path, e))
}

/// Inputs and next-token targets, both `batch × seq` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub starts: Vec<usize>,
}

/// Endless iterator of random windows; a pure function of its arguments.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    stream: &'a TokenStream,
    batch: usize,
    seq: usize,
    rng: ChaCha8Rng,
}

pub fn sample_batches(stream: &TokenStream, batch: usize, seq: usize, seed: u64) -> Result<BatchSampler<'_>> {
    if batch == 0 || seq == 0 {
        return Err(Error::invalid("batch size and sequence length must be ≥ 1"));
    }
    if stream.len() <= seq {
        return Err(Error::invalid(format!(
            "stream of {} tokens is too short for windows of {seq}",
            stream.len()
        )));
    }
    Ok(BatchSampler {
        stream,
        batch,
        seq,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl Iterator for BatchSampler<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let (b, s) = (self.batch, self.seq);
        let max_start = self.stream.len() - s - 1;
        let mut out = Batch {
            inputs: Vec::with_capacity(b * s),
            targets: Vec::with_capacity(b * s),
            batch: b,
            seq: s,
            starts: Vec::with_capacity(b),
        };
        for _ in 0..b {
            let st = self.rng.random_range(0..=max_start);
            let w = &self.stream.ids[st..st + s + 1];
            out.inputs.extend(w[..s].iter().map(|&i| i as usize));
            out.targets.extend(w[1..].iter().map(|&i| i as usize));
            out.starts.push(st);
        }
        Some(out)
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "pl", "gr", "sh",
    "ch", "th",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "st", "ng"];

/// Deterministic English-like text of at least `min_bytes` bytes.
///
/// A seeded lexicon of pseudo-words is drawn with Zipf-like frequencies.
/// Each word prefers a small set of successors, giving the stream
/// short-range structure a language model can pick up.
pub fn synthetic_corpus(min_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_words = 2000;
    let lexicon: Vec<String> = (0..n_words)
        .map(|_| {
            let syl = rng.random_range(1..=3);
            (0..syl)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[rng.random_range(0..ONSETS.len())],
                        NUCLEI[rng.random_range(0..NUCLEI.len())],
                        CODAS[rng.random_range(0..CODAS.len())]
                    )
                })
                .collect()
        })
        .collect();
    // Zipf(1) cumulative weights over ranks.
    let mut cdf = Vec::with_capacity(n_words);
    let mut acc = 0.0;
    for r in 0..n_words {
        acc += 1.0 / (r as f64 + 1.0);
        cdf.push(acc);
    }
    let zipf = |rng: &mut ChaCha8Rng| {
        let u = rng.random::<f64>() * acc;
        cdf.partition_point(|&c| c < u).min(n_words - 1)
    };
    let successors: Vec<[usize; 4]> = (0..n_words)
        .map(|_| [zipf(&mut rng), zipf(&mut rng), zipf(&mut rng), zipf(&mut rng)])
        .collect();

    let mut out = Vec::with_capacity(min_bytes + 256);
    let mut prev = zipf(&mut rng);
    let mut in_sentence = 0usize;
    while out.len() < min_bytes {
        let w = if rng.random::<f64>() < 0.7 {
            successors[prev][rng.random_range(0..4)]
        } else {
            zipf(&mut rng)
        };
        let word = &lexicon[w];
        if in_sentence == 0 {
            let mut cs = word.chars();
            if let Some(c) = cs.next() {
                out.extend(c.to_uppercase().to_string().bytes());
                out.extend(cs.as_str().bytes());
            }
        } else {
            out.extend(word.bytes());
        }
        in_sentence += 1;
        prev = w;
        let end = in_sentence >= 4 && rng.random::<f64>() < 0.15;
        if end {
            out.push(if rng.random::<f64>() < 0.8 { b'.' } else { b'?' });
            in_sentence = 0;
            if rng.random::<f64>() < 0.1 {
                out.push(b'\n');
                continue;
            }
        } else if rng.random::<f64>() < 0.05 {
            out.push(b',');
        }
        out.push(b' ');
    }
    out
}
