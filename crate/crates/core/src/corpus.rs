//! Text ingestion: vocabulary, encoding, fixed-length packing and seeded
//! batching, plus a synthetic corpus with learnable token order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const NUM_SPECIALS: usize = 3;
const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<mask>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus yields an empty vocabulary")]
    EmptyVocab,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed vocab file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Lowercased whitespace tokens of `text`.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token ↔ id mapping. Ids 0..3 are PAD, UNK and MASK; the rest follow
/// descending corpus frequency with ties broken by byte order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    id_of: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl Vocab {
    /// Build from an iterator of documents.
    pub fn from_documents<'a, I>(docs: I, max_size: usize, min_freq: u64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size <= NUM_SPECIALS {
            return Err(CorpusError::Config(format!(
                "max vocab size {max_size} leaves no room beside the {NUM_SPECIALS} specials"
            )));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        for doc in docs {
            for tok in tokenize(doc) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        for s in SPECIAL_TOKENS {
            freq.remove(s);
        }
        let mut entries: Vec<(String, u64)> = freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        if entries.is_empty() {
            return Err(CorpusError::EmptyVocab);
        }
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.as_bytes().cmp(b.0.as_bytes())));
        entries.truncate(max_size - NUM_SPECIALS);

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; NUM_SPECIALS];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        Ok(Self::from_parts(tokens, counts))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, counts, id_of }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
            counts: self.counts.clone(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s).map_err(|e| CorpusError::Format(e.to_string()))?;
        if f.tokens.len() != f.counts.len() {
            return Err(CorpusError::Format("tokens and counts differ in length".into()));
        }
        if f.tokens.len() < NUM_SPECIALS || f.tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(CorpusError::Format("missing special tokens".into()));
        }
        Ok(Self::from_parts(f.tokens, f.counts))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Read UTF-8 corpus files (one document per line) and build a vocabulary.
pub fn build_vocab<P: AsRef<Path>>(paths: &[P], max_size: usize, min_freq: u64) -> Result<Vocab> {
    let texts = read_corpus(paths)?;
    Vocab::from_documents(texts.iter().flat_map(|t| t.lines()), max_size, min_freq)
}

pub fn read_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<String>> {
    paths
        .iter()
        .map(|p| fs::read_to_string(p.as_ref()).map_err(io_err(p.as_ref())))
        .collect()
}

pub fn encode(text: &str, vocab: &Vocab) -> Vec<u32> {
    tokenize(text).map(|t| vocab.id(&t).unwrap_or(UNK)).collect()
}

pub fn decode(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Consecutive non-overlapping chunks of exactly `seq_len` ids; the ragged
/// tail is dropped.
pub fn pack_sequences(stream: &[u32], seq_len: usize) -> Vec<Vec<u32>> {
    assert!(seq_len >= 2, "seq_len must be at least 2");
    stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect()
}

/// A `[batch_size × seq_len]` matrix of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub token_ids: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl SequenceBatch {
    pub fn new(rows: Vec<Vec<u32>>) -> Result<Self> {
        let seq_len = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || seq_len == 0 || rows.iter().any(|r| r.len() != seq_len) {
            return Err(CorpusError::Config("batch rows must be non-empty and of equal length".into()));
        }
        Ok(Self {
            batch_size: rows.len(),
            seq_len,
            token_ids: rows.concat(),
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.token_ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.token_ids.chunks(self.seq_len)
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Sequence indices for batch `step`. The pool is visited as a stream of
/// per-epoch shuffles, so every epoch covers each sequence exactly once and
/// the result depends only on `(n, batch_size, seed, step)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if batch_size == 0 || n < batch_size {
        return Err(CorpusError::Config(format!(
            "batch size {batch_size} needs at least that many sequences, pool has {n}"
        )));
    }
    let start = step as usize * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for pos in start..start + batch_size {
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(n, seed, epoch as u64)));
        }
        out.push(cached.as_ref().unwrap().1[pos % n]);
    }
    Ok(out)
}

pub fn next_batch(sequences: &[Vec<u32>], batch_size: usize, seed: u64, step: u64) -> Result<SequenceBatch> {
    let idx = batch_indices(sequences.len(), batch_size, seed, step)?;
    SequenceBatch::new(idx.into_iter().map(|i| sequences[i].clone()).collect())
}

// ── Synthetic corpus ──────────────────────────────────────────────────────

/// Parameters of the synthetic Markov corpus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    /// Total vocabulary size including the three specials.
    pub vocab_size: usize,
    pub num_tokens: usize,
    pub seed: u64,
}

const SUCCESSORS: usize = 2;
const FOLLOW_PROB: f64 = 0.9;
const DOC_LEN: (usize, usize) = (64, 256);

/// Generate documents (one per line) where each word is usually followed by
/// one of two fixed successors, so token order is recoverable from content.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<String> {
    let words = spec.vocab_size.saturating_sub(NUM_SPECIALS);
    if words < SUCCESSORS + 1 {
        return Err(CorpusError::Config(format!(
            "synthetic vocab size {} is too small",
            spec.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let successors: Vec<[usize; SUCCESSORS]> = (0..words)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..words)))
        .collect();
    let mut out = String::new();
    let mut emitted = 0;
    while emitted < spec.num_tokens {
        let len = rng.random_range(DOC_LEN.0..=DOC_LEN.1).min(spec.num_tokens - emitted);
        let mut cur = rng.random_range(0..words);
        for t in 0..len {
            if t > 0 {
                out.push(' ');
            }
            out.push('w');
            out.push_str(&cur.to_string());
            cur = if rng.random_bool(FOLLOW_PROB) {
                successors[cur][rng.random_range(0..SUCCESSORS)]
            } else {
                rng.random_range(0..words)
            };
        }
        out.push('\n');
        emitted += len;
    }
    Ok(out)
}

/// Vocabulary plus packed sequences, ready for batching.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub sequences: Vec<Vec<u32>>,
}

impl Corpus {
    /// Build the vocabulary over `docs`, encode every document in order and
    /// pack the concatenated stream.
    pub fn from_documents(docs: &[&str], max_vocab: usize, min_freq: u64, seq_len: usize) -> Result<Self> {
        let vocab = Vocab::from_documents(docs.iter().copied(), max_vocab, min_freq)?;
        let stream: Vec<u32> = docs.iter().flat_map(|d| encode(d, &vocab)).collect();
        let sequences = pack_sequences(&stream, seq_len);
        Ok(Self { vocab, sequences })
    }

    pub fn from_text(text: &str, max_vocab: usize, min_freq: u64, seq_len: usize) -> Result<Self> {
        let docs: Vec<&str> = text.lines().collect();
        Self::from_documents(&docs, max_vocab, min_freq, seq_len)
    }

    pub fn synthetic(spec: &SyntheticSpec, seq_len: usize) -> Result<Self> {
        let text = generate_synthetic(spec)?;
        Self::from_text(&text, spec.vocab_size, 1, seq_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    // Counting oracle: frequency table sorted by (-count, bytes).
    fn oracle_order(text: &str) -> Vec<(String, u64)> {
        let mut m: BTreeMap<String, u64> = BTreeMap::new();
        for w in text.split_whitespace() {
            *m.entry(w.to_lowercase()).or_default() += 1;
        }
        let mut v: Vec<_> = m.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    #[test]
    fn ids_follow_frequency_then_bytes() {
        let v = Vocab::from_documents(["a a b"], 100, 1).unwrap();
        let want = oracle_order("a a b");
        assert_eq!(want, vec![("a".to_string(), 2), ("b".to_string(), 1)]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<mask>"), Some(MASK));
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
    }

    #[test]
    fn max_size_truncates() {
        let v = Vocab::from_documents(["a a b"], 4, 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn ties_break_by_bytes() {
        let v = Vocab::from_documents(["zeta Alpha beta"], 100, 1).unwrap();
        assert_eq!(v.token(3), Some("alpha"));
        assert_eq!(v.token(4), Some("beta"));
        assert_eq!(v.token(5), Some("zeta"));
    }

    #[test]
    fn min_freq_filters() {
        let v = Vocab::from_documents(["a a b c c c"], 100, 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(3), Some("c"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocab::from_documents(["", "   "], 100, 1),
            Err(CorpusError::EmptyVocab)
        ));
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = build_vocab(&["/nonexistent/corpus.txt"], 10, 1).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::from_documents(["a a b"], 100, 1).unwrap();
        assert_eq!(encode("a b", &v), vec![3, 4]);
        assert_eq!(encode("z", &v), vec![UNK]);
        assert_eq!(decode(&encode("b a a", &v), &v), "b a a");
    }

    #[test]
    fn vocab_json_roundtrip_is_byte_identical() {
        let text = generate_synthetic(&SyntheticSpec {
            vocab_size: 50,
            num_tokens: 2000,
            seed: 3,
        })
        .unwrap();
        let a = Vocab::from_documents(text.lines(), 40, 1).unwrap();
        let b = Vocab::from_documents(text.lines(), 40, 1).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(Vocab::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn packing_drops_the_tail() {
        let s: Vec<u32> = (0..300).collect();
        let p = pack_sequences(&s, 128);
        assert_eq!(p.len(), 2);
        assert_eq!(300 - p.len() * 128, 44);
        assert_eq!(pack_sequences(&s[..128], 128).len(), 1);
        assert_eq!(pack_sequences(&s[..127], 128).len(), 0);
    }

    fn pool(n: usize) -> Vec<Vec<u32>> {
        (0..n as u32).map(|i| vec![i, i + 1]).collect()
    }

    #[test]
    fn batches_are_deterministic() {
        let p = pool(1000);
        assert_eq!(next_batch(&p, 8, 1, 5).unwrap(), next_batch(&p, 8, 1, 5).unwrap());
        assert_ne!(next_batch(&p, 8, 1, 0).unwrap(), next_batch(&p, 8, 2, 0).unwrap());
    }

    #[test]
    fn batch_larger_than_pool_is_an_error() {
        assert!(next_batch(&pool(3), 4, 0, 0).is_err());
    }

    #[test]
    fn epoch_covers_pool_exactly_once() {
        let n = 10;
        let bs = 3;
        // Stream positions 10..20 form epoch 1, spread over steps 3..=6.
        let mut seen = Vec::new();
        for step in 0..10u64 {
            for (j, i) in batch_indices(n, bs, 9, step).unwrap().into_iter().enumerate() {
                let pos = step as usize * bs + j;
                if (n..2 * n).contains(&pos) {
                    seen.push(i);
                }
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_corpus_follows_successors() {
        let spec = SyntheticSpec {
            vocab_size: 40,
            num_tokens: 5000,
            seed: 11,
        };
        let text = generate_synthetic(&spec).unwrap();
        assert_eq!(text.split_whitespace().count(), 5000);
        assert_eq!(text, generate_synthetic(&spec).unwrap());
        // Most bigrams come from a small successor set.
        let mut next: HashMap<&str, HashMap<&str, usize>> = HashMap::new();
        for line in text.lines() {
            let w: Vec<&str> = line.split_whitespace().collect();
            for p in w.windows(2) {
                *next.entry(p[0]).or_default().entry(p[1]).or_default() += 1;
            }
        }
        let (mut top2, mut total) = (0, 0);
        for m in next.values() {
            let mut c: Vec<usize> = m.values().copied().collect();
            c.sort_unstable_by(|a, b| b.cmp(a));
            top2 += c.iter().take(2).sum::<usize>();
            total += c.iter().sum::<usize>();
        }
        assert!(top2 as f64 / total as f64 > 0.85);
    }
}
