//! Token inventories, parallel corpora and the synthetic mirror-substitution task.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size {0} too small (need at least 5)")]
    VocabTooSmall(usize),
    #[error("id out of range: {id} (vocabulary size {size})")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("line count mismatch: {src} source lines vs {tgt} target lines")]
    LengthMismatch { src: usize, tgt: usize },
    #[error("invalid synthetic task: {0}")]
    InvalidTask(&'static str),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense token inventory. Ids 0..4 are always PAD, BOS, EOS, UNK.
#[derive(Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab")
            .field("len", &self.tokens.len())
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}

impl Vocab {
    /// Builds a vocabulary from ordinary tokens; the four specials are prepended.
    /// Duplicates and tokens spelled like a special are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            id_of: HashMap::new(),
        };
        for name in SPECIAL_NAMES {
            v.push(name.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !v.id_of.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, token: String) {
        let id = self.tokens.len() as TokenId;
        self.id_of.insert(token.clone(), id);
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words
            .iter()
            .map(|w| self.id(w.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>, CorpusError> {
        ids.iter()
            .map(|&id| {
                self.tokens
                    .get(id as usize)
                    .cloned()
                    .ok_or(CorpusError::IdOutOfRange {
                        id,
                        size: self.len(),
                    })
            })
            .collect()
    }

    /// Short stable digest of the token list; checkpoints carry it to detect
    /// vocabulary mismatches.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Counts token frequencies and keeps the `max_size - 4` most frequent tokens
/// (ties broken lexicographically) after the specials.
pub fn build_vocab<S: AsRef<str>>(
    sentences: &[Vec<S>],
    max_size: usize,
) -> Result<Vocab, CorpusError> {
    if max_size < NUM_SPECIALS + 1 {
        return Err(CorpusError::VocabTooSmall(max_size));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for w in s {
            let w = w.as_ref();
            if SPECIAL_NAMES.contains(&w) {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Ok(Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w)))
}

/// A source sentence and its EOS-terminated reference translation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

impl SentencePair {
    /// Reference without its trailing EOS.
    pub fn reference_body(&self) -> &[TokenId] {
        match self.reference.split_last() {
            Some((&EOS, body)) => body,
            _ => &self.reference,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reorder {
    Reverse,
    Identity,
}

impl std::str::FromStr for Reorder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reverse" => Ok(Reorder::Reverse),
            "identity" => Ok(Reorder::Identity),
            other => Err(format!(
                "unknown reorder '{other}' (expected reverse|identity)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub src_vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub mapping_seed: u64,
    pub reorder: Reorder,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            src_vocab_size: 40,
            min_len: 5,
            max_len: 10,
            mapping_seed: 0,
            reorder: Reorder::Reverse,
        }
    }
}

/// The synthetic task: a vocabulary of `src_vocab_size` words plus specials and
/// a seeded bijection over those words. Sources and targets share the vocabulary.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    vocab: Vocab,
    // mapping[id] for every id; specials map to themselves.
    mapping: Vec<TokenId>,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self, CorpusError> {
        if spec.src_vocab_size == 0 {
            return Err(CorpusError::InvalidTask("src_vocab_size must be positive"));
        }
        if spec.min_len < 1 || spec.min_len > spec.max_len {
            return Err(CorpusError::InvalidTask("need 1 <= min_len <= max_len"));
        }
        let vocab = Vocab::from_tokens((0..spec.src_vocab_size).map(|i| format!("w{i}")));
        let mut words: Vec<TokenId> = (NUM_SPECIALS..vocab.len()).map(|i| i as TokenId).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.mapping_seed);
        words.shuffle(&mut rng);
        let mut mapping: Vec<TokenId> = (0..NUM_SPECIALS as TokenId).collect();
        mapping.extend(words);
        Ok(Self {
            spec,
            vocab,
            mapping,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// The word bijection m, indexed by token id (specials are fixed points).
    pub fn mapping(&self) -> &[TokenId] {
        &self.mapping
    }

    pub fn map(&self, id: TokenId) -> TokenId {
        self.mapping[id as usize]
    }

    pub fn translate(&self, src: &[TokenId]) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = match self.spec.reorder {
            Reorder::Reverse => src.iter().rev().map(|&t| self.map(t)).collect(),
            Reorder::Identity => src.iter().map(|&t| self.map(t)).collect(),
        };
        out.push(EOS);
        out
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<SentencePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = NUM_SPECIALS as TokenId;
        let hi = self.vocab.len() as TokenId;
        (0..n)
            .map(|_| {
                let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
                let src: Vec<TokenId> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
                let reference = self.translate(&src);
                SentencePair { src, reference }
            })
            .collect()
    }
}

/// Deterministic synthetic dataset for `(spec, n, seed)`.
pub fn gen_synthetic(
    spec: SyntheticTaskSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<SentencePair>, CorpusError> {
    Ok(SyntheticTask::new(spec)?.generate(n, seed))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))
}

/// Reads a whitespace-tokenized parallel corpus; targets get EOS appended.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    vocab: &Vocab,
) -> Result<Vec<SentencePair>, CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::LengthMismatch {
            src: src.len(),
            tgt: tgt.len(),
        });
    }
    Ok(src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| {
            let s: Vec<&str> = s.split_whitespace().collect();
            let t: Vec<&str> = t.split_whitespace().collect();
            let mut reference = vocab.encode(&t);
            reference.push(EOS);
            SentencePair {
                src: vocab.encode(&s),
                reference,
            }
        })
        .collect())
}

fn join_ids(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes pairs as `src-ids<TAB>ref-ids` lines.
pub fn write_dataset(path: &Path, pairs: &[SentencePair]) -> Result<(), CorpusError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for p in pairs {
        writeln!(w, "{}\t{}", join_ids(&p.src), join_ids(&p.reference)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SentencePair>, CorpusError> {
    let parse_ids = |s: &str, line: usize| -> Result<Vec<TokenId>, CorpusError> {
        s.split_whitespace()
            .map(|t| {
                t.parse::<TokenId>().map_err(|e| CorpusError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("bad id '{t}': {e}"),
                })
            })
            .collect()
    };
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (src, reference) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected src<TAB>ref".into(),
        })?;
        let reference = parse_ids(reference, i + 1)?;
        if reference.last() != Some(&EOS) {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "reference must end in EOS".into(),
            });
        }
        out.push(SentencePair {
            src: parse_ids(src, i + 1)?,
            reference,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn build_vocab_orders_by_frequency() {
        let v = build_vocab(&[toks(&["a", "b"]), toks(&["a"])], 6).unwrap();
        assert_eq!(
            v.tokens(),
            &toks(&["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"])
        );
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
        }
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(
            build_vocab(&empty, 10),
            Err(CorpusError::EmptyCorpus)
        ));
        assert!(matches!(
            build_vocab(&[toks(&["a"])], 4),
            Err(CorpusError::VocabTooSmall(4))
        ));
    }

    #[test]
    fn build_vocab_truncates_to_most_frequent() {
        // counts: the=5, cat=3, dog=3, sat=2, a=1, mat=1, on=1, ran=1, big=1, red=1
        let corpus = vec![
            toks(&["the", "cat", "sat", "on", "the", "mat"]),
            toks(&["the", "dog", "ran"]),
            toks(&["a", "big", "dog"]),
            toks(&["the", "red", "cat"]),
            toks(&["the", "cat", "dog", "sat"]),
        ];
        let v = build_vocab(&corpus, 8).unwrap();
        assert_eq!(&v.tokens()[4..], &toks(&["the", "cat", "dog", "sat"]));
        assert_eq!(v.encode(&["mat", "cat", "red"]), vec![UNK, 5, UNK]);
    }

    #[test]
    fn encode_decode() {
        let v = build_vocab(&[toks(&["a", "b"]), toks(&["a"])], 6).unwrap();
        assert_eq!(v.encode(&["a", "zz"]), vec![4, 3]);
        assert!(v.encode::<&str>(&[]).is_empty());
        assert_eq!(v.decode(&[4, 2]).unwrap(), toks(&["a", "<eos>"]));
        assert!(matches!(
            v.decode(&[99]),
            Err(CorpusError::IdOutOfRange { id: 99, size: 6 })
        ));
        let all: Vec<TokenId> = (0..v.len() as TokenId).collect();
        assert_eq!(v.encode(&v.decode(&all).unwrap()), all);
    }

    #[test]
    fn synthetic_reverse_and_identity() {
        let spec = SyntheticTaskSpec {
            src_vocab_size: 10,
            min_len: 3,
            max_len: 3,
            mapping_seed: 5,
            reorder: Reorder::Reverse,
        };
        let task = SyntheticTask::new(spec).unwrap();
        let (a, b, c) = (4, 7, 9);
        assert_eq!(
            task.translate(&[a, b, c]),
            vec![task.map(c), task.map(b), task.map(a), EOS]
        );
        let ident = SyntheticTask::new(SyntheticTaskSpec {
            reorder: Reorder::Identity,
            ..spec
        })
        .unwrap();
        assert_eq!(ident.translate(&[a]), vec![ident.map(a), EOS]);

        // the mapping is a bijection on words and fixes the specials
        let mut image: Vec<TokenId> = (4..14).map(|t| task.map(t)).collect();
        image.sort_unstable();
        assert_eq!(image, (4..14).collect::<Vec<_>>());
        assert_eq!(&task.mapping()[..4], &[PAD, BOS, EOS, UNK]);
    }

    #[test]
    fn synthetic_is_deterministic_and_well_formed() {
        let spec = SyntheticTaskSpec::default();
        let a = gen_synthetic(spec, 50, 3).unwrap();
        assert_eq!(a, gen_synthetic(spec, 50, 3).unwrap());
        assert_ne!(a, gen_synthetic(spec, 50, 4).unwrap());
        for p in &a {
            assert!((5..=10).contains(&p.src.len()));
            assert_eq!(p.reference.len(), p.src.len() + 1);
            assert_eq!(*p.reference.last().unwrap(), EOS);
            assert!(p.src.iter().all(|&t| (4..44).contains(&t)));
        }
    }

    #[test]
    fn invalid_task_specs() {
        let bad = SyntheticTaskSpec {
            min_len: 0,
            ..Default::default()
        };
        assert!(SyntheticTask::new(bad).is_err());
        let bad = SyntheticTaskSpec {
            min_len: 4,
            max_len: 3,
            ..Default::default()
        };
        assert!(SyntheticTask::new(bad).is_err());
    }
}
