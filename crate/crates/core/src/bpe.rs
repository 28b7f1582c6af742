//! Byte-pair-encoding caption tokenizer.
//!
//! Text is lowercased and split on whitespace; each word becomes a sequence
//! of characters whose last symbol carries the end-of-word marker `</w>`.
//! Training repeatedly merges the most frequent adjacent pair (ties broken
//! by lexicographic order of the pair).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const END_OF_WORD: &str = "</w>";
pub const PAD: usize = 0;
pub const NULL: usize = 1;
pub const UNK: usize = 2;
const SPECIAL_NAMES: [&str; 3] = ["<pad>", "<null>", "<unk>"];
const HEADER: &str = "bpe-vocab v1";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size {requested} must exceed {minimum} (special plus base symbols)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("vocabulary file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("vocabulary i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, BpeError>;

/// Lowercases and collapses whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

/// Fixed-length caption ids, padded with [`PAD`] at the tail.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CaptionTokens {
    pub ids: Vec<usize>,
}

impl CaptionTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The same length with every position set to [`NULL`].
    pub fn null(len: usize) -> Self {
        Self { ids: vec![NULL; len] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_ids: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeVocab {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Self {
        let token_ids = tokens
            .iter()
            .enumerate()
            .skip(SPECIAL_NAMES.len())
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self {
            merges,
            tokens,
            token_ids,
            ranks,
        }
    }

    /// Learns merges until the vocabulary (specials included) reaches
    /// `vocab_size` or no pair remains.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for text in corpus {
            for w in normalize(text.as_ref()).split(' ').filter(|w| !w.is_empty()) {
                *words.entry(word_symbols(w)).or_default() += 1;
            }
        }
        if words.is_empty() {
            return Err(BpeError::EmptyCorpus);
        }
        let base: BTreeSet<String> = words.keys().flatten().cloned().collect();
        let minimum = SPECIAL_NAMES.len() + base.len();
        if vocab_size <= minimum {
            return Err(BpeError::VocabTooSmall {
                requested: vocab_size,
                minimum,
            });
        }
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(base.iter().cloned());
        let mut known: BTreeSet<String> = base;
        let mut merges = Vec::new();
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        while tokens.len() < vocab_size {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, freq) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += freq;
                }
            }
            // BTreeMap iterates pairs in lexicographic order, so the first
            // maximum found is the lexicographically smallest.
            let Some(((a, b), _)) = counts
                .iter()
                .fold(None::<(&(&str, &str), usize)>, |best, (p, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((p, c)),
                })
            else {
                break;
            };
            let pair = (a.to_string(), b.to_string());
            for (syms, _) in &mut words {
                *syms = merge_pair(syms, &pair);
            }
            let joined = format!("{}{}", pair.0, pair.1);
            if known.insert(joined.clone()) {
                tokens.push(joined);
            }
            merges.push(pair);
        }
        Ok(Self::from_parts(merges, tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn encode_word(&self, word: &str) -> Vec<usize> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            match best {
                Some(pair) => syms = merge_pair(&syms, &pair),
                None => break,
            }
        }
        syms.iter().map(|s| *self.token_ids.get(s).unwrap_or(&UNK)).collect()
    }

    /// Token ids for `text` without padding or truncation.
    pub fn encode_unpadded(&self, text: &str) -> Vec<usize> {
        normalize(text)
            .split(' ')
            .filter(|w| !w.is_empty())
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Exactly `len` ids: truncated at the tail or padded with [`PAD`].
    pub fn encode(&self, text: &str, len: usize) -> CaptionTokens {
        let mut ids = self.encode_unpadded(text);
        ids.truncate(len);
        ids.resize(len, PAD);
        CaptionTokens { ids }
    }

    /// Text for `ids`; padding and null tokens are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD | NULL => {}
                UNK => out.push_str(SPECIAL_NAMES[UNK]),
                _ => match self.tokens.get(id) {
                    Some(t) => match t.strip_suffix(END_OF_WORD) {
                        Some(stem) => {
                            out.push_str(stem);
                            out.push(' ');
                        }
                        None => out.push_str(t),
                    },
                    None => out.push_str(SPECIAL_NAMES[UNK]),
                },
            }
        }
        out.trim_end().to_string()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(s, "tokens {}", self.tokens.len()).unwrap();
        for t in &self.tokens {
            writeln!(s, "{t}").unwrap();
        }
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "{a} {b}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let perr = |line: usize, reason: &str| BpeError::Parse {
            line,
            reason: reason.into(),
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| perr(0, &format!("unexpected end of file, expected {what}")));
        let (ln, header) = next("header")?;
        if header != HEADER {
            return Err(perr(ln, "unknown header"));
        }
        let count = |ln: usize, line: &str, key: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| perr(ln, &format!("expected `{key}<count>`")))
        };
        let (ln, line) = next("token count")?;
        let n_tokens = count(ln, line, "tokens ")?;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let (ln, t) = next("token")?;
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(perr(ln, "token must be nonempty without whitespace"));
            }
            tokens.push(t.to_string());
        }
        if tokens.len() < SPECIAL_NAMES.len() || tokens[..SPECIAL_NAMES.len()] != SPECIAL_NAMES {
            return Err(perr(2, "special tokens must come first"));
        }
        let (ln, line) = next("merge count")?;
        let n_merges = count(ln, line, "merges ")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (ln, m) = next("merge")?;
            let mut parts = m.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => return Err(perr(ln, "merge must be two space-separated symbols")),
            }
        }
        Ok(Self::from_parts(merges, tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|source| BpeError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| BpeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

fn merge_pair(syms: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus() -> Vec<String> {
        [
            "Alpha and Beta jump at the beach.",
            "Then Beta waves.",
            "Later, Gamma, Alpha and Beta read a book.",
            "Now  Delta  sleeps again.",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // "aaab" → a a a b</w>; (a,a) occurs twice, (a,b</w>) once.
        let v = BpeVocab::train(&["aaab"], 3 + 2 + 1).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both have one pair: (a,b</w>) < (c,d</w>).
        let v = BpeVocab::train(&["ab cd"], 3 + 4 + 1).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), format!("b{END_OF_WORD}")));
    }

    #[test]
    fn empty_corpus_and_small_vocab_are_errors() {
        assert!(matches!(BpeVocab::train::<&str>(&[], 100), Err(BpeError::EmptyCorpus)));
        assert!(matches!(BpeVocab::train(&["   "], 100), Err(BpeError::EmptyCorpus)));
        assert!(matches!(BpeVocab::train(&["ab"], 5), Err(BpeError::VocabTooSmall { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        assert_eq!(BpeVocab::train(&corpus(), 80).unwrap(), BpeVocab::train(&corpus(), 80).unwrap());
    }

    #[test]
    fn corpus_roundtrip() {
        let v = BpeVocab::train(&corpus(), 80).unwrap();
        for c in corpus() {
            assert_eq!(v.decode(&v.encode(&c, 64).ids), normalize(&c));
        }
    }

    #[test]
    fn padding_truncation_and_empty() {
        let v = BpeVocab::train(&corpus(), 60).unwrap();
        assert_eq!(v.encode("", 8).ids, vec![PAD; 8]);
        let long = "alpha beta gamma delta ".repeat(10);
        let full = v.encode_unpadded(&long);
        let cut = v.encode(&long, 5);
        assert_eq!(cut.ids, full[..5]);
        let short = v.encode("beta", 6);
        let used = v.encode_unpadded("beta").len();
        assert!(short.ids[used..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn unknown_symbols_map_to_unk() {
        let v = BpeVocab::train(&corpus(), 60).unwrap();
        assert!(v.encode_unpadded("zzz ☃").contains(&UNK));
    }

    #[test]
    fn text_file_roundtrip() {
        let v = BpeVocab::train(&corpus(), 80).unwrap();
        let back = BpeVocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(BpeVocab::from_text("bpe-vocab v1\ntokens 2\n<pad>\n").is_err());
    }

    proptest! {
        #[test]
        fn ids_stay_in_range(text in "[a-zA-Z ,.!☃]{0,60}") {
            let v = BpeVocab::train(&corpus(), 70).unwrap();
            let enc = v.encode(&text, 16);
            prop_assert_eq!(enc.len(), 16);
            prop_assert!(enc.ids.iter().all(|&i| i < v.len()));
            prop_assert_eq!(enc.clone(), v.encode(&text, 16));
        }
    }
}
