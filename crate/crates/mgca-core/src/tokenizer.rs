//! Trainable subword vocabulary with deterministic encode/decode.
//!
//! Training is greedy byte-pair merging over whitespace-pre-split words:
//! words start as character symbols (word-initial form, or "##"-prefixed
//! continuation form), and the most frequent adjacent pair is merged until
//! the size budget is spent. Ties break on lexicographic pair order, so the
//! same corpus always yields the same vocabulary. After training, tokens the
//! greedy longest-match encoder never produces on any training word are
//! dropped, which cannot change the segmentation of any training word.
//!
//! Text is NFC-normalized and lowercased before both training and encoding.
//! A literal "##" inside corpus words would collide with the continuation
//! marker and degrade decoding; the corpora this pipeline targets do not
//! contain it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Continuation marker on non-initial subwords.
pub const CONT: &str = "##";

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const PAD_ID: u32 = 3;
pub const UNK_ID: u32 = 4;

/// The five reserved tokens, in id order 0..=4.
pub const SPECIAL_TOKENS: [&str; 5] = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

pub fn is_special(id: u32) -> bool {
    id < SPECIAL_TOKENS.len() as u32
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("target size {given} too small: need at least {required} (5 specials + {base} character symbols)")]
    TargetTooSmall { given: usize, required: usize, base: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("bad vocab file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase + NFC, applied before training and encoding.
pub fn normalize(text: &str) -> String {
    text.nfc().collect::<String>().to_lowercase()
}

/// Whitespace-normalized form of a line, for round-trip comparisons.
pub fn normalize_line(text: &str) -> String {
    normalize(text).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Immutable subword inventory. Ids are dense `0..size`, with the special
/// tokens pinned to ids 0-4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_token_chars: usize,
}

/// Token ids for one line plus, per whitespace word, the half-open range of
/// subword positions it produced. Spans are contiguous, ordered, and cover
/// every position.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenization {
    pub ids: Vec<u32>,
    pub words: Vec<String>,
    pub spans: Vec<(usize, usize)>,
}

impl Tokenization {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Cuts to at most `max_tokens` ids at a word boundary, dropping any
    /// word that does not fit wholly.
    pub fn truncated(&self, max_tokens: usize) -> Tokenization {
        let mut keep_words = 0;
        let mut keep_tokens = 0;
        for (w, &(_, end)) in self.spans.iter().enumerate() {
            if end <= max_tokens {
                keep_words = w + 1;
                keep_tokens = end;
            } else {
                break;
            }
        }
        Tokenization {
            ids: self.ids[..keep_tokens].to_vec(),
            words: self.words[..keep_words].to_vec(),
            spans: self.spans[..keep_words].to_vec(),
        }
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(TokenizerError::BadVocabFile("fewer than 5 entries".into()));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(TokenizerError::BadVocabFile(format!(
                    "line {i} must be the special token {want}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::BadVocabFile(format!("duplicate token {t:?}")));
            }
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Vocab { tokens, index, max_token_chars })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Result<&str, TokenizerError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::IdOutOfRange { id, size: self.tokens.len() })
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Greedy longest-match segmentation of one normalized word. Characters
    /// with no matching token become UNK (one per character).
    fn encode_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let mut matched = None;
            let limit = (chars.len() - pos).min(self.max_token_chars);
            let mut candidate = String::new();
            for len in (1..=limit).rev() {
                candidate.clear();
                if pos > 0 {
                    candidate.push_str(CONT);
                }
                for &c in &chars[pos..pos + len] {
                    candidate.push(c);
                }
                if let Some(&id) = self.index.get(candidate.as_str()) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    out.push(UNK_ID);
                    pos += 1;
                }
            }
        }
        out
    }

    /// Tokenizes a line: normalization, whitespace split, then per-word
    /// greedy longest match. Total function; unknown characters map to UNK.
    pub fn encode(&self, text: &str) -> Tokenization {
        let mut ids = Vec::new();
        let mut words = Vec::new();
        let mut spans = Vec::new();
        for word in normalize(text).split_whitespace() {
            let start = ids.len();
            ids.extend(self.encode_word(word));
            spans.push((start, ids.len()));
            words.push(word.to_string());
        }
        Tokenization { ids, words, spans }
    }

    /// Joins subwords back into text, restoring word boundaries from the
    /// continuation marker. Special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id)?;
            if is_special(id) {
                continue;
            }
            if let Some(rest) = token.strip_prefix(CONT) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
        Ok(out)
    }

    /// Plain-text export: one token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut body = String::new();
        for t in &self.tokens {
            writeln!(body, "{t}").expect("string write");
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        Vocab::from_tokens(tokens)
    }
}

/// Word as a sequence of current merge symbols.
type SymbolWord = Vec<String>;

fn strip_cont(s: &str) -> &str {
    s.strip_prefix(CONT).unwrap_or(s)
}

/// Trains a vocabulary by greedy pair merging. The budget after specials and
/// character symbols is `target_size - 5 - |chars|` merges; training stops
/// early when no adjacent pair is left.
pub fn train_vocab<I, S>(corpus: I, target_size: usize) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    // Word frequencies over the normalized corpus.
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpus {
        for word in normalize(line.as_ref()).split_whitespace() {
            *word_counts.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    // Character symbols in both positional forms.
    let mut base: BTreeSet<String> = BTreeSet::new();
    for word in word_counts.keys() {
        for (i, c) in word.chars().enumerate() {
            if i == 0 {
                base.insert(c.to_string());
            } else {
                base.insert(format!("{CONT}{c}"));
            }
        }
    }
    let required = SPECIAL_TOKENS.len() + base.len();
    if target_size < required {
        return Err(TokenizerError::TargetTooSmall { given: target_size, required, base: base.len() });
    }

    let mut words: Vec<(SymbolWord, u64)> = word_counts
        .iter()
        .map(|(w, &count)| {
            let syms: SymbolWord = w
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONT}{c}") })
                .collect();
            (syms, count)
        })
        .collect();

    let mut merged: Vec<String> = Vec::new();
    let mut known: BTreeSet<String> = base.clone();
    let mut budget = target_size - required;

    while budget > 0 {
        // Count adjacent pairs; BTreeMap iteration gives the lexicographic
        // tie-break for free.
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, count) in &words {
            for pair in syms.windows(2) {
                *pair_counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += count;
            }
        }
        let Some((best_pair, _)) = pair_counts
            .iter()
            .fold(None::<(&(String, String), u64)>, |acc, (pair, &count)| match acc {
                Some((_, best)) if count <= best => acc,
                _ => Some((pair, count)),
            })
        else {
            break;
        };
        let best_pair = best_pair.clone();
        let new_symbol = format!("{}{}", best_pair.0, strip_cont(&best_pair.1));

        for (syms, _) in &mut words {
            let mut rewritten: SymbolWord = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == best_pair.0 && syms[i + 1] == best_pair.1 {
                    rewritten.push(new_symbol.clone());
                    i += 2;
                } else {
                    rewritten.push(syms[i].clone());
                    i += 1;
                }
            }
            *syms = rewritten;
        }

        // The same surface string can arise from two merge paths; only a
        // genuinely new token spends budget.
        if known.insert(new_symbol.clone()) {
            merged.push(new_symbol);
            budget -= 1;
        }
    }

    // Candidate inventory in id order: specials, characters, merges.
    let mut candidates: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    candidates.extend(base.iter().cloned());
    candidates.extend(merged);
    let full = Vocab::from_tokens(candidates.clone())?;

    // Reachability filter: keep only tokens the longest-match encoder emits
    // on some training word. Dropping unreachable tokens cannot change any
    // of these segmentations, because removing a non-emitted candidate never
    // unseats a longer match.
    let mut used: BTreeSet<u32> = BTreeSet::new();
    for word in word_counts.keys() {
        used.extend(full.encode_word(word));
    }
    let kept: Vec<String> = candidates
        .into_iter()
        .enumerate()
        .filter(|(i, _)| *i < SPECIAL_TOKENS.len() || used.contains(&(*i as u32)))
        .map(|(_, t)| t)
        .collect();
    Vocab::from_tokens(kept)
}
