//! Bilingual thesaurus dictionary and synonym token-pair mining.
//!
//! The dictionary is a MUSE-style word list: one whitespace-separated
//! `source target` pair per line, aggregated per source word. Mining walks a
//! tokenized parallel pair and emits an aligned word pair only when the
//! mapping is positionally unambiguous: the source word occurs exactly once
//! on its side, exactly one of its dictionary translations occurs in the
//! target, that translation occurs exactly once, and neither side was
//! claimed by an earlier pair (greedy left-to-right). No word aligner, no
//! guessing.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

use crate::tokenizer::{normalize, Tokenization};

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("dictionary file {0:?} contains no entries")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source word -> set of target translations. Lookup is case-normalized the
/// same way the tokenizer normalizes text.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    entries: BTreeMap<String, BTreeSet<String>>,
    /// Lines skipped because they did not hold exactly two fields.
    pub malformed_lines: usize,
}

impl Dictionary {
    pub fn load(path: &Path) -> Result<Self, DictionaryError> {
        let body = std::fs::read_to_string(path)?;
        let dict = Self::from_lines(body.lines());
        if dict.entries.is_empty() {
            return Err(DictionaryError::Empty(path.display().to_string()));
        }
        Ok(dict)
    }

    pub fn from_lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut dict = Dictionary::default();
        for line in lines {
            let fields: Vec<&str> = line.as_ref().split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                [source, target] => dict.insert(source, target),
                _ => dict.malformed_lines += 1,
            }
        }
        dict
    }

    pub fn insert(&mut self, source: &str, target: &str) {
        self.entries
            .entry(normalize(source))
            .or_default()
            .insert(normalize(target));
    }

    /// Number of source-word entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn translations(&self, source: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(source)
    }

    /// Drops a whole source-word entry with all its translations.
    pub fn remove_entry(&mut self, source: &str) {
        self.entries.remove(source);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.entries.iter()
    }
}

/// One mined word pair, as half-open token spans in concatenated-instance
/// coordinates, plus the surface words for reporting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanPair {
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub source_word: String,
    pub target_word: String,
}

/// The synonym pairs mined from one parallel pair. May be empty; downstream
/// losses skip instances with no pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymPairSet {
    pub pairs: Vec<SpanPair>,
}

impl SynonymPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn occurrence_counts(words: &[String]) -> HashMap<&str, usize> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in words {
        *counts.entry(w.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Mines synonym pairs from a tokenized parallel pair. Spans are shifted by
/// the given segment offsets so they land directly in the coordinates of the
/// concatenated training instance.
pub fn mine_pairs(
    source: &Tokenization,
    target: &Tokenization,
    dict: &Dictionary,
    source_offset: usize,
    target_offset: usize,
) -> SynonymPairSet {
    let src_counts = occurrence_counts(&source.words);
    let tgt_counts = occurrence_counts(&target.words);
    let mut tgt_index: HashMap<&str, usize> = HashMap::new();
    for (j, w) in target.words.iter().enumerate() {
        tgt_index.entry(w.as_str()).or_insert(j);
    }

    let mut claimed_targets: HashSet<usize> = HashSet::new();
    let mut pairs = Vec::new();
    for (i, word) in source.words.iter().enumerate() {
        if src_counts[word.as_str()] != 1 {
            continue;
        }
        let Some(translations) = dict.translations(word) else { continue };
        let present: Vec<&String> = translations
            .iter()
            .filter(|t| tgt_counts.contains_key(t.as_str()))
            .collect();
        // Zero hits: nothing to align. Two or more distinct translations
        // present: positionally ambiguous, rejected.
        let [translation] = present.as_slice() else { continue };
        if tgt_counts[translation.as_str()] != 1 {
            continue;
        }
        let j = tgt_index[translation.as_str()];
        if !claimed_targets.insert(j) {
            continue;
        }
        let (ss, se) = source.spans[i];
        let (ts, te) = target.spans[j];
        pairs.push(SpanPair {
            source: (ss + source_offset, se + source_offset),
            target: (ts + target_offset, te + target_offset),
            source_word: word.clone(),
            target_word: (*translation).clone(),
        });
    }
    SynonymPairSet { pairs }
}

/// Removes every pair whose source or target span intersects a masked
/// position. A MASK token carries no lexical identity to align.
pub fn drop_masked_pairs(set: &SynonymPairSet, mask_positions: &[usize]) -> SynonymPairSet {
    let masked: HashSet<usize> = mask_positions.iter().copied().collect();
    let hit = |range: (usize, usize)| (range.0..range.1).any(|p| masked.contains(&p));
    SynonymPairSet {
        pairs: set
            .pairs
            .iter()
            .filter(|p| !hit(p.source) && !hit(p.target))
            .cloned()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_vocab;

    fn tokenize_pair(src: &str, tgt: &str) -> (Tokenization, Tokenization) {
        let vocab = train_vocab([src, tgt], 400).unwrap();
        (vocab.encode(src), vocab.encode(tgt))
    }

    #[test]
    fn translations_aggregate_per_source() {
        let d = Dictionary::from_lines(["dog chien", "dog clebs"]);
        assert_eq!(d.len(), 1);
        assert_eq!(d.translations("dog").unwrap().len(), 2);
    }

    #[test]
    fn duplicate_lines_are_idempotent() {
        let d = Dictionary::from_lines(["dog chien", "dog chien"]);
        assert_eq!(d.translations("dog").unwrap().len(), 1);
        assert_eq!(d.malformed_lines, 0);
    }

    #[test]
    fn three_field_line_is_malformed() {
        let d = Dictionary::from_lines(["dog chien extra", "cat chat"]);
        assert_eq!(d.malformed_lines, 1);
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dict.txt");
        std::fs::write(&path, "\n\n").unwrap();
        assert!(matches!(Dictionary::load(&path), Err(DictionaryError::Empty(_))));
    }

    #[test]
    fn single_unambiguous_match_is_mined() {
        let d = Dictionary::from_lines(["dog chien"]);
        let (src, tgt) = tokenize_pair("the dog runs", "le chien court");
        let set = mine_pairs(&src, &tgt, &d, 1, 2 + src.len());
        assert_eq!(set.len(), 1);
        let p = &set.pairs[0];
        assert_eq!(p.source_word, "dog");
        assert_eq!(p.target_word, "chien");
        // spans sit in instance coordinates: CLS x SEP y SEP
        assert_eq!(p.source, (src.spans[1].0 + 1, src.spans[1].1 + 1));
        let off = 2 + src.len();
        assert_eq!(p.target, (tgt.spans[1].0 + off, tgt.spans[1].1 + off));
    }

    #[test]
    fn repeated_source_word_is_rejected() {
        let d = Dictionary::from_lines(["dog chien"]);
        let (src, tgt) = tokenize_pair("dog sees dog", "le chien court");
        assert!(mine_pairs(&src, &tgt, &d, 1, 2 + src.len()).is_empty());
    }

    #[test]
    fn ambiguous_translations_are_rejected() {
        // Both translations of "dog" occur in the target; enumerating the
        // filter rules says no pair may be emitted.
        let d = Dictionary::from_lines(["dog chien", "dog clebs"]);
        let (src, tgt) = tokenize_pair("the dog runs", "chien ou clebs");
        assert!(mine_pairs(&src, &tgt, &d, 1, 2 + src.len()).is_empty());

        // With only one of them present the pair comes back.
        let (src2, tgt2) = tokenize_pair("the dog runs", "le clebs court");
        assert_eq!(mine_pairs(&src2, &tgt2, &d, 1, 2 + src2.len()).len(), 1);
    }

    #[test]
    fn repeated_translation_is_rejected() {
        let d = Dictionary::from_lines(["dog chien"]);
        let (src, tgt) = tokenize_pair("the dog runs", "chien voit chien");
        assert!(mine_pairs(&src, &tgt, &d, 1, 2 + src.len()).is_empty());
    }

    #[test]
    fn target_claimed_once() {
        // Two source words sharing one target occurrence: first claims it.
        let d = Dictionary::from_lines(["hound chien", "dog chien"]);
        let (src, tgt) = tokenize_pair("dog meets hound", "le chien court");
        let set = mine_pairs(&src, &tgt, &d, 1, 2 + src.len());
        assert_eq!(set.len(), 1);
        assert_eq!(set.pairs[0].source_word, "dog");
    }

    #[test]
    fn positions_are_one_to_one() {
        let d = Dictionary::from_lines(["a x", "b y", "c z"]);
        let (src, tgt) = tokenize_pair("a b c", "z y x");
        let set = mine_pairs(&src, &tgt, &d, 1, 2 + src.len());
        assert_eq!(set.len(), 3);
        let mut seen = HashSet::new();
        for p in &set.pairs {
            for pos in (p.source.0..p.source.1).chain(p.target.0..p.target.1) {
                assert!(seen.insert(pos), "position {pos} reused");
            }
        }
    }

    #[test]
    fn segment_discipline_holds() {
        let d = Dictionary::from_lines(["alpha omega", "beta sigma"]);
        let (src, tgt) = tokenize_pair("alpha beta", "sigma omega");
        let boundary = 1 + src.len();
        let set = mine_pairs(&src, &tgt, &d, 1, boundary + 1);
        assert_eq!(set.len(), 2);
        for p in &set.pairs {
            assert!(p.source.1 <= boundary);
            assert!(p.target.0 > boundary);
        }
    }

    #[test]
    fn removing_an_entry_never_grows_the_set() {
        let mut d = Dictionary::from_lines(["a x", "b y", "c z", "d x"]);
        let (src, tgt) = tokenize_pair("a b c d", "x y z w");
        let full = mine_pairs(&src, &tgt, &d, 1, 2 + src.len()).len();
        let words: Vec<String> = d.iter().map(|(w, _)| w.clone()).collect();
        for w in words {
            let mut smaller = d.clone();
            smaller.remove_entry(&w);
            let got = mine_pairs(&src, &tgt, &smaller, 1, 2 + src.len()).len();
            assert!(got <= full, "removing {w} grew |S| from {full} to {got}");
        }
        d.remove_entry("a");
        assert!(mine_pairs(&src, &tgt, &d, 1, 2 + src.len()).len() <= full);
    }

    #[test]
    fn drop_masked_pairs_filters_overlaps() {
        let d = Dictionary::from_lines(["dog chien", "cat chat"]);
        let (src, tgt) = tokenize_pair("dog sees cat", "chien voit chat");
        let set = mine_pairs(&src, &tgt, &d, 1, 2 + src.len());
        assert_eq!(set.len(), 2);

        // no masks on pair spans: identity
        let untouched = drop_masked_pairs(&set, &[]);
        assert_eq!(untouched, set);

        // mask inside the first pair's source span removes only that pair
        let hit = set.pairs[0].source.0;
        let pruned = drop_masked_pairs(&set, &[hit]);
        assert_eq!(pruned.len(), 1);

        // masking every pair empties the set
        let all: Vec<usize> = set
            .pairs
            .iter()
            .flat_map(|p| (p.source.0..p.source.1).chain(p.target.0..p.target.1))
            .collect();
        assert!(drop_masked_pairs(&set, &all).is_empty());
    }
}
