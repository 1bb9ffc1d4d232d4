//! Synthetic evaluation corpus: a source language of random sentences and a
//! target language produced by a deterministic word-level substitution
//! cipher. Because the cipher is a known bijection, synonym ground truth is
//! exact, retrieval mates are unambiguous, and the alignment objectives have
//! a learnable signal at desk scale.
//!
//! Source and target words are built over disjoint alphabets, so surfaces
//! never collide and the subword vocabulary cleanly covers both languages.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::sampler::{MonoCorpus, ParallelCorpus, SamplerError};
use crate::tokenizer::{train_vocab, TokenizerError, Vocab};

const SRC_CONSONANTS: &[char] = &['b', 'd', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const SRC_VOWELS: &[char] = &['a', 'e', 'i', 'o'];
const TGT_CONSONANTS: &[char] = &['c', 'f', 'h', 'j', 'q', 'v', 'w', 'x', 'z'];
const TGT_VOWELS: &[char] = &['u', 'y'];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CipherConfig {
    /// Distinct words across both languages (half per side).
    pub word_count: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    /// Monolingual lines per language.
    pub mono_lines: usize,
    pub min_sentence_words: usize,
    pub max_sentence_words: usize,
    pub seed: u64,
    /// Target size handed to the vocabulary trainer; generous enough that
    /// every word merges into a single token.
    pub vocab_budget: usize,
    /// Fraction of word pairs entered into the thesaurus dictionary. Real
    /// dictionaries never cover a corpus fully; partial coverage keeps the
    /// token-level supervision honest.
    pub dictionary_coverage: f64,
}

impl Default for CipherConfig {
    fn default() -> Self {
        CipherConfig {
            word_count: 200,
            train_pairs: 2000,
            heldout_pairs: 200,
            mono_lines: 400,
            min_sentence_words: 3,
            max_sentence_words: 7,
            seed: 7,
            vocab_budget: 2000,
            dictionary_coverage: 0.5,
        }
    }
}

/// Everything one experiment needs, generated from a single seed.
#[derive(Debug, Clone)]
pub struct CipherCorpus {
    pub mono: MonoCorpus,
    pub train: ParallelCorpus,
    /// Never seen in training; retrieval and alignment evaluate here.
    pub heldout: Vec<(String, String)>,
    pub dictionary: Dictionary,
    pub vocab: Vocab,
}

fn make_word(rng: &mut ChaCha20Rng, consonants: &[char], vowels: &[char]) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(consonants[rng.gen_range(0..consonants.len())]);
        w.push(vowels[rng.gen_range(0..vowels.len())]);
    }
    w
}

fn distinct_words(
    rng: &mut ChaCha20Rng,
    n: usize,
    consonants: &[char],
    vowels: &[char],
) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = make_word(rng, consonants, vowels);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate(config: &CipherConfig) -> Result<CipherCorpus, SamplerError> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let per_side = (config.word_count / 2).max(2);
    let source_words = distinct_words(&mut rng, per_side, SRC_CONSONANTS, SRC_VOWELS);
    let target_words = distinct_words(&mut rng, per_side, TGT_CONSONANTS, TGT_VOWELS);

    let covered = ((per_side as f64 * config.dictionary_coverage).round() as usize).clamp(1, per_side);
    let mut dictionary = Dictionary::default();
    for (s, t) in source_words.iter().zip(&target_words).take(covered) {
        dictionary.insert(s, t);
    }

    let sentence = |rng: &mut ChaCha20Rng| -> Vec<usize> {
        let len = rng.gen_range(config.min_sentence_words..=config.max_sentence_words);
        (0..len).map(|_| rng.gen_range(0..per_side)).collect()
    };
    let render = |indices: &[usize], words: &[String]| -> String {
        indices.iter().map(|&i| words[i].as_str()).collect::<Vec<_>>().join(" ")
    };

    let mut seen_sentences: HashSet<Vec<usize>> = HashSet::new();
    let fresh = |rng: &mut ChaCha20Rng, seen: &mut HashSet<Vec<usize>>| -> Vec<usize> {
        loop {
            let s = sentence(rng);
            if seen.insert(s.clone()) {
                return s;
            }
        }
    };

    let mut train = Vec::with_capacity(config.train_pairs);
    for _ in 0..config.train_pairs {
        let s = fresh(&mut rng, &mut seen_sentences);
        train.push((render(&s, &source_words), render(&s, &target_words)));
    }
    let mut heldout = Vec::with_capacity(config.heldout_pairs);
    for _ in 0..config.heldout_pairs {
        let s = fresh(&mut rng, &mut seen_sentences);
        heldout.push((render(&s, &source_words), render(&s, &target_words)));
    }

    let mut src_mono = Vec::with_capacity(config.mono_lines);
    let mut tgt_mono = Vec::with_capacity(config.mono_lines);
    for _ in 0..config.mono_lines {
        src_mono.push(render(&sentence(&mut rng), &source_words));
        tgt_mono.push(render(&sentence(&mut rng), &target_words));
    }

    let vocab_corpus: Vec<String> = src_mono
        .iter()
        .chain(tgt_mono.iter())
        .cloned()
        .chain(train.iter().flat_map(|(s, t)| [s.clone(), t.clone()]))
        .collect();
    let vocab = train_vocab(vocab_corpus.iter(), config.vocab_budget).map_err(|e| match e {
        TokenizerError::Io(io) => SamplerError::Io(io),
        other => SamplerError::Io(std::io::Error::other(other.to_string())),
    })?;

    let mono = MonoCorpus::from_parts(vec![("src".into(), src_mono), ("tgt".into(), tgt_mono)])?;
    let train = ParallelCorpus::from_pairs(train, "src-tgt")?;
    Ok(CipherCorpus { mono, train, heldout, dictionary, vocab })
}

/// Materializes the corpus as the pipeline's external file formats:
/// `mono/<lang>.txt` per language, `src-tgt.tsv`, `heldout.tsv`,
/// `dict.txt`, `vocab.txt`.
pub fn write_to_dir(corpus: &CipherCorpus, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir.join("mono"))?;
    for (i, lang) in corpus.mono.languages().iter().enumerate() {
        std::fs::write(dir.join("mono").join(format!("{lang}.txt")), corpus.mono.lines(i).join("\n"))?;
    }
    let tsv = |pairs: &[(String, String)]| {
        pairs.iter().map(|(s, t)| format!("{s}\t{t}")).collect::<Vec<_>>().join("\n")
    };
    std::fs::write(dir.join("src-tgt.tsv"), tsv(&corpus.train.pairs))?;
    std::fs::write(dir.join("heldout.tsv"), tsv(&corpus.heldout))?;
    let dict_lines: Vec<String> = corpus
        .dictionary
        .iter()
        .flat_map(|(s, ts)| ts.iter().map(move |t| format!("{s} {t}")))
        .collect();
    std::fs::write(dir.join("dict.txt"), dict_lines.join("\n"))?;
    corpus
        .vocab
        .save(&dir.join("vocab.txt"))
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(())
}
