//! Corpus stores, the smoothed language-sampling distribution, the strictly
//! alternating monolingual/bilingual batch schedule, and mask application.
//!
//! Batches are deterministic functions of (seed, batch index): every batch
//! derives its own stream cipher RNG, so a run can resume from a checkpoint
//! by restoring nothing but counters. Line and pair draws are uniform with
//! replacement; the epoch counters report coverage equivalents (total draws
//! divided by corpus size) and tick on every wrap.


use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dictionary::{drop_masked_pairs, mine_pairs, Dictionary, SynonymPairSet};
use crate::tokenizer::{Tokenization, Vocab, CLS_ID, MASK_ID, SEP_ID};

/// Label value marking unmasked positions.
pub const IGNORE_LABEL: u32 = u32::MAX;

/// First id that masking may select or sample as a corruption replacement.
pub const FIRST_CONTENT_ID: u32 = 5;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("alpha must satisfy 0 < alpha <= 1, got {0}")]
    BadAlpha(f64),
    #[error("mask rate must lie strictly between 0 and 1, got {0}")]
    BadMaskRate(f64),
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error("max_len_{side} of {given} cannot hold a {side} instance")]
    MaxLenTooSmall { side: &'static str, given: usize },
    #[error("all language counts are zero")]
    AllZeroCounts,
    #[error("monolingual corpus has no usable lines")]
    EmptyMonoCorpus,
    #[error("parallel corpus has no usable pairs")]
    EmptyParallelCorpus,
    #[error("no .txt language files in {0}")]
    NoLanguageFiles(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Smoothing exponent of the language-sampling distribution.
    pub alpha: f64,
    /// Segments (monolingual) or pairs (bilingual) per batch.
    pub batch_size: usize,
    pub mono_mask_rate: f64,
    pub bi_mask_rate: f64,
    pub max_len_mono: usize,
    pub max_len_bi: usize,
    pub seed: u64,
    /// Concatenate the target sentence first in bilingual instances.
    pub y_first: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: 0.5,
            batch_size: 8,
            mono_mask_rate: 0.15,
            bi_mask_rate: 0.25,
            max_len_mono: 32,
            max_len_bi: 48,
            seed: 42,
            y_first: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SamplerError::BadAlpha(self.alpha));
        }
        for rate in [self.mono_mask_rate, self.bi_mask_rate] {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(SamplerError::BadMaskRate(rate));
            }
        }
        if self.batch_size == 0 {
            return Err(SamplerError::BadBatchSize);
        }
        if self.max_len_mono < 3 {
            return Err(SamplerError::MaxLenTooSmall { side: "mono", given: self.max_len_mono });
        }
        if self.max_len_bi < 5 {
            return Err(SamplerError::MaxLenTooSmall { side: "bi", given: self.max_len_bi });
        }
        Ok(())
    }
}

/// Smoothed multinomial over languages: q_i = p_i^alpha / sum_j p_j^alpha
/// with p_i = n_i / sum_k n_k. Zero-count languages keep probability zero.
pub fn language_sampling_probs(counts: &[u64], alpha: f64) -> Result<Vec<f64>, SamplerError> {
    if !(alpha > 0.0) {
        return Err(SamplerError::BadAlpha(alpha));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(SamplerError::AllZeroCounts);
    }
    let powered: Vec<f64> = counts
        .iter()
        .map(|&n| (n as f64 / total as f64).powf(alpha))
        .collect();
    let norm: f64 = powered.iter().sum();
    Ok(powered.iter().map(|p| p / norm).collect())
}

/// Inverse-CDF draw over a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut ChaCha20Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One sentence-per-line store per language.
#[derive(Debug, Clone)]
pub struct MonoCorpus {
    languages: Vec<String>,
    lines: Vec<Vec<String>>,
}

impl MonoCorpus {
    pub fn from_parts(parts: Vec<(String, Vec<String>)>) -> Result<Self, SamplerError> {
        let mut languages = Vec::new();
        let mut lines = Vec::new();
        for (lang, mut ls) in parts {
            ls.retain(|l| !l.trim().is_empty());
            languages.push(lang);
            lines.push(ls);
        }
        if lines.iter().all(|l| l.is_empty()) {
            return Err(SamplerError::EmptyMonoCorpus);
        }
        Ok(MonoCorpus { languages, lines })
    }

    /// Loads every `<lang>.txt` in a directory, sorted by language name.
    pub fn load_dir(dir: &Path) -> Result<Self, SamplerError> {
        let mut parts = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let lang = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let body = std::fs::read_to_string(&path)?;
            parts.push((lang, body.lines().map(str::to_string).collect()));
        }
        if parts.is_empty() {
            return Err(SamplerError::NoLanguageFiles(dir.display().to_string()));
        }
        MonoCorpus::from_parts(parts)
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn counts(&self) -> Vec<u64> {
        self.lines.iter().map(|l| l.len() as u64).collect()
    }

    pub fn lines(&self, lang_index: usize) -> &[String] {
        &self.lines[lang_index]
    }
}

/// Sentence-aligned bitext.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
    pub language_pair: String,
    /// Input lines dropped for not holding two nonempty tab-separated fields.
    pub skipped_lines: usize,
}

impl ParallelCorpus {
    pub fn from_pairs(pairs: Vec<(String, String)>, language_pair: &str) -> Result<Self, SamplerError> {
        let total = pairs.len();
        let pairs: Vec<_> = pairs
            .into_iter()
            .filter(|(s, t)| !s.trim().is_empty() && !t.trim().is_empty())
            .collect();
        if pairs.is_empty() {
            return Err(SamplerError::EmptyParallelCorpus);
        }
        let skipped_lines = total - pairs.len();
        Ok(ParallelCorpus { pairs, language_pair: language_pair.to_string(), skipped_lines })
    }

    /// Loads `source<TAB>target` lines; the language-pair tag comes from the
    /// `<src>-<tgt>.tsv` filename.
    pub fn load_tsv(path: &Path) -> Result<Self, SamplerError> {
        let body = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        let mut skipped = 0;
        for line in body.lines() {
            if line.trim().is_empty() {
                continue;
            }
            match line.split_once('\t') {
                Some((s, t)) if !s.trim().is_empty() && !t.trim().is_empty() => {
                    pairs.push((s.to_string(), t.to_string()));
                }
                _ => skipped += 1,
            }
        }
        let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("xx-yy");
        let mut corpus = ParallelCorpus::from_pairs(pairs, tag)?;
        corpus.skipped_lines += skipped;
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchKind {
    Monolingual,
    Bilingual,
}

/// One training unit after masking. For bilingual instances the layout is
/// CLS first-segment SEP second-segment SEP and `segment_boundary` is the
/// index of the separating SEP; monolingual instances are CLS tokens SEP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedInstance {
    pub input_ids: Vec<u32>,
    pub label_ids: Vec<u32>,
    pub mask_positions: Vec<usize>,
    pub segment_boundary: Option<usize>,
    pub attention_length: usize,
}

impl MaskedInstance {
    pub fn len(&self) -> usize {
        self.attention_length
    }

    pub fn is_special_position(&self, pos: usize) -> bool {
        pos == 0
            || pos + 1 == self.attention_length
            || self.segment_boundary == Some(pos)
    }

    /// Non-special positions inside the attention window.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.attention_length)
            .filter(|&p| !self.is_special_position(p))
            .collect()
    }

    /// Content positions of the first segment (before the boundary SEP),
    /// or of the whole instance when there is no boundary.
    pub fn first_segment_positions(&self) -> Vec<usize> {
        match self.segment_boundary {
            Some(b) => (1..b).collect(),
            None => self.content_positions(),
        }
    }

    /// Content positions of the second segment (after the boundary SEP).
    pub fn second_segment_positions(&self) -> Vec<usize> {
        match self.segment_boundary {
            Some(b) => (b + 1..self.attention_length.saturating_sub(1)).collect(),
            None => Vec::new(),
        }
    }
}

/// Per-pair extras carried by bilingual batches.
#[derive(Debug, Clone)]
pub struct PairExtras {
    /// Clean (pre-mask) token ids of the source side, truncated.
    pub clean_source_ids: Vec<u32>,
    /// Clean (pre-mask) token ids of the target side, truncated.
    pub clean_target_ids: Vec<u32>,
    /// Mined pairs surviving the mask filter; what the token loss consumes.
    pub synonyms: SynonymPairSet,
    /// All mined pairs, for the clean-input contrastive variant.
    pub synonyms_clean: SynonymPairSet,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub kind: BatchKind,
    pub instances: Vec<MaskedInstance>,
    /// Aligned with `instances` for bilingual batches; empty for monolingual.
    pub pairs: Vec<PairExtras>,
}

impl Batch {
    /// Order-sensitive FNV-1a digest of the token content, for verifying
    /// that two runs consumed identical streams.
    pub fn fnv1a(&self, mut state: u64) -> u64 {
        let mut eat = |v: u64| {
            for byte in v.to_le_bytes() {
                state ^= byte as u64;
                state = state.wrapping_mul(0x100000001b3);
            }
        };
        eat(match self.kind {
            BatchKind::Monolingual => 1,
            BatchKind::Bilingual => 2,
        });
        for inst in &self.instances {
            for &id in &inst.input_ids {
                eat(id as u64);
            }
            for &p in &inst.mask_positions {
                eat(p as u64);
            }
        }
        state
    }
}

/// An unmasked concatenated bilingual instance.
#[derive(Debug, Clone)]
pub struct TlmInstance {
    pub ids: Vec<u32>,
    pub segment_boundary: usize,
    pub source_kept: Tokenization,
    pub target_kept: Tokenization,
}

/// Splits a token budget proportionally between two sides, keeping both
/// nonzero whenever the budget allows.
fn proportional_budget(len_src: usize, len_tgt: usize, budget: usize) -> (usize, usize) {
    if len_src + len_tgt <= budget {
        return (len_src, len_tgt);
    }
    let share = budget as f64 * len_src as f64 / (len_src + len_tgt) as f64;
    let src = (share.round() as usize).clamp(1, budget - 1);
    (src, budget - src)
}

/// Builds CLS x SEP y SEP (or CLS y SEP x SEP with `y_first`), truncating
/// both sides proportionally at word boundaries to fit `max_len`. Returns
/// None when either side ends up empty, which callers report and skip.
pub fn build_tlm_instance(
    source: &Tokenization,
    target: &Tokenization,
    max_len: usize,
    y_first: bool,
) -> Option<TlmInstance> {
    if source.is_empty() || target.is_empty() {
        return None;
    }
    let budget = max_len.checked_sub(3)?;
    let (keep_src, keep_tgt) = proportional_budget(source.len(), target.len(), budget);
    let source_kept = source.truncated(keep_src);
    let target_kept = target.truncated(keep_tgt);
    if source_kept.is_empty() || target_kept.is_empty() {
        return None;
    }
    let (first, second) = if y_first {
        (&target_kept, &source_kept)
    } else {
        (&source_kept, &target_kept)
    };
    let mut ids = Vec::with_capacity(first.len() + second.len() + 3);
    ids.push(CLS_ID);
    ids.extend(&first.ids);
    ids.push(SEP_ID);
    let segment_boundary = ids.len() - 1;
    ids.extend(&second.ids);
    ids.push(SEP_ID);
    Some(TlmInstance { ids, segment_boundary, source_kept, target_kept })
}

/// BERT-style masking: every non-special position is selected independently
/// with probability `rate`; a selected position becomes MASK 80% of the
/// time, a random content token 10%, and stays unchanged 10%. Labels carry
/// the original id exactly at the selected positions.
pub fn apply_mask(
    ids: &[u32],
    segment_boundary: Option<usize>,
    rate: f64,
    vocab_size: u32,
    rng: &mut ChaCha20Rng,
) -> MaskedInstance {
    let mut input_ids = ids.to_vec();
    let mut label_ids = vec![IGNORE_LABEL; ids.len()];
    let mut mask_positions = Vec::new();
    for (p, &original) in ids.iter().enumerate() {
        if original < FIRST_CONTENT_ID {
            continue;
        }
        if rng.gen::<f64>() >= rate {
            continue;
        }
        label_ids[p] = original;
        mask_positions.push(p);
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            input_ids[p] = MASK_ID;
        } else if roll < 0.9 {
            input_ids[p] = rng.gen_range(FIRST_CONTENT_ID..vocab_size);
        }
    }
    MaskedInstance {
        attention_length: input_ids.len(),
        input_ids,
        label_ids,
        mask_positions,
        segment_boundary,
    }
}

/// A pre-tokenized, pre-mined parallel pair ready for masking.
#[derive(Debug, Clone)]
struct PreparedPair {
    instance_ids: Vec<u32>,
    segment_boundary: usize,
    mined: SynonymPairSet,
    clean_source_ids: Vec<u32>,
    clean_target_ids: Vec<u32>,
}

/// Deterministic alternating batch source. Single-owner; emitted batches are
/// immutable and may cross threads.
pub struct BatchSampler {
    config: SamplerConfig,
    vocab_size: u32,
    lang_probs: Vec<f64>,
    mono_segments: Vec<Vec<Vec<u32>>>,
    prepared: Vec<PreparedPair>,
    /// Pairs dropped at preparation because a side was empty after
    /// truncation.
    pub skipped_pairs: usize,
    pub batch_index: u64,
    mono_draws: u64,
    pair_draws: u64,
    mono_total: u64,
}

impl BatchSampler {
    pub fn new(
        config: SamplerConfig,
        mono: &MonoCorpus,
        parallel: &ParallelCorpus,
        vocab: &Vocab,
        dict: &Dictionary,
    ) -> Result<Self, SamplerError> {
        config.validate()?;

        // Pre-tokenize monolingual lines as CLS tokens SEP, dropping lines
        // that truncate to nothing.
        let budget_mono = config.max_len_mono - 2;
        let mut mono_segments: Vec<Vec<Vec<u32>>> = Vec::new();
        for li in 0..mono.languages().len() {
            let mut segs = Vec::new();
            for line in mono.lines(li) {
                let tok = vocab.encode(line).truncated(budget_mono);
                if tok.is_empty() {
                    continue;
                }
                let mut ids = Vec::with_capacity(tok.len() + 2);
                ids.push(CLS_ID);
                ids.extend(&tok.ids);
                ids.push(SEP_ID);
                segs.push(ids);
            }
            mono_segments.push(segs);
        }
        let counts: Vec<u64> = mono_segments.iter().map(|s| s.len() as u64).collect();
        if counts.iter().all(|&c| c == 0) {
            return Err(SamplerError::EmptyMonoCorpus);
        }
        let lang_probs = language_sampling_probs(&counts, config.alpha)?;

        // Pre-build every bilingual instance and mine its synonym pairs once.
        let mut prepared = Vec::new();
        let mut skipped_pairs = 0;
        for (src_line, tgt_line) in &parallel.pairs {
            let src = vocab.encode(src_line);
            let tgt = vocab.encode(tgt_line);
            let Some(tlm) = build_tlm_instance(&src, &tgt, config.max_len_bi, config.y_first) else {
                skipped_pairs += 1;
                continue;
            };
            let (src_off, tgt_off) = if config.y_first {
                (tlm.segment_boundary + 1, 1)
            } else {
                (1, tlm.segment_boundary + 1)
            };
            let mined = mine_pairs(&tlm.source_kept, &tlm.target_kept, dict, src_off, tgt_off);
            prepared.push(PreparedPair {
                instance_ids: tlm.ids,
                segment_boundary: tlm.segment_boundary,
                mined,
                clean_source_ids: tlm.source_kept.ids.clone(),
                clean_target_ids: tlm.target_kept.ids.clone(),
            });
        }
        if prepared.is_empty() {
            return Err(SamplerError::EmptyParallelCorpus);
        }

        let mono_total = counts.iter().sum();
        Ok(BatchSampler {
            config,
            vocab_size: vocab.size() as u32,
            lang_probs,
            mono_segments,
            prepared,
            skipped_pairs,
            batch_index: 0,
            mono_draws: 0,
            pair_draws: 0,
            mono_total,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn language_probs(&self) -> &[f64] {
        &self.lang_probs
    }

    pub fn prepared_pairs(&self) -> usize {
        self.prepared.len()
    }

    /// Coverage-equivalent epochs over (monolingual lines, parallel pairs).
    pub fn epochs(&self) -> (u64, u64) {
        (
            self.mono_draws / self.mono_total.max(1),
            self.pair_draws / self.prepared.len().max(1) as u64,
        )
    }

    fn batch_rng(&self, batch_index: u64) -> ChaCha20Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.config.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&batch_index.to_le_bytes());
        seed[16..24].copy_from_slice(b"mgcabtch");
        ChaCha20Rng::from_seed(seed)
    }

    /// Emits the next batch: kinds strictly alternate starting monolingual.
    pub fn next_batch(&mut self) -> Batch {
        let rng = &mut self.batch_rng(self.batch_index);
        let kind = if self.batch_index % 2 == 0 {
            BatchKind::Monolingual
        } else {
            BatchKind::Bilingual
        };
        self.batch_index += 1;

        match kind {
            BatchKind::Monolingual => {
                let mut instances = Vec::with_capacity(self.config.batch_size);
                for _ in 0..self.config.batch_size {
                    let lang = loop {
                        let l = sample_index(&self.lang_probs, rng);
                        if !self.mono_segments[l].is_empty() {
                            break l;
                        }
                    };
                    let line = rng.gen_range(0..self.mono_segments[lang].len());
                    self.mono_draws += 1;
                    let ids = self.mono_segments[lang][line].clone();
                    instances.push(apply_mask(
                        &ids,
                        None,
                        self.config.mono_mask_rate,
                        self.vocab_size,
                        rng,
                    ));
                }
                Batch { kind, instances, pairs: Vec::new() }
            }
            BatchKind::Bilingual => {
                let mut instances = Vec::with_capacity(self.config.batch_size);
                let mut pairs = Vec::with_capacity(self.config.batch_size);
                for _ in 0..self.config.batch_size {
                    let idx = rng.gen_range(0..self.prepared.len());
                    self.pair_draws += 1;
                    let prep = &self.prepared[idx];
                    let inst = apply_mask(
                        &prep.instance_ids,
                        Some(prep.segment_boundary),
                        self.config.bi_mask_rate,
                        self.vocab_size,
                        rng,
                    );
                    let usable = drop_masked_pairs(&prep.mined, &inst.mask_positions);
                    pairs.push(PairExtras {
                        clean_source_ids: prep.clean_source_ids.clone(),
                        clean_target_ids: prep.clean_target_ids.clone(),
                        synonyms: usable,
                        synonyms_clean: prep.mined.clone(),
                    });
                    instances.push(inst);
                }
                Batch { kind, instances, pairs }
            }
        }
    }

    /// Counter snapshot for checkpointing.
    pub fn counters(&self) -> SamplerCounters {
        SamplerCounters {
            batch_index: self.batch_index,
            mono_draws: self.mono_draws,
            pair_draws: self.pair_draws,
        }
    }

    pub fn restore_counters(&mut self, counters: &SamplerCounters) {
        self.batch_index = counters.batch_index;
        self.mono_draws = counters.mono_draws;
        self.pair_draws = counters.pair_draws;
    }
}

/// Resume state: with per-batch derived RNG streams, counters are the whole
/// of the sampler's mutable state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerCounters {
    pub batch_index: u64,
    pub mono_draws: u64,
    pub pair_draws: u64,
}
