//! Evaluation harness: parallel-sentence retrieval accuracy, synonym
//! alignment accuracy, the transfer-gap statistic, and the four-arm
//! ablation runner.
//!
//! Retrieval encodes each side as a clean single-segment input, pools, and
//! cosine-matches every source against all targets; accuracy@1 with ties
//! broken toward the lowest index and reported. Alignment encodes the clean
//! concatenated pair once and asks whether the dictionary-correct target
//! word is the cosine-argmax among the target sentence's words.
//!
//! The ablation protocol keeps data order, seeds, and step counts identical
//! across arms; only the objective toggles differ. Batch-stream digests
//! from every run are compared to prove it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cipher::CipherCorpus;
use crate::dictionary::Dictionary;
use crate::model::{pool, Model, ModelConfig, ModelError};
use crate::objectives::LossConfig;
use crate::sampler::{build_tlm_instance, BatchSampler, SamplerConfig, SamplerError};
use crate::tensor::{cosine, Tape, TensorError};
use crate::tokenizer::Vocab;
use crate::trainer::{TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("retrieval needs at least two pairs, got {0}")]
    SetTooSmall(usize),
    #[error("retrieval pair {0} has an empty side")]
    EmptySide(usize),
    #[error("pooled representation is degenerate (zero vector)")]
    DegenerateRepresentation,
    #[error("transfer gap needs at least one non-English score")]
    NoOtherLanguages,
    #[error("representation lists differ in length: {0} vs {1}")]
    MismatchedReps(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Held-out parallel pairs, never seen in training.
#[derive(Debug, Clone)]
pub struct RetrievalSet {
    pub pairs: Vec<(String, String)>,
}

impl RetrievalSet {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self, EvalError> {
        if pairs.len() < 2 {
            return Err(EvalError::SetTooSmall(pairs.len()));
        }
        for (i, (s, t)) in pairs.iter().enumerate() {
            if s.trim().is_empty() || t.trim().is_empty() {
                return Err(EvalError::EmptySide(i));
            }
        }
        Ok(RetrievalSet { pairs })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub ties: usize,
    pub items: usize,
}

/// Accuracy@1 by cosine argmax over explicit representation vectors.
/// The first maximum wins, so ties resolve to the lowest index; the number
/// of tied items is reported alongside.
pub fn retrieval_accuracy_from_reps(
    sources: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<RetrievalReport, EvalError> {
    if sources.len() != targets.len() {
        return Err(EvalError::MismatchedReps(sources.len(), targets.len()));
    }
    if sources.len() < 2 {
        return Err(EvalError::SetTooSmall(sources.len()));
    }
    let mut hits = 0;
    let mut ties = 0;
    for (i, src) in sources.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        let mut tied = false;
        for (j, tgt) in targets.iter().enumerate() {
            let sim = cosine(src, tgt)?;
            if sim > best {
                best = sim;
                best_idx = j;
                tied = false;
            } else if sim == best {
                tied = true;
            }
        }
        if tied {
            ties += 1;
        }
        if best_idx == i {
            hits += 1;
        }
    }
    Ok(RetrievalReport {
        accuracy: hits as f64 / sources.len() as f64,
        ties,
        items: sources.len(),
    })
}

/// Clean single-segment encoding pooled over content positions.
pub fn encode_pooled(
    model: &Model,
    vocab: &Vocab,
    text: &str,
    max_len: usize,
) -> Result<Vec<f64>, EvalError> {
    let tok = vocab.encode(text).truncated(max_len.saturating_sub(2));
    if tok.is_empty() {
        return Err(EvalError::DegenerateRepresentation);
    }
    let mut ids = Vec::with_capacity(tok.len() + 2);
    ids.push(crate::tokenizer::CLS_ID);
    ids.extend(&tok.ids);
    ids.push(crate::tokenizer::SEP_ID);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let hidden = bound.encode_sequence(&mut tape, &ids, ids.len(), None)?;
    let positions: Vec<usize> = (1..ids.len() - 1).collect();
    let pooled = pool(&mut tape, hidden, &positions)?;
    let rep = tape.data(pooled).to_vec();
    if rep.iter().all(|&v| v == 0.0) {
        return Err(EvalError::DegenerateRepresentation);
    }
    Ok(rep)
}

/// Accuracy@1 of matching each held-out source sentence to its translation
/// among all held-out targets.
pub fn retrieval_accuracy(
    model: &Model,
    vocab: &Vocab,
    set: &RetrievalSet,
    max_len: usize,
) -> Result<RetrievalReport, EvalError> {
    let sources: Vec<Vec<f64>> = set
        .pairs
        .par_iter()
        .map(|(s, _)| encode_pooled(model, vocab, s, max_len))
        .collect::<Result<_, _>>()?;
    let targets: Vec<Vec<f64>> = set
        .pairs
        .par_iter()
        .map(|(_, t)| encode_pooled(model, vocab, t, max_len))
        .collect::<Result<_, _>>()?;
    retrieval_accuracy_from_reps(&sources, &targets)
}

/// One alignment test item: a source word in context and the
/// dictionary-correct target word among the paired sentence's words.
#[derive(Debug, Clone)]
pub struct AlignmentItem {
    pub source_sentence: String,
    pub target_sentence: String,
    pub source_word_index: usize,
    pub target_word_index: usize,
}

/// Builds alignment items from held-out pairs with the same uniqueness
/// rules the miner applies, capped per pair to keep evaluation flat.
pub fn build_alignment_items(
    pairs: &[(String, String)],
    dict: &Dictionary,
    vocab: &Vocab,
    max_per_pair: usize,
) -> Vec<AlignmentItem> {
    let mut items = Vec::new();
    for (src_text, tgt_text) in pairs {
        let src = vocab.encode(src_text);
        let tgt = vocab.encode(tgt_text);
        let mined = crate::dictionary::mine_pairs(&src, &tgt, dict, 0, 0);
        for p in mined.pairs.iter().take(max_per_pair) {
            // word indices recovered from the side-local spans
            let src_idx = src.spans.iter().position(|&s| s == p.source);
            let tgt_idx = tgt.spans.iter().position(|&s| s == p.target);
            if let (Some(si), Some(ti)) = (src_idx, tgt_idx) {
                // only meaningful with at least two target candidates
                if tgt.words.len() >= 2 {
                    items.push(AlignmentItem {
                        source_sentence: src_text.clone(),
                        target_sentence: tgt_text.clone(),
                        source_word_index: si,
                        target_word_index: ti,
                    });
                }
            }
        }
    }
    items
}

/// Fraction of items where the correct target word's representation is the
/// cosine-argmax for the source word, among all target words of the pair's
/// clean concatenated encoding. Empty item lists score zero.
pub fn synonym_alignment_accuracy(
    model: &Model,
    vocab: &Vocab,
    items: &[AlignmentItem],
    max_len_bi: usize,
) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let hits: usize = items
        .par_iter()
        .map(|item| -> Result<usize, EvalError> {
            let src = vocab.encode(&item.source_sentence);
            let tgt = vocab.encode(&item.target_sentence);
            let Some(tlm) = build_tlm_instance(&src, &tgt, max_len_bi, false) else {
                return Ok(0);
            };
            // items whose words fell to truncation cannot be scored
            if item.source_word_index >= tlm.source_kept.words.len()
                || item.target_word_index >= tlm.target_kept.words.len()
            {
                return Ok(0);
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let hidden = bound.encode_sequence(&mut tape, &tlm.ids, tlm.ids.len(), None)?;

            let src_off = 1;
            let tgt_off = tlm.segment_boundary + 1;
            let (ss, se) = tlm.source_kept.spans[item.source_word_index];
            let query_positions: Vec<usize> = (ss + src_off..se + src_off).collect();
            let query = pool(&mut tape, hidden, &query_positions)?;
            let query = tape.data(query).to_vec();

            let mut best = f64::NEG_INFINITY;
            let mut best_word = 0;
            for (w, &(ts, te)) in tlm.target_kept.spans.iter().enumerate() {
                let positions: Vec<usize> = (ts + tgt_off..te + tgt_off).collect();
                let rep = pool(&mut tape, hidden, &positions)?;
                let sim = cosine(&query, tape.data(rep))?;
                if sim > best {
                    best = sim;
                    best_word = w;
                }
            }
            Ok((best_word == item.target_word_index) as usize)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / items.len() as f64)
}

/// English score minus the mean of the other languages' scores. Zero means
/// perfect cross-lingual transfer; lower is better.
pub fn transfer_gap(english_score: f64, other_scores: &[f64]) -> Result<f64, EvalError> {
    if other_scores.is_empty() {
        return Err(EvalError::NoOtherLanguages);
    }
    let mean = other_scores.iter().sum::<f64>() / other_scores.len() as f64;
    Ok(english_score - mean)
}

// ── ablation ─────────────────────────────────────────────────────────

/// The four objective configurations, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationArm {
    Baseline,
    SeqCtl,
    TokCtl,
    Mctl,
}

pub const ABLATION_ARMS: [AblationArm; 4] =
    [AblationArm::Baseline, AblationArm::SeqCtl, AblationArm::TokCtl, AblationArm::Mctl];

impl AblationArm {
    pub fn label(self) -> &'static str {
        match self {
            AblationArm::Baseline => "MLM+TLM",
            AblationArm::SeqCtl => "MLM+TLM+Seq-Seq CTL",
            AblationArm::TokCtl => "MLM+TLM+Tok-Tok CTL",
            AblationArm::Mctl => "MLM+TLM+MCTL",
        }
    }

    pub fn loss_config(self, base: &LossConfig) -> LossConfig {
        let (seq, tok) = match self {
            AblationArm::Baseline => (false, false),
            AblationArm::SeqCtl => (true, false),
            AblationArm::TokCtl => (false, true),
            AblationArm::Mctl => (true, true),
        };
        LossConfig { enable_seq_ctl: seq, enable_tok_ctl: tok, ..base.clone() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub steps: u64,
    pub seeds: Vec<u64>,
    /// Cap on alignment items harvested per held-out pair.
    pub alignment_items_per_pair: usize,
}

/// One (arm, seed) training run's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub retrieval_accuracy: f64,
    pub alignment_accuracy: f64,
    pub first_step_loss: f64,
    pub stream_hash: u64,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub label: String,
    pub cells: Vec<AblationCell>,
    pub mean_retrieval: f64,
    pub mean_alignment: f64,
    /// Deltas against the baseline row's means.
    pub delta_retrieval: f64,
    pub delta_alignment: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// True when every seed's batch-stream digest matches across arms.
    pub streams_identical: bool,
}

impl AblationReport {
    pub fn row(&self, arm: AblationArm) -> &AblationRow {
        self.rows.iter().find(|r| r.arm == arm).expect("arm present")
    }

    /// Seed-majority vote that `arm` strictly beats baseline by more than
    /// `margin` on the given metric.
    pub fn majority_improves(
        &self,
        arm: AblationArm,
        metric: fn(&AblationCell) -> f64,
        margin: f64,
    ) -> bool {
        let base = self.row(AblationArm::Baseline);
        let row = self.row(arm);
        let wins = row
            .cells
            .iter()
            .zip(&base.cells)
            .filter(|(a, b)| {
                a.failed.is_none() && b.failed.is_none() && metric(a) > metric(b) + margin
            })
            .count();
        wins * 2 > row.cells.len()
    }

    /// Plain-text table mirroring the report JSON.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>10} {:>8} {:>10} {:>8}\n",
            "objectives", "retrieval", "delta", "alignment", "delta"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>10.4} {:>+8.4} {:>10.4} {:>+8.4}\n",
                row.label,
                row.mean_retrieval,
                row.delta_retrieval,
                row.mean_alignment,
                row.delta_alignment,
            ));
        }
        out.push_str(&format!(
            "batch streams identical across arms: {}\n",
            self.streams_identical
        ));
        out
    }
}

fn run_one(
    corpus: &CipherCorpus,
    settings: &AblationSettings,
    arm: AblationArm,
    seed: u64,
) -> AblationCell {
    let attempt = || -> Result<AblationCell, TrainError> {
        let sampler_cfg = SamplerConfig { seed, ..settings.sampler.clone() };
        let sampler = BatchSampler::new(
            sampler_cfg,
            &corpus.mono,
            &corpus.train,
            &corpus.vocab,
            &corpus.dictionary,
        )?;
        let model_cfg = ModelConfig { vocab_size: corpus.vocab.size(), ..settings.model.clone() };
        let model = Model::init(model_cfg, seed)?;
        let train_cfg = TrainConfig {
            seed,
            total_steps: settings.steps,
            ..settings.train.clone()
        };
        let mut trainer = Trainer::new(model, sampler, arm.loss_config(&settings.loss), train_cfg)?;

        let mut first_step_loss = f64::NAN;
        trainer.run(settings.steps, |m| {
            if m.step == 1 {
                first_step_loss = m.total;
            }
        })?;

        let set = RetrievalSet::new(corpus.heldout.clone())
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        let retrieval = retrieval_accuracy(
            &trainer.model,
            &corpus.vocab,
            &set,
            settings.sampler.max_len_mono,
        )
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        let items = build_alignment_items(
            &corpus.heldout,
            &corpus.dictionary,
            &corpus.vocab,
            settings.alignment_items_per_pair,
        );
        let alignment = synonym_alignment_accuracy(
            &trainer.model,
            &corpus.vocab,
            &items,
            settings.sampler.max_len_bi,
        )
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;

        Ok(AblationCell {
            seed,
            retrieval_accuracy: retrieval.accuracy,
            alignment_accuracy: alignment,
            first_step_loss,
            stream_hash: trainer.stream_hash,
            failed: None,
        })
    };
    attempt().unwrap_or_else(|e| AblationCell {
        seed,
        retrieval_accuracy: f64::NAN,
        alignment_accuracy: f64::NAN,
        first_step_loss: f64::NAN,
        stream_hash: 0,
        failed: Some(e.to_string()),
    })
}

/// Trains all four arms on identical data and seeds and reports metric
/// deltas against the MLM+TLM baseline. Arms x seeds run in parallel; a
/// failed run marks its cell and leaves the rest standing.
pub fn run_ablation(corpus: &CipherCorpus, settings: &AblationSettings) -> AblationReport {
    let jobs: Vec<(AblationArm, u64)> = ABLATION_ARMS
        .iter()
        .flat_map(|&arm| settings.seeds.iter().map(move |&s| (arm, s)))
        .collect();
    let cells: Vec<((AblationArm, u64), AblationCell)> = jobs
        .par_iter()
        .map(|&(arm, seed)| ((arm, seed), run_one(corpus, settings, arm, seed)))
        .collect();

    let mean = |values: Vec<f64>| {
        let ok: Vec<f64> = values.into_iter().filter(|v| v.is_finite()).collect();
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        }
    };

    let mut rows: Vec<AblationRow> = ABLATION_ARMS
        .iter()
        .map(|&arm| {
            let cells: Vec<AblationCell> = cells
                .iter()
                .filter(|((a, _), _)| *a == arm)
                .map(|(_, c)| c.clone())
                .collect();
            let mean_retrieval = mean(cells.iter().map(|c| c.retrieval_accuracy).collect());
            let mean_alignment = mean(cells.iter().map(|c| c.alignment_accuracy).collect());
            AblationRow {
                arm,
                label: arm.label().to_string(),
                cells,
                mean_retrieval,
                mean_alignment,
                delta_retrieval: 0.0,
                delta_alignment: 0.0,
            }
        })
        .collect();

    let (base_r, base_a) = (rows[0].mean_retrieval, rows[0].mean_alignment);
    for row in &mut rows {
        row.delta_retrieval = row.mean_retrieval - base_r;
        row.delta_alignment = row.mean_alignment - base_a;
    }

    // per seed, every arm must have digested the same batch stream
    let streams_identical = settings.seeds.iter().all(|&seed| {
        let digests: Vec<u64> = cells
            .iter()
            .filter(|((_, s), c)| *s == seed && c.failed.is_none())
            .map(|(_, c)| c.stream_hash)
            .collect();
        digests.windows(2).all(|w| w[0] == w[1])
    });

    AblationReport { rows, streams_identical }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_gap_definition_cases() {
        assert_eq!(transfer_gap(90.0, &[80.0, 80.0]).unwrap(), 10.0);
        assert_eq!(transfer_gap(77.7, &[77.7, 77.7, 77.7]).unwrap(), 0.0);
        // the published XNLI row: en 88.2 against a 79.3 non-English mean
        let gap = transfer_gap(88.2, &[79.3]).unwrap();
        assert!((gap - 8.9).abs() < 0.05);
        assert!(matches!(transfer_gap(1.0, &[]), Err(EvalError::NoOtherLanguages)));
    }

    #[test]
    fn transfer_gap_is_translation_equivariant() {
        let others = [70.0, 75.5, 81.25];
        let base = transfer_gap(88.0, &others).unwrap();
        let shifted: Vec<f64> = others.iter().map(|v| v + 11.5).collect();
        let moved = transfer_gap(88.0 + 11.5, &shifted).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn perfect_representations_retrieve_perfectly() {
        // each pair gets its own one-hot axis: an oracle encoder
        let n = 6;
        let onehot = |i: usize| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        };
        let reps: Vec<Vec<f64>> = (0..n).map(onehot).collect();
        let report = retrieval_accuracy_from_reps(&reps, &reps).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.ties, 0);
    }

    #[test]
    fn hand_built_similarity_matrix_matches_exhaustive_argmax() {
        let sources = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![-1.0, 0.2],
        ];
        let targets = vec![
            vec![0.9, 0.1],
            vec![1.0, 0.9],
            vec![0.1, 1.0],
            vec![-0.5, 0.0],
        ];
        // brute-force argmax oracle over the explicit similarity matrix
        let mut expected_hits = 0;
        for (i, s) in sources.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (j, t) in targets.iter().enumerate() {
                let sim = cosine(s, t).unwrap();
                if sim > best {
                    best = sim;
                    arg = j;
                }
            }
            if arg == i {
                expected_hits += 1;
            }
        }
        let report = retrieval_accuracy_from_reps(&sources, &targets).unwrap();
        assert!((report.accuracy - expected_hits as f64 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn ties_resolve_to_lowest_index_and_are_reported() {
        let sources = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let targets = vec![vec![2.0, 0.0], vec![4.0, 0.0]]; // identical directions
        let report = retrieval_accuracy_from_reps(&sources, &targets).unwrap();
        // both queries tie across the identically-oriented targets; the
        // lowest index wins each time, so only source 0 scores
        assert_eq!(report.ties, 2);
        assert_eq!(report.accuracy, 0.5);
    }

    mod trained {
        use super::*;
        use crate::cipher::{generate, CipherConfig};

        fn tiny_corpus() -> CipherCorpus {
            generate(&CipherConfig {
                word_count: 30,
                train_pairs: 60,
                heldout_pairs: 12,
                mono_lines: 30,
                seed: 5,
                ..CipherConfig::default()
            })
            .unwrap()
        }

        #[test]
        fn random_encoder_retrieves_at_chance_level() {
            // 1000 pairs whose sides are unrelated random sentences: a frozen
            // random encoder should hit ~1/1000. Binomial(1000, 1e-3) puts
            // nine or more hits at p < 1e-6.
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(404);
            let words = ["ba", "do", "ki", "lu", "me", "na", "po", "ri", "sa", "tu"];
            let mut sentence = |rng: &mut rand_chacha::ChaCha20Rng| {
                let len = rng.gen_range(3..=10);
                (0..len)
                    .map(|_| words[rng.gen_range(0..words.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let pairs: Vec<(String, String)> =
                (0..1000).map(|_| (sentence(&mut rng), sentence(&mut rng))).collect();
            let vocab = crate::tokenizer::train_vocab(
                pairs.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
                120,
            )
            .unwrap();
            let model = Model::init(
                ModelConfig {
                    layers: 1,
                    hidden: 16,
                    heads: 2,
                    ffn: 32,
                    dropout: 0.0,
                    max_positions: 64,
                    vocab_size: vocab.size(),
                },
                99,
            )
            .unwrap();
            let set = RetrievalSet::new(pairs).unwrap();
            let report = retrieval_accuracy(&model, &vocab, &set, 32).unwrap();
            assert!(
                report.accuracy <= 8.0 / 1000.0,
                "above chance: {}",
                report.accuracy
            );
        }

        #[test]
        fn random_encoder_aligns_synonyms_at_chance_level() {
            let corpus = tiny_corpus();
            let model = Model::init(
                ModelConfig {
                    layers: 1,
                    hidden: 16,
                    heads: 2,
                    ffn: 32,
                    dropout: 0.0,
                    max_positions: 64,
                    vocab_size: corpus.vocab.size(),
                },
                1234,
            )
            .unwrap();
            let items =
                build_alignment_items(&corpus.heldout, &corpus.dictionary, &corpus.vocab, 2);
            let acc =
                synonym_alignment_accuracy(&model, &corpus.vocab, &items, 24).unwrap();
            // candidates per item are the 3-7 target words; chance is 1/k
            assert!(acc < 0.8, "suspiciously aligned: {acc}");
        }

        #[test]
        fn single_candidate_target_scores_trivially() {
            // one word on the target side: the argmax cannot miss
            let corpus = tiny_corpus();
            let model = Model::init(
                ModelConfig {
                    layers: 1,
                    hidden: 16,
                    heads: 2,
                    ffn: 32,
                    dropout: 0.0,
                    max_positions: 64,
                    vocab_size: corpus.vocab.size(),
                },
                7,
            )
            .unwrap();
            let (src_word, translations) = corpus.dictionary.iter().next().unwrap();
            let tgt_word = translations.iter().next().unwrap();
            let items = vec![super::AlignmentItem {
                source_sentence: src_word.clone(),
                target_sentence: tgt_word.clone(),
                source_word_index: 0,
                target_word_index: 0,
            }];
            let acc = synonym_alignment_accuracy(&model, &corpus.vocab, &items, 24).unwrap();
            assert_eq!(acc, 1.0);
        }

        #[test]
        fn alignment_items_respect_dictionary_ground_truth() {
            let corpus = tiny_corpus();
            let items =
                build_alignment_items(&corpus.heldout, &corpus.dictionary, &corpus.vocab, 2);
            assert!(!items.is_empty());
            for item in &items {
                let src_word =
                    item.source_sentence.split(' ').nth(item.source_word_index).unwrap();
                let tgt_word =
                    item.target_sentence.split(' ').nth(item.target_word_index).unwrap();
                assert!(corpus.dictionary.translations(src_word).unwrap().contains(tgt_word));
            }
        }

        #[test]
        fn ablation_protocol_shares_streams_and_first_loss() {
            let corpus = tiny_corpus();
            let settings = AblationSettings {
                model: ModelConfig {
                    layers: 1,
                    hidden: 16,
                    heads: 2,
                    ffn: 32,
                    dropout: 0.1,
                    max_positions: 64,
                    vocab_size: corpus.vocab.size(),
                },
                sampler: SamplerConfig { batch_size: 4, ..SamplerConfig::default() },
                train: TrainConfig { warmup_steps: 5, ..TrainConfig::default() },
                loss: LossConfig::default(),
                steps: 8,
                seeds: vec![1, 2],
                alignment_items_per_pair: 2,
            };
            let report = run_ablation(&corpus, &settings);
            assert!(report.streams_identical);
            assert_eq!(report.rows.len(), 4);
            for seed_pos in 0..2 {
                let first: Vec<f64> = report
                    .rows
                    .iter()
                    .map(|r| r.cells[seed_pos].first_step_loss)
                    .collect();
                for v in &first {
                    assert!(v.is_finite());
                    assert!((v - first[0]).abs() < 1e-12, "first-step losses diverge: {first:?}");
                }
            }
            for row in &report.rows {
                for cell in &row.cells {
                    assert!(cell.failed.is_none());
                }
            }
            let table = report.render_table();
            assert!(table.contains("MLM+TLM+MCTL"));
        }
    }
}
