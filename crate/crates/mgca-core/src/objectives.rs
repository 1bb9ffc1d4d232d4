//! The four training losses and their per-batch combination.
//!
//! Monolingual batches optimize masked-token cross-entropy alone. Bilingual
//! batches add, on top of the same masked objective over the concatenated
//! instance, two InfoNCE alignment losses:
//!
//! - sequence level: each pooled sentence representation is a query whose
//!   candidates are every other sequence in the batch plus its own mate
//!   (2n-1 candidates); the mate is the positive.
//! - token level: within one instance, each side of a mined synonym pair is
//!   a query over all other content-token representations of the instance;
//!   the opposite side is the positive. Multi-subword dictionary words are
//!   mean-pooled to a single vector replacing their span; unpaired tokens
//!   stay per-subword. Special tokens and masked positions are not
//!   candidates.
//!
//! Similarity is cosine, sharpened by a temperature divisor. Instances with
//! no usable pairs contribute nothing to the token loss and are excluded
//! from its average.

use std::collections::{HashMap, HashSet};

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{pool, ModelError, TapedModel};
use crate::sampler::{Batch, BatchKind, MaskedInstance};
use crate::dictionary::SynonymPairSet;
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("representation lists must be matched and nonempty: {0} vs {1}")]
    MismatchedBatch(usize, usize),
    #[error("synonym span {span:?} escapes instance of length {len}")]
    SpanOutOfRange { span: (usize, usize), len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// InfoNCE temperature divisor.
    pub temperature: f64,
    pub enable_seq_ctl: bool,
    pub enable_tok_ctl: bool,
    /// Optional re-weighting of the alignment terms; the default leaves the
    /// bilingual loss an unweighted sum.
    pub seq_weight: f64,
    pub tok_weight: f64,
    /// Compute contrastive representations from a second, unmasked forward
    /// pass instead of the masked one.
    pub ctl_on_clean: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.05,
            enable_seq_ctl: true,
            enable_tok_ctl: true,
            seq_weight: 1.0,
            tok_weight: 1.0,
            ctl_on_clean: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.temperature > 0.0) {
            return Err(ObjectiveError::BadTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Per-step loss values plus the tape node the optimizer differentiates.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub mlm: f64,
    pub tlm: f64,
    pub seq: f64,
    pub tok: f64,
    pub total: f64,
    /// Fraction of the batch's bilingual pairs with at least one usable
    /// synonym pair.
    pub pair_coverage: f64,
    pub masked_positions: usize,
    pub total_id: TensorId,
}

/// Memoizes cosine nodes; similarity is symmetric so each unordered pair is
/// computed once per tape.
struct SimCache {
    table: HashMap<(usize, usize), TensorId>,
}

impl SimCache {
    fn new() -> Self {
        SimCache { table: HashMap::new() }
    }

    fn get(&mut self, tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let key = (a.0.min(b.0), a.0.max(b.0));
        if let Some(&id) = self.table.get(&key) {
            return Ok(id);
        }
        let sim = tape.cosine_similarity(a, b)?;
        self.table.insert(key, sim);
        Ok(sim)
    }
}

/// One InfoNCE term: -log softmax(scores/tau)[positive].
fn info_nce(
    tape: &mut Tape,
    cache: &mut SimCache,
    query: TensorId,
    candidates: &[TensorId],
    positive: usize,
    temperature: f64,
) -> Result<TensorId, ObjectiveError> {
    let mut scores = Vec::with_capacity(candidates.len());
    for &c in candidates {
        scores.push(cache.get(tape, query, c)?);
    }
    let stacked = tape.stack_scalars(&scores)?;
    let scaled = tape.scale(stacked, 1.0 / temperature)?;
    Ok(tape.softmax_cross_entropy(scaled, positive)?)
}

/// Sequence-to-sequence contrastive loss over a batch of pooled
/// representation pairs: the mean of the 2n per-query InfoNCE terms.
pub fn seq_ctl_loss(
    tape: &mut Tape,
    x_reps: &[TensorId],
    y_reps: &[TensorId],
    temperature: f64,
) -> Result<TensorId, ObjectiveError> {
    if x_reps.is_empty() || x_reps.len() != y_reps.len() {
        return Err(ObjectiveError::MismatchedBatch(x_reps.len(), y_reps.len()));
    }
    if !(temperature > 0.0) {
        return Err(ObjectiveError::BadTemperature(temperature));
    }
    let n = x_reps.len();
    let mut cache = SimCache::new();
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..n {
        // query x_i over X \ {x_i} then all of Y; the mate sits at n-1+i
        let mut candidates: Vec<TensorId> = Vec::with_capacity(2 * n - 1);
        candidates.extend(x_reps.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &id)| id));
        candidates.extend(y_reps.iter().copied());
        terms.push(info_nce(tape, &mut cache, x_reps[i], &candidates, n - 1 + i, temperature)?);

        // query y_i over all of X then Y \ {y_i}; the mate sits at i
        let mut candidates: Vec<TensorId> = Vec::with_capacity(2 * n - 1);
        candidates.extend(x_reps.iter().copied());
        candidates.extend(y_reps.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &id)| id));
        terms.push(info_nce(tape, &mut cache, y_reps[i], &candidates, i, temperature)?);
    }
    let stacked = tape.stack_scalars(&terms)?;
    Ok(tape.mean(stacked)?)
}

/// The candidate set of one bilingual instance: every content-token
/// representation, with each mined pair referring to two of them by index.
#[derive(Debug, Clone)]
pub struct TokenCandidateSet {
    pub reps: Vec<TensorId>,
    /// (source index, target index) into `reps` for each synonym pair.
    pub pairs: Vec<(usize, usize)>,
}

/// Token-to-token contrastive loss for a batch of candidate sets. Returns
/// the loss node and the number of instances that contributed (had pairs).
pub fn tok_ctl_loss(
    tape: &mut Tape,
    sets: &[TokenCandidateSet],
    temperature: f64,
) -> Result<(TensorId, usize), ObjectiveError> {
    if !(temperature > 0.0) {
        return Err(ObjectiveError::BadTemperature(temperature));
    }
    let mut per_instance = Vec::new();
    for set in sets {
        if set.pairs.is_empty() {
            continue;
        }
        let mut cache = SimCache::new();
        let mut terms = Vec::with_capacity(2 * set.pairs.len());
        for &(a, b) in &set.pairs {
            assert!(a < set.reps.len() && b < set.reps.len() && a != b, "bad pair indexing");
            for (query, positive) in [(a, b), (b, a)] {
                // candidates: W \ {query}
                let candidates: Vec<TensorId> = set
                    .reps
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != query)
                    .map(|(_, &id)| id)
                    .collect();
                let positive_idx = if positive < query { positive } else { positive - 1 };
                terms.push(info_nce(
                    tape,
                    &mut cache,
                    set.reps[query],
                    &candidates,
                    positive_idx,
                    temperature,
                )?);
            }
        }
        let stacked = tape.stack_scalars(&terms)?;
        per_instance.push(tape.mean(stacked)?);
    }
    let contributing = per_instance.len();
    if contributing == 0 {
        return Ok((tape.scalar(0.0), 0));
    }
    let stacked = tape.stack_scalars(&per_instance)?;
    Ok((tape.mean(stacked)?, contributing))
}

/// Mean softmax cross-entropy over masked positions. Zero positions (no
/// logits) contribute exactly zero; callers flag that in metrics.
pub fn mlm_loss(
    tape: &mut Tape,
    logits: Option<TensorId>,
    targets: &[usize],
) -> Result<TensorId, ObjectiveError> {
    match logits {
        Some(l) if !targets.is_empty() => Ok(tape.cross_entropy_mean(l, targets)?),
        _ => Ok(tape.scalar(0.0)),
    }
}

/// Builds the token-level candidate set for one encoded instance. Pairs are
/// pooled spans; every other unmasked, non-special position contributes its
/// own hidden row.
pub fn build_token_candidates(
    tape: &mut Tape,
    hidden: TensorId,
    instance: &MaskedInstance,
    pairs: &SynonymPairSet,
    exclude_masked: bool,
) -> Result<TokenCandidateSet, ObjectiveError> {
    let len = instance.attention_length;
    let mut in_pair_span = vec![false; len];
    for p in &pairs.pairs {
        for (start, end) in [p.source, p.target] {
            if end > len || start >= end {
                return Err(ObjectiveError::SpanOutOfRange { span: (start, end), len });
            }
            for pos in start..end {
                in_pair_span[pos] = true;
            }
        }
    }
    let masked: HashSet<usize> = if exclude_masked {
        instance.mask_positions.iter().copied().collect()
    } else {
        HashSet::new()
    };

    let mut reps = Vec::new();
    let mut indices = Vec::new();
    for p in &pairs.pairs {
        let src_positions: Vec<usize> = (p.source.0..p.source.1).collect();
        let tgt_positions: Vec<usize> = (p.target.0..p.target.1).collect();
        let a = pool(tape, hidden, &src_positions)?;
        let b = pool(tape, hidden, &tgt_positions)?;
        reps.push(a);
        let a_idx = reps.len() - 1;
        reps.push(b);
        indices.push((a_idx, a_idx + 1));
    }
    for pos in 0..len {
        if instance.is_special_position(pos) || in_pair_span[pos] || masked.contains(&pos) {
            continue;
        }
        reps.push(tape.row(hidden, pos)?);
    }
    Ok(TokenCandidateSet { reps, pairs: indices })
}

/// Weighted mean of per-instance cross-entropies so the batch loss equals
/// the flat mean over every masked position.
fn pooled_masked_ce(
    tape: &mut Tape,
    per_instance: &[(TensorId, usize)],
) -> Result<TensorId, ObjectiveError> {
    let total: usize = per_instance.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mut weighted = Vec::with_capacity(per_instance.len());
    for &(loss, n) in per_instance {
        weighted.push(tape.scale(loss, n as f64 / total as f64)?);
    }
    let stacked = tape.stack_scalars(&weighted)?;
    Ok(tape.sum(stacked)?)
}

/// Unmasked ids of an instance: masked positions restored from labels.
fn clean_ids(instance: &MaskedInstance) -> Vec<u32> {
    let mut ids = instance.input_ids.clone();
    for &p in &instance.mask_positions {
        ids[p] = instance.label_ids[p];
    }
    ids
}

/// Runs the encoder over a batch and assembles the case-appropriate loss:
/// masked cross-entropy alone for monolingual batches; masked cross-entropy
/// plus the enabled alignment losses for bilingual batches.
pub fn combined_loss(
    tape: &mut Tape,
    model: &TapedModel<'_>,
    batch: &Batch,
    config: &LossConfig,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<LossBundle, ObjectiveError> {
    config.validate()?;

    let mut masked_ce_parts: Vec<(TensorId, usize)> = Vec::new();
    let mut masked_total = 0;
    let mut hiddens = Vec::with_capacity(batch.instances.len());
    for instance in &batch.instances {
        let hidden = model.encode_sequence(
            tape,
            &instance.input_ids,
            instance.attention_length,
            dropout_rng.as_deref_mut(),
        )?;
        hiddens.push(hidden);
        if instance.mask_positions.is_empty() {
            continue;
        }
        let logits = model.mlm_logits(tape, hidden, &instance.mask_positions)?;
        let targets: Vec<usize> = instance
            .mask_positions
            .iter()
            .map(|&p| instance.label_ids[p] as usize)
            .collect();
        let ce = tape.cross_entropy_mean(logits, &targets)?;
        masked_ce_parts.push((ce, targets.len()));
        masked_total += targets.len();
    }
    let masked_ce = pooled_masked_ce(tape, &masked_ce_parts)?;

    match batch.kind {
        BatchKind::Monolingual => {
            let value = tape.value(masked_ce);
            Ok(LossBundle {
                mlm: value,
                tlm: 0.0,
                seq: 0.0,
                tok: 0.0,
                total: value,
                pair_coverage: 0.0,
                masked_positions: masked_total,
                total_id: masked_ce,
            })
        }
        BatchKind::Bilingual => {
            debug_assert_eq!(batch.pairs.len(), batch.instances.len());

            // Representations come from the same masked forward pass unless
            // the clean-input variant is configured.
            let rep_hiddens: Vec<TensorId> = if config.ctl_on_clean {
                let mut clean = Vec::with_capacity(batch.instances.len());
                for instance in &batch.instances {
                    let ids = clean_ids(instance);
                    clean.push(model.encode_sequence(
                        tape,
                        &ids,
                        instance.attention_length,
                        dropout_rng.as_deref_mut(),
                    )?);
                }
                clean
            } else {
                hiddens.clone()
            };

            let mut total_id = masked_ce;
            let tlm_value = tape.value(masked_ce);
            let mut seq_value = 0.0;
            let mut tok_value = 0.0;

            if config.enable_seq_ctl {
                let mut first_reps = Vec::with_capacity(batch.instances.len());
                let mut second_reps = Vec::with_capacity(batch.instances.len());
                for (instance, &hidden) in batch.instances.iter().zip(&rep_hiddens) {
                    let first = instance.first_segment_positions();
                    let second = instance.second_segment_positions();
                    first_reps.push(pool(tape, hidden, &first)?);
                    second_reps.push(pool(tape, hidden, &second)?);
                }
                let seq = seq_ctl_loss(tape, &first_reps, &second_reps, config.temperature)?;
                seq_value = tape.value(seq);
                let weighted = tape.scale(seq, config.seq_weight)?;
                total_id = tape.add(total_id, weighted)?;
            }

            let mut covered = 0usize;
            if config.enable_tok_ctl {
                let mut sets = Vec::with_capacity(batch.instances.len());
                for ((instance, extras), &hidden) in
                    batch.instances.iter().zip(&batch.pairs).zip(&rep_hiddens)
                {
                    let synonyms = if config.ctl_on_clean {
                        &extras.synonyms_clean
                    } else {
                        &extras.synonyms
                    };
                    if !synonyms.is_empty() {
                        covered += 1;
                    }
                    sets.push(build_token_candidates(
                        tape,
                        hidden,
                        instance,
                        synonyms,
                        !config.ctl_on_clean,
                    )?);
                }
                let (tok, contributing) = tok_ctl_loss(tape, &sets, config.temperature)?;
                tok_value = tape.value(tok);
                if contributing > 0 {
                    let weighted = tape.scale(tok, config.tok_weight)?;
                    total_id = tape.add(total_id, weighted)?;
                }
            } else {
                for extras in &batch.pairs {
                    if !extras.synonyms.is_empty() {
                        covered += 1;
                    }
                }
            }

            Ok(LossBundle {
                mlm: 0.0,
                tlm: tlm_value,
                seq: seq_value,
                tok: tok_value,
                total: tape.value(total_id),
                pair_coverage: covered as f64 / batch.pairs.len().max(1) as f64,
                masked_positions: masked_total,
                total_id,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    /// Brute-force InfoNCE over explicit vectors: plain cosine + naive
    /// exp-sum, no tape involved.
    fn oracle_info_nce(query: &[f64], candidates: &[Vec<f64>], positive: usize, tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let scores: Vec<f64> = candidates.iter().map(|c| cos(query, c) / tau).collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        -(scores[positive].exp() / denom).ln()
    }

    fn oracle_seq_loss(xs: &[Vec<f64>], ys: &[Vec<f64>], tau: f64) -> f64 {
        let n = xs.len();
        let mut total = 0.0;
        for i in 0..n {
            let mut cands: Vec<Vec<f64>> = Vec::new();
            for (k, x) in xs.iter().enumerate() {
                if k != i {
                    cands.push(x.clone());
                }
            }
            cands.extend(ys.iter().cloned());
            total += oracle_info_nce(&xs[i], &cands, n - 1 + i, tau);

            let mut cands: Vec<Vec<f64>> = xs.to_vec();
            for (k, y) in ys.iter().enumerate() {
                if k != i {
                    cands.push(y.clone());
                }
            }
            total += oracle_info_nce(&ys[i], &cands, i, tau);
        }
        total / (2 * n) as f64
    }

    fn rand_vecs(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..dim)
                    .map(|j| ((seed as f64 + 1.0) * (i * dim + j + 1) as f64 * 0.7391).sin())
                    .collect()
            })
            .collect()
    }

    fn leaves(tape: &mut Tape, vecs: &[Vec<f64>]) -> Vec<TensorId> {
        vecs.iter().map(|v| tape.var(v.clone(), vec![v.len()])).collect()
    }

    #[test]
    fn seq_loss_single_pair_is_exactly_zero() {
        let mut tape = Tape::new();
        let x = leaves(&mut tape, &rand_vecs(1, 1, 4));
        let y = leaves(&mut tape, &rand_vecs(2, 1, 4));
        let loss = seq_ctl_loss(&mut tape, &x, &y, 0.05).unwrap();
        assert_eq!(tape.value(loss), 0.0);
    }

    #[test]
    fn seq_loss_uniform_similarities_is_log3() {
        // identical vectors make every pairwise similarity equal
        let v = vec![vec![0.3, -0.7, 1.1]; 2];
        let mut tape = Tape::new();
        let x = leaves(&mut tape, &v);
        let y = leaves(&mut tape, &v);
        let loss = seq_ctl_loss(&mut tape, &x, &y, 0.05).unwrap();
        assert!((tape.value(loss) - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seq_loss_matches_brute_force_oracle() {
        for (seed, n, tau) in [(3u64, 2usize, 1.0), (4, 3, 0.1), (5, 5, 0.05)] {
            let xs = rand_vecs(seed, n, 6);
            let ys = rand_vecs(seed + 100, n, 6);
            let mut tape = Tape::new();
            let x = leaves(&mut tape, &xs);
            let y = leaves(&mut tape, &ys);
            let loss = seq_ctl_loss(&mut tape, &x, &y, tau).unwrap();
            let want = oracle_seq_loss(&xs, &ys, tau);
            assert!(
                (tape.value(loss) - want).abs() < 1e-10,
                "n={n} tau={tau}: {} vs {want}",
                tape.value(loss)
            );
        }
    }

    #[test]
    fn seq_loss_is_symmetric_in_x_and_y() {
        let xs = rand_vecs(7, 4, 5);
        let ys = rand_vecs(8, 4, 5);
        let mut tape = Tape::new();
        let x = leaves(&mut tape, &xs);
        let y = leaves(&mut tape, &ys);
        let fwd = seq_ctl_loss(&mut tape, &x, &y, 0.1).unwrap();
        let rev = seq_ctl_loss(&mut tape, &y, &x, 0.1).unwrap();
        assert!((tape.value(fwd) - tape.value(rev)).abs() < 1e-12);
    }

    #[test]
    fn seq_loss_invariant_to_rescaling_one_representation() {
        let xs = rand_vecs(9, 3, 5);
        let ys = rand_vecs(10, 3, 5);
        let mut tape = Tape::new();
        let x = leaves(&mut tape, &xs);
        let y = leaves(&mut tape, &ys);
        let base = seq_ctl_loss(&mut tape, &x, &y, 0.05).unwrap();

        let mut scaled = x.clone();
        scaled[1] = tape.scale(x[1], 37.5).unwrap();
        let rescaled = seq_ctl_loss(&mut tape, &scaled, &y, 0.05).unwrap();
        assert!((tape.value(base) - tape.value(rescaled)).abs() < 1e-9);
    }

    #[test]
    fn lower_temperature_sharpens_when_positive_dominates() {
        // mates nearly aligned, non-mates near orthogonal
        let xs = vec![unit(&[1.0, 0.01, 0.0]), unit(&[0.0, 1.0, 0.01])];
        let ys = vec![unit(&[1.0, 0.0, 0.01]), unit(&[0.01, 1.0, 0.0])];
        let mut tape = Tape::new();
        let x = leaves(&mut tape, &xs);
        let y = leaves(&mut tape, &ys);
        let warm = seq_ctl_loss(&mut tape, &x, &y, 0.2).unwrap();
        let cold = seq_ctl_loss(&mut tape, &x, &y, 0.05).unwrap();
        assert!(tape.value(cold) < tape.value(warm));
    }

    #[test]
    fn tok_loss_two_token_candidate_set_is_zero() {
        let mut tape = Tape::new();
        let reps = leaves(&mut tape, &rand_vecs(11, 2, 4));
        let set = TokenCandidateSet { reps, pairs: vec![(0, 1)] };
        let (loss, contributing) = tok_ctl_loss(&mut tape, &[set], 0.05).unwrap();
        assert_eq!(tape.value(loss), 0.0);
        assert_eq!(contributing, 1);
    }

    #[test]
    fn tok_loss_identical_reps_is_log_m_minus_one() {
        let m = 7;
        let vecs = vec![vec![0.4, -0.2, 0.9]; m];
        let mut tape = Tape::new();
        let reps = leaves(&mut tape, &vecs);
        let set = TokenCandidateSet { reps, pairs: vec![(0, 1), (2, 3)] };
        let (loss, _) = tok_ctl_loss(&mut tape, &[set], 0.05).unwrap();
        assert!((tape.value(loss) - ((m - 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn tok_loss_matches_brute_force_oracle() {
        let vecs = rand_vecs(12, 6, 5);
        let pairs = vec![(0usize, 3usize), (1, 4)];
        let tau = 0.1;

        let mut tape = Tape::new();
        let reps = leaves(&mut tape, &vecs);
        let set = TokenCandidateSet { reps, pairs: pairs.clone() };
        let (loss, _) = tok_ctl_loss(&mut tape, &[set], tau).unwrap();

        let mut terms = Vec::new();
        for &(a, b) in &pairs {
            for (q, pos) in [(a, b), (b, a)] {
                let cands: Vec<Vec<f64>> = vecs
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != q)
                    .map(|(_, v)| v.clone())
                    .collect();
                let pos_idx = if pos < q { pos } else { pos - 1 };
                terms.push(oracle_info_nce(&vecs[q], &cands, pos_idx, tau));
            }
        }
        let want = terms.iter().sum::<f64>() / terms.len() as f64;
        assert!((tape.value(loss) - want).abs() < 1e-10);
    }

    #[test]
    fn tok_loss_skips_instances_without_pairs() {
        let mut tape = Tape::new();
        let with = TokenCandidateSet {
            reps: leaves(&mut tape, &vec![vec![0.4, -0.2, 0.9]; 4]),
            pairs: vec![(0, 1)],
        };
        let without = TokenCandidateSet { reps: leaves(&mut tape, &rand_vecs(14, 3, 3)), pairs: vec![] };
        let (loss, contributing) = tok_ctl_loss(&mut tape, &[with.clone(), without.clone()], 0.05).unwrap();
        assert_eq!(contributing, 1);
        // average over contributing instances only: equals the lone instance's loss
        let (alone, _) = tok_ctl_loss(&mut tape, &[with], 0.05).unwrap();
        assert!((tape.value(loss) - tape.value(alone)).abs() < 1e-15);

        let (empty, zero) = tok_ctl_loss(&mut tape, &[without], 0.05).unwrap();
        assert_eq!(zero, 0);
        assert_eq!(tape.value(empty), 0.0);
    }

    #[test]
    fn mlm_loss_uniform_model_is_log_vocab() {
        let mut tape = Tape::new();
        let v = 23;
        let logits = tape.var(vec![0.11; 2 * v], vec![2, v]);
        let loss = mlm_loss(&mut tape, Some(logits), &[4, 9]).unwrap();
        assert!((tape.value(loss) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_zero_positions_contributes_zero() {
        let mut tape = Tape::new();
        let loss = mlm_loss(&mut tape, None, &[]).unwrap();
        assert_eq!(tape.value(loss), 0.0);
        assert!(!tape.requires_grad(loss));
    }

    #[test]
    fn mlm_loss_is_mean_of_row_cross_entropies() {
        let rows = [
            vec![1.0, 2.0, 3.0, -1.0],
            vec![0.0, 0.5, -0.5, 2.0],
            vec![-2.0, 0.0, 1.0, 1.0],
        ];
        let targets = [2usize, 0, 3];
        let mut flat = Vec::new();
        rows.iter().for_each(|r| flat.extend(r));
        let mut tape = Tape::new();
        let logits = tape.var(flat, vec![3, 4]);
        let loss = mlm_loss(&mut tape, Some(logits), &targets).unwrap();

        // independent arithmetic: mean of three -log softmax terms
        let mut want = 0.0;
        for (r, &t) in rows.iter().zip(&targets) {
            let denom: f64 = r.iter().map(|&v| v.exp()).sum();
            want += -(r[t].exp() / denom).ln();
        }
        want /= 3.0;
        assert!((tape.value(loss) - want).abs() < 1e-12);
    }

    mod combined {
        use super::super::*;
        use crate::dictionary::Dictionary;
        use crate::model::{Model, ModelConfig};
        use crate::sampler::{BatchSampler, MonoCorpus, ParallelCorpus, SamplerConfig};
        use crate::tokenizer::train_vocab;

        fn pipeline() -> (Model, BatchSampler) {
            let mono = MonoCorpus::from_parts(vec![
                ("src".into(), vec!["aa bb cc dd".into(), "bb dd aa".into()]),
                ("tgt".into(), vec!["xx yy zz".into(), "zz xx".into()]),
            ])
            .unwrap();
            let parallel = ParallelCorpus::from_pairs(
                vec![
                    ("aa bb cc".into(), "xx yy zz".into()),
                    ("bb dd".into(), "yy ww".into()),
                    ("cc aa dd".into(), "zz xx ww".into()),
                ],
                "src-tgt",
            )
            .unwrap();
            let vocab = train_vocab(["aa bb cc dd xx yy zz ww"], 60).unwrap();
            let dict = Dictionary::from_lines(["aa xx", "bb yy", "cc zz", "dd ww"]);
            let sampler_cfg = SamplerConfig { batch_size: 3, seed: 11, ..SamplerConfig::default() };
            let sampler = BatchSampler::new(sampler_cfg, &mono, &parallel, &vocab, &dict).unwrap();
            let model_cfg = ModelConfig {
                layers: 2,
                hidden: 16,
                heads: 4,
                ffn: 32,
                dropout: 0.0,
                max_positions: 64,
                vocab_size: vocab.size(),
            };
            let model = Model::init(model_cfg, 7).unwrap();
            (model, sampler)
        }

        #[test]
        fn monolingual_total_is_mlm_alone() {
            let (model, mut sampler) = pipeline();
            // walk to a mono batch that actually selected positions to mask
            let batch = loop {
                let b = sampler.next_batch();
                if b.kind == BatchKind::Monolingual
                    && b.instances.iter().any(|i| !i.mask_positions.is_empty())
                {
                    break b;
                }
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let bundle =
                combined_loss(&mut tape, &bound, &batch, &LossConfig::default(), None).unwrap();
            assert_eq!(bundle.total, bundle.mlm);
            assert_eq!(bundle.tlm, 0.0);
            assert_eq!(bundle.seq, 0.0);
            assert_eq!(bundle.tok, 0.0);
            assert!(bundle.mlm > 0.0);
            assert!(bundle.masked_positions > 0);
        }

        #[test]
        fn bilingual_with_ctls_disabled_reduces_to_tlm() {
            let (model, mut sampler) = pipeline();
            sampler.next_batch();
            let batch = sampler.next_batch();
            assert_eq!(batch.kind, BatchKind::Bilingual);
            let cfg = LossConfig {
                enable_seq_ctl: false,
                enable_tok_ctl: false,
                ..LossConfig::default()
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let bundle = combined_loss(&mut tape, &bound, &batch, &cfg, None).unwrap();
            assert_eq!(bundle.total, bundle.tlm);
            assert_eq!(bundle.seq, 0.0);
            assert_eq!(bundle.tok, 0.0);
        }

        #[test]
        fn bilingual_total_is_sum_of_components() {
            let (model, mut sampler) = pipeline();
            sampler.next_batch();
            let batch = sampler.next_batch();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let bundle =
                combined_loss(&mut tape, &bound, &batch, &LossConfig::default(), None).unwrap();
            let want = bundle.tlm + bundle.seq + bundle.tok;
            assert!((bundle.total - want).abs() < 1e-12);
            assert!(bundle.seq > 0.0);
            assert!(bundle.pair_coverage > 0.0);
        }

        #[test]
        fn backward_reaches_the_embeddings() {
            let (model, mut sampler) = pipeline();
            sampler.next_batch();
            let batch = sampler.next_batch();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let bundle =
                combined_loss(&mut tape, &bound, &batch, &LossConfig::default(), None).unwrap();
            tape.backward(bundle.total_id).unwrap();
            let grad = tape.grad(bound.param_ids()[0]).expect("token embedding gradient");
            assert!(grad.iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn both_losses_are_nonnegative_on_random_inputs() {
        for seed in 0..40u64 {
            let n = 1 + (seed as usize % 5);
            let xs = rand_vecs(seed, n, 4);
            let ys = rand_vecs(seed + 1000, n, 4);
            let mut tape = Tape::new();
            let x = leaves(&mut tape, &xs);
            let y = leaves(&mut tape, &ys);
            let seq = seq_ctl_loss(&mut tape, &x, &y, 0.07).unwrap();
            assert!(tape.value(seq) >= 0.0, "seed {seed}: L_seq {}", tape.value(seq));

            let m = 2 + (seed as usize % 6);
            let reps = leaves(&mut tape, &rand_vecs(seed + 2000, m, 4));
            let set = TokenCandidateSet { reps, pairs: vec![(0, 1)] };
            let (tok, _) = tok_ctl_loss(&mut tape, &[set], 0.07).unwrap();
            assert!(tape.value(tok) >= 0.0, "seed {seed}: L_tok {}", tape.value(tok));
        }
    }

    #[test]
    fn gradients_of_both_ctl_losses_match_finite_differences() {
        use crate::gradcheck::{check_gradient, DEFAULT_H};

        // L_seq wrt one representation vector
        let xs = rand_vecs(21, 3, 4);
        let ys = rand_vecs(22, 3, 4);
        let mut tape = Tape::new();
        let x = leaves(&mut tape, &xs);
        let y = leaves(&mut tape, &ys);
        let loss = seq_ctl_loss(&mut tape, &x, &y, 0.1).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x[1]).unwrap().to_vec();
        let mut eval = |p: &[f64]| {
            let mut xs2 = xs.clone();
            xs2[1] = p.to_vec();
            let mut t = Tape::new();
            let x2 = leaves(&mut t, &xs2);
            let y2 = leaves(&mut t, &ys);
            let l = seq_ctl_loss(&mut t, &x2, &y2, 0.1).unwrap();
            t.value(l)
        };
        let coords: Vec<usize> = (0..4).collect();
        assert!(check_gradient(&mut eval, &xs[1], &analytic, &coords, DEFAULT_H, 1e-9) < 1e-6);

        // L_tok wrt one candidate representation
        let vecs = rand_vecs(23, 5, 4);
        let pairs = vec![(0usize, 2usize), (1, 4)];
        let mut tape = Tape::new();
        let reps = leaves(&mut tape, &vecs);
        let set = TokenCandidateSet { reps: reps.clone(), pairs: pairs.clone() };
        let (loss, _) = tok_ctl_loss(&mut tape, &[set], 0.1).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(reps[2]).unwrap().to_vec();
        let mut eval = |p: &[f64]| {
            let mut vs = vecs.clone();
            vs[2] = p.to_vec();
            let mut t = Tape::new();
            let r = leaves(&mut t, &vs);
            let s = TokenCandidateSet { reps: r, pairs: pairs.clone() };
            let (l, _) = tok_ctl_loss(&mut t, &[s], 0.1).unwrap();
            t.value(l)
        };
        assert!(check_gradient(&mut eval, &vecs[2], &analytic, &coords, DEFAULT_H, 1e-9) < 1e-6);
    }
}
