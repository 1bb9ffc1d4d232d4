//! Central finite-difference gradient verification.
//!
//! The checker only ever calls the forward evaluation closure, so it stays
//! independent of the reverse-mode path it is judging. `run_suite` drives the
//! end-to-end battery the `gradcheck` CLI command reports on: every tape
//! primitive on random small tensors, then the alignment losses through a
//! small encoder.

use crate::tensor::{Tape, TensorError, TensorId};

/// Default step for central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero gradients do not
/// explode the ratio: |a - n| / max(|a|, |n|, floor).
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Compares an analytic gradient against central differences on the listed
/// coordinates. Returns the worst relative error observed.
pub fn check_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    floor: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = central_diff(f, x, i, h);
        worst = worst.max(rel_err(analytic[i], numeric, floor));
    }
    worst
}

/// One named check in the suite.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Builds a scalar-valued tape program from a flat parameter vector and
/// returns (tape, leaf, output) so the same construction serves both the
/// analytic backward pass and the numeric re-evaluations.
type Program = dyn Fn(&mut Tape, &[f64]) -> Result<(TensorId, TensorId), TensorError>;

fn check_program(name: &str, x: &[f64], program: &Program, tol: f64, floor: f64) -> CheckResult {
    let mut tape = Tape::new();
    let (leaf, out) = program(&mut tape, x).expect("forward failed");
    tape.backward(out).expect("backward failed");
    let analytic = tape.grad(leaf).expect("no gradient").to_vec();

    let mut eval = |p: &[f64]| -> f64 {
        let mut t = Tape::new();
        let (_, o) = program(&mut t, p).expect("forward failed");
        t.value(o)
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    let max = check_gradient(&mut eval, x, &analytic, &coords, DEFAULT_H, floor);
    CheckResult { name: name.to_string(), max_rel_err: max, tolerance: tol }
}

/// Deterministic pseudo-random values in [-1, 1] for oracle inputs.
fn lcg_values(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Finite-difference battery over every tape primitive, each wired into a
/// scalar objective. Tolerance 1e-6 at 64-bit precision.
pub fn primitive_suite() -> GradCheckReport {
    const TOL: f64 = 1e-6;
    const FLOOR: f64 = 1e-9;
    let mut report = GradCheckReport::default();
    let mut run = |name: &str, n: usize, seed: u64, program: Box<Program>| {
        let x = lcg_values(seed, n);
        report.checks.push(check_program(name, &x, program.as_ref(), TOL, FLOOR));
    };

    // Weights mixed into each objective so gradients are not uniform.
    run("matmul_chain", 12, 11, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![4, 3]);
        let b = t.constant(lcg_values(101, 6), vec![3, 2]);
        let c = t.matmul(a, b)?;
        let w = t.constant(lcg_values(102, 8), vec![4, 2]);
        let p = t.mul(c, w)?;
        let s = t.sum(p)?;
        Ok((a, s))
    }));
    run("matmul_rhs", 6, 12, Box::new(|t, x| {
        let a = t.constant(lcg_values(103, 12), vec![4, 3]);
        let b = t.var(x.to_vec(), vec![3, 2]);
        let c = t.matmul(a, b)?;
        let s = t.sum(c)?;
        Ok((b, s))
    }));
    run("add_sub_mul_scale", 8, 13, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![2, 4]);
        let b = t.constant(lcg_values(104, 8), vec![2, 4]);
        let c = t.add(a, b)?;
        let d = t.sub(c, a)?;
        let e = t.mul(d, a)?;
        let f = t.scale(e, 1.7)?;
        let s = t.mean(f)?;
        Ok((a, s))
    }));
    run("transpose", 6, 14, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![2, 3]);
        let at = t.transpose(a)?;
        let w = t.constant(lcg_values(105, 6), vec![3, 2]);
        let p = t.mul(at, w)?;
        let s = t.sum(p)?;
        Ok((a, s))
    }));
    run("row_broadcast_bias", 3, 15, Box::new(|t, x| {
        let a = t.constant(lcg_values(106, 12), vec![4, 3]);
        let bias = t.var(x.to_vec(), vec![3]);
        let c = t.add_row_broadcast(a, bias)?;
        let w = t.constant(lcg_values(107, 12), vec![4, 3]);
        let p = t.mul(c, w)?;
        let s = t.sum(p)?;
        Ok((bias, s))
    }));
    run("slice_concat_row", 12, 16, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![3, 4]);
        let left = t.slice_cols(a, 0, 2)?;
        let right = t.slice_cols(a, 2, 2)?;
        let swapped = t.concat_cols(&[right, left])?;
        let r = t.row(swapped, 1)?;
        let w = t.constant(lcg_values(108, 4), vec![4]);
        let p = t.mul(r, w)?;
        let s = t.sum(p)?;
        Ok((a, s))
    }));
    run("mean_rows", 12, 17, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![4, 3]);
        let m = t.mean_rows(a, &[0, 2, 3])?;
        let w = t.constant(lcg_values(109, 3), vec![3]);
        let p = t.mul(m, w)?;
        let s = t.sum(p)?;
        Ok((a, s))
    }));
    run("softmax_rows", 8, 18, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![2, 4]);
        let sm = t.softmax_rows(a)?;
        let w = t.constant(lcg_values(110, 8), vec![2, 4]);
        let p = t.mul(sm, w)?;
        let s = t.sum(p)?;
        Ok((a, s))
    }));
    run("layer_norm_x", 8, 19, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![2, 4]);
        let gain = t.constant(vec![1.1, 0.9, 1.3, 0.7], vec![4]);
        let bias = t.constant(vec![0.1, -0.2, 0.3, 0.0], vec![4]);
        let y = t.layer_norm(a, gain, bias, 1e-9)?;
        let w = t.constant(lcg_values(111, 8), vec![2, 4]);
        let p = t.mul(y, w)?;
        let s = t.sum(p)?;
        Ok((a, s))
    }));
    run("layer_norm_gain", 4, 20, Box::new(|t, x| {
        let a = t.constant(lcg_values(112, 12), vec![3, 4]);
        let gain = t.var(x.to_vec(), vec![4]);
        let bias = t.constant(vec![0.1, -0.2, 0.3, 0.0], vec![4]);
        let y = t.layer_norm(a, gain, bias, 1e-9)?;
        let w = t.constant(lcg_values(113, 12), vec![3, 4]);
        let p = t.mul(y, w)?;
        let s = t.sum(p)?;
        Ok((gain, s))
    }));
    run("layer_norm_bias", 4, 26, Box::new(|t, x| {
        let a = t.constant(lcg_values(117, 12), vec![3, 4]);
        let gain = t.constant(vec![1.2, 0.8, 1.0, 1.1], vec![4]);
        let bias = t.var(x.to_vec(), vec![4]);
        let y = t.layer_norm(a, gain, bias, 1e-9)?;
        let w = t.constant(lcg_values(118, 12), vec![3, 4]);
        let p = t.mul(y, w)?;
        let s = t.sum(p)?;
        Ok((bias, s))
    }));
    run("gelu", 6, 21, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![6]);
        let g = t.gelu(a)?;
        let w = t.constant(lcg_values(114, 6), vec![6]);
        let p = t.mul(g, w)?;
        let s = t.sum(p)?;
        Ok((a, s))
    }));
    run("gather", 8, 22, Box::new(|t, x| {
        let table = t.var(x.to_vec(), vec![4, 2]);
        let e = t.gather(table, &[1, 3, 1, 0])?;
        let w = t.constant(lcg_values(115, 8), vec![4, 2]);
        let p = t.mul(e, w)?;
        let s = t.sum(p)?;
        Ok((table, s))
    }));
    run("cross_entropy_mean", 10, 23, Box::new(|t, x| {
        let logits = t.var(x.to_vec(), vec![2, 5]);
        let loss = t.cross_entropy_mean(logits, &[3, 1])?;
        Ok((logits, loss))
    }));
    run("cosine_similarity", 5, 24, Box::new(|t, x| {
        let u = t.var(x.to_vec(), vec![5]);
        let v = t.constant(lcg_values(116, 5), vec![5]);
        let c = t.cosine_similarity(u, v)?;
        Ok((u, c))
    }));
    run("stack_scalars_softmax_ce", 4, 25, Box::new(|t, x| {
        let a = t.var(x.to_vec(), vec![4]);
        let parts: Vec<TensorId> = (0..4)
            .map(|i| {
                let w = t.constant(onehot(i, 4), vec![4]);
                let p = t.mul(a, w).unwrap();
                t.sum(p).unwrap()
            })
            .collect();
        let stacked = t.stack_scalars(&parts)?;
        let loss = t.softmax_cross_entropy(stacked, 2)?;
        Ok((a, loss))
    }));

    report
}

fn onehot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

// ── encoder-level checks ─────────────────────────────────────────────

use crate::cipher::{generate, CipherConfig};

use crate::model::{pool, Model, ModelConfig};
use crate::objectives::{build_token_candidates, combined_loss, seq_ctl_loss, tok_ctl_loss, LossConfig};
use crate::sampler::{Batch, BatchKind, BatchSampler, SamplerConfig};

/// Scalar objective evaluated through a freshly bound model.
type EncoderLoss = dyn Fn(&mut Tape, &crate::model::TapedModel<'_>) -> TensorId + Sync;

fn flat_params(model: &Model) -> Vec<f64> {
    model.named_params().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
}

fn write_flat(model: &mut Model, flat: &[f64]) {
    let mut offset = 0;
    for (_, t) in model.named_params_mut() {
        let n = t.data.len();
        t.data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len());
}

fn eval_loss(model: &Model, loss: &EncoderLoss) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let id = loss(&mut tape, &bound);
    tape.value(id)
}

fn analytic_flat_grad(model: &Model, loss: &EncoderLoss) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let id = loss(&mut tape, &bound);
    tape.backward(id).expect("backward");
    bound
        .param_ids()
        .iter()
        .zip(model.named_params())
        .flat_map(|(&pid, (_, t))| match tape.grad(pid) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect()
}

/// Deterministic sample of `fraction` of the coordinate indices.
fn sample_coords(total: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let want = ((total as f64 * fraction).ceil() as usize).clamp(1, total);
    let mut state = seed | 1;
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < want {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        picked.insert((state >> 17) as usize % total);
    }
    picked.into_iter().collect()
}

/// Central-difference check of one encoder-level loss on a parameter
/// sample. Returns the worst relative error.
pub fn check_encoder_loss(
    model: &Model,
    loss: &EncoderLoss,
    fraction: f64,
    seed: u64,
) -> f64 {
    let base = flat_params(model);
    let analytic = analytic_flat_grad(model, loss);
    let coords = sample_coords(base.len(), fraction, seed);
    let mut scratch = model.clone();
    let mut eval = |p: &[f64]| {
        write_flat(&mut scratch, p);
        eval_loss(&scratch, loss)
    };
    check_gradient(&mut eval, &base, &analytic, &coords, DEFAULT_H, 1e-6)
}

/// The fixture the encoder-level battery runs on: a tiny cipher corpus, a
/// 2-layer / hidden-16 model, one monolingual and one bilingual batch that
/// both carry masked positions (and the bilingual one, synonym pairs).
pub struct EncoderFixture {
    pub model: Model,
    pub mono_batch: Batch,
    pub bilingual_batch: Batch,
}

pub fn encoder_fixture(seed: u64) -> EncoderFixture {
    let corpus = generate(&CipherConfig {
        word_count: 30,
        train_pairs: 40,
        heldout_pairs: 6,
        mono_lines: 24,
        seed,
        ..CipherConfig::default()
    })
    .expect("cipher corpus");
    let model = Model::init(
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 4,
            ffn: 32,
            dropout: 0.0,
            max_positions: 64,
            vocab_size: corpus.vocab.size(),
        },
        seed,
    )
    .expect("model");
    let mut sampler = BatchSampler::new(
        SamplerConfig { batch_size: 3, seed, ..SamplerConfig::default() },
        &corpus.mono,
        &corpus.train,
        &corpus.vocab,
        &corpus.dictionary,
    )
    .expect("sampler");

    let mut mono_batch = None;
    let mut bilingual_batch = None;
    while mono_batch.is_none() || bilingual_batch.is_none() {
        let b = sampler.next_batch();
        let has_masks = b.instances.iter().any(|i| !i.mask_positions.is_empty());
        match b.kind {
            BatchKind::Monolingual if mono_batch.is_none() && has_masks => mono_batch = Some(b),
            BatchKind::Bilingual
                if bilingual_batch.is_none()
                    && has_masks
                    && b.pairs.iter().any(|p| !p.synonyms.is_empty()) =>
            {
                bilingual_batch = Some(b)
            }
            _ => {}
        }
    }
    EncoderFixture {
        model,
        mono_batch: mono_batch.unwrap(),
        bilingual_batch: bilingual_batch.unwrap(),
    }
}

/// Builds the four encoder-level objectives over the fixture's fixed
/// batches: sequence CTL, token CTL, MLM, and the full combined loss.
pub fn encoder_losses(fixture: &EncoderFixture) -> Vec<(&'static str, Box<EncoderLoss>)> {
    let temperature = 0.1;
    let bi = fixture.bilingual_batch.clone();
    let seq = {
        let bi = bi.clone();
        move |tape: &mut Tape, bound: &crate::model::TapedModel<'_>| {
            let mut firsts = Vec::new();
            let mut seconds = Vec::new();
            for inst in &bi.instances {
                let hidden = bound
                    .encode_sequence(tape, &inst.input_ids, inst.attention_length, None)
                    .unwrap();
                firsts.push(pool(tape, hidden, &inst.first_segment_positions()).unwrap());
                seconds.push(pool(tape, hidden, &inst.second_segment_positions()).unwrap());
            }
            seq_ctl_loss(tape, &firsts, &seconds, temperature).unwrap()
        }
    };
    let tok = {
        let bi = bi.clone();
        move |tape: &mut Tape, bound: &crate::model::TapedModel<'_>| {
            let mut sets = Vec::new();
            for (inst, extras) in bi.instances.iter().zip(&bi.pairs) {
                let hidden = bound
                    .encode_sequence(tape, &inst.input_ids, inst.attention_length, None)
                    .unwrap();
                sets.push(
                    build_token_candidates(tape, hidden, inst, &extras.synonyms, true).unwrap(),
                );
            }
            tok_ctl_loss(tape, &sets, temperature).unwrap().0
        }
    };
    let mono = fixture.mono_batch.clone();
    let mlm = move |tape: &mut Tape, bound: &crate::model::TapedModel<'_>| {
        let mut parts = Vec::new();
        for inst in &mono.instances {
            if inst.mask_positions.is_empty() {
                continue;
            }
            let hidden = bound
                .encode_sequence(tape, &inst.input_ids, inst.attention_length, None)
                .unwrap();
            let logits = bound.mlm_logits(tape, hidden, &inst.mask_positions).unwrap();
            let targets: Vec<usize> =
                inst.mask_positions.iter().map(|&p| inst.label_ids[p] as usize).collect();
            let ce = tape.cross_entropy_mean(logits, &targets).unwrap();
            parts.push(tape.scale(ce, targets.len() as f64).unwrap());
        }
        let stacked = tape.stack_scalars(&parts).unwrap();
        let summed = tape.sum(stacked).unwrap();
        let total: usize =
            mono.instances.iter().map(|i| i.mask_positions.len()).sum();
        tape.scale(summed, 1.0 / total as f64).unwrap()
    };
    let combined = {
        let bi = bi.clone();
        let cfg = LossConfig { temperature, ..LossConfig::default() };
        move |tape: &mut Tape, bound: &crate::model::TapedModel<'_>| {
            combined_loss(tape, bound, &bi, &cfg, None).unwrap().total_id
        }
    };
    vec![
        ("seq_ctl_through_encoder", Box::new(seq) as Box<EncoderLoss>),
        ("tok_ctl_through_encoder", Box::new(tok)),
        ("mlm_through_encoder", Box::new(mlm)),
        ("combined_through_encoder", Box::new(combined)),
    ]
}

/// Encoder battery at the acceptance tolerance: 1% of parameters, relative
/// error below 1e-4.
pub fn encoder_suite() -> GradCheckReport {
    let fixture = encoder_fixture(17);
    let mut report = GradCheckReport::default();
    for (name, loss) in encoder_losses(&fixture) {
        let err = check_encoder_loss(&fixture.model, loss.as_ref(), 0.01, 0x5eed + name.len() as u64);
        report.checks.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: 1e-4,
        });
    }
    report
}

/// Everything the `gradcheck` command reports: primitives then encoder
/// losses.
pub fn run_suite() -> GradCheckReport {
    let mut report = primitive_suite();
    report.checks.extend(encoder_suite().checks);
    report
}
