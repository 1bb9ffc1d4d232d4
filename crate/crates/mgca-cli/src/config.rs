//! Flat key-value run configuration: defaults, overridden by a JSON config
//! file, overridden by command-line flags. Unknown keys are rejected with a
//! nearest-match suggestion; empty-string paths mean "not set".

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use mgca_core::model::ModelConfig;
use mgca_core::objectives::LossConfig;
use mgca_core::sampler::SamplerConfig;
use mgca_core::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // paths ("" = unset)
    pub mono_dir: String,
    pub parallel_path: String,
    pub dict_path: String,
    pub vocab_path: String,
    pub heldout_path: String,
    pub checkpoint_path: String,
    pub out_dir: String,

    // shared RNG seed
    pub seed: u64,

    // tokenizer training
    pub target_vocab: usize,

    // sampler
    pub alpha: f64,
    pub batch_size: usize,
    pub mono_mask_rate: f64,
    pub bi_mask_rate: f64,
    pub max_len_mono: usize,
    pub max_len_bi: usize,
    pub y_first: bool,

    // model
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_positions: usize,

    // objectives
    pub temperature: f64,
    pub enable_seq_ctl: bool,
    pub enable_tok_ctl: bool,
    pub seq_weight: f64,
    pub tok_weight: f64,
    pub ctl_on_clean: bool,

    // optimization
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub checkpoint_every: u64,
    /// Record real elapsed milliseconds in metrics. Off by default so rerun
    /// metrics are byte-reproducible.
    pub wallclock: bool,

    // synthetic cipher corpus generation
    pub cipher: bool,
    pub cipher_words: usize,
    pub cipher_pairs: usize,
    pub cipher_heldout: usize,
    pub cipher_mono_lines: usize,
    pub cipher_coverage: f64,
    pub cipher_seed: u64,

    // evaluation / ablation
    pub ablation_seeds: usize,
    pub alignment_items_per_pair: usize,
    pub sample_draws: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        let model = ModelConfig::default();
        let loss = LossConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            mono_dir: String::new(),
            parallel_path: String::new(),
            dict_path: String::new(),
            vocab_path: String::new(),
            heldout_path: String::new(),
            checkpoint_path: String::new(),
            out_dir: "out".into(),
            seed: sampler.seed,
            target_vocab: 2000,
            alpha: sampler.alpha,
            batch_size: sampler.batch_size,
            mono_mask_rate: sampler.mono_mask_rate,
            bi_mask_rate: sampler.bi_mask_rate,
            max_len_mono: sampler.max_len_mono,
            max_len_bi: sampler.max_len_bi,
            y_first: sampler.y_first,
            layers: model.layers,
            hidden: model.hidden,
            heads: model.heads,
            ffn: model.ffn,
            dropout: model.dropout,
            max_positions: model.max_positions,
            temperature: loss.temperature,
            enable_seq_ctl: loss.enable_seq_ctl,
            enable_tok_ctl: loss.enable_tok_ctl,
            seq_weight: loss.seq_weight,
            tok_weight: loss.tok_weight,
            ctl_on_clean: loss.ctl_on_clean,
            lr_peak: train.lr_peak,
            warmup_steps: train.warmup_steps,
            total_steps: train.total_steps,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            weight_decay: train.weight_decay,
            grad_clip_norm: train.grad_clip_norm,
            checkpoint_every: train.checkpoint_every,
            wallclock: false,
            cipher: false,
            cipher_words: 200,
            cipher_pairs: 2000,
            cipher_heldout: 200,
            cipher_mono_lines: 400,
            cipher_coverage: 0.5,
            cipher_seed: 7,
            ablation_seeds: 3,
            alignment_items_per_pair: 2,
            sample_draws: 100_000,
        }
    }
}

impl RunConfig {
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            alpha: self.alpha,
            batch_size: self.batch_size,
            mono_mask_rate: self.mono_mask_rate,
            bi_mask_rate: self.bi_mask_rate,
            max_len_mono: self.max_len_mono,
            max_len_bi: self.max_len_bi,
            seed: self.seed,
            y_first: self.y_first,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
            max_positions: self.max_positions,
            vocab_size,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            enable_seq_ctl: self.enable_seq_ctl,
            enable_tok_ctl: self.enable_tok_ctl,
            seq_weight: self.seq_weight,
            tok_weight: self.tok_weight,
            ctl_on_clean: self.ctl_on_clean,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_peak: self.lr_peak,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip_norm: self.grad_clip_norm,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn cipher_config(&self) -> mgca_core::cipher::CipherConfig {
        mgca_core::cipher::CipherConfig {
            word_count: self.cipher_words,
            train_pairs: self.cipher_pairs,
            heldout_pairs: self.cipher_heldout,
            mono_lines: self.cipher_mono_lines,
            dictionary_coverage: self.cipher_coverage,
            seed: self.cipher_seed,
            ..mgca_core::cipher::CipherConfig::default()
        }
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut row = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            row.push(sub.min(prev[j + 1] + 1).min(row[j] + 1));
        }
        prev = row;
    }
    prev[b.len()]
}

fn json_kind(v: &serde_json::Value) -> &'static str {
    match v {
        serde_json::Value::Null => "null",
        serde_json::Value::Bool(_) => "boolean",
        serde_json::Value::Number(_) => "number",
        serde_json::Value::String(_) => "string",
        serde_json::Value::Array(_) => "array",
        serde_json::Value::Object(_) => "object",
    }
}

/// Applies `incoming` over `doc`, rejecting unknown keys (with the nearest
/// valid key as a suggestion) and kind mismatches.
fn merge(
    doc: &mut serde_json::Map<String, serde_json::Value>,
    incoming: serde_json::Map<String, serde_json::Value>,
    source: &str,
) -> Result<()> {
    for (key, value) in incoming {
        let Some(current) = doc.get(&key) else {
            let suggestion = doc
                .keys()
                .min_by_key(|k| levenshtein(k, &key))
                .cloned()
                .unwrap_or_default();
            let valid: Vec<&String> = doc.keys().collect();
            bail!(
                "unknown config key {key:?} in {source}; did you mean {suggestion:?}? valid keys: {valid:?}"
            );
        };
        if json_kind(current) != json_kind(&value) {
            bail!(
                "type mismatch for key {key:?} in {source}: expected {}, got {}",
                json_kind(current),
                json_kind(&value)
            );
        }
        doc.insert(key, value);
    }
    Ok(())
}

/// One `--set key=value` flag; the value parses as JSON when it can, and
/// falls back to a plain string.
pub fn parse_set(raw: &str) -> Result<(String, serde_json::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("--set needs key=value, got {raw:?}"))?;
    let parsed = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

/// Resolves the final configuration: defaults < file < --seed/--out < --set.
pub fn resolve(
    config_file: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    sets: &[String],
) -> Result<RunConfig> {
    let mut doc = match serde_json::to_value(RunConfig::default())? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    };

    if let Some(path) = config_file {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let parsed: serde_json::Value = if body.trim().is_empty() {
            serde_json::Value::Object(Default::default())
        } else {
            serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))?
        };
        let serde_json::Value::Object(map) = parsed else {
            bail!("config file must hold a flat JSON object");
        };
        merge(&mut doc, map, &path.display().to_string())?;
    }

    let mut flag_map = serde_json::Map::new();
    if let Some(seed) = seed {
        flag_map.insert("seed".into(), seed.into());
    }
    if let Some(out) = out {
        flag_map.insert("out_dir".into(), out.display().to_string().into());
    }
    merge(&mut doc, flag_map, "flags")?;

    let mut set_map = serde_json::Map::new();
    for raw in sets {
        let (key, value) = parse_set(raw)?;
        set_map.insert(key, value);
    }
    merge(&mut doc, set_map, "--set overrides")?;

    let config: RunConfig = serde_json::from_value(serde_json::Value::Object(doc))
        .context("resolving configuration")?;
    Ok(config)
}

/// Writes the fully resolved config into the run directory for provenance.
pub fn echo_to(config: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("config.json");
    let sorted: BTreeMap<String, serde_json::Value> =
        match serde_json::to_value(config)? {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        };
    std::fs::write(&path, serde_json::to_string_pretty(&sorted)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{}").unwrap();
        let cfg = resolve(Some(&path), None, None, &[]).unwrap();
        assert_eq!(cfg.temperature, RunConfig::default().temperature);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"temperature": 0.1, "seed": 5}"#).unwrap();
        let cfg = resolve(Some(&path), Some(9), None, &["temperature=0.05".into()]).unwrap();
        assert_eq!(cfg.temperature, 0.05);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn misspelled_key_is_rejected_with_suggestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"temprature": 0.1}"#).unwrap();
        let err = resolve(Some(&path), None, None, &[]).unwrap_err().to_string();
        assert!(err.contains("temprature"));
        assert!(err.contains("temperature"), "no suggestion in: {err}");
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = resolve(None, None, None, &[r#"batch_size="eight""#.into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch_size"), "{err}");
        assert!(err.contains("expected number"), "{err}");
    }
}
