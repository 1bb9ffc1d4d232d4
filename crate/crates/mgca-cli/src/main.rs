//! Command-line entry point wiring the whole pipeline: vocabulary training,
//! synonym-mining inspection, sampler statistics, pre-training, evaluation,
//! the four-arm ablation, and the finite-difference self-check.
//!
//! Exit status: 0 success, 1 usage error (arguments, config, missing
//! inputs), 2 runtime failure. All errors go to stderr. Every run directory
//! receives the fully resolved `config.json` for provenance; reruns from it
//! reproduce their metrics byte-for-byte (enable `wallclock` to trade that
//! for real timings).

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use config::{echo_to, resolve, RunConfig};
use mgca_core::cipher;
use mgca_core::dictionary::{mine_pairs, Dictionary};
use mgca_core::eval::{
    build_alignment_items, retrieval_accuracy, run_ablation, synonym_alignment_accuracy,
    AblationSettings, RetrievalSet,
};
use mgca_core::gradcheck;
use mgca_core::model::Model;
use mgca_core::sampler::{
    build_tlm_instance, language_sampling_probs, sample_index, BatchSampler, MonoCorpus,
    ParallelCorpus,
};
use mgca_core::tokenizer::{train_vocab, Vocab};
use mgca_core::trainer::{checkpoint, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Parser)]
#[command(name = "mgca", version, about = "multi-granularity contrastive alignment pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Per-key override, repeatable: --set key=value.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a subword vocabulary and write it to <out>/vocab.txt.
    TrainVocab,
    /// Mine synonym pairs over the parallel corpus and print statistics.
    Mine,
    /// Print analytic vs empirical language-sampling probabilities.
    SampleStats,
    /// Run the pre-training loop, writing metrics and checkpoints.
    Pretrain,
    /// Evaluate a checkpoint: retrieval and synonym-alignment accuracy.
    Eval,
    /// Train the four objective configurations and report metric deltas.
    Ablate,
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck,
}

/// Usage errors exit 1; runtime failures exit 2.
enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => e,
        }
    }
}

fn usage<T>(r: Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Usage)
}

fn runtime<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Runtime(e.into()))
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("MGCA_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output is not an error
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let cfg = match resolve(cli.config.as_deref(), cli.seed, cli.out.as_deref(), &cli.sets) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(1);
        }
    };

    let result = dispatch(&cli.command, &cfg);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    let out = PathBuf::from(&cfg.out_dir);
    usage(echo_to(cfg, &out).map(|_| ()))?;
    match command {
        Command::TrainVocab => cmd_train_vocab(cfg, &out),
        Command::Mine => cmd_mine(cfg, &out),
        Command::SampleStats => cmd_sample_stats(cfg, &out),
        Command::Pretrain => cmd_pretrain(cfg, &out),
        Command::Eval => cmd_eval(cfg, &out),
        Command::Ablate => cmd_ablate(cfg, &out),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

/// Inputs a command can draw either from explicit paths or from the
/// generated cipher corpus.
struct Bundle {
    mono: MonoCorpus,
    parallel: ParallelCorpus,
    vocab: Vocab,
    dict: Dictionary,
    heldout: Vec<(String, String)>,
}

fn require<'p>(path: &'p str, key: &str) -> Result<&'p Path, CliError> {
    if path.is_empty() {
        return Err(CliError::Usage(anyhow!(
            "{key} is not set (provide it in the config, with --set {key}=..., or use cipher=true)"
        )));
    }
    Ok(Path::new(path))
}

fn read_heldout(path: &Path) -> Result<Vec<(String, String)>> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("reading heldout pairs {}", path.display()))?;
    Ok(body
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect())
}

fn load_bundle(cfg: &RunConfig, out: &Path) -> Result<Bundle, CliError> {
    if cfg.cipher {
        let corpus = runtime(cipher::generate(&cfg.cipher_config()))?;
        let corpus_dir = out.join("corpus");
        runtime(cipher::write_to_dir(&corpus, &corpus_dir))?;
        eprintln!("cipher corpus materialized under {}", corpus_dir.display());
        return Ok(Bundle {
            mono: corpus.mono,
            parallel: corpus.train,
            vocab: corpus.vocab,
            dict: corpus.dictionary,
            heldout: corpus.heldout,
        });
    }
    let mono = runtime(MonoCorpus::load_dir(require(&cfg.mono_dir, "mono_dir")?))?;
    let parallel =
        runtime(ParallelCorpus::load_tsv(require(&cfg.parallel_path, "parallel_path")?))?;
    let vocab = runtime(Vocab::load(require(&cfg.vocab_path, "vocab_path")?))?;
    let dict = runtime(Dictionary::load(require(&cfg.dict_path, "dict_path")?))?;
    let heldout = if cfg.heldout_path.is_empty() {
        Vec::new()
    } else {
        runtime(read_heldout(Path::new(&cfg.heldout_path)))?
    };
    Ok(Bundle { mono, parallel, vocab, dict, heldout })
}

fn cmd_train_vocab(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut lines: Vec<String> = Vec::new();
    if cfg.cipher {
        let corpus = runtime(cipher::generate(&cfg.cipher_config()))?;
        for i in 0..corpus.mono.languages().len() {
            lines.extend(corpus.mono.lines(i).iter().cloned());
        }
        for (s, t) in &corpus.train.pairs {
            lines.push(s.clone());
            lines.push(t.clone());
        }
    } else {
        let mono = runtime(MonoCorpus::load_dir(require(&cfg.mono_dir, "mono_dir")?))?;
        for i in 0..mono.languages().len() {
            lines.extend(mono.lines(i).iter().cloned());
        }
        if !cfg.parallel_path.is_empty() {
            let parallel = runtime(ParallelCorpus::load_tsv(Path::new(&cfg.parallel_path)))?;
            for (s, t) in &parallel.pairs {
                lines.push(s.clone());
                lines.push(t.clone());
            }
        }
    }
    let vocab = runtime(train_vocab(lines.iter(), cfg.target_vocab))?;
    let path = out.join("vocab.txt");
    runtime(vocab.save(&path))?;
    println!("trained vocabulary: {} tokens -> {}", vocab.size(), path.display());
    Ok(())
}

fn cmd_mine(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let bundle = load_bundle(cfg, out)?;
    let mut histogram: Vec<usize> = Vec::new();
    let mut total_pairs = 0usize;
    let mut covered = 0usize;
    let mut skipped = 0usize;
    let mut samples: Vec<String> = Vec::new();
    for (s, t) in &bundle.parallel.pairs {
        let src = bundle.vocab.encode(s);
        let tgt = bundle.vocab.encode(t);
        let Some(tlm) = build_tlm_instance(&src, &tgt, cfg.max_len_bi, cfg.y_first) else {
            skipped += 1;
            continue;
        };
        let (src_off, tgt_off) = if cfg.y_first {
            (tlm.segment_boundary + 1, 1)
        } else {
            (1, tlm.segment_boundary + 1)
        };
        let set = mine_pairs(&tlm.source_kept, &tlm.target_kept, &bundle.dict, src_off, tgt_off);
        if histogram.len() <= set.len() {
            histogram.resize(set.len() + 1, 0);
        }
        histogram[set.len()] += 1;
        total_pairs += set.len();
        if !set.is_empty() {
            covered += 1;
        }
        if samples.len() < 5 && !set.is_empty() {
            let rendered: Vec<String> = set
                .pairs
                .iter()
                .map(|p| {
                    format!(
                        "{}->{} [{}..{} ~ {}..{}]",
                        p.source_word, p.target_word, p.source.0, p.source.1, p.target.0, p.target.1
                    )
                })
                .collect();
            samples.push(format!("  {s} ||| {t}: {}", rendered.join(", ")));
        }
    }
    let scanned = bundle.parallel.pairs.len();
    println!("pairs scanned: {scanned} (skipped {skipped})");
    println!(
        "mined pairs: {total_pairs} total, coverage {:.4} ({covered}/{scanned} instances with |S| >= 1)",
        covered as f64 / scanned.max(1) as f64
    );
    println!("pairs-per-instance histogram: {histogram:?}");
    println!("sample alignments:");
    for s in samples {
        println!("{s}");
    }
    Ok(())
}

fn cmd_sample_stats(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (languages, counts): (Vec<String>, Vec<u64>) = if cfg.cipher {
        let corpus = runtime(cipher::generate(&cfg.cipher_config()))?;
        (corpus.mono.languages().to_vec(), corpus.mono.counts())
    } else {
        let mono = runtime(MonoCorpus::load_dir(require(&cfg.mono_dir, "mono_dir")?))?;
        (mono.languages().to_vec(), mono.counts())
    };
    let probs = runtime(language_sampling_probs(&counts, cfg.alpha))?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut hits = vec![0u64; probs.len()];
    for _ in 0..cfg.sample_draws {
        hits[sample_index(&probs, &mut rng)] += 1;
    }
    let empirical: Vec<f64> =
        hits.iter().map(|&h| h as f64 / cfg.sample_draws.max(1) as f64).collect();

    println!("alpha {} over {} draws", cfg.alpha, cfg.sample_draws);
    println!("{:<10} {:>10} {:>10} {:>10}", "language", "count", "analytic", "empirical");
    for (i, lang) in languages.iter().enumerate() {
        println!(
            "{:<10} {:>10} {:>10.4} {:>10.4}",
            lang, counts[i], probs[i], empirical[i]
        );
    }
    let fmt = |v: &[f64]| v.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(" / ");
    println!("analytic {}", fmt(&probs));
    println!("empirical {}", fmt(&empirical));
    let _ = out;
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let bundle = load_bundle(cfg, out)?;
    let mut trainer = if cfg.checkpoint_path.is_empty() {
        let sampler = runtime(BatchSampler::new(
            cfg.sampler_config(),
            &bundle.mono,
            &bundle.parallel,
            &bundle.vocab,
            &bundle.dict,
        ))?;
        let model = runtime(Model::init(cfg.model_config(bundle.vocab.size()), cfg.seed))?;
        runtime(Trainer::new(model, sampler, cfg.loss_config(), cfg.train_config()))?
    } else {
        eprintln!("resuming from {}", cfg.checkpoint_path);
        runtime(checkpoint::load(
            Path::new(&cfg.checkpoint_path),
            &bundle.mono,
            &bundle.parallel,
            &bundle.vocab,
            &bundle.dict,
        ))?
    };
    if cfg.wallclock {
        trainer = trainer.with_real_clock();
    }

    let total = trainer.train_config.total_steps;
    if trainer.step >= total {
        println!("checkpoint already at step {} of {total}; nothing to do", trainer.step);
        return Ok(());
    }
    let metrics_path = out.join("metrics.jsonl");
    let file = runtime(
        std::fs::OpenOptions::new()
            .create(true)
            .append(trainer.step > 0)
            .truncate(trainer.step == 0)
            .write(true)
            .open(&metrics_path),
    )?;
    let mut metrics = std::io::BufWriter::new(file);

    let every = trainer.train_config.checkpoint_every;
    while trainer.step < total {
        let m = runtime(trainer.step_once())?;
        runtime(writeln!(metrics, "{}", m.to_json_line()))?;
        if (every > 0 && m.step % every == 0) || m.step == total {
            runtime(metrics.flush())?;
            let path = out.join(format!("ckpt_step{}.bin", m.step));
            runtime(checkpoint::save(&trainer, &path))?;
            eprintln!("saved {}", path.display());
        }
    }
    runtime(metrics.flush())?;
    println!(
        "pre-training complete: {total} steps, metrics at {}, stream hash {:016x}",
        metrics_path.display(),
        trainer.stream_hash
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ckpt = require(&cfg.checkpoint_path, "checkpoint_path")?;
    let (model, step) = runtime(checkpoint::load_model(ckpt))?;

    let (vocab, dict, heldout) = if cfg.cipher {
        let corpus = runtime(cipher::generate(&cfg.cipher_config()))?;
        (corpus.vocab, corpus.dictionary, corpus.heldout)
    } else {
        let vocab = runtime(Vocab::load(require(&cfg.vocab_path, "vocab_path")?))?;
        let dict = runtime(Dictionary::load(require(&cfg.dict_path, "dict_path")?))?;
        let heldout = runtime(read_heldout(require(&cfg.heldout_path, "heldout_path")?))?;
        (vocab, dict, heldout)
    };

    let set = runtime(RetrievalSet::new(heldout.clone()))?;
    let report = runtime(retrieval_accuracy(&model, &vocab, &set, cfg.max_len_mono))?;
    let items =
        build_alignment_items(&heldout, &dict, &vocab, cfg.alignment_items_per_pair);
    let alignment =
        runtime(synonym_alignment_accuracy(&model, &vocab, &items, cfg.max_len_bi))?;

    println!("checkpoint step: {step}");
    println!(
        "retrieval accuracy@1: {:.4} over {} pairs ({} ties)",
        report.accuracy, report.items, report.ties
    );
    println!(
        "synonym alignment accuracy@1: {alignment:.4} over {} items",
        items.len()
    );
    let _ = out;
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let bundle = load_bundle(cfg, out)?;
    if bundle.heldout.is_empty() {
        return Err(CliError::Usage(anyhow!(
            "ablation needs held-out pairs: set heldout_path or cipher=true"
        )));
    }
    let corpus = cipher::CipherCorpus {
        mono: bundle.mono,
        train: bundle.parallel,
        heldout: bundle.heldout,
        dictionary: bundle.dict,
        vocab: bundle.vocab,
    };
    let settings = AblationSettings {
        model: cfg.model_config(corpus.vocab.size()),
        sampler: cfg.sampler_config(),
        train: cfg.train_config(),
        loss: cfg.loss_config(),
        steps: cfg.total_steps,
        seeds: (0..cfg.ablation_seeds as u64).map(|i| cfg.seed + i).collect(),
        alignment_items_per_pair: cfg.alignment_items_per_pair,
    };
    let report = run_ablation(&corpus, &settings);
    print!("{}", report.render_table());
    let path = out.join("ablation.json");
    runtime(std::fs::write(&path, runtime(serde_json::to_string_pretty(&report))?))?;
    println!("report written to {}", path.display());
    let failures: usize = report
        .rows
        .iter()
        .flat_map(|r| r.cells.iter())
        .filter(|c| c.failed.is_some())
        .count();
    if failures > 0 {
        return Err(CliError::Runtime(anyhow!("{failures} ablation cells failed")));
    }
    Ok(())
}

fn cmd_gradcheck() -> Result<(), CliError> {
    let report = gradcheck::run_suite();
    for check in &report.checks {
        println!(
            "{} {:<28} rel err {:.3e} (tolerance {:.0e})",
            if check.passed() { "PASS" } else { "FAIL" },
            check.name,
            check.max_rel_err,
            check.tolerance
        );
    }
    println!("max relative error: {:.3e}", report.max_rel_err());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("gradient check failed")))
    }
}
