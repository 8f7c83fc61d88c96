mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use hypermixer::bench::{self, TimingRecord};
use hypermixer::flops;
use hypermixer::layers::{MixingKind, TokenMixer, TokenMixingSpec};
use hypermixer::synthetic::{self, MapFormat, SynthConfig, SynthVariant};
use hypermixer::tensor::GradcheckOptions;
use hypermixer::text::{self, Vocabulary};
use hypermixer::trainer::{self, TextClassification, TrialRecord};
use hypermixer::{verify, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "hypermixer-cli", version, about = "HyperMixer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of every op and mixing variant.
    Gradcheck {
        /// Check only this variant (and skip the op suite).
        #[arg(long)]
        variant: Option<MixingKind>,
        /// Use a deliberately wrong GELU backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train one model on the synthetic shape task.
    Synth {
        #[arg(long)]
        variant: SynthVariant,
        #[arg(long, default_value_t = 5000)]
        examples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time single-example token-mixing forward passes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "hypermixer_tied,attention")]
        variants: Vec<MixingKind>,
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
        n_grid: Vec<usize>,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long = "dprime", default_value_t = 512)]
        d_prime: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Capacity of fixed-length mixers (default depends on the kind).
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Closed-form operation counts of HyperMixer and attention.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024,2048,4096")]
        n_grid: Vec<u64>,
        #[arg(long, default_value_t = 256)]
        d: u64,
        #[arg(long = "dprime", default_value_t = 512)]
        d_prime: u64,
        #[arg(long, default_value_t = 4)]
        heads: u64,
        #[arg(long, default_value = "flops.csv")]
        out: PathBuf,
    },
    /// Train a text classifier described by a JSON run config.
    TrainText {
        #[arg(long)]
        config: PathBuf,
    },
    /// Expected validation performance from a trial log.
    Evp {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10")]
        k_grid: Vec<usize>,
        #[arg(long, default_value = "evp.csv")]
        out: PathBuf,
    },
}

enum Failure {
    Verification(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Usage(_)
        | Error::Param(_)
        | Error::Capacity { .. }
        | Error::Json(_)
        | Error::Parse { .. }
        | Error::Data(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("FAILED: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gradcheck {
            variant,
            inject_fault,
        } => gradcheck(variant, inject_fault),
        Command::Synth {
            variant,
            examples,
            seed,
            out,
            config,
        } => synth(variant, examples, seed, &out, config.as_deref()),
        Command::Bench {
            variants,
            n_grid,
            d,
            d_prime,
            heads,
            reps,
            n_max,
            out,
        } => bench_cmd(&variants, &n_grid, d, d_prime, heads, reps, n_max, &out),
        Command::Flops {
            n_grid,
            d,
            d_prime,
            heads,
            out,
        } => {
            let rows = flops::emit_complexity_table(&n_grid, d, d_prime, heads, &out)?;
            for r in &rows {
                println!(
                    "N={:<6} hypermixer={:<14} attention={:<14} ratio={:.4}",
                    r.n, r.flops_hypermixer, r.flops_attention, r.ratio
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainText { config } => train_text(&config),
        Command::Evp { trials, k_grid, out } => evp(&trials, &k_grid, &out),
    }
}

fn gradcheck(variant: Option<MixingKind>, inject_fault: bool) -> Result<(), Failure> {
    let start = Instant::now();
    let opts = GradcheckOptions {
        inject_fault,
        ..Default::default()
    };
    let mut checks = Vec::new();
    match variant {
        Some(kind) => checks.push(("variant", verify::check_variant(kind, &opts)?)),
        None => {
            checks.extend(verify::check_ops(&opts)?.into_iter().map(|c| ("op", c)));
            checks.extend(
                verify::check_all_variants(&opts)?
                    .into_iter()
                    .map(|c| ("variant", c)),
            );
        }
    }
    let mut failed = Vec::new();
    for (group, c) in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{group:<8} {:<18} max_rel_error={:.3e} {status}",
            c.name, c.report.max_rel_error
        );
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    println!("{} checks in {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

/// `mse.json`: everything about the run except its wall time.
#[derive(Serialize)]
struct SynthSummary {
    variant: SynthVariant,
    train_examples: usize,
    seed: u64,
    epochs: usize,
    best_epoch: usize,
    test_mse: f64,
    valid_mse: f64,
    no_mixing_floor: f64,
    config: SynthConfig,
}

const SYNTH_MAPS: usize = 4;

fn synth(
    variant: SynthVariant,
    examples: usize,
    seed: u64,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), Failure> {
    let cfg: SynthConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let test = synthetic::test_sequences(&cfg, seed)?;
    let (model, r) = synthetic::train_synthetic::<f32>(variant, examples, seed, &cfg, Some(&test))?;
    let summary = SynthSummary {
        variant: r.variant,
        train_examples: r.train_examples,
        seed: r.seed,
        epochs: r.epochs,
        best_epoch: r.best_epoch,
        test_mse: r.test_mse,
        valid_mse: r.valid_mse,
        no_mixing_floor: r.no_mixing_floor,
        config: r.config.clone(),
    };
    let mse_path = out.join("mse.json");
    write_json(&mse_path, &summary)?;
    println!(
        "{variant}: test MSE {:.4} (no-mixing floor {:.4}) after {} epochs, {:.1}s",
        r.test_mse, r.no_mixing_floor, r.epochs, r.wall_seconds
    );
    println!("wrote {}", mse_path.display());
    if variant == SynthVariant::None {
        println!("no token-mixing block, so no pseudo-attention maps");
        return Ok(());
    }
    for (i, seq) in test.iter().take(SYNTH_MAPS).enumerate() {
        let mut maps = vec![("map", synthetic::pseudo_attention(&model, &seq.input)?)];
        if variant == SynthVariant::Attention {
            maps.push(("true_map", synthetic::true_attention(&model, &seq.input)?));
        }
        for (stem, map) in maps {
            for (ext, format) in [("pgm", MapFormat::Pgm), ("csv", MapFormat::Csv)] {
                let path = out.join(format!("{stem}_{i}.{ext}"));
                synthetic::export_map(&map, &path, format)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd(
    variants: &[MixingKind],
    n_grid: &[usize],
    d: usize,
    d_prime: usize,
    heads: usize,
    reps: usize,
    n_max: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    bench::ensure_single_threaded()?;
    let mut records: Vec<TimingRecord> = Vec::new();
    for &kind in variants {
        let cap = n_max.or_else(|| text::default_n_cap(kind)).unwrap_or(0);
        let spec = TokenMixingSpec::new(kind, d, d_prime, cap).with_heads(heads);
        let mixer = TokenMixer::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut own = Vec::new();
        for &n in n_grid {
            let r = bench::time_mixer(&mixer, n, d, d_prime, heads, reps)?;
            println!(
                "{kind:<18} N={n:<6} median={:.6}s p10={:.6}s p90={:.6}s",
                r.median_seconds, r.p10_seconds, r.p90_seconds
            );
            own.push(r);
        }
        if let Ok(slope) = bench::scaling_exponent(&own) {
            println!("{kind:<18} log-log slope {slope:.3}");
        }
        records.extend(own);
    }
    bench::emit_benchmark_csv(&records, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TextSummary {
    kind: MixingKind,
    train_accuracy: f64,
    valid_accuracy: f64,
    best_epoch: usize,
    truncated_sequences: usize,
    vocab_size: usize,
}

fn train_text(path: &Path) -> Result<(), Failure> {
    let (rc, base) = RunConfig::load(path)?;
    let out = base.join(&rc.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (train, valid) = rc.datasets(&base)?;
    let vocab = Vocabulary::build(&train, rc.task.min_frequency)?;
    let model_config = rc.model_config(vocab.len());
    model_config.validate()?;
    let truncated = text::batch_iter(&train, &vocab, rc.train.batch_size, rc.n_cap(), None)?.truncated();
    let objective = TextClassification {
        train,
        valid,
        vocab,
        n_cap: rc.n_cap(),
    };
    let mut base_train = rc.train.clone();
    base_train.seed = rc.seed;
    let trials_path = out.join("trials.jsonl");
    let (best, records) = match &rc.search {
        Some(s) => {
            let res = trainer::random_search::<f32, _>(
                &model_config,
                &base_train,
                s.trials,
                rc.seed,
                s.log_base,
                &objective,
            )?;
            (res.best, res.records)
        }
        None => {
            let start = Instant::now();
            let outcome = trainer::train::<f32, _>(&model_config, &base_train, &objective)?;
            let record = TrialRecord {
                config: base_train.clone(),
                score: outcome.best_metric,
                seed: base_train.seed,
                wall_seconds: start.elapsed().as_secs_f64(),
                best_epoch: outcome.best_epoch,
                initial_score: outcome.initial_metric,
            };
            (record.clone(), vec![record])
        }
    };
    trainer::write_trials(&trials_path, &records)?;
    println!("wrote {}", trials_path.display());

    let outcome = trainer::train::<f32, _>(&model_config, &best.config, &objective)?;
    let summary = TextSummary {
        kind: rc.model.kind,
        train_accuracy: objective.accuracy(&outcome.model, &objective.train)?,
        valid_accuracy: outcome.best_metric,
        best_epoch: outcome.best_epoch,
        truncated_sequences: truncated,
        vocab_size: objective.vocab.len(),
    };
    println!(
        "{}: train accuracy {:.4}, validation accuracy {:.4} (epoch {})",
        summary.kind, summary.train_accuracy, summary.valid_accuracy, summary.best_epoch
    );
    let model_path = out.join("model.ckpt");
    outcome.model.save(&model_path)?;
    println!("wrote {}", model_path.display());
    let summary_path = out.join("result.json");
    write_json(&summary_path, &summary)?;
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn evp(trials: &Path, k_grid: &[usize], out: &Path) -> Result<(), Failure> {
    let records = trainer::read_trials(trials)?;
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let mut csv = String::from("k,expected_score\n");
    for &k in k_grid {
        let v = trainer::expected_validation_performance(&scores, k)?;
        println!("k={k:<4} expected best score {v:.6}");
        csv.push_str(&format!("{k},{v:.9e}\n"));
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}
