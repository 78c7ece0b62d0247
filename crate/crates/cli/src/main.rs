//! `btgperm` command-line driver.
//!
//! Structured payloads go to stdout (or `--out`) as JSON, datasets are TSV and
//! training metrics are JSON lines. Diagnostics go to stderr. Exit codes: 0 on
//! success, 1 on a contract violation, 2 on a flag error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use btgperm::btg::{wcfg_to_pcfg, RuleWeightChart};
use btgperm::inference::{ancestral_sample, gumbel_sample, map_derivation, marginal, DEFAULT_TEMPERATURE};
use btgperm::model::{evaluate_with_loss, pipeline_gradcheck, train_with_callback, Model, TrainConfig};
use btgperm::perm::{count_separable, enumerate_trees, tree_to_matrix, Permutation};
use btgperm::tasks::{detokenize, make_splits, read_tsv_file, write_tsv_file, SplitKind, SplitSpec};
use btgperm::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// Seed used when `--seed` is absent.
const DEFAULT_SEED: u64 = 0;

#[derive(Parser)]
#[command(name = "btgperm", version, about = "Separable-permutation reordering toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expected permutation matrix of a rule-weight chart.
    Marginal {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Most probable derivation of a rule-weight chart.
    Map {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Draw derivations from a rule-weight chart.
    Sample {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Gumbel)]
        method: Method,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Count permutation trees and distinct separable permutations of length n.
    Enumerate {
        #[arg(long)]
        n: usize,
        /// Also print every tree and its permutation, one JSON object per line.
        #[arg(long)]
        list: bool,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Finite-difference check of the full scoring-to-loss pipeline.
    Gradcheck {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Write train/dev/test TSV files of infix → postfix pairs.
    GenArith {
        #[arg(long, value_enum)]
        split: Split,
        /// Training set size.
        #[arg(long)]
        count: usize,
        /// Dev set size (defaults to --count).
        #[arg(long)]
        dev_count: Option<usize>,
        /// Test set size (defaults to --count).
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model from TSV data and a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON-lines path (stdout if absent).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact-match accuracy of a checkpoint on a TSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config JSON that must match the checkpoint's architecture.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write predictions as TSV (input, prediction).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Gumbel,
    Ancestral,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Iid,
    Len,
}

fn read_chart(path: &Path) -> Result<RuleWeightChart> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn emit(out: Option<&Path>, payload: &Value) -> Result<()> {
    let text = serde_json::to_string(payload)?;
    match out {
        Some(path) => fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Marginal { weights, out, seed: _ } => {
            let w = read_chart(&weights)?;
            let e = marginal(&w.to_pcfg());
            emit(out.as_deref(), &serde_json::to_value(&e)?)
        }
        Command::Map { weights, out, seed: _ } => {
            let w = read_chart(&weights)?;
            let (tree, prob) = map_derivation(&w.to_pcfg());
            let perm = Permutation::from_tree(&tree);
            emit(
                out.as_deref(),
                &json!({
                    "tree": tree,
                    "permutation": perm.outputs(),
                    "prob": prob,
                    "matrix": tree_to_matrix(&tree),
                }),
            )
        }
        Command::Sample { weights, out, method, count, temperature, seed } => {
            let w = read_chart(&weights)?;
            let g = wcfg_to_pcfg(&w, &w.inside());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let s = match method {
                    Method::Ancestral => {
                        let tree = ancestral_sample(&g, &mut rng);
                        json!({ "tree": tree, "permutation": Permutation::from_tree(&tree).outputs() })
                    }
                    Method::Gumbel => {
                        let s = gumbel_sample(&g, &mut rng, temperature)?;
                        json!({
                            "tree": s.tree,
                            "permutation": s.hard.permutation().outputs(),
                            "relaxed": s.relaxed,
                        })
                    }
                };
                samples.push(s);
            }
            let method = match method {
                Method::Gumbel => "gumbel",
                Method::Ancestral => "ancestral",
            };
            emit(out.as_deref(), &json!({ "method": method, "seed": seed, "samples": samples }))
        }
        Command::Enumerate { n, list, seed: _ } => {
            let trees = enumerate_trees(n)?;
            println!("trees={} separable={}", trees.len(), count_separable(n)?);
            if list {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                for t in &trees {
                    let line = json!({ "tree": t, "permutation": Permutation::from_tree(t).outputs() });
                    writeln!(lock, "{line}")?;
                }
            }
            Ok(())
        }
        Command::Gradcheck { n, trials, tolerance, seed } => {
            if n == 0 || trials == 0 {
                return Err(Error::InvalidConfig("--n and --trials must be at least 1".into()));
            }
            let (mut worst, mut worst_trial) = (0.0f64, 0);
            for t in 0..trials {
                let rep = pipeline_gradcheck(n, seed.wrapping_add(t as u64))?;
                eprintln!("trial {t}: soft {:.3e} relaxed {:.3e}", rep.soft.max_rel_error, rep.relaxed.max_rel_error);
                if rep.max_rel_error() > worst {
                    worst = rep.max_rel_error();
                    worst_trial = t;
                }
            }
            let passed = worst <= tolerance;
            emit(
                None,
                &json!({ "n": n, "trials": trials, "max_rel_error": worst, "worst_trial": worst_trial, "passed": passed }),
            )?;
            if passed {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("max relative error {worst:.3e} exceeds {tolerance:.1e}")))
            }
        }
        Command::GenArith { split, count, dev_count, test_count, seed, out_dir } => {
            let kind = match split {
                Split::Iid => SplitKind::Iid,
                Split::Len => SplitKind::Len,
            };
            let spec = SplitSpec {
                kind,
                train: count,
                dev: dev_count.unwrap_or(count),
                test: test_count.unwrap_or(count),
                seed,
                grammar: Default::default(),
            };
            let splits = make_splits(&spec)?;
            fs::create_dir_all(&out_dir)?;
            for (name, set) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
                write_tsv_file(&out_dir.join(format!("{name}.tsv")), set)?;
            }
            eprintln!(
                "wrote {} / {} / {} examples to {}",
                splits.train.len(),
                splits.dev.len(),
                splits.test.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Train { config, train, dev, out, metrics, seed } => {
            let mut cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(&config)?)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let train_set = read_tsv_file(&train)?;
            let dev_set = read_tsv_file(&dev)?;
            let mut sink: Box<dyn Write> = match &metrics {
                Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
                None => Box::new(std::io::stdout()),
            };
            let mut io_err = None;
            let outcome = train_with_callback(&cfg, &train_set, &dev_set, |rec| {
                let line = serde_json::to_string(rec).expect("metric records serialize");
                eprintln!("{line}");
                if let Err(e) = writeln!(sink, "{line}") {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            sink.flush()?;
            outcome.model.save(&out, &cfg)?;
            eprintln!("best dev epoch {} after {} steps; checkpoint {}", outcome.best_epoch, outcome.steps, out.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, config, predictions, out, seed: _ } => {
            let (model, cfg) = Model::load(&checkpoint)?;
            if let Some(p) = config {
                let given: TrainConfig = serde_json::from_str(&fs::read_to_string(&p)?)?;
                if given.variant != cfg.variant || given.scorer != cfg.scorer || given.tagger != cfg.tagger {
                    return Err(Error::Checkpoint("config does not match the checkpoint's architecture".into()));
                }
            }
            let set = read_tsv_file(&data)?;
            let (loss, em) = evaluate_with_loss(&model, &set)?;
            if let Some(p) = predictions {
                let mut w = std::io::BufWriter::new(fs::File::create(p)?);
                for ex in &set {
                    let pred = btgperm::model::predict(&model, &ex.infix)?;
                    writeln!(w, "{}\t{}", detokenize(&ex.infix), detokenize(&pred))?;
                }
                w.flush()?;
            }
            emit(out.as_deref(), &json!({ "count": set.len(), "loss": loss, "exact_match": em }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
