use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dsbd_core::beam_ref::BeamSet;
use dsbd_core::draft_forest::grow_draft_forest;
use dsbd_core::engine::{run_generation, Mode};
use dsbd_core::verifier::run_verification;
use dsbd_core::{Token, TokenModel};
use dsbd_harness::config::{ExperimentSpec, Format};
use dsbd_harness::experiment::{cell_config, grid, model_pair, run_experiment, trial_prompt};
use dsbd_harness::report::Report;
use dsbd_harness::suites::{run_suite, SUITES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dsbd", about = "Dynamic-width speculative beam decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One decoding run; prints the answer and its metrics.
    Generate {
        #[command(flatten)]
        spec: SpecArgs,
        /// Comma-separated prompt token ids (default: a seeded random prompt).
        #[arg(long, value_delimiter = ',')]
        prompt: Option<Vec<Token>>,
    },
    /// Runs acceptance suites.
    Verify {
        #[command(flatten)]
        spec: SpecArgs,
        /// Suites to run (default: all).
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
    /// Runs the experiment grid.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Grows and verifies one draft forest and prints it with its masks.
    DumpForest {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_delimiter = ',')]
        prompt: Option<Vec<Token>>,
    },
}

/// Spec keys as flags. Flags override values read from `--config`.
#[derive(Args, Default)]
struct SpecArgs {
    /// Experiment spec file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    ws: Option<Vec<usize>>,
    #[arg(long = "threshold-t", value_delimiter = ',')]
    threshold_t: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    wmin: Option<Vec<usize>>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    divergence: Option<f64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<Format>,
    /// Suites to run after a sweep.
    #[arg(long = "test")]
    tests: Vec<String>,
}

impl SpecArgs {
    fn resolve(self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { spec.$field = v; })*
            };
        }
        set!(
            mode, gamma, ws, threshold_t, wmin, vocab_size, order, divergence, model_seed,
            rng_seed, trials, max_new_tokens, prompt_len, format
        );
        if self.top_k.is_some() {
            spec.top_k = self.top_k;
        }
        if self.top_p.is_some() {
            spec.top_p = self.top_p;
        }
        if self.out.is_some() {
            spec.out = self.out;
        }
        if !self.tests.is_empty() {
            spec.tests = self.tests;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn emit(report: &Report, spec: &ExperimentSpec) -> Result<()> {
    match &spec.out {
        Some(path) => report
            .write(path, spec.format)
            .with_context(|| format!("writing report to {}", path.display())),
        None => {
            print!("{}", report.render(spec.format)?);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { spec, prompt } => {
            let spec = spec.resolve()?;
            let cell = grid(&spec).into_iter().next().context("empty grid")?;
            let config = cell_config(&spec, &cell, 0);
            let pair = model_pair(&spec)?;
            let prompt = prompt.unwrap_or_else(|| trial_prompt(&spec, 0));
            let run = run_generation(&config, &pair, &prompt)?;
            let best = run.best();
            let out = json!({
                "config": config,
                "prompt": pair.large.vocab().render(&prompt),
                "answer": pair.large.vocab().render(best.generated()),
                "answer_tokens": best.generated(),
                "per_token_log_likelihood": best.per_token_log_likelihood(),
                "beams": run.beams.beams().iter().map(|b| pair.large.vocab().render(b.generated())).collect::<Vec<_>>(),
                "metrics": run.metrics,
                "tokens_per_large_call": run.metrics.tokens_per_large_call(),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(true)
        }
        Command::Verify { spec, suites } => {
            let spec = spec.resolve()?;
            let names: Vec<String> = if suites.is_empty() {
                SUITES.iter().map(|s| s.to_string()).collect()
            } else {
                suites
            };
            let mut rows = Vec::new();
            let mut ok = true;
            for name in &names {
                let outcome = run_suite(name, spec.rng_seed)?;
                eprintln!("{}", outcome.summary());
                ok &= outcome.passed();
                rows.extend(outcome.rows);
            }
            emit(&Report::new(Vec::new(), rows), &spec)?;
            Ok(ok)
        }
        Command::Sweep { spec } => {
            let spec = spec.resolve()?;
            let report = run_experiment(&spec)?;
            if spec.out.is_none() {
                print!("{}", report.render(spec.format)?);
            }
            Ok(report.passed())
        }
        Command::DumpForest { spec, prompt } => {
            let spec = spec.resolve()?;
            let cell = grid(&spec).into_iter().next().context("empty grid")?;
            let config = cell_config(&spec, &cell, 0);
            if !matches!(config.mode, Mode::Dsbd | Mode::DsbdMemoryConstrained | Mode::SpecinferStyle) {
                bail!("dump-forest needs a forest-based mode, got {}", config.mode);
            }
            let pair = model_pair(&spec)?;
            let prompt = prompt.unwrap_or_else(|| trial_prompt(&spec, 0));
            let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
            let input = BeamSet::from_prompt(&prompt);
            let forest = grow_draft_forest(
                &pair.small,
                &input,
                config.draft_width,
                config.gamma,
                &config.warp,
                &mut rng,
            )?;
            let params = dsbd_core::verifier::VerifyParams {
                width: dsbd_core::verifier::WidthRule::Dynamic {
                    threshold: config.threshold,
                    min_width: config.min_width,
                },
                ratio: config.ratio,
                prune: config.prune,
                bonus_layer: true,
            };
            let result = run_verification(&forest, &pair.large, &params, &config.warp, &mut rng)?;
            let out = json!({
                "forest": forest.dump(|at| result.node_status(at)),
                "verification": result,
            });
            let text = serde_json::to_string_pretty(&out)?;
            match &spec.out {
                Some(path) => std::fs::write(path, text)
                    .with_context(|| format!("writing forest dump to {}", path.display()))?,
                None => println!("{text}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
