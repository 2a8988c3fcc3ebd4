//! Grid execution.
//!
//! Cells enumerate `gamma`, then `ws`, then `threshold_t`, then `wmin`;
//! combinations with `wmin > ws` are skipped. Trial `i` of cell `c` runs the
//! engine with seed `trial_seed(rng_seed, c, i)` on a prompt drawn from
//! `trial_seed(rng_seed, PROMPT_STREAM, i)`, so every cell sees the same
//! prompts.

use dsbd_core::engine::{run_generation, EngineConfig, Generation, Mode, RunMetrics};
use dsbd_core::token_model::make_model_pair;
use dsbd_core::{ModelPair, Token, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ExperimentSpec;
use crate::error::Result;
use crate::report::{CellRow, Report};
use crate::seeds::trial_seed;
use crate::stats::{ci95_half_width, mean};
use crate::suites;

/// Cell index reserved for prompt seeds.
pub const PROMPT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub gamma: usize,
    pub ws: usize,
    pub threshold: f64,
    pub wmin: usize,
}

pub fn grid(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &gamma in &spec.gamma {
        for &ws in &spec.ws {
            for &threshold in &spec.threshold_t {
                for &wmin in spec.wmin.iter().filter(|&&w| w <= ws) {
                    cells.push(Cell {
                        index: cells.len(),
                        gamma,
                        ws,
                        threshold,
                        wmin,
                    });
                }
            }
        }
    }
    cells
}

pub fn model_pair(spec: &ExperimentSpec) -> Result<ModelPair> {
    Ok(make_model_pair(
        spec.model_seed,
        Vocabulary::new(spec.vocab_size)?,
        spec.order,
        spec.divergence,
        spec.concentration,
    )?)
}

pub fn random_prompt(seed: u64, vocab_size: usize, len: usize) -> Vec<Token> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| rng.random_range(0..vocab_size as Token))
        .collect()
}

pub fn cell_config(spec: &ExperimentSpec, cell: &Cell, trial: usize) -> EngineConfig {
    EngineConfig {
        gamma: cell.gamma,
        draft_width: cell.ws,
        threshold: cell.threshold,
        min_width: cell.wmin,
        warp: spec.warp(),
        max_new_tokens: spec.max_new_tokens,
        mode: spec.mode,
        model_seed: spec.model_seed,
        rng_seed: trial_seed(spec.rng_seed, cell.index as u64, trial as u64),
        ratio: spec.ratio,
        prune: spec.prune,
    }
}

pub fn trial_prompt(spec: &ExperimentSpec, trial: usize) -> Vec<Token> {
    random_prompt(
        trial_seed(spec.rng_seed, PROMPT_STREAM, trial as u64),
        spec.vocab_size,
        spec.prompt_len,
    )
}

/// Runs every trial of one cell; results come back in trial order.
pub fn run_trials(spec: &ExperimentSpec, pair: &ModelPair, cell: &Cell) -> Result<Vec<Generation>> {
    (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let config = cell_config(spec, cell, trial);
            Ok(run_generation(&config, pair, &trial_prompt(spec, trial))?)
        })
        .collect()
}

pub fn summarize(mode: Mode, cell: &Cell, runs: &[Generation]) -> CellRow {
    let metrics: Vec<&RunMetrics> = runs.iter().map(|g| &g.metrics).collect();
    let tokens: usize = metrics.iter().map(|m| m.tokens_generated).sum();
    let large: u64 = metrics.iter().map(|m| m.large_calls).sum();
    let small: u64 = metrics.iter().map(|m| m.small_calls).sum();
    let layers: Vec<f64> = metrics
        .iter()
        .flat_map(|m| m.layers_per_iteration.iter().map(|&l| l as f64))
        .collect();
    let widths: Vec<f64> = metrics
        .iter()
        .flat_map(|m| m.layer_widths.iter().map(|&w| w as f64))
        .collect();
    let betas: Vec<f64> = metrics
        .iter()
        .flat_map(|m| m.layer_betas.iter().copied())
        .collect();
    let answers: Vec<f64> = runs
        .iter()
        .map(|g| g.best().per_token_log_likelihood())
        .collect();
    CellRow {
        cell: cell.index,
        mode: mode.name().to_string(),
        gamma: cell.gamma,
        ws: cell.ws,
        threshold_t: cell.threshold,
        wmin: cell.wmin,
        trials: runs.len(),
        tokens_per_large_call: tokens as f64 / large as f64,
        large_calls_per_token: large as f64 / tokens as f64,
        small_calls_per_token: small as f64 / tokens as f64,
        layers_per_iteration_mean: mean(&layers),
        layers_per_iteration_ci95: ci95_half_width(&layers),
        average_accepted_width: mean(&widths),
        beta_mean: if betas.is_empty() { f64::NAN } else { mean(&betas) },
        per_token_log_likelihood: mean(&answers),
        lineage_peak: metrics.iter().map(|m| m.cache_lineage_peak).max().unwrap_or(0),
    }
}

pub fn run_grid(spec: &ExperimentSpec) -> Result<Vec<CellRow>> {
    spec.validate()?;
    let pair = model_pair(spec)?;
    grid(spec)
        .iter()
        .map(|cell| Ok(summarize(spec.mode, cell, &run_trials(spec, &pair, cell)?)))
        .collect()
}

/// Runs the grid and the selected suites, and writes the report to
/// `spec.out` when set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    let cells = run_grid(spec)?;
    let mut tests = Vec::new();
    for name in &spec.tests {
        tests.extend(suites::run_suite(name, spec.rng_seed)?.rows);
    }
    let report = Report::new(cells, tests);
    if let Some(path) = &spec.out {
        report.write(path, spec.format)?;
    }
    Ok(report)
}
