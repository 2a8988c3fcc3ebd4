//! Generation loops: DSBD, its single-lineage variant, the baselines, and
//! per-run metrics.
//!
//! Every run starts from a width-1 beam set holding the prompt and stops once
//! the beams carry exactly `max_new_tokens` generated tokens. An iteration
//! near the end drafts only as many layers as remain and skips the bonus
//! layer when the drafts already reach the limit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam_ref::{beam_search, exact_beam_sample, multinomial_sample, Beam, BeamSet};
use crate::distribution::Distribution;
use crate::draft_forest::{cache_lineages, grow_draft_forest_from};
use crate::error::{DecodeError, Result};
use crate::token_model::{Metered, ModelPair, Token, TokenModel};
use crate::verifier::{
    residual_update, run_verification, PruneRule, RatioRule, VerificationResult, VerifyParams,
    WidthRule,
};
use crate::warping::{apply_warp, WarpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dsbd,
    DsbdMemoryConstrained,
    BeamSampling,
    Multinomial,
    VanillaSpeculative,
    /// DSBD with a fixed target width of one.
    SpecinferStyle,
    /// Deterministic beam search of width `draft_width`.
    BeamSearch,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Dsbd,
        Mode::DsbdMemoryConstrained,
        Mode::BeamSampling,
        Mode::Multinomial,
        Mode::VanillaSpeculative,
        Mode::SpecinferStyle,
        Mode::BeamSearch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dsbd => "dsbd",
            Mode::DsbdMemoryConstrained => "dsbd_memory_constrained",
            Mode::BeamSampling => "beam_sampling",
            Mode::Multinomial => "multinomial",
            Mode::VanillaSpeculative => "vanilla_speculative",
            Mode::SpecinferStyle => "specinfer_style",
            Mode::BeamSearch => "beam_search",
        }
    }

    pub fn is_speculative(self) -> bool {
        matches!(
            self,
            Mode::Dsbd | Mode::DsbdMemoryConstrained | Mode::VanillaSpeculative | Mode::SpecinferStyle
        )
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == wanted)
            .ok_or_else(|| DecodeError::InvalidParameter(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Draft depth.
    pub gamma: usize,
    /// Draft width `W_S`; also the beam width of the beam baselines.
    pub draft_width: usize,
    /// Width threshold `t`.
    pub threshold: f64,
    /// Minimum width `W_min`.
    pub min_width: usize,
    pub warp: WarpSpec,
    pub max_new_tokens: usize,
    pub mode: Mode,
    pub model_seed: u64,
    pub rng_seed: u64,
    pub ratio: RatioRule,
    pub prune: PruneRule,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gamma: 3,
            draft_width: 4,
            threshold: 0.7,
            min_width: 1,
            warp: WarpSpec::IDENTITY,
            max_new_tokens: 16,
            mode: Mode::Dsbd,
            model_seed: 0,
            rng_seed: 0,
            ratio: RatioRule::default(),
            prune: PruneRule::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 1 {
            return Err(DecodeError::InvalidParameter("gamma must be >= 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(DecodeError::InvalidParameter(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        if self.min_width < 1 || self.min_width > self.draft_width {
            return Err(DecodeError::InvalidParameter(format!(
                "need 1 <= W_min ({}) <= W_S ({})",
                self.min_width, self.draft_width
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DecodeError::InvalidParameter(format!(
                "threshold {} must lie in [0, 1]",
                self.threshold
            )));
        }
        self.warp.validate()
    }

    fn verify_params(&self, bonus_layer: bool) -> VerifyParams {
        let width = match self.mode {
            Mode::SpecinferStyle => WidthRule::Fixed(1),
            _ => WidthRule::Dynamic {
                threshold: self.threshold,
                min_width: self.min_width,
            },
        };
        VerifyParams {
            width,
            ratio: self.ratio,
            prune: self.prune,
            bonus_layer,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub large_calls: u64,
    pub small_calls: u64,
    pub tokens_generated: usize,
    /// Layers produced by each iteration (tokens for non-beam modes).
    pub layers_per_iteration: Vec<usize>,
    /// Draft depth used by each iteration; below `gamma` only when the
    /// iteration was truncated by `max_new_tokens`.
    pub iteration_depths: Vec<usize>,
    /// Width of every produced layer, in order.
    pub layer_widths: Vec<usize>,
    /// Mean of `layer_widths`.
    pub average_accepted_width: f64,
    pub cache_lineage_peak: usize,
    /// At-least-`W_min` probability of every verified draft layer.
    pub layer_betas: Vec<f64>,
    /// At-least-target probability of every verified draft layer.
    pub layer_target_probs: Vec<f64>,
}

impl RunMetrics {
    pub fn iterations(&self) -> usize {
        self.layers_per_iteration.len()
    }

    pub fn tokens_per_large_call(&self) -> f64 {
        self.tokens_generated as f64 / self.large_calls as f64
    }

    pub fn large_calls_per_token(&self) -> f64 {
        self.large_calls as f64 / self.tokens_generated as f64
    }

    /// Layers per iteration over the iterations that drafted the full `gamma`.
    pub fn full_depth_layers(&self, gamma: usize) -> impl Iterator<Item = usize> + '_ {
        self.layers_per_iteration
            .iter()
            .zip(&self.iteration_depths)
            .filter(move |(_, &d)| d == gamma)
            .map(|(&l, _)| l)
    }

    fn record_layers(&mut self, width: usize, layers: usize) {
        self.layer_widths.extend(std::iter::repeat_n(width, layers));
    }

    fn finish(&mut self) {
        self.tokens_generated = self.layers_per_iteration.iter().sum();
        self.average_accepted_width = if self.layer_widths.is_empty() {
            0.0
        } else {
            self.layer_widths.iter().sum::<usize>() as f64 / self.layer_widths.len() as f64
        };
    }
}

/// Final beams of a run plus its metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generation {
    pub beams: BeamSet,
    pub metrics: RunMetrics,
}

impl Generation {
    /// The run's answer: the lowest-perplexity final beam.
    pub fn best(&self) -> &Beam {
        let idx = lowest_perplexity_index(self.beams.beams());
        &self.beams.beams()[idx]
    }
}

fn lowest_perplexity_index(beams: &[Beam]) -> usize {
    let mut best = 0;
    for (i, b) in beams.iter().enumerate().skip(1) {
        if b.per_token_log_likelihood() > beams[best].per_token_log_likelihood() {
            best = i;
        }
    }
    best
}

/// The beam with the lowest perplexity, ties to the lowest index.
pub fn select_lowest_perplexity(beams: &BeamSet) -> Beam {
    beams.beams()[lowest_perplexity_index(beams.beams())].clone()
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Runs `config.mode` from `prompt`, seeding the sampler from
/// `config.rng_seed`.
pub fn run_generation(config: &EngineConfig, pair: &ModelPair, prompt: &[Token]) -> Result<Generation> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let large = Metered::new(&pair.large);
    let small = Metered::new(&pair.small);
    let steps = config.max_new_tokens;
    let mut metrics = RunMetrics::default();
    let beams = match config.mode {
        Mode::Dsbd | Mode::SpecinferStyle => dsbd_loop(config, &large, &small, prompt, false, &mut rng, &mut metrics)?,
        Mode::DsbdMemoryConstrained => {
            dsbd_loop(config, &large, &small, prompt, true, &mut rng, &mut metrics)?
        }
        Mode::VanillaSpeculative => {
            let beam = vanilla_loop(config, &large, &small, prompt, &mut rng, &mut metrics)?;
            BeamSet::new(vec![beam])?
        }
        Mode::Multinomial => {
            let beam = multinomial_sample(&large, prompt, steps, &config.warp, &mut rng)?;
            single_step_metrics(&mut metrics, steps, 1);
            BeamSet::new(vec![beam])?
        }
        Mode::BeamSampling => {
            let out = exact_beam_sample(
                &large,
                &BeamSet::from_prompt(prompt),
                config.draft_width,
                steps,
                &config.warp,
                &mut rng,
            )?;
            single_step_metrics(&mut metrics, steps, config.draft_width);
            out
        }
        Mode::BeamSearch => {
            let out = beam_search(&large, &BeamSet::from_prompt(prompt), config.draft_width, steps)?;
            single_step_metrics(&mut metrics, steps, config.draft_width);
            out
        }
    };
    metrics.large_calls = large.calls();
    metrics.small_calls = small.calls();
    metrics.finish();
    Ok(Generation { beams, metrics })
}

/// Single-lineage DSBD: only the lowest-perplexity output beam is carried
/// into the next iteration.
pub fn run_memory_constrained(
    config: &EngineConfig,
    pair: &ModelPair,
    prompt: &[Token],
) -> Result<(Beam, RunMetrics)> {
    expect_mode(config, Mode::DsbdMemoryConstrained)?;
    let run = run_generation(config, pair, prompt)?;
    Ok((run.best().clone(), run.metrics))
}

/// Classic single-sequence speculative sampling from the warped conditionals.
pub fn run_vanilla_speculative(
    config: &EngineConfig,
    pair: &ModelPair,
    prompt: &[Token],
) -> Result<(Beam, RunMetrics)> {
    expect_mode(config, Mode::VanillaSpeculative)?;
    let run = run_generation(config, pair, prompt)?;
    Ok((run.best().clone(), run.metrics))
}

fn expect_mode(config: &EngineConfig, mode: Mode) -> Result<()> {
    if config.mode != mode {
        return Err(DecodeError::InvalidParameter(format!(
            "expected mode {mode}, got {}",
            config.mode
        )));
    }
    Ok(())
}

fn single_step_metrics(metrics: &mut RunMetrics, steps: usize, width: usize) {
    metrics.layers_per_iteration = vec![1; steps];
    metrics.iteration_depths = vec![1; steps];
    metrics.record_layers(width, steps);
    metrics.cache_lineage_peak = width;
}

// ---------------------------------------------------------------------------
// DSBD
// ---------------------------------------------------------------------------

fn dsbd_loop<L, S, R>(
    config: &EngineConfig,
    large: &Metered<L>,
    small: &Metered<S>,
    prompt: &[Token],
    single_lineage: bool,
    rng: &mut R,
    metrics: &mut RunMetrics,
) -> Result<BeamSet>
where
    L: TokenModel,
    S: TokenModel,
    R: Rng + ?Sized,
{
    let mut beams = BeamSet::from_prompt(prompt);
    let mut produced = 0;
    while produced < config.max_new_tokens {
        let remaining = config.max_new_tokens - produced;
        let depth = config.gamma.min(remaining);
        // Stands in for the small model's own cache of its beam scores, so it
        // is not metered.
        let root_lls = beams
            .beams()
            .iter()
            .map(|b| b.recompute_log_likelihood(small.inner()))
            .collect::<Result<Vec<_>>>()?;
        let forest = grow_draft_forest_from(
            small,
            &beams,
            &root_lls,
            config.draft_width,
            depth,
            &config.warp,
            rng,
        )?;
        let result = run_verification(
            &forest,
            large,
            &config.verify_params(depth < remaining),
            &config.warp,
            rng,
        )?;
        record_iteration(metrics, &result, depth);

        let outputs: Vec<Beam> = if single_lineage {
            let set = BeamSet::new(result.outputs.iter().map(|o| o.beam.clone()).collect())?;
            let keep = lowest_perplexity_index(set.beams());
            let lineage = cache_lineages(&forest, &[result.outputs[keep].survivor()])?;
            metrics.cache_lineage_peak = metrics.cache_lineage_peak.max(lineage.count);
            vec![set.into_beams().swap_remove(keep)]
        } else {
            let survivors: Vec<_> = result.outputs.iter().map(|o| o.survivor()).collect();
            let lineage = cache_lineages(&forest, &survivors)?;
            metrics.cache_lineage_peak = metrics.cache_lineage_peak.max(lineage.count);
            result.outputs.into_iter().map(|o| o.beam).collect()
        };
        produced += result.layers_produced;
        beams = BeamSet::new(outputs)?;
    }
    Ok(beams)
}

fn record_iteration(metrics: &mut RunMetrics, result: &VerificationResult, depth: usize) {
    metrics.layers_per_iteration.push(result.layers_produced);
    metrics.iteration_depths.push(depth);
    metrics.layer_widths.extend(result.produced_widths());
    for trace in &result.layers {
        let d = &trace.decision;
        metrics.layer_betas.push(d.beta);
        metrics
            .layer_target_probs
            .push(crate::width_policy::at_least_k_prob(&d.accept_count_pmf, d.target_width));
    }
}

// ---------------------------------------------------------------------------
// Vanilla speculative sampling
// ---------------------------------------------------------------------------

fn vanilla_loop<L, S, R>(
    config: &EngineConfig,
    large: &Metered<L>,
    small: &Metered<S>,
    prompt: &[Token],
    rng: &mut R,
    metrics: &mut RunMetrics,
) -> Result<Beam>
where
    L: TokenModel,
    S: TokenModel,
    R: Rng + ?Sized,
{
    let mut beam = Beam::from_prompt(prompt);
    while beam.generated_len() < config.max_new_tokens {
        let remaining = config.max_new_tokens - beam.generated_len();
        let depth = config.gamma.min(remaining);

        let mut context = beam.tokens.clone();
        let mut drafts: Vec<(Token, Distribution)> = Vec::with_capacity(depth);
        for _ in 0..depth {
            let q = apply_warp(&config.warp, &small.next_distribution(&context))?;
            let token = q.sample(rng) as Token;
            context.push(token);
            drafts.push((token, q));
        }
        // One pass scores every draft prefix plus the bonus position.
        let contexts: Vec<Vec<Token>> = (0..=depth)
            .map(|i| context[..beam.tokens.len() + i].to_vec())
            .collect();
        let rows = large.next_distributions(&contexts);

        let mut produced = 0;
        let mut rejected = false;
        for ((token, q), row) in drafts.iter().zip(&rows) {
            let p = apply_warp(&config.warp, row)?;
            let x = *token as usize;
            let u: f64 = rng.random();
            produced += 1;
            if u < (p.get(x) / q.get(x)).min(1.0) {
                beam = beam.extend(*token, row.get(x).ln());
            } else {
                let residual = residual_update(&p, q.weights()).unwrap_or(p);
                let y = residual.sample(rng);
                beam = beam.extend(y as Token, row.get(y).ln());
                rejected = true;
                break;
            }
        }
        if !rejected && depth < remaining {
            let row = &rows[depth];
            let y = apply_warp(&config.warp, row)?.sample(rng);
            beam = beam.extend(y as Token, row.get(y).ln());
            produced += 1;
        }
        metrics.layers_per_iteration.push(produced);
        metrics.iteration_depths.push(depth);
        metrics.record_layers(1, produced);
    }
    metrics.cache_lineage_peak = 1;
    Ok(beam)
}
