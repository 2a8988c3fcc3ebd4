//! Reference decoders: multinomial sampling, beam sampling, deterministic
//! beam search, and an enumeration oracle for one beam-sampling step.
//!
//! A beam-sampling step draws from the joint over (beam, token) cells,
//!
//! ```text
//! p_beam(i, x) = warp( p(beam_i) * p(x | beam_i) / sum_{j, y} p(beam_j) * p(y | beam_j) )
//! ```
//!
//! with the warp applied to the flattened, jointly normalized vector. Cells are
//! flattened as `beam * vocab_size + token` (see [`JointIndex`]).

use rand::Rng;
use serde::Serialize;

use crate::distribution::Distribution;
use crate::error::{DecodeError, Result};
use crate::token_model::{sequence_log_prob, Token, TokenModel};
use crate::warping::{apply_warp, WarpSpec};

/// Largest joint space the enumeration oracle will handle.
pub const ORACLE_CELL_CAP: usize = 4096;

/// A token sequence and its log-likelihood given the prompt.
///
/// `tokens` holds the full context, prompt included; `log_likelihood` covers
/// only the tokens after `prompt_len`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Beam {
    pub tokens: Vec<Token>,
    pub log_likelihood: f64,
    pub prompt_len: usize,
}

impl Beam {
    /// The conditioning event: a bare prompt with log-likelihood 0.
    pub fn from_prompt(prompt: &[Token]) -> Self {
        Self {
            tokens: prompt.to_vec(),
            log_likelihood: 0.0,
            prompt_len: prompt.len(),
        }
    }

    pub fn prompt(&self) -> &[Token] {
        &self.tokens[..self.prompt_len]
    }

    pub fn generated(&self) -> &[Token] {
        &self.tokens[self.prompt_len..]
    }

    pub fn generated_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn extend(&self, token: Token, token_log_prob: f64) -> Beam {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        Beam {
            tokens,
            log_likelihood: self.log_likelihood + token_log_prob,
            prompt_len: self.prompt_len,
        }
    }

    /// Mean log-likelihood per generated token (0 for an empty generation).
    pub fn per_token_log_likelihood(&self) -> f64 {
        match self.generated_len() {
            0 => 0.0,
            n => self.log_likelihood / n as f64,
        }
    }

    pub fn perplexity(&self) -> f64 {
        (-self.per_token_log_likelihood()).exp()
    }

    /// Recomputes the stored likelihood from scratch under `model`.
    pub fn recompute_log_likelihood<M: TokenModel + ?Sized>(&self, model: &M) -> Result<f64> {
        if self.generated_len() == 0 {
            return Ok(0.0);
        }
        sequence_log_prob(model, self.prompt(), self.generated())
    }
}

/// An ordered, non-empty set of equal-length beams. Duplicates are allowed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeamSet {
    beams: Vec<Beam>,
}

impl BeamSet {
    pub fn new(beams: Vec<Beam>) -> Result<Self> {
        let first = beams.first().ok_or(DecodeError::EmptyBeamSet)?;
        let len = first.tokens.len();
        if beams.iter().any(|b| b.tokens.len() != len) {
            return Err(DecodeError::RaggedBeamSet);
        }
        Ok(Self { beams })
    }

    pub fn from_prompt(prompt: &[Token]) -> Self {
        Self {
            beams: vec![Beam::from_prompt(prompt)],
        }
    }

    pub fn width(&self) -> usize {
        self.beams.len()
    }

    pub fn beams(&self) -> &[Beam] {
        &self.beams
    }

    pub fn into_beams(self) -> Vec<Beam> {
        self.beams
    }

    pub fn contexts(&self) -> Vec<Vec<Token>> {
        self.beams.iter().map(|b| b.tokens.clone()).collect()
    }

    /// Same beams, likelihoods recomputed under another model.
    pub fn rescored<M: TokenModel + ?Sized>(&self, model: &M) -> Result<BeamSet> {
        let beams = self
            .beams
            .iter()
            .map(|b| {
                Ok(Beam {
                    log_likelihood: b.recompute_log_likelihood(model)?,
                    ..b.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(BeamSet { beams })
    }
}

/// A cell of the joint (beam, token) space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct JointIndex {
    pub beam: usize,
    pub token: Token,
}

impl JointIndex {
    pub fn from_flat(cell: usize, vocab_size: usize) -> Self {
        Self {
            beam: cell / vocab_size,
            token: (cell % vocab_size) as Token,
        }
    }

    pub fn flat(&self, vocab_size: usize) -> usize {
        self.beam * vocab_size + self.token as usize
    }
}

/// Warped joint over (beam, token) cells from per-beam log-likelihoods and
/// next-token rows. Touches each cell once.
pub fn beam_joint(
    log_likelihoods: &[f64],
    rows: &[Distribution],
    warp: &WarpSpec,
) -> Result<Distribution> {
    debug_assert_eq!(log_likelihoods.len(), rows.len());
    let vocab = rows.first().ok_or(DecodeError::EmptyBeamSet)?.len();
    let mut logits = Vec::with_capacity(rows.len() * vocab);
    for (&ll, row) in log_likelihoods.iter().zip(rows) {
        logits.extend(row.weights().iter().map(|&p| ll + p.ln()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(DecodeError::DegenerateSupport);
    }
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let joint = Distribution::from_weights(weights)?;
    apply_warp(warp, &joint)
}

/// Per-beam warp variant: each beam's row is warped on its own before the
/// joint normalization. Exposed so the two readings can be compared.
pub fn beam_joint_per_beam_warp(
    log_likelihoods: &[f64],
    rows: &[Distribution],
    warp: &WarpSpec,
) -> Result<Distribution> {
    let warped = rows
        .iter()
        .map(|r| apply_warp(warp, r))
        .collect::<Result<Vec<_>>>()?;
    beam_joint(log_likelihoods, &warped, &WarpSpec::IDENTITY)
}

/// The warped beam-sampling distribution for one step from `beams`.
pub fn beam_step_distribution<M: TokenModel + ?Sized>(
    model: &M,
    beams: &BeamSet,
    warp: &WarpSpec,
) -> Result<Distribution> {
    let rows = model.next_distributions(&beams.contexts());
    let lls: Vec<f64> = beams.beams().iter().map(|b| b.log_likelihood).collect();
    beam_joint(&lls, &rows, warp)
}

/// Same object as [`beam_step_distribution`], computed by scoring every
/// extended sequence from scratch. Test oracle only.
pub fn enumerate_step_oracle<M: TokenModel + ?Sized>(
    model: &M,
    beams: &BeamSet,
    warp: &WarpSpec,
) -> Result<Distribution> {
    let vocab = model.vocab().size();
    let cells = beams.width() * vocab;
    if cells > ORACLE_CELL_CAP {
        return Err(DecodeError::OracleTooLarge {
            cells,
            cap: ORACLE_CELL_CAP,
        });
    }
    let mut log_scores = Vec::with_capacity(cells);
    for beam in beams.beams() {
        for token in 0..vocab as Token {
            let mut continuation = beam.generated().to_vec();
            continuation.push(token);
            log_scores.push(sequence_log_prob(model, beam.prompt(), &continuation)?);
        }
    }
    let best = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(DecodeError::DegenerateSupport);
    }
    let unnormalized: Vec<f64> = log_scores.iter().map(|s| (s - best).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    let joint = Distribution::new(unnormalized.iter().map(|u| u / total).collect())?;
    apply_warp(warp, &joint)
}

/// Extends `parents` by the sampled cells, reading token probabilities from
/// the rows the joint was built from.
pub(crate) fn extend_beams(parents: &[Beam], rows: &[Distribution], cells: &[usize]) -> Vec<Beam> {
    let vocab = rows[0].len();
    cells
        .iter()
        .map(|&cell| {
            let JointIndex { beam, token } = JointIndex::from_flat(cell, vocab);
            parents[beam].extend(token, rows[beam].get(token as usize).ln())
        })
        .collect()
}

/// Stochastic beam sampling: at every step `width` cells are drawn iid (with
/// replacement) from the warped joint.
pub fn exact_beam_sample<M: TokenModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    input: &BeamSet,
    width: usize,
    steps: usize,
    warp: &WarpSpec,
    rng: &mut R,
) -> Result<BeamSet> {
    if width == 0 || steps == 0 {
        return Err(DecodeError::InvalidParameter(
            "beam sampling needs width >= 1 and steps >= 1".into(),
        ));
    }
    let mut current = input.clone();
    for _ in 0..steps {
        current = beam_sample_step(model, &current, width, warp, rng)?;
    }
    Ok(current)
}

/// One step of [`exact_beam_sample`]; one batched model call.
pub fn beam_sample_step<M: TokenModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    beams: &BeamSet,
    width: usize,
    warp: &WarpSpec,
    rng: &mut R,
) -> Result<BeamSet> {
    let rows = model.next_distributions(&beams.contexts());
    let lls: Vec<f64> = beams.beams().iter().map(|b| b.log_likelihood).collect();
    let joint = beam_joint(&lls, &rows, warp)?;
    let cells: Vec<usize> = (0..width).map(|_| joint.sample(rng)).collect();
    BeamSet::new(extend_beams(beams.beams(), &rows, &cells))
}

/// Autoregressive sampling from the warped conditional, one token per call.
pub fn multinomial_sample<M: TokenModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    prefix: &[Token],
    steps: usize,
    warp: &WarpSpec,
    rng: &mut R,
) -> Result<Beam> {
    if steps == 0 {
        return Err(DecodeError::InvalidParameter("steps must be >= 1".into()));
    }
    let mut beam = Beam::from_prompt(prefix);
    for _ in 0..steps {
        let row = model.next_distribution(&beam.tokens);
        let warped = apply_warp(warp, &row)?;
        let token = warped.sample(rng);
        beam = beam.extend(token as Token, row.get(token).ln());
    }
    Ok(beam)
}

/// Deterministic beam search: keeps the `width` most likely (beam, token)
/// cells each step, ties to the lowest flattened index. Baseline only.
pub fn beam_search<M: TokenModel + ?Sized>(
    model: &M,
    input: &BeamSet,
    width: usize,
    steps: usize,
) -> Result<BeamSet> {
    if width == 0 || steps == 0 {
        return Err(DecodeError::InvalidParameter(
            "beam search needs width >= 1 and steps >= 1".into(),
        ));
    }
    let mut current = input.clone();
    for _ in 0..steps {
        let rows = model.next_distributions(&current.contexts());
        let lls: Vec<f64> = current.beams().iter().map(|b| b.log_likelihood).collect();
        let joint = beam_joint(&lls, &rows, &WarpSpec::IDENTITY)?;
        let mut ranked = joint.support();
        ranked.sort_by(|&a, &b| joint.get(b).total_cmp(&joint.get(a)));
        ranked.truncate(width);
        current = BeamSet::new(extend_beams(current.beams(), &rows, &ranked))?;
    }
    Ok(current)
}
