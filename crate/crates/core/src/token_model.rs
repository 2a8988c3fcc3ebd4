//! The autoregressive model interface and seeded Markov-table toy models.
//!
//! Everything downstream consumes models only through [`TokenModel`], i.e. as
//! a pure map from a context to a next-token [`Distribution`]. The toy
//! [`MarkovModel`] keys its rows on the last `order` context tokens; contexts
//! shorter than `order` get rows of their own, so a length-0 context is a
//! valid query for every model.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Gamma};
use serde::Serialize;

use crate::distribution::Distribution;
use crate::error::{DecodeError, Result};

pub type Token = u32;

/// Dense, zero-based token ids `0..size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Vocabulary {
    size: usize,
    glyphs: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(DecodeError::VocabularyTooSmall(size));
        }
        Ok(Self { size, glyphs: None })
    }

    /// Attaches one display glyph per token, used only for reports.
    pub fn with_glyphs(self, glyphs: Vec<String>) -> Result<Self> {
        if glyphs.len() != self.size {
            return Err(DecodeError::InvalidParameter(format!(
                "{} glyphs for a vocabulary of {}",
                glyphs.len(),
                self.size
            )));
        }
        Ok(Self {
            glyphs: Some(glyphs),
            ..self
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn glyph(&self, token: Token) -> String {
        match &self.glyphs {
            Some(g) => g[token as usize].clone(),
            None => token.to_string(),
        }
    }

    pub fn render(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.glyph(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, token: Token) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(DecodeError::InvalidToken {
                token,
                size: self.size,
            })
        }
    }
}

/// A purely functional conditional next-token distribution.
///
/// Identical contexts must always yield bit-identical distributions.
pub trait TokenModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Number of trailing context tokens the model conditions on.
    fn order(&self) -> usize;

    fn next_distribution(&self, context: &[Token]) -> Distribution;

    /// One forward pass over many contexts at once.
    fn next_distributions(&self, contexts: &[Vec<Token>]) -> Vec<Distribution> {
        contexts.iter().map(|c| self.next_distribution(c)).collect()
    }

    /// Probability of a single token; lets table models skip the row copy.
    fn token_prob(&self, context: &[Token], token: Token) -> f64 {
        self.next_distribution(context).get(token as usize)
    }
}

impl<M: TokenModel + ?Sized> TokenModel for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn order(&self) -> usize {
        (**self).order()
    }
    fn next_distribution(&self, context: &[Token]) -> Distribution {
        (**self).next_distribution(context)
    }
    fn next_distributions(&self, contexts: &[Vec<Token>]) -> Vec<Distribution> {
        (**self).next_distributions(contexts)
    }
    fn token_prob(&self, context: &[Token], token: Token) -> f64 {
        (**self).token_prob(context, token)
    }
}

/// Finite-order Markov table with rows drawn once from a symmetric
/// Dirichlet at construction.
#[derive(Debug, Clone)]
pub struct MarkovModel {
    vocab: Vocabulary,
    order: usize,
    /// `offsets[k]` is the first row for contexts of effective length `k`.
    offsets: Vec<usize>,
    rows: Arc<Vec<Distribution>>,
}

impl MarkovModel {
    /// Builds a model from explicit rows, laid out as in [`Self::row_index`].
    pub fn from_rows(vocab: Vocabulary, order: usize, rows: Vec<Distribution>) -> Result<Self> {
        let expected = row_count(vocab.size(), order);
        if rows.len() != expected || rows.iter().any(|r| r.len() != vocab.size()) {
            return Err(DecodeError::InvalidParameter(format!(
                "order-{order} table over {} tokens needs {expected} rows of that width",
                vocab.size()
            )));
        }
        Ok(Self::from_rows_unchecked(vocab, order, rows))
    }

    fn from_rows_unchecked(vocab: Vocabulary, order: usize, rows: Vec<Distribution>) -> Self {
        let offsets = row_offsets(vocab.size(), order);
        Self {
            vocab,
            order,
            offsets,
            rows: Arc::new(rows),
        }
    }

    /// Every row uniform.
    pub fn uniform(vocab: Vocabulary, order: usize) -> Self {
        let rows = vec![Distribution::uniform(vocab.size()); row_count(vocab.size(), order)];
        Self::from_rows_unchecked(vocab, order, rows)
    }

    pub fn rows(&self) -> &[Distribution] {
        &self.rows
    }

    /// Row index serving `context`.
    pub fn row_index(&self, context: &[Token]) -> usize {
        let k = self.order.min(context.len());
        let tail = &context[context.len() - k..];
        let v = self.vocab.size();
        let code = tail.iter().fold(0usize, |acc, &t| acc * v + t as usize);
        self.offsets[k] + code
    }
}

impl TokenModel for MarkovModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn next_distribution(&self, context: &[Token]) -> Distribution {
        self.rows[self.row_index(context)].clone()
    }

    fn token_prob(&self, context: &[Token], token: Token) -> f64 {
        self.rows[self.row_index(context)].get(token as usize)
    }
}

fn row_count(vocab: usize, order: usize) -> usize {
    (0..=order).map(|k| vocab.pow(k as u32)).sum()
}

fn row_offsets(vocab: usize, order: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(order + 1);
    let mut acc = 0;
    for k in 0..=order {
        offsets.push(acc);
        acc += vocab.pow(k as u32);
    }
    offsets
}

const MAX_TABLE_ROWS: usize = 1 << 20;

fn dirichlet_rows(
    rng: &mut ChaCha8Rng,
    vocab: usize,
    rows: usize,
    concentration: f64,
) -> Vec<Distribution> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration checked by caller");
    (0..rows)
        .map(|_| {
            let draws: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng)).collect();
            // Tiny concentrations can underflow every draw; fall back to a
            // point mass on the largest one.
            Distribution::from_weights(draws.clone()).unwrap_or_else(|_| {
                let best = draws
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &w)| if w > draws[b] { i } else { b });
                Distribution::point(vocab, best)
            })
        })
        .collect()
}

fn check_table_params(vocab: &Vocabulary, order: usize, concentration: f64) -> Result<usize> {
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(DecodeError::InvalidParameter(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let rows = (0..=order)
        .try_fold(0usize, |acc, k| {
            vocab
                .size()
                .checked_pow(k as u32)
                .and_then(|n| acc.checked_add(n))
        })
        .filter(|&n| n <= MAX_TABLE_ROWS)
        .ok_or_else(|| {
            DecodeError::InvalidParameter(format!(
                "order {order} over {} tokens exceeds the {MAX_TABLE_ROWS}-row table cap",
                vocab.size()
            ))
        })?;
    Ok(rows)
}

/// Builds a seeded Markov model of the given order.
pub fn make_markov_model(
    seed: u64,
    vocab: Vocabulary,
    order: usize,
    concentration: f64,
) -> Result<MarkovModel> {
    let rows = check_table_params(&vocab, order, concentration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = dirichlet_rows(&mut rng, vocab.size(), rows, concentration);
    Ok(MarkovModel::from_rows_unchecked(vocab, order, table))
}

/// A large model and a small draft model over one vocabulary.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub large: MarkovModel,
    pub small: MarkovModel,
    pub divergence: f64,
}

/// Stream offset for the independent rows mixed into the small model.
const SMALL_STREAM: u64 = 0x5EED_D12A_F7B1_0001;

/// Builds a correlated pair: each small row is
/// `(1 - divergence) * large_row + divergence * fresh_row`, renormalized.
pub fn make_model_pair(
    seed: u64,
    vocab: Vocabulary,
    order: usize,
    divergence: f64,
    concentration: f64,
) -> Result<ModelPair> {
    if !(0.0..=1.0).contains(&divergence) {
        return Err(DecodeError::InvalidParameter(format!(
            "divergence must lie in [0, 1], got {divergence}"
        )));
    }
    let large = make_markov_model(seed, vocab.clone(), order, concentration)?;
    let small = if divergence == 0.0 {
        large.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SMALL_STREAM);
        let fresh = dirichlet_rows(&mut rng, vocab.size(), large.rows.len(), concentration);
        let rows = large
            .rows
            .iter()
            .zip(&fresh)
            .map(|(l, f)| {
                let mixed = l
                    .weights()
                    .iter()
                    .zip(f.weights())
                    .map(|(a, b)| (1.0 - divergence) * a + divergence * b)
                    .collect();
                Distribution::from_weights(mixed).expect("convex mixture keeps mass")
            })
            .collect();
        MarkovModel::from_rows_unchecked(vocab, order, rows)
    };
    Ok(ModelPair {
        large,
        small,
        divergence,
    })
}

/// `sum_t log p(x_t | prefix, x_<t)`. Zero-probability continuations give
/// `f64::NEG_INFINITY`.
pub fn sequence_log_prob<M: TokenModel + ?Sized>(
    model: &M,
    prefix: &[Token],
    continuation: &[Token],
) -> Result<f64> {
    if continuation.is_empty() {
        return Err(DecodeError::InvalidParameter(
            "continuation must not be empty".into(),
        ));
    }
    let vocab = model.vocab();
    for &t in prefix.iter().chain(continuation) {
        vocab.check(t)?;
    }
    let mut context = Vec::with_capacity(prefix.len() + continuation.len());
    context.extend_from_slice(prefix);
    let mut total = 0.0;
    for &t in continuation {
        total += model.token_prob(&context, t).ln();
        context.push(t);
    }
    Ok(total)
}

/// Queries `model` on every context in a single batched pass.
pub fn batch_next_distributions<M: TokenModel + ?Sized>(
    model: &M,
    contexts: &[Vec<Token>],
) -> Vec<Distribution> {
    model.next_distributions(contexts)
}

/// Counts forward passes through a model.
///
/// A batched query counts as one call regardless of batch size, mirroring one
/// run of the network over a packed batch.
#[derive(Debug)]
pub struct Metered<M> {
    model: M,
    calls: AtomicU64,
}

impl<M: TokenModel> Metered<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// The wrapped model, bypassing the counter.
    pub fn inner(&self) -> &M {
        &self.model
    }
}

impl<M: TokenModel> TokenModel for Metered<M> {
    fn vocab(&self) -> &Vocabulary {
        self.model.vocab()
    }

    fn order(&self) -> usize {
        self.model.order()
    }

    fn next_distribution(&self, context: &[Token]) -> Distribution {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.model.next_distribution(context)
    }

    fn next_distributions(&self, contexts: &[Vec<Token>]) -> Vec<Distribution> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.model.next_distributions(contexts)
    }

    fn token_prob(&self, context: &[Token], token: Token) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.model.token_prob(context, token)
    }
}

/// Mean total-variation distance between corresponding large and small rows.
pub fn mean_row_tv(pair: &ModelPair) -> f64 {
    let rows = pair.large.rows();
    let total: f64 = rows
        .iter()
        .zip(pair.small.rows())
        .map(|(p, q)| {
            0.5 * p
                .weights()
                .iter()
                .zip(q.weights())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    total / rows.len() as f64
}
