//! Tabular order-`n` softmax policies over a small vocabulary.
//!
//! The next-token distribution depends only on the last `order` tokens of
//! prompt + response prefix. Windows shorter than `order` are left-padded
//! with the end-of-sequence id, which doubles as a start marker. The logit
//! table is indexed by the window read as a base-`|V|` number, oldest token
//! most significant, so row order is lexicographic in the context.

pub(crate) mod checkpoint;
mod graph;
mod sft;

pub use checkpoint::{CHECKPOINT_MAGIC, REWARD_MAGIC};
pub use graph::PolicyParams;
pub use sft::{fit_reference, fit_reference_traced, SftConfig, SftTrace};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::scalar;
use crate::{Error, Result};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocabulary(u32);

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::Input(format!("vocabulary size must be at least 2, got {size}")));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0 as usize
    }

    /// Reserved end-of-sequence id, `|V| - 1`.
    pub fn eos(self) -> Token {
        self.0 - 1
    }

    pub fn contains(self, t: Token) -> bool {
        t < self.0
    }

    pub fn validate(self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().position(|&t| !self.contains(t)) {
            None => Ok(()),
            Some(i) => Err(Error::Input(format!(
                "token {} at position {i} is outside vocabulary of size {}",
                tokens[i], self.0
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    vocab: Vocabulary,
    order: usize,
    logits: Vec<f64>,
}

impl Policy {
    /// All-zero logits.
    pub fn uniform(vocab: Vocabulary, order: usize) -> Result<Self> {
        let rows = num_contexts(vocab, order)?;
        Ok(Self {
            vocab,
            order,
            logits: vec![0.0; rows * vocab.size()],
        })
    }

    pub fn from_logits(vocab: Vocabulary, order: usize, logits: Vec<f64>) -> Result<Self> {
        let want = num_contexts(vocab, order)? * vocab.size();
        if logits.len() != want {
            return Err(Error::Input(format!(
                "logit table has {} entries, expected {want}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::Input(format!("logit {i} is not finite")));
        }
        Ok(Self { vocab, order, logits })
    }

    /// Logits drawn i.i.d. `N(0, scale²)`.
    pub fn random<R: Rng + ?Sized>(vocab: Vocabulary, order: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::uniform(vocab, order)?;
        for l in &mut p.logits {
            let z: f64 = StandardNormal.sample(rng);
            *l = scale * z;
        }
        Ok(p)
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab.size()
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, ctx: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[ctx * v..(ctx + 1) * v]
    }

    pub fn row_mut(&mut self, ctx: usize) -> &mut [f64] {
        let v = self.vocab.size();
        &mut self.logits[ctx * v..(ctx + 1) * v]
    }

    /// Row index for the window ending at the end of `history`.
    /// Tokens are assumed valid.
    pub fn context_index(&self, history: &[Token]) -> usize {
        context_index(self.vocab, self.order, history)
    }

    /// Next-token log-probabilities after `context`.
    pub fn token_distribution(&self, context: &[Token]) -> Result<Vec<f64>> {
        self.vocab.validate(context)?;
        Ok(scalar::log_softmax(self.row(self.context_index(context))))
    }

    /// `log π(y_t | x, y_<t)` for every response position.
    pub fn token_log_probs(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
        check_pair(self.vocab, prompt, response)?;
        let mut history = prompt.to_vec();
        let mut out = Vec::with_capacity(response.len());
        for &tok in response {
            let row = self.row(self.context_index(&history));
            out.push(row[tok as usize] - scalar::log_sum_exp(row));
            history.push(tok);
        }
        Ok(out)
    }

    /// `Σ_t log π(y_t | x, y_<t)`.
    pub fn log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        Ok(self
            .token_log_probs(prompt, response)?
            .into_iter()
            .fold(0.0, |a, b| a + b))
    }

    /// Ancestral sampling until end-of-sequence (kept in the output) or
    /// `max_len` tokens.
    pub fn sample<R: Rng + ?Sized>(&self, prompt: &[Token], max_len: usize, rng: &mut R) -> Result<Vec<Token>> {
        if max_len == 0 {
            return Err(Error::Input("max_len must be at least 1".into()));
        }
        self.vocab.validate(prompt)?;
        let mut history = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_len {
            let probs: Vec<f64> = scalar::log_softmax(self.row(self.context_index(&history)))
                .into_iter()
                .map(f64::exp)
                .collect();
            let tok = draw(&probs, rng) as Token;
            out.push(tok);
            history.push(tok);
            if tok == self.vocab.eos() {
                break;
            }
        }
        Ok(out)
    }
}

pub(crate) fn num_contexts(vocab: Vocabulary, order: usize) -> Result<usize> {
    u32::try_from(order)
        .ok()
        .and_then(|o| vocab.size().checked_pow(o))
        .filter(|&n| n.checked_mul(vocab.size()).is_some_and(|m| m <= 1 << 26))
        .ok_or_else(|| {
            Error::Input(format!(
                "order {order} over vocabulary {} gives too many contexts",
                vocab.size()
            ))
        })
}

pub(crate) fn context_index(vocab: Vocabulary, order: usize, history: &[Token]) -> usize {
    let v = vocab.size();
    let pad = order.saturating_sub(history.len());
    let tail = &history[history.len().saturating_sub(order)..];
    let mut idx = 0usize;
    for _ in 0..pad {
        idx = idx * v + vocab.eos() as usize;
    }
    for &t in tail {
        idx = idx * v + t as usize;
    }
    idx
}

pub(crate) fn check_pair(vocab: Vocabulary, prompt: &[Token], response: &[Token]) -> Result<()> {
    if response.is_empty() {
        return Err(Error::Input("response must be non-empty".into()));
    }
    vocab.validate(prompt)?;
    vocab.validate(response)
}

/// Inverse-CDF draw; the last index absorbs rounding slack.
fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Source of `π_ref` values for objectives and diagnostics.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Policy(&'a Policy),
    /// `U(y|x) = |V|^{-|y|}`.
    Uniform(Vocabulary),
    /// At every position of a scored sequence, all mass on the observed
    /// token. Not a proper conditional model (two responses sharing a prefix
    /// would disagree about it); it exists for the regime in which
    /// `E_{z∼π_ref}` collapses onto the observed token.
    ObservedOneHot,
}

impl Reference<'_> {
    pub fn sequence_log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        match self {
            Reference::Policy(p) => p.log_prob(prompt, response),
            Reference::Uniform(v) => {
                check_pair(*v, prompt, response)?;
                Ok(-(response.len() as f64) * (v.size() as f64).ln())
            }
            Reference::ObservedOneHot => {
                if response.is_empty() {
                    return Err(Error::Input("response must be non-empty".into()));
                }
                Ok(0.0)
            }
        }
    }

    /// Reference next-token log-probabilities at each response position.
    /// `-inf` entries mark zero-probability tokens.
    pub fn step_log_probs(&self, vocab: Vocabulary, prompt: &[Token], response: &[Token]) -> Result<Vec<Vec<f64>>> {
        check_pair(vocab, prompt, response)?;
        match self {
            Reference::Policy(p) => {
                if p.vocab() != vocab {
                    return Err(Error::Input(format!(
                        "reference vocabulary {} does not match {}",
                        p.vocab().size(),
                        vocab.size()
                    )));
                }
                let mut history = prompt.to_vec();
                let mut out = Vec::with_capacity(response.len());
                for &tok in response {
                    out.push(scalar::log_softmax(p.row(p.context_index(&history))));
                    history.push(tok);
                }
                Ok(out)
            }
            Reference::Uniform(_) => {
                let l = -(vocab.size() as f64).ln();
                Ok(vec![vec![l; vocab.size()]; response.len()])
            }
            Reference::ObservedOneHot => Ok(response
                .iter()
                .map(|&tok| {
                    let mut row = vec![f64::NEG_INFINITY; vocab.size()];
                    row[tok as usize] = 0.0;
                    row
                })
                .collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn vocab(n: u32) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    #[test]
    fn vocabulary_rejects_size_one() {
        assert!(Vocabulary::new(1).is_err());
        assert_eq!(vocab(5).eos(), 4);
    }

    #[test]
    fn uniform_distribution() {
        let p = Policy::uniform(vocab(16), 2).unwrap();
        let d = p.token_distribution(&[3, 1]).unwrap();
        for l in d {
            assert!((l + 16f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_softmax() {
        let p = Policy::from_logits(vocab(2), 0, vec![1.0, 0.0]).unwrap();
        let d = p.token_distribution(&[]).unwrap();
        assert!((d[0] - (-0.313_261_687_518_222_8)).abs() < 1e-15);
        assert!((d[1] - (-1.313_261_687_518_222_8)).abs() < 1e-15);
    }

    #[test]
    fn invalid_tokens_are_rejected() {
        let p = Policy::uniform(vocab(4), 1).unwrap();
        assert!(p.token_distribution(&[4]).is_err());
        assert!(p.log_prob(&[0], &[]).is_err());
        assert!(p.log_prob(&[0], &[1, 9]).is_err());
    }

    #[test]
    fn uniform_sequence_log_prob() {
        let p = Policy::uniform(vocab(16), 2).unwrap();
        let lp = p.log_prob(&[0], &[5, 6]).unwrap();
        assert!((lp + 2.0 * 16f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn context_padding_uses_eos() {
        let v = vocab(3);
        // order 2, history [1] -> window [eos, 1] = 2*3 + 1.
        assert_eq!(context_index(v, 2, &[1]), 7);
        assert_eq!(context_index(v, 2, &[]), 8);
        assert_eq!(context_index(v, 2, &[0, 2, 1, 0]), 3);
        assert_eq!(context_index(v, 0, &[0, 2]), 0);
    }

    #[test]
    fn deterministic_policy_path() {
        let v = vocab(4);
        let mut p = Policy::uniform(v, 1).unwrap();
        // 0 -> 2 -> 1 -> eos
        for (ctx, next) in [(0usize, 2usize), (2, 1), (1, 3)] {
            p.row_mut(ctx)[next] = 60.0;
        }
        assert!(p.log_prob(&[0], &[2, 1, 3]).unwrap().abs() < 1e-20);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(p.sample(&[0], 10, &mut rng).unwrap(), vec![2, 1, 3]);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Policy::random(vocab(6), 2, 1.0, &mut rng).unwrap();
        let a = p.sample(&[1, 2], 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = p.sample(&[1, 2], 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(p.sample(&[1], 0, &mut rng).is_err());
    }

    #[test]
    fn uniform_reference_closed_form() {
        let r = Reference::Uniform(vocab(16));
        let lp = r.sequence_log_prob(&[0], &[1, 2, 3]).unwrap();
        assert_eq!(lp, -3.0 * 16f64.ln());
    }
}
