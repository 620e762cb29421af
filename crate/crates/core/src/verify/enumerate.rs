use crate::autodiff::scalar;
use crate::policy::{Reference, Token, Vocabulary};
use crate::{Error, Result};

/// Upper bound on the number of enumerated sequences.
pub const MAX_SEQUENCES: usize = 1 << 20;

/// Every response of length `1..=max_len` over a vocabulary.
///
/// A sequence carries probability mass only if it is *terminal*: it ends at
/// its first EOS, or it reaches `max_len` without an earlier EOS. Terminal
/// probabilities under any autoregressive policy sum to one.
#[derive(Debug, Clone)]
pub struct EnumeratedSpace {
    vocab: Vocabulary,
    max_len: usize,
    sequences: Vec<Vec<Token>>,
}

/// `Σ_{k=1..L} |V|^k`, or `None` on overflow.
pub fn space_size(vocab: Vocabulary, max_len: usize) -> Option<usize> {
    let v = vocab.size();
    let mut total = 0usize;
    let mut pow = 1usize;
    for _ in 0..max_len {
        pow = pow.checked_mul(v)?;
        total = total.checked_add(pow)?;
    }
    Some(total)
}

impl EnumeratedSpace {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::config("verify.max_len", "must be at least 1"));
        }
        match space_size(vocab, max_len) {
            Some(n) if n <= MAX_SEQUENCES => {}
            _ => {
                return Err(Error::config(
                    "verify.max_len",
                    format!(
                        "|V| = {} with L = {max_len} exceeds the enumeration bound of {MAX_SEQUENCES} sequences",
                        vocab.size()
                    ),
                ))
            }
        }
        let v = vocab.size() as Token;
        let mut sequences = Vec::new();
        let mut layer: Vec<Vec<Token>> = vec![vec![]];
        for _ in 0..max_len {
            layer = layer
                .iter()
                .flat_map(|prefix| {
                    (0..v).map(move |t| {
                        let mut s = prefix.clone();
                        s.push(t);
                        s
                    })
                })
                .collect();
            sequences.extend(layer.iter().cloned());
        }
        Ok(Self {
            vocab,
            max_len,
            sequences,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<Token>] {
        &self.sequences
    }

    pub fn is_terminal(&self, y: &[Token]) -> bool {
        let eos = self.vocab.eos();
        let Some((&last, body)) = y.split_last() else {
            return false;
        };
        !body.contains(&eos) && (last == eos || y.len() == self.max_len)
    }

    /// Indices of terminal sequences.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.is_terminal(&self.sequences[i]))
            .collect()
    }

    /// Per-sequence log-probability; `-inf` off the terminal support.
    pub fn log_probs(&self, model: Reference<'_>, prompt: &[Token]) -> Result<Vec<f64>> {
        self.sequences
            .iter()
            .map(|y| {
                if self.is_terminal(y) {
                    model.sequence_log_prob(prompt, y)
                } else {
                    Ok(f64::NEG_INFINITY)
                }
            })
            .collect()
    }

    pub fn probabilities(&self, model: Reference<'_>, prompt: &[Token]) -> Result<Vec<f64>> {
        Ok(self.log_probs(model, prompt)?.into_iter().map(f64::exp).collect())
    }
}

/// The geometric mixture `∝ π_ref^{1-α} π_θ^α`, normalized over the
/// terminal support. Inputs are per-sequence log-probabilities with `-inf`
/// off the support.
pub fn tilt(policy_lp: &[f64], reference_lp: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(policy_lp.len(), reference_lp.len());
    let logits: Vec<f64> = policy_lp
        .iter()
        .zip(reference_lp)
        .map(|(&lt, &lr)| {
            if lr == f64::NEG_INFINITY || lt == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                (1.0 - alpha) * lr + alpha * lt
            }
        })
        .collect();
    scalar::log_softmax(&logits).into_iter().map(f64::exp).collect()
}

/// `π_old ∝ π_ref (π_θ/π_ref)^α` over the enumerated space for one prompt.
pub fn tilted_old_policy(
    space: &EnumeratedSpace,
    policy: Reference<'_>,
    reference: Reference<'_>,
    prompt: &[Token],
    alpha: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(
            "verify.alpha",
            format!("must lie in [0, 1], got {alpha}"),
        ));
    }
    Ok(tilt(
        &space.log_probs(policy, prompt)?,
        &space.log_probs(reference, prompt)?,
        alpha,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceWeights {
    pub w: f64,
    pub w_corr: f64,
}

/// `w = r_w r_l` and `w_corr = r_w / r_l` with `r = π_old / π_ref`.
pub fn importance_weights(old_w: f64, old_l: f64, ref_w: f64, ref_l: f64) -> ImportanceWeights {
    let r_w = old_w / ref_w;
    let r_l = old_l / ref_l;
    ImportanceWeights {
        w: r_w * r_l,
        w_corr: r_w / r_l,
    }
}
