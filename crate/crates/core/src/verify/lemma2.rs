//! Small-α expansion of the α-DPO loss around the importance-weighted
//! online SimPO loss.
//!
//! Over ordered pairs `(y_w, y_l)`, `y_w != y_l`, drawn independently from
//! `π_ref` and renormalized:
//!
//! ```text
//! L1(α) = E[ w_corr · -log σ(A) ]     w_corr from π_old ∝ π_ref (π_θ/π_ref)^α
//! L2(α) = E[ -log σ(A - α B) ]        B raw, no Z-score
//! R(α)  = L2 - L1 - α E[ B (log σ(A) - σ(A) + 1) ]
//! ```
//!
//! `R` should shrink quadratically, so halving α should divide it by about 4.

use std::fmt::Write as _;

use super::enumerate::{importance_weights, tilt, EnumeratedSpace};
use crate::autodiff::scalar;
use crate::exec::{self, Execution};
use crate::objectives::alpha_dpo_pointwise;
use crate::policy::{Policy, Reference, Token};
use crate::{Error, Result};

/// Largest enumerated space the verifier accepts (`|V| = 4`, `L = 3`).
pub const MAX_LEMMA2_SEQUENCES: usize = 84;

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma2Config {
    /// Strictly decreasing, within `(0, 0.25]`.
    pub alphas: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    /// Length-normalize `A` (the lemma statement) or not (its proof).
    pub length_normalized: bool,
    pub max_len: usize,
    pub ratio_bound: f64,
    /// Residuals at or below this are treated as converged.
    pub residual_floor: f64,
    /// Extra point at which `|L2 - L1|` is compared with `small_alpha_tol`.
    pub small_alpha: f64,
    pub small_alpha_tol: f64,
    pub exec: Execution,
}

impl Default for Lemma2Config {
    fn default() -> Self {
        Self {
            alphas: (0..6).map(|k| 0.2 * 0.5f64.powi(k)).collect(),
            beta: 1.0,
            gamma: 0.4,
            length_normalized: true,
            max_len: 3,
            ratio_bound: 0.35,
            residual_floor: 1e-13,
            small_alpha: 1e-4,
            small_alpha_tol: 1e-6,
            exec: Execution::default(),
        }
    }
}

impl Lemma2Config {
    fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::config("verify.alphas", "need at least one alpha"));
        }
        if let Some(a) = self.alphas.iter().find(|&&a| !(a > 0.0 && a <= 0.25)) {
            return Err(Error::config("verify.alphas", format!("{a} is outside (0, 0.25]")));
        }
        if self.alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("verify.alphas", "must be strictly decreasing"));
        }
        if !(self.small_alpha > 0.0 && self.small_alpha <= 0.25) {
            return Err(Error::config("verify.small_alpha", "must lie in (0, 0.25]"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("verify.beta", "must be positive"));
        }
        Ok(())
    }
}

/// One ordered pair of the enumerated support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerm {
    pub chosen: usize,
    pub rejected: usize,
    /// Normalized `π_ref(y_w) π_ref(y_l)`.
    pub weight: f64,
    /// `u - γ`.
    pub a: f64,
    /// `log π_θ/π_ref (y_w) - log π_θ/π_ref (y_l)`.
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma2Point {
    pub alpha: f64,
    pub l1: f64,
    pub l2: f64,
    pub linear_term: f64,
    pub residual: f64,
}

/// Everything about the enumerated problem that does not depend on α.
pub struct Lemma2Problem {
    space: EnumeratedSpace,
    policy_lp: Vec<f64>,
    reference_lp: Vec<f64>,
    pairs: Vec<PairTerm>,
    gamma: f64,
}

impl Lemma2Problem {
    pub fn new(policy: &Policy, reference: &Policy, prompt: &[Token], cfg: &Lemma2Config) -> Result<Self> {
        if policy.vocab() != reference.vocab() {
            return Err(Error::Input("policy and reference vocabularies differ".into()));
        }
        let space = EnumeratedSpace::new(policy.vocab(), cfg.max_len)?;
        if space.len() > MAX_LEMMA2_SEQUENCES {
            return Err(Error::config(
                "verify.max_len",
                format!(
                    "{} sequences exceed the bound of {MAX_LEMMA2_SEQUENCES} (|V| <= 4, L <= 3)",
                    space.len()
                ),
            ));
        }
        let policy_lp = space.log_probs(Reference::Policy(policy), prompt)?;
        let reference_lp = space.log_probs(Reference::Policy(reference), prompt)?;
        let support = space.support();
        let seqs = space.sequences();
        let mut pairs = Vec::with_capacity(support.len() * support.len());
        for &i in &support {
            for &j in &support {
                if i == j {
                    continue;
                }
                let (lt_w, lt_l) = (policy_lp[i], policy_lp[j]);
                let u = if cfg.length_normalized {
                    cfg.beta / seqs[i].len() as f64 * lt_w - cfg.beta / seqs[j].len() as f64 * lt_l
                } else {
                    cfg.beta * (lt_w - lt_l)
                };
                pairs.push(PairTerm {
                    chosen: i,
                    rejected: j,
                    weight: (reference_lp[i] + reference_lp[j]).exp(),
                    a: u - cfg.gamma,
                    b: (lt_w - reference_lp[i]) - (lt_l - reference_lp[j]),
                });
            }
        }
        let z = exec::ordered_sum(pairs.iter().map(|p| p.weight));
        for p in &mut pairs {
            p.weight /= z;
        }
        Ok(Self {
            space,
            policy_lp,
            reference_lp,
            pairs,
            gamma: cfg.gamma,
        })
    }

    pub fn space(&self) -> &EnumeratedSpace {
        &self.space
    }

    pub fn pairs(&self) -> &[PairTerm] {
        &self.pairs
    }

    pub fn evaluate(&self, alpha: f64, exec: Execution) -> Lemma2Point {
        let old = tilt(&self.policy_lp, &self.reference_lp, alpha);
        let terms = exec::map(exec, &self.pairs, |p| {
            let iw = importance_weights(
                old[p.chosen],
                old[p.rejected],
                self.reference_lp[p.chosen].exp(),
                self.reference_lp[p.rejected].exp(),
            );
            let ls = scalar::log_sigmoid(p.a);
            let l1 = p.weight * iw.w_corr * -ls;
            let l2 = p.weight * alpha_dpo_pointwise(p.a + self.gamma, self.gamma, alpha, p.b);
            let lin = p.weight * p.b * (ls - scalar::sigmoid(p.a) + 1.0);
            (l1, l2, lin)
        });
        let l1 = exec::ordered_sum(terms.iter().map(|t| t.0));
        let l2 = exec::ordered_sum(terms.iter().map(|t| t.1));
        let linear_term = exec::ordered_sum(terms.iter().map(|t| t.2));
        Lemma2Point {
            alpha,
            l1,
            l2,
            linear_term,
            residual: l2 - l1 - alpha * linear_term,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub length_normalized: bool,
    pub points: Vec<Lemma2Point>,
    /// `|R(α_{k+1})| / |R(α_k)|`; `None` where `|R(α_k)|` is below the floor.
    pub ratios: Vec<Option<f64>>,
    /// Least-squares slope of `ln|R|` against `ln α`.
    pub order_estimate: f64,
    pub ratio_bound: f64,
    /// The ratio rule alone.
    pub pass: bool,
    pub small_alpha: Lemma2Point,
    pub small_alpha_tol: f64,
}

impl ConvergenceReport {
    pub fn alphas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.alpha).collect()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.residual).collect()
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn small_alpha_gap(&self) -> f64 {
        (self.small_alpha.l2 - self.small_alpha.l1).abs()
    }

    pub fn small_alpha_pass(&self) -> bool {
        self.small_alpha_gap() < self.small_alpha_tol
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,L1,L2,linear_term,residual\n");
        for p in self.points.iter().chain(std::iter::once(&self.small_alpha)) {
            let _ = writeln!(
                out,
                "{:?},{:?},{:?},{:?},{:?}",
                p.alpha, p.l1, p.l2, p.linear_term, p.residual
            );
        }
        out
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return f64::NAN;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

pub fn verify_lemma2(
    policy: &Policy,
    reference: &Policy,
    prompt: &[Token],
    cfg: &Lemma2Config,
) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let problem = Lemma2Problem::new(policy, reference, prompt, cfg)?;
    let points: Vec<Lemma2Point> = cfg.alphas.iter().map(|&a| problem.evaluate(a, cfg.exec)).collect();
    if let Some(p) = points.iter().find(|p| !p.residual.is_finite()) {
        return Err(Error::NonFinite {
            what: "lemma 2 residual",
            step: cfg.alphas.iter().position(|&a| a == p.alpha).unwrap_or(0),
        });
    }
    let floor = cfg.residual_floor;
    let ratios: Vec<Option<f64>> = points
        .windows(2)
        .map(|w| (w[0].residual.abs() > floor).then(|| w[1].residual.abs() / w[0].residual.abs()))
        .collect();
    let pass = ratios.iter().flatten().all(|&r| r <= cfg.ratio_bound);
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.residual.abs() > floor)
        .map(|p| (p.alpha.ln(), p.residual.abs().ln()))
        .collect();
    Ok(ConvergenceReport {
        length_normalized: cfg.length_normalized,
        order_estimate: slope(&logs),
        ratio_bound: cfg.ratio_bound,
        pass,
        small_alpha: problem.evaluate(cfg.small_alpha, cfg.exec),
        small_alpha_tol: cfg.small_alpha_tol,
        points,
        ratios,
    })
}
