//! DPO against a uniform reference versus SimPO.

use crate::autodiff::Tape;
use crate::data::PreferenceTriple;
use crate::objectives::{baseline_loss, dpo_loss_with_reference, LossConfig, Method};
use crate::policy::{Policy, PolicyParams, Reference};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub equal_length_pairs: usize,
    pub mixed_length_pairs: usize,
    /// `max |DPO(U) - SimPO_noLN(γ = 0)|` over equal-length triples.
    pub equal_length_max_gap: f64,
    /// `max |DPO(U) - SimPO_noLN(γ_i)|`, `γ_i = β(|y_l| - |y_w|) ln|V|`,
    /// over mixed-length triples.
    pub mixed_length_max_gap: f64,
    /// `max |DPO_LN(U) - SimPO(γ = 0)|` over every triple.
    pub length_normalized_max_gap: f64,
    pub tol: f64,
}

impl Theorem1Report {
    pub fn pass(&self) -> bool {
        self.equal_length_max_gap < self.tol
            && self.mixed_length_max_gap < self.tol
            && self.length_normalized_max_gap < self.tol
    }

    pub fn merge(&mut self, other: &Theorem1Report) {
        self.equal_length_pairs += other.equal_length_pairs;
        self.mixed_length_pairs += other.mixed_length_pairs;
        self.equal_length_max_gap = self.equal_length_max_gap.max(other.equal_length_max_gap);
        self.mixed_length_max_gap = self.mixed_length_max_gap.max(other.mixed_length_max_gap);
        self.length_normalized_max_gap = self.length_normalized_max_gap.max(other.length_normalized_max_gap);
    }
}

/// `γ` for which SimPO without length normalization reproduces DPO with a
/// uniform reference on this triple.
pub fn implied_gamma(triple: &PreferenceTriple, beta: f64, vocab_size: usize) -> f64 {
    beta * (triple.rejected.len() as f64 - triple.chosen.len() as f64) * (vocab_size as f64).ln()
}

pub fn verify_theorem1(policy: &Policy, dataset: &[PreferenceTriple], beta: f64) -> Result<Theorem1Report> {
    let vocab = policy.vocab();
    let mut report = Theorem1Report {
        equal_length_pairs: 0,
        mixed_length_pairs: 0,
        equal_length_max_gap: 0.0,
        mixed_length_max_gap: 0.0,
        length_normalized_max_gap: 0.0,
        tol: 1e-12,
    };
    let simpo = |ln: bool, gamma: f64| LossConfig {
        beta,
        gamma,
        length_normalized: ln,
        ..LossConfig::for_method(Method::SimPo)
    };
    for t in dataset {
        t.validate(vocab)?;
        let tape = Tape::new();
        let params = PolicyParams::lazy(&tape, policy);
        let one = std::slice::from_ref(t);
        let dpo = dpo_loss_with_reference(&params, Reference::Uniform(vocab), one, beta, false)?
            .value
            .value();
        let gamma = implied_gamma(t, beta, vocab.size());
        let sim = baseline_loss(Method::SimPo, &params, None, one, &simpo(false, gamma))?
            .value
            .value();
        let gap = (dpo - sim).abs();
        if t.chosen.len() == t.rejected.len() {
            report.equal_length_pairs += 1;
            report.equal_length_max_gap = report.equal_length_max_gap.max(gap);
        } else {
            report.mixed_length_pairs += 1;
            report.mixed_length_max_gap = report.mixed_length_max_gap.max(gap);
        }
        let dpo_ln = dpo_loss_with_reference(&params, Reference::Uniform(vocab), one, beta, true)?
            .value
            .value();
        let sim_ln = baseline_loss(Method::SimPo, &params, None, one, &simpo(true, 0.0))?
            .value
            .value();
        report.length_normalized_max_gap = report.length_normalized_max_gap.max((dpo_ln - sim_ln).abs());
    }
    Ok(report)
}
