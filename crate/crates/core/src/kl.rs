//! Sequential KL divergences and the token-level (TDPO) objective.

use crate::autodiff::{scalar, Node};
use crate::data::PreferenceTriple;
use crate::objectives::{missing_reference, BatchLoss, ExampleTerms, LossConfig, Scored};
use crate::policy::{Policy, PolicyParams, Reference, Token};
use crate::{Error, Result};

/// `SeqKL(x, y; π_ref ‖ π_θ)` along a response.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqKlReport {
    /// `Σ_t KL(π_ref(·|x,y_<t) ‖ π_θ(·|x,y_<t))`.
    pub exact: f64,
    /// Single-sample estimate `Σ_t log π_ref(y_t|·) - log π_θ(y_t|·)`.
    pub approx: f64,
    pub per_token: Vec<f64>,
}

fn token_kl(p_log: &[f64], q_log: &[f64]) -> f64 {
    let kl: f64 = p_log
        .iter()
        .zip(q_log)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum();
    // Rounding can push an exact zero slightly negative.
    kl.max(0.0)
}

pub fn seq_kl(policy: &Policy, reference: Reference<'_>, prompt: &[Token], response: &[Token]) -> Result<SeqKlReport> {
    let ref_rows = reference.step_log_probs(policy.vocab(), prompt, response)?;
    let mut history = prompt.to_vec();
    let mut per_token = Vec::with_capacity(response.len());
    let mut approx = 0.0;
    for (row, &tok) in ref_rows.iter().zip(response) {
        let theta = scalar::log_softmax(policy.row(policy.context_index(&history)));
        per_token.push(token_kl(row, &theta));
        approx += row[tok as usize] - theta[tok as usize];
        history.push(tok);
    }
    Ok(SeqKlReport {
        exact: per_token.iter().sum(),
        approx,
        per_token,
    })
}

/// Differentiable `SeqKL(π_ref ‖ π_θ)`; the reference side is constant.
pub fn seq_kl_node<'t>(
    params: &PolicyParams<'t, '_>,
    reference: Reference<'_>,
    prompt: &[Token],
    response: &[Token],
) -> Result<Node<'t>> {
    let tape = params.tape();
    let ref_rows = reference.step_log_probs(params.policy().vocab(), prompt, response)?;
    let theta_rows = params.step_log_probs(prompt, response)?;
    let mut terms = Vec::with_capacity(response.len());
    for (r, th) in ref_rows.iter().zip(&theta_rows) {
        let mut entropy_part = 0.0;
        let mut cross = Vec::with_capacity(r.len());
        for (&lr, &lt) in r.iter().zip(th.iter()) {
            if lr.is_finite() {
                let p = lr.exp();
                entropy_part += p * lr;
                cross.push(lt * p);
            }
        }
        terms.push(tape.sum(&cross) * -1.0 + entropy_part);
    }
    Ok(tape.sum(&terms))
}

/// Differentiable `Σ_t KL(π_θ ‖ π_ref)` along a response.
pub fn policy_kl_node<'t>(
    params: &PolicyParams<'t, '_>,
    reference: Reference<'_>,
    prompt: &[Token],
    response: &[Token],
) -> Result<Node<'t>> {
    let tape = params.tape();
    let ref_rows = reference.step_log_probs(params.policy().vocab(), prompt, response)?;
    if ref_rows.iter().flatten().any(|l| !l.is_finite()) {
        return Err(Error::Input(
            "KL(π_θ ‖ π_ref) is infinite: the reference assigns zero probability to some token".into(),
        ));
    }
    let theta_rows = params.step_log_probs(prompt, response)?;
    let mut terms = Vec::new();
    for (r, th) in ref_rows.iter().zip(&theta_rows) {
        for (&lr, &lt) in r.iter().zip(th.iter()) {
            terms.push(lt.exp() * (lt - lr));
        }
    }
    Ok(tape.sum(&terms))
}

/// `δ = β (SeqKL(x, y_l) - SeqKL(x, y_w))`.
pub fn tdpo_delta(policy: &Policy, reference: Reference<'_>, triple: &PreferenceTriple, beta: f64) -> Result<f64> {
    let kl_l = seq_kl(policy, reference, &triple.prompt, &triple.rejected)?.exact;
    let kl_w = seq_kl(policy, reference, &triple.prompt, &triple.chosen)?.exact;
    Ok(beta * (kl_l - kl_w))
}

/// `δ - M`. Zero when the reference expectation collapses onto the observed
/// tokens.
pub fn margin_equivalence_gap(
    policy: &Policy,
    reference: Reference<'_>,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    let delta = tdpo_delta(policy, reference, triple, beta)?;
    let ratio = |y: &[Token]| -> Result<f64> {
        Ok(policy.log_prob(&triple.prompt, y)? - reference.sequence_log_prob(&triple.prompt, y)?)
    };
    let m = beta * (ratio(&triple.chosen)? - ratio(&triple.rejected)?);
    Ok(delta - m)
}

/// `-log σ(β [ρ_w - ρ_l] - δ)` with `δ` frozen unless
/// `cfg.tdpo_delta_grad` is set.
pub fn tdpo_loss<'t>(
    params: &PolicyParams<'t, '_>,
    reference: Option<Reference<'_>>,
    batch: &[PreferenceTriple],
    cfg: &LossConfig,
) -> Result<BatchLoss<'t>> {
    if batch.is_empty() {
        return Err(Error::Input("batch must contain at least one triple".into()));
    }
    let reference = reference.ok_or_else(missing_reference)?;
    let tape = params.tape();
    let mut losses = Vec::with_capacity(batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for t in batch {
        let s = Scored::new(params, Some(reference), t)?;
        let kl_w = seq_kl_node(params, reference, &t.prompt, &t.chosen)?;
        let kl_l = seq_kl_node(params, reference, &t.prompt, &t.rejected)?;
        let mut delta = (kl_l - kl_w) * cfg.beta;
        if !cfg.tdpo_delta_grad {
            delta = tape.stop_gradient(delta);
        }
        let m = s.log_ratio_diff()? * cfg.beta;
        let arg = m - delta;
        let loss = -arg.log_sigmoid();
        terms.push(ExampleTerms {
            margin: Some(m.value()),
            normalized_margin: None,
            logit: Some(arg.value()),
            loss: loss.value(),
        });
        losses.push(loss);
    }
    Ok(BatchLoss {
        value: tape.mean(&losses),
        per_example: terms,
    })
}
