//! Pairwise preference objectives.
//!
//! Every objective is a mean over the batch of a per-triple loss built on the
//! caller's tape. Reference log-probabilities enter as constants. The
//! α-DPO margin is assembled in-graph:
//!
//! ```text
//! M    = β [ (log π_θ(y_w) - log π_ref(y_w)) - (log π_θ(y_l) - log π_ref(y_l)) ]
//! M*   = (M - μ_M) / σ_M                      (population statistics)
//! u    = β/|y_w| log π_θ(y_w) - β/|y_l| log π_θ(y_l)   (or unnormalized)
//! loss = -log σ( u - sg[γ + α M*] )
//! ```
//!
//! so removing the `sg` would change the gradient, and the finite-difference
//! harness can replay the frozen bracket.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{scalar, Node};
use crate::data::PreferenceTriple;
use crate::kl;
use crate::policy::{PolicyParams, Reference};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dpo,
    SimPo,
    AlphaDpo,
    Ipo,
    Cpo,
    Kto,
    Orpo,
    RDpo,
    Tdpo,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Dpo,
        Method::SimPo,
        Method::AlphaDpo,
        Method::Ipo,
        Method::Cpo,
        Method::Kto,
        Method::Orpo,
        Method::RDpo,
        Method::Tdpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::SimPo => "simpo",
            Method::AlphaDpo => "alpha_dpo",
            Method::Ipo => "ipo",
            Method::Cpo => "cpo",
            Method::Kto => "kto",
            Method::Orpo => "orpo",
            Method::RDpo => "rdpo",
            Method::Tdpo => "tdpo",
        }
    }

    pub fn requires_reference(self) -> bool {
        !matches!(self, Method::SimPo | Method::Cpo | Method::Orpo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name().replace('_', "") == norm.replace('_', ""))
            .ok_or_else(|| {
                Error::config(
                    "loss.method",
                    format!(
                        "unknown method `{s}` (expected one of {})",
                        Method::ALL.map(Method::name).join(", ")
                    ),
                )
            })
    }
}

/// Where `μ_M` and `σ_M` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZScoreScope {
    /// Statistics of the current mini-batch.
    #[default]
    Batch,
    /// Statistics over the whole training set, refreshed by the trainer at
    /// each epoch start with θ frozen.
    Dataset,
}

impl FromStr for ZScoreScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "dataset" => Ok(Self::Dataset),
            _ => Err(Error::config(
                "loss.zscore_scope",
                format!("expected batch|dataset, got `{s}`"),
            )),
        }
    }
}

impl fmt::Display for ZScoreScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::Dataset => "dataset",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub method: Method,
    pub beta: f64,
    /// Target reward margin (SimPO, α-DPO).
    pub gamma: f64,
    /// Weight of the normalized margin (α-DPO).
    pub alpha: f64,
    pub length_normalized: bool,
    /// IPO.
    pub tau: f64,
    /// CPO and ORPO.
    pub lambda: f64,
    /// KTO.
    pub lambda_w: f64,
    pub lambda_l: f64,
    /// R-DPO length penalty.
    pub alpha_len: f64,
    pub zscore_eps: f64,
    pub zscore_scope: ZScoreScope,
    /// Let gradients flow through TDPO's δ instead of freezing it.
    pub tdpo_delta_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::AlphaDpo,
            beta: 10.0,
            gamma: 0.4,
            alpha: 0.05,
            length_normalized: true,
            tau: 0.1,
            lambda: 1.0,
            lambda_w: 1.0,
            lambda_l: 1.0,
            alpha_len: 0.05,
            zscore_eps: 1e-8,
            zscore_scope: ZScoreScope::Batch,
            tdpo_delta_grad: false,
        }
    }
}

impl LossConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be non-negative, got {v}")))
            }
        };
        positive("loss.beta", self.beta)?;
        positive("loss.zscore_eps", self.zscore_eps)?;
        positive("loss.tau", self.tau)?;
        non_negative("loss.gamma", self.gamma)?;
        non_negative("loss.alpha", self.alpha)?;
        non_negative("loss.lambda", self.lambda)?;
        non_negative("loss.lambda_w", self.lambda_w)?;
        non_negative("loss.lambda_l", self.lambda_l)?;
        if !self.alpha_len.is_finite() {
            return Err(Error::config("loss.alpha_len", "must be finite"));
        }
        Ok(())
    }
}

/// Values recorded for one triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleTerms {
    /// `M`; `None` without a reference.
    pub margin: Option<f64>,
    /// `M*` (α-DPO only).
    pub normalized_margin: Option<f64>,
    /// Argument of `-log σ(·)` for logistic objectives.
    pub logit: Option<f64>,
    pub loss: f64,
}

pub struct BatchLoss<'t> {
    /// Mean of the per-example losses.
    pub value: Node<'t>,
    pub per_example: Vec<ExampleTerms>,
}

/// Dataset-level `(μ_M, σ_M)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginStats {
    pub mean: f64,
    pub std: f64,
}

impl MarginStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

/// Extra inputs that are not per-batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossContext {
    /// Required when `zscore_scope` is `Dataset`.
    pub margin_stats: Option<MarginStats>,
}

/// `(M - μ)/σ` with population `σ`; all zeros when `σ < eps` (which
/// includes singletons).
pub fn zscore_normalize(values: &[f64], eps: f64) -> Vec<f64> {
    match MarginStats::from_values(values) {
        Some(s) if s.std >= eps => values.iter().map(|m| (m - s.mean) / s.std).collect(),
        _ => vec![0.0; values.len()],
    }
}

/// `log π_θ` nodes and `log π_ref` constants for one triple.
pub(crate) struct Scored<'t> {
    pub lp_w: Node<'t>,
    pub lp_l: Node<'t>,
    pub ref_w: Option<f64>,
    pub ref_l: Option<f64>,
    pub len_w: f64,
    pub len_l: f64,
}

impl<'t> Scored<'t> {
    pub fn new(params: &PolicyParams<'t, '_>, reference: Option<Reference<'_>>, t: &PreferenceTriple) -> Result<Self> {
        let lp_w = params.sequence_log_prob(&t.prompt, &t.chosen)?;
        let lp_l = params.sequence_log_prob(&t.prompt, &t.rejected)?;
        let (ref_w, ref_l) = match reference {
            Some(r) => (
                Some(r.sequence_log_prob(&t.prompt, &t.chosen)?),
                Some(r.sequence_log_prob(&t.prompt, &t.rejected)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            lp_w,
            lp_l,
            ref_w,
            ref_l,
            len_w: t.chosen.len() as f64,
            len_l: t.rejected.len() as f64,
        })
    }

    fn refs(&self) -> Result<(f64, f64)> {
        self.ref_w.zip(self.ref_l).ok_or_else(missing_reference)
    }

    /// `(log π_θ/π_ref)(y_w) - (log π_θ/π_ref)(y_l)`, unscaled.
    pub fn log_ratio_diff(&self) -> Result<Node<'t>> {
        let (rw, rl) = self.refs()?;
        Ok((self.lp_w - rw) - (self.lp_l - rl))
    }

    /// Same difference with each log-ratio divided by its length.
    pub fn normalized_log_ratio_diff(&self) -> Result<Node<'t>> {
        let (rw, rl) = self.refs()?;
        Ok((self.lp_w - rw) / self.len_w - (self.lp_l - rl) / self.len_l)
    }

    pub fn reward_diff(&self, beta: f64, length_normalized: bool) -> Node<'t> {
        if length_normalized {
            self.lp_w * (beta / self.len_w) - self.lp_l * (beta / self.len_l)
        } else {
            (self.lp_w - self.lp_l) * beta
        }
    }
}

pub(crate) fn missing_reference() -> Error {
    Error::config("reference_path", "this objective needs a reference policy")
}

/// `M = β [log π_θ(y_w)/π_ref(y_w) - log π_θ(y_l)/π_ref(y_l)]`. Never
/// length-normalized.
pub fn margin_m<'t>(
    params: &PolicyParams<'t, '_>,
    reference: Reference<'_>,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<Node<'t>> {
    Ok(Scored::new(params, Some(reference), triple)?.log_ratio_diff()? * beta)
}

/// `u`: the SimPO-style reward difference.
pub fn pairwise_reward_diff<'t>(
    params: &PolicyParams<'t, '_>,
    triple: &PreferenceTriple,
    beta: f64,
    length_normalized: bool,
) -> Result<Node<'t>> {
    Ok(Scored::new(params, None, triple)?.reward_diff(beta, length_normalized))
}

fn finish<'t>(params: &PolicyParams<'t, '_>, losses: Vec<Node<'t>>, per_example: Vec<ExampleTerms>) -> BatchLoss<'t> {
    BatchLoss {
        value: params.tape().mean(&losses),
        per_example,
    }
}

fn check_batch(batch: &[PreferenceTriple]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("batch must contain at least one triple".into()));
    }
    Ok(())
}

/// `-log σ(u - sg[γ + α M*])` averaged over the batch.
pub fn alpha_dpo_loss<'t>(
    params: &PolicyParams<'t, '_>,
    reference: Option<Reference<'_>>,
    batch: &[PreferenceTriple],
    cfg: &LossConfig,
    ctx: &LossContext,
) -> Result<BatchLoss<'t>> {
    check_batch(batch)?;
    let reference = reference.ok_or_else(missing_reference)?;
    let tape = params.tape();
    let scored = batch
        .iter()
        .map(|t| Scored::new(params, Some(reference), t))
        .collect::<Result<Vec<_>>>()?;
    let margins = scored
        .iter()
        .map(|s| Ok(s.log_ratio_diff()? * cfg.beta))
        .collect::<Result<Vec<_>>>()?;

    let normalized: Vec<Node<'t>> = match cfg.zscore_scope {
        ZScoreScope::Batch => {
            let mu = tape.mean(&margins);
            let centered: Vec<Node<'t>> = margins.iter().map(|&m| m - mu).collect();
            let sq: Vec<Node<'t>> = centered.iter().map(|c| c.square()).collect();
            let var = tape.mean(&sq);
            if var.value().sqrt() >= cfg.zscore_eps {
                let sd = var.sqrt();
                centered.iter().map(|&c| c / sd).collect()
            } else {
                margins.iter().map(|_| tape.constant(0.0)).collect()
            }
        }
        ZScoreScope::Dataset => {
            let stats = ctx.margin_stats.ok_or_else(|| {
                Error::config("loss.zscore_scope", "dataset scope needs precomputed margin statistics")
            })?;
            if stats.std >= cfg.zscore_eps {
                margins.iter().map(|&m| (m - stats.mean) / stats.std).collect()
            } else {
                margins.iter().map(|_| tape.constant(0.0)).collect()
            }
        }
    };

    let mut losses = Vec::with_capacity(batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for ((s, m), m_star) in scored.iter().zip(&margins).zip(&normalized) {
        let u = s.reward_diff(cfg.beta, cfg.length_normalized);
        let bracket = tape.stop_gradient(*m_star * cfg.alpha + cfg.gamma);
        let arg = u - bracket;
        let loss = -arg.log_sigmoid();
        terms.push(ExampleTerms {
            margin: Some(m.value()),
            normalized_margin: Some(m_star.value()),
            logit: Some(arg.value()),
            loss: loss.value(),
        });
        losses.push(loss);
    }
    Ok(finish(params, losses, terms))
}

/// Point value of one α-DPO term for externally supplied `u` and margin.
pub fn alpha_dpo_pointwise(u: f64, gamma: f64, alpha: f64, margin: f64) -> f64 {
    -scalar::log_sigmoid(u - (gamma + alpha * margin))
}

/// DPO against an arbitrary reference; with `length_normalized` each
/// log-ratio is divided by its response length. With
/// [`Reference::Uniform`] this is the `L(π_θ; U)` family.
pub fn dpo_loss_with_reference<'t>(
    params: &PolicyParams<'t, '_>,
    reference: Reference<'_>,
    batch: &[PreferenceTriple],
    beta: f64,
    length_normalized: bool,
) -> Result<BatchLoss<'t>> {
    check_batch(batch)?;
    let mut losses = Vec::with_capacity(batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for t in batch {
        let s = Scored::new(params, Some(reference), t)?;
        let diff = if length_normalized {
            s.normalized_log_ratio_diff()?
        } else {
            s.log_ratio_diff()?
        };
        let arg = diff * beta;
        let loss = -arg.log_sigmoid();
        terms.push(ExampleTerms {
            margin: Some(beta * s.log_ratio_diff()?.value()),
            normalized_margin: None,
            logit: Some(arg.value()),
            loss: loss.value(),
        });
        losses.push(loss);
    }
    Ok(finish(params, losses, terms))
}

/// The tabulated baselines plus SimPO.
pub fn baseline_loss<'t>(
    method: Method,
    params: &PolicyParams<'t, '_>,
    reference: Option<Reference<'_>>,
    batch: &[PreferenceTriple],
    cfg: &LossConfig,
) -> Result<BatchLoss<'t>> {
    check_batch(batch)?;
    if method.requires_reference() && reference.is_none() {
        return Err(missing_reference());
    }
    let tape = params.tape();
    let scored = batch
        .iter()
        .map(|t| Scored::new(params, reference, t))
        .collect::<Result<Vec<_>>>()?;

    // KTO's reference point: β times the mean per-response KL(π_θ‖π_ref),
    // summed token-wise along both responses, held constant.
    let kto_z = if method == Method::Kto {
        let r = reference.ok_or_else(missing_reference)?;
        let mut kls = Vec::with_capacity(2 * batch.len());
        for t in batch {
            kls.push(kl::policy_kl_node(params, r, &t.prompt, &t.chosen)?);
            kls.push(kl::policy_kl_node(params, r, &t.prompt, &t.rejected)?);
        }
        Some(tape.stop_gradient(tape.mean(&kls) * cfg.beta))
    } else {
        None
    };

    let mut losses = Vec::with_capacity(batch.len());
    let mut terms = Vec::with_capacity(batch.len());
    for s in &scored {
        let margin = match (s.ref_w, s.ref_l) {
            (Some(rw), Some(rl)) => Some(cfg.beta * ((s.lp_w.value() - rw) - (s.lp_l.value() - rl))),
            _ => None,
        };
        let (loss, logit) = match method {
            Method::Dpo => {
                let arg = s.log_ratio_diff()? * cfg.beta;
                (-arg.log_sigmoid(), Some(arg))
            }
            Method::SimPo => {
                let arg = s.reward_diff(cfg.beta, cfg.length_normalized) - cfg.gamma;
                (-arg.log_sigmoid(), Some(arg))
            }
            Method::Ipo => {
                let d = s.log_ratio_diff()? - 1.0 / (2.0 * cfg.tau);
                (d.square(), None)
            }
            Method::Cpo => {
                let arg = (s.lp_w - s.lp_l) * cfg.beta;
                (-arg.log_sigmoid() - s.lp_w * cfg.lambda, Some(arg))
            }
            Method::Kto => {
                let (rw, rl) = s.refs()?;
                let z = kto_z.expect("computed above for KTO");
                let chosen = ((s.lp_w - rw) * cfg.beta - z).sigmoid();
                let rejected = (z - (s.lp_l - rl) * cfg.beta).sigmoid();
                (-(chosen * cfg.lambda_w) - rejected * cfg.lambda_l, None)
            }
            Method::Orpo => {
                let avg_w = s.lp_w / s.len_w;
                let avg_l = s.lp_l / s.len_l;
                let log_odds_w = avg_w - avg_w.log1m_exp();
                let log_odds_l = avg_l - avg_l.log1m_exp();
                let arg = log_odds_w - log_odds_l;
                (-avg_w - arg.log_sigmoid() * cfg.lambda, Some(arg))
            }
            Method::RDpo => {
                let arg = s.log_ratio_diff()? * cfg.beta - cfg.alpha_len * (s.len_w - s.len_l);
                (-arg.log_sigmoid(), Some(arg))
            }
            Method::AlphaDpo | Method::Tdpo => {
                return Err(Error::config(
                    "loss.method",
                    format!("{method} is not a baseline objective"),
                ))
            }
        };
        terms.push(ExampleTerms {
            margin,
            normalized_margin: None,
            logit: logit.map(|n| n.value()),
            loss: loss.value(),
        });
        losses.push(loss);
    }
    Ok(finish(params, losses, terms))
}

/// Dispatch on `cfg.method`.
pub fn batch_loss<'t>(
    params: &PolicyParams<'t, '_>,
    reference: Option<Reference<'_>>,
    batch: &[PreferenceTriple],
    cfg: &LossConfig,
    ctx: &LossContext,
) -> Result<BatchLoss<'t>> {
    cfg.validate()?;
    match cfg.method {
        Method::AlphaDpo => alpha_dpo_loss(params, reference, batch, cfg, ctx),
        Method::Tdpo => kl::tdpo_loss(params, reference, batch, cfg),
        m => baseline_loss(m, params, reference, batch, cfg),
    }
}
