//! Held-out preference accuracy, oracle-judged win rate and histogram
//! exports.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LatentReward, PreferenceTriple};
use crate::exec::{self, Execution};
use crate::io::{fmt_f64, write_atomic};
use crate::kl::seq_kl;
use crate::objectives::{missing_reference, LossConfig, Method};
use crate::policy::{Policy, Reference, Token};
use crate::{Error, Result};

/// The implicit reward a method optimizes, up to per-prompt constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardStyle {
    /// `β log π_θ(y)/π_ref(y)`.
    RefRatio,
    /// `β/|y| log π_θ(y)`.
    LengthNormalized,
    /// `β log π_θ(y)`.
    Unnormalized,
}

impl RewardStyle {
    pub fn for_method(method: Method, length_normalized: bool) -> Self {
        match method {
            Method::Dpo | Method::Ipo | Method::Kto | Method::RDpo | Method::Tdpo => Self::RefRatio,
            Method::SimPo | Method::AlphaDpo if length_normalized => Self::LengthNormalized,
            Method::SimPo | Method::AlphaDpo | Method::Cpo => Self::Unnormalized,
            Method::Orpo => Self::LengthNormalized,
        }
    }

    pub fn for_loss(cfg: &LossConfig) -> Self {
        Self::for_method(cfg.method, cfg.length_normalized)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RefRatio => "ref_ratio",
            Self::LengthNormalized => "length_normalized",
            Self::Unnormalized => "unnormalized",
        }
    }
}

pub fn implicit_reward(
    style: RewardStyle,
    policy: &Policy,
    reference: Option<Reference<'_>>,
    prompt: &[Token],
    response: &[Token],
    beta: f64,
) -> Result<f64> {
    let lp = policy.log_prob(prompt, response)?;
    Ok(match style {
        RewardStyle::RefRatio => {
            let r = reference.ok_or_else(missing_reference)?;
            beta * (lp - r.sequence_log_prob(prompt, response)?)
        }
        RewardStyle::LengthNormalized => beta * lp / response.len() as f64,
        RewardStyle::Unnormalized => beta * lp,
    })
}

/// `r(y_w)` and `r(y_l)`.
pub fn reward_pair(
    style: RewardStyle,
    policy: &Policy,
    reference: Option<Reference<'_>>,
    t: &PreferenceTriple,
    beta: f64,
) -> Result<(f64, f64)> {
    Ok((
        implicit_reward(style, policy, reference, &t.prompt, &t.chosen, beta)?,
        implicit_reward(style, policy, reference, &t.prompt, &t.rejected, beta)?,
    ))
}

/// `r(y_w) - r(y_l)`, with rounding-level differences flushed to zero.
pub fn reward_margin(
    style: RewardStyle,
    policy: &Policy,
    reference: Option<Reference<'_>>,
    t: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    let (w, l) = reward_pair(style, policy, reference, t, beta)?;
    Ok(tie_flushed(w, l))
}

/// Relative tolerance below which two rewards count as tied. Summing
/// `k` equal log-probabilities and dividing by `k` does not round-trip
/// exactly, so an exact comparison would break ties arbitrarily.
pub const TIE_RTOL: f64 = 1e-13;

pub fn tie_flushed(w: f64, l: f64) -> f64 {
    let d = w - l;
    if d.abs() <= TIE_RTOL * w.abs().max(l.abs()).max(1.0) {
        0.0
    } else {
        d
    }
}

/// 1 for a positive margin, 0.5 for a tie, 0 otherwise.
pub fn margin_score(margin: f64) -> f64 {
    if margin > 0.0 {
        1.0
    } else if margin == 0.0 {
        0.5
    } else {
        0.0
    }
}

pub fn preference_accuracy(
    style: RewardStyle,
    policy: &Policy,
    reference: Option<Reference<'_>>,
    heldout: &[PreferenceTriple],
    beta: f64,
    exec: Execution,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::Input("held-out set is empty".into()));
    }
    let margins = exec::try_map(exec, heldout, |t| reward_margin(style, policy, reference, t, beta))?;
    Ok(exec::ordered_sum(margins.iter().map(|&m| margin_score(m))) / heldout.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WinRate {
    pub rate: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinRate {
    pub fn n(&self) -> usize {
        self.wins + self.ties + self.losses
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinRateConfig {
    pub samples_per_prompt: usize,
    pub max_len: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for WinRateConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 1,
            max_len: 6,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

/// Head-to-head comparison judged by the latent reward.
///
/// Prompt `i` gets its own random stream, shared by both policies, so a
/// policy compared with itself ties on every sample.
pub fn win_rate(
    policy: &Policy,
    reference: &Policy,
    oracle: &LatentReward,
    prompts: &[Vec<Token>],
    cfg: &WinRateConfig,
) -> Result<WinRate> {
    if prompts.is_empty() {
        return Err(Error::Input("win rate needs at least one prompt".into()));
    }
    if cfg.samples_per_prompt == 0 {
        return Err(Error::config("samples_per_prompt", "must be at least 1"));
    }
    let idx: Vec<usize> = (0..prompts.len()).collect();
    let outcomes = exec::try_map(cfg.exec, &idx, |&i| -> Result<[usize; 3]> {
        let mut stream = ChaCha8Rng::seed_from_u64(cfg.seed);
        stream.set_stream(i as u64);
        let mut rng_p = stream.clone();
        let mut rng_r = stream;
        let mut tally = [0usize; 3];
        for _ in 0..cfg.samples_per_prompt {
            let yp = policy.sample(&prompts[i], cfg.max_len, &mut rng_p)?;
            let yr = reference.sample(&prompts[i], cfg.max_len, &mut rng_r)?;
            let (rp, rr) = (oracle.reward(&prompts[i], &yp), oracle.reward(&prompts[i], &yr));
            let k = if rp > rr {
                0
            } else if rp == rr {
                1
            } else {
                2
            };
            tally[k] += 1;
        }
        Ok(tally)
    })?;
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    for t in outcomes {
        wins += t[0];
        ties += t[1];
        losses += t[2];
    }
    let n = (wins + ties + losses) as f64;
    Ok(WinRate {
        rate: (wins as f64 + 0.5 * ties as f64) / n,
        wins,
        ties,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins spanning the data. A constant sample gets the unit
    /// interval centred on it.
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::config("bins", format!("need at least 2 bins, got {bins}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("cannot bin non-finite value {v}")));
        }
        let (mut lo, mut hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if values.is_empty() {
            (lo, hi) = (-0.5, 0.5);
        } else if lo == hi {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|k| if k == bins { hi } else { lo + width * k as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width).floor() as usize).min(bins - 1);
            // Guard against rounding at bin boundaries.
            let k = if v < edges[k] {
                k - 1
            } else if k + 1 < bins && v >= edges[k + 1] {
                k + 1
            } else {
                k
            };
            counts[k] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_of(&self, v: f64) -> Option<usize> {
        (0..self.counts.len()).find(|&k| {
            v >= self.edges[k] && (v < self.edges[k + 1] || (k + 1 == self.counts.len() && v <= self.edges[k + 1]))
        })
    }
}

/// The three series plotted from a trained policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    /// `r(y_w) - r(y_l)`.
    pub reward_margin: Histogram,
    /// `log π_θ(y_w|x)`.
    pub chosen_loglik: Histogram,
    /// `log π_ref(y_w|x) - log π_ref(y_l|x)`.
    pub ref_logratio: Histogram,
}

impl Distributions {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("series,bin_left,bin_right,count\n");
        for (name, h) in [
            ("reward_margin", &self.reward_margin),
            ("chosen_loglik", &self.chosen_loglik),
            ("ref_logratio", &self.ref_logratio),
        ] {
            for (k, c) in h.counts.iter().enumerate() {
                let _ = writeln!(out, "{name},{},{},{c}", fmt_f64(h.edges[k]), fmt_f64(h.edges[k + 1]));
            }
        }
        out
    }
}

pub fn distributions(
    style: RewardStyle,
    policy: &Policy,
    reference: Reference<'_>,
    dataset: &[PreferenceTriple],
    beta: f64,
    bins: usize,
    exec: Execution,
) -> Result<Distributions> {
    let rows = exec::try_map(exec, dataset, |t| -> Result<[f64; 3]> {
        Ok([
            reward_margin(style, policy, Some(reference), t, beta)?,
            policy.log_prob(&t.prompt, &t.chosen)?,
            reference.sequence_log_prob(&t.prompt, &t.chosen)? - reference.sequence_log_prob(&t.prompt, &t.rejected)?,
        ])
    })?;
    let col = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<_>>();
    Ok(Distributions {
        reward_margin: Histogram::from_values(&col(0), bins)?,
        chosen_loglik: Histogram::from_values(&col(1), bins)?,
        ref_logratio: Histogram::from_values(&col(2), bins)?,
    })
}

pub fn export_distributions(
    style: RewardStyle,
    policy: &Policy,
    reference: Reference<'_>,
    dataset: &[PreferenceTriple],
    beta: f64,
    bins: usize,
    path: impl AsRef<Path>,
) -> Result<Distributions> {
    let d = distributions(style, policy, reference, dataset, beta, bins, Execution::default())?;
    write_atomic(path, d.to_csv().as_bytes())?;
    Ok(d)
}

pub const JUDGE_NOTE: &str = "latent reward oracle (substitute for LLM-judged win rates)";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: Method,
    pub style: RewardStyle,
    pub beta: f64,
    pub n: usize,
    pub preference_accuracy: f64,
    pub win_rate: Option<WinRate>,
    pub kl_chosen_mean: f64,
    pub kl_rejected_mean: f64,
    pub distributions: Distributions,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub method: Method,
    pub beta: f64,
    pub length_normalized: bool,
    pub bins: usize,
    pub win_rate: WinRateConfig,
    pub exec: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            method: loss.method,
            beta: loss.beta,
            length_normalized: loss.length_normalized,
            bins: 20,
            win_rate: WinRateConfig::default(),
            exec: Execution::default(),
        }
    }
}

/// Accuracy, KL summary and histograms; win rate when an oracle is given.
/// `reference` defaults to the uniform policy for KL and ratio rewards.
pub fn evaluate(
    policy: &Policy,
    reference: Option<&Policy>,
    heldout: &[PreferenceTriple],
    oracle: Option<&LatentReward>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let style = RewardStyle::for_method(cfg.method, cfg.length_normalized);
    let r = match reference {
        Some(p) => Reference::Policy(p),
        None => Reference::Uniform(policy.vocab()),
    };
    let preference_accuracy = preference_accuracy(style, policy, Some(r), heldout, cfg.beta, cfg.exec)?;
    let kls = exec::try_map(cfg.exec, heldout, |t| -> Result<(f64, f64)> {
        Ok((
            seq_kl(policy, r, &t.prompt, &t.chosen)?.exact,
            seq_kl(policy, r, &t.prompt, &t.rejected)?.exact,
        ))
    })?;
    let n = heldout.len();
    let win_rate = match oracle {
        Some(o) => {
            let uniform;
            let opponent = match reference {
                Some(p) => p,
                None => {
                    uniform = Policy::uniform(policy.vocab(), policy.order())?;
                    &uniform
                }
            };
            let prompts: Vec<Vec<Token>> = heldout.iter().map(|t| t.prompt.clone()).collect();
            let wcfg = WinRateConfig {
                exec: cfg.exec,
                ..cfg.win_rate
            };
            Some(win_rate(policy, opponent, o, &prompts, &wcfg)?)
        }
        None => None,
    };
    Ok(EvalReport {
        method: cfg.method,
        style,
        beta: cfg.beta,
        n,
        preference_accuracy,
        win_rate,
        kl_chosen_mean: exec::ordered_sum(kls.iter().map(|k| k.0)) / n as f64,
        kl_rejected_mean: exec::ordered_sum(kls.iter().map(|k| k.1)) / n as f64,
        distributions: distributions(style, policy, r, heldout, cfg.beta, cfg.bins, cfg.exec)?,
    })
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("judge", JUDGE_NOTE.into());
        kv("method", self.method.to_string());
        kv("reward_style", self.style.name().into());
        kv("beta", fmt_f64(self.beta));
        kv("n", self.n.to_string());
        kv("preference_accuracy", fmt_f64(self.preference_accuracy));
        match &self.win_rate {
            Some(w) => {
                kv("win_rate", fmt_f64(w.rate));
                kv("win_rate.n", w.n().to_string());
                kv("win_rate.wins", w.wins.to_string());
                kv("win_rate.ties", w.ties.to_string());
                kv("win_rate.losses", w.losses.to_string());
            }
            None => kv("win_rate", "NA".into()),
        }
        kv("kl_chosen_mean", fmt_f64(self.kl_chosen_mean));
        kv("kl_rejected_mean", fmt_f64(self.kl_rejected_mean));
        for (name, h) in [
            ("reward_margin_histogram", &self.distributions.reward_margin),
            ("chosen_loglik_histogram", &self.distributions.chosen_loglik),
        ] {
            kv(
                &format!("{name}.counts"),
                h.counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
            );
            kv(
                &format!("{name}.edges"),
                h.edges.iter().map(|e| fmt_f64(*e)).collect::<Vec<_>>().join(";"),
            );
        }
        out
    }
}
