//! Numerical checks of the theory by exhaustive enumeration and finite
//! differences.

mod enumerate;
mod gradients;
mod lemma2;
mod lemma3;
mod theorem1;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use enumerate::{
    importance_weights, space_size, tilt, tilted_old_policy, EnumeratedSpace, ImportanceWeights, MAX_SEQUENCES,
};
pub use gradients::{check_objective_gradient, verify_gradients};
pub use lemma2::{
    verify_lemma2, ConvergenceReport, Lemma2Config, Lemma2Point, Lemma2Problem, PairTerm, MAX_LEMMA2_SEQUENCES,
};
pub use lemma3::{verify_lemma3, Lemma3Report};
pub use theorem1::{implied_gamma, verify_theorem1, Theorem1Report};

use crate::autodiff::{CheckOptions, CheckReport};
use crate::data::PreferenceTriple;
use crate::exec::Execution;
use crate::io::fmt_f64;
use crate::objectives::{LossConfig, Method};
use crate::policy::{Policy, Token, Vocabulary};
use crate::Result;

pub const PAIR_DISTRIBUTION: &str =
    "ordered pairs (y_w, y_l) drawn independently from pi_ref, identical pairs excluded, renormalized";

/// A random triple over the full vocabulary. Prompt tokens avoid EOS.
pub fn random_triple<R: Rng + ?Sized>(
    rng: &mut R,
    vocab: Vocabulary,
    prompt_len: usize,
    chosen_len: usize,
    rejected_len: usize,
) -> PreferenceTriple {
    let v = vocab.size() as Token;
    let prompt: Vec<Token> = (0..prompt_len).map(|_| rng.random_range(0..v - 1)).collect();
    loop {
        let chosen: Vec<Token> = (0..chosen_len).map(|_| rng.random_range(0..v)).collect();
        let rejected: Vec<Token> = (0..rejected_len).map(|_| rng.random_range(0..v)).collect();
        if chosen != rejected {
            return PreferenceTriple::new(prompt, chosen, rejected).expect("non-empty distinct responses");
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub theorem1_policies: usize,
    pub theorem1_pairs: usize,
    pub theorem1_vocab: u32,
    pub theorem1_beta: f64,
    pub lemma2: Lemma2Config,
    pub lemma2_seeds: usize,
    pub lemma2_vocab: u32,
    pub lemma3_triples: usize,
    pub lemma3_vocab: u32,
    pub lemma3_beta: f64,
    pub gradient_batch: usize,
    pub gradient_vocab: u32,
    /// Hyperparameters shared by every objective in the gradient sweep.
    pub gradient_loss: LossConfig,
    pub gradient_check: CheckOptions,
    pub order: usize,
    pub policy_scale: f64,
    pub exec: Execution,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            theorem1_policies: 20,
            theorem1_pairs: 50,
            theorem1_vocab: 16,
            theorem1_beta: 2.0,
            lemma2: Lemma2Config::default(),
            lemma2_seeds: 10,
            lemma2_vocab: 3,
            lemma3_triples: 100,
            lemma3_vocab: 3,
            lemma3_beta: 1.0,
            gradient_batch: 8,
            gradient_vocab: 5,
            gradient_loss: LossConfig {
                beta: 1.0,
                ..LossConfig::default()
            },
            gradient_check: CheckOptions::default(),
            order: 2,
            policy_scale: 1.0,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lemma2Run {
    pub seed: u64,
    pub report: ConvergenceReport,
}

/// Which verifier to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Theorem1,
    Lemma2,
    Lemma3,
    Gradients,
    All,
}

impl Check {
    pub fn includes(self, other: Check) -> bool {
        self == Check::All || self == other
    }
}

impl std::str::FromStr for Check {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "theorem1" => Self::Theorem1,
            "lemma2" => Self::Lemma2,
            "lemma3" => Self::Lemma3,
            "gradients" => Self::Gradients,
            "all" => Self::All,
            _ => {
                return Err(crate::Error::Input(format!(
                    "unknown check `{s}` (expected theorem1|lemma2|lemma3|gradients|all)"
                )))
            }
        })
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Theorem1 => "theorem1",
            Self::Lemma2 => "lemma2",
            Self::Lemma3 => "lemma3",
            Self::Gradients => "gradients",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Lemma2Section {
    /// Runs with the configured `A` variant.
    pub runs: Vec<Lemma2Run>,
    /// Runs with the other variant, reported only.
    pub alternate: Vec<Lemma2Run>,
}

/// Sections are `None` when their check was not requested.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub check: Check,
    pub theorem1: Option<Theorem1Report>,
    pub lemma2: Option<Lemma2Section>,
    pub lemma3: Option<Lemma3Report>,
    pub gradients: Option<Vec<(Method, CheckReport)>>,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn lemma2_runs(cfg: &VerifyConfig, lcfg: &Lemma2Config) -> Result<Vec<Lemma2Run>> {
    let vocab = Vocabulary::new(cfg.lemma2_vocab)?;
    (0..cfg.lemma2_seeds as u64)
        .map(|k| {
            let seed = cfg.seed.wrapping_add(k);
            let mut rng = sub_rng(seed, 2);
            let policy = Policy::random(vocab, cfg.order, cfg.policy_scale, &mut rng)?;
            let reference = Policy::random(vocab, cfg.order, cfg.policy_scale, &mut rng)?;
            let prompt = [rng.random_range(0..vocab.eos())];
            Ok(Lemma2Run {
                seed,
                report: verify_lemma2(&policy, &reference, &prompt, lcfg)?,
            })
        })
        .collect()
}

fn theorem1_section(cfg: &VerifyConfig) -> Result<Theorem1Report> {
    // Equal-length and mixed-length legs per random policy.
    let v16 = Vocabulary::new(cfg.theorem1_vocab)?;
    let mut rng = sub_rng(cfg.seed, 1);
    let mut theorem1: Option<Theorem1Report> = None;
    for _ in 0..cfg.theorem1_policies {
        let policy = Policy::random(v16, cfg.order, cfg.policy_scale, &mut rng)?;
        let mut data = Vec::with_capacity(2 * cfg.theorem1_pairs);
        for _ in 0..cfg.theorem1_pairs {
            let len = rng.random_range(1..=4);
            data.push(random_triple(&mut rng, v16, 2, len, len));
        }
        for _ in 0..cfg.theorem1_pairs {
            let lw = rng.random_range(1..=4);
            let ll = loop {
                let l = rng.random_range(1..=4);
                if l != lw {
                    break l;
                }
            };
            data.push(random_triple(&mut rng, v16, 2, lw, ll));
        }
        let r = verify_theorem1(&policy, &data, cfg.theorem1_beta)?;
        match &mut theorem1 {
            Some(acc) => acc.merge(&r),
            None => theorem1 = Some(r),
        }
    }
    Ok(theorem1.unwrap_or(Theorem1Report {
        equal_length_pairs: 0,
        mixed_length_pairs: 0,
        equal_length_max_gap: 0.0,
        mixed_length_max_gap: 0.0,
        length_normalized_max_gap: 0.0,
        tol: 1e-12,
    }))
}

fn lemma2_section(cfg: &VerifyConfig) -> Result<Lemma2Section> {
    let lcfg = Lemma2Config {
        exec: cfg.exec,
        ..cfg.lemma2.clone()
    };
    let lemma2 = lemma2_runs(cfg, &lcfg)?;
    let alt = Lemma2Config {
        length_normalized: !lcfg.length_normalized,
        ..lcfg.clone()
    };
    Ok(Lemma2Section {
        runs: lemma2,
        alternate: lemma2_runs(cfg, &alt)?,
    })
}

fn lemma3_section(cfg: &VerifyConfig) -> Result<Lemma3Report> {
    let v3 = Vocabulary::new(cfg.lemma3_vocab)?;
    let mut rng = sub_rng(cfg.seed, 3);
    let policy = Policy::random(v3, 1, cfg.policy_scale, &mut rng)?;
    let reference = Policy::random(v3, 1, cfg.policy_scale, &mut rng)?;
    let triples: Vec<PreferenceTriple> = (0..cfg.lemma3_triples)
        .map(|_| {
            let (lw, ll) = (rng.random_range(1..=4), rng.random_range(1..=4));
            random_triple(&mut rng, v3, 2, lw, ll)
        })
        .collect();
    verify_lemma3(&policy, &reference, &triples, cfg.lemma3_beta)
}

fn gradients_section(cfg: &VerifyConfig) -> Result<Vec<(Method, CheckReport)>> {
    let vg = Vocabulary::new(cfg.gradient_vocab)?;
    let mut rng = sub_rng(cfg.seed, 4);
    let policy = Policy::random(vg, cfg.order, cfg.policy_scale, &mut rng)?;
    let reference = Policy::random(vg, cfg.order, cfg.policy_scale, &mut rng)?;
    let batch: Vec<PreferenceTriple> = (0..cfg.gradient_batch)
        .map(|_| {
            let (lw, ll) = (rng.random_range(1..=4), rng.random_range(1..=4));
            random_triple(&mut rng, vg, 2, lw, ll)
        })
        .collect();
    let check = CheckOptions {
        exec: cfg.exec,
        ..cfg.gradient_check
    };
    Ok(verify_gradients(
        &policy,
        &reference,
        &batch,
        &cfg.gradient_loss,
        &check,
    ))
}

/// Run the selected checks. Each check draws from its own random stream,
/// so a single check reproduces its section of an `All` run exactly.
pub fn verify(cfg: &VerifyConfig, check: Check) -> Result<VerifyReport> {
    Ok(VerifyReport {
        config: cfg.clone(),
        check,
        theorem1: check
            .includes(Check::Theorem1)
            .then(|| theorem1_section(cfg))
            .transpose()?,
        lemma2: check.includes(Check::Lemma2).then(|| lemma2_section(cfg)).transpose()?,
        lemma3: check.includes(Check::Lemma3).then(|| lemma3_section(cfg)).transpose()?,
        gradients: check
            .includes(Check::Gradients)
            .then(|| gradients_section(cfg))
            .transpose()?,
    })
}

pub fn verify_all(cfg: &VerifyConfig) -> Result<VerifyReport> {
    verify(cfg, Check::All)
}

fn variant_name(length_normalized: bool) -> &'static str {
    if length_normalized {
        "length_normalized"
    } else {
        "unnormalized"
    }
}

fn lemma2_summary(out: &mut String, prefix: &str, runs: &[Lemma2Run]) {
    let max_ratio = runs.iter().map(|r| r.report.max_ratio()).fold(0.0, f64::max);
    let orders: Vec<f64> = runs
        .iter()
        .map(|r| r.report.order_estimate)
        .filter(|o| o.is_finite())
        .collect();
    let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    let max_gap = runs.iter().map(|r| r.report.small_alpha_gap()).fold(0.0, f64::max);
    let _ = writeln!(out, "{prefix}.runs={}", runs.len());
    let _ = writeln!(out, "{prefix}.max_residual_ratio={}", fmt_f64(max_ratio));
    let _ = writeln!(out, "{prefix}.min_order_estimate={}", fmt_f64(min_order));
    let _ = writeln!(out, "{prefix}.pass={}", runs.iter().all(|r| r.report.pass));
    let _ = writeln!(out, "{prefix}.small_alpha_max_gap={}", fmt_f64(max_gap));
    let _ = writeln!(
        out,
        "{prefix}.small_alpha_pass={}",
        runs.iter().all(|r| r.report.small_alpha_pass())
    );
}

impl VerifyReport {
    pub fn lemma2_pass(&self) -> bool {
        self.lemma2
            .as_ref()
            .is_none_or(|l| l.runs.iter().all(|r| r.report.pass))
    }

    pub fn lemma2_small_alpha_pass(&self) -> bool {
        self.lemma2
            .as_ref()
            .is_none_or(|l| l.runs.iter().all(|r| r.report.small_alpha_pass()))
    }

    pub fn gradients_pass(&self) -> bool {
        self.gradients
            .as_ref()
            .is_none_or(|g| g.iter().all(|(_, r)| r.passed()))
    }

    /// Every requested check passed.
    pub fn pass(&self) -> bool {
        self.theorem1.as_ref().is_none_or(|t| t.pass())
            && self.lemma2_pass()
            && self.lemma2_small_alpha_pass()
            && self.lemma3.as_ref().is_none_or(|l| l.pass())
            && self.gradients_pass()
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let c = &self.config;
        let l2 = &c.lemma2;
        let mut out = String::new();
        let kv = |out: &mut String, k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv(&mut out, "check", self.check.to_string());
        kv(&mut out, "seed", c.seed.to_string());
        if let Some(t) = &self.theorem1 {
            kv(&mut out, "theorem1.policies", c.theorem1_policies.to_string());
            kv(&mut out, "theorem1.vocab", c.theorem1_vocab.to_string());
            kv(&mut out, "theorem1.beta", fmt_f64(c.theorem1_beta));
            kv(
                &mut out,
                "theorem1.equal_length_pairs",
                t.equal_length_pairs.to_string(),
            );
            kv(
                &mut out,
                "theorem1.mixed_length_pairs",
                t.mixed_length_pairs.to_string(),
            );
            kv(
                &mut out,
                "theorem1.equal_length_max_gap",
                fmt_f64(t.equal_length_max_gap),
            );
            kv(
                &mut out,
                "theorem1.mixed_length_max_gap",
                fmt_f64(t.mixed_length_max_gap),
            );
            kv(
                &mut out,
                "theorem1.length_normalized_max_gap",
                fmt_f64(t.length_normalized_max_gap),
            );
            kv(&mut out, "theorem1.pass", t.pass().to_string());
        }
        if let Some(l) = &self.lemma2 {
            kv(&mut out, "lemma2.pair_distribution", PAIR_DISTRIBUTION.to_string());
            kv(&mut out, "lemma2.vocab", c.lemma2_vocab.to_string());
            kv(&mut out, "lemma2.max_len", l2.max_len.to_string());
            kv(&mut out, "lemma2.beta", fmt_f64(l2.beta));
            kv(&mut out, "lemma2.gamma", fmt_f64(l2.gamma));
            kv(
                &mut out,
                "lemma2.alphas",
                l2.alphas.iter().map(|a| fmt_f64(*a)).collect::<Vec<_>>().join(";"),
            );
            kv(&mut out, "lemma2.ratio_bound", fmt_f64(l2.ratio_bound));
            kv(&mut out, "lemma2.small_alpha", fmt_f64(l2.small_alpha));
            kv(&mut out, "lemma2.small_alpha_tol", fmt_f64(l2.small_alpha_tol));
            kv(&mut out, "lemma2.zscore", "disabled".into());
            kv(&mut out, "lemma2.a_variant", variant_name(l2.length_normalized).into());
            lemma2_summary(&mut out, "lemma2", &l.runs);
            lemma2_summary(
                &mut out,
                &format!("lemma2.{}", variant_name(!l2.length_normalized)),
                &l.alternate,
            );
        }
        if let Some(l3) = &self.lemma3 {
            kv(&mut out, "lemma3.triples", l3.triples.to_string());
            kv(&mut out, "lemma3.one_hot_max_gap", fmt_f64(l3.one_hot_max_gap));
            kv(
                &mut out,
                "lemma3.one_hot_seq_kl_max_dev",
                fmt_f64(l3.one_hot_seq_kl_max_dev),
            );
            kv(&mut out, "lemma3.identical_max_gap", fmt_f64(l3.identical_max_gap));
            kv(
                &mut out,
                "lemma3.general_mean_abs_gap",
                fmt_f64(l3.general_mean_abs_gap),
            );
            kv(&mut out, "lemma3.general_max_abs_gap", fmt_f64(l3.general_max_abs_gap));
            kv(&mut out, "lemma3.general_correlation", fmt_f64(l3.general_correlation));
            kv(&mut out, "lemma3.pass", l3.pass().to_string());
        }
        if let Some(g) = &self.gradients {
            kv(&mut out, "gradients.batch", c.gradient_batch.to_string());
            kv(&mut out, "gradients.beta", fmt_f64(c.gradient_loss.beta));
            kv(&mut out, "gradients.step", fmt_f64(c.gradient_check.step));
            kv(&mut out, "gradients.tol", fmt_f64(c.gradient_check.tol));
            for (m, r) in g {
                kv(
                    &mut out,
                    &format!("gradients.{m}.max_rel_error"),
                    fmt_f64(r.max_rel_error),
                );
                kv(&mut out, &format!("gradients.{m}.pass"), r.passed().to_string());
            }
        }
        kv(&mut out, "pass", self.pass().to_string());
        out
    }

    /// Lemma 2 rows for both `A` variants; `None` when lemma 2 was not run.
    pub fn lemma2_csv(&self) -> Option<String> {
        let l = self.lemma2.as_ref()?;
        let mut out = String::from("variant,seed,alpha,L1,L2,linear_term,residual\n");
        for run in l.runs.iter().chain(&l.alternate) {
            let variant = variant_name(run.report.length_normalized);
            for line in run.report.to_csv().lines().skip(1) {
                let _ = writeln!(out, "{variant},{},{line}", run.seed);
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_triples_respect_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Vocabulary::new(3).unwrap();
        for _ in 0..50 {
            let t = random_triple(&mut rng, v, 2, 1, 1);
            assert_eq!((t.chosen.len(), t.rejected.len()), (1, 1));
            assert!(t.prompt.iter().all(|&x| x != v.eos()));
            assert_ne!(t.chosen, t.rejected);
        }
    }

    #[test]
    fn small_run_reports_every_section() {
        let cfg = VerifyConfig {
            theorem1_policies: 2,
            theorem1_pairs: 5,
            lemma2_seeds: 2,
            lemma3_triples: 5,
            gradient_batch: 2,
            gradient_vocab: 3,
            ..Default::default()
        };
        let r = verify_all(&cfg).unwrap();
        let t1 = r.theorem1.as_ref().unwrap();
        assert!(t1.pass());
        assert_eq!(t1.equal_length_pairs, 10);
        assert_eq!(t1.mixed_length_pairs, 10);
        assert!(r.lemma2_pass());
        assert!(r.lemma3.as_ref().unwrap().pass());
        assert!(r.gradients_pass(), "{:?}", r.gradients);
        let kv = r.to_kv();
        for key in [
            "theorem1.pass=true",
            "lemma3.pass=true",
            "gradients.alpha_dpo.pass=true",
            "lemma2.unnormalized.runs=2",
        ] {
            assert!(kv.contains(key), "{key}\n{kv}");
        }
        assert_eq!(r.lemma2_csv().unwrap().lines().count(), 1 + 2 * 2 * 7);

        let only = verify(&cfg, Check::Lemma3).unwrap();
        assert!(only.theorem1.is_none() && only.lemma2.is_none() && only.gradients.is_none());
        assert_eq!(only.lemma3, r.lemma3);
        assert!(only.lemma2_csv().is_none());
        assert!(!only.to_kv().contains("theorem1."));
    }
}
