//! Mini-batch training against any objective.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::PreferenceTriple;
use crate::eval::{margin_score, reward_margin, RewardStyle};
use crate::exec::{self, Execution};
use crate::io::{fmt_f64, write_atomic};
use crate::kl::seq_kl;
use crate::objectives::{batch_loss, missing_reference, LossConfig, LossContext, MarginStats, ZScoreScope};
use crate::optim::{adam_step, clip_grad_norm, lr_at, AdamHyper, AdamState};
use crate::policy::{Policy, PolicyParams, Reference, Vocabulary};
use crate::{Error, Result};

/// Starting point of the trained policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// All logits zero.
    #[default]
    Uniform,
    /// A copy of the reference policy (uniform for a uniform reference).
    Reference,
}

impl std::str::FromStr for Init {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "reference" => Ok(Self::Reference),
            _ => Err(Error::config("init", format!("expected uniform|reference, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Reference => "reference",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub init: Init,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub adam: AdamHyper,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// A checkpoint path, `uniform`, or `sft` (fit on the training data).
    pub reference_path: Option<String>,
    /// Where to save an `sft` reference.
    pub reference_out: Option<PathBuf>,
    pub vocab: u32,
    pub order: usize,
    /// Global gradient-norm clip; `None` disables.
    pub clip_grad_norm: Option<f64>,
    pub sft_steps: usize,
    pub sft_learning_rate: f64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init: Init::Uniform,
            loss: LossConfig::default(),
            learning_rate: 5e-3,
            batch_size: 64,
            epochs: 3,
            warmup_fraction: 0.1,
            seed: 0,
            adam: AdamHyper::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            metrics_path: None,
            reference_path: None,
            reference_out: None,
            vocab: 8,
            order: 2,
            clip_grad_norm: None,
            sft_steps: 300,
            sft_learning_rate: 0.05,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// The LLM-scale settings (batch 128, lr 1e-6, one epoch). Far too
    /// timid for a tabular policy; kept for comparison.
    pub fn llm_preset() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-6,
            epochs: 1,
            ..Self::default()
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab).map_err(|e| Error::config("vocab", e.to_string()))
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        self.loss.validate()?;
        self.vocabulary()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.batch_size > dataset_len {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds the dataset size {dataset_len}", self.batch_size),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must lie in [0, 1)"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_grad_norm", "must be positive"));
            }
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::config("checkpoint_dir", "required when checkpoint_every > 0"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub kl_chosen: f64,
    pub kl_rejected: f64,
    pub margin_mean: f64,
    pub margin_std: f64,
    pub ref_logratio_mean: f64,
    pub train_acc: f64,
}

pub const METRICS_HEADER: &str =
    "step,lr,loss,kl_chosen,kl_rejected,margin_mean,margin_std,ref_logratio_mean,train_acc";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                fmt_f64(r.lr),
                fmt_f64(r.loss),
                fmt_f64(r.kl_chosen),
                fmt_f64(r.kl_rejected),
                fmt_f64(r.margin_mean),
                fmt_f64(r.margin_std),
                fmt_f64(r.ref_logratio_mean),
                fmt_f64(r.train_acc)
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Mean loss over the first and last `fraction` of rows.
    pub fn loss_head_tail(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = self.rows.len();
        if n == 0 {
            return None;
        }
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let mean = |rows: &[MetricsRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        Some((mean(&self.rows[..k]), mean(&self.rows[n - k..])))
    }
}

fn batch_metrics(
    policy: &Policy,
    reference: Reference<'_>,
    batch: &[PreferenceTriple],
    style: RewardStyle,
    beta: f64,
    exec: Execution,
) -> Result<[f64; 6]> {
    let rows = exec::try_map(exec, batch, |t| -> Result<[f64; 4]> {
        Ok([
            seq_kl(policy, reference, &t.prompt, &t.chosen)?.exact,
            seq_kl(policy, reference, &t.prompt, &t.rejected)?.exact,
            reward_margin(style, policy, Some(reference), t, beta)?,
            reference.sequence_log_prob(&t.prompt, &t.chosen)? - reference.sequence_log_prob(&t.prompt, &t.rejected)?,
        ])
    })?;
    let n = batch.len() as f64;
    let mean = |k: usize| exec::ordered_sum(rows.iter().map(|r| r[k])) / n;
    let margin_mean = mean(2);
    let margin_var = exec::ordered_sum(rows.iter().map(|r| (r[2] - margin_mean).powi(2))) / n;
    let acc = exec::ordered_sum(rows.iter().map(|r| margin_score(r[2]))) / n;
    Ok([mean(0), mean(1), margin_mean, margin_var.sqrt(), mean(3), acc])
}

/// `(μ_M, σ_M)` over the whole training set at the current parameters.
pub fn dataset_margin_stats(
    policy: &Policy,
    reference: Reference<'_>,
    dataset: &[PreferenceTriple],
    beta: f64,
    exec: Execution,
) -> Result<MarginStats> {
    let margins = exec::try_map(exec, dataset, |t| -> Result<f64> {
        let ratio = |y: &[u32]| -> Result<f64> {
            Ok(policy.log_prob(&t.prompt, y)? - reference.sequence_log_prob(&t.prompt, y)?)
        };
        Ok(beta * (ratio(&t.chosen)? - ratio(&t.rejected)?))
    })?;
    MarginStats::from_values(&margins).ok_or_else(|| Error::Input("empty dataset".into()))
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub metrics: MetricsLog,
}

/// Train from `config.init`. Metrics rows describe each batch at the
/// parameters the update was computed from. Without a reference, KL and
/// log-ratio metrics are measured against the uniform policy.
pub fn train(
    config: &TrainConfig,
    dataset: &[PreferenceTriple],
    reference: Option<Reference<'_>>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    config.validate(dataset.len())?;
    let vocab = config.vocabulary()?;
    for (i, t) in dataset.iter().enumerate() {
        t.validate(vocab)
            .map_err(|e| Error::Input(format!("training triple {i}: {e}")))?;
    }
    if config.loss.method.requires_reference() && reference.is_none() {
        return Err(missing_reference());
    }
    let metric_ref = reference.unwrap_or(Reference::Uniform(vocab));
    let style = RewardStyle::for_loss(&config.loss);

    let mut policy = match (config.init, reference) {
        (Init::Reference, Some(Reference::Policy(p))) => {
            if p.vocab() != vocab || p.order() != config.order {
                return Err(Error::config(
                    "init",
                    format!(
                        "reference has vocab {} order {}, training expects vocab {} order {}",
                        p.vocab().size(),
                        p.order(),
                        vocab.size(),
                        config.order
                    ),
                ));
            }
            p.clone()
        }
        (Init::Reference, Some(Reference::ObservedOneHot)) => {
            return Err(Error::config("init", "cannot start from a one-hot reference"));
        }
        (Init::Reference, None) => return Err(missing_reference()),
        _ => Policy::uniform(vocab, config.order)?,
    };
    let mut state = AdamState::new(policy.num_params());
    let mut metrics = MetricsLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = config.steps_per_epoch(dataset.len());
    let total = per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let ctx = LossContext {
            margin_stats: match config.loss.zscore_scope {
                ZScoreScope::Dataset => Some(dataset_margin_stats(
                    &policy,
                    reference.ok_or_else(missing_reference)?,
                    dataset,
                    config.loss.beta,
                    config.exec,
                )?),
                ZScoreScope::Batch => None,
            },
        };
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<PreferenceTriple> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let (loss, mut grad) = {
                let tape = Tape::new();
                let params = PolicyParams::lazy(&tape, &policy);
                let loss = batch_loss(&params, reference, &batch, &config.loss, &ctx)?;
                let value = loss.value.value();
                if !value.is_finite() {
                    return Err(Error::NonFinite { what: "loss", step });
                }
                let g = loss
                    .value
                    .backward()
                    .map_err(|_| Error::NonFinite { what: "gradient", step })?;
                (value, g.to_dense(policy.num_params()))
            };
            let [kl_chosen, kl_rejected, margin_mean, margin_std, ref_logratio_mean, train_acc] =
                batch_metrics(&policy, metric_ref, &batch, style, config.loss.beta, config.exec)?;
            if let Some(c) = config.clip_grad_norm {
                clip_grad_norm(&mut grad, c);
            }
            let lr = lr_at(step, total, config.learning_rate, config.warmup_fraction);
            adam_step(policy.logits_mut(), &grad, &mut state, &config.adam, lr, step)?;
            metrics.rows.push(MetricsRow {
                step,
                lr,
                loss,
                kl_chosen,
                kl_rejected,
                margin_mean,
                margin_std,
                ref_logratio_mean,
                train_acc,
            });
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                if let Some(dir) = &config.checkpoint_dir {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    policy.save(checkpoint_path(dir, step))?;
                }
            }
        }
    }
    if let Some(path) = &config.metrics_path {
        metrics.save(path)?;
    }
    Ok(TrainOutcome { policy, metrics })
}
