//! Flat `key=value` experiment configuration.
//!
//! One file carries every setting of an experiment: trainer keys at top
//! level (`learning_rate`, `reference_path`, ...), loss keys under `loss.`,
//! generator keys under `data.`, evaluation under `eval.` and verifier keys
//! under `verify.`. `#` starts a comment. Unknown or repeated keys are
//! errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{GenConfig, Generator};
use crate::eval::{EvalConfig, WinRateConfig};
use crate::exec::Execution;
use crate::io::{self, fmt_f64};
use crate::policy::{Policy, Vocabulary};
use crate::train::TrainConfig;
use crate::verify::VerifyConfig;
use crate::{Error, Result};

/// Synthetic-data settings. Vocabulary and default generator order come
/// from the top-level `vocab` and `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub prompt_len: usize,
    pub min_response_len: usize,
    pub max_response_len: usize,
    pub reward_seed: u64,
    pub reward_scale: f64,
    pub max_attempts: usize,
    /// `uniform` or a policy checkpoint to sample responses from.
    pub generator: String,
    pub generator_order: Option<usize>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenConfig::new(Vocabulary::new(2).expect("valid"));
        Self {
            count: g.count,
            prompt_len: g.prompt_len,
            min_response_len: g.min_response_len,
            max_response_len: g.max_response_len,
            reward_seed: g.reward_seed,
            reward_scale: g.reward_scale,
            max_attempts: g.max_attempts,
            generator: "uniform".into(),
            generator_order: None,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Evaluation settings; method, β and length normalization come from `loss.*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub bins: usize,
    pub win_rate: WinRateConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let e = EvalConfig::default();
        let g = GenConfig::new(Vocabulary::new(2).expect("valid"));
        Self {
            bins: e.bins,
            // Sample responses as long as the generated ones.
            win_rate: WinRateConfig {
                max_len: g.max_response_len,
                ..e.win_rate
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalSettings,
    pub verify: VerifyConfig,
    pub execution: Execution,
}

/// One non-blank, non-comment line of a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_entries(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got `{content}`")))?;
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(err(format!("`{key}` already set on line {}", prev.line)));
        }
        out.push(Entry {
            key: key.into(),
            value: value.into(),
            line,
        });
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (value != "none").then(|| PathBuf::from(value))
}

fn opt_text<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

fn path_text(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or("none".into(), |p| p.display().to_string())
}

fn float_text(v: Option<f64>) -> String {
    v.map_or("none".into(), fmt_f64)
}

impl LabConfig {
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, path)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&io::read_to_string(path)?, path)
    }

    /// Apply every entry of `text`; errors carry the file line.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for e in parse_entries(text, path)? {
            self.set(&e.key, &e.value).map_err(|err| Error::Parse {
                path: path.to_path_buf(),
                line: e.line,
                message: err.to_string(),
            })?;
        }
        Ok(())
    }

    /// Set one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let l = &mut t.loss;
        let d = &mut self.data;
        let w = &mut self.eval.win_rate;
        let v = &mut self.verify;
        let k = key;
        match key {
            "execution" => self.execution = parse(k, value)?,
            "init" => t.init = parse(k, value)?,
            "learning_rate" => t.learning_rate = parse(k, value)?,
            "batch_size" => t.batch_size = parse(k, value)?,
            "epochs" => t.epochs = parse(k, value)?,
            "warmup_fraction" => t.warmup_fraction = parse(k, value)?,
            "seed" => t.seed = parse(k, value)?,
            "adam.beta1" => t.adam.beta1 = parse(k, value)?,
            "adam.beta2" => t.adam.beta2 = parse(k, value)?,
            "adam.eps" => t.adam.eps = parse(k, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(k, value)?,
            "checkpoint_dir" => t.checkpoint_dir = opt_path(value),
            "metrics_path" => t.metrics_path = opt_path(value),
            "reference_path" => t.reference_path = (value != "none").then(|| value.to_string()),
            "reference_out" => t.reference_out = opt_path(value),
            "vocab" => t.vocab = parse(k, value)?,
            "order" => t.order = parse(k, value)?,
            "clip_grad_norm" => t.clip_grad_norm = optional(k, value)?,
            "sft_steps" => t.sft_steps = parse(k, value)?,
            "sft_learning_rate" => t.sft_learning_rate = parse(k, value)?,

            "loss.method" => l.method = parse(k, value)?,
            "loss.beta" => l.beta = parse(k, value)?,
            "loss.gamma" => l.gamma = parse(k, value)?,
            "loss.alpha" => l.alpha = parse(k, value)?,
            "loss.length_normalized" => l.length_normalized = parse(k, value)?,
            "loss.tau" => l.tau = parse(k, value)?,
            "loss.lambda" => l.lambda = parse(k, value)?,
            "loss.lambda_w" => l.lambda_w = parse(k, value)?,
            "loss.lambda_l" => l.lambda_l = parse(k, value)?,
            "loss.alpha_len" => l.alpha_len = parse(k, value)?,
            "loss.zscore_eps" => l.zscore_eps = parse(k, value)?,
            "loss.zscore_scope" => l.zscore_scope = parse(k, value)?,
            "loss.tdpo_delta_grad" => l.tdpo_delta_grad = parse(k, value)?,

            "data.count" => d.count = parse(k, value)?,
            "data.prompt_len" => d.prompt_len = parse(k, value)?,
            "data.min_response_len" => d.min_response_len = parse(k, value)?,
            "data.max_response_len" => d.max_response_len = parse(k, value)?,
            "data.reward_seed" => d.reward_seed = parse(k, value)?,
            "data.reward_scale" => d.reward_scale = parse(k, value)?,
            "data.max_attempts" => d.max_attempts = parse(k, value)?,
            "data.generator" => d.generator = value.to_string(),
            "data.generator_order" => d.generator_order = optional(k, value)?,
            "data.holdout_fraction" => d.holdout_fraction = parse(k, value)?,
            "data.seed" => d.seed = parse(k, value)?,

            "eval.bins" => self.eval.bins = parse(k, value)?,
            "eval.samples_per_prompt" => w.samples_per_prompt = parse(k, value)?,
            "eval.max_len" => w.max_len = parse(k, value)?,
            "eval.seed" => w.seed = parse(k, value)?,

            "verify.seed" => v.seed = parse(k, value)?,
            "verify.order" => v.order = parse(k, value)?,
            "verify.policy_scale" => v.policy_scale = parse(k, value)?,
            "verify.theorem1_policies" => v.theorem1_policies = parse(k, value)?,
            "verify.theorem1_pairs" => v.theorem1_pairs = parse(k, value)?,
            "verify.theorem1_vocab" => v.theorem1_vocab = parse(k, value)?,
            "verify.theorem1_beta" => v.theorem1_beta = parse(k, value)?,
            "verify.lemma2_seeds" => v.lemma2_seeds = parse(k, value)?,
            "verify.lemma2_vocab" => v.lemma2_vocab = parse(k, value)?,
            "verify.lemma2.alphas" => {
                v.lemma2.alphas = value.split(';').map(|a| parse(k, a.trim())).collect::<Result<_>>()?
            }
            "verify.lemma2.beta" => v.lemma2.beta = parse(k, value)?,
            "verify.lemma2.gamma" => v.lemma2.gamma = parse(k, value)?,
            "verify.lemma2.length_normalized" => v.lemma2.length_normalized = parse(k, value)?,
            "verify.lemma2.max_len" => v.lemma2.max_len = parse(k, value)?,
            "verify.lemma2.ratio_bound" => v.lemma2.ratio_bound = parse(k, value)?,
            "verify.lemma2.residual_floor" => v.lemma2.residual_floor = parse(k, value)?,
            "verify.lemma2.small_alpha" => v.lemma2.small_alpha = parse(k, value)?,
            "verify.lemma2.small_alpha_tol" => v.lemma2.small_alpha_tol = parse(k, value)?,
            "verify.lemma3_triples" => v.lemma3_triples = parse(k, value)?,
            "verify.lemma3_vocab" => v.lemma3_vocab = parse(k, value)?,
            "verify.lemma3_beta" => v.lemma3_beta = parse(k, value)?,
            "verify.gradient_batch" => v.gradient_batch = parse(k, value)?,
            "verify.gradient_vocab" => v.gradient_vocab = parse(k, value)?,
            "verify.gradient_beta" => v.gradient_loss.beta = parse(k, value)?,
            "verify.gradient_step" => v.gradient_check.step = parse(k, value)?,
            "verify.gradient_tol" => v.gradient_check.tol = parse(k, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`LabConfig::from_text`]
    /// reads back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let l = &t.loss;
        let d = &self.data;
        let w = &self.eval.win_rate;
        let v = &self.verify;
        let mut out = String::new();
        let mut kv = |k: &str, val: String| {
            let _ = writeln!(out, "{k}={val}");
        };
        kv("execution", self.execution.to_string());
        kv("init", t.init.to_string());
        kv("learning_rate", fmt_f64(t.learning_rate));
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("warmup_fraction", fmt_f64(t.warmup_fraction));
        kv("seed", t.seed.to_string());
        kv("adam.beta1", fmt_f64(t.adam.beta1));
        kv("adam.beta2", fmt_f64(t.adam.beta2));
        kv("adam.eps", fmt_f64(t.adam.eps));
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("checkpoint_dir", path_text(&t.checkpoint_dir));
        kv("metrics_path", path_text(&t.metrics_path));
        kv("reference_path", opt_text(&t.reference_path));
        kv("reference_out", path_text(&t.reference_out));
        kv("vocab", t.vocab.to_string());
        kv("order", t.order.to_string());
        kv("clip_grad_norm", float_text(t.clip_grad_norm));
        kv("sft_steps", t.sft_steps.to_string());
        kv("sft_learning_rate", fmt_f64(t.sft_learning_rate));
        kv("loss.method", l.method.to_string());
        kv("loss.beta", fmt_f64(l.beta));
        kv("loss.gamma", fmt_f64(l.gamma));
        kv("loss.alpha", fmt_f64(l.alpha));
        kv("loss.length_normalized", l.length_normalized.to_string());
        kv("loss.tau", fmt_f64(l.tau));
        kv("loss.lambda", fmt_f64(l.lambda));
        kv("loss.lambda_w", fmt_f64(l.lambda_w));
        kv("loss.lambda_l", fmt_f64(l.lambda_l));
        kv("loss.alpha_len", fmt_f64(l.alpha_len));
        kv("loss.zscore_eps", fmt_f64(l.zscore_eps));
        kv("loss.zscore_scope", l.zscore_scope.to_string());
        kv("loss.tdpo_delta_grad", l.tdpo_delta_grad.to_string());
        kv("data.count", d.count.to_string());
        kv("data.prompt_len", d.prompt_len.to_string());
        kv("data.min_response_len", d.min_response_len.to_string());
        kv("data.max_response_len", d.max_response_len.to_string());
        kv("data.reward_seed", d.reward_seed.to_string());
        kv("data.reward_scale", fmt_f64(d.reward_scale));
        kv("data.max_attempts", d.max_attempts.to_string());
        kv("data.generator", d.generator.clone());
        kv("data.generator_order", opt_text(&d.generator_order));
        kv("data.holdout_fraction", fmt_f64(d.holdout_fraction));
        kv("data.seed", d.seed.to_string());
        kv("eval.bins", self.eval.bins.to_string());
        kv("eval.samples_per_prompt", w.samples_per_prompt.to_string());
        kv("eval.max_len", w.max_len.to_string());
        kv("eval.seed", w.seed.to_string());
        kv("verify.seed", v.seed.to_string());
        kv("verify.order", v.order.to_string());
        kv("verify.policy_scale", fmt_f64(v.policy_scale));
        kv("verify.theorem1_policies", v.theorem1_policies.to_string());
        kv("verify.theorem1_pairs", v.theorem1_pairs.to_string());
        kv("verify.theorem1_vocab", v.theorem1_vocab.to_string());
        kv("verify.theorem1_beta", fmt_f64(v.theorem1_beta));
        kv("verify.lemma2_seeds", v.lemma2_seeds.to_string());
        kv("verify.lemma2_vocab", v.lemma2_vocab.to_string());
        kv(
            "verify.lemma2.alphas",
            v.lemma2
                .alphas
                .iter()
                .map(|a| fmt_f64(*a))
                .collect::<Vec<_>>()
                .join(";"),
        );
        kv("verify.lemma2.beta", fmt_f64(v.lemma2.beta));
        kv("verify.lemma2.gamma", fmt_f64(v.lemma2.gamma));
        kv(
            "verify.lemma2.length_normalized",
            v.lemma2.length_normalized.to_string(),
        );
        kv("verify.lemma2.max_len", v.lemma2.max_len.to_string());
        kv("verify.lemma2.ratio_bound", fmt_f64(v.lemma2.ratio_bound));
        kv("verify.lemma2.residual_floor", fmt_f64(v.lemma2.residual_floor));
        kv("verify.lemma2.small_alpha", fmt_f64(v.lemma2.small_alpha));
        kv("verify.lemma2.small_alpha_tol", fmt_f64(v.lemma2.small_alpha_tol));
        kv("verify.lemma3_triples", v.lemma3_triples.to_string());
        kv("verify.lemma3_vocab", v.lemma3_vocab.to_string());
        kv("verify.lemma3_beta", fmt_f64(v.lemma3_beta));
        kv("verify.gradient_batch", v.gradient_batch.to_string());
        kv("verify.gradient_vocab", v.gradient_vocab.to_string());
        kv("verify.gradient_beta", fmt_f64(v.gradient_loss.beta));
        kv("verify.gradient_step", fmt_f64(v.gradient_check.step));
        kv("verify.gradient_tol", fmt_f64(v.gradient_check.tol));
        out
    }

    /// Trainer settings with `execution` applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            exec: self.execution,
            ..self.train.clone()
        }
    }

    /// Generator settings; loads the generator checkpoint when one is named.
    pub fn gen_config(&self) -> Result<GenConfig> {
        let vocab = self.train.vocabulary()?;
        let d = &self.data;
        let order = d.generator_order.unwrap_or(self.train.order);
        let generator = if d.generator == "uniform" {
            Generator::Uniform { order }
        } else {
            let p = Policy::load(&d.generator)?;
            if p.vocab() != vocab {
                return Err(Error::config(
                    "data.generator",
                    format!(
                        "checkpoint vocabulary {} differs from vocab {}",
                        p.vocab().size(),
                        vocab.size()
                    ),
                ));
            }
            Generator::Policy(p)
        };
        if !(0.0..1.0).contains(&d.holdout_fraction) {
            return Err(Error::config("data.holdout_fraction", "must lie in [0, 1)"));
        }
        Ok(GenConfig {
            count: d.count,
            vocab,
            prompt_len: d.prompt_len,
            min_response_len: d.min_response_len,
            max_response_len: d.max_response_len,
            reward_seed: d.reward_seed,
            reward_scale: d.reward_scale,
            generator,
            max_attempts: d.max_attempts,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        let l = &self.train.loss;
        EvalConfig {
            method: l.method,
            beta: l.beta,
            length_normalized: l.length_normalized,
            bins: self.eval.bins,
            win_rate: WinRateConfig {
                exec: self.execution,
                ..self.eval.win_rate
            },
            exec: self.execution,
        }
    }

    pub fn verify_config(&self) -> VerifyConfig {
        VerifyConfig {
            exec: self.execution,
            ..self.verify.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{Method, ZScoreScope};
    use crate::train::Init;

    fn p() -> &'static Path {
        Path::new("exp.cfg")
    }

    #[test]
    fn parses_comments_and_nested_keys() {
        let text = "# desk run\nloss.method = dpo\n\nloss.beta=0.5  # softer\nreference_path=sft\ninit=reference\nclip_grad_norm=1.0\nverify.lemma2.alphas=0.1;0.05\n";
        let c = LabConfig::from_text(text, p()).unwrap();
        assert_eq!(c.train.loss.method, Method::Dpo);
        assert_eq!(c.train.loss.beta, 0.5);
        assert_eq!(c.train.reference_path.as_deref(), Some("sft"));
        assert_eq!(c.train.init, Init::Reference);
        assert_eq!(c.train.clip_grad_norm, Some(1.0));
        assert_eq!(c.verify.lemma2.alphas, vec![0.1, 0.05]);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [
            ("loss.beta=1\nnot a pair\n", 2),
            ("\n\nloss.bogus=1\n", 3),
            ("batch_size=-3\n", 1),
            ("seed=1\nseed=2\n", 2),
        ] {
            match LabConfig::from_text(text, p()) {
                Err(Error::Parse { line: l, path, .. }) => {
                    assert_eq!(l, line, "{text:?}");
                    assert_eq!(path, p());
                }
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_key_is_rejected_by_set() {
        let mut c = LabConfig::default();
        let e = c.set("loss.betta", "1").unwrap_err();
        assert!(e.to_string().contains("loss.betta"), "{e}");
    }

    #[test]
    fn text_round_trip() {
        let mut c = LabConfig::default();
        c.set("loss.zscore_scope", "dataset").unwrap();
        c.set("metrics_path", "out/m.csv").unwrap();
        c.set("data.generator_order", "1").unwrap();
        c.set("execution", "sequential").unwrap();
        c.set("learning_rate", "0.1").unwrap();
        let back = LabConfig::from_text(&c.to_text(), p()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.loss.zscore_scope, ZScoreScope::Dataset);
        assert_eq!(
            LabConfig::from_text(&LabConfig::default().to_text(), p()).unwrap(),
            LabConfig::default()
        );
    }

    #[test]
    fn none_clears_optional_values() {
        let mut c = LabConfig::default();
        c.set("reference_path", "uniform").unwrap();
        c.set("reference_path", "none").unwrap();
        assert_eq!(c.train.reference_path, None);
        c.set("clip_grad_norm", "none").unwrap();
        assert_eq!(c.train.clip_grad_norm, None);
    }

    #[test]
    fn gen_config_uses_top_level_vocab() {
        let mut c = LabConfig::default();
        c.set("vocab", "5").unwrap();
        c.set("data.count", "10").unwrap();
        let g = c.gen_config().unwrap();
        assert_eq!(g.vocab.size(), 5);
        assert_eq!(g.count, 10);
        assert_eq!(g.generator, Generator::Uniform { order: 2 });
        c.set("data.holdout_fraction", "1.5").unwrap();
        assert!(matches!(c.gen_config(), Err(Error::Config { key, .. }) if key == "data.holdout_fraction"));
    }
}
