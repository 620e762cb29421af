//! `prefopt` command line: data generation, training, evaluation,
//! histogram export and the theory checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 failed
//! verification or numerical abort, 3 I/O error.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prefopt::config::LabConfig;
use prefopt::data::{generate_synthetic, Dataset, LatentReward};
use prefopt::eval::{evaluate, export_distributions, RewardStyle};
use prefopt::io::write_atomic;
use prefopt::policy::{fit_reference, Policy, Reference, SftConfig};
use prefopt::train::train;
use prefopt::verify::{verify, Check};
use prefopt::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILED: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "prefopt", version, about = "Preference-optimization lab on tabular policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (flat key=value file).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic Bradley-Terry preference dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Output JSONL. The latent reward goes next to it with extension `.reward`.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Split off `data.holdout_fraction` of the triples into this file.
        #[arg(long, value_name = "FILE")]
        heldout: Option<PathBuf>,
        /// Generation seed (overrides `data.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a policy.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training set (JSONL).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Final checkpoint.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Per-step metrics CSV (overrides `metrics_path`).
        #[arg(long, value_name = "FILE")]
        metrics: Option<PathBuf>,
        /// Reference: a checkpoint, `uniform` or `sft` (overrides `reference_path`).
        #[arg(long, value_name = "REF")]
        reference: Option<String>,
        /// Shuffling seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on held-out triples.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Reference checkpoint or `uniform` (default).
        #[arg(long = "ref", value_name = "REF")]
        reference: Option<String>,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// key=value report; histograms go to `<report>.csv`.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        /// Latent reward file for the oracle-judged win rate.
        #[arg(long, value_name = "FILE")]
        oracle: Option<PathBuf>,
    },
    /// Run the theory checks.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CHECK", default_value = "all", value_parser = ["theorem1", "lemma2", "lemma3", "gradients", "all"])]
        check: String,
        /// key=value report; lemma 2 rows go to `<out>.csv`.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Verifier seed (overrides `verify.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export reward-margin, chosen log-likelihood and reference log-ratio histograms.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Reference checkpoint or `uniform`.
        #[arg(long = "ref", value_name = "REF")]
        reference: String,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Histogram bins (overrides `eval.bins`).
        #[arg(long)]
        bins: Option<usize>,
    },
}

/// An error with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::NonFinite { .. } | Error::Autodiff(_) => EXIT_FAILED,
        Error::Input(_) | Error::Config { .. } | Error::Parse { .. } | Error::Generation(_) | Error::Enumeration(_) => {
            EXIT_USAGE
        }
    }
}

/// Attach the flag a failing value came from.
fn flag(name: &'static str) -> impl Fn(Error) -> CliError {
    move |e| CliError {
        code: exit_code(&e),
        message: format!("--{name}: {e}"),
    }
}

fn plain(e: Error) -> CliError {
    CliError {
        code: exit_code(&e),
        message: e.to_string(),
    }
}

fn load_config(common: &Common) -> Result<LabConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => LabConfig::load(p).map_err(flag("config"))?,
        None => LabConfig::default(),
    };
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set: expected KEY=VALUE, got `{s}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(flag("set"))?;
    }
    Ok(cfg)
}

fn load_policy(path: &Path, name: &'static str) -> Result<Policy, CliError> {
    Policy::load(path).map_err(flag(name))
}

/// `uniform` or a checkpoint path.
fn load_reference(arg: Option<&str>, like: &Policy, name: &'static str) -> Result<Option<Policy>, CliError> {
    match arg {
        None | Some("uniform") => Ok(None),
        Some(p) => {
            let r = load_policy(Path::new(p), name)?;
            if r.vocab() != like.vocab() {
                return Err(CliError::usage(format!(
                    "--{name}: vocabulary {} differs from the checkpoint's {}",
                    r.vocab().size(),
                    like.vocab().size()
                )));
            }
            Ok(Some(r))
        }
    }
}

fn load_data(path: &Path, like: Option<&Policy>) -> Result<Dataset, CliError> {
    Dataset::load_jsonl(path, like.map(Policy::vocab)).map_err(flag("data"))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Where `datagen --out` puts the latent reward.
pub fn reward_sidecar(out: &Path) -> PathBuf {
    out.with_extension("reward")
}

/// Where `train` saves an `sft` reference when `reference_out` is unset.
pub fn default_reference_out(out: &Path) -> PathBuf {
    out.with_extension("ref.ckpt")
}

fn datagen(common: &Common, out: &Path, heldout: Option<&Path>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let g = cfg.gen_config().map_err(plain)?;
    let data = generate_synthetic(&g, cfg.data.seed).map_err(plain)?;
    match heldout {
        Some(h) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
            rng.set_stream(1);
            let (tr, ho) = data
                .split(cfg.data.holdout_fraction, &mut rng)
                .map_err(|e| CliError::usage(format!("data.holdout_fraction: {e}")))?;
            tr.save_jsonl(out).map_err(flag("out"))?;
            ho.save_jsonl(h).map_err(flag("heldout"))?;
            eprintln!("wrote {} training and {} held-out triples", tr.len(), ho.len());
        }
        None => {
            data.save_jsonl(out).map_err(flag("out"))?;
            eprintln!("wrote {} triples", data.len());
        }
    }
    g.latent_reward().save(reward_sidecar(out)).map_err(flag("out"))?;
    Ok(())
}

fn train_cmd(
    common: &Common,
    data: &Path,
    out: &Path,
    metrics: Option<&Path>,
    reference: Option<&str>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(m) = metrics {
        cfg.train.metrics_path = Some(m.to_path_buf());
    }
    if let Some(r) = reference {
        cfg.train.reference_path = Some(r.to_string());
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let tc = cfg.train_config();
    let vocab = tc.vocabulary().map_err(plain)?;
    let data = Dataset::load_jsonl(data, Some(vocab)).map_err(flag("data"))?;
    if data.is_empty() {
        return Err(CliError::usage("--data: training set is empty"));
    }
    let reference_policy = match tc.reference_path.as_deref() {
        None | Some("uniform") => None,
        Some("sft") => {
            let sft = SftConfig {
                steps: tc.sft_steps,
                learning_rate: tc.sft_learning_rate,
                exec: tc.exec,
                ..SftConfig::new(vocab, tc.order)
            };
            let p = fit_reference(&data.triples, &sft).map_err(plain)?;
            let path = tc.reference_out.clone().unwrap_or_else(|| default_reference_out(out));
            p.save(&path).map_err(flag("out"))?;
            eprintln!("sft reference saved to {}", path.display());
            Some(p)
        }
        Some(p) => {
            let r = Policy::load(p).map_err(|e| CliError {
                code: exit_code(&e),
                message: format!("reference_path: {e}"),
            })?;
            if r.vocab() != vocab {
                return Err(CliError::usage(format!(
                    "reference_path: vocabulary {} differs from vocab {}",
                    r.vocab().size(),
                    vocab.size()
                )));
            }
            Some(r)
        }
    };
    let reference = match (tc.reference_path.as_deref(), &reference_policy) {
        (_, Some(p)) => Some(Reference::Policy(p)),
        (Some("uniform"), None) => Some(Reference::Uniform(vocab)),
        _ => None,
    };
    let outcome = train(&tc, &data.triples, reference).map_err(plain)?;
    outcome.policy.save(out).map_err(flag("out"))?;
    if let Some(last) = outcome.metrics.rows.last() {
        eprintln!(
            "{} steps, final loss {:.6}, train_acc {:.3}",
            last.step, last.loss, last.train_acc
        );
    }
    Ok(())
}

fn eval_cmd(
    common: &Common,
    ckpt: &Path,
    reference: Option<&str>,
    data: &Path,
    report: &Path,
    oracle: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let policy = load_policy(ckpt, "ckpt")?;
    let reference = load_reference(reference, &policy, "ref")?;
    let data = load_data(data, Some(&policy))?;
    if data.is_empty() {
        return Err(CliError::usage("--data: held-out set is empty"));
    }
    let oracle = match oracle {
        Some(p) => Some(LatentReward::load(p).map_err(flag("oracle"))?),
        None => None,
    };
    let r = evaluate(
        &policy,
        reference.as_ref(),
        &data.triples,
        oracle.as_ref(),
        &cfg.eval_config(),
    )
    .map_err(plain)?;
    write_atomic(report, r.to_kv().as_bytes()).map_err(flag("report"))?;
    write_atomic(with_suffix(report, ".csv"), r.distributions.to_csv().as_bytes()).map_err(flag("report"))?;
    eprintln!("preference_accuracy={:.4}", r.preference_accuracy);
    Ok(())
}

fn verify_cmd(common: &Common, check: &str, out: &Path, seed: Option<u64>) -> Result<bool, CliError> {
    let mut cfg = load_config(common)?;
    if let Some(s) = seed {
        cfg.verify.seed = s;
    }
    let check: Check = check.parse().map_err(flag("check"))?;
    let report = verify(&cfg.verify_config(), check).map_err(plain)?;
    write_atomic(out, report.to_kv().as_bytes()).map_err(flag("out"))?;
    if let Some(csv) = report.lemma2_csv() {
        write_atomic(with_suffix(out, ".csv"), csv.as_bytes()).map_err(flag("out"))?;
    }
    let pass = report.pass();
    eprintln!("verify {check}: {}", if pass { "pass" } else { "FAIL" });
    Ok(pass)
}

fn export_cmd(
    common: &Common,
    ckpt: &Path,
    reference: &str,
    data: &Path,
    out: &Path,
    bins: Option<usize>,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let policy = load_policy(ckpt, "ckpt")?;
    let reference = load_reference(Some(reference), &policy, "ref")?;
    let data = load_data(data, Some(&policy))?;
    if data.is_empty() {
        return Err(CliError::usage("--data: dataset is empty"));
    }
    let r = match &reference {
        Some(p) => Reference::Policy(p),
        None => Reference::Uniform(policy.vocab()),
    };
    let style = RewardStyle::for_loss(&cfg.train.loss);
    let bins = bins.unwrap_or(cfg.eval.bins);
    export_distributions(style, &policy, r, &data.triples, cfg.train.loss.beta, bins, out).map_err(|e| match e {
        Error::Io { .. } => flag("out")(e),
        e => CliError::usage(format!("--bins: {e}")),
    })?;
    Ok(())
}

/// Parse `argv` (including the program name) and run. Messages go to
/// stderr; the return value is the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Datagen {
            common,
            out,
            heldout,
            seed,
        } => datagen(common, out, heldout.as_deref(), *seed).map(|_| true),
        Command::Train {
            common,
            data,
            out,
            metrics,
            reference,
            seed,
        } => train_cmd(common, data, out, metrics.as_deref(), reference.as_deref(), *seed).map(|_| true),
        Command::Eval {
            common,
            ckpt,
            reference,
            data,
            report,
            oracle,
        } => eval_cmd(common, ckpt, reference.as_deref(), data, report, oracle.as_deref()).map(|_| true),
        Command::Verify {
            common,
            check,
            out,
            seed,
        } => verify_cmd(common, check, out, *seed),
        Command::Export {
            common,
            ckpt,
            reference,
            data,
            out,
            bins,
        } => export_cmd(common, ckpt, reference, data, out, *bins).map(|_| true),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
