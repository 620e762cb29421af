//! Preference triples: synthetic Bradley-Terry generation, JSONL I/O and
//! seeded splitting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::scalar;
use crate::policy::checkpoint as codec;
use crate::policy::{Policy, Token, Vocabulary, REWARD_MAGIC};
use crate::{io, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTriple {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

impl PreferenceTriple {
    pub fn new(prompt: Vec<Token>, chosen: Vec<Token>, rejected: Vec<Token>) -> Result<Self> {
        let t = Self {
            prompt,
            chosen,
            rejected,
        };
        t.check_shape()?;
        Ok(t)
    }

    fn check_shape(&self) -> Result<()> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::Input("prompt and responses must be non-empty".into()));
        }
        if self.chosen == self.rejected {
            return Err(Error::Input("chosen and rejected responses are identical".into()));
        }
        Ok(())
    }

    pub fn validate(&self, vocab: Vocabulary) -> Result<()> {
        self.check_shape()?;
        vocab.validate(&self.prompt)?;
        vocab.validate(&self.chosen)?;
        vocab.validate(&self.rejected)
    }

    /// Same prompt, responses exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Generated { seed: u64, config: String },
    File(PathBuf),
    Derived(String),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub triples: Vec<PreferenceTriple>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(triples: Vec<PreferenceTriple>, provenance: Provenance) -> Self {
        Self { triples, provenance }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&serde_json::to_string(t).expect("triples always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// One triple per line; blank lines are skipped. When `vocab` is given,
    /// every token is checked against it.
    pub fn load_jsonl(path: impl AsRef<Path>, vocab: Option<Vocabulary>) -> Result<Self> {
        let path = path.as_ref();
        let text = io::read_to_string(path)?;
        Self::parse_jsonl(&text, path, vocab)
    }

    pub fn parse_jsonl(text: &str, path: &Path, vocab: Option<Vocabulary>) -> Result<Self> {
        let mut triples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: PreferenceTriple = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let check = match vocab {
                Some(v) => t.validate(v),
                None => t.check_shape(),
            };
            check.map_err(|e| {
                Error::Input(format!(
                    "{}: triple {} (line {}): {e}",
                    path.display(),
                    triples.len(),
                    i + 1
                ))
            })?;
            triples.push(t);
        }
        Ok(Self::new(triples, Provenance::File(path.to_path_buf())))
    }

    /// Seeded shuffle, then the first `ceil(N (1 - f))` triples train and
    /// the rest are held out.
    pub fn split<R: Rng + ?Sized>(&self, holdout_fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
        if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
            return Err(Error::Input(format!(
                "holdout fraction must lie in (0, 1), got {holdout_fraction}"
            )));
        }
        let n = self.len();
        // The epsilon keeps e.g. 10 * 0.8 from rounding up to 9.
        let n_train = ((n as f64 * (1.0 - holdout_fraction)) - 1e-9).ceil().max(0.0) as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let pick = |ids: &[usize]| ids.iter().map(|&i| self.triples[i].clone()).collect();
        Ok((
            Dataset::new(pick(&idx[..n_train]), Provenance::Derived("train split".into())),
            Dataset::new(pick(&idx[n_train..]), Provenance::Derived("heldout split".into())),
        ))
    }
}

/// `P(y_w ≻ y_l) = e^{r_w} / (e^{r_w} + e^{r_l}) = σ(r_w - r_l)`.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    scalar::sigmoid(r_w - r_l)
}

/// Draw a Bradley-Terry label: `true` when the first response wins.
pub fn bt_label<R: Rng + ?Sized>(r_1: f64, r_2: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < bt_probability(r_1, r_2)
}

/// Position-aware linear reward `scale · Σ_t w[y_t, min(t, P-1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentReward {
    vocab: Vocabulary,
    positions: usize,
    scale: f64,
    weights: Vec<f64>,
}

pub const REWARD_POSITIONS: usize = 8;

impl LatentReward {
    /// Weights i.i.d. standard normal from `seed`.
    pub fn new(vocab: Vocabulary, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..vocab.size() * REWARD_POSITIONS)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            vocab,
            positions: REWARD_POSITIONS,
            scale,
            weights,
        }
    }

    pub fn from_weights(vocab: Vocabulary, positions: usize, scale: f64, weights: Vec<f64>) -> Result<Self> {
        if positions == 0 || weights.len() != vocab.size() * positions {
            return Err(Error::Input(format!(
                "reward table has {} weights, expected {} x {positions}",
                weights.len(),
                vocab.size()
            )));
        }
        Ok(Self {
            vocab,
            positions,
            scale,
            weights,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Unscaled score `Σ_t w[y_t, min(t, P-1)]`; it fixes the ranking even
    /// when `scale` is 0.
    pub fn raw(&self, _prompt: &[Token], response: &[Token]) -> f64 {
        response
            .iter()
            .enumerate()
            .map(|(t, &tok)| self.weights[tok as usize * self.positions + t.min(self.positions - 1)])
            .fold(0.0, |a, b| a + b)
    }

    pub fn reward(&self, prompt: &[Token], response: &[Token]) -> f64 {
        self.scale * self.raw(prompt, response)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{REWARD_MAGIC} vocab={} positions={} scale={}",
            self.vocab.size(),
            self.positions,
            io::fmt_f64(self.scale)
        );
        codec::encode_table(&header, &self.weights)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, weights) = codec::decode_table(bytes, path)?;
        let fields = codec::header_fields(&header, REWARD_MAGIC, path)?;
        let vocab = Vocabulary::new(codec::field(&fields, "vocab", path)?)?;
        let positions = codec::field(&fields, "positions", path)?;
        let scale = codec::field(&fields, "scale", path)?;
        Self::from_weights(vocab, positions, scale, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&io::read(path)?, path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Uniform { order: usize },
    Policy(Policy),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    pub vocab: Vocabulary,
    pub prompt_len: usize,
    pub min_response_len: usize,
    pub max_response_len: usize,
    pub reward_seed: u64,
    pub reward_scale: f64,
    pub generator: Generator,
    /// Pair draws per prompt before giving up on distinct responses.
    pub max_attempts: usize,
}

impl GenConfig {
    /// Defaults give a task an order-2 table can learn: the latent reward
    /// is position-dependent and the policy only sees the last two tokens,
    /// so long responses cap attainable accuracy near chance.
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            count: 2000,
            vocab,
            prompt_len: 1,
            min_response_len: 1,
            max_response_len: 2,
            reward_seed: 0,
            reward_scale: 3.0,
            generator: Generator::Uniform { order: 2 },
            max_attempts: 100,
        }
    }

    pub fn latent_reward(&self) -> LatentReward {
        LatentReward::new(self.vocab, self.reward_seed, self.reward_scale)
    }

    fn summary(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "count={} vocab={} prompt_len={} response_len={}..={} reward_seed={} reward_scale={}",
            self.count,
            self.vocab.size(),
            self.prompt_len,
            self.min_response_len,
            self.max_response_len,
            self.reward_seed,
            self.reward_scale
        );
        s
    }

    fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::config("prompt_len", "must be at least 1"));
        }
        if self.min_response_len == 0 || self.min_response_len > self.max_response_len {
            return Err(Error::config(
                "min_response_len",
                format!(
                    "need 1 <= min_response_len <= max_response_len, got {}..={}",
                    self.min_response_len, self.max_response_len
                ),
            ));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts", "must be at least 1"));
        }
        if let Generator::Policy(p) = &self.generator {
            if p.vocab() != self.vocab {
                return Err(Error::config("generator", "vocabulary mismatch"));
            }
        }
        Ok(())
    }
}

/// Prompts are uniform over non-EOS tokens; two distinct responses per
/// prompt come from the generator policy; the winner is drawn from the
/// Bradley-Terry model on the latent reward.
pub fn generate_synthetic(config: &GenConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform;
    let generator = match &config.generator {
        Generator::Policy(p) => p,
        Generator::Uniform { order } => {
            uniform = Policy::uniform(config.vocab, *order)?;
            &uniform
        }
    };
    let oracle = config.latent_reward();
    let prompt_tokens = config.vocab.eos();
    let mut triples = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let prompt: Vec<Token> = (0..config.prompt_len)
            .map(|_| rng.random_range(0..prompt_tokens))
            .collect();
        let mut draw = || -> Result<Option<Vec<Token>>> {
            let y = generator.sample(&prompt, config.max_response_len, &mut rng)?;
            Ok((y.len() >= config.min_response_len).then_some(y))
        };
        let mut pair = None;
        for _ in 0..config.max_attempts {
            if let (Some(a), Some(b)) = (draw()?, draw()?) {
                if a != b {
                    pair = Some((a, b));
                    break;
                }
            }
        }
        let (y1, y2) = pair.ok_or_else(|| {
            Error::Generation(format!(
                "prompt {i}: no distinct admissible response pair after {} attempts",
                config.max_attempts
            ))
        })?;
        let first_wins = bt_label(oracle.reward(&prompt, &y1), oracle.reward(&prompt, &y2), &mut rng);
        let (chosen, rejected) = if first_wins { (y1, y2) } else { (y2, y1) };
        triples.push(PreferenceTriple {
            prompt,
            chosen,
            rejected,
        });
    }
    Ok(Dataset::new(
        triples,
        Provenance::Generated {
            seed,
            config: config.summary(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: u32) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    #[test]
    fn bt_probability_values() {
        assert_eq!(bt_probability(1.3, 1.3), 0.5);
        assert!((bt_probability(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        let p = bt_probability(100.0, 0.0);
        assert!(p <= 1.0 && 1.0 - p < 1e-40);
        assert!(bt_probability(-700.0, 0.0) > 0.0);
    }

    #[test]
    fn bt_labels_follow_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        for (dr, p) in [(0.0, 0.5), (3f64.ln(), 0.75)] {
            let wins = (0..n).filter(|_| bt_label(dr, 0.0, &mut rng)).count();
            let freq = wins as f64 / n as f64;
            // 4 binomial standard deviations.
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() < 4.0 * sd, "dr={dr}: {freq}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig {
            count: 200,
            ..GenConfig::new(vocab(8))
        };
        let a = generate_synthetic(&cfg, 5).unwrap().to_jsonl();
        let b = generate_synthetic(&cfg, 5).unwrap().to_jsonl();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&cfg, 6).unwrap().to_jsonl());
    }

    #[test]
    fn generated_triples_are_valid() {
        let cfg = GenConfig {
            count: 300,
            ..GenConfig::new(vocab(8))
        };
        for t in generate_synthetic(&cfg, 1).unwrap().triples {
            t.validate(cfg.vocab).unwrap();
            assert!(t.chosen.len() <= cfg.max_response_len);
            assert!(t.prompt.iter().all(|&x| x != cfg.vocab.eos()));
        }
    }

    #[test]
    fn saturated_scale_always_prefers_higher_reward() {
        let cfg = GenConfig {
            count: 500,
            reward_scale: 1e6,
            ..GenConfig::new(vocab(8))
        };
        let oracle = cfg.latent_reward();
        for t in generate_synthetic(&cfg, 2).unwrap().triples {
            assert!(oracle.reward(&t.prompt, &t.chosen) > oracle.reward(&t.prompt, &t.rejected));
        }
    }

    #[test]
    fn zero_scale_labels_are_coin_flips() {
        let cfg = GenConfig {
            count: 2000,
            reward_scale: 0.0,
            ..GenConfig::new(vocab(8))
        };
        let oracle = cfg.latent_reward();
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let higher = ds
            .triples
            .iter()
            .filter(|t| oracle.raw(&t.prompt, &t.chosen) > oracle.raw(&t.prompt, &t.rejected))
            .count();
        let frac = higher as f64 / ds.len() as f64;
        assert!((frac - 0.5).abs() <= 0.03, "{frac}");
    }

    #[test]
    fn degenerate_generator_errors() {
        let v = vocab(3);
        let mut p = Policy::uniform(v, 0).unwrap();
        p.row_mut(0)[2] = 80.0; // always emits eos immediately
        let cfg = GenConfig {
            count: 3,
            generator: Generator::Policy(p),
            ..GenConfig::new(v)
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn jsonl_schema_line() {
        let ds = Dataset::parse_jsonl(
            r#"{"prompt":[0,1],"chosen":[2,3],"rejected":[2,4]}"#,
            Path::new("mem"),
            Some(vocab(5)),
        )
        .unwrap();
        assert_eq!(
            ds.triples,
            vec![PreferenceTriple::new(vec![0, 1], vec![2, 3], vec![2, 4]).unwrap()]
        );
        assert_eq!(
            ds.to_jsonl(),
            "{\"prompt\":[0,1],\"chosen\":[2,3],\"rejected\":[2,4]}\n"
        );
    }

    #[test]
    fn jsonl_errors_name_line_and_triple() {
        let text = "{\"prompt\":[0],\"chosen\":[1],\"rejected\":[2]}\n{\"prompt\":[0],\"chosen\":[1]\n";
        match Dataset::parse_jsonl(text, Path::new("d.jsonl"), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text =
            "{\"prompt\":[0],\"chosen\":[1],\"rejected\":[2]}\n{\"prompt\":[0],\"chosen\":[1],\"rejected\":[7]}\n";
        let err = Dataset::parse_jsonl(text, Path::new("d.jsonl"), Some(vocab(4))).unwrap_err();
        assert!(err.to_string().contains("triple 1"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = Dataset::parse_jsonl("", Path::new("e"), None).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn split_sizes_and_partition() {
        let cfg = GenConfig {
            count: 10,
            ..GenConfig::new(vocab(8))
        };
        let ds = generate_synthetic(&cfg, 0).unwrap();
        let (a, b) = ds.split(0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, b2) = ds.split(0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.triples, a2.triples);
        assert_eq!(b.triples, b2.triples);
        let mut all: Vec<_> = a
            .triples
            .iter()
            .chain(&b.triples)
            .map(|t| serde_json::to_string(t).unwrap())
            .collect();
        let mut orig: Vec<_> = ds.triples.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(ds.split(0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(ds.split(1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn reward_sidecar_round_trip() {
        let r = LatentReward::new(vocab(8), 42, 1.7);
        let back = LatentReward::from_bytes(&r.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, r);
        assert!(r.to_bytes().starts_with(b"prefopt-reward v1 "));
    }
}
