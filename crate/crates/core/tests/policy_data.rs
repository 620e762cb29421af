use std::collections::HashSet;

use prefopt::autodiff::Tape;
use prefopt::data::{
    bt_probability, generate_synthetic, Dataset, GenConfig, LatentReward, PreferenceTriple, Provenance,
};
use prefopt::policy::{fit_reference_traced, Policy, PolicyParams, SftConfig, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn policy(seed: u64, v: u32, order: usize, scale: f64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Policy::random(Vocabulary::new(v).unwrap(), order, scale, &mut rng).unwrap()
}

fn tokens(v: u32, max: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..v, 1..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn token_distribution_normalizes(seed in any::<u64>(), v in 2u32..10, order in 0usize..3, ctx in prop::collection::vec(0u32..2, 0..5)) {
        let p = policy(seed, v, order, 3.0);
        let lp = p.token_distribution(&ctx).unwrap();
        prop_assert_eq!(lp.len(), v as usize);
        prop_assert!(lp.iter().all(|x| x.is_finite()));
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn graph_log_prob_matches_value(seed in any::<u64>(), prompt in tokens(4, 3), y in tokens(4, 5)) {
        let p = policy(seed, 4, 2, 1.0);
        let tape = Tape::new();
        let params = PolicyParams::lazy(&tape, &p);
        let node = params.sequence_log_prob(&prompt, &y).unwrap();
        let direct = p.log_prob(&prompt, &y).unwrap();
        prop_assert!((node.value() - direct).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), v in 2u32..7, order in 0usize..3) {
        let p = policy(seed, v, order, 5.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        p.save(&path).unwrap();
        let q = Policy::load(&path).unwrap();
        prop_assert_eq!(&q, &p);
        let bits = |x: &Policy| x.logits().iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&q), bits(&p));
        prop_assert_eq!(std::fs::read(&path).unwrap(), p.to_checkpoint_bytes());
    }

    #[test]
    fn samples_are_valid(seed in any::<u64>(), max_len in 1usize..8) {
        let p = policy(seed, 5, 2, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = p.sample(&[0, 1], max_len, &mut rng).unwrap();
        prop_assert!(!y.is_empty() && y.len() <= max_len);
        prop_assert!(y.iter().all(|&t| t < 5));
        // End-of-sequence can only close a response.
        prop_assert!(y[..y.len() - 1].iter().all(|&t| t != 4));
    }

    #[test]
    fn jsonl_round_trip(triples in prop::collection::vec((tokens(6, 3), tokens(6, 4), tokens(6, 4)), 0..20)) {
        let triples: Vec<PreferenceTriple> = triples
            .into_iter()
            .filter(|(_, c, r)| c != r)
            .map(|(p, c, r)| PreferenceTriple::new(p, c, r).unwrap())
            .collect();
        let d = Dataset::new(triples, Provenance::Derived("test".into()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        d.save_jsonl(&path).unwrap();
        let back = Dataset::load_jsonl(&path, Some(Vocabulary::new(6).unwrap())).unwrap();
        prop_assert_eq!(back.triples, d.triples);
    }

    #[test]
    fn split_is_a_partition(n in 2usize..200, f in 0.05f64..0.95, seed in any::<u64>()) {
        let triples: Vec<PreferenceTriple> = (0..n)
            .map(|i| PreferenceTriple::new(vec![i as u32 % 7], vec![0, i as u32], vec![1]).unwrap())
            .collect();
        let d = Dataset::new(triples.clone(), Provenance::Derived("t".into()));
        let (a, b) = d.split(f, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert_eq!(a.len(), ((n as f64 * (1.0 - f)) - 1e-9).ceil() as usize);
        let mut all: Vec<_> = a.triples.iter().chain(&b.triples).cloned().collect();
        let mut orig = triples;
        let key = |t: &PreferenceTriple| (t.prompt.clone(), t.chosen.clone());
        all.sort_by_key(key);
        orig.sort_by_key(key);
        prop_assert_eq!(all, orig);
        let (a2, _) = d.split(f, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a2.triples, a.triples);
    }

    #[test]
    fn bt_probability_is_antisymmetric(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let p = bt_probability(a, b);
        prop_assert!(p > 0.0 && p < 1.0 || (a - b).abs() > 30.0);
        prop_assert!((p + bt_probability(b, a) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn split_example_sizes() {
    let triples: Vec<PreferenceTriple> = (0..10)
        .map(|i| PreferenceTriple::new(vec![0], vec![i], vec![10]).unwrap())
        .collect();
    let d = Dataset::new(triples, Provenance::Derived("t".into()));
    let (a, b) = d.split(0.2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!((a.len(), b.len()), (8, 2));
    assert!(d.split(0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(d.split(1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn generation_is_deterministic_and_valid() {
    let v = Vocabulary::new(8).unwrap();
    let g = GenConfig::new(v);
    let a = generate_synthetic(&g, 7).unwrap();
    let b = generate_synthetic(&g, 7).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_eq!(a.len(), 2000);
    for t in &a.triples {
        t.validate(v).unwrap();
        assert_ne!(t.chosen, t.rejected);
        assert!((g.min_response_len..=g.max_response_len).contains(&t.chosen.len()));
    }
    assert_ne!(a.to_jsonl(), generate_synthetic(&g, 8).unwrap().to_jsonl());
}

#[test]
fn saturated_scale_always_prefers_higher_reward() {
    let v = Vocabulary::new(8).unwrap();
    let g = GenConfig {
        reward_scale: 1e6,
        count: 500,
        max_response_len: 4,
        ..GenConfig::new(v)
    };
    let o = g.latent_reward();
    let d = generate_synthetic(&g, 3).unwrap();
    for t in &d.triples {
        let (w, l) = (o.reward(&t.prompt, &t.chosen), o.reward(&t.prompt, &t.rejected));
        // Distinct responses can share a reward exactly; only strict order is informative.
        assert!(w >= l, "{w} < {l}");
    }
}

#[test]
fn zero_scale_labels_are_coin_flips() {
    let v = Vocabulary::new(8).unwrap();
    let g = GenConfig {
        reward_scale: 0.0,
        max_response_len: 4,
        ..GenConfig::new(v)
    };
    // Judge with a nonzero-scale reward sharing the same weights.
    let judge = LatentReward::new(v, g.reward_seed, 1.0);
    let d = generate_synthetic(&g, 11).unwrap();
    let strict: Vec<f64> = d
        .triples
        .iter()
        .filter_map(|t| {
            let (w, l) = (judge.reward(&t.prompt, &t.chosen), judge.reward(&t.prompt, &t.rejected));
            (w != l).then_some(if w > l { 1.0 } else { 0.0 })
        })
        .collect();
    let frac = strict.iter().sum::<f64>() / strict.len() as f64;
    assert!(strict.len() > 1500);
    assert!((frac - 0.5).abs() < 0.03, "{frac}");
}

#[test]
fn labels_follow_bradley_terry() {
    // Draw many pairs at a fixed reward gap of ln 3 and compare the
    // empirical win rate of the higher-reward item with 0.75.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20_000;
    let wins = (0..n)
        .filter(|_| prefopt::data::bt_label(3f64.ln(), 0.0, &mut rng))
        .count();
    let p = wins as f64 / n as f64;
    let se = (0.75f64 * 0.25 / n as f64).sqrt();
    assert!((p - 0.75).abs() < 4.0 * se, "{p}");
    let even = (0..n).filter(|_| prefopt::data::bt_label(0.2, 0.2, &mut rng)).count();
    assert!(((even as f64 / n as f64) - 0.5).abs() < 4.0 * (0.25f64 / n as f64).sqrt());
}

#[test]
fn generated_label_frequency_matches_sigmoid() {
    let v = Vocabulary::new(4).unwrap();
    let g = GenConfig {
        count: 4000,
        reward_scale: 1.0,
        max_response_len: 2,
        ..GenConfig::new(v)
    };
    let o = g.latent_reward();
    let d = generate_synthetic(&g, 21).unwrap();
    // Expected wins of the first-listed response in each unordered pair
    // against the observed outcome.
    let (mut expected, mut observed) = (0.0, 0.0);
    for t in &d.triples {
        let (a, b) = if t.chosen < t.rejected {
            (&t.chosen, &t.rejected)
        } else {
            (&t.rejected, &t.chosen)
        };
        expected += bt_probability(o.reward(&t.prompt, a), o.reward(&t.prompt, b));
        observed += if a == &t.chosen { 1.0 } else { 0.0 };
    }
    let n = d.len() as f64;
    assert!(
        ((observed - expected) / n).abs() < 4.0 * (0.25 / n).sqrt(),
        "{observed} vs {expected}"
    );
}

#[test]
fn reward_sidecar_round_trip() {
    let o = LatentReward::new(Vocabulary::new(6).unwrap(), 9, 2.5);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.reward");
    o.save(&p).unwrap();
    let back = LatentReward::load(&p).unwrap();
    assert_eq!(back.weights(), o.weights());
    assert_eq!(back.scale(), o.scale());
}

#[test]
fn jsonl_errors_carry_line_numbers() {
    let text = "{\"prompt\":[0],\"chosen\":[1],\"rejected\":[2]}\n{\"prompt\":[0],\"chosen\":[1]\n";
    let e = Dataset::parse_jsonl(text, std::path::Path::new("x.jsonl"), None).unwrap_err();
    assert!(matches!(e, prefopt::Error::Parse { line: 2, .. }), "{e}");
    let bad_token = "{\"prompt\":[0],\"chosen\":[1],\"rejected\":[9]}\n";
    assert!(Dataset::parse_jsonl(bad_token, std::path::Path::new("x"), Some(Vocabulary::new(4).unwrap())).is_err());
    assert!(Dataset::parse_jsonl("", std::path::Path::new("x"), None)
        .unwrap()
        .is_empty());
}

#[test]
fn sft_raises_chosen_likelihood() {
    let v = Vocabulary::new(5).unwrap();
    let g = GenConfig {
        count: 300,
        ..GenConfig::new(v)
    };
    let d = generate_synthetic(&g, 1).unwrap();
    let cfg = SftConfig {
        steps: 100,
        ..SftConfig::new(v, 2)
    };
    let (p, trace) = fit_reference_traced(&d.triples, &cfg).unwrap();
    let first = trace.checkpoints.first().unwrap().1;
    let last = trace.checkpoints.last().unwrap().1;
    assert!(last < first, "{first} -> {last}");
    let u = Policy::uniform(v, 2).unwrap();
    let nll = |q: &Policy| -> f64 {
        d.triples
            .iter()
            .map(|t| -q.log_prob(&t.prompt, &t.chosen).unwrap())
            .sum()
    };
    assert!(nll(&p) < nll(&u));
}

#[test]
fn distinct_contexts_index_distinct_rows() {
    let p = policy(0, 4, 2, 1.0);
    let mut seen = HashSet::new();
    for a in 0..4u32 {
        for b in 0..4u32 {
            assert!(seen.insert(p.context_index(&[a, b])));
        }
    }
    assert_eq!(seen.len(), p.num_contexts());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let long: Vec<u32> = (0..10).map(|_| rng.random_range(0..4)).collect();
    assert_eq!(p.context_index(&long), p.context_index(&long[8..]));
}
