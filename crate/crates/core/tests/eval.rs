use prefopt::data::{generate_synthetic, GenConfig, LatentReward, PreferenceTriple};
use prefopt::eval::{
    evaluate, export_distributions, preference_accuracy, reward_margin, win_rate, EvalConfig, Histogram, RewardStyle,
    WinRateConfig,
};
use prefopt::exec::Execution;
use prefopt::objectives::Method;
use prefopt::policy::{Policy, Reference, Vocabulary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STYLES: [RewardStyle; 3] = [
    RewardStyle::RefRatio,
    RewardStyle::LengthNormalized,
    RewardStyle::Unnormalized,
];

fn setup(seed: u64) -> (Policy, Policy, Vec<PreferenceTriple>) {
    let v = Vocabulary::new(5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Policy::random(v, 2, 1.0, &mut rng).unwrap();
    let r = Policy::random(v, 2, 1.0, &mut rng).unwrap();
    let mut g = GenConfig::new(v);
    g.count = 60;
    g.max_response_len = 3;
    (p, r, generate_synthetic(&g, seed).unwrap().triples)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn accuracy_is_antisymmetric_under_swapping(seed in any::<u64>()) {
        let (p, r, d) = setup(seed);
        let swapped: Vec<_> = d.iter().map(|t| t.swapped()).collect();
        for s in STYLES {
            let a = preference_accuracy(s, &p, Some(Reference::Policy(&r)), &d, 2.0, Execution::Parallel).unwrap();
            let b = preference_accuracy(s, &p, Some(Reference::Policy(&r)), &swapped, 2.0, Execution::Parallel).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12, "{:?}: {} + {}", s, a, b);
            for t in &d {
                let m = reward_margin(s, &p, Some(Reference::Policy(&r)), t, 2.0).unwrap();
                let n = reward_margin(s, &p, Some(Reference::Policy(&r)), &t.swapped(), 2.0).unwrap();
                prop_assert_eq!(m, -n);
            }
        }
    }

    #[test]
    fn histograms_keep_every_sample(values in prop::collection::vec(-50.0f64..50.0, 1..200), bins in 2usize..40) {
        let h = Histogram::from_values(&values, bins).unwrap();
        prop_assert_eq!(h.total(), values.len());
        prop_assert_eq!(h.edges.len(), bins + 1);
        prop_assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
        for v in &values {
            prop_assert!(h.bin_of(*v).is_some());
        }
    }
}

#[test]
fn duplicated_and_swapped_set_scores_one_half() {
    let (p, r, d) = setup(3);
    let mut both = d.clone();
    both.extend(d.iter().map(|t| t.swapped()));
    for s in STYLES {
        let a = preference_accuracy(s, &p, Some(Reference::Policy(&r)), &both, 1.0, Execution::Sequential).unwrap();
        assert!((a - 0.5).abs() < 1e-12, "{s:?}: {a}");
    }
}

#[test]
fn uniform_policy_ties_under_length_free_rewards() {
    let v = Vocabulary::new(5).unwrap();
    let u = Policy::uniform(v, 2).unwrap();
    let (_, _, d) = setup(4);
    let a = preference_accuracy(RewardStyle::LengthNormalized, &u, None, &d, 2.5, Execution::Parallel).unwrap();
    assert_eq!(a, 0.5);
    let a = preference_accuracy(
        RewardStyle::RefRatio,
        &u,
        Some(Reference::Policy(&u)),
        &d,
        2.5,
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(a, 0.5);
}

#[test]
fn oracle_ranking_scores_one() {
    // A policy whose log-probabilities order every pair the same way as the
    // labels gets perfect accuracy.
    let v = Vocabulary::new(3).unwrap();
    let mut p = Policy::uniform(v, 0).unwrap();
    p.logits_mut()[0] = 2.0;
    let t = |w: u32, l: u32| PreferenceTriple::new(vec![1], vec![w], vec![l]).unwrap();
    // Tokens 1 and 2 share a logit, so the last pair is a tie.
    let d = [t(0, 1), t(0, 2), t(1, 2)];
    let a = preference_accuracy(RewardStyle::Unnormalized, &p, None, &d[..2], 1.0, Execution::Parallel).unwrap();
    assert_eq!(a, 1.0);
    let a = preference_accuracy(RewardStyle::Unnormalized, &p, None, &d[2..], 1.0, Execution::Parallel).unwrap();
    assert_eq!(a, 0.5);
}

#[test]
fn win_rate_against_itself_is_one_half() {
    let (p, _, d) = setup(5);
    let oracle = LatentReward::new(p.vocab(), 0, 3.0);
    let prompts: Vec<_> = d.iter().map(|t| t.prompt.clone()).collect();
    let cfg = WinRateConfig {
        samples_per_prompt: 4,
        max_len: 3,
        ..Default::default()
    };
    let w = win_rate(&p, &p, &oracle, &prompts, &cfg).unwrap();
    assert_eq!(w.rate, 0.5);
    assert_eq!(w.ties, w.n());
    assert_eq!(w.n(), 4 * prompts.len());
}

#[test]
fn win_rate_is_deterministic_and_exec_independent() {
    let (p, r, d) = setup(6);
    let oracle = LatentReward::new(p.vocab(), 1, 3.0);
    let prompts: Vec<_> = d.iter().map(|t| t.prompt.clone()).collect();
    let cfg = WinRateConfig {
        samples_per_prompt: 3,
        max_len: 3,
        seed: 9,
        exec: Execution::Parallel,
    };
    let a = win_rate(&p, &r, &oracle, &prompts, &cfg).unwrap();
    let b = win_rate(
        &p,
        &r,
        &oracle,
        &prompts,
        &WinRateConfig {
            exec: Execution::Sequential,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(a, b);
    let c = win_rate(&r, &p, &oracle, &prompts, &cfg).unwrap();
    assert_eq!(a.wins, c.losses);
    assert!((a.rate + c.rate - 1.0).abs() < 1e-12);
}

#[test]
fn evaluation_report_is_consistent() {
    let (p, r, d) = setup(7);
    let oracle = LatentReward::new(p.vocab(), 0, 3.0);
    for m in Method::ALL {
        let cfg = EvalConfig {
            method: m,
            bins: 10,
            ..Default::default()
        };
        let rep = evaluate(&p, Some(&r), &d, Some(&oracle), &cfg).unwrap();
        assert_eq!(rep.n, d.len());
        assert!(rep.kl_chosen_mean >= 0.0 && rep.kl_rejected_mean >= 0.0);
        assert_eq!(rep.distributions.reward_margin.total(), d.len());
        assert_eq!(rep.distributions.chosen_loglik.total(), d.len());
        assert_eq!(rep.distributions.ref_logratio.total(), d.len());
        let seq = evaluate(
            &p,
            Some(&r),
            &d,
            Some(&oracle),
            &EvalConfig {
                exec: Execution::Sequential,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(rep.to_kv(), seq.to_kv());
        assert!(rep.to_kv().contains("latent reward oracle"));
    }
}

#[test]
fn export_is_deterministic() {
    let (p, r, d) = setup(8);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for path in [&a, &b] {
        export_distributions(
            RewardStyle::LengthNormalized,
            &p,
            Reference::Policy(&r),
            &d,
            2.5,
            20,
            path,
        )
        .unwrap();
    }
    let ta = std::fs::read(&a).unwrap();
    assert_eq!(ta, std::fs::read(&b).unwrap());
    assert!(!ta.is_empty());
}

#[test]
fn ref_ratio_needs_a_reference() {
    let (p, _, d) = setup(9);
    let e = preference_accuracy(RewardStyle::RefRatio, &p, None, &d, 1.0, Execution::Parallel)
        .err()
        .unwrap();
    assert!(e.to_string().contains("reference_path"));
}
