use crate::autodiff::{finite_diff_check, CheckOptions, CheckReport, Node, Tape};
use crate::data::PreferenceTriple;
use crate::objectives::{batch_loss, LossConfig, LossContext, MarginStats, Method, ZScoreScope};
use crate::policy::{Policy, PolicyParams, Reference};

/// Finite-difference check of one objective with respect to every logit.
pub fn check_objective_gradient(
    policy: &Policy,
    reference: &Policy,
    batch: &[PreferenceTriple],
    cfg: &LossConfig,
    opts: &CheckOptions,
) -> CheckReport {
    let ctx = LossContext {
        margin_stats: (cfg.zscore_scope == ZScoreScope::Dataset).then_some(MarginStats { mean: 0.0, std: 1.0 }),
    };
    finite_diff_check(
        |tape: &Tape, leaves: &[Node<'_>]| {
            let params = PolicyParams::with_leaves(tape, policy, leaves);
            match batch_loss(&params, Some(Reference::Policy(reference)), batch, cfg, &ctx) {
                Ok(loss) => loss.value,
                Err(_) => tape.constant(f64::NAN),
            }
        },
        policy.logits(),
        opts,
    )
}

/// [`check_objective_gradient`] for every method, sharing `base` for the
/// hyperparameters.
pub fn verify_gradients(
    policy: &Policy,
    reference: &Policy,
    batch: &[PreferenceTriple],
    base: &LossConfig,
    opts: &CheckOptions,
) -> Vec<(Method, CheckReport)> {
    Method::ALL
        .into_iter()
        .map(|m| {
            let cfg = LossConfig {
                method: m,
                ..base.clone()
            };
            (m, check_objective_gradient(policy, reference, batch, &cfg, opts))
        })
        .collect()
}
