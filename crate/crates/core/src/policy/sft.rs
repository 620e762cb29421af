//! Maximum-likelihood fit of a reference policy on chosen responses.

use super::{PolicyParams, Vocabulary};
use crate::autodiff::Tape;
use crate::data::PreferenceTriple;
use crate::exec::{self, Execution};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::policy::Policy;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SftConfig {
    pub vocab: Vocabulary,
    pub order: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam: AdamHyper,
    /// Mean NLL is recorded every `eval_every` steps.
    pub eval_every: usize,
    pub exec: Execution,
}

impl SftConfig {
    pub fn new(vocab: Vocabulary, order: usize) -> Self {
        Self {
            vocab,
            order,
            steps: 300,
            learning_rate: 0.05,
            adam: AdamHyper::default(),
            eval_every: 50,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SftTrace {
    /// `(step, mean NLL)` starting with step 0.
    pub checkpoints: Vec<(usize, f64)>,
}

pub fn fit_reference(dataset: &[PreferenceTriple], config: &SftConfig) -> Result<Policy> {
    fit_reference_traced(dataset, config).map(|(p, _)| p)
}

/// Full-batch Adam on `mean_i -log π(y_w,i | x_i)`, starting from the
/// uniform policy. Per-example graphs are built in parallel and reduced in
/// dataset order.
pub fn fit_reference_traced(dataset: &[PreferenceTriple], config: &SftConfig) -> Result<(Policy, SftTrace)> {
    if dataset.is_empty() {
        return Err(Error::Input("reference fit needs a non-empty dataset".into()));
    }
    let mut policy = Policy::uniform(config.vocab, config.order)?;
    let n = policy.num_params();
    let mut state = AdamState::new(n);
    let mut trace = SftTrace {
        checkpoints: Vec::new(),
    };
    let every = config.eval_every.max(1);
    for step in 0..=config.steps {
        let per_example = exec::try_map(config.exec, dataset, |t| {
            let tape = Tape::new();
            let pp = PolicyParams::lazy(&tape, &policy);
            let lp = pp.sequence_log_prob(&t.prompt, &t.chosen)?;
            let g = lp.backward()?;
            Ok::<_, Error>((-lp.value(), g))
        })?;
        let scale = 1.0 / dataset.len() as f64;
        let nll = exec::ordered_sum(per_example.iter().map(|(v, _)| *v)) * scale;
        if step % every == 0 || step == config.steps {
            trace.checkpoints.push((step, nll));
        }
        if step == config.steps {
            break;
        }
        let mut grad = vec![0.0; n];
        for (_, g) in &per_example {
            g.accumulate_into(&mut grad, -scale);
        }
        adam_step(
            policy.logits_mut(),
            &grad,
            &mut state,
            &config.adam,
            config.learning_rate,
            step,
        )?;
    }
    Ok((policy, trace))
}
