use std::cell::RefCell;
use std::rc::Rc;

use super::{check_pair, Policy, Token};
use crate::autodiff::{Node, ParamId, Tape};
use crate::Result;

/// A [`Policy`] whose logits live on a [`Tape`].
///
/// Leaf ids are flat logit indices (`ctx * |V| + token`), matching
/// [`Policy::logits`]. In lazy mode only rows that are actually visited get
/// registered, so a gradient map from a small batch stays small.
pub struct PolicyParams<'t, 'p> {
    tape: &'t Tape,
    policy: &'p Policy,
    leaves: Option<&'p [Node<'t>]>,
    rows: RefCell<Vec<Option<Rc<[Node<'t>]>>>>,
}

impl<'t, 'p> PolicyParams<'t, 'p> {
    pub fn lazy(tape: &'t Tape, policy: &'p Policy) -> Self {
        Self {
            tape,
            policy,
            leaves: None,
            rows: RefCell::new(vec![None; policy.num_contexts()]),
        }
    }

    /// Use caller-registered leaves (one per logit, in table order); the
    /// policy only supplies the shape.
    pub fn with_leaves(tape: &'t Tape, policy: &'p Policy, leaves: &'p [Node<'t>]) -> Self {
        assert_eq!(
            leaves.len(),
            policy.num_params(),
            "leaf count must match the logit table"
        );
        Self {
            tape,
            policy,
            leaves: Some(leaves),
            rows: RefCell::new(vec![None; policy.num_contexts()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn policy(&self) -> &'p Policy {
        self.policy
    }

    /// Log-softmax nodes for context row `ctx`.
    pub fn row_log_probs(&self, ctx: usize) -> Rc<[Node<'t>]> {
        if let Some(r) = &self.rows.borrow()[ctx] {
            return r.clone();
        }
        let v = self.policy.vocab().size();
        let logits: Vec<Node<'t>> = match self.leaves {
            Some(leaves) => leaves[ctx * v..(ctx + 1) * v].to_vec(),
            None => self
                .policy
                .row(ctx)
                .iter()
                .enumerate()
                .map(|(k, &l)| self.tape.param(ParamId(ctx * v + k), l))
                .collect(),
        };
        let lse = self.tape.log_sum_exp(&logits);
        let row: Rc<[Node<'t>]> = logits.iter().map(|&l| l - lse).collect();
        self.rows.borrow_mut()[ctx] = Some(row.clone());
        row
    }

    /// Next-token log-probability rows along `response`.
    pub fn step_log_probs(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<Rc<[Node<'t>]>>> {
        check_pair(self.policy.vocab(), prompt, response)?;
        let mut history = prompt.to_vec();
        let mut out = Vec::with_capacity(response.len());
        for &tok in response {
            out.push(self.row_log_probs(self.policy.context_index(&history)));
            history.push(tok);
        }
        Ok(out)
    }

    /// Differentiable `Σ_t log π(y_t | x, y_<t)`.
    pub fn sequence_log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<Node<'t>> {
        let rows = self.step_log_probs(prompt, response)?;
        let terms: Vec<Node<'t>> = rows.iter().zip(response).map(|(row, &tok)| row[tok as usize]).collect();
        Ok(self.tape.sum(&terms))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, CheckOptions};
    use crate::policy::Vocabulary;

    fn random_policy(seed: u64) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Policy::random(Vocabulary::new(5).unwrap(), 2, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn graph_matches_value_path() {
        let p = random_policy(3);
        let tape = Tape::new();
        let pp = PolicyParams::lazy(&tape, &p);
        let node = pp.sequence_log_prob(&[1, 0], &[2, 3, 4]).unwrap();
        let v = p.log_prob(&[1, 0], &[2, 3, 4]).unwrap();
        assert!((node.value() - v).abs() < 1e-12);
        assert!(node.value() <= 0.0);
    }

    #[test]
    fn lazy_registration_only_touches_visited_rows() {
        let p = random_policy(4);
        let tape = Tape::new();
        let pp = PolicyParams::lazy(&tape, &p);
        let lp = pp.sequence_log_prob(&[1], &[2]).unwrap();
        let g = lp.backward().unwrap();
        // One row of 5 logits; softmax gradients sum to zero.
        assert_eq!(g.len(), 5);
        let s: f64 = g.iter().map(|(_, d)| d).sum();
        assert!(s.abs() < 1e-14);
    }

    #[test]
    fn sequence_log_prob_passes_finite_differences() {
        for seed in 0..4 {
            let p = random_policy(seed);
            let report = finite_diff_check(
                |tape, leaves| {
                    let pp = PolicyParams::with_leaves(tape, &p, leaves);
                    pp.sequence_log_prob(&[0, 1], &[3, 2, 2, 4]).unwrap()
                },
                p.logits(),
                &CheckOptions::default(),
            );
            assert!(report.passed(), "seed {seed}: {:?}", report.failure);
        }
    }
}
