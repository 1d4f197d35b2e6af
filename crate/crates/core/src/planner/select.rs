//! Action selection rules at a tree node. Each returns the index of the
//! chosen edge; ties go to the earliest action.

use crate::priors::PriorDistribution;
use crate::tree::NodeStats;

/// Prior-weighted upper confidence:
/// `Q(s,a) + c · π(a|s) · √N(s) / (1 + N(s,a))`.
///
/// Returns the edge index and whether that edge is still unvisited (the
/// caller then rolls out instead of descending).
pub fn select_action_mcdml(node: &NodeStats, prior: &PriorDistribution, c_puct: f64) -> (usize, bool) {
    debug_assert!(prior.matches(&node.actions().collect::<Vec<_>>()));
    let sqrt_n = (node.visit_count as f64).sqrt();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (e, p)) in node.edges.iter().zip(prior.probs()).enumerate() {
        let score = e.q_value + c_puct * p * sqrt_n / (1.0 + e.visit_count as f64);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    (best, node.edges[best].visit_count == 0)
}

/// The memory-free PUCT baseline. Same arithmetic as
/// [`select_action_mcdml`]; only the source of the prior differs.
pub fn select_action_static_puct(
    node: &NodeStats,
    static_prior: &PriorDistribution,
    c_puct: f64,
) -> (usize, bool) {
    select_action_mcdml(node, static_prior, c_puct)
}

/// `Q(s,a) + c · √(ln N(s) / N(s,a))`, with unvisited edges taken first.
pub fn select_action_uct(node: &NodeStats, c_uct: f64) -> (usize, bool) {
    if let Some(i) = node.edges.iter().position(|e| e.visit_count == 0) {
        return (i, true);
    }
    let ln_n = (node.visit_count as f64).ln();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, e) in node.edges.iter().enumerate() {
        let score = e.q_value + c_uct * (ln_n / e.visit_count as f64).sqrt();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    (best, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(qs: &[f64], ns: &[u64]) -> NodeStats {
        let names: Vec<String> = (0..qs.len()).map(|i| format!("a{i}")).collect();
        let mut n = NodeStats::new(&names);
        for (e, (&q, &c)) in n.edges.iter_mut().zip(qs.iter().zip(ns)) {
            e.q_value = q;
            e.visit_count = c;
        }
        n.visit_count = ns.iter().sum();
        n
    }

    fn prior(ps: &[f64]) -> PriorDistribution {
        let names: Vec<String> = (0..ps.len()).map(|i| format!("a{i}")).collect();
        PriorDistribution::from_weights(&names, ps).unwrap()
    }

    #[test]
    fn fresh_node_picks_first() {
        let n = node(&[0.0; 3], &[0; 3]);
        assert_eq!(select_action_mcdml(&n, &prior(&[0.1, 0.8, 0.1]), 50.0), (0, true));
    }

    #[test]
    fn bottleneck_exploration_example() {
        // Q and visit counts of the MC-DML row; N(s) = 350
        let qs = [4.41, 11.41, 9.31, 14.26, 0.00, -8.12, -1.42];
        let ps = [0.16, 0.13, 0.10, 0.22, 0.10, 0.08, 0.17];
        let mut n = node(&qs, &[13, 39, 26, 252, 11, 6, 3]);
        n.visit_count = 350;
        let p = PriorDistribution::from_weights(
            &(0..7).map(|i| format!("a{i}")).collect::<Vec<_>>(),
            &ps,
        )
        .unwrap();
        // the row is renormalized (it sums to 0.96); the winner is unchanged
        assert_eq!(select_action_mcdml(&n, &p, 50.0).0, 6);
        // unnormalized arithmetic as published: take lantern ≈ 15.07, turn on lantern ≈ 38.33
        let raw = |i: usize, c: u64| qs[i] + 50.0 * ps[i] * 350f64.sqrt() / (1.0 + c as f64);
        assert!((raw(3, 252) - 15.07).abs() < 0.01);
        assert!((raw(6, 3) - 38.33).abs() < 0.01);
    }

    #[test]
    fn uniform_prior_equal_q_prefers_least_visited() {
        let n = node(&[1.0; 4], &[3, 1, 1, 2]);
        assert_eq!(select_action_mcdml(&n, &prior(&[1.0; 4]), 5.0), (1, false));
        assert_eq!(
            select_action_static_puct(&n, &prior(&[1.0; 4]), 5.0),
            select_action_mcdml(&n, &prior(&[1.0; 4]), 5.0)
        );
    }

    #[test]
    fn uct_examples() {
        assert_eq!(select_action_uct(&node(&[0.5, 0.5], &[1, 2]), 1.0), (0, false));
        assert_eq!(select_action_uct(&node(&[9.0, 0.0, 0.0], &[5, 0, 0]), 1.0), (1, true));
        assert_eq!(select_action_uct(&node(&[1.0, 0.0], &[10, 10]), 0.0), (0, false));
    }
}
