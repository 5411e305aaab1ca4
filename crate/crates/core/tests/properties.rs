use proptest::prelude::*;

use rankpeer::equilibrium::{solve_fixed_point, solve_fixed_point_traced, SolverOptions};
use rankpeer::estimator::build_instruments_ordered_covariates;
use rankpeer::graph::{trim_degrees, trim_degrees_undirected, Network};
use rankpeer::model::{build_restriction, ordered_peer_outcomes, peer_effect, PeerCoefficients, RestrictionKind, TieRule};

/// Network on `n` nodes with at most `dbar` out-links each.
fn capped_network(max_n: usize, max_dbar: usize) -> impl Strategy<Value = (Network, usize)> {
    (2..=max_n, 1..=max_dbar).prop_flat_map(|(n, dbar)| {
        let dbar = dbar.min(n - 1);
        proptest::collection::vec(proptest::collection::btree_set(0..n - 1, 0..=dbar), n).prop_map(move |rows| {
            // Skip-self encoding: peer index p >= i maps to p + 1.
            let edges = rows
                .iter()
                .enumerate()
                .flat_map(|(i, set)| set.iter().map(move |&p| (i, if p >= i { p + 1 } else { p })))
                .collect::<Vec<_>>();
            (Network::from_edges(n, edges).expect("valid"), dbar)
        })
    })
}

/// Coefficients with every degree block's absolute sum below `bound`.
fn bounded_coeffs(dbar: usize, bound: f64) -> impl Strategy<Value = PeerCoefficients> {
    (
        proptest::collection::vec(-1.0..1.0f64, dbar * (dbar + 1) / 2),
        proptest::collection::vec(0.0..bound, dbar),
    )
        .prop_map(move |(raw, sums)| {
            let mut beta = raw;
            let mut at = 0;
            for (d, s) in (1..=dbar).zip(sums) {
                let block = &mut beta[at..at + d];
                let total: f64 = block.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
                block.iter_mut().for_each(|v| *v *= s / total);
                at += d;
            }
            PeerCoefficients::new(dbar, beta, vec![]).expect("layout")
        })
}

fn instance() -> impl Strategy<Value = (Network, PeerCoefficients, Vec<f64>)> {
    capped_network(9, 3).prop_flat_map(|(net, dbar)| {
        let n = net.n();
        (Just(net), bounded_coeffs(dbar, 0.95), proptest::collection::vec(-3.0..3.0f64, n))
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn equilibrium_satisfies_its_own_equation((net, coeffs, b) in instance()) {
        let tie = TieRule::default();
        let sol = solve_fixed_point(&net, &coeffs, &b, tie, &SolverOptions::default()).unwrap();
        for i in 0..net.n() {
            let ordered = ordered_peer_outcomes(&net, &sol.y, i, tie);
            let rhs = b[i] + peer_effect(&coeffs, &ordered).unwrap();
            prop_assert!((sol.y[i] - rhs).abs() < 1e-9);
        }
        prop_assert!(sol.pi.is_consistent_with(&sol.y, tie));
    }

    #[test]
    fn iterates_contract_at_the_coefficient_bound((net, coeffs, b) in instance()) {
        let tie = TieRule::default();
        let exact = solve_fixed_point(&net, &coeffs, &b, tie, &SolverOptions::default()).unwrap().y;
        let opts = SolverOptions { tol: Some(1e-13), ..Default::default() };
        let (_, trace) = solve_fixed_point_traced(&net, &coeffs, &b, tie, &opts).unwrap();
        let bbar = coeffs.check_bounded().beta_bar;
        let scale = 1.0 + exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = |y: &Vec<f64>| y.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for w in trace.windows(2) {
            // Additive slack covers rounding in both the iterate and the polished solution.
            prop_assert!(err(&w[1]) <= bbar * err(&w[0]) + 1e-13 * scale);
        }
    }

    #[test]
    fn relabeling_nodes_permutes_the_equilibrium(
        (net, coeffs, b, perm) in instance().prop_flat_map(|(net, c, b)| {
            let n = net.n();
            (Just(net), Just(c), Just(b), permutation(n))
        })
    ) {
        let tie = TieRule::default();
        let y = solve_fixed_point(&net, &coeffs, &b, tie, &SolverOptions::default()).unwrap().y;
        let moved = net.relabel(&perm).unwrap();
        let mut b2 = vec![0.0; b.len()];
        for (i, &p) in perm.iter().enumerate() {
            b2[p] = b[i];
        }
        let y2 = solve_fixed_point(&moved, &coeffs, &b2, tie, &SolverOptions::default()).unwrap().y;
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((y2[p] - y[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn ordered_instruments_follow_relabeling(
        (net, dbar, src, perm) in capped_network(9, 3).prop_flat_map(|(net, dbar)| {
            let n = net.n();
            (Just(net), Just(dbar), proptest::collection::vec(-3.0..3.0f64, n), permutation(n))
        })
    ) {
        let tie = TieRule::default();
        let z = build_instruments_ordered_covariates(&net, &src, tie, dbar).unwrap();
        let moved = net.relabel(&perm).unwrap();
        let mut src2 = vec![0.0; src.len()];
        for (i, &p) in perm.iter().enumerate() {
            src2[p] = src[i];
        }
        let z2 = build_instruments_ordered_covariates(&moved, &src2, tie, dbar).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(z.row(i), z2.row(p));
        }
    }

    #[test]
    fn trimming_only_removes_links_of_overfull_nodes(
        (net, cap, seed) in capped_network(12, 8).prop_flat_map(|(net, _)| (Just(net), 0..5usize, any::<u64>()))
    ) {
        let trimmed = trim_degrees(&net, cap, seed);
        for i in 0..net.n() {
            prop_assert!(trimmed.degree(i) <= cap);
            prop_assert!(trimmed.peers(i).iter().all(|&j| net.has_edge(i, j)));
            if net.degree(i) <= cap {
                prop_assert_eq!(trimmed.peers(i), net.peers(i));
            } else {
                prop_assert_eq!(trimmed.degree(i), cap);
            }
        }
        prop_assert_eq!(trim_degrees(&net, cap, seed), trimmed);
    }

    #[test]
    fn undirected_trimming_keeps_symmetry(
        (net, cap, seed) in capped_network(12, 8).prop_flat_map(|(net, _)| (Just(net), 0..5usize, any::<u64>()))
    ) {
        let a = net.adjacency_matrix();
        let sym = Network::from_adjacency(&(&a + a.transpose()).map(|v| v.min(1.0))).unwrap();
        let trimmed = trim_degrees_undirected(&sym, cap, seed);
        prop_assert!(trimmed.is_symmetric());
        prop_assert!(trimmed.max_degree() <= cap);
        prop_assert!(trimmed.edges().all(|(i, j)| sym.has_edge(i, j)));
    }

    #[test]
    fn restriction_projection_inverts_expansion(
        kind in prop::sample::select(vec![
            RestrictionKind::Lim,
            RestrictionKind::Lis,
            RestrictionKind::MinmaxSplit,
            RestrictionKind::RestrictedMaxsplit,
            RestrictionKind::RestrictedMaxsplitOverD,
            RestrictionKind::MinMaxMid,
        ]),
        dbar in 3..6usize,
        theta in proptest::collection::vec(-1.0..1.0f64, 4),
    ) {
        let r = build_restriction(kind, dbar).unwrap();
        let theta = &theta[..r.n_params()];
        let (back, misfit) = r.project(&r.expand(theta), |_| true);
        prop_assert!(misfit < 1e-10);
        for (a, b) in back.iter().zip(theta) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn relabel_round_trip_restores_adjacency() {
    let net = Network::from_edges(4, [(0, 1), (1, 2), (3, 0)]).unwrap();
    let perm = [2, 0, 3, 1];
    let mut inverse = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let back = net.relabel(&perm).unwrap().relabel(&inverse).unwrap();
    assert_eq!(back.adjacency_matrix(), net.adjacency_matrix());
}
