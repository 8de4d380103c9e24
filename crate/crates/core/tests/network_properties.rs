use gradtrack::network::{
    build_graph, gossip_expected_matrix, gossip_probabilities, metropolis_weights, validate_mixing, Graph,
    MixingMatrix, Topology, STOCHASTIC_TOL,
};
use gradtrack::rng::{Stream, StreamKey};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn topology() -> impl Strategy<Value = (Topology, usize)> {
    prop_oneof![
        (3usize..30).prop_map(|n| (Topology::Ring, n)),
        (2usize..30).prop_map(|n| (Topology::Path, n)),
        (2usize..20).prop_map(|n| (Topology::Complete, n)),
        (2usize..6, 2usize..6).prop_map(|(r, c)| (Topology::Lattice { rows: r, cols: c }, r * c)),
        (0.25f64..0.9, any::<u64>(), 3usize..30).prop_map(|(prob, seed, n)| (Topology::ErdosRenyi { prob, seed }, n)),
    ]
}

/// Breadth-first connectivity, written independently of the library.
fn connected(g: &Graph) -> bool {
    let n = g.n();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && g.has_edge(i, j) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn deflated_residual(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = x.row_sum() / n as f64;
    DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j])
}

/// Second largest eigenvalue of the symmetric part of `pi`.
fn lambda2_sym(pi: &DMatrix<f64>) -> f64 {
    let sym = (pi + pi.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev[1]
}

fn residuals(m: &MixingMatrix) -> (f64, f64) {
    let e = m.entries();
    let rows = e.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let cols = e.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
    (rows, cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_graphs_are_connected((t, n) in topology()) {
        let g = build_graph(t, n).unwrap();
        prop_assert!(connected(&g));
        prop_assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.edge_count());
    }

    #[test]
    fn consensus_weights_contract((t, n) in topology(), lazy in any::<bool>(), seed in any::<u64>()) {
        let g = build_graph(t, n).unwrap();
        let Ok(w) = metropolis_weights(&g, lazy) else {
            // Only plain weights on bipartite regular graphs can fail to contract.
            prop_assert!(!lazy);
            return Ok(());
        };
        let diag = validate_mixing(&w, &g);
        prop_assert!(diag.passed, "{}", diag);
        let rho = w.spectral_gap_norm();
        let mut rng = Stream::new(StreamKey::new(seed, 0, 0));
        for _ in 0..100 {
            let omega = DMatrix::from_fn(n, 3, |_, _| rng.uniform_in(-10.0, 10.0));
            let lhs = deflated_residual(&(w.entries() * &omega)).norm();
            let rhs = rho * deflated_residual(&omega).norm();
            prop_assert!(lhs <= rhs * (1.0 + 1e-10) + 1e-12, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn matrices_are_doubly_stochastic_and_sparse((t, n) in topology(), lazy in any::<bool>()) {
        let g = build_graph(t, n).unwrap();
        let pi = gossip_probabilities(&g, lazy).unwrap();
        let wbar = gossip_expected_matrix(&pi).unwrap();
        for m in [&pi, &wbar] {
            let (r, c) = residuals(m);
            prop_assert!(r <= STOCHASTIC_TOL && c <= STOCHASTIC_TOL);
            prop_assert!(m.entries().iter().all(|&v| v >= 0.0));
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && pi.get(i, j) > 0.0 {
                    prop_assert!(g.has_edge(i, j), "({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn expected_gossip_range_and_identity((t, n) in topology(), lazy in any::<bool>()) {
        let g = build_graph(t, n).unwrap();
        let pi = gossip_probabilities(&g, lazy).unwrap();
        let wbar = gossip_expected_matrix(&pi).unwrap();
        let rho = wbar.spectral_gap_norm();
        let nf = n as f64;
        prop_assert!(rho >= 1.0 - 2.0 / nf - 1e-12 && rho <= 1.0 - 1e-12, "rho = {rho}");
        let predicted = 1.0 - 1.0 / nf + lambda2_sym(pi.entries()) / nf;
        prop_assert!((rho - predicted).abs() <= 1e-12, "{rho} vs {predicted}");
    }
}

#[test]
fn lazy_ring_weights_against_closed_form() {
    // Lazy Metropolis on a ring puts 1/4 on each neighbour; the deflated
    // spectrum is (1 + cos(2πk/n))/2, k = 1..n−1.
    for n in [5usize, 8, 13] {
        let g = build_graph(Topology::Ring, n).unwrap();
        let w = metropolis_weights(&g, true).unwrap();
        let expected = (1..n)
            .map(|k| (0.5 + 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos()).abs())
            .fold(0.0, f64::max);
        assert!((w.spectral_gap_norm() - expected).abs() < 1e-12, "n = {n}");
    }
}
