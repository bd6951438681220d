//! Randomized invariants over the numeric core: spectra, filters, attention
//! maps, the simplex projection, and the synthetic generator. Each property
//! draws fresh instances through proptest and checks a contract the rest of
//! the crate leans on.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use feta::attention::{scaled_dot_attention, AttentionConfig, PeMode};
use feta::cheb::{
    apply_filter, cheb_eval, fit_chebyshev_lsq, frequency_response, response_grid,
    FilterCoefficients,
};
use feta::coeffs::attention_to_laplacian;
use feta::graph::{
    build_laplacian, eigendecompose, eigendecompose_symmetric, rescale_spectrum, Graph,
    LaplacianKind,
};
use feta::model::pole_squash;
use feta::synthetic::{assign_spectral_signals, derive_stream, generate_sbm, SBMConfig};
use feta::tensor::Tensor;
use feta::verifier::project_rows_to_simplex;

// ---------------------------------------------------------------------------
// instance builders

/// Spanning tree plus Bernoulli extra edges: always connected, never a
/// multigraph.
fn random_connected(n: usize, seed: u64, extra: f64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.gen_range(0..v), v)).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if !edges.contains(&(i, j)) && rng.gen_bool(extra) {
                edges.push((i, j));
            }
        }
    }
    Graph::from_pairs(n, &edges).unwrap()
}

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

fn row_stochastic(n: usize, seed: u64) -> Tensor {
    random_tensor(&[n, n], seed, 2.0).softmax_rows()
}

proptest! {
    // -----------------------------------------------------------------------
    // spectra

    #[test]
    fn eigendecomposition_reconstructs_and_orthonormalizes(n in 3usize..10, seed in any::<u64>()) {
        let g = random_connected(n, seed, 0.35);
        let lap = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let basis = eigendecompose(&lap).unwrap();

        let gram = basis.u.transpose().matmul(&basis.u);
        let recon = {
            let mut ul = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for k in 0..n {
                    ul.set(i, k, basis.u.at(i, k) * basis.lambda[k]);
                }
            }
            ul.matmul(&basis.u.transpose())
        };
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram.at(i, j) - id).abs() < 1e-8);
                prop_assert!((recon.at(i, j) - lap.l.at(i, j)).abs() < 1e-8);
            }
        }
        for w in basis.lambda.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
        prop_assert!(basis.lambda[0].abs() < 1e-8);
        prop_assert!(*basis.lambda.last().unwrap() <= 2.0 + 1e-9);
    }

    #[test]
    fn rescaled_operator_spectrum_fills_minus_one_to_one(n in 3usize..10, seed in any::<u64>()) {
        let g = random_connected(n, seed, 0.35);
        let lap = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let basis = eigendecompose(&lap).unwrap();
        let lt = rescale_spectrum(&lap, basis.lambda_max).unwrap();
        let rescaled = eigendecompose_symmetric(&lt).unwrap();
        for &lam in &rescaled.lambda {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&lam));
        }
        prop_assert!((rescaled.lambda.last().unwrap() - 1.0).abs() < 1e-8);
    }

    // -----------------------------------------------------------------------
    // filters

    #[test]
    fn all_pass_coefficients_leave_the_signal_untouched(
        n in 3usize..9,
        order in 0usize..5,
        seed in any::<u64>(),
    ) {
        let g = random_connected(n, seed, 0.3);
        let lap = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let basis = eigendecompose(&lap).unwrap();
        let lt = rescale_spectrum(&lap, basis.lambda_max).unwrap();
        let x = random_tensor(&[n, 2], seed ^ 0x5a, 1.5);
        let mut alpha = vec![0.0; order + 1];
        alpha[0] = 1.0;
        let y = apply_filter(&FilterCoefficients::new(alpha).unwrap(), &lt, &x).unwrap();
        prop_assert_eq!(y.data, x.data);
    }

    #[test]
    fn frequency_response_is_linear_in_coefficients(
        order in 0usize..6,
        seed in any::<u64>(),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let alpha = random_tensor(&[1, order + 1], seed, 1.5).data;
        let beta = random_tensor(&[1, order + 1], seed ^ 0x77, 1.5).data;
        let combo: Vec<f64> = alpha.iter().zip(&beta).map(|(&x, &y)| a * x + b * y).collect();
        let grid = response_grid();
        let ra = frequency_response(&FilterCoefficients::new(alpha).unwrap(), &grid).unwrap();
        let rb = frequency_response(&FilterCoefficients::new(beta).unwrap(), &grid).unwrap();
        let rc = frequency_response(&FilterCoefficients::new(combo).unwrap(), &grid).unwrap();
        for i in 0..grid.len() {
            let expect = a * ra.magnitude[i] + b * rb.magnitude[i];
            prop_assert!((rc.magnitude[i] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn filtering_matches_the_eigenbasis_oracle(
        n in 3usize..9,
        order in 0usize..6,
        seed in any::<u64>(),
    ) {
        let g = random_connected(n, seed, 0.3);
        let lap = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let basis = eigendecompose(&lap).unwrap();
        let lt = rescale_spectrum(&lap, basis.lambda_max).unwrap();
        let alpha = random_tensor(&[1, order + 1], seed ^ 0xc0ffee, 1.0).data;
        let x = random_tensor(&[n, 2], seed ^ 0xbeef, 1.0);

        let fast = apply_filter(&FilterCoefficients::new(alpha.clone()).unwrap(), &lt, &x).unwrap();

        // Oracle: transform to the eigenbasis, scale by the scalar response at
        // each rescaled eigenvalue, transform back.
        let mut gains = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let lam = (2.0 * basis.lambda[i] / basis.lambda_max - 1.0).clamp(-1.0, 1.0);
            let r: f64 = alpha.iter().enumerate().map(|(k, &c)| c * cheb_eval(k, lam)).sum();
            gains.set(i, i, r);
        }
        let oracle = basis
            .u
            .matmul(&gains)
            .matmul(&basis.u.transpose())
            .matmul(&x);
        for i in 0..n {
            for j in 0..2 {
                prop_assert!((fast.at(i, j) - oracle.at(i, j)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn chebyshev_recursion_and_unit_bound_hold(x in -1.0f64..=1.0, k in 2usize..12) {
        let lhs = cheb_eval(k, x);
        let rhs = 2.0 * x * cheb_eval(k - 1, x) - cheb_eval(k - 2, x);
        prop_assert!((lhs - rhs).abs() < 1e-12);
        prop_assert!(lhs.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn lsq_recovers_representable_responses(order in 0usize..6, seed in any::<u64>()) {
        let alpha = random_tensor(&[1, order + 1], seed, 1.5).data;
        let truth = alpha.clone();
        let target = move |x: f64| -> f64 {
            truth.iter().enumerate().map(|(k, &a)| a * cheb_eval(k, x)).sum()
        };
        let fit = fit_chebyshev_lsq(&target, order, 128).unwrap();
        for (got, want) in fit.alpha.iter().zip(&alpha) {
            prop_assert!((got - want).abs() < 1e-8);
        }
    }

    // -----------------------------------------------------------------------
    // attention maps

    #[test]
    fn attention_rows_always_form_distributions(
        n in 2usize..8,
        heads in 1usize..3,
        seed in any::<u64>(),
    ) {
        let d = 4 * heads;
        let cfg = AttentionConfig {
            heads,
            d_in: d,
            d_out: d / heads,
            tie_query_key: false,
            pe: PeMode::None,
        };
        let x = random_tensor(&[n, d], seed, 2.0);
        let mk = |salt: u64| -> Vec<Tensor> {
            (0..heads)
                .map(|h| random_tensor(&[d, d / heads], seed ^ salt ^ (h as u64) << 3, 1.0))
                .collect()
        };
        let (map, outs) = scaled_dot_attention(&cfg, &x, &mk(0x11), &mk(0x22), &mk(0x33)).unwrap();
        prop_assert_eq!(outs.len(), heads);
        for c in &map.heads {
            for i in 0..n {
                let mut row_sum = 0.0;
                for j in 0..n {
                    prop_assert!(c.at(i, j) >= 0.0);
                    row_sum += c.at(i, j);
                }
                prop_assert!((row_sum - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn attention_laplacian_is_symmetric_with_bounded_spectrum(n in 2usize..9, seed in any::<u64>()) {
        let c = row_stochastic(n, seed);
        let lap = attention_to_laplacian(&c).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((lap.at(i, j) - lap.at(j, i)).abs() < 1e-12);
            }
        }
        let basis = eigendecompose_symmetric(&lap).unwrap();
        for &lam in &basis.lambda {
            prop_assert!((-1e-8..=2.0 + 1e-8).contains(&lam));
        }
    }

    // -----------------------------------------------------------------------
    // simplex projection

    #[test]
    fn simplex_projection_is_feasible_idempotent_and_closest(
        rows in 1usize..4,
        cols in 2usize..6,
        seed in any::<u64>(),
    ) {
        let m = random_tensor(&[rows, cols], seed, 3.0);
        let p = project_rows_to_simplex(&m);
        for i in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                prop_assert!(p.at(i, j) >= 0.0);
                sum += p.at(i, j);
            }
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
        let pp = project_rows_to_simplex(&p);
        for i in 0..rows {
            for j in 0..cols {
                prop_assert!((pp.at(i, j) - p.at(i, j)).abs() < 1e-12);
            }
        }
        // No random feasible point may sit closer to the input than the
        // projection does.
        let z = row_stochastic(cols, seed ^ 0xd1ce);
        for i in 0..rows {
            let mut d_proj = 0.0;
            let mut d_rand = 0.0;
            for j in 0..cols {
                d_proj += (m.at(i, j) - p.at(i, j)).powi(2);
                d_rand += (m.at(i, j) - z.at(i % cols, j)).powi(2);
            }
            prop_assert!(d_proj <= d_rand + 1e-9);
        }
    }

    // -----------------------------------------------------------------------
    // synthetic generator

    #[test]
    fn sbm_graphs_are_connected_simple_and_sized(
        blocks in 2usize..4,
        npb in 3usize..6,
        seed in any::<u64>(),
    ) {
        let cfg = SBMConfig {
            blocks,
            nodes_per_block: npb,
            p_intra: 0.9,
            p_inter: 0.25,
            eig_indices: vec![1],
            splits: (1, 1, 1),
            seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = generate_sbm(&cfg, &mut rng).unwrap();
        prop_assert_eq!(g.n, blocks * npb);
        prop_assert!(g.is_connected());
        let mut seen = std::collections::HashSet::new();
        for &(i, j, w) in &g.edges {
            prop_assert!(i < j, "edges stored with i < j");
            prop_assert!(j < g.n);
            prop_assert!(w == 1.0);
            prop_assert!(seen.insert((i, j)), "duplicate edge");
        }
    }

    #[test]
    fn spectral_signal_instances_are_well_formed(
        n in 4usize..10,
        seed in any::<u64>(),
    ) {
        let g = random_connected(n, seed, 0.4);
        let eig = 1 + (seed as usize) % (n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let sg = assign_spectral_signals(&g, eig, 2, &mut rng).unwrap();
        prop_assert_eq!(sg.chosen_eig, eig);
        prop_assert_eq!(sg.mask.iter().filter(|&&m| m).count(), n.div_ceil(2));
        let x = sg.graph.x.as_ref().unwrap();
        for i in 0..n {
            prop_assert!(sg.class_of[i] < 2);
            if sg.mask[i] {
                for c in 0..2 {
                    prop_assert!(x.at(i, c) == 0.0);
                }
            } else {
                for c in 0..2 {
                    let want = if c == sg.class_of[i] { 1.0 } else { 0.0 };
                    prop_assert!(x.at(i, c) == want);
                }
            }
        }
    }

    #[test]
    fn derived_streams_replay_identically(seed in any::<u64>(), index in any::<u64>()) {
        let mut a = derive_stream(seed, index);
        let mut b = derive_stream(seed, index);
        for _ in 0..4 {
            prop_assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    // -----------------------------------------------------------------------
    // scalar helpers

    #[test]
    fn pole_magnitudes_stay_inside_the_stability_disc(x in -50.0f64..50.0) {
        let y = pole_squash(x);
        prop_assert!(y.abs() <= 0.99);
        prop_assert!(y == 0.0 || y.signum() == x.signum());
    }

    #[test]
    fn pole_squash_is_strictly_increasing(x in -5.0f64..5.0, dx in 1e-6f64..1.0) {
        prop_assert!(pole_squash(x + dx) > pole_squash(x));
    }
}

#[test]
fn pole_squash_fixes_zero_exactly() {
    assert_eq!(pole_squash(0.0), 0.0);
    assert_eq!(pole_squash(-0.0), 0.0);
}
