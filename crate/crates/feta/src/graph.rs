//! Graphs, Laplacians, and the graph Fourier transform.
//!
//! The spectral machinery everywhere else rests on three conventions fixed
//! here once:
//!
//! - normalized Laplacian `L = I − D^{−1/2} A D^{−1/2}` with the isolated-node
//!   convention `deg = 0 ⇒ D^{−1/2} entry = 0` (so `L[i,i] = 0`, keeping L
//!   positive semi-definite as the limit of vanishing degree);
//! - eigenvalues ascending, eigenvectors orthonormal in columns with the sign
//!   fixed so each eigenvector's first component above 1e-12 in magnitude is
//!   positive; exact ties ordered by lexicographic comparison of the
//!   sign-fixed vectors;
//! - the Fourier transform is `X̂ = UᵀX`, its inverse `X = UX̂`.

use crate::error::{FetaError, Result};
use crate::tensor::Tensor;

/// Undirected weighted graph with optional node signals and supervision.
///
/// Self-loops are never stored; constructions that need them (attention
/// Laplacians, GAT) add them algorithmically.
#[derive(Debug, Clone)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub x: Option<Tensor>,
    pub labels: Option<Labels>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub enum Labels {
    NodeClasses(Vec<usize>),
    GraphClass(usize),
    GraphScalar(f64),
}

impl Graph {
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, w) in &edges {
            if i >= n || j >= n {
                return Err(FetaError::Domain(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(FetaError::Domain(format!("self-loop stored at node {i}")));
            }
            if w < 0.0 {
                return Err(FetaError::Domain(format!(
                    "negative edge weight {w} on ({i}, {j})"
                )));
            }
        }
        Ok(Graph { n, edges, x: None, labels: None, mask: None })
    }

    /// Unit-weight convenience constructor.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        Graph::new(n, pairs.iter().map(|&(i, j)| (i, j, 1.0)).collect())
    }

    pub fn path(n: usize) -> Graph {
        Graph::from_pairs(n, &(0..n - 1).map(|i| (i, i + 1)).collect::<Vec<_>>()).unwrap()
    }

    pub fn complete(n: usize) -> Graph {
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
        Graph::from_pairs(n, &pairs).unwrap()
    }

    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(&[self.n, self.n]);
        for &(i, j, w) in &self.edges {
            a.set(i, j, a.at(i, j) + w);
            a.set(j, i, a.at(j, i) + w);
        }
        a
    }

    pub fn degrees(&self) -> Vec<f64> {
        let a = self.adjacency();
        (0..self.n)
            .map(|i| (0..self.n).map(|j| a.at(i, j)).sum())
            .collect()
    }

    /// Connected-component count by union-find over edges.
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for &(i, j, _) in &self.edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
            }
        }
        (0..self.n)
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }

    pub fn is_connected(&self) -> bool {
        self.n <= 1 || self.component_count() == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LaplacianKind {
    Normalized,
    Unnormalized,
    /// Normalized Laplacian of the graph with self-loops added (A + I).
    SelfLoopNormalized,
}

#[derive(Debug, Clone)]
pub struct LaplacianMatrix {
    pub l: Tensor,
    pub kind: LaplacianKind,
}

pub fn build_laplacian(g: &Graph, kind: LaplacianKind) -> Result<LaplacianMatrix> {
    for &(_, _, w) in &g.edges {
        if w < 0.0 {
            return Err(FetaError::Domain(format!("negative edge weight {w}")));
        }
    }
    let n = g.n;
    let mut a = g.adjacency();
    if kind == LaplacianKind::SelfLoopNormalized {
        for i in 0..n {
            a.set(i, i, a.at(i, i) + 1.0);
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.at(i, j)).sum()).collect();
    let l = match kind {
        LaplacianKind::Unnormalized => {
            let mut l = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    l.set(i, j, if i == j { deg[i] - a.at(i, j) } else { -a.at(i, j) });
                }
            }
            l
        }
        LaplacianKind::Normalized | LaplacianKind::SelfLoopNormalized => {
            let dinv: Vec<f64> =
                deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
            let mut l = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    let norm = dinv[i] * a.at(i, j) * dinv[j];
                    // deg 0 ⇒ dinv 0 ⇒ diagonal entry 0, not 1.
                    let eye = if i == j && deg[i] > 0.0 { 1.0 } else { 0.0 };
                    l.set(i, j, eye - norm);
                }
            }
            l
        }
    };
    Ok(LaplacianMatrix { l, kind })
}

/// Eigendecomposition `L = U Λ Uᵀ` with the sign and ordering conventions
/// from the module docs.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    /// Eigenvectors in columns.
    pub u: Tensor,
    /// Ascending eigenvalues.
    pub lambda: Vec<f64>,
    pub lambda_max: f64,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    /// Column `i` as a plain vector.
    pub fn eigvec(&self, i: usize) -> Vec<f64> {
        (0..self.n()).map(|r| self.u.at(r, i)).collect()
    }
}

/// Cyclic Jacobi eigendecomposition for symmetric matrices.
///
/// Sweeps all off-diagonal pairs (p, q), each time choosing the rotation
/// angle from `θ = (a_qq − a_pp) / (2 a_pq)`, `t = sgn(θ)/(|θ| + √(θ²+1))`,
/// `c = 1/√(t²+1)`, `s = t·c`, which zeroes `a_pq` exactly. Off-diagonal mass
/// decreases monotonically; iteration stops when it falls below machine
/// precision relative to ‖A‖ or after 100 sweeps.
pub fn eigendecompose(lap: &LaplacianMatrix) -> Result<SpectralBasis> {
    eigendecompose_symmetric(&lap.l)
}

pub fn eigendecompose_symmetric(m: &Tensor) -> Result<SpectralBasis> {
    let n = m.rows();
    if m.cols() != n {
        return Err(FetaError::shape("eigendecompose", format!("non-square {:?}", m.shape)));
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((m.at(i, j) - m.at(j, i)).abs());
        }
    }
    if asym > 1e-9 {
        return Err(FetaError::Contract(format!(
            "eigendecompose requires a symmetric matrix; max asymmetry {asym:.3e}"
        )));
    }

    let mut a = m.clone();
    // Symmetrize exactly so rotation updates see a_ij == a_ji.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a.at(i, j) + a.at(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    let mut v = Tensor::eye(n);
    let norm = a.frob_norm().max(1.0);
    let tol = 1e-14 * norm;

    for _sweep in 0..100 {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += a.at(i, j) * a.at(i, j);
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    // Extract, sign-fix, and order.
    let mut cols: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut col: Vec<f64> = (0..n).map(|i| v.at(i, j)).collect();
            if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    for x in &mut col {
                        *x = -*x;
                    }
                }
            }
            (a.at(j, j), col)
        })
        .collect();
    cols.sort_by(|(la, va), (lb, vb)| {
        if (la - lb).abs() <= 1e-12 {
            va.partial_cmp(vb).unwrap()
        } else {
            la.partial_cmp(lb).unwrap()
        }
    });

    let lambda: Vec<f64> = cols.iter().map(|(l, _)| *l).collect();
    let mut u = Tensor::zeros(&[n, n]);
    for (j, (_, col)) in cols.iter().enumerate() {
        for i in 0..n {
            u.set(i, j, col[i]);
        }
    }
    let lambda_max = lambda.last().copied().unwrap_or(0.0);
    Ok(SpectralBasis { u, lambda, lambda_max })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FourierDirection {
    Forward,
    Inverse,
}

/// `X̂ = UᵀX` (forward) or `X = UX̂` (inverse).
pub fn graph_fourier(basis: &SpectralBasis, x: &Tensor, dir: FourierDirection) -> Result<Tensor> {
    if x.rows() != basis.n() {
        return Err(FetaError::shape(
            "graph_fourier",
            format!("signal has {} rows, basis has {}", x.rows(), basis.n()),
        ));
    }
    Ok(match dir {
        FourierDirection::Forward => basis.u.transpose().matmul(x),
        FourierDirection::Inverse => basis.u.matmul(x),
    })
}

/// `L̃ = 2L/λ_max − I`, mapping the spectrum into [−1, 1].
pub fn rescale_spectrum(lap: &LaplacianMatrix, lambda_max: f64) -> Result<Tensor> {
    if lambda_max <= 0.0 {
        return Err(FetaError::Domain(format!(
            "rescale_spectrum needs lambda_max > 0, got {lambda_max}"
        )));
    }
    let n = lap.l.rows();
    let mut out = lap.l.scale(2.0 / lambda_max);
    for i in 0..n {
        out.set(i, i, out.at(i, i) - 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn p2_normalized_laplacian_is_hand_value() {
        let g = Graph::path(2);
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        assert_eq!(l.l.data, vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn k3_normalized_is_i_minus_half_a() {
        let g = Graph::complete(3);
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { -0.5 };
                assert_close(l.l.at(i, j), want, 1e-15);
            }
        }
    }

    #[test]
    fn unnormalized_rows_sum_to_zero() {
        let g = Graph::from_pairs(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]).unwrap();
        let l = build_laplacian(&g, LaplacianKind::Unnormalized).unwrap();
        for i in 0..5 {
            let s: f64 = (0..5).map(|j| l.l.at(i, j)).sum();
            assert_close(s, 0.0, 1e-12);
        }
    }

    #[test]
    fn isolated_node_gets_zero_diagonal() {
        let g = Graph::from_pairs(3, &[(0, 1)]).unwrap();
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        assert_eq!(l.l.at(2, 2), 0.0);
    }

    #[test]
    fn negative_weight_is_domain_error() {
        assert!(matches!(
            Graph::new(2, vec![(0, 1, -0.5)]),
            Err(FetaError::Domain(_))
        ));
    }

    #[test]
    fn p2_eigensystem() {
        let g = Graph::path(2);
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        assert_close(basis.lambda[0], 0.0, 1e-14);
        assert_close(basis.lambda[1], 2.0, 1e-14);
        let r = 0.5f64.sqrt();
        assert_close(basis.u.at(0, 0), r, 1e-12);
        assert_close(basis.u.at(1, 0), r, 1e-12);
    }

    #[test]
    fn k3_eigenvalues_match_characteristic_polynomial() {
        // I − A/2 on K₃: det(L − λI) = −λ(λ − 3/2)² by direct expansion,
        // so the spectrum is {0, 1.5, 1.5}.
        let g = Graph::complete(3);
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        assert_close(basis.lambda[0], 0.0, 1e-12);
        assert_close(basis.lambda[1], 1.5, 1e-12);
        assert_close(basis.lambda[2], 1.5, 1e-12);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let mut seed = 99u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let n = 8;
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i..n {
                let v = next();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        let basis = eigendecompose_symmetric(&m).unwrap();
        // ‖UΛUᵀ − M‖_F and ‖UᵀU − I‖_F both at solver precision.
        let mut lam = Tensor::zeros(&[n, n]);
        for i in 0..n {
            lam.set(i, i, basis.lambda[i]);
        }
        let recon = basis.u.matmul(&lam).matmul(&basis.u.transpose());
        assert!(recon.sub(&m).frob_norm() < 1e-9);
        let gram = basis.u.transpose().matmul(&basis.u);
        assert!(gram.sub(&Tensor::eye(n)).frob_norm() < 1e-9);
        // Ascending order.
        for w in basis.lambda.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
    }

    #[test]
    fn asymmetric_input_is_contract_error() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            eigendecompose_symmetric(&m),
            Err(FetaError::Contract(_))
        ));
    }

    #[test]
    fn eigendecompose_is_deterministic() {
        let g = Graph::from_pairs(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3)])
            .unwrap();
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let a = eigendecompose(&l).unwrap();
        let b = eigendecompose(&l).unwrap();
        assert_eq!(a.u.data, b.u.data);
        assert_eq!(a.lambda, b.lambda);
    }

    #[test]
    fn component_count_matches_near_zero_eigenvalues() {
        // Two triangles, disjoint.
        let g = Graph::from_pairs(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]).unwrap();
        assert_eq!(g.component_count(), 2);
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        let near_zero = basis.lambda.iter().filter(|l| l.abs() < 1e-8).count();
        assert_eq!(near_zero, 2);
    }

    #[test]
    fn fourier_of_eigenvector_is_basis_vector() {
        let g = Graph::path(4);
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        let x = Tensor::col(&basis.eigvec(0));
        let xhat = graph_fourier(&basis, &x, FourierDirection::Forward).unwrap();
        for i in 0..4 {
            let want = if i == 0 { 1.0 } else { 0.0 };
            assert_close(xhat.at(i, 0), want, 1e-12);
        }
    }

    #[test]
    fn fourier_round_trip_and_parseval() {
        let g = Graph::from_pairs(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)]).unwrap();
        let basis =
            eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
        let x = Tensor::new(vec![5, 2], vec![0.3, 1.2, -0.5, 0.7, 2.0, -1.1, 0.0, 0.4, -0.9, 0.8]);
        let xhat = graph_fourier(&basis, &x, FourierDirection::Forward).unwrap();
        let back = graph_fourier(&basis, &xhat, FourierDirection::Inverse).unwrap();
        assert!(back.sub(&x).frob_norm() < 1e-10);
        assert!((xhat.frob_norm() - x.frob_norm()).abs() < 1e-10);
    }

    #[test]
    fn rescale_p2_gives_plus_minus_one() {
        let g = Graph::path(2);
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let lt = rescale_spectrum(&l, 2.0).unwrap();
        let basis = eigendecompose_symmetric(&lt).unwrap();
        assert_close(basis.lambda[0], -1.0, 1e-12);
        assert_close(basis.lambda[1], 1.0, 1e-12);
    }

    #[test]
    fn rescale_empty_graph_is_minus_identity() {
        let g = Graph::from_pairs(3, &[]).unwrap();
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        let lt = rescale_spectrum(&l, 2.0).unwrap();
        assert_eq!(lt.data, Tensor::eye(3).scale(-1.0).data);
    }

    #[test]
    fn rescale_rejects_nonpositive_lambda_max() {
        let g = Graph::path(2);
        let l = build_laplacian(&g, LaplacianKind::Normalized).unwrap();
        assert!(matches!(rescale_spectrum(&l, 0.0), Err(FetaError::Domain(_))));
    }

    #[test]
    fn normalized_spectrum_stays_in_zero_two() {
        let mut seed = 5u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..20 {
            let n = 4 + trial % 5;
            let mut pairs = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if next() < 0.45 {
                        pairs.push((i, j));
                    }
                }
            }
            let g = Graph::from_pairs(n, &pairs).unwrap();
            let basis =
                eigendecompose(&build_laplacian(&g, LaplacianKind::Normalized).unwrap()).unwrap();
            assert!(basis.lambda[0] >= -1e-10, "lambda_min {}", basis.lambda[0]);
            assert!(basis.lambda_max <= 2.0 + 1e-10, "lambda_max {}", basis.lambda_max);
        }
    }
}
