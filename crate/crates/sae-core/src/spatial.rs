//! Intrinsic CAR precision structures and the BYM2 reparameterization.
//!
//! The ICAR precision is the graph Laplacian Q = D - W. Because Q is only
//! positive semidefinite (its null space is spanned by per-component
//! indicators), effects are constrained to sum to zero on each connected
//! component, and the precision is rescaled per component so the geometric
//! mean of the constrained marginal variances is 1. A BYM2 effect then mixes
//! a standardized iid vector v* and the standardized spatial vector u* as
//!
//! ```text
//! s_r = sigma * (sqrt(1 - rho) * v*_r + sqrt(rho) * u*_r)
//! ```
//!
//! so sigma is the total standard deviation and rho the spatial share of the
//! variance. Singleton components (islands) have no ICAR distribution; they
//! get u*_r = 0 and their full variance share moves to the iid part.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Result, SaeError};
use crate::rng::rng_from_seed;
use crate::survey::AdjacencyGraph;

/// Eigenvalues below this count as null directions of the Laplacian.
const NULL_EIGENVALUE_TOL: f64 = 1e-9;

/// Tolerance for the per-component sum-to-zero constraint on u*.
pub const SUM_TO_ZERO_TOL: f64 = 1e-10;

/// Spectral data for the positive eigenspace of a (scaled) ICAR precision.
#[derive(Debug, Clone)]
pub struct IcarSpectrum {
    /// R x K matrix; column k is a unit eigenvector scattered to the nodes of
    /// its component (zero elsewhere), mean-centered on the component.
    pub basis: DMatrix<f64>,
    /// K positive eigenvalues of the scaled precision, basis-aligned.
    pub eigenvalues: DVector<f64>,
    /// Constrained marginal variance per node; singleton nodes carry None.
    pub marginal_variances: Vec<Option<f64>>,
}

/// ICAR precision with component decomposition and optional scaling.
#[derive(Debug, Clone)]
pub struct IcarStructure {
    n: usize,
    precision: DMatrix<f64>,
    components: Vec<Vec<usize>>,
    /// Nodes forming singleton components, flagged for IID fallback.
    singletons: Vec<usize>,
    /// Per-component scaling factor applied to the precision; None until
    /// scaled, and None for singleton components afterwards.
    scaling_factors: Vec<Option<f64>>,
    spectrum: Option<IcarSpectrum>,
}

impl IcarStructure {
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn singletons(&self) -> &[usize] {
        &self.singletons
    }

    pub fn is_singleton_node(&self, node: usize) -> bool {
        self.singletons.contains(&node)
    }

    pub fn scaling_factors(&self) -> &[Option<f64>] {
        &self.scaling_factors
    }

    pub fn is_scaled(&self) -> bool {
        self.spectrum.is_some()
    }

    /// Spectral basis of the scaled precision; available after scaling.
    pub fn spectrum(&self) -> Result<&IcarSpectrum> {
        self.spectrum
            .as_ref()
            .ok_or_else(|| SaeError::usage("ICAR structure is not scaled; call compute_scaling first"))
    }

    /// Serializable diagnostics: factors and constrained marginal variances.
    pub fn scaling_diagnostics(&self) -> Result<ScalingDiagnostics> {
        let spectrum = self.spectrum()?;
        Ok(ScalingDiagnostics {
            scaling_factors: self.scaling_factors.clone(),
            marginal_variances: spectrum.marginal_variances.clone(),
            singleton_nodes: self.singletons.iter().map(|&r| r + 1).collect(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingDiagnostics {
    pub scaling_factors: Vec<Option<f64>>,
    pub marginal_variances: Vec<Option<f64>>,
    /// 1-based ids of nodes handled by IID fallback.
    pub singleton_nodes: Vec<usize>,
}

/// Build the unscaled ICAR precision Q = D - W from the graph.
pub fn build_icar_precision(graph: &AdjacencyGraph) -> IcarStructure {
    let n = graph.n_nodes();
    let mut q = DMatrix::<f64>::zeros(n, n);
    for &(a, b) in graph.edges() {
        q[(a, b)] -= 1.0;
        q[(b, a)] -= 1.0;
        q[(a, a)] += 1.0;
        q[(b, b)] += 1.0;
    }
    let components: Vec<Vec<usize>> = graph.components().to_vec();
    let singletons = components
        .iter()
        .filter(|c| c.len() == 1)
        .map(|c| c[0])
        .collect();
    let scaling_factors = vec![None; components.len()];
    IcarStructure {
        n,
        precision: q,
        components,
        singletons,
        scaling_factors,
        spectrum: None,
    }
}

/// Scale each non-singleton component so the geometric mean of its
/// constrained marginal variances is 1, and cache the spectral basis used
/// for constrained sampling.
///
/// The constrained variances are the diagonal of the generalized inverse of
/// the component block restricted to its sum-to-zero subspace.
pub fn compute_scaling(icar: &IcarStructure) -> Result<IcarStructure> {
    if icar.components.iter().all(|c| c.len() == 1) {
        return Err(SaeError::validation(
            "graph has no non-singleton component; spatial models need at least one edge",
        ));
    }
    let n = icar.n;
    let mut precision = icar.precision.clone();
    let mut factors = vec![None; icar.components.len()];
    let mut marginal_variances: Vec<Option<f64>> = vec![None; n];
    let mut basis_cols: Vec<DVector<f64>> = Vec::new();
    let mut eigenvalues: Vec<f64> = Vec::new();

    for (ci, comp) in icar.components.iter().enumerate() {
        let m = comp.len();
        if m == 1 {
            continue;
        }
        let block = icar.precision.select_rows(comp.iter()).select_columns(comp.iter());
        let eig = block.symmetric_eigen();
        // Sort eigenpairs ascending for a deterministic basis order.
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let null_count = order
            .iter()
            .take_while(|&&k| eig.eigenvalues[k].abs() < NULL_EIGENVALUE_TOL)
            .count();
        if null_count != 1 {
            return Err(SaeError::numerical(format!(
                "component {ci} has Laplacian null space of dimension {null_count}, expected 1"
            )));
        }
        // Constrained marginal variances from the generalized inverse.
        let mut vars = vec![0.0f64; m];
        for &k in &order[1..] {
            let lambda = eig.eigenvalues[k];
            for i in 0..m {
                vars[i] += eig.eigenvectors[(i, k)] * eig.eigenvectors[(i, k)] / lambda;
            }
        }
        let factor = (vars.iter().map(|v| v.ln()).sum::<f64>() / m as f64).exp();
        factors[ci] = Some(factor);
        for (local, &node) in comp.iter().enumerate() {
            marginal_variances[node] = Some(vars[local] / factor);
        }
        // Scale the component block of the precision.
        for &i in comp {
            for &j in comp {
                precision[(i, j)] *= factor;
            }
        }
        // Positive eigenpairs of the scaled block: same vectors, values * factor.
        for &k in &order[1..] {
            let mut col = DVector::<f64>::zeros(n);
            for (local, &node) in comp.iter().enumerate() {
                col[node] = eig.eigenvectors[(local, k)];
            }
            // Center on the component so constrained sums are exactly zero.
            let mean = comp.iter().map(|&node| col[node]).sum::<f64>() / m as f64;
            for &node in comp {
                col[node] -= mean;
            }
            basis_cols.push(col);
            eigenvalues.push(eig.eigenvalues[k] * factor);
        }
    }

    let k = basis_cols.len();
    let mut basis = DMatrix::<f64>::zeros(n, k);
    for (j, col) in basis_cols.iter().enumerate() {
        basis.set_column(j, col);
    }
    Ok(IcarStructure {
        n,
        precision,
        components: icar.components.clone(),
        singletons: icar.singletons.clone(),
        scaling_factors: factors,
        spectrum: Some(IcarSpectrum {
            basis,
            eigenvalues: DVector::from_vec(eigenvalues),
            marginal_variances,
        }),
    })
}

/// A BYM2 effect: total sd, spatial mixing share, and the standardized
/// iid / spatial component vectors.
#[derive(Debug, Clone)]
pub struct Bym2Effect {
    pub sigma: f64,
    pub rho: f64,
    pub v_star: DVector<f64>,
    pub u_star: DVector<f64>,
}

/// Per-node mixing coefficients (c_iid, c_spatial) for a BYM2 effect, with
/// the IID fallback applied on singleton nodes.
pub fn bym2_coefficients(rho: f64, icar: &IcarStructure) -> (DVector<f64>, DVector<f64>) {
    let n = icar.n_nodes();
    let mut c_iid = DVector::from_element(n, (1.0 - rho).sqrt());
    let mut c_spatial = DVector::from_element(n, rho.sqrt());
    for &r in icar.singletons() {
        c_iid[r] = 1.0;
        c_spatial[r] = 0.0;
    }
    (c_iid, c_spatial)
}

/// Realize s_r = sigma (sqrt(1-rho) v*_r + sqrt(rho) u*_r), with u* checked
/// against the per-component sum-to-zero constraint.
pub fn realize_bym2(effect: &Bym2Effect, icar: &IcarStructure) -> Result<DVector<f64>> {
    let n = icar.n_nodes();
    if effect.v_star.len() != n || effect.u_star.len() != n {
        return Err(SaeError::validation(format!(
            "component vectors must have length {n}"
        )));
    }
    if !(0.0..=1.0).contains(&effect.rho) {
        return Err(SaeError::validation(format!("rho = {} outside [0, 1]", effect.rho)));
    }
    if effect.sigma < 0.0 {
        return Err(SaeError::validation(format!("sigma = {} negative", effect.sigma)));
    }
    for comp in icar.components() {
        if comp.len() == 1 {
            continue;
        }
        let sum: f64 = comp.iter().map(|&r| effect.u_star[r]).sum();
        if sum.abs() > SUM_TO_ZERO_TOL {
            return Err(SaeError::validation(format!(
                "u_star violates the sum-to-zero constraint on a component (sum = {sum:e})"
            )));
        }
    }
    let (c_iid, c_spatial) = bym2_coefficients(effect.rho, icar);
    let mut s = DVector::<f64>::zeros(n);
    for r in 0..n {
        s[r] = effect.sigma * (c_iid[r] * effect.v_star[r] + c_spatial[r] * effect.u_star[r]);
    }
    Ok(s)
}

/// Draw a standardized constrained ICAR vector from the scaled structure.
///
/// Sampling happens in the positive eigenspace, so the per-component
/// sum-to-zero constraint holds by construction; singleton nodes are 0.
pub fn sample_constrained_icar(icar: &IcarStructure, seed: u64) -> Result<DVector<f64>> {
    let mut rng = rng_from_seed(seed);
    sample_constrained_icar_with(icar, &mut rng)
}

/// As [`sample_constrained_icar`], drawing from a caller-provided stream.
pub fn sample_constrained_icar_with<R: Rng>(icar: &IcarStructure, rng: &mut R) -> Result<DVector<f64>> {
    let spectrum = icar.spectrum()?;
    let k = spectrum.eigenvalues.len();
    let mut coeffs = DVector::<f64>::zeros(k);
    for j in 0..k {
        let z: f64 = rng.sample(StandardNormal);
        coeffs[j] = z / spectrum.eigenvalues[j].sqrt();
    }
    Ok(&spectrum.basis * coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scaled(graph: &AdjacencyGraph) -> IcarStructure {
        compute_scaling(&build_icar_precision(graph)).unwrap()
    }

    #[test]
    fn path3_precision_matches_definition() {
        let g = AdjacencyGraph::new(3, &[(0, 1), (1, 2)], None).unwrap();
        let icar = build_icar_precision(&g);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(icar.precision(), &expected);
    }

    #[test]
    fn edgeless_graph_gives_zero_matrix_and_singletons() {
        let g = AdjacencyGraph::new(4, &[], None).unwrap();
        let icar = build_icar_precision(&g);
        assert!(icar.precision().iter().all(|&x| x == 0.0));
        assert_eq!(icar.components().len(), 4);
        assert_eq!(icar.singletons().len(), 4);
        assert!(compute_scaling(&icar).is_err());
    }

    #[test]
    fn row_sums_zero_and_rank_on_lattice() {
        let g = AdjacencyGraph::lattice(47).unwrap();
        let icar = build_icar_precision(&g);
        for i in 0..47 {
            let row_sum: f64 = icar.precision().row(i).iter().sum();
            assert_eq!(row_sum, 0.0);
        }
        // Rank oracle: count of eigenvalues above tolerance.
        let eig = icar.precision().clone().symmetric_eigen();
        let rank = eig.eigenvalues.iter().filter(|&&v| v.abs() > 1e-9).count();
        assert_eq!(rank, 47 - icar.components().len());
        assert_eq!(icar.components().len(), 1);
    }

    #[test]
    fn two_node_graph_scales_to_unit_variances() {
        let g = AdjacencyGraph::new(2, &[(0, 1)], None).unwrap();
        let icar = scaled(&g);
        let vars = &icar.spectrum().unwrap().marginal_variances;
        assert_relative_eq!(vars[0].unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(vars[1].unwrap(), 1.0, max_relative = 1e-12);
    }

    /// Independent oracle: constrained covariance of an ICAR block equals
    /// (Q + 11^T/m)^{-1} - 11^T/m, computed by LU inversion.
    fn oracle_constrained_variances(q: &DMatrix<f64>) -> Vec<f64> {
        let m = q.nrows();
        let ones = DMatrix::from_element(m, m, 1.0 / m as f64);
        let inv = (q + &ones).try_inverse().expect("oracle inversion");
        (0..m).map(|i| inv[(i, i)] - 1.0 / m as f64).collect()
    }

    fn check_geometric_mean_one(n: usize, graph: &AdjacencyGraph, tol: f64) {
        let icar = scaled(graph);
        let vars = oracle_constrained_variances(icar.precision());
        let log_mean = vars.iter().map(|v| v.ln()).sum::<f64>() / n as f64;
        assert!(
            log_mean.exp() - 1.0 < tol && 1.0 - log_mean.exp() < tol,
            "geometric mean {} off unity",
            log_mean.exp()
        );
        // The cached variances agree with the oracle too.
        let cached = &icar.spectrum().unwrap().marginal_variances;
        for (i, v) in vars.iter().enumerate() {
            assert_relative_eq!(cached[i].unwrap(), *v, max_relative = 1e-8);
        }
    }

    #[test]
    fn scaling_path3_oracle() {
        let g = AdjacencyGraph::new(3, &[(0, 1), (1, 2)], None).unwrap();
        check_geometric_mean_one(3, &g, 1e-10);
    }

    #[test]
    fn scaling_lattice47_oracle() {
        let g = AdjacencyGraph::lattice(47).unwrap();
        check_geometric_mean_one(47, &g, 1e-8);
    }

    #[test]
    fn scaling_is_idempotent() {
        let g = AdjacencyGraph::lattice(12).unwrap();
        let once = scaled(&g);
        let twice = compute_scaling(&once).unwrap();
        for f in twice.scaling_factors().iter().flatten() {
            assert_relative_eq!(*f, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn realize_bym2_degenerate_mixes() {
        let g = AdjacencyGraph::new(3, &[(0, 1), (1, 2)], None).unwrap();
        let icar = scaled(&g);
        let v = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let u = sample_constrained_icar(&icar, 5).unwrap();
        let s0 = realize_bym2(
            &Bym2Effect { sigma: 2.0, rho: 0.0, v_star: v.clone(), u_star: u.clone() },
            &icar,
        )
        .unwrap();
        assert_eq!(s0, DVector::from_vec(vec![2.0, -2.0, 0.0]));
        let s1 = realize_bym2(
            &Bym2Effect { sigma: 1.0, rho: 1.0, v_star: v, u_star: u.clone() },
            &icar,
        )
        .unwrap();
        assert_relative_eq!((s1 - u).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn realize_bym2_half_mix_symbolic() {
        // Two-node graph; u* must be (a, -a). With rho = 0.5, sigma = 1,
        // v* = (1, 0): s = (sqrt(.5)(1) + sqrt(.5) a, sqrt(.5)(0) - sqrt(.5) a).
        let g = AdjacencyGraph::new(2, &[(0, 1)], None).unwrap();
        let icar = scaled(&g);
        let a = 0.73;
        let s = realize_bym2(
            &Bym2Effect {
                sigma: 1.0,
                rho: 0.5,
                v_star: DVector::from_vec(vec![1.0, 0.0]),
                u_star: DVector::from_vec(vec![a, -a]),
            },
            &icar,
        )
        .unwrap();
        let h = 0.5f64.sqrt();
        assert_relative_eq!(s[0], h + h * a, epsilon = 1e-14);
        assert_relative_eq!(s[1], -h * a, epsilon = 1e-14);
    }

    #[test]
    fn realize_bym2_rejects_constraint_violation() {
        let g = AdjacencyGraph::new(2, &[(0, 1)], None).unwrap();
        let icar = scaled(&g);
        let err = realize_bym2(
            &Bym2Effect {
                sigma: 1.0,
                rho: 0.5,
                v_star: DVector::zeros(2),
                u_star: DVector::from_vec(vec![1.0, 0.5]),
            },
            &icar,
        )
        .unwrap_err();
        assert!(err.to_string().contains("sum-to-zero"), "{err}");
    }

    #[test]
    fn constrained_sampling_is_deterministic_and_constrained() {
        let g = AdjacencyGraph::lattice(12).unwrap();
        let icar = scaled(&g);
        let a = sample_constrained_icar(&icar, 99).unwrap();
        let b = sample_constrained_icar(&icar, 99).unwrap();
        assert_eq!(a, b);
        let sum: f64 = a.iter().sum();
        assert!(sum.abs() < SUM_TO_ZERO_TOL, "sum = {sum:e}");
    }

    #[test]
    fn constrained_sampling_matches_oracle_variances() {
        let g = AdjacencyGraph::new(3, &[(0, 1), (1, 2)], None).unwrap();
        let icar = scaled(&g);
        let oracle = oracle_constrained_variances(icar.precision());
        let draws = 10_000;
        let mut sums = vec![0.0f64; 3];
        let mut sq = vec![0.0f64; 3];
        let mut rng = crate::rng::rng_from_seed(2024);
        for _ in 0..draws {
            let u = sample_constrained_icar_with(&icar, &mut rng).unwrap();
            for i in 0..3 {
                sums[i] += u[i];
                sq[i] += u[i] * u[i];
            }
        }
        for i in 0..3 {
            let mean = sums[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            assert!(
                (var - oracle[i]).abs() / oracle[i] < 0.05,
                "node {i}: empirical {var} vs oracle {}",
                oracle[i]
            );
        }
    }

    #[test]
    fn bym2_total_variance_is_sigma_squared() {
        // With standardized components, the Monte Carlo variance of the
        // realized effect averages sigma^2 across nodes.
        use rand::Rng;
        let g = AdjacencyGraph::lattice(9).unwrap();
        let icar = scaled(&g);
        let (sigma, rho) = (0.7, 0.6);
        let draws = 100_000;
        let mut rng = crate::rng::rng_from_seed(8);
        let mut sums = vec![0.0f64; 9];
        let mut sq = vec![0.0f64; 9];
        for _ in 0..draws {
            let v = DVector::from_fn(9, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let u = sample_constrained_icar_with(&icar, &mut rng).unwrap();
            let s = realize_bym2(
                &Bym2Effect { sigma, rho, v_star: v, u_star: u },
                &icar,
            )
            .unwrap();
            for i in 0..9 {
                sums[i] += s[i];
                sq[i] += s[i] * s[i];
            }
        }
        let mean_var: f64 = (0..9)
            .map(|i| {
                let m = sums[i] / draws as f64;
                sq[i] / draws as f64 - m * m
            })
            .sum::<f64>()
            / 9.0;
        let target = sigma * sigma;
        assert!(
            (mean_var - target).abs() / target < 0.05,
            "mean variance {mean_var} vs sigma^2 {target}"
        );
    }

    #[test]
    fn scaling_diagnostics_serialize() {
        let g = AdjacencyGraph::new(3, &[(0, 1)], None).unwrap();
        let icar = scaled(&g);
        let diag = icar.scaling_diagnostics().unwrap();
        assert_eq!(diag.singleton_nodes, vec![3]);
        assert_eq!(diag.marginal_variances.len(), 3);
        assert!(diag.marginal_variances[2].is_none());
        let json = serde_json::to_string(&diag).unwrap();
        assert!(json.contains("scaling_factors"), "{json}");
    }

    #[test]
    fn mixed_graph_singleton_gets_iid_fallback() {
        // Nodes 0-1 connected, node 2 isolated.
        let g = AdjacencyGraph::new(3, &[(0, 1)], None).unwrap();
        let icar = scaled(&g);
        assert_eq!(icar.singletons(), &[2]);
        let u = sample_constrained_icar(&icar, 1).unwrap();
        assert_eq!(u[2], 0.0);
        let (c_iid, c_spatial) = bym2_coefficients(0.8, &icar);
        assert_eq!(c_iid[2], 1.0);
        assert_eq!(c_spatial[2], 0.0);
        assert_relative_eq!(c_iid[0], 0.2f64.sqrt());
        assert_relative_eq!(c_spatial[0], 0.8f64.sqrt());
    }
}
