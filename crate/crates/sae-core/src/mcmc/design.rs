//! Internal Gaussian structure behind every candidate model.
//!
//! Conditional on hyperparameters, all models here are linear-Gaussian in
//! the latent vector x = (beta [, gamma], v*_1, v*_2 [, w_1, w_2]), where
//! w_c are coordinates of the spatial effect in the positive eigenbasis of
//! the scaled ICAR precision (u*_c = E w_c, so sum-to-zero holds by
//! construction). Area-level fits observe the Stage-1 mean vectors with
//! fixed precision; unit-level fits observe per-cluster sufficient
//! statistics with the cluster-level errors integrated out analytically:
//!
//! ```text
//! ybar_rkc | m, eps ~ N(m_rzc + eps_rkc, omega_c^2 / n_rkc)
//! integrating eps:   N(m_rzc, sigma_eps_c^2 + omega_c^2 / n_rkc)
//! ```
//!
//! plus a within-cluster residual factor that only involves omega_c.

use nalgebra::{DMatrix, DVector};

use crate::direct::DirectEstimateSet;
use crate::error::{Result, SaeError};
use crate::model::{AreaModelSpec, ModelSpec, PriorConfig, Stage1CovarianceMode, UnitModelSpec};
use crate::spatial::{build_icar_precision, compute_scaling};
use crate::survey::{AdjacencyGraph, RuralFractions, SurveyDataset};

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Variance floor applied to Stage-1 diagonal entries.
pub(crate) const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Level {
    Area,
    Unit,
}

/// Per-cluster sufficient statistics for one outcome.
#[derive(Debug, Clone)]
pub(crate) struct ClusterStat {
    pub region: usize,
    pub rural: bool,
    pub id: String,
    /// Non-missing observation count per outcome.
    pub n: [usize; 2],
    pub ybar: [f64; 2],
    pub rss: [f64; 2],
}

#[derive(Debug, Clone)]
pub(crate) struct AreaData {
    /// Observed mean per outcome; zero where unavailable.
    pub y: [DVector<f64>; 2],
    /// Likelihood precision entries per region: k11, k12, k22.
    pub prec: [DVector<f64>; 3],
    pub avail: Vec<[bool; 2]>,
    /// Fixed normalization of the Gaussian likelihood.
    pub loglik_const: f64,
    /// Precomputed E^T diag(prec_cc') E for (0,0), (0,1), (1,1).
    pub g_ww: Option<[DMatrix<f64>; 3]>,
    /// Regions whose variance diagonal was floored.
    pub floored_regions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct UnitData {
    pub clusters: Vec<ClusterStat>,
    /// [z][region] -> indices into `clusters`.
    pub by_region_z: [Vec<Vec<usize>>; 2],
    /// Whether any record is urban / rural (identification of gamma).
    pub has_urban: bool,
    pub has_rural: bool,
}

/// Hyperparameter state. `omega` has length 2, or 2R (outcome-major) when
/// the likelihood variance differs by region.
#[derive(Debug, Clone)]
pub struct Hypers {
    pub sigma: [f64; 2],
    pub rho: [f64; 2],
    pub lambda: f64,
    pub omega: Vec<f64>,
    pub sigma_eps: [f64; 2],
}

impl Hypers {
    pub fn describe(&self) -> String {
        format!(
            "sigma={:?} rho={:?} lambda={} omega={:?} sigma_eps={:?}",
            self.sigma, self.rho, self.lambda, self.omega, self.sigma_eps
        )
    }
}

/// Fully prepared fitting problem.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub level: Level,
    pub n_regions: usize,
    pub spatial: bool,
    /// (receiver, donor) outcome indices when a shared term exists.
    pub shared: Option<(usize, usize)>,
    pub per_region_omega: bool,
    pub priors: PriorConfig,
    // Latent layout.
    pub dim: usize,
    pub off_beta: usize,
    pub off_gamma: Option<usize>,
    pub off_v: [usize; 2],
    pub off_w: Option<[usize; 2]>,
    pub k_spatial: usize,
    /// R x K spatial basis (empty when not spatial).
    pub basis: DMatrix<f64>,
    /// Positive eigenvalues of the scaled ICAR precision (w-prior precision).
    pub eigenvalues: DVector<f64>,
    pub singleton: Vec<bool>,
    pub area: Option<AreaData>,
    pub unit: Option<UnitData>,
    /// Cluster ids in storage order (unit level).
    pub cluster_ids: Vec<String>,
    pub region_labels: Vec<String>,
    /// q_r used when aggregating unit-level draws to region means.
    pub rural_q: Option<Vec<f64>>,
}

impl Design {
    pub fn for_area(
        spec: &AreaModelSpec,
        estimates: &DirectEstimateSet,
        graph: &AdjacencyGraph,
    ) -> Result<Self> {
        spec.validate()?;
        if estimates.n_outcomes != 2 {
            return Err(SaeError::usage(format!(
                "bivariate models need C = 2 outcomes, got {}",
                estimates.n_outcomes
            )));
        }
        if estimates.n_regions() != graph.n_nodes() {
            return Err(SaeError::validation(format!(
                "estimates cover {} regions, graph has {}",
                estimates.n_regions(),
                graph.n_nodes()
            )));
        }
        let r = graph.n_nodes();
        let spatial = spec.family.is_spatial();
        let mut design = Self::layout(
            Level::Area,
            r,
            spatial,
            spec.shared_pair(),
            false,
            spec.priors,
            graph,
            estimates.region_labels.clone(),
            None,
        )?;
        let diagonal = spec.family.stage1_covariance_mode() == Stage1CovarianceMode::Diagonal;
        design.area = Some(prepare_area_data(estimates, diagonal, &design)?);
        for c in 0..2 {
            let any = (0..r).any(|i| estimates.availability[i][c]);
            if !any {
                return Err(SaeError::validation(format!(
                    "outcome {} has no available region; beta.{} is unidentified under a flat prior",
                    c + 1,
                    c + 1
                )));
            }
        }
        Ok(design)
    }

    pub fn for_unit(
        spec: &UnitModelSpec,
        data: &SurveyDataset,
        graph: &AdjacencyGraph,
        q: &RuralFractions,
    ) -> Result<Self> {
        spec.validate()?;
        if data.n_outcomes() != 2 {
            return Err(SaeError::usage(format!(
                "bivariate models need C = 2 outcomes, got {}",
                data.n_outcomes()
            )));
        }
        if data.region_count() != graph.n_nodes() {
            return Err(SaeError::validation(format!(
                "dataset covers {} regions, graph has {}",
                data.region_count(),
                graph.n_nodes()
            )));
        }
        if q.len() != graph.n_nodes() {
            return Err(SaeError::validation(format!(
                "rural fractions have length {}, graph has {} nodes",
                q.len(),
                graph.n_nodes()
            )));
        }
        let r = graph.n_nodes();
        let mut design = Self::layout(
            Level::Unit,
            r,
            spec.family.is_spatial(),
            spec.shared_pair(),
            spec.per_region_likelihood_variance,
            spec.priors,
            graph,
            data.region_labels().to_vec(),
            Some(q.values().to_vec()),
        )?;
        let unit = prepare_unit_data(data)?;
        if !unit.has_urban || !unit.has_rural {
            return Err(SaeError::validation(
                "dataset has a single urban/rural stratum everywhere; beta and gamma are jointly \
                 unidentified under flat priors",
            ));
        }
        for c in 0..2 {
            if unit.clusters.iter().all(|k| k.n[c] == 0) {
                return Err(SaeError::validation(format!(
                    "outcome {} has no observations; beta.{} is unidentified",
                    c + 1,
                    c + 1
                )));
            }
        }
        design.cluster_ids = unit.clusters.iter().map(|k| k.id.clone()).collect();
        design.unit = Some(unit);
        Ok(design)
    }

    #[allow(clippy::too_many_arguments)]
    fn layout(
        level: Level,
        r: usize,
        spatial: bool,
        shared: Option<(usize, usize)>,
        per_region_omega: bool,
        priors: PriorConfig,
        graph: &AdjacencyGraph,
        region_labels: Vec<String>,
        rural_q: Option<Vec<f64>>,
    ) -> Result<Self> {
        priors.validate()?;
        let (basis, eigenvalues, singleton) = if spatial {
            let icar = compute_scaling(&build_icar_precision(graph))?;
            let spectrum = icar.spectrum()?;
            let mut singleton = vec![false; r];
            for &s in icar.singletons() {
                singleton[s] = true;
            }
            (spectrum.basis.clone(), spectrum.eigenvalues.clone(), singleton)
        } else {
            (DMatrix::zeros(r, 0), DVector::zeros(0), vec![false; r])
        };
        let k = eigenvalues.len();
        let mut offset = 0usize;
        let off_beta = offset;
        offset += 2;
        let off_gamma = if level == Level::Unit {
            let o = offset;
            offset += 2;
            Some(o)
        } else {
            None
        };
        let off_v = [offset, offset + r];
        offset += 2 * r;
        let off_w = if spatial {
            let o = [offset, offset + k];
            offset += 2 * k;
            Some(o)
        } else {
            None
        };
        Ok(Self {
            level,
            n_regions: r,
            spatial,
            shared,
            per_region_omega,
            priors,
            dim: offset,
            off_beta,
            off_gamma,
            off_v,
            off_w,
            k_spatial: k,
            basis,
            eigenvalues,
            singleton,
            area: None,
            unit: None,
            cluster_ids: Vec::new(),
            region_labels,
            rural_q,
        })
    }

    /// Per-node iid loading (sigma-scaled) for one outcome.
    pub fn iid_coef(&self, hypers: &Hypers, c: usize) -> DVector<f64> {
        let mut coef = DVector::from_element(self.n_regions, hypers.sigma[c]);
        if self.spatial {
            let shrink = (1.0 - hypers.rho[c]).sqrt();
            for rgn in 0..self.n_regions {
                if !self.singleton[rgn] {
                    coef[rgn] *= shrink;
                }
            }
        }
        coef
    }

    /// Scalar spatial loading for one outcome (rows of E are zero on
    /// singleton nodes, so no per-node adjustment is needed).
    pub fn spatial_coef(&self, hypers: &Hypers, c: usize) -> f64 {
        if self.spatial {
            hypers.sigma[c] * hypers.rho[c].sqrt()
        } else {
            0.0
        }
    }

    pub fn omega(&self, hypers: &Hypers, c: usize, region: usize) -> f64 {
        if self.per_region_omega {
            hypers.omega[c * self.n_regions + region]
        } else {
            hypers.omega[c]
        }
    }

    pub fn initial_hypers(&self) -> Hypers {
        let omega_len = if self.level == Level::Unit {
            if self.per_region_omega {
                2 * self.n_regions
            } else {
                2
            }
        } else {
            0
        };
        Hypers {
            sigma: [0.5, 0.5],
            rho: [0.5, 0.5],
            lambda: 0.0,
            omega: vec![1.0; omega_len],
            sigma_eps: [0.5, 0.5],
        }
    }
}

fn prepare_area_data(
    estimates: &DirectEstimateSet,
    diagonal: bool,
    design: &Design,
) -> Result<AreaData> {
    let r = estimates.n_regions();
    let mut y = [DVector::zeros(r), DVector::zeros(r)];
    let mut prec = [DVector::zeros(r), DVector::zeros(r), DVector::zeros(r)];
    let mut avail = Vec::with_capacity(r);
    let mut loglik_const = 0.0;
    let mut floored = Vec::new();
    for rgn in 0..r {
        let a = [estimates.availability[rgn][0], estimates.availability[rgn][1]];
        avail.push(a);
        if !a[0] && !a[1] {
            continue;
        }
        let v = &estimates.v_hat[rgn];
        let mut v11 = v[(0, 0)];
        let mut v22 = v[(1, 1)];
        let v12 = if diagonal { 0.0 } else { v[(0, 1)] };
        if a[0] && v11 < VARIANCE_FLOOR {
            v11 = VARIANCE_FLOOR;
            floored.push(rgn);
        }
        if a[1] && v22 < VARIANCE_FLOOR {
            v22 = VARIANCE_FLOOR;
            if floored.last() != Some(&rgn) {
                floored.push(rgn);
            }
        }
        match (a[0], a[1]) {
            (true, true) => {
                let det = v11 * v22 - v12 * v12;
                if det <= 0.0 || v11 <= 0.0 || v22 <= 0.0 {
                    return Err(SaeError::numerical(format!(
                        "V-hat for region {} is not positive definite; rerun Stage 1 so its \
                         covariance is PSD-projected",
                        estimates.region_labels[rgn]
                    )));
                }
                prec[0][rgn] = v22 / det;
                prec[1][rgn] = -v12 / det;
                prec[2][rgn] = v11 / det;
                y[0][rgn] = estimates.y_hat[(rgn, 0)];
                y[1][rgn] = estimates.y_hat[(rgn, 1)];
                loglik_const += -LN_2PI - 0.5 * det.ln();
            }
            (true, false) => {
                prec[0][rgn] = 1.0 / v11;
                y[0][rgn] = estimates.y_hat[(rgn, 0)];
                loglik_const += -0.5 * LN_2PI - 0.5 * v11.ln();
            }
            (false, true) => {
                prec[2][rgn] = 1.0 / v22;
                y[1][rgn] = estimates.y_hat[(rgn, 1)];
                loglik_const += -0.5 * LN_2PI - 0.5 * v22.ln();
            }
            (false, false) => unreachable!(),
        }
    }
    let g_ww = if design.spatial {
        let e = &design.basis;
        let mut mats = Vec::with_capacity(3);
        for p in 0..3 {
            let mut scaled = e.clone();
            for rgn in 0..r {
                let w = prec[p][rgn];
                for k in 0..design.k_spatial {
                    scaled[(rgn, k)] *= w;
                }
            }
            mats.push(e.transpose() * scaled);
        }
        Some([mats[0].clone(), mats[1].clone(), mats[2].clone()])
    } else {
        None
    };
    Ok(AreaData {
        y,
        prec,
        avail,
        loglik_const,
        g_ww,
        floored_regions: floored,
    })
}

fn prepare_unit_data(data: &SurveyDataset) -> Result<UnitData> {
    let r = data.region_count();
    let mut clusters = Vec::new();
    for (id, idxs) in data.cluster_index() {
        let first = &data.records()[idxs[0]];
        let mut n = [0usize; 2];
        let mut sum = [0.0f64; 2];
        for &i in idxs {
            for c in 0..2 {
                if let Some(v) = data.records()[i].outcomes[c] {
                    n[c] += 1;
                    sum[c] += v;
                }
            }
        }
        let mut ybar = [0.0f64; 2];
        let mut rss = [0.0f64; 2];
        for c in 0..2 {
            if n[c] > 0 {
                ybar[c] = sum[c] / n[c] as f64;
            }
        }
        for &i in idxs {
            for c in 0..2 {
                if let Some(v) = data.records()[i].outcomes[c] {
                    rss[c] += (v - ybar[c]) * (v - ybar[c]);
                }
            }
        }
        clusters.push(ClusterStat {
            region: first.region,
            rural: first.rural,
            id: id.clone(),
            n,
            ybar,
            rss,
        });
    }
    let mut by_region_z = [vec![Vec::new(); r], vec![Vec::new(); r]];
    let mut has_urban = false;
    let mut has_rural = false;
    for (i, k) in clusters.iter().enumerate() {
        let z = usize::from(k.rural);
        by_region_z[z][k.region].push(i);
        if k.rural {
            has_rural = true;
        } else {
            has_urban = true;
        }
    }
    Ok(UnitData {
        clusters,
        by_region_z,
        has_urban,
        has_rural,
    })
}

/// Level-tagged data argument for [`crate::mcmc::fit`].
#[derive(Debug, Clone, Copy)]
pub enum FitData<'a> {
    Area(&'a DirectEstimateSet),
    Unit(&'a SurveyDataset, &'a RuralFractions),
}

pub(crate) fn build_design(
    spec: &ModelSpec,
    data: FitData<'_>,
    graph: &AdjacencyGraph,
) -> Result<Design> {
    match (spec, data) {
        (ModelSpec::Area(s), FitData::Area(est)) => Design::for_area(s, est, graph),
        (ModelSpec::Unit(s), FitData::Unit(d, q)) => Design::for_unit(s, d, graph, q),
        (ModelSpec::Area(_), _) => Err(SaeError::usage(
            "area-level model needs Stage-1 direct estimates as data",
        )),
        (ModelSpec::Unit(_), _) => Err(SaeError::usage(
            "unit-level model needs a survey dataset and rural fractions",
        )),
    }
}
