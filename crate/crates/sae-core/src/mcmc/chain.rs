//! One MCMC chain: blocked Gaussian latent updates, a Gibbs step for the
//! shared coefficient, and adaptive random-walk Metropolis on transformed
//! hyperparameters (log sds, logit mixing proportions). Adaptation runs
//! during warmup only, targeting a 0.44 per-coordinate acceptance rate.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SaeError};
use crate::model::{pc_prior_log_density, LambdaPrior};

use super::design::{Design, Hypers, Level, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Transform {
    Log,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CoordTarget {
    Sigma(usize),
    Rho(usize),
    /// Flat index into `Hypers::omega`.
    Omega(usize),
    SigmaEps(usize),
}

#[derive(Debug, Clone)]
struct Coord {
    name: String,
    target: CoordTarget,
    transform: Transform,
}

/// Adaptation state of the per-coordinate random-walk proposals.
#[derive(Debug, Clone)]
pub struct AdaptState {
    log_step: Vec<f64>,
    proposals: Vec<u64>,
}

const TARGET_ACCEPT: f64 = 0.44;

/// Mutable state of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub hypers: Hypers,
    /// Flat latent vector (beta [, gamma], v*_1, v*_2 [, w_1, w_2]).
    pub x: DVector<f64>,
    /// Cached spatial projections u*_c = E w_c.
    pub spatial_proj: [DVector<f64>; 2],
    /// Cluster-level errors, aligned with the design's cluster order.
    pub eps: Vec<[f64; 2]>,
    /// Cached data log density given the current state.
    pub loglik: f64,
    adapt: AdaptState,
}

/// Sampler for one prepared design.
pub struct Sampler {
    pub(crate) design: Design,
    coords: Vec<Coord>,
    fixed: BTreeMap<String, f64>,
    pub(crate) prior_only: bool,
    initial_step: f64,
    adapt_enabled: bool,
}

impl Sampler {
    pub(crate) fn new(
        design: Design,
        fixed: BTreeMap<String, f64>,
        prior_only: bool,
        initial_step: f64,
        adapt_enabled: bool,
    ) -> Result<Self> {
        let mut coords = Vec::new();
        for c in 0..2 {
            coords.push(Coord {
                name: format!("sigma.{}", c + 1),
                target: CoordTarget::Sigma(c),
                transform: Transform::Log,
            });
        }
        if design.spatial {
            for c in 0..2 {
                coords.push(Coord {
                    name: format!("rho.{}", c + 1),
                    target: CoordTarget::Rho(c),
                    transform: Transform::Logit,
                });
            }
        }
        if design.level == Level::Unit {
            if design.per_region_omega {
                for c in 0..2 {
                    for r in 0..design.n_regions {
                        coords.push(Coord {
                            name: format!("omega.{}.{}", c + 1, r + 1),
                            target: CoordTarget::Omega(c * design.n_regions + r),
                            transform: Transform::Log,
                        });
                    }
                }
            } else {
                for c in 0..2 {
                    coords.push(Coord {
                        name: format!("omega.{}", c + 1),
                        target: CoordTarget::Omega(c),
                        transform: Transform::Log,
                    });
                }
            }
            for c in 0..2 {
                coords.push(Coord {
                    name: format!("sigma_eps.{}", c + 1),
                    target: CoordTarget::SigmaEps(c),
                    transform: Transform::Log,
                });
            }
        }
        // Reject unknown names in `fixed` early.
        for name in fixed.keys() {
            let known = name == "lambda" || coords.iter().any(|c| &c.name == name);
            if !known {
                return Err(SaeError::usage(format!(
                    "cannot fix unknown hyperparameter {name:?}"
                )));
            }
            if name != "lambda" && !(fixed[name] > 0.0 || name.starts_with("rho")) {
                return Err(SaeError::usage(format!(
                    "fixed value for {name:?} must be positive"
                )));
            }
        }
        Ok(Self {
            design,
            coords,
            fixed,
            prior_only,
            initial_step,
            adapt_enabled,
        })
    }

    pub(crate) fn design(&self) -> &Design {
        &self.design
    }

    /// Initialize a chain: hyperparameters drawn loosely around their priors
    /// (deterministic given the rng), latent field at zero.
    pub fn init_state(&self, rng: &mut ChaCha8Rng) -> Result<ChainState> {
        let design = &self.design;
        let mut hypers = design.initial_hypers();
        let theta = -design.priors.sd_pc_alpha.ln() / design.priors.sd_pc_u;
        for c in 0..2 {
            let u: f64 = rng.gen_range(0.05..0.95);
            hypers.sigma[c] = (-(1.0 - u).ln() / theta).clamp(0.01, 2.0);
            hypers.rho[c] = rng.gen_range(0.1..0.9);
        }
        if design.level == Level::Unit {
            let unit = design.unit.as_ref().unwrap();
            for c in 0..2 {
                // Pooled sd of cluster means as an omega starting point.
                let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
                for k in &unit.clusters {
                    if k.n[c] > 0 {
                        sum += k.ybar[c];
                        sq += k.ybar[c] * k.ybar[c];
                        n += 1;
                    }
                }
                let sd = if n > 1 {
                    let mean = sum / n as f64;
                    ((sq / n as f64 - mean * mean).max(1e-4)).sqrt()
                } else {
                    1.0
                };
                let jitter: f64 = rng.gen_range(-0.3..0.3);
                let omega0 = (sd * jitter.exp()).max(0.05);
                if design.per_region_omega {
                    for r in 0..design.n_regions {
                        hypers.omega[c * design.n_regions + r] = omega0;
                    }
                } else {
                    hypers.omega[c] = omega0;
                }
                hypers.sigma_eps[c] = (0.5 * sd).max(0.02);
            }
        }
        for (name, value) in &self.fixed {
            self.apply_fixed(&mut hypers, name, *value)?;
        }
        let x = DVector::zeros(design.dim);
        let spatial_proj = [DVector::zeros(design.n_regions), DVector::zeros(design.n_regions)];
        let n_clusters = design.unit.as_ref().map_or(0, |u| u.clusters.len());
        let mut state = ChainState {
            hypers,
            x,
            spatial_proj,
            eps: vec![[0.0; 2]; n_clusters],
            loglik: 0.0,
            adapt: AdaptState {
                log_step: vec![self.initial_step.max(0.0).ln(); self.coords.len()],
                proposals: vec![0; self.coords.len()],
            },
        };
        state.loglik = self.loglik(&state);
        Ok(state)
    }

    fn apply_fixed(&self, hypers: &mut Hypers, name: &str, value: f64) -> Result<()> {
        if name == "lambda" {
            hypers.lambda = value;
            return Ok(());
        }
        let coord = self
            .coords
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| SaeError::usage(format!("unknown hyperparameter {name:?}")))?;
        set_coord(hypers, coord.target, value);
        Ok(())
    }

    fn is_fixed(&self, name: &str) -> bool {
        self.fixed.contains_key(name)
    }

    /// Own (non-shared) realized region effect for one outcome.
    pub(crate) fn own_effect(&self, state: &ChainState, c: usize) -> DVector<f64> {
        let design = &self.design;
        let coef = design.iid_coef(&state.hypers, c);
        let b = design.spatial_coef(&state.hypers, c);
        let mut s = DVector::zeros(design.n_regions);
        for r in 0..design.n_regions {
            s[r] = coef[r] * state.x[design.off_v[c] + r];
            if design.spatial {
                s[r] += b * state.spatial_proj[c][r];
            }
        }
        s
    }

    /// Region-level mean contribution (excluding gamma) per outcome:
    /// beta_c + own_c [+ lambda own_donor for the receiver].
    pub(crate) fn region_means(&self, state: &ChainState) -> [DVector<f64>; 2] {
        let design = &self.design;
        let own = [self.own_effect(state, 0), self.own_effect(state, 1)];
        let mut mu = [own[0].clone(), own[1].clone()];
        for c in 0..2 {
            mu[c].add_scalar_mut(state.x[design.off_beta + c]);
        }
        if let Some((recv, donor)) = design.shared {
            let lambda = state.hypers.lambda;
            for r in 0..design.n_regions {
                mu[recv][r] += lambda * own[donor][r];
            }
        }
        mu
    }

    /// Full data log density given the current latent field and
    /// hyperparameters, with cluster errors integrated out at unit level.
    pub fn loglik(&self, state: &ChainState) -> f64 {
        if self.prior_only {
            return 0.0;
        }
        match self.design.level {
            Level::Area => self.loglik_area(state),
            Level::Unit => self.loglik_unit(state),
        }
    }

    fn loglik_area(&self, state: &ChainState) -> f64 {
        let design = &self.design;
        let area = design.area.as_ref().unwrap();
        let mu = self.region_means(state);
        let mut quad = 0.0;
        for r in 0..design.n_regions {
            let e0 = area.y[0][r] - mu[0][r];
            let e1 = area.y[1][r] - mu[1][r];
            let (k11, k12, k22) = (area.prec[0][r], area.prec[1][r], area.prec[2][r]);
            // Unavailable cells have zero precision entries and are stored as
            // y = 0; their residual terms vanish.
            let e0 = if area.avail[r][0] { e0 } else { 0.0 };
            let e1 = if area.avail[r][1] { e1 } else { 0.0 };
            quad += k11 * e0 * e0 + 2.0 * k12 * e0 * e1 + k22 * e1 * e1;
        }
        area.loglik_const - 0.5 * quad
    }

    fn loglik_unit(&self, state: &ChainState) -> f64 {
        let design = &self.design;
        let unit = design.unit.as_ref().unwrap();
        let mu = self.region_means(state);
        let gamma_off = design.off_gamma.unwrap();
        let mut ll = 0.0;
        for k in &unit.clusters {
            let z = if k.rural { 1.0 } else { 0.0 };
            for c in 0..2 {
                let n = k.n[c];
                if n == 0 {
                    continue;
                }
                let nf = n as f64;
                let omega = design.omega(&state.hypers, c, k.region);
                let se = state.hypers.sigma_eps[c];
                let m = mu[c][k.region] + z * state.x[gamma_off + c];
                let q = nf / (omega * omega) + 1.0 / (se * se);
                let tau2 = se * se + omega * omega / nf;
                ll += -0.5 * nf * LN_2PI - nf * omega.ln() - se.ln() - 0.5 * q.ln()
                    - k.rss[c] / (2.0 * omega * omega)
                    - (k.ybar[c] - m) * (k.ybar[c] - m) / (2.0 * tau2);
            }
        }
        ll
    }

    /// Collapsed per-(region, stratum) pseudo-observations for the latent
    /// update: precision H and precision-weighted mean.
    fn unit_pseudo_obs(&self, hypers: &Hypers) -> [[ (DVector<f64>, DVector<f64>); 2]; 2] {
        let design = &self.design;
        let unit = design.unit.as_ref().unwrap();
        let r = design.n_regions;
        let mut out = [
            [(DVector::zeros(r), DVector::zeros(r)), (DVector::zeros(r), DVector::zeros(r))],
            [(DVector::zeros(r), DVector::zeros(r)), (DVector::zeros(r), DVector::zeros(r))],
        ];
        for (z, per_region) in unit.by_region_z.iter().enumerate() {
            for (region, idxs) in per_region.iter().enumerate() {
                for &ki in idxs {
                    let k = &unit.clusters[ki];
                    for c in 0..2 {
                        if k.n[c] == 0 {
                            continue;
                        }
                        let omega = design.omega(hypers, c, region);
                        let tau2 = hypers.sigma_eps[c] * hypers.sigma_eps[c]
                            + omega * omega / k.n[c] as f64;
                        out[z][c].0[region] += 1.0 / tau2;
                        out[z][c].1[region] += k.ybar[c] / tau2;
                    }
                }
            }
        }
        // Turn precision-weighted sums into means.
        for zc in out.iter_mut() {
            for (h, wy) in zc.iter_mut() {
                for region in 0..r {
                    if h[region] > 0.0 {
                        wy[region] /= h[region];
                    }
                }
            }
        }
        out
    }

    /// Exact joint Gaussian draw of (beta [, gamma], v*, w) given
    /// hyperparameters, with cluster errors then refreshed conditionally.
    pub fn update_latent_field(&self, state: &mut ChainState, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.prior_only {
            self.draw_latent_from_prior(state, rng);
            self.refresh_cluster_errors(state, rng);
            state.loglik = self.loglik(state);
            return Ok(());
        }
        let (p, b) = self.latent_normal(&state.hypers);
        let dim = self.design.dim;
        let chol = nalgebra::Cholesky::new(p.clone()).ok_or_else(|| {
            let block = self.diagnose_singular(&p);
            SaeError::numerical(format!(
                "singular conditional precision for latent block {block}"
            ))
        })?;
        let mean = chol.solve(&b);
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let l = chol.l();
        let noise = l
            .tr_solve_lower_triangular(&z)
            .ok_or_else(|| SaeError::numerical("triangular solve failed in latent draw"))?;
        state.x = mean + noise;
        self.refresh_projection(state);
        self.refresh_cluster_errors(state, rng);
        state.loglik = self.loglik(state);
        if !state.loglik.is_finite() {
            return Err(SaeError::numerical(format!(
                "non-finite log density after latent update; state: {}",
                state.hypers.describe()
            )));
        }
        Ok(())
    }

    fn draw_latent_from_prior(&self, state: &mut ChainState, rng: &mut ChaCha8Rng) {
        let design = &self.design;
        state.x.fill(0.0);
        for c in 0..2 {
            for r in 0..design.n_regions {
                state.x[design.off_v[c] + r] = rng.sample::<f64, _>(StandardNormal);
            }
        }
        if let Some(off_w) = design.off_w {
            for c in 0..2 {
                for k in 0..design.k_spatial {
                    let z: f64 = rng.sample(StandardNormal);
                    state.x[off_w[c] + k] = z / design.eigenvalues[k].sqrt();
                }
            }
        }
        self.refresh_projection(state);
    }

    fn refresh_projection(&self, state: &mut ChainState) {
        let design = &self.design;
        if let Some(off_w) = design.off_w {
            for c in 0..2 {
                let w = state.x.rows(off_w[c], design.k_spatial).into_owned();
                state.spatial_proj[c] = &design.basis * w;
            }
        }
    }

    /// Conditional draw of every cluster error given the region-level state.
    fn refresh_cluster_errors(&self, state: &mut ChainState, rng: &mut ChaCha8Rng) {
        let design = &self.design;
        let Some(unit) = design.unit.as_ref() else {
            return;
        };
        let mu = self.region_means(state);
        let gamma_off = design.off_gamma.unwrap();
        for (ki, k) in unit.clusters.iter().enumerate() {
            let z = if k.rural { 1.0 } else { 0.0 };
            for c in 0..2 {
                let se = state.hypers.sigma_eps[c];
                if k.n[c] == 0 {
                    let noise: f64 = rng.sample(StandardNormal);
                    state.eps[ki][c] = se * noise;
                    continue;
                }
                let omega = design.omega(&state.hypers, c, k.region);
                let m = mu[c][k.region] + z * state.x[gamma_off + c];
                let prec = k.n[c] as f64 / (omega * omega) + 1.0 / (se * se);
                let mean = (k.n[c] as f64 / (omega * omega)) * (k.ybar[c] - m) / prec;
                let noise: f64 = rng.sample(StandardNormal);
                state.eps[ki][c] = mean + noise / prec.sqrt();
            }
        }
    }

    fn diagnose_singular(&self, p: &DMatrix<f64>) -> String {
        for i in 0..self.design.dim {
            if !(p[(i, i)] > 0.0) {
                return self.column_name(i);
            }
        }
        "unknown (precision is indefinite)".to_string()
    }

    /// Symbol owning latent coordinate `i`.
    pub(crate) fn column_name(&self, i: usize) -> String {
        let design = &self.design;
        if i < 2 {
            return format!("beta.{}", i + 1);
        }
        if let Some(g) = design.off_gamma {
            if i >= g && i < g + 2 {
                return format!("gamma.{}", i - g + 1);
            }
        }
        for c in 0..2 {
            if i >= design.off_v[c] && i < design.off_v[c] + design.n_regions {
                return format!("v_star.{}.{}", c + 1, i - design.off_v[c] + 1);
            }
        }
        if let Some(off_w) = design.off_w {
            for c in 0..2 {
                if i >= off_w[c] && i < off_w[c] + design.k_spatial {
                    return format!("w.{}.{}", c + 1, i - off_w[c] + 1);
                }
            }
        }
        format!("x[{i}]")
    }

    /// Assemble the full conditional precision and information vector of the
    /// latent field.
    pub(crate) fn latent_normal(&self, hypers: &Hypers) -> (DMatrix<f64>, DVector<f64>) {
        let design = &self.design;
        let dim = design.dim;
        let mut p = DMatrix::<f64>::zeros(dim, dim);
        let mut info = DVector::<f64>::zeros(dim);
        // Priors: v* standard normal, w from the scaled ICAR eigenvalues,
        // flat on beta/gamma.
        for c in 0..2 {
            for r in 0..design.n_regions {
                p[(design.off_v[c] + r, design.off_v[c] + r)] = 1.0;
            }
        }
        if let Some(off_w) = design.off_w {
            for c in 0..2 {
                for k in 0..design.k_spatial {
                    p[(off_w[c] + k, off_w[c] + k)] = design.eigenvalues[k];
                }
            }
        }

        match design.level {
            Level::Area => {
                let area = design.area.as_ref().unwrap();
                let terms = [self.terms(hypers, 0, None), self.terms(hypers, 1, None)];
                for c in 0..2 {
                    for cp in 0..2 {
                        let d = &area.prec[prec_index(c, cp)];
                        if d.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let g = area.g_ww.as_ref().map(|g| &g[prec_index(c, cp)]);
                        accumulate_pair(design, &mut p, &terms[c], &terms[cp], d, g);
                        accumulate_info(design, &mut info, &terms[c], d, &area.y[cp]);
                    }
                }
            }
            Level::Unit => {
                let pseudo = self.unit_pseudo_obs(hypers);
                let mut ww_weight = [DVector::zeros(design.n_regions), DVector::zeros(design.n_regions)];
                for z in 0..2 {
                    let terms = [
                        self.terms(hypers, 0, Some(z as f64)),
                        self.terms(hypers, 1, Some(z as f64)),
                    ];
                    for c in 0..2 {
                        let (h, ybar) = &pseudo[z][c];
                        if h.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        ww_weight[c] += h;
                        accumulate_pair(design, &mut p, &terms[c], &terms[c], h, None);
                        accumulate_info(design, &mut info, &terms[c], h, ybar);
                    }
                }
                // Spatial-spatial contributions, merged across strata since
                // the w loadings carry no urban/rural term.
                if design.spatial {
                    let terms = [self.terms(hypers, 0, Some(0.0)), self.terms(hypers, 1, Some(0.0))];
                    for c in 0..2 {
                        if ww_weight[c].iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let mut scaled = design.basis.clone();
                        for r in 0..design.n_regions {
                            let w = ww_weight[c][r];
                            for k in 0..design.k_spatial {
                                scaled[(r, k)] *= w;
                            }
                        }
                        let g = design.basis.transpose() * scaled;
                        for (off1, s1) in &terms[c].spatials {
                            for (off2, s2) in &terms[c].spatials {
                                let scale = s1 * s2;
                                for a in 0..design.k_spatial {
                                    for bcol in 0..design.k_spatial {
                                        p[(off1 + a, off2 + bcol)] += scale * g[(a, bcol)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (p, info)
    }

    /// Loadings of outcome `c`'s mean on the latent blocks.
    fn terms(&self, hypers: &Hypers, c: usize, z: Option<f64>) -> OutcomeTerms {
        let design = &self.design;
        let mut t = OutcomeTerms::default();
        t.points.push((design.off_beta + c, 1.0));
        if let (Some(gamma_off), Some(z)) = (design.off_gamma, z) {
            if z != 0.0 {
                t.points.push((gamma_off + c, z));
            }
        }
        t.nodes.push((design.off_v[c], design.iid_coef(hypers, c)));
        if let Some(off_w) = design.off_w {
            t.spatials.push((off_w[c], design.spatial_coef(hypers, c)));
        }
        if let Some((recv, donor)) = design.shared {
            if c == recv {
                let lambda = hypers.lambda;
                let mut coef = design.iid_coef(hypers, donor);
                coef *= lambda;
                t.nodes.push((design.off_v[donor], coef));
                if let Some(off_w) = design.off_w {
                    t.spatials
                        .push((off_w[donor], lambda * design.spatial_coef(hypers, donor)));
                }
            }
        }
        t
    }

    /// Gaussian full conditional (mean, variance) of lambda.
    pub fn lambda_conditional(&self, state: &ChainState) -> Result<(f64, f64)> {
        let design = &self.design;
        let (recv, donor) = design
            .shared
            .ok_or_else(|| SaeError::usage("model has no shared component"))?;
        let own_recv = self.own_effect(state, recv);
        let own_donor = self.own_effect(state, donor);
        let beta_recv = state.x[design.off_beta + recv];
        let beta_donor = state.x[design.off_beta + donor];
        let (prior_prec, prior_mean) = match design.priors.lambda_prior {
            LambdaPrior::Flat => (0.0, 0.0),
            LambdaPrior::Gaussian { mean, sd } => (1.0 / (sd * sd), mean),
        };
        let mut prec = prior_prec;
        let mut info = prior_prec * prior_mean;
        if !self.prior_only {
            match design.level {
                Level::Area => {
                    let area = design.area.as_ref().unwrap();
                    let (kaa, kab) = if recv == 0 {
                        (&area.prec[0], &area.prec[1])
                    } else {
                        (&area.prec[2], &area.prec[1])
                    };
                    for r in 0..design.n_regions {
                        let s = own_donor[r];
                        if kaa[r] == 0.0 && kab[r] == 0.0 {
                            continue;
                        }
                        let resid_recv = area.y[recv][r] - beta_recv - own_recv[r];
                        let resid_donor = area.y[donor][r] - beta_donor - own_donor[r];
                        prec += kaa[r] * s * s;
                        info += s * (kaa[r] * resid_recv + kab[r] * resid_donor);
                    }
                }
                Level::Unit => {
                    let pseudo = self.unit_pseudo_obs(&state.hypers);
                    let gamma_off = design.off_gamma.unwrap();
                    for z in 0..2 {
                        let (h, ybar) = &pseudo[z][recv];
                        for r in 0..design.n_regions {
                            if h[r] == 0.0 {
                                continue;
                            }
                            let s = own_donor[r];
                            let base = beta_recv
                                + z as f64 * state.x[gamma_off + recv]
                                + own_recv[r];
                            prec += h[r] * s * s;
                            info += h[r] * s * (ybar[r] - base);
                        }
                    }
                }
            }
        }
        if !(prec > 0.0) {
            return Err(SaeError::numerical(
                "shared effect is identically zero and the lambda prior is flat; \
                 the conditional is improper",
            ));
        }
        Ok((info / prec, 1.0 / prec))
    }

    /// Gibbs update of the shared coefficient.
    pub fn update_lambda(&self, state: &mut ChainState, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.design.shared.is_none() || self.is_fixed("lambda") {
            return Ok(());
        }
        let (mean, var) = self.lambda_conditional(state)?;
        let z: f64 = rng.sample(StandardNormal);
        state.hypers.lambda = mean + var.sqrt() * z;
        state.loglik = self.loglik(state);
        Ok(())
    }

    fn log_prior_transformed(&self, coord: &Coord, value: f64) -> f64 {
        let priors = &self.design.priors;
        match coord.target {
            CoordTarget::Sigma(_) | CoordTarget::Omega(_) | CoordTarget::SigmaEps(_) => {
                let lp = pc_prior_log_density(value, priors.sd_pc_u, priors.sd_pc_alpha)
                    .unwrap_or(f64::NEG_INFINITY);
                // Jacobian of the log transform.
                lp + value.ln()
            }
            CoordTarget::Rho(_) => {
                let (a, b) = priors.rho_beta;
                (a - 1.0) * value.ln() + (b - 1.0) * (1.0 - value).ln()
                    + value.ln()
                    + (1.0 - value).ln()
            }
        }
    }

    /// One adaptive random-walk Metropolis sweep over all non-fixed
    /// hyperparameters; `adapt` must be true only during warmup.
    pub fn update_hyperparameters(
        &self,
        state: &mut ChainState,
        rng: &mut ChaCha8Rng,
        adapt: bool,
    ) -> Result<()> {
        for (idx, coord) in self.coords.iter().enumerate() {
            if self.is_fixed(&coord.name) {
                continue;
            }
            let current = get_coord(&state.hypers, coord.target);
            let t = match coord.transform {
                Transform::Log => current.ln(),
                Transform::Logit => (current / (1.0 - current)).ln(),
            };
            let step = state.adapt.log_step[idx].exp();
            if step == 0.0 {
                continue;
            }
            let z: f64 = rng.sample(StandardNormal);
            let t_new = t + step * z;
            let proposed = match coord.transform {
                Transform::Log => t_new.exp(),
                Transform::Logit => 1.0 / (1.0 + (-t_new).exp()),
            };
            let u: f64 = rng.gen();
            let mut accepted = false;
            if proposed.is_finite() && proposed > 0.0 && (coord.transform != Transform::Logit || proposed < 1.0)
            {
                let old_lp = state.loglik + self.log_prior_transformed(coord, current);
                set_coord(&mut state.hypers, coord.target, proposed);
                let new_ll = self.loglik(state);
                let new_lp = new_ll + self.log_prior_transformed(coord, proposed);
                let log_ratio = new_lp - old_lp;
                if log_ratio.is_nan() {
                    set_coord(&mut state.hypers, coord.target, current);
                } else if u.ln() < log_ratio {
                    state.loglik = new_ll;
                    accepted = true;
                } else {
                    set_coord(&mut state.hypers, coord.target, current);
                }
            }
            if adapt && self.adapt_enabled && step > 0.0 {
                state.adapt.proposals[idx] += 1;
                let gamma = (state.adapt.proposals[idx] as f64).powf(-0.6).min(0.25);
                let delta = if accepted { 1.0 - TARGET_ACCEPT } else { -TARGET_ACCEPT };
                state.adapt.log_step[idx] += gamma * delta;
            }
        }
        if !state.loglik.is_finite() {
            return Err(SaeError::numerical(format!(
                "non-finite log density in hyperparameter update; state: {}",
                state.hypers.describe()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Default, Clone)]
struct OutcomeTerms {
    /// (column, coefficient): scalar coordinates loaded uniformly by region.
    points: Vec<(usize, f64)>,
    /// (block offset, per-region loading).
    nodes: Vec<(usize, DVector<f64>)>,
    /// (block offset, scale) for the shared spatial basis E.
    spatials: Vec<(usize, f64)>,
}

fn prec_index(c: usize, cp: usize) -> usize {
    match (c, cp) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Add X_c^T diag(d) X_cp into `p`, where the X's are described by term
/// lists. Spatial-spatial products use the precomputed Gram matrix `g`
/// when given, and are skipped entirely when `g` is None.
fn accumulate_pair(
    design: &Design,
    p: &mut DMatrix<f64>,
    tc: &OutcomeTerms,
    tcp: &OutcomeTerms,
    d: &DVector<f64>,
    g: Option<&DMatrix<f64>>,
) {
    let r = design.n_regions;
    let k = design.k_spatial;
    let dsum: f64 = d.sum();
    // Cache E^T d once when any point-spatial pair needs it.
    let need_ed = !tc.points.is_empty() && !tcp.spatials.is_empty()
        || !tcp.points.is_empty() && !tc.spatials.is_empty();
    let ed = if need_ed && k > 0 {
        Some(design.basis.tr_mul(d))
    } else {
        None
    };

    for &(col1, a1) in &tc.points {
        for &(col2, a2) in &tcp.points {
            p[(col1, col2)] += a1 * a2 * dsum;
        }
        for (off2, l2) in &tcp.nodes {
            for i in 0..r {
                p[(col1, off2 + i)] += a1 * d[i] * l2[i];
            }
        }
        for &(off2, s2) in &tcp.spatials {
            let ed = ed.as_ref().unwrap();
            for j in 0..k {
                p[(col1, off2 + j)] += a1 * s2 * ed[j];
            }
        }
    }
    for (off1, l1) in &tc.nodes {
        for &(col2, a2) in &tcp.points {
            for i in 0..r {
                p[(off1 + i, col2)] += l1[i] * a2 * d[i];
            }
        }
        for (off2, l2) in &tcp.nodes {
            for i in 0..r {
                p[(off1 + i, off2 + i)] += l1[i] * l2[i] * d[i];
            }
        }
        for &(off2, s2) in &tcp.spatials {
            for i in 0..r {
                let scale = l1[i] * d[i] * s2;
                if scale != 0.0 {
                    for j in 0..k {
                        p[(off1 + i, off2 + j)] += scale * design.basis[(i, j)];
                    }
                }
            }
        }
    }
    for &(off1, s1) in &tc.spatials {
        for &(col2, a2) in &tcp.points {
            let ed = ed.as_ref().unwrap();
            for j in 0..k {
                p[(off1 + j, col2)] += s1 * a2 * ed[j];
            }
        }
        for (off2, l2) in &tcp.nodes {
            for i in 0..r {
                let scale = s1 * l2[i] * d[i];
                if scale != 0.0 {
                    for j in 0..k {
                        p[(off1 + j, off2 + i)] += scale * design.basis[(i, j)];
                    }
                }
            }
        }
        if let Some(g) = g {
            for &(off2, s2) in &tcp.spatials {
                let scale = s1 * s2;
                for a in 0..k {
                    for b in 0..k {
                        p[(off1 + a, off2 + b)] += scale * g[(a, b)];
                    }
                }
            }
        }
    }
}

/// Add X_c^T (d .* y) into the information vector.
fn accumulate_info(
    design: &Design,
    info: &mut DVector<f64>,
    tc: &OutcomeTerms,
    d: &DVector<f64>,
    y: &DVector<f64>,
) {
    let r = design.n_regions;
    let k = design.k_spatial;
    let dy: DVector<f64> = d.component_mul(y);
    let dy_sum = dy.sum();
    for &(col, a) in &tc.points {
        info[col] += a * dy_sum;
    }
    for (off, l) in &tc.nodes {
        for i in 0..r {
            info[off + i] += l[i] * dy[i];
        }
    }
    if k > 0 && !tc.spatials.is_empty() {
        let edy = design.basis.tr_mul(&dy);
        for &(off, s) in &tc.spatials {
            for j in 0..k {
                info[off + j] += s * edy[j];
            }
        }
    }
}

fn get_coord(hypers: &Hypers, target: CoordTarget) -> f64 {
    match target {
        CoordTarget::Sigma(c) => hypers.sigma[c],
        CoordTarget::Rho(c) => hypers.rho[c],
        CoordTarget::Omega(i) => hypers.omega[i],
        CoordTarget::SigmaEps(c) => hypers.sigma_eps[c],
    }
}

fn set_coord(hypers: &mut Hypers, target: CoordTarget, value: f64) {
    match target {
        CoordTarget::Sigma(c) => hypers.sigma[c] = value,
        CoordTarget::Rho(c) => hypers.rho[c] = value,
        CoordTarget::Omega(i) => hypers.omega[i] = value,
        CoordTarget::SigmaEps(c) => hypers.sigma_eps[c] = value,
    }
}
