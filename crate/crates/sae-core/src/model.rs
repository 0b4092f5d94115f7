//! Declarative bivariate model specifications.
//!
//! Area-level candidates (Fay-Herriot second stages) and unit-level
//! candidates share the same building blocks: outcome-specific intercepts,
//! IID or BYM2 region effects, and an optional shared component where the
//! donor outcome's whole region effect enters the receiver's predictor
//! scaled by a coefficient lambda:
//!
//! ```text
//! area:  mu_r1 = beta_1 + s_r1 + lambda s_r2        mu_r2 = beta_2 + s_r2
//! unit:  mu_rki1 = beta_1 + z_rk gamma_1 + s_r1 + lambda s_r2 + eps_rk1
//!        mu_rki2 = beta_2 + z_rk gamma_2 + s_r2 + eps_rk2
//! ```
//!
//! Univariate area families take the Stage-1 covariance as diagonal; all
//! bivariate families use the full matrix. The covariance mode is derived
//! from the family so an inconsistent combination cannot be constructed.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::survey::RuralFractions;

/// Number of outcomes every bivariate model expects.
pub const N_OUTCOMES: usize = 2;

/// Default sd of the Gaussian prior on lambda (variance 1000).
pub fn default_lambda_sd() -> f64 {
    1000.0_f64.sqrt()
}

/// Prior on the shared coefficient lambda.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaPrior {
    Flat,
    Gaussian { mean: f64, sd: f64 },
}

impl Default for LambdaPrior {
    fn default() -> Self {
        LambdaPrior::Gaussian { mean: 0.0, sd: default_lambda_sd() }
    }
}

/// Hyperparameter priors: PC priors on standard deviations, Beta on each
/// mixing proportion, flat priors on fixed effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Threshold U of the PC prior: P(sd > U) = alpha.
    pub sd_pc_u: f64,
    /// Tail probability alpha of the PC prior.
    pub sd_pc_alpha: f64,
    /// Beta(a, b) prior on each rho.
    pub rho_beta: (f64, f64),
    pub lambda_prior: LambdaPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sd_pc_u: 1.0,
            sd_pc_alpha: 0.01,
            rho_beta: (1.0, 1.0),
            lambda_prior: LambdaPrior::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sd_pc_u > 0.0) {
            return Err(SaeError::validation("sd_pc_u must be positive"));
        }
        if !(self.sd_pc_alpha > 0.0 && self.sd_pc_alpha < 1.0) {
            return Err(SaeError::validation("sd_pc_alpha must lie in (0, 1)"));
        }
        if !(self.rho_beta.0 > 0.0 && self.rho_beta.1 > 0.0) {
            return Err(SaeError::validation("rho_beta parameters must be positive"));
        }
        if let LambdaPrior::Gaussian { sd, .. } = self.lambda_prior {
            if !(sd > 0.0) {
                return Err(SaeError::validation("lambda prior sd must be positive"));
            }
        }
        Ok(())
    }
}

/// Log density of the PC prior on a standard deviation: exponential with
/// rate theta = -ln(alpha)/U, so P(sd > U) = alpha exactly.
pub fn pc_prior_log_density(sd: f64, u: f64, alpha: f64) -> Result<f64> {
    if !(u > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(SaeError::validation("PC prior needs U > 0 and alpha in (0, 1)"));
    }
    if sd < 0.0 {
        return Err(SaeError::validation("sd must be nonnegative"));
    }
    let theta = -alpha.ln() / u;
    Ok(theta.ln() - theta * sd)
}

/// Whether the Stage-1 covariance enters fully or only through its diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage1CovarianceMode {
    Full,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaFamily {
    Direct,
    UniIid,
    UniBym,
    BivNonsharedIid,
    BivNonsharedBym,
    BivSharedIid,
    BivSharedBym,
}

impl AreaFamily {
    pub fn is_shared(self) -> bool {
        matches!(self, AreaFamily::BivSharedIid | AreaFamily::BivSharedBym)
    }

    pub fn is_spatial(self) -> bool {
        matches!(
            self,
            AreaFamily::UniBym | AreaFamily::BivNonsharedBym | AreaFamily::BivSharedBym
        )
    }

    /// Univariate families force the diagonal; bivariate ones the full matrix.
    pub fn stage1_covariance_mode(self) -> Stage1CovarianceMode {
        match self {
            AreaFamily::UniIid | AreaFamily::UniBym => Stage1CovarianceMode::Diagonal,
            _ => Stage1CovarianceMode::Full,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AreaFamily::Direct => "direct",
            AreaFamily::UniIid => "uni_iid",
            AreaFamily::UniBym => "uni_bym",
            AreaFamily::BivNonsharedIid => "biv_nonshared_iid",
            AreaFamily::BivNonsharedBym => "biv_nonshared_bym",
            AreaFamily::BivSharedIid => "biv_shared_iid",
            AreaFamily::BivSharedBym => "biv_shared_bym",
        }
    }

    pub const ALL: [AreaFamily; 7] = [
        AreaFamily::Direct,
        AreaFamily::UniIid,
        AreaFamily::UniBym,
        AreaFamily::BivNonsharedIid,
        AreaFamily::BivNonsharedBym,
        AreaFamily::BivSharedIid,
        AreaFamily::BivSharedBym,
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitFamily {
    IidNonshared,
    BymNonshared,
    IidShared,
    BymShared,
}

impl UnitFamily {
    pub fn is_shared(self) -> bool {
        matches!(self, UnitFamily::IidShared | UnitFamily::BymShared)
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, UnitFamily::BymNonshared | UnitFamily::BymShared)
    }

    pub fn name(self) -> &'static str {
        match self {
            UnitFamily::IidNonshared => "iid_nonshared",
            UnitFamily::BymNonshared => "bym_nonshared",
            UnitFamily::IidShared => "iid_shared",
            UnitFamily::BymShared => "bym_shared",
        }
    }

    pub const ALL: [UnitFamily; 4] = [
        UnitFamily::IidNonshared,
        UnitFamily::BymNonshared,
        UnitFamily::IidShared,
        UnitFamily::BymShared,
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

fn default_donor() -> usize {
    2
}

/// Area-level (Fay-Herriot second stage) model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaModelSpec {
    pub family: AreaFamily,
    /// 1-based outcome whose effect is shared into the other outcome.
    #[serde(default = "default_donor", rename = "shared_direction")]
    pub shared_donor: usize,
    #[serde(default)]
    pub priors: PriorConfig,
}

impl AreaModelSpec {
    pub fn new(family: AreaFamily) -> Self {
        Self { family, shared_donor: 2, priors: PriorConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        if self.shared_donor != 1 && self.shared_donor != 2 {
            return Err(SaeError::validation("shared_direction must be 1 or 2"));
        }
        Ok(())
    }

    /// 0-based (receiver, donor) outcome indices for the shared term.
    pub fn shared_pair(&self) -> Option<(usize, usize)> {
        if self.family.is_shared() {
            let donor = self.shared_donor - 1;
            Some((1 - donor, donor))
        } else {
            None
        }
    }

    pub fn model_id(&self) -> String {
        if self.family.is_shared() && self.shared_donor != 2 {
            format!("{}[shares_y1]", self.family.name())
        } else {
            self.family.name().to_string()
        }
    }
}

/// Unit-level model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitModelSpec {
    pub family: UnitFamily,
    /// Allow the Gaussian likelihood variance to differ by region.
    #[serde(default)]
    pub per_region_likelihood_variance: bool,
    #[serde(default = "default_donor", rename = "shared_direction")]
    pub shared_donor: usize,
    #[serde(default)]
    pub priors: PriorConfig,
}

impl UnitModelSpec {
    pub fn new(family: UnitFamily) -> Self {
        Self {
            family,
            per_region_likelihood_variance: false,
            shared_donor: 2,
            priors: PriorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        if self.shared_donor != 1 && self.shared_donor != 2 {
            return Err(SaeError::validation("shared_direction must be 1 or 2"));
        }
        Ok(())
    }

    pub fn shared_pair(&self) -> Option<(usize, usize)> {
        if self.family.is_shared() {
            let donor = self.shared_donor - 1;
            Some((1 - donor, donor))
        } else {
            None
        }
    }

    pub fn model_id(&self) -> String {
        if self.family.is_shared() && self.shared_donor != 2 {
            format!("{}[shares_y1]", self.family.name())
        } else {
            self.family.name().to_string()
        }
    }
}

/// Either level's specification, as serialized to model JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case")]
pub enum ModelSpec {
    Area(AreaModelSpec),
    Unit(UnitModelSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Area(s) => s.validate(),
            ModelSpec::Unit(s) => s.validate(),
        }
    }

    pub fn model_id(&self) -> String {
        match self {
            ModelSpec::Area(s) => s.model_id(),
            ModelSpec::Unit(s) => s.model_id(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Flip which outcome donates the shared component.
///
/// The two directions parameterize the same joint model: writing
/// t_1 = s_1 + lambda s_2, t_2 = s_2 turns the donor-2 form into a donor-1
/// form with coefficient 1/lambda and variances rescaled by 1/lambda^2, so
/// fitted region means agree up to sampling noise. Errors for non-shared
/// families.
pub fn reparameterize_shared_direction(spec: &ModelSpec) -> Result<ModelSpec> {
    match spec {
        ModelSpec::Area(s) => {
            if !s.family.is_shared() {
                return Err(SaeError::usage(format!(
                    "{} has no shared component to flip",
                    s.family.name()
                )));
            }
            let mut out = s.clone();
            out.shared_donor = 3 - s.shared_donor;
            Ok(ModelSpec::Area(out))
        }
        ModelSpec::Unit(s) => {
            if !s.family.is_shared() {
                return Err(SaeError::usage(format!(
                    "{} has no shared component to flip",
                    s.family.name()
                )));
            }
            let mut out = s.clone();
            out.shared_donor = 3 - s.shared_donor;
            Ok(ModelSpec::Unit(out))
        }
    }
}

/// Values of every latent symbol needed to evaluate a linear predictor.
/// `effects[c]` is outcome c's own realized region effect (IID or BYM2).
#[derive(Debug, Clone, Default)]
pub struct LatentState {
    pub beta: Option<[f64; 2]>,
    pub gamma: Option<[f64; 2]>,
    pub lambda: Option<f64>,
    pub effects: [Option<DVector<f64>>; 2],
    /// Cluster-level errors keyed by cluster id; `[f64; 2]` per outcome.
    pub cluster_errors: Option<BTreeMap<String, [f64; 2]>>,
}

impl LatentState {
    fn beta(&self) -> Result<[f64; 2]> {
        self.beta.ok_or_else(|| SaeError::validation("latent state is missing beta"))
    }

    fn gamma(&self) -> Result<[f64; 2]> {
        self.gamma.ok_or_else(|| SaeError::validation("latent state is missing gamma"))
    }

    fn lambda(&self) -> Result<f64> {
        self.lambda.ok_or_else(|| SaeError::validation("latent state is missing lambda"))
    }

    fn effect(&self, c: usize, region: usize) -> Result<f64> {
        let e = self.effects[c]
            .as_ref()
            .ok_or_else(|| SaeError::validation(format!("latent state is missing effects for outcome {}", c + 1)))?;
        e.get(region).copied().ok_or_else(|| {
            SaeError::validation(format!("effect vector for outcome {} has no region {}", c + 1, region + 1))
        })
    }

    fn cluster_error(&self, cluster: &str, c: usize) -> Result<f64> {
        let map = self
            .cluster_errors
            .as_ref()
            .ok_or_else(|| SaeError::validation("latent state is missing cluster errors"))?;
        map.get(cluster)
            .map(|e| e[c])
            .ok_or_else(|| SaeError::validation(format!("no cluster error for cluster {cluster:?}")))
    }

    /// Total (shared-inclusive) region effect g_c for each outcome.
    fn total_effects(
        &self,
        shared_pair: Option<(usize, usize)>,
        region: usize,
    ) -> Result<[f64; 2]> {
        let own = [self.effect(0, region)?, self.effect(1, region)?];
        let mut g = own;
        if let Some((receiver, donor)) = shared_pair {
            g[receiver] += self.lambda()? * own[donor];
        }
        Ok(g)
    }
}

/// Assemble the area-level mean vector mu_r for one region.
pub fn area_linear_predictor(
    spec: &AreaModelSpec,
    latent: &LatentState,
    region: usize,
) -> Result<[f64; 2]> {
    if spec.family == AreaFamily::Direct {
        return Err(SaeError::usage("the direct family has no linear predictor"));
    }
    let beta = latent.beta()?;
    let g = latent.total_effects(spec.shared_pair(), region)?;
    Ok([beta[0] + g[0], beta[1] + g[1]])
}

/// Assemble the unit-level mean vector mu_rki for one cluster member.
pub fn unit_linear_predictor(
    spec: &UnitModelSpec,
    latent: &LatentState,
    region: usize,
    cluster: &str,
    rural: bool,
) -> Result<[f64; 2]> {
    let beta = latent.beta()?;
    let gamma = latent.gamma()?;
    let g = latent.total_effects(spec.shared_pair(), region)?;
    let z = if rural { 1.0 } else { 0.0 };
    let mut mu = [0.0; 2];
    for c in 0..N_OUTCOMES {
        mu[c] = beta[c] + z * gamma[c] + g[c] + latent.cluster_error(cluster, c)?;
    }
    Ok(mu)
}

/// Aggregate a unit-level state to the region mean,
/// mu_rc = (1 - q_r)(beta_c + g_c) + q_r (beta_c + gamma_c + g_c),
/// excluding cluster-level errors.
pub fn aggregate_region_mean(
    spec: &UnitModelSpec,
    latent: &LatentState,
    q: &RuralFractions,
    region: usize,
) -> Result<[f64; 2]> {
    let beta = latent.beta()?;
    let gamma = latent.gamma()?;
    let q_r = q.get(region)?;
    let g = latent.total_effects(spec.shared_pair(), region)?;
    let mut mu = [0.0; 2];
    for c in 0..N_OUTCOMES {
        mu[c] = beta[c] + g[c] + q_r * gamma[c];
    }
    Ok(mu)
}
