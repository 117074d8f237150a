//! Treatment-assignment stage: probit on covariates and rotated loadings,
//! propensity scores, and the expanded outcome design built from them.
//!
//! The probit coefficients are updated from the assignment likelihood only.
//! Outcomes never enter this module.

use nalgebra::{DMatrix, DVector};

use crate::dists::{draw_truncated_normal, normal_cdf, GaussianConditional, RngHandle, TruncationSide};
use crate::error::{Error, Result};
use crate::panel::PanelDataset;

/// Isotropic normal prior `N(mean * 1, variance * I)` on `(λ_z, λ_γ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignmentPrior {
    pub mean: f64,
    pub variance: f64,
}

impl Default for AssignmentPrior {
    fn default() -> Self {
        AssignmentPrior {
            mean: 0.0,
            variance: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentParams {
    pub lambda_z: DVector<f64>,
    pub lambda_gamma: DVector<f64>,
    /// Augmented utilities, positive exactly for ever-treated units.
    pub latent_utilities: DVector<f64>,
}

impl AssignmentParams {
    pub fn zeros(n_units: usize, p: usize, r: usize) -> Self {
        AssignmentParams {
            lambda_z: DVector::zeros(p),
            lambda_gamma: DVector::zeros(r),
            latent_utilities: DVector::zeros(n_units),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let p = self.lambda_z.len();
        DVector::from_fn(p + self.lambda_gamma.len(), |j, _| {
            if j < p {
                self.lambda_z[j]
            } else {
                self.lambda_gamma[j - p]
            }
        })
    }
}

/// `[Z | Γ]`, the probit regressor matrix.
pub fn assignment_design(covariates: &DMatrix<f64>, loadings: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = covariates.shape();
    let r = loadings.ncols();
    debug_assert_eq!(loadings.nrows(), n);
    DMatrix::from_fn(n, p + r, |i, j| {
        if j < p {
            covariates[(i, j)]
        } else {
            loadings[(i, j - p)]
        }
    })
}

/// Normal conditional of the stacked coefficients given utilities `u`:
/// precision `X'X + B^{-1}`, linear term `X'u + B^{-1} λ̄`.
pub fn lambda_conditional(
    design: &DMatrix<f64>,
    utilities: &DVector<f64>,
    prior: &AssignmentPrior,
) -> Result<GaussianConditional> {
    let k = design.ncols();
    let prior_prec = 1.0 / prior.variance;
    let mut precision = design.tr_mul(design);
    for j in 0..k {
        precision[(j, j)] += prior_prec;
    }
    let mut linear = design.tr_mul(utilities);
    linear.add_scalar_mut(prior_prec * prior.mean);
    GaussianConditional::from_canonical(precision, &linear)
}

/// One Albert–Chib sweep: utilities given λ, then λ given utilities.
pub fn update_assignment_coefs(
    data: &PanelDataset,
    rotated_loadings: &DMatrix<f64>,
    params: &AssignmentParams,
    prior: &AssignmentPrior,
    rng: &mut RngHandle,
) -> Result<AssignmentParams> {
    let x = assignment_design(data.covariates(), rotated_loadings);
    let eta = &x * params.stacked();
    let u = DVector::from_fn(data.n_units(), |i, _| {
        let side = if data.ever_treated(i) {
            TruncationSide::Positive
        } else {
            TruncationSide::Negative
        };
        draw_truncated_normal(eta[i], side, rng)
    });
    let lambda = lambda_conditional(&x, &u, prior)?.draw(rng);
    let p = data.n_covariates();
    Ok(AssignmentParams {
        lambda_z: lambda.rows(0, p).into_owned(),
        lambda_gamma: lambda.rows(p, rotated_loadings.ncols()).into_owned(),
        latent_utilities: u,
    })
}

/// `Φ(Z_i'λ_z + Γ_i'λ_γ)` for every unit.
pub fn compute_propensity(
    data: &PanelDataset,
    rotated_loadings: &DMatrix<f64>,
    params: &AssignmentParams,
) -> Vec<f64> {
    let x = assignment_design(data.covariates(), rotated_loadings);
    (&x * params.stacked()).iter().map(|&v| normal_cdf(v)).collect()
}

/// Strictly increasing interior thresholds `q_1 < ... < q_{k-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrataSpec {
    thresholds: Vec<f64>,
}

impl StrataSpec {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Domain(format!(
                "strata thresholds must lie in (0, 1): {thresholds:?}"
            )));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(format!(
                "strata thresholds must be strictly increasing: {thresholds:?}"
            )));
        }
        Ok(StrataSpec { thresholds })
    }

    /// A single stratum.
    pub fn single() -> Self {
        StrataSpec { thresholds: vec![] }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn k(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// 0-based stratum: number of thresholds at or below the score.
    pub fn stratum_of(&self, score: f64) -> usize {
        self.thresholds.iter().filter(|&&q| q <= score).count()
    }
}

/// How the propensity score enters the outcome design.
#[derive(Debug, Clone, PartialEq)]
pub enum PsDesign {
    /// Stratum indicator ⊗ covariates.
    Stratified(StrataSpec),
    /// Covariates with the score appended as a regressor.
    Continuous,
}

impl PsDesign {
    pub fn width(&self, p: usize) -> usize {
        match self {
            PsDesign::Stratified(s) => s.k() * p,
            PsDesign::Continuous => p + 1,
        }
    }
}

/// Contiguous nonzero block `[offset, offset + len)` of a design row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityState {
    pub scores: Vec<f64>,
    /// 0-based stratum per unit (all zero in continuous mode).
    pub stratum: Vec<usize>,
    /// N x q expanded design `Z̃`.
    pub design: DMatrix<f64>,
    pub segments: Vec<Segment>,
}

impl PropensityState {
    pub fn width(&self) -> usize {
        self.design.ncols()
    }

    /// Nonzero values of row `i`.
    pub fn row_values(&self, i: usize) -> Vec<f64> {
        let s = self.segments[i];
        (s.offset..s.offset + s.len).map(|j| self.design[(i, j)]).collect()
    }
}

/// `Z̃_i = e_{stratum_i} ⊗ Z_i` with blocks laid out by stratum.
pub fn build_strata_design(covariates: &DMatrix<f64>, scores: &[f64], spec: &StrataSpec) -> PropensityState {
    let (n, p) = covariates.shape();
    let k = spec.k();
    let stratum: Vec<usize> = scores.iter().map(|&s| spec.stratum_of(s)).collect();
    let mut design = DMatrix::<f64>::zeros(n, k * p);
    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let offset = stratum[i] * p;
        for j in 0..p {
            design[(i, offset + j)] = covariates[(i, j)];
        }
        segments.push(Segment { offset, len: p });
    }
    PropensityState {
        scores: scores.to_vec(),
        stratum,
        design,
        segments,
    }
}

pub fn build_design(covariates: &DMatrix<f64>, scores: &[f64], mode: &PsDesign) -> PropensityState {
    match mode {
        PsDesign::Stratified(spec) => build_strata_design(covariates, scores, spec),
        PsDesign::Continuous => {
            let (n, p) = covariates.shape();
            let design = DMatrix::from_fn(n, p + 1, |i, j| if j < p { covariates[(i, j)] } else { scores[i] });
            PropensityState {
                scores: scores.to_vec(),
                stratum: vec![0; n],
                design,
                segments: vec![Segment { offset: 0, len: p + 1 }; n],
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivityReport {
    pub epsilon: f64,
    pub n_low: usize,
    pub n_high: usize,
    /// `(treated, control)` per stratum.
    pub strata_counts: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl PositivityReport {
    /// Every stratum contains at least one treated and one control unit.
    pub fn all_strata_mixed(&self) -> bool {
        self.strata_counts.iter().all(|&(t, c)| t > 0 && c > 0)
    }
}

pub const DEFAULT_POSITIVITY_EPS: f64 = 0.01;

/// Overlap diagnostics; never fails.
pub fn positivity_report(scores: &[f64], ever_treated: &[bool], spec: &StrataSpec, epsilon: f64) -> PositivityReport {
    let n_low = scores.iter().filter(|&&s| s < epsilon).count();
    let n_high = scores.iter().filter(|&&s| s > 1.0 - epsilon).count();
    let mut strata_counts = vec![(0usize, 0usize); spec.k()];
    for (&s, &w) in scores.iter().zip(ever_treated) {
        let c = &mut strata_counts[spec.stratum_of(s)];
        if w {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    let mut warnings = Vec::new();
    if n_low > 0 {
        warnings.push(format!("{n_low} unit(s) with propensity below {epsilon}"));
    }
    if n_high > 0 {
        warnings.push(format!("{n_high} unit(s) with propensity above {}", 1.0 - epsilon));
    }
    for (g, &(t, c)) in strata_counts.iter().enumerate() {
        if t == 0 || c == 0 {
            warnings.push(format!("stratum {} has {t} treated and {c} control units", g + 1));
        }
    }
    PositivityReport {
        epsilon,
        n_low,
        n_high,
        strata_counts,
        warnings,
    }
}
