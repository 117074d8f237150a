//! Simulated staggered-adoption panels with propensity-score strata, and
//! the Monte Carlo harness that scores estimators on them.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::assignment::{compute_propensity, update_assignment_coefs, AssignmentParams, AssignmentPrior, StrataSpec};
use crate::dists::{derive_seed, normal_cdf, uniform_index, RngHandle};
use crate::engine::{fit, summarize_trace, McmcSchedule, ModelConfig, ModelKind, ModelVariant};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::panel::PanelDataset;

/// Stratum-specific coefficient paths: covariate `j` in stratum `g` has
/// coefficient `levels[g] + amplitude * sin(2π·frequency·t/T + phases[g])`
/// at period `t` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTrend {
    pub levels: Vec<f64>,
    pub phases: Vec<f64>,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Default for GroupTrend {
    fn default() -> Self {
        GroupTrend {
            levels: vec![1.0, 2.0, 3.0],
            phases: vec![0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0],
            amplitude: 1.0,
            frequency: 1.0,
        }
    }
}

impl GroupTrend {
    pub fn coefficient(&self, stratum: usize, t: usize, n_periods: usize) -> f64 {
        let angle = 2.0 * PI * self.frequency * t as f64 / n_periods as f64 + self.phases[stratum];
        self.levels[stratum] + self.amplitude * angle.sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub n_units: usize,
    pub n_periods: usize,
    /// First treated period (1-based) of early adopters.
    pub early_adopt_t: usize,
    pub late_adopt_t: usize,
    pub thresholds: Vec<f64>,
    /// Assignment coefficients on `(Z_1, Z_2, γ_1, ..., γ_r)`.
    pub lambda_true: Vec<f64>,
    pub n_factors_true: usize,
    pub noise_sd: f64,
    pub effect: f64,
    pub group_trend: GroupTrend,
    pub seed: u64,
}

/// Observed covariates in the simulated panels.
pub const DGP_COVARIATES: usize = 2;

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            n_units: 200,
            n_periods: 50,
            early_adopt_t: 45,
            late_adopt_t: 48,
            thresholds: vec![0.3, 0.6],
            lambda_true: vec![1.0; 4],
            n_factors_true: 2,
            noise_sd: 1.0,
            effect: 0.0,
            group_trend: GroupTrend::default(),
            seed: 1,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 || self.n_periods < 2 {
            return Err(Error::Domain("need at least two units and two periods".into()));
        }
        if !(1 < self.early_adopt_t && self.early_adopt_t < self.late_adopt_t && self.late_adopt_t <= self.n_periods) {
            return Err(Error::Domain(format!(
                "adoption periods must satisfy 1 < {} < {} <= {}",
                self.early_adopt_t, self.late_adopt_t, self.n_periods
            )));
        }
        let strata = StrataSpec::new(self.thresholds.clone())?;
        if self.lambda_true.len() != DGP_COVARIATES + self.n_factors_true {
            return Err(Error::Schema(format!(
                "{} assignment coefficients for {} covariates and {} factors",
                self.lambda_true.len(),
                DGP_COVARIATES,
                self.n_factors_true
            )));
        }
        let g = &self.group_trend;
        if g.levels.len() != strata.k() || g.phases.len() != strata.k() {
            return Err(Error::Schema(format!("group trend must list {} levels and phases", strata.k())));
        }
        if !(self.noise_sd > 0.0) || !self.effect.is_finite() {
            return Err(Error::Domain("noise sd must be positive and the effect finite".into()));
        }
        Ok(())
    }

    pub fn strata(&self) -> Result<StrataSpec> {
        StrataSpec::new(self.thresholds.clone())
    }
}

/// Ground truth behind a simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub scores: Vec<f64>,
    /// 0-based stratum per unit.
    pub strata: Vec<usize>,
    pub loadings: DMatrix<f64>,
    pub factors: DMatrix<f64>,
    pub n_factors: usize,
    pub att_true: f64,
}

/// Draws one panel. The stream is fully determined by `rng`.
pub fn generate_dataset(spec: &DgpSpec, rng: &mut RngHandle) -> Result<(PanelDataset, Truth)> {
    spec.validate()?;
    let strata = spec.strata()?;
    let (n, t_n, r) = (spec.n_units, spec.n_periods, spec.n_factors_true);
    let z = DMatrix::from_fn(n, DGP_COVARIATES, |_, _| rng.standard_normal());
    let loadings = DMatrix::from_fn(n, r, |_, _| rng.standard_normal());
    let lam = DVector::from_column_slice(&spec.lambda_true);
    let mut scores = Vec::with_capacity(n);
    let mut treated = Vec::new();
    for i in 0..n {
        let mut eta = 0.0;
        for j in 0..DGP_COVARIATES {
            eta += lam[j] * z[(i, j)];
        }
        for k in 0..r {
            eta += lam[DGP_COVARIATES + k] * loadings[(i, k)];
        }
        scores.push(normal_cdf(eta));
        if eta + rng.standard_normal() >= 0.0 {
            treated.push(i);
        }
    }
    if treated.is_empty() || treated.len() == n {
        return Err(Error::Domain("simulated assignment has no treated or no control units".into()));
    }
    // partial Fisher-Yates: the first half become early adopters
    let n_early = treated.len() / 2;
    for k in 0..n_early {
        let pick = k + uniform_index(treated.len() - k, rng);
        treated.swap(k, pick);
    }
    let mut adoption = vec![t_n + 1; n];
    for (k, &i) in treated.iter().enumerate() {
        adoption[i] = if k < n_early { spec.early_adopt_t } else { spec.late_adopt_t };
    }
    let stratum: Vec<usize> = scores.iter().map(|&s| strata.stratum_of(s)).collect();
    let factors = DMatrix::from_fn(t_n, r, |_, _| rng.standard_normal());
    let mut y = DMatrix::zeros(n, t_n);
    for t in 0..t_n {
        let coefs: Vec<f64> = (0..strata.k())
            .map(|g| spec.group_trend.coefficient(g, t + 1, t_n))
            .collect();
        for i in 0..n {
            let mut v = coefs[stratum[i]] * (0..DGP_COVARIATES).map(|j| z[(i, j)]).sum::<f64>();
            for k in 0..r {
                v += loadings[(i, k)] * factors[(t, k)];
            }
            v += spec.noise_sd * rng.standard_normal();
            if t + 1 >= adoption[i] {
                v += spec.effect;
            }
            y[(i, t)] = v;
        }
    }
    let names = (1..=DGP_COVARIATES).map(|j| format!("z{j}")).collect();
    let data = PanelDataset::from_adoption(y, adoption, z, names, true)?;
    Ok((
        data,
        Truth {
            scores,
            strata: stratum,
            loadings,
            factors,
            n_factors: r,
            att_true: spec.effect,
        },
    ))
}

/// Point estimate and interval for one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Anything that turns a simulated panel into an ATT estimate.
pub trait Estimator: Sync {
    fn label(&self) -> String;

    /// `rep` and `seed` identify the replication; `seed` is shared by every
    /// estimator scored on that replication.
    fn estimate(&self, data: &PanelDataset, truth: &Truth, rep: usize, seed: u64) -> Result<Estimate>;
}

/// The three Bayesian factor-model variants.
#[derive(Debug, Clone)]
pub struct BayesEstimator {
    pub kind: ModelKind,
    pub r_max: usize,
    pub strata: StrataSpec,
    pub schedule: McmcSchedule,
    pub config: ModelConfig,
    pub level: f64,
}

impl BayesEstimator {
    pub fn new(kind: ModelKind, r_max: usize, strata: StrataSpec, schedule: McmcSchedule) -> Self {
        BayesEstimator {
            kind,
            r_max,
            strata,
            schedule,
            config: ModelConfig::default(),
            level: 0.95,
        }
    }

    pub fn variant(&self, truth: &Truth) -> ModelVariant {
        match self.kind {
            ModelKind::PsLfm => ModelVariant::ps_lfm(self.r_max, self.strata.clone()),
            ModelKind::DmLfm => ModelVariant::dm_lfm(self.r_max),
            ModelKind::Oracle => ModelVariant::oracle(truth.scores.clone(), truth.n_factors, self.strata.clone()),
        }
    }
}

impl Estimator for BayesEstimator {
    fn label(&self) -> String {
        self.kind.label().to_string()
    }

    fn estimate(&self, data: &PanelDataset, truth: &Truth, _rep: usize, seed: u64) -> Result<Estimate> {
        let schedule = McmcSchedule { seed, ..self.schedule };
        let draws = fit(data, &self.variant(truth), &schedule, &self.config)?;
        let (point, _, lower, upper) = summarize_trace(&draws.att_overall, self.level)?;
        Ok(Estimate { point, lower, upper })
    }
}

/// Returns the truth with a zero-width interval; a harness check.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEstimator;

impl Estimator for IdentityEstimator {
    fn label(&self) -> String {
        "Identity".into()
    }

    fn estimate(&self, _data: &PanelDataset, truth: &Truth, _rep: usize, _seed: u64) -> Result<Estimate> {
        Ok(Estimate {
            point: truth.att_true,
            lower: truth.att_true,
            upper: truth.att_true,
        })
    }
}

/// Estimates produced elsewhere, one per replication, read from CSV with
/// columns `rep,estimate,lower,upper` (`rep` 0-based).
#[derive(Debug, Clone)]
pub struct ExternalEstimates {
    pub label: String,
    pub rows: std::collections::BTreeMap<usize, Estimate>,
}

impl ExternalEstimates {
    pub fn read_csv<R: Read>(label: impl Into<String>, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
        };
        let (c_rep, c_est, c_lo, c_hi) = (col("rep")?, col("estimate")?, col("lower")?, col("upper")?);
        let mut rows = std::collections::BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                rec[c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("bad number `{}`", &rec[c])))
            };
            let rep = rec[c_rep]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Schema(format!("bad replication index `{}`", &rec[c_rep])))?;
            rows.insert(
                rep,
                Estimate {
                    point: num(c_est)?,
                    lower: num(c_lo)?,
                    upper: num(c_hi)?,
                },
            );
        }
        Ok(ExternalEstimates {
            label: label.into(),
            rows,
        })
    }

    pub fn load(label: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(label, std::fs::File::open(path)?)
    }
}

impl Estimator for ExternalEstimates {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn estimate(&self, _data: &PanelDataset, _truth: &Truth, rep: usize, _seed: u64) -> Result<Estimate> {
        self.rows
            .get(&rep)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("no external estimate for replication {rep}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replication {
    pub rep: usize,
    pub estimate: Estimate,
    pub truth: f64,
}

impl Replication {
    pub fn covered(&self) -> bool {
        self.estimate.lower <= self.truth && self.truth <= self.estimate.upper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McStudyResult {
    pub label: String,
    pub replications: Vec<Replication>,
    /// `(rep, message)` for excluded replications.
    pub failures: Vec<(usize, String)>,
    pub bias: f64,
    pub rmse: f64,
    pub sampling_sd: f64,
    pub coverage: f64,
}

impl McStudyResult {
    /// Aggregates over successful replications. The sampling sd divides by
    /// the replication count, so `rmse² = bias² + sd²` when the truth is
    /// constant.
    pub fn from_replications(label: String, replications: Vec<Replication>, failures: Vec<(usize, String)>) -> Self {
        let n = replications.len() as f64;
        let (mut bias, mut mse, mut sd, mut covered) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
        if n > 0.0 {
            bias = replications.iter().map(|r| r.estimate.point - r.truth).sum::<f64>() / n;
            mse = replications.iter().map(|r| (r.estimate.point - r.truth).powi(2)).sum::<f64>() / n;
            let mean = replications.iter().map(|r| r.estimate.point).sum::<f64>() / n;
            sd = (replications.iter().map(|r| (r.estimate.point - mean).powi(2)).sum::<f64>() / n).sqrt();
            covered = replications.iter().filter(|r| r.covered()).count() as f64 / n;
        }
        McStudyResult {
            label,
            replications,
            failures,
            bias,
            rmse: mse.sqrt(),
            sampling_sd: sd,
            coverage: covered,
        }
    }

    /// One row per replication, then footer rows carrying the aggregates
    /// in the `estimate` column.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_replications_csv(std::slice::from_ref(self), w)
    }
}

pub fn write_replications_csv<W: Write>(results: &[McStudyResult], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["model", "rep", "estimate", "lower", "upper", "truth", "covered"])?;
    for res in results {
        for r in &res.replications {
            wtr.write_record([
                res.label.clone(),
                r.rep.to_string(),
                r.estimate.point.to_string(),
                r.estimate.lower.to_string(),
                r.estimate.upper.to_string(),
                r.truth.to_string(),
                u8::from(r.covered()).to_string(),
            ])?;
        }
        for (rep, _) in &res.failures {
            wtr.write_record([res.label.clone(), rep.to_string(), "failed".into(), "".into(), "".into(), "".into(), "".into()])?;
        }
    }
    for res in results {
        for (name, v) in [
            ("bias", res.bias),
            ("rmse", res.rmse),
            ("sampling_sd", res.sampling_sd),
            ("coverage", res.coverage),
        ] {
            wtr.write_record([res.label.clone(), name.into(), v.to_string(), "".into(), "".into(), "".into(), "".into()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// The aggregate table: `Model,Bias,RMSE,Sampling SD,Coverage Rate`.
pub fn write_table_csv<W: Write>(results: &[McStudyResult], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["Model", "Bias", "RMSE", "Sampling SD", "Coverage Rate"])?;
    for r in results {
        wtr.write_record([
            r.label.clone(),
            format!("{:.4}", r.bias),
            format!("{:.4}", r.rmse),
            format!("{:.4}", r.sampling_sd),
            format!("{:.4}", r.coverage),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Seed of the simulated panel in replication `rep`.
pub fn dataset_seed(master: u64, rep: usize) -> u64 {
    derive_seed(master, &[rep as u64, 0])
}

/// Seed handed to every estimator in replication `rep`.
pub fn fit_seed(master: u64, rep: usize) -> u64 {
    derive_seed(master, &[rep as u64, 1])
}

/// Scores every estimator on the same `n_reps` simulated panels.
///
/// Replications run in parallel when available; results come back in
/// replication order. An estimator failing on more than 5% of
/// replications aborts the study.
pub fn run_studies(
    spec: &DgpSpec,
    estimators: &[&dyn Estimator],
    n_reps: usize,
    master_seed: u64,
) -> Result<Vec<McStudyResult>> {
    if n_reps < 2 {
        return Err(Error::Precondition("a study needs at least two replications".into()));
    }
    spec.validate()?;
    let per_rep = map_indexed(n_reps, |rep| -> Result<Vec<Result<Replication>>> {
        let mut rng = RngHandle::new(dataset_seed(master_seed, rep), 0);
        let (data, truth) = generate_dataset(spec, &mut rng)?;
        let seed = fit_seed(master_seed, rep);
        Ok(estimators
            .iter()
            .map(|e| {
                e.estimate(&data, &truth, rep, seed).map(|estimate| Replication {
                    rep,
                    estimate,
                    truth: truth.att_true,
                })
            })
            .collect())
    });
    let per_rep: Vec<Vec<Result<Replication>>> = per_rep.into_iter().collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(estimators.len());
    for (k, e) in estimators.iter().enumerate() {
        let mut reps = Vec::new();
        let mut failures = Vec::new();
        for (rep, row) in per_rep.iter().enumerate() {
            match &row[k] {
                Ok(r) => reps.push(*r),
                Err(err) => {
                    log::warn!("{} failed on replication {rep}: {err}", e.label());
                    failures.push((rep, err.to_string()));
                }
            }
        }
        if failures.len() as f64 > 0.05 * n_reps as f64 {
            return Err(Error::StudyAborted {
                failures: failures.len(),
                reps: n_reps,
            });
        }
        out.push(McStudyResult::from_replications(e.label(), reps, failures));
    }
    Ok(out)
}

pub fn run_study(spec: &DgpSpec, estimator: &dyn Estimator, n_reps: usize, master_seed: u64) -> Result<McStudyResult> {
    Ok(run_studies(spec, &[estimator], n_reps, master_seed)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryReport {
    /// `None` when either score vector is constant.
    pub correlation: Option<f64>,
    pub rmse: f64,
}

/// Pearson correlation and RMSE between estimated and true scores.
pub fn propensity_recovery_check(estimated: &[f64], truth: &[f64]) -> Result<RecoveryReport> {
    if estimated.len() != truth.len() || truth.is_empty() {
        return Err(Error::Schema("score vectors differ in length or are empty".into()));
    }
    let n = truth.len() as f64;
    // centred on the first entry so constant vectors give exact zeros
    let me = estimated[0] + estimated.iter().map(|v| v - estimated[0]).sum::<f64>() / n;
    let mt = truth[0] + truth.iter().map(|v| v - truth[0]).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy, mut se) = (0.0, 0.0, 0.0, 0.0);
    for (&e, &t) in estimated.iter().zip(truth) {
        sxy += (e - me) * (t - mt);
        sxx += (e - me) * (e - me);
        syy += (t - mt) * (t - mt);
        se += (e - t) * (e - t);
    }
    let correlation = (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt());
    Ok(RecoveryReport {
        correlation,
        rmse: (se / n).sqrt(),
    })
}

/// Posterior-mean scores from a probit on the observed covariates alone.
pub fn covariate_probit_scores(
    data: &PanelDataset,
    prior: &AssignmentPrior,
    n_iter: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if burn_in >= n_iter {
        return Err(Error::Domain("burn-in must be below the iteration count".into()));
    }
    let n = data.n_units();
    let none = DMatrix::zeros(n, 0);
    let mut rng = RngHandle::new(seed, 0);
    let mut params = AssignmentParams::zeros(n, data.n_covariates(), 0);
    let mut sums = vec![0.0; n];
    for s in 0..n_iter {
        params = update_assignment_coefs(data, &none, &params, prior, &mut rng)?;
        if s >= burn_in {
            for (acc, p) in sums.iter_mut().zip(compute_propensity(data, &none, &params)) {
                *acc += p;
            }
        }
    }
    let kept = (n_iter - burn_in) as f64;
    Ok(sums.into_iter().map(|v| v / kept).collect())
}
