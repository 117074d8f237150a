//! Gibbs sampler orchestration: sweep order, chains, retained draws and
//! estimand extraction.
//!
//! One sweep runs, in order: rotation of the current factor draw, the
//! assignment update and propensity scores, the expanded design, the
//! joint coefficient draw, loadings, time effects, σ², shrinkage, and
//! counterfactual imputation. The assignment stage and the outcome stage
//! draw from separate random streams, so neither stage's randomness
//! depends on how much the other consumed.

use nalgebra::{DMatrix, DVector};

use crate::assignment::{
    build_design, compute_propensity, update_assignment_coefs, AssignmentParams, AssignmentPrior, PropensityState,
    PsDesign, StrataSpec,
};
use crate::diagnostics::{diagnose, DiagnosticReport};
use crate::dists::RngHandle;
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::outcome::{
    impute_counterfactuals, update_coefs_joint, update_global_shrinkage, update_loadings, update_local_shrinkage,
    update_sigma2, update_time_effects, CellLayout, Observed, OutcomeParams, ShrinkageHyper, ShrinkageState,
};
use crate::panel::PanelDataset;
use crate::rotation::{rotate_to_normalization, FactorBlock};

const ASSIGNMENT_STREAM: u64 = 0;
const OUTCOME_STREAM: u64 = 1;

/// Minimum retained draws per chain before a warning is logged.
pub const MIN_RETAINED: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McmcSchedule {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
}

impl Default for McmcSchedule {
    fn default() -> Self {
        McmcSchedule {
            n_iter: 5000,
            burn_in: 2500,
            thin: 5,
            n_chains: 2,
            seed: 20240101,
        }
    }
}

impl McmcSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.thin == 0 || self.n_chains == 0 {
            return Err(Error::Domain("iterations, thinning and chains must be positive".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Domain(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.n_iter
            )));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn retained(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    /// Whether sweep `s` (1-based) is kept.
    fn keeps(&self, s: usize) -> bool {
        s > self.burn_in && (s - self.burn_in).is_multiple_of(self.thin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    PsLfm,
    DmLfm,
    Oracle,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::PsLfm => "PS-LFM",
            ModelKind::DmLfm => "DM-LFM",
            ModelKind::Oracle => "Oracle",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "pslfm" => Ok(ModelKind::PsLfm),
            "dmlfm" => Ok(ModelKind::DmLfm),
            "oracle" => Ok(ModelKind::Oracle),
            _ => Err(Error::Domain(format!("unknown model variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelVariant {
    pub kind: ModelKind,
    pub r_max: usize,
    pub design: PsDesign,
    pub oracle_scores: Option<Vec<f64>>,
    pub oracle_r: Option<usize>,
}

impl ModelVariant {
    pub fn ps_lfm(r_max: usize, strata: StrataSpec) -> Self {
        ModelVariant {
            kind: ModelKind::PsLfm,
            r_max,
            design: PsDesign::Stratified(strata),
            oracle_scores: None,
            oracle_r: None,
        }
    }

    pub fn dm_lfm(r_max: usize) -> Self {
        ModelVariant {
            kind: ModelKind::DmLfm,
            r_max,
            design: PsDesign::Stratified(StrataSpec::single()),
            oracle_scores: None,
            oracle_r: None,
        }
    }

    pub fn oracle(scores: Vec<f64>, r: usize, strata: StrataSpec) -> Self {
        ModelVariant {
            kind: ModelKind::Oracle,
            r_max: r,
            design: PsDesign::Stratified(strata),
            oracle_scores: Some(scores),
            oracle_r: Some(r),
        }
    }

    /// Factor count used by the outcome model.
    pub fn n_factors(&self) -> usize {
        match self.kind {
            ModelKind::Oracle => self.oracle_r.unwrap_or(self.r_max),
            _ => self.r_max,
        }
    }

    pub fn validate(&self, n_units: usize) -> Result<()> {
        match self.kind {
            ModelKind::Oracle => {
                let scores = self
                    .oracle_scores
                    .as_ref()
                    .ok_or_else(|| Error::Precondition("oracle variant needs true scores".into()))?;
                if self.oracle_r.is_none() {
                    return Err(Error::Precondition("oracle variant needs the true factor count".into()));
                }
                if scores.len() != n_units {
                    return Err(Error::Schema(format!("{} oracle scores for {n_units} units", scores.len())));
                }
            }
            ModelKind::DmLfm => {
                if self.design != PsDesign::Stratified(StrataSpec::single()) {
                    return Err(Error::Precondition("DM-LFM uses a single stratum".into()));
                }
            }
            ModelKind::PsLfm => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub prior: AssignmentPrior,
    pub hyper: ShrinkageHyper,
    /// Pre-treatment horizons reported in the dynamic estimand.
    pub pre_horizons: usize,
    /// Keep per-cell δ draws.
    pub store_cells: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            prior: AssignmentPrior::default(),
            hyper: ShrinkageHyper::default(),
            pre_horizons: 5,
            store_cells: false,
        }
    }
}

/// Retained draws of all chains, concatenated in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub kind: ModelKind,
    pub n_chains: usize,
    pub draws_per_chain: usize,
    pub att_overall: Vec<f64>,
    /// Event times, ascending; negative ones are pre-treatment gaps.
    pub horizons: Vec<i64>,
    /// Cells behind each horizon.
    pub horizon_cells: Vec<usize>,
    /// draws x horizons.
    pub att_dynamic: DMatrix<f64>,
    /// Mean δ over the masked placebo cells, when any.
    pub att_placebo: Option<Vec<f64>>,
    pub placebo_cells: usize,
    /// Imputed cells `(unit, period)` and draws x cells δ, when requested.
    pub cells: Vec<(usize, usize)>,
    pub delta_cells: Option<DMatrix<f64>>,
    /// draws x N propensity scores; absent under DM-LFM.
    pub propensity: Option<DMatrix<f64>>,
    pub coef_names: Vec<String>,
    /// draws x coefficients.
    pub coef_tracks: DMatrix<f64>,
    /// Sweeps whose rotation hit tied eigenvalues.
    pub rotation_ties: usize,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.att_overall.len()
    }

    /// Per-chain slices of a concatenated trace.
    pub fn chain_slices<'a>(&self, trace: &'a [f64]) -> Vec<&'a [f64]> {
        trace.chunks(self.draws_per_chain.max(1)).collect()
    }

    pub fn coef_track(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.coef_names.iter().position(|n| n == name)?;
        Some(self.coef_tracks.column(j).iter().copied().collect())
    }

    pub fn propensity_mean(&self) -> Option<Vec<f64>> {
        let p = self.propensity.as_ref()?;
        Some((0..p.ncols()).map(|i| p.column(i).mean()).collect())
    }

    /// Split-R̂ and ESS for the overall ATT, placebo ATT and every
    /// coefficient trace.
    pub fn diagnostics(&self) -> DiagnosticReport {
        let mut traces: Vec<(String, Vec<f64>)> = vec![("att".into(), self.att_overall.clone())];
        if let Some(p) = &self.att_placebo {
            traces.push(("att_placebo".into(), p.clone()));
        }
        for (j, name) in self.coef_names.iter().enumerate() {
            traces.push((name.clone(), self.coef_tracks.column(j).iter().copied().collect()));
        }
        diagnose(traces.iter().map(|(n, t)| (n.clone(), self.chain_slices(t))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimandSummary {
    pub label: String,
    pub horizon: Option<i64>,
    pub n_cells: usize,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl EstimandSummary {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Linear-interpolated sample quantile (`q` in [0, 1]) of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sd and equal-tailed interval at `level`.
pub fn summarize_trace(x: &[f64], level: f64) -> Result<(f64, f64, f64, f64)> {
    if x.is_empty() {
        return Err(Error::Precondition("no draws to summarize".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("credible level {level} outside (0, 1)")));
    }
    let n = x.len() as f64;
    // centred on the first draw so constant traces come back exact
    let mean = x[0] + x.iter().map(|v| v - x[0]).sum::<f64>() / n;
    let sd = if x.len() > 1 {
        (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok((mean, sd, quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail)))
}

/// Overall ATT, then each dynamic horizon, then the placebo effect.
pub fn summarize_att(draws: &PosteriorDraws, level: f64) -> Result<Vec<EstimandSummary>> {
    let mut out = Vec::new();
    let (mean, sd, lower, upper) = summarize_trace(&draws.att_overall, level)?;
    let n_treated = draws
        .horizons
        .iter()
        .zip(&draws.horizon_cells)
        .filter(|(h, _)| **h >= 0)
        .map(|(_, c)| *c)
        .sum();
    out.push(EstimandSummary {
        label: "att".into(),
        horizon: None,
        n_cells: n_treated,
        mean,
        sd,
        lower,
        upper,
    });
    for (k, &h) in draws.horizons.iter().enumerate() {
        let col: Vec<f64> = draws.att_dynamic.column(k).iter().copied().collect();
        let (mean, sd, lower, upper) = summarize_trace(&col, level)?;
        out.push(EstimandSummary {
            label: format!("att_r{h}"),
            horizon: Some(h),
            n_cells: draws.horizon_cells[k],
            mean,
            sd,
            lower,
            upper,
        });
    }
    if let Some(p) = &draws.att_placebo {
        let (mean, sd, lower, upper) = summarize_trace(p, level)?;
        out.push(EstimandSummary {
            label: "att_placebo".into(),
            horizon: None,
            n_cells: draws.placebo_cells,
            mean,
            sd,
            lower,
            upper,
        });
    }
    Ok(out)
}

/// Where each imputed or pre-period cell feeds the estimands.
struct EstimandIndex {
    horizons: Vec<i64>,
    horizon_cells: Vec<usize>,
    /// per imputed cell: (horizon slot, is treated)
    imputed: Vec<(Option<usize>, bool)>,
    /// fitted pre-period cells of treated units: (unit, period, slot)
    gaps: Vec<(usize, usize, usize)>,
    n_treated: usize,
    n_masked: usize,
}

impl EstimandIndex {
    fn new(data: &PanelDataset, layout: &CellLayout, pre_horizons: usize) -> Self {
        let t_n = data.n_periods() as i64;
        let event = |i: usize, t: usize| t as i64 - data.pre_periods(i) as i64;
        let lead = -(pre_horizons as i64);
        let mut present = std::collections::BTreeMap::<i64, usize>::new();
        for i in (0..data.n_units()).filter(|&i| data.ever_treated(i)) {
            for t in 0..t_n as usize {
                let r = event(i, t);
                if r >= lead {
                    *present.entry(r).or_default() += 1;
                }
            }
        }
        for r in lead..0 {
            if !present.contains_key(&r) {
                log::info!("event time {r} has no cells and is omitted");
            }
        }
        let horizons: Vec<i64> = present.keys().copied().collect();
        let horizon_cells: Vec<usize> = present.values().copied().collect();
        let slot = |r: i64| horizons.binary_search(&r).ok();

        let cells = layout.imputed_cells();
        let mut imputed = Vec::with_capacity(cells.len());
        let (mut n_treated, mut n_masked) = (0, 0);
        for &(i, t) in &cells {
            let treated = data.treatment()[(i, t)] == 1;
            if treated {
                n_treated += 1;
            } else {
                n_masked += 1;
            }
            imputed.push((slot(event(i, t)), treated));
        }
        let mut gaps = Vec::new();
        for i in (0..data.n_units()).filter(|&i| data.ever_treated(i)) {
            for t in 0..layout.fit_len(i) {
                if let Some(s) = slot(event(i, t)) {
                    gaps.push((i, t, s));
                }
            }
        }
        EstimandIndex {
            horizons,
            horizon_cells,
            imputed,
            gaps,
            n_treated,
            n_masked,
        }
    }
}

/// Labels for the coefficient traces, in [`coef_vector`] order.
fn coef_names(data: &PanelDataset, design: &PsDesign, r: usize, with_assignment: bool) -> Vec<String> {
    let covs = data.covariate_names();
    let expanded: Vec<String> = match design {
        PsDesign::Stratified(spec) => (0..spec.k())
            .flat_map(|g| covs.iter().map(move |c| format!("s{}:{c}", g + 1)))
            .collect(),
        PsDesign::Continuous => covs.iter().cloned().chain(["score".to_string()]).collect(),
    };
    let mut names = vec!["sigma2".to_string()];
    names.extend(expanded.iter().map(|c| format!("beta[{c}]")));
    names.extend(expanded.iter().map(|c| format!("omega_xi[{c}]")));
    names.extend((1..=r).map(|j| format!("omega_gamma[{j}]")));
    names.extend(["kappa2_beta", "kappa2_xi", "kappa2_gamma"].map(String::from));
    if with_assignment {
        names.extend(covs.iter().map(|c| format!("lambda_z[{c}]")));
        names.extend((1..=r).map(|j| format!("lambda_gamma[{j}]")));
    }
    names
}

fn coef_vector(out: &mut Vec<f64>, o: &OutcomeParams, s: &ShrinkageState, a: Option<&AssignmentParams>) {
    out.clear();
    out.push(o.sigma2);
    out.extend(o.beta.iter());
    out.extend(o.omega_xi.iter());
    out.extend(o.omega_gamma.iter());
    out.extend([s.kappa2_beta, s.kappa2_xi, s.kappa2_gamma]);
    if let Some(a) = a {
        out.extend(a.lambda_z.iter());
        out.extend(a.lambda_gamma.iter());
    }
}

/// Warm start: σ² from the fitted cells, `(γ̃, f)` from the top-r SVD of
/// the demeaned outcome matrix with imputed cells set to unit means.
fn initial_outcome(y: &DMatrix<f64>, layout: &CellLayout, q: usize, r: usize) -> OutcomeParams {
    let (n, t_n) = y.shape();
    let mut params = OutcomeParams::zeros(n, t_n, q, r);
    let n_obs = layout.n_obs() as f64;
    let grand = (0..n).flat_map(|i| (0..layout.fit_len(i)).map(move |t| (i, t))).map(|c| y[c]).sum::<f64>() / n_obs;
    let ss = (0..n)
        .flat_map(|i| (0..layout.fit_len(i)).map(move |t| (i, t)))
        .map(|c| (y[c] - grand).powi(2))
        .sum::<f64>();
    params.sigma2 = if n_obs > 1.0 && ss > 0.0 { ss / (n_obs - 1.0) } else { 1.0 };
    params.omega_xi.fill(0.1);
    params.omega_gamma.fill(0.1);
    if r == 0 {
        return params;
    }
    let mut filled = y.clone();
    for i in 0..n {
        let l = layout.fit_len(i);
        let fill = if l > 0 { (0..l).map(|t| y[(i, t)]).sum::<f64>() / l as f64 } else { grand };
        for t in l..t_n {
            filled[(i, t)] = fill;
        }
    }
    filled.add_scalar_mut(-grand);
    let svd = filled.svd(true, true);
    let (u, v_t) = (svd.u.expect("left vectors"), svd.v_t.expect("right vectors"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let (sn, st) = ((n as f64).sqrt(), (t_n as f64).sqrt());
    for (j, &k) in order.iter().enumerate().take(r) {
        for i in 0..n {
            params.gamma_tilde[(i, j)] = u[(i, k)] * sn;
        }
        for t in 0..t_n {
            params.factors[(t, j)] = v_t[(k, t)] * st;
        }
    }
    params
}

/// One chain's retained draws.
struct ChainDraws {
    att_overall: Vec<f64>,
    att_dynamic: Vec<Vec<f64>>,
    att_placebo: Vec<f64>,
    delta_cells: Vec<Vec<f64>>,
    propensity: Vec<Vec<f64>>,
    coefs: Vec<Vec<f64>>,
    ties: usize,
}

struct ChainContext<'a> {
    data: &'a PanelDataset,
    variant: &'a ModelVariant,
    schedule: &'a McmcSchedule,
    config: &'a ModelConfig,
    layout: &'a CellLayout,
    index: &'a EstimandIndex,
}

fn run_chain_inner(ctx: &ChainContext<'_>, chain: usize) -> Result<ChainDraws> {
    let ChainContext {
        data,
        variant,
        schedule,
        config,
        layout,
        index,
    } = *ctx;
    let n = data.n_units();
    let p = data.n_covariates();
    let r = variant.n_factors();
    let q = variant.design.width(p);
    let y = data.outcome();
    let obs = Observed { y, layout };
    let mut rng_assign = RngHandle::derived(schedule.seed, &[chain as u64], ASSIGNMENT_STREAM);
    let mut rng_outcome = RngHandle::derived(schedule.seed, &[chain as u64], OUTCOME_STREAM);

    let mut outcome = initial_outcome(y, layout, q, r);
    let mut shrink = ShrinkageState::new(q, r, config.hyper);
    let mut assign = AssignmentParams::zeros(n, p, r);
    let fixed_scores = match variant.kind {
        ModelKind::PsLfm => None,
        ModelKind::DmLfm => Some(vec![0.5; n]),
        ModelKind::Oracle => variant.oracle_scores.clone(),
    };
    let mut design: PropensityState = build_design(
        data.covariates(),
        fixed_scores.as_deref().unwrap_or(&vec![0.5; n]),
        &variant.design,
    );

    let keep = schedule.retained();
    let h = index.horizons.len();
    let mut draws = ChainDraws {
        att_overall: Vec::with_capacity(keep),
        att_dynamic: Vec::with_capacity(keep),
        att_placebo: Vec::new(),
        delta_cells: Vec::new(),
        propensity: Vec::new(),
        coefs: Vec::with_capacity(keep),
        ties: 0,
    };
    let mut coefs = Vec::new();
    let mut sums = vec![0.0; h];

    for sweep in 1..=schedule.n_iter {
        if variant.kind == ModelKind::PsLfm {
            let loadings = if r > 0 {
                let block = FactorBlock::new(
                    outcome.gamma_tilde.clone(),
                    outcome.factors.clone(),
                    outcome.omega_gamma.clone(),
                )
                .map_err(|e| e.in_step(sweep, "rotation"))?;
                let rotated = rotate_to_normalization(&block).map_err(|e| e.in_step(sweep, "rotation"))?;
                if rotated.tie {
                    draws.ties += 1;
                }
                rotated.loadings
            } else {
                DMatrix::zeros(n, 0)
            };
            assign = update_assignment_coefs(data, &loadings, &assign, &config.prior, &mut rng_assign)
                .map_err(|e| e.in_step(sweep, "assignment"))?;
            let scores = compute_propensity(data, &loadings, &assign);
            design = build_design(data.covariates(), &scores, &variant.design);
        }

        update_coefs_joint(obs, &design, &mut outcome, &shrink, &mut rng_outcome)
            .map_err(|e| e.in_step(sweep, "coefficients"))?;
        update_loadings(obs, &design, &mut outcome, &mut rng_outcome).map_err(|e| e.in_step(sweep, "loadings"))?;
        update_time_effects(obs, &design, &mut outcome, &mut rng_outcome)
            .map_err(|e| e.in_step(sweep, "time_effects"))?;
        update_sigma2(obs, &design, &mut outcome, &config.hyper, &mut rng_outcome)
            .map_err(|e| e.in_step(sweep, "sigma2"))?;
        update_local_shrinkage(&outcome, &mut shrink, &mut rng_outcome)
            .map_err(|e| e.in_step(sweep, "local_shrinkage"))?;
        update_global_shrinkage(&mut shrink, &mut rng_outcome).map_err(|e| e.in_step(sweep, "global_shrinkage"))?;
        let imputed = impute_counterfactuals(y, layout, &design, &outcome, &mut rng_outcome);

        if !schedule.keeps(sweep) {
            continue;
        }
        sums.fill(0.0);
        let (mut treated_sum, mut masked_sum) = (0.0, 0.0);
        for (k, &(slot, treated)) in index.imputed.iter().enumerate() {
            let d = imputed.delta[k];
            if treated {
                treated_sum += d;
            } else {
                masked_sum += d;
            }
            if let Some(s) = slot {
                sums[s] += d;
            }
        }
        for &(i, t, s) in &index.gaps {
            sums[s] += y[(i, t)] - outcome.fitted_mean(&design, i, t);
        }
        draws.att_overall.push(treated_sum / index.n_treated as f64);
        draws
            .att_dynamic
            .push(sums.iter().zip(&index.horizon_cells).map(|(s, &c)| s / c as f64).collect());
        if index.n_masked > 0 {
            draws.att_placebo.push(masked_sum / index.n_masked as f64);
        }
        if config.store_cells {
            draws.delta_cells.push(imputed.delta);
        }
        if variant.kind != ModelKind::DmLfm {
            draws.propensity.push(design.scores.clone());
        }
        let a = (variant.kind == ModelKind::PsLfm).then_some(&assign);
        coef_vector(&mut coefs, &outcome, &shrink, a);
        draws.coefs.push(coefs.clone());
    }
    Ok(draws)
}

fn rows_to_matrix(rows: impl Iterator<Item = Vec<f64>>, n_rows: usize, n_cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_rows, n_cols);
    for (i, row) in rows.enumerate() {
        m.set_row(i, &DVector::from_vec(row).transpose());
    }
    m
}

fn fit_layout(
    data: &PanelDataset,
    variant: &ModelVariant,
    schedule: &McmcSchedule,
    config: &ModelConfig,
    placebo: usize,
    chain_ids: std::ops::Range<usize>,
) -> Result<PosteriorDraws> {
    schedule.validate()?;
    variant.validate(data.n_units())?;
    if data.n_treated_cells() == 0 {
        return Err(Error::Precondition("no treated cells to estimate effects on".into()));
    }
    if schedule.retained() < MIN_RETAINED {
        log::warn!("only {} retained draws per chain", schedule.retained());
    }
    let layout = CellLayout::new(data, placebo)?;
    let index = EstimandIndex::new(data, &layout, config.pre_horizons);
    let ctx = ChainContext {
        data,
        variant,
        schedule,
        config,
        layout: &layout,
        index: &index,
    };
    let n_chains = chain_ids.len();
    let chains = map_indexed(n_chains, |c| run_chain_inner(&ctx, chain_ids.start + c));
    let chains: Vec<ChainDraws> = chains.into_iter().collect::<Result<_>>()?;

    let per = schedule.retained();
    let total = per * n_chains;
    let names = coef_names(data, &variant.design, variant.n_factors(), variant.kind == ModelKind::PsLfm);
    let cells = layout.imputed_cells();
    let mut att_overall = Vec::with_capacity(total);
    let mut att_placebo = Vec::new();
    let mut ties = 0;
    for c in &chains {
        att_overall.extend(&c.att_overall);
        att_placebo.extend(&c.att_placebo);
        ties += c.ties;
    }
    let n_cells = cells.len();
    let att_dynamic = rows_to_matrix(
        chains.iter().flat_map(|c| c.att_dynamic.iter().cloned()),
        total,
        index.horizons.len(),
    );
    let delta_cells = config
        .store_cells
        .then(|| rows_to_matrix(chains.iter().flat_map(|c| c.delta_cells.iter().cloned()), total, n_cells));
    let propensity = (variant.kind != ModelKind::DmLfm).then(|| {
        rows_to_matrix(
            chains.iter().flat_map(|c| c.propensity.iter().cloned()),
            total,
            data.n_units(),
        )
    });
    let coef_tracks = rows_to_matrix(chains.iter().flat_map(|c| c.coefs.iter().cloned()), total, names.len());
    Ok(PosteriorDraws {
        kind: variant.kind,
        n_chains,
        draws_per_chain: per,
        att_overall,
        horizons: index.horizons.clone(),
        horizon_cells: index.horizon_cells.clone(),
        att_dynamic,
        att_placebo: (index.n_masked > 0).then_some(att_placebo),
        placebo_cells: index.n_masked,
        cells,
        delta_cells,
        propensity,
        coef_names: names,
        coef_tracks,
        rotation_ties: ties,
    })
}

/// Runs every chain of `schedule` (in parallel when available).
pub fn fit(
    data: &PanelDataset,
    variant: &ModelVariant,
    schedule: &McmcSchedule,
    config: &ModelConfig,
) -> Result<PosteriorDraws> {
    fit_layout(data, variant, schedule, config, 0, 0..schedule.n_chains)
}

/// A single chain with index `chain`; its streams are the same as in
/// [`fit`].
pub fn run_chain(
    data: &PanelDataset,
    variant: &ModelVariant,
    schedule: &McmcSchedule,
    config: &ModelConfig,
    chain: usize,
) -> Result<PosteriorDraws> {
    fit_layout(data, variant, schedule, config, 0, chain..chain + 1)
}

/// Fit with the last `placebo` pre-treatment periods of every treated unit
/// held out and imputed.
pub fn placebo_fit(
    data: &PanelDataset,
    variant: &ModelVariant,
    schedule: &McmcSchedule,
    config: &ModelConfig,
    placebo: usize,
) -> Result<PosteriorDraws> {
    fit_layout(data, variant, schedule, config, placebo, 0..schedule.n_chains)
}
