//! Outcome-stage conditional updates.
//!
//! Model for an untreated cell:
//!
//! ```text
//! y_it = Z̃_i'β + Z̃_i'(ω_ξ ∘ ξ̃_t) + (ω_γ ∘ γ̃_i)'f_t + ε_it,   ε_it ~ N(0, σ²)
//! ```
//!
//! with Bayesian-lasso priors on β, ω_ξ and ω_γ. Every likelihood sum in
//! this module runs over the cells of a [`CellLayout`] only; treated (and
//! placebo-masked) cells enter through [`impute_counterfactuals`] alone.
//!
//! Each update is split into a pure `*_conditional` function returning the
//! conditional distribution and a draw on top of it, so the conjugate
//! algebra can be checked directly.

use nalgebra::{DMatrix, DVector};

use crate::assignment::PropensityState;
use crate::dists::{draw_gamma, draw_inverse_gaussian, GaussianConditional, RngHandle};
use crate::error::{Error, Result};
use crate::panel::PanelDataset;

/// Floor on `|coefficient|` inside the inverse-Gaussian mean.
pub const COEF_FLOOR: f64 = 1e-10;

/// Which cells enter the outcome likelihood: for unit `i`, periods
/// `0..fit_len[i]` (0-based). The rest are imputed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLayout {
    fit_len: Vec<usize>,
    n_periods: usize,
}

impl CellLayout {
    /// Untreated cells of `data`, with the last `placebo` pre-treatment
    /// periods of each treated unit masked out.
    pub fn new(data: &PanelDataset, placebo: usize) -> Result<Self> {
        let t = data.n_periods();
        let mut fit_len = Vec::with_capacity(data.n_units());
        for i in 0..data.n_units() {
            if data.ever_treated(i) {
                let pre = data.pre_periods(i);
                if placebo >= pre {
                    return Err(Error::Precondition(format!(
                        "{placebo} placebo periods but unit {} has only {pre} pre-treatment periods",
                        i + 1
                    )));
                }
                fit_len.push(pre - placebo);
            } else {
                fit_len.push(t);
            }
        }
        Ok(CellLayout { fit_len, n_periods: t })
    }

    pub fn from_fit_lengths(fit_len: Vec<usize>, n_periods: usize) -> Self {
        assert!(fit_len.iter().all(|&l| l <= n_periods));
        CellLayout { fit_len, n_periods }
    }

    pub fn fit_len(&self, unit: usize) -> usize {
        self.fit_len[unit]
    }

    pub fn n_units(&self) -> usize {
        self.fit_len.len()
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn is_fitted(&self, unit: usize, period: usize) -> bool {
        period < self.fit_len[unit]
    }

    /// Number of cells in the likelihood.
    pub fn n_obs(&self) -> usize {
        self.fit_len.iter().sum()
    }

    /// Cells outside the likelihood, unit-major with periods ascending.
    pub fn imputed_cells(&self) -> Vec<(usize, usize)> {
        self.fit_len
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| (l..self.n_periods).map(move |t| (i, t)))
            .collect()
    }
}

/// Observed outcomes together with the cells allowed into the likelihood.
#[derive(Debug, Clone, Copy)]
pub struct Observed<'a> {
    pub y: &'a DMatrix<f64>,
    pub layout: &'a CellLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeParams {
    pub beta: DVector<f64>,
    pub omega_xi: DVector<f64>,
    pub omega_gamma: DVector<f64>,
    /// T x q normalized time effects.
    pub xi_tilde: DMatrix<f64>,
    /// N x r normalized loadings.
    pub gamma_tilde: DMatrix<f64>,
    /// T x r factors.
    pub factors: DMatrix<f64>,
    pub sigma2: f64,
}

impl OutcomeParams {
    pub fn zeros(n: usize, t: usize, q: usize, r: usize) -> Self {
        OutcomeParams {
            beta: DVector::zeros(q),
            omega_xi: DVector::zeros(q),
            omega_gamma: DVector::zeros(r),
            xi_tilde: DMatrix::zeros(t, q),
            gamma_tilde: DMatrix::zeros(n, r),
            factors: DMatrix::zeros(t, r),
            sigma2: 1.0,
        }
    }

    pub fn q(&self) -> usize {
        self.beta.len()
    }

    pub fn r(&self) -> usize {
        self.omega_gamma.len()
    }

    /// Full fitted mean `Z̃_i'β + Z̃_i'(ω_ξ∘ξ̃_t) + (ω_γ∘γ̃_i)'f_t`.
    pub fn fitted_mean(&self, design: &PropensityState, i: usize, t: usize) -> f64 {
        let seg = design.segments[i];
        let mut m = 0.0;
        for j in seg.offset..seg.offset + seg.len {
            let z = design.design[(i, j)];
            m += z * (self.beta[j] + self.omega_xi[j] * self.xi_tilde[(t, j)]);
        }
        for j in 0..self.r() {
            m += self.omega_gamma[j] * self.gamma_tilde[(i, j)] * self.factors[(t, j)];
        }
        m
    }

    /// `Z̃_i'β + Z̃_i'(ω_ξ∘ξ̃_t)`, the part without the factor term.
    fn covariate_mean(&self, design: &PropensityState, i: usize, t: usize) -> f64 {
        let seg = design.segments[i];
        let mut m = 0.0;
        for j in seg.offset..seg.offset + seg.len {
            m += design.design[(i, j)] * (self.beta[j] + self.omega_xi[j] * self.xi_tilde[(t, j)]);
        }
        m
    }

    fn static_mean(&self, design: &PropensityState, i: usize) -> f64 {
        let seg = design.segments[i];
        (seg.offset..seg.offset + seg.len)
            .map(|j| design.design[(i, j)] * self.beta[j])
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageHyper {
    pub a1: f64,
    pub a2: f64,
    pub c1: f64,
    pub c2: f64,
    pub k1: f64,
    pub k2: f64,
    pub e1: f64,
    pub e2: f64,
}

impl Default for ShrinkageHyper {
    fn default() -> Self {
        ShrinkageHyper {
            a1: 0.001,
            a2: 0.001,
            c1: 0.001,
            c2: 0.001,
            k1: 0.001,
            k2: 0.001,
            e1: 0.001,
            e2: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageState {
    pub tau2_beta: DVector<f64>,
    pub tau2_xi: DVector<f64>,
    pub tau2_gamma: DVector<f64>,
    pub kappa2_beta: f64,
    pub kappa2_xi: f64,
    pub kappa2_gamma: f64,
    pub hyper: ShrinkageHyper,
}

impl ShrinkageState {
    pub fn new(q: usize, r: usize, hyper: ShrinkageHyper) -> Self {
        ShrinkageState {
            tau2_beta: DVector::from_element(q, 1.0),
            tau2_xi: DVector::from_element(q, 1.0),
            tau2_gamma: DVector::from_element(r, 1.0),
            kappa2_beta: 1.0,
            kappa2_xi: 1.0,
            kappa2_gamma: 1.0,
            hyper,
        }
    }
}

/// Cumulative sums over periods of `h_t = (ξ̃_t, f_t)`, its outer product,
/// and nothing else. `outer(l)` is `Σ_{t<l} h_t h_t'`.
struct PeriodPrefix {
    h: usize,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl PeriodPrefix {
    fn new(xi: &DMatrix<f64>, f: &DMatrix<f64>) -> Self {
        let t_n = xi.nrows();
        let q = xi.ncols();
        let h = q + f.ncols();
        let mut first = vec![0.0; (t_n + 1) * h];
        let mut second = vec![0.0; (t_n + 1) * h * h];
        let mut row = vec![0.0; h];
        for t in 0..t_n {
            for a in 0..h {
                row[a] = if a < q { xi[(t, a)] } else { f[(t, a - q)] };
            }
            let (prev, next) = first.split_at_mut((t + 1) * h);
            for a in 0..h {
                next[a] = prev[t * h + a] + row[a];
            }
            let (prev, next) = second.split_at_mut((t + 1) * h * h);
            let base = t * h * h;
            for a in 0..h {
                for b in 0..h {
                    next[a * h + b] = prev[base + a * h + b] + row[a] * row[b];
                }
            }
        }
        PeriodPrefix { h, first, second }
    }

    fn sum(&self, l: usize, a: usize) -> f64 {
        self.first[l * self.h + a]
    }

    fn outer(&self, l: usize, a: usize, b: usize) -> f64 {
        self.second[(l * self.h + a) * self.h + b]
    }
}

/// Joint conditional of `(β, ω_ξ, ω_γ)`.
///
/// Regressor per fitted cell: `(Z̃_i, Z̃_i∘ξ̃_t, γ̃_i∘f_t)`; precision
/// `σ⁻²ΣxX' + diag(τ⁻²)`, linear term `σ⁻²Σx y`.
pub fn coefs_conditional(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &OutcomeParams,
    shrink: &ShrinkageState,
) -> Result<GaussianConditional> {
    let q = params.q();
    let r = params.r();
    let d = 2 * q + r;
    let prefix = PeriodPrefix::new(&params.xi_tilde, &params.factors);
    let mut prec = DMatrix::<f64>::zeros(d, d);
    let mut lin = DVector::<f64>::zeros(d);

    // compact regressor: (global index, coefficient, prefix slot or none)
    let mut idx: Vec<usize> = Vec::with_capacity(d);
    let mut coef: Vec<f64> = Vec::with_capacity(d);
    let mut slot: Vec<Option<usize>> = Vec::with_capacity(d);
    let mut ysum: Vec<f64> = Vec::with_capacity(d);
    for i in 0..obs.layout.n_units() {
        let l = obs.layout.fit_len(i);
        if l == 0 {
            continue;
        }
        let seg = design.segments[i];
        idx.clear();
        coef.clear();
        slot.clear();
        for j in seg.offset..seg.offset + seg.len {
            idx.push(j);
            coef.push(design.design[(i, j)]);
            slot.push(None);
        }
        for j in seg.offset..seg.offset + seg.len {
            idx.push(q + j);
            coef.push(design.design[(i, j)]);
            slot.push(Some(j));
        }
        for j in 0..r {
            idx.push(2 * q + j);
            coef.push(params.gamma_tilde[(i, j)]);
            slot.push(Some(q + j));
        }
        ysum.clear();
        for s in &slot {
            let v: f64 = match *s {
                None => (0..l).map(|t| obs.y[(i, t)]).sum(),
                Some(a) if a < q => (0..l).map(|t| obs.y[(i, t)] * params.xi_tilde[(t, a)]).sum(),
                Some(a) => (0..l).map(|t| obs.y[(i, t)] * params.factors[(t, a - q)]).sum(),
            };
            ysum.push(v);
        }
        let m = idx.len();
        for u in 0..m {
            lin[idx[u]] += coef[u] * ysum[u];
            for v in u..m {
                let s = match (slot[u], slot[v]) {
                    (None, None) => l as f64,
                    (None, Some(b)) | (Some(b), None) => prefix.sum(l, b),
                    (Some(a), Some(b)) => prefix.outer(l, a, b),
                };
                let val = coef[u] * coef[v] * s;
                let (a, b) = (idx[u], idx[v]);
                prec[(a.min(b), a.max(b))] += val;
            }
        }
    }
    let inv_s2 = 1.0 / params.sigma2;
    let taus = shrink
        .tau2_beta
        .iter()
        .chain(shrink.tau2_xi.iter())
        .chain(shrink.tau2_gamma.iter());
    for (a, tau2) in taus.enumerate() {
        for b in a..d {
            let v = prec[(a, b)] * inv_s2;
            prec[(a, b)] = v;
            prec[(b, a)] = v;
        }
        prec[(a, a)] += 1.0 / tau2;
    }
    lin *= inv_s2;
    GaussianConditional::from_canonical(prec, &lin)
}

/// Joint draw of `(β, ω_ξ, ω_γ)`; writes them into `params`.
pub fn update_coefs_joint(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &mut OutcomeParams,
    shrink: &ShrinkageState,
    rng: &mut RngHandle,
) -> Result<()> {
    let draw = coefs_conditional(obs, design, params, shrink)?.draw(rng);
    let q = params.q();
    let r = params.r();
    params.beta.copy_from(&draw.rows(0, q));
    params.omega_xi.copy_from(&draw.rows(q, q));
    params.omega_gamma.copy_from(&draw.rows(2 * q, r));
    Ok(())
}

/// Conditional of `γ̃_i` from the outcome model alone.
pub fn loading_conditional(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &OutcomeParams,
    unit: usize,
) -> Result<GaussianConditional> {
    let prefix = PeriodPrefix::new(&params.xi_tilde, &params.factors);
    loading_conditional_with(obs, design, params, unit, &prefix)
}

fn loading_conditional_with(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &OutcomeParams,
    unit: usize,
    prefix: &PeriodPrefix,
) -> Result<GaussianConditional> {
    let q = params.q();
    let r = params.r();
    let l = obs.layout.fit_len(unit);
    let inv_s2 = 1.0 / params.sigma2;
    let w = &params.omega_gamma;
    let mut prec = DMatrix::<f64>::identity(r, r);
    for a in 0..r {
        for b in 0..r {
            prec[(a, b)] += inv_s2 * w[a] * w[b] * prefix.outer(l, q + a, q + b);
        }
    }
    let mut lin = DVector::<f64>::zeros(r);
    for t in 0..l {
        let resid = obs.y[(unit, t)] - params.covariate_mean(design, unit, t);
        for a in 0..r {
            lin[a] += w[a] * params.factors[(t, a)] * resid;
        }
    }
    lin *= inv_s2;
    GaussianConditional::from_canonical(prec, &lin)
}

/// Redraws every `γ̃_i`. Units are conditionally independent here.
pub fn update_loadings(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &mut OutcomeParams,
    rng: &mut RngHandle,
) -> Result<()> {
    if params.r() == 0 {
        return Ok(());
    }
    let prefix = PeriodPrefix::new(&params.xi_tilde, &params.factors);
    for i in 0..obs.layout.n_units() {
        let draw = loading_conditional_with(obs, design, params, i, &prefix)?.draw(rng);
        params.gamma_tilde.set_row(i, &draw.transpose());
    }
    Ok(())
}

/// Per-unit regressor of the time-effect update, `(Z̃_i∘ω_ξ, ω_γ∘γ̃_i)` as
/// sparse `(index, value)` pairs in the `q + r` space.
fn time_regressor(design: &PropensityState, params: &OutcomeParams, i: usize, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let q = params.q();
    let seg = design.segments[i];
    for j in seg.offset..seg.offset + seg.len {
        out.push((j, design.design[(i, j)] * params.omega_xi[j]));
    }
    for j in 0..params.r() {
        out.push((q + j, params.omega_gamma[j] * params.gamma_tilde[(i, j)]));
    }
}

/// Conditional of `(ξ̃_t, f_t)`.
pub fn time_effect_conditional(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &OutcomeParams,
    period: usize,
) -> Result<GaussianConditional> {
    let h = params.q() + params.r();
    let inv_s2 = 1.0 / params.sigma2;
    let mut prec = DMatrix::<f64>::zeros(h, h);
    let mut lin = DVector::<f64>::zeros(h);
    let mut a = Vec::new();
    for i in 0..obs.layout.n_units() {
        if !obs.layout.is_fitted(i, period) {
            continue;
        }
        time_regressor(design, params, i, &mut a);
        let u = obs.y[(i, period)] - params.static_mean(design, i);
        for &(ja, va) in &a {
            lin[ja] += va * u;
            for &(jb, vb) in &a {
                prec[(ja, jb)] += va * vb;
            }
        }
    }
    prec *= inv_s2;
    for j in 0..h {
        prec[(j, j)] += 1.0;
    }
    lin *= inv_s2;
    GaussianConditional::from_canonical(prec, &lin)
}

/// Redraws `(ξ̃_t, f_t)` for every period.
///
/// The data precision at period `t` sums over units fitted at `t`; walking
/// periods backwards lets each unit's outer product be added once.
pub fn update_time_effects(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &mut OutcomeParams,
    rng: &mut RngHandle,
) -> Result<()> {
    let q = params.q();
    let r = params.r();
    let h = q + r;
    let n = obs.layout.n_units();
    let t_n = obs.layout.n_periods();
    let inv_s2 = 1.0 / params.sigma2;

    let mut by_len: Vec<Vec<usize>> = vec![Vec::new(); t_n + 1];
    for i in 0..n {
        by_len[obs.layout.fit_len(i)].push(i);
    }
    let static_mean: Vec<f64> = (0..n).map(|i| params.static_mean(design, i)).collect();
    let regressors: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let mut a = Vec::new();
            time_regressor(design, params, i, &mut a);
            a
        })
        .collect();

    let mut data_prec = DMatrix::<f64>::zeros(h, h);
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut draws = DMatrix::<f64>::zeros(t_n, h);
    for t in (0..t_n).rev() {
        for &i in &by_len[t + 1] {
            for &(ja, va) in &regressors[i] {
                for &(jb, vb) in &regressors[i] {
                    data_prec[(ja, jb)] += va * vb;
                }
            }
            active.push(i);
        }
        let mut lin = DVector::<f64>::zeros(h);
        for &i in &active {
            let u = obs.y[(i, t)] - static_mean[i];
            for &(j, v) in &regressors[i] {
                lin[j] += v * u;
            }
        }
        let mut prec = &data_prec * inv_s2;
        for j in 0..h {
            prec[(j, j)] += 1.0;
        }
        lin *= inv_s2;
        let draw = GaussianConditional::from_canonical(prec, &lin)?.draw(rng);
        draws.set_row(t, &draw.transpose());
    }
    params.xi_tilde.copy_from(&draws.columns(0, q));
    params.factors.copy_from(&draws.columns(q, r));
    Ok(())
}

/// Shape and rate of the Gamma conditional of `σ⁻²`:
/// `(N_obs/2 + e1, SS/2 + e2)`.
pub fn sigma2_conditional(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &OutcomeParams,
    hyper: &ShrinkageHyper,
) -> (f64, f64) {
    let mut ss = 0.0;
    for i in 0..obs.layout.n_units() {
        for t in 0..obs.layout.fit_len(i) {
            let e = obs.y[(i, t)] - params.fitted_mean(design, i, t);
            ss += e * e;
        }
    }
    (0.5 * obs.layout.n_obs() as f64 + hyper.e1, 0.5 * ss + hyper.e2)
}

pub fn update_sigma2(
    obs: Observed<'_>,
    design: &PropensityState,
    params: &mut OutcomeParams,
    hyper: &ShrinkageHyper,
    rng: &mut RngHandle,
) -> Result<()> {
    let (shape, rate) = sigma2_conditional(obs, design, params, hyper);
    params.sigma2 = 1.0 / draw_gamma(shape, rate, rng)?;
    Ok(())
}

/// Inverse-Gaussian parameters `(sqrt(κ²/c²), κ²)` of `τ⁻²` given a
/// coefficient value `c`, with `|c|` floored at [`COEF_FLOOR`].
pub fn local_shrinkage_params(coef: f64, kappa2: f64) -> (f64, f64) {
    let c = coef.abs().max(COEF_FLOOR);
    ((kappa2).sqrt() / c, kappa2)
}

/// Local shrinkage: every `τ²` from its inverse-Gaussian conditional.
pub fn update_local_shrinkage(params: &OutcomeParams, shrink: &mut ShrinkageState, rng: &mut RngHandle) -> Result<()> {
    let blocks = [
        (&params.beta, &mut shrink.tau2_beta, shrink.kappa2_beta),
        (&params.omega_xi, &mut shrink.tau2_xi, shrink.kappa2_xi),
        (&params.omega_gamma, &mut shrink.tau2_gamma, shrink.kappa2_gamma),
    ];
    for (coefs, taus, kappa2) in blocks {
        for (c, tau2) in coefs.iter().zip(taus.iter_mut()) {
            let (mu, lambda) = local_shrinkage_params(*c, kappa2);
            *tau2 = 1.0 / draw_inverse_gaussian(mu, lambda, rng)?;
        }
    }
    Ok(())
}

/// Shape and rate of the three global `κ²` conditionals, in the order
/// β, ξ, γ. Shapes use the actual coefficient counts.
pub fn global_shrinkage_params(shrink: &ShrinkageState) -> [(f64, f64); 3] {
    let h = &shrink.hyper;
    [
        (shrink.tau2_beta.len() as f64 + h.a1, 0.5 * shrink.tau2_beta.sum() + h.a2),
        (shrink.tau2_xi.len() as f64 + h.c1, 0.5 * shrink.tau2_xi.sum() + h.c2),
        (shrink.tau2_gamma.len() as f64 + h.k1, 0.5 * shrink.tau2_gamma.sum() + h.k2),
    ]
}

/// Global shrinkage. `κ²_γ` is left alone when there are no factors.
pub fn update_global_shrinkage(shrink: &mut ShrinkageState, rng: &mut RngHandle) -> Result<()> {
    let [b, x, g] = global_shrinkage_params(shrink);
    if !shrink.tau2_beta.is_empty() {
        shrink.kappa2_beta = draw_gamma(b.0, b.1, rng)?;
    }
    if !shrink.tau2_xi.is_empty() {
        shrink.kappa2_xi = draw_gamma(x.0, x.1, rng)?;
    }
    if !shrink.tau2_gamma.is_empty() {
        shrink.kappa2_gamma = draw_gamma(g.0, g.1, rng)?;
    }
    Ok(())
}

/// Counterfactual draws for the imputed cells of a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    /// `(unit, period)`, 0-based, in [`CellLayout::imputed_cells`] order.
    pub cells: Vec<(usize, usize)>,
    pub mean: Vec<f64>,
    pub y0: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Imputation: `Y_it(0) ~ N(fitted mean, σ²)`, `δ_it = Y_it − Y_it(0)`.
pub fn impute_counterfactuals(
    y: &DMatrix<f64>,
    layout: &CellLayout,
    design: &PropensityState,
    params: &OutcomeParams,
    rng: &mut RngHandle,
) -> Imputation {
    let cells = layout.imputed_cells();
    let sd = params.sigma2.sqrt();
    let mut mean = Vec::with_capacity(cells.len());
    let mut y0 = Vec::with_capacity(cells.len());
    let mut delta = Vec::with_capacity(cells.len());
    for &(i, t) in &cells {
        let m = params.fitted_mean(design, i, t);
        let draw = m + sd * rng.standard_normal();
        mean.push(m);
        y0.push(draw);
        delta.push(y[(i, t)] - draw);
    }
    Imputation {
        cells,
        mean,
        y0,
        delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{build_design, build_strata_design, PsDesign, StrataSpec};
    use approx::assert_relative_eq;

    /// Small random problem: N units, T periods, p covariates, k strata, r factors.
    fn setup(n: usize, t: usize, p: usize, k: usize, r: usize, seed: u64) -> (DMatrix<f64>, CellLayout, PropensityState, OutcomeParams, ShrinkageState) {
        let mut rng = RngHandle::new(seed, 0);
        let z = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.standard_normal() });
        let scores: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let thresholds: Vec<f64> = (1..k).map(|g| g as f64 / k as f64).collect();
        let design = build_strata_design(&z, &scores, &StrataSpec::new(thresholds).unwrap());
        let q = k * p;
        let mut params = OutcomeParams::zeros(n, t, q, r);
        for v in params.beta.iter_mut().chain(params.omega_xi.iter_mut()).chain(params.omega_gamma.iter_mut()) {
            *v = rng.standard_normal();
        }
        params.xi_tilde = DMatrix::from_fn(t, q, |_, _| rng.standard_normal());
        params.gamma_tilde = DMatrix::from_fn(n, r, |_, _| rng.standard_normal());
        params.factors = DMatrix::from_fn(t, r, |_, _| rng.standard_normal());
        params.sigma2 = 0.7;
        let y = DMatrix::from_fn(n, t, |_, _| rng.standard_normal());
        let fit: Vec<usize> = (0..n).map(|i| if i % 3 == 0 { t - 1 - (i % 2) } else { t }).collect();
        let layout = CellLayout::from_fit_lengths(fit, t);
        let mut shrink = ShrinkageState::new(q, r, ShrinkageHyper::default());
        for v in shrink.tau2_beta.iter_mut().chain(shrink.tau2_xi.iter_mut()).chain(shrink.tau2_gamma.iter_mut()) {
            *v = 0.5 + rng.standard_normal().abs();
        }
        (y, layout, design, params, shrink)
    }

    /// Dense per-cell construction of the joint coefficient conditional.
    fn brute_coefs(y: &DMatrix<f64>, layout: &CellLayout, design: &PropensityState, p: &OutcomeParams, s: &ShrinkageState) -> (DMatrix<f64>, DVector<f64>) {
        let q = p.q();
        let r = p.r();
        let d = 2 * q + r;
        let mut prec = DMatrix::zeros(d, d);
        let mut lin = DVector::zeros(d);
        for i in 0..layout.n_units() {
            for t in 0..layout.fit_len(i) {
                let x = DVector::from_fn(d, |j, _| {
                    if j < q {
                        design.design[(i, j)]
                    } else if j < 2 * q {
                        design.design[(i, j - q)] * p.xi_tilde[(t, j - q)]
                    } else {
                        p.gamma_tilde[(i, j - 2 * q)] * p.factors[(t, j - 2 * q)]
                    }
                });
                prec += &x * x.transpose() / p.sigma2;
                lin += &x * y[(i, t)] / p.sigma2;
            }
        }
        let taus: Vec<f64> = s.tau2_beta.iter().chain(s.tau2_xi.iter()).chain(s.tau2_gamma.iter()).copied().collect();
        for j in 0..d {
            prec[(j, j)] += 1.0 / taus[j];
        }
        (prec, lin)
    }

    #[test]
    fn coefs_conditional_matches_dense_construction() {
        let (y, layout, design, params, shrink) = setup(7, 5, 2, 3, 2, 1);
        let c = coefs_conditional(Observed { y: &y, layout: &layout }, &design, &params, &shrink).unwrap();
        let (prec, lin) = brute_coefs(&y, &layout, &design, &params, &shrink);
        assert_relative_eq!(c.precision, prec, epsilon = 1e-10, max_relative = 1e-10);
        let mean = prec.clone().try_inverse().unwrap() * lin;
        assert_relative_eq!(c.mean, mean, epsilon = 1e-10, max_relative = 1e-10);
    }

    #[test]
    fn coefs_three_cell_toy_by_hand() {
        // one covariate (constant), k = 1, r = 0: x = (1, ξ̃_t)
        let y = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 4.0]);
        let layout = CellLayout::from_fit_lengths(vec![3], 3);
        let design = build_strata_design(&DMatrix::from_element(1, 1, 1.0), &[0.5], &StrataSpec::single());
        let mut params = OutcomeParams::zeros(1, 3, 1, 0);
        params.xi_tilde = DMatrix::from_column_slice(3, 1, &[0.5, -1.0, 2.0]);
        params.sigma2 = 2.0;
        let mut shrink = ShrinkageState::new(1, 0, ShrinkageHyper::default());
        shrink.tau2_beta[0] = 4.0;
        shrink.tau2_xi[0] = 0.5;
        let c = coefs_conditional(Observed { y: &y, layout: &layout }, &design, &params, &shrink).unwrap();
        // Σxx' = [[3, 1.5], [1.5, 5.25]] / 2 + diag(0.25, 2)
        let prec = DMatrix::from_row_slice(2, 2, &[1.75, 0.75, 0.75, 4.625]);
        // Σxy = [7, 0.5 - 2 + 8] / 2
        let lin = DVector::from_vec(vec![3.5, 3.25]);
        assert_relative_eq!(c.precision, prec, epsilon = 1e-12);
        assert_relative_eq!(&c.precision * &c.mean, lin, epsilon = 1e-10);
        let det = 1.75 * 4.625 - 0.75 * 0.75;
        let mean = DVector::from_vec(vec![(4.625 * 3.5 - 0.75 * 3.25) / det, (-0.75 * 3.5 + 1.75 * 3.25) / det]);
        assert_relative_eq!(c.mean, mean, epsilon = 1e-10);
    }

    #[test]
    fn flat_prior_coefs_equal_ols() {
        let mut rng = RngHandle::new(4, 0);
        let (n, t) = (12, 6);
        let z = DMatrix::from_fn(n, 1, |_, _| rng.standard_normal());
        let design = build_strata_design(&z, &vec![0.5; n], &StrataSpec::single());
        let y = DMatrix::from_fn(n, t, |i, _| 1.5 * z[(i, 0)] + rng.standard_normal());
        let fit: Vec<usize> = (0..n).map(|i| if i < 3 { 4 } else { t }).collect();
        let layout = CellLayout::from_fit_lengths(fit, t);
        let mut params = OutcomeParams::zeros(n, t, 1, 0);
        params.sigma2 = 1.0;
        let mut shrink = ShrinkageState::new(1, 0, ShrinkageHyper::default());
        shrink.tau2_beta[0] = 1e30;
        shrink.tau2_xi[0] = 1e30;
        // ξ̃ = 0 makes the ω_ξ column zero; give it a tiny informative prior
        shrink.tau2_xi[0] = 1.0;
        let c = coefs_conditional(Observed { y: &y, layout: &layout }, &design, &params, &shrink).unwrap();
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for i in 0..n {
            for s in 0..layout.fit_len(i) {
                sxx += z[(i, 0)] * z[(i, 0)];
                sxy += z[(i, 0)] * y[(i, s)];
            }
        }
        assert!((c.mean[0] - sxy / sxx).abs() < 1e-8);
    }

    #[test]
    fn tiny_prior_variance_pins_coefs_at_zero() {
        let (y, layout, design, params, mut shrink) = setup(6, 4, 2, 2, 1, 2);
        shrink.tau2_beta.fill(1e-12);
        shrink.tau2_xi.fill(1e-12);
        shrink.tau2_gamma.fill(1e-12);
        let mut rng = RngHandle::new(3, 0);
        let mut p = params.clone();
        update_coefs_joint(Observed { y: &y, layout: &layout }, &design, &mut p, &shrink, &mut rng).unwrap();
        assert!(p.beta.iter().chain(p.omega_xi.iter()).chain(p.omega_gamma.iter()).all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn loading_conditional_matches_hand_computation() {
        // 1 unit, 2 periods, r = 1, q = 1
        let y = DMatrix::from_row_slice(1, 2, &[1.0, -0.5]);
        let layout = CellLayout::from_fit_lengths(vec![2], 2);
        let design = build_strata_design(&DMatrix::from_element(1, 1, 2.0), &[0.5], &StrataSpec::single());
        let mut params = OutcomeParams::zeros(1, 2, 1, 1);
        params.beta[0] = 0.25;
        params.omega_xi[0] = 0.5;
        params.xi_tilde = DMatrix::from_column_slice(2, 1, &[1.0, -2.0]);
        params.omega_gamma[0] = 1.5;
        params.factors = DMatrix::from_column_slice(2, 1, &[0.4, 1.2]);
        params.sigma2 = 0.5;
        let c = loading_conditional(Observed { y: &y, layout: &layout }, &design, &params, 0).unwrap();
        // R = y - 2*0.25 - 2*0.5*ξ̃ = (1 - 0.5 - 1, -0.5 - 0.5 + 2) = (-0.5, 1.0)
        // f̃ = 1.5 f = (0.6, 1.8); precision = 2 * (0.36 + 3.24) + 1 = 8.2
        // linear = 2 * (0.6 * -0.5 + 1.8 * 1.0) = 3.0
        assert_relative_eq!(c.precision[(0, 0)], 8.2, epsilon = 1e-12);
        assert_relative_eq!(c.mean[0], 3.0 / 8.2, epsilon = 1e-12);
    }

    #[test]
    fn zero_scale_loading_is_prior() {
        let (y, layout, design, mut params, _) = setup(5, 4, 2, 1, 2, 5);
        params.omega_gamma.fill(0.0);
        let c = loading_conditional(Observed { y: &y, layout: &layout }, &design, &params, 2).unwrap();
        assert_eq!(c.precision, DMatrix::identity(2, 2));
        assert!(c.mean.iter().all(|&v| v == 0.0));
        let empty = CellLayout::from_fit_lengths(vec![0; 5], 4);
        let (_, _, _, params, _) = setup(5, 4, 2, 1, 2, 5);
        let c = loading_conditional(Observed { y: &y, layout: &empty }, &design, &params, 1).unwrap();
        assert_eq!(c.precision, DMatrix::identity(2, 2));
    }

    #[test]
    fn loading_ignores_imputed_cells() {
        let (mut y, layout, design, params, _) = setup(6, 5, 2, 2, 2, 6);
        let obs = Observed { y: &y, layout: &layout };
        let before = loading_conditional(obs, &design, &params, 0).unwrap();
        // unit 0 fits 4 of 5 periods
        y[(0, 4)] += 100.0;
        let after = loading_conditional(Observed { y: &y, layout: &layout }, &design, &params, 0).unwrap();
        assert_eq!(before.mean, after.mean);
    }

    #[test]
    fn time_effect_conditional_two_unit_toy() {
        // q = 1 (k = 1, p = 1), r = 1, period 0, both units fitted
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let layout = CellLayout::from_fit_lengths(vec![1, 1], 1);
        let z = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let design = build_strata_design(&z, &[0.5, 0.5], &StrataSpec::single());
        let mut params = OutcomeParams::zeros(2, 1, 1, 1);
        params.beta[0] = 0.5;
        params.omega_xi[0] = 2.0;
        params.omega_gamma[0] = 0.5;
        params.gamma_tilde = DMatrix::from_column_slice(2, 1, &[1.0, -2.0]);
        params.sigma2 = 1.0;
        let c = time_effect_conditional(Observed { y: &y, layout: &layout }, &design, &params, 0).unwrap();
        // A_1 = (2, 0.5), A_2 = (4, -1); U = (0.5, 2)
        let prec = DMatrix::from_row_slice(2, 2, &[1.0 + 4.0 + 16.0, 1.0 - 4.0, 1.0 - 4.0, 1.0 + 0.25 + 1.0]);
        let lin = DVector::from_vec(vec![2.0 * 0.5 + 4.0 * 2.0, 0.5 * 0.5 - 2.0]);
        assert_relative_eq!(c.precision, prec, epsilon = 1e-12);
        assert_relative_eq!(c.mean, prec.try_inverse().unwrap() * lin, epsilon = 1e-10);
    }

    #[test]
    fn time_effects_backward_sweep_matches_per_period_conditionals() {
        let (y, layout, design, params, _) = setup(8, 6, 2, 2, 2, 7);
        let obs = Observed { y: &y, layout: &layout };
        // draw with a fixed stream, then recreate each period's draw from the conditional
        let mut p = params.clone();
        let mut rng = RngHandle::new(9, 1);
        update_time_effects(obs, &design, &mut p, &mut rng).unwrap();
        let mut rng = RngHandle::new(9, 1);
        for t in (0..6).rev() {
            let d = time_effect_conditional(obs, &design, &params, t).unwrap().draw(&mut rng);
            let row: Vec<f64> = p.xi_tilde.row(t).iter().chain(p.factors.row(t).iter()).copied().collect();
            for (a, b) in row.iter().zip(d.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn no_information_time_effects_are_prior() {
        let (y, _, design, mut params, _) = setup(5, 3, 2, 1, 1, 8);
        let empty = CellLayout::from_fit_lengths(vec![0; 5], 3);
        let c = time_effect_conditional(Observed { y: &y, layout: &empty }, &design, &params, 1).unwrap();
        assert_eq!(c.precision, DMatrix::identity(3, 3));
        let layout = CellLayout::from_fit_lengths(vec![3; 5], 3);
        params.omega_xi.fill(0.0);
        params.omega_gamma.fill(0.0);
        let c = time_effect_conditional(Observed { y: &y, layout: &layout }, &design, &params, 1).unwrap();
        assert_eq!(c.precision, DMatrix::identity(3, 3));
        assert!(c.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigma2_shape_counts_fitted_cells() {
        let (y, layout, design, params, _) = setup(6, 5, 2, 1, 1, 10);
        let h = ShrinkageHyper::default();
        let (shape, rate) = sigma2_conditional(Observed { y: &y, layout: &layout }, &design, &params, &h);
        assert_relative_eq!(shape, 0.5 * layout.n_obs() as f64 + h.e1);
        let mut ss = 0.0;
        for i in 0..6 {
            for t in 0..layout.fit_len(i) {
                ss += (y[(i, t)] - params.fitted_mean(&design, i, t)).powi(2);
            }
        }
        assert_relative_eq!(rate, 0.5 * ss + h.e2, epsilon = 1e-12);
    }

    #[test]
    fn perfect_fit_gives_tiny_sigma2() {
        let (_, layout, design, mut params, _) = setup(6, 5, 2, 1, 1, 11);
        params.sigma2 = 1.0;
        let y = DMatrix::from_fn(6, 5, |i, t| params.fitted_mean(&design, i, t));
        let mut rng = RngHandle::new(1, 0);
        update_sigma2(Observed { y: &y, layout: &layout }, &design, &mut params, &ShrinkageHyper::default(), &mut rng).unwrap();
        assert!(params.sigma2 < 1e-2 / layout.n_obs() as f64);
    }

    #[test]
    fn local_shrinkage_floor() {
        let (mu, lambda) = local_shrinkage_params(0.0, 4.0);
        assert_relative_eq!(mu, 2.0 / COEF_FLOOR);
        assert_eq!(lambda, 4.0);
        let mut rng = RngHandle::new(2, 0);
        let mut s = ShrinkageState::new(2, 1, ShrinkageHyper::default());
        let mut p = OutcomeParams::zeros(1, 1, 2, 1);
        p.beta[0] = 1e-300;
        for _ in 0..100 {
            update_local_shrinkage(&p, &mut s, &mut rng).unwrap();
            assert!(s.tau2_beta.iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }

    #[test]
    fn global_shrinkage_parameters() {
        let mut s = ShrinkageState::new(6, 0, ShrinkageHyper::default());
        s.tau2_beta = DVector::from_vec(vec![0.5, 0.5, 0.25, 0.25, 0.25, 0.25]);
        let [b, _, g] = global_shrinkage_params(&s);
        assert_relative_eq!(b.0, 6.001);
        assert_relative_eq!(b.1, 1.001);
        assert_relative_eq!(g.0, 0.001);
        let mut rng = RngHandle::new(3, 0);
        let before = s.kappa2_gamma;
        update_global_shrinkage(&mut s, &mut rng).unwrap();
        assert_eq!(s.kappa2_gamma, before);
        s.tau2_beta.fill(0.0);
        let [b, _, _] = global_shrinkage_params(&s);
        assert_relative_eq!(b.1, 0.001);
        update_global_shrinkage(&mut s, &mut rng).unwrap();
        assert!(s.kappa2_beta.is_finite() && s.kappa2_beta > 0.0);
    }

    #[test]
    fn imputation_bookkeeping() {
        let (y, layout, design, mut params, _) = setup(6, 5, 2, 1, 1, 12);
        let mut rng = RngHandle::new(4, 0);
        let imp = impute_counterfactuals(&y, &layout, &design, &params, &mut rng);
        assert_eq!(imp.cells.len(), 6 * 5 - layout.n_obs());
        params.sigma2 = 1e-300;
        let imp = impute_counterfactuals(&y, &layout, &design, &params, &mut rng);
        for (k, &(i, t)) in imp.cells.iter().enumerate() {
            assert!((imp.delta[k] - (y[(i, t)] - params.fitted_mean(&design, i, t))).abs() < 1e-12);
        }
    }

    #[test]
    fn continuous_design_runs_through_updates() {
        let (y, layout, _, _, _) = setup(6, 4, 2, 1, 1, 13);
        let z = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 * 0.1 });
        let design = build_design(&z, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &PsDesign::Continuous);
        let mut params = OutcomeParams::zeros(6, 4, 3, 1);
        params.omega_gamma[0] = 0.3;
        let shrink = ShrinkageState::new(3, 1, ShrinkageHyper::default());
        let obs = Observed { y: &y, layout: &layout };
        let c = coefs_conditional(obs, &design, &params, &shrink).unwrap();
        assert_eq!(c.mean.len(), 7);
        let (prec, _) = brute_coefs(&y, &layout, &design, &params, &shrink);
        assert_relative_eq!(c.precision, prec, epsilon = 1e-10, max_relative = 1e-10);
    }
}
