//! Seedable random streams and the distribution primitives used by the
//! Gibbs updates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, Open01, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a path of indices
/// (replication, chain, role, ...). Distinct paths give unrelated seeds.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(master), |acc, &k| mix64(acc ^ mix64(k.wrapping_add(0x5851_f42d_4c95_7f2d))))
}

/// A ChaCha8 stream identified by `(seed, stream)`.
///
/// Equal identifiers always produce the same sequence of draws. A handle
/// is owned by exactly one worker; it is `Send` but never shared.
#[derive(Debug, Clone)]
pub struct RngHandle {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngHandle { seed, stream, rng }
    }

    /// Handle for a path below a master seed; see [`derive_seed`].
    pub fn derived(master: u64, path: &[u64], stream: u64) -> Self {
        RngHandle::new(derive_seed(master, path), stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        Open01.sample(&mut self.rng)
    }
}

impl RngCore for RngHandle {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // one Newton step polishes the erfc_inv approximation
    let dens = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if dens > 0.0 {
        x - (normal_cdf(x) - p) / dens
    } else {
        x
    }
}

/// Gaussian given in canonical form: precision `P` and mean `P^{-1} b`.
///
/// One Cholesky factorization serves both the mean solve and the draw.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    chol: Cholesky,
}

impl GaussianConditional {
    pub fn from_canonical(precision: DMatrix<f64>, linear: &DVector<f64>) -> Result<Self> {
        let chol = Cholesky::new(&precision)?;
        let mean = chol.solve(linear);
        Ok(GaussianConditional {
            mean,
            precision,
            chol,
        })
    }

    pub fn from_mean(precision: DMatrix<f64>, mean: DVector<f64>) -> Result<Self> {
        let chol = Cholesky::new(&precision)?;
        Ok(GaussianConditional {
            mean,
            precision,
            chol,
        })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn draw(&self, rng: &mut RngHandle) -> DVector<f64> {
        let n = self.mean.len();
        let mut z = DVector::from_iterator(n, (0..n).map(|_| rng.standard_normal()));
        // x - mean = L'^{-1} z has covariance (L L')^{-1}
        self.chol.solve_upper_in_place(&mut z);
        z + &self.mean
    }
}

/// Draw from `N(mean, precision^{-1})`.
pub fn draw_mvnormal(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut RngHandle,
) -> Result<DVector<f64>> {
    Ok(GaussianConditional::from_mean(precision.clone(), mean.clone())?.draw(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationSide {
    /// Support `(0, inf)`.
    Positive,
    /// Support `(-inf, 0]`.
    Negative,
}

const INVERSE_CDF_LIMIT: f64 = 5.0;

/// Draw from `N(mean, 1)` restricted to one side of zero.
pub fn draw_truncated_normal(mean: f64, side: TruncationSide, rng: &mut RngHandle) -> f64 {
    match side {
        TruncationSide::Positive => positive_truncated(mean, rng),
        TruncationSide::Negative => -positive_truncated(-mean, rng),
    }
}

/// `mean + Z` with `Z > -mean`.
fn positive_truncated(mean: f64, rng: &mut RngHandle) -> f64 {
    let lower = -mean;
    if lower > INVERSE_CDF_LIMIT {
        // exponential proposal for a far tail (Robert 1995)
        let alpha = 0.5 * (lower + (lower * lower + 4.0).sqrt());
        loop {
            let e: f64 = Exp1.sample(rng);
            let z = lower + e / alpha;
            let accept = (-0.5 * (z - alpha) * (z - alpha)).exp();
            if rng.open01() <= accept {
                return mean + z;
            }
        }
    } else if lower < -INVERSE_CDF_LIMIT {
        loop {
            let z = rng.standard_normal();
            if z > lower {
                return mean + z;
            }
        }
    } else {
        // survival-scale inversion: Phi(-z) = u * Phi(-lower)
        let u = rng.open01();
        let z = -normal_quantile(u * normal_cdf(-lower));
        let x = mean + z;
        if x > 0.0 {
            x
        } else {
            f64::MIN_POSITIVE
        }
    }
}

/// Inverse Gaussian draw by the Michael–Schucany–Haas transformation.
pub fn draw_inverse_gaussian(mu: f64, lambda: f64, rng: &mut RngHandle) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) || !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!(
            "inverse Gaussian needs mu > 0 and lambda > 0, got mu = {mu}, lambda = {lambda}"
        )));
    }
    let nu = rng.standard_normal();
    let y = nu * nu;
    let my = mu * y;
    // larger root first; the smaller one is mu^2 / larger (no cancellation)
    let larger = mu + mu * my / (2.0 * lambda) + mu / (2.0 * lambda) * (4.0 * lambda * my + my * my).sqrt();
    let smaller = mu * (mu / larger);
    let u = rng.open01();
    let x = if u <= mu / (mu + smaller) { smaller } else { larger };
    Ok(x.max(f64::MIN_POSITIVE))
}

/// Gamma draw parameterized by shape and rate.
pub fn draw_gamma(shape: f64, rate: f64, rng: &mut RngHandle) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Domain(format!(
            "gamma needs shape > 0 and rate > 0, got shape = {shape}, rate = {rate}"
        )));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}

/// Uniform index in `0..n`.
pub(crate) fn uniform_index(n: usize, rng: &mut RngHandle) -> usize {
    rng.random_range(0..n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn cdf_reference_points() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert_abs_diff_eq!(normal_cdf(1.959964), 0.975, epsilon = 1e-6);
        for &x in &[0.1, 0.7, 1.3, 2.5, 4.0, 7.5] {
            assert_abs_diff_eq!(normal_cdf(-x), 1.0 - normal_cdf(x), epsilon = 1e-14);
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-10, 1e-4, 0.025, 0.3, 0.5, 0.8, 0.975, 1.0 - 1e-9] {
            assert_abs_diff_eq!(normal_cdf(normal_quantile(p)), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn same_handle_same_sequence() {
        let mut a = RngHandle::new(7, 3);
        let mut b = RngHandle::new(7, 3);
        for _ in 0..10 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
            assert_eq!(
                draw_truncated_normal(0.4, TruncationSide::Negative, &mut a).to_bits(),
                draw_truncated_normal(0.4, TruncationSide::Negative, &mut b).to_bits()
            );
            assert_eq!(
                draw_inverse_gaussian(2.0, 1.0, &mut a).unwrap().to_bits(),
                draw_inverse_gaussian(2.0, 1.0, &mut b).unwrap().to_bits()
            );
            assert_eq!(
                draw_gamma(2.0, 3.0, &mut a).unwrap().to_bits(),
                draw_gamma(2.0, 3.0, &mut b).unwrap().to_bits()
            );
        }
        let mut c = RngHandle::new(7, 4);
        let mut d = RngHandle::new(7, 3);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        let a = derive_seed(1, &[0, 0]);
        let b = derive_seed(1, &[0, 1]);
        let c = derive_seed(1, &[1, 0]);
        assert!(a != b && b != c && a != c);
        assert_eq!(a, derive_seed(1, &[0, 0]));
    }

    #[test]
    fn mvnormal_moments() {
        let mut rng = RngHandle::new(11, 0);
        let n = 100_000;
        let mean = DVector::from_vec(vec![0.0, 0.0]);
        let prec = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| draw_mvnormal(&mean, &prec, &mut rng).unwrap())
            .collect();
        let se_mean = 3.0 / (n as f64).sqrt();
        for (k, var) in [(0usize, 0.25f64), (1, 1.0)] {
            let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let (m, v) = mean_var(&xs);
            assert!(m.abs() < se_mean * var.sqrt(), "coord {k} mean {m}");
            // var of the sample variance is 2 sigma^4 / (n - 1)
            let se_var = (2.0 * var * var / (n as f64 - 1.0)).sqrt();
            assert!((v - var).abs() < 3.0 * se_var, "coord {k} var {v}");
        }
    }

    #[test]
    fn mvnormal_rejects_indefinite() {
        let mut rng = RngHandle::new(1, 0);
        let prec = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = draw_mvnormal(&DVector::zeros(2), &prec, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn truncated_normal_half_normal_mean() {
        let mut rng = RngHandle::new(5, 0);
        let n = 100_000;
        let target = (2.0 / std::f64::consts::PI).sqrt();
        let sd = (1.0 - 2.0 / std::f64::consts::PI).sqrt();
        let pos: Vec<f64> = (0..n)
            .map(|_| draw_truncated_normal(0.0, TruncationSide::Positive, &mut rng))
            .collect();
        let neg: Vec<f64> = (0..n)
            .map(|_| draw_truncated_normal(0.0, TruncationSide::Negative, &mut rng))
            .collect();
        assert!(pos.iter().all(|&x| x > 0.0));
        assert!(neg.iter().all(|&x| x <= 0.0));
        let se = 3.0 * sd / (n as f64).sqrt();
        assert!((mean_var(&pos).0 - target).abs() < se);
        assert!((mean_var(&neg).0 + target).abs() < se);
    }

    #[test]
    fn truncated_normal_tails_are_stable() {
        let mut rng = RngHandle::new(9, 0);
        for &m in &[-8.0, -6.0, -5.5, 5.5, 8.0] {
            for _ in 0..2000 {
                let x = draw_truncated_normal(m, TruncationSide::Positive, &mut rng);
                assert!(x.is_finite() && x > 0.0, "mean {m} gave {x}");
                let y = draw_truncated_normal(-m, TruncationSide::Negative, &mut rng);
                assert!(y.is_finite() && y <= 0.0);
            }
        }
    }

    #[test]
    fn inverse_gaussian_moments() {
        let mut rng = RngHandle::new(3, 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| draw_inverse_gaussian(2.0, 1.0, &mut rng).unwrap())
            .collect();
        let (m, v) = mean_var(&xs);
        // var = mu^3 / lambda = 8
        assert!((m - 2.0).abs() < 3.0 * (8.0f64 / n as f64).sqrt(), "mean {m}");
        // fourth central moment of IG(2, 1): 15 mu^7 / lambda^3 + 3 var^2
        let m4 = 15.0 * 2f64.powi(7) + 3.0 * 64.0;
        let se_v = ((m4 - 64.0) / n as f64).sqrt();
        assert!((v - 8.0).abs() < 3.0 * se_v, "var {v} se {se_v}");
        assert!(xs.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn inverse_gaussian_concentrates_for_large_lambda() {
        let mut rng = RngHandle::new(4, 0);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| draw_inverse_gaussian(1.0, 1e6, &mut rng).unwrap())
            .collect();
        let (m, v) = mean_var(&xs);
        assert!((m - 1.0).abs() < 1e-4);
        assert!((v.sqrt() - 1e-3).abs() < 5e-5);
    }

    #[test]
    fn inverse_gaussian_domain() {
        let mut rng = RngHandle::new(4, 0);
        assert!(matches!(draw_inverse_gaussian(0.0, 1.0, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(draw_inverse_gaussian(1.0, -1.0, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn gamma_moments_and_domain() {
        let mut rng = RngHandle::new(8, 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| draw_gamma(2.0, 4.0, &mut rng).unwrap()).collect();
        let (m, v) = mean_var(&xs);
        assert!((m - 0.5).abs() < 3.0 * (0.125f64 / n as f64).sqrt());
        // Gamma(2, 4): fourth central moment 3 k (k + 2) / rate^4
        let m4 = 3.0 * 2.0 * 4.0 / 256.0;
        assert!((v - 0.125).abs() < 3.0 * ((m4 - 0.125 * 0.125) / n as f64).sqrt());

        let below: usize = (0..n)
            .filter(|_| draw_gamma(1.0, 1.0, &mut rng).unwrap() <= 1.0)
            .count();
        let ecdf = below as f64 / n as f64;
        assert!((ecdf - (1.0 - (-1.0f64).exp())).abs() < 0.005);

        assert!(matches!(draw_gamma(0.0, 1.0, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(draw_gamma(1.0, 0.0, &mut rng), Err(Error::Domain(_))));
    }
}
