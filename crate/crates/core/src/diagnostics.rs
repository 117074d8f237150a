//! Split-R̂ and effective sample size for scalar traces.

use std::fmt;

/// Flag threshold for split-R̂.
pub const RHAT_FLAG: f64 = 1.1;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn all_constant(chains: &[&[f64]]) -> bool {
    let first = chains.first().and_then(|c| c.first());
    first.is_none_or(|&v| chains.iter().all(|c| c.iter().all(|&x| x == v)))
}

/// Halves of every chain (the middle draw of an odd chain is dropped).
fn split(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(c[..h].to_vec());
        out.push(c[c.len() - h..].to_vec());
    }
    out
}

/// Between/within variance pieces for equal-length chains.
fn variance_parts(chains: &[Vec<f64>]) -> Option<(f64, f64, usize)> {
    let m = chains.len();
    let n = chains.first()?.len();
    if m < 2 || n < 2 || chains.iter().any(|c| c.len() != n) {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b = n as f64 * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / m as f64;
    Some((b, w, n))
}

/// Split-R̂. `None` for degenerate input (constant traces or fewer than
/// four draws per chain).
pub fn split_rhat(chains: &[&[f64]]) -> Option<f64> {
    if all_constant(chains) {
        return None;
    }
    let (b, w, n) = variance_parts(&split(chains))?;
    if !(w > 0.0) {
        return None;
    }
    let n = n as f64;
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size with Geyer's initial positive
/// monotone sequence estimator.
pub fn effective_sample_size(chains: &[&[f64]]) -> Option<f64> {
    let m = chains.len();
    let n = chains.first()?.len();
    if n < 4 || chains.iter().any(|c| c.len() != n) || all_constant(chains) {
        return None;
    }
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / m as f64;
    if !(w > 0.0) {
        return None;
    }
    let var_plus = if m > 1 {
        let owned: Vec<Vec<f64>> = chains.iter().map(|c| c.to_vec()).collect();
        let (b, w, n) = variance_parts(&owned)?;
        (n as f64 - 1.0) / n as f64 * w + b / n as f64
    } else {
        w
    };
    let rho = |lag: usize| -> f64 {
        let ac = chains.iter().map(|c| autocov(c, lag)).sum::<f64>() / m as f64;
        1.0 - (w - ac) / var_plus
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let total = (m * n) as f64;
    Some(total / tau.max(1.0 / total.log10().max(1.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceDiagnostic {
    pub name: String,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

impl TraceDiagnostic {
    pub fn flagged(&self) -> bool {
        self.rhat.is_some_and(|r| r > RHAT_FLAG)
    }

    pub fn degenerate(&self) -> bool {
        self.rhat.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticReport {
    pub traces: Vec<TraceDiagnostic>,
}

impl DiagnosticReport {
    pub fn n_flagged(&self) -> usize {
        self.traces.iter().filter(|t| t.flagged()).count()
    }
}

/// Diagnoses `name -> per-chain trace` pairs.
pub fn diagnose<'a, I>(traces: I) -> DiagnosticReport
where
    I: IntoIterator<Item = (String, Vec<&'a [f64]>)>,
{
    let traces = traces
        .into_iter()
        .map(|(name, chains)| TraceDiagnostic {
            rhat: split_rhat(&chains),
            ess: effective_sample_size(&chains),
            name,
        })
        .collect();
    DiagnosticReport { traces }
}

impl fmt::Display for DiagnosticReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>10} {:>10}  flag", "trace", "rhat", "ess")?;
        for t in &self.traces {
            let rhat = t.rhat.map_or("degenerate".to_string(), |v| format!("{v:.4}"));
            let ess = t.ess.map_or("-".to_string(), |v| format!("{v:.1}"));
            let flag = if t.flagged() { "RHAT>1.1" } else { "" };
            writeln!(f, "{:<28} {:>10} {:>10}  {flag}", t.name, rhat, ess)?;
        }
        writeln!(f, "flagged: {}", self.n_flagged())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::RngHandle;

    fn white_noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = RngHandle::new(seed, 0);
        (0..n).map(|_| rng.standard_normal()).collect()
    }

    #[test]
    fn iid_chains_converged() {
        let a = white_noise(1, 10_000);
        let b = white_noise(2, 10_000);
        let r = split_rhat(&[&a, &b]).unwrap();
        assert!(r < 1.01, "{r}");
        let ess = effective_sample_size(&[&a, &b]).unwrap();
        assert!(ess > 15_000.0 && ess < 25_000.0, "{ess}");
    }

    #[test]
    fn trending_chain_flagged() {
        let a: Vec<f64> = (0..1000).map(|t| t as f64 / 100.0).collect();
        let r = split_rhat(&[&a]).unwrap();
        assert!(r > RHAT_FLAG);
        let report = diagnose([("trend".to_string(), vec![a.as_slice()])]);
        assert_eq!(report.n_flagged(), 1);
    }

    #[test]
    fn constant_traces_degenerate() {
        let a = vec![0.3; 500];
        assert!(split_rhat(&[&a, &a]).is_none());
        assert!(effective_sample_size(&[&a, &a]).is_none());
        let report = diagnose([("c".to_string(), vec![a.as_slice(), a.as_slice()])]);
        assert!(report.traces[0].degenerate());
        assert!(report.to_string().contains("degenerate"));
    }

    #[test]
    fn autocorrelated_chain_has_small_ess() {
        let e = white_noise(3, 5000);
        let mut x = vec![0.0; 5000];
        for t in 1..5000 {
            x[t] = 0.9 * x[t - 1] + e[t];
        }
        // AR(1) with rho 0.9: n (1 - rho) / (1 + rho) ≈ 263
        let ess = effective_sample_size(&[&x]).unwrap();
        assert!(ess > 150.0 && ess < 450.0, "{ess}");
    }
}
