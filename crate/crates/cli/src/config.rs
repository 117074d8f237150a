//! Run configuration: a plain `key = value` file merged with command-line
//! overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pslfm::assignment::StrataSpec;
use pslfm::engine::{McmcSchedule, ModelConfig, ModelKind};
use pslfm::simulation::{DgpSpec, DGP_COVARIATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Fit,
    Montecarlo,
    Summarize,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::Fit => "fit",
            CommandKind::Montecarlo => "montecarlo",
            CommandKind::Summarize => "summarize",
        }
    }
}

/// One entry of the `variant` list.
#[derive(Debug, Clone, PartialEq)]
pub enum VariantChoice {
    Model(ModelKind),
    /// Harness check returning the truth.
    Identity,
    /// Estimates read from a CSV, given as `label=path`.
    External { label: String, path: PathBuf },
}

impl VariantChoice {
    fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((label, path)) = s.split_once('=') {
            return Ok(VariantChoice::External {
                label: label.trim().to_string(),
                path: PathBuf::from(path.trim()),
            });
        }
        if s.eq_ignore_ascii_case("identity") {
            return Ok(VariantChoice::Identity);
        }
        Ok(VariantChoice::Model(s.parse()?))
    }
}

const KEYS: &[&str] = &[
    "seed",
    "variant",
    "thresholds",
    "rmax",
    "iters",
    "burnin",
    "thin",
    "chains",
    "reps",
    "placebo",
    "out",
    "data",
    "truth",
    "inputs",
    "level",
    "bins",
    "pre_horizons",
    "prior_variance",
    "n_units",
    "n_periods",
    "early_adopt",
    "late_adopt",
    "n_factors",
    "lambda",
    "noise_sd",
    "effect",
    "levels",
    "phases",
    "amplitude",
    "frequency",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", no + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_pairs(&text).with_context(|| format!("in config {}", path.display()))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow!("`{key}`: cannot parse `{s}`: {e}")))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: CommandKind,
    pub dgp: DgpSpec,
    pub variants: Vec<VariantChoice>,
    pub r_max: usize,
    pub strata: StrataSpec,
    pub schedule: McmcSchedule,
    pub model: ModelConfig,
    /// Master seed of a Monte Carlo study.
    pub master_seed: u64,
    pub reps: usize,
    pub placebo: usize,
    pub level: f64,
    pub data: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub bins: usize,
    pub out: PathBuf,
}

impl RunConfig {
    /// Resolves merged pairs; later pairs win.
    pub fn from_pairs(command: CommandKind, pairs: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                bail!("unknown configuration key `{k}`");
            }
            map.insert(k.as_str(), v.as_str());
        }
        let get = |k: &str| map.get(k).copied();
        fn num<T: std::str::FromStr>(k: &str, v: Option<&str>, default: T) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            match v {
                Some(s) => s.parse().map_err(|e| anyhow!("`{k}`: cannot parse `{s}`: {e}")),
                None => Ok(default),
            }
        }

        let mut dgp = DgpSpec::default();
        dgp.n_units = num("n_units", get("n_units"), dgp.n_units)?;
        dgp.n_periods = num("n_periods", get("n_periods"), dgp.n_periods)?;
        dgp.early_adopt_t = num("early_adopt", get("early_adopt"), dgp.early_adopt_t)?;
        dgp.late_adopt_t = num("late_adopt", get("late_adopt"), dgp.late_adopt_t)?;
        dgp.n_factors_true = num("n_factors", get("n_factors"), dgp.n_factors_true)?;
        dgp.lambda_true = match get("lambda") {
            Some(v) => list("lambda", v)?,
            None => vec![1.0; DGP_COVARIATES + dgp.n_factors_true],
        };
        dgp.noise_sd = num("noise_sd", get("noise_sd"), dgp.noise_sd)?;
        dgp.effect = num("effect", get("effect"), dgp.effect)?;
        if let Some(v) = get("levels") {
            dgp.group_trend.levels = list("levels", v)?;
        }
        if let Some(v) = get("phases") {
            dgp.group_trend.phases = list("phases", v)?;
        }
        dgp.group_trend.amplitude = num("amplitude", get("amplitude"), dgp.group_trend.amplitude)?;
        dgp.group_trend.frequency = num("frequency", get("frequency"), dgp.group_trend.frequency)?;
        if let Some(v) = get("thresholds") {
            dgp.thresholds = list("thresholds", v)?;
        }
        let strata = StrataSpec::new(dgp.thresholds.clone())?;
        dgp.seed = num("seed", get("seed"), dgp.seed)?;

        let defaults = McmcSchedule::default();
        let n_iter = num("iters", get("iters"), defaults.n_iter)?;
        // an explicit iteration count without burn-in discards the first half
        let burn_in = match (get("burnin"), get("iters")) {
            (Some(v), _) => num("burnin", Some(v), 0)?,
            (None, Some(_)) => n_iter / 2,
            (None, None) => defaults.burn_in,
        };
        let schedule = McmcSchedule {
            n_iter,
            burn_in,
            thin: num("thin", get("thin"), defaults.thin)?,
            n_chains: num("chains", get("chains"), defaults.n_chains)?,
            seed: num("seed", get("seed"), defaults.seed)?,
        };
        schedule.validate()?;

        let mut model = ModelConfig::default();
        model.pre_horizons = num("pre_horizons", get("pre_horizons"), model.pre_horizons)?;
        model.prior.variance = num("prior_variance", get("prior_variance"), model.prior.variance)?;

        let default_variants = match command {
            CommandKind::Montecarlo => "oracle,pslfm,dmlfm",
            _ => "pslfm",
        };
        let variants = get("variant")
            .unwrap_or(default_variants)
            .split(',')
            .map(VariantChoice::parse)
            .collect::<Result<Vec<_>>>()?;

        let level = num("level", get("level"), 0.95)?;
        if !(level > 0.0 && level < 1.0) {
            bail!("`level` must lie in (0, 1)");
        }
        let existing = |k: &str| -> Result<Option<PathBuf>> {
            match get(k) {
                Some(v) => {
                    let p = PathBuf::from(v);
                    if !p.exists() {
                        bail!("`{k}`: {} does not exist", p.display());
                    }
                    Ok(Some(p))
                }
                None => Ok(None),
            }
        };
        let inputs = match get("inputs") {
            Some(v) => v.split(',').map(|s| PathBuf::from(s.trim())).collect(),
            None => Vec::new(),
        };
        for p in &inputs {
            if !p.exists() {
                bail!("input {} does not exist", p.display());
            }
        }

        let cfg = RunConfig {
            command,
            r_max: num("rmax", get("rmax"), 5)?,
            master_seed: num("seed", get("seed"), 1)?,
            reps: num("reps", get("reps"), 100)?,
            placebo: num("placebo", get("placebo"), 0)?,
            bins: num("bins", get("bins"), 20)?,
            data: existing("data")?,
            truth: existing("truth")?,
            out: PathBuf::from(get("out").unwrap_or("out")),
            dgp,
            variants,
            strata,
            schedule,
            model,
            level,
            inputs,
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        match self.command {
            CommandKind::Simulate => self.dgp.validate()?,
            CommandKind::Fit => {
                if self.data.is_none() {
                    bail!("fit needs `data`");
                }
                if self.variants.len() != 1 || !matches!(self.variants[0], VariantChoice::Model(_)) {
                    bail!("fit takes exactly one model variant");
                }
                if self.variants[0] == VariantChoice::Model(ModelKind::Oracle) && self.truth.is_none() {
                    bail!("the oracle variant needs `truth` with the true scores");
                }
            }
            CommandKind::Montecarlo => {
                self.dgp.validate()?;
                if self.reps < 2 {
                    bail!("a Monte Carlo study needs at least two replications");
                }
            }
            CommandKind::Summarize => {
                if self.inputs.is_empty() {
                    bail!("summarize needs at least one fit directory");
                }
                if self.bins == 0 {
                    bail!("`bins` must be positive");
                }
            }
        }
        if self.r_max == 0 {
            bail!("`rmax` must be positive");
        }
        Ok(())
    }
}
