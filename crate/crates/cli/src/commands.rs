//! The four commands. Each returns the files it wrote.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pslfm::dists::RngHandle;
use pslfm::engine::{
    fit, placebo_fit, summarize_att, summarize_trace, EstimandSummary, ModelKind, ModelVariant, PosteriorDraws,
};
use pslfm::panel::{load_panel_csv, ColumnMap, PanelDataset};
use pslfm::simulation::{
    generate_dataset, run_studies, write_replications_csv, write_table_csv, BayesEstimator, Estimator,
    ExternalEstimates, IdentityEstimator, Truth,
};

use crate::config::{RunConfig, VariantChoice};

pub const PANEL_FILE: &str = "panel.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const ESTIMANDS_FILE: &str = "estimands.csv";
pub const PROPENSITY_FILE: &str = "propensity.csv";
pub const COEFFICIENTS_FILE: &str = "coefficients.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const PLACEBO_FILE: &str = "placebo.csv";
pub const REPLICATIONS_FILE: &str = "replications.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const DYNAMIC_FILE: &str = "dynamic_long.csv";
pub const HISTOGRAM_FILE: &str = "propensity_hist.csv";

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, BufWriter::new(f)))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

pub fn write_truth_csv<W: Write>(data: &PanelDataset, truth: &Truth, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["unit", "score", "stratum", "adoption", "att_true"])?;
    for i in 0..data.n_units() {
        wtr.write_record([
            data.unit_labels()[i].clone(),
            truth.scores[i].to_string(),
            (truth.strata[i] + 1).to_string(),
            data.adoption()[i].to_string(),
            truth.att_true.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `panel.csv` and `truth.csv` for one simulated panel.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let mut rng = RngHandle::new(cfg.dgp.seed, 0);
    let (data, truth) = generate_dataset(&cfg.dgp, &mut rng)?;
    let (panel_path, w) = create(dir, PANEL_FILE)?;
    data.write_csv(w)?;
    let (truth_path, w) = create(dir, TRUTH_FILE)?;
    write_truth_csv(&data, &truth, w)?;
    Ok(vec![panel_path, truth_path])
}

/// True scores from a truth file, ordered like the panel's units.
pub fn read_truth_scores(path: &Path, data: &PanelDataset) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{} has no `{name}` column", path.display()))
    };
    let (unit, score) = (col("unit")?, col("score")?);
    let mut by_unit = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let s: f64 = rec[score].trim().parse().with_context(|| format!("score `{}`", &rec[score]))?;
        by_unit.insert(rec[unit].trim().to_string(), s);
    }
    data.unit_labels()
        .iter()
        .map(|u| by_unit.get(u).copied().ok_or_else(|| anyhow!("no true score for unit {u}")))
        .collect()
}

fn fit_variant(cfg: &RunConfig, data: &PanelDataset) -> Result<ModelVariant> {
    let kind = match &cfg.variants[..] {
        [VariantChoice::Model(k)] => *k,
        _ => bail!("fit takes exactly one model variant"),
    };
    Ok(match kind {
        ModelKind::PsLfm => ModelVariant::ps_lfm(cfg.r_max, cfg.strata.clone()),
        ModelKind::DmLfm => ModelVariant::dm_lfm(cfg.r_max),
        ModelKind::Oracle => {
            let path = cfg.truth.as_ref().ok_or_else(|| anyhow!("the oracle variant needs `truth`"))?;
            // the known factor count is taken from rmax
            ModelVariant::oracle(read_truth_scores(path, data)?, cfg.r_max, cfg.strata.clone())
        }
    })
}

fn opt(v: Option<i64>) -> String {
    v.map_or(String::new(), |h| h.to_string())
}

fn write_estimands<W: Write>(variant: &str, rows: &[EstimandSummary], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["variant", "estimand", "horizon", "n_cells", "mean", "sd", "lower", "upper"])?;
    for r in rows {
        wtr.write_record([
            variant.to_string(),
            r.label.clone(),
            opt(r.horizon),
            r.n_cells.to_string(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_propensity<W: Write>(data: &PanelDataset, draws: &PosteriorDraws, level: f64, w: W) -> Result<()> {
    let p = draws.propensity.as_ref().ok_or_else(|| anyhow!("no propensity draws"))?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["unit", "mean", "lower", "upper"])?;
    for i in 0..p.ncols() {
        let col: Vec<f64> = p.column(i).iter().copied().collect();
        let (mean, _, lower, upper) = summarize_trace(&col, level)?;
        wtr.write_record([
            data.unit_labels()[i].clone(),
            mean.to_string(),
            lower.to_string(),
            upper.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_coefficients<W: Write>(draws: &PosteriorDraws, level: f64, w: W) -> Result<()> {
    let report = draws.diagnostics();
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["name", "mean", "sd", "lower", "upper", "rhat", "ess"])?;
    for (j, name) in draws.coef_names.iter().enumerate() {
        let col: Vec<f64> = draws.coef_tracks.column(j).iter().copied().collect();
        let (mean, sd, lower, upper) = summarize_trace(&col, level)?;
        let diag = report.traces.iter().find(|t| &t.name == name);
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        wtr.write_record([
            name.clone(),
            mean.to_string(),
            sd.to_string(),
            lower.to_string(),
            upper.to_string(),
            fmt(diag.and_then(|d| d.rhat)),
            fmt(diag.and_then(|d| d.ess)),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_diagnostics<W: Write>(draws: &PosteriorDraws, mut w: W) -> Result<()> {
    writeln!(w, "variant: {}", draws.kind.label())?;
    writeln!(w, "chains: {}", draws.n_chains)?;
    writeln!(w, "draws per chain: {}", draws.draws_per_chain)?;
    writeln!(w, "rotation ties: {}", draws.rotation_ties)?;
    writeln!(w)?;
    write!(w, "{}", draws.diagnostics())?;
    w.flush()?;
    Ok(())
}

/// Fits one variant to `data` and writes its summaries.
pub fn cmd_fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data_path = cfg.data.as_ref().ok_or_else(|| anyhow!("fit needs `data`"))?;
    let data = load_panel_csv(data_path, &ColumnMap::default())
        .with_context(|| format!("loading {}", data_path.display()))?;
    let variant = fit_variant(cfg, &data)?;
    let label = variant.kind.label();
    let dir = out_dir(cfg)?;
    let mut written = Vec::new();

    let draws = fit(&data, &variant, &cfg.schedule, &cfg.model)?;
    let (path, w) = create(dir, ESTIMANDS_FILE)?;
    write_estimands(label, &summarize_att(&draws, cfg.level)?, w)?;
    written.push(path);
    if draws.propensity.is_some() {
        let (path, w) = create(dir, PROPENSITY_FILE)?;
        write_propensity(&data, &draws, cfg.level, w)?;
        written.push(path);
    }
    let (path, w) = create(dir, COEFFICIENTS_FILE)?;
    write_coefficients(&draws, cfg.level, w)?;
    written.push(path);
    let (path, w) = create(dir, DIAGNOSTICS_FILE)?;
    write_diagnostics(&draws, w)?;
    written.push(path);

    if cfg.placebo > 0 {
        let held_out = placebo_fit(&data, &variant, &cfg.schedule, &cfg.model, cfg.placebo)?;
        let (path, w) = create(dir, PLACEBO_FILE)?;
        write_estimands(label, &summarize_att(&held_out, cfg.level)?, w)?;
        written.push(path);
    }
    Ok(written)
}

/// Scores every configured variant on `reps` simulated panels.
pub fn cmd_montecarlo(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut owned: Vec<Box<dyn Estimator>> = Vec::new();
    for v in &cfg.variants {
        owned.push(match v {
            VariantChoice::Model(kind) => {
                let mut e = BayesEstimator::new(*kind, cfg.r_max, cfg.strata.clone(), cfg.schedule);
                e.config = cfg.model.clone();
                e.level = cfg.level;
                Box::new(e)
            }
            VariantChoice::Identity => Box::new(IdentityEstimator),
            VariantChoice::External { label, path } => Box::new(ExternalEstimates::load(label.clone(), path)?),
        });
    }
    let refs: Vec<&dyn Estimator> = owned.iter().map(|e| e.as_ref()).collect();
    let results = run_studies(&cfg.dgp, &refs, cfg.reps, cfg.master_seed)?;
    let dir = out_dir(cfg)?;
    let (rep_path, w) = create(dir, REPLICATIONS_FILE)?;
    write_replications_csv(&results, w)?;
    let (table_path, w) = create(dir, TABLE_FILE)?;
    write_table_csv(&results, w)?;
    Ok(vec![rep_path, table_path])
}

/// Counts of `scores` in `bins` equal-width bins on [0, 1]; a score of
/// exactly 1 falls in the last bin.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &s in scores {
        let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

fn read_column(path: &Path, names: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = rdr.headers()?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| anyhow!("{} has no `{n}` column", path.display()))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(idx.iter().map(|&i| rec[i].to_string()).collect());
    }
    Ok(rows)
}

/// Merges fit directories into a long dynamic-effect table and propensity
/// histograms.
pub fn cmd_summarize(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut dynamic = Vec::new();
    let mut hist = Vec::new();
    for input in &cfg.inputs {
        let rows = read_column(
            &input.join(ESTIMANDS_FILE),
            &["variant", "horizon", "mean", "lower", "upper"],
        )?;
        let variant = rows.first().map(|r| r[0].clone()).unwrap_or_default();
        for r in rows.into_iter().filter(|r| !r[1].is_empty()) {
            dynamic.push([r[1].clone(), r[2].clone(), r[3].clone(), r[4].clone(), r[0].clone()]);
        }
        let ps_path = input.join(PROPENSITY_FILE);
        if ps_path.exists() {
            let scores: Vec<f64> = read_column(&ps_path, &["mean"])?
                .iter()
                .map(|r| r[0].parse::<f64>().with_context(|| format!("score `{}`", r[0])))
                .collect::<Result<_>>()?;
            hist.push((variant, histogram(&scores, cfg.bins)));
        }
    }
    let dir = out_dir(cfg)?;
    let (dyn_path, w) = create(dir, DYNAMIC_FILE)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["horizon", "mean", "lower", "upper", "variant"])?;
    for r in &dynamic {
        wtr.write_record(r)?;
    }
    wtr.flush()?;
    let (hist_path, w) = create(dir, HISTOGRAM_FILE)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["variant", "bin_lower", "bin_upper", "count"])?;
    for (variant, counts) in &hist {
        for (b, c) in counts.iter().enumerate() {
            wtr.write_record([
                variant.clone(),
                (b as f64 / cfg.bins as f64).to_string(),
                ((b + 1) as f64 / cfg.bins as f64).to_string(),
                c.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(vec![dyn_path, hist_path])
}
