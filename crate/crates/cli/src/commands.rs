use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tvcgmm::classification::latent_kappa;
use tvcgmm::data::{read_dataset, read_long_dataset_from, standardize_tvc, write_dataset, LongitudinalDataset, TvcScaling};
use tvcgmm::estimation::{enumerate_classes, fit as fit_model, FitOptions, FitResult, ModelSpec};
use tvcgmm::report::{emit_trajectories, time_grid, write_trajectories};
use tvcgmm::simulation::{generate_dataset, run_condition, write_records, MetricsReport, SimulationCondition, StudyOptions};

use crate::manifest;
use crate::{DataArgs, EnumerateArgs, FitArgs, KappaArgs, MonteCarloArgs, OptimizerArgs, SimulateArgs, Status, TrajectoryArgs};

pub const RESULTS_FILE: &str = "results.json";
pub const POSTERIOR_FILE: &str = "posterior.csv";

/// Everything `fit` persists about a solution. The posterior matrix lives in a
/// separate CSV next to this document.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitDocument {
    pub fit: FitResult,
    pub confidence_intervals: Vec<Option<(f64, f64)>>,
    /// Posterior CSV, relative to the directory holding this document.
    pub posterior_path: String,
    pub tvc_scaling: Option<TvcScaling>,
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_data(args: &DataArgs) -> Result<(LongitudinalDataset, Option<TvcScaling>)> {
    let ds = if args.long {
        let f = File::open(&args.data).with_context(|| format!("opening {}", args.data.display()))?;
        read_long_dataset_from(BufReader::new(f))
    } else {
        read_dataset(&args.data)
    }
    .with_context(|| format!("reading {}", args.data.display()))?;
    if args.standardize_tvc {
        let (ds, s) = standardize_tvc(&ds)?;
        Ok((ds, Some(s)))
    } else {
        Ok((ds, None))
    }
}

fn fit_options(o: &OptimizerArgs) -> Result<FitOptions> {
    if o.starts == 0 {
        bail!("--starts must be at least 1");
    }
    Ok(FitOptions { max_attempts: o.starts, seed: o.seed, ..FitOptions::default() })
}

fn load_condition(path: &Path) -> Result<SimulationCondition> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cond = SimulationCondition::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
    cond.validate()?;
    Ok(cond)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn simulate(a: &SimulateArgs, config: &serde_json::Value) -> Result<Status> {
    let cond = load_condition(&a.condition)?;
    prepare_out(&a.out)?;
    let ds = generate_dataset(&cond, a.seed)?;
    let path = a.out.join("dataset.csv");
    write_dataset(&ds, &path)?;
    manifest::write(&a.out, config, Some(a.seed), &[a.condition.clone()], &[path])?;
    Ok(Status::Success)
}

fn write_estimates(path: &Path, r: &FitResult) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "parameter,estimate,se,ci_lower,ci_upper")?;
    for ((name, est), ci) in r.parameter_names.iter().zip(&r.reported).zip(r.confidence_intervals()) {
        let se = r.get(name).and_then(|(_, s)| s);
        writeln!(w, "{name},{est},{},{},{}", opt(se), opt(ci.map(|c| c.0)), opt(ci.map(|c| c.1)))?;
    }
    w.flush()?;
    Ok(())
}

fn write_posterior(path: &Path, ds: &LongitudinalDataset, r: &FitResult) -> Result<()> {
    let k = r.spec.n_classes;
    let mut w = create(path)?;
    let head: Vec<String> = (1..=k).map(|c| format!("p{c}")).collect();
    writeln!(w, "id,{},modal", head.join(","))?;
    for ((ind, row), m) in ds.individuals.iter().zip(&r.posterior).zip(r.modal_classes()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", ind.id, cells.join(","), m + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fit(a: &FitArgs, config: &serde_json::Value) -> Result<Status> {
    let (ds, scaling) = load_data(&a.data)?;
    let spec = if a.unconditional {
        ModelSpec::unconditional(a.classes, a.form)
    } else {
        ModelSpec::full(a.classes, a.form, a.decomposition)
    };
    let options = fit_options(&a.optimizer)?;
    prepare_out(&a.out)?;
    let mut r = fit_model(&ds, &spec, &options)?;

    let posterior = a.out.join(POSTERIOR_FILE);
    write_posterior(&posterior, &ds, &r)?;
    let estimates = a.out.join("estimates.csv");
    write_estimates(&estimates, &r)?;
    let status = if r.is_converged() { Status::Success } else { Status::FitFailed };
    if let tvcgmm::estimation::FitStatus::Failed { reason, .. } = &r.status {
        eprintln!("fit failed: {reason}");
    }
    let confidence_intervals = r.confidence_intervals();
    r.posterior.clear();
    let results = a.out.join(RESULTS_FILE);
    let doc = FitDocument { fit: r, confidence_intervals, posterior_path: POSTERIOR_FILE.into(), tvc_scaling: scaling };
    write_json(&results, &doc)?;
    manifest::write(&a.out, config, Some(a.optimizer.seed), &[a.data.data.clone()], &[results, estimates, posterior])?;
    Ok(status)
}

pub fn enumerate(a: &EnumerateArgs, config: &serde_json::Value) -> Result<Status> {
    let (ds, _) = load_data(&a.data)?;
    let options = fit_options(&a.optimizer)?;
    prepare_out(&a.out)?;
    let template = ModelSpec::unconditional(1, a.form);
    let (table, _) = enumerate_classes(&ds, &template, a.classes, &options)?;

    let json = a.out.join("enumeration.json");
    write_json(&json, &table)?;
    let csv = a.out.join("enumeration.csv");
    let mut w = create(&csv)?;
    writeln!(w, "classes,converged,parameters,neg2_loglik,aic,bic,residual_variances,mixing_proportions")?;
    for row in &table.rows {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            row.n_classes,
            row.converged,
            row.n_free_parameters,
            row.neg2_loglik,
            row.aic,
            row.bic,
            join(&row.residual_variances),
            join(&row.mixing_proportions)
        )?;
    }
    w.flush()?;
    manifest::write(&a.out, config, Some(a.optimizer.seed), &[a.data.data.clone()], &[json, csv])?;
    match table.selected {
        Some(k) => {
            println!("selected {k} classes by BIC");
            Ok(Status::Success)
        }
        None => {
            eprintln!("no class count converged");
            Ok(Status::FitFailed)
        }
    }
}

fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "parameter,truth,mean_estimate,bias,empirical_se,rmse,coverage,mc_se_of_bias,scale")?;
    for p in &report.parameters {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            p.name,
            p.truth,
            p.mean_estimate,
            p.bias,
            p.empirical_se,
            p.rmse,
            opt(p.coverage),
            p.mc_se_of_bias,
            if p.absolute { "absolute" } else { "relative" }
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn montecarlo(a: &MonteCarloArgs, config: &serde_json::Value) -> Result<Status> {
    let cond = load_condition(&a.condition)?;
    if a.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let spec = ModelSpec::full(
        a.classes.unwrap_or(cond.n_classes()),
        a.form.unwrap_or(cond.classes[0].form.kind()),
        a.decomposition.unwrap_or(cond.decomposition),
    );
    let opts = StudyOptions { seed: a.optimizer.seed, jobs: a.jobs, fit: fit_options(&a.optimizer)?, ..StudyOptions::default() };
    prepare_out(&a.out)?;
    let out = run_condition(&cond, &spec, a.reps, &opts)?;

    let records = a.out.join("replications.jsonl");
    write_records(&out.records, create(&records)?)?;
    let report = a.out.join("report.json");
    write_json(&report, &out.report)?;
    let metrics = a.out.join("metrics.csv");
    write_metrics(&metrics, &out.report)?;
    manifest::write(&a.out, config, Some(a.optimizer.seed), &[a.condition.clone()], &[report, metrics, records])?;
    let r = &out.report;
    println!("{} of {} replications converged ({} requested)", r.reps_used, r.reps_attempted, r.reps_requested);
    Ok(if r.partial { Status::PartialMonteCarlo } else { Status::Success })
}

/// Reads a results document; `None` when it records a failed fit whose
/// non-finite values cannot be restored.
fn load_fit(path: &Path) -> Result<Option<FitDocument>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str::<FitDocument>(&text) {
        Ok(doc) => Ok(Some(doc)),
        Err(e) => {
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if v.pointer("/fit/status/status").and_then(|s| s.as_str()) == Some("failed") {
                Ok(None)
            } else {
                Err(e).with_context(|| format!("parsing {}", path.display()))
            }
        }
    }
}

fn load_posterior(results: &Path, doc: &FitDocument) -> Result<(Vec<Vec<f64>>, PathBuf)> {
    let dir = results.parent().unwrap_or(Path::new("."));
    let path: PathBuf = dir.join(&doc.posterior_path);
    let k = doc.fit.spec.n_classes;
    let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row: Vec<f64> = (1..=k)
            .map(|c| rec.get(c).unwrap_or("").parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{} row {}", path.display(), i + 1))?;
        out.push(row);
    }
    Ok((out, path))
}

pub fn trajectories(a: &TrajectoryArgs, config: &serde_json::Value) -> Result<Status> {
    let Some(doc) = load_fit(&a.fit)? else {
        eprintln!("error: trajectories need a converged fit");
        return Ok(Status::FitFailed);
    };
    if a.points == 0 {
        bail!("--points must be at least 1");
    }
    let to = a.to.unwrap_or(doc.fit.n_occasions.saturating_sub(1) as f64);
    if !(to >= a.from) {
        bail!("grid end {to} precedes its start {}", a.from);
    }
    let rows = match emit_trajectories(&doc.fit, &time_grid(a.from, to, a.points)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(Status::FitFailed);
        }
    };
    prepare_out(&a.out)?;
    let path = a.out.join("trajectories.csv");
    write_trajectories(&rows, create(&path)?)?;
    manifest::write(&a.out, config, None, &[a.fit.clone()], &[path])?;
    Ok(Status::Success)
}

pub fn kappa(a: &KappaArgs, config: &serde_json::Value) -> Result<Status> {
    let (Some(first), Some(second)) = (load_fit(&a.first)?, load_fit(&a.second)?) else {
        eprintln!("error: both solutions must be converged fits");
        return Ok(Status::FitFailed);
    };
    if !first.fit.is_converged() || !second.fit.is_converged() {
        eprintln!("error: both solutions must be converged fits");
        return Ok(Status::FitFailed);
    }
    let (pa, path_a) = load_posterior(&a.first, &first)?;
    let (pb, path_b) = load_posterior(&a.second, &second)?;
    let k = latent_kappa(&pa, &pb, a.resamples, a.seed)?;
    prepare_out(&a.out)?;
    let path = a.out.join("kappa.json");
    write_json(&path, &k)?;
    manifest::write(&a.out, config, Some(a.seed), &[a.first.clone(), path_a, a.second.clone(), path_b], &[path])?;
    println!("latent kappa {:.4} (95% CI {:.4} to {:.4})", k.kappa, k.ci95.0, k.ci95.1);
    Ok(Status::Success)
}
