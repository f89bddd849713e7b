//! Monte Carlo driver: generate, fit, align to truth, accumulate metrics.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::generate_dataset;
use super::metrics::ParameterMetrics;
use super::SimulationCondition;
use crate::classification::{accuracy, modal_assignment, permutations};
use crate::error::{Error, Result};
use crate::estimation::{
    fit, mixture_loglik, parameter_names, reporting_vector, standard_errors, FitOptions, ModelParameters, ModelSpec,
    ParameterLayout, StartStrategy,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub seed: u64,
    /// Worker threads for replications.
    pub jobs: usize,
    pub fit: FitOptions,
    /// Replications attempted are capped at `cap_factor * S`.
    pub cap_factor: usize,
    /// Start every fit at the generating parameters instead of k-means.
    pub truth_start: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { seed: 0, jobs: 1, fit: FitOptions::default(), cap_factor: 2, truth_start: false }
    }
}

/// Everything persisted about one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub data_seed: u64,
    pub fit_seed: u64,
    pub converged: bool,
    pub reason: Option<String>,
    /// Class order applied to the fit to match the generating classes.
    pub alignment: Vec<usize>,
    /// Aligned estimates on the reporting scale.
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<Option<f64>>,
    pub accuracy: Option<f64>,
    pub loglik: f64,
    /// Log-likelihood of the generating parameters on the same data.
    pub loglik_truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: String,
    pub parameters: Vec<ParameterMetrics>,
    pub mean_accuracy: Option<f64>,
    pub convergence_rate: f64,
    pub reps_requested: usize,
    pub reps_used: usize,
    pub reps_attempted: usize,
    /// Fewer than the requested converged replications were obtained within the cap.
    pub partial: bool,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<&ParameterMetrics> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub report: MetricsReport,
    pub records: Vec<ReplicationRecord>,
}

/// Dataset and fit seeds of replication `index`.
pub fn replication_seeds(base: u64, index: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64);
    (rng.gen(), rng.gen())
}

/// Class order that best matches the generating classes, by squared distance
/// between knots and between marginal baseline means.
pub fn align_to_truth(fitted: &ModelParameters, truth: &ModelParameters) -> Vec<usize> {
    let k = fitted.n_classes();
    let fb = fitted.baseline_means();
    let tb = truth.baseline_means();
    let coef = |t: &ModelParameters, c: usize| t.classes[c].form.coefficient().unwrap_or(0.0);
    permutations(k)
        .into_iter()
        .map(|perm| {
            let d: f64 = (0..k)
                .map(|c| (fb[perm[c]] - tb[c]).powi(2) + (coef(fitted, perm[c]) - coef(truth, c)).powi(2))
                .sum();
            (perm, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(p, _)| p)
        .unwrap()
}

fn truth_matches(spec: &ModelSpec, truth: &ModelParameters) -> bool {
    spec.n_classes == truth.n_classes()
        && truth.classes.iter().all(|c| c.form.kind() == spec.form)
        && spec.use_tic
        && spec.use_tvc
        && spec.n_gating_tics == crate::data::N_GATING_TICS
}

/// Generates, fits and aligns replication `index`.
pub fn run_replication(cond: &SimulationCondition, spec: &ModelSpec, index: usize, opts: &StudyOptions) -> Result<ReplicationRecord> {
    let (data_seed, fit_seed) = replication_seeds(opts.seed, index);
    let ds = generate_dataset(cond, data_seed)?;
    let truth = cond.true_parameters()?;
    let comparable = truth_matches(spec, &truth);
    let loglik_truth = if comparable { Some(mixture_loglik(&ds, &truth, spec)?) } else { None };
    let mut fo = opts.fit.clone();
    fo.seed = fit_seed;
    if opts.truth_start && comparable {
        fo.start = StartStrategy::Given(truth.clone());
    }
    let r = fit(&ds, spec, &fo)?;
    let layout = ParameterLayout::new(spec, ds.n_occasions())?;
    let mut converged = r.is_converged();
    let mut reason = match &r.status {
        crate::estimation::FitStatus::Failed { reason, .. } => Some(reason.clone()),
        _ => None,
    };
    let alignment = if comparable { align_to_truth(&r.estimates, &truth) } else { (0..spec.n_classes).collect() };
    let identity = alignment.iter().enumerate().all(|(i, &a)| i == a);
    let (estimates, ses, post) = if identity {
        (r.reported.clone(), r.standard_errors.clone(), r.posterior.clone())
    } else {
        let theta = r.estimates.permuted(&alignment);
        let ses = if converged && fo.compute_standard_errors {
            match standard_errors(&ds, spec, &theta, &fo) {
                Ok(s) => s.into_iter().map(Some).collect(),
                Err(e) => {
                    converged = false;
                    reason = Some(e.to_string());
                    vec![None; layout.len()]
                }
            }
        } else {
            vec![None; layout.len()]
        };
        let post = r.posterior.iter().map(|row| alignment.iter().map(|&k| row[k]).collect()).collect();
        (reporting_vector(&theta, &layout), ses, post)
    };
    let acc = ds.labels().and_then(|l| accuracy(&modal_assignment(&post), &l).ok());
    Ok(ReplicationRecord {
        index,
        data_seed,
        fit_seed,
        converged,
        reason,
        alignment,
        estimates,
        standard_errors: ses,
        accuracy: acc,
        loglik: r.loglik,
        loglik_truth,
    })
}

/// Metrics over the converged records among `records`.
pub fn metrics_from_records(
    cond: &SimulationCondition,
    spec: &ModelSpec,
    records: &[ReplicationRecord],
    reps_requested: usize,
) -> Result<MetricsReport> {
    let layout = ParameterLayout::new(spec, cond.times.len())?;
    let names = parameter_names(&layout);
    let truth = cond.true_parameters()?;
    let truth_vec = truth_matches(spec, &truth).then(|| reporting_vector(&truth, &layout));
    let used: Vec<&ReplicationRecord> = records.iter().filter(|r| r.converged).collect();
    let mut parameters = Vec::new();
    if let (Some(tv), true) = (&truth_vec, used.len() >= 2) {
        for (i, name) in names.iter().enumerate() {
            let est: Vec<f64> = used.iter().map(|r| r.estimates[i]).collect();
            let ivs: Vec<Option<(f64, f64)>> = used
                .iter()
                .map(|r| r.standard_errors[i].map(|s| (r.estimates[i] - 1.959_963_984_540_054 * s, r.estimates[i] + 1.959_963_984_540_054 * s)))
                .collect();
            parameters.push(ParameterMetrics::compute(name, &est, &ivs, tv[i])?);
        }
    }
    let accs: Vec<f64> = used.iter().filter_map(|r| r.accuracy).collect();
    let attempted = records.len();
    Ok(MetricsReport {
        condition: cond.name.clone(),
        parameters,
        mean_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        convergence_rate: if attempted == 0 { 0.0 } else { used.len() as f64 / attempted as f64 },
        reps_requested,
        reps_used: used.len(),
        reps_attempted: attempted,
        partial: used.len() < reps_requested,
    })
}

/// Runs replications until `s` have converged or `cap_factor * s` were attempted.
///
/// Results depend only on `(opts.seed, replication index)`, never on `jobs`.
pub fn run_condition(cond: &SimulationCondition, spec: &ModelSpec, s: usize, opts: &StudyOptions) -> Result<StudyOutcome> {
    if s == 0 {
        return Err(Error::Parameter("need at least one replication".into()));
    }
    cond.validate()?;
    let cap = s * opts.cap_factor.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let mut records: Vec<ReplicationRecord> = Vec::new();
    let mut next = 0;
    let mut converged = 0;
    while converged < s && next < cap {
        let batch = (s - converged).max(opts.jobs.max(1)).min(cap - next);
        let results: Vec<Result<ReplicationRecord>> =
            pool.install(|| (next..next + batch).into_par_iter().map(|i| run_replication(cond, spec, i, opts)).collect());
        next += batch;
        for r in results {
            let r = r?;
            if converged < s {
                converged += r.converged as usize;
                records.push(r);
            }
        }
    }
    let report = metrics_from_records(cond, spec, &records, s)?;
    Ok(StudyOutcome { report, records })
}

/// Writes one JSON record per line.
pub fn write_records<W: Write>(records: &[ReplicationRecord], mut w: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads records written by [`write_records`].
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<ReplicationRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
