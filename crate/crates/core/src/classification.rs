//! Posterior class membership, accuracy against known labels and latent
//! kappa agreement between two probabilistic solutions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::estimation::likelihood::{log_gating_matrix, log_sum_exp};
use crate::estimation::{class_loglik_matrix, ModelParameters, ModelSpec};

/// Largest class count handled by exhaustive permutation search.
pub const MAX_PERMUTATION_CLASSES: usize = 8;

/// Posterior membership probabilities (`N x K`, rows sum to one).
pub fn posterior(ds: &LongitudinalDataset, theta: &ModelParameters, spec: &ModelSpec) -> Result<Vec<Vec<f64>>> {
    let ll = class_loglik_matrix(ds, theta, spec)?;
    let lp = log_gating_matrix(ds, &theta.gating, spec)?;
    let k_n = spec.n_classes;
    (0..ds.len())
        .map(|i| {
            let terms: Vec<f64> = (0..k_n).map(|k| ll[(i, k)] + lp[(i, k)]).collect();
            let lse = log_sum_exp(terms.iter().copied());
            if !lse.is_finite() {
                return Err(Error::Infeasible(format!("individual {} has zero density under every class", i + 1)));
            }
            let mut row: Vec<f64> = terms.iter().map(|t| (t - lse).exp()).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            Ok(row)
        })
        .collect()
}

/// Index of the largest entry of each row (first one on ties).
pub fn modal_assignment(post: &[Vec<f64>]) -> Vec<usize> {
    post.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                .0
        })
        .collect()
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                go(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

fn check_k(k: usize) -> Result<()> {
    if k > MAX_PERMUTATION_CLASSES {
        return Err(Error::Dimension(format!(
            "label alignment supports at most {MAX_PERMUTATION_CLASSES} classes, got {k}"
        )));
    }
    Ok(())
}

/// Share of correctly classified individuals, maximised over relabelings of
/// `predicted`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predicted labels vs {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Dimension("no labels".into()));
    }
    let k = predicted.iter().chain(truth).max().unwrap() + 1;
    check_k(k)?;
    let mut counts = vec![0usize; k * k];
    for (&p, &t) in predicted.iter().zip(truth) {
        counts[p * k + t] += 1;
    }
    let best = permutations(k)
        .iter()
        .map(|perm| (0..k).map(|p| counts[p * k + perm[p]]).sum::<usize>())
        .max()
        .unwrap();
    Ok(best as f64 / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub ci95: (f64, f64),
    /// Column `l` of the second solution is matched to column `alignment[l]` of the first.
    pub alignment: Vec<usize>,
    pub resamples: usize,
}

fn joint_table(a: &[Vec<f64>], b: &[Vec<f64>], idx: &[usize], k: usize, perm: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0; k * k];
    for &i in idx {
        for r in 0..k {
            for l in 0..k {
                t[r * k + perm[l]] += a[i][r] * b[i][l];
            }
        }
    }
    let n = idx.len() as f64;
    t.iter_mut().for_each(|v| *v /= n);
    t
}

fn kappa_of(t: &[f64], k: usize) -> f64 {
    let po: f64 = (0..k).map(|r| t[r * k + r]).sum();
    let pe: f64 = (0..k)
        .map(|r| {
            let row: f64 = (0..k).map(|c| t[r * k + c]).sum();
            let col: f64 = (0..k).map(|c| t[c * k + r]).sum();
            row * col
        })
        .sum();
    if (1.0 - pe).abs() < 1e-15 {
        return if (po - pe).abs() < 1e-15 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

/// Latent kappa from the expected joint classification table of two
/// posterior matrices, with a percentile bootstrap interval over individuals.
pub fn latent_kappa(a: &[Vec<f64>], b: &[Vec<f64>], resamples: usize, seed: u64) -> Result<KappaResult> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {} individuals", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Dimension("no individuals".into()));
    }
    let k = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != k) {
        return Err(Error::Dimension("posterior matrices must share one class count".into()));
    }
    check_k(k)?;
    let all: Vec<usize> = (0..a.len()).collect();
    let (alignment, kappa) = permutations(k)
        .into_iter()
        .map(|perm| {
            let t = joint_table(a, b, &all, k, &perm);
            let tr: f64 = (0..k).map(|r| t[r * k + r]).sum();
            (perm, tr, t)
        })
        .fold(None::<(Vec<usize>, f64, Vec<f64>)>, |best, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
        .map(|(p, _, t)| (p, kappa_of(&t, k)))
        .unwrap();

    let mut stats: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let idx: Vec<usize> = (0..a.len()).map(|_| rng.gen_range(0..a.len())).collect();
            kappa_of(&joint_table(a, b, &idx, k, &alignment), k)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let ci95 = if stats.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (quantile(&stats, 0.025), quantile(&stats, 0.975))
    };
    Ok(KappaResult { kappa, ci95, alignment, resamples })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
