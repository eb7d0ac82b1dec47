//! Label-model baselines: majority voting and the MLE label model with a
//! symmetric confusion assumption (correct with probability α, otherwise
//! uniform over the wrong classes), fit by EM over per-function hard votes.

use std::path::Path;

use crate::container::CsvWriter;
use crate::lfb::ProbLabel;
use crate::{AdpError, Result};

/// One-hot plurality vote over per-function argmaxes; ties go to the lowest
/// class index.
pub fn majority_vote(rows: &[ProbLabel]) -> Result<ProbLabel> {
    if rows.is_empty() {
        return Err(AdpError::invalid("majority_vote", "no votes"));
    }
    let m = rows[0].len();
    let mut counts = vec![0usize; m];
    for row in rows {
        if row.len() != m {
            return Err(AdpError::ShapeMismatch {
                op: "majority_vote",
                lhs: vec![m],
                rhs: vec![row.len()],
            });
        }
        counts[row.argmax()] += 1;
    }
    let mut best = 0;
    for (c, n) in counts.iter().enumerate().skip(1) {
        if *n > counts[best] {
            best = c;
        }
    }
    Ok(ProbLabel::one_hot_class(best, m))
}

/// Fitted label model: per-function accuracies and a class prior.
#[derive(Debug, Clone)]
pub struct DpModel {
    pub alphas: Vec<f64>,
    pub prior: Vec<f64>,
    pub log_likelihood: Vec<f64>,
}

const ALPHA_CLIP: (f64, f64) = (0.01, 0.99);

/// Hard votes per sample: `votes[s][i]` is function i's argmax class.
pub fn votes_from_rows(rows_per_sample: &[Vec<ProbLabel>]) -> Vec<Vec<usize>> {
    rows_per_sample
        .iter()
        .map(|rows| rows.iter().map(|r| r.argmax()).collect())
        .collect()
}

fn vote_likelihood(vote: usize, class: usize, alpha: f64, m: usize) -> f64 {
    if vote == class {
        alpha
    } else {
        (1.0 - alpha) / (m - 1) as f64
    }
}

/// EM fit of the symmetric-confusion model. The log-likelihood is
/// non-decreasing per sweep (within 1e-9); α values are clipped into
/// (0.01, 0.99) so degenerate pools (all functions identical) stay finite.
pub fn dp_mle_fit(votes: &[Vec<usize>], m: usize, iters: usize) -> Result<DpModel> {
    if votes.is_empty() || m < 2 {
        return Err(AdpError::invalid(
            "dp_mle_fit",
            format!("{} samples, m={m}", votes.len()),
        ));
    }
    let n = votes[0].len();
    let count = votes.len() as f64;
    let mut alphas = vec![0.6; n];
    let mut prior = vec![1.0 / m as f64; m];
    let mut ll_log = Vec::new();

    for _ in 0..iters {
        // E-step
        let mut posteriors = Vec::with_capacity(votes.len());
        let mut ll = 0.0;
        for sample in votes {
            let mut q: Vec<f64> = (0..m)
                .map(|y| {
                    let mut p = prior[y].max(1e-300);
                    for (i, &v) in sample.iter().enumerate() {
                        p *= vote_likelihood(v, y, alphas[i], m);
                    }
                    p
                })
                .collect();
            let z: f64 = q.iter().sum();
            ll += z.max(1e-300).ln();
            for v in q.iter_mut() {
                *v /= z.max(1e-300);
            }
            posteriors.push(q);
        }
        ll_log.push(ll);

        // M-step
        for (i, alpha) in alphas.iter_mut().enumerate() {
            let agree: f64 = votes
                .iter()
                .zip(&posteriors)
                .map(|(sample, q)| q[sample[i]])
                .sum();
            *alpha = (agree / count).clamp(ALPHA_CLIP.0, ALPHA_CLIP.1);
        }
        for y in 0..m {
            prior[y] = posteriors.iter().map(|q| q[y]).sum::<f64>() / count;
        }
        if ll_log.len() >= 2 {
            let delta = ll_log[ll_log.len() - 1] - ll_log[ll_log.len() - 2];
            if delta.abs() < 1e-9 {
                break;
            }
        }
    }
    Ok(DpModel {
        alphas,
        prior,
        log_likelihood: ll_log,
    })
}

/// Posterior over classes for one sample's label rows under the fitted model.
pub fn dp_predict(model: &DpModel, rows: &[ProbLabel]) -> Result<ProbLabel> {
    let m = model.prior.len();
    if rows.is_empty() {
        return Err(AdpError::invalid("dp_predict", "no votes"));
    }
    let votes: Vec<usize> = rows.iter().map(|r| r.argmax()).collect();
    let mut q: Vec<f64> = (0..m)
        .map(|y| {
            let mut p = model.prior[y].max(1e-300);
            for (i, &v) in votes.iter().enumerate() {
                p *= vote_likelihood(v, y, model.alphas[i], m);
            }
            p
        })
        .collect();
    let z: f64 = q.iter().sum();
    for v in q.iter_mut() {
        *v /= z;
    }
    ProbLabel::renormalized(q)
}

/// Write per-sample votes as CSV (`sample,lf0..lfN`).
pub fn write_votes_csv(
    path: &Path,
    votes: &[Vec<usize>],
    config_hash: &str,
) -> Result<()> {
    let n = votes.first().map(|v| v.len()).unwrap_or(0);
    let mut cols = vec!["sample".to_string()];
    cols.extend((0..n).map(|i| format!("lf{i}")));
    let col_refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::create(path, "votes-v1", config_hash, &col_refs);
    for (i, sample) in votes.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(sample.iter().map(|v| v.to_string()));
        csv.row(&row);
    }
    csv.finish()
}

/// Read votes back from CSV.
pub fn read_votes_csv(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AdpError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(2) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let votes = fields[1..]
            .iter()
            .map(|f| {
                f.parse().map_err(|_| AdpError::Format {
                    path: path.display().to_string(),
                    detail: format!("bad vote `{f}`"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        out.push(votes);
    }
    Ok(out)
}

/// Planted-model generator for recovery tests: true labels uniform, each
/// function correct with its α, otherwise a uniformly random wrong class.
pub fn plant_votes(
    alphas: &[f64],
    m: usize,
    samples: usize,
    seed: u64,
) -> (Vec<usize>, Vec<Vec<usize>>) {
    use rand::Rng;
    let mut truths = Vec::with_capacity(samples);
    let mut votes = Vec::with_capacity(samples);
    for s in 0..samples {
        let mut r = crate::rng::derive(seed, "plant", s as u64);
        let y = r.random_range(0..m);
        truths.push(y);
        let row: Vec<usize> = alphas
            .iter()
            .map(|&a| {
                if r.random_range(0.0..1.0) < a {
                    y
                } else {
                    (y + 1 + r.random_range(0..m - 1)) % m
                }
            })
            .collect();
        votes.push(row);
    }
    (truths, votes)
}
