//! Kendall's tau of nearest-neighbor assignments, keypose accuracy curves and
//! reference-against-corpus alignment costs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;

use crate::alignment::{align_to_embedded, embed_sequence, AlignOptions, Embeddings, KeyposeLabels, Metric};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::normalize::WindowSpec;
use crate::pose_io::PoseSequence;
use crate::scalar::{dot, norm, Scalar};

/// Index in `b` nearest to `x`; the lowest index wins ties.
fn nearest<T: Scalar>(x: &[T], b: &[Vec<T>], b_norms: &[T], metric: Metric) -> Result<usize> {
    let nx = norm(x);
    let mut best = 0;
    let mut best_score = T::neg_infinity();
    for (j, y) in b.iter().enumerate() {
        let score = match metric {
            Metric::Cosine => {
                if nx == T::zero() {
                    return Err(Error::ZeroNorm(0));
                }
                dot(x, y) / (nx * b_norms[j])
            }
            Metric::Euclidean => {
                -x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>()
            }
        };
        if score > best_score {
            best = j;
            best_score = score;
        }
    }
    Ok(best)
}

/// `(concordant - discordant) / (n choose 2)` over the assignment `v`, with
/// equal assignments counted as discordant.
pub fn tau_of_assignment(v: &[usize]) -> Result<f64> {
    let n = v.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("tau needs at least 2 frames, got {n}")));
    }
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            score += if v[i] < v[j] { 1 } else { -1 };
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// Nearest-neighbor assignment of every vector of `a` into `b`.
pub fn assignment<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], metric: Metric) -> Result<Vec<usize>> {
    let b_norms: Vec<T> = b.iter().map(|v| norm(v)).collect();
    if metric == Metric::Cosine {
        if let Some(j) = b_norms.iter().position(|&v| v == T::zero()) {
            return Err(Error::ZeroNorm(j));
        }
    }
    a.iter()
        .enumerate()
        .map(|(i, x)| {
            nearest(x, b, &b_norms, metric).map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm(i),
                other => other,
            })
        })
        .collect()
}

/// Symmetrized Kendall's tau: the mean of the `a -> b` and `b -> a` scores.
pub fn kendalls_tau<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], metric: Metric) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "tau needs at least 2 frames per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let forward = tau_of_assignment(&assignment(a, b, metric)?)?;
    let backward = tau_of_assignment(&assignment(b, a, metric)?)?;
    Ok((forward + backward) / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTau {
    pub seq_a: String,
    pub seq_b: String,
    pub action: String,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauReport {
    pub per_pair: Vec<PairTau>,
    pub mean_tau: f64,
    /// Mean over pairs within each action.
    pub per_action: BTreeMap<String, f64>,
    pub metric: Metric,
}

impl TauReport {
    pub fn from_pairs(per_pair: Vec<PairTau>, metric: Metric) -> Result<Self> {
        if per_pair.is_empty() {
            return Err(Error::InsufficientData("tau report has no pairs".into()));
        }
        let mean_tau = per_pair.iter().map(|p| p.tau).sum::<f64>() / per_pair.len() as f64;
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for p in &per_pair {
            groups.entry(p.action.clone()).or_default().push(p.tau);
        }
        let per_action = groups
            .into_iter()
            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        Ok(Self {
            per_pair,
            mean_tau,
            per_action,
            metric,
        })
    }

    /// Mean of the per-action means.
    pub fn action_mean(&self) -> f64 {
        self.per_action.values().sum::<f64>() / self.per_action.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::parse("tau csv", e);
        wtr.write_record(["seq_a", "seq_b", "action", "tau"]).map_err(err)?;
        for p in &self.per_pair {
            wtr.write_record([p.seq_a.as_str(), &p.seq_b, &p.action, &sig9(p.tau)])
                .map_err(err)?;
        }
        wtr.flush().map_err(|e| Error::io("tau csv", e))
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let num = |v: f64| sig9(v).parse::<f64>().unwrap_or(v);
        serde_json::json!({
            "mean_tau": num(self.mean_tau),
            "action_mean_tau": num(self.action_mean()),
            "per_action": self.per_action.iter().map(|(k, v)| (k.clone(), num(*v))).collect::<BTreeMap<_, _>>(),
            "pairs": self.per_pair.len(),
            "metric": self.metric,
            "symmetrized": true,
            "nearest_neighbor_ties": "lowest_index",
            "rank_ties": "discordant",
        })
    }
}

/// Tau over every unordered pair of sequences sharing an action label.
pub fn tau_report<T: Scalar>(
    encoder: &EncoderParams<T>,
    sequences: &[(PoseSequence, String)],
    spec: &WindowSpec,
    metric: Metric,
) -> Result<TauReport> {
    let embedded: Vec<Embeddings<T>> = sequences
        .par_iter()
        .map(|(s, _)| embed_sequence(encoder, s, spec))
        .collect::<Result<_>>()?;
    tau_report_embedded(sequences, &embedded, metric)
}

/// [`tau_report`] on embeddings computed by the caller.
pub fn tau_report_embedded<T: Scalar>(
    sequences: &[(PoseSequence, String)],
    embedded: &[Embeddings<T>],
    metric: Metric,
) -> Result<TauReport> {
    let pairs: Vec<(usize, usize)> = (0..sequences.len())
        .flat_map(|i| (i + 1..sequences.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| sequences[i].1 == sequences[j].1)
        .collect();
    let per_pair = pairs
        .par_iter()
        .map(|&(i, j)| {
            Ok(PairTau {
                seq_a: sequences[i].0.name().to_string(),
                seq_b: sequences[j].0.name().to_string(),
                action: sequences[i].1.clone(),
                tau: kendalls_tau(&embedded[i].vectors, &embedded[j].vectors, metric)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TauReport::from_pairs(per_pair, metric)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl AccuracyCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::parse("accuracy csv", e);
        wtr.write_record(["threshold", "fraction"]).map_err(err)?;
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            wtr.write_record([sig9(*t), sig9(*f)]).map_err(err)?;
        }
        wtr.flush().map_err(|e| Error::io("accuracy csv", e))
    }
}

/// Absolute time error of every predicted label, matched by name.
pub fn keypose_errors(predicted: &KeyposeLabels, truth: &KeyposeLabels) -> Result<Vec<f64>> {
    let index = |labels: &KeyposeLabels, what: &str| -> Result<BTreeMap<String, f64>> {
        let mut map = BTreeMap::new();
        for (l, t) in &labels.entries {
            if map.insert(l.clone(), *t).is_some() {
                return Err(Error::Invalid(format!("duplicate label '{l}' in {what} keyposes")));
            }
        }
        Ok(map)
    };
    let p = index(predicted, "predicted")?;
    let g = index(truth, "ground-truth")?;
    let (pk, gk): (BTreeSet<_>, BTreeSet<_>) = (p.keys().collect(), g.keys().collect());
    if pk != gk {
        let missing: Vec<_> = gk.symmetric_difference(&pk).map(|s| s.as_str()).collect();
        return Err(Error::Invalid(format!("keypose label sets differ: {}", missing.join(", "))));
    }
    Ok(truth.entries.iter().map(|(l, t)| (p[l] - t).abs()).collect())
}

/// Fraction of labels whose predicted time is within each threshold.
pub fn keypose_accuracy(
    predicted: &KeyposeLabels,
    truth: &KeyposeLabels,
    thresholds: &[f64],
) -> Result<AccuracyCurve> {
    let errors = keypose_errors(predicted, truth)?;
    Ok(accuracy_from_errors(&errors, thresholds))
}

pub fn accuracy_from_errors(errors: &[f64], thresholds: &[f64]) -> AccuracyCurve {
    let fractions = thresholds
        .iter()
        .map(|&th| {
            if errors.is_empty() {
                1.0
            } else {
                errors.iter().filter(|&&e| e <= th).count() as f64 / errors.len() as f64
            }
        })
        .collect();
    AccuracyCurve {
        thresholds: thresholds.to_vec(),
        fractions,
    }
}

/// Mean alignment cost of the reference against every sequence. The
/// reference comes first; the rest follow by increasing cost, then name.
pub fn all_pairs_cost<T: Scalar>(
    encoder: &EncoderParams<T>,
    sequences: &[PoseSequence],
    reference_index: usize,
    spec: &WindowSpec,
    options: &AlignOptions,
) -> Result<Vec<(String, f64)>> {
    let reference = sequences.get(reference_index).ok_or_else(|| {
        Error::Invalid(format!(
            "reference index {reference_index} out of range for {} sequences",
            sequences.len()
        ))
    })?;
    let ea = embed_sequence(encoder, reference, spec)?;
    let costs = sequences
        .par_iter()
        .map(|s| Ok(align_to_embedded(encoder, &ea, s, spec, options)?.mean_cost))
        .collect::<Result<Vec<f64>>>()?;
    let mut rest: Vec<(String, f64)> = sequences
        .iter()
        .zip(&costs)
        .enumerate()
        .filter(|(k, _)| *k != reference_index)
        .map(|(_, (s, &c))| (s.name().to_string(), c))
        .collect();
    rest.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let mut out = vec![(reference.name().to_string(), costs[reference_index])];
    out.extend(rest);
    Ok(out)
}

pub fn write_cost_csv<W: Write>(rows: &[(String, f64)], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::parse("cost csv", e);
    wtr.write_record(["name", "mean_cost"]).map_err(err)?;
    for (name, c) in rows {
        wtr.write_record([name.clone(), sig9(*c)]).map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::io("cost csv", e))
}
