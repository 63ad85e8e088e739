//! Cost matrices between embedded sequences, DTW, and what is built on it:
//! flip-aware pair alignment, the linear-time-warping prior and keypose
//! label transfer.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::normalize::{normalized_window, WindowSpec};
use crate::pose_io::{mirror_lr, PoseSequence};
use crate::scalar::{dot, norm, Scalar};

/// Embeddings of strided windows together with their center times.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    pub vectors: Vec<Vec<T>>,
    pub times: Vec<f64>,
}

impl<T: Scalar> Embeddings<T> {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Embeds normalized windows centered every `spec.stride_seconds`.
pub fn embed_sequence<T: Scalar>(
    encoder: &EncoderParams<T>,
    seq: &PoseSequence,
    spec: &WindowSpec,
) -> Result<Embeddings<T>> {
    spec.validate()?;
    let times = spec.centers(seq.duration());
    let vectors = times
        .par_iter()
        .map(|&t| encoder.embed(&normalized_window(seq, t, spec)?))
        .collect::<Result<_>>()?;
    Ok(Embeddings { vectors, times })
}

/// Pairwise distance used to fill a cost matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 - cos(a, b)`, in `[0, 2]`.
    #[default]
    Cosine,
    /// `|a - b|`.
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Invalid(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    n: usize,
    m: usize,
    values: Vec<T>,
    pub row_times: Vec<f64>,
    pub col_times: Vec<f64>,
}

impl<T: Scalar> CostMatrix<T> {
    /// Builds a matrix from row-major `values`; times default to indices.
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("cost matrix rows must be nonempty and equal length".into()));
        }
        let values: Vec<T> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("cost matrix holds a non-finite value".into()));
        }
        Ok(Self {
            n,
            m,
            values,
            row_times: (0..n).map(|i| i as f64).collect(),
            col_times: (0..m).map(|j| j as f64).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.m + j]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::of(self.values.len() as f64)
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.m {
            for i in 0..self.n {
                values.push(self.get(i, j));
            }
        }
        Self {
            n: self.m,
            m: self.n,
            values,
            row_times: self.col_times.clone(),
            col_times: self.row_times.clone(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(usize, usize, T) -> T) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| f(k / self.m, k % self.m, v))
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }
}

fn unit_vectors<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let len = norm(v);
            if len == T::zero() || !len.is_finite() {
                Err(Error::ZeroNorm(i))
            } else {
                Ok(v.iter().map(|&x| x / len).collect())
            }
        })
        .collect()
}

/// Cosine-distance cost matrix, `1 - C(a_i, b_j)`.
pub fn cost_matrix<T: Scalar>(a: &Embeddings<T>, b: &Embeddings<T>) -> Result<CostMatrix<T>> {
    cost_matrix_with(a, b, Metric::Cosine)
}

pub fn cost_matrix_with<T: Scalar>(
    a: &Embeddings<T>,
    b: &Embeddings<T>,
    metric: Metric,
) -> Result<CostMatrix<T>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Shape("cost matrix needs nonempty embedding lists".into()));
    }
    let (n, m) = (a.len(), b.len());
    let values: Vec<T> = match metric {
        Metric::Cosine => {
            let ua = unit_vectors(&a.vectors)?;
            let ub = unit_vectors(&b.vectors)?;
            ua.par_iter()
                .flat_map_iter(|x| {
                    ub.iter().map(move |y| {
                        let c = dot(x, y).max(-T::one()).min(T::one());
                        T::one() - c
                    })
                })
                .collect()
        }
        Metric::Euclidean => a
            .vectors
            .par_iter()
            .flat_map_iter(|x| {
                b.vectors.iter().map(move |y| {
                    x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>().sqrt()
                })
            })
            .collect(),
    };
    Ok(CostMatrix {
        n,
        m,
        values,
        row_times: a.times.clone(),
        col_times: b.times.clone(),
    })
}

/// Monotonic correspondence path with the cost of each visited cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath<T> {
    pub cells: Vec<(usize, usize)>,
    pub cell_costs: Vec<T>,
}

impl<T: Scalar> AlignmentPath<T> {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_cost(&self) -> T {
        self.cell_costs.iter().fold(T::zero(), |acc, &c| acc + c)
    }

    pub fn mean_cost(&self) -> T {
        self.total_cost() / T::of(self.len().max(1) as f64)
    }

    /// Boundary and step-set check against an `n x m` matrix.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.cells.first() != Some(&(0, 0)) || self.cells.last() != Some(&(n - 1, m - 1)) {
            return Err(Error::Invalid(format!(
                "path must run from (0,0) to ({}, {})",
                n - 1,
                m - 1
            )));
        }
        for w in self.cells.windows(2) {
            let (di, dj) = (w[1].0.wrapping_sub(w[0].0), w[1].1.wrapping_sub(w[0].1));
            if !matches!((di, dj), (1, 0) | (0, 1) | (1, 1)) {
                return Err(Error::Invalid(format!("illegal step {:?} -> {:?}", w[0], w[1])));
            }
        }
        if self.cell_costs.len() != self.cells.len() {
            return Err(Error::Invalid("cell_costs length differs from cells".into()));
        }
        Ok(())
    }

    /// Replaces the stored per-cell costs with values read from `cost`.
    pub fn with_costs_from(mut self, cost: &CostMatrix<T>) -> Self {
        self.cell_costs = self.cells.iter().map(|&(i, j)| cost.get(i, j)).collect();
        self
    }
}

/// Classical DTW with steps (1,0), (0,1), (1,1) and unit step weights.
///
/// Backtracking prefers the diagonal predecessor on ties, then the one that
/// advances the row index, so the returned path is deterministic.
pub fn dtw<T: Scalar>(cost: &CostMatrix<T>) -> AlignmentPath<T> {
    let (n, m) = (cost.rows(), cost.cols());
    let mut acc = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = cost.get(i, j);
            let best = match (i, j) {
                (0, 0) => T::zero(),
                (0, _) => acc[j - 1],
                (_, 0) => acc[(i - 1) * m],
                _ => acc[(i - 1) * m + j - 1]
                    .min(acc[(i - 1) * m + j])
                    .min(acc[i * m + j - 1]),
            };
            acc[i * m + j] = if (i, j) == (0, 0) { c } else { c + best };
        }
    }
    let mut cells = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[(i - 1) * m + j - 1];
            let up = acc[(i - 1) * m + j];
            let left = acc[i * m + j - 1];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        cells.push((i, j));
    }
    cells.reverse();
    let cell_costs = cells.iter().map(|&(i, j)| cost.get(i, j)).collect();
    AlignmentPath { cells, cell_costs }
}

/// Adds `gamma * |i/(n-1) - j/(m-1)|` to every cell. A single row or column
/// contributes 0 for its degenerate fraction.
pub fn ltw_penalized<T: Scalar>(cost: &CostMatrix<T>, gamma: T) -> Result<CostMatrix<T>> {
    if !(gamma >= T::zero() && gamma.is_finite()) {
        return Err(Error::Invalid(format!("ltw gamma must be >= 0, got {gamma}")));
    }
    let (n, m) = (cost.rows(), cost.cols());
    let frac = |k: usize, len: usize| {
        if len <= 1 {
            T::zero()
        } else {
            T::of(k as f64 / (len - 1) as f64)
        }
    };
    Ok(cost.map(|i, j, v| v + gamma * (frac(i, n) - frac(j, m)).abs()))
}

/// Strength of the linear-time-warping prior.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LtwPrior {
    #[default]
    Off,
    /// Half the mean cost of the matrix being penalized.
    Auto,
    Gamma(f64),
}

impl LtwPrior {
    pub fn resolve<T: Scalar>(&self, cost: &CostMatrix<T>) -> Option<f64> {
        match *self {
            LtwPrior::Off => None,
            LtwPrior::Auto => Some(0.5 * cost.mean().as_f64()),
            LtwPrior::Gamma(g) => Some(g),
        }
    }
}

impl FromStr for LtwPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "none" => Ok(LtwPrior::Off),
            "auto" => Ok(LtwPrior::Auto),
            num => {
                let g: f64 = num
                    .parse()
                    .map_err(|_| Error::Invalid(format!("ltw gamma '{num}' is not 'off', 'auto' or a number")))?;
                if !(g.is_finite() && g >= 0.0) {
                    return Err(Error::Invalid(format!("ltw gamma must be >= 0, got {g}")));
                }
                Ok(LtwPrior::Gamma(g))
            }
        }
    }
}

impl Serialize for LtwPrior {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LtwPrior::Off => s.serialize_str("off"),
            LtwPrior::Auto => s.serialize_str("auto"),
            LtwPrior::Gamma(g) => s.serialize_f64(*g),
        }
    }
}

impl<'de> Deserialize<'de> for LtwPrior {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(g) => LtwPrior::from_str(&g.to_string()),
            Raw::Text(t) => LtwPrior::from_str(&t),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignOptions {
    /// Also try the left/right mirrored second sequence and keep the better one.
    pub flip_lr: bool,
    pub ltw: LtwPrior,
    pub metric: Metric,
}

/// Result of aligning two sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAlignment<T> {
    pub path: AlignmentPath<T>,
    /// Mean unpenalized cost along the path.
    pub mean_cost: f64,
    pub flipped: bool,
    pub row_times: Vec<f64>,
    pub col_times: Vec<f64>,
    /// Gamma of the LTW prior actually applied, if any.
    pub ltw_gamma: Option<f64>,
}

impl<T: Scalar> PairAlignment<T> {
    pub fn n(&self) -> usize {
        self.row_times.len()
    }

    pub fn m(&self) -> usize {
        self.col_times.len()
    }

    pub fn write_path_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::parse("path csv", e);
        wtr.write_record(["i", "j", "cost", "row_time", "col_time"]).map_err(err)?;
        for (&(i, j), &c) in self.path.cells.iter().zip(&self.path.cell_costs) {
            wtr.write_record([
                i.to_string(),
                j.to_string(),
                sig9(c.as_f64()),
                sig9(self.row_times[i]),
                sig9(self.col_times[j]),
            ])
            .map_err(err)?;
        }
        wtr.flush().map_err(|e| Error::io("path csv", e))
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mean_cost": sig9(self.mean_cost).parse::<f64>().unwrap_or(self.mean_cost),
            "flipped": self.flipped,
            "n": self.n(),
            "m": self.m(),
            "path_length": self.path.len(),
            "ltw_gamma": self.ltw_gamma.map(|g| sig9(g).parse::<f64>().unwrap_or(g)),
        })
    }
}

/// Aligns precomputed embeddings; the path is chosen on the (optionally
/// LTW-penalized) matrix and reports the unpenalized cell costs.
pub fn align_embeddings<T: Scalar>(
    a: &Embeddings<T>,
    b: &Embeddings<T>,
    ltw: LtwPrior,
    metric: Metric,
) -> Result<PairAlignment<T>> {
    let cost = cost_matrix_with(a, b, metric)?;
    let gamma = ltw.resolve(&cost);
    let path = match gamma {
        Some(g) => dtw(&ltw_penalized(&cost, T::of(g))?).with_costs_from(&cost),
        None => dtw(&cost),
    };
    let mean_cost = path.mean_cost().as_f64();
    Ok(PairAlignment {
        path,
        mean_cost,
        flipped: false,
        row_times: cost.row_times,
        col_times: cost.col_times,
        ltw_gamma: gamma,
    })
}

/// Aligns `seq_b` to `seq_a`. With `flip_lr`, the mirrored `seq_b` is also
/// aligned and kept if its mean path cost is strictly lower.
pub fn align_pair<T: Scalar>(
    encoder: &EncoderParams<T>,
    seq_a: &PoseSequence,
    seq_b: &PoseSequence,
    spec: &WindowSpec,
    options: &AlignOptions,
) -> Result<PairAlignment<T>> {
    let ea = embed_sequence(encoder, seq_a, spec)?;
    align_to_embedded(encoder, &ea, seq_b, spec, options)
}

/// [`align_pair`] with the first sequence already embedded.
pub fn align_to_embedded<T: Scalar>(
    encoder: &EncoderParams<T>,
    ea: &Embeddings<T>,
    seq_b: &PoseSequence,
    spec: &WindowSpec,
    options: &AlignOptions,
) -> Result<PairAlignment<T>> {
    let eb = embed_sequence(encoder, seq_b, spec)?;
    let plain = align_embeddings(ea, &eb, options.ltw, options.metric)?;
    if !options.flip_lr {
        return Ok(plain);
    }
    let ef = embed_sequence(encoder, &mirror_lr(seq_b), spec)?;
    let mut flipped = align_embeddings(ea, &ef, options.ltw, options.metric)?;
    if flipped.mean_cost < plain.mean_cost {
        flipped.flipped = true;
        Ok(flipped)
    } else {
        Ok(plain)
    }
}

/// Labeled instants of a performance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyposeLabels {
    pub entries: Vec<(String, f64)>,
}

impl KeyposeLabels {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if let Some((l, t)) = entries.iter().find(|(l, t)| l.is_empty() || !t.is_finite()) {
            return Err(Error::Invalid(format!("invalid keypose ('{l}', {t})")));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::parse("keypose csv", e))?.clone();
        if headers.len() != 2 || &headers[0] != "label" || &headers[1] != "time_seconds" {
            return Err(Error::parse("keypose csv", "header must be 'label,time_seconds'"));
        }
        let mut entries = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse("keypose csv", e))?;
            let t: f64 = rec[1]
                .parse()
                .map_err(|_| Error::parse("keypose csv", format!("row {row}: bad time '{}'", &rec[1])))?;
            entries.push((rec[0].to_string(), t));
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::parse("keypose csv", e);
        wtr.write_record(["label", "time_seconds"]).map_err(err)?;
        for (label, t) in &self.entries {
            wtr.write_record([label.clone(), sig9(*t)]).map_err(err)?;
        }
        wtr.flush().map_err(|e| Error::io("keypose csv", e))
    }
}

fn nearest_index(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    for (k, &v) in times.iter().enumerate() {
        if (v - t).abs() < (times[best] - t).abs() {
            best = k;
        }
    }
    best
}

/// Carries labels from the row sequence to the column sequence along `path`.
///
/// A label snaps to its nearest row; the path cells on that row span a range
/// of columns, and the label lands on the midpoint of that range's times.
pub fn transfer_keyposes<T: Scalar>(
    path: &AlignmentPath<T>,
    labels: &KeyposeLabels,
    row_times: &[f64],
    col_times: &[f64],
) -> Result<KeyposeLabels> {
    let (first, last) = match (row_times.first(), row_times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Invalid("no row times".into())),
    };
    let mut out = Vec::with_capacity(labels.len());
    for (label, t) in &labels.entries {
        if *t < first - 1e-9 || *t > last + 1e-9 {
            return Err(Error::Invalid(format!(
                "keypose '{label}' at {t} s lies outside the reference span {first}..{last} s"
            )));
        }
        let row = nearest_index(row_times, *t);
        let cols = path.cells.iter().filter(|c| c.0 == row).map(|c| c.1);
        let (lo, hi) = cols.fold((usize::MAX, 0), |(lo, hi), j| (lo.min(j), hi.max(j)));
        if lo == usize::MAX {
            return Err(Error::Invalid(format!("path never visits row {row}")));
        }
        out.push((label.clone(), (col_times[lo] + col_times[hi]) / 2.0));
    }
    Ok(KeyposeLabels { entries: out })
}

/// Linear-time-warping baseline: maps `[ref_start, ref_end]` linearly onto
/// `[target_start, target_end]`.
pub fn ltw_transfer(
    labels: &KeyposeLabels,
    ref_span: (f64, f64),
    target_span: (f64, f64),
) -> Result<KeyposeLabels> {
    let (r0, r1) = ref_span;
    let (t0, t1) = target_span;
    if !(r1 > r0) {
        return Err(Error::Invalid(format!("reference anchors must increase: {r0} .. {r1}")));
    }
    let scale = (t1 - t0) / (r1 - r0);
    Ok(KeyposeLabels {
        entries: labels
            .entries
            .iter()
            .map(|(l, t)| (l.clone(), t0 + (t - r0) * scale))
            .collect(),
    })
}
