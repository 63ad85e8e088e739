//! Contrastive losses, momentum SGD and the two training phases.
//!
//! Phase 1 pairs every strided window with a temporally jittered copy of
//! itself. Phase 2 adds cross-performance matches read off DTW paths computed
//! with the phase-1 encoder ("harvested" pairs).

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{cost_matrix, dtw, embed_sequence, Embeddings};
use crate::encoder::{EncoderConfig, EncoderParams, Tensors};
use crate::error::{Error, Result};
use crate::normalize::{augment_with, extract_window, normalize_window, Jitter, Window, WindowSpec};
use crate::pose_io::PoseSequence;
use crate::scalar::{dot, norm, Scalar};

/// Samples per gradient chunk; chunk results are summed in a fixed order so
/// the reduction does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CosineContrastive,
    HadsellMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Hinge margin of the Hadsell loss.
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::CosineContrastive,
            margin: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Invalid(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// How phase-1 positive pairs are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// (original window, augmented window)
    #[default]
    OriginalAugmented,
    /// (augmented window, independently augmented window)
    BothAugmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub seed: u64,
    pub pair_mode: PairMode,
    /// Upper bound on harvested pairs kept for phase 2.
    pub max_harvest_pairs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            epochs_phase1: 15,
            epochs_phase2: 30,
            seed: 0,
            pair_mode: PairMode::OriginalAugmented,
            max_harvest_pairs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Invalid(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    Augmented,
    Harvested,
}

/// Two raw windows asserted to show the same content.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub a: Window,
    pub b: Window,
    pub origin: PairOrigin,
}

/// Loss value and its gradient with respect to each embedding column.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub loss: T,
    pub grad_a: Vec<Vec<T>>,
    pub grad_b: Vec<Vec<T>>,
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() {
        return Err(Error::ZeroNorm(0));
    }
    if nb == T::zero() {
        return Err(Error::ZeroNorm(1));
    }
    Ok((dot(a, b) / (na * nb)).max(-T::one()).min(T::one()))
}

fn check_batch<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<usize> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return Err(Error::Shape(format!(
            "batch needs N >= 2 matched columns, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("embedding columns differ in length".into()));
    }
    Ok(n)
}

/// Least-squares cosine contrastive loss with `lambda = 1/(N-1)`:
/// `sum_i (C(a_i,b_i) - 1)^2 + lambda * sum_{i != j} C(a_i,b_j)^2`.
pub fn batch_loss<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<BatchLoss<T>> {
    let n = check_batch(a, b)?;
    batch_loss_weighted(a, b, T::one() / T::of((n - 1) as f64))
}

/// [`batch_loss`] with an explicit off-diagonal weight.
pub fn batch_loss_weighted<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], lambda: T) -> Result<BatchLoss<T>> {
    let n = check_batch(a, b)?;
    let unit = |cols: &[Vec<T>], offset: usize| -> Result<(Vec<Vec<T>>, Vec<T>)> {
        let mut units = Vec::with_capacity(cols.len());
        let mut norms = Vec::with_capacity(cols.len());
        for (i, v) in cols.iter().enumerate() {
            let len = norm(v);
            if len == T::zero() || !len.is_finite() {
                return Err(Error::ZeroNorm(i + offset));
            }
            units.push(v.iter().map(|&x| x / len).collect());
            norms.push(len);
        }
        Ok((units, norms))
    };
    let (ua, na) = unit(a, 0)?;
    let (ub, nb) = unit(b, n)?;
    let d = a[0].len();

    // dL/dC for every pair, and the loss itself
    let two = T::of(2.0);
    let mut sim = vec![T::zero(); n * n];
    let mut dsim = vec![T::zero(); n * n];
    let mut loss = T::zero();
    for i in 0..n {
        for j in 0..n {
            let c = dot(&ua[i], &ub[j]);
            sim[i * n + j] = c;
            if i == j {
                loss += (c - T::one()) * (c - T::one());
                dsim[i * n + j] = two * (c - T::one());
            } else {
                loss += lambda * c * c;
                dsim[i * n + j] = two * lambda * c;
            }
        }
    }

    // dC_ij/da_i = (b^_j - C_ij a^_i) / |a_i|, symmetric for b_j
    let mut grad_a = vec![vec![T::zero(); d]; n];
    let mut grad_b = vec![vec![T::zero(); d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = dsim[i * n + j];
            if g == T::zero() {
                continue;
            }
            let c = sim[i * n + j];
            let (sa, sb) = (g / na[i], g / nb[j]);
            for k in 0..d {
                grad_a[i][k] += sa * (ub[j][k] - c * ua[i][k]);
                grad_b[j][k] += sb * (ua[i][k] - c * ub[j][k]);
            }
        }
    }
    Ok(BatchLoss { loss, grad_a, grad_b })
}

/// Max-margin contrastive loss on Euclidean distances, with within-batch
/// off-diagonal pairs as negatives weighted by `1/(N-1)`:
/// `sum_i |a_i - b_i|^2 + sum_{i != j} max(0, margin - |a_i - b_j|)^2 / (N-1)`.
pub fn hadsell_loss<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], margin: T) -> Result<BatchLoss<T>> {
    let n = check_batch(a, b)?;
    let d = a[0].len();
    let lambda = T::one() / T::of((n - 1) as f64);
    let two = T::of(2.0);
    let mut loss = T::zero();
    let mut grad_a = vec![vec![T::zero(); d]; n];
    let mut grad_b = vec![vec![T::zero(); d]; n];
    let mut diff = vec![T::zero(); d];
    for i in 0..n {
        for j in 0..n {
            for k in 0..d {
                diff[k] = a[i][k] - b[j][k];
            }
            if i == j {
                loss += dot(&diff, &diff);
                for k in 0..d {
                    grad_a[i][k] += two * diff[k];
                    grad_b[j][k] -= two * diff[k];
                }
            } else {
                let dist = norm(&diff);
                let gap = margin - dist;
                if gap <= T::zero() {
                    continue;
                }
                loss += lambda * gap * gap;
                // the hinge has no direction at zero distance; use the zero subgradient
                if dist > T::zero() {
                    let s = -two * lambda * gap / dist;
                    for k in 0..d {
                        grad_a[i][k] += s * diff[k];
                        grad_b[j][k] -= s * diff[k];
                    }
                }
            }
        }
    }
    Ok(BatchLoss { loss, grad_a, grad_b })
}

pub fn loss_for<T: Scalar>(config: &LossConfig, a: &[Vec<T>], b: &[Vec<T>]) -> Result<BatchLoss<T>> {
    match config.kind {
        LossKind::CosineContrastive => batch_loss(a, b),
        LossKind::HadsellMargin => hadsell_loss(a, b, T::of(config.margin)),
    }
}

/// SGD with classical momentum: `v <- m v - lr g; p <- p + v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Tensors<T>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(config: &EncoderConfig, lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: Tensors::zeros(config),
        }
    }

    pub fn step(&mut self, params: &mut Tensors<T>, grads: &Tensors<T>) {
        let (lr, m) = (self.lr, self.momentum);
        for (((_, p), (_, v)), (_, g)) in params
            .named_mut()
            .into_iter()
            .zip(self.velocity.named_mut())
            .zip(grads.named())
        {
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = m * *v - lr * g;
                *p += *v;
            }
        }
    }
}

/// Per-epoch mean loss (loss summed over batches divided by pairs seen).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: EncoderParams<T>,
    pub history: Vec<EpochLoss>,
}

fn to_input<T: Scalar>(w: &Window) -> Array2<T> {
    w.data.mapv(T::of)
}

/// One SGD step on a batch of normalized pairs. Returns the batch loss.
fn train_step<T: Scalar>(
    params: &mut EncoderParams<T>,
    opt: &mut MomentumSgd<T>,
    batch: &[(Window, Window)],
    loss_config: &LossConfig,
) -> Result<f64> {
    let inputs: Vec<(Array2<T>, Array2<T>)> =
        batch.iter().map(|(a, b)| (to_input(a), to_input(b))).collect();
    let model = &*params;
    let embedded: Vec<(Vec<T>, Vec<T>)> = inputs
        .par_iter()
        .map(|(a, b)| Ok((model.forward(a.view())?, model.forward(b.view())?)))
        .collect::<Result<_>>()?;
    let (ea, eb): (Vec<Vec<T>>, Vec<Vec<T>>) = embedded.into_iter().unzip();
    let loss = loss_for(loss_config, &ea, &eb)?;

    // gradient of the per-pair mean loss
    let inv_n = T::one() / T::of(batch.len() as f64);
    let chunk_grads: Vec<Tensors<T>> = inputs
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = Tensors::zeros(&model.config);
            for (k, (a, b)) in chunk.iter().enumerate() {
                let i = ci * GRAD_CHUNK + k;
                let ga: Vec<T> = loss.grad_a[i].iter().map(|&g| g * inv_n).collect();
                let gb: Vec<T> = loss.grad_b[i].iter().map(|&g| g * inv_n).collect();
                acc.add_assign(&model.backward(a.view(), &ga)?.params);
                acc.add_assign(&model.backward(b.view(), &gb)?.params);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut grads = Tensors::zeros(&params.config);
    for g in &chunk_grads {
        grads.add_assign(g);
    }
    opt.step(&mut params.tensors, &grads);
    let value = loss.loss.as_f64();
    if !value.is_finite() {
        return Err(Error::Invalid("training loss became non-finite".into()));
    }
    Ok(value)
}

/// Runs shuffled minibatch epochs over the pairs produced by `make_pairs`.
fn run_epochs<T: Scalar, F>(
    params: &mut EncoderParams<T>,
    train: &TrainConfig,
    loss_config: &LossConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    mut make_pairs: F,
) -> Result<Vec<EpochLoss>>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Vec<(Window, Window)>>,
{
    let mut opt = MomentumSgd::new(&params.config, T::of(train.lr), T::of(train.momentum));
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut pairs = make_pairs(rng)?;
        pairs.shuffle(rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in pairs.chunks(train.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            total += train_step(params, &mut opt, batch, loss_config)?;
            seen += batch.len();
        }
        history.push(EpochLoss {
            epoch: epoch + 1,
            mean_loss: total / seen.max(1) as f64,
        });
    }
    Ok(history)
}

/// Raw windows at every strided center of every sequence.
struct WindowIndex<'a> {
    entries: Vec<(&'a PoseSequence, f64)>,
}

impl<'a> WindowIndex<'a> {
    fn new(sequences: &'a [PoseSequence], spec: &WindowSpec) -> Self {
        let entries = sequences
            .iter()
            .flat_map(|s| spec.centers(s.duration()).into_iter().map(move |t| (s, t)))
            .collect();
        Self { entries }
    }

    /// Normalized augmentation pairs, jitter drawn sequentially from `rng`.
    fn augmented_pairs(
        &self,
        spec: &WindowSpec,
        mode: PairMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(Window, Window)>> {
        let jitters: Vec<(Jitter, Jitter)> = self
            .entries
            .iter()
            .map(|_| {
                let first = match mode {
                    PairMode::OriginalAugmented => Jitter::NONE,
                    PairMode::BothAugmented => Jitter::draw(spec, rng),
                };
                (first, Jitter::draw(spec, rng))
            })
            .collect();
        self.entries
            .par_iter()
            .zip(jitters.par_iter())
            .map(|(&(seq, t), &(ja, jb))| {
                let a = normalize_window(&augment_with(seq, t, spec, ja)?, seq.layout())?;
                let b = normalize_window(&augment_with(seq, t, spec, jb)?, seq.layout())?;
                Ok((a, b))
            })
            .collect()
    }
}

fn check_corpus(sequences: &[PoseSequence], spec: &WindowSpec) -> Result<()> {
    spec.validate()?;
    let first = sequences
        .first()
        .ok_or_else(|| Error::InsufficientData("no training sequences".into()))?;
    for s in sequences {
        if s.layout().name() != first.layout().name() || s.n_points() != first.n_points() {
            return Err(Error::Shape(format!(
                "sequence '{}' uses layout '{}', expected '{}'",
                s.name(),
                s.layout().name(),
                first.layout().name()
            )));
        }
    }
    Ok(())
}

/// Phase 1: augmentation pairs only, starting from a fresh initialization.
pub fn train_phase1<T: Scalar>(
    sequences: &[PoseSequence],
    spec: &WindowSpec,
    encoder_config: EncoderConfig,
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome<T>> {
    train.validate()?;
    loss.validate()?;
    check_corpus(sequences, spec)?;
    if encoder_config.n_frames != spec.n_frames() || encoder_config.n_points != sequences[0].n_points() {
        return Err(Error::Shape(format!(
            "encoder expects {} frames x {} points, data gives {} x {}",
            encoder_config.n_frames,
            encoder_config.n_points,
            spec.n_frames(),
            sequences[0].n_points()
        )));
    }
    let index = WindowIndex::new(sequences, spec);
    if index.entries.len() < train.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} windows available, one batch needs {}",
            index.entries.len(),
            train.batch_size
        )));
    }
    let mut params = EncoderParams::init(encoder_config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let history = run_epochs(&mut params, train, loss, train.epochs_phase1, &mut rng, |rng| {
        index.augmented_pairs(spec, train.pair_mode, rng)
    })?;
    Ok(TrainOutcome { params, history })
}

/// One cell of a harvested DTW path.
#[derive(Debug, Clone, PartialEq)]
pub struct HarvestedMatch {
    pub seq_a: String,
    pub time_a: f64,
    pub seq_b: String,
    pub time_b: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Harvest {
    pub pairs: Vec<TrainingPair>,
    pub matches: Vec<HarvestedMatch>,
}

/// Aligns every unordered pair of sequences with the current encoder and
/// turns each DTW path cell into a positive pair of raw windows.
pub fn harvest_pairs<T: Scalar>(
    encoder: &EncoderParams<T>,
    sequences: &[PoseSequence],
    spec: &WindowSpec,
    max_pairs: Option<usize>,
) -> Result<Harvest> {
    if sequences.len() < 2 {
        return Err(Error::InsufficientData(
            "harvesting needs at least two sequences".into(),
        ));
    }
    check_corpus(sequences, spec)?;
    let embedded: Vec<Embeddings<T>> = sequences
        .par_iter()
        .map(|s| embed_sequence(encoder, s, spec))
        .collect::<Result<_>>()?;
    let raw: Vec<Vec<Window>> = sequences
        .par_iter()
        .zip(&embedded)
        .map(|(s, e)| e.times.iter().map(|&t| extract_window(s, t, spec)).collect())
        .collect::<Result<_>>()?;

    let pair_ids: Vec<(usize, usize)> = (0..sequences.len())
        .flat_map(|i| (i + 1..sequences.len()).map(move |j| (i, j)))
        .collect();
    let paths = pair_ids
        .par_iter()
        .map(|&(i, j)| Ok(dtw(&cost_matrix(&embedded[i], &embedded[j])?)))
        .collect::<Result<Vec<_>>>()?;

    let mut seen = BTreeSet::new();
    let mut harvest = Harvest::default();
    for (&(i, j), path) in pair_ids.iter().zip(&paths) {
        for (&(r, c), &cost) in path.cells.iter().zip(&path.cell_costs) {
            let (ta, tb) = (embedded[i].times[r], embedded[j].times[c]);
            let key = (
                sequences[i].name().to_string(),
                ta.to_bits(),
                sequences[j].name().to_string(),
                tb.to_bits(),
            );
            if !seen.insert(key) {
                continue;
            }
            harvest.pairs.push(TrainingPair {
                a: raw[i][r].clone(),
                b: raw[j][c].clone(),
                origin: PairOrigin::Harvested,
            });
            harvest.matches.push(HarvestedMatch {
                seq_a: sequences[i].name().to_string(),
                time_a: ta,
                seq_b: sequences[j].name().to_string(),
                time_b: tb,
                cost: cost.as_f64(),
            });
        }
    }
    if let Some(cap) = max_pairs {
        let total = harvest.pairs.len();
        if total > cap {
            // evenly spaced subset, order preserved
            let keep: Vec<usize> = (0..cap).map(|k| k * total / cap).collect();
            harvest.pairs = keep.iter().map(|&k| harvest.pairs[k].clone()).collect();
            harvest.matches = keep.iter().map(|&k| harvest.matches[k].clone()).collect();
        }
    }
    Ok(harvest)
}

/// Phase 2: continue from `encoder` on augmentation pairs plus harvested pairs.
pub fn train_phase2<T: Scalar>(
    encoder: &EncoderParams<T>,
    sequences: &[PoseSequence],
    spec: &WindowSpec,
    harvested: &[TrainingPair],
    train: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome<T>> {
    if harvested.is_empty() {
        return Err(Error::InsufficientData(
            "phase 2 needs harvested pairs; without them it is phase 1".into(),
        ));
    }
    train.validate()?;
    loss.validate()?;
    check_corpus(sequences, spec)?;
    let layout = sequences[0].layout();
    let fixed: Vec<(Window, Window)> = harvested
        .par_iter()
        .map(|p| Ok((normalize_window(&p.a, layout)?, normalize_window(&p.b, layout)?)))
        .collect::<Result<_>>()?;
    let index = WindowIndex::new(sequences, spec);
    if index.entries.len() + fixed.len() < train.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} pairs available, one batch needs {}",
            index.entries.len() + fixed.len(),
            train.batch_size
        )));
    }
    let mut params = encoder.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let history = run_epochs(&mut params, train, loss, train.epochs_phase2, &mut rng, |rng| {
        let mut pairs = index.augmented_pairs(spec, train.pair_mode, rng)?;
        pairs.extend(fixed.iter().cloned());
        Ok(pairs)
    })?;
    Ok(TrainOutcome { params, history })
}
