//! Shallow convolutional encoder for normalized pose windows.
//!
//! Input is an `N x 3P` window (rows are frames, columns are `x,y,z` triplets).
//!
//! * layer 1: `c1` filters of size `k1_t x 3`, stride `(s1_t, 3)`, so each
//!   filter only ever sees the coordinates of a single point; output
//!   `T1 x P x c1`, ReLU.
//! * layer 2: `c2` filters of size `k2_t x P x c1` spanning every point,
//!   stride `s2_t`; output `T2 x c2`, ReLU.
//! * layer 3: fully connected `T2 * c2 -> D`, no output nonlinearity.
//!
//! All convolutions are valid (no padding). Forward and backward passes are
//! written out by hand over flat row-major buffers.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::Window;
use crate::scalar::{dot, Scalar};

pub const MODEL_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_frames: usize,
    pub n_points: usize,
    pub c1: usize,
    pub k1_t: usize,
    pub s1_t: usize,
    pub c2: usize,
    pub k2_t: usize,
    pub s2_t: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Default architecture for windows of `n_frames x n_points`.
    pub fn for_window(n_frames: usize, n_points: usize) -> Self {
        Self {
            n_frames,
            n_points,
            c1: 16,
            k1_t: 5,
            s1_t: 2,
            c2: 32,
            k2_t: 5,
            s2_t: 2,
            embed_dim: 256,
            seed: 0,
        }
    }

    pub fn input_cols(&self) -> usize {
        3 * self.n_points
    }

    /// Temporal extent after layer 1.
    pub fn t1(&self) -> usize {
        conv_extent(self.n_frames, self.k1_t, self.s1_t)
    }

    /// Temporal extent after layer 2.
    pub fn t2(&self) -> usize {
        conv_extent(self.t1(), self.k2_t, self.s2_t)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_frames", self.n_frames),
            ("n_points", self.n_points),
            ("c1", self.c1),
            ("k1_t", self.k1_t),
            ("s1_t", self.s1_t),
            ("c2", self.c2),
            ("k2_t", self.k2_t),
            ("s2_t", self.s2_t),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("encoder {name} must be positive")));
        }
        if self.k1_t > self.n_frames {
            return Err(Error::Invalid(format!(
                "layer-1 kernel ({}) longer than the window ({} frames)",
                self.k1_t, self.n_frames
            )));
        }
        if self.k2_t > self.t1() {
            return Err(Error::Invalid(format!(
                "layer-2 kernel ({}) longer than layer-1 output ({} steps)",
                self.k2_t,
                self.t1()
            )));
        }
        Ok(())
    }

    fn fan_in(&self) -> [usize; 3] {
        [
            self.k1_t * 3,
            self.k2_t * self.n_points * self.c1,
            self.t2() * self.c2,
        ]
    }

    fn shapes(&self) -> [(&'static str, Vec<usize>); 6] {
        [
            ("w1", vec![self.c1, self.k1_t, 3]),
            ("b1", vec![self.c1]),
            ("w2", vec![self.c2, self.k2_t, self.n_points, self.c1]),
            ("b2", vec![self.c2]),
            ("w3", vec![self.embed_dim, self.t2(), self.c2]),
            ("b3", vec![self.embed_dim]),
        ]
    }
}

fn conv_extent(len: usize, kernel: usize, stride: usize) -> usize {
    if kernel > len || stride == 0 {
        0
    } else {
        (len - kernel) / stride + 1
    }
}

/// The six parameter tensors, flat and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: Vec<T>,
}

impl<T: Scalar> Tensors<T> {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let [w1, b1, w2, b2, w3, b3] = config.shapes().map(|(_, s)| vec![T::zero(); s.iter().product()]);
        Self { w1, b1, w2, b2, w3, b3 }
    }

    pub fn named(&self) -> [(&'static str, &Vec<T>); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Vec<T>); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, &y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for (_, a) in self.named_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn len(&self) -> usize {
        self.named().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoder weights together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub tensors: Tensors<T>,
}

/// Activations retained by a forward pass for use in backward.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Input window, `N x 3P`.
    pub input: Vec<T>,
    /// Layer-1 pre-activations, `T1 x P x c1`.
    pub z1: Vec<T>,
    pub h1: Vec<T>,
    /// Layer-2 pre-activations, `T2 x c2`.
    pub z2: Vec<T>,
    pub h2: Vec<T>,
    /// Embedding, `D`.
    pub output: Vec<T>,
}

/// Gradients with respect to every parameter and the input window.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Tensors<T>,
    pub input: Vec<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Fan-in scaled uniform weights, zero biases; deterministic in `config.seed`.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = Tensors::zeros(&config);
        let fan = config.fan_in();
        for (w, fan_in) in [&mut tensors.w1, &mut tensors.w2, &mut tensors.w3]
            .into_iter()
            .zip(fan)
        {
            let bound = (1.0 / fan_in as f64).sqrt();
            for x in w.iter_mut() {
                *x = T::of(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        let c = &self.config;
        if rows != c.n_frames || cols != c.input_cols() {
            return Err(Error::Shape(format!(
                "model expects windows of {} frames x {} points ({} columns), got {} frames x {} points ({} columns)",
                c.n_frames,
                c.n_points,
                c.input_cols(),
                rows,
                cols / 3,
                cols
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate activation.
    pub fn trace(&self, input: ArrayView2<'_, T>) -> Result<Trace<T>> {
        self.check_input(input.nrows(), input.ncols())?;
        let c = &self.config;
        let (p, c1, c2, d) = (c.n_points, c.c1, c.c2, c.embed_dim);
        let (t1, t2) = (c.t1(), c.t2());
        let cols = c.input_cols();
        let x: Vec<T> = input.iter().copied().collect();
        let tn = &self.tensors;

        let k1 = c.k1_t * 3;
        let mut z1 = vec![T::zero(); t1 * p * c1];
        let mut patch = vec![T::zero(); k1];
        for t in 0..t1 {
            for pi in 0..p {
                for dt in 0..c.k1_t {
                    let row = (t * c.s1_t + dt) * cols + 3 * pi;
                    patch[dt * 3..dt * 3 + 3].copy_from_slice(&x[row..row + 3]);
                }
                let out = &mut z1[(t * p + pi) * c1..(t * p + pi + 1) * c1];
                for (ci, o) in out.iter_mut().enumerate() {
                    *o = tn.b1[ci] + dot(&tn.w1[ci * k1..(ci + 1) * k1], &patch);
                }
            }
        }
        let h1: Vec<T> = z1.iter().map(|&v| v.max(T::zero())).collect();

        let k2 = c.k2_t * p * c1;
        let step = c.s2_t * p * c1;
        let mut z2 = vec![T::zero(); t2 * c2];
        for t in 0..t2 {
            let field = &h1[t * step..t * step + k2];
            for ci in 0..c2 {
                z2[t * c2 + ci] = tn.b2[ci] + dot(&tn.w2[ci * k2..(ci + 1) * k2], field);
            }
        }
        let h2: Vec<T> = z2.iter().map(|&v| v.max(T::zero())).collect();

        let k3 = t2 * c2;
        let output: Vec<T> = (0..d)
            .map(|di| tn.b3[di] + dot(&tn.w3[di * k3..(di + 1) * k3], &h2))
            .collect();

        Ok(Trace {
            input: x,
            z1,
            h1,
            z2,
            h2,
            output,
        })
    }

    pub fn forward(&self, input: ArrayView2<'_, T>) -> Result<Vec<T>> {
        Ok(self.trace(input)?.output)
    }

    /// Embeds a (normalized) window, converting its data to `T`.
    pub fn embed(&self, window: &Window) -> Result<Vec<T>> {
        let data = window.data.mapv(T::of);
        self.forward(data.view())
    }

    /// Backpropagates `grad_out` (dLoss/dEmbedding) through a recorded pass.
    pub fn backward_from_trace(&self, trace: &Trace<T>, grad_out: &[T]) -> Result<Gradients<T>> {
        let c = &self.config;
        if grad_out.len() != c.embed_dim {
            return Err(Error::Shape(format!(
                "output gradient has length {}, embedding dimension is {}",
                grad_out.len(),
                c.embed_dim
            )));
        }
        let (p, c1, c2) = (c.n_points, c.c1, c.c2);
        let (t1, t2) = (c.t1(), c.t2());
        let cols = c.input_cols();
        let tn = &self.tensors;
        let mut g = Tensors::zeros(c);

        // layer 3
        let k3 = t2 * c2;
        let mut dh2 = vec![T::zero(); k3];
        for (di, &go) in grad_out.iter().enumerate() {
            if go == T::zero() {
                continue;
            }
            g.b3[di] = go;
            let w = &tn.w3[di * k3..(di + 1) * k3];
            let gw = &mut g.w3[di * k3..(di + 1) * k3];
            for k in 0..k3 {
                gw[k] = go * trace.h2[k];
                dh2[k] += w[k] * go;
            }
        }

        // layer 2
        let k2 = c.k2_t * p * c1;
        let step = c.s2_t * p * c1;
        let mut dh1 = vec![T::zero(); t1 * p * c1];
        for t in 0..t2 {
            let base = t * step;
            for ci in 0..c2 {
                let idx = t * c2 + ci;
                if trace.z2[idx] <= T::zero() {
                    continue;
                }
                let dz = dh2[idx];
                if dz == T::zero() {
                    continue;
                }
                g.b2[ci] += dz;
                let w = &tn.w2[ci * k2..(ci + 1) * k2];
                let gw = &mut g.w2[ci * k2..(ci + 1) * k2];
                let field = &trace.h1[base..base + k2];
                let dfield = &mut dh1[base..base + k2];
                for r in 0..k2 {
                    gw[r] += dz * field[r];
                    dfield[r] += w[r] * dz;
                }
            }
        }

        // layer 1
        let k1 = c.k1_t * 3;
        let mut dx = vec![T::zero(); c.n_frames * cols];
        for t in 0..t1 {
            for pi in 0..p {
                for ci in 0..c1 {
                    let idx = (t * p + pi) * c1 + ci;
                    if trace.z1[idx] <= T::zero() {
                        continue;
                    }
                    let dz = dh1[idx];
                    if dz == T::zero() {
                        continue;
                    }
                    g.b1[ci] += dz;
                    for dt in 0..c.k1_t {
                        let row = (t * c.s1_t + dt) * cols + 3 * pi;
                        for dd in 0..3 {
                            let wi = ci * k1 + dt * 3 + dd;
                            g.w1[wi] += dz * trace.input[row + dd];
                            dx[row + dd] += tn.w1[wi] * dz;
                        }
                    }
                }
            }
        }

        Ok(Gradients {
            params: g,
            input: dx,
        })
    }

    pub fn backward(&self, input: ArrayView2<'_, T>, grad_out: &[T]) -> Result<Gradients<T>> {
        let trace = self.trace(input)?;
        self.backward_from_trace(&trace, grad_out)
    }

    pub fn to_json_string(&self) -> String {
        let tensors = self
            .config
            .shapes()
            .into_iter()
            .zip(self.tensors.named())
            .map(|((name, shape), (_, data))| {
                (
                    name.to_string(),
                    TensorFile {
                        shape,
                        data: data.iter().map(|v| v.as_f64()).collect(),
                    },
                )
            })
            .collect();
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config,
            tensors,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("model file", e))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::parse("model file", "missing format_version"))?;
        if found != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let file: ModelFile =
            serde_json::from_value(value).map_err(|e| Error::parse("model file", e))?;
        let config = file.config;
        config.validate()?;
        let mut tensors = Tensors::zeros(&config);
        let shapes = config.shapes();
        if file.tensors.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "model file has {} tensors, expected {}",
                file.tensors.len(),
                shapes.len()
            )));
        }
        for ((name, shape), (_, slot)) in shapes.into_iter().zip(tensors.named_mut()) {
            let t = file
                .tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("model file is missing tensor '{name}'")))?;
            if t.shape != shape || t.data.len() != slot.len() {
                return Err(Error::Shape(format!(
                    "tensor '{name}' has shape {:?} with {} values, config requires {:?}",
                    t.shape,
                    t.data.len(),
                    shape
                )));
            }
            if let Some(bad) = t.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::parse("model file", format!("tensor '{name}' holds {bad}")));
            }
            for (s, &v) in slot.iter_mut().zip(&t.data) {
                *s = T::of(v);
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u64,
    config: EncoderConfig,
    tensors: BTreeMap<String, TensorFile>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small_config(seed: u64) -> EncoderConfig {
        EncoderConfig {
            n_frames: 5,
            n_points: 2,
            c1: 2,
            k1_t: 2,
            s1_t: 1,
            c2: 2,
            k2_t: 2,
            s2_t: 1,
            embed_dim: 3,
            seed,
        }
    }

    fn random_input(config: &EncoderConfig, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((config.n_frames, config.input_cols()), |_| {
            rng.random_range(-1.0..1.0)
        })
    }

    fn with_random_biases(mut params: EncoderParams<f64>, seed: u64) -> EncoderParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in [&mut params.tensors.b1, &mut params.tensors.b2, &mut params.tensors.b3] {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        params
    }

    /// Direct nested-loop evaluation of the three layers, indexing the
    /// tensors by their documented multi-dimensional shapes.
    fn naive_forward(params: &EncoderParams<f64>, x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let c = params.config;
        let tn = &params.tensors;
        let (t1, t2) = (c.t1(), c.t2());
        let mut h1 = vec![vec![vec![0.0; c.c1]; c.n_points]; t1];
        let mut z1_flat = Vec::new();
        for t in 0..t1 {
            for p in 0..c.n_points {
                for o in 0..c.c1 {
                    let mut s = tn.b1[o];
                    for dt in 0..c.k1_t {
                        for d in 0..3 {
                            s += tn.w1[(o * c.k1_t + dt) * 3 + d] * x[[t * c.s1_t + dt, 3 * p + d]];
                        }
                    }
                    z1_flat.push(s);
                    h1[t][p][o] = s.max(0.0);
                }
            }
        }
        let mut h2 = vec![vec![0.0; c.c2]; t2];
        for t in 0..t2 {
            for o in 0..c.c2 {
                let mut s = tn.b2[o];
                for dt in 0..c.k2_t {
                    for p in 0..c.n_points {
                        for i in 0..c.c1 {
                            let w = tn.w2[((o * c.k2_t + dt) * c.n_points + p) * c.c1 + i];
                            s += w * h1[t * c.s2_t + dt][p][i];
                        }
                    }
                }
                h2[t][o] = s.max(0.0);
            }
        }
        let mut out = vec![0.0; c.embed_dim];
        for (d, o) in out.iter_mut().enumerate() {
            let mut s = tn.b3[d];
            for t in 0..t2 {
                for i in 0..c.c2 {
                    s += tn.w3[(d * t2 + t) * c.c2 + i] * h2[t][i];
                }
            }
            *o = s;
        }
        (out, z1_flat)
    }

    #[test]
    fn init_is_deterministic() {
        let config = EncoderConfig::for_window(75, 39);
        let a = EncoderParams::<f64>::init(config).unwrap();
        let b = EncoderParams::<f64>::init(config).unwrap();
        assert_eq!(a, b);
        let c = EncoderParams::<f64>::init(EncoderConfig { seed: 1, ..config }).unwrap();
        assert_ne!(a.tensors.w1, c.tensors.w1);
    }

    #[test]
    fn marker_set_dimensions() {
        let config = EncoderConfig::for_window(75, 39);
        assert_eq!(config.input_cols(), 117);
        let params = EncoderParams::<f64>::init(config).unwrap();
        let trace = params.trace(Array2::zeros((75, 117)).view()).unwrap();
        // layer-1 output is T1 x 39 x c1
        assert_eq!(trace.z1.len(), config.t1() * 39 * config.c1);
        assert_eq!(trace.output.len(), 256);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let config = EncoderConfig {
            n_frames: 75,
            n_points: 39,
            c1: 16,
            k1_t: 5,
            s1_t: 2,
            c2: 32,
            k2_t: 5,
            s2_t: 2,
            embed_dim: 256,
            seed: 9,
        };
        let params = EncoderParams::<f64>::init(config).unwrap();
        let fan = config.fan_in();
        assert_eq!(fan[2], config.t2() * config.c2);
        for (w, fan_in) in [&params.tensors.w1, &params.tensors.w2, &params.tensors.w3]
            .into_iter()
            .zip(fan)
        {
            let bound = (1.0 / fan_in as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() < bound));
        }
        // 10^5+ draws of W3: uniform on (-b, b) has mean 0 and max |v| near b
        let w3 = &params.tensors.w3;
        assert!(w3.len() >= 100_000);
        let bound = (1.0 / fan[2] as f64).sqrt();
        let mean = w3.iter().sum::<f64>() / w3.len() as f64;
        let max = w3.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let var = w3.iter().map(|v| v * v).sum::<f64>() / w3.len() as f64;
        assert!(mean.abs() < 0.01 * bound);
        assert!(max > 0.999 * bound);
        assert!((var - bound * bound / 3.0).abs() < 0.01 * bound * bound);
        assert!(params.tensors.b1.iter().chain(&params.tensors.b3).all(|&b| b == 0.0));
    }

    #[test]
    fn zero_window_gives_bias() {
        let params = EncoderParams::<f64>::init(small_config(2)).unwrap();
        let out = params.forward(Array2::zeros((5, 6)).view()).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        let params = with_random_biases(params, 4);
        // with nonzero biases the output is no longer b3 in general, but with
        // zero input layer 1 is ReLU(b1) everywhere
        let trace = params.trace(Array2::zeros((5, 6)).view()).unwrap();
        for (i, z) in trace.z1.iter().enumerate() {
            assert_eq!(*z, params.tensors.b1[i % 2]);
        }
    }

    #[test]
    fn layer1_preactivations_are_linear() {
        let params = EncoderParams::<f64>::init(small_config(3)).unwrap();
        let x = random_input(&params.config, 1);
        let a = params.trace(x.view()).unwrap();
        let b = params.trace((&x * 2.0).view()).unwrap();
        for (za, zb) in a.z1.iter().zip(&b.z1) {
            assert!((2.0 * za - zb).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        for seed in 0..10 {
            let params = with_random_biases(EncoderParams::<f64>::init(small_config(seed)).unwrap(), seed);
            let x = random_input(&params.config, seed + 100);
            let (expected, z1) = naive_forward(&params, &x);
            let trace = params.trace(x.view()).unwrap();
            for (a, b) in trace.output.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in trace.z1.iter().zip(&z1) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // a config with strides > 1
        let config = EncoderConfig {
            n_frames: 11,
            n_points: 3,
            c1: 3,
            k1_t: 3,
            s1_t: 2,
            c2: 2,
            k2_t: 2,
            s2_t: 2,
            embed_dim: 4,
            seed: 5,
        };
        let params = with_random_biases(EncoderParams::<f64>::init(config).unwrap(), 6);
        let x = random_input(&config, 7);
        let (expected, _) = naive_forward(&params, &x);
        let out = params.forward(x.view()).unwrap();
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer1_isolates_points() {
        let config = EncoderConfig {
            n_frames: 6,
            n_points: 4,
            c1: 3,
            k1_t: 2,
            s1_t: 1,
            c2: 2,
            k2_t: 2,
            s2_t: 1,
            embed_dim: 3,
            seed: 1,
        };
        let params = with_random_biases(EncoderParams::<f64>::init(config).unwrap(), 2);
        let base = params.trace(Array2::zeros((6, 12)).view()).unwrap();
        let keep = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((6, 12), |(_, c)| {
            if c / 3 == keep {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let t = params.trace(x.view()).unwrap();
        for tt in 0..config.t1() {
            for p in 0..4 {
                for ci in 0..3 {
                    let i = (tt * 4 + p) * 3 + ci;
                    if p != keep {
                        assert_eq!(t.z1[i], base.z1[i]);
                    }
                }
            }
        }
        assert_ne!(t.z1, base.z1);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let params = with_random_biases(EncoderParams::<f64>::init(small_config(1)).unwrap(), 1);
        let x = random_input(&params.config, 2);
        let g = params.backward(x.view(), &[0.0; 3]).unwrap();
        for (_, t) in g.params.named() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut params = EncoderParams::<f64>::init(small_config(1)).unwrap();
        // every layer-2 unit pre-activation strongly negative
        params.tensors.b2.iter_mut().for_each(|b| *b = -1e6);
        let x = random_input(&params.config, 2);
        let g = params.backward(x.view(), &[1.0, -2.0, 0.5]).unwrap();
        assert!(g.params.w2.iter().all(|&v| v == 0.0));
        assert!(g.params.w1.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
        assert_eq!(g.params.b3, vec![1.0, -2.0, 0.5]);
    }

    /// Central differences on `sum(grad_out * forward)` against backward.
    fn max_rel_error(params: &EncoderParams<f64>, x: &Array2<f64>, grad_out: &[f64]) -> f64 {
        let h = 1e-4;
        let objective = |p: &EncoderParams<f64>, x: &Array2<f64>| -> f64 {
            p.forward(x.view()).unwrap().iter().zip(grad_out).map(|(a, b)| a * b).sum()
        };
        let g = params.backward(x.view(), grad_out).unwrap();
        let mut worst: f64 = 0.0;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        let names = ["w1", "b1", "w2", "b2", "w3", "b3"];
        for (ti, name) in names.iter().enumerate() {
            let len = params.tensors.named()[ti].1.len();
            for k in 0..len {
                let mut plus = params.clone();
                plus.tensors.named_mut()[ti].1[k] += h;
                let mut minus = params.clone();
                minus.tensors.named_mut()[ti].1[k] -= h;
                let numeric = (objective(&plus, x) - objective(&minus, x)) / (2.0 * h);
                let analytic = g.params.named()[ti].1[k];
                let e = rel(analytic, numeric);
                assert!(e < 1e-4, "{name}[{k}]: analytic {analytic} numeric {numeric}");
                worst = worst.max(e);
            }
        }
        for k in 0..x.len() {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[k] += h;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[k] -= h;
            let numeric = (objective(params, &plus) - objective(params, &minus)) / (2.0 * h);
            worst = worst.max(rel(g.input[k], numeric));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let params = with_random_biases(EncoderParams::<f64>::init(small_config(seed)).unwrap(), seed);
            let x = random_input(&params.config, seed + 10);
            let err = max_rel_error(&params, &x, &[0.3, -1.1, 0.7]);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let p64 = with_random_biases(EncoderParams::<f64>::init(small_config(4)).unwrap(), 4);
        let p32 = EncoderParams::<f32>::from_json_str(&p64.to_json_string()).unwrap();
        let x = random_input(&p64.config, 5);
        let a = p64.forward(x.view()).unwrap();
        let b = p32.forward(x.mapv(|v| v as f32).view()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - *v as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let params = with_random_biases(EncoderParams::<f64>::init(small_config(6)).unwrap(), 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        params.save(&path).unwrap();
        let back = EncoderParams::<f64>::load(&path).unwrap();
        assert_eq!(back, params);
        let x = random_input(&params.config, 1);
        assert_eq!(back.forward(x.view()).unwrap(), params.forward(x.view()).unwrap());
    }

    #[test]
    fn truncated_model_is_a_parse_error() {
        let text = EncoderParams::<f64>::init(small_config(6)).unwrap().to_json_string();
        let cut = &text[..text.len() / 2];
        assert!(matches!(EncoderParams::<f64>::from_json_str(cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn version_and_shape_are_validated() {
        let text = EncoderParams::<f64>::init(small_config(6)).unwrap().to_json_string();
        let bumped = text.replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(
            EncoderParams::<f64>::from_json_str(&bumped),
            Err(Error::Version { found: 2, .. })
        ));
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["config"]["n_points"] = serde_json::json!(3);
        assert!(matches!(
            EncoderParams::<f64>::from_json_str(&value.to_string()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn point_count_mismatch_names_both() {
        let params = EncoderParams::<f64>::init(EncoderConfig::for_window(75, 39)).unwrap();
        let err = params.forward(Array2::zeros((75, 75)).view()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("39 points") && msg.contains("25 points"), "{msg}");
    }
}
