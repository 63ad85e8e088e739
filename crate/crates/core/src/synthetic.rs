//! Scripted synthetic performances with known keypose times.
//!
//! Every performance plays the same ordered list of motion primitives. A
//! primitive moves each joint away from a rest pose and back along
//! `sin(pi s) * (A + B sin(2 pi s))` for phase `s` in `[0, 1]`, so
//! consecutive primitives join continuously. The keypose of a primitive is
//! its midpoint. Performances differ in per-primitive duration, body scale,
//! heading, position and additive noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::KeyposeLabels;
use crate::error::{Error, Result};
use crate::pose_io::{write_frames_csv, PointLayout, PoseSequence, Role};

/// Rest pose of the synthetic skeleton, meters, Z up, facing +Y.
const SKELETON: [(&str, [f64; 3]); 15] = [
    ("lhip", [-0.10, 0.0, 0.95]),
    ("rhip", [0.10, 0.0, 0.95]),
    ("spine", [0.0, 0.0, 1.20]),
    ("neck", [0.0, 0.0, 1.50]),
    ("head", [0.0, 0.02, 1.68]),
    ("lshoulder", [-0.20, 0.0, 1.45]),
    ("rshoulder", [0.20, 0.0, 1.45]),
    ("lelbow", [-0.45, 0.0, 1.45]),
    ("relbow", [0.45, 0.0, 1.45]),
    ("lwrist", [-0.70, 0.0, 1.45]),
    ("rwrist", [0.70, 0.0, 1.45]),
    ("lknee", [-0.10, 0.02, 0.50]),
    ("rknee", [0.10, 0.02, 0.50]),
    ("lankle", [-0.10, 0.0, 0.08]),
    ("rankle", [0.10, 0.0, 0.08]),
];

/// How far each joint may travel, relative to the largest amplitude.
const REACH: [f64; 15] = [
    0.15, 0.15, 0.25, 0.35, 0.45, 0.45, 0.45, 0.8, 0.8, 1.0, 1.0, 0.6, 0.6, 0.8, 0.8,
];

pub fn skeleton_layout() -> PointLayout {
    let points = SKELETON.iter().map(|(n, _)| n.to_string()).collect();
    let roles = BTreeMap::from([
        (Role::LeftHip, "lhip".to_string()),
        (Role::RightHip, "rhip".to_string()),
    ]);
    let lr_pairs = ["hip", "shoulder", "elbow", "wrist", "knee", "ankle"]
        .iter()
        .map(|j| (format!("l{j}"), format!("r{j}")))
        .collect();
    PointLayout::new("synthetic-skeleton", points, roles, lr_pairs).expect("static layout is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_performances: usize,
    pub n_primitives: usize,
    /// Nominal primitive length in seconds.
    pub base_duration: f64,
    /// Each primitive lasts `base_duration * U(1 - j, 1 + j)`.
    pub duration_jitter: f64,
    /// Noise standard deviation as a fraction of each axis' std.
    pub noise_fraction: f64,
    /// Largest joint excursion in meters.
    pub amplitude: f64,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_performances: 8,
            n_primitives: 10,
            base_duration: 3.0,
            duration_jitter: 0.3,
            noise_fraction: 0.02,
            amplitude: 0.35,
            frame_rate: 30.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPerformance {
    pub sequence: PoseSequence,
    /// Ground-truth keypose times, one per primitive.
    pub keyposes: KeyposeLabels,
    /// Start time of each primitive, then the end time of the last.
    pub boundaries: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub layout: Arc<PointLayout>,
    pub performances: Vec<SyntheticPerformance>,
}

struct Primitive {
    a: Vec<[f64; 3]>,
    b: Vec<[f64; 3]>,
}

fn draw_primitive(rng: &mut ChaCha8Rng, amplitude: f64) -> Primitive {
    let mut vec3 = |scale: f64| {
        let mut v = [0.0; 3];
        for c in &mut v {
            *c = rng.random_range(-1.0..1.0) * scale;
        }
        v
    };
    let a = REACH.iter().map(|&r| vec3(amplitude * r)).collect();
    let b = REACH.iter().map(|&r| vec3(0.5 * amplitude * r)).collect();
    Primitive { a, b }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if config.n_performances == 0 || config.n_primitives == 0 {
        return Err(Error::Invalid("synthetic corpus needs performances and primitives".into()));
    }
    if !(config.base_duration > 0.0 && (0.0..1.0).contains(&config.duration_jitter)) {
        return Err(Error::Invalid("base_duration must be > 0 and duration_jitter in [0, 1)".into()));
    }
    if !(config.frame_rate > 0.0 && config.noise_fraction >= 0.0 && config.amplitude > 0.0) {
        return Err(Error::Invalid("frame_rate, amplitude must be > 0 and noise_fraction >= 0".into()));
    }
    let layout = Arc::new(skeleton_layout().with_frame_rate(config.frame_rate));
    let mut script_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let script: Vec<Primitive> = (0..config.n_primitives)
        .map(|_| draw_primitive(&mut script_rng, config.amplitude))
        .collect();
    let performances = (0..config.n_performances)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1000 + k as u64));
            perform(&script, config, &layout, &mut rng, format!("perf_{k:02}"))
        })
        .collect::<Result<_>>()?;
    Ok(SyntheticCorpus { layout, performances })
}

fn perform(
    script: &[Primitive],
    config: &SyntheticConfig,
    layout: &Arc<PointLayout>,
    rng: &mut ChaCha8Rng,
    name: String,
) -> Result<SyntheticPerformance> {
    let j = config.duration_jitter;
    let durations: Vec<f64> = script
        .iter()
        .map(|_| config.base_duration * rng.random_range(1.0 - j..=1.0 + j))
        .collect();
    let mut boundaries = vec![0.0];
    for d in &durations {
        boundaries.push(boundaries.last().unwrap() + d);
    }
    let total = *boundaries.last().unwrap();
    let yaw = rng.random_range(0.0..2.0 * PI);
    let scale = rng.random_range(0.9..1.1);
    let shift = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let (sin, cos) = yaw.sin_cos();

    let n_frames = (total * config.frame_rate).floor() as usize + 1;
    let n_points = SKELETON.len();
    let mut frames = Array3::<f64>::zeros((n_frames, n_points, 3));
    let mut k = 0;
    for f in 0..n_frames {
        let t = (f as f64 / config.frame_rate).min(total);
        while k + 1 < script.len() && t >= boundaries[k + 1] {
            k += 1;
        }
        let phase = ((t - boundaries[k]) / durations[k]).clamp(0.0, 1.0);
        let env = (PI * phase).sin();
        let wiggle = (2.0 * PI * phase).sin();
        for (p, (_, rest)) in SKELETON.iter().enumerate() {
            let (a, b) = (script[k].a[p], script[k].b[p]);
            let local: [f64; 3] =
                std::array::from_fn(|c| scale * (rest[c] + env * (a[c] + b[c] * wiggle)));
            frames[[f, p, 0]] = cos * local[0] - sin * local[1] + shift[0];
            frames[[f, p, 1]] = sin * local[0] + cos * local[1] + shift[1];
            frames[[f, p, 2]] = local[2];
        }
    }

    if config.noise_fraction > 0.0 {
        for c in 0..3 {
            let channel = frames.slice(s![.., .., c]);
            let std = channel.std(0.0);
            let noise = Normal::new(0.0, config.noise_fraction * std)
                .map_err(|e| Error::Invalid(format!("noise distribution: {e}")))?;
            for v in frames.slice_mut(s![.., .., c]).iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }

    let keyposes = KeyposeLabels::new(
        durations
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("k{:02}", i + 1), boundaries[i] + d / 2.0))
            .collect(),
    )?;
    let sequence = PoseSequence::new(name, layout.clone(), frames, config.frame_rate)?;
    Ok(SyntheticPerformance { sequence, keyposes, boundaries })
}

/// The first `fraction` of `seq`'s frames, at least one.
pub fn truncate(seq: &PoseSequence, fraction: f64) -> Result<PoseSequence> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("truncation fraction must lie in (0, 1], got {fraction}")));
    }
    let keep = ((seq.n_frames() as f64 * fraction).round() as usize).max(1);
    let frames = seq.frames().slice(s![..keep, .., ..]).to_owned();
    PoseSequence::new(
        format!("{}_trunc", seq.name()),
        seq.layout_arc().clone(),
        frames,
        seq.frame_rate(),
    )
}

/// Writes `layout.json`, one frames CSV and keypose CSV per performance and
/// a `manifest.json` listing them. Returns the manifest path.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout_path = dir.join("layout.json");
    fs::write(&layout_path, corpus.layout.to_json_string()).map_err(|e| Error::io(&layout_path, e))?;
    let mut entries = Vec::new();
    for perf in &corpus.performances {
        let name = perf.sequence.name();
        let frames = dir.join(format!("{name}.csv"));
        let file = fs::File::create(&frames).map_err(|e| Error::io(&frames, e))?;
        write_frames_csv(file, &perf.sequence)?;
        let keys = dir.join(format!("{name}_keyposes.csv"));
        let file = fs::File::create(&keys).map_err(|e| Error::io(&keys, e))?;
        perf.keyposes.write_csv(file)?;
        entries.push(serde_json::json!({
            "name": name,
            "layout": "layout.json",
            "frames": format!("{name}.csv"),
            "keyposes": format!("{name}_keyposes.csv"),
            "action": "synthetic",
        }));
    }
    let manifest = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries).expect("json values serialize");
    fs::write(&manifest, text + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
