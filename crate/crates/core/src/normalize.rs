//! Temporal windows: extraction, augmentation and body-centric normalization.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::pose_io::{Anchor, PointLayout, PoseSequence};

/// Below this the XY extent of the pelvis axis is treated as zero.
pub const DEGENERATE_ANCHOR: f64 = 1e-9;
/// Channels with a smaller standard deviation are left unscaled.
pub const DEGENERATE_CHANNEL_STD: f64 = 1e-12;

/// Window geometry: how long, how densely sampled, and how far apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub length_seconds: f64,
    pub sample_rate: f64,
    pub stride_seconds: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            length_seconds: 3.0,
            sample_rate: 25.0,
            stride_seconds: 0.5,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.length_seconds) || !ok(self.sample_rate) || !ok(self.stride_seconds) {
            return Err(Error::Invalid(format!(
                "window length, sample rate and stride must be positive: {self:?}"
            )));
        }
        let n = self.length_seconds * self.sample_rate;
        if (n - n.round()).abs() > 1e-6 || n.round() < 2.0 {
            return Err(Error::Invalid(format!(
                "window of {} s at {} fps must hold an integer number (>= 2) of frames",
                self.length_seconds, self.sample_rate
            )));
        }
        Ok(())
    }

    /// Rows per window, `N`.
    pub fn n_frames(&self) -> usize {
        (self.length_seconds * self.sample_rate).round() as usize
    }

    /// Evenly strided center times `0, stride, 2*stride, ...` up to `duration`.
    pub fn centers(&self, duration: f64) -> Vec<f64> {
        let count = (duration / self.stride_seconds + 1e-9).floor() as usize + 1;
        (0..count).map(|k| k as f64 * self.stride_seconds).collect()
    }
}

/// `N x 3P` block of poses sampled around `center_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: Array2<f64>,
    pub source_name: String,
    pub center_time: f64,
    pub sample_rate: f64,
    pub layout_name: String,
}

impl Window {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.data.ncols() / 3
    }

    /// Writes the window as a frames CSV plus a `<stem>.json` metadata sidecar.
    pub fn write_dump(&self, layout: &PointLayout, csv_path: &Path) -> Result<()> {
        let mut file =
            std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let header: Vec<String> = layout
            .points()
            .iter()
            .flat_map(|p| ["x", "y", "z"].map(|a| format!("{p}.{a}")))
            .collect();
        let mut text = header.join(",");
        text.push('\n');
        for row in self.data.rows() {
            let cells: Vec<String> = row.iter().map(|&v| sig9(v)).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(csv_path, e))?;
        let meta = serde_json::json!({
            "source_name": self.source_name,
            "center_time": self.center_time,
            "sample_rate": self.sample_rate,
            "layout_name": self.layout_name,
            "n_frames": self.n_frames(),
        });
        let meta_path = csv_path.with_extension("json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
            .map_err(|e| Error::io(meta_path, e))
    }
}

fn check_center(seq: &PoseSequence, center_time: f64, spec: &WindowSpec) -> Result<()> {
    let margin = spec.length_seconds;
    if !center_time.is_finite() || center_time < -margin || center_time > seq.duration() + margin {
        return Err(Error::Invalid(format!(
            "center time {center_time} s is more than one window length outside '{}' (0..{} s)",
            seq.name(),
            seq.duration()
        )));
    }
    Ok(())
}

/// `n` rows at `center + (i - (n-1)/2) / rate`, clamped to the sequence span.
fn sample_rows(seq: &PoseSequence, center_time: f64, rate: f64, n: usize) -> Array2<f64> {
    let cols = 3 * seq.n_points();
    let mut data = Array2::<f64>::zeros((n, cols));
    let half = (n as f64 - 1.0) / 2.0;
    let flat = data.as_slice_mut().expect("standard layout");
    for (i, row) in flat.chunks_exact_mut(cols).enumerate() {
        seq.sample_into(center_time + (i as f64 - half) / rate, row);
    }
    data
}

/// Raw (un-normalized) window centered at `center_time`.
pub fn extract_window(seq: &PoseSequence, center_time: f64, spec: &WindowSpec) -> Result<Window> {
    spec.validate()?;
    check_center(seq, center_time, spec)?;
    Ok(Window {
        data: sample_rows(seq, center_time, spec.sample_rate, spec.n_frames()),
        source_name: seq.name().to_string(),
        center_time,
        sample_rate: spec.sample_rate,
        layout_name: seq.layout().name().to_string(),
    })
}

/// Temporal jitter of one augmented window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Center offset, seconds.
    pub dt: f64,
    /// Relative rate change; the window is sampled at `(1 + dr) * rate`.
    pub dr: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { dt: 0.0, dr: 0.0 };

    /// `dt ~ U(-0.5, 0.5) * length/3`, `dr ~ U(-1/3, 1/3)`.
    pub fn draw<R: Rng + ?Sized>(spec: &WindowSpec, rng: &mut R) -> Self {
        let scale = spec.length_seconds / 3.0;
        let dt = rng.random_range(-0.5..0.5) * scale;
        let dr = rng.random_range(-1.0 / 3.0..1.0 / 3.0);
        Jitter { dt, dr }
    }
}

/// Augmented raw window with an explicit jitter.
pub fn augment_with(
    seq: &PoseSequence,
    center_time: f64,
    spec: &WindowSpec,
    jitter: Jitter,
) -> Result<Window> {
    spec.validate()?;
    check_center(seq, center_time, spec)?;
    let rate = (1.0 + jitter.dr) * spec.sample_rate;
    let center = center_time + jitter.dt;
    Ok(Window {
        data: sample_rows(seq, center, rate, spec.n_frames()),
        source_name: seq.name().to_string(),
        center_time: center,
        sample_rate: rate,
        layout_name: seq.layout().name().to_string(),
    })
}

/// Augmented raw window with jitter drawn from `rng`.
pub fn augment<R: Rng + ?Sized>(
    seq: &PoseSequence,
    center_time: f64,
    spec: &WindowSpec,
    rng: &mut R,
) -> Result<Window> {
    let jitter = Jitter::draw(spec, rng);
    augment_with(seq, center_time, spec, jitter)
}

/// Left and right pelvis reference points of one pose row.
fn pelvis_sides(row: &[f64], anchor: Anchor) -> ([f64; 3], [f64; 3]) {
    let pt = |i: usize| [row[3 * i], row[3 * i + 1], row[3 * i + 2]];
    let mid = |a: [f64; 3], b: [f64; 3]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
    match anchor {
        Anchor::Pelvis {
            left_anterior,
            right_anterior,
            left_posterior,
            right_posterior,
        } => (
            mid(pt(left_anterior), pt(left_posterior)),
            mid(pt(right_anterior), pt(right_posterior)),
        ),
        Anchor::Hips { left, right } => (pt(left), pt(right)),
    }
}

/// The pose at the window's center time. For even `N` this is the mean of
/// the two middle rows, which is what linear sampling at `t0` would give.
fn center_pose(data: &Array2<f64>) -> Vec<f64> {
    let n = data.nrows();
    let lo = (n - 1) / 2;
    let hi = n / 2;
    data.row(lo)
        .iter()
        .zip(data.row(hi).iter())
        .map(|(a, b)| (a + b) / 2.0)
        .collect()
}

/// Body-centric normalization of a raw window.
///
/// 1. translate so the center-frame pelvis midpoint is the origin;
/// 2. rotate about Z so the center-frame left-to-right pelvis axis lies on +X;
/// 3. divide the X, Y and Z channels by their pooled standard deviation.
pub fn normalize_window(w: &Window, layout: &PointLayout) -> Result<Window> {
    let p = layout.n_points();
    if w.data.ncols() != 3 * p || w.layout_name != layout.name() {
        return Err(Error::Shape(format!(
            "window from layout '{}' with {} columns does not match layout '{}' ({} columns)",
            w.layout_name,
            w.data.ncols(),
            layout.name(),
            3 * p
        )));
    }
    if w.n_frames() < 2 {
        return Err(Error::Shape("window needs at least 2 frames".into()));
    }
    let center = center_pose(&w.data);
    let (lmid, rmid) = pelvis_sides(&center, layout.anchor());
    let origin = [
        (lmid[0] + rmid[0]) / 2.0,
        (lmid[1] + rmid[1]) / 2.0,
        (lmid[2] + rmid[2]) / 2.0,
    ];
    let (ax, ay) = (rmid[0] - lmid[0], rmid[1] - lmid[1]);
    let len = ax.hypot(ay);
    if len < DEGENERATE_ANCHOR {
        return Err(Error::Degenerate(format!(
            "degenerate pose in '{}' at t={} s: pelvis axis has no horizontal extent",
            w.source_name, w.center_time
        )));
    }
    let (cos, sin) = (ax / len, ay / len);

    let mut data = w.data.clone();
    let flat = data.as_slice_mut().expect("standard layout");
    for xyz in flat.chunks_exact_mut(3) {
        let x = xyz[0] - origin[0];
        let y = xyz[1] - origin[1];
        xyz[0] = cos * x + sin * y;
        xyz[1] = -sin * x + cos * y;
        xyz[2] -= origin[2];
    }

    let count = (flat.len() / 3) as f64;
    for c in 0..3 {
        let mean = flat.iter().skip(c).step_by(3).sum::<f64>() / count;
        let var = flat
            .iter()
            .skip(c)
            .step_by(3)
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / count;
        let std = var.sqrt();
        let scale = if std < DEGENERATE_CHANNEL_STD { 1.0 } else { std };
        for v in flat.iter_mut().skip(c).step_by(3) {
            *v /= scale;
        }
    }

    Ok(Window {
        data,
        ..w.clone()
    })
}

/// Extract and normalize in one step.
pub fn normalized_window(seq: &PoseSequence, center_time: f64, spec: &WindowSpec) -> Result<Window> {
    normalize_window(&extract_window(seq, center_time, spec)?, seq.layout())
}
