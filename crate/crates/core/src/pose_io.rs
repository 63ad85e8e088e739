//! Point layouts, pose sequences and the file formats used to exchange them.
//!
//! A [`PointLayout`] names the 3D points of a marker set or skeleton and tags
//! the few points needed to build a body-centric frame (the four pelvis
//! markers, or the two hip joints). A [`PoseSequence`] holds `F x P x 3`
//! coordinates in layout order, Z up.
//!
//! File formats:
//! * layout: JSON `{"name", "points", "roles", "lr_pairs", "frame_rate"?}`
//! * frames: CSV with header `<pt>.x,<pt>.y,<pt>.z` per point, one row per frame
//! * retarget map: JSON `{"source", "target", "rules": {target: [[source, weight], ...]}}`

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::sig9;

/// Anatomical tag attached to a layout point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    LeftPelvisAnterior,
    RightPelvisAnterior,
    LeftPelvisPosterior,
    RightPelvisPosterior,
    LeftHip,
    RightHip,
}

/// Point indices used to build the body-centric frame of a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    /// Marker mode: LASI, RASI, LPSI, RPSI.
    Pelvis {
        left_anterior: usize,
        right_anterior: usize,
        left_posterior: usize,
        right_posterior: usize,
    },
    /// Skeleton mode: left and right hip joints.
    Hips { left: usize, right: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    name: String,
    points: Vec<String>,
    #[serde(default)]
    roles: BTreeMap<Role, String>,
    #[serde(default)]
    lr_pairs: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_rate: Option<f64>,
}

/// Named, ordered 3D point set with role tags and left/right pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLayout {
    name: String,
    points: Vec<String>,
    roles: BTreeMap<Role, String>,
    lr_pairs: Vec<(String, String)>,
    frame_rate: Option<f64>,
    anchor: Anchor,
    index: HashMap<String, usize>,
}

impl PointLayout {
    pub fn new(
        name: impl Into<String>,
        points: Vec<String>,
        roles: BTreeMap<Role, String>,
        lr_pairs: Vec<(String, String)>,
    ) -> Result<Self> {
        let name = name.into();
        let err = |message: String| Error::Layout {
            layout: name.clone(),
            message,
        };
        if points.is_empty() {
            return Err(err("layout has no points".into()));
        }
        let mut index = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(err(format!("duplicate point name '{p}'")));
            }
        }
        for (role, p) in &roles {
            if !index.contains_key(p) {
                return Err(err(format!("role {role:?} references unknown point '{p}'")));
            }
        }
        for (l, r) in &lr_pairs {
            for p in [l, r] {
                if !index.contains_key(p) {
                    return Err(err(format!("lr_pair references unknown point '{p}'")));
                }
            }
            if l == r {
                return Err(err(format!("lr_pair ('{l}', '{r}') pairs a point with itself")));
            }
        }
        let at = |role: Role| roles.get(&role).map(|p| index[p]);
        let anchor = match (
            at(Role::LeftPelvisAnterior),
            at(Role::RightPelvisAnterior),
            at(Role::LeftPelvisPosterior),
            at(Role::RightPelvisPosterior),
            at(Role::LeftHip),
            at(Role::RightHip),
        ) {
            (Some(la), Some(ra), Some(lp), Some(rp), _, _) => Anchor::Pelvis {
                left_anterior: la,
                right_anterior: ra,
                left_posterior: lp,
                right_posterior: rp,
            },
            (_, _, _, _, Some(left), Some(right)) => Anchor::Hips { left, right },
            _ => {
                return Err(err(
                    "no normalization anchor: need all four pelvis roles or both hip roles".into(),
                ))
            }
        };
        Ok(Self {
            name,
            points,
            roles,
            lr_pairs,
            frame_rate: None,
            anchor,
            index,
        })
    }

    pub fn with_frame_rate(mut self, rate: f64) -> Self {
        self.frame_rate = Some(rate);
        self
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: LayoutFile = serde_json::from_str(s).map_err(|e| Error::parse("layout", e))?;
        let mut layout = Self::new(file.name, file.points, file.roles, file.lr_pairs)?;
        if let Some(rate) = file.frame_rate {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(Error::Layout {
                    layout: layout.name,
                    message: format!("frame_rate must be positive, got {rate}"),
                });
            }
            layout.frame_rate = Some(rate);
        }
        Ok(layout)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        let file = LayoutFile {
            name: self.name.clone(),
            points: self.points.clone(),
            roles: self.roles.clone(),
            lr_pairs: self.lr_pairs.clone(),
            frame_rate: self.frame_rate,
        };
        serde_json::to_string_pretty(&file).expect("layout serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn points(&self) -> &[String] {
        &self.points
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn roles(&self) -> &BTreeMap<Role, String> {
        &self.roles
    }

    pub fn lr_pairs(&self) -> &[(String, String)] {
        &self.lr_pairs
    }

    pub fn frame_rate(&self) -> Option<f64> {
        self.frame_rate
    }

    pub fn anchor(&self) -> Anchor {
        self.anchor
    }

    pub fn index_of(&self, point: &str) -> Option<usize> {
        self.index.get(point).copied()
    }

    pub fn role_index(&self, role: Role) -> Option<usize> {
        self.roles.get(&role).map(|p| self.index[p])
    }
}

/// A performance: `F x P x 3` coordinates sampled uniformly at `frame_rate`.
#[derive(Debug, Clone)]
pub struct PoseSequence {
    layout: Arc<PointLayout>,
    frames: Array3<f64>,
    frame_rate: f64,
    name: String,
}

impl PoseSequence {
    pub fn new(
        name: impl Into<String>,
        layout: Arc<PointLayout>,
        frames: Array3<f64>,
        frame_rate: f64,
    ) -> Result<Self> {
        let (f, p, c) = frames.dim();
        if f == 0 {
            return Err(Error::Shape("sequence has no frames".into()));
        }
        if p != layout.n_points() || c != 3 {
            return Err(Error::Shape(format!(
                "frames array is {f}x{p}x{c}, layout '{}' expects {f}x{}x3",
                layout.name(),
                layout.n_points()
            )));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::Invalid(format!(
                "frame rate must be positive, got {frame_rate}"
            )));
        }
        if let Some(((fi, pi, ci), _)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                frame: fi,
                point: layout.points()[pi].clone(),
                axis: ['x', 'y', 'z'][ci],
            });
        }
        Ok(Self {
            layout,
            frames,
            frame_rate,
            name: name.into(),
        })
    }

    pub fn layout(&self) -> &PointLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> &Arc<PointLayout> {
        &self.layout
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn n_points(&self) -> usize {
        self.frames.dim().1
    }

    /// Time of the last frame, in seconds.
    pub fn duration(&self) -> f64 {
        (self.n_frames() - 1) as f64 / self.frame_rate
    }

    pub fn frame(&self, i: usize) -> ArrayView2<'_, f64> {
        self.frames.index_axis(ndarray::Axis(0), i)
    }

    /// Writes the linearly interpolated pose at time `t` (clamped to the
    /// sequence span) into `out`, laid out as `x,y,z` triplets.
    pub fn sample_into(&self, t: f64, out: &mut [f64]) {
        let f = self.n_frames();
        let p = self.n_points();
        debug_assert_eq!(out.len(), 3 * p);
        let pos = (t * self.frame_rate).clamp(0.0, (f - 1) as f64);
        let lo = (pos.floor() as usize).min(f - 1);
        let hi = (lo + 1).min(f - 1);
        let frac = pos - lo as f64;
        let flat = self.frames.as_slice().expect("standard layout");
        let a = &flat[lo * 3 * p..(lo + 1) * 3 * p];
        let b = &flat[hi * 3 * p..(hi + 1) * 3 * p];
        if frac == 0.0 {
            out.copy_from_slice(a);
        } else {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = x + frac * (y - x);
            }
        }
    }
}

/// Parses a frames CSV against `layout`, returning the `F x P x 3` array.
pub fn read_frames_csv<R: Read>(reader: R, layout: &PointLayout, context: &str) -> Result<Array3<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let p = layout.n_points();
    let headers = rdr.headers().map_err(|e| Error::parse(context, e))?.clone();
    if headers.len() != 3 * p {
        return Err(Error::Shape(format!(
            "{context}: header has {} columns, layout '{}' has {p} points ({} columns)",
            headers.len(),
            layout.name(),
            3 * p
        )));
    }
    for (pi, point) in layout.points().iter().enumerate() {
        for (ci, axis) in ["x", "y", "z"].iter().enumerate() {
            let col = 3 * pi + ci;
            let expected = format!("{point}.{axis}");
            if headers[col] != expected {
                return Err(Error::parse(
                    context,
                    format!("column {col} is '{}', expected '{expected}'", &headers[col]),
                ));
            }
        }
    }
    let mut data = Vec::new();
    let mut n_frames = 0;
    for (fi, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::parse(context, e))?;
        if record.len() != 3 * p {
            return Err(Error::Shape(format!(
                "{context}: row {fi} has {} values, expected {}",
                record.len(),
                3 * p
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(context, format!("row {fi}, column {col}: '{field}' is not a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    frame: fi,
                    point: layout.points()[col / 3].clone(),
                    axis: ['x', 'y', 'z'][col % 3],
                });
            }
            data.push(v);
        }
        n_frames += 1;
    }
    if n_frames == 0 {
        return Err(Error::parse(context, "no frames"));
    }
    Ok(Array3::from_shape_vec((n_frames, p, 3), data).expect("row lengths checked"))
}

/// Writes `seq` in the frames CSV format with 9 significant digits.
pub fn write_frames_csv<W: Write>(writer: W, seq: &PoseSequence) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = seq
        .layout()
        .points()
        .iter()
        .flat_map(|p| ["x", "y", "z"].map(|a| format!("{p}.{a}")))
        .collect();
    let io = |e: csv::Error| Error::parse("frames csv", e);
    wtr.write_record(&header).map_err(io)?;
    for frame in seq.frames().outer_iter() {
        wtr.write_record(frame.iter().map(|&v| sig9(v))).map_err(io)?;
    }
    wtr.flush().map_err(|e| Error::io("frames csv", e))?;
    Ok(())
}

/// Loads a layout file and a frames CSV. The frame rate comes from
/// `frame_rate` when given, otherwise from the layout's `frame_rate` field.
pub fn load_sequence(
    layout_path: impl AsRef<Path>,
    frames_path: impl AsRef<Path>,
    frame_rate: Option<f64>,
) -> Result<PoseSequence> {
    let layout = Arc::new(PointLayout::load(layout_path)?);
    load_frames(layout, frames_path, frame_rate)
}

/// Loads a frames CSV against an already-parsed layout.
pub fn load_frames(
    layout: Arc<PointLayout>,
    frames_path: impl AsRef<Path>,
    frame_rate: Option<f64>,
) -> Result<PoseSequence> {
    let frames_path = frames_path.as_ref();
    let rate = frame_rate.or(layout.frame_rate()).ok_or_else(|| {
        Error::Invalid(format!(
            "no frame rate for {}: pass one explicitly or set \"frame_rate\" in layout '{}'",
            frames_path.display(),
            layout.name()
        ))
    })?;
    let file = File::open(frames_path).map_err(|e| Error::io(frames_path, e))?;
    let frames = read_frames_csv(file, &layout, &frames_path.display().to_string())?;
    let name = frames_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    PoseSequence::new(name, layout, frames, rate)
}

/// Linear resampling to `target_rate`.
///
/// The output has `round(F * target_rate / frame_rate)` frames spread
/// uniformly over the original span, so the first and last frames are kept.
pub fn resample(seq: &PoseSequence, target_rate: f64) -> Result<PoseSequence> {
    if !(target_rate.is_finite() && target_rate > 0.0) {
        return Err(Error::Invalid(format!(
            "target rate must be positive, got {target_rate}"
        )));
    }
    let f = seq.n_frames();
    let p = seq.n_points();
    let m = ((f as f64 * target_rate / seq.frame_rate()).round() as usize).max(1);
    let duration = seq.duration();
    let mut data = vec![0.0; m * p * 3];
    for (k, row) in data.chunks_exact_mut(3 * p).enumerate() {
        let t = if m == 1 {
            0.0
        } else if k == m - 1 {
            duration
        } else {
            duration * k as f64 / (m - 1) as f64
        };
        seq.sample_into(t, row);
    }
    let frames = Array3::from_shape_vec((m, p, 3), data).expect("shape");
    PoseSequence::new(seq.name(), seq.layout_arc().clone(), frames, target_rate)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetargetFile {
    source: String,
    target: String,
    rules: BTreeMap<String, Vec<(String, f64)>>,
}

/// Maps each target point to a weighted combination of source points.
#[derive(Debug, Clone, PartialEq)]
pub struct RetargetMap {
    pub source_layout_name: String,
    pub target_layout_name: String,
    pub rules: BTreeMap<String, Vec<(String, f64)>>,
}

impl RetargetMap {
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        rules: BTreeMap<String, Vec<(String, f64)>>,
    ) -> Result<Self> {
        for (target_pt, terms) in &rules {
            if terms.is_empty() {
                return Err(Error::Invalid(format!("rule for '{target_pt}' has no terms")));
            }
            let sum: f64 = terms.iter().map(|(_, w)| w).sum();
            if terms.iter().any(|(_, w)| !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "weights for '{target_pt}' sum to {sum}, expected 1"
                )));
            }
        }
        Ok(Self {
            source_layout_name: source.into(),
            target_layout_name: target.into(),
            rules,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: RetargetFile =
            serde_json::from_str(s).map_err(|e| Error::parse("retarget map", e))?;
        Self::new(file.source, file.target, file.rules)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let file = RetargetFile {
            source: self.source_layout_name.clone(),
            target: self.target_layout_name.clone(),
            rules: self.rules.clone(),
        };
        serde_json::to_string_pretty(&file).expect("map serializes")
    }

    /// Identity map for a layout (every point copies itself).
    pub fn identity(layout: &PointLayout) -> Self {
        let rules = layout
            .points()
            .iter()
            .map(|p| (p.clone(), vec![(p.clone(), 1.0)]))
            .collect();
        Self {
            source_layout_name: layout.name().to_string(),
            target_layout_name: layout.name().to_string(),
            rules,
        }
    }

    /// Resolves the rules to `(source index, weight)` lists in target order.
    fn compile(&self, source: &PointLayout, target: &PointLayout) -> Result<Vec<Vec<(usize, f64)>>> {
        if source.name() != self.source_layout_name {
            return Err(Error::Invalid(format!(
                "map expects source layout '{}', sequence has '{}'",
                self.source_layout_name,
                source.name()
            )));
        }
        if target.name() != self.target_layout_name {
            return Err(Error::Invalid(format!(
                "map targets layout '{}', got '{}'",
                self.target_layout_name,
                target.name()
            )));
        }
        let target_points: HashSet<&str> = target.points().iter().map(String::as_str).collect();
        if let Some(extra) = self.rules.keys().find(|k| !target_points.contains(k.as_str())) {
            return Err(Error::Invalid(format!(
                "rule for '{extra}' which is not a point of layout '{}'",
                target.name()
            )));
        }
        target
            .points()
            .iter()
            .map(|tp| {
                let terms = self.rules.get(tp).ok_or_else(|| {
                    Error::Invalid(format!("no rule for target point '{tp}'"))
                })?;
                terms
                    .iter()
                    .map(|(sp, w)| {
                        source.index_of(sp).map(|i| (i, *w)).ok_or_else(|| {
                            Error::Invalid(format!(
                                "rule for '{tp}' references missing source point '{sp}'"
                            ))
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// Re-expresses `seq` in `target_layout` using `map`.
pub fn retarget(
    seq: &PoseSequence,
    map: &RetargetMap,
    target_layout: Arc<PointLayout>,
) -> Result<PoseSequence> {
    let rules = map.compile(seq.layout(), &target_layout)?;
    let f = seq.n_frames();
    let q = target_layout.n_points();
    let mut out = Array3::<f64>::zeros((f, q, 3));
    for (src, mut dst) in seq.frames().outer_iter().zip(out.outer_iter_mut()) {
        for (ti, terms) in rules.iter().enumerate() {
            for c in 0..3 {
                dst[[ti, c]] = terms.iter().map(|&(si, w)| w * src[[si, c]]).sum();
            }
        }
    }
    PoseSequence::new(seq.name(), target_layout, out, seq.frame_rate())
}

/// Left/right mirror: swap every `lr_pair`, then negate world X everywhere.
pub fn mirror_lr(seq: &PoseSequence) -> PoseSequence {
    let layout = seq.layout();
    let mut perm: Vec<usize> = (0..layout.n_points()).collect();
    for (l, r) in layout.lr_pairs() {
        let (li, ri) = (layout.index_of(l).unwrap(), layout.index_of(r).unwrap());
        perm[li] = ri;
        perm[ri] = li;
    }
    let mut out = seq.frames().clone();
    for (src, mut dst) in seq.frames().outer_iter().zip(out.outer_iter_mut()) {
        for (pi, &from) in perm.iter().enumerate() {
            dst[[pi, 0]] = -src[[from, 0]];
            dst[[pi, 1]] = src[[from, 1]];
            dst[[pi, 2]] = src[[from, 2]];
        }
    }
    PoseSequence {
        layout: seq.layout.clone(),
        frames: out,
        frame_rate: seq.frame_rate,
        name: seq.name.clone(),
    }
}
