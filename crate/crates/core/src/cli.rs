//! The `posealign` command line.
//!
//! Settings come from built-in defaults, then an optional JSON run config
//! (`--config`), then flags. Errors print one `E_CODE: message` line.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::alignment::{
    align_pair, embed_sequence, ltw_transfer, transfer_keyposes, AlignOptions, KeyposeLabels, LtwPrior, Metric,
};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{all_pairs_cost, keypose_accuracy, tau_report, write_cost_csv};
use crate::fmt::sig9;
use crate::normalize::WindowSpec;
use crate::pose_io::{load_frames, resample, retarget, write_frames_csv, PointLayout, PoseSequence, RetargetMap};
use crate::scalar::Scalar;
use crate::training::{
    harvest_pairs, train_phase1, train_phase2, EpochLoss, HarvestedMatch, LossConfig, LossKind, PairMode, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "posealign", version, about = "Contrastive pose-window encoder and DTW alignment")]
pub struct Cli {
    /// Worker threads for parallel sweeps.
    #[arg(long, global = true, env = "POSEALIGN_THREADS")]
    pub threads: Option<usize>,
    /// Scalar type used for the encoder arithmetic.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder on the sequences of a manifest.
    Train(TrainArgs),
    /// Write the window embeddings of one sequence.
    Embed(EmbedArgs),
    /// Align two sequences, or a reference against a whole manifest.
    Align(AlignArgs),
    /// Dump DTW-harvested cross-performance matches.
    Harvest(HarvestArgs),
    /// Transfer keypose labels from a reference to a target sequence.
    Transfer(TransferArgs),
    /// Kendall's tau over all same-action pairs of a manifest.
    Tau(TauArgs),
    /// Re-express a sequence in another point layout.
    Retarget(RetargetArgs),
    /// Resample a sequence to a new frame rate.
    Resample(ResampleArgs),
}

/// Window and run-config flags shared by the model-using subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seconds between window centers.
    #[arg(long)]
    pub stride: Option<f64>,
    /// Window length in seconds.
    #[arg(long)]
    pub window_seconds: Option<f64>,
    /// Window sample rate in Hz.
    #[arg(long)]
    pub window_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AlignFlags {
    /// Also try the left/right mirrored second sequence.
    #[arg(long)]
    pub flip_lr: bool,
    /// LTW prior strength: a number, `auto` (half the mean cost) or `off`.
    #[arg(long)]
    pub ltw_gamma: Option<LtwPrior>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    CosineContrastive,
    HadsellMargin,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Manifest listing training sequences.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Phase::Both)]
    pub phase: Phase,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Starting model for `--phase 2`.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs_phase1: Option<usize>,
    #[arg(long)]
    pub epochs_phase2: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub max_harvest_pairs: Option<usize>,
    /// Build phase-1 pairs from two augmented copies.
    #[arg(long)]
    pub both_augmented: bool,
}

#[derive(Debug, Args)]
pub struct SeqArgs {
    #[arg(long)]
    pub layout: PathBuf,
    /// Frame rate of the frames CSV, if the layout does not give one.
    #[arg(long)]
    pub frame_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub seq: SeqArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: AlignFlags,
    #[arg(long)]
    pub model: PathBuf,
    /// Layout of both sequences (or of the first with `--layout-b`).
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long)]
    pub layout_b: Option<PathBuf>,
    #[arg(long)]
    pub frame_rate: Option<f64>,
    /// Frames CSV of the first (row) sequence.
    #[arg(long)]
    pub a: Option<PathBuf>,
    /// Frames CSV of the second (column) sequence.
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// Path CSV output (pair mode).
    #[arg(long)]
    pub out_path: Option<PathBuf>,
    /// Summary JSON output (pair mode; stdout when absent).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Sweep mode: align `--reference` against every manifest entry.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub reference: Option<String>,
    /// Cost CSV output (sweep mode; stdout when absent).
    #[arg(long, requires = "manifest")]
    pub out_costs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HarvestArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_pairs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransferMethod {
    Dtw,
    Ltw,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub flags: AlignFlags,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(long)]
    pub layout_target: Option<PathBuf>,
    #[arg(long)]
    pub frame_rate: Option<f64>,
    /// Frames CSV of the labeled reference.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Reference keypose CSV (label,time_seconds).
    #[arg(long)]
    pub keyposes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TransferMethod::Dtw)]
    pub method: TransferMethod,
    /// Ground-truth target keyposes for an accuracy curve.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Comma-separated thresholds in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0])]
    pub thresholds: Vec<f64>,
    /// Accuracy CSV output (threshold,fraction), requires `--truth`.
    #[arg(long, requires = "truth")]
    pub accuracy_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TauArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Per-pair CSV output.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary output (stdout when absent).
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub source_layout: PathBuf,
    #[arg(long)]
    pub target_layout: PathBuf,
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ResampleArgs {
    #[command(flatten)]
    pub seq: SeqArgs,
    #[arg(long)]
    pub frames: PathBuf,
    /// Target frame rate in Hz.
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Encoder layer sizes accepted in the run config; frames and points come
/// from the data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    pub c1: Option<usize>,
    pub k1_t: Option<usize>,
    pub s1_t: Option<usize>,
    pub c2: Option<usize>,
    pub k2_t: Option<usize>,
    pub s2_t: Option<usize>,
    pub embed_dim: Option<usize>,
}

impl EncoderSettings {
    pub fn build(&self, n_frames: usize, n_points: usize, seed: u64) -> Result<EncoderConfig> {
        let d = EncoderConfig::for_window(n_frames, n_points);
        let config = EncoderConfig {
            c1: self.c1.unwrap_or(d.c1),
            k1_t: self.k1_t.unwrap_or(d.k1_t),
            s1_t: self.s1_t.unwrap_or(d.s1_t),
            c2: self.c2.unwrap_or(d.c2),
            k2_t: self.k2_t.unwrap_or(d.k2_t),
            s2_t: self.s2_t.unwrap_or(d.s2_t),
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            seed,
            ..d
        };
        config.validate()?;
        Ok(config)
    }
}

/// Everything a run can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub window: WindowSpec,
    pub encoder: EncoderSettings,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub align: AlignOptions,
    /// Overrides `train.seed` and seeds the encoder initialization.
    pub seed: Option<u64>,
    /// Relative to the config file.
    pub manifest: Option<PathBuf>,
    /// Output directory, relative to the config file.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::parse("run config", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.manifest = config.manifest.map(|p| base.join(p));
        config.out = config.out.map(|p| base.join(p));
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        Ok(())
    }

    fn resolve(common: &CommonArgs) -> Result<Self> {
        let mut config = match &common.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Some(s) = common.stride {
            config.window.stride_seconds = s;
        }
        if let Some(s) = common.window_seconds {
            config.window.length_seconds = s;
        }
        if let Some(r) = common.window_rate {
            config.window.sample_rate = r;
        }
        if let Some(seed) = config.seed {
            config.train.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply_align(&mut self, flags: &AlignFlags) {
        if flags.flip_lr {
            self.align.flip_lr = true;
        }
        if let Some(g) = flags.ltw_gamma {
            self.align.ltw = g;
        }
        if let Some(m) = flags.metric {
            self.align.metric = m.into();
        }
    }
}

/// One sequence of a manifest; paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: Option<String>,
    pub layout: PathBuf,
    pub frames: PathBuf,
    pub frame_rate: Option<f64>,
    pub keyposes: Option<PathBuf>,
    pub action: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedEntry {
    pub sequence: PoseSequence,
    pub keyposes: Option<KeyposeLabels>,
    pub action: String,
}

/// Loads every sequence listed in a manifest, sharing parsed layouts.
pub fn load_manifest(path: &Path) -> Result<Vec<LoadedEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    if entries.is_empty() {
        return Err(Error::InsufficientData(format!("manifest {} lists no sequences", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut layouts: HashMap<PathBuf, Arc<PointLayout>> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let layout_path = base.join(&e.layout);
        let layout = match layouts.get(&layout_path) {
            Some(l) => l.clone(),
            None => {
                let l = Arc::new(PointLayout::load(&layout_path)?);
                layouts.insert(layout_path, l.clone());
                l
            }
        };
        let mut sequence = load_frames(layout, base.join(&e.frames), e.frame_rate)?;
        if let Some(name) = e.name {
            sequence = sequence.with_name(name);
        }
        let keyposes = e.keyposes.map(|k| KeyposeLabels::load(base.join(k))).transpose()?;
        out.push(LoadedEntry {
            sequence,
            keyposes,
            action: e.action.unwrap_or_else(|| "default".into()),
        });
    }
    let mut names: Vec<&str> = out.iter().map(|e| e.sequence.name()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Invalid(format!("manifest names '{}' twice", w[0])));
    }
    Ok(out)
}

fn load_seq(layout: &Path, frames: &Path, rate: Option<f64>) -> Result<PoseSequence> {
    load_frames(Arc::new(PointLayout::load(layout)?), frames, rate)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize") + "\n";
    match path {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    let mut text = String::from("epoch,mean_loss\n");
    for e in history {
        text.push_str(&format!("{},{}\n", e.epoch, sig9(e.mean_loss)));
    }
    write_text(path, &text)
}

fn write_harvest_csv(path: &Path, matches: &[HarvestedMatch]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| Error::parse("harvest csv", e);
    wtr.write_record(["seq_a", "t_a", "seq_b", "t_b", "cost"]).map_err(err)?;
    for m in matches {
        wtr.write_record([m.seq_a.clone(), sig9(m.time_a), m.seq_b.clone(), sig9(m.time_b), sig9(m.cost)])
            .map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn train_cmd<T: Scalar>(args: &TrainArgs) -> Result<()> {
    let mut config = RunConfig::resolve(&args.common)?;
    let t = &mut config.train;
    if let Some(seed) = args.seed {
        t.seed = seed;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.momentum {
        t.momentum = v;
    }
    if let Some(v) = args.epochs_phase1 {
        t.epochs_phase1 = v;
    }
    if let Some(v) = args.epochs_phase2 {
        t.epochs_phase2 = v;
    }
    if let Some(v) = args.max_harvest_pairs {
        t.max_harvest_pairs = Some(v);
    }
    if args.both_augmented {
        t.pair_mode = PairMode::BothAugmented;
    }
    if let Some(l) = args.loss {
        config.loss.kind = match l {
            LossArg::CosineContrastive => LossKind::CosineContrastive,
            LossArg::HadsellMargin => LossKind::HadsellMargin,
        };
    }
    if let Some(m) = args.margin {
        config.loss.margin = m;
    }
    config.validate()?;

    let manifest = args
        .manifest
        .clone()
        .or(config.manifest.clone())
        .ok_or_else(|| Error::Invalid("train needs --manifest or a config \"manifest\"".into()))?;
    let out = args
        .out
        .clone()
        .or(config.out.clone())
        .ok_or_else(|| Error::Invalid("train needs --out or a config \"out\"".into()))?;
    let sequences: Vec<PoseSequence> = load_manifest(&manifest)?.into_iter().map(|e| e.sequence).collect();
    let spec = config.window;
    let (train, loss) = (config.train, config.loss);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let start: EncoderParams<T> = match args.phase {
        Phase::One | Phase::Both => {
            let enc = config.encoder.build(spec.n_frames(), sequences[0].n_points(), train.seed)?;
            let p1 = train_phase1::<T>(&sequences, &spec, enc, &train, &loss)?;
            write_loss_csv(&out.join("loss_phase1.csv"), &p1.history)?;
            if args.phase == Phase::One {
                return p1.params.save(out.join("model.json"));
            }
            p1.params.save(out.join("model_phase1.json"))?;
            p1.params
        }
        Phase::Two => {
            let path = args
                .init_model
                .as_ref()
                .ok_or_else(|| Error::Invalid("--phase 2 needs --init-model".into()))?;
            EncoderParams::load(path)?
        }
    };
    let harvest = harvest_pairs(&start, &sequences, &spec, train.max_harvest_pairs)?;
    write_harvest_csv(&out.join("harvest.csv"), &harvest.matches)?;
    let p2 = train_phase2(&start, &sequences, &spec, &harvest.pairs, &train, &loss)?;
    write_loss_csv(&out.join("loss_phase2.csv"), &p2.history)?;
    p2.params.save(out.join("model.json"))
}

fn embed_cmd<T: Scalar>(args: &EmbedArgs) -> Result<()> {
    let config = RunConfig::resolve(&args.common)?;
    let model = EncoderParams::<T>::load(&args.model)?;
    let seq = load_seq(&args.seq.layout, &args.frames, args.seq.frame_rate)?;
    let emb = embed_sequence(&model, &seq, &config.window)?;
    let mut wtr = csv::Writer::from_writer(create(&args.out)?);
    let err = |e: csv::Error| Error::parse("embedding csv", e);
    let mut header = vec!["time".to_string()];
    header.extend((0..model.embed_dim()).map(|k| format!("e{k}")));
    wtr.write_record(&header).map_err(err)?;
    for (t, v) in emb.times.iter().zip(&emb.vectors) {
        let mut row = vec![sig9(*t)];
        row.extend(v.iter().map(|x| sig9(x.as_f64())));
        wtr.write_record(&row).map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::io(&args.out, e))
}

fn align_cmd<T: Scalar>(args: &AlignArgs) -> Result<()> {
    let mut config = RunConfig::resolve(&args.common)?;
    config.apply_align(&args.flags);
    let model = EncoderParams::<T>::load(&args.model)?;
    if let Some(manifest) = &args.manifest {
        let sequences: Vec<PoseSequence> = load_manifest(manifest)?.into_iter().map(|e| e.sequence).collect();
        let reference = match &args.reference {
            Some(name) => sequences
                .iter()
                .position(|s| s.name() == name)
                .ok_or_else(|| Error::Invalid(format!("no sequence named '{name}' in manifest")))?,
            None => 0,
        };
        let rows = all_pairs_cost(&model, &sequences, reference, &config.window, &config.align)?;
        return match &args.out_costs {
            Some(p) => write_cost_csv(&rows, create(p)?),
            None => write_cost_csv(&rows, std::io::stdout().lock()),
        };
    }
    let (a, b) = match (&args.a, &args.b) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Invalid("align needs --a and --b, or --manifest".into())),
    };
    let layout = args
        .layout
        .as_ref()
        .ok_or_else(|| Error::Invalid("align needs --layout".into()))?;
    let seq_a = load_seq(layout, a, args.frame_rate)?;
    let seq_b = load_seq(args.layout_b.as_ref().unwrap_or(layout), b, args.frame_rate)?;
    let result = align_pair(&model, &seq_a, &seq_b, &config.window, &config.align)?;
    if let Some(p) = &args.out_path {
        result.write_path_csv(create(p)?)?;
    }
    write_json(args.summary.as_deref(), &result.summary_json())
}

fn harvest_cmd<T: Scalar>(args: &HarvestArgs) -> Result<()> {
    let config = RunConfig::resolve(&args.common)?;
    let model = EncoderParams::<T>::load(&args.model)?;
    let sequences: Vec<PoseSequence> = load_manifest(&args.manifest)?.into_iter().map(|e| e.sequence).collect();
    let cap = args.max_pairs.or(config.train.max_harvest_pairs);
    let harvest = harvest_pairs(&model, &sequences, &config.window, cap)?;
    write_harvest_csv(&args.out, &harvest.matches)
}

fn transfer_cmd<T: Scalar>(args: &TransferArgs) -> Result<()> {
    let mut config = RunConfig::resolve(&args.common)?;
    config.apply_align(&args.flags);
    let reference = load_seq(&args.layout, &args.reference, args.frame_rate)?;
    let target = load_seq(args.layout_target.as_ref().unwrap_or(&args.layout), &args.target, args.frame_rate)?;
    let labels = KeyposeLabels::load(&args.keyposes)?;
    let moved = match args.method {
        TransferMethod::Dtw => {
            let model = EncoderParams::<T>::load(&args.model)?;
            let result = align_pair(&model, &reference, &target, &config.window, &config.align)?;
            transfer_keyposes(&result.path, &labels, &result.row_times, &result.col_times)?
        }
        TransferMethod::Ltw => ltw_transfer(&labels, (0.0, reference.duration()), (0.0, target.duration()))?,
    };
    moved.write_csv(create(&args.out)?)?;
    if let Some(truth) = &args.truth {
        let curve = keypose_accuracy(&moved, &KeyposeLabels::load(truth)?, &args.thresholds)?;
        match &args.accuracy_out {
            Some(p) => curve.write_csv(create(p)?)?,
            None => curve.write_csv(std::io::stdout().lock())?,
        }
    }
    Ok(())
}

fn tau_cmd<T: Scalar>(args: &TauArgs) -> Result<()> {
    let config = RunConfig::resolve(&args.common)?;
    let model = EncoderParams::<T>::load(&args.model)?;
    let entries: Vec<(PoseSequence, String)> = load_manifest(&args.manifest)?
        .into_iter()
        .map(|e| (e.sequence, e.action))
        .collect();
    let metric = args.metric.map(Metric::from).unwrap_or(config.align.metric);
    let report = tau_report(&model, &entries, &config.window, metric)?;
    report.write_csv(create(&args.out)?)?;
    write_json(args.summary.as_deref(), &report.summary_json())
}

fn retarget_cmd(args: &RetargetArgs) -> Result<()> {
    let map = RetargetMap::load(&args.map)?;
    let source = Arc::new(PointLayout::load(&args.source_layout)?);
    let target = Arc::new(PointLayout::load(&args.target_layout)?);
    // the frame rate does not affect retargeting
    let rate = source.frame_rate().unwrap_or(1.0);
    let seq = load_frames(source, &args.frames, Some(rate))?;
    write_frames_csv(create(&args.out)?, &retarget(&seq, &map, target)?)
}

fn resample_cmd(args: &ResampleArgs) -> Result<()> {
    let seq = load_seq(&args.seq.layout, &args.frames, args.seq.frame_rate)?;
    write_frames_csv(create(&args.out)?, &resample(&seq, args.rate)?)
}

fn dispatch<T: Scalar>(command: &Command) -> Result<()> {
    match command {
        Command::Train(a) => train_cmd::<T>(a),
        Command::Embed(a) => embed_cmd::<T>(a),
        Command::Align(a) => align_cmd::<T>(a),
        Command::Harvest(a) => harvest_cmd::<T>(a),
        Command::Transfer(a) => transfer_cmd::<T>(a),
        Command::Tau(a) => tau_cmd::<T>(a),
        Command::Retarget(a) => retarget_cmd(a),
        Command::Resample(a) => resample_cmd(a),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Invalid("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    match cli.precision {
        Precision::F32 => dispatch::<f32>(&cli.command),
        Precision::F64 => dispatch::<f64>(&cli.command),
    }
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("{}: {message}", e.code());
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(RunConfig::from_json_str(r#"{"window": {"stride_seconds": 1.0}}"#).is_ok());
        let err = RunConfig::from_json_str(r#"{"trian": {}}"#).unwrap_err();
        assert_eq!(err.code(), "E_PARSE");
        let err = RunConfig::from_json_str(r#"{"train": {"batch_size": 1}}"#).unwrap_err();
        assert_eq!(err.code(), "E_INVALID");
        let config = RunConfig::from_json_str(r#"{"align": {"flip_lr": true, "ltw": "auto"}, "encoder": {"c1": 4}}"#).unwrap();
        assert!(config.align.flip_lr);
        assert_eq!(config.encoder.build(75, 15, 0).unwrap().c1, 4);
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"window": {"stride_seconds": 1.0}, "seed": 4, "manifest": "m.json"}"#).unwrap();
        let common = CommonArgs {
            config: Some(path.clone()),
            stride: Some(0.25),
            ..CommonArgs::default()
        };
        let config = RunConfig::resolve(&common).unwrap();
        assert_eq!(config.window.stride_seconds, 0.25);
        assert_eq!(config.train.seed, 4);
        assert_eq!(config.manifest, Some(dir.path().join("m.json")));
    }

    #[test]
    fn usage_errors_get_a_code() {
        assert_eq!(main_with_args(["posealign", "frobnicate"]), 2);
        assert_eq!(main_with_args(["posealign", "resample", "--layout", "/nonexistent/l.json", "--frames", "x.csv", "--rate", "25", "--out", "o.csv"]), 1);
    }
}
