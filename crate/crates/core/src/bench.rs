//! Measurement harness: FLOP counting, output comparison, run configuration,
//! sweeps and report emission.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::{self, build_model, ForwardOutput, MergeMode, MergeSettings, Model, ModelConfig};
use crate::gamap::{self, GaSettings};
use crate::ingest::{self, ImageFrame, SceneSpec};
use crate::merge::MergePlan;
use crate::partition;
use crate::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Column order of CSV reports. Changing it requires bumping `REPORT_VERSION`.
pub const CSV_COLUMNS: [&str; 24] = [
    "report_version",
    "mode",
    "cache_interval",
    "n_frames",
    "total_tokens",
    "salient_tokens",
    "dst_tokens",
    "src_tokens",
    "special_tokens",
    "kept_tokens",
    "keep_ratio",
    "global_attention_flops",
    "global_quadratic_flops",
    "plan_computations",
    "plan_reuses",
    "tokenize_ms",
    "gamap_ms",
    "partition_ms",
    "plan_ms",
    "attention_ms",
    "total_ms",
    "max_abs_dev",
    "mean_abs_dev",
    "match_similarity_mean",
];

/// FLOPs of `layers` attention layers over `m` tokens: `2·m²·d` for scores and
/// the weighted sum plus `4·m·d²` for the four projections. The head count
/// does not change the total.
pub fn count_attention_flops(m: usize, d: usize, _heads: usize, layers: usize) -> u64 {
    let (m, d, l) = (m as u64, d as u64, layers as u64);
    l * (2 * m * m * d + 4 * m * d * d)
}

/// The sequence-quadratic part of [`count_attention_flops`].
pub fn quadratic_attention_flops(m: usize, d: usize, layers: usize) -> u64 {
    let (m, d, l) = (m as u64, d as u64, layers as u64);
    l * 2 * m * m * d
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameDeviation {
    pub max_abs: f64,
    pub mean_abs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub max_abs: f64,
    pub mean_abs: f64,
    pub per_frame: Vec<FrameDeviation>,
}

/// Elementwise absolute difference statistics over the dense outputs.
pub fn compare_outputs(a: &ForwardOutput, b: &ForwardOutput) -> Result<Deviation> {
    if a.dense.dim() != b.dense.dim() {
        return Err(Error::shape(format!("{:?}", a.dense.dim()), format!("{:?}", b.dense.dim())));
    }
    let diff = Zip::from(&a.dense).and(&b.dense).map_collect(|x, y| (x - y).abs());
    let stats = |view: ndarray::ArrayViewD<'_, f64>| FrameDeviation {
        max_abs: view.iter().cloned().fold(0.0, f64::max),
        mean_abs: if view.is_empty() { 0.0 } else { view.sum() / view.len() as f64 },
    };
    let all = stats(diff.view().into_dyn());
    let per_frame = diff.axis_iter(Axis(0)).map(|f| stats(f.into_dyn())).collect();
    Ok(Deviation {
        max_abs: all.max_abs,
        mean_abs: all.mean_abs,
        per_frame,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    /// Merging with a fresh plan at every layer.
    GaMerge,
    /// Merging with plans reused over the configured interval(s).
    GaMergeCached,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::GaMerge => "ga_merge",
            Mode::GaMergeCached => "ga_merge_cached",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Mode::Baseline),
            "ga_merge" => Ok(Mode::GaMerge),
            "ga_merge_cached" => Ok(Mode::GaMergeCached),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidConfig(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneSource {
    Synthetic { spec: SceneSpec, seed: u64 },
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: SceneSource,
    pub model: ModelConfig,
    pub modes: Vec<Mode>,
    /// Intervals swept by `ga_merge_cached`.
    pub cache_intervals: Vec<usize>,
    /// Frame counts to sweep; empty means the scene's own frame count.
    pub frame_counts: Vec<usize>,
    pub repetitions: usize,
    pub output: Option<PathBuf>,
    pub format: ReportFormat,
    /// Optional JSON dump of the plans built by the first merging run.
    pub plan_dump: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSource::Synthetic {
                spec: SceneSpec {
                    overlap_shift_px: 1,
                    ..SceneSpec::default()
                },
                seed: 0,
            },
            model: ModelConfig::default(),
            modes: vec![Mode::Baseline, Mode::GaMerge, Mode::GaMergeCached],
            cache_intervals: vec![6],
            frame_counts: Vec::new(),
            repetitions: 1,
            output: None,
            format: ReportFormat::Json,
            plan_dump: None,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value {s:?} for {key}")))
        })
        .collect()
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Parses flat `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut spec = SceneSpec {
            overlap_shift_px: 1,
            ..SceneSpec::default()
        };
        let mut scene_seed = 0u64;
        let mut image_dir = None;
        let mut format = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let m = &mut cfg.model;
            match key {
                "frames" => spec.n_frames = parse_value(key, value)?,
                "height" => spec.height = parse_value(key, value)?,
                "width" => spec.width = parse_value(key, value)?,
                "shift" => spec.overlap_shift_px = parse_value(key, value)?,
                "texture" => spec.texture = value.parse()?,
                "scene_seed" => scene_seed = parse_value(key, value)?,
                "image_dir" => image_dir = Some(PathBuf::from(value)),
                "layers" => m.layers = parse_value(key, value)?,
                "heads" => m.heads = parse_value(key, value)?,
                "dim" => m.dim = parse_value(key, value)?,
                "mlp_ratio" => m.mlp_ratio = parse_value(key, value)?,
                "seed" => m.seed = parse_value(key, value)?,
                "patch_size" => m.patch_size = parse_value(key, value)?,
                "specials" => m.num_specials = parse_value(key, value)?,
                "alpha" => m.merge.alpha = parse_value(key, value)?,
                "beta" => m.merge.beta = parse_value(key, value)?,
                "salient_fraction" => m.merge.salient_fraction = parse_value(key, value)?,
                "min_sim" => m.merge.min_sim = parse_value(key, value)?,
                "variance_projection" => m.merge.variance_projection = value.parse()?,
                "cache_interval" | "cache_intervals" => cfg.cache_intervals = parse_list(key, value)?,
                "modes" => cfg.modes = parse_list(key, value)?,
                "frame_counts" => cfg.frame_counts = parse_list(key, value)?,
                "repetitions" => cfg.repetitions = parse_value(key, value)?,
                "output" => cfg.output = Some(PathBuf::from(value)),
                "format" => format = Some(value.parse()?),
                "plan_dump" => cfg.plan_dump = Some(PathBuf::from(value)),
                other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
            }
        }
        cfg.scene = match image_dir {
            Some(dir) => SceneSource::Directory(dir),
            None => SceneSource::Synthetic { spec, seed: scene_seed },
        };
        cfg.format = format.unwrap_or_else(|| match &cfg.output {
            Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => ReportFormat::Csv,
            _ => ReportFormat::Json,
        });
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::InvalidConfig("at least one mode is required".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
        }
        if self.modes.contains(&Mode::GaMergeCached) && self.cache_intervals.is_empty() {
            return Err(Error::InvalidConfig("ga_merge_cached needs a cache interval".into()));
        }
        if self.cache_intervals.contains(&0) {
            return Err(Error::InvalidConfig("cache intervals must be at least 1".into()));
        }
        if self.frame_counts.contains(&0) {
            return Err(Error::InvalidConfig("frame counts must be at least 1".into()));
        }
        self.model.validate()
    }

    fn frames_for(&self, n: Option<usize>) -> Result<Vec<ImageFrame>> {
        match &self.scene {
            SceneSource::Synthetic { spec, seed } => {
                let spec = SceneSpec {
                    n_frames: n.unwrap_or(spec.n_frames),
                    ..spec.clone()
                };
                ingest::synth_scene(&spec, *seed)
            }
            SceneSource::Directory(dir) => {
                let mut frames = ingest::load_image_dir(dir, self.model.patch_size)?;
                if let Some(n) = n {
                    if frames.len() < n {
                        return Err(Error::InvalidConfig(format!(
                            "{} holds {} images, {n} requested",
                            dir.display(),
                            frames.len()
                        )));
                    }
                    frames.truncate(n);
                }
                if frames.is_empty() {
                    return Err(Error::InvalidConfig(format!("no images in {}", dir.display())));
                }
                Ok(frames)
            }
        }
    }
}

/// One report row: a (mode, interval, frame count) point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub report_version: u32,
    pub mode: Mode,
    pub cache_interval: Option<usize>,
    pub n_frames: usize,
    pub total_tokens: usize,
    pub salient_tokens: usize,
    pub dst_tokens: usize,
    pub src_tokens: usize,
    pub special_tokens: usize,
    pub kept_tokens: usize,
    pub keep_ratio: f64,
    pub global_attention_flops: u64,
    pub global_quadratic_flops: u64,
    pub plan_computations: usize,
    pub plan_reuses: usize,
    pub tokenize_ms: f64,
    pub gamap_ms: f64,
    pub partition_ms: f64,
    pub plan_ms: f64,
    pub attention_ms: f64,
    pub total_ms: f64,
    pub max_abs_dev: Option<f64>,
    pub mean_abs_dev: Option<f64>,
    pub match_similarity_mean: Option<f64>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn settings_for(base: &MergeSettings, mode: Mode, interval: usize) -> MergeSettings {
    match mode {
        Mode::Baseline => MergeSettings {
            mode: MergeMode::Off,
            ..base.clone()
        },
        Mode::GaMerge => MergeSettings {
            mode: MergeMode::GaMerge,
            cache_interval: 1,
            ..base.clone()
        },
        Mode::GaMergeCached => MergeSettings {
            mode: MergeMode::GaMerge,
            cache_interval: interval,
            ..base.clone()
        },
    }
}

/// Runs `repetitions` forward passes; returns the first output and the row
/// with median stage timings.
pub fn measure(
    model: &Model,
    frames: &[ImageFrame],
    mode: Mode,
    interval: usize,
    repetitions: usize,
    reference: Option<&ForwardOutput>,
) -> Result<(ForwardOutput, RunMetrics)> {
    let settings = settings_for(&model.config.merge, mode, interval);
    let mut outputs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions.max(1) {
        outputs.push(attention::forward(model, frames, &settings)?);
    }
    let stage = |f: fn(&attention::StageTimings) -> f64| {
        median(&mut outputs.iter().map(|o| f(&o.metrics.timings)).collect::<Vec<_>>())
    };
    let timings = [
        stage(|t| t.tokenize_ms),
        stage(|t| t.gamap_ms),
        stage(|t| t.partition_ms),
        stage(|t| t.plan_ms),
        stage(|t| t.attention_ms),
        stage(|t| t.total_ms()),
    ];
    let out = outputs.swap_remove(0);
    let deviation = reference.map(|r| compare_outputs(&out, r)).transpose()?;
    let m = &out.metrics;
    let row = RunMetrics {
        report_version: REPORT_VERSION,
        mode,
        cache_interval: (mode != Mode::Baseline).then_some(settings.cache_interval),
        n_frames: m.n_frames,
        total_tokens: m.total_tokens,
        salient_tokens: m.salient_tokens,
        dst_tokens: m.dst_tokens,
        src_tokens: m.src_tokens,
        special_tokens: m.special_tokens,
        kept_tokens: m.kept_tokens,
        keep_ratio: m.keep_ratio,
        global_attention_flops: m.global_attention_flops,
        global_quadratic_flops: m.global_quadratic_flops,
        plan_computations: m.plan_computations,
        plan_reuses: m.plan_reuses,
        tokenize_ms: timings[0],
        gamap_ms: timings[1],
        partition_ms: timings[2],
        plan_ms: timings[3],
        attention_ms: timings[4],
        total_ms: timings[5],
        max_abs_dev: deviation.as_ref().map(|d| d.max_abs),
        mean_abs_dev: deviation.as_ref().map(|d| d.mean_abs),
        match_similarity_mean: m.match_similarity_mean,
    };
    Ok((out, row))
}

/// Executes every configured (frame count, mode, interval) point and writes
/// the report when an output path is set.
pub fn run_benchmark(config: &RunConfig) -> Result<Vec<RunMetrics>> {
    config.validate()?;
    let model = build_model(&config.model)?;
    let counts: Vec<Option<usize>> = if config.frame_counts.is_empty() {
        vec![None]
    } else {
        config.frame_counts.iter().copied().map(Some).collect()
    };
    let mut modes = config.modes.clone();
    modes.sort();
    modes.dedup();

    let mut rows = Vec::new();
    let mut dumped = false;
    for n in counts {
        let frames = config.frames_for(n)?;
        // Deviations are measured against an unmerged pass on the same frames.
        let (reference, baseline_row) = measure(&model, &frames, Mode::Baseline, 1, config.repetitions, None)?;
        for &mode in &modes {
            let intervals: &[usize] = match mode {
                Mode::GaMergeCached => &config.cache_intervals,
                _ => &[1],
            };
            for &interval in intervals {
                if mode == Mode::Baseline {
                    let mut row = baseline_row.clone();
                    row.max_abs_dev = Some(0.0);
                    row.mean_abs_dev = Some(0.0);
                    rows.push(row);
                    continue;
                }
                let (out, row) = measure(&model, &frames, mode, interval, config.repetitions, Some(&reference))?;
                if let (Some(path), false) = (&config.plan_dump, dumped) {
                    write_plans_json(&out.plans, path)?;
                    dumped = true;
                }
                rows.push(row);
            }
        }
    }
    if let Some(path) = &config.output {
        emit_report(&rows, config.format, path)?;
    }
    Ok(rows)
}

pub fn emit_report(rows: &[RunMetrics], format: ReportFormat, path: &Path) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => serde_json::to_vec_pretty(rows).map_err(|e| Error::Report(e.to_string()))?,
        ReportFormat::Csv => report_csv(rows)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn report_csv(rows: &[RunMetrics]) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    writer
        .write_record(CSV_COLUMNS)
        .map_err(|e| Error::Report(e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::Report(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| Error::Report(e.to_string()))
}

/// Reads a CSV report back; the header must match [`CSV_COLUMNS`].
pub fn read_report_csv(bytes: &[u8]) -> Result<Vec<RunMetrics>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader.headers().map_err(|e| Error::Report(e.to_string()))?;
    if header.iter().ne(CSV_COLUMNS) {
        return Err(Error::Report(format!("unexpected CSV header {header:?}")));
    }
    reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Report(e.to_string()))
}

pub fn write_plans_json(plans: &[MergePlan], path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(plans).map_err(|e| Error::Report(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes gradient, variance, GA and label rasters for every image in `dir`.
/// Returns the number of frames processed.
pub fn dump_maps(dir: &Path, out_dir: &Path, config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let model = build_model(config)?;
    let frames = ingest::load_image_dir(dir, config.patch_size)?;
    if frames.is_empty() {
        return Err(Error::InvalidConfig(format!("no images in {}", dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let settings = GaSettings {
        alpha: config.merge.alpha,
        beta: config.merge.beta,
        projection: config.merge.variance_projection,
    };
    let mut ga_maps = Vec::with_capacity(frames.len());
    for frame in &frames {
        let frame = if config.channels == 3 { frame.to_rgb() } else { frame.clone() };
        let grid = ingest::tokenize(&frame, &model.tokenizer)?;
        let maps = gamap::compute_frame_maps(&frame, &grid, &settings)?;
        let i = frame.frame_index;
        let name = |kind: &str| out_dir.join(format!("frame_{i:03}_{kind}.pgm"));
        gamap::write_map_pgm(&name("grad"), &gamap::minmax_normalize(&maps.grad.values))?;
        gamap::write_map_pgm(&name("var"), &gamap::minmax_normalize(&maps.var.values))?;
        gamap::write_map_pgm(&name("ga"), &maps.ga.values)?;
        ga_maps.push(maps.ga);
    }
    let labels = partition::build_partition(&ga_maps, config.merge.salient_fraction, config.num_specials)?;
    for f in 0..labels.frame_count() {
        labels.write_frame_pgm(f, &out_dir.join(format!("frame_{f:03}_labels.pgm")))?;
    }
    Ok(frames.len())
}
