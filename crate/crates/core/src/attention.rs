//! Alternating frame/global attention stack with merge hooks around global
//! attention.
//!
//! Layer `2k` is a frame-attention block and layer `2k + 1` a global-attention
//! block. Every block is pre-norm: `x + attn(ln(x))` followed by
//! `x + mlp(ln(x))`.

use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{count_attention_flops, quadratic_attention_flops};
use crate::gamap::{self, GaMap, GaSettings, VarianceProjection};
use crate::ingest::{self, random_normal, ImageFrame, TokenGrid, TokenizerParams};
use crate::merge::{apply_merge, apply_unmerge, MergePlan, PlanCache};
use crate::partition::{self, PartitionLabels};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;
/// Query rows per score block; bounds the score buffer to `QUERY_CHUNK × m`.
const QUERY_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Off,
    GaMerge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSettings {
    pub mode: MergeMode,
    pub cache_interval: usize,
    pub alpha: f64,
    pub beta: f64,
    pub salient_fraction: f64,
    /// Sources whose best match falls below this stay unmerged.
    pub min_sim: f64,
    pub variance_projection: VarianceProjection,
}

impl Default for MergeSettings {
    fn default() -> Self {
        Self {
            mode: MergeMode::Off,
            cache_interval: 1,
            alpha: 0.5,
            beta: 0.5,
            salient_fraction: partition::DEFAULT_SALIENT_FRACTION,
            min_sim: -1.0,
            variance_projection: VarianceProjection::Mean,
        }
    }
}

impl MergeSettings {
    pub fn ga_merge(cache_interval: usize) -> Self {
        Self {
            mode: MergeMode::GaMerge,
            cache_interval,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cache_interval == 0 {
            return Err(Error::InvalidConfig("cache_interval must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.salient_fraction) {
            return Err(Error::InvalidConfig(format!(
                "salient_fraction must lie in [0, 1), got {}",
                self.salient_fraction
            )));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || self.alpha + self.beta <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha and beta must be non-negative and not both zero, got {}, {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    fn ga_settings(&self) -> GaSettings {
        GaSettings {
            alpha: self.alpha,
            beta: self.beta,
            projection: self.variance_projection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
    pub patch_size: usize,
    pub channels: usize,
    pub num_specials: usize,
    pub merge: MergeSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 4,
            dim: 64,
            mlp_ratio: 4.0,
            seed: 0,
            patch_size: ingest::DEFAULT_PATCH_SIZE,
            channels: 3,
            num_specials: ingest::DEFAULT_NUM_SPECIALS,
            merge: MergeSettings::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn global_layers(&self) -> usize {
        self.layers / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim < 8 {
            return Err(Error::InvalidConfig(format!("dim must be at least 8, got {}", self.dim)));
        }
        if self.layers == 0 || !self.layers.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "layers must be a positive even number, got {}",
                self.layers
            )));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        self.merge.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.mean().unwrap_or(0.0);
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            row *= &self.scale;
            row += &self.shift;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub norm: LayerNorm,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub norm: LayerNorm,
    pub fc1: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub fc2: Array2<f64>,
    pub fc2_bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    pub mlp: MlpWeights,
}

impl LayerWeights {
    fn random(rng: &mut ChaCha8Rng, dim: usize, heads: usize, hidden: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let attn = AttentionWeights {
            heads,
            norm: LayerNorm::new(dim),
            query: random_normal(rng, dim, dim, std),
            key: random_normal(rng, dim, dim, std),
            value: random_normal(rng, dim, dim, std),
            output: random_normal(rng, dim, dim, std),
        };
        let mlp = MlpWeights {
            norm: LayerNorm::new(dim),
            fc1: random_normal(rng, dim, hidden, std),
            fc1_bias: Array1::zeros(hidden),
            fc2: random_normal(rng, hidden, dim, 1.0 / (hidden as f64).sqrt()),
            fc2_bias: Array1::zeros(dim),
        };
        Self { attn, mlp }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: TokenizerParams,
    pub layers: Vec<LayerWeights>,
    /// Per-token linear dense head.
    pub head: Array2<f64>,
    pub head_bias: Array1<f64>,
}

pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let tokenizer = TokenizerParams::new(
        config.patch_size,
        config.dim,
        config.channels,
        config.num_specials,
        config.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1a7e_u64.rotate_left(32));
    let hidden = ((config.dim as f64) * config.mlp_ratio).round().max(1.0) as usize;
    let layers = (0..config.layers)
        .map(|_| LayerWeights::random(&mut rng, config.dim, config.heads, hidden))
        .collect();
    let head = random_normal(&mut rng, config.dim, config.dim, 1.0 / (config.dim as f64).sqrt());
    Ok(Model {
        config: config.clone(),
        tokenizer,
        layers,
        head,
        head_bias: Array1::zeros(config.dim),
    })
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row /= sum;
    }
}

/// Projections and per-head views shared by the attention entry points.
struct Projected {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    head_dim: usize,
}

fn project(x: ArrayView2<'_, f64>, w: &AttentionWeights) -> Projected {
    let h = w.norm.apply(x);
    Projected {
        q: h.dot(&w.query),
        k: h.dot(&w.key),
        v: h.dot(&w.value),
        head_dim: w.query.ncols() / w.heads,
    }
}

/// Output-projected multi-head attention of `ln(x)`, without the residual.
pub fn attention_delta(x: ArrayView2<'_, f64>, w: &AttentionWeights) -> Array2<f64> {
    let m = x.nrows();
    let p = project(x, w);
    let hd = p.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let per_head: Vec<Array2<f64>> = (0..w.heads)
        .into_par_iter()
        .map(|head| {
            let cols = s![.., head * hd..(head + 1) * hd];
            let (qh, kh, vh) = (p.q.slice(cols), p.k.slice(cols), p.v.slice(cols));
            let mut out = Array2::zeros((m, hd));
            for start in (0..m).step_by(QUERY_CHUNK) {
                let end = (start + QUERY_CHUNK).min(m);
                let mut scores = qh.slice(s![start..end, ..]).dot(&kh.t());
                scores *= scale;
                softmax_rows(&mut scores);
                out.slice_mut(s![start..end, ..]).assign(&scores.dot(&vh));
            }
            out
        })
        .collect();
    let views: Vec<_> = per_head.iter().map(|a| a.view()).collect();
    let context = concatenate(Axis(1), &views).expect("heads share a row count");
    context.dot(&w.output)
}

/// Residual multi-head self-attention: `x + attn(ln(x))`.
pub fn multi_head_attention(x: ArrayView2<'_, f64>, w: &AttentionWeights) -> Array2<f64> {
    &x + &attention_delta(x, w)
}

/// Full softmax attention matrices, one per head. Quadratic memory; meant for
/// inspection on short sequences.
pub fn attention_probabilities(x: ArrayView2<'_, f64>, w: &AttentionWeights) -> Vec<Array2<f64>> {
    let p = project(x, w);
    let hd = p.head_dim;
    (0..w.heads)
        .map(|head| {
            let cols = s![.., head * hd..(head + 1) * hd];
            let mut scores = p.q.slice(cols).dot(&p.k.slice(cols).t()) / (hd as f64).sqrt();
            softmax_rows(&mut scores);
            scores
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh())
}

pub fn mlp_delta(x: ArrayView2<'_, f64>, w: &MlpWeights) -> Array2<f64> {
    let mut hidden = w.norm.apply(x).dot(&w.fc1) + &w.fc1_bias;
    hidden.mapv_inplace(gelu);
    hidden.dot(&w.fc2) + &w.fc2_bias
}

fn block(x: ArrayView2<'_, f64>, w: &LayerWeights) -> Array2<f64> {
    let y = multi_head_attention(x, &w.attn);
    let d = mlp_delta(y.view(), &w.mlp);
    y + d
}

/// Attention restricted to each frame's own `frame_len` rows.
pub fn frame_attention_layer(x: ArrayView2<'_, f64>, frame_len: usize, w: &LayerWeights) -> Result<Array2<f64>> {
    if frame_len == 0 || !x.nrows().is_multiple_of(frame_len) {
        return Err(Error::shape(format!("a multiple of {frame_len} rows"), x.nrows()));
    }
    let frames: Vec<Array2<f64>> = (0..x.nrows() / frame_len)
        .into_par_iter()
        .map(|f| block(x.slice(s![f * frame_len..(f + 1) * frame_len, ..]), w))
        .collect();
    let views: Vec<_> = frames.iter().map(|a| a.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("frames share a width"))
}

/// Merge state for one forward pass.
#[derive(Debug)]
pub struct MergeContext<'a> {
    pub labels: &'a PartitionLabels,
    pub cache: PlanCache,
}

/// Attention over the concatenation of all frames.
///
/// With a merge context, the plan for `layer` is fetched from the cache, the
/// sequence is merged before attention and the attention update is
/// replicated back to the full sequence before the residual is added.
/// Returns the new states and the attended sequence length.
pub fn global_attention_layer(
    x: ArrayView2<'_, f64>,
    layer: usize,
    w: &LayerWeights,
    merge: Option<&mut MergeContext<'_>>,
) -> Result<(Array2<f64>, usize)> {
    let Some(ctx) = merge else {
        return Ok((block(x, w), x.nrows()));
    };
    let plan = ctx.cache.get_or_compute(layer, x, ctx.labels)?;
    let merged = apply_merge(x, plan)?;
    let delta = attention_delta(merged.view(), &w.attn);
    let y = &x + &apply_unmerge(delta.view(), plan)?;
    let d = mlp_delta(y.view(), &w.mlp);
    Ok((y + d, merged.nrows()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub tokenize_ms: f64,
    pub gamap_ms: f64,
    pub partition_ms: f64,
    pub plan_ms: f64,
    pub attention_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.tokenize_ms + self.gamap_ms + self.partition_ms + self.plan_ms + self.attention_ms
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardMetrics {
    pub n_frames: usize,
    pub total_tokens: usize,
    pub salient_tokens: usize,
    pub dst_tokens: usize,
    pub src_tokens: usize,
    pub special_tokens: usize,
    /// Sequence length attended by the first global layer.
    pub kept_tokens: usize,
    pub keep_ratio: f64,
    pub global_attention_flops: u64,
    /// The `2·m²·d` part of `global_attention_flops`.
    pub global_quadratic_flops: u64,
    pub plan_computations: usize,
    pub plan_reuses: usize,
    /// Mean cosine similarity of source matches in the first plan.
    pub match_similarity_mean: Option<f64>,
    pub timings: StageTimings,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `frames × grid_h × grid_w × dim`.
    pub dense: Array4<f64>,
    /// `frames × specials × dim`.
    pub specials_out: Array3<f64>,
    pub labels: Option<PartitionLabels>,
    pub ga_maps: Vec<GaMap>,
    /// Plans built during the pass, in build order.
    pub plans: Vec<MergePlan>,
    pub metrics: ForwardMetrics,
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn forward(model: &Model, frames: &[ImageFrame], settings: &MergeSettings) -> Result<ForwardOutput> {
    settings.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidConfig("forward needs at least one frame".into()))?;
    let (height, width) = (first.height(), first.width());
    if let Some(f) = frames.iter().find(|f| (f.height(), f.width()) != (height, width)) {
        return Err(Error::shape(
            format!("{height}x{width} frames"),
            format!("{}x{}", f.height(), f.width()),
        ));
    }
    let cfg = &model.config;
    let mut timings = StageTimings::default();

    let start = Instant::now();
    let prepared: Vec<ImageFrame> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut f = if cfg.channels == 3 { f.to_rgb() } else { f.clone() };
            f.frame_index = i;
            f
        })
        .collect();
    let grids: Vec<TokenGrid> = prepared
        .par_iter()
        .map(|f| ingest::tokenize(f, &model.tokenizer))
        .collect::<Result<_>>()?;
    timings.tokenize_ms = ms_since(start);

    let (grid_h, grid_w) = (grids[0].grid_h, grids[0].grid_w);
    let n_specials = model.tokenizer.num_specials();
    let frame_len = n_specials + grid_h * grid_w;
    let merging = settings.mode == MergeMode::GaMerge;

    let mut ga_maps = Vec::new();
    let mut labels = None;
    if merging {
        let start = Instant::now();
        let ga = settings.ga_settings();
        ga_maps = prepared
            .par_iter()
            .zip(&grids)
            .map(|(f, g)| gamap::compute_frame_maps(f, g, &ga).map(|m| m.ga))
            .collect::<Result<_>>()?;
        timings.gamap_ms = ms_since(start);

        let start = Instant::now();
        labels = Some(partition::build_partition(&ga_maps, settings.salient_fraction, n_specials)?);
        timings.partition_ms = ms_since(start);
    }

    let blocks: Vec<Array2<f64>> = grids
        .iter()
        .map(|g| concatenate(Axis(0), &[g.specials.view(), g.tokens.view()]).expect("specials share dim"))
        .collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let mut states = concatenate(Axis(0), &views).expect("frames share dim");
    let total = states.nrows();

    let mut ctx = match &labels {
        Some(l) => Some(MergeContext {
            labels: l,
            cache: PlanCache::new(settings.cache_interval, settings.min_sim)?,
        }),
        None => None,
    };
    let mut global_flops = 0u64;
    let mut quadratic_flops = 0u64;
    let mut first_attended = None;

    let start = Instant::now();
    for (layer, w) in model.layers.iter().enumerate() {
        if layer % 2 == 0 {
            // The plan schedule runs over every layer so the interval counts
            // layers of the whole stack.
            if let Some(ctx) = ctx.as_mut() {
                ctx.cache.get_or_compute(layer, states.view(), ctx.labels)?;
            }
            states = frame_attention_layer(states.view(), frame_len, w)?;
        } else {
            let (next, attended) = global_attention_layer(states.view(), layer, w, ctx.as_mut())?;
            states = next;
            first_attended.get_or_insert(attended);
            global_flops += count_attention_flops(attended, cfg.dim, cfg.heads, 1);
            quadratic_flops += quadratic_attention_flops(attended, cfg.dim, 1);
        }
    }
    let layer_ms = ms_since(start);

    let (plans, plan_ms, plan_computations, plan_reuses) = match &ctx {
        Some(c) => (
            c.cache.plans().cloned().collect::<Vec<_>>(),
            c.cache.compute_time().as_secs_f64() * 1e3,
            c.cache.computations(),
            c.cache.reuses(),
        ),
        None => (Vec::new(), 0.0, 0, 0),
    };
    timings.plan_ms = plan_ms;
    timings.attention_ms = (layer_ms - plan_ms).max(0.0);

    let n_frames = frames.len();
    let dim = cfg.dim;
    let mut dense = Array4::zeros((n_frames, grid_h, grid_w, dim));
    let mut specials_out = Array3::zeros((n_frames, n_specials, dim));
    for f in 0..n_frames {
        let base = f * frame_len;
        specials_out
            .index_axis_mut(Axis(0), f)
            .assign(&states.slice(s![base..base + n_specials, ..]));
        let patch = states.slice(s![base + n_specials..base + frame_len, ..]);
        let out = patch.dot(&model.head) + &model.head_bias;
        let out = out
            .into_shape_with_order((grid_h, grid_w, dim))
            .expect("patch rows fill the lattice");
        dense.index_axis_mut(Axis(0), f).assign(&out);
    }

    let totals = labels.as_ref().map(|l| l.totals()).unwrap_or_default();
    let kept_tokens = first_attended.unwrap_or(total);
    let metrics = ForwardMetrics {
        n_frames,
        total_tokens: total,
        salient_tokens: totals.n_salient,
        dst_tokens: totals.n_dst,
        src_tokens: totals.n_src,
        special_tokens: n_frames * n_specials,
        kept_tokens,
        keep_ratio: kept_tokens as f64 / total as f64,
        global_attention_flops: global_flops,
        global_quadratic_flops: quadratic_flops,
        plan_computations,
        plan_reuses,
        match_similarity_mean: plans.first().and_then(|p| p.mean_similarity()),
        timings,
    };
    Ok(ForwardOutput {
        dense,
        specials_out,
        labels,
        ga_maps,
        plans,
        metrics,
    })
}

impl Model {
    /// Forward pass with the merge settings stored in the model config.
    pub fn run(&self, frames: &[ImageFrame]) -> Result<ForwardOutput> {
        forward(self, frames, &self.config.merge)
    }
}
