//! Merge plans: building, caching, applying and inverting them.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::partition::{Label, PartitionLabels};
use crate::{Error, Result};

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

const SRC_CHUNK: usize = 256;

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return -1.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub src: usize,
    pub dst: usize,
    pub similarity: f64,
}

/// Which tokens survive a merge and where every merged token went.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanParts", into = "PlanParts")]
pub struct MergePlan {
    total: usize,
    kept: Vec<usize>,
    /// Sorted by source index.
    assignment: Vec<Assignment>,
    group_size: Vec<usize>,
    built_at_layer: usize,
    /// Original index to position in `kept`; sources map to their destination's slot.
    slot: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PlanParts {
    total: usize,
    built_at_layer: usize,
    kept: Vec<usize>,
    group_size: Vec<usize>,
    assignment: Vec<Assignment>,
}

impl From<MergePlan> for PlanParts {
    fn from(p: MergePlan) -> Self {
        PlanParts {
            total: p.total,
            built_at_layer: p.built_at_layer,
            kept: p.kept,
            group_size: p.group_size,
            assignment: p.assignment,
        }
    }
}

impl TryFrom<PlanParts> for MergePlan {
    type Error = Error;

    fn try_from(parts: PlanParts) -> Result<Self> {
        let plan = MergePlan::from_assignment(parts.total, parts.assignment, parts.built_at_layer)?;
        if plan.kept != parts.kept || plan.group_size != parts.group_size {
            return Err(Error::InvalidConfig(
                "plan kept list or group sizes disagree with its assignment".into(),
            ));
        }
        Ok(plan)
    }
}

impl MergePlan {
    /// The plan that keeps every token.
    pub fn identity(total: usize, built_at_layer: usize) -> Self {
        Self {
            total,
            kept: (0..total).collect(),
            assignment: Vec::new(),
            group_size: vec![1; total],
            built_at_layer,
            slot: (0..total).collect(),
        }
    }

    /// Builds a plan from source-to-destination pairs. Every index that is not a
    /// source is kept, in original order.
    pub fn from_assignment(total: usize, mut assignment: Vec<Assignment>, built_at_layer: usize) -> Result<Self> {
        assignment.sort_by_key(|a| a.src);
        let mut is_src = vec![false; total];
        for a in &assignment {
            for idx in [a.src, a.dst] {
                if idx >= total {
                    return Err(Error::IndexOutOfRange { index: idx, len: total });
                }
            }
            if std::mem::replace(&mut is_src[a.src], true) {
                return Err(Error::InvalidConfig(format!("source {} assigned twice", a.src)));
            }
        }
        if let Some(a) = assignment.iter().find(|a| is_src[a.dst]) {
            return Err(Error::InvalidConfig(format!(
                "destination {} is itself a source",
                a.dst
            )));
        }
        let mut slot = vec![usize::MAX; total];
        let mut kept = Vec::with_capacity(total - assignment.len());
        for i in (0..total).filter(|&i| !is_src[i]) {
            slot[i] = kept.len();
            kept.push(i);
        }
        let mut group_size = vec![1; kept.len()];
        for a in &assignment {
            slot[a.src] = slot[a.dst];
            group_size[slot[a.dst]] += 1;
        }
        Ok(Self {
            total,
            kept,
            assignment,
            group_size,
            built_at_layer,
            slot,
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn assignment(&self) -> &[Assignment] {
        &self.assignment
    }

    pub fn group_size(&self) -> &[usize] {
        &self.group_size
    }

    pub fn built_at_layer(&self) -> usize {
        self.built_at_layer
    }

    /// Position in the merged sequence that represents original index `i`.
    pub fn slot_of(&self, i: usize) -> usize {
        self.slot[i]
    }

    pub fn is_identity(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn keep_ratio(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        self.kept.len() as f64 / self.total as f64
    }

    pub fn mean_similarity(&self) -> Option<f64> {
        if self.assignment.is_empty() {
            return None;
        }
        Some(self.assignment.iter().map(|a| a.similarity).sum::<f64>() / self.assignment.len() as f64)
    }

    pub fn min_similarity(&self) -> Option<f64> {
        self.assignment.iter().map(|a| a.similarity).reduce(f64::min)
    }

    /// Same assignment, different build layer. Used to compare plans by content.
    pub fn same_matching(&self, other: &MergePlan) -> bool {
        self.total == other.total && self.kept == other.kept && self.assignment == other.assignment
    }
}

fn unit_rows(features: ArrayView2<'_, f64>, rows: &[usize]) -> (Array2<f64>, Vec<bool>) {
    let mut out = Array2::zeros((rows.len(), features.ncols()));
    let mut degenerate = vec![false; rows.len()];
    for (k, &r) in rows.iter().enumerate() {
        let row = features.row(r);
        let norm = row.dot(&row).sqrt();
        if norm < ZERO_NORM {
            degenerate[k] = true;
        } else {
            out.row_mut(k).assign(&(&row / norm));
        }
    }
    (out, degenerate)
}

/// Assigns every source token to its most cosine-similar destination across
/// all frames, ties to the lowest destination index. A source whose best
/// similarity is below `min_sim` stays unmerged.
pub fn compute_merge_plan(
    features: ArrayView2<'_, f64>,
    labels: &PartitionLabels,
    layer: usize,
    min_sim: f64,
) -> Result<MergePlan> {
    let total = labels.total_tokens();
    if features.nrows() != total {
        return Err(Error::shape(format!("{total} feature rows"), features.nrows()));
    }
    let global = labels.global_labels();
    let srcs: Vec<usize> = (0..total).filter(|&i| global[i] == Label::Src).collect();
    let dsts: Vec<usize> = (0..total).filter(|&i| global[i] == Label::Dst).collect();
    if srcs.is_empty() {
        return Ok(MergePlan::identity(total, layer));
    }
    if dsts.is_empty() {
        return Err(Error::NoDstTokens);
    }

    let (dst_unit, dst_zero) = unit_rows(features, &dsts);
    let dst_unit_t = dst_unit.t();
    let matches: Vec<Option<Assignment>> = srcs
        .par_chunks(SRC_CHUNK)
        .flat_map_iter(|chunk| {
            let (src_unit, src_zero) = unit_rows(features, chunk);
            let sims = src_unit.dot(&dst_unit_t);
            chunk
                .iter()
                .enumerate()
                .map(|(k, &src)| {
                    let mut best = (0usize, f64::NEG_INFINITY);
                    for (j, &s) in sims.row(k).iter().enumerate() {
                        let s = if src_zero[k] || dst_zero[j] { -1.0 } else { s.clamp(-1.0, 1.0) };
                        if s > best.1 {
                            best = (j, s);
                        }
                    }
                    (best.1 >= min_sim).then(|| Assignment {
                        src,
                        dst: dsts[best.0],
                        similarity: best.1,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();
    MergePlan::from_assignment(total, matches.into_iter().flatten().collect(), layer)
}

/// Group-averages every destination with its sources. Tokens kept without
/// sources pass through unchanged.
pub fn apply_merge(tokens: ArrayView2<'_, f64>, plan: &MergePlan) -> Result<Array2<f64>> {
    if tokens.nrows() != plan.total {
        return Err(Error::shape(format!("{} tokens", plan.total), tokens.nrows()));
    }
    let mut merged = tokens.select(Axis(0), &plan.kept);
    for a in &plan.assignment {
        let mut row = merged.row_mut(plan.slot[a.dst]);
        row += &tokens.row(a.src);
    }
    for (slot, &size) in plan.group_size.iter().enumerate() {
        if size > 1 {
            merged.row_mut(slot).mapv_inplace(|v| v / size as f64);
        }
    }
    Ok(merged)
}

/// Replicates each merged row back to every member of its group.
pub fn apply_unmerge(merged: ArrayView2<'_, f64>, plan: &MergePlan) -> Result<Array2<f64>> {
    if merged.nrows() != plan.kept.len() {
        return Err(Error::shape(format!("{} merged rows", plan.kept.len()), merged.nrows()));
    }
    Ok(merged.select(Axis(0), &plan.slot))
}

/// Per-forward-pass store of merge plans keyed by layer group.
#[derive(Debug)]
pub struct PlanCache {
    interval: usize,
    min_sim: f64,
    plans: BTreeMap<usize, MergePlan>,
    computations: usize,
    reuses: usize,
    compute_time: Duration,
}

impl PlanCache {
    pub fn new(interval: usize, min_sim: f64) -> Result<Self> {
        if interval == 0 {
            return Err(Error::InvalidConfig("cache interval must be at least 1".into()));
        }
        Ok(Self {
            interval,
            min_sim,
            plans: BTreeMap::new(),
            computations: 0,
            reuses: 0,
            compute_time: Duration::ZERO,
        })
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    /// Plans built so far.
    pub fn computations(&self) -> usize {
        self.computations
    }

    /// Lookups served from an earlier plan.
    pub fn reuses(&self) -> usize {
        self.reuses
    }

    pub fn compute_time(&self) -> Duration {
        self.compute_time
    }

    pub fn plans(&self) -> impl Iterator<Item = &MergePlan> {
        self.plans.values()
    }

    pub fn clear(&mut self) {
        self.plans.clear();
        self.computations = 0;
        self.reuses = 0;
        self.compute_time = Duration::ZERO;
    }

    /// Builds a fresh plan at layers that are multiples of the interval and
    /// otherwise returns the plan of group `layer / interval`.
    pub fn get_or_compute(
        &mut self,
        layer: usize,
        features: ArrayView2<'_, f64>,
        labels: &PartitionLabels,
    ) -> Result<&MergePlan> {
        let group = layer / self.interval;
        let fresh = layer.is_multiple_of(self.interval) || !self.plans.contains_key(&group);
        if fresh {
            let start = Instant::now();
            let plan = compute_merge_plan(features, labels, layer, self.min_sim)?;
            self.compute_time += start.elapsed();
            self.computations += 1;
            self.plans.insert(group, plan);
        } else {
            self.reuses += 1;
        }
        Ok(&self.plans[&group])
    }
}
