//! Token partition into salient, destination and source sets.
//!
//! Global sequence layout used throughout the crate: frames are concatenated
//! in order, and each frame contributes its special tokens first followed by
//! its patch tokens in row-major lattice order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gamap::GaMap;
use crate::ingest::{self, ImageFrame};
use crate::{Error, Result};

pub const DEFAULT_SALIENT_FRACTION: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Salient,
    Dst,
    Src,
    Special,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub n_salient: usize,
    pub n_dst: usize,
    pub n_src: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    /// One label per patch token, row-major.
    pub patch: Vec<Label>,
    pub counts: FrameCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionLabels {
    pub frames: Vec<FrameLabels>,
    pub num_specials: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PartitionLabels {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Specials plus patch tokens of one frame.
    pub fn frame_len(&self) -> usize {
        self.num_specials + self.tokens_per_frame()
    }

    pub fn total_tokens(&self) -> usize {
        self.frame_count() * self.frame_len()
    }

    pub fn global_index(&self, frame: usize, patch: usize) -> usize {
        frame * self.frame_len() + self.num_specials + patch
    }

    pub fn label_at(&self, global: usize) -> Label {
        let (f, j) = (global / self.frame_len(), global % self.frame_len());
        if j < self.num_specials {
            Label::Special
        } else {
            self.frames[f].patch[j - self.num_specials]
        }
    }

    /// Labels for the whole global sequence.
    pub fn global_labels(&self) -> Vec<Label> {
        let mut out = Vec::with_capacity(self.total_tokens());
        for frame in &self.frames {
            out.extend(std::iter::repeat_n(Label::Special, self.num_specials));
            out.extend_from_slice(&frame.patch);
        }
        out
    }

    pub fn totals(&self) -> FrameCounts {
        self.frames.iter().fold(FrameCounts::default(), |acc, f| FrameCounts {
            n_salient: acc.n_salient + f.counts.n_salient,
            n_dst: acc.n_dst + f.counts.n_dst,
            n_src: acc.n_src + f.counts.n_src,
        })
    }

    pub fn total_specials(&self) -> usize {
        self.frame_count() * self.num_specials
    }

    /// Tokens that survive merging: everything except sources.
    pub fn kept_count(&self) -> usize {
        self.total_tokens() - self.totals().n_src
    }

    pub fn keep_ratio(&self) -> f64 {
        self.kept_count() as f64 / self.total_tokens() as f64
    }

    /// Label raster of one frame: Salient 255, Dst 170, Src 85.
    pub fn write_frame_pgm(&self, frame: usize, path: &Path) -> Result<()> {
        let pixels = self.frames[frame]
            .patch
            .iter()
            .map(|l| match l {
                Label::Salient => 255,
                Label::Dst => 170,
                Label::Src => 85,
                Label::Special => 0,
            })
            .collect();
        ingest::write_pnm(path, &ImageFrame::new(self.grid_h, self.grid_w, 1, pixels, frame)?)
    }
}

/// Number of salient tokens for `n` tokens at `fraction`, i.e. ⌈fraction·n⌉.
pub fn salient_count(n: usize, fraction: f64) -> usize {
    // Tolerance keeps products like 0.1·100 from rounding up to 11.
    let k = (fraction * n as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "salient fraction must lie in [0, 1), got {fraction}"
        )));
    }
    Ok(())
}

/// Highest-scoring ⌈fraction·n⌉ tokens, ties to the lower index. Sorted ascending.
pub fn select_salient(ga: &GaMap, fraction: f64) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    let n = ga.len();
    let k = salient_count(n, fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ga.score(b).total_cmp(&ga.score(a)).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Destination anchors of one frame, sorted ascending.
///
/// Frame 0 keeps every non-salient token as a destination. Later frames take
/// the lowest-scoring non-salient token of each 2×2 cell; trailing odd rows and
/// columns form smaller cells.
pub fn select_dst(ga: &GaMap, salient: &[usize], frame_index: usize) -> Vec<usize> {
    let n = ga.len();
    let mut is_salient = vec![false; n];
    for &i in salient {
        is_salient[i] = true;
    }
    if frame_index == 0 {
        return (0..n).filter(|&i| !is_salient[i]).collect();
    }
    let (h, w) = (ga.grid_h(), ga.grid_w());
    let mut dst = Vec::with_capacity(n.div_ceil(4));
    for r0 in (0..h).step_by(2) {
        for c0 in (0..w).step_by(2) {
            let mut best: Option<usize> = None;
            for r in r0..(r0 + 2).min(h) {
                for c in c0..(c0 + 2).min(w) {
                    let i = r * w + c;
                    if is_salient[i] {
                        continue;
                    }
                    // Candidates are visited in increasing index order, so a
                    // strict comparison keeps the lowest index on ties.
                    if best.is_none_or(|b| ga.score(i) < ga.score(b)) {
                        best = Some(i);
                    }
                }
            }
            dst.extend(best);
        }
    }
    dst.sort_unstable();
    dst
}

pub fn build_partition(ga_maps: &[GaMap], fraction: f64, num_specials: usize) -> Result<PartitionLabels> {
    check_fraction(fraction)?;
    let first = ga_maps
        .first()
        .ok_or_else(|| Error::InvalidConfig("partition needs at least one frame".into()))?;
    let (grid_h, grid_w) = (first.grid_h(), first.grid_w());
    let mut frames = Vec::with_capacity(ga_maps.len());
    for (f, ga) in ga_maps.iter().enumerate() {
        if (ga.grid_h(), ga.grid_w()) != (grid_h, grid_w) {
            return Err(Error::shape(
                format!("{grid_h}x{grid_w} lattice"),
                format!("{}x{} in frame {f}", ga.grid_h(), ga.grid_w()),
            ));
        }
        let salient = select_salient(ga, fraction)?;
        let dst = select_dst(ga, &salient, f);
        let mut patch = vec![Label::Src; ga.len()];
        for &i in &salient {
            patch[i] = Label::Salient;
        }
        for &i in &dst {
            patch[i] = Label::Dst;
        }
        let counts = FrameCounts {
            n_salient: salient.len(),
            n_dst: dst.len(),
            n_src: ga.len() - salient.len() - dst.len(),
        };
        frames.push(FrameLabels { patch, counts });
    }
    Ok(PartitionLabels {
        frames,
        num_specials,
        grid_h,
        grid_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ga(h: usize, w: usize, values: Vec<f64>) -> GaMap {
        GaMap {
            values: Array2::from_shape_vec((h, w), values).unwrap(),
            alpha: 0.5,
            beta: 0.5,
        }
    }

    fn random_ga(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GaMap {
        ga(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn salient_fraction_zero_and_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random_ga(&mut rng, 10, 10);
        assert!(select_salient(&m, 0.0).unwrap().is_empty());
        let top = select_salient(&m, 0.1).unwrap();
        assert_eq!(top.len(), 10);
        let mut scores: Vec<f64> = m.values.iter().cloned().collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        let threshold = scores[9];
        assert!(top.iter().all(|&i| m.score(i) >= threshold));
    }

    #[test]
    fn salient_ties_take_lowest_indices() {
        let m = ga(4, 4, vec![0.5; 16]);
        assert_eq!(select_salient(&m, 0.25).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn salient_rejects_bad_fraction() {
        let m = ga(2, 2, vec![0.0; 4]);
        assert!(select_salient(&m, 1.0).is_err());
        assert!(select_salient(&m, -0.1).is_err());
    }

    #[test]
    fn salient_count_rounds_up() {
        assert_eq!(salient_count(100, 0.1), 10);
        assert_eq!(salient_count(1036, 0.1), 104);
        assert_eq!(salient_count(16, 0.99), 16);
        assert_eq!(salient_count(7, 0.0), 0);
    }

    #[test]
    fn dst_first_frame_takes_everything() {
        let m = ga(3, 3, (0..9).map(|i| i as f64).collect());
        assert_eq!(select_dst(&m, &[], 0), (0..9).collect::<Vec<_>>());
        assert_eq!(select_dst(&m, &[4], 0), vec![0, 1, 2, 3, 5, 6, 7, 8]);
    }

    #[test]
    fn dst_takes_cell_minimum() {
        let m = ga(4, 4, (0..16).map(|i| i as f64).collect());
        assert_eq!(select_dst(&m, &[], 1), vec![0, 2, 8, 10]);
        // Salient cell minimum falls through to the next lowest token.
        assert_eq!(select_dst(&m, &[0], 1), vec![1, 2, 8, 10]);
    }

    #[test]
    fn dst_fully_salient_cell_yields_nothing() {
        let m = ga(4, 4, (0..16).map(|i| i as f64).collect());
        assert_eq!(select_dst(&m, &[0, 1, 4, 5], 1), vec![2, 8, 10]);
    }

    #[test]
    fn dst_odd_lattice_edge_cells() {
        // 3x3: cells {0,1,3,4}, {2,5}, {6,7}, {8}
        let m = ga(3, 3, vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(select_dst(&m, &[], 2), vec![4, 5, 7, 8]);
    }

    #[test]
    fn dst_ties_take_lowest_index() {
        let m = ga(2, 2, vec![1.0; 4]);
        assert_eq!(select_dst(&m, &[], 1), vec![0]);
    }

    #[test]
    fn single_frame_has_no_src() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = build_partition(&[random_ga(&mut rng, 6, 6)], 0.1, 5).unwrap();
        assert_eq!(labels.totals().n_src, 0);
        assert_eq!(labels.keep_ratio(), 1.0);
    }

    #[test]
    fn global_layout_puts_specials_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps: Vec<_> = (0..3).map(|_| random_ga(&mut rng, 2, 4)).collect();
        let labels = build_partition(&maps, 0.1, 5).unwrap();
        let global = labels.global_labels();
        assert_eq!(global.len(), 3 * 13);
        for f in 0..3 {
            for j in 0..5 {
                assert_eq!(global[f * 13 + j], Label::Special);
            }
            for p in 0..8 {
                assert_eq!(global[labels.global_index(f, p)], labels.frames[f].patch[p]);
                assert_eq!(labels.label_at(labels.global_index(f, p)), labels.frames[f].patch[p]);
            }
        }
    }

    #[test]
    fn mismatched_lattices_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps = vec![random_ga(&mut rng, 2, 2), random_ga(&mut rng, 2, 3)];
        assert!(build_partition(&maps, 0.1, 5).is_err());
        assert!(build_partition(&[], 0.1, 5).is_err());
    }

    #[test]
    fn label_raster_dump() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps = vec![random_ga(&mut rng, 4, 4), random_ga(&mut rng, 4, 4)];
        let labels = build_partition(&maps, 0.25, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.pgm");
        labels.write_frame_pgm(1, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let body = &bytes[bytes.len() - 16..];
        assert_eq!(body.iter().filter(|&&b| b == 255).count(), 4);
        assert_eq!(body.iter().filter(|&&b| b == 170).count() + body.iter().filter(|&&b| b == 85).count(), 12);
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_and_exclusive(
            seed in any::<u64>(),
            frames in 1usize..5,
            h in 1usize..9,
            w in 1usize..9,
            fraction in 0.0f64..0.6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<_> = (0..frames).map(|_| random_ga(&mut rng, h, w)).collect();
            let labels = build_partition(&maps, fraction, 5).unwrap();
            for (f, fl) in labels.frames.iter().enumerate() {
                let count = |l| fl.patch.iter().filter(|&&x| x == l).count();
                prop_assert_eq!(count(Label::Salient), fl.counts.n_salient);
                prop_assert_eq!(count(Label::Dst), fl.counts.n_dst);
                prop_assert_eq!(count(Label::Src), fl.counts.n_src);
                prop_assert_eq!(fl.counts.n_salient + fl.counts.n_dst + fl.counts.n_src, h * w);
                prop_assert_eq!(count(Label::Special), 0);
                if f == 0 {
                    prop_assert_eq!(fl.counts.n_src, 0);
                }
            }
            prop_assert_eq!(
                labels.global_labels().iter().filter(|&&l| l == Label::Special).count(),
                frames * 5
            );
        }

        #[test]
        fn dst_count_is_one_per_cell_without_salient(seed in any::<u64>(), hh in 1usize..6, hw in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<_> = (0..3).map(|_| random_ga(&mut rng, 2 * hh, 2 * hw)).collect();
            let labels = build_partition(&maps, 0.0, 5).unwrap();
            for fl in &labels.frames[1..] {
                prop_assert_eq!(fl.counts.n_dst, hh * hw);
                prop_assert_eq!(fl.counts.n_src, 4 * hh * hw - hh * hw);
            }
        }

        #[test]
        fn labels_invariant_under_monotone_transform(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<_> = (0..3).map(|_| random_ga(&mut rng, h, w)).collect();
            let squashed: Vec<_> = maps
                .iter()
                .map(|m| GaMap { values: m.values.mapv(|v| v.powi(3)), ..m.clone() })
                .collect();
            let a = build_partition(&maps, 0.1, 5).unwrap();
            let b = build_partition(&squashed, 0.1, 5).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
