//! Independent reference implementations used by the integration suites.
#![allow(dead_code, clippy::needless_range_loop)]

use gamerge::attention::AttentionWeights;
use gamerge::gamap::GaMap;
use gamerge::merge::cosine_similarity;
use ndarray::Array2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Salient,
    Dst,
    Src,
}

/// Straightforward re-derivation of the partition rules for one frame.
pub fn partition_oracle(ga: &GaMap, fraction: f64, frame: usize) -> Vec<Role> {
    let (h, w) = ga.values.dim();
    let n = h * w;
    let score = |i: usize| ga.values[[i / w, i % w]];
    // ⌈fraction·n⌉ by counting: smallest k with k ≥ fraction·n (tolerant of round-off).
    let mut k = 0;
    while (k as f64) < fraction * n as f64 - 1e-9 {
        k += 1;
    }
    // Selection sort: repeatedly take the highest remaining score, lowest index first.
    let mut salient = vec![false; n];
    for _ in 0..k {
        let mut best = None;
        for i in 0..n {
            if salient[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if score(i) > score(b) => best = Some(i),
                _ => {}
            }
        }
        salient[best.unwrap()] = true;
    }

    let mut roles: Vec<Role> = (0..n)
        .map(|i| if salient[i] { Role::Salient } else { Role::Src })
        .collect();
    if frame == 0 {
        for r in roles.iter_mut().filter(|r| **r == Role::Src) {
            *r = Role::Dst;
        }
        return roles;
    }
    for cr in 0..h.div_ceil(2) {
        for cc in 0..w.div_ceil(2) {
            let mut members = Vec::new();
            for r in 2 * cr..(2 * cr + 2).min(h) {
                for c in 2 * cc..(2 * cc + 2).min(w) {
                    members.push(r * w + c);
                }
            }
            members.retain(|&i| !salient[i]);
            members.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
            if let Some(&d) = members.first() {
                roles[d] = Role::Dst;
            }
        }
    }
    roles
}

/// Number of 2×2 cells of a non-first frame whose tokens are all salient.
pub fn all_salient_cells(roles: &[Role], h: usize, w: usize) -> usize {
    let mut count = 0;
    for r0 in (0..h).step_by(2) {
        for c0 in (0..w).step_by(2) {
            let all = (r0..(r0 + 2).min(h))
                .flat_map(|r| (c0..(c0 + 2).min(w)).map(move |c| r * w + c))
                .all(|i| roles[i] == Role::Salient);
            count += usize::from(all);
        }
    }
    count
}

/// Exhaustive O(n_src · n_dst) argmax matching over global labels.
pub fn brute_force_matching(
    features: &Array2<f64>,
    is_src: &[bool],
    is_dst: &[bool],
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in 0..features.nrows() {
        if !is_src[s] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for d in 0..features.nrows() {
            if !is_dst[d] {
                continue;
            }
            let sim = cosine_similarity(features.row(s), features.row(d));
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((d, sim));
            }
        }
        out.push((s, best.expect("at least one dst").0));
    }
    out
}

/// Loop reference of `x + W_o · softmax(Q Kᵀ / √d_h) V` with pre-layer-norm.
pub fn naive_attention(x: &Array2<f64>, w: &AttentionWeights) -> Array2<f64> {
    let (m, d) = x.dim();
    let hd = d / w.heads;
    let mut ln = Array2::<f64>::zeros((m, d));
    for i in 0..m {
        let mean: f64 = (0..d).map(|j| x[[i, j]]).sum::<f64>() / d as f64;
        let var: f64 = (0..d).map(|j| (x[[i, j]] - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            ln[[i, j]] = (x[[i, j]] - mean) / (var + 1e-6).sqrt() * w.norm.scale[j] + w.norm.shift[j];
        }
    }
    let proj = |mat: &Array2<f64>| {
        let mut out = Array2::<f64>::zeros((m, d));
        for i in 0..m {
            for j in 0..d {
                out[[i, j]] = (0..d).map(|k| ln[[i, k]] * mat[[k, j]]).sum::<f64>();
            }
        }
        out
    };
    let (q, k, v) = (proj(&w.query), proj(&w.key), proj(&w.value));
    let mut ctx = Array2::<f64>::zeros((m, d));
    for h in 0..w.heads {
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| {
                    (0..hd).map(|t| q[[i, h * hd + t]] * k[[j, h * hd + t]]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for t in 0..hd {
                ctx[[i, h * hd + t]] = (0..m).map(|j| exps[j] / z * v[[j, h * hd + t]]).sum::<f64>();
            }
        }
    }
    let mut out = x.clone();
    for i in 0..m {
        for j in 0..d {
            out[[i, j]] += (0..d).map(|k| ctx[[i, k]] * w.output[[k, j]]).sum::<f64>();
        }
    }
    out
}
