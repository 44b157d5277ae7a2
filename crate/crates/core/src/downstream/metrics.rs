use serde::{Deserialize, Serialize};

use super::DownstreamError;
use crate::volio::LabelGrid;

fn class_counts(labels: &[bool]) -> Result<(usize, usize), DownstreamError> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(DownstreamError::SingleClass { positives: pos, negatives: neg });
    }
    Ok((pos, neg))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), DownstreamError> {
    if scores.len() != labels.len() {
        return Err(DownstreamError::Length { what: "scores", expected: labels.len(), found: scores.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DownstreamError::NonFinite("scores"));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney estimate of `P(score_pos > score_neg) + P(tie) / 2`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, DownstreamError> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
}

impl ThresholdMetrics {
    pub fn youden_j(&self) -> f64 {
        self.sensitivity + self.specificity - 1.0
    }
}

pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics, DownstreamError> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok(ThresholdMetrics { sensitivity: tp as f64 / pos as f64, specificity: tn as f64 / neg as f64, threshold })
}

/// Threshold maximising `sens + spec - 1` over midpoints between sorted unique
/// scores; ties go to the lowest threshold. With a single unique score the
/// score itself is the only candidate.
pub fn youden(scores: &[f64], labels: &[bool]) -> Result<ThresholdMetrics, DownstreamError> {
    check_lengths(scores, labels)?;
    class_counts(labels)?;
    let mut unique = scores.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let candidates: Vec<f64> =
        if unique.len() == 1 { unique.clone() } else { unique.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect() };
    let mut best: Option<ThresholdMetrics> = None;
    for t in candidates {
        let m = threshold_metrics(scores, labels, t)?;
        if best.is_none_or(|b| m.youden_j() > b.youden_j()) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// `2|P ∩ T| / (|P| + |T|)` for voxels equal to `class`; 1 when both are empty.
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> Result<f64, DownstreamError> {
    if pred.len() != truth.len() {
        return Err(DownstreamError::Length { what: "prediction", expected: truth.len(), found: pred.len() });
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        t += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Voxels of `class` with at least one 6-neighbour outside the class or
/// outside the grid.
pub fn boundary(g: &LabelGrid, class: u8) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = g.extent;
    let inside = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && g.get(x as usize, y as usize, z as usize) == class
    };
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if g.get(x, y, z) != class {
                    continue;
                }
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                let edge = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|&(dx, dy, dz)| !inside(xi + dx, yi + dy, zi + dz));
                if edge {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Exact squared distance along one line, lower envelope of parabolas.
/// `f` holds squared distances so far (infinite where unknown).
fn envelope_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let sites: Vec<usize> = (0..f.len()).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let pos = |i: usize| i as f64 * spacing;
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    for &q in &sites[1..] {
        loop {
            let p = *v.last().unwrap();
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                if v.is_empty() {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in physical units) from every voxel to the
/// nearest seed voxel; separable over the three axes.
pub fn squared_distance_transform(extent: [usize; 3], seeds: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = extent;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut d = vec![f64::INFINITY; nx * ny * nz];
    for s in seeds {
        d[idx(s[0], s[1], s[2])] = 0.0;
    }
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = extent[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        let (a, b) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for j in 0..b {
            for i in 0..a {
                let at = |t: usize| match axis {
                    0 => idx(t, i, j),
                    1 => idx(i, t, j),
                    _ => idx(i, j, t),
                };
                for (t, l) in line.iter_mut().enumerate() {
                    *l = d[at(t)];
                }
                envelope_1d(&line, spacing[axis], &mut out);
                for (t, &o) in out.iter().enumerate() {
                    d[at(t)] = o;
                }
            }
        }
    }
    d
}

/// Percentile with linear interpolation between order statistics
/// (rank `q/100 * (n-1)`).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// 95th percentile of the pooled boundary-to-boundary distances in both
/// directions, in physical units.
pub fn hd95(pred: &LabelGrid, truth: &LabelGrid, class: u8, spacing: [f64; 3]) -> Result<f64, DownstreamError> {
    if pred.extent != truth.extent {
        return Err(DownstreamError::Length { what: "prediction voxels", expected: truth.len(), found: pred.len() });
    }
    let bp = boundary(pred, class);
    let bt = boundary(truth, class);
    if bp.is_empty() || bt.is_empty() {
        return Err(DownstreamError::EmptyMask { class, prediction_empty: bp.is_empty() });
    }
    let extent = pred.extent;
    let to_t = squared_distance_transform(extent, &bt, spacing);
    let to_p = squared_distance_transform(extent, &bp, spacing);
    let at = |d: &[f64], v: &[usize; 3]| d[v[0] + extent[0] * (v[1] + extent[1] * v[2])].sqrt();
    let mut pooled: Vec<f64> = bp.iter().map(|v| at(&to_t, v)).chain(bt.iter().map(|v| at(&to_p, v))).collect();
    Ok(percentile(&mut pooled, 95.0))
}
