use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DownstreamError;

fn by_class(labels: &[u8], indices: impl IntoIterator<Item = usize>) -> Vec<(u8, Vec<usize>)> {
    let mut groups: Vec<(u8, Vec<usize>)> = Vec::new();
    for i in indices {
        match groups.iter_mut().find(|(c, _)| *c == labels[i]) {
            Some((_, g)) => g.push(i),
            None => groups.push((labels[i], vec![i])),
        }
    }
    groups.sort_by_key(|(c, _)| *c);
    groups
}

/// Held-out index sets of a stratified `k`-fold split. Each class is
/// shuffled and the classes are dealt round-robin in turn, so folds differ
/// in size by at most one overall and per class.
pub fn kfold_split(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, DownstreamError> {
    if k < 2 || k > labels.len() {
        return Err(DownstreamError::Folds { k, n: labels.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dealt = Vec::with_capacity(labels.len());
    for (class, mut members) in by_class(labels, 0..labels.len()) {
        if members.len() < k {
            return Err(DownstreamError::SmallClass { class, members: members.len(), k });
        }
        members.shuffle(&mut rng);
        dealt.extend(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (i, idx) in dealt.into_iter().enumerate() {
        folds[i % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Training indices of fold `fold`: everything not held out.
pub fn train_indices(folds: &[Vec<usize>], fold: usize) -> Vec<usize> {
    let mut out: Vec<usize> =
        folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, f)| f.clone()).collect();
    out.sort_unstable();
    out
}

/// Keep `ceil(fraction * m)` of `indices`, stratified: each class gets the
/// floor of its share and the remainder goes to the largest fractional parts
/// (lower class label first on ties).
pub fn subsample(indices: &[usize], labels: &[u8], fraction: f64, seed: u64) -> Result<Vec<usize>, DownstreamError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DownstreamError::Fraction(fraction));
    }
    if fraction == 1.0 {
        return Ok(indices.to_vec());
    }
    let keep = (fraction * indices.len() as f64).ceil() as usize;
    let groups = by_class(labels, indices.iter().copied());
    let shares: Vec<f64> = groups.iter().map(|(_, g)| fraction * g.len() as f64).collect();
    let mut quota: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())).then(a.cmp(&b)));
    let mut missing = keep - quota.iter().sum::<usize>();
    for &g in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[g] < groups[g].1.len() {
            quota[g] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(keep);
    for ((_, members), q) in groups.into_iter().zip(quota) {
        let mut m = members;
        m.shuffle(&mut rng);
        out.extend_from_slice(&m[..q]);
    }
    out.sort_unstable();
    Ok(out)
}
