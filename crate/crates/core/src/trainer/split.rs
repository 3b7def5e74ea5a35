use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Stratified `k`-fold partition: each class is shuffled and dealt round
/// robin, so every trial lands in exactly one fold. Folds come back sorted.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > labels.len() {
        return Err(Error::Config(format!(
            "cannot split {} trials into {k} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut members in by_class(labels) {
        members.shuffle(&mut rng);
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Seeded stratified subsample of `round(fraction · n)` trials; per-class
/// quotas use largest remainders so classes stay balanced to within one.
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("data fraction {fraction} outside (0, 1]")));
    }
    let classes = by_class(labels);
    let total = (fraction * labels.len() as f64).round() as usize;
    let exact: Vec<f64> = classes
        .iter()
        .map(|c| c.len() as f64 * total as f64 / labels.len().max(1) as f64)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total - quota.iter().sum::<usize>();
    for &c in &order {
        if missing == 0 {
            break;
        }
        if quota[c] < classes[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    for (mut members, q) in classes.into_iter().zip(quota) {
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..q]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Stratified train/eval split with `eval_fraction` of each class held out.
pub fn stratified_split(labels: &[usize], eval_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let eval = stratified_subsample(labels, eval_fraction, seed)?;
    let mut is_eval = vec![false; labels.len()];
    eval.iter().for_each(|&i| is_eval[i] = true);
    let train = (0..labels.len()).filter(|&i| !is_eval[i]).collect();
    Ok((train, eval))
}
