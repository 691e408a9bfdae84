use rand::Rng as _;

use super::synth::fisher_yates;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// One epoch's sample order with exactly `target` draws per class.
///
/// `members[c]` lists the dataset indices of class `c`. Each class is
/// repeated `target / n` times in full plus a random `target % n` subset;
/// with `n > target` a random subset of size `target` is drawn if
/// `allow_undersample`, otherwise it is an error.
pub fn oversample_plan(members: &[Vec<usize>], target: usize, allow_undersample: bool, seed: u64, epoch: u64) -> Result<Vec<usize>> {
    if target == 0 {
        return Err(Error::InvalidParam("oversample target must be positive".into()));
    }
    let mut plan = Vec::with_capacity(members.len() * target);
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::Precondition(format!("class {c} has no samples to draw from")));
        }
        if m.len() > target && !allow_undersample {
            return Err(Error::Precondition(format!(
                "class {c} has {} samples, above the per-class target {target}",
                m.len()
            )));
        }
        let mut r = rng::stream(seed, &[purpose::OVERSAMPLE, epoch, c as u64]);
        for _ in 0..target / m.len() {
            plan.extend_from_slice(m);
        }
        let mut rest = m.clone();
        fisher_yates(&mut rest, &mut r);
        plan.extend_from_slice(&rest[..target % m.len()]);
    }
    fisher_yates(&mut plan, &mut rng::stream(seed, &[purpose::SHUFFLE, epoch]));
    Ok(plan)
}

/// Groups a plan into batches of `p` distinct classes times `k` samples.
///
/// Each batch takes the `p` classes with the most undrawn entries (random
/// tie-break) so the leftover, which is dropped, stays small.
pub fn pk_batches(plan: &[usize], labels: &[usize], p: usize, k: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if p < 2 || k < 1 {
        return Err(Error::InvalidParam(format!("PK sampler needs P >= 2 and K >= 1, got P={p} K={k}")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in plan {
        queues[labels[i]].push(i);
    }
    let mut cursor = vec![0usize; classes];
    let eligible = |cursor: &[usize]| (0..classes).filter(|&c| queues[c].len() - cursor[c] >= k).count();
    if eligible(&cursor) < p {
        return Err(Error::Precondition(format!(
            "PK sampling infeasible: fewer than {p} classes with {k} samples in the plan"
        )));
    }
    let mut r = rng::stream(seed, &[purpose::BATCH, epoch]);
    let mut batches = Vec::new();
    while eligible(&cursor) >= p {
        let mut order: Vec<(usize, u64, usize)> =
            (0..classes).map(|c| (queues[c].len() - cursor[c], r.random::<u64>(), c)).collect();
        order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut batch = Vec::with_capacity(p * k);
        for &(_, _, c) in order.iter().take(p) {
            batch.extend_from_slice(&queues[c][cursor[c]..cursor[c] + k]);
            cursor[c] += k;
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Splits a plan into consecutive batches of at most `size`.
pub fn chunk_batches(plan: &[usize], size: usize) -> Vec<Vec<usize>> {
    plan.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}
