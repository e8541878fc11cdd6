use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{ClipRecord, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::seed::{self, STREAM_SPLIT};

/// Partitions `manifest` into disjoint train/test manifests of exactly the
/// requested sizes. Records beyond `train_count + test_count` are dropped.
///
/// With `by_subject`, whole subjects are assigned to one side; the sizes must
/// then be reachable as sums of subject sizes.
pub fn split(
    manifest: &DatasetManifest,
    train_count: usize,
    test_count: usize,
    seed: u64,
    by_subject: bool,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let n = manifest.len();
    if train_count + test_count > n {
        return Err(Error::InvalidArgument(format!(
            "requested {train_count} + {test_count} records from a manifest of {n}"
        )));
    }
    let mut rng = seed::rng(seed, &[STREAM_SPLIT]);
    let (train_idx, test_idx) = if by_subject {
        subject_partition(&manifest.records, train_count, test_count, &mut rng)?
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let train = order[..train_count].to_vec();
        let test = order[train_count..train_count + test_count].to_vec();
        (train, test)
    };
    Ok((
        take(&manifest.records, train_idx, Split::Train),
        take(&manifest.records, test_idx, Split::Test),
    ))
}

fn take(records: &[ClipRecord], mut idx: Vec<usize>, split: Split) -> DatasetManifest {
    idx.sort_unstable();
    DatasetManifest::new(
        idx.into_iter()
            .map(|i| {
                let mut r = records[i].clone();
                r.split = split;
                r
            })
            .collect(),
    )
}

fn subject_partition(
    records: &[ClipRecord],
    train_count: usize,
    test_count: usize,
    rng: &mut seed::Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(&r.subject_id).or_default().push(i);
    }
    let mut subjects: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    subjects.shuffle(rng);

    let sizes: Vec<usize> = subjects.iter().map(|(_, v)| v.len()).collect();
    let all: Vec<usize> = (0..subjects.len()).collect();
    let blocking = |candidates: &[usize]| {
        candidates
            .iter()
            .max_by_key(|&&i| (sizes[i], std::cmp::Reverse(subjects[i].0)))
            .map(|&i| subjects[i].0.to_string())
            .unwrap_or_else(|| "<none>".into())
    };

    let test_pick = subset_with_sum(&all, &sizes, test_count).ok_or_else(|| Error::SplitInfeasible {
        subject: blocking(&all),
        reason: format!("no set of whole subjects holds exactly {test_count} test clips"),
    })?;
    let rest: Vec<usize> = all.iter().copied().filter(|i| !test_pick.contains(i)).collect();
    let train_pick = subset_with_sum(&rest, &sizes, train_count).ok_or_else(|| Error::SplitInfeasible {
        subject: blocking(&rest),
        reason: format!("no set of remaining subjects holds exactly {train_count} train clips"),
    })?;

    let gather = |pick: &[usize]| pick.iter().flat_map(|&s| subjects[s].1.iter().copied()).collect();
    Ok((gather(&train_pick), gather(&test_pick)))
}

/// Subset-sum over `candidates` (in order); returns the chosen candidates.
fn subset_with_sum(candidates: &[usize], sizes: &[usize], target: usize) -> Option<Vec<usize>> {
    // reach[k][s]: sum s attainable with the first k candidates.
    let mut reach = vec![vec![false; target + 1]; candidates.len() + 1];
    reach[0][0] = true;
    for (k, &c) in candidates.iter().enumerate() {
        for s in 0..=target {
            reach[k + 1][s] = reach[k][s] || (s >= sizes[c] && reach[k][s - sizes[c]]);
        }
    }
    if !reach[candidates.len()][target] {
        return None;
    }
    let mut picked = Vec::new();
    let mut s = target;
    for k in (0..candidates.len()).rev() {
        if !reach[k][s] {
            picked.push(candidates[k]);
            s -= sizes[candidates[k]];
        }
    }
    Some(picked)
}

/// Stratified held-out slice of `fraction` of each class (at least one clip
/// from every class that has two or more). Returns `(remaining, calibration)`.
pub fn calibration_split(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("calibration fraction {fraction} not in [0, 1)")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.label.index()).or_default().push(i);
    }
    let mut calib = Vec::new();
    for (class, mut idx) in by_class {
        let mut rng = seed::rng(seed, &[STREAM_SPLIT, 1, class as u64]);
        idx.shuffle(&mut rng);
        let mut k = (fraction * idx.len() as f64).round() as usize;
        if fraction > 0.0 && k == 0 && idx.len() >= 2 {
            k = 1;
        }
        calib.extend_from_slice(&idx[..k]);
    }
    let calib_set: std::collections::HashSet<usize> = calib.iter().copied().collect();
    let rest = (0..manifest.len()).filter(|i| !calib_set.contains(i)).collect();
    let keep = |idx: Vec<usize>| {
        let mut idx = idx;
        idx.sort_unstable();
        DatasetManifest::new(idx.into_iter().map(|i| manifest.records[i].clone()).collect())
    };
    Ok((keep(rest), keep(calib)))
}
