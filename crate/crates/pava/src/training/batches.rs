use rand::seq::SliceRandom;

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::labels::class_name;
use crate::seed;

/// One epoch of class-balanced batches. Entries are indices into the
/// manifest's records; a mixed manifest repeats clip ids, so ids alone
/// would be ambiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalancedBatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub per_class_in_batch: usize,
    pub num_classes: usize,
}

impl BalancedBatchPlan {
    pub fn clip_ids<'m>(&self, manifest: &'m DatasetManifest) -> Vec<Vec<&'m str>> {
        self.batches
            .iter()
            .map(|b| b.iter().map(|&i| manifest.records[i].clip_id.as_str()).collect())
            .collect()
    }

    /// Per-class counts of one batch.
    pub fn composition(&self, manifest: &DatasetManifest, batch: usize) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in &self.batches[batch] {
            counts[manifest.records[i].label.index()] += 1;
        }
        counts
    }
}

/// Every class contributes `per_class` records to every batch. Each class's
/// records are dealt from back-to-back shuffled permutations, so a class
/// smaller than the epoch's demand is oversampled while every record is used
/// before any repeats. The epoch has `⌈largest class / per_class⌉` batches.
pub fn balanced_batches(
    manifest: &DatasetManifest,
    num_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<BalancedBatchPlan> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class_in_batch must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, r) in manifest.records.iter().enumerate() {
        let c = r.label.index();
        if c >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "record `{}` has label {} outside the {num_classes} trained classes",
                r.clip_id, r.label
            )));
        }
        by_class[c].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(class_name(c)));
    }
    let largest = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let n_batches = largest.div_ceil(per_class);
    let demand = n_batches * per_class;

    let streams: Vec<Vec<usize>> = by_class
        .iter()
        .enumerate()
        .map(|(c, members)| {
            let mut rng = seed::rng(seed, &[seed::STREAM_BATCHES, c as u64]);
            let mut stream = Vec::with_capacity(demand + members.len());
            while stream.len() < demand {
                let mut perm = members.clone();
                perm.shuffle(&mut rng);
                stream.extend(perm);
            }
            stream.truncate(demand);
            stream
        })
        .collect();

    let batches = (0..n_batches)
        .map(|b| {
            streams
                .iter()
                .flat_map(|s| s[b * per_class..(b + 1) * per_class].iter().copied())
                .collect()
        })
        .collect();
    Ok(BalancedBatchPlan {
        batches,
        per_class_in_batch: per_class,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClipRecord, Split, Variant};
    use crate::labels::ActivityLabel;
    use proptest::prelude::*;

    fn manifest(sizes: &[usize]) -> DatasetManifest {
        let records = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |k| ClipRecord {
                    clip_id: format!("c{c}-{k}"),
                    path: format!("c{c}-{k}.pclip").into(),
                    label: ActivityLabel::from_index(c).unwrap(),
                    subject_id: "s".into(),
                    split: Split::Train,
                    variant: Variant::Original,
                })
            })
            .collect();
        DatasetManifest::new(records)
    }

    #[test]
    fn eighteen_classes_two_each() {
        let m = manifest(&[5; 18]);
        let plan = balanced_batches(&m, 18, 2, 1).unwrap();
        assert_eq!(plan.batches.len(), 3);
        for b in 0..plan.batches.len() {
            assert_eq!(plan.batches[b].len(), 36);
            assert!(plan.composition(&m, b).iter().all(|&n| n == 2));
        }
    }

    #[test]
    fn singleton_class_repeats_within_a_batch() {
        let m = manifest(&[1, 6]);
        let plan = balanced_batches(&m, 2, 2, 3).unwrap();
        for b in &plan.batches {
            assert_eq!(b.iter().filter(|&&i| i == 0).count(), 2);
        }
    }

    #[test]
    fn balanced_input_uses_each_clip_once() {
        let m = manifest(&[6, 6, 6]);
        let plan = balanced_batches(&m, 3, 2, 4).unwrap();
        let mut seen = vec![0; m.len()];
        plan.batches.iter().flatten().for_each(|&i| seen[i] += 1);
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn empty_class_is_named() {
        let m = manifest(&[3, 0, 2]);
        match balanced_batches(&m, 3, 1, 0) {
            Err(Error::EmptyClass(name)) => assert_eq!(name, "clean"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_outside_trained_classes_rejected() {
        let m = manifest(&[1, 1, 1]);
        assert!(balanced_batches(&m, 2, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn composition_and_coverage(sizes in prop::collection::vec(1usize..30, 2..6), k in 1usize..4, seed in any::<u64>()) {
            let m = manifest(&sizes);
            let plan = balanced_batches(&m, sizes.len(), k, seed).unwrap();
            prop_assert_eq!(plan.batches.len(), sizes.iter().max().unwrap().div_ceil(k));
            let mut seen = vec![0usize; m.len()];
            for (b, batch) in plan.batches.iter().enumerate() {
                prop_assert!(plan.composition(&m, b).iter().all(|&n| n == k));
                batch.iter().for_each(|&i| seen[i] += 1);
            }
            let demand = plan.batches.len() * k;
            let mut start = 0;
            for &n in &sizes {
                let counts = &seen[start..start + n];
                if n <= demand {
                    prop_assert!(counts.iter().all(|&c| c >= 1));
                }
                // Dealt from full permutations: counts differ by at most one.
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
                start += n;
            }
            prop_assert_eq!(plan.clone(), balanced_batches(&m, sizes.len(), k, seed).unwrap());
        }
    }
}
