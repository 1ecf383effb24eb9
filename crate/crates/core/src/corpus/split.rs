use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LabeledPatchSet, TissueClass};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Stratified source/target partition of a labeled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
    pub fractions: (f64, f64),
    pub seed: u64,
}

/// Largest-remainder apportionment of `fraction` of each group.
///
/// The total is `round(fraction * Σ counts)` exactly, and each group gets the
/// floor or the ceiling of its quota. Ties between equal remainders are broken
/// by a random priority drawn from `rng`.
pub fn largest_remainder(counts: &[usize], fraction: f64, rng: &mut Rng) -> Vec<usize> {
    const EPS: f64 = 1e-9;
    let quotas: Vec<f64> = counts.iter().map(|&n| fraction * n as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| (q + EPS).floor() as usize).collect();
    let total_quota: f64 = quotas.iter().sum();
    let target = (total_quota + EPS).round() as usize;
    let assigned: usize = alloc.iter().sum();
    let mut priority: Vec<usize> = (0..counts.len()).collect();
    priority.shuffle(rng);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = (quotas[a] - alloc[a] as f64).max(0.0);
        let rb = (quotas[b] - alloc[b] as f64).max(0.0);
        rb.total_cmp(&ra).then(priority[a].cmp(&priority[b]))
    });
    let mut remaining = target.saturating_sub(assigned);
    for &i in order.iter().cycle().take(counts.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[i] < counts[i] {
            alloc[i] += 1;
            remaining -= 1;
        }
    }
    alloc
}

/// Per-class index lists, classes in enum order, indices ascending.
pub(crate) fn group_by_class(labels: &[TissueClass]) -> Vec<(TissueClass, Vec<usize>)> {
    let mut groups: Vec<(TissueClass, Vec<usize>)> = Vec::new();
    for class in TissueClass::ALL {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if !members.is_empty() {
            groups.push((class, members));
        }
    }
    groups
}

/// Stratified split into source and target sides.
pub fn split_source_target(
    dataset: &LabeledPatchSet,
    fractions: (f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (src, tgt) = fractions;
    if !(0.0..=1.0).contains(&src) || !(0.0..=1.0).contains(&tgt) || (src + tgt - 1.0).abs() > 1e-9
    {
        return Err(Error::Contract(format!(
            "fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let labels = dataset.labels();
    let groups = group_by_class(&labels);
    if let Some((class, _)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Stratification {
            class: class.to_string(),
            message: "needs at least 2 items".into(),
        });
    }
    let mut rng = seed::rng(seed);
    let counts: Vec<usize> = groups.iter().map(|(_, m)| m.len()).collect();
    let source_counts = largest_remainder(&counts, src, &mut rng);
    let mut source = Vec::new();
    let mut target = Vec::new();
    for ((_, members), &k) in groups.iter().zip(&source_counts) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        source.extend_from_slice(&shuffled[..k]);
        target.extend_from_slice(&shuffled[k..]);
    }
    source.sort_unstable();
    target.sort_unstable();
    let ids = |idx: Vec<usize>| -> Vec<String> {
        idx.into_iter()
            .map(|i| dataset.items()[i].item_id.clone())
            .collect()
    };
    Ok(DatasetSplit {
        source_ids: ids(source),
        target_ids: ids(target),
        fractions,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabeledPatch, Provenance};
    use image::RgbImage;
    use proptest::prelude::*;
    use std::collections::HashSet;

    pub(crate) fn fixture(per_class: &[usize]) -> LabeledPatchSet {
        let mut items = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for k in 0..n {
                items.push(LabeledPatch {
                    image: RgbImage::new(1, 1),
                    label: TissueClass::from_index(c).unwrap(),
                    item_id: format!("c{c}/{k}"),
                });
            }
        }
        LabeledPatchSet::new(
            items,
            Provenance {
                dataset: "fixture".into(),
                split: "all".into(),
            },
        )
        .unwrap()
    }

    fn class_of(id: &str) -> usize {
        id[1..id.find('/').unwrap()].parse().unwrap()
    }

    #[test]
    fn sixty_forty_on_8x250() {
        let set = fixture(&[250; 8]);
        let split = split_source_target(&set, (0.6, 0.4), 1).unwrap();
        for c in 0..8 {
            assert_eq!(
                split.source_ids.iter().filter(|i| class_of(i) == c).count(),
                150
            );
            assert_eq!(
                split.target_ids.iter().filter(|i| class_of(i) == c).count(),
                100
            );
        }
    }

    #[test]
    fn all_source_boundary() {
        let set = fixture(&[5, 3]);
        let split = split_source_target(&set, (1.0, 0.0), 1).unwrap();
        assert!(split.target_ids.is_empty());
        assert_eq!(split.source_ids.len(), 8);
    }

    #[test]
    fn same_seed_same_split() {
        let set = fixture(&[17, 9, 30]);
        let a = split_source_target(&set, (0.6, 0.4), 77).unwrap();
        let b = split_source_target(&set, (0.6, 0.4), 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_class_is_named() {
        let set = fixture(&[4, 1]);
        match split_source_target(&set, (0.6, 0.4), 0) {
            Err(Error::Stratification { class, .. }) => assert_eq!(class, "simple_stroma"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn remainder_total_is_exact() {
        let mut rng = seed::rng(0);
        let alloc = largest_remainder(&[250; 8], 0.05, &mut rng);
        assert_eq!(alloc.iter().sum::<usize>(), 100);
        assert!(alloc.iter().all(|&a| a == 12 || a == 13));
    }

    proptest! {
        #[test]
        fn split_invariants(
            per_class in prop::collection::vec(2usize..40, 1..8),
            frac in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let set = fixture(&per_class);
            let split = split_source_target(&set, (frac, 1.0 - frac), seed).unwrap();
            let src: HashSet<_> = split.source_ids.iter().collect();
            let tgt: HashSet<_> = split.target_ids.iter().collect();
            prop_assert!(src.is_disjoint(&tgt));
            prop_assert_eq!(src.len() + tgt.len(), set.len());
            for (c, &n) in per_class.iter().enumerate() {
                let observed = split.source_ids.iter().filter(|i| class_of(i) == c).count() as f64;
                prop_assert!((observed - frac * n as f64).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
