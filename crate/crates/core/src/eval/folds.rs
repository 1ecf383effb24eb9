use rand::seq::SliceRandom;

use crate::corpus::{group_by_class, largest_remainder, TissueClass};
use crate::error::{Error, Result};
use crate::seed;

/// Stratified subset holding `fraction` of each class, allocated by largest
/// remainder. Returned positions are ascending; a fraction of 1 returns
/// every position.
pub fn stratified_portion(
    labels: &[TissueClass],
    fraction: f64,
    seed_value: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Contract(format!(
            "portion {fraction} must be in (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let groups = group_by_class(labels);
    let counts: Vec<usize> = groups.iter().map(|(_, m)| m.len()).collect();
    let mut rng = seed::rng(seed_value);
    let alloc = largest_remainder(&counts, fraction, &mut rng);
    if let Some(((class, members), _)) = groups.iter().zip(&alloc).find(|(_, &k)| k == 0) {
        return Err(Error::Stratification {
            class: class.to_string(),
            message: format!(
                "portion {fraction} of {} items allocates none",
                members.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(alloc.iter().sum());
    for ((_, members), &k) in groups.iter().zip(&alloc) {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        out.extend_from_slice(&m[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Fold index per item. Items are shuffled within class, then dealt
/// round-robin with classes laid end to end, so every fold gets
/// ⌊n_c/k⌋ or ⌈n_c/k⌉ of each class and fold sizes differ by at most one.
pub fn stratified_folds<L: Ord + Copy>(
    labels: &[L],
    k: usize,
    seed_value: u64,
) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Contract(format!("need at least 2 folds, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::Contract(format!(
            "{} items cannot fill {k} folds",
            labels.len()
        )));
    }
    let mut classes: Vec<L> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = seed::rng(seed_value);
    let mut fold = vec![0; labels.len()];
    let mut pos = 0;
    for class in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = pos % k;
            pos += 1;
        }
    }
    Ok(fold)
}
