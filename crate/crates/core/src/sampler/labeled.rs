use rand::Rng as _;

use super::{DistantType, Triplet, TripletRef};
use crate::corpus::{LabeledPatchSet, TissueClass};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Class-driven triplets over a labeled set: the neighbor shares the anchor's
/// class, the distant class is uniform over the other classes present.
pub struct LabeledSampler {
    ids: Vec<String>,
    labels: Vec<TissueClass>,
    /// Member positions per class, classes in enum order.
    by_class: Vec<(TissueClass, Vec<usize>)>,
}

impl LabeledSampler {
    pub fn new(dataset: &LabeledPatchSet) -> Self {
        Self::from_labels(
            dataset.items().iter().map(|p| p.item_id.clone()).collect(),
            dataset.labels(),
        )
    }

    pub fn from_labels(ids: Vec<String>, labels: Vec<TissueClass>) -> Self {
        let by_class = crate::corpus::group_by_class(&labels);
        LabeledSampler {
            ids,
            labels,
            by_class,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn members(&self, class: TissueClass) -> &[usize] {
        self.by_class
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, m)| m.as_slice())
            .unwrap_or(&[])
    }

    /// Positions usable as anchors: the class has a second member and at
    /// least one other class exists.
    pub(crate) fn eligible_anchors(&self) -> Vec<usize> {
        if self.by_class.len() < 2 {
            return Vec::new();
        }
        (0..self.labels.len())
            .filter(|&i| self.members(self.labels[i]).len() >= 2)
            .collect()
    }

    pub fn sample_at(&self, anchor: usize, rng: &mut Rng) -> Result<Triplet> {
        let class = *self
            .labels
            .get(anchor)
            .ok_or_else(|| Error::Lookup(format!("anchor position {anchor}")))?;
        let same = self.members(class);
        if same.len() < 2 || self.by_class.len() < 2 {
            return Err(Error::Exhaustion {
                kind: format!(
                    "{} (anchor class {class})",
                    DistantType::DifferentClassLabel
                ),
                attempts: 0,
                progress: String::new(),
            });
        }
        // Uniform over the class minus the anchor.
        let mut k = rng.random_range(0..same.len() - 1);
        if same[k] == anchor {
            k = same.len() - 1;
        }
        let neighbor = same[k];
        let others: Vec<&Vec<usize>> = self
            .by_class
            .iter()
            .filter(|(c, _)| *c != class)
            .map(|(_, m)| m)
            .collect();
        let pool = others[rng.random_range(0..others.len())];
        let distant = pool[rng.random_range(0..pool.len())];
        Ok(Triplet {
            anchor: TripletRef::Item(self.ids[anchor].clone()),
            neighbor: TripletRef::Item(self.ids[neighbor].clone()),
            distant: TripletRef::Item(self.ids[distant].clone()),
            distant_type: DistantType::DifferentClassLabel,
        })
    }

    pub fn sample(&self, anchor_id: &str, rng: &mut Rng) -> Result<Triplet> {
        let pos = self
            .ids
            .iter()
            .position(|id| id == anchor_id)
            .ok_or_else(|| Error::Lookup(format!("item {anchor_id}")))?;
        self.sample_at(pos, rng)
    }
}

pub fn sample_labeled_triplet(
    anchor_id: &str,
    dataset: &LabeledPatchSet,
    rng: &mut Rng,
) -> Result<Triplet> {
    LabeledSampler::new(dataset).sample(anchor_id, rng)
}
