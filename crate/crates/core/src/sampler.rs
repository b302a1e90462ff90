//! Class-balanced mini-batch sampling: `M/m` random classes, `m` random
//! examples from each.

use std::collections::BTreeMap;

use rand::seq::index;

use crate::{Error, Result, Rng};

/// Examples grouped by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    classes: BTreeMap<usize, Vec<usize>>,
    total: usize,
}

impl DatasetIndex {
    /// Groups example indices `0..labels.len()` by label.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            classes.entry(l).or_default().push(i);
        }
        Self {
            classes,
            total: labels.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Number of retained examples.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn members(&self, class_id: usize) -> Option<&[usize]> {
        self.classes.get(&class_id).map(Vec::as_slice)
    }
}

/// Drops classes with fewer than `m` examples.
pub fn filter_small_classes(index: &DatasetIndex, m: usize) -> Result<DatasetIndex> {
    if m < 2 {
        return Err(Error::BadParam(format!("samples per class must be >= 2, got {m}")));
    }
    let classes: BTreeMap<usize, Vec<usize>> = index
        .classes
        .iter()
        .filter(|(_, v)| v.len() >= m)
        .map(|(&c, v)| (c, v.clone()))
        .collect();
    if classes.is_empty() {
        return Err(Error::EmptyAfterFilter(m));
    }
    let total = classes.values().map(Vec::len).sum();
    Ok(DatasetIndex { classes, total })
}

/// Checks that `batch_size` examples in groups of `per_class` can be drawn.
pub fn check_batch_shape(index: &DatasetIndex, batch_size: usize, per_class: usize) -> Result<()> {
    if per_class == 0 || batch_size == 0 || !batch_size.is_multiple_of(per_class) {
        return Err(Error::NotDivisible {
            batch: batch_size,
            per_class,
        });
    }
    let needed = batch_size / per_class;
    let available = index.classes.values().filter(|v| v.len() >= per_class).count();
    if available < needed {
        return Err(Error::TooFewClasses { needed, available });
    }
    Ok(())
}

/// Draws one batch: exactly `per_class` distinct examples from each of
/// `batch_size / per_class` distinct classes.
///
/// Classes that cannot supply `per_class` examples are never chosen. The
/// result is grouped by class in the order the classes were drawn.
pub fn class_balanced_batch(
    index: &DatasetIndex,
    batch_size: usize,
    per_class: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    check_batch_shape(index, batch_size, per_class)?;
    let eligible: Vec<&Vec<usize>> = index
        .classes
        .values()
        .filter(|v| v.len() >= per_class)
        .collect();
    let n_classes = batch_size / per_class;
    let mut batch = Vec::with_capacity(batch_size);
    for c in index::sample(rng, eligible.len(), n_classes) {
        let members = eligible[c];
        batch.extend(index::sample(rng, members.len(), per_class).into_iter().map(|i| members[i]));
    }
    Ok(batch)
}
