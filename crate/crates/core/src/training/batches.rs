use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// One epoch of mini-batches over training segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    /// Segment indices, grouped by batch.
    pub batches: Vec<Vec<usize>>,
    /// Per-batch class counts.
    pub histograms: Vec<Vec<usize>>,
}

impl BatchPlan {
    fn new(batches: Vec<Vec<usize>>, labels: &[usize], classes: usize) -> Self {
        let histograms = batches
            .iter()
            .map(|b| {
                let mut h = vec![0; classes];
                for &i in b {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect();
        BatchPlan { batches, histograms }
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

fn by_class(labels: &[usize], class_names: &[String]) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); class_names.len()];
    for (i, &l) in labels.iter().enumerate() {
        groups
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} out of range for {} classes", class_names.len())))?
            .push(i);
    }
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(class_names[c].clone()));
    }
    Ok(groups)
}

/// Batches with an exactly uniform class histogram.
///
/// The epoch has `ceil(max_count / per_class)` batches, so the largest class
/// is seen once (plus a remainder); smaller classes are drawn from
/// successive shuffled passes over their segments.
pub fn balanced_batches<R: Rng>(
    labels: &[usize],
    class_names: &[String],
    batch_size: usize,
    rng: &mut R,
) -> Result<BatchPlan> {
    let classes = class_names.len();
    if classes == 0 || batch_size == 0 || batch_size % classes != 0 {
        return Err(Error::invalid(format!(
            "batch size {batch_size} is not divisible by {classes} classes"
        )));
    }
    let groups = by_class(labels, class_names)?;
    let per_class = batch_size / classes;
    let largest = groups.iter().map(Vec::len).max().unwrap_or(0);
    let n_batches = largest.div_ceil(per_class);
    let need = n_batches * per_class;

    let streams: Vec<Vec<usize>> = groups
        .iter()
        .map(|g| {
            let mut s = Vec::with_capacity(need + g.len());
            while s.len() < need {
                let mut pass = g.clone();
                pass.shuffle(rng);
                s.extend(pass);
            }
            s.truncate(need);
            s
        })
        .collect();

    let batches = (0..n_batches)
        .map(|b| {
            let mut batch: Vec<usize> = streams
                .iter()
                .flat_map(|s| s[b * per_class..(b + 1) * per_class].iter().copied())
                .collect();
            batch.shuffle(rng);
            batch
        })
        .collect();
    Ok(BatchPlan::new(batches, labels, classes))
}

/// Plain shuffled batches; the last one may be short.
pub fn shuffled_batches<R: Rng>(
    labels: &[usize],
    class_names: &[String],
    batch_size: usize,
    rng: &mut R,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    by_class(labels, class_names)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let batches = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(BatchPlan::new(batches, labels, class_names.len()))
}
