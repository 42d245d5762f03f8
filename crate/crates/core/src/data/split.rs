use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RawDataset, Sample};
use crate::error::{Error, Result};

/// Few-shot partition of the training pool. Labelled samples keep their class
/// label and lose their mask; unlabelled samples keep their mask and lose
/// their label. The test pool keeps both.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub class_names: Vec<String>,
    pub seed: u64,
    pub k_labeled_per_class: usize,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Draws `k` training samples per class uniformly without replacement.
pub fn few_shot_split(raw: &RawDataset, k: usize, seed: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; raw.train.len()];
    for c in 0..raw.num_classes() {
        let members: Vec<usize> = (0..raw.train.len()).filter(|&i| raw.train[i].label == Some(c)).collect();
        if k > members.len() {
            return Err(Error::invalid(
                "few_shot_split",
                format!("k = {k} exceeds the {} training samples of class {}", members.len(), raw.class_names[c]),
            ));
        }
        for j in sample(&mut rng, members.len(), k) {
            chosen[members[j]] = true;
        }
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (s, &pick) in raw.train.iter().zip(&chosen) {
        let mut s = s.clone();
        if pick {
            s.mask = None;
            labeled.push(s);
        } else {
            s.label = None;
            unlabeled.push(s);
        }
    }
    Ok(DatasetSplit {
        class_names: raw.class_names.clone(),
        seed,
        k_labeled_per_class: k,
        labeled,
        unlabeled,
        test: raw.test.clone(),
    })
}

/// Up to `n` samples taken round-robin across classes (unlabelled samples
/// form their own group), preserving order within each class. Gives a
/// class-balanced prefix of a class-major list.
pub fn balanced_head(samples: &[Sample], n: usize) -> Vec<Sample> {
    let mut groups: Vec<(Option<usize>, Vec<&Sample>)> = Vec::new();
    for s in samples {
        match groups.iter_mut().find(|(l, _)| *l == s.label) {
            Some((_, g)) => g.push(s),
            None => groups.push((s.label, vec![s])),
        }
    }
    let mut out = Vec::with_capacity(n.min(samples.len()));
    let mut round = 0;
    while out.len() < n.min(samples.len()) {
        for (_, g) in &groups {
            if let Some(s) = g.get(round) {
                if out.len() < n {
                    out.push((*s).clone());
                }
            }
        }
        round += 1;
    }
    out
}
