use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Concept-level train/val/test assignment. Test concepts never appear in
/// train or val.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptPartition {
    pub train: BTreeSet<usize>,
    pub val: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

impl ConceptPartition {
    /// Random partition: `round(P·test_fraction)` test concepts, then
    /// `round(rest·val_fraction)` validation concepts.
    pub fn random(concepts: usize, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<Self> {
        Self::stratified(&vec![0; concepts], test_fraction, val_fraction, seed)
    }

    /// Like `random`, but concepts are dealt round-robin across groups
    /// (`groups[p]` is the group of concept `p`) so every group is spread
    /// evenly over test, validation and train.
    pub fn stratified(groups: &[usize], test_fraction: f64, val_fraction: f64, seed: u64) -> Result<Self> {
        let concepts = groups.len();
        if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(
                "data.test_fraction",
                "fractions must lie in [0, 1)",
            ));
        }
        let n_test = (concepts as f64 * test_fraction).round() as usize;
        if n_test < 2 {
            return Err(Error::Split(format!(
                "{concepts} concepts give {n_test} test concepts; retrieval needs at least 2"
            )));
        }
        let rest = concepts.saturating_sub(n_test);
        let n_val = (rest as f64 * val_fraction).round() as usize;
        if rest <= n_val {
            return Err(Error::Split(format!(
                "fewer concepts ({concepts}) than requested test ({n_test}) plus validation ({n_val}) size"
            )));
        }
        let mut rng = rng::stream(seed, Stream::Split, &[]);
        let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (p, &g) in groups.iter().enumerate() {
            by_group.entry(g).or_default().push(p);
        }
        for members in by_group.values_mut() {
            members.shuffle(&mut rng);
        }
        let mut keys: Vec<usize> = by_group.keys().copied().collect();
        keys.shuffle(&mut rng);
        let rounds = by_group.values().map(Vec::len).max().unwrap_or(0);
        let mut order = Vec::with_capacity(concepts);
        for r in 0..rounds {
            order.extend(keys.iter().filter_map(|g| by_group[g].get(r).copied()));
        }
        Ok(ConceptPartition {
            test: order[..n_test].iter().copied().collect(),
            val: order[n_test..n_test + n_val].iter().copied().collect(),
            train: order[n_test + n_val..].iter().copied().collect(),
        })
    }

    /// Partition recorded in the dataset's per-trial split labels.
    pub fn from_labels(dataset: &Dataset) -> Result<Self> {
        let mut p = ConceptPartition {
            train: BTreeSet::new(),
            val: BTreeSet::new(),
            test: BTreeSet::new(),
        };
        for t in &dataset.trials {
            match t.split {
                Split::Train => p.train.insert(t.concept),
                Split::Val => p.val.insert(t.concept),
                Split::Test => p.test.insert(t.concept),
            };
        }
        if !p.test.is_disjoint(&p.train) || !p.test.is_disjoint(&p.val) {
            return Err(Error::Split(
                "dataset labels put a concept in both test and train/val".into(),
            ));
        }
        if p.test.is_empty() {
            return Err(Error::Split("dataset has no test concepts".into()));
        }
        Ok(p)
    }

    pub fn split_of(&self, concept: usize) -> Split {
        if self.test.contains(&concept) {
            Split::Test
        } else if self.val.contains(&concept) {
            Split::Val
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "subject")]
pub enum SplitMode {
    /// Train and test on one subject.
    IntraSubject(usize),
    /// Train on every other subject, test on the held-out one.
    LeaveOneSubjectOut(usize),
    /// Train and test on every subject (zero-shot over concepts only).
    Pooled,
}

impl SplitMode {
    pub fn subject(self) -> Option<usize> {
        match self {
            SplitMode::IntraSubject(s) | SplitMode::LeaveOneSubjectOut(s) => Some(s),
            SplitMode::Pooled => None,
        }
    }
}

/// Trial index lists for one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_split(dataset: &Dataset, mode: SplitMode, partition: &ConceptPartition) -> Result<SplitPlan> {
    if let Some(subject) = mode.subject().filter(|&s| s >= dataset.manifest.subjects) {
        return Err(Error::Split(format!(
            "subject {subject} out of range for {} subjects",
            dataset.manifest.subjects
        )));
    }
    let mut plan = SplitPlan {
        mode,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, t) in dataset.trials.iter().enumerate() {
        let (fit_subject, test_subject) = match mode {
            SplitMode::IntraSubject(s) => (t.subject == s, t.subject == s),
            SplitMode::LeaveOneSubjectOut(s) => (t.subject != s, t.subject == s),
            SplitMode::Pooled => (true, true),
        };
        match partition.split_of(t.concept) {
            Split::Train if fit_subject => plan.train.push(i),
            Split::Val if fit_subject => plan.val.push(i),
            Split::Test if test_subject => plan.test.push(i),
            _ => {}
        }
    }
    if plan.train.is_empty() || plan.test.is_empty() {
        return Err(Error::Split(format!(
            "split {mode:?} has {} train and {} test trials",
            plan.train.len(),
            plan.test.len()
        )));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn dataset() -> Dataset {
        generate_synthetic(
            &SynthConfig {
                channels: 2,
                time_samples: 4,
                reps_train: 1,
                ..SynthConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn stratified_partition_spreads_groups() {
        let groups: Vec<usize> = (0..60).map(|p| p % 5).collect();
        let p = ConceptPartition::stratified(&groups, 0.2, 0.1, 3).unwrap();
        assert_eq!((p.test.len(), p.val.len(), p.train.len()), (12, 5, 43));
        for g in 0..5 {
            let n = p.test.iter().filter(|&&c| groups[c] == g).count();
            assert!((2..=3).contains(&n), "group {g} has {n} test concepts");
        }
    }

    #[test]
    fn sixty_concepts_give_twelve_disjoint_test_concepts() {
        let p = ConceptPartition::random(60, 0.2, 0.1, 9).unwrap();
        assert_eq!(p.test.len(), 12);
        assert_eq!(p.val.len(), 5);
        assert_eq!(p.train.len(), 43);
        assert!(p.test.is_disjoint(&p.train));
        assert!(p.test.is_disjoint(&p.val));
    }

    #[test]
    fn too_few_concepts_is_an_error() {
        assert!(ConceptPartition::random(4, 0.2, 0.1, 0).is_err());
        assert!(ConceptPartition::random(3, 0.6, 0.9, 0).is_err());
    }

    #[test]
    fn intra_subject_returns_only_that_subject() {
        let ds = dataset();
        let p = ConceptPartition::from_labels(&ds).unwrap();
        let plan = make_split(&ds, SplitMode::IntraSubject(2), &p).unwrap();
        for &i in plan.train.iter().chain(&plan.val).chain(&plan.test) {
            assert_eq!(ds.trials[i].subject, 2);
        }
    }

    #[test]
    fn leave_one_out_holds_out_subject_zero() {
        let ds = dataset();
        let p = ConceptPartition::from_labels(&ds).unwrap();
        let plan = make_split(&ds, SplitMode::LeaveOneSubjectOut(0), &p).unwrap();
        let fit: BTreeSet<usize> = plan
            .train
            .iter()
            .chain(&plan.val)
            .map(|&i| ds.trials[i].subject)
            .collect();
        let test: BTreeSet<usize> = plan.test.iter().map(|&i| ds.trials[i].subject).collect();
        assert_eq!(fit, BTreeSet::from([1, 2, 3, 4]));
        assert_eq!(test, BTreeSet::from([0]));
    }

    #[test]
    fn labels_partition_matches_seeded_partition() {
        let ds = dataset();
        let from_labels = ConceptPartition::from_labels(&ds).unwrap();
        let groups: Vec<usize> = (0..60).map(|p| p % 5).collect();
        let seeded = ConceptPartition::stratified(&groups, 0.2, 0.1, 5).unwrap();
        assert_eq!(from_labels, seeded);
    }

    #[test]
    fn out_of_range_subject_is_rejected() {
        let ds = dataset();
        let p = ConceptPartition::from_labels(&ds).unwrap();
        assert!(make_split(&ds, SplitMode::IntraSubject(9), &p).is_err());
    }
}
