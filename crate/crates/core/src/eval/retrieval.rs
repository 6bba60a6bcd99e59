//! Zero-shot retrieval by cosine ranking.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::normalize_k_list;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::cosine_matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub n_way: usize,
    pub k_list: Vec<usize>,
    /// Top-k accuracy per k.
    pub topk: BTreeMap<usize, f64>,
    /// Candidate image ids in candidate-index order.
    pub candidates: Vec<usize>,
    /// Per query, candidate indices from best to worst.
    pub rankings: Vec<Vec<usize>>,
    /// Per query, 0-based rank of its true candidate.
    pub true_ranks: Vec<usize>,
}

impl RetrievalResult {
    pub fn top(&self, k: usize) -> f64 {
        self.topk.get(&k).copied().unwrap_or_else(|| accuracy_at(&self.true_ranks, k))
    }

    pub fn top1(&self) -> f64 {
        self.top(1)
    }
}

fn accuracy_at(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Ranks candidates for every query. Ties go to the lower candidate index.
pub fn rank_by_cosine(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
    let sims = cosine_matrix(queries, candidates)?;
    Ok(sims
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// Retrieval from precomputed embeddings; `truth[i]` indexes `candidates`.
pub fn retrieval_from_embeddings(
    queries: &[Vec<f64>],
    truth: &[usize],
    candidates: &[Vec<f64>],
    candidate_ids: Vec<usize>,
    k_list: &[usize],
) -> Result<RetrievalResult> {
    if queries.len() != truth.len() {
        return Err(Error::dim("retrieval truth labels", queries.len(), truth.len()));
    }
    if candidates.is_empty() {
        return Err(Error::Missing("no retrieval candidates".into()));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= candidates.len()) {
        return Err(Error::dim("retrieval truth index", candidates.len(), t));
    }
    let rankings = rank_by_cosine(queries, candidates)?;
    let true_ranks: Vec<usize> = rankings
        .iter()
        .zip(truth)
        .map(|(order, &t)| order.iter().position(|&c| c == t).expect("candidate present"))
        .collect();
    let k_list = normalize_k_list(k_list);
    let topk = k_list.iter().map(|&k| (k, accuracy_at(&true_ranks, k))).collect();
    Ok(RetrievalResult {
        n_way: candidates.len(),
        k_list,
        topk,
        candidates: candidate_ids,
        rankings,
        true_ranks,
    })
}

/// Candidate images for a trial set: every image of every concept the
/// trials cover, ascending by id.
pub fn candidate_images(dataset: &Dataset, trials: &[usize]) -> Vec<usize> {
    let concepts: std::collections::BTreeSet<usize> = trials.iter().map(|&t| dataset.trials[t].concept).collect();
    (0..dataset.manifest.num_images())
        .filter(|&i| concepts.contains(&dataset.manifest.concept_of_image(i)))
        .collect()
}

/// Shared-space embeddings of the given trials.
pub fn eeg_embeddings(model: &Model, dataset: &Dataset, trials: &[usize]) -> Result<Vec<Vec<f64>>> {
    trials.iter().map(|&t| model.embed_eeg(&dataset.trials[t].signal)).collect()
}

/// Shared-space image embeddings under inference routing.
pub fn image_embeddings(model: &Model, dataset: &Dataset, images: &[usize]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|&i| model.embed_image(&dataset.features[i])).collect()
}

/// Ranks every candidate image of the trials' concepts for each trial; a
/// hit means the trial's own image is within the top k.
pub fn evaluate_retrieval(model: &Model, dataset: &Dataset, trials: &[usize], k_list: &[usize]) -> Result<RetrievalResult> {
    if trials.is_empty() {
        return Err(Error::Missing("no trials to evaluate".into()));
    }
    let images = candidate_images(dataset, trials);
    let index: BTreeMap<usize, usize> = images.iter().enumerate().map(|(i, &img)| (img, i)).collect();
    let truth: Vec<usize> = trials.iter().map(|&t| index[&dataset.trials[t].image]).collect();
    let z_e = eeg_embeddings(model, dataset, trials)?;
    let z_i = image_embeddings(model, dataset, &images)?;
    retrieval_from_embeddings(&z_e, &truth, &z_i, images, k_list)
}

/// Top-1 per category (by the dataset's coarse categories, or a supplied
/// concept → category map).
pub fn per_category_top1(
    result: &RetrievalResult,
    dataset: &Dataset,
    trials: &[usize],
    categories: &BTreeMap<usize, usize>,
) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (q, &t) in trials.iter().enumerate() {
        let g = categories[&dataset.trials[t].concept];
        let e = acc.entry(g).or_default();
        e.1 += 1;
        if result.true_ranks[q] == 0 {
            e.0 += 1;
        }
    }
    acc.into_iter().map(|(g, (hit, n))| (g, hit as f64 / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_targets_give_perfect_top1() {
        let c = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]];
        let r = retrieval_from_embeddings(&c, &[0, 1, 2], &c, vec![0, 1, 2], &[5, 1]).unwrap();
        assert_eq!(r.k_list, vec![1, 5]);
        assert_eq!(r.top1(), 1.0);
        assert_eq!(r.top(3), 1.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let cands = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]];
        let r = rank_by_cosine(&[vec![1.0, 0.0]], &cands).unwrap();
        assert_eq!(r[0], vec![0, 1, 2]);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let c = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert!(retrieval_from_embeddings(&c, &[0, 1], &c, vec![0, 1], &[1]).is_err());
    }
}
