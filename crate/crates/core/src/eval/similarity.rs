//! Concept- and category-level similarity of EEG embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::retrieval::eeg_embeddings;
use crate::model::Model;
use crate::objectives::cosine_matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSimilarity {
    /// Concept id per row/column.
    pub concepts: Vec<usize>,
    pub categories: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
    /// Off-diagonal mean subtracted when centring (0 otherwise).
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySimilarity {
    pub categories: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
}

/// Cosine similarity between per-concept mean embeddings.
pub fn concept_similarity_from_embeddings(
    concept_of_row: &[usize],
    embeddings: &[Vec<f64>],
    categories: &BTreeMap<usize, usize>,
    center: bool,
    order_by_category: bool,
) -> Result<ConceptSimilarity> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (&c, z) in concept_of_row.iter().zip(embeddings) {
        let e = sums.entry(c).or_insert_with(|| (vec![0.0; z.len()], 0));
        e.0.iter_mut().zip(z).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::Missing("no trials for the concept similarity matrix".into()));
    }
    let mut concepts: Vec<usize> = sums.keys().copied().collect();
    let category_of = |c: usize| {
        categories
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Missing(format!("concept {c} has no category")))
    };
    if order_by_category {
        let mut keyed = concepts.iter().map(|&c| Ok((category_of(c)?, c))).collect::<Result<Vec<_>>>()?;
        keyed.sort_unstable();
        concepts = keyed.into_iter().map(|(_, c)| c).collect();
    }
    let means: Vec<Vec<f64>> = concepts
        .iter()
        .map(|c| {
            let (s, n) = &sums[c];
            s.iter().map(|v| v / *n as f64).collect()
        })
        .collect();
    let mut matrix = cosine_matrix(&means, &means)?;
    let n = matrix.len();
    // Exact symmetry and unit diagonal regardless of rounding in the dot products.
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in 0..i {
            matrix[j][i] = matrix[i][j];
        }
    }
    let mut offset = 0.0;
    if center && n > 1 {
        let mut total = 0.0;
        for (i, row) in matrix.iter().enumerate() {
            total += row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum::<f64>();
        }
        offset = total / (n * (n - 1)) as f64;
        matrix.iter_mut().flatten().for_each(|v| *v -= offset);
    }
    let categories = concepts.iter().map(|&c| category_of(c)).collect::<Result<_>>()?;
    Ok(ConceptSimilarity {
        concepts,
        categories,
        matrix,
        offset,
    })
}

/// Per-concept mean EEG embedding over `trials`, then pairwise cosine.
pub fn concept_similarity_matrix(
    model: &Model,
    dataset: &Dataset,
    trials: &[usize],
    center: bool,
    order_by_category: bool,
) -> Result<ConceptSimilarity> {
    let z = eeg_embeddings(model, dataset, trials)?;
    let concepts: Vec<usize> = trials.iter().map(|&t| dataset.trials[t].concept).collect();
    concept_similarity_from_embeddings(&concepts, &z, &dataset.manifest.categories, center, order_by_category)
}

/// Block means of the concept matrix by category; diagonal blocks skip
/// self-pairs.
pub fn category_similarity_matrix(concept: &ConceptSimilarity) -> Result<CategorySimilarity> {
    let cats: Vec<usize> = {
        let mut c = concept.categories.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    let index: BTreeMap<usize, usize> = cats.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let g = cats.len();
    let mut sum = vec![vec![0.0; g]; g];
    let mut count = vec![vec![0usize; g]; g];
    for (i, row) in concept.matrix.iter().enumerate() {
        let gi = index[&concept.categories[i]];
        for (j, v) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            let gj = index[&concept.categories[j]];
            sum[gi][gj] += v;
            count[gi][gj] += 1;
        }
    }
    let mut matrix = vec![vec![0.0; g]; g];
    for a in 0..g {
        for b in 0..g {
            if count[a][b] == 0 {
                return Err(Error::Missing(format!(
                    "category {} has too few concepts for block ({}, {})",
                    cats[a], cats[a], cats[b]
                )));
            }
            matrix[a][b] = sum[a][b] / count[a][b] as f64;
        }
    }
    for a in 0..g {
        for b in 0..a {
            matrix[b][a] = matrix[a][b];
        }
    }
    Ok(CategorySimilarity { categories: cats, matrix })
}

/// Mean within-category and between-category off-diagonal similarity.
pub fn within_between(concept: &ConceptSimilarity) -> (f64, f64) {
    let (mut w, mut nw, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (i, row) in concept.matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            if concept.categories[i] == concept.categories[j] {
                w += v;
                nw += 1;
            } else {
                b += v;
                nb += 1;
            }
        }
    }
    (w / nw.max(1) as f64, b / nb.max(1) as f64)
}
