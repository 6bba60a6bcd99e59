//! Learned routing against the generator's planted preferences.

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::linalg::Mat;
use crate::model::Model;
use crate::target::{route_infer, routing_deviation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub global_weights: Vec<f64>,
    /// Row `s`: subject routing minus global routing.
    pub deviation: Vec<Vec<f64>>,
    pub planted_global_weights: Option<Vec<f64>>,
    pub learned_argmax: usize,
    pub planted_argmax: Option<usize>,
    pub argmax_match: Option<bool>,
    /// Spearman correlation per subject; `None` when undefined.
    pub subject_spearman: Vec<Option<f64>>,
    pub mean_spearman: Option<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation; `None` if either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

pub fn routing_report(model: &Model, manifest: &DatasetManifest) -> RoutingReport {
    let global = route_infer(&model.router);
    let deviation = rows(&routing_deviation(&model.router));
    let learned_argmax = argmax(&global);
    let planted = manifest.planted_truth.as_ref();
    let planted_global = planted.map(|p| p.global_weights());
    let planted_argmax = planted_global.as_deref().map(argmax);
    let subject_spearman: Vec<Option<f64>> = match planted {
        Some(p) => {
            let planted_dev = p.deviation();
            deviation
                .iter()
                .zip(&planted_dev)
                .map(|(learned, truth)| spearman(learned, truth))
                .collect()
        }
        None => vec![None; deviation.len()],
    };
    let defined: Vec<f64> = subject_spearman.iter().flatten().copied().collect();
    let mean_spearman = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    RoutingReport {
        global_weights: global,
        deviation,
        planted_global_weights: planted_global,
        learned_argmax,
        planted_argmax,
        argmax_match: planted_argmax.map(|p| p == learned_argmax),
        subject_spearman,
        mean_spearman,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![1.5, 0.0, 1.5]);
    }
}
