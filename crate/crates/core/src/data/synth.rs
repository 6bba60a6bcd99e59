use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    feature_file_name, ConceptPartition, Dataset, DatasetFiles, DatasetManifest, EegTrial,
    LayerSpec, PlantedTruth, Split, VisualFeatureStack, EEG_FILE, LABELS_FILE, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::linalg::{softmax, Mat};
use crate::rng::{self, Rng, Stream};

/// Parameters of the synthetic generator (`data.*` config keys).
///
/// Layer features are `h_k = ρ_k·A_k·c_p + (1 − ρ_k)·U_k·v_i + σ·ν_{i,k}`
/// where `c_p` is the concept latent, `v_i` the image instance latent and
/// `ν_{i,k}` a layer-private component. EEG trials are
/// `B_s · Σ_k β_{s,k} h_k + η·noise`, reshaped to `C × Tt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub subjects: usize,
    pub concepts: usize,
    pub images_per_concept: usize,
    pub channels: usize,
    pub time_samples: usize,
    pub layer_ids: Vec<i64>,
    pub feat_dim: usize,
    pub latent_dim: usize,
    pub categories: usize,
    /// Fine categories per coarse category; 0 disables the fine granularity.
    pub fine_per_category: usize,
    /// Share of a concept latent explained by its category mean, in [0, 1].
    pub category_strength: f64,
    /// Per-layer concept-signal ratio ρ_k, in [0, 1].
    pub concept_ratio: Vec<f64>,
    pub layer_noise: f64,
    pub eeg_noise: f64,
    /// Relative size of the subject-specific part of each mixing matrix.
    pub subject_spread: f64,
    pub global_logits: Vec<f64>,
    /// Explicit per-subject deviation logits; drawn from
    /// `N(0, subject_deviation_scale²)`, centred across subjects, when absent.
    pub subject_logits: Option<Vec<Vec<f64>>>,
    pub subject_deviation_scale: f64,
    /// Optional per-category depth logits `[categories × K]`.
    pub category_logits: Option<Vec<Vec<f64>>>,
    pub reps_train: usize,
    pub reps_test: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 5,
            concepts: 60,
            images_per_concept: 4,
            channels: 8,
            time_samples: 32,
            layer_ids: vec![20, 24, 28, 32, 36],
            feat_dim: 16,
            latent_dim: 8,
            categories: 5,
            fine_per_category: 0,
            category_strength: 0.3,
            concept_ratio: vec![0.2, 0.35, 0.5, 0.65, 0.8],
            layer_noise: 0.5,
            eeg_noise: 0.1,
            subject_spread: 0.5,
            global_logits: vec![-1.0, 0.0, 0.5, 2.0, 0.5],
            subject_logits: None,
            subject_deviation_scale: 1.0,
            category_logits: None,
            reps_train: 2,
            reps_test: 1,
            test_fraction: 0.2,
            val_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn num_layers(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.subjects", self.subjects),
            ("data.concepts", self.concepts),
            ("data.images_per_concept", self.images_per_concept),
            ("data.channels", self.channels),
            ("data.time_samples", self.time_samples),
            ("data.layer_ids", self.layer_ids.len()),
            ("data.feat_dim", self.feat_dim),
            ("data.latent_dim", self.latent_dim),
            ("data.categories", self.categories),
            ("data.reps_train", self.reps_train),
            ("data.reps_test", self.reps_test),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let k = self.num_layers();
        if self.global_logits.len() != k {
            return Err(Error::config(
                "data.global_logits",
                format!("length {} does not match K = {k}", self.global_logits.len()),
            ));
        }
        if self.concept_ratio.len() != k {
            return Err(Error::config(
                "data.concept_ratio",
                format!("length {} does not match K = {k}", self.concept_ratio.len()),
            ));
        }
        if self.concept_ratio.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("data.concept_ratio", "entries must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.category_strength) {
            return Err(Error::config("data.category_strength", "must lie in [0, 1]"));
        }
        for (key, v) in [
            ("data.layer_noise", self.layer_noise),
            ("data.eeg_noise", self.eeg_noise),
            ("data.subject_spread", self.subject_spread),
            ("data.subject_deviation_scale", self.subject_deviation_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if let Some(rows) = &self.subject_logits {
            if rows.len() != self.subjects {
                return Err(Error::config(
                    "data.subject_logits",
                    format!("expected {} rows, got {}", self.subjects, rows.len()),
                ));
            }
            if let Some(r) = rows.iter().find(|r| r.len() != k) {
                return Err(Error::config(
                    "data.subject_logits",
                    format!("row length {} does not match K = {k}", r.len()),
                ));
            }
        }
        if let Some(rows) = &self.category_logits {
            if rows.len() != self.categories {
                return Err(Error::config(
                    "data.category_logits",
                    format!("expected {} rows, got {}", self.categories, rows.len()),
                ));
            }
            if let Some(r) = rows.iter().find(|r| r.len() != k) {
                return Err(Error::config(
                    "data.category_logits",
                    format!("row length {} does not match K = {k}", r.len()),
                ));
            }
        }
        let finite = self
            .global_logits
            .iter()
            .chain(self.subject_logits.iter().flatten().flatten())
            .chain(self.category_logits.iter().flatten().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("data.global_logits", "logits must be finite"));
        }
        // Validates fractions and concept counts.
        ConceptPartition::random(self.concepts, self.test_fraction, self.val_fraction, 0)?;
        Ok(())
    }
}

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gaussian_mat(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat { rows, cols, data }
}

/// Generates a synthetic dataset. Output is a pure function of
/// `(config, seed)`; all arrays are rounded to `f32` at generation time so
/// a save/load round trip is bitwise exact.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let k_layers = config.num_layers();
    let d = config.latent_dim;
    let df = config.feat_dim;
    let n_img = config.concepts * config.images_per_concept;
    let sig_len = config.channels * config.time_samples;
    let mut rng = rng::stream(seed, Stream::Data, &[]);

    let category_of = |p: usize| p % config.categories;
    let fine_of = |p: usize| p % (config.categories * config.fine_per_category);

    let cat_means: Vec<Vec<f64>> = (0..config.categories)
        .map(|_| gaussian_vec(&mut rng, d))
        .collect();
    let ks = config.category_strength.sqrt();
    let kn = (1.0 - config.category_strength).sqrt();
    let concept_latents: Vec<Vec<f64>> = (0..config.concepts)
        .map(|p| {
            let eps = gaussian_vec(&mut rng, d);
            cat_means[category_of(p)]
                .iter()
                .zip(eps)
                .map(|(m, e)| ks * m + kn * e)
                .collect()
        })
        .collect();

    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let concept_maps: Vec<Mat> = (0..k_layers)
        .map(|_| gaussian_mat(&mut rng, df, d, inv_sqrt_d))
        .collect();
    let instance_maps: Vec<Mat> = (0..k_layers)
        .map(|_| gaussian_mat(&mut rng, df, d, inv_sqrt_d))
        .collect();

    let mut features = Vec::with_capacity(n_img);
    for image in 0..n_img {
        let concept = image / config.images_per_concept;
        let instance = gaussian_vec(&mut rng, d);
        let mut layers = Vec::with_capacity(k_layers);
        for k in 0..k_layers {
            let rho = config.concept_ratio[k];
            let a = concept_maps[k].matvec(&concept_latents[concept]);
            let u = instance_maps[k].matvec(&instance);
            let priv_noise = gaussian_vec(&mut rng, df);
            let h: Vec<f32> = (0..df)
                .map(|j| (rho * a[j] + (1.0 - rho) * u[j] + config.layer_noise * priv_noise[j]) as f32)
                .collect();
            layers.push(h);
        }
        features.push(VisualFeatureStack { image, layers });
    }

    let subject_logits = match &config.subject_logits {
        Some(rows) => rows.clone(),
        None => {
            let mut rows: Vec<Vec<f64>> = (0..config.subjects)
                .map(|_| {
                    gaussian_vec(&mut rng, k_layers)
                        .into_iter()
                        .map(|v| v * config.subject_deviation_scale)
                        .collect()
                })
                .collect();
            // Zero mean over subjects, so the global logits stay the population centre.
            if config.subjects > 1 {
                for k in 0..k_layers {
                    let mean = rows.iter().map(|r| r[k]).sum::<f64>() / config.subjects as f64;
                    rows.iter_mut().for_each(|r| r[k] -= mean);
                }
            }
            rows
        }
    };
    let truth = PlantedTruth {
        global_logits: config.global_logits.clone(),
        subject_logits,
        category_logits: config.category_logits.clone(),
    };

    let spread_norm = 1.0 / (1.0 + config.subject_spread * config.subject_spread).sqrt();
    let inv_sqrt_df = 1.0 / (df as f64).sqrt();
    let common = gaussian_mat(&mut rng, sig_len, df, inv_sqrt_df);
    let mixing: Vec<Mat> = (0..config.subjects)
        .map(|_| {
            let own = gaussian_mat(&mut rng, sig_len, df, inv_sqrt_df);
            let data = common
                .data
                .iter()
                .zip(&own.data)
                .map(|(c, o)| spread_norm * (c + config.subject_spread * o))
                .collect();
            Mat { rows: sig_len, cols: df, data }
        })
        .collect();

    let groups: Vec<usize> = (0..config.concepts).map(|p| p % config.categories).collect();
    let partition = ConceptPartition::stratified(
        &groups,
        config.test_fraction,
        config.val_fraction,
        seed,
    )?;

    let mut trials = Vec::new();
    for (s, mix_s) in mixing.iter().enumerate() {
        for stack in &features {
            let concept = stack.image / config.images_per_concept;
            let split = partition.split_of(concept);
            let mut logits: Vec<f64> = truth
                .global_logits
                .iter()
                .zip(&truth.subject_logits[s])
                .map(|(g, e)| g + e)
                .collect();
            if let Some(cat) = &truth.category_logits {
                for (l, c) in logits.iter_mut().zip(&cat[category_of(concept)]) {
                    *l += c;
                }
            }
            let beta = softmax(&logits);
            let mut mixed = vec![0.0f64; df];
            for (b, h) in beta.iter().zip(&stack.layers) {
                for (m, &v) in mixed.iter_mut().zip(h) {
                    *m += b * v as f64;
                }
            }
            let clean = mix_s.matvec(&mixed);
            let reps = if split == Split::Test {
                config.reps_test
            } else {
                config.reps_train
            };
            for _ in 0..reps {
                let signal = clean
                    .iter()
                    .map(|&c| (c + config.eeg_noise * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                trials.push(EegTrial {
                    signal,
                    subject: s,
                    concept,
                    image: stack.image,
                    category: category_of(concept),
                    split,
                });
            }
        }
    }

    let categories: BTreeMap<usize, usize> =
        (0..config.concepts).map(|p| (p, category_of(p))).collect();
    let fine_categories = (config.fine_per_category > 0)
        .then(|| (0..config.concepts).map(|p| (p, fine_of(p))).collect());
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        subjects: config.subjects,
        concepts: config.concepts,
        images_per_concept: config.images_per_concept,
        channels: config.channels,
        time_samples: config.time_samples,
        layers: config
            .layer_ids
            .iter()
            .map(|&layer_id| LayerSpec { layer_id, dim: df })
            .collect(),
        categories,
        fine_categories,
        trials: trials.len(),
        files: DatasetFiles {
            eeg: EEG_FILE.to_string(),
            labels: LABELS_FILE.to_string(),
            features: config.layer_ids.iter().map(|&id| feature_file_name(id)).collect(),
        },
        checksums: None,
        seed: Some(seed),
        planted_truth: Some(truth),
    };
    Ok(Dataset {
        manifest,
        trials,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            subjects: 2,
            concepts: 10,
            images_per_concept: 2,
            channels: 4,
            time_samples: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rejects_zero_layers_and_mismatched_logits() {
        let cfg = SynthConfig {
            layer_ids: vec![],
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config { key, .. }) if key == "data.layer_ids"));
        let cfg = SynthConfig {
            global_logits: vec![0.0; 4],
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config { key, .. }) if key == "data.global_logits"));
        let cfg = SynthConfig {
            channels: 0,
            ..small()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn zero_deviation_one_hot_logits_give_one_hot_weights() {
        let cfg = SynthConfig {
            eeg_noise: 0.0,
            subject_logits: Some(vec![vec![0.0; 5]; 2]),
            global_logits: vec![-1e9, -1e9, 0.0, -1e9, -1e9],
            ..small()
        };
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let truth = ds.manifest.planted_truth.unwrap();
        for s in 0..2 {
            assert_eq!(truth.subject_weights(s), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(), 11).unwrap();
        let b = generate_synthetic(&small(), 11).unwrap();
        let c = generate_synthetic(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.trials[0].signal, c.trials[0].signal);
    }

    #[test]
    fn trial_counts_and_labels() {
        let cfg = small();
        let ds = generate_synthetic(&cfg, 1).unwrap();
        let n_test_concepts = 2;
        let expected = cfg.subjects
            * cfg.images_per_concept
            * (n_test_concepts * cfg.reps_test + (cfg.concepts - n_test_concepts) * cfg.reps_train);
        assert_eq!(ds.trials.len(), expected);
        assert_eq!(ds.manifest.trials, expected);
        for t in &ds.trials {
            assert_eq!(t.signal.len(), 32);
            assert_eq!(t.concept, t.image / 2);
            assert_eq!(t.category, t.concept % 5);
        }
    }
}
