//! Dataset schema, on-disk layout, zero-shot splits and the synthetic
//! generator with planted depth preferences.

mod io;
mod split;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset};
pub use split::{make_split, ConceptPartition, SplitMode, SplitPlan};
pub use synth::{generate_synthetic, SynthConfig};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EEG_FILE: &str = "eeg.bin";
pub const LABELS_FILE: &str = "labels.csv";

pub fn feature_file_name(layer_id: i64) -> String {
    format!("feat_layer_{layer_id}.bin")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One neural trial: a `C × Tt` signal, row-major, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EegTrial {
    pub signal: Vec<f32>,
    pub subject: usize,
    pub concept: usize,
    pub image: usize,
    pub category: usize,
    pub split: Split,
}

/// The `K` intermediate-layer feature vectors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureStack {
    pub image: usize,
    pub layers: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: i64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub eeg: String,
    pub labels: String,
    /// One file per layer, in layer order.
    pub features: Vec<String>,
}

/// Generator-side ground truth. Depth weights for subject `s` and concept
/// `p` are `softmax(global_logits + subject_logits[s] + category_logits[cat(p)])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub global_logits: Vec<f64>,
    pub subject_logits: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_logits: Option<Vec<Vec<f64>>>,
}

impl PlantedTruth {
    pub fn global_weights(&self) -> Vec<f64> {
        crate::linalg::softmax(&self.global_logits)
    }

    pub fn subject_weights(&self, subject: usize) -> Vec<f64> {
        let logits: Vec<f64> = self
            .global_logits
            .iter()
            .zip(&self.subject_logits[subject])
            .map(|(g, e)| g + e)
            .collect();
        crate::linalg::softmax(&logits)
    }

    /// Planted analogue of the routing deviation matrix.
    pub fn deviation(&self) -> Vec<Vec<f64>> {
        let global = self.global_weights();
        (0..self.subject_logits.len())
            .map(|s| {
                self.subject_weights(s)
                    .iter()
                    .zip(&global)
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(rename = "S")]
    pub subjects: usize,
    #[serde(rename = "P")]
    pub concepts: usize,
    pub images_per_concept: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "Tt")]
    pub time_samples: usize,
    pub layers: Vec<LayerSpec>,
    /// Concept id → coarse category id.
    pub categories: BTreeMap<usize, usize>,
    /// Optional second, finer category granularity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_categories: Option<BTreeMap<usize, usize>>,
    pub trials: usize,
    pub files: DatasetFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksums: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_truth: Option<PlantedTruth>,
}

impl DatasetManifest {
    pub fn num_images(&self) -> usize {
        self.concepts * self.images_per_concept
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn signal_len(&self) -> usize {
        self.channels * self.time_samples
    }

    pub fn num_categories(&self) -> usize {
        self.categories.values().copied().max().map_or(0, |m| m + 1)
    }

    pub fn concept_of_image(&self, image: usize) -> usize {
        image / self.images_per_concept
    }

    pub fn layer_ids(&self) -> Vec<i64> {
        self.layers.iter().map(|l| l.layer_id).collect()
    }
}

/// A loaded dataset. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trials: Vec<EegTrial>,
    /// Indexed by image id.
    pub features: Vec<VisualFeatureStack>,
}

impl Dataset {
    pub fn category_of(&self, concept: usize) -> usize {
        self.manifest.categories.get(&concept).copied().unwrap_or(0)
    }

    /// Distinct images referenced by the given trials, ascending.
    pub fn images_in(&self, trials: &[usize]) -> Vec<usize> {
        let mut imgs: Vec<usize> = trials.iter().map(|&t| self.trials[t].image).collect();
        imgs.sort_unstable();
        imgs.dedup();
        imgs
    }
}
