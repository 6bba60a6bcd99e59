//! Variant training for the ablation tables and per-layer analyses.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::eval::retrieval::{evaluate_retrieval, per_category_top1};
use crate::target::ProjectorKind;
use crate::trainer::{train, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One-hot fixed routing on layer index `k`.
    SingleLayer(usize),
    SingleBest,
    Uniform,
    Learned,
    OneStage,
    NoStageLr,
    NoFreeze,
    ProjectorDirect,
    ProjectorLinear,
    ProjectorMlp,
}

pub const VARIANT_NAMES: &[&str] = &[
    "single_layer(k)",
    "single_best",
    "uniform",
    "learned",
    "one_stage",
    "no_stage_lr",
    "no_freeze",
    "projector_direct",
    "projector_linear",
    "projector_mlp",
];

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::SingleLayer(k) => write!(f, "single_layer({k})"),
            Variant::SingleBest => f.write_str("single_best"),
            Variant::Uniform => f.write_str("uniform"),
            Variant::Learned => f.write_str("learned"),
            Variant::OneStage => f.write_str("one_stage"),
            Variant::NoStageLr => f.write_str("no_stage_lr"),
            Variant::NoFreeze => f.write_str("no_freeze"),
            Variant::ProjectorDirect => f.write_str("projector_direct"),
            Variant::ProjectorLinear => f.write_str("projector_linear"),
            Variant::ProjectorMlp => f.write_str("projector_mlp"),
        }
    }
}

impl Variant {
    /// Accepts the display names; `single_layer` also as `single_layer_k`
    /// or `single_layer:k`.
    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim();
        let unknown = || Error::UnknownVariant {
            name: name.to_string(),
            valid: VARIANT_NAMES.join(", "),
        };
        if let Some(rest) = name.strip_prefix("single_layer") {
            let k = rest
                .trim_start_matches(['(', '_', ':'])
                .trim_end_matches(')')
                .parse()
                .map_err(|_| unknown())?;
            return Ok(Variant::SingleLayer(k));
        }
        Ok(match name {
            "single_best" => Variant::SingleBest,
            "uniform" => Variant::Uniform,
            "learned" => Variant::Learned,
            "one_stage" => Variant::OneStage,
            "no_stage_lr" => Variant::NoStageLr,
            "no_freeze" => Variant::NoFreeze,
            "projector_direct" => Variant::ProjectorDirect,
            "projector_linear" => Variant::ProjectorLinear,
            "projector_mlp" => Variant::ProjectorMlp,
            _ => return Err(unknown()),
        })
    }

    /// File-system friendly name.
    pub fn slug(&self) -> String {
        match self {
            Variant::SingleLayer(k) => format!("single_layer_{k}"),
            v => v.to_string(),
        }
    }
}

/// The training configuration a variant runs with.
pub fn variant_config(base: &RunConfig, variant: Variant, num_layers: usize) -> Result<RunConfig> {
    let mut c = base.clone();
    match variant {
        Variant::SingleLayer(k) => {
            if k >= num_layers {
                return Err(Error::config("variant", format!("single_layer({k}) needs k < K = {num_layers}")));
            }
            let mut w = vec![0.0; num_layers];
            w[k] = 1.0;
            c.router.fixed_weights = Some(w);
        }
        Variant::Uniform => c.router.fixed_weights = Some(vec![1.0 / num_layers as f64; num_layers]),
        Variant::Learned => {}
        Variant::OneStage => {
            c.loss.t_c = c.train.epochs;
            c.train.freeze_shared_stage2 = false;
            c.train.stage2_lr_multiplier = 1.0;
        }
        Variant::NoStageLr => c.train.stage2_lr_multiplier = 1.0,
        Variant::NoFreeze => c.train.freeze_shared_stage2 = false,
        Variant::ProjectorDirect => c.model.projector = ProjectorKind::Direct,
        Variant::ProjectorLinear => c.model.projector = ProjectorKind::Linear,
        Variant::ProjectorMlp => c.model.projector = ProjectorKind::Mlp,
        Variant::SingleBest => {
            return Err(Error::config("variant", "single_best is derived from single_layer runs"));
        }
    }
    Ok(c)
}

/// One trained variant at one seed.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
    pub outcome: TrainOutcome,
    pub config: RunConfig,
}

/// Trains `variant` with `seed` and scores the best state on the test trials.
pub fn run_variant(dataset: &Dataset, plan: &SplitPlan, base: &RunConfig, variant: Variant, seed: u64) -> Result<VariantRun> {
    let mut config = variant_config(base, variant, dataset.manifest.num_layers())?;
    config.seed = seed;
    let outcome = train(dataset, plan.clone(), &config)?;
    let res = evaluate_retrieval(&outcome.best.model, dataset, &plan.test, &[1, 5])?;
    Ok(VariantRun {
        variant,
        seed,
        top1: res.top(1),
        top5: res.top(5),
        outcome,
        config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// For `single_best`, the chosen layer index.
    pub detail: Option<String>,
    pub seeds: Vec<u64>,
    pub top1: Vec<f64>,
    pub top5: Vec<f64>,
    pub top1_mean: f64,
    pub top1_sd: f64,
    pub top5_mean: f64,
    pub top5_sd: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn new(variant: String, detail: Option<String>, seeds: Vec<u64>, top1: Vec<f64>, top5: Vec<f64>) -> Self {
        let (top1_mean, top1_sd) = mean_sd(&top1);
        let (top5_mean, top5_sd) = mean_sd(&top5);
        AblationRow {
            variant,
            detail,
            seeds,
            top1,
            top5,
            top1_mean,
            top1_sd,
            top5_mean,
            top5_sd,
        }
    }
}

/// Picks the single layer with the best mean Top-1 across seeds (lowest
/// index on ties) and reports it as the `single_best` row.
pub fn single_best_row(per_layer: &BTreeMap<usize, AblationRow>) -> Result<AblationRow> {
    let (k, row) = per_layer
        .iter()
        .fold(None::<(usize, &AblationRow)>, |best, (&k, row)| match best {
            Some((_, b)) if b.top1_mean >= row.top1_mean => best,
            _ => Some((k, row)),
        })
        .ok_or_else(|| Error::Missing("single_best needs single_layer runs".into()))?;
    Ok(AblationRow {
        variant: Variant::SingleBest.to_string(),
        detail: Some(format!("layer {k}")),
        ..row.clone()
    })
}

/// Runs every requested variant over `seeds` on one dataset and split.
/// `on_run` sees every trained model (e.g. to save checkpoints).
pub fn run_ablation(
    dataset: &Dataset,
    plan: &SplitPlan,
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&VariantRun) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let k_layers = dataset.manifest.num_layers();
    let mut per_layer: BTreeMap<usize, AblationRow> = BTreeMap::new();
    let mut rows = Vec::new();
    let run_row = |variant: Variant, on_run: &mut dyn FnMut(&VariantRun) -> Result<()>| -> Result<AblationRow> {
        let mut top1 = Vec::new();
        let mut top5 = Vec::new();
        for &seed in seeds {
            let r = run_variant(dataset, plan, base, variant, seed)?;
            on_run(&r)?;
            top1.push(r.top1);
            top5.push(r.top5);
        }
        Ok(AblationRow::new(variant.to_string(), None, seeds.to_vec(), top1, top5))
    };
    for &v in variants {
        let row = match v {
            Variant::SingleBest => {
                for k in 0..k_layers {
                    if let Entry::Vacant(slot) = per_layer.entry(k) {
                        slot.insert(run_row(Variant::SingleLayer(k), &mut on_run)?);
                    }
                }
                single_best_row(&per_layer)?
            }
            Variant::SingleLayer(k) => {
                if k >= k_layers {
                    return Err(Error::config("variant", format!("single_layer({k}) needs k < K = {k_layers}")));
                }
                if let Entry::Vacant(slot) = per_layer.entry(k) {
                    slot.insert(run_row(v, &mut on_run)?);
                }
                per_layer[&k].clone()
            }
            _ => run_row(v, &mut on_run)?,
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Top-1 per category (rows) and layer (columns) from single-layer models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseTable {
    pub layer_ids: Vec<i64>,
    pub categories: Vec<usize>,
    /// `accuracy[category][layer]`, averaged over the supplied models.
    pub accuracy: Vec<Vec<f64>>,
}

impl LayerwiseTable {
    /// Best layer index per category (lowest index on ties).
    pub fn best_layer(&self) -> Vec<usize> {
        self.accuracy
            .iter()
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Builds the table from trained single-layer models: `models[k]` holds
/// the models (one per seed) whose routing is one-hot on layer `k`.
pub fn layerwise_from_models(
    models: &[Vec<crate::model::Model>],
    dataset: &Dataset,
    trials: &[usize],
    categories: &BTreeMap<usize, usize>,
) -> Result<LayerwiseTable> {
    let k_layers = dataset.manifest.num_layers();
    if models.len() != k_layers {
        return Err(Error::Missing(format!(
            "single-layer models for {} of {k_layers} layers",
            models.len()
        )));
    }
    let mut cats: Vec<usize> = trials.iter().map(|&t| categories[&dataset.trials[t].concept]).collect();
    cats.sort_unstable();
    cats.dedup();
    let mut accuracy = vec![vec![0.0; k_layers]; cats.len()];
    for (k, layer_models) in models.iter().enumerate() {
        if layer_models.is_empty() {
            return Err(Error::Missing(format!("no single-layer model for layer index {k}")));
        }
        for m in layer_models {
            let res = evaluate_retrieval(m, dataset, trials, &[1])?;
            let per = per_category_top1(&res, dataset, trials, categories);
            for (gi, g) in cats.iter().enumerate() {
                accuracy[gi][k] += per[g] / layer_models.len() as f64;
            }
        }
    }
    Ok(LayerwiseTable {
        layer_ids: dataset.manifest.layer_ids(),
        categories: cats,
        accuracy,
    })
}

/// Trains one single-layer model per layer and seed and tabulates Top-1 by
/// category.
pub fn layerwise_category_accuracy(
    dataset: &Dataset,
    plan: &SplitPlan,
    base: &RunConfig,
    seeds: &[u64],
    categories: &BTreeMap<usize, usize>,
) -> Result<LayerwiseTable> {
    let mut models = Vec::new();
    for k in 0..dataset.manifest.num_layers() {
        let mut per_seed = Vec::new();
        for &s in seeds {
            per_seed.push(run_variant(dataset, plan, base, Variant::SingleLayer(k), s)?.outcome.best.model);
        }
        models.push(per_seed);
    }
    layerwise_from_models(&models, dataset, &plan.test, categories)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names() {
        assert_eq!(Variant::parse("single_layer(3)").unwrap(), Variant::SingleLayer(3));
        assert_eq!(Variant::parse("single_layer_2").unwrap(), Variant::SingleLayer(2));
        assert_eq!(Variant::parse("no_freeze").unwrap(), Variant::NoFreeze);
        for v in [Variant::SingleLayer(4), Variant::OneStage, Variant::ProjectorMlp] {
            assert_eq!(Variant::parse(&v.to_string()).unwrap(), v);
        }
        let err = Variant::parse("bogus").unwrap_err().to_string();
        assert!(err.contains("single_best") && err.contains("projector_mlp"), "{err}");
    }

    #[test]
    fn variant_configs() {
        let base = RunConfig::default();
        let one = variant_config(&base, Variant::OneStage, 5).unwrap();
        assert_eq!(one.loss.t_c, one.train.epochs);
        assert!(!one.train.freeze_shared_stage2);
        let u = variant_config(&base, Variant::Uniform, 4).unwrap();
        assert_eq!(u.router.fixed_weights, Some(vec![0.25; 4]));
        assert!(variant_config(&base, Variant::SingleLayer(5), 5).is_err());
        assert_eq!(variant_config(&base, Variant::NoStageLr, 5).unwrap().train.stage2_lr_multiplier, 1.0);
    }

    #[test]
    fn mean_sd_values() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
