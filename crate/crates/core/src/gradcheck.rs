//! Central finite-difference check of `compute_gradients` on a tiny
//! random model, in `f64`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::VisualFeatureStack;
use crate::error::Result;
use crate::model::{
    batch_objective, compute_gradients, BatchSample, BlockGroup, Model, ModelConfig, ModelDims, ObjectiveSpec,
    RouterConfig,
};
use crate::objectives::MmdConfig;
use crate::rng::{self, Stream};
use crate::target::ProjectorKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub subjects: usize,
    pub layers: usize,
    pub feat_dim: usize,
    pub d_common: usize,
    pub signal_len: usize,
    pub eeg_hidden_dim: usize,
    pub batch: usize,
    pub projector: ProjectorKind,
    /// `Some(λ)` checks the mixed stage-one objective, `None` retrieval only.
    pub lambda: Option<f64>,
    pub freeze_shared: bool,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: adds 1 to the first analytic entry of this block.
    pub corrupt_block: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            subjects: 2,
            layers: 3,
            feat_dim: 3,
            d_common: 3,
            signal_len: 6,
            eeg_hidden_dim: 4,
            batch: 4,
            projector: ProjectorKind::Linear,
            lambda: Some(0.4),
            freeze_shared: false,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt_block: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub group: BlockGroup,
    pub max_rel_error: f64,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub objective: String,
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.status != CheckStatus::Fail)
    }
}

/// Relative error with a small absolute floor so entries that are zero
/// in both computations compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / scale
}

struct TinyProblem {
    model: Model,
    signals: Vec<Vec<f32>>,
    stacks: Vec<VisualFeatureStack>,
    subjects: Vec<usize>,
    keep: Vec<bool>,
    masks: Vec<Vec<bool>>,
}

impl TinyProblem {
    fn batch(&self) -> Vec<BatchSample<'_>> {
        (0..self.signals.len())
            .map(|n| BatchSample {
                signal: &self.signals[n],
                subject: self.subjects[n],
                features: &self.stacks[n],
                keep_subject: self.keep[n],
                layer_mask: self.masks[n].clone(),
            })
            .collect()
    }
}

fn tiny_problem(cfg: &GradcheckConfig) -> Result<TinyProblem> {
    let dims = ModelDims {
        signal_len: cfg.signal_len,
        layer_dims: vec![cfg.feat_dim; cfg.layers],
        subjects: cfg.subjects,
    };
    let model_cfg = ModelConfig {
        d_common: cfg.d_common,
        d_shared: 0,
        eeg_hidden_dim: cfg.eeg_hidden_dim,
        projector: cfg.projector,
    };
    let mut model = Model::new(dims, &model_cfg, &RouterConfig::default(), 0.5, cfg.seed)?;
    model.shared.frozen = cfg.freeze_shared;
    let mut rng = rng::stream(cfg.seed, Stream::Data, &[]);
    let mut normal = move || rng.sample::<f64, _>(StandardNormal);
    // Generic, non-symmetric parameter values.
    for b in model.blocks_mut() {
        for v in b.data.iter_mut() {
            *v += 0.3 * normal();
        }
        // Biases start at zero; give them values too.
        if b.name.ends_with("bias") || b.name == "router.b" {
            for v in b.data.iter_mut() {
                *v = 0.5 * normal();
            }
        }
    }
    model.head.log_tau = -0.3;

    let m = cfg.batch;
    let signals = (0..m)
        .map(|_| (0..cfg.signal_len).map(|_| normal() as f32).collect())
        .collect();
    let stacks = (0..m)
        .map(|i| VisualFeatureStack {
            image: i,
            layers: (0..cfg.layers)
                .map(|_| (0..cfg.feat_dim).map(|_| normal() as f32).collect())
                .collect(),
        })
        .collect();
    let subjects = (0..m).map(|n| n % cfg.subjects).collect();
    // Exercise both dropout branches: sample 1 drops the subject bias,
    // sample 2 drops its first layer.
    let keep = (0..m).map(|n| n != 1).collect();
    let masks = (0..m)
        .map(|n| (0..cfg.layers).map(|k| !(n == 2 && k == 0)).collect())
        .collect();
    Ok(TinyProblem {
        model,
        signals,
        stacks,
        subjects,
        keep,
        masks,
    })
}

/// Compares analytic gradients with central differences for every block.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let problem = tiny_problem(cfg)?;
    let batch = problem.batch();
    let mut objective = ObjectiveSpec {
        lambda: cfg.lambda,
        mmd: MmdConfig::default(),
        bandwidth: None,
    };
    let out = compute_gradients(&problem.model, &batch, &objective)?;
    objective.bandwidth = Some(out.bandwidth);
    let mut grads = out.grads;
    if let Some(target) = &cfg.corrupt_block {
        if let Some(b) = grads.blocks_mut().into_iter().find(|b| &b.name == target) {
            if let Some(v) = b.data.first_mut() {
                *v += 1.0;
            }
        }
    }
    let analytic = grads.block_values();

    let mut probe = problem.model.clone();
    let meta: Vec<(String, BlockGroup, bool, usize)> = probe
        .blocks_mut()
        .into_iter()
        .map(|b| (b.name, b.group, b.trainable, b.data.len()))
        .collect();
    let mut blocks = Vec::with_capacity(meta.len());
    for (bi, (name, group, trainable, len)) in meta.into_iter().enumerate() {
        if !trainable {
            blocks.push(BlockCheck {
                name,
                group,
                max_rel_error: 0.0,
                status: CheckStatus::Skipped,
            });
            continue;
        }
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = probe.blocks_mut()[bi].data[i];
            probe.blocks_mut()[bi].data[i] = orig + cfg.step;
            let plus = batch_objective(&probe, &batch, &objective)?;
            probe.blocks_mut()[bi].data[i] = orig - cfg.step;
            let minus = batch_objective(&probe, &batch, &objective)?;
            probe.blocks_mut()[bi].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic[bi].1[i], numeric));
        }
        blocks.push(BlockCheck {
            name,
            group,
            max_rel_error: worst,
            status: if worst < cfg.tolerance {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            },
        });
    }
    Ok(GradcheckReport {
        objective: match cfg.lambda {
            Some(l) => format!("stage1(lambda={l})"),
            None => "stage2(retrieval)".to_string(),
        },
        blocks,
    })
}
