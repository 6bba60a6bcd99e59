//! Symmetric contrastive retrieval loss, multi-kernel MMD and the
//! two-stage objective schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sq_dist};

/// Learnable contrastive temperature, stored as `log τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveHead {
    pub log_tau: f64,
}

impl ContrastiveHead {
    pub fn with_tau(tau: f64) -> Self {
        ContrastiveHead { log_tau: tau.ln() }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

/// Loss value with gradients with respect to both embedding sets.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub d_eeg: Vec<Vec<f64>>,
    pub d_image: Vec<Vec<f64>>,
    pub d_log_tau: f64,
}

fn check_pair(z_eeg: &[Vec<f64>], z_image: &[Vec<f64>]) -> Result<usize> {
    let m = z_eeg.len();
    if z_image.len() != m {
        return Err(Error::dim("paired embeddings", m, z_image.len()));
    }
    if m < 2 {
        return Err(Error::dim("batch size (minimum)", 2, m));
    }
    let d = z_eeg[0].len();
    if let Some(r) = z_eeg.iter().chain(z_image).find(|r| r.len() != d) {
        return Err(Error::dim("embedding width", d, r.len()));
    }
    Ok(m)
}

fn unit_rows(z: &[Vec<f64>], side: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut units = Vec::with_capacity(z.len());
    let mut norms = Vec::with_capacity(z.len());
    for (i, row) in z.iter().enumerate() {
        let n = norm(row);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numeric(format!(
                "{side} embedding row {i} has norm {n}; cosine similarity is undefined"
            )));
        }
        units.push(row.iter().map(|v| v / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

/// Pairwise cosine similarity matrix `S[i][j] = cos(a_i, b_j)`.
pub fn cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (ua, _) = unit_rows(a, "query")?;
    let (ub, _) = unit_rows(b, "candidate")?;
    Ok(ua
        .iter()
        .map(|x| ub.iter().map(|y| dot(x, y)).collect())
        .collect())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over cosine similarities scaled by `1/τ`:
/// `−1/(2M) Σ_i [log softmax_j(S_ij)|_{j=i} + log softmax_j(S_ji)|_{j=i}]`.
pub fn retrieval_loss(head: &ContrastiveHead, z_eeg: &[Vec<f64>], z_image: &[Vec<f64>]) -> Result<f64> {
    Ok(retrieval_loss_grad(head, z_eeg, z_image)?.value)
}

pub fn retrieval_loss_grad(head: &ContrastiveHead, z_eeg: &[Vec<f64>], z_image: &[Vec<f64>]) -> Result<LossGrad> {
    let m = check_pair(z_eeg, z_image)?;
    let (ue, ne) = unit_rows(z_eeg, "EEG")?;
    let (ui, ni) = unit_rows(z_image, "image")?;
    let inv_tau = (-head.log_tau).exp();
    let cos: Vec<Vec<f64>> = ue
        .iter()
        .map(|e| ui.iter().map(|i| dot(e, i)).collect())
        .collect();
    let logits: Vec<Vec<f64>> = cos
        .iter()
        .map(|r| r.iter().map(|c| c * inv_tau).collect())
        .collect();

    let row_lse: Vec<f64> = logits.iter().map(|r| log_sum_exp(r.iter().copied())).collect();
    let col_lse: Vec<f64> = (0..m)
        .map(|j| log_sum_exp(logits.iter().map(move |r| r[j])))
        .collect();
    let mut total = 0.0;
    for i in 0..m {
        total += (row_lse[i] - logits[i][i]) + (col_lse[i] - logits[i][i]);
    }
    let scale = 1.0 / (2.0 * m as f64);
    let value = scale * total;

    // ∂L/∂S_ij = (P_ij + Q_ij − 2δ_ij)/(2M) with P row-softmax, Q column-softmax.
    let mut d_cos = vec![vec![0.0; m]; m];
    let mut d_log_tau = 0.0;
    for i in 0..m {
        for j in 0..m {
            let p = (logits[i][j] - row_lse[i]).exp();
            let q = (logits[i][j] - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            let d_logit = scale * (p + q - delta);
            d_cos[i][j] = d_logit * inv_tau;
            d_log_tau -= d_logit * logits[i][j];
        }
    }

    let d = z_eeg[0].len();
    let mut d_ue = vec![vec![0.0; d]; m];
    let mut d_ui = vec![vec![0.0; d]; m];
    for i in 0..m {
        for j in 0..m {
            let g = d_cos[i][j];
            for t in 0..d {
                d_ue[i][t] += g * ui[j][t];
                d_ui[j][t] += g * ue[i][t];
            }
        }
    }
    let through_norm = |units: &[Vec<f64>], norms: &[f64], grads: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        grads
            .into_iter()
            .zip(units.iter().zip(norms))
            .map(|(g, (u, &n))| {
                let proj = dot(&g, u);
                g.iter().zip(u).map(|(gi, ui)| (gi - proj * ui) / n).collect()
            })
            .collect()
    };
    Ok(LossGrad {
        value,
        d_eeg: through_norm(&ue, &ne, d_ue),
        d_image: through_norm(&ui, &ni, d_ui),
        d_log_tau,
    })
}

/// Multi-kernel RBF configuration. Bandwidths are `multiplier · base`,
/// where `base` is the median pairwise squared distance of the pooled batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub multipliers: Vec<f64>,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return Err(Error::config(
                "loss.mmd_multipliers",
                "need at least one positive, finite multiplier",
            ));
        }
        Ok(())
    }
}

/// Median of pairwise squared distances over the pooled `2M` points.
/// Falls back to 1 when every point coincides.
pub fn median_bandwidth(z_eeg: &[Vec<f64>], z_image: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = z_eeg.iter().chain(z_image).collect();
    let mut d: Vec<f64> = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

/// Mean of RBF kernels `exp(−‖x−y‖² / γ_m)` and its derivative with
/// respect to `‖x−y‖²`.
fn kernel(sq: f64, gammas: &[f64]) -> (f64, f64) {
    let inv_n = 1.0 / gammas.len() as f64;
    gammas.iter().fold((0.0, 0.0), |(k, dk), &g| {
        let e = (-sq / g).exp();
        (k + inv_n * e, dk - inv_n * e / g)
    })
}

pub fn mmd_loss(cfg: &MmdConfig, z_eeg: &[Vec<f64>], z_image: &[Vec<f64>]) -> Result<f64> {
    let base = median_bandwidth(z_eeg, z_image);
    Ok(mmd_loss_grad(cfg, z_eeg, z_image, base)?.value)
}

/// MMD exactly as the estimator is written: within-set sums skip `i = j`
/// and divide by `M(M−1)`; the cross term keeps every pair and divides by
/// `M²/2`. It can be negative. `base` is treated as a constant.
pub fn mmd_loss_grad(cfg: &MmdConfig, z_eeg: &[Vec<f64>], z_image: &[Vec<f64>], base: f64) -> Result<LossGrad> {
    cfg.validate()?;
    let m = check_pair(z_eeg, z_image)?;
    let d = z_eeg[0].len();
    let gammas: Vec<f64> = cfg.multipliers.iter().map(|b| b * base).collect();
    let within = 1.0 / (m as f64 * (m as f64 - 1.0));
    let cross = 2.0 / (m as f64 * m as f64);
    let mut value = 0.0;
    let mut d_eeg = vec![vec![0.0; d]; m];
    let mut d_image = vec![vec![0.0; d]; m];

    // ∂k/∂x = 2 (x − y) · ∂k/∂‖x−y‖²
    for (z, grads) in [(z_eeg, &mut d_eeg), (z_image, &mut d_image)] {
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let (k, dk) = kernel(sq_dist(&z[i], &z[j]), &gammas);
                value += within * k;
                // (i, j) and (j, i) both depend on z_i; the kernel is symmetric.
                let c = 4.0 * within * dk;
                for t in 0..d {
                    grads[i][t] += c * (z[i][t] - z[j][t]);
                }
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            let (k, dk) = kernel(sq_dist(&z_eeg[i], &z_image[j]), &gammas);
            value -= cross * k;
            let c = -2.0 * cross * dk;
            for t in 0..d {
                let diff = z_eeg[i][t] - z_image[j][t];
                d_eeg[i][t] += c * diff;
                d_image[j][t] -= c * diff;
            }
        }
    }
    Ok(LossGrad {
        value,
        d_eeg,
        d_image,
        d_log_tau: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaShape {
    Linear,
    Cosine,
}

/// Two-stage schedule: epochs `1..=t_c` mix MMD and retrieval with a
/// decaying weight, later epochs use retrieval only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub epochs: usize,
    pub t_c: usize,
    pub lambda0: f64,
    pub stage2_lr_multiplier: f64,
    pub shape: LambdaShape,
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t_c == 0 || self.t_c > self.epochs {
            return Err(Error::config("loss.t_c", format!("need 0 < t_c <= epochs ({})", self.epochs)));
        }
        if !(0.0..=1.0).contains(&self.lambda0) {
            return Err(Error::config("loss.lambda0", "must lie in [0, 1]"));
        }
        if !(self.stage2_lr_multiplier > 0.0 && self.stage2_lr_multiplier <= 1.0) {
            return Err(Error::config("train.stage2_lr_multiplier", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn in_stage_one(&self, epoch: usize) -> bool {
        epoch <= self.t_c
    }
}

/// `λ_l`, 1-based epoch.
pub fn lambda_at(schedule: &StageSchedule, epoch: usize) -> f64 {
    if epoch == 0 || epoch > schedule.t_c {
        return 0.0;
    }
    let frac = (epoch - 1) as f64 / schedule.t_c as f64;
    match schedule.shape {
        LambdaShape::Linear => schedule.lambda0 * (1.0 - frac).max(0.0),
        LambdaShape::Cosine => schedule.lambda0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    }
}

pub fn stage_objective(schedule: &StageSchedule, epoch: usize, loss_ret: f64, loss_mmd: f64) -> f64 {
    if !schedule.in_stage_one(epoch) {
        return loss_ret;
    }
    let lambda = lambda_at(schedule, epoch);
    lambda * loss_mmd + (1.0 - lambda) * loss_ret
}
