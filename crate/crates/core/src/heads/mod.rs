//! Liveness score regressor, domain discriminator behind gradient
//! reversal, and the training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Mlp, ParamStore};
use crate::synth::LabelGrid;
use crate::tensor::{Real, Reduction, Tape, Tensor, Var};

fn default_k() -> usize {
    10
}
fn default_lambda() -> f64 {
    1.0
}
fn default_w_adv() -> f64 {
    1.0
}
fn default_lr_scale() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrlSchedule {
    #[default]
    Constant,
    /// `λ·(2/(1+exp(−10t)) − 1)` over training progress `t ∈ [0, 1]`.
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegReduction {
    #[default]
    Mean,
    Sum,
}

impl From<RegReduction> for Reduction {
    fn from(r: RegReduction) -> Self {
        match r {
            RegReduction::Mean => Reduction::Mean,
            RegReduction::Sum => Reduction::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    /// Grid resolution: labels live on `{0, 1/K, …, 1}`.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Hidden width of both heads; `embed_dim / 2` when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda_grl: f64,
    #[serde(default)]
    pub grl_schedule: GrlSchedule,
    /// Weight of the adversarial term in the final loss.
    #[serde(default = "default_w_adv")]
    pub w_adv: f64,
    #[serde(default)]
    pub reg_reduction: RegReduction,
    /// Learning-rate multiplier of both heads relative to the backbone.
    #[serde(default = "default_lr_scale")]
    pub lr_scale: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            k: default_k(),
            hidden: None,
            lambda_grl: default_lambda(),
            grl_schedule: GrlSchedule::Constant,
            w_adv: default_w_adv(),
            reg_reduction: RegReduction::Mean,
            lr_scale: default_lr_scale(),
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        LabelGrid::new(self.k)?;
        if !self.lambda_grl.is_finite() || self.lambda_grl < 0.0 {
            return Err(Error::Config("lambda_grl must be finite and non-negative".into()));
        }
        if !self.w_adv.is_finite() || self.w_adv < 0.0 {
            return Err(Error::Config("w_adv must be finite and non-negative".into()));
        }
        if !self.lr_scale.is_finite() || self.lr_scale <= 0.0 {
            return Err(Error::Config("heads.lr_scale must be positive".into()));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("heads.hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<LabelGrid> {
        LabelGrid::new(self.k)
    }

    pub fn hidden_for(&self, embed_dim: usize) -> usize {
        self.hidden.unwrap_or((embed_dim / 2).max(1))
    }

    /// GRL coefficient at training progress `t ∈ [0, 1]`.
    pub fn lambda_at(&self, t: f64) -> f64 {
        match self.grl_schedule {
            GrlSchedule::Constant => self.lambda_grl,
            GrlSchedule::Ramp => self.lambda_grl * (2.0 / (1.0 + (-10.0 * t.clamp(0.0, 1.0)).exp()) - 1.0),
        }
    }
}

/// Feature → `K + 1` grid logits.
#[derive(Debug, Clone, Copy)]
pub struct RegressorParams {
    pub mlp: Mlp,
    pub grid: LabelGrid,
}

/// Feature → `N` source-domain logits.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorParams {
    pub mlp: Mlp,
    pub n_domains: usize,
}

impl RegressorParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        dim: usize,
        hidden: usize,
        grid: LabelGrid,
        rng: &mut R,
    ) -> Self {
        RegressorParams {
            mlp: Mlp::new(store, "regressor", (dim, hidden, grid.len()), rng),
            grid,
        }
    }
}

impl DiscriminatorParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        dim: usize,
        hidden: usize,
        n_domains: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_domains < 2 {
            return Err(Error::Protocol(format!(
                "the domain discriminator needs at least 2 source domains, got {n_domains}"
            )));
        }
        Ok(DiscriminatorParams {
            mlp: Mlp::new(store, "discriminator", (dim, hidden, n_domains), rng),
            n_domains,
        })
    }
}

/// Grid probabilities `p = softmax(R(f))` `[B × (K+1)]` and expected
/// scores `Σ_k m_k p_k` `[B × 1]`.
pub fn liveness_scores<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    reg: &RegressorParams,
    features: Var,
) -> Result<(Var, Var)> {
    let logits = reg.mlp.forward(tape, bound, features)?;
    scores_from_logits(tape, logits, reg.grid)
}

/// Softmax over grid logits followed by the expectation over grid values.
pub fn scores_from_logits<T: Real>(tape: &mut Tape<T>, logits: Var, grid: LabelGrid) -> Result<(Var, Var)> {
    let width = tape.shape(logits).last().copied().unwrap_or(0);
    if width != grid.len() {
        return Err(Error::Tensor(crate::error::TensorError::Shape {
            op: "liveness_score",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![grid.len()],
        }));
    }
    let probs = tape.softmax_rows(logits)?;
    let m = Tensor::from_fn(&[grid.len(), 1], |i| T::lit(grid.value(i)));
    let m = tape.constant(m);
    let scores = tape.matmul(probs, m)?;
    Ok((probs, scores))
}

/// Probabilities and score for a single feature vector, outside training.
pub fn liveness_score<T: Real>(
    store: &ParamStore<T>,
    reg: &RegressorParams,
    feature: &Tensor<T>,
) -> Result<(Vec<f64>, f64)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let f = tape.constant(feature.clone().reshaped(&[1, feature.numel()])?);
    let (p, s) = liveness_scores(&mut tape, &bound, reg, f)?;
    let probs = tape.value(p).data().iter().map(|v| v.as_f64()).collect();
    Ok((probs, tape.value(s).item().as_f64()))
}

/// `‖Y_c − Ŷ_c‖²` averaged (or summed) over the batch.
pub fn regression_loss<T: Real>(tape: &mut Tape<T>, scores: Var, labels: &[f64], reduction: Reduction) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Data("regression loss over an empty batch".into()));
    }
    let target = tape.constant(Tensor::new(
        vec![labels.len(), 1],
        labels.iter().map(|&v| T::lit(v)).collect(),
    )?);
    Ok(tape.mse(scores, target, reduction)?)
}

/// Domain cross-entropy of `D(GRL(f))`: the discriminator minimizes it
/// while the features upstream receive the reversed gradient.
pub fn adversarial_loss<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    disc: &DiscriminatorParams,
    features: Var,
    domains: &[usize],
    lambda_grl: f64,
) -> Result<Var> {
    if let Some(&bad) = domains.iter().find(|&&d| d >= disc.n_domains) {
        return Err(Error::Data(format!(
            "domain index {bad} out of range for {} source domains",
            disc.n_domains
        )));
    }
    if domains.is_empty() {
        return Err(Error::Data("adversarial loss over an empty batch".into()));
    }
    let reversed = tape.grad_reverse(features, lambda_grl)?;
    let logits = disc.mlp.forward(tape, bound, reversed)?;
    Ok(tape.cross_entropy_logits(logits, domains, Reduction::Mean)?)
}

/// `L_reg + w_adv · L_adv`.
pub fn final_loss<T: Real>(tape: &mut Tape<T>, l_reg: Var, l_adv: Var, w_adv: f64) -> Result<Var> {
    let weighted = if w_adv == 1.0 {
        l_adv
    } else {
        tape.scale(l_adv, T::lit(w_adv))?
    };
    Ok(tape.add(l_reg, weighted)?)
}
