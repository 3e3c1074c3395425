//! Binary classification losses weighted by per-object uncertainty.
//!
//! The uncertainty-aware loss is mean binary cross-entropy plus (or minus)
//! `beta * mean(d * H(f))`, where `d` is the object's score and `H` the
//! Bernoulli entropy of the predicted probability. The sign is selectable:
//! [`SignMode::Literal`] adds the entropy term, [`SignMode::MaxEntropy`]
//! subtracts it. All logs are natural. Probabilities are clamped to
//! `[PROB_CLAMP, 1 - PROB_CLAMP]`; gradients are zero where the clamp is
//! active.

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignMode {
    /// `BCE + beta * d * H`.
    #[default]
    Literal,
    /// `BCE - beta * d * H`.
    MaxEntropy,
}

impl SignMode {
    fn sign(self) -> f64 {
        match self {
            SignMode::Literal => 1.0,
            SignMode::MaxEntropy => -1.0,
        }
    }
}

/// Which loss [`loss_value`] and [`loss_gradient`] evaluate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Entropy weighted by each object's score.
    UaEntropy,
    /// Entropy with every score fixed to 1.
    ConstantEntropy,
    Focal {
        gamma: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    probs: Vec<f64>,
    targets: Vec<bool>,
    scores: Vec<f64>,
    beta: f64,
    sign_mode: SignMode,
}

impl LossBatch {
    pub fn new(
        probs: Vec<f64>,
        targets: Vec<bool>,
        scores: Vec<f64>,
        beta: f64,
        sign_mode: SignMode,
    ) -> Result<Self> {
        if probs.len() != targets.len() || probs.len() != scores.len() {
            return Err(Error::InvalidParameter(format!(
                "batch lengths differ: {} probs, {} targets, {} scores",
                probs.len(),
                targets.len(),
                scores.len()
            )));
        }
        if probs.is_empty() {
            return Err(Error::Empty("loss batch has no items"));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "probability {p} is not finite"
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidParameter(format!("score {s} outside [0, 1]")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta {beta} must be finite and >= 0"
            )));
        }
        Ok(LossBatch {
            probs,
            targets,
            scores,
            beta,
            sign_mode,
        })
    }

    /// A batch with every score set to 1.
    pub fn constant(
        probs: Vec<f64>,
        targets: Vec<bool>,
        beta: f64,
        sign_mode: SignMode,
    ) -> Result<Self> {
        let scores = vec![1.0; probs.len()];
        Self::new(probs, targets, scores, beta, sign_mode)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sign_mode(&self) -> SignMode {
        self.sign_mode
    }

    pub fn with_probs(&self, probs: Vec<f64>) -> Result<Self> {
        Self::new(
            probs,
            self.targets.clone(),
            self.scores.clone(),
            self.beta,
            self.sign_mode,
        )
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(
            self.probs.clone(),
            self.targets.clone(),
            self.scores.clone(),
            beta,
            self.sign_mode,
        )
    }

    pub fn with_sign_mode(&self, sign_mode: SignMode) -> Self {
        LossBatch {
            sign_mode,
            ..self.clone()
        }
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-p ln p - (1 - p) ln(1 - p)` at the clamped probability.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let p = clamp_prob(p);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

fn bce(p: f64, target: bool) -> f64 {
    let p = clamp_prob(p);
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy.
pub fn mean_bce(probs: &[f64], targets: &[bool]) -> Result<f64> {
    check_pair(probs, targets)?;
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| bce(p, t))
        .sum::<f64>()
        / probs.len() as f64)
}

fn check_pair(probs: &[f64], targets: &[bool]) -> Result<()> {
    if probs.len() != targets.len() {
        return Err(Error::InvalidParameter(format!(
            "batch lengths differ: {} probs, {} targets",
            probs.len(),
            targets.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Empty("loss batch has no items"));
    }
    Ok(())
}

/// `mean(d * H)` over the batch.
pub fn mean_weighted_entropy(batch: &LossBatch) -> f64 {
    batch
        .probs
        .iter()
        .zip(&batch.scores)
        .map(|(&p, &d)| d * bernoulli_entropy(p))
        .sum::<f64>()
        / batch.len() as f64
}

pub fn ua_entropy_loss(batch: &LossBatch) -> f64 {
    let n = batch.len() as f64;
    let sign = batch.sign_mode.sign();
    batch
        .probs
        .iter()
        .zip(&batch.targets)
        .zip(&batch.scores)
        .map(|((&p, &t), &d)| bce(p, t) + sign * batch.beta * d * bernoulli_entropy(p))
        .sum::<f64>()
        / n
}

/// The uncertainty-aware loss with every score fixed to 1.
pub fn constant_entropy_loss(probs: &[f64], targets: &[bool], beta: f64) -> Result<f64> {
    check_pair(probs, targets)?;
    let batch = LossBatch::constant(probs.to_vec(), targets.to_vec(), beta, SignMode::Literal)?;
    Ok(ua_entropy_loss(&batch))
}

fn focal_item(p: f64, target: bool, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    let pt = if target { p } else { 1.0 - p };
    -(1.0 - pt).powf(gamma) * pt.ln()
}

/// Mean of `-(1 - p_t)^gamma ln p_t`.
pub fn focal_loss(probs: &[f64], targets: &[bool], gamma: f64) -> Result<f64> {
    check_pair(probs, targets)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "gamma {gamma} must be finite and >= 0"
        )));
    }
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| focal_item(p, t, gamma))
        .sum::<f64>()
        / probs.len() as f64)
}

/// Loss value of `objective` on the batch. Focal ignores scores, beta and sign.
pub fn loss_value(batch: &LossBatch, objective: Objective) -> Result<f64> {
    match objective {
        Objective::UaEntropy => Ok(ua_entropy_loss(batch)),
        Objective::ConstantEntropy => {
            let b = LossBatch::constant(
                batch.probs.clone(),
                batch.targets.clone(),
                batch.beta,
                batch.sign_mode,
            )?;
            Ok(ua_entropy_loss(&b))
        }
        Objective::Focal { gamma } => focal_loss(&batch.probs, &batch.targets, gamma),
    }
}

/// Per-item derivative of [`loss_value`] with respect to each probability.
pub fn loss_gradient(batch: &LossBatch, objective: Objective) -> Result<Vec<f64>> {
    if let Objective::Focal { gamma } = objective {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma {gamma} must be finite and >= 0"
            )));
        }
    }
    let n = batch.len() as f64;
    let sign = batch.sign_mode.sign();
    let grads = batch
        .probs
        .iter()
        .zip(&batch.targets)
        .zip(&batch.scores)
        .map(|((&raw, &t), &d)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw) {
                return 0.0;
            }
            let p = raw;
            let g = match objective {
                Objective::UaEntropy | Objective::ConstantEntropy => {
                    let d = if objective == Objective::ConstantEntropy {
                        1.0
                    } else {
                        d
                    };
                    let dbce = if t { -1.0 / p } else { 1.0 / (1.0 - p) };
                    let dh = ((1.0 - p) / p).ln();
                    dbce + sign * batch.beta * d * dh
                }
                Objective::Focal { gamma } => {
                    let (pt, dpt) = if t { (p, 1.0) } else { (1.0 - p, -1.0) };
                    let q = 1.0 - pt;
                    let growth = if gamma == 0.0 {
                        0.0
                    } else {
                        gamma * q.powf(gamma - 1.0) * pt.ln()
                    };
                    (growth - q.powf(gamma) / pt) * dpt
                }
            };
            g / n
        })
        .collect();
    Ok(grads)
}
