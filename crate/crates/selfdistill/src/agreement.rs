//! Multi-teacher agreement: scoring one trajectory under K auxiliary
//! contexts and turning the cross-view spread into reliability weights.
//!
//! Auxiliary views are reliability probes only — they never serve as
//! distillation targets. The spread-to-weight mapping is `w = exp(-gamma *
//! delta)`, which is bounded in (0, 1], smooth, and recovers uniform
//! weighting at gamma = 0.

use serde::{Deserialize, Serialize};

use crate::corpus::{ContextSet, ContextStrategy};
use crate::params::PolicyParameters;
use crate::policy::{score_tokens, Trajectory};
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Token,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadStatistic {
    Variance,
    Range,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgreementConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "defaults::granularity")]
    pub granularity: Granularity,
    #[serde(default = "defaults::statistic")]
    pub statistic: SpreadStatistic,
    /// Agreement strength: larger values filter disagreement more
    /// aggressively.
    #[serde(default = "defaults::agree_gamma")]
    pub agree_gamma: f64,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::strategy")]
    pub strategy: ContextStrategy,
}

mod defaults {
    use super::*;
    pub fn granularity() -> Granularity {
        Granularity::Token
    }
    pub fn statistic() -> SpreadStatistic {
        SpreadStatistic::Variance
    }
    pub fn agree_gamma() -> f64 {
        0.01
    }
    pub fn k() -> usize {
        3
    }
    pub fn strategy() -> ContextStrategy {
        ContextStrategy::Retrieval
    }
}

impl Default for AgreementConfig {
    fn default() -> Self {
        AgreementConfig {
            enabled: false,
            granularity: defaults::granularity(),
            statistic: defaults::statistic(),
            agree_gamma: defaults::agree_gamma(),
            k: defaults::k(),
            strategy: defaults::strategy(),
        }
    }
}

impl AgreementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.k < 2 {
            return Err(Error::Config(
                "agreement.k must be >= 2 when agreement is enabled".into(),
            ));
        }
        if self.agree_gamma < 0.0 {
            return Err(Error::Config("agreement.agree_gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-token log-probabilities of one trajectory under K auxiliary teacher
/// views: a K x T matrix sharing the trajectory's mask.
#[derive(Debug, Clone)]
pub struct TeacherViewMatrix {
    pub logprobs: Vec<f64>,
    pub k: usize,
    pub t: usize,
    pub mask: Vec<u8>,
    pub view_ids: Vec<usize>,
}

impl TeacherViewMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.logprobs[k * self.t..(k + 1) * self.t]
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.logprobs.len() != self.k * self.t || self.mask.len() != self.t {
            return Err(Error::Dimension("view matrix shape mismatch".into()));
        }
        if self.logprobs.iter().any(|&lp| !lp.is_finite() || lp > 0.0) {
            return Err(Error::Numeric("view log-probs must be finite and <= 0".into()));
        }
        Ok(())
    }
}

/// Scores the trajectory under every auxiliary context with one teacher
/// parameter set; row k corresponds to `contexts.auxiliaries[k]`.
pub fn score_views<T: Scalar>(
    teacher: &PolicyParameters<T>,
    contexts: &ContextSet,
    trajectory: &Trajectory,
) -> Result<TeacherViewMatrix> {
    let k = contexts.auxiliaries.len();
    if k == 0 {
        return Err(Error::Config("no auxiliary contexts to score".into()));
    }
    let t = trajectory.completion.len();
    let mut logprobs = Vec::with_capacity(k * t);
    for ctx in &contexts.auxiliaries {
        let row = score_tokens(teacher, ctx, trajectory)?;
        logprobs.extend(row.iter().map(|lp| lp.as_f64()));
    }
    Ok(TeacherViewMatrix {
        logprobs,
        k,
        t,
        mask: trajectory.mask.clone(),
        view_ids: (0..k).collect(),
    })
}

fn spread(values: &[f64], statistic: SpreadStatistic) -> f64 {
    match statistic {
        SpreadStatistic::Variance => {
            // population variance, well-defined from K = 2
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
        }
        SpreadStatistic::Range => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in values {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            hi - lo
        }
    }
}

/// Per-position spread of the view log-probs; masked-out positions are zero.
pub fn token_disagreement(
    views: &TeacherViewMatrix,
    statistic: SpreadStatistic,
) -> Result<Vec<f64>> {
    if views.k < 2 {
        return Err(Error::Config("token disagreement requires K >= 2 views".into()));
    }
    let mut out = vec![0.0; views.t];
    let mut column = vec![0.0; views.k];
    for t in 0..views.t {
        if views.mask[t] == 0 {
            continue;
        }
        for k in 0..views.k {
            column[k] = views.logprobs[k * views.t + t];
        }
        out[t] = spread(&column, statistic);
    }
    Ok(out)
}

/// Spread of the per-view masked-mean log-probs.
pub fn sequence_disagreement(
    views: &TeacherViewMatrix,
    statistic: SpreadStatistic,
) -> Result<f64> {
    if views.k < 2 {
        return Err(Error::Config("sequence disagreement requires K >= 2 views".into()));
    }
    let masked: f64 = views.mask.iter().map(|&m| m as f64).sum();
    if masked < 1.0 {
        return Err(Error::Dimension("mask selects no positions".into()));
    }
    let mut means = Vec::with_capacity(views.k);
    for k in 0..views.k {
        let row = views.row(k);
        let sum: f64 = row
            .iter()
            .zip(&views.mask)
            .filter(|(_, &m)| m == 1)
            .map(|(&lp, _)| lp)
            .sum();
        means.push(sum / masked);
    }
    Ok(spread(&means, statistic))
}

/// Disagreement at either granularity, ready for weight mapping.
#[derive(Debug, Clone)]
pub enum Disagreement {
    PerToken(Vec<f64>),
    PerSequence(f64),
}

/// `w = exp(-agree_gamma * delta)`; sequence granularity broadcasts one
/// weight over all T positions. Weights stay in (0, 1].
pub fn weights_from_disagreement(
    delta: &Disagreement,
    agree_gamma: f64,
    t: usize,
) -> Result<Vec<f64>> {
    if agree_gamma < 0.0 {
        return Err(Error::Config("agree_gamma must be >= 0".into()));
    }
    let map = |d: f64| (-agree_gamma * d).exp();
    match delta {
        Disagreement::PerToken(ds) => {
            if ds.len() != t {
                return Err(Error::Dimension("delta length differs from T".into()));
            }
            if ds.iter().any(|&d| d < 0.0) {
                return Err(Error::Numeric("negative disagreement".into()));
            }
            Ok(ds.iter().map(|&d| map(d)).collect())
        }
        Disagreement::PerSequence(d) => {
            if *d < 0.0 {
                return Err(Error::Numeric("negative disagreement".into()));
            }
            Ok(vec![map(*d); t])
        }
    }
}
