//! Loss algebra: token divergences (forward KL, reverse KL, weighted JSD),
//! divergence clipping, masked reliability-weighted reduction, token-level
//! contrastive hinge, feature matching, and the assembled total — plus an
//! extended-precision brute-force oracle used only for verification.
//!
//! Probability-vector signatures are the semantic contract; internally every
//! divergence runs on log-space inputs through the log-sum-exp-stable path.
//! `0 * log 0` is zero everywhere. Zero-mass mismatches under the pure KL
//! kinds surface as `+inf`, a numeric signal rather than an error, unless a
//! clip threshold caps them.

use serde::{Deserialize, Serialize};

use crate::agreement::AgreementConfig;
pub use crate::autodiff::DivergenceKind;
use crate::autodiff::log_add_exp;
use crate::policy::FeatureTrace;
use crate::scalar::Scalar;
use crate::{Error, Result};

/// Every knob of the distillation objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "defaults::divergence")]
    pub divergence: DivergenceKind,
    /// Teacher weight of the weighted JSD, strictly inside (0, 1).
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Clip threshold; absent means unclipped.
    #[serde(default)]
    pub kappa: Option<f64>,
    /// Contrastive margin in nats.
    #[serde(default = "defaults::margin_gamma")]
    pub margin_gamma: f64,
    #[serde(default = "defaults::lambda_aux")]
    pub lambda_aux: f64,
    #[serde(default = "defaults::lambda_feat")]
    pub lambda_feat: f64,
    #[serde(default)]
    pub use_ema: bool,
    /// EMA coefficient: new_teacher = beta * teacher + (1 - beta) * student.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default)]
    pub agreement: AgreementConfig,
    #[serde(default)]
    pub contrast_enabled: bool,
    #[serde(default)]
    pub feat_enabled: bool,
}

mod defaults {
    use super::DivergenceKind;
    pub fn divergence() -> DivergenceKind {
        DivergenceKind::WeightedJsd
    }
    pub fn alpha() -> f64 {
        0.5
    }
    pub fn margin_gamma() -> f64 {
        1.0
    }
    pub fn lambda_aux() -> f64 {
        0.02
    }
    pub fn lambda_feat() -> f64 {
        0.0005
    }
    pub fn beta() -> f64 {
        0.9995
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            divergence: defaults::divergence(),
            alpha: defaults::alpha(),
            kappa: None,
            margin_gamma: defaults::margin_gamma(),
            lambda_aux: defaults::lambda_aux(),
            lambda_feat: defaults::lambda_feat(),
            use_ema: false,
            beta: defaults::beta(),
            agreement: AgreementConfig::default(),
            contrast_enabled: false,
            feat_enabled: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.divergence == DivergenceKind::WeightedJsd
            && !(self.alpha > 0.0 && self.alpha < 1.0)
        {
            return Err(Error::Config(format!(
                "distill.alpha {} must lie strictly inside (0, 1) for weighted_jsd",
                self.alpha
            )));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0) {
                return Err(Error::Config(format!("distill.kappa {k} must be > 0")));
            }
        }
        if self.margin_gamma < 0.0 {
            return Err(Error::Config("distill.margin_gamma must be >= 0".into()));
        }
        if self.lambda_aux < 0.0 || self.lambda_feat < 0.0 {
            return Err(Error::Config("distill.lambda_* must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("distill.beta {} outside [0, 1]", self.beta)));
        }
        self.agreement.validate()
    }
}

/// Per-trajectory loss components; `total = distill + lambda_aux *
/// contrastive + lambda_feat * feature`, with disabled components exactly
/// zero in `total`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TokenLossBreakdown {
    pub per_token_divergence: Vec<f64>,
    pub distill: f64,
    pub contrastive: f64,
    pub feature: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// Divergences
// ---------------------------------------------------------------------------

fn validate_distribution<T: Scalar>(p: &[T], label: &str) -> Result<()> {
    let mut sum = 0.0f64;
    for &x in p {
        let xf = x.as_f64();
        if xf < 0.0 || !xf.is_finite() {
            return Err(Error::Distribution(format!(
                "{label} entry {xf} is negative or non-finite"
            )));
        }
        sum += xf;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Distribution(format!("{label} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Divergence over normalized log-distributions; no validation.
pub fn divergence_from_logs<T: Scalar>(
    student_logp: &[T],
    teacher_logp: &[T],
    kind: DivergenceKind,
    alpha: f64,
) -> T {
    let a = T::from_f64(alpha);
    match kind {
        DivergenceKind::ForwardKl => {
            let mut acc = T::zero();
            for (&ls, &lt) in student_logp.iter().zip(teacher_logp) {
                let t = lt.exp();
                if t > T::zero() {
                    acc += t * (lt - ls);
                }
            }
            acc
        }
        DivergenceKind::ReverseKl => {
            let mut acc = T::zero();
            for (&ls, &lt) in student_logp.iter().zip(teacher_logp) {
                let s = ls.exp();
                if s > T::zero() {
                    acc += s * (ls - lt);
                }
            }
            acc
        }
        DivergenceKind::WeightedJsd => {
            let la = a.ln();
            let l1a = (T::one() - a).ln();
            let mut acc = T::zero();
            for (&ls, &lt) in student_logp.iter().zip(teacher_logp) {
                let lm = log_add_exp(l1a + ls, la + lt);
                let t = lt.exp();
                let s = ls.exp();
                if t > T::zero() {
                    acc += a * t * (lt - lm);
                }
                if s > T::zero() {
                    acc += (T::one() - a) * s * (ls - lm);
                }
            }
            if acc < T::zero() {
                T::zero()
            } else {
                acc
            }
        }
    }
}

/// Token-level divergence between two probability vectors, in nats.
///
/// `weighted_jsd` is `alpha * KL(teacher || M) + (1 - alpha) * KL(student ||
/// M)` with `M = (1 - alpha) * student + alpha * teacher`.
pub fn token_divergence<T: Scalar>(
    student_dist: &[T],
    teacher_dist: &[T],
    kind: DivergenceKind,
    alpha: f64,
) -> Result<T> {
    if student_dist.len() != teacher_dist.len() {
        return Err(Error::Dimension("distribution lengths differ".into()));
    }
    validate_distribution(student_dist, "student")?;
    validate_distribution(teacher_dist, "teacher")?;
    if kind == DivergenceKind::WeightedJsd && !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let ls: Vec<T> = student_dist.iter().map(|&p| p.ln()).collect();
    let lt: Vec<T> = teacher_dist.iter().map(|&p| p.ln()).collect();
    Ok(divergence_from_logs(&ls, &lt, kind, alpha))
}

/// `min(d, kappa)` when a threshold is present; identity otherwise.
pub fn clip_divergence(d: f64, kappa: Option<f64>) -> f64 {
    match kappa {
        Some(k) => d.min(k),
        None => d,
    }
}

/// Reliability-weighted masked mean: `sum(m w d) / sum(m w)`. With unit
/// weights this reduces to averaging over valid completion tokens.
pub fn reduce_distill_loss(clipped: &[f64], mask: &[u8], weights: &[f64]) -> Result<f64> {
    if clipped.len() != mask.len() || clipped.len() != weights.len() {
        return Err(Error::Dimension("reduction input lengths differ".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&d, &m), &w) in clipped.iter().zip(mask).zip(weights) {
        if m == 1 {
            num += w * d;
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::DegenerateWeight(format!("total masked weight {den}")));
    }
    Ok(num / den)
}

/// Margin hinge over per-token distances to the positive- and
/// negative-conditioned teacher scores:
/// `sum_t m_t max(0, margin + |l_t - l_t^+| - |l_t - l_t^-|)`.
pub fn contrastive_loss(
    student_lp: &[f64],
    pos_lp: &[f64],
    neg_lp: &[f64],
    mask: &[u8],
    margin: f64,
) -> Result<f64> {
    let n = student_lp.len();
    if pos_lp.len() != n || neg_lp.len() != n || mask.len() != n {
        return Err(Error::Dimension("contrastive input lengths differ".into()));
    }
    if margin < 0.0 {
        return Err(Error::Config(format!("margin {margin} below zero")));
    }
    let mut acc = 0.0;
    for t in 0..n {
        if mask[t] == 1 {
            let d_pos = (student_lp[t] - pos_lp[t]).abs();
            let d_neg = (student_lp[t] - neg_lp[t]).abs();
            acc += (margin + d_pos - d_neg).max(0.0);
        }
    }
    Ok(acc)
}

/// `sum_t m_t ||f_t - f_t^*||^2`, summed (not averaged) over masked
/// positions; the feature coefficient absorbs scale.
pub fn feature_matching_loss<T: Scalar>(
    student_feat: &FeatureTrace<T>,
    teacher_feat: &FeatureTrace<T>,
    mask: &[u8],
) -> Result<f64> {
    if student_feat.rows != teacher_feat.rows
        || student_feat.dim != teacher_feat.dim
        || mask.len() != student_feat.rows
    {
        return Err(Error::Dimension("feature trace shapes differ".into()));
    }
    let d = student_feat.dim;
    let mut acc = 0.0f64;
    for t in 0..student_feat.rows {
        if mask[t] == 1 {
            let mut row = 0.0f64;
            for j in 0..d {
                let diff = student_feat.features[t * d + j].as_f64()
                    - teacher_feat.features[t * d + j].as_f64();
                row += diff * diff;
            }
            acc += row;
        }
    }
    Ok(acc)
}

/// Assembles the total objective; disabled components contribute exact
/// zeros and the full breakdown is retained for logging.
pub fn total_loss(
    per_token_divergence: Vec<f64>,
    distill: f64,
    contrastive: f64,
    feature: f64,
    config: &DistillConfig,
) -> TokenLossBreakdown {
    let contrastive = if config.contrast_enabled { contrastive } else { 0.0 };
    let feature = if config.feat_enabled { feature } else { 0.0 };
    let total = distill + config.lambda_aux * contrastive + config.lambda_feat * feature;
    TokenLossBreakdown { per_token_divergence, distill, contrastive, feature, total }
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

/// Neumaier compensated summation.
fn compensated_sum(terms: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &t in terms {
        let u = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - u) + t;
        } else {
            comp += (t - u) + sum;
        }
        sum = u;
    }
    sum + comp
}

/// Exact reference divergence for small vocabularies, computed directly
/// from probability ratios with compensated summation. Verification only.
pub fn oracle_divergence(
    student_dist: &[f64],
    teacher_dist: &[f64],
    kind: DivergenceKind,
    alpha: f64,
) -> Result<f64> {
    if student_dist.len() > 16 {
        return Err(Error::Config("oracle_divergence requires V <= 16".into()));
    }
    if student_dist.len() != teacher_dist.len() {
        return Err(Error::Dimension("distribution lengths differ".into()));
    }
    validate_distribution(student_dist, "student")?;
    validate_distribution(teacher_dist, "teacher")?;
    let mut terms = Vec::with_capacity(student_dist.len() * 2);
    match kind {
        DivergenceKind::ForwardKl => {
            for (&s, &t) in student_dist.iter().zip(teacher_dist) {
                if t > 0.0 {
                    terms.push(t * (t / s).ln());
                }
            }
        }
        DivergenceKind::ReverseKl => {
            for (&s, &t) in student_dist.iter().zip(teacher_dist) {
                if s > 0.0 {
                    terms.push(s * (s / t).ln());
                }
            }
        }
        DivergenceKind::WeightedJsd => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
            }
            for (&s, &t) in student_dist.iter().zip(teacher_dist) {
                let m = (1.0 - alpha) * s + alpha * t;
                if t > 0.0 {
                    terms.push(alpha * t * (t / m).ln());
                }
                if s > 0.0 {
                    terms.push((1.0 - alpha) * s * (s / m).ln());
                }
            }
        }
    }
    let v = compensated_sum(&terms);
    Ok(if kind == DivergenceKind::WeightedJsd && v < 0.0 { 0.0 } else { v })
}

/// Entropy of the `(alpha, 1 - alpha)` weight vector: the exact upper bound
/// of the weighted JSD.
pub fn jsd_upper_bound(alpha: f64) -> f64 {
    -alpha * alpha.ln() - (1.0 - alpha) * (1.0 - alpha).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const KINDS: [DivergenceKind; 3] = [
        DivergenceKind::ForwardKl,
        DivergenceKind::ReverseKl,
        DivergenceKind::WeightedJsd,
    ];

    fn random_simplex(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
        let mut p: Vec<f64> = (0..v).map(|_| -(rng.random::<f64>().max(1e-12)).ln()).collect();
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= sum);
        p
    }

    #[test]
    fn identical_distributions_have_zero_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = random_simplex(&mut rng, 8);
            for kind in KINDS {
                let d: f64 = token_divergence(&p, &p, kind, 0.5).unwrap();
                assert!(d.abs() < 1e-12, "{kind:?}: {d}");
            }
        }
    }

    #[test]
    fn weighted_jsd_hand_example() {
        // teacher (1, 0), student (0.5, 0.5), alpha 0.5:
        // M = (0.75, 0.25); 0.5*ln(4/3) + 0.5*(0.5*ln(2/3) + 0.5*ln 2)
        let expect =
            0.5 * (4.0f64 / 3.0).ln() + 0.5 * (0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2.0f64.ln());
        let got: f64 =
            token_divergence(&[0.5, 0.5], &[1.0, 0.0], DivergenceKind::WeightedJsd, 0.5).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((expect - 0.2158).abs() < 1e-4);
    }

    #[test]
    fn forward_kl_hand_example() {
        // teacher (0.5, 0.5) against student (0.25, 0.75)
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got: f64 =
            token_divergence(&[0.25, 0.75], &[0.5, 0.5], DivergenceKind::ForwardKl, 0.5).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((expect - 0.1438).abs() < 1e-4);
        let oracle =
            oracle_divergence(&[0.25, 0.75], &[0.5, 0.5], DivergenceKind::ForwardKl, 0.5).unwrap();
        assert!((oracle - expect).abs() < 1e-15);
    }

    #[test]
    fn jsd_is_bounded_by_weight_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &alpha in &[0.1, 0.5, 0.9] {
            let bound = jsd_upper_bound(alpha);
            for _ in 0..500 {
                let s = random_simplex(&mut rng, 6);
                let t = random_simplex(&mut rng, 6);
                let d: f64 =
                    token_divergence(&s, &t, DivergenceKind::WeightedJsd, alpha).unwrap();
                assert!(d <= bound + 1e-12);
                assert!(d >= 0.0);
            }
        }
        // a disjoint pair attains the bound at alpha = 0.5
        let d: f64 =
            token_divergence(&[1.0, 0.0], &[0.0, 1.0], DivergenceKind::WeightedJsd, 0.5).unwrap();
        assert!((d - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn jsd_symmetric_at_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = random_simplex(&mut rng, 5);
            let t = random_simplex(&mut rng, 5);
            let a: f64 = token_divergence(&s, &t, DivergenceKind::WeightedJsd, 0.5).unwrap();
            let b: f64 = token_divergence(&t, &s, DivergenceKind::WeightedJsd, 0.5).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_kl_zero_mass_mismatch_is_infinite() {
        let d: f64 =
            token_divergence(&[0.0, 1.0], &[0.5, 0.5], DivergenceKind::ForwardKl, 0.5).unwrap();
        assert!(d.is_infinite() && d > 0.0);
        let d: f64 =
            token_divergence(&[0.5, 0.5], &[0.0, 1.0], DivergenceKind::ReverseKl, 0.5).unwrap();
        assert!(d.is_infinite() && d > 0.0);
        // weighted JSD stays finite on the same pair
        let d: f64 =
            token_divergence(&[0.0, 1.0], &[0.5, 0.5], DivergenceKind::WeightedJsd, 0.5).unwrap();
        assert!(d.is_finite());
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        assert!(matches!(
            token_divergence(&[0.7f64, 0.4], &[0.5, 0.5], DivergenceKind::ForwardKl, 0.5),
            Err(Error::Distribution(_))
        ));
        assert!(matches!(
            token_divergence(&[-0.1f64, 1.1], &[0.5, 0.5], DivergenceKind::ForwardKl, 0.5),
            Err(Error::Distribution(_))
        ));
    }

    #[test]
    fn oracle_and_fast_path_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = random_simplex(&mut rng, 8);
            let t = random_simplex(&mut rng, 8);
            for kind in KINDS {
                for &alpha in &[0.1, 0.5, 0.9] {
                    let fast: f64 = token_divergence(&s, &t, kind, alpha).unwrap();
                    let oracle = oracle_divergence(&s, &t, kind, alpha).unwrap();
                    assert!(
                        (fast - oracle).abs() < 1e-10,
                        "{kind:?} alpha {alpha}: {fast} vs {oracle}"
                    );
                }
            }
        }
    }

    #[test]
    fn taped_divergence_matches_pure_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in KINDS {
            let s = random_simplex(&mut rng, 6);
            let t = random_simplex(&mut rng, 6);
            let ls: Vec<f64> = s.iter().map(|p| p.ln()).collect();
            let lt: Vec<f64> = t.iter().map(|p| p.ln()).collect();
            let mut tape = crate::autodiff::Tape::<f64>::new();
            let node = tape.leaf_const(1, 6, &ls);
            let d = tape.divergence_rows(node, &lt, kind, 0.3);
            let want: f64 = token_divergence(&s, &t, kind, 0.3).unwrap();
            assert!((tape.value(d)[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_behaviour() {
        assert_eq!(clip_divergence(0.9, Some(0.5)), 0.5);
        assert_eq!(clip_divergence(0.3, Some(0.5)), 0.3);
        for d in [0.0, 0.123, 7.5, f64::INFINITY] {
            assert_eq!(clip_divergence(d, None), d);
        }
    }

    #[test]
    fn reduction_examples() {
        assert_eq!(reduce_distill_loss(&[1.0, 3.0], &[1, 1], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(reduce_distill_loss(&[1.0, 3.0], &[1, 0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(reduce_distill_loss(&[1.0, 3.0], &[1, 1], &[3.0, 1.0]).unwrap(), 1.5);
        assert!(matches!(
            reduce_distill_loss(&[1.0], &[0], &[1.0]),
            Err(Error::DegenerateWeight(_))
        ));
    }

    #[test]
    fn weight_scaling_leaves_reduction_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..10usize);
            let d: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0).collect();
            let m: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
            if !m.contains(&1) {
                continue;
            }
            let base = reduce_distill_loss(&d, &m, &w).unwrap();
            let c = rng.random::<f64>() * 10.0 + 0.1;
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let got = reduce_distill_loss(&d, &m, &scaled).unwrap();
            assert!((base - got).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_monotone_in_kappa_and_recovers_unclipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.random_range(1..8usize);
            let d: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0).collect();
            let m = vec![1u8; n];
            let w = vec![1.0; n];
            let unclipped = reduce_distill_loss(&d, &m, &w).unwrap();
            let mut last = 0.0;
            for kappa in [0.1, 0.5, 1.0, 2.5] {
                let clipped: Vec<f64> =
                    d.iter().map(|&x| clip_divergence(x, Some(kappa))).collect();
                let v = reduce_distill_loss(&clipped, &m, &w).unwrap();
                assert!(v >= last - 1e-12);
                last = v;
            }
            let dmax = d.iter().cloned().fold(0.0, f64::max);
            let clipped: Vec<f64> =
                d.iter().map(|&x| clip_divergence(x, Some(dmax + 0.001))).collect();
            let v = reduce_distill_loss(&clipped, &m, &w).unwrap();
            assert!((v - unclipped).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_examples_and_hinge_floor() {
        // equal positive and negative scores leave the raw margin per token
        let lp = [-1.0, -2.0, -0.5];
        let same = [-1.5, -1.0, -0.25];
        let got = contrastive_loss(&lp, &same, &same, &[1, 1, 1], 0.7).unwrap();
        assert!((got - 2.1).abs() < 1e-12);
        // hinge floors at zero when the student is margin-closer to positive
        let pos = [-1.0, -2.0, -0.5];
        let neg = [-9.0, -9.0, -9.0];
        let got = contrastive_loss(&lp, &pos, &neg, &[1, 1, 1], 0.5).unwrap();
        assert_eq!(got, 0.0);
        // single-position hand computation
        let got = contrastive_loss(&[-1.0], &[-1.5], &[-3.0], &[1], 0.5).unwrap();
        assert_eq!(got, 0.0f64.max(0.5 + 0.5 - 2.0));
        // monotone in the margin
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| -rng.random::<f64>() * 3.0).collect();
            let p: Vec<f64> = (0..4).map(|_| -rng.random::<f64>() * 3.0).collect();
            let n: Vec<f64> = (0..4).map(|_| -rng.random::<f64>() * 3.0).collect();
            let m = [1u8, 1, 1, 1];
            let lo = contrastive_loss(&a, &p, &n, &m, 0.2).unwrap();
            let hi = contrastive_loss(&a, &p, &n, &m, 0.9).unwrap();
            assert!(hi >= lo && lo >= 0.0);
        }
    }

    #[test]
    fn feature_loss_examples_and_brute_force() {
        let mk =
            |rows: usize, dim: usize, vals: Vec<f64>| FeatureTrace { features: vals, rows, dim };
        let a = mk(1, 2, vec![1.0, 0.0]);
        let b = mk(1, 2, vec![0.0, 1.0]);
        assert_eq!(feature_matching_loss(&a, &a, &[1]).unwrap(), 0.0);
        assert_eq!(feature_matching_loss(&a, &b, &[1]).unwrap(), 2.0);
        assert_eq!(feature_matching_loss(&a, &b, &[0]).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = 5;
        let dim = 3;
        let fa: Vec<f64> = (0..rows * dim).map(|_| rng.random::<f64>()).collect();
        let fb: Vec<f64> = (0..rows * dim).map(|_| rng.random::<f64>()).collect();
        let mask: Vec<u8> = (0..rows).map(|_| rng.random_range(0..2u8)).collect();
        let got =
            feature_matching_loss(&mk(rows, dim, fa.clone()), &mk(rows, dim, fb.clone()), &mask)
                .unwrap();
        let mut want = 0.0;
        for t in 0..rows {
            for j in 0..dim {
                if mask[t] == 1 {
                    let d = fa[t * dim + j] - fb[t * dim + j];
                    want += d * d;
                }
            }
        }
        assert!((got - want).abs() < 1e-12);
        // shape mismatch errors
        let shorter = mk(4, 3, fb[..12].to_vec());
        assert!(matches!(
            feature_matching_loss(&mk(rows, dim, fa), &shorter, &mask),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn total_loss_combinations() {
        let mut cfg = DistillConfig::default();
        // all auxiliaries disabled: total equals distill
        let b = total_loss(vec![0.4], 0.4, 9.0, 9.0, &cfg);
        assert_eq!(b.total, 0.4);
        assert_eq!(b.contrastive, 0.0);
        assert_eq!(b.feature, 0.0);
        // documented linear combination
        cfg.contrast_enabled = true;
        cfg.feat_enabled = true;
        cfg.lambda_aux = 0.1;
        cfg.lambda_feat = 0.05;
        let b = total_loss(vec![0.4], 0.4, 1.0, 2.0, &cfg);
        assert!((b.total - 0.6).abs() < 1e-12);
        assert!((b.total - (b.distill + 0.1 * b.contrastive + 0.05 * b.feature)).abs() < 1e-9);
        // zero coefficient computes the component but leaves the total alone
        cfg.lambda_aux = 0.0;
        let b = total_loss(vec![0.4], 0.4, 1.0, 0.0, &cfg);
        assert_eq!(b.contrastive, 1.0);
        assert!((b.total - 0.4).abs() < 1e-12);
    }

    #[test]
    fn config_validation_rejects_bad_knobs() {
        let mut cfg = DistillConfig { alpha: 1.0, ..DistillConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.5;
        cfg.kappa = Some(0.0);
        assert!(cfg.validate().is_err());
        cfg.kappa = Some(0.5);
        cfg.validate().unwrap();
    }
}
