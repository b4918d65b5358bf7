//! Numerical machinery shared by the three solvers: geometric annealing
//! ladders, the exponential capacity penalty, log-domain reductions and a
//! damped fixed-point iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on `theta * slack` before exponentiation (applied symmetrically).
pub const EXPONENT_CLAMP: f64 = 60.0;

/// Geometric ladders for the outer (`beta`) and inner (`beta_prime`) loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub alpha: f64,
    pub betap_min: f64,
    pub betap_max: f64,
    pub alphap: f64,
    /// Restart the `beta_prime` ladder at `betap_min` for every `beta`.
    /// When false, only the first `beta` block walks the ladder; later
    /// blocks stay at `betap_max`.
    pub reset_betap: bool,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            beta_min: 1e-3,
            beta_max: 1e3,
            alpha: 1.1,
            betap_min: 1e-2,
            betap_max: 1e3,
            alphap: 2.0,
            reset_betap: true,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.beta_min, self.beta_max, self.betap_min, self.betap_max];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter(
                "schedule bounds must be positive and finite".into(),
            ));
        }
        if self.beta_min >= self.beta_max || self.betap_min >= self.betap_max {
            return Err(Error::InvalidParameter(
                "schedule minimum must be below its maximum".into(),
            ));
        }
        if !(self.alpha > 1.0 && self.alphap > 1.0) {
            return Err(Error::InvalidParameter(
                "annealing rates must exceed 1".into(),
            ));
        }
        Ok(())
    }

    pub fn beta_ladder(&self) -> Result<Vec<f64>> {
        geometric_ladder(self.beta_min, self.beta_max, self.alpha)
    }

    pub fn betap_ladder(&self) -> Result<Vec<f64>> {
        geometric_ladder(self.betap_min, self.betap_max, self.alphap)
    }

    /// The `(beta, beta_prime)` pairs visited by the nested loops, grouped
    /// per `beta`. With `constrained == false` every block is `[0.0]`.
    pub fn blocks(&self, constrained: bool) -> Result<Vec<(f64, Vec<f64>)>> {
        self.validate()?;
        let betas = self.beta_ladder()?;
        let inner = if constrained {
            self.betap_ladder()?
        } else {
            vec![0.0]
        };
        Ok(betas
            .into_iter()
            .enumerate()
            .map(|(k, beta)| {
                if k == 0 || self.reset_betap || !constrained {
                    (beta, inner.clone())
                } else {
                    (beta, vec![*inner.last().unwrap()])
                }
            })
            .collect())
    }
}

/// Penalty sharpness and feasibility tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub theta: f64,
    pub exponent_clamp: f64,
    pub epsilon_feasible: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            theta: 10.0,
            exponent_clamp: EXPONENT_CLAMP,
            epsilon_feasible: 0.01,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 1.0 && self.theta.is_finite()) {
            return Err(Error::InvalidParameter("theta must be >= 1".into()));
        }
        if !(self.epsilon_feasible > 0.0) {
            return Err(Error::InvalidParameter(
                "epsilon_feasible must be positive".into(),
            ));
        }
        if !(self.exponent_clamp > 0.0) {
            return Err(Error::InvalidParameter(
                "exponent_clamp must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn value(&self, slacks: &[f64]) -> f64 {
        penalty_value_clamped(slacks, self.theta, self.exponent_clamp)
    }

    pub fn gradient(&self, slacks: &[f64]) -> Vec<f64> {
        penalty_gradient_clamped(slacks, self.theta, self.exponent_clamp)
    }

    /// `e^{theta * eps}`: the smallest penalty term a violated constraint can
    /// produce.
    pub fn violation_floor(&self) -> f64 {
        (self.theta * self.epsilon_feasible)
            .min(self.exponent_clamp)
            .exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-8,
            max_iters: 500,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter("damping must lie in (0, 1]".into()));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "fixed-point tolerance and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `lo, lo*rate, lo*rate^2, ...` up to and including the first value `>= hi`.
///
/// The length is `ceil(log(hi/lo) / log(rate)) + 1`. Values are computed as
/// `lo * rate^k` rather than by repeated multiplication so that exact powers
/// land exactly on `hi`.
pub fn geometric_ladder(lo: f64, hi: f64, rate: f64) -> Result<Vec<f64>> {
    if !(lo > 0.0 && lo.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ladder start {lo} must be positive"
        )));
    }
    if !(rate > 1.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ladder rate {rate} must exceed 1"
        )));
    }
    if !(hi > lo && hi.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "ladder end {hi} must exceed its start {lo}"
        )));
    }
    let steps = ((hi / lo).ln() / rate.ln() - 1e-9).ceil() as i32;
    Ok((0..=steps).map(|k| lo * rate.powi(k)).collect())
}

fn clamped_exp(x: f64, clamp: f64) -> f64 {
    x.clamp(-clamp, clamp).exp()
}

/// `sum_j exp(theta * slack_j)` with every exponent clamped to `[-60, 60]`.
pub fn penalty_value(slacks: &[f64], theta: f64) -> f64 {
    penalty_value_clamped(slacks, theta, EXPONENT_CLAMP)
}

pub fn penalty_value_clamped(slacks: &[f64], theta: f64, clamp: f64) -> f64 {
    slacks.iter().map(|s| clamped_exp(theta * s, clamp)).sum()
}

/// `theta * exp(theta * slack_j)` per component, clamped like [`penalty_value`].
pub fn penalty_gradient(slacks: &[f64], theta: f64) -> Vec<f64> {
    penalty_gradient_clamped(slacks, theta, EXPONENT_CLAMP)
}

pub fn penalty_gradient_clamped(slacks: &[f64], theta: f64, clamp: f64) -> Vec<f64> {
    slacks
        .iter()
        .map(|s| theta * clamped_exp(theta * s, clamp))
        .collect()
}

/// `log sum_i exp(v_i)` by max-shift. `-inf` entries carry no mass.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport("every term is -inf".into()));
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Like [`log_sum_exp`] but returns `-inf` for an empty support instead of
/// an error.
pub(crate) fn lse_or_neg_inf(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights in place into probabilities. Returns the log
/// partition, or `-inf` (leaving the row zeroed) when every weight is `-inf`.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return max;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Iterates `x <- (1 - damping) x + damping map(x)` until
/// `max |map(x) - x| <= tol`. Returns the accepted point (the one whose
/// residual passed, not its image) and the number of map evaluations.
pub fn damped_fixed_point<F>(
    mut map: F,
    init: Vec<f64>,
    cfg: &FixedPointConfig,
) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut x = init;
    let mut residual = f64::INFINITY;
    for iter in 1..=cfg.max_iters {
        let fx = map(&x)?;
        if fx.len() != x.len() {
            return Err(Error::InvalidParameter(
                "fixed-point map changed the dimension".into(),
            ));
        }
        residual = x
            .iter()
            .zip(&fx)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if residual.is_nan() {
            break;
        }
        if residual <= cfg.tol {
            return Ok((x, iter));
        }
        for (xi, fi) in x.iter_mut().zip(&fx) {
            *xi = (1.0 - cfg.damping) * *xi + cfg.damping * fi;
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iters,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn ladder_examples() {
        assert_eq!(
            geometric_ladder(1.0, 8.0, 2.0).unwrap(),
            vec![1.0, 2.0, 4.0, 8.0]
        );
        assert_eq!(geometric_ladder(1.0, 1.5, 2.0).unwrap(), vec![1.0, 2.0]);

        // Independent recurrence: keep multiplying until the value reaches hi.
        let mut expected = vec![0.01];
        while *expected.last().unwrap() < 100.0 {
            let next = expected.last().unwrap() * 1.5;
            expected.push(next);
        }
        let ladder = geometric_ladder(0.01, 100.0, 1.5).unwrap();
        assert_eq!(expected.len(), 24);
        assert_eq!(ladder.len(), 24);
        assert!(*ladder.last().unwrap() >= 100.0);
        for (a, b) in ladder.iter().zip(&expected) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn ladder_rejects_bad_parameters() {
        assert!(geometric_ladder(0.0, 1.0, 2.0).is_err());
        assert!(geometric_ladder(-1.0, 1.0, 2.0).is_err());
        assert!(geometric_ladder(1.0, 2.0, 1.0).is_err());
        assert!(geometric_ladder(2.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_value(&[0.0, 0.0], 10.0), 2.0);
        let deep = penalty_value(&[-10.0, -10.0], 10.0);
        assert!(deep > 0.0 && deep < 1e-25);
        assert_relative_eq!(
            penalty_value(&[0.1, -0.1], 10.0),
            1f64.exp() + (-1f64).exp(),
            max_relative = 1e-15
        );
        assert_relative_eq!(penalty_value(&[0.1, -0.1], 10.0), 3.08616, epsilon = 1e-5);
    }

    #[test]
    fn penalty_clamp_keeps_values_finite() {
        let v = penalty_value(&[1e6, 7.0], 10.0);
        assert!(v.is_finite());
        assert_eq!(v, 2.0 * 60f64.exp());
        let g = penalty_gradient(&[1e6], 10.0);
        assert_eq!(g[0], 10.0 * 60f64.exp());
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(penalty_gradient(&[0.0], 10.0), vec![10.0]);
        let g = penalty_gradient(&[-1.0], 10.0);
        assert_relative_eq!(g[0], 10.0 * (-10f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(g[0], 4.54e-4, max_relative = 1e-3);

        let slacks = [0.05, -0.02];
        let g = penalty_gradient(&slacks, 5.0);
        let h = 1e-6;
        for j in 0..2 {
            let mut up = slacks;
            let mut dn = slacks;
            up[j] += h;
            dn[j] -= h;
            let fd = (penalty_value(&up, 5.0) - penalty_value(&dn, 5.0)) / (2.0 * h);
            assert_relative_eq!(g[j], fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn lse_examples() {
        assert_relative_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln());
        assert_relative_eq!(log_sum_exp(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln());
        assert_eq!(log_sum_exp(&[0.0, f64::NEG_INFINITY]).unwrap(), 0.0);
        assert!(matches!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(Error::EmptySupport(_))
        ));
    }

    #[test]
    fn fixed_point_examples() {
        let cfg = FixedPointConfig::default();
        let init = vec![0.3, 0.7];
        let (x, iters) = damped_fixed_point(|x| Ok(x.to_vec()), init.clone(), &cfg).unwrap();
        assert_eq!(x, init);
        assert_eq!(iters, 1);

        let (x, _) = damped_fixed_point(|x| Ok(vec![0.5 * x[0]]), vec![1.0], &cfg).unwrap();
        assert!(x[0].abs() < 1e-7);

        let err = damped_fixed_point(|x| Ok(vec![x[0] + 1.0]), vec![0.0], &cfg).unwrap_err();
        assert!(matches!(
            err,
            Error::NoConvergence {
                iterations: 500,
                ..
            }
        ));
    }

    #[test]
    fn schedule_blocks_follow_reset_policy() {
        let mut s = AnnealSchedule {
            beta_min: 1.0,
            beta_max: 4.0,
            alpha: 2.0,
            betap_min: 1.0,
            betap_max: 8.0,
            alphap: 2.0,
            reset_betap: true,
        };
        let blocks = s.blocks(true).unwrap();
        assert_eq!(blocks.len(), 3);
        assert!(blocks.iter().all(|(_, bp)| bp.len() == 4));
        s.reset_betap = false;
        let blocks = s.blocks(true).unwrap();
        assert_eq!(blocks[0].1.len(), 4);
        assert_eq!(blocks[1].1, vec![8.0]);
        assert_eq!(s.blocks(false).unwrap()[2].1, vec![0.0]);
        s.alpha = 1.0;
        assert!(s.blocks(true).is_err());
    }

    proptest! {
        #[test]
        fn ladder_length_formula(lo in 1e-4f64..10.0, span in 1.01f64..1e4, rate in 1.05f64..4.0) {
            let hi = lo * span;
            let ladder = geometric_ladder(lo, hi, rate).unwrap();
            let expected = ((hi / lo).ln() / rate.ln()).ceil() as usize + 1;
            // Exact-power boundaries may land one short of the formula's ceiling
            // because of rounding in the logarithm; allow that single case.
            prop_assert!(ladder.len() == expected || ladder.len() + 1 == expected);
            prop_assert!(*ladder.last().unwrap() >= hi * (1.0 - 1e-9));
            prop_assert!(ladder[ladder.len() - 2] < hi);
        }

        #[test]
        fn lse_shift_invariance(v in prop::collection::vec(-50f64..50.0, 1..8), c in -500f64..500.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = log_sum_exp(&shifted).unwrap();
            let b = log_sum_exp(&v).unwrap() + c;
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + c.abs().max(b.abs())));
        }

        #[test]
        fn penalty_gradient_matches_central_difference(
            slacks in prop::collection::vec(-0.5f64..0.5, 1..6),
            theta in prop::sample::select(vec![1.0, 5.0, 10.0]),
        ) {
            let g = penalty_gradient(&slacks, theta);
            let h = 1e-6;
            for j in 0..slacks.len() {
                let mut up = slacks.clone();
                let mut dn = slacks.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (penalty_value(&up, theta) - penalty_value(&dn, theta)) / (2.0 * h);
                prop_assert!((g[j] - fd).abs() <= 1e-5 * g[j].abs());
            }
        }

        #[test]
        fn penalty_feasibility_proxy(
            slacks in prop::collection::vec(-1f64..1.0, 1..6),
            theta in 1f64..20.0,
        ) {
            let v = penalty_value(&slacks, theta);
            prop_assert!(v > 0.0);
            if slacks.iter().all(|s| *s <= 0.0) {
                prop_assert!(v <= slacks.len() as f64);
            }
            let eps = 0.01;
            if slacks.iter().any(|s| *s >= eps) {
                prop_assert!(v >= (theta * eps).exp());
            }
            // monotone in each component
            for j in 0..slacks.len() {
                let mut up = slacks.clone();
                up[j] += 0.1;
                prop_assert!(penalty_value(&up, theta) >= v);
            }
        }
    }
}
